"""Post-hoc BN calibration, one-shot evaluation, rank correlation and probes."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .space import SearchSpaceSpec, TrainHyper, active_paths, popcount, sample_mask, substream
from .supernet import Supernet, forward_submodel, train_supernet


class UndefinedValueError(ArithmeticError):
    """A statistic is undefined for the given input (e.g. all values tied)."""


# --------------------------------------------------------------------------
# calibration and evaluation

def calibration_batches(x: np.ndarray, batch_size: int, batches: int):
    """The first ``batches`` consecutive batches of ``x``, in stored order."""
    if batches < 1:
        raise ValueError("need at least one calibration batch")
    out = [x[i * batch_size:(i + 1) * batch_size] for i in range(batches)]
    out = [b for b in out if len(b) >= 2]
    if not out:
        raise ValueError("calibration stream is empty")
    return out


def calibrate_bn(net: Supernet, mask, batches) -> dict:
    """Recompute running statistics of every BN the submodel uses.

    Returns ``{bn name: (mean, var)}`` as a cumulative average of per-batch
    statistics over ``batches``. The network itself is not modified; pass the
    result as ``stats`` to an eval-mode forward.
    """
    acc: dict = {}
    mask = net.check_mask(mask)
    n = 0
    for xb in batches:
        net.forward(xb, mask, "calibrate", acc=acc)
        n += 1
    if n == 0:
        raise ValueError("calibration stream is empty")
    return {name: ((s[0] / s[2]).astype(net.dtype), (s[1] / s[2]).astype(net.dtype))
            for name, s in acc.items()}


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("evaluation set is empty")
    return float((logits.argmax(axis=1) == labels).mean())


def evaluate_oneshot(net: Supernet, mask, x_eval, y_eval, calibrate: bool = False,
                     calib_x=None, calib_batches: int = 8, batch_size: int = 32) -> float:
    """Top-1 accuracy of ``mask`` with inherited weights, optionally after BN calibration."""
    stats = None
    if calibrate:
        if calib_x is None:
            raise ValueError("calibration requested without a calibration set")
        stats = calibrate_bn(net, mask, calibration_batches(calib_x, batch_size, calib_batches))
    return accuracy(forward_submodel(net, mask, x_eval, stats), y_eval)


# --------------------------------------------------------------------------
# Kendall tau-b

def kendall_tau(a, b) -> float:
    """Tie-corrected Kendall tau (tau-b) by exact pair counting."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("need at least two observations")
    iu = np.triu_indices(n, k=1)
    sa = np.sign(a[:, None] - a[None, :])[iu].astype(np.int64)
    sb = np.sign(b[:, None] - b[None, :])[iu].astype(np.int64)
    s = int((sa * sb).sum())
    pairs = n * (n - 1) // 2
    ties_a = int((sa == 0).sum())
    ties_b = int((sb == 0).sum())
    denom = (pairs - ties_a) * (pairs - ties_b)
    if denom == 0:
        raise UndefinedValueError("tau is undefined when one ranking is fully tied")
    return s / math.sqrt(denom)


# --------------------------------------------------------------------------
# ranking experiments

@dataclass
class RankingReport:
    masks: list
    oneshot: list
    truth: list
    tau: float
    sbn_mode: str
    calibrated: bool
    seed: int
    extra: dict = field(default_factory=dict)

    def rows(self):
        for m, o, t in zip(self.masks, self.oneshot, self.truth):
            yield {"mask": "-".join(str(b) for b in m), "oneshot_acc": o, "true_acc": t}

    def to_csv(self) -> str:
        return rows_to_csv(list(self.rows()), ["mask", "oneshot_acc", "true_acc"])

    def summary(self) -> dict:
        return {"tau": self.tau, "sbn_mode": self.sbn_mode, "calibrated": self.calibrated,
                "seed": self.seed, "count": len(self.masks), **self.extra}


def ranking_experiment(net: Supernet, table, sample_count: int, data: dict, calibrate: bool,
                       seed: int, calib_batches: int = 8, batch_size: int = 32) -> RankingReport:
    """Kendall tau between one-shot and ground-truth accuracy on sampled table rows."""
    rows = table.rows
    if sample_count > len(rows):
        raise ValueError(f"sample_count > oracle size ({sample_count} > {len(rows)})")
    if sample_count < 2:
        raise ValueError("need at least two architectures to rank")
    rng = substream(seed, "rank-sample")
    pick = sorted(rng.choice(len(rows), size=sample_count, replace=False).tolist())
    chosen = [rows[i] for i in pick]
    oneshot = [evaluate_oneshot(net, r.mask, data["x_val"], data["y_val"], calibrate,
                                data["x_train"], calib_batches, batch_size) for r in chosen]
    truth = [r.accuracy for r in chosen]
    return RankingReport([r.mask for r in chosen], oneshot, truth, kendall_tau(oneshot, truth),
                         net.sbn_mode, calibrate, seed)


def ablation_table(reports: list) -> dict:
    """Mean and std of tau per (sbn mode, calibrated) cell, in the Table-1 layout."""
    cells: dict = {}
    for r in reports:
        cells.setdefault((r.sbn_mode, r.calibrated), []).append(r.tau)
    out = {}
    for (mode, cal), taus in sorted(cells.items()):
        out[f"{mode}{'+calib' if cal else ''}"] = {
            "mean": float(np.mean(taus)), "std": float(np.std(taus)), "taus": taus}
    return out


# --------------------------------------------------------------------------
# stability probe

def make_probe(data: dict, probe_every: int, probe_models: int, seed: int, batch_size: int = 256):
    if probe_models < 2:
        raise ValueError("probe needs at least two models")
    if probe_every < 1:
        raise ValueError("probe_every must be >= 1")
    rng = substream(seed, "probe")

    def probe(net: Supernet, epoch: int):
        if epoch % probe_every:
            return None
        accs = [accuracy(forward_submodel(net, m, data["x_val"], batch_size=batch_size), data["y_val"])
                for m in (sample_mask(net.spec, 0.5, rng) for _ in range(probe_models))]
        return {"epoch": epoch, "mean": float(np.mean(accs)), "var": float(np.var(accs)),
                "accs": accs}

    return probe


def stability_probe(spec: SearchSpaceSpec, data: dict, hyper: TrainHyper, probe_every: int,
                    probe_models: int, seed: int):
    """Train a supernet and record mean/variance of one-shot accuracy over training.

    Returns ``(net, log)``; ``log.probes`` holds one entry per probed epoch.
    """
    probe = make_probe(data, probe_every, probe_models, seed)
    return train_supernet(spec, (data["x_train"], data["y_train"]), hyper, seed, probe=probe)


# --------------------------------------------------------------------------
# SBN statistics

BN_FIELDS = ("running_mean", "running_var", "gamma", "beta")


@dataclass
class SbnStatsDump:
    mode: str
    params: dict        # block -> key -> field -> array
    ratios: dict        # block -> k -> field -> array (NaN where undefined)

    def medians(self, block: int = 0) -> dict:
        out = {}
        for k, fields in self.ratios[block].items():
            out[k] = {f: (float(np.nanmedian(v)) if np.isfinite(v).any() else float("nan"))
                      for f, v in fields.items()}
        return out

    def rows(self):
        for block, keys in self.params.items():
            for key, fields in keys.items():
                for ch in range(len(fields["gamma"])):
                    yield {"block": block, "key": key, "channel": ch,
                           **{f: float(fields[f][ch]) for f in BN_FIELDS}}

    def ratio_rows(self):
        for block, ks in self.ratios.items():
            for k, fields in ks.items():
                for ch in range(len(fields["gamma"])):
                    yield {"block": block, "k": k, "channel": ch,
                           **{f: float(fields[f][ch]) for f in BN_FIELDS}}


def _ratio(num, den, eps):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.full(num.shape, np.nan)
    ok = np.abs(den) > eps
    out[ok] = num[ok] / den[ok]
    return out


def sbn_stats(net: Supernet, eps: float = 1e-8) -> SbnStatsDump:
    """All SBN parameters plus per-channel SBN_1 / SBN_k ratios for k = 2..m.

    In exponential mode the states for every subset of size k are averaged
    before the ratio is taken.
    """
    if net.sbn_mode == "vanilla":
        raise ValueError("SBN statistics need a linear or exponential bank")
    params, ratios = {}, {}
    for b in net.blocks:
        bank = b.bank
        params[b.index] = {
            (str(k) if bank.mode == "linear" else f"e{k}"): {f: np.array(v, dtype=np.float64)
                                                             for f, v in st.arrays().items()}
            for k, st in bank.states.items()}
        by_card: dict = {}
        for k, st in bank.states.items():
            card = k if bank.mode == "linear" else popcount(k)
            by_card.setdefault(card, []).append(st.arrays())
        avg = {card: {f: np.mean([s[f] for s in states], axis=0) for f in BN_FIELDS}
               for card, states in by_card.items()}
        ratios[b.index] = {k: {f: _ratio(avg[1][f], avg[k][f], eps) for f in BN_FIELDS}
                           for k in sorted(avg) if k >= 2}
    return SbnStatsDump(net.sbn_mode, params, ratios)


# --------------------------------------------------------------------------
# feature similarity

@dataclass
class SimilarityMatrix:
    labels: list          # layer bitmask of each feature vector
    cosine: np.ndarray
    pre_norm: list
    post_norm: list
    undefined: list       # labels whose vector has zero magnitude

    def rows(self):
        for i, li in enumerate(self.labels):
            for j, lj in enumerate(self.labels):
                yield {"a": li, "b": lj, "cosine": float(self.cosine[i, j])}


def cosine_matrix(vectors) -> tuple:
    """Pairwise cosine similarity; rows of zero magnitude come back as NaN and flagged."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    bad = norms == 0
    safe = np.where(bad, 1.0, norms)
    u = v / safe[:, None]
    cos = np.clip(u @ u.T, -1.0, 1.0)
    cos[bad, :] = np.nan
    cos[:, bad] = np.nan
    np.fill_diagonal(cos, np.where(bad, np.nan, 1.0))
    return cos, np.flatnonzero(bad).tolist()


def feature_similarity(net: Supernet, block: int, x_probe: np.ndarray, context_mask=None) -> SimilarityMatrix:
    """Cosine similarity of pre-SBN block features for every legal path selection.

    Earlier blocks run ``context_mask`` (default: path 0 everywhere). Magnitudes
    are L2 norms of the flattened feature tensor before and after the block's
    BN state for that selection, with running statistics.
    """
    spec = net.spec
    if not 0 <= block < spec.num_layers:
        raise IndexError(f"block {block} outside 0..{spec.num_layers - 1}")
    if context_mask is None:
        context_mask = tuple(1 for _ in range(spec.num_layers))
    h = net.block_input(x_probe, context_mask, block)
    b = net.blocks[block]
    labels = [sum(1 << i for i in c) for k in range(1, spec.max_paths + 1)
              for c in combinations(range(spec.n_paths), k)]
    vecs, pre, post = [], [], []
    for bits in labels:
        z, _ = b.pre_sbn(h, bits, "eval")
        y, _ = b.bank.lookup(bits).forward(z, "eval")
        vecs.append(z.ravel())
        pre.append(float(np.linalg.norm(z.astype(np.float64))))
        post.append(float(np.linalg.norm(y.astype(np.float64))))
    cos, bad = cosine_matrix(vecs)
    return SimilarityMatrix(labels, cos, pre, post, [labels[i] for i in bad])


# --------------------------------------------------------------------------
# serialization helpers

def rows_to_csv(rows: list, header: list) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def paths_of(bits: int) -> str:
    return "+".join(str(i) for i in active_paths(bits))
