"""Ground-truth table of standalone-trained architectures (the mini-bench)."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .cost import arch_cost
from .ranking import accuracy
from .space import SearchSpaceSpec, TrainHyper, enumerate_space, stable_hash, validate_mask
from .supernet import forward_submodel, train_supernet

log = logging.getLogger(__name__)

__all__ = ["BenchRecord", "BenchTable", "build_bench", "enumerate_space", "train_standalone"]


@dataclass
class BenchRecord:
    mask: tuple
    accuracy: float | None
    seed_accuracies: list
    flops: int
    params: int
    error: str | None = None

    def to_json(self) -> dict:
        d = {"mask": list(self.mask), "acc": self.accuracy, "seed_accs": self.seed_accuracies,
             "flops": self.flops, "params": self.params}
        if self.error is not None:
            d["error"] = self.error
        return d

    @classmethod
    def from_json(cls, d: dict) -> "BenchRecord":
        return cls(tuple(d["mask"]), d["acc"], list(d["seed_accs"]), int(d["flops"]),
                   int(d["params"]), d.get("error"))


@dataclass
class BenchTable:
    spec: SearchSpaceSpec
    hyper: dict
    data: dict
    rows: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return stable_hash({"space": self.spec.fingerprint(), "hyper": self.hyper, "data": self.data})

    @property
    def space_hash(self) -> str:
        return self.spec.fingerprint()

    @property
    def complete(self) -> bool:
        return all(r.error is None for r in self.rows)

    def lookup(self) -> dict:
        return {r.mask: r for r in self.rows if r.error is None}

    def header(self) -> dict:
        return {"fingerprint": self.fingerprint, "space_hash": self.space_hash,
                "space": self.spec.to_dict(), "hyper": self.hyper, "data": self.data,
                "complete": self.complete, "count": len(self.rows), **self.extra}

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(r.to_json(), sort_keys=True) for r in self.rows]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "BenchTable":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty bench file")
        head = json.loads(lines[0])
        extra = {k: v for k, v in head.items()
                 if k not in ("fingerprint", "space_hash", "space", "hyper", "data", "complete", "count")}
        table = cls(SearchSpaceSpec.from_dict(head["space"]), head["hyper"], head["data"],
                    [BenchRecord.from_json(json.loads(ln)) for ln in lines[1:]], extra)
        if table.fingerprint != head["fingerprint"]:
            raise ValueError("bench header fingerprint does not match its contents")
        seen = set()
        for r in table.rows:
            if r.mask in seen:
                raise ValueError(f"duplicate mask {r.mask} in bench table")
            seen.add(r.mask)
        return table

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "BenchTable":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def train_standalone(spec: SearchSpaceSpec, mask, data: dict, hyper: TrainHyper, seed: int) -> float:
    """Train the fixed architecture ``mask`` from scratch; held-out top-1 accuracy."""
    mask = validate_mask(spec, mask)
    net, _ = train_supernet(spec, (data["x_train"], data["y_train"]), hyper, seed, fixed_mask=mask)
    return accuracy(forward_submodel(net, mask, data["x_val"]), data["y_val"])


def _train_one(args):
    spec, mask, data, hyper, seed = args
    try:
        return train_standalone(spec, mask, data, hyper, seed), None
    except (E.NumericError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def build_bench(spec: SearchSpaceSpec, masks, seeds, data: dict, hyper: TrainHyper,
                data_desc: dict | None = None, workers: int = 1) -> BenchTable:
    """Train every mask under every seed and tabulate mean accuracy and cost."""
    masks = [validate_mask(spec, m) for m in masks]
    if not masks:
        raise ValueError("no masks to train")
    if len(set(masks)) != len(masks):
        raise ValueError("duplicate masks requested")
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one training seed")
    jobs = [(spec, m, data, hyper, s) for m in masks for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_train_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = []
        for i, job in enumerate(jobs):
            results.append(_train_one(job))
            if (i + 1) % 50 == 0:
                log.info("bench: %d/%d trainings done", i + 1, len(jobs))
    rows = []
    for i, m in enumerate(masks):
        res = results[i * len(seeds):(i + 1) * len(seeds)]
        errors = [e for _, e in res if e is not None]
        accs = [a for a, _ in res if a is not None]
        cost = arch_cost(spec, m)
        if errors:
            rows.append(BenchRecord(m, None, accs, cost.flops, cost.params, errors[0]))
        else:
            rows.append(BenchRecord(m, float(np.mean(accs)), accs, cost.flops, cost.params))
    return BenchTable(spec, hyper.to_dict(), data_desc or {}, rows)
