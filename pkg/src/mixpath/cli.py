"""Command-line front end: ``mixpath <command> [--config PATH] [overrides]``.

Every command works inside ``<runs root>/<config hash>/`` where the runs root
is ``--out``, else ``$MIXPATH_RUNS_DIR``, else ``./runs``. Exit codes: 0 ok,
2 malformed config or arguments, 3 missing or mismatched input, 4 numeric
failure or an undefined statistic.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .bench import BenchTable, build_bench
from .config import ConfigError, RunConfig, field_names, parse_override
from .data import load_dataset, make_splits, save_dataset
from .cost import max_flops
from .engine import NumericError
from .nsga2 import (
    SearchTimeout,
    SupernetEvaluator,
    TableEvaluator,
    hypervolume,
    run_nsga2,
    run_random_search,
)
from .ranking import (
    ablation_table,
    dumps_json,
    feature_similarity,
    make_probe,
    ranking_experiment,
    rows_to_csv,
    sbn_stats,
    UndefinedValueError,
)
from .space import enumerate_space, space_size, substream
from .supernet import train_supernet

log = logging.getLogger("mixpath")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4


class InputError(Exception):
    """A required input is missing or does not match this run."""


class Run:
    """Resolved configuration plus the run directory it owns."""

    def __init__(self, cfg: RunConfig, root: Path, workers: int = 1):
        self.cfg = cfg
        self.hash = cfg.config_hash()
        self.dir = root / self.hash
        self.workers = workers

    def path(self, name: str) -> Path:
        return self.dir / name

    def ensure(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        cfg_path = self.path("config.json")
        if not cfg_path.exists():
            self.cfg.save(cfg_path)

    def data(self) -> dict:
        p = self.path("data.npz")
        if not p.exists():
            raise InputError(f"{p} not found; run `mixpath gen-data` with this config first")
        return load_dataset(p)

    def stamp(self, extra: dict | None = None) -> dict:
        return {"config_hash": self.hash, "seed": self.cfg.seed, **(extra or {})}


# --------------------------------------------------------------------------
# helpers

def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv(path: Path, rows: list, header: list, run: Run) -> None:
    rows = [{"config_hash": run.hash, **r} for r in rows]
    _write(path, rows_to_csv(rows, ["config_hash"] + header))


def _load_checkpoint(run: Run, path: str | None):
    p = Path(path) if path else run.path("checkpoint.mxpt")
    if not p.exists():
        raise InputError(f"{p} not found; run `mixpath train` first")
    try:
        net, meta = ckpt.load_supernet(p)
    except ckpt.CheckpointError as exc:
        raise InputError(f"{p}: {exc}") from None
    return net, meta


def _load_bench(run: Run, path: str | None) -> BenchTable:
    p = Path(path) if path else run.path("bench.jsonl")
    if not p.exists():
        raise InputError(f"{p} not found; run `mixpath oracle` first")
    try:
        return BenchTable.load(p)
    except (ValueError, KeyError) as exc:
        raise InputError(f"{p}: {exc}") from None


def _check_pair(run: Run, meta: dict | None, table: BenchTable | None) -> None:
    """Refuse a supernet and an oracle that describe different spaces or data."""
    space_fp = run.cfg.space().fingerprint()
    if meta is not None:
        if meta.get("space_fingerprint") != space_fp:
            raise InputError("checkpoint search space does not match the config "
                             f"({meta.get('space_fingerprint')} != {space_fp})")
        if meta.get("data") != run.cfg.data_desc():
            raise InputError("checkpoint was trained on different data than the config describes")
    if table is not None:
        if table.space_hash != space_fp:
            raise InputError(f"oracle search space does not match ({table.space_hash} != {space_fp})")
        if table.data != run.cfg.data_desc():
            raise InputError("oracle was built on different data than the config describes")


def _train(run: Run, data: dict, sbn_mode: str, seed: int, probe: bool = True):
    cfg = run.cfg
    spec = cfg.space().with_(sbn_mode=sbn_mode)
    pr = make_probe(data, cfg.probe_every, cfg.probe_models, seed) if probe else None
    return train_supernet(spec, (data["x_train"], data["y_train"]), cfg.hyper(), seed, probe=pr)


def _meta(run: Run, net, seed: int) -> dict:
    return run.stamp({"seed": seed, "sbn_mode": net.sbn_mode, "space": net.spec.to_dict(),
                      "space_fingerprint": net.spec.fingerprint(), "data": run.cfg.data_desc(),
                      "hyper": run.cfg.hyper().to_dict()})


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(run: Run, args) -> int:
    cfg = run.cfg
    run.ensure()
    splits = make_splits(cfg.seed, cfg.n_train, cfg.n_val, cfg.image_size, 3, cfg.num_classes, cfg.noise)
    save_dataset(run.path("data.npz"), splits)
    _write(run.path("data.json"), dumps_json(run.stamp({"data": cfg.data_desc()})))
    print(run.path("data.npz"))
    return EXIT_OK


def cmd_train(run: Run, args) -> int:
    cfg = run.cfg
    data = run.data()
    net, tlog = _train(run, data, cfg.sbn_mode, cfg.seed)
    ckpt.save_supernet(run.path("checkpoint.mxpt"), net, _meta(run, net, cfg.seed))
    _write(run.path("train_log.json"), dumps_json(run.stamp({"epochs": tlog.epochs})))
    rows = [{"epoch": p["epoch"], "mean_acc": p["mean"], "var_acc": p["var"]} for p in tlog.probes]
    _csv(run.path("stats/stability.csv"), rows, ["epoch", "mean_acc", "var_acc"], run)
    print(run.path("checkpoint.mxpt"))
    return EXIT_OK


def bench_masks(cfg: RunConfig) -> list:
    """Every mask when ``bench_samples`` is 0 or covers the space, else a seeded sample."""
    spec = cfg.space()
    masks = enumerate_space(spec)
    if cfg.bench_samples <= 0 or cfg.bench_samples >= len(masks):
        return masks
    rng = substream(cfg.seed, "bench-sample")
    return [masks[i] for i in sorted(rng.choice(len(masks), cfg.bench_samples, replace=False).tolist())]


def cmd_oracle(run: Run, args) -> int:
    cfg = run.cfg
    data = run.data()
    table = build_bench(cfg.space(), bench_masks(cfg), cfg.bench_seeds, data, cfg.hyper(),
                        cfg.data_desc(), workers=run.workers)
    table.extra = {"config_hash": run.hash}
    table.save(run.path("bench.jsonl"))
    if not table.complete:
        log.warning("oracle has failed rows; see the 'error' field in %s", run.path("bench.jsonl"))
    print(run.path("bench.jsonl"))
    return EXIT_OK


def cmd_rank(run: Run, args) -> int:
    cfg = run.cfg
    table = _load_bench(run, args.bench)
    if cfg.rank_samples > len(table.lookup()):
        raise InputError(f"sample_count > oracle size ({cfg.rank_samples} > {len(table.lookup())})")
    net, meta = _load_checkpoint(run, args.checkpoint)
    _check_pair(run, meta, table)
    data = run.data()
    ok_table = BenchTable(table.spec, table.hyper, table.data, [r for r in table.rows if r.error is None])

    def reports_for(n, seed, with_calibration):
        out = [ranking_experiment(n, ok_table, cfg.rank_samples, data, False, seed, cfg.calib_batches,
                                  cfg.batch_size)]
        if with_calibration:
            out.append(ranking_experiment(n, ok_table, cfg.rank_samples, data, True, seed,
                                          cfg.calib_batches, cfg.batch_size))
        return out

    reports = reports_for(net, cfg.seed, cfg.calibrate)
    rows = []
    for i, m in enumerate(reports[0].masks):
        row = {"mask": "-".join(str(b) for b in m), "true_acc": reports[0].truth[i],
               "oneshot_raw": reports[0].oneshot[i]}
        row["oneshot_calibrated"] = reports[1].oneshot[i] if cfg.calibrate else ""
        rows.append(row)
    _csv(run.path("rank.csv"), rows, ["mask", "true_acc", "oneshot_raw", "oneshot_calibrated"], run)
    summary = run.stamp({"reports": [r.summary() for r in reports]})
    if cfg.ablation:
        abl = []
        for seed in cfg.ablation_seeds:
            for mode in ("vanilla", cfg.sbn_mode if cfg.sbn_mode != "vanilla" else "linear"):
                p = run.path(f"ablation/{mode}-seed{seed}.mxpt")
                if p.exists():
                    n, _ = ckpt.load_supernet(p)
                else:
                    n, _ = _train(run, data, mode, seed, probe=False)
                    p.parent.mkdir(parents=True, exist_ok=True)
                    ckpt.save_supernet(p, n, _meta(run, n, seed))
                abl.extend(reports_for(n, seed, True))
        grid = ablation_table(abl)
        summary["ablation"] = grid
        _csv(run.path("ablation.csv"),
             [{"config": k, "mean_tau": v["mean"], "std_tau": v["std"],
               "taus": " ".join(repr(t) for t in v["taus"])} for k, v in grid.items()],
             ["config", "mean_tau", "std_tau", "taus"], run)
    _write(run.path("rank.json"), dumps_json(summary))
    for r in reports:
        print(f"tau[{r.sbn_mode}{'+calib' if r.calibrated else ''}] = {r.tau:.4f}")
    print(run.path("rank.csv"))
    return EXIT_OK


def _front_rows(result) -> list:
    return [{"mask": list(i.mask), "acc": i.acc, "flops": i.flops} for i in result.front]


def cmd_search(run: Run, args) -> int:
    cfg = run.cfg
    spec = cfg.space()
    scfg = cfg.search()
    if cfg.search_backend == "bench":
        table = _load_bench(run, args.bench)
        _check_pair(run, None, table)
        if len(table.lookup()) < space_size(spec):
            raise InputError("bench backend needs an oracle over the whole space "
                             "(set bench_samples to 0 and rerun `mixpath oracle`)")
        evaluator = TableEvaluator(table)
    else:
        net, meta = _load_checkpoint(run, args.checkpoint)
        _check_pair(run, meta, None)
        evaluator = SupernetEvaluator(net, run.data(), cfg.calibrate, cfg.calib_batches, cfg.batch_size)
    res = run_nsga2(spec, scfg, evaluator, cfg.seed)
    lines = [json.dumps(run.stamp({"event": "header", "search": scfg.to_dict(),
                                   "backend": cfg.search_backend}), sort_keys=True)]
    lines += [json.dumps(e, sort_keys=True) for e in res.audit]
    _write(run.path("search.jsonl"), "\n".join(lines) + "\n")
    ref = (1.0 / spec.num_classes, float(min(scfg.flops_max, max_flops(spec))))
    summary = run.stamp({"evaluations": res.evaluations, "exhausted": res.exhausted,
                         "picks": [i.to_json() for i in res.picks], "front": _front_rows(res),
                         "hypervolume": hypervolume([(i.acc, i.flops) for i in res.front], *ref),
                         "reference_point": list(ref)})
    if cfg.random_baseline:
        rnd = run_random_search(spec, scfg, evaluator, cfg.seed, budget_evals=res.evaluations)
        summary["random"] = {"evaluations": rnd.evaluations, "front": _front_rows(rnd),
                             "hypervolume": hypervolume([(i.acc, i.flops) for i in rnd.front], *ref)}
    _write(run.path("picks.json"), dumps_json(summary))
    print(run.path("search.jsonl"))
    return EXIT_OK


def cmd_stats(run: Run, args) -> int:
    cfg = run.cfg
    net, meta = _load_checkpoint(run, args.checkpoint)
    _check_pair(run, meta, None)
    data = run.data()
    out = {}
    if net.sbn_mode != "vanilla":
        dump = sbn_stats(net)
        fields_ = ["running_mean", "running_var", "gamma", "beta"]
        _csv(run.path("stats/sbn_params.csv"), list(dump.rows()), ["block", "key", "channel"] + fields_, run)
        _csv(run.path("stats/sbn_ratios.csv"), list(dump.ratio_rows()), ["block", "k", "channel"] + fields_, run)
        out["ratio_medians"] = {str(b): dump.medians(b) for b in dump.ratios}
    else:
        log.info("vanilla checkpoint: no SBN bank to dump")
    sim = feature_similarity(net, cfg.stats_block, data["x_val"][:64])
    _csv(run.path("stats/similarity.csv"), list(sim.rows()), ["a", "b", "cosine"], run)
    _csv(run.path("stats/magnitudes.csv"),
         [{"selection": s, "pre_norm": a, "post_norm": b}
          for s, a, b in zip(sim.labels, sim.pre_norm, sim.post_norm)],
         ["selection", "pre_norm", "post_norm"], run)
    out["similarity_undefined"] = sim.undefined
    _write(run.path("stats/summary.json"), dumps_json(run.stamp(out)))
    print(run.path("stats"))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "oracle": cmd_oracle,
            "rank": cmd_rank, "search": cmd_search, "stats": cmd_stats}


# --------------------------------------------------------------------------
# argument handling

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--workers", type=int, default=1, help="parallel training workers")
    common.add_argument("--out", help="runs root (default $MIXPATH_RUNS_DIR or ./runs)")
    common.add_argument("--checkpoint", help="supernet checkpoint to use instead of the run's own")
    common.add_argument("--bench", help="oracle table to use instead of the run's own")
    common.add_argument("-v", "--verbose", action="store_true")
    over = common.add_argument_group("config overrides")
    for name in field_names():
        if name == "seed":
            continue
        over.add_argument("--" + name.replace("_", "-"), dest="set_" + name, metavar="V")
    p = argparse.ArgumentParser(prog="mixpath", description="Multi-path one-shot NAS toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    sub.add_parser("show-config", parents=[common], help="print the resolved config and its hash")
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    for name in field_names():
        raw = getattr(args, "set_" + name, None)
        if raw is not None:
            changes[name] = parse_override(name, raw)
    if args.seed is not None:
        changes["seed"] = args.seed
    return cfg.with_(**changes) if changes else cfg


def runs_root(args) -> Path:
    return Path(args.out or os.environ.get("MIXPATH_RUNS_DIR") or "runs")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.command == "show-config":
        print(cfg.dumps(), end="")
        print(f"config_hash {cfg.config_hash()}")
        return EXIT_OK
    if args.workers < 1:
        print("--workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg, runs_root(args), args.workers)
    run.ensure()
    try:
        return COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, UndefinedValueError) as exc:
        print(f"numeric failure in {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SearchTimeout as exc:
        print(f"search failed: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
