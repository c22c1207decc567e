"""Multi-path one-shot architecture search with shadow batch normalization.

A small numpy engine, a weight-sharing supernet whose blocks run up to ``m``
parallel paths, BN calibration and rank-correlation tooling, a standalone
training oracle, a cost model and an NSGA-II search.
"""
from .bench import BenchRecord, BenchTable, build_bench, train_standalone
from .config import RunConfig
from .cost import arch_cost, flops, layer_cost
from .nsga2 import SearchConfig, run_nsga2, run_random_search
from .ranking import calibrate_bn, evaluate_oneshot, kendall_tau, ranking_experiment, sbn_stats
from .space import SearchSpaceSpec, TrainHyper, enumerate_space, sample_mask
from .supernet import Supernet, forward_submodel, train_supernet

__version__ = "0.1.0"

__all__ = [
    "BenchRecord", "BenchTable", "RunConfig", "SearchConfig", "SearchSpaceSpec", "Supernet",
    "TrainHyper", "arch_cost", "build_bench", "calibrate_bn", "enumerate_space",
    "evaluate_oneshot", "flops", "forward_submodel", "kendall_tau", "layer_cost",
    "ranking_experiment", "run_nsga2", "run_random_search", "sample_mask", "sbn_stats",
    "train_standalone", "train_supernet",
]
