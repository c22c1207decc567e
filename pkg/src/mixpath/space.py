"""Search space description, architecture masks and mask sampling."""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass
from math import comb

import numpy as np

SBN_MODES = ("vanilla", "linear", "exponential")
AGGREGATIONS = ("sum", "sum-then-1x1-projection")
PATH_INITS = ("kaiming", "dirac")

# an ArchMask is a tuple of per-layer bitmasks; bit i set means path i active
ArchMask = tuple


class MaskError(ValueError):
    """A mask does not fit the search space."""


@dataclass(frozen=True)
class PathSpec:
    op: str = "dwconv"
    kernel: int = 3

    def __post_init__(self):
        if self.op != "dwconv":
            raise ValueError(f"unsupported path op {self.op!r}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {self.kernel}")


@dataclass(frozen=True)
class SearchSpaceSpec:
    """A stack of ``num_layers`` MixPath blocks over a fixed stem and head.

    Every block expands ``channels`` to ``channels * expansion`` with a shared
    1x1 conv, runs the active depthwise paths in parallel, sums them, projects
    back to ``channels`` (when aggregation asks for it) and normalizes the
    result with the block's shadow batch-norm bank.
    """

    paths: tuple = (PathSpec(kernel=3), PathSpec(kernel=5), PathSpec(kernel=7))
    num_layers: int = 4
    max_paths: int = 2
    channels: int = 8
    expansion: int = 2
    image_channels: int = 3
    image_size: int = 8
    num_classes: int = 4
    stem_kernel: int = 3
    aggregation: str = "sum-then-1x1-projection"
    sbn_mode: str = "linear"
    path_init: str = "kaiming"
    path_init_noise: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(
            p if isinstance(p, PathSpec) else PathSpec(**p) for p in self.paths))
        n = len(self.paths)
        if n < 1:
            raise ValueError("need at least one candidate path")
        if not 1 <= self.max_paths <= n:
            raise ValueError(f"max_paths must be in [1, {n}], got {self.max_paths}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.sbn_mode not in SBN_MODES:
            raise ValueError(f"sbn_mode must be one of {SBN_MODES}")
        if self.path_init not in PATH_INITS:
            raise ValueError(f"path_init must be one of {PATH_INITS}")
        if self.path_init_noise < 0:
            raise ValueError("path_init_noise must be >= 0")
        if self.aggregation == "sum" and self.expansion != 1:
            raise ValueError("plain-sum aggregation needs expansion 1 so paths match the block width")
        for v in (self.channels, self.expansion, self.image_channels, self.image_size,
                  self.num_classes, self.stem_kernel):
            if v < 1:
                raise ValueError("dimensions must be positive")

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def mid_channels(self) -> int:
        return self.channels * self.expansion

    @property
    def projection(self) -> bool:
        return self.aggregation == "sum-then-1x1-projection"

    def with_(self, **changes) -> "SearchSpaceSpec":
        d = self.to_dict()
        d.update(changes)
        return SearchSpaceSpec.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["paths"] = [asdict(p) for p in self.paths]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpaceSpec":
        d = dict(d)
        if "paths" in d:
            d["paths"] = tuple(PathSpec(**p) if isinstance(p, dict) else p for p in d["paths"])
        return cls(**d)

    def fingerprint(self, include_sbn: bool = False) -> str:
        """Hash of the architecture space (SBN mode excluded unless asked)."""
        d = self.to_dict()
        if not include_sbn:
            d.pop("sbn_mode")
        return stable_hash(d)


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def popcount(x: int) -> int:
    return bin(x).count("1")


def active_paths(bits: int) -> list:
    return [i for i in range(bits.bit_length()) if bits >> i & 1]


def validate_mask(spec: SearchSpaceSpec, mask) -> ArchMask:
    mask = tuple(int(b) for b in mask)
    if len(mask) != spec.num_layers:
        raise MaskError(f"mask has {len(mask)} layers, space has {spec.num_layers}")
    for layer, bits in enumerate(mask):
        if bits < 0 or bits >> spec.n_paths:
            raise MaskError(f"layer {layer}: bitmask {bits} references a path beyond {spec.n_paths}")
        if not 1 <= popcount(bits) <= spec.max_paths:
            raise MaskError(f"layer {layer}: {popcount(bits)} active paths, allowed 1..{spec.max_paths}")
    return mask


def sample_layer(n: int, m: int, p: float, rng: np.random.Generator) -> int:
    """Bernoulli(p) per path, redrawn until between 1 and ``m`` paths are on."""
    while True:
        on = rng.random(n) < p
        k = int(on.sum())
        if 1 <= k <= m:
            return int(sum(1 << i for i in range(n) if on[i]))


def sample_mask(spec: SearchSpaceSpec, p: float, rng: np.random.Generator) -> ArchMask:
    if not 0.0 < p < 1.0:
        raise ValueError(f"Bernoulli probability must be in (0, 1), got {p}")
    return tuple(sample_layer(spec.n_paths, spec.max_paths, p, rng) for _ in range(spec.num_layers))


def layer_choices(n: int, m: int) -> list:
    """All legal layer bitmasks for ``n`` paths and at most ``m`` active, ascending."""
    return [b for b in range(1, 1 << n) if popcount(b) <= m]


def space_size(spec: SearchSpaceSpec) -> int:
    per_layer = sum(comb(spec.n_paths, i) for i in range(1, spec.max_paths + 1))
    return per_layer ** spec.num_layers


def enumerate_space(spec: SearchSpaceSpec, cap: int = 100_000) -> list:
    """Every legal mask in lexicographic order."""
    size = space_size(spec)
    if size > cap:
        raise ValueError(f"space has {size} architectures (cap {cap}); sample masks instead")
    choices = layer_choices(spec.n_paths, spec.max_paths)
    return [tuple(m) for m in itertools.product(choices, repeat=spec.num_layers)]


def mask_kernels(spec: SearchSpaceSpec, mask) -> list:
    return [[spec.paths[i].kernel for i in active_paths(b)] for b in mask]


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one purpose, derived from the run seed and a fixed label."""
    key = int.from_bytes(hashlib.sha256(label.encode()).digest()[:4], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, key]))


@dataclass
class TrainHyper:
    """Optimisation settings shared by supernet and standalone training."""

    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 3e-4
    bernoulli_p: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("epochs must be >= 0 and batch_size >= 2")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be > 0 and momentum in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)
