"""Multiply-add and parameter counts for architectures in a search space.

Only convolution and linear layers are counted; batch norm, activations and
the path sum are treated as free.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .space import SearchSpaceSpec, mask_kernels, validate_mask


def layer_cost(h: int, w: int, c_in: int, c_mid: int, kernels) -> int:
    """Inverted-bottleneck block with several parallel depthwise kernels.

    Two pointwise convs (expand and project, output width == ``c_in``) plus
    one depthwise conv per kernel: ``2*H*W*C_in*C_mid + sum(k^2)*H*W*C_mid``.
    """
    kernels = list(kernels)
    if min(h, w, c_in, c_mid) < 1:
        raise ValueError("all dimensions must be >= 1")
    if not kernels:
        raise ValueError("at least one kernel is required")
    for k in kernels:
        if k < 1 or k % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {k}")
    return 2 * h * w * c_in * c_mid + sum(k * k for k in kernels) * h * w * c_mid


@dataclass
class CostBreakdown:
    stem: int = 0
    head: int = 0
    pointwise: list = field(default_factory=list)    # expand conv per layer
    depthwise: list = field(default_factory=list)    # per layer: list of per-kernel counts
    projection: list = field(default_factory=list)   # per layer
    params: int = 0

    @property
    def per_layer(self) -> list:
        return [p + sum(d) + q for p, d, q in zip(self.pointwise, self.depthwise, self.projection)]

    @property
    def flops(self) -> int:
        return self.stem + self.head + sum(self.per_layer)

    def to_dict(self) -> dict:
        return {"stem": self.stem, "head": self.head, "pointwise": self.pointwise,
                "depthwise": self.depthwise, "projection": self.projection,
                "flops": self.flops, "params": self.params}


def arch_cost(spec: SearchSpaceSpec, mask) -> CostBreakdown:
    mask = validate_mask(spec, mask)
    hw = spec.image_size * spec.image_size
    c, cm = spec.channels, spec.mid_channels
    sk = spec.stem_kernel
    out = CostBreakdown()
    out.stem = hw * spec.image_channels * c * sk * sk
    out.head = c * spec.num_classes
    params = spec.image_channels * c * sk * sk + 2 * c
    params += c * spec.num_classes + spec.num_classes
    for kernels in mask_kernels(spec, mask):
        out.pointwise.append(hw * c * cm)
        out.depthwise.append([k * k * hw * cm for k in kernels])
        params += c * cm + 2 * cm
        params += sum(k * k * cm + 2 * cm for k in kernels)
        if spec.projection:
            out.projection.append(hw * cm * c)
            params += cm * c
        else:
            out.projection.append(0)
        params += 2 * c  # the block's BN after aggregation
    out.params = params
    return out


def flops(spec: SearchSpaceSpec, mask) -> int:
    return arch_cost(spec, mask).flops


def max_flops(spec: SearchSpaceSpec) -> int:
    """Cost of the most expensive mask: the ``m`` largest kernels in every layer."""
    order = sorted(range(spec.n_paths), key=lambda i: -spec.paths[i].kernel)
    bits = sum(1 << i for i in order[:spec.max_paths])
    return flops(spec, (bits,) * spec.num_layers)
