"""Multi-path weight-sharing supernet with shadow batch-norm banks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from math import comb

import numpy as np

from . import engine as E
from .space import (
    MaskError,
    SearchSpaceSpec,
    TrainHyper,
    active_paths,
    popcount,
    sample_mask,
    substream,
    validate_mask,
)

log = logging.getLogger(__name__)


class BnState:
    """Learnable affine pair plus running statistics for one batch-norm site."""

    def __init__(self, channels: int, dtype=np.float32, eps: float = E.BN_EPS,
                 momentum: float = E.BN_MOMENTUM):
        self.gamma = E.Param(np.ones(channels, dtype=dtype))
        self.beta = E.Param(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]

    def forward(self, x, mode, name=None, stats=None, acc=None):
        """Normalize ``x``.

        ``train`` normalizes with batch statistics and folds them into the
        running estimates. ``calibrate`` also normalizes with batch statistics
        but only adds them to the ``acc`` accumulator. ``eval`` uses the
        running estimates, or the override in ``stats[name]`` when present.
        """
        if mode == "eval":
            mean, var = (stats or {}).get(name, (self.running_mean, self.running_var))
            return E.batchnorm(x, self.gamma.data, self.beta.data, "eval", mean, var, self.eps)
        out, cache = E.batchnorm(x, self.gamma.data, self.beta.data, "train", eps=self.eps)
        bmean, bvar = cache[4], cache[5]
        if mode == "train":
            mom = self.momentum
            self.running_mean = ((1 - mom) * self.running_mean + mom * bmean).astype(self.running_mean.dtype)
            self.running_var = ((1 - mom) * self.running_var + mom * bvar).astype(self.running_var.dtype)
        elif mode == "calibrate":
            s = acc.setdefault(name, [0.0, 0.0, 0])
            s[0] = s[0] + bmean.astype(np.float64)
            s[1] = s[1] + bvar.astype(np.float64)
            s[2] += 1
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return out, cache

    def backward(self, dout, cache):
        dx, dg, db = E.batchnorm_backward(dout, cache)
        self.gamma.accumulate(dg)
        self.beta.accumulate(db)
        return dx

    def arrays(self) -> dict:
        return {"gamma": self.gamma.data, "beta": self.beta.data,
                "running_mean": self.running_mean, "running_var": self.running_var}

    def copy(self) -> "BnState":
        new = BnState(self.channels, self.gamma.data.dtype, self.eps, self.momentum)
        new.gamma.data = self.gamma.data.copy()
        new.beta.data = self.beta.data.copy()
        new.running_mean = self.running_mean.copy()
        new.running_var = self.running_var.copy()
        return new


def sbn_index(bits: int, mode: str, m: int):
    """Key of the bank entry that serves a layer with active-path bitmask ``bits``."""
    k = popcount(bits)
    if not 1 <= k <= m:
        raise MaskError(f"{k} active paths, bank serves 1..{m}")
    if mode == "vanilla":
        return 0
    if mode == "linear":
        return k
    if mode == "exponential":
        return bits
    raise ValueError(f"unknown sbn mode {mode!r}")


def sbn_key_name(key, mode: str) -> str:
    return f"e{key}" if mode == "exponential" else str(key)


class SbnBank:
    """Batch-norm states for one block, indexed by active-path count or subset."""

    def __init__(self, mode: str, n: int, m: int, channels: int, dtype=np.float32):
        self.mode, self.n, self.m = mode, n, m
        if mode == "vanilla":
            keys = [0]
        elif mode == "linear":
            keys = list(range(1, m + 1))
        elif mode == "exponential":
            keys = sorted(sum(1 << i for i in c) for k in range(1, m + 1) for c in combinations(range(n), k))
        else:
            raise ValueError(f"unknown sbn mode {mode!r}")
        self.states = {k: BnState(channels, dtype) for k in keys}

    @staticmethod
    def expected_size(mode: str, n: int, m: int) -> int:
        if mode == "vanilla":
            return 1
        if mode == "linear":
            return m
        return sum(comb(n, i) for i in range(1, m + 1))

    def __len__(self):
        return len(self.states)

    def key(self, bits: int):
        return sbn_index(bits, self.mode, self.m)

    def lookup(self, bits: int) -> BnState:
        return self.states[self.key(bits)]


def _kaiming(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _path_init(rng, spec: SearchSpaceSpec, shape, dtype):
    """Depthwise path weights: plain Kaiming, or a unit centre tap plus scaled Kaiming noise."""
    k = shape[-1]
    w = rng.standard_normal(shape) * np.sqrt(2.0 / (k * k))
    if spec.path_init == "dirac":
        w *= spec.path_init_noise
        w[:, :, k // 2, k // 2] += 1.0
    return w.astype(dtype)


@dataclass
class Block:
    """One MixPath choice block.

    Holds the shared 1x1 expansion, every candidate depthwise path with its
    own private BN, the optional 1x1 projection and the shadow BN bank.
    """

    index: int
    expand_w: E.Param
    expand_bn: BnState
    path_w: dict          # path index -> Param (C_mid, 1, k, k)
    path_bn: dict         # path index -> BnState
    proj_w: E.Param | None
    bank: SbnBank
    kernels: dict = field(default_factory=dict)

    def name(self, part: str) -> str:
        return f"block{self.index}.{part}"

    def sbn_name(self, bits: int) -> str:
        return self.name(f"sbn.{sbn_key_name(self.bank.key(bits), self.bank.mode)}")

    def _check_bits(self, bits: int):
        missing = [i for i in active_paths(bits) if i not in self.path_w]
        if missing or not 1 <= popcount(bits) <= self.bank.m:
            raise MaskError(f"block {self.index}: selection {bits:b} not available")

    def pre_sbn(self, x, bits, mode, stats=None, acc=None):
        """Expansion, active paths, sum and projection; returns (features, cache)."""
        self._check_bits(bits)
        h, c_exp = E.conv2d(x, self.expand_w.data)
        h, c_ebn = self.expand_bn.forward(h, mode, self.name("expand.bn"), stats, acc)
        h, c_erelu = E.relu(h)
        total = None
        path_caches = []
        for i in active_paths(bits):
            k = self.kernels[i]
            o, c_dw = E.depthwise_conv2d(h, self.path_w[i].data, 1, k // 2)
            o, c_pbn = self.path_bn[i].forward(o, mode, self.name(f"path{i}.bn"), stats, acc)
            o, c_prelu = E.relu(o)
            total = o if total is None else total + o
            path_caches.append((i, c_dw, c_pbn, c_prelu))
        c_proj = None
        if self.proj_w is not None:
            total, c_proj = E.conv2d(total, self.proj_w.data)
        return total, (c_exp, c_ebn, c_erelu, path_caches, c_proj)

    def forward(self, x, bits, mode, stats=None, acc=None):
        z, c_pre = self.pre_sbn(x, bits, mode, stats, acc)
        state = self.bank.lookup(bits)
        y, c_sbn = state.forward(z, mode, self.sbn_name(bits), stats, acc)
        return y + x, (c_pre, state, c_sbn)

    def backward(self, dout, cache):
        (c_exp, c_ebn, c_erelu, path_caches, c_proj), state, c_sbn = cache
        dx_skip = dout
        dz = state.backward(dout, c_sbn)
        if c_proj is not None:
            dsum, dpw = E.conv2d_backward(dz, c_proj)
            self.proj_w.accumulate(dpw)
        else:
            dsum = dz
        dh = None
        for i, c_dw, c_pbn, c_prelu in path_caches:
            d = E.relu_backward(dsum, c_prelu)
            d = self.path_bn[i].backward(d, c_pbn)
            d, dw = E.depthwise_conv2d_backward(d, c_dw)
            self.path_w[i].accumulate(dw)
            dh = d if dh is None else dh + d
        dh = E.relu_backward(dh, c_erelu)
        dh = self.expand_bn.backward(dh, c_ebn)
        dx, dew = E.conv2d_backward(dh, c_exp)
        self.expand_w.accumulate(dew)
        return dx + dx_skip


class Supernet:
    """Stem, ``L`` MixPath blocks and a linear classifier head.

    With ``only_mask`` the network is a standalone model: it holds parameters
    for the listed paths only and a single vanilla BN per block.
    ``tie_paths`` makes all paths in a block share one weight tensor and one
    private BN (every path must then have the same kernel size).
    """

    def __init__(self, spec: SearchSpaceSpec, seed: int = 0, dtype="float32",
                 only_mask=None, tie_paths: bool = False):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.only_mask = validate_mask(spec, only_mask) if only_mask is not None else None
        mode = "vanilla" if only_mask is not None else spec.sbn_mode
        self.sbn_mode = mode
        if tie_paths and len({p.kernel for p in spec.paths}) != 1:
            raise ValueError("tied paths need identical kernel sizes")
        rng = substream(seed, "init")
        dt = self.dtype
        c, cm = spec.channels, spec.mid_channels
        sk = spec.stem_kernel
        self.stem_w = E.Param(_kaiming(rng, (c, spec.image_channels, sk, sk), spec.image_channels * sk * sk, dt))
        self.stem_bn = BnState(c, dt)
        self.blocks = []
        for layer in range(spec.num_layers):
            expand_w = E.Param(_kaiming(rng, (cm, c, 1, 1), c, dt))
            allowed = (active_paths(self.only_mask[layer]) if self.only_mask is not None
                       else range(spec.n_paths))
            path_w, path_bn, kernels = {}, {}, {}
            shared = None
            for i, ps in enumerate(spec.paths):
                # draw every path's init so a path's weights do not depend on which others exist
                w = E.Param(_path_init(rng, spec, (cm, 1, ps.kernel, ps.kernel), dt))
                if i not in allowed:
                    continue
                if tie_paths:
                    if shared is None:
                        shared = (w, BnState(cm, dt))
                    path_w[i], path_bn[i] = shared
                else:
                    path_w[i], path_bn[i] = w, BnState(cm, dt)
                kernels[i] = ps.kernel
            proj_w = E.Param(_kaiming(rng, (c, cm, 1, 1), cm, dt)) if spec.projection else None
            bank = SbnBank(mode, spec.n_paths, spec.max_paths, c, dt)
            self.blocks.append(Block(layer, expand_w, BnState(cm, dt), path_w, path_bn,
                                     proj_w, bank, kernels))
        self.head_w = E.Param((rng.standard_normal((c, spec.num_classes)) / np.sqrt(c)).astype(dt))
        self.head_b = E.Param(np.zeros(spec.num_classes, dtype=dt))

    # ---- bookkeeping -----------------------------------------------------

    def named_params(self) -> dict:
        """Every learnable array by checkpoint name (tied paths appear once per path)."""
        out = {"stem.conv.weight": self.stem_w}
        out.update(_bn_params("stem.bn", self.stem_bn))
        for b in self.blocks:
            out[b.name("expand.conv.weight")] = b.expand_w
            out.update(_bn_params(b.name("expand.bn"), b.expand_bn))
            for i in sorted(b.path_w):
                out[b.name(f"path{i}.dwconv.weight")] = b.path_w[i]
                out.update(_bn_params(b.name(f"path{i}.bn"), b.path_bn[i]))
            if b.proj_w is not None:
                out[b.name("proj.conv.weight")] = b.proj_w
            for key, st in b.bank.states.items():
                out.update(_bn_params(b.name(f"sbn.{sbn_key_name(key, b.bank.mode)}"), st))
        out["head.linear.weight"] = self.head_w
        out["head.linear.bias"] = self.head_b
        return out

    def params(self) -> list:
        seen, out = set(), []
        for p in self.named_params().values():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def bn_states(self) -> dict:
        out = {"stem.bn": self.stem_bn}
        for b in self.blocks:
            out[b.name("expand.bn")] = b.expand_bn
            for i in sorted(b.path_bn):
                out[b.name(f"path{i}.bn")] = b.path_bn[i]
            for key, st in b.bank.states.items():
                out[b.name(f"sbn.{sbn_key_name(key, b.bank.mode)}")] = st
        return out

    def state_dict(self) -> dict:
        """Flat name -> array view of every parameter and running statistic."""
        out = {"stem.conv.weight": self.stem_w.data}
        for name, st in self.bn_states().items():
            for field_, arr in st.arrays().items():
                out[f"{name}.{field_}"] = arr
        for b in self.blocks:
            out[b.name("expand.conv.weight")] = b.expand_w.data
            for i in sorted(b.path_w):
                out[b.name(f"path{i}.dwconv.weight")] = b.path_w[i].data
            if b.proj_w is not None:
                out[b.name("proj.conv.weight")] = b.proj_w.data
        out["head.linear.weight"] = self.head_w.data
        out["head.linear.bias"] = self.head_b.data
        return dict(sorted(out.items()))

    def load_state_dict(self, arrays: dict, strict: bool = True) -> None:
        params = self.named_params()
        states = self.bn_states()
        own = self.state_dict()
        if strict and set(arrays) != set(own):
            missing, extra = set(own) - set(arrays), set(arrays) - set(own)
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, arr in arrays.items():
            if name not in own:
                continue
            arr = np.asarray(arr, dtype=self.dtype).reshape(own[name].shape)
            if name in params:
                params[name].data = arr.copy()
                continue
            base, field_ = name.rsplit(".", 1)
            if field_ in ("running_mean", "running_var"):
                setattr(states[base], field_, arr.copy())
            else:
                getattr(states[base], field_).data = arr.copy()

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def check_mask(self, mask):
        mask = validate_mask(self.spec, mask)
        if self.only_mask is not None and mask != self.only_mask:
            raise MaskError("standalone model only runs its own architecture")
        return mask

    # ---- passes ----------------------------------------------------------

    def forward(self, x, mask, mode="eval", stats=None, acc=None):
        """Logits of the submodel selected by ``mask``.

        Returns ``(logits, cache)``; the cache is only meaningful for ``train``.
        """
        mask = self.check_mask(mask)
        if x.ndim != 4 or x.shape[1:] != (self.spec.image_channels, self.spec.image_size, self.spec.image_size):
            raise E.ShapeError(f"input shape {x.shape} does not match the search space")
        x = x.astype(self.dtype, copy=False)
        k = self.spec.stem_kernel
        h, c_stem = E.conv2d(x, self.stem_w.data, 1, k // 2)
        h, c_sbn = self.stem_bn.forward(h, mode, "stem.bn", stats, acc)
        h, c_relu = E.relu(h)
        block_caches = []
        for b, bits in zip(self.blocks, mask):
            h, cb = b.forward(h, bits, mode, stats, acc)
            block_caches.append(cb)
        pooled, c_pool = E.global_avg_pool(h)
        logits, c_lin = E.linear(pooled, self.head_w.data, self.head_b.data)
        return logits, (c_stem, c_sbn, c_relu, block_caches, c_pool, c_lin)

    def backward(self, dlogits, cache):
        c_stem, c_sbn, c_relu, block_caches, c_pool, c_lin = cache
        dpool, dw, db = E.linear_backward(dlogits, c_lin)
        self.head_w.accumulate(dw)
        self.head_b.accumulate(db)
        dh = E.global_avg_pool_backward(dpool, c_pool)
        for b, cb in zip(reversed(self.blocks), reversed(block_caches)):
            dh = b.backward(dh, cb)
        dh = E.relu_backward(dh, c_relu)
        dh = self.stem_bn.backward(dh, c_sbn)
        _, dws = E.conv2d_backward(dh, c_stem, need_dx=False)
        self.stem_w.accumulate(dws)

    def loss_and_grad(self, x, y, mask):
        self.zero_grad()
        logits, cache = self.forward(x, mask, "train")
        loss, c_loss = E.softmax_cross_entropy(logits, y)
        self.backward(E.softmax_cross_entropy_backward(c_loss).astype(self.dtype), cache)
        return loss, logits

    def block_input(self, x, mask, block: int, mode="eval", stats=None):
        """Activation entering ``block`` when earlier blocks follow ``mask``."""
        mask = self.check_mask(mask)
        x = x.astype(self.dtype, copy=False)
        h, _ = E.conv2d(x, self.stem_w.data, 1, self.spec.stem_kernel // 2)
        h, _ = self.stem_bn.forward(h, mode, "stem.bn", stats)
        h, _ = E.relu(h)
        for b, bits in zip(self.blocks[:block], mask[:block]):
            h, _ = b.forward(h, bits, mode, stats)
        return h


def _bn_params(prefix, st: BnState) -> dict:
    return {f"{prefix}.gamma": st.gamma, f"{prefix}.beta": st.beta}


def touched_params(net: Supernet) -> list:
    return [p for p in net.params() if p.grad is not None]


def forward_submodel(net: Supernet, mask, x, stats=None, batch_size: int = 256) -> np.ndarray:
    """Deterministic eval-mode logits, processed in fixed-size chunks."""
    mask = net.check_mask(mask)
    outs = [net.forward(x[i:i + batch_size], mask, "eval", stats)[0]
            for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches covering ``n`` items; a trailing batch of 1 is dropped."""
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        if len(idx) >= 2:
            yield idx


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    probes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "step_losses": self.step_losses, "probes": self.probes}


def train_supernet(spec: SearchSpaceSpec, data, hyper: TrainHyper, seed: int,
                   net: Supernet | None = None, fixed_mask=None, probe=None,
                   tie_paths: bool = False):
    """Sample-one-submodel-per-batch training with momentum SGD and cosine decay.

    ``data`` is ``(x, y)``. With ``fixed_mask`` every step trains the same
    architecture (standalone training). ``probe(net, epoch)`` is called before
    the first epoch and after every epoch; its return value, when not None,
    is stored in the log.
    """
    x, y = data
    if len(x) < 2:
        raise ValueError("training data stream is empty")
    if net is None:
        net = Supernet(spec, seed, hyper.dtype, only_mask=fixed_mask, tie_paths=tie_paths)
    log_ = TrainLog()
    batch_rng = substream(seed, "batches")
    mask_rng = substream(seed, "masks")
    steps_per_epoch = sum(1 for _ in iterate_batches(len(x), hyper.batch_size, np.random.default_rng(0)))
    total = hyper.epochs * steps_per_epoch
    velocity: dict = {}
    step = 0
    if probe is not None:
        r = probe(net, 0)
        if r is not None:
            log_.probes.append(r)
    for epoch in range(hyper.epochs):
        hist = np.zeros((spec.num_layers, spec.max_paths + 1), dtype=int)
        losses = []
        lr = hyper.lr
        for idx in iterate_batches(len(x), hyper.batch_size, batch_rng):
            mask = fixed_mask if fixed_mask is not None else sample_mask(spec, hyper.bernoulli_p, mask_rng)
            for layer, bits in enumerate(mask):
                hist[layer, popcount(bits)] += 1
            try:
                loss, _ = net.loss_and_grad(x[idx], y[idx], mask)
            except E.NumericError as exc:
                raise E.NumericError(f"epoch {epoch} step {step} mask {mask}: {exc}") from exc
            lr = E.cosine_lr(step, total, hyper.lr)
            E.sgd_step(touched_params(net), velocity, lr, hyper.momentum, hyper.weight_decay)
            losses.append(loss)
            log_.step_losses.append(loss)
            step += 1
        log_.epochs.append({"epoch": epoch + 1, "loss": float(np.mean(losses)), "lr": lr,
                            "popcount_hist": hist[:, 1:].tolist()})
        log.debug("epoch %d loss %.4f", epoch + 1, log_.epochs[-1]["loss"])
        if probe is not None:
            r = probe(net, epoch + 1)
            if r is not None:
                log_.probes.append(r)
    return net, log_
