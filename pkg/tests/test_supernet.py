from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixpath import engine as E
from mixpath.data import make_splits
from mixpath.space import MaskError, PathSpec, SearchSpaceSpec, TrainHyper, popcount, sample_mask
from mixpath.supernet import SbnBank, Supernet, forward_submodel, sbn_index, train_supernet

import gradcheck as G


def spec_of(kernels=(1, 3, 7), L=3, m=2, **kw):
    kw.setdefault("channels", 4)
    return SearchSpaceSpec(paths=tuple(PathSpec(kernel=k) for k in kernels), num_layers=L, max_paths=m, **kw)


def batch(n=6, seed=0, size=8):
    return np.random.default_rng(seed).standard_normal((n, 3, size, size)).astype(np.float32)


# ---- SBN bank ------------------------------------------------------------------

def test_sbn_index_examples():
    assert sbn_index(0b001, "linear", 2) == 1
    assert sbn_index(0b101, "linear", 2) == 2
    assert sbn_index(0b101, "vanilla", 2) == 0
    assert sbn_index(0b101, "exponential", 2) == 0b101
    with pytest.raises(MaskError):
        sbn_index(0, "linear", 2)
    with pytest.raises(MaskError):
        sbn_index(0b111, "linear", 2)


def test_exponential_bank_size_four_paths():
    bank = SbnBank("exponential", 4, 4, 3)
    assert len(bank) == 15 == 2 ** 4 - 1


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.data())
def test_bank_sizes_and_total_lookup(n, data):
    m = data.draw(st.integers(1, n))
    for mode, size in (("vanilla", 1), ("linear", m), ("exponential", sum(comb(n, i) for i in range(1, m + 1)))):
        bank = SbnBank(mode, n, m, 2)
        assert len(bank) == size == SbnBank.expected_size(mode, n, m)
        hit = {id(bank.lookup(b)) for b in range(1, 2 ** n) if popcount(b) <= m}
        assert len(hit) == size


# ---- block forward -------------------------------------------------------------

def test_single_path_no_projection_is_path_through_sbn1():
    spec = spec_of(aggregation="sum", expansion=1)
    net = Supernet(spec, seed=1)
    b = net.blocks[0]
    x = np.random.default_rng(2).standard_normal((4, 4, 8, 8)).astype(np.float32)
    y, _ = b.forward(x, 0b010, "eval")
    h, _ = E.conv2d(x, b.expand_w.data)
    h = E.relu(E.batchnorm(h, b.expand_bn.gamma.data, b.expand_bn.beta.data, "eval",
                           b.expand_bn.running_mean, b.expand_bn.running_var)[0])[0]
    o, _ = E.depthwise_conv2d(h, b.path_w[1].data, 1, 1)
    bn = b.path_bn[1]
    o = E.relu(E.batchnorm(o, bn.gamma.data, bn.beta.data, "eval", bn.running_mean, bn.running_var)[0])[0]
    s1 = b.bank.states[1]
    ref = E.batchnorm(o, s1.gamma.data, s1.beta.data, "eval", s1.running_mean, s1.running_var)[0] + x
    np.testing.assert_array_equal(y, ref)


def test_tied_paths_sum_is_exact_multiple():
    spec = spec_of(kernels=(3, 3, 3), m=3)
    net = Supernet(spec, seed=0, tie_paths=True)
    x = np.random.default_rng(0).standard_normal((3, 4, 8, 8)).astype(np.float32)
    one, _ = net.blocks[0].pre_sbn(x, 0b001, "eval")
    two, _ = net.blocks[0].pre_sbn(x, 0b011, "eval")
    three, _ = net.blocks[0].pre_sbn(x, 0b111, "eval")
    np.testing.assert_array_equal(two, 2 * one)
    np.testing.assert_allclose(three, 3 * one, rtol=1e-5, atol=1e-6)


def test_eval_forward_recomposition():
    spec = spec_of()
    net = Supernet(spec, seed=3)
    data = make_splits(0, 64, 8)
    train_supernet(spec, (data["x_train"], data["y_train"]), TrainHyper(epochs=1, batch_size=16), 0, net=net)
    x = data["x_val"]
    mask = (3, 4, 6)
    logits = forward_submodel(net, mask, x)
    # hand composition from the raw arrays
    sd = net.state_dict()

    def bn(v, name):
        return E.batchnorm(v, sd[name + ".gamma"], sd[name + ".beta"], "eval",
                           sd[name + ".running_mean"], sd[name + ".running_var"])[0]

    h = np.maximum(bn(E.conv2d(x, sd["stem.conv.weight"], 1, 1)[0], "stem.bn"), 0)
    for layer, bits in enumerate(mask):
        p = f"block{layer}."
        e = np.maximum(bn(E.conv2d(h, sd[p + "expand.conv.weight"])[0], p + "expand.bn"), 0)
        acc = 0
        for i in range(3):
            if bits >> i & 1:
                k = spec.paths[i].kernel
                o = E.depthwise_conv2d(e, sd[p + f"path{i}.dwconv.weight"], 1, k // 2)[0]
                acc = acc + np.maximum(bn(o, p + f"path{i}.bn"), 0)
        z = E.conv2d(acc, sd[p + "proj.conv.weight"])[0]
        h = bn(z, p + f"sbn.{popcount(bits)}") + h
    ref = h.mean(axis=(2, 3)) @ sd["head.linear.weight"] + sd["head.linear.bias"]
    np.testing.assert_allclose(logits, ref, rtol=1e-5, atol=1e-6)


def test_forward_shapes_and_determinism():
    spec = spec_of()
    net = Supernet(spec, seed=0)
    x = batch(1)
    a = forward_submodel(net, (1, 2, 4), x)
    assert a.shape == (1, spec.num_classes)
    assert forward_submodel(net, (1, 2, 4), x).tobytes() == a.tobytes()
    with pytest.raises(MaskError):
        forward_submodel(net, (1, 2), x)
    with pytest.raises(E.ShapeError):
        forward_submodel(net, (1, 2, 4), batch(2, size=6))


def test_matches_standalone_model_with_copied_weights():
    spec = spec_of()
    mask = (5, 2, 3)
    data = make_splits(1, 64, 10)
    solo, _ = train_supernet(spec, (data["x_train"], data["y_train"]), TrainHyper(epochs=1, batch_size=16),
                             4, fixed_mask=mask)
    net = Supernet(spec, seed=9)
    arrays = net.state_dict()
    for name, arr in solo.state_dict().items():
        if ".sbn.0." in name:
            layer = int(name.split(".")[0][5:])
            arrays[name.replace(".sbn.0.", f".sbn.{popcount(mask[layer])}.")] = arr
        else:
            arrays[name] = arr
    net.load_state_dict(arrays)
    x = data["x_val"]
    assert forward_submodel(net, mask, x).tobytes() == forward_submodel(solo, mask, x).tobytes()


def test_standalone_refuses_other_masks():
    spec = spec_of()
    solo = Supernet(spec, only_mask=(1, 1, 1))
    assert solo.sbn_mode == "vanilla"
    with pytest.raises(MaskError):
        forward_submodel(solo, (2, 1, 1), batch(2))


def test_whole_network_gradient_64bit():
    spec = spec_of(kernels=(1, 3), L=2, channels=2, expansion=2, image_size=4, num_classes=3)
    net = Supernet(spec, seed=0, dtype="float64")
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3, 4, 4))
    y = np.array([0, 1, 2, 1])
    mask = (3, 2)
    net.loss_and_grad(x, y, mask)
    grads = {n: p.grad.copy() for n, p in net.named_params().items() if p.grad is not None}

    def loss():
        logits, _ = net.forward(x, mask, "train")
        return E.softmax_cross_entropy(logits, y)[0]

    for name, p in net.named_params().items():
        if name in grads:
            # running stats move on every train forward; they do not feed the train-mode loss
            num = G.numeric_grad(loss, p.data)
            assert G.rel_error(grads[name], num) < 1e-4, name


# ---- training -------------------------------------------------------------------

def tiny_data(n=96):
    return make_splits(0, n, 16, noise=0.6)


def test_zero_epochs_is_a_no_op():
    spec = spec_of()
    d = tiny_data()
    ref = Supernet(spec, seed=5).state_dict()
    net, log = train_supernet(spec, (d["x_train"], d["y_train"]), TrainHyper(epochs=0), 5)
    assert log.epochs == [] and log.step_losses == []
    for k, v in net.state_dict().items():
        assert v.tobytes() == ref[k].tobytes()


def test_empty_stream_rejected():
    with pytest.raises(ValueError):
        train_supernet(spec_of(), (np.zeros((1, 3, 8, 8), np.float32), np.zeros(1, int)), TrainHyper(), 0)


def test_step_touches_only_active_paths_and_one_sbn_state():
    spec = spec_of()
    net = Supernet(spec, seed=0)
    before = {k: v.copy() for k, v in net.state_dict().items()}
    d = tiny_data(32)
    mask = (1, 6, 4)
    net.loss_and_grad(d["x_train"][:16], d["y_train"][:16], mask)
    E.sgd_step([p for p in net.params() if p.grad is not None], {}, 0.1, 0.9, 1e-3)
    after = net.state_dict()
    changed = {k for k in after if after[k].tobytes() != before[k].tobytes()}
    for layer, bits in enumerate(mask):
        for i in range(3):
            touched = any(k.startswith(f"block{layer}.path{i}.") for k in changed)
            assert touched == bool(bits >> i & 1)
        sbn_changed = {k.split(".")[2] for k in changed
                       if k.startswith(f"block{layer}.sbn.") and "running" in k}
        assert sbn_changed == {str(popcount(bits))}


def test_m1_updates_only_single_state():
    spec = spec_of(m=1)
    d = tiny_data()
    net, log = train_supernet(spec, (d["x_train"], d["y_train"]), TrainHyper(epochs=1, batch_size=16), 0)
    assert all(len(b.bank) == 1 for b in net.blocks)
    assert all(not np.allclose(b.bank.states[1].running_var, 1.0) for b in net.blocks)
    assert all(h[1:] == [0] * (len(h) - 1) or len(h) == 1 for hist in [log.epochs[0]["popcount_hist"]]
               for h in hist)


def test_training_reduces_loss_smoke():
    spec = spec_of()
    d = make_splits(0, 320, 16, noise=0.6)
    hyper = TrainHyper(epochs=20, batch_size=32, lr=0.05)
    _, log = train_supernet(spec, (d["x_train"], d["y_train"]), hyper, 0)
    assert len(log.step_losses) == 200
    # frozen from the first seeded run: step 0 loss 1.7325, step 199 loss 0.5387
    assert log.step_losses[0] == pytest.approx(1.7325, abs=1e-3)
    assert log.step_losses[199] == pytest.approx(0.5387, abs=1e-3)
    assert log.step_losses[199] < log.step_losses[0]


def test_training_is_deterministic():
    spec = spec_of()
    d = tiny_data()
    hyper = TrainHyper(epochs=2, batch_size=16)
    a, la = train_supernet(spec, (d["x_train"], d["y_train"]), hyper, 7)
    b, lb = train_supernet(spec, (d["x_train"], d["y_train"]), hyper, 7)
    assert la.step_losses == lb.step_losses
    for k, v in a.state_dict().items():
        assert v.tobytes() == b.state_dict()[k].tobytes()


def test_numeric_failure_reports_context():
    spec = spec_of()
    d = tiny_data(32)
    x = d["x_train"].copy()
    x[3, 0, 0, 0] = np.nan
    with pytest.raises(E.NumericError, match="epoch 0 step"):
        train_supernet(spec, (x, d["y_train"]), TrainHyper(epochs=1, batch_size=32), 0)


def test_state_dict_round_trip():
    spec = spec_of(sbn_mode="exponential")
    a = Supernet(spec, seed=1)
    b = Supernet(spec, seed=2)
    b.load_state_dict(a.state_dict())
    x = batch(3)
    mask = sample_mask(spec, 0.5, np.random.default_rng(0))
    assert forward_submodel(a, mask, x).tobytes() == forward_submodel(b, mask, x).tobytes()
    with pytest.raises(KeyError):
        b.load_state_dict({"stem.conv.weight": a.stem_w.data})
