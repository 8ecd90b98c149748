import dataclasses

import numpy as np
import pytest

from cellsegkit.loss import LossConfig, loss_backward, loss_forward
from cellsegkit.model import layers as L
from cellsegkit.model.net import ModelConfig, NestedUNet, init_params, param_count
from cellsegkit.optim import AdamW, OptimConfig
from cellsegkit.synth import CorpusSpec, generate_sample
from cellsegkit.trainer import overfit
from oracles import naive_conv2d_same, rel_err

F64 = ModelConfig(dtype="float64")


def randomize_gates(model, rng, scale=0.3):
    for k, v in model.store.params.items():
        if ".scse." in k:
            v[...] = rng.normal(0, scale, v.shape)


def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out, _ = L.conv_forward(x, w, b)
    ref = naive_conv2d_same(x.transpose(0, 3, 1, 2), w.transpose(3, 2, 0, 1), b)
    assert np.allclose(out.transpose(0, 3, 1, 2), ref, atol=1e-12)


def test_layer_adjoints():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 6, 3))
    # maxpool routes to the first maximum in raster order
    t = np.zeros((1, 2, 2, 1))
    out, cache = L.maxpool_forward(t)
    assert np.array_equal(L.maxpool_backward(np.ones((1, 1, 1, 1)), cache)[0, :, :, 0], [[1, 0], [0, 0]])
    # upsample and its adjoint: <up(a), b> = <a, up^T(b)>
    a, bb = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 4, 6, 3))
    assert np.vdot(L.upsample_forward(a), bb) == pytest.approx(np.vdot(a, L.upsample_backward(bb)))
    # relu gradient is exactly zero where the input is negative
    y, mask = L.relu_forward(x)
    g = L.relu_backward(np.ones_like(x), mask)
    assert np.all(g[x < 0] == 0) and np.all(g[x > 0] == 1)


def test_scse_identity_and_zero():
    rng = np.random.default_rng(2)
    c, mid = 4, 2
    x = rng.normal(size=(2, 4, 4, c))
    zeros = (np.zeros((mid, c)), np.zeros(mid), np.zeros((c, mid)), np.zeros(c), np.zeros(c), np.zeros(1))
    out, _ = L.scse_forward(x, *zeros)
    assert np.array_equal(out, x)
    w1 = rng.normal(size=(mid, c))
    out0, _ = L.scse_forward(np.zeros_like(x), w1, *zeros[1:])
    assert np.all(out0 == 0)


def test_scse_backward_finite_differences():
    rng = np.random.default_rng(3)
    c, mid = 4, 2
    x = rng.normal(size=(2, 4, 4, c))
    params = [rng.normal(0, 0.5, s) for s in [(mid, c), (mid,), (c, mid), (c,), (c,), (1,)]]
    up = rng.normal(size=x.shape)

    def f(xx, ps):
        return float(np.vdot(L.scse_forward(xx, *ps)[0], up))

    _, cache = L.scse_forward(x, *params)
    dx, grads = L.scse_backward(up, cache)
    names = ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "spatial.weight", "spatial.bias"]
    h = 1e-6
    for idx in [(0, 1, 2, 3), (1, 3, 0, 0), (0, 0, 0, 1)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        assert rel_err(dx[idx], (f(xp, params) - f(xm, params)) / (2 * h)) <= 1e-4
    for pi, name in enumerate(names):
        for idx in list(np.ndindex(params[pi].shape))[:3]:
            pp = [p.copy() for p in params]
            pm = [p.copy() for p in params]
            pp[pi][idx] += h
            pm[pi][idx] -= h
            num = (f(x, pp) - f(x, pm)) / (2 * h)
            assert rel_err(grads[name][idx], num) <= 1e-4, name


def test_param_count_and_shapes():
    cfg = ModelConfig()
    m = NestedUNet(cfg)
    assert m.store.num_params() == param_count(cfg) == 69647
    out = m.forward(np.zeros((3, 4, 16, 12), dtype=np.float32), "eval")
    assert out.shape == (3, 1, 16, 12)
    wide = dataclasses.replace(cfg, base_channels=32)
    assert NestedUNet(wide).store.num_params() == param_count(wide)
    bare = dataclasses.replace(cfg, use_scse=False, use_projection=False)
    assert NestedUNet(bare).store.num_params() == param_count(bare)
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 4, 10, 12)), "eval")
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 3, 8, 8)), "eval")


def test_projection_contract():
    m = NestedUNet(F64, seed=1)
    x = np.random.default_rng(0).random((2, 4, 5, 7))
    assert m.project(x, "eval").shape == (2, 3, 5, 7)
    for k in ("proj.conv.weight", "proj.out.weight", "proj.out.bias"):
        m.store.params[k][...] = 0
    assert np.all(m.project(x, "eval") == 0)


def test_projection_gradient():
    rng = np.random.default_rng(4)
    m = NestedUNet(F64, seed=2)
    x = rng.random((2, 4, 4, 4))
    up = rng.normal(size=(2, 3, 4, 4))

    def f():
        return float(np.vdot(m.project(x, "train"), up))

    f()
    m.store.zero_grad()
    m.project_backward(up)
    for name in ("proj.conv.weight", "proj.bn.gamma", "proj.bn.beta", "proj.out.weight", "proj.out.bias"):
        p = m.store.params[name]
        for idx in list(np.ndindex(p.shape))[::max(1, p.size // 5)]:
            o = p[idx]
            p[idx] = o + 1e-6
            a = f()
            p[idx] = o - 1e-6
            b = f()
            p[idx] = o
            assert rel_err(m.store.grads[name][idx], (a - b) / 2e-6, floor=1e-8) <= 1e-4, name


def test_scse_zero_init_is_bitwise_identity():
    on = NestedUNet(ModelConfig(), seed=5)
    off = NestedUNet(dataclasses.replace(ModelConfig(), use_scse=False), seed=5)
    for k, v in off.store.params.items():
        assert np.array_equal(v, on.store.params[k])
    x = np.random.default_rng(0).random((2, 4, 16, 16)).astype(np.float32)
    assert np.array_equal(on.forward(x, "train"), off.forward(x, "train"))
    assert np.array_equal(on.forward(x, "eval"), off.forward(x, "eval"))


def test_eval_mode_deterministic_and_batch_independent():
    m = NestedUNet(F64, seed=3)
    rng = np.random.default_rng(1)
    randomize_gates(m, rng)
    x = rng.random((4, 4, 16, 16))
    m.forward(x, "train")  # move running stats off their init values
    a = m.forward(x, "eval")
    assert np.array_equal(a, m.forward(x, "eval"))
    assert np.allclose(m.forward(x[2:3], "eval"), a[2:3], rtol=0, atol=1e-12)
    assert np.allclose(m.forward(x[[3, 0]], "eval"), a[[3, 0]], rtol=0, atol=1e-12)


def test_backward_contracts():
    m = NestedUNet(F64, seed=0)
    with pytest.raises(RuntimeError):
        m.backward(np.zeros((1, 1, 8, 8)))
    x = np.random.default_rng(0).random((2, 4, 8, 8))
    m.forward(x, "eval")
    with pytest.raises(RuntimeError):
        m.backward(np.zeros((2, 1, 8, 8)))
    y = m.forward(x, "train")
    m.store.zero_grad()
    m.backward(np.zeros_like(y))
    assert all(np.all(g == 0) for g in m.store.grads.values())


def model_grad_check(seed, n_coords=50, shape=(2, 4, 16, 16)):
    """Worst relative error of the loss-through-model gradient over random
    parameter coordinates (float64)."""
    rng = np.random.default_rng(seed)
    m = NestedUNet(F64, seed=seed)
    randomize_gates(m, rng)
    x = rng.random(shape)
    t = (rng.random((shape[0], shape[2], shape[3])) < 0.2).astype(np.uint8)

    def f():
        return loss_forward(m.forward(x, "train")[:, 0], t).total

    logits = m.forward(x, "train")
    m.store.zero_grad()
    m.backward(loss_backward(logits[:, 0], t).grad[:, None])
    names = list(m.store.params)
    sizes = np.array([m.store.params[k].size for k in names], dtype=np.float64)
    worst = 0.0
    h = 1e-6  # small enough to rarely straddle a ReLU or max-pool switch
    for _ in range(n_coords):
        name = names[rng.choice(len(names), p=np.sqrt(sizes) / np.sqrt(sizes).sum())]
        p = m.store.params[name]
        idx = tuple(int(rng.integers(0, s)) for s in p.shape)
        o = p[idx]
        p[idx] = o + h
        a = f()
        p[idx] = o - h
        b = f()
        p[idx] = o
        worst = max(worst, float(rel_err(m.store.grads[name][idx], (a - b) / (2 * h), floor=1e-10)))
    return worst


def test_model_gradient_check_single_case():
    assert model_grad_check(0, n_coords=30) <= 1e-3


def test_loss_decreases_on_single_batch():
    rng = np.random.default_rng(0)
    cfg = ModelConfig()
    store = init_params(cfg, 0)
    m = NestedUNet(cfg, store=store)
    x = rng.random((2, 4, 32, 32)).astype(np.float32)
    t = np.zeros((2, 32, 32), dtype=np.uint8)
    t[:, 8:20, 10:22] = 1
    opt = AdamW(store, OptimConfig(lr_max=1e-2, total_steps=100))
    losses = []
    for _ in range(20):
        lb = loss_backward(m.forward(x, "train")[:, 0], t, LossConfig())
        m.backward(lb.grad[:, None], need_input_grad=False)
        opt.step(store, 3e-3)
        store.zero_grad()
        losses.append(lb.total)
    assert losses[-1] < losses[0]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_memorizes_one_32px_image():
    spec = CorpusSpec(image_side=32)
    img, mask = next((s[0], s[1]) for s in (generate_sample(spec, "train", i) for i in range(50)) if s[2].has_cells)
    hist = overfit(img, mask, steps=300)
    assert hist[-1]["dice"] >= 0.99 and len(hist) <= 300
