import math

import numpy as np
import pytest

from cellsegkit.loss import LossConfig, loss_backward
from cellsegkit.model import checkpoint
from cellsegkit.model.net import ModelConfig, NestedUNet, ParamStore, init_params
from cellsegkit.optim import (AdamW, NonFiniteGradientError, OptimConfig, average_gradients, clip_gradients,
                              global_norm, lr_at, schedule, warmup_steps)

CFG = OptimConfig(total_steps=1000)


def scalar_store(value=1.0, grad=0.0, name="w"):
    s = ParamStore(np.float64)
    s.add(name, np.array([value]))
    s.grads[name][...] = grad
    return s


def test_schedule_endpoints():
    w = warmup_steps(CFG)
    assert w == 100
    assert lr_at(0, CFG) == pytest.approx(3e-4 / 25, rel=1e-12)
    assert lr_at(w, CFG) == pytest.approx(3e-4, rel=1e-12)
    assert lr_at(1000, CFG) == pytest.approx(3e-7, rel=1e-12)
    assert lr_at(w + 450, CFG) == pytest.approx(1.5015e-4, rel=1e-12)
    for bad in (-1, 1001, 2.5):
        with pytest.raises(ValueError):
            lr_at(bad, CFG)


def test_schedule_shape():
    lr = schedule(CFG)
    w = warmup_steps(CFG)
    assert lr.shape == (1001,)
    assert np.all(np.diff(lr[:w + 1]) > 0)
    assert np.all(np.diff(lr[w:]) <= 0)
    # continuity at the junction, approached from both sides
    left = 3e-4 / 25 + (3e-4 - 3e-4 / 25) * (w - 1e-9) / w
    right = 3e-7 + (3e-4 - 3e-7) / 2 * (1 + math.cos(math.pi * 1e-9 / 900))
    assert abs(left - 3e-4) <= 1e-12 and abs(right - 3e-4) <= 1e-12
    # tiny runs still have both phases
    tiny = OptimConfig(total_steps=2)
    assert warmup_steps(tiny) == 1 and lr_at(2, tiny) == pytest.approx(3e-7)


def test_config_validation():
    for kw in ({"lr_max": 1e-7}, {"clip_norm": 0}, {"warmup_frac": 1.0}, {"total_steps": 1}):
        with pytest.raises(ValueError):
            OptimConfig(**kw)


def test_clip_examples():
    s = scalar_store(grad=0.25)
    assert clip_gradients(s, 0.5) == 1.0 and s.grads["w"][0] == 0.25
    s = ParamStore(np.float64)
    s.add("a", np.zeros(2))
    s.add("b", np.zeros(1))
    s.grads["a"][...] = [3.0, 0.0]
    s.grads["b"][...] = [4.0]
    assert clip_gradients(s, 0.5) == pytest.approx(0.1, rel=1e-15)
    assert abs(global_norm(s) - 0.5) <= 1e-9
    before = {k: g.copy() for k, g in s.grads.items()}
    assert clip_gradients(s, 0.5) == 1.0
    assert all(np.array_equal(before[k], s.grads[k]) for k in before)


def test_nan_tripwire_leaves_state_untouched():
    s = ParamStore(np.float64)
    s.add("conv.weight", np.ones(3))
    s.add("head.bias", np.ones(1))
    opt = AdamW(s, CFG)
    s.grads["conv.weight"][...] = 0.1
    opt.step(s, 1e-3)
    snap = ({k: v.copy() for k, v in s.params.items()}, {k: v.copy() for k, v in opt.m.items()},
            {k: v.copy() for k, v in opt.v.items()}, opt.t)
    s.grads["head.bias"][0] = np.nan
    with pytest.raises(NonFiniteGradientError, match="head.bias"):
        clip_gradients(s, 0.5)
    with pytest.raises(NonFiniteGradientError, match="head.bias"):
        opt.step(s, 1e-3)
    assert opt.t == snap[3]
    for got, want in zip((s.params, opt.m, opt.v), snap[:3]):
        assert all(np.array_equal(got[k], want[k]) for k in want)


def test_adamw_examples():
    nodecay = OptimConfig(weight_decay=0.0)
    s = scalar_store(1.0, 0.0)
    AdamW(s, nodecay).step(s, 0.1)
    assert s.params["w"][0] == 1.0

    s = scalar_store(1.0, 1.0)
    AdamW(s, nodecay).step(s, 0.1)
    assert s.params["w"][0] == pytest.approx(0.9, abs=1e-8)

    s = scalar_store(1.0, 0.0, name="conv.weight")
    opt = AdamW(s, OptimConfig(weight_decay=1e-4))
    for k in range(1, 4):
        opt.step(s, 0.1)
        assert s.params["conv.weight"][0] == pytest.approx((1 - 0.1 * 1e-4) ** k, rel=1e-15)


def test_decay_exemptions():
    s = ParamStore(np.float64)
    for name in ("c.weight", "c.bias", "bn.gamma", "bn.beta"):
        s.add(name, np.ones(1))
    AdamW(s, OptimConfig(weight_decay=0.5)).step(s, 0.1)
    assert s.params["c.weight"][0] == pytest.approx(0.95)
    assert all(s.params[k][0] == 1.0 for k in ("c.bias", "bn.gamma", "bn.beta"))
    assert s.params["c.weight"].dtype == np.float64


def test_shape_mismatch_errors():
    s = scalar_store()
    opt = AdamW(s, CFG)
    s.params["w"] = np.ones(2)
    s.grads["w"] = np.zeros(2)
    with pytest.raises(ValueError):
        opt.step(s, 0.1)


def test_second_moments_non_negative():
    rng = np.random.default_rng(0)
    s = ParamStore(np.float64)
    s.add("w", rng.normal(size=(5, 5)))
    opt = AdamW(s, CFG)
    for _ in range(10):
        s.grads["w"][...] = rng.normal(size=(5, 5))
        opt.step(s, 1e-3)
    assert np.all(opt.v["w"] >= 0) and opt.m["w"].shape == s.params["w"].shape


def test_accumulation_matches_double_batch():
    bce = LossConfig(w_dice=0.0, w_bce=1.0, w_tversky=0.0)
    cfg = ModelConfig(dtype="float64")
    rng = np.random.default_rng(9)
    x = rng.random((2, 4, 16, 16))
    t = (rng.random((2, 16, 16)) < 0.2).astype(np.uint8)

    def run(micro_batches):
        store = init_params(cfg, 0)
        m = NestedUNet(cfg, store=store)
        opt = AdamW(store, OptimConfig(accum_steps=len(micro_batches)))
        for xb, tb in micro_batches:
            lb = loss_backward(m.forward(xb, "train")[:, 0], tb, bce)
            m.backward(lb.grad[:, None], need_input_grad=False)
        average_gradients(store, len(micro_batches))
        clip_gradients(store, 0.5)
        opt.step(store, 1e-3)
        return store

    # identical micro-batches: batch statistics match the doubled batch
    acc = run([(x, t), (x, t)])
    big = run([(np.concatenate([x, x]), np.concatenate([t, t]))])
    worst = max(float(np.max(np.abs(acc.params[k] - big.params[k]))) for k in acc.params)
    assert worst <= 1e-6


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    store = init_params(ModelConfig(), 3)
    m = NestedUNet(ModelConfig(), store=store)
    opt = AdamW(store, CFG)
    rng = np.random.default_rng(0)
    x = rng.random((2, 4, 16, 16)).astype(np.float32)
    t = (rng.random((2, 16, 16)) < 0.3).astype(np.uint8)
    for _ in range(2):
        lb = loss_backward(m.forward(x, "train")[:, 0], t)
        m.backward(lb.grad[:, None], need_input_grad=False)
        opt.step(store, 1e-3)
        store.zero_grad()
    checkpoint.save(tmp_path / "a.ckpt", store, opt)

    store2 = init_params(ModelConfig(), 99)
    opt2 = AdamW(store2, CFG)
    checkpoint.load_into(tmp_path / "a.ckpt", store2, opt2)
    assert opt2.t == 2
    checkpoint.save(tmp_path / "b.ckpt", store2, opt2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    store = init_params(ModelConfig(), 0)
    checkpoint.save(tmp_path / "a.ckpt", store)
    raw = (tmp_path / "a.ckpt").read_bytes()
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.decode(b"XXXX" + raw[4:])
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.decode(raw[:-3])
    with pytest.raises(checkpoint.CheckpointError, match="trailing"):
        checkpoint.decode(raw + b"\0")
    with pytest.raises(checkpoint.CheckpointError, match="optimizer"):
        checkpoint.load_into(tmp_path / "a.ckpt", init_params(ModelConfig(), 0), AdamW(store))
    other = init_params(ModelConfig(use_scse=False), 0)
    with pytest.raises(checkpoint.CheckpointError, match="names"):
        checkpoint.load_into(tmp_path / "a.ckpt", other)
