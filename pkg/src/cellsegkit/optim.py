"""AdamW with decoupled weight decay, one-cycle learning-rate schedule and
global-norm gradient clipping."""
import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class OptimConfig:
    lr_max: float = 3e-4
    lr_min: float = 3e-7
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 0.5
    accum_steps: int = 2
    total_steps: int = 1000
    warmup_frac: float = 0.10
    warmup_div: float = 25.0

    def __post_init__(self):
        if not self.lr_max > self.lr_min > 0:
            raise ValueError("need lr_max > lr_min > 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if not 0 < self.warmup_frac < 1:
            raise ValueError("warmup_frac must be in (0, 1)")
        if self.total_steps < 2:
            raise ValueError("total_steps must be >= 2")
        if self.accum_steps < 1:
            raise ValueError("accum_steps must be >= 1")
        if self.weight_decay < 0 or self.adam_eps <= 0 or self.warmup_div < 1:
            raise ValueError("invalid weight_decay, adam_eps or warmup_div")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must be in [0, 1)")

    def with_total(self, total_steps):
        return replace(self, total_steps=int(total_steps))


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


def warmup_steps(cfg):
    # round half up, and keep at least one step in each phase
    w = math.floor(cfg.warmup_frac * cfg.total_steps + 0.5)
    return min(max(w, 1), cfg.total_steps - 1)


def lr_at(t, cfg):
    """Learning rate at step ``t`` in ``[0, total_steps]``.

    Linear warmup from ``lr_max / warmup_div`` to ``lr_max``, then
    ``lr_min + (lr_max - lr_min) / 2 * (1 + cos(pi * tau / T))`` with ``tau``
    counted from the end of warmup and ``T`` the remaining steps.
    """
    if int(t) != t or not 0 <= t <= cfg.total_steps:
        raise ValueError(f"step {t} outside [0, {cfg.total_steps}]")
    w = warmup_steps(cfg)
    if t <= w:
        lo = cfg.lr_max / cfg.warmup_div
        return lo + (cfg.lr_max - lo) * (t / w)
    tau, span = t - w, cfg.total_steps - w
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) / 2 * (1 + math.cos(math.pi * tau / span))


def schedule(cfg):
    return np.array([lr_at(t, cfg) for t in range(cfg.total_steps + 1)])


def global_norm(store):
    return math.sqrt(sum(float(np.vdot(g, g)) for g in store.grads.values()))


def check_finite_grads(store):
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)


def average_gradients(store, n):
    if n != 1:
        for g in store.grads.values():
            g /= n


def clip_gradients(store, clip_norm):
    """Scale all gradients so their global L2 norm is at most ``clip_norm``.
    Returns the factor applied (1.0 when nothing was clipped)."""
    check_finite_grads(store)
    norm = global_norm(store)
    # a norm equal to the bound up to rounding counts as unclipped, which
    # makes a second application a no-op
    if norm <= clip_norm * (1 + 1e-12):
        return 1.0
    factor = clip_norm / norm
    for g in store.grads.values():
        g *= factor
    return factor


class AdamW:
    def __init__(self, store, cfg=OptimConfig()):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}

    def step(self, store, lr):
        cfg = self.cfg
        for name, p in store.params.items():
            if self.m[name].shape != p.shape or store.grads[name].shape != p.shape:
                raise ValueError(f"optimizer state shape mismatch for {name}")
        check_finite_grads(store)
        self.t += 1
        bc1 = 1 - cfg.beta1 ** self.t
        bc2 = 1 - cfg.beta2 ** self.t
        for name, p in store.params.items():
            g = store.grads[name]
            m = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
            v = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * g * g
            self.m[name][...] = m
            self.v[name][...] = v
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
            new = p.astype(np.float64)
            if cfg.weight_decay and store.decays(name):
                new = new - lr * cfg.weight_decay * new
            new -= update
            if not np.all(np.isfinite(new)):
                raise FloatingPointError(f"non-finite update for parameter {name!r}")
            p[...] = new

    def state_tensors(self):
        out = {"step": np.array(float(self.t))}
        for k in self.m:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors):
        self.t = int(tensors["step"])
        for k in self.m:
            if tensors[f"m.{k}"].shape != self.m[k].shape or tensors[f"v.{k}"].shape != self.v[k].shape:
                raise ValueError(f"optimizer state shape mismatch for {k}")
            self.m[k][...] = tensors[f"m.{k}"]
            self.v[k][...] = tensors[f"v.{k}"]
