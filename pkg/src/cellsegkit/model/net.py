"""Depth-2 nested (UNet++-style) encoder-decoder with manual backprop.

Graph, with ``block = conv3x3 -> BN -> ReLU`` and SCSE after decoder blocks::

    proj: conv3x3(4->8) -> BN -> ReLU -> conv1x1(8->3)
    x00 = block(proj)                         base
    x10 = block(pool(x00))                    2*base,  H/2
    x20 = block(pool(x10))                    4*base,  H/4
    x01 = scse(block([x00, up(x10)]))         base
    x11 = scse(block([x10, up(x20)]))         2*base,  H/2
    x02 = scse(block([x00, x01, up(x11)]))    base
    logits = conv1x1(x02 -> 1)
"""
from dataclasses import dataclass

import numpy as np

from .. import rng
from . import layers as L

NO_DECAY_SUFFIXES = (".bias", ".gamma", ".beta")


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    depth: int = 2
    in_channels: int = 4
    use_scse: bool = True
    use_projection: bool = True
    proj_channels: int = 8
    scse_ratio: int = 2
    head_bias_init: float = -4.0
    dtype: str = "float32"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.depth != 2:
            raise ValueError("only depth 2 is supported")
        if self.base_channels < 2 or self.in_channels < 1:
            raise ValueError("base_channels must be >= 2 and in_channels >= 1")
        if self.base_channels % self.scse_ratio:
            raise ValueError("base_channels must be divisible by scse_ratio")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")


class ParamStore:
    """Named parameters with same-shaped gradient slots, plus non-trainable buffers.

    Gradient slots are always float64 so accumulation over micro-batches does
    not lose precision when the parameters themselves are float32.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def add(self, name, value):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name}")
        self.params[name] = np.ascontiguousarray(value, dtype=self.dtype)
        self.grads[name] = np.zeros(self.params[name].shape)

    def add_buffer(self, name, value):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name}")
        self.buffers[name] = np.ascontiguousarray(value, dtype=self.dtype)

    def __getitem__(self, name):
        return self.params[name]

    def accumulate(self, name, grad):
        self.grads[name] += grad

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def decays(self, name):
        return not name.endswith(NO_DECAY_SUFFIXES)

    def num_params(self):
        return int(sum(p.size for p in self.params.values()))

    def copy(self):
        other = ParamStore(self.dtype)
        for k, v in self.params.items():
            other.add(k, v.copy())
        for k, v in self.buffers.items():
            other.add_buffer(k, v.copy())
        return other


def _init_conv(store, seed, name, out_c, in_c, k, gain=2.0, bias=False):
    fan_in = in_c * k * k
    g = rng.stream(seed, "init", name)
    store.add(f"{name}.weight", g.standard_normal((k, k, in_c, out_c)) * np.sqrt(gain / fan_in))
    if bias:
        store.add(f"{name}.bias", np.zeros(out_c))


def _init_block(store, seed, name, in_c, out_c):
    _init_conv(store, seed, f"{name}.conv", out_c, in_c, 3)
    store.add(f"{name}.bn.gamma", np.ones(out_c))
    store.add(f"{name}.bn.beta", np.zeros(out_c))
    store.add_buffer(f"{name}.bn.running_mean", np.zeros(out_c))
    store.add_buffer(f"{name}.bn.running_var", np.ones(out_c))


def _init_scse(store, seed, name, c, ratio):
    # final gate layers start at zero so both gates open at sigmoid(0) = 0.5
    # and the block is an exact identity; the squeeze layer stays random so
    # the excitation path is not stuck at a symmetric saddle
    mid = c // ratio
    g = rng.stream(seed, "init", f"{name}.fc1")
    store.add(f"{name}.fc1.weight", g.standard_normal((mid, c)) * np.sqrt(2.0 / c))
    store.add(f"{name}.fc1.bias", np.zeros(mid))
    store.add(f"{name}.fc2.weight", np.zeros((c, mid)))
    store.add(f"{name}.fc2.bias", np.zeros(c))
    store.add(f"{name}.spatial.weight", np.zeros(c))
    store.add(f"{name}.spatial.bias", np.zeros(1))


def init_params(cfg, seed=0):
    """Build a ParamStore for ``cfg``. Each tensor draws from its own named
    stream, so toggling SCSE or the projection leaves the others unchanged."""
    store = ParamStore(cfg.dtype)
    c0, c1, c2 = cfg.base_channels, 2 * cfg.base_channels, 4 * cfg.base_channels
    enc_in = cfg.in_channels
    if cfg.use_projection:
        _init_block(store, seed, "proj", cfg.in_channels, cfg.proj_channels)
        _init_conv(store, seed, "proj.out", 3, cfg.proj_channels, 1, gain=1.0, bias=True)
        enc_in = 3
    _init_block(store, seed, "x00", enc_in, c0)
    _init_block(store, seed, "x10", c0, c1)
    _init_block(store, seed, "x20", c1, c2)
    _init_block(store, seed, "x01", c0 + c1, c0)
    _init_block(store, seed, "x11", c1 + c2, c1)
    _init_block(store, seed, "x02", c0 + c0 + c1, c0)
    if cfg.use_scse:
        for name, c in (("x01", c0), ("x11", c1), ("x02", c0)):
            _init_scse(store, seed, f"{name}.scse", c, cfg.scse_ratio)
    _init_conv(store, seed, "head", 1, c0, 1, gain=1.0, bias=True)
    store.params["head.bias"][:] = cfg.head_bias_init
    return store


def param_count(cfg):
    """Closed-form parameter count (excludes BN running statistics)."""
    b, c0, c1, c2 = cfg.in_channels, cfg.base_channels, 2 * cfg.base_channels, 4 * cfg.base_channels

    def block(i, o):
        return 9 * i * o + 2 * o

    n = 0
    enc_in = b
    if cfg.use_projection:
        n += block(b, cfg.proj_channels) + 3 * cfg.proj_channels + 3
        enc_in = 3
    n += block(enc_in, c0) + block(c0, c1) + block(c1, c2)
    n += block(c0 + c1, c0) + block(c1 + c2, c1) + block(2 * c0 + c1, c0)
    if cfg.use_scse:
        for c in (c0, c1, c0):
            m = c // cfg.scse_ratio
            n += (m * c + m) + (c * m + c) + (c + 1)
    n += c0 + 1
    return n


class NestedUNet:
    def __init__(self, cfg=ModelConfig(), seed=0, store=None):
        self.cfg = cfg
        self.store = store if store is not None else init_params(cfg, seed)
        self.dtype = self.store.dtype
        self._tape = None

    # -- sub-blocks ---------------------------------------------------------
    def _block(self, name, x, train, tape):
        p, bufs = self.store.params, self.store.buffers
        y, c_conv = L.conv_forward(x, p[f"{name}.conv.weight"])
        y, c_bn = L.bn_forward(y, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"],
                               bufs[f"{name}.bn.running_mean"], bufs[f"{name}.bn.running_var"],
                               train, self.cfg.bn_momentum, self.cfg.bn_eps)
        y, c_relu = L.relu_forward(y)
        if tape is not None:
            tape[name] = (c_conv, c_bn, c_relu)
        return y

    def _block_backward(self, name, dy, tape, need_dx=True):
        c_conv, c_bn, c_relu = tape[name]
        dy = L.relu_backward(dy, c_relu)
        dy, dgamma, dbeta = L.bn_backward(dy, c_bn)
        self.store.accumulate(f"{name}.bn.gamma", dgamma)
        self.store.accumulate(f"{name}.bn.beta", dbeta)
        dx, dw, _ = L.conv_backward(dy, c_conv, need_dx)
        self.store.accumulate(f"{name}.conv.weight", dw)
        return dx

    def _scse(self, name, x, tape):
        if not self.cfg.use_scse:
            return x
        p = self.store.params
        y, cache = L.scse_forward(x, p[f"{name}.scse.fc1.weight"], p[f"{name}.scse.fc1.bias"],
                                  p[f"{name}.scse.fc2.weight"], p[f"{name}.scse.fc2.bias"],
                                  p[f"{name}.scse.spatial.weight"], p[f"{name}.scse.spatial.bias"])
        if tape is not None:
            tape[f"{name}.scse"] = cache
        return y

    def _scse_backward(self, name, dy, tape):
        if not self.cfg.use_scse:
            return dy
        dx, grads = L.scse_backward(dy, tape[f"{name}.scse"])
        for k, g in grads.items():
            self.store.accumulate(f"{name}.scse.{k}", g)
        return dx

    def _project(self, x, train, tape):
        if not self.cfg.use_projection:
            return x
        p = self.store.params
        y = self._block("proj", x, train, tape)
        y, cache = L.conv_forward(y, p["proj.out.weight"], p["proj.out.bias"])
        if tape is not None:
            tape["proj.out"] = cache
        return y

    def _project_backward(self, dy, tape, need_dx=True):
        if not self.cfg.use_projection:
            return dy
        dy, dw, db = L.conv_backward(dy, tape["proj.out"])
        self.store.accumulate("proj.out.weight", dw)
        self.store.accumulate("proj.out.bias", db)
        return self._block_backward("proj", dy, tape, need_dx)

    # -- public -------------------------------------------------------------
    def project(self, x, mode="train"):
        """Input projection alone on an NCHW tensor (4 -> 3 channels)."""
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        train = mode == "train"
        tape = {} if train else None
        out = self._project(np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype), train, tape)
        self._tape = ("project", tape)
        return out.transpose(0, 3, 1, 2)

    def project_backward(self, dout):
        kind, tape = self._tape or (None, None)
        if kind != "project" or tape is None:
            raise RuntimeError("project_backward requires a preceding train-mode project()")
        dx = self._project_backward(np.ascontiguousarray(dout.transpose(0, 2, 3, 1), dtype=self.dtype), tape)
        return dx.transpose(0, 3, 1, 2)

    def forward(self, x, mode="train"):
        """``x``: ``(N, C, H, W)`` with H, W divisible by 4. Returns ``(N, 1, H, W)`` logits."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (N, {self.cfg.in_channels}, H, W) input, got shape {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"spatial dims must be divisible by 4, got {x.shape[2:]}")
        train = mode == "train"
        tape = {} if train else None
        p = self.store.params

        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)
        h = self._project(h, train, tape)
        x00 = self._block("x00", h, train, tape)
        p0, c_p0 = L.maxpool_forward(x00)
        x10 = self._block("x10", p0, train, tape)
        p1, c_p1 = L.maxpool_forward(x10)
        x20 = self._block("x20", p1, train, tape)

        c0, c1 = x00.shape[3], x10.shape[3]
        cat = np.concatenate
        x01 = self._scse("x01", self._block("x01", cat([x00, L.upsample_forward(x10)], axis=3), train, tape), tape)
        x11 = self._scse("x11", self._block("x11", cat([x10, L.upsample_forward(x20)], axis=3), train, tape), tape)
        x02 = self._scse("x02", self._block(
            "x02", cat([x00, x01, L.upsample_forward(x11)], axis=3), train, tape), tape)
        logits, c_head = L.conv_forward(x02, p["head.weight"], p["head.bias"])

        if train:
            tape.update(pool0=c_p0, pool1=c_p1, head=c_head, c0=c0, c1=c1)
            self._tape = ("forward", tape)
        else:
            self._tape = None
        return logits.transpose(0, 3, 1, 2)

    def backward(self, dlogits, need_input_grad=True):
        """Accumulate parameter gradients for upstream ``dL/dlogits`` (N, 1, H, W);
        returns ``dL/dx`` in NCHW (``None`` when ``need_input_grad`` is false)."""
        kind, tape = self._tape or (None, None)
        if kind != "forward":
            raise RuntimeError("backward requires a preceding train-mode forward()")
        c0, c1 = tape["c0"], tape["c1"]
        d = np.ascontiguousarray(np.asarray(dlogits).transpose(0, 2, 3, 1), dtype=self.dtype)

        dx02, dw, db = L.conv_backward(d, tape["head"])
        self.store.accumulate("head.weight", dw)
        self.store.accumulate("head.bias", db)

        dcat = self._block_backward("x02", self._scse_backward("x02", dx02, tape), tape)
        dx00 = dcat[..., :c0].copy()
        dx01 = dcat[..., c0:2 * c0]
        dx11 = L.upsample_backward(dcat[..., 2 * c0:])

        dcat = self._block_backward("x11", self._scse_backward("x11", dx11, tape), tape)
        dx10 = dcat[..., :c1].copy()
        dx20 = L.upsample_backward(dcat[..., c1:])

        dcat = self._block_backward("x01", self._scse_backward("x01", dx01, tape), tape)
        dx00 += dcat[..., :c0]
        dx10 += L.upsample_backward(dcat[..., c0:])

        dp1 = self._block_backward("x20", dx20, tape)
        dx10 += L.maxpool_backward(dp1, tape["pool1"])
        dp0 = self._block_backward("x10", dx10, tape)
        dx00 += L.maxpool_backward(dp0, tape["pool0"])
        need = need_input_grad or self.cfg.use_projection
        dh = self._block_backward("x00", dx00, tape, need)
        dx = self._project_backward(dh, tape, need_input_grad)
        self._tape = None
        return dx.transpose(0, 3, 1, 2) if need_input_grad else None
