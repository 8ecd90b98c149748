"""Gabor filter bank edge enhancement and 4-channel input assembly."""
import math
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .metrics import ShapeMismatchError, as_image

ORIENTATIONS = tuple(k * math.pi / 8 for k in range(8))
WAVELENGTHS = (4.0, 10.0, 20.0)
SIGMA = 5.0
GAMMA = 0.5
PSI = 0.0
DEFAULT_SIDE = 2 * math.ceil(3 * SIGMA) + 1
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class GaborParams:
    wavelength: float
    theta: float
    psi: float = PSI
    sigma: float = SIGMA
    gamma: float = GAMMA

    def __post_init__(self):
        if not (self.wavelength > 0 and self.sigma > 0 and self.gamma > 0):
            raise ValueError("wavelength, sigma and gamma must be positive")
        if not 0 <= self.theta < math.pi:
            raise ValueError(f"theta must be in [0, pi), got {self.theta}")


def _check_side(side):
    if int(side) != side or side < 3 or side % 2 == 0:
        raise ValueError(f"kernel side must be an odd integer >= 3, got {side}")
    return int(side)


def gabor_kernel(params, side=DEFAULT_SIDE):
    """Kernel raster indexed ``[row, col]`` with ``y = row - c`` and ``x = col - c``."""
    side = _check_side(side)
    half = (side - 1) // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    ct, st = math.cos(params.theta), math.sin(params.theta)
    xr = x * ct + y * st
    yr = -x * st + y * ct
    envelope = np.exp(-(xr ** 2 + params.gamma ** 2 * yr ** 2) / (2 * params.sigma ** 2))
    return envelope * np.cos(2 * math.pi * xr / params.wavelength + params.psi)


class GaborBank:
    """24 kernels ordered by wavelength, then orientation."""

    def __init__(self, params, side):
        self.side = _check_side(side)
        self.params = tuple(params)
        self.kernels = np.stack([gabor_kernel(p, self.side) for p in self.params])
        if not np.all(np.isfinite(self.kernels)):
            raise ValueError("non-finite kernel value")
        self._spectra = {}

    def __len__(self):
        return len(self.params)

    def spectra(self, fft_shape):
        spec = self._spectra.get(fft_shape)
        if spec is None:
            spec = scipy.fft.rfft2(self.kernels, s=fft_shape, axes=(-2, -1))
            self._spectra[fft_shape] = spec
        return spec


def build_bank(side=DEFAULT_SIDE):
    params = [GaborParams(wavelength=lam, theta=th) for lam in WAVELENGTHS for th in ORIENTATIONS]
    return GaborBank(params, side)


def convolve_bank(planes, bank, workers=None):
    """Convolve each ``(H, W)`` plane with every kernel under reflect padding.

    ``planes`` is ``(H, W)`` or ``(N, H, W)``; the result gains a kernel axis:
    ``(K, H, W)`` or ``(N, K, H, W)``. Implemented by FFT on the padded plane;
    each output pixel is a true (flipped-kernel) convolution sum.
    """
    planes = np.asarray(planes, dtype=np.float64)
    single = planes.ndim == 2
    if single:
        planes = planes[None]
    n, h, w = planes.shape
    k = bank.side
    pad = k // 2
    padded = np.pad(planes, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    hp, wp = padded.shape[1:]
    # circular convolution of length >= the padded size leaves the valid
    # window [k-1, k-1+h) free of wrap-around
    fft_shape = (scipy.fft.next_fast_len(hp, real=True), scipy.fft.next_fast_len(wp, real=True))
    img_f = scipy.fft.rfft2(padded, s=fft_shape, axes=(-2, -1), workers=workers)
    prod = img_f[:, None] * bank.spectra(fft_shape)[None]
    full = scipy.fft.irfft2(prod, s=fft_shape, axes=(-2, -1), workers=workers)
    out = full[:, :, k - 1:k - 1 + h, k - 1:k - 1 + w]
    return out[0] if single else out


def luminance(image):
    return np.asarray(image)[..., :3] @ LUMA


def gradient_magnitude(planes):
    """Central-difference gradient magnitude over the last two axes.

    Even-symmetric (zero-phase) kernels respond to ridges, not steps, so the
    bank is applied to the gradient magnitude, where a step becomes a ridge.
    """
    gy, gx = np.gradient(np.asarray(planes, dtype=np.float64), axis=(-2, -1))
    return np.hypot(gy, gx)


def _normalize(resp):
    # per-image min-max; a flat response (up to FFT rounding) maps to zeros
    lo = resp.min(axis=(-2, -1), keepdims=True)
    hi = resp.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    flat = span <= 1e-9 * np.maximum(1.0, np.abs(hi))
    out = np.where(flat, 0.0, (resp - lo) / np.where(flat, 1.0, span))
    return np.clip(out, 0.0, 1.0)


def edge_map(image, bank):
    """Max absolute bank response over the luminance gradient magnitude,
    min-max scaled to [0, 1]. Constant images give all zeros."""
    image = as_image(image)
    if image.shape[2] != 3:
        raise ValueError(f"edge_map expects a 3-channel image, got {image.shape[2]} channels")
    resp = np.abs(convolve_bank(gradient_magnitude(luminance(image)), bank)).max(axis=0)
    return _normalize(resp)


def edge_maps(images, bank):
    """Batched ``edge_map`` over ``(N, H, W, 3)`` images."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[3] != 3:
        raise ValueError(f"expected N x H x W x 3 images, got shape {images.shape}")
    resp = np.abs(convolve_bank(gradient_magnitude(luminance(images)), bank)).max(axis=1)
    return _normalize(resp)


def assemble_4ch(image, edge):
    image = as_image(image)
    if image.shape[2] != 3:
        raise ValueError(f"expected a 3-channel image, got {image.shape[2]} channels")
    edge = np.asarray(edge, dtype=np.float64)
    if edge.shape != image.shape[:2]:
        raise ShapeMismatchError(f"edge shape {edge.shape} does not match image {image.shape[:2]}")
    return np.concatenate([image, edge[..., None]], axis=2)
