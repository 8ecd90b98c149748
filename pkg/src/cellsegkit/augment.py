"""Joint image/mask augmentation and dihedral test-time augmentation."""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .metrics import ShapeMismatchError, as_image, as_mask


@dataclass(frozen=True)
class AugmentConfig:
    p_flip: float = 0.5
    p_rot90: float = 0.5
    p_elastic: float = 0.3
    elastic_alpha: float = 120.0  # at 512 px, scaled by H / 512
    elastic_sigma: float = 9.0
    p_photometric: float = 0.5
    brightness_contrast_delta: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("p_flip", "p_rot90", "p_elastic", "p_photometric"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.elastic_alpha < 0 or self.elastic_sigma < 0 or self.brightness_contrast_delta < 0:
            raise ValueError("elastic_alpha, elastic_sigma and brightness_contrast_delta must be >= 0")


NO_AUGMENT = AugmentConfig(p_flip=0.0, p_rot90=0.0, p_elastic=0.0, p_photometric=0.0)


def elastic_fields(shape, cfg, rng):
    h, w = shape
    alpha = cfg.elastic_alpha * h / 512.0
    dy = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, (h, w)), cfg.elastic_sigma, mode="reflect") * alpha
    dx = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, (h, w)), cfg.elastic_sigma, mode="reflect") * alpha
    return dy, dx


def elastic_warp(image, mask, dy, dx):
    h, w = mask.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = np.stack([yy + dy, xx + dx])
    warped = np.stack([ndimage.map_coordinates(image[..., c], coords, order=1, mode="reflect")
                       for c in range(image.shape[2])], axis=2)
    wmask = ndimage.map_coordinates(mask, coords, order=0, mode="reflect")
    return np.clip(warped, 0.0, 1.0), wmask.astype(np.uint8)


def augment(image, mask, cfg, rng):
    """Apply one random transform to an ``(H, W, C)`` image and its mask.

    The same uniforms are drawn whether or not a transform fires, so toggling
    one probability never shifts the stream seen by the others. Photometric
    jitter touches only the first three (colour) channels.
    """
    image, mask = as_image(image), as_mask(mask)
    if image.shape[:2] != mask.shape:
        raise ShapeMismatchError(f"image {image.shape[:2]} and mask {mask.shape} differ")
    u = rng.random(6)
    k = int(rng.integers(1, 4))
    d = cfg.brightness_contrast_delta
    c, b = rng.uniform(-d, d, 2) if d > 0 else (0.0, 0.0)

    if u[0] < cfg.p_flip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if u[1] < cfg.p_flip:
        image, mask = image[::-1], mask[::-1]
    if u[2] < cfg.p_rot90:
        if mask.shape[0] != mask.shape[1]:
            k = 2
        image, mask = np.rot90(image, k, axes=(0, 1)), np.rot90(mask, k)
    image, mask = np.ascontiguousarray(image), np.ascontiguousarray(mask)
    if u[3] < cfg.p_elastic:
        dy, dx = elastic_fields(mask.shape, cfg, rng)
        image, mask = elastic_warp(image, mask, dy, dx)
    if u[4] < cfg.p_photometric:
        image = image.copy()
        image[..., :3] = np.clip(image[..., :3] * (1.0 + c) + b, 0.0, 1.0)
    return image, mask


# (forward, inverse) on arrays whose first two axes are H, W
TTA_MEMBERS = {
    "identity": (lambda a: a, lambda a: a),
    "hflip": (lambda a: a[:, ::-1], lambda a: a[:, ::-1]),
    "vflip": (lambda a: a[::-1], lambda a: a[::-1]),
    "rot180": (lambda a: a[::-1, ::-1], lambda a: a[::-1, ::-1]),
    "rot90": (lambda a: np.rot90(a, 1, axes=(0, 1)), lambda a: np.rot90(a, -1, axes=(0, 1))),
    "rot270": (lambda a: np.rot90(a, 3, axes=(0, 1)), lambda a: np.rot90(a, -3, axes=(0, 1))),
    "transpose": (lambda a: a.swapaxes(0, 1), lambda a: a.swapaxes(0, 1)),
}
FLIP_MEMBERS = ("identity", "hflip", "vflip", "rot180")


@dataclass
class TTAResult:
    prob: np.ndarray
    members: tuple
    fallback: bool


def tta_predict(predict, images):
    """Average sigmoid outputs over the dihedral members.

    ``predict`` maps an ``(N, H, W, C)`` batch to ``(N, H, W)`` logits in eval
    mode. ``images`` is ``(H, W, C)`` or ``(N, H, W, C)``. Non-square inputs
    use only the four flip-closed members, flagged by ``fallback``.
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    n, h, w = images.shape[:3]
    fallback = h != w
    names = FLIP_MEMBERS if fallback else tuple(TTA_MEMBERS)
    # move the batch axis behind H, W so each member acts on axes (0, 1)
    hw_first = np.moveaxis(images, 0, 2)
    batch = np.concatenate([np.moveaxis(TTA_MEMBERS[m][0](hw_first), 2, 0) for m in names])
    logits = np.asarray(predict(np.ascontiguousarray(batch)), dtype=np.float64)
    prob = 0.5 * (1.0 + np.tanh(0.5 * logits))  # overflow-free sigmoid
    acc = np.zeros((h, w, n))
    for i, m in enumerate(names):
        part = np.moveaxis(prob[i * n:(i + 1) * n], 0, 2)
        acc += TTA_MEMBERS[m][1](part)
    out = np.moveaxis(acc / len(names), 2, 0)
    return TTAResult(out[0] if single else out, names, fallback)
