"""Slow, obviously-correct reference implementations used only by tests."""
import math

import numpy as np


def loss_oracle(logits, targets, eps=1e-7, smooth=1.0, w=(0.5, 0.3, 0.2), alpha=0.7, beta=0.3,
                clamp=10.0, pw_lo=1.0, pw_hi=50.0):
    """Straight transcription of the stabilized combined loss, one pixel at a time."""
    B = len(logits)
    H, W = len(logits[0]), len(logits[0][0])
    n = B * H * W
    total_pos = sum(float(targets[b][i][j]) for b in range(B) for i in range(H) for j in range(W))
    pos_ratio = max(total_pos / n, eps)
    pos_weight = min(max((1 - pos_ratio) / pos_ratio, pw_lo), pw_hi)

    dice_sum = tv_sum = 0.0
    bce = 0.0
    for b in range(B):
        tp = fp = fn = psum = tsum = 0.0
        for i in range(H):
            for j in range(W):
                x = float(logits[b][i][j])
                t = float(targets[b][i][j])
                xc = min(max(x, -clamp), clamp) if clamp is not None else x
                p = 1.0 / (1.0 + math.exp(-xc))
                p = min(max(p, eps), 1 - eps)
                tp += p * t
                fp += p * (1 - t)
                fn += (1 - p) * t
                psum += p
                tsum += t
                # -[pw t log s(x) + (1-t) log(1-s(x))] with log s(x) = -log1p(e^-x)
                log_s = -(math.log1p(math.exp(-x)) if x >= 0 else -x + math.log1p(math.exp(x)))
                log_1ms = -(math.log1p(math.exp(x)) if x <= 0 else x + math.log1p(math.exp(-x)))
                bce += -(pos_weight * t * log_s + (1 - t) * log_1ms)
        dice_sum += (2 * tp + smooth) / (psum + tsum + smooth)
        tv_sum += (tp + smooth) / (tp + alpha * fp + beta * fn + smooth)
    l_dice = 1 - dice_sum / B
    l_tv = 1 - tv_sum / B
    l_bce = bce / n
    total = w[0] * l_dice + w[1] * l_bce + w[2] * l_tv
    return {"total": total, "dice_loss": l_dice, "bce_loss": l_bce, "tversky_loss": l_tv,
            "pos_weight": pos_weight}


def naive_convolve_reflect(plane, kernel):
    """True 2-D convolution (kernel flipped) with reflect padding, double loop."""
    k = kernel.shape[0]
    r = k // 2
    padded = np.pad(plane, r, mode="reflect")
    h, w = plane.shape
    flipped = kernel[::-1, ::-1]
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = float(np.sum(padded[i:i + k, j:j + k] * flipped))
    return out


def naive_confusion(pred, target):
    tp = fp = fn = tn = 0
    for i in range(len(pred)):
        for j in range(len(pred[0])):
            p, t = int(pred[i][j]), int(target[i][j])
            if p and t:
                tp += 1
            elif p and not t:
                fp += 1
            elif t:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def gabor_value(x, y, lam, theta, psi=0.0, sigma=5.0, gamma=0.5):
    xr = x * math.cos(theta) + y * math.sin(theta)
    yr = -x * math.sin(theta) + y * math.cos(theta)
    return math.exp(-(xr ** 2 + gamma ** 2 * yr ** 2) / (2 * sigma ** 2)) * math.cos(2 * math.pi * xr / lam + psi)


def naive_conv2d_same(x, w, b=None):
    """NCHW input, (O, C, k, k) weights, zero 'same' padding, cross-correlation."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.zeros((n, o, h, wd))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, :, i:i + k, j:j + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    if b is not None:
        out += b[None, :, None, None]
    return out


def rel_err(a, b, floor=1e-7):
    """Elementwise relative error; differences within the absolute floor count as 0."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.where(diff <= floor, 0.0, diff / np.where(scale > 0, scale, 1.0))
