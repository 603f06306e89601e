"""Training losses: confidence-weighted L1, mask, SSIM and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .nets import Mlp, mlp_backward, mlp_forward

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

# (rendered, target) -> (value, d_value/d_rendered)
PerceptualScorer = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class LossWeights:
    lambda_m: float = 0.1
    lambda_s: float = 0.01
    lambda_l: float = 0.04
    mu: float = 1.0
    log_confidence: float = 0.0  # optional regulariser, off by default

    def __post_init__(self):
        for name in ("lambda_m", "lambda_s", "lambda_l", "mu", "log_confidence"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


# ---------------------------------------------------------------------------
# confidence


@dataclass
class ConfidenceMap:
    C: np.ndarray  # H x W
    raw: np.ndarray  # E(I_r, D_r), H x W
    mu: float
    _cache: tuple | None = None


def confidence(net: Mlp, rendered_color: np.ndarray, rendered_depth: np.ndarray, mu: float = 1.0) -> ConfidenceMap:
    """C = mu + exp(E(I_r, D_r)) per pixel; inputs are treated as constants."""
    if rendered_color.shape[:2] != rendered_depth.shape:
        raise ValueError("colour and depth images must share H x W")
    feats = np.concatenate([rendered_color, rendered_depth[..., None]], axis=-1)
    e, cache = mlp_forward(net, feats)
    e = e[..., 0]
    return ConfidenceMap(mu + np.exp(e), e, mu, cache)


def confidence_backward(net: Mlp, conf: ConfidenceMap, d_C: np.ndarray) -> list[np.ndarray]:
    d_e = (d_C * np.exp(conf.raw))[..., None]
    grads, _ = mlp_backward(net, conf._cache, d_e)
    return grads


def confidence_l1(C: np.ndarray, rendered: np.ndarray, target: np.ndarray, return_grads: bool = False):
    """Mean over pixels and channels of C * |I_r - I|."""
    if rendered.shape != target.shape or rendered.shape[:2] != np.shape(C):
        raise ValueError("shape mismatch between confidence, rendered and target images")
    resid = rendered - target
    n = resid.size
    value = float(np.sum(C[..., None] * np.abs(resid)) / n)
    if not return_grads:
        return value
    d_rendered = C[..., None] * np.sign(resid) / n
    d_C = np.sum(np.abs(resid), axis=-1) / n
    return value, d_rendered, d_C


def log_confidence_penalty(C: np.ndarray, return_grads: bool = False):
    """-mean(log C); counteracts the drift of C towards its floor when weighted in."""
    value = float(-np.mean(np.log(C)))
    if not return_grads:
        return value
    return value, -1.0 / (C * C.size)


def mask_loss(alpha: np.ndarray, mask: np.ndarray, return_grads: bool = False):
    if alpha.shape != mask.shape:
        raise ValueError(f"alpha {alpha.shape} and mask {mask.shape} differ in shape")
    resid = alpha - mask
    value = float(np.mean(np.abs(resid)))
    if not return_grads:
        return value
    return value, np.sign(resid) / resid.size


# ---------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2 * sigma * sigma))
    return w / w.sum()


def _corr_valid(img: np.ndarray, w: np.ndarray, axis: int) -> np.ndarray:
    k = w.size
    n = img.shape[axis] - k + 1
    out = np.zeros(img.shape[:axis] + (n,) + img.shape[axis + 1:])
    for i in range(k):
        out += w[i] * np.take(img, np.arange(i, i + n), axis=axis)
    return out


def _corr_valid_T(grad: np.ndarray, w: np.ndarray, axis: int) -> np.ndarray:
    k = w.size
    n = grad.shape[axis]
    shape = list(grad.shape)
    shape[axis] = n + k - 1
    out = np.zeros(shape)
    for i in range(k):
        idx = [slice(None)] * grad.ndim
        idx[axis] = slice(i, i + n)
        out[tuple(idx)] += w[i] * grad
    return out


def _filter(img, w):
    return _corr_valid(_corr_valid(img, w, 0), w, 1)


def _filter_T(grad, w):
    return _corr_valid_T(_corr_valid_T(grad, w, 1), w, 0)


def _window_for(shape) -> np.ndarray:
    size = min(SSIM_WINDOW, shape[0], shape[1])
    if size % 2 == 0:
        size -= 1
    return gaussian_window(max(size, 1))


def ssim(img_a: np.ndarray, img_b: np.ndarray, return_grad: bool = False):
    """Mean local SSIM over the valid region (11x11 Gaussian window, sigma 1.5).

    Images are H x W or H x W x C with unit dynamic range.  The window shrinks
    to the largest odd size that fits when an image is smaller than 11 pixels.
    ``return_grad`` adds d SSIM / d img_a.
    """
    if img_a.shape != img_b.shape:
        raise ValueError("ssim inputs must share shape")
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    w = _window_for(a.shape)
    mu_a, mu_b = _filter(a, w), _filter(b, w)
    e_aa, e_bb, e_ab = _filter(a * a, w), _filter(b * b, w), _filter(a * b, w)
    s_aa = e_aa - mu_a * mu_a
    s_bb = e_bb - mu_b * mu_b
    s_ab = e_ab - mu_a * mu_b
    a1 = 2 * mu_a * mu_b + SSIM_C1
    a2 = 2 * s_ab + SSIM_C2
    b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    b2 = s_aa + s_bb + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())
    if not return_grad:
        return value
    g = 1.0 / smap.size
    d_mu_a = g * (2 * mu_b * (a2 - a1) / (b1 * b2) - 2 * mu_a * smap * (1.0 / b1 - 1.0 / b2))
    d_e_aa = g * (-smap / b2)
    d_e_ab = g * (2 * a1 / (b1 * b2))
    grad = _filter_T(d_mu_a, w) + 2 * a * _filter_T(d_e_aa, w) + b * _filter_T(d_e_ab, w)
    return value, grad


# ---------------------------------------------------------------------------
# total


@dataclass
class LossParts:
    confidence_l1: float
    mask: float
    ssim_term: float  # 1 - SSIM
    perceptual: float = 0.0


def total_loss(parts: LossParts, weights: LossWeights) -> float:
    return (parts.confidence_l1 + weights.lambda_m * parts.mask + weights.lambda_s * parts.ssim_term
            + weights.lambda_l * parts.perceptual)


@dataclass
class ImageLoss:
    value: float
    parts: LossParts
    d_color: np.ndarray
    d_alpha: np.ndarray
    d_confidence_net: list[np.ndarray]
    confidence: ConfidenceMap


def image_loss(confidence_net: Mlp, color: np.ndarray, depth: np.ndarray, alpha: np.ndarray, target: np.ndarray,
               mask: np.ndarray, weights: LossWeights,
               perceptual: Optional[PerceptualScorer] = None) -> ImageLoss:
    """Full training objective for one rendered frame with gradient routing.

    The confidence network sees detached copies of the render, so its output
    only reweights the L1 term and never feeds gradients back into rendering.
    """
    conf = confidence(confidence_net, color, depth, weights.mu)
    lc, d_color, d_C = confidence_l1(conf.C, color, target, return_grads=True)
    if weights.log_confidence > 0:
        _, d_reg = log_confidence_penalty(conf.C, return_grads=True)
        d_C = d_C + weights.log_confidence * d_reg
    lm, d_alpha = mask_loss(alpha, mask, return_grads=True)
    s, d_s = ssim(color, target, return_grad=True)
    lp = 0.0
    if perceptual is not None:
        lp, d_p = perceptual(color, target)
        d_color = d_color + weights.lambda_l * d_p
    parts = LossParts(lc, lm, 1.0 - s, float(lp))
    value = total_loss(parts, weights)
    if weights.log_confidence > 0:
        value += weights.log_confidence * log_confidence_penalty(conf.C)
    d_color = d_color - weights.lambda_s * d_s
    net_grads = confidence_backward(confidence_net, conf, d_C)
    return ImageLoss(value, parts, d_color, weights.lambda_m * d_alpha, net_grads, conf)
