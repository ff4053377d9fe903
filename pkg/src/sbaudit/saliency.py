"""Grad-CAM and Grad-CAM++ maps at input resolution, plus pixel rankings.

The single-map functions :func:`grad_cam` and :func:`grad_cam_pp` take one
(32, 8, 8) activation/gradient pair.  The ``*_raw`` helpers work on a leading
batch axis and are what the evaluation loop uses; both paths share every
arithmetic step so a map is bit-identical however it was computed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn

GRAD_CAM = "GradCAM"
GRAD_CAM_PP = "GradCAMpp"
EXPLAINERS = (GRAD_CAM, GRAD_CAM_PP)

OUT_SIDE = 32
ALPHA_EPS = 1e-12


@dataclass(frozen=True)
class SaliencyMap:
    map: np.ndarray
    ranking: np.ndarray
    explainer: str
    sample_id: Optional[int] = None


def _check(acts: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    acts = np.asarray(acts, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if acts.shape != grads.shape or acts.ndim < 3:
        raise nn.ShapeError(f"activation/gradient shapes differ or are not (C, H, W): "
                            f"{acts.shape} vs {grads.shape}")
    return acts, grads


def _weighted_sum(weights: np.ndarray, acts: np.ndarray) -> np.ndarray:
    # sequential channel accumulation keeps results independent of batch size
    raw = weights[..., 0, None, None] * acts[..., 0, :, :]
    for k in range(1, acts.shape[-3]):
        raw = raw + weights[..., k, None, None] * acts[..., k, :, :]
    return np.maximum(raw, 0.0)


def grad_cam_raw(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Low-resolution Grad-CAM map ``ReLU(sum_k mean(grads_k) * acts_k)``."""
    acts, grads = _check(acts, grads)
    weights = grads.mean(axis=(-2, -1))
    return _weighted_sum(weights, acts)


def grad_cam_pp_raw(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Low-resolution Grad-CAM++ map (exponential-score closed form).

    ``alpha = g^2 / (2 g^2 + sum(acts_k) * g^3)`` per position, zero where the
    denominator is below ``ALPHA_EPS`` in magnitude; channel weight is
    ``sum(alpha * ReLU(g))``.
    """
    acts, grads = _check(acts, grads)
    g2 = grads * grads
    g3 = g2 * grads
    act_sum = acts.sum(axis=(-2, -1))
    denom = 2.0 * g2 + act_sum[..., None, None] * g3
    ok = np.abs(denom) >= ALPHA_EPS
    alpha = np.divide(g2, denom, out=np.zeros_like(g2), where=ok)
    weights = (alpha * np.maximum(grads, 0.0)).sum(axis=(-2, -1))
    return _weighted_sum(weights, acts)


def _axis_weights(n_in: int, n_out: int):
    # align-corners: output 0 -> input 0, output n_out-1 -> input n_in-1
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def upsample(raw: np.ndarray, side: int = OUT_SIDE) -> np.ndarray:
    """Bilinear, align-corners upsampling of the last two axes (rows first, then columns)."""
    h, w = raw.shape[-2:]
    r0, r1, fr = _axis_weights(h, side)
    c0, c1, fc = _axis_weights(w, side)
    rows = raw[..., r0, :] * (1.0 - fr)[:, None] + raw[..., r1, :] * fr[:, None]
    return rows[..., c0] * (1.0 - fc) + rows[..., c1] * fc


def normalize(m: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1] over the last two axes; constant maps become all zeros."""
    lo = m.min(axis=(-2, -1), keepdims=True)
    hi = m.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    return np.divide(m - lo, span, out=np.zeros_like(m), where=span > 0)


def rank_pixels(m: np.ndarray) -> np.ndarray:
    """Flat pixel indices, most important first; ties by ascending row-major index."""
    flat = m.reshape(*m.shape[:-2], -1)
    return np.argsort(-flat, axis=-1, kind="stable")


def maps_from_raw(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = normalize(upsample(raw))
    return m, rank_pixels(m)


def grad_cam(acts, grads, sample_id: Optional[int] = None) -> SaliencyMap:
    acts, grads = _check(acts, grads)
    if acts.ndim != 3:
        raise nn.ShapeError("grad_cam expects a single (C, H, W) activation tensor")
    m, r = maps_from_raw(grad_cam_raw(acts, grads))
    return SaliencyMap(m, r, GRAD_CAM, sample_id)


def grad_cam_pp(acts, grads, sample_id: Optional[int] = None) -> SaliencyMap:
    acts, grads = _check(acts, grads)
    if acts.ndim != 3:
        raise nn.ShapeError("grad_cam_pp expects a single (C, H, W) activation tensor")
    m, r = maps_from_raw(grad_cam_pp_raw(acts, grads))
    return SaliencyMap(m, r, GRAD_CAM_PP, sample_id)


_RAW = {GRAD_CAM: grad_cam_raw, GRAD_CAM_PP: grad_cam_pp_raw}


def explain_images(model: nn.MiniPadNet, images: np.ndarray, threshold: float,
                   explainers=EXPLAINERS, executor=None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Maps and rankings for a stack of images, keyed by explainer tag.

    Each map explains the predicted class: the gradient target is ``+logit``
    when ``sigmoid(logit) >= threshold`` (attack) and ``-logit`` otherwise.
    Returns ``{tag: (maps (N, 32, 32), rankings (N, 1024))}``.
    """
    for tag in explainers:
        if tag not in _RAW:
            raise ValueError(f"unknown explainer {tag!r}")

    def run(start):
        cache = nn.forward_batch(model, images[start:start + nn.SCORE_CHUNK])
        signs = np.where(cache.score >= threshold, 1, -1)
        grads = nn.backward_to_layer(model, cache, signs)
        return {tag: maps_from_raw(_RAW[tag](cache.target, grads)) for tag in explainers}

    starts = range(0, len(images), nn.SCORE_CHUNK)
    parts = list(executor.map(run, starts)) if executor is not None else [run(s) for s in starts]
    return {
        tag: (np.concatenate([p[tag][0] for p in parts]), np.concatenate([p[tag][1] for p in parts]))
        for tag in explainers
    }


def explain(model: nn.MiniPadNet, image: np.ndarray, threshold: float, explainer: str,
            sample_id: Optional[int] = None) -> SaliencyMap:
    """Saliency map of one 1x32x32 image for the predicted class."""
    if explainer not in _RAW:
        raise ValueError(f"unknown explainer {explainer!r}")
    cache = nn.forward(model, image)
    sign = 1 if float(cache.score) >= threshold else -1
    grads = nn.backward_to_layer(model, cache, sign)
    fn = grad_cam if explainer == GRAD_CAM else grad_cam_pp
    return fn(cache.target, grads, sample_id)


def top_overlap(rank_a: np.ndarray, rank_b: np.ndarray, fraction: float = 0.1) -> float:
    """Share of the top ``fraction`` pixels the two rankings have in common."""
    k = round(fraction * rank_a.shape[-1])
    if k == 0:
        return 1.0
    return len(np.intersect1d(rank_a[:k], rank_b[:k])) / k


def overlay_svg(image: np.ndarray, smap: np.ndarray, cell: int = 8) -> str:
    """Grayscale image with the saliency map as a red, alpha-weighted rect layer."""
    img = np.asarray(image).reshape(OUT_SIDE, OUT_SIDE)
    side = OUT_SIDE * cell
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" '
             f'viewBox="0 0 {side} {side}">']
    for r in range(OUT_SIDE):
        for c in range(OUT_SIDE):
            v = int(round(255 * float(np.clip(img[r, c], 0, 1))))
            parts.append(f'<rect x="{c * cell}" y="{r * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb({v},{v},{v})"/>')
    for r in range(OUT_SIDE):
        for c in range(OUT_SIDE):
            a = float(smap[r, c])
            if a > 0:
                parts.append(f'<rect x="{c * cell}" y="{r * cell}" width="{cell}" height="{cell}" '
                             f'fill="red" fill-opacity="{0.6 * a:.3f}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
