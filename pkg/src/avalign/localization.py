"""Per-class sound localization maps and heatmap rendering.

A class's map is the negative Euclidean distance between its audio class
embedding and every projected cell of the visual final map. Maps are
min-max normalized, bilinearly resized to image resolution, fused across
valid classes with probability weights, and rendered as color overlays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .alignment import ProjectionHead
from .nn import autodiff as ad
from .nn.autodiff import Tensor

DEGENERATE_PTP = 1e-12


@dataclass
class LocalizationMap:
    raw: np.ndarray         # (U, V), nonpositive (negative distances)
    normalized: np.ndarray  # (U, V) in [0, 1]
    resized: np.ndarray     # (H, W) in [0, 1]
    class_id: int
    video_id: int


def localize(E_v, f_a_c, proj_a: ProjectionHead, proj_v: ProjectionHead) -> np.ndarray:
    """Raw map K(u,v) = -|| g_a(f_a^c) - g_v(E_v)(u,v) ||_2.

    The visual head is applied cellwise with its parameters unchanged.
    Inference-only: returns a plain array.
    """
    ev = E_v.data if isinstance(E_v, Tensor) else np.asarray(E_v)
    fa = f_a_c.data if isinstance(f_a_c, Tensor) else np.asarray(f_a_c)
    if ev.ndim != 3 or fa.ndim != 1:
        raise ValueError("expected E_v (D, U, V) and f_a (D,)")
    with ad.no_grad():
        a = proj_a(Tensor(fa)).data                     # (E,)
        cells = proj_v.apply_spatial(Tensor(ev)).data   # (E, U, V)
    diff = cells - a[:, None, None]
    return -np.sqrt((diff * diff).sum(axis=0))


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """(K - min) / (max - min); a constant map normalizes to all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= DEGENERATE_PTP:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def bilinear_resize(m: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear interpolation to (H, W)."""
    m = np.asarray(m, dtype=np.float64)
    u, v = m.shape
    H, W = target_hw
    ys = np.linspace(0.0, u - 1.0, H) if H > 1 else np.zeros(1)
    xs = np.linspace(0.0, v - 1.0, W) if W > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(u - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(v - 2, 0))
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    y1 = np.minimum(y0 + 1, u - 1)
    x1 = np.minimum(x0 + 1, v - 1)
    top = m[np.ix_(y0, x0)] * (1 - wx) + m[np.ix_(y0, x1)] * wx
    bot = m[np.ix_(y1, x0)] * (1 - wx) + m[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def normalize_resize(raw: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    return bilinear_resize(normalize_map(raw), target_hw)


def make_localization_map(E_v, f_a_c, proj_a, proj_v, image_hw: tuple[int, int],
                          class_id: int, video_id: int) -> LocalizationMap:
    raw = localize(E_v, f_a_c, proj_a, proj_v)
    norm = normalize_map(raw)
    return LocalizationMap(raw=raw, normalized=norm,
                           resized=bilinear_resize(norm, image_hw),
                           class_id=class_id, video_id=video_id)


def fuse_maps(maps: dict[int, np.ndarray], probs: np.ndarray,
              valid: tuple[int, ...]) -> np.ndarray:
    """Probability-weighted sum of per-class heatmaps over valid classes."""
    if not valid:
        raise ValueError("fuse_maps requires at least one valid class")
    probs = np.asarray(probs, dtype=np.float64)
    weights = np.array([probs[c] for c in valid])
    total = weights.sum()
    weights = weights / total if total > 0 else np.full(len(valid), 1.0 / len(valid))
    fused = np.zeros_like(np.asarray(maps[valid[0]], dtype=np.float64))
    for w, c in zip(weights, valid):
        fused += w * np.asarray(maps[c], dtype=np.float64)
    return fused


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0,1] -> RGB: dark blue through violet to red-yellow."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    r = np.clip(1.5 * v, 0.0, 1.0)
    g = np.clip(1.5 * v - 0.75, 0.0, 1.0)
    b = np.clip(1.0 - 1.25 * v, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def render_heatmap(heatmap: np.ndarray, image: np.ndarray, path: str,
                   alpha: float = 0.5) -> None:
    """Write a lossless PNG of the heatmap alpha-blended over the image."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3 or heatmap.shape != image.shape[:2]:
        raise ValueError("heatmap and image sizes must match")
    blend = (1.0 - alpha) * image + alpha * heat_colormap(heatmap)
    pixels = np.round(np.clip(blend, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")
