"""Class-specific feature disentanglement.

Gradient-weighted class activation maps pick out where each predicted
class lives on a feature map; weighted global pooling then turns the map
into one feature vector per class. The activation map is a constant
downstream: training signal flows through the pooled features only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import autodiff as ad
from .nn.autodiff import Tensor

POOL_EPS = 1e-8


@dataclass
class ClassActivationMap:
    weights: np.ndarray        # (U, V), rectified (entries >= 0)
    class_id: int
    modality: str              # "audio" | "visual"
    degenerate: bool           # logit had zero gradient everywhere

    def __post_init__(self) -> None:
        if self.weights.ndim != 2 or (self.weights < 0).any():
            raise ValueError("activation map must be 2-D and nonnegative")


@dataclass
class ClassFeatureSet:
    video_id: int
    modality: str
    features: dict[int, Tensor]              # class_id -> (D,) vector
    valid_classes: tuple[int, ...]
    cams: dict[int, ClassActivationMap]

    def __post_init__(self) -> None:
        if not set(self.features) <= set(self.valid_classes):
            raise ValueError("feature keys must be a subset of valid_classes")


def grad_cam(feature: Tensor, logit: Tensor, class_id: int = -1,
             modality: str = "") -> ClassActivationMap:
    """Per-channel weights = spatial mean of d logit / d feature; map =
    ReLU of the weighted channel sum.

    feature must be a leaf of the logit's graph, shaped (D, U, V) or
    (1, D, U, V). The returned map is a plain array: no gradient flows
    through it.
    """
    if logit.data.size != 1:
        raise ValueError("logit must be scalar")
    feature.grad = None
    logit.backward()
    g = feature.grad
    if g is None:
        raise ValueError("logit is not connected to the feature map")
    fdata = feature.data
    if fdata.ndim == 4:
        if fdata.shape[0] != 1:
            raise ValueError("grad_cam runs per sample")
        fdata, g = fdata[0], g[0]
    alpha = g.mean(axis=(1, 2))                       # (D,)
    raw = np.tensordot(alpha, fdata, axes=([0], [0]))  # (U, V)
    return ClassActivationMap(weights=np.maximum(raw, 0.0), class_id=class_id,
                              modality=modality, degenerate=not np.any(g))


def weighted_pool(feature_map: Tensor, weights) -> Tensor:
    """f = sum_uv E(u,v) * W(u,v) / sum_uv W(u,v); gradient reaches the
    feature map only. Near-zero total weight falls back to uniform."""
    w = weights.weights if isinstance(weights, ClassActivationMap) else np.asarray(weights)
    fmap = feature_map
    if fmap.ndim == 4:
        if fmap.shape[0] != 1:
            raise ValueError("weighted_pool runs per sample")
        fmap = ad.reshape(fmap, tuple(fmap.shape[1:]))
    if w.shape != tuple(fmap.shape[1:]):
        raise ValueError(f"weights {w.shape} misaligned with map {tuple(fmap.shape)}")
    total = w.sum()
    if total < POOL_EPS:
        w_norm = np.full_like(w, 1.0 / w.size, dtype=fmap.dtype)
    else:
        w_norm = (w / total).astype(fmap.dtype)
    return ad.tsum(ad.mul(fmap, Tensor(w_norm[None, :, :])), axis=(1, 2))


def select_valid_classes(probs: np.ndarray, tau_cls: float,
                         true_labels: np.ndarray | None = None) -> tuple[int, ...]:
    """{c : p_c >= tau} (inclusive); ground-truth positives always join
    when labels are supplied (training-time behavior)."""
    probs = np.asarray(probs)
    if probs.ndim != 1:
        raise ValueError("probs must be (C,)")
    valid = set(np.nonzero(probs >= tau_cls)[0].tolist())
    if true_labels is not None:
        valid |= set(np.nonzero(np.asarray(true_labels) > 0)[0].tolist())
    return tuple(sorted(int(c) for c in valid))


def disentangle_sample(final_map: Tensor, head, tau_cls: float, video_id: int,
                       modality: str, true_labels: np.ndarray | None = None,
                       classes: tuple[int, ...] | None = None) -> ClassFeatureSet:
    """One grad_cam + weighted_pool per valid class of one sample.

    final_map: (D, U, V), graph-connected so pooled features train the
    encoder. `classes` overrides validity selection when the caller needs
    maps for a fixed class set (scoring paths).
    """
    if final_map.ndim != 3:
        raise ValueError("disentangle_sample expects a (D, U, V) map")
    shape = (1,) + tuple(final_map.shape)
    with ad.no_grad():
        probs = head.classify_detached(ad.reshape(final_map.detach(), shape)).probs.data[0]
    if classes is None:
        valid = select_valid_classes(probs, tau_cls, true_labels)
    else:
        valid = tuple(sorted(int(c) for c in classes))
    features: dict[int, Tensor] = {}
    cams: dict[int, ClassActivationMap] = {}
    for c in valid:
        leaf = Tensor(final_map.data.reshape(shape), requires_grad=True)
        pred = head.classify_detached(leaf)
        cam = grad_cam(leaf, pred.logits[0, c], class_id=c, modality=modality)
        cams[c] = cam
        features[c] = weighted_pool(final_map, cam)
    return ClassFeatureSet(video_id=video_id, modality=modality, features=features,
                           valid_classes=valid, cams=cams)
