"""Fine-grained audiovisual alignment.

Projection heads map class-specific features into a shared space where
Euclidean distance encodes sound-object affinity. The contrastive
objective pulls same-video same-class pairs together and pushes every
other combination beyond a margin. Includes embedding-space cross-modal
retrieval.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .disentangle import ClassFeatureSet
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.layers import Linear, Module

DIST_EPS = 1e-12


@dataclass(frozen=True)
class AlignmentConfig:
    margin: float = 1.0       # negative pairs past this distance stop contributing
    beta: float = 1.0         # alignment weight added to the multitask loss
    batch_size: int = 4       # small: same-class collisions stall the objective

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.batch_size < 2:
            raise ValueError("alignment batches need >= 2 videos")


class ProjectionHead(Module):
    """Two affine layers D -> 2D -> E with a ReLU between."""

    def __init__(self, in_dim: int, rng: np.random.Generator,
                 hidden: int | None = None, out_dim: int = 32, dtype=np.float64):
        hidden = 2 * in_dim if hidden is None else hidden
        self.lin1 = Linear(in_dim, hidden, rng, dtype=dtype)
        self.lin2 = Linear(hidden, out_dim, rng, dtype=dtype)
        # fresh embeddings must start inside the contrastive margin, else
        # every negative pair begins past it and contributes zero gradient
        self.lin2.weight.data *= 0.2

    def forward(self, x: Tensor) -> Tensor:
        single = x.ndim == 1
        if single:
            x = ad.reshape(x, (1, -1))
        y = self.lin2(ad.relu(self.lin1(x)))
        return ad.reshape(y, (-1,)) if single else y

    __call__ = forward

    def apply_spatial(self, fmap: Tensor) -> Tensor:
        """Run the head at every cell of a (D, U, V) map, parameters
        unchanged (equivalent to a 1x1 convolutional application)."""
        d, u, v = fmap.shape
        cells = ad.transpose(ad.reshape(fmap, (d, u * v)), (1, 0))
        out = self.forward(cells)                       # (U*V, E)
        return ad.reshape(ad.transpose(out, (1, 0)), (-1, u, v))


def pair_distance(f_a: Tensor, f_v: Tensor, proj_a: ProjectionHead,
                  proj_v: ProjectionHead) -> Tensor:
    """Euclidean distance between the projected features (scalar Tensor)."""
    diff = ad.add(proj_a(f_a), ad.mul(proj_v(f_v), -1.0))
    return ad.sqrt(ad.add(ad.tsum(ad.mul(diff, diff)), DIST_EPS))


def _collect(sets: list[ClassFeatureSet]) -> tuple[list[Tensor], list[tuple[int, int]]]:
    rows, keys = [], []
    for s in sets:
        for c in sorted(s.features):
            rows.append(s.features[c])
            keys.append((s.video_id, c))
    return rows, keys


def contrastive_loss(audio_sets: list[ClassFeatureSet], visual_sets: list[ClassFeatureSet],
                     proj_a: ProjectionHead, proj_v: ProjectionHead,
                     margin: float = 1.0):
    """Margin contrastive loss over every audio x visual feature pair in
    the batch; positive iff same video AND same class. Mean over pairs.

    Returns (loss, info) where info counts the enumerated pairs.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    a_rows, a_keys = _collect(audio_sets)
    v_rows, v_keys = _collect(visual_sets)
    info = {"n_pos": 0, "n_neg": 0}
    if not a_rows or not v_rows:
        warnings.warn("contrastive batch has no feature pairs")
        return Tensor(np.zeros(())), info
    ga = proj_a(ad.stack(a_rows, axis=0))     # (Pa, E)
    gv = proj_v(ad.stack(v_rows, axis=0))     # (Pv, E)
    a2 = ad.tsum(ad.mul(ga, ga), axis=1, keepdims=True)            # (Pa, 1)
    v2 = ad.reshape(ad.tsum(ad.mul(gv, gv), axis=1), (1, -1))      # (1, Pv)
    cross = ad.matmul(ga, ad.transpose(gv, (1, 0)))                # (Pa, Pv)
    d2 = ad.relu(ad.add(ad.add(a2, v2), ad.mul(cross, -2.0)))
    dist = ad.sqrt(ad.add(d2, DIST_EPS))
    pos = np.equal.outer(np.array([k[0] for k in a_keys]), np.array([k[0] for k in v_keys]))
    pos &= np.equal.outer(np.array([k[1] for k in a_keys]), np.array([k[1] for k in v_keys]))
    info["n_pos"] = int(pos.sum())
    info["n_neg"] = int(pos.size - pos.sum())
    if info["n_pos"] == 0:
        warnings.warn("contrastive batch has no positive pairs")
    posf = Tensor(pos.astype(d2.dtype))
    hinge = ad.relu(ad.add(float(margin), ad.mul(dist, -1.0)))
    per_pair = ad.add(ad.mul(posf, d2),
                      ad.mul(ad.add(1.0, ad.mul(posf, -1.0)), ad.mul(hinge, hinge)))
    return ad.tmean(per_pair), info


def stage_two_loss(l_mul, l_ava, beta: float):
    """L_total = L_mul + beta * L_ava, exactly."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    return ad.add(l_mul, ad.mul(l_ava, float(beta)))


def retrieve_cross_modal(query: np.ndarray, gallery: np.ndarray, k: int) -> list[int]:
    """Indices of the k nearest gallery rows by Euclidean distance,
    ascending; ties resolve to the lower index. k beyond the gallery
    returns the full ranking."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or query.shape != (gallery.shape[1],):
        raise ValueError("query must match gallery rows")
    d = np.sqrt(((gallery - query[None, :]) ** 2).sum(axis=1))
    order = np.argsort(d, kind="stable")
    return [int(i) for i in order[: min(k, gallery.shape[0])]]
