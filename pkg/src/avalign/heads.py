"""Stage-one objectives: per-modality multi-label classification, the
audiovisual correspondence network, and the combined loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.layers import ConvBlock, Linear, Module, ResidualBlock

PROB_EPS = 1e-7


@dataclass(frozen=True)
class MultiTaskConfig:
    lam: float = 1.0                       # correspondence weight in the combined loss
    negative_policy: str = "uniform-not-self"

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.negative_policy != "uniform-not-self":
            raise ValueError(f"unknown negative policy {self.negative_policy!r}")


@dataclass
class ClassPrediction:
    logits: Tensor   # (N, C) pre-activation
    probs: Tensor    # (N, C), elementwise sigmoid of logits


@dataclass
class CorrespondencePrediction:
    logits: Tensor   # (N, 2)
    q: Tensor        # (N, 2) softmax; index 1 = "correspond"


class ClassifierHead(Module):
    """Global average pool over the grid, then one linear layer."""

    def __init__(self, embed_dim: int, num_classes: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.fc = Linear(embed_dim, num_classes, rng, dtype=dtype)

    def classify(self, final_map: Tensor) -> ClassPrediction:
        if final_map.ndim != 4:
            raise ValueError(f"expected (N, D, U, V), got {tuple(final_map.shape)}")
        pooled = ad.tmean(final_map, axis=(2, 3))
        logits = self.fc(pooled)
        return ClassPrediction(logits=logits, probs=ad.sigmoid(logits))

    __call__ = classify

    def classify_detached(self, final_map: Tensor) -> ClassPrediction:
        """Forward pass through frozen copies of the head parameters.

        Saliency probes backprop through this graph; using constants here
        keeps their gradients out of the live parameter tensors.
        """
        if final_map.ndim != 4:
            raise ValueError(f"expected (N, D, U, V), got {tuple(final_map.shape)}")
        pooled = ad.tmean(final_map, axis=(2, 3))
        logits = ad.add(ad.matmul(pooled, Tensor(self.fc.weight.data)),
                        Tensor(self.fc.bias.data))
        return ClassPrediction(logits=logits, probs=ad.sigmoid(logits))


def bce_multilabel(y: np.ndarray, probs: Tensor, eps: float = PROB_EPS) -> Tensor:
    """Multi-label binary cross entropy: sum over classes, mean over batch."""
    y = np.atleast_2d(np.asarray(y, dtype=probs.dtype))
    p = probs if probs.ndim == 2 else ad.reshape(probs, (1, -1))
    if y.shape != tuple(p.shape):
        raise ValueError(f"label shape {y.shape} != probs shape {tuple(p.shape)}")
    if np.isnan(y).any() or np.isnan(p.data).any():
        raise ValueError("NaN input to bce_multilabel")
    pc = ad.clip(p, eps, 1.0 - eps)
    ll = ad.add(ad.mul(Tensor(y), ad.log(pc)),
                ad.mul(Tensor(1.0 - y), ad.log(ad.add(1.0, ad.mul(pc, -1.0)))))
    return ad.mul(ad.tmean(ad.tsum(ll, axis=1)), -1.0)


def softmax2(logits: Tensor) -> Tensor:
    """Row softmax with a detached max shift for stability."""
    m = Tensor(logits.data.max(axis=1, keepdims=True))
    e = ad.exp(ad.add(logits, ad.mul(m, -1.0)))
    return ad.div(e, ad.tsum(e, axis=1, keepdims=True))


def cce_loss(targets: np.ndarray, logits: Tensor) -> Tensor:
    """Categorical cross entropy from integer targets (index 1 = correspond)."""
    targets = np.asarray(targets)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ValueError("targets must be (N,) class indices")
    m = Tensor(logits.data.max(axis=1, keepdims=True))
    z = ad.add(logits, ad.mul(m, -1.0))
    lse = ad.add(ad.log(ad.tsum(ad.exp(z), axis=1)), ad.reshape(m, (n,)))
    picked = logits[np.arange(n), targets.astype(np.intp)]
    return ad.tmean(ad.add(lse, ad.mul(picked, -1.0)))


class CorrespondenceNet(Module):
    """Audio conv branch + visual residual branch -> concat -> 2-way logits.

    Audio path: time-dilated conv, frequency-strided conv, plain conv,
    then global pooling. Visual path: 2x pool, residual block, global
    pooling. Each branch ends in a D-vector; the joined 2D vector runs
    through two fully connected layers.
    """

    def __init__(self, audio_ch: int, visual_ch: int, rng: np.random.Generator,
                 fc_hidden: int = 128, dtype=np.float64):
        self.a1 = ConvBlock(audio_ch, audio_ch, (1, 3), rng, dilation=(1, 2), dtype=dtype)
        self.a2 = ConvBlock(audio_ch, audio_ch, (2, 1), rng, stride=(2, 1),
                            padding=(0, 0), dtype=dtype)
        self.a3 = ConvBlock(audio_ch, audio_ch, (1, 3), rng, dtype=dtype)
        self.vres = ResidualBlock(visual_ch, rng, dtype=dtype)
        self.fc1 = Linear(audio_ch + visual_ch, fc_hidden, rng, dtype=dtype)
        self.fc2 = Linear(fc_hidden, 2, rng, dtype=dtype)

    def forward(self, f_a: Tensor, o_v: Tensor) -> CorrespondencePrediction:
        if f_a.ndim != 4 or o_v.ndim != 4:
            raise ValueError("correspondence inputs must be (N, C, H, W)")
        a = self.a3(self.a2(self.a1(f_a)))
        a = ad.tmean(a, axis=(2, 3))
        v = _avg_pool2x(o_v)
        v = self.vres(v)
        v = ad.tmean(v, axis=(2, 3))
        h = ad.relu(self.fc1(ad.concat([a, v], axis=1)))
        logits = self.fc2(h)
        return CorrespondencePrediction(logits=logits, q=softmax2(logits))

    __call__ = forward


def _avg_pool2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"pool needs even spatial dims, got {h}x{w}")
    r = ad.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return ad.tmean(ad.tmean(r, axis=5), axis=3)


def sample_negative(batch, rng: np.random.Generator) -> list[tuple[int, int]]:
    """One mismatched (audio i, visual j) index pair per batch item, j != i
    uniform over the rest of the batch."""
    n = len(batch)
    if n < 2:
        raise ValueError("need a batch of at least 2 to draw negatives")
    r = rng.integers(0, n - 1, size=n)
    j = r + (r >= np.arange(n))
    return [(int(i), int(jj)) for i, jj in enumerate(j)]


def multitask_loss(l_cls, l_avc, lam: float):
    """Combined objective; the correspondence term stays in the graph even
    at lam = 0 so its parameters receive exact zero gradients."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    return ad.add(l_cls, ad.mul(l_avc, float(lam)))
