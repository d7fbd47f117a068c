"""Module/parameter plumbing and the layers the encoders are built from.

Initialization is fan-in-scaled uniform from an explicit Generator, so a
model built twice from the same seed has identical parameters.
Normalization uses per-sample, per-position statistics across channels
(no batch coupling, no spatial mixing): batch invariance is exact and a
perturbation's footprint stays inside its convolutional receptive field.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class; parameters and submodules are discovered from attribute
    insertion order, so naming is deterministic."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float64, bias: bool = True):
        self.weight = Tensor(uniform_init(rng, (in_features, out_features), in_features, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = ad.add(y, self.bias)
        return y

    __call__ = forward


def same_padding(kernel, dilation=(1, 1)) -> tuple[int, int]:
    kh, kw = kernel
    dh, dw = dilation
    return (dh * (kh - 1)) // 2, (dw * (kw - 1)) // 2


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, rng: np.random.Generator,
                 stride=(1, 1), padding="same", dilation=(1, 1),
                 dtype=np.float64, bias: bool = True):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
        self.dilation = (dilation, dilation) if isinstance(dilation, int) else tuple(dilation)
        if padding == "same":
            self.padding = same_padding((kh, kw), self.dilation)
        else:
            self.padding = (padding, padding) if isinstance(padding, int) else tuple(padding)
        fan_in = in_ch * kh * kw
        self.weight = Tensor(uniform_init(rng, (out_ch, in_ch, kh, kw), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.weight, self.stride, self.padding, self.dilation)
        if self.bias is not None:
            y = ad.add(y, ad.reshape(self.bias, (1, -1, 1, 1)))
        return y

    __call__ = forward


class ChannelNorm(Module):
    """Normalize across the channel axis independently at every sample and
    spatial position, then apply a per-channel affine.

    eps is a variance floor, not just an epsilon: at positions where all
    channels agree (zero-input background under zero-init biases) the
    cross-channel variance vanishes and the inverse-std curvature scales
    like eps**-1.5, which at 1e-5 turns bias gradients pathological. The
    floor keeps degenerate positions in a sane gradient regime."""

    def __init__(self, channels: int, dtype=np.float64, eps: float = 1e-2):
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        # x: (N, C, ...) with channels on axis 1
        mu = ad.tmean(x, axis=1, keepdims=True)
        xc = ad.add(x, ad.mul(mu, -1.0))
        var = ad.tmean(ad.mul(xc, xc), axis=1, keepdims=True)
        inv = ad.power(ad.add(var, self.eps), -0.5)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        g = ad.reshape(self.gamma, shape)
        b = ad.reshape(self.beta, shape)
        return ad.add(ad.mul(ad.mul(xc, inv), g), b)

    __call__ = forward


class ConvBlock(Module):
    """conv -> channel norm -> relu."""

    def __init__(self, in_ch: int, out_ch: int, kernel, rng, stride=(1, 1),
                 padding="same", dilation=(1, 1), dtype=np.float64):
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, stride, padding, dilation, dtype)
        self.norm = ChannelNorm(out_ch, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ad.relu(self.norm(self.conv(x)))

    __call__ = forward


class ResidualBlock(Module):
    """Two 3x3 convs with a skip: out = x + g(x); zeroed conv weights make
    the block an exact identity."""

    def __init__(self, channels: int, rng, dtype=np.float64):
        self.conv1 = Conv2d(channels, channels, 3, rng, dtype=dtype)
        self.norm1 = ChannelNorm(channels, dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng, dtype=dtype)
        self.norm2 = ChannelNorm(channels, dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = ad.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return ad.add(x, h)

    __call__ = forward


class GRU(Module):
    """Single-layer gated recurrent unit over (N, T, C) sequences."""

    def __init__(self, input_size: int, hidden_size: int, rng, dtype=np.float64):
        self.hidden_size = hidden_size
        fi, fh = input_size, hidden_size
        self.w_xz = Tensor(uniform_init(rng, (fi, fh), fi, dtype), requires_grad=True)
        self.w_hz = Tensor(uniform_init(rng, (fh, fh), fh, dtype), requires_grad=True)
        self.b_z = Tensor(np.zeros(fh, dtype=dtype), requires_grad=True)
        self.w_xr = Tensor(uniform_init(rng, (fi, fh), fi, dtype), requires_grad=True)
        self.w_hr = Tensor(uniform_init(rng, (fh, fh), fh, dtype), requires_grad=True)
        self.b_r = Tensor(np.zeros(fh, dtype=dtype), requires_grad=True)
        self.w_xh = Tensor(uniform_init(rng, (fi, fh), fi, dtype), requires_grad=True)
        self.w_hh = Tensor(uniform_init(rng, (fh, fh), fh, dtype), requires_grad=True)
        self.b_h = Tensor(np.zeros(fh, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        n, t, _ = x.shape
        h = Tensor(np.zeros((n, self.hidden_size), dtype=x.dtype))
        outs = []
        for step in range(t):
            xt = x[:, step, :]
            z = ad.sigmoid(ad.add(ad.add(ad.matmul(xt, self.w_xz), ad.matmul(h, self.w_hz)), self.b_z))
            r = ad.sigmoid(ad.add(ad.add(ad.matmul(xt, self.w_xr), ad.matmul(h, self.w_hr)), self.b_r))
            hc = ad.tanh(ad.add(ad.add(ad.matmul(xt, self.w_xh),
                                       ad.matmul(ad.mul(r, h), self.w_hh)), self.b_h))
            # tensor operand first so the literal is cast to the layer dtype
            h = ad.add(ad.mul(z, hc), ad.mul(ad.add(ad.mul(z, -1.0), 1.0), h))
            outs.append(h)
        return ad.stack(outs, axis=1)

    __call__ = forward


class SGD:
    """Momentum SGD over parameter groups with per-group learning rates."""

    def __init__(self, groups: list[dict], momentum: float = 0.9):
        # groups: [{"params": [(name, Tensor), ...], "lr": float}]
        self.groups = []
        self.momentum = momentum
        for g in groups:
            params = list(g["params"])
            self.groups.append({
                "params": params,
                "lr": float(g["lr"]),
                "base_lr": float(g["lr"]),
                "velocity": [np.zeros_like(p.data) for _, p in params],
            })

    def zero_grad(self) -> None:
        for g in self.groups:
            for _, p in g["params"]:
                p.grad = None

    def scale_lr(self, factor: float) -> None:
        for g in self.groups:
            g["lr"] = g["base_lr"] * factor

    def step(self) -> None:
        for g in self.groups:
            lr = g["lr"]
            for (name, p), v in zip(g["params"], g["velocity"]):
                if p.grad is None:
                    continue
                grad = p.grad
                if not np.all(np.isfinite(grad)):
                    raise FloatingPointError(f"non-finite gradient in {name}")
                v *= self.momentum
                v += grad
                p.data = p.data - lr * v
