"""Mix-and-separate source separation guided by localized visual features.

Holds the STFT/iSTFT pair (exact round trip under the overlap-add
identity), separation samples and ideal ratio masks, the guidance-modulated
U-Net mask predictor, and single-gain projection BSS metrics (SDR/SIR/SAR).
"""

from __future__ import annotations

import wave as wavmod
from dataclasses import dataclass

import numpy as np

from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.layers import ChannelNorm, Conv2d, ConvBlock, Linear, Module

DB_CAP = 80.0


@dataclass(frozen=True)
class StftConfig:
    """Window/hop configuration; rejects non-reconstructing settings."""

    n_fft: int = 256
    hop: int = 64
    window: str = "hann"

    def __post_init__(self) -> None:
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if self.n_fft <= 0 or self.hop <= 0 or self.n_fft % 2:
            raise ValueError("n_fft must be positive even, hop positive")
        if self.n_fft % self.hop != 0 or self.n_fft // self.hop < 2:
            raise ValueError(f"hop {self.hop} must divide n_fft {self.n_fft} with >=2x overlap")
        # amplitude overlap-add must be flat; synthesis then divides by the
        # pointwise squared-window sum, which is exact wherever it is nonzero
        w = self.window_array()
        cover = np.zeros(3 * self.n_fft)
        for start in range(0, 2 * self.n_fft + 1, self.hop):
            cover[start : start + self.n_fft] += w
        interior = cover[self.n_fft : 2 * self.n_fft]
        if np.ptp(interior) > 1e-9 * interior.max():
            raise ValueError("window/hop pair does not satisfy constant overlap-add")

    def window_array(self) -> np.ndarray:
        n = np.arange(self.n_fft, dtype=np.float64)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.n_fft)

    @property
    def freq_bins(self) -> int:
        return self.n_fft // 2 + 1

    def num_frames(self, length: int) -> int:
        padded = length + self.n_fft
        extra = (-(padded - self.n_fft)) % self.hop
        return 1 + (padded + extra - self.n_fft) // self.hop

    def stft(self, x: np.ndarray) -> np.ndarray:
        """Center-padded STFT -> complex (n_fft/2 + 1, frames)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("stft expects a 1-D waveform")
        pad = self.n_fft // 2
        xp = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
        extra = (-(xp.size - self.n_fft)) % self.hop
        if extra:
            xp = np.concatenate([xp, np.zeros(extra)])
        frames = np.lib.stride_tricks.sliding_window_view(xp, self.n_fft)[:: self.hop]
        return np.fft.rfft(frames * self.window_array(), axis=1).T

    def istft(self, z: np.ndarray, length: int) -> np.ndarray:
        """Inverse with squared-window overlap-add; exact on stft output."""
        w = self.window_array()
        frames = np.fft.irfft(z.T, n=self.n_fft, axis=1) * w
        total = self.hop * (frames.shape[0] - 1) + self.n_fft
        num = np.zeros(total)
        den = np.zeros(total)
        w2 = w * w
        for k in range(frames.shape[0]):
            start = k * self.hop
            num[start : start + self.n_fft] += frames[k]
            den[start : start + self.n_fft] += w2
        pad = self.n_fft // 2
        y = num[pad : pad + length] / np.maximum(den[pad : pad + length], 1e-12)
        return y


@dataclass
class SeparationSample:
    """Two solos, their mixture, and the mixture's spectral views."""

    s1: np.ndarray
    s2: np.ndarray
    mixture: np.ndarray
    X: np.ndarray          # square magnitude grid (Nyquist row dropped)
    phase: np.ndarray      # full-height phase of the mixture
    mag_full: np.ndarray   # full-height magnitude of the mixture


def build_separation_sample(s1: np.ndarray, s2: np.ndarray, cfg: StftConfig) -> SeparationSample:
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    if s1.shape != s2.shape:
        raise ValueError("solo lengths differ")
    mixture = s1 + s2
    z = cfg.stft(mixture)
    mag = np.abs(z)
    return SeparationSample(s1=s1, s2=s2, mixture=mixture,
                            X=mag[:-1, :], phase=np.angle(z), mag_full=mag)


def ideal_ratio_mask(solo_mags, index: int, eps: float = 1e-8) -> np.ndarray:
    """|S_i| / (sum_j |S_j| + eps), clamped to [0, 1]."""
    total = np.zeros_like(solo_mags[0])
    for m in solo_mags:
        total = total + m
    return np.clip(solo_mags[index] / (total + eps), 0.0, 1.0)


def ideal_binary_mask(solo_mags, index: int) -> np.ndarray:
    """1 where source `index` dominates every other source, else 0."""
    target = solo_mags[index]
    out = np.ones_like(target)
    for k, m in enumerate(solo_mags):
        if k != index:
            out = out * (target >= m)
    return out.astype(np.float64)


def target_mask(solo_mags, index: int, mode: str = "ratio") -> np.ndarray:
    if mode == "ratio":
        return ideal_ratio_mask(solo_mags, index)
    if mode == "binary":
        return ideal_binary_mask(solo_mags, index)
    raise ValueError(f"unknown mask mode {mode!r}")


class UNet(Module):
    """Encoder-decoder mask predictor with skip connections; the guidance
    vector modulates bottleneck channels (scale and shift)."""

    def __init__(self, rng: np.random.Generator, guidance_dim: int = 64,
                 widths: tuple[int, ...] = (8, 16, 32, 64), dtype=np.float64):
        if len(widths) != 4:
            raise ValueError("UNet expects 4 encoder widths")
        w1, w2, w3, w4 = widths
        self.widths = tuple(widths)
        self.guidance_dim = guidance_dim
        self.dtype = np.dtype(dtype)
        self.enc1 = ConvBlock(1, w1, 3, rng, stride=2, dtype=dtype)
        self.enc2 = ConvBlock(w1, w2, 3, rng, stride=2, dtype=dtype)
        self.enc3 = ConvBlock(w2, w3, 3, rng, stride=2, dtype=dtype)
        self.enc4 = ConvBlock(w3, w4, 3, rng, stride=2, dtype=dtype)
        self.bott_conv = Conv2d(w4, w4, 3, rng, dtype=dtype)
        self.bott_norm = ChannelNorm(w4, dtype)
        self.film1 = Linear(guidance_dim, 2 * w4, rng, dtype=dtype)
        self.film2 = Linear(2 * w4, 2 * w4, rng, dtype=dtype)
        self.dec3 = ConvBlock(w4 + w3, w3, 3, rng, dtype=dtype)
        self.dec2 = ConvBlock(w3 + w2, w2, 3, rng, dtype=dtype)
        self.dec1 = ConvBlock(w2 + w1, w1, 3, rng, dtype=dtype)
        self.dec0 = ConvBlock(w1 + 1, w1, 3, rng, dtype=dtype)
        self.head = Conv2d(w1, 1, 1, rng, dtype=dtype)

    def forward(self, x: Tensor, guidance: Tensor) -> Tensor:
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        e4 = self.enc4(e3)
        h = self.bott_norm(self.bott_conv(e4))
        film = self.film2(ad.relu(self.film1(guidance)))
        w4 = self.widths[3]
        scale = ad.reshape(film[:, :w4], (-1, w4, 1, 1))
        shift = ad.reshape(film[:, w4:], (-1, w4, 1, 1))
        h = ad.add(ad.mul(h, ad.add(scale, 1.0)), shift)
        h = ad.relu(h)
        d3 = self.dec3(ad.concat([ad.upsample2x(h), e3], axis=1))
        d2 = self.dec2(ad.concat([ad.upsample2x(d3), e2], axis=1))
        d1 = self.dec1(ad.concat([ad.upsample2x(d2), e1], axis=1))
        d0 = self.dec0(ad.concat([ad.upsample2x(d1), x], axis=1))
        return ad.sigmoid(self.head(d0))

    __call__ = forward

    def predict_mask(self, X: np.ndarray | Tensor, guidance: np.ndarray | Tensor) -> Tensor:
        """Mask for one magnitude grid (F, T) or a batch (N, F, T).

        Accepts raw magnitudes (compressed internally) and returns a mask
        Tensor of the input's rank.
        """
        xt = X if isinstance(X, Tensor) else Tensor(np.asarray(X, dtype=self.dtype))
        gt = guidance if isinstance(guidance, Tensor) else Tensor(np.asarray(guidance, dtype=self.dtype))
        single = xt.ndim == 2
        if single:
            xt = ad.reshape(xt, (1,) + tuple(xt.shape))
            gt = ad.reshape(gt, (1, -1))
        xin = ad.log(ad.add(xt, 1.0))
        mask = self.forward(ad.reshape(xin, (xin.shape[0], 1) + tuple(xin.shape[1:])), gt)
        mask = ad.reshape(mask, (mask.shape[0],) + tuple(mask.shape[2:]))
        if single:
            mask = ad.reshape(mask, tuple(mask.shape[1:]))
        return mask


def separation_loss(predicted: Tensor, target: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Per-bin binary cross entropy between mask estimates, meaned."""
    t = np.asarray(target, dtype=predicted.dtype)
    if t.shape != tuple(predicted.shape):
        raise ValueError(f"mask shapes differ: {t.shape} vs {predicted.shape}")
    p = ad.clip(predicted, eps, 1.0 - eps)
    ll = ad.add(ad.mul(Tensor(t), ad.log(p)),
                ad.mul(Tensor(1.0 - t), ad.log(ad.add(1.0, ad.mul(p, -1.0)))))
    return ad.mul(ad.tmean(ll), -1.0)


def reconstruct(mag: np.ndarray, phase: np.ndarray, mask: np.ndarray,
                cfg: StftConfig, length: int | None = None) -> np.ndarray:
    """istft of (mask * mag) with the given phase.

    A mask one row short of the full bin count (square model grid) is
    extended by replicating its last row onto the Nyquist bin.
    """
    mag = np.asarray(mag, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape[0] == mag.shape[0] - 1:
        mask = np.concatenate([mask, mask[-1:, :]], axis=0)
    if mask.shape != mag.shape or phase.shape != mag.shape:
        raise ValueError("mag/phase/mask shapes incompatible")
    z = mask * mag * np.exp(1j * phase)
    if length is None:
        length = (mag.shape[1] - 1) * cfg.hop
    return cfg.istft(z, length)


@dataclass(frozen=True)
class BssScores:
    sdr: float
    sir: float
    sar: float


def _db(num: float, den: float, cap: float = DB_CAP) -> float:
    if num <= 0.0:
        return -cap
    if den <= 0.0:
        return cap
    return float(np.clip(10.0 * np.log10(num / den), -cap, cap))


def bss_metrics(estimate: np.ndarray, references, target_index: int) -> BssScores:
    """Single-gain projection decomposition into target/interference/artifact.

    estimate is decomposed as s_target (projection onto the target
    reference) + e_interf (remainder of the projection onto the span of
    all references) + e_artif (out-of-span residue). Ratios are capped at
    +/-80 dB. SDR <= SIR holds by construction.
    """
    e = np.asarray(estimate, dtype=np.float64)
    refs = np.stack([np.asarray(r, dtype=np.float64) for r in references])
    if e.ndim != 1 or refs.shape[1] != e.size:
        raise ValueError("estimate/reference length mismatch")
    energies = (refs * refs).sum(axis=1)
    if np.any(energies <= 0):
        raise ValueError("zero-energy reference")
    if not (e * e).sum() > 0:
        raise ValueError("zero-energy estimate")
    gram = refs @ refs.T
    try:
        coefs = np.linalg.solve(gram, refs @ e)
    except np.linalg.LinAlgError as err:
        raise ValueError("references are linearly dependent") from err
    rt = refs[target_index]
    s_target = (e @ rt) / (rt @ rt) * rt
    proj = coefs @ refs
    e_interf = proj - s_target
    e_artif = e - proj
    et = float(s_target @ s_target)
    sdr = _db(et, float(((e - s_target) ** 2).sum()))
    sir = _db(et, float((e_interf @ e_interf)))
    sar = _db(float(proj @ proj), float((e_artif @ e_artif)))
    return BssScores(sdr=sdr, sir=sir, sar=sar)


def visual_guidance(E_v: np.ndarray, heat: np.ndarray) -> np.ndarray:
    """Pool the visual final map with a localization heatmap as weights.

    heat is the normalized map at feature-grid resolution; negative values
    (none are expected) are clipped before pooling.
    """
    from .disentangle import weighted_pool

    weights = np.maximum(np.asarray(heat, dtype=np.float64), 0.0)
    with ad.no_grad():
        pooled = weighted_pool(Tensor(np.asarray(E_v)), weights)
    return pooled.data


def write_wav(path: str, waveform: np.ndarray, sample_rate: int) -> None:
    """16-bit PCM mono writer."""
    x = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    pcm = (x * 32767.0).astype("<i2")
    with wavmod.open(path, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())
