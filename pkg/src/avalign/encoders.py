"""Audio and visual backbones.

Both encoders expose two maps per input: an intermediate feature map
(pre-recurrent conv output for audio, the mid-depth residual stage for
visual) and a final embedding map with D channels on a coarser grid. The
audio path runs a GRU along time whose hidden state is re-broadcast over
frequency and summed with a pointwise projection of the conv map, keeping
the final audio map spatial and locally structured.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.layers import ConvBlock, GRU, Linear, Module, ResidualBlock


@dataclass(frozen=True)
class EncoderConfig:
    audio_channels: tuple[int, ...] = (16, 32, 64)
    visual_channels: tuple[int, ...] = (16, 32, 64)
    embed_dim: int = 64
    audio_recurrent: bool = True
    audio_freq_bins: int = 64

    def __post_init__(self) -> None:
        if len(self.audio_channels) < 2 or len(self.visual_channels) < 2:
            raise ValueError("need at least 2 stages so intermediate != final")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if self.audio_freq_bins <= 0:
            raise ValueError("audio_freq_bins must be positive")
        if not self.audio_recurrent and self.audio_channels[-1] != self.embed_dim:
            raise ValueError("without recurrence the last audio width must equal embed_dim")


@dataclass
class FeatureBundle:
    intermediate: Tensor
    final: Tensor


class AudioEncoder(Module):
    """Conv stages over the (frequency, time) grid, then a GRU along time."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        chans = config.audio_channels
        blocks = []
        in_ch = 1
        for k, out_ch in enumerate(chans):
            stride = 1 if k == 0 else 2
            blocks.append(ConvBlock(in_ch, out_ch, 3, rng, stride=stride, dtype=dtype))
            in_ch = out_ch
        self.blocks = blocks
        # learned per-frequency bias after the first block. Pitch is not
        # translation invariant, but stacked convs plus global pooling are:
        # without an absolute-frequency cue the pooled features cannot
        # carry class identity. Zero init keeps the block an exact no-op
        # until gradients carve out frequency-gated channels.
        self.freq_bias = Tensor(
            np.zeros((chans[0], config.audio_freq_bins, 1), dtype=self.dtype),
            requires_grad=True)
        if config.audio_recurrent:
            self.gru = GRU(chans[-1], config.embed_dim, rng, dtype=dtype)
            # 1x1 projection of the conv map added to the broadcast recurrent
            # state; without it E_a has no frequency structure and per-class
            # pooling degenerates to one scene-independent vector
            self.skip = Linear(chans[-1], config.embed_dim, rng, dtype=dtype,
                               bias=False)
        else:
            self.gru = None
            self.skip = None

    def forward(self, spectrogram) -> FeatureBundle:
        x = spectrogram if isinstance(spectrogram, Tensor) else Tensor(
            np.asarray(spectrogram, dtype=self.dtype))
        if x.ndim == 2:
            x = ad.reshape(x, (1, 1) + tuple(x.shape))
        elif x.ndim == 3:
            x = ad.reshape(x, (x.shape[0], 1) + tuple(x.shape[1:]))
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (N, M, T) spectrograms, got {tuple(x.shape)}")
        if x.shape[2] != self.config.audio_freq_bins:
            raise ValueError(f"expected {self.config.audio_freq_bins} frequency rows, "
                             f"got {x.shape[2]}")
        x = self.blocks[0](x)
        x = ad.add(x, self.freq_bias)
        for block in self.blocks[1:]:
            x = block(x)
        intermediate = x                       # (N, C, M', T')
        if self.gru is None:
            return FeatureBundle(intermediate=intermediate, final=intermediate)
        n, c, m, t = x.shape
        d = self.config.embed_dim
        seq = ad.transpose(ad.tmean(x, axis=2), (0, 2, 1))   # (N, T', C)
        h = self.gru(seq)                      # (N, T', D)
        h = ad.transpose(h, (0, 2, 1))         # (N, D, T')
        h = ad.reshape(h, (n, d, 1, t))
        cells = ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (n * m * t, c))
        local = ad.transpose(ad.reshape(self.skip(cells), (n, m, t, d)),
                             (0, 3, 1, 2))
        final = ad.add(ad.broadcast_to(h, (n, d, m, t)), local)
        return FeatureBundle(intermediate=intermediate, final=final)

    __call__ = forward


class VisualEncoder(Module):
    """Strided conv stages with residual blocks; 64px input ends at 8x8."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        if len(config.visual_channels) != 3:
            raise ValueError("visual encoder expects exactly 3 stage widths")
        c0, c1, c2 = config.visual_channels
        d = config.embed_dim
        self.stem = ConvBlock(3, c0, 3, rng, stride=1, dtype=dtype)
        self.down1 = ConvBlock(c0, c1, 3, rng, stride=2, dtype=dtype)
        self.down2 = ConvBlock(c1, c2, 3, rng, stride=2, dtype=dtype)
        self.res2 = ResidualBlock(c2, rng, dtype=dtype)
        self.down3 = ConvBlock(c2, d, 3, rng, stride=2, dtype=dtype)
        self.res3 = ResidualBlock(d, rng, dtype=dtype)

    def forward(self, image) -> FeatureBundle:
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + tuple(x.shape))
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {tuple(x.shape)}")
        x = self.stem(x)
        x = self.down1(x)
        inter = self.res2(self.down2(x))       # O_v at H/4
        final = self.res3(self.down3(inter))   # E_v at H/8
        return FeatureBundle(intermediate=inter, final=final)

    __call__ = forward
