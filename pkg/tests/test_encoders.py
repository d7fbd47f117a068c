import numpy as np
import pytest

from avalign.encoders import AudioEncoder, EncoderConfig, VisualEncoder
from avalign.nn import autodiff as ad
from avalign.nn.autodiff import Tensor

CFG = EncoderConfig()


def test_audio_encoder_grid_and_channels():
    enc = AudioEncoder(CFG, np.random.default_rng(0))
    out = enc(np.random.default_rng(1).normal(size=(2, 64, 128)))
    assert out.intermediate.shape == (2, 64, 16, 32)
    assert out.final.shape == (2, CFG.embed_dim, 16, 32)


def test_audio_final_map_keeps_frequency_structure():
    # broadcast recurrent summary plus a pointwise skip of the conv map:
    # rows must differ, and removing the shared broadcast leaves exactly
    # the skip projection of the conv features
    enc = AudioEncoder(CFG, np.random.default_rng(0))
    out = enc(np.random.default_rng(1).normal(size=(1, 64, 128)))
    e = out.final.data
    assert not np.allclose(e[:, :, 0, :], e[:, :, 7, :])
    x = out.intermediate.data[0]                      # (C, M, T)
    local = np.einsum("cmt,cd->dmt", x, enc.skip.weight.data)
    shared = e[0] - local
    np.testing.assert_allclose(shared[:, 0, :], shared[:, 7, :], atol=1e-10)


def test_audio_accepts_single_spectrogram():
    enc = AudioEncoder(CFG, np.random.default_rng(0))
    out = enc(np.zeros((64, 128)))
    assert out.final.shape[0] == 1


def test_audio_gradients_reach_first_conv():
    enc = AudioEncoder(CFG, np.random.default_rng(0), dtype=np.float64)
    out = enc(np.random.default_rng(2).normal(size=(2, 64, 128)))
    ad.tsum(out.final).backward()
    assert enc.blocks[0].conv.weight.grad is not None
    assert np.any(enc.blocks[0].conv.weight.grad != 0)


def test_non_recurrent_audio_uses_conv_map_directly():
    cfg = EncoderConfig(audio_channels=(16, 32, 64), audio_recurrent=False)
    enc = AudioEncoder(cfg, np.random.default_rng(0))
    out = enc(np.zeros((1, 64, 128)))
    assert out.final is out.intermediate


def test_visual_encoder_grids():
    enc = VisualEncoder(CFG, np.random.default_rng(0))
    out = enc(np.random.default_rng(1).normal(size=(2, 3, 64, 64)))
    assert out.intermediate.shape == (2, 64, 16, 16)
    assert out.final.shape == (2, CFG.embed_dim, 8, 8)


def test_visual_accepts_single_image():
    enc = VisualEncoder(CFG, np.random.default_rng(0))
    assert enc(np.zeros((3, 64, 64))).final.shape == (1, 64, 8, 8)


def test_visual_rejects_wrong_channel_count():
    enc = VisualEncoder(CFG, np.random.default_rng(0))
    with pytest.raises(ValueError):
        enc(np.zeros((1, 4, 64, 64)))


def test_visual_gradients_flow_to_stem():
    enc = VisualEncoder(CFG, np.random.default_rng(0), dtype=np.float64)
    out = enc(np.random.default_rng(3).normal(size=(1, 3, 64, 64)))
    ad.tsum(out.final).backward()
    assert np.any(enc.stem.conv.weight.grad != 0)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(audio_channels=(16,))
    with pytest.raises(ValueError):
        EncoderConfig(audio_channels=(16, 32), audio_recurrent=False, embed_dim=64)
    with pytest.raises(ValueError):
        VisualEncoder(EncoderConfig(visual_channels=(16, 32, 64, 128)),
                      np.random.default_rng(0))


def test_dtype_propagates():
    enc = VisualEncoder(CFG, np.random.default_rng(0), dtype=np.float32)
    out = enc(np.zeros((1, 3, 64, 64), dtype=np.float32))
    assert out.final.data.dtype == np.float32
