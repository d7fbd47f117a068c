"""Full model bundle: encoders, classifier heads, correspondence net,
projection heads. Owns checkpoint save/load and parameter grouping."""

from __future__ import annotations

import numpy as np

from . import tensorio
from .alignment import AlignmentConfig, ProjectionHead
from .encoders import AudioEncoder, EncoderConfig, VisualEncoder
from .heads import ClassifierHead, CorrespondenceNet, MultiTaskConfig
from .nn.layers import Module


class AlignmentModel(Module):
    """Everything both training stages touch, addressable by dotted name.

    Attribute insertion order fixes parameter naming, so checkpoints are
    stable across processes.
    """

    def __init__(self, num_classes: int, encoder: EncoderConfig,
                 alignment: AlignmentConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.num_classes = num_classes
        self.encoder_config = encoder
        self.alignment_config = alignment
        self.dtype = np.dtype(dtype)
        d = encoder.embed_dim
        self.audio_enc = AudioEncoder(encoder, rng, dtype=dtype)
        self.visual_enc = VisualEncoder(encoder, rng, dtype=dtype)
        self.head_a = ClassifierHead(d, num_classes, rng, dtype=dtype)
        self.head_v = ClassifierHead(d, num_classes, rng, dtype=dtype)
        self.corr = CorrespondenceNet(encoder.audio_channels[-1],
                                      encoder.visual_channels[-1], rng, dtype=dtype)
        self.proj_a = ProjectionHead(d, rng, dtype=dtype)
        self.proj_v = ProjectionHead(d, rng, dtype=dtype)

    # -- parameter groups ------------------------------------------------
    def backbone_parameters(self) -> list[tuple[str, object]]:
        names = ("audio_enc", "visual_enc")
        return [(n, p) for n, p in self.named_parameters()
                if n.split(".", 1)[0] in names]

    def head_parameters(self) -> list[tuple[str, object]]:
        backbone = {n for n, _ in self.backbone_parameters()}
        return [(n, p) for n, p in self.named_parameters() if n not in backbone]

    def avc_parameters(self) -> list[tuple[str, object]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith("corr.")]

    # -- persistence -----------------------------------------------------
    def save(self, path: str, extra_meta: dict | None = None) -> None:
        meta = {
            "kind": "avalign-model",
            "num_classes": self.num_classes,
            "dtype": self.dtype.name,
            "encoder": {
                "audio_channels": list(self.encoder_config.audio_channels),
                "visual_channels": list(self.encoder_config.visual_channels),
                "embed_dim": self.encoder_config.embed_dim,
                "audio_recurrent": self.encoder_config.audio_recurrent,
            },
            "alignment": {
                "margin": self.alignment_config.margin,
                "beta": self.alignment_config.beta,
                "batch_size": self.alignment_config.batch_size,
            },
        }
        if extra_meta:
            meta.update(extra_meta)
        tensorio.save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path: str) -> tuple["AlignmentModel", dict]:
        tensors, meta = tensorio.load_checkpoint(path)
        if meta.get("kind") != "avalign-model":
            raise ValueError(f"{path} is not a model checkpoint")
        enc = meta["encoder"]
        encoder = EncoderConfig(
            audio_channels=tuple(enc["audio_channels"]),
            visual_channels=tuple(enc["visual_channels"]),
            embed_dim=enc["embed_dim"],
            audio_recurrent=enc["audio_recurrent"])
        alignment = AlignmentConfig(**meta["alignment"])
        model = cls(meta["num_classes"], encoder, alignment,
                    np.random.default_rng(0), dtype=np.dtype(meta["dtype"]))
        model.load_state_dict(tensors)
        return model, meta


def build_model(num_classes: int = 6, encoder: EncoderConfig | None = None,
                alignment: AlignmentConfig | None = None, seed: int = 0,
                dtype=np.float32) -> AlignmentModel:
    rng = np.random.default_rng(seed)
    return AlignmentModel(num_classes, encoder or EncoderConfig(),
                          alignment or AlignmentConfig(), rng, dtype=dtype)
