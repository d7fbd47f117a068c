"""Training loops: stage one (classification + correspondence), stage two
(joint with disentangled contrastive alignment), and the guided separator.

All loops are single-threaded with fixed-order reductions; a fixed seed
reproduces training logs byte for byte. Learning rates follow
base * decay^(epoch // decay_every) with epochs counted from 1, so the
first drop lands exactly on epoch `decay_every`.
"""

from __future__ import annotations

import json
import os
import zlib

import numpy as np

from .alignment import contrastive_loss, stage_two_loss
from .config import OptimConfig, RunConfig
from .dataset import DatasetHandle
from .disentangle import disentangle_sample
from .heads import bce_multilabel, cce_loss, multitask_loss, sample_negative
from .localization import localize, normalize_map
from .model import AlignmentModel
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.layers import SGD
from .separation import (UNet, build_separation_sample, separation_loss,
                         target_mask, visual_guidance)
from . import tensorio

STAGE1_OBJECTIVES = ("multitask", "avc")


def lr_factor(epoch: int, optim: OptimConfig) -> float:
    """Schedule multiplier for a 1-indexed epoch."""
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    return optim.decay ** (epoch // optim.decay_every)


def make_optimizer(model: AlignmentModel, optim: OptimConfig) -> SGD:
    return SGD([
        {"params": model.backbone_parameters(), "lr": optim.backbone_lr},
        {"params": model.head_parameters(), "lr": optim.head_lr},
    ], momentum=optim.momentum)


class TrainLogger:
    """JSON-lines log; keys are sorted so identical runs are bitwise equal."""

    def __init__(self, path: str | None):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8") if path else None
        self.lines: list[str] = []

    def log(self, **record) -> None:
        line = json.dumps(record, sort_keys=True)
        self.lines.append(line)
        if self._fh:
            self._fh.write(line + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def _epoch_order(n: int, seed: int, stage: str, epoch: int) -> np.ndarray:
    # crc32 keys the stream by stage name without PYTHONHASHSEED dependence
    rng = np.random.default_rng(np.random.SeedSequence(
        seed, spawn_key=(zlib.crc32(stage.encode()), epoch)))
    return rng.permutation(n)


def _batches(ids: list[int], order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        chunk = [ids[k] for k in order[start:start + batch_size]]
        if len(chunk) >= 2:   # correspondence negatives need a partner
            yield chunk


def _load_batch(dataset: DatasetHandle, ids: list[int], dtype):
    specs = np.stack([dataset.spectrogram(i) for i in ids]).astype(dtype)
    images = np.stack([dataset.image(i) for i in ids]).astype(dtype)
    y_a = np.stack([dataset.record(i).y_a for i in ids]).astype(np.float64)
    y_v = np.stack([dataset.record(i).y_v for i in ids]).astype(np.float64)
    return specs, images, y_a, y_v


def _avc_loss(model: AlignmentModel, f_a: Tensor, o_v: Tensor,
              rng: np.random.Generator) -> Tensor:
    """Balanced correspondence loss: every matched pair plus one mismatch."""
    n = f_a.shape[0]
    pairs = sample_negative(list(range(n)), rng)
    neg_j = np.array([j for _, j in pairs], dtype=np.int64)
    f_in = ad.concat([f_a, f_a], axis=0)
    o_in = ad.concat([o_v, ad.take(o_v, neg_j, axis=0)], axis=0)
    targets = np.concatenate([np.ones(n, dtype=np.int64),
                              np.zeros(n, dtype=np.int64)])
    pred = model.corr(f_in, o_in)
    return cce_loss(targets, pred.logits)


def _check_finite(loss: Tensor, where: str) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        raise RuntimeError(f"non-finite loss ({value}) during {where}")
    return value


def train_stage1(model: AlignmentModel, dataset: DatasetHandle, config: RunConfig,
                 epochs: int | None = None, objective: str = "multitask",
                 logger: TrainLogger | None = None,
                 checkpoint_dir: str | None = None) -> dict:
    """Coarse pretraining. objective 'multitask' optimizes classification
    plus weighted correspondence; 'avc' optimizes correspondence alone."""
    if objective not in STAGE1_OBJECTIVES:
        raise ValueError(f"objective must be one of {STAGE1_OBJECTIVES}")
    epochs = config.epochs_stage1 if epochs is None else epochs
    logger = logger or TrainLogger(None)
    opt = make_optimizer(model, config.optim)
    train_ids = dataset.train_ids
    lam = config.multitask.lam
    last = {}
    for epoch in range(1, epochs + 1):
        factor = lr_factor(epoch, config.optim)
        opt.scale_lr(factor)
        neg_rng = np.random.default_rng(np.random.SeedSequence(
            config.seed, spawn_key=(101, epoch)))
        order = _epoch_order(len(train_ids), config.seed, "stage1-" + objective, epoch)
        for step, ids in enumerate(_batches(train_ids, order, config.batch_size)):
            specs, images, y_a, y_v = _load_batch(dataset, ids, model.dtype)
            ab = model.audio_enc(specs)
            vb = model.visual_enc(images)
            l_avc = _avc_loss(model, ab.intermediate, vb.intermediate, neg_rng)
            if objective == "multitask":
                pa = model.head_a.classify(ab.final)
                pv = model.head_v.classify(vb.final)
                l_cls = ad.add(bce_multilabel(y_a, pa.probs),
                               bce_multilabel(y_v, pv.probs))
                loss = multitask_loss(l_cls, l_avc, lam)
                cls_val = float(l_cls.data)
            else:
                loss = l_avc
                cls_val = None
            opt.zero_grad()
            loss.backward()
            total = _check_finite(loss, f"stage1 epoch {epoch} step {step}")
            opt.step()
            logger.log(stage=1, objective=objective, epoch=epoch, step=step,
                       lr_factor=factor, l_cls=cls_val, l_avc=float(l_avc.data),
                       l_ava=None, loss=total)
            last = {"epoch": epoch, "loss": total}
        if checkpoint_dir:
            model.save(os.path.join(checkpoint_dir, f"stage1-epoch-{epoch:03d}.avck"),
                       {"stage": 1, "objective": objective, "epoch": epoch})
    return last


def train_stage2(model: AlignmentModel, dataset: DatasetHandle, config: RunConfig,
                 epochs: int | None = None, logger: TrainLogger | None = None,
                 checkpoint_dir: str | None = None) -> dict:
    """Joint fine-tuning: multitask losses plus the class-specific
    contrastive alignment over disentangled features."""
    epochs = config.epochs_stage2 if epochs is None else epochs
    logger = logger or TrainLogger(None)
    opt = make_optimizer(model, config.optim)
    train_ids = dataset.train_ids
    lam = config.multitask.lam
    beta = config.alignment.beta
    margin = config.alignment.margin
    # the contrastive stage runs on its own (smaller) batch size: with many
    # same-class instances per batch, their mutual hinge pushes outnumber the
    # positive pulls k-1 : 1 and pin every distance at the margin
    batch_size = config.alignment.batch_size
    last = {}
    for epoch in range(1, epochs + 1):
        factor = lr_factor(epoch, config.optim)
        opt.scale_lr(factor)
        neg_rng = np.random.default_rng(np.random.SeedSequence(
            config.seed, spawn_key=(202, epoch)))
        order = _epoch_order(len(train_ids), config.seed, "stage2", epoch)
        for step, ids in enumerate(_batches(train_ids, order, batch_size)):
            specs, images, y_a, y_v = _load_batch(dataset, ids, model.dtype)
            ab = model.audio_enc(specs)
            vb = model.visual_enc(images)
            pa = model.head_a.classify(ab.final)
            pv = model.head_v.classify(vb.final)
            l_cls = ad.add(bce_multilabel(y_a, pa.probs),
                           bce_multilabel(y_v, pv.probs))
            l_avc = _avc_loss(model, ab.intermediate, vb.intermediate, neg_rng)
            l_mul = multitask_loss(l_cls, l_avc, lam)
            audio_sets, visual_sets = [], []
            for k, sid in enumerate(ids):
                audio_sets.append(disentangle_sample(
                    ab.final[k], model.head_a, config.tau_cls, sid, "audio",
                    true_labels=y_a[k]))
                visual_sets.append(disentangle_sample(
                    vb.final[k], model.head_v, config.tau_cls, sid, "visual",
                    true_labels=y_v[k]))
            l_ava, info = contrastive_loss(audio_sets, visual_sets,
                                           model.proj_a, model.proj_v, margin)
            loss = stage_two_loss(l_mul, l_ava, beta)
            opt.zero_grad()
            loss.backward()
            total = _check_finite(loss, f"stage2 epoch {epoch} step {step}")
            opt.step()
            logger.log(stage=2, objective="joint", epoch=epoch, step=step,
                       lr_factor=factor, l_cls=float(l_cls.data),
                       l_avc=float(l_avc.data), l_ava=float(l_ava.data),
                       n_pos=info["n_pos"], n_neg=info["n_neg"], loss=total)
            last = {"epoch": epoch, "loss": total}
        if checkpoint_dir:
            model.save(os.path.join(checkpoint_dir, f"stage2-epoch-{epoch:03d}.avck"),
                       {"stage": 2, "objective": "joint", "epoch": epoch})
    return last


# ---------------------------------------------------------------------------
# separator


def guidance_table(model: AlignmentModel, dataset: DatasetHandle, ids: list[int],
                   tau_cls: float, batch_size: int = 16,
                   ) -> dict[tuple[int, int], np.ndarray]:
    """Frozen-localizer guidance: for every (scene, sounding class), pool the
    visual final map under that class's localization heat."""
    table: dict[tuple[int, int], np.ndarray] = {}
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        specs = np.stack([dataset.spectrogram(i) for i in chunk]).astype(model.dtype)
        images = np.stack([dataset.image(i) for i in chunk]).astype(model.dtype)
        with ad.no_grad():
            ab = model.audio_enc(specs)
            vb = model.visual_enc(images)
        for k, sid in enumerate(chunk):
            rec = dataset.record(sid)
            sounding = tuple(int(c) for c in np.nonzero(rec.y_a)[0])
            if not sounding:
                continue
            aset = disentangle_sample(Tensor(ab.final.data[k]), model.head_a,
                                      tau_cls, sid, "audio", classes=sounding)
            e_v = vb.final.data[k]
            for c in sounding:
                heat = normalize_map(localize(e_v, aset.features[c].data,
                                              model.proj_a, model.proj_v))
                table[(sid, c)] = visual_guidance(e_v, heat)
    return table


def separation_pairs(dataset: DatasetHandle, ids: list[int],
                     rng: np.random.Generator, limit: int | None = None,
                     ) -> list[tuple[int, int, int, int]]:
    """(scene_a, class_a, scene_b, class_b) with distinct classes; each pair
    trains two mask predictions, one per side."""
    pool: list[tuple[int, int]] = []
    for sid in ids:
        rec = dataset.record(sid)
        pool.extend((sid, int(c)) for c in np.nonzero(rec.y_a)[0])
    if len(pool) < 2:
        raise ValueError("need at least two sounding sources to build mixtures")
    pairs = []
    guard = 0
    target = limit if limit is not None else len(pool) // 2
    while len(pairs) < target and guard < 50 * target:
        guard += 1
        i, j = rng.integers(0, len(pool), size=2)
        (sa, ca), (sb, cb) = pool[i], pool[j]
        if ca != cb:
            pairs.append((sa, ca, sb, cb))
    if not pairs:
        raise ValueError("could not draw mixtures with distinct classes")
    return pairs


def train_separator(model: AlignmentModel, dataset: DatasetHandle, config: RunConfig,
                    epochs: int | None = None, logger: TrainLogger | None = None,
                    seed_offset: int = 0) -> tuple[UNet, dict]:
    """Mask regression on synthetic mixtures, guided by the frozen localizer."""
    epochs = config.epochs_separator if epochs is None else epochs
    logger = logger or TrainLogger(None)
    d = model.encoder_config.embed_dim
    rng = np.random.default_rng(np.random.SeedSequence(
        config.seed, spawn_key=(303, seed_offset)))
    unet = UNet(rng, guidance_dim=d, dtype=model.dtype)
    ids = dataset.train_ids[:config.separator_scenes]
    table = guidance_table(model, dataset, ids, config.tau_cls)
    opt = SGD([{"params": list(unet.named_parameters()), "lr": config.optim.head_lr}],
              momentum=config.optim.momentum)
    cfg = config.stft
    last = {}
    for epoch in range(1, epochs + 1):
        opt.scale_lr(lr_factor(epoch, config.optim))
        pair_rng = np.random.default_rng(np.random.SeedSequence(
            config.seed, spawn_key=(304, seed_offset, epoch)))
        pairs = separation_pairs(dataset, ids, pair_rng)
        for step, (sa, ca, sb, cb) in enumerate(pairs):
            s1 = dataset.solo_wave(sa, ca)
            s2 = dataset.solo_wave(sb, cb)
            sample = build_separation_sample(s1, s2, cfg)
            solo_mags = [np.abs(cfg.stft(s1))[:-1, :], np.abs(cfg.stft(s2))[:-1, :]]
            losses = []
            for side, (sid, cls) in enumerate(((sa, ca), (sb, cb))):
                guide = table[(sid, cls)]
                mask = unet.predict_mask(sample.X.astype(model.dtype),
                                         guide.astype(model.dtype))
                tgt = target_mask(solo_mags, side, config.mask_mode)
                losses.append(separation_loss(mask, tgt))
            loss = ad.mul(ad.add(losses[0], losses[1]), 0.5)
            opt.zero_grad()
            loss.backward()
            total = _check_finite(loss, f"separator epoch {epoch} step {step}")
            opt.step()
            logger.log(stage="sep", epoch=epoch, step=step, loss=total,
                       l_cls=None, l_avc=None, l_ava=None)
            last = {"epoch": epoch, "loss": total}
    return unet, last


def save_separator(path: str, unet: UNet, config: RunConfig) -> None:
    meta = {"kind": "avalign-separator",
            "guidance_dim": unet.guidance_dim,
            "widths": list(unet.widths),
            "dtype": np.dtype(unet.dtype).name,
            "stft": {"n_fft": config.stft.n_fft, "hop": config.stft.hop,
                     "window": config.stft.window}}
    tensorio.save_checkpoint(path, unet.state_dict(), meta)


def load_separator(path: str) -> tuple[UNet, dict]:
    tensors, meta = tensorio.load_checkpoint(path)
    if meta.get("kind") != "avalign-separator":
        raise ValueError(f"{path} is not a separator checkpoint")
    unet = UNet(np.random.default_rng(0), guidance_dim=meta["guidance_dim"],
                widths=tuple(meta["widths"]), dtype=np.dtype(meta["dtype"]))
    unet.load_state_dict(tensors)
    return unet, meta
