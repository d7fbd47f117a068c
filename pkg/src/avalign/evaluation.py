"""Localization scoring: cIoU, threshold-sweep AUC, class-aware cIoU_class,
difficulty-level stratification, and the three method pipelines (avc,
multitask, ours) that produce heatmaps from a trained model.

Difficulty level of a scene = number of distinct sounding classes. The
binarization threshold for scores defaults to 0.5 at levels 1 and 2 and
0.3 at level 3, where sources overlap more.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetHandle, DatasetRecord
from .disentangle import disentangle_sample, grad_cam, select_valid_classes
from .localization import fuse_maps, localize, normalize_resize
from .model import AlignmentModel
from .nn import autodiff as ad
from .nn.autodiff import Tensor

SCHEMA_VERSION = 1
TAU_GRID = tuple(np.round(np.arange(1, 21) * 0.05, 2))
DEFAULT_LEVEL_TAU = {1: 0.5, 2: 0.5, 3: 0.3}
METHODS = ("avc", "multitask", "ours")


@dataclass
class GroundTruthMask:
    masks: np.ndarray   # (C, H, W) binary, union of sounding boxes per class
    theta: np.ndarray   # (C,) binary sounding indicator

    def __post_init__(self) -> None:
        self.masks = np.asarray(self.masks, dtype=bool)
        self.theta = np.asarray(self.theta, dtype=np.uint8)
        if self.masks.ndim != 3 or self.theta.shape != (self.masks.shape[0],):
            raise ValueError("masks must be (C, H, W) with theta (C,)")
        has = self.masks.any(axis=(1, 2))
        if not np.array_equal(has, self.theta.astype(bool)):
            raise ValueError("mask nonempty iff theta_c = 1 violated")

    @property
    def union(self) -> np.ndarray:
        return self.masks.any(axis=0)

    def sounding_classes(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.nonzero(self.theta)[0])


def ground_truth_from_record(record: DatasetRecord, num_classes: int,
                             image_hw: tuple[int, int]) -> GroundTruthMask:
    h, w = image_hw
    masks = np.zeros((num_classes, h, w), dtype=bool)
    for cls, y0, x0, bh, bw, sounding in record.boxes:
        if sounding:
            masks[cls, y0:y0 + bh, x0:x0 + bw] = True
    return GroundTruthMask(masks=masks, theta=masks.any(axis=(1, 2)).astype(np.uint8))


def ciou(heatmap: np.ndarray, mask: np.ndarray, tau: float) -> float:
    """IoU between {heatmap >= tau} and a binary mask."""
    heatmap = np.asarray(heatmap)
    mask = np.asarray(mask, dtype=bool)
    if heatmap.shape != mask.shape:
        raise ValueError(f"shape mismatch {heatmap.shape} vs {mask.shape}")
    if not mask.any():
        raise ValueError("empty ground-truth mask (filter silent classes first)")
    a = heatmap >= tau
    inter = np.count_nonzero(a & mask)
    union = np.count_nonzero(a | mask)
    return inter / union


def auc(heatmap: np.ndarray, mask: np.ndarray) -> float:
    """Per-sample threshold-sweep score: fraction of tau in the grid with
    ciou(heatmap, mask, tau) >= tau. Averaging this over samples equals the
    mean-success-rate curve area, since both are means over the same
    (sample, tau) grid."""
    return float(np.mean([1.0 if ciou(heatmap, mask, t) >= t else 0.0
                          for t in TAU_GRID]))


def ciou_class(per_class_heatmaps: dict[int, np.ndarray], gt: GroundTruthMask,
               tau: float) -> float:
    """Mean per-sounding-class IoU; silent classes are excluded entirely."""
    sounding = gt.sounding_classes()
    if not sounding:
        raise ValueError("no sounding class in this frame")
    scores = [ciou(per_class_heatmaps[c], gt.masks[c], tau) for c in sounding]
    return float(np.mean(scores))


def split_by_level(records) -> dict[int, list[DatasetRecord]]:
    out: dict[int, list[DatasetRecord]] = {}
    for r in records:
        out.setdefault(r.level, []).append(r)
    return dict(sorted(out.items()))


# ---------------------------------------------------------------------------
# report


@dataclass
class LevelScores:
    ciou: float
    auc: float
    ciou_class: float
    count: int
    tau: float

    def as_dict(self) -> dict:
        return {"ciou": self.ciou, "auc": self.auc, "ciou_class": self.ciou_class,
                "count": self.count, "tau": self.tau}


@dataclass
class EvalReport:
    method: str
    levels: dict[int, LevelScores]
    class_agnostic: bool
    schema_version: int = SCHEMA_VERSION
    separation: dict | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        for lvl, s in self.levels.items():
            for key in ("ciou", "auc", "ciou_class"):
                v = getattr(s, key)
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"level {lvl} {key}={v} outside [0,1]")
            if s.count < 0:
                raise ValueError("negative sample count")

    @property
    def total_count(self) -> int:
        return sum(s.count for s in self.levels.values())

    def to_json(self) -> str:
        doc = {
            "schema_version": self.schema_version,
            "method": self.method,
            "class_agnostic": self.class_agnostic,
            "levels": {str(l): s.as_dict() for l, s in self.levels.items()},
            "separation": self.separation,
            "meta": self.meta,
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {doc.get('schema_version')}")
        levels = {int(l): LevelScores(**s) for l, s in doc["levels"].items()}
        return cls(method=doc["method"], levels=levels,
                   class_agnostic=doc["class_agnostic"],
                   separation=doc.get("separation"), meta=doc.get("meta", {}))


def format_report(report: EvalReport) -> str:
    lines = [f"method={report.method}"
             + ("  (class-agnostic scoring)" if report.class_agnostic else ""),
             f"{'level':>6} {'count':>6} {'tau':>5} {'cIoU':>7} {'AUC':>7} {'cIoU_class':>11}"]
    for lvl, s in sorted(report.levels.items()):
        lines.append(f"{lvl:>6} {s.count:>6} {s.tau:>5.2f} {s.ciou:>7.4f} "
                     f"{s.auc:>7.4f} {s.ciou_class:>11.4f}")
    if report.separation:
        sep = report.separation
        lines.append("separation: " + "  ".join(
            f"{k}={sep[k]:.2f}" for k in ("sdr", "sir", "sar") if k in sep))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# per-method heatmap production


def _encode_batches(model: AlignmentModel, dataset: DatasetHandle, ids: list[int],
                    batch_size: int = 16) -> dict[int, dict[str, np.ndarray]]:
    """Forward all test scenes through both encoders without graphs."""
    out: dict[int, dict[str, np.ndarray]] = {}
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        specs = np.stack([dataset.spectrogram(i) for i in chunk])
        images = np.stack([dataset.image(i) for i in chunk])
        with ad.no_grad():
            ab = model.audio_enc(specs.astype(model.dtype))
            vb = model.visual_enc(images.astype(model.dtype))
        for k, sid in enumerate(chunk):
            out[sid] = {"F_a": ab.intermediate.data[k], "E_a": ab.final.data[k],
                        "O_v": vb.intermediate.data[k], "E_v": vb.final.data[k]}
    return out


def _audio_probs(model: AlignmentModel, e_a: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        pred = model.head_a.classify_detached(Tensor(e_a[None]))
    return pred.probs.data[0]


def _predicted_valid(probs: np.ndarray, tau_cls: float) -> tuple[int, ...]:
    valid = select_valid_classes(probs, tau_cls)
    if not valid:
        valid = (int(np.argmax(probs)),)   # never fuse an empty set
    return valid


def correspondence_saliency(model: AlignmentModel, f_a: np.ndarray,
                            o_v: np.ndarray) -> np.ndarray:
    """Class-agnostic map: gradient-weighted activation of the match logit
    with respect to the visual input of the correspondence net."""
    leaf = Tensor(np.ascontiguousarray(o_v[None]), requires_grad=True)
    pred = model.corr(Tensor(f_a[None]), leaf)
    cam = grad_cam(leaf, pred.logits[0, 1], class_id=-1, modality="visual")
    for _, p in model.avc_parameters():
        p.grad = None   # probe backward must not leak into training state
    return cam.weights


def _visual_cam(model: AlignmentModel, e_v: np.ndarray, class_id: int) -> np.ndarray:
    leaf = Tensor(np.ascontiguousarray(e_v[None]), requires_grad=True)
    pred = model.head_v.classify_detached(leaf)
    cam = grad_cam(leaf, pred.logits[0, class_id], class_id=class_id, modality="visual")
    return cam.weights


def method_maps(model: AlignmentModel, feats: dict[str, np.ndarray],
                gt: GroundTruthMask, method: str, tau_cls: float,
                image_hw: tuple[int, int], video_id: int,
                ) -> tuple[dict[int, np.ndarray], np.ndarray]:
    """Per-class heatmaps (image resolution, [0,1]) plus the fused map.

    avc produces one class-agnostic map used for every slot. multitask uses
    per-class visual activation maps gated by audio class predictions. ours
    projects the class-specific audio feature against every visual cell.
    """
    probs = _audio_probs(model, feats["E_a"])
    valid = _predicted_valid(probs, tau_cls)
    needed = tuple(sorted(set(valid) | set(gt.sounding_classes())))

    if method == "avc":
        sal = normalize_resize(
            correspondence_saliency(model, feats["F_a"], feats["O_v"]), image_hw)
        return {c: sal for c in needed}, sal

    maps: dict[int, np.ndarray] = {}
    if method == "multitask":
        for c in needed:
            if c in valid:
                maps[c] = normalize_resize(_visual_cam(model, feats["E_v"], c), image_hw)
            else:
                maps[c] = np.zeros(image_hw)   # audio gate closed for this class
    elif method == "ours":
        aset = disentangle_sample(Tensor(feats["E_a"]), model.head_a, tau_cls,
                                  video_id, "audio", classes=needed)
        for c in needed:
            maps[c] = normalize_resize(
                localize(feats["E_v"], aset.features[c].data, model.proj_a,
                         model.proj_v), image_hw)
    else:
        raise ValueError(f"unknown method {method!r}")
    fused = fuse_maps(maps, probs, valid)
    return maps, fused


def alignment_distance_stats(model: AlignmentModel, dataset: DatasetHandle,
                             tau_cls: float = 0.5, batch_size: int = 16) -> dict:
    """Projected audio-visual distances over the test split: positives are
    same-scene same-class pairs, negatives everything else."""
    test_ids = dataset.test_ids
    feats = _encode_batches(model, dataset, test_ids, batch_size)
    rows_a, rows_v, keys_a, keys_v = [], [], [], []
    for sid in test_ids:
        rec = dataset.record(sid)
        sounding = tuple(int(c) for c in np.nonzero(rec.y_a)[0])
        visible = tuple(int(c) for c in np.nonzero(rec.y_v)[0])
        aset = disentangle_sample(Tensor(feats[sid]["E_a"]), model.head_a,
                                  tau_cls, sid, "audio", classes=sounding)
        vset = disentangle_sample(Tensor(feats[sid]["E_v"]), model.head_v,
                                  tau_cls, sid, "visual", classes=visible)
        for c in sounding:
            rows_a.append(aset.features[c].data)
            keys_a.append((sid, c))
        for c in visible:
            rows_v.append(vset.features[c].data)
            keys_v.append((sid, c))
    with ad.no_grad():
        pa = model.proj_a(Tensor(np.stack(rows_a))).data
        pv = model.proj_v(Tensor(np.stack(rows_v))).data
    d = np.sqrt(((pa[:, None, :] - pv[None, :, :]) ** 2).sum(axis=2))
    pos = np.array([[ka == kv for kv in keys_v] for ka in keys_a], dtype=bool)
    return {"mean_pos": float(d[pos].mean()), "mean_neg": float(d[~pos].mean()),
            "n_pos": int(pos.sum()), "n_neg": int((~pos).sum())}


def evaluate_method(model: AlignmentModel, dataset: DatasetHandle, method: str,
                    tau_cls: float = 0.5,
                    level_tau: dict[int, float] | None = None,
                    batch_size: int = 16, meta: dict | None = None) -> EvalReport:
    """Score one method over the test split, stratified by difficulty."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    level_tau = dict(DEFAULT_LEVEL_TAU if level_tau is None else level_tau)
    test = [dataset.record(i) for i in dataset.test_ids]
    if not test:
        raise ValueError("dataset has no test split")
    feats = _encode_batches(model, dataset, [r.id for r in test], batch_size)
    image_hw = (dataset.config.image_size, dataset.config.image_size)
    c = dataset.config.num_classes

    levels: dict[int, LevelScores] = {}
    for lvl, records in split_by_level(test).items():
        tau = level_tau.get(lvl, 0.5)
        cious, aucs, ccls = [], [], []
        for rec in records:
            gt = ground_truth_from_record(rec, c, image_hw)
            per_class, fused = method_maps(model, feats[rec.id], gt, method,
                                           tau_cls, image_hw, rec.id)
            if method == "avc":
                # one map, one mask: class identities never enter the score
                cious.append(ciou(fused, gt.union, tau))
                ccls.append(cious[-1])
            else:
                cious.append(ciou(fused, gt.union, tau))
                ccls.append(ciou_class(per_class, gt, tau))
            aucs.append(auc(fused, gt.union))
        levels[lvl] = LevelScores(ciou=float(np.mean(cious)), auc=float(np.mean(aucs)),
                                  ciou_class=float(np.mean(ccls)),
                                  count=len(records), tau=tau)
    return EvalReport(method=method, levels=levels, class_agnostic=(method == "avc"),
                      meta={"tau_cls": tau_cls, "n_test": len(test), **(meta or {})})
