"""Dataset persistence: JSON-lines manifest + binary tensor files.

Directory layout:

    manifest.jsonl   header line (format_version, config, counts), then
                     one record per scene with labels, boxes, level, and
                     byte offsets into the blob files
    audio.bin        log-magnitude spectrograms, float32 blobs
    images.bin       (3, H, W) images, float32 blobs
    waves.bin        per-source + mixture waveforms, float32 blobs

Scenes are written train split first, then the test split stratified
across difficulty levels. Reads go through memory maps, so a handle stays
cheap no matter the dataset size.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensorio
from .scenes import SceneConfig, generate_scene

FORMAT_VERSION = 1
DEFAULT_LEVEL_FRACTIONS = {1: 0.4, 2: 0.4, 3: 0.2}
_BLOBS = ("audio", "image", "waves")
_BLOB_FILES = {"audio": "audio.bin", "image": "images.bin", "waves": "waves.bin"}


@dataclass(frozen=True)
class DatasetRecord:
    id: int
    split: str                   # "train" | "test"
    level: int
    y_a: np.ndarray
    y_v: np.ndarray
    boxes: tuple[tuple[int, int, int, int, int, bool], ...]  # class, y0, x0, h, w, sounding
    offsets: dict[str, int]


def _scene_to_record(scene, split: str) -> dict:
    return {
        "id": scene.video_id,
        "split": split,
        "level": scene.level,
        "y_a": [int(x) for x in scene.y_a],
        "y_v": [int(x) for x in scene.y_v],
        "boxes": [[s.class_id, *s.box, bool(s.sounding)] for s in scene.sources],
    }


def split_test_levels(n_test: int, config: SceneConfig) -> list[int]:
    """Forced per-scene source counts for the test split (stratified)."""
    levels = list(range(config.min_sources, config.max_sources + 1))
    if levels == [1, 2, 3]:
        fracs = [DEFAULT_LEVEL_FRACTIONS[l] for l in levels]
    else:
        fracs = [1.0 / len(levels)] * len(levels)
    counts = [int(np.floor(n_test * f)) for f in fracs]
    counts[-1] += n_test - sum(counts)
    out: list[int] = []
    for lvl, cnt in zip(levels, counts):
        out.extend([lvl] * cnt)
    return out


def compose_dataset(config: SceneConfig, n_train: int, n_test: int,
                    out_dir: str, force: bool = False) -> "DatasetHandle":
    """Generate and persist a dataset; returns an open handle."""
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    if os.path.exists(manifest_path) and not force:
        raise FileExistsError(f"{out_dir} already holds a dataset (use force to overwrite)")
    os.makedirs(out_dir, exist_ok=True)

    header = {
        "format_version": FORMAT_VERSION,
        "kind": "avalign-dataset",
        "config": dataclasses.asdict(config),
        "n_train": n_train,
        "n_test": n_test,
    }
    test_levels = split_test_levels(n_test, config)
    with open(manifest_path, "w", encoding="utf-8") as man, \
            open(os.path.join(out_dir, _BLOB_FILES["audio"]), "wb") as f_audio, \
            open(os.path.join(out_dir, _BLOB_FILES["image"]), "wb") as f_image, \
            open(os.path.join(out_dir, _BLOB_FILES["waves"]), "wb") as f_waves:
        man.write(json.dumps(header, sort_keys=True) + "\n")
        for k in range(n_train + n_test):
            if k < n_train:
                scene = generate_scene(config, k)
                split = "train"
            else:
                lvl = test_levels[k - n_train]
                forced = dataclasses.replace(config, min_sources=lvl, max_sources=lvl)
                scene = generate_scene(forced, k)
                split = "test"
            rec = _scene_to_record(scene, split)
            a_off, _ = tensorio.write_blob(f_audio, scene.spectrogram)
            # images persist channel-first for direct model consumption
            i_off, _ = tensorio.write_blob(f_image, scene.image.transpose(2, 0, 1))
            w_off, _ = tensorio.write_blob(f_waves, scene.waveforms)
            rec["offsets"] = {"audio": a_off, "image": i_off, "waves": w_off}
            man.write(json.dumps(rec, sort_keys=True) + "\n")
    return load_dataset(out_dir)


class DatasetHandle:
    """Read-only view of a persisted dataset; tensor reads are memmapped."""

    def __init__(self, root: str, config: SceneConfig, records: list[DatasetRecord],
                 header: dict):
        self.root = root
        self.config = config
        self.records = records
        self.header = header
        self._by_id = {r.id: r for r in records}
        self._maps = {
            name: np.memmap(os.path.join(root, _BLOB_FILES[name]), dtype=np.uint8, mode="r")
            for name in _BLOBS
        }

    def __len__(self) -> int:
        return len(self.records)

    @property
    def train_ids(self) -> list[int]:
        return [r.id for r in self.records if r.split == "train"]

    @property
    def test_ids(self) -> list[int]:
        return [r.id for r in self.records if r.split == "test"]

    def record(self, scene_id: int) -> DatasetRecord:
        return self._by_id[scene_id]

    def _read(self, kind: str, scene_id: int) -> np.ndarray:
        rec = self._by_id[scene_id]
        return tensorio.read_blob(self._maps[kind], rec.offsets[kind])

    def spectrogram(self, scene_id: int) -> np.ndarray:
        return self._read("audio", scene_id)

    def image(self, scene_id: int) -> np.ndarray:
        """(3, H, W) float32."""
        return self._read("image", scene_id)

    def waves(self, scene_id: int) -> np.ndarray:
        """(num_sources + 1, L); mixture last."""
        arr = self._read("waves", scene_id)
        return arr if arr.ndim == 2 else arr[None, :]

    def solo_wave(self, scene_id: int, class_id: int) -> np.ndarray:
        """Solo waveform of the sounding source with the given class."""
        rec = self._by_id[scene_id]
        waves = self.waves(scene_id)
        for k, (cls, *_box, sounding) in enumerate(rec.boxes):
            if cls == class_id and sounding:
                return waves[k]
        raise KeyError(f"scene {scene_id} has no sounding class {class_id}")


def scene_config_from_dict(d: dict) -> SceneConfig:
    d = dict(d)
    if "box_sizes" in d:
        d["box_sizes"] = tuple(d["box_sizes"])
    return SceneConfig(**d)


def load_dataset(root: str) -> DatasetHandle:
    manifest_path = os.path.join(root, "manifest.jsonl")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no manifest in {root}")
    with open(manifest_path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = json.loads(lines[0])
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {header.get('format_version')}")
    config = scene_config_from_dict(header["config"])
    records = []
    for line in lines[1:]:
        d = json.loads(line)
        records.append(DatasetRecord(
            id=d["id"], split=d["split"], level=d["level"],
            y_a=np.asarray(d["y_a"], dtype=np.uint8),
            y_v=np.asarray(d["y_v"], dtype=np.uint8),
            boxes=tuple(tuple(b) for b in d["boxes"]),
            offsets=d["offsets"]))
    return DatasetHandle(root, config, records, header)


def dataset_hash(root: str) -> str:
    """SHA-256 over the manifest and every tensor file, in fixed order."""
    h = hashlib.sha256()
    for name in ["manifest.jsonl"] + [_BLOB_FILES[k] for k in _BLOBS]:
        with open(os.path.join(root, name), "rb") as fh:
            while True:
                chunk = fh.read(1 << 20)
                if not chunk:
                    break
                h.update(chunk)
    return h.hexdigest()
