"""Dataset persistence: layout, round trips, stratification, hashing."""

import dataclasses
import json
import os

import numpy as np
import pytest

from avalign.dataset import (
    DEFAULT_LEVEL_FRACTIONS,
    compose_dataset,
    dataset_hash,
    load_dataset,
    split_test_levels,
)
from avalign.scenes import SceneConfig, generate_scene

CFG = SceneConfig(num_classes=4, seed=3)


@pytest.fixture(scope="module")
def stored(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("ds"))
    handle = compose_dataset(CFG, n_train=6, n_test=5, out_dir=root)
    return root, handle


def test_layout_on_disk(stored):
    root, _ = stored
    for name in ("manifest.jsonl", "audio.bin", "images.bin", "waves.bin"):
        assert os.path.exists(os.path.join(root, name))


def test_refuses_overwrite_without_force(stored):
    root, _ = stored
    with pytest.raises(FileExistsError, match="force"):
        compose_dataset(CFG, 2, 2, root)


def test_rejects_empty_splits(tmp_path):
    with pytest.raises(ValueError, match="positive"):
        compose_dataset(CFG, 0, 5, str(tmp_path / "x"))
    with pytest.raises(ValueError, match="positive"):
        compose_dataset(CFG, 5, 0, str(tmp_path / "y"))


def test_split_sizes_and_ids(stored):
    _, ds = stored
    assert len(ds) == 11
    assert ds.train_ids == list(range(6))
    assert ds.test_ids == list(range(6, 11))


def test_config_round_trips(stored):
    root, _ = stored
    ds = load_dataset(root)
    assert ds.config == CFG
    assert ds.header["n_train"] == 6 and ds.header["n_test"] == 5


def test_train_records_match_regenerated_scenes(stored):
    _, ds = stored
    for sid in ds.train_ids:
        scene = generate_scene(CFG, sid)
        rec = ds.record(sid)
        np.testing.assert_array_equal(rec.y_a, scene.y_a)
        np.testing.assert_array_equal(rec.y_v, scene.y_v)
        assert rec.level == scene.level
        assert rec.boxes == tuple(
            (s.class_id, *s.box, bool(s.sounding)) for s in scene.sources)
        np.testing.assert_array_equal(ds.spectrogram(sid), scene.spectrogram)
        np.testing.assert_array_equal(ds.image(sid),
                                      scene.image.transpose(2, 0, 1))
        np.testing.assert_array_equal(ds.waves(sid), scene.waveforms)


def test_tensor_dtypes_and_shapes(stored):
    _, ds = stored
    sid = ds.train_ids[0]
    spec = ds.spectrogram(sid)
    img = ds.image(sid)
    waves = ds.waves(sid)
    assert spec.dtype == np.float32 and spec.shape == (64, 128)
    assert img.dtype == np.float32 and img.shape == (3, 64, 64)
    assert waves.ndim == 2 and waves.shape[1] == CFG.duration
    rec = ds.record(sid)
    assert waves.shape[0] == len(rec.boxes) + 1


def test_test_split_is_stratified(stored):
    _, ds = stored
    forced = split_test_levels(5, CFG)
    got = [ds.record(i).level for i in ds.test_ids]
    assert got == forced
    # every test scene carries exactly its forced number of sounding
    # sources; a silent distractor may still ride along
    for sid, lvl in zip(ds.test_ids, forced):
        boxes = ds.record(sid).boxes
        assert sum(1 for b in boxes if b[-1]) == lvl
        assert lvl <= len(boxes) <= lvl + 1


def test_split_test_levels_default_fractions():
    cfg = SceneConfig()
    assert DEFAULT_LEVEL_FRACTIONS == {1: 0.4, 2: 0.4, 3: 0.2}
    assert split_test_levels(10, cfg) == [1] * 4 + [2] * 4 + [3] * 2
    # remainder lands on the last level
    assert split_test_levels(7, cfg) == [1, 1, 2, 2, 3, 3, 3]


def test_split_test_levels_uniform_outside_default_range():
    cfg = SceneConfig(min_sources=2, max_sources=3)
    assert split_test_levels(4, cfg) == [2, 2, 3, 3]


def test_solo_wave_picks_sounding_row(stored):
    _, ds = stored
    found = False
    for sid in ds.train_ids + ds.test_ids:
        rec = ds.record(sid)
        for k, (cls, *_box, sounding) in enumerate(rec.boxes):
            if sounding:
                np.testing.assert_array_equal(ds.solo_wave(sid, cls),
                                              ds.waves(sid)[k])
                found = True
    assert found


def test_solo_wave_rejects_silent_class(stored):
    _, ds = stored
    for sid in ds.train_ids + ds.test_ids:
        rec = ds.record(sid)
        sounding = {cls for cls, *_b, snd in rec.boxes if snd}
        silent = [cls for cls, *_b, snd in rec.boxes if not snd
                  and cls not in sounding]
        if silent:
            with pytest.raises(KeyError, match="no sounding class"):
                ds.solo_wave(sid, silent[0])
            return
    pytest.skip("corpus draw produced no visible-but-silent source")


def test_hash_is_deterministic(tmp_path):
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    compose_dataset(CFG, 3, 3, a)
    compose_dataset(CFG, 3, 3, b)
    assert dataset_hash(a) == dataset_hash(b)
    assert len(dataset_hash(a)) == 64


def test_hash_tracks_generator_seed(tmp_path):
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    compose_dataset(CFG, 3, 3, a)
    compose_dataset(dataclasses.replace(CFG, seed=4), 3, 3, b)
    assert dataset_hash(a) != dataset_hash(b)


def test_force_overwrites_in_place(tmp_path):
    root = str(tmp_path / "ds")
    compose_dataset(CFG, 3, 3, root)
    first = dataset_hash(root)
    compose_dataset(dataclasses.replace(CFG, seed=9), 3, 3, root, force=True)
    assert dataset_hash(root) != first
    assert len(load_dataset(root)) == 6


def test_load_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(str(tmp_path))


def test_load_rejects_unknown_format(stored, tmp_path):
    src, _ = stored
    dst = str(tmp_path / "bad")
    os.makedirs(dst)
    with open(os.path.join(src, "manifest.jsonl")) as fh:
        lines = fh.read().splitlines()
    header = json.loads(lines[0])
    header["format_version"] = 99
    with open(os.path.join(dst, "manifest.jsonl"), "w") as fh:
        fh.write("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    for name in ("audio.bin", "images.bin", "waves.bin"):
        with open(os.path.join(dst, name), "wb"):
            pass
    with pytest.raises(ValueError, match="format"):
        load_dataset(dst)
