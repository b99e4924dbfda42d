import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from reenact import synth
from reenact.synth import (
    ManifestError,
    SynthConfig,
    artifact_masks_for,
    assign_splits,
    gen_dataset,
    gen_video,
    load_dataset,
    load_faceforensics,
    load_manifest,
    video_seed,
    write_dataset,
)

SMALL = SynthConfig(n_videos=6, frames_per_video=12, frames_sampled=4, image_size=64, seed=5)


def _pair(config, idx=0):
    vs = video_seed(config.seed, idx)
    return gen_video(config, vs, 0), gen_video(config, vs, 1)


def test_strength_zero_is_identity():
    orig, alt = _pair(SynthConfig(strength=0.0, frames_per_video=5, frames_sampled=5, image_size=48))
    for o, a in zip(orig, alt):
        assert o.image.pixels.tobytes() == a.image.pixels.tobytes()
        assert o.box == a.box


def test_mouth_difference_dominates():
    config = SynthConfig(frames_per_video=6, frames_sampled=6)
    orig, alt = _pair(config, 3)
    params = synth._draw_params(synth._philox(video_seed(config.seed, 3), 0), config.image_size)
    inside, outside = [], []
    for o, a in zip(orig, alt):
        diff = np.abs(a.image.pixels.astype(float) - o.image.pixels.astype(float)).mean(axis=2)
        masks = synth._region_masks(synth._geometry(params, o.frame_index), config.image_size)
        inside.append(diff[masks["mouth"]].mean())
        outside.append(diff[~a.mask].mean())
    assert np.mean(inside) > 5 * max(np.mean(outside), 1e-9)


@pytest.mark.parametrize("idx", range(5))
def test_artifact_mass_concentrated(idx):
    config = SynthConfig(frames_per_video=4, frames_sampled=4)
    orig, alt = _pair(config, idx)
    for o, a in zip(orig, alt):
        diff = np.abs(a.image.pixels.astype(float) - o.image.pixels.astype(float)).sum(axis=2)
        assert diff[a.mask].sum() >= 0.8 * diff.sum()


def test_generation_deterministic():
    a = gen_dataset(SMALL)
    b = gen_dataset(SMALL)
    assert len(a) == len(b) and all(x.same_as(y) for x, y in zip(a, b))
    c = gen_dataset(SynthConfig(**{**SMALL.to_dict(), "seed": 6}))
    assert not all(x.same_as(y) for x, y in zip(a, c))


def test_default_split_and_counts():
    cfg = SynthConfig()
    assert cfg.split_counts == (70, 15, 15)
    splits = assign_splits(cfg)
    assert Counter(splits.values()) == {"train": 70, "val": 15, "test": 15}


def test_dataset_protocol():
    samples = gen_dataset(SMALL)
    per_video = Counter(s.video_id for s in samples)
    assert set(per_video.values()) == {2 * SMALL.frames_sampled}
    by_split = {}
    for s in samples:
        by_split.setdefault(s.split, set()).add(s.video_id)
    vids = [v for vs in by_split.values() for v in vs]
    assert len(vids) == len(set(vids))
    for split in by_split:
        labels = Counter(s.label for s in samples if s.split == split)
        assert labels[0] == labels[1]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60))
def test_split_partition_any_seed(seed, n):
    cfg = SynthConfig(n_videos=n, seed=seed)
    splits = assign_splits(cfg)
    assert len(splits) == n
    assert Counter(splits.values()) == {k: v for k, v in zip(("train", "val", "test"), cfg.split_counts) if v}
    assert assign_splits(cfg) == splits


def test_manifest_round_trip(tmp_path):
    samples = gen_dataset(SMALL)
    write_dataset(samples, tmp_path, SMALL)
    loaded = load_manifest(tmp_path)
    assert len(loaded) == len(samples)
    assert all(a.same_as(b) for a, b in zip(samples, loaded))
    cfg = SynthConfig.from_dict(json.loads((tmp_path / "config.json").read_text()))
    assert cfg == SMALL
    for m, s in zip(artifact_masks_for(cfg, loaded), samples):
        np.testing.assert_array_equal(m, s.mask)


def test_manifest_missing_png(tmp_path):
    samples = gen_dataset(SynthConfig(n_videos=2, frames_per_video=3, frames_sampled=2, image_size=32))
    write_dataset(samples, tmp_path)
    victim = tmp_path / "frames" / "v0001_altered_0000.png"
    if not victim.exists():
        victim = sorted((tmp_path / "frames").iterdir())[-1]
    victim.unlink()
    with pytest.raises(ManifestError, match=victim.name):
        load_manifest(tmp_path / "manifest.csv")


def test_manifest_malformed_row(tmp_path):
    samples = gen_dataset(SynthConfig(n_videos=1, frames_per_video=2, frames_sampled=1, image_size=32))
    write_dataset(samples, tmp_path)
    path = tmp_path / "manifest.csv"
    lines = path.read_text().splitlines()
    lines[1] = lines[1].replace(",0,", ",zero,", 1)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError, match=":2:"):
        load_manifest(path)
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "nope.csv")


def test_faceforensics_layout(tmp_path):
    rng = np.random.default_rng(0)
    for split, kind, label in (("train", "original", 0), ("train", "altered", 1), ("test", "original", 0)):
        d = tmp_path / split / kind / "vid7"
        d.mkdir(parents=True)
        frames = []
        for idx in (3, 9):
            Image.fromarray(rng.integers(0, 256, (40, 48, 3), dtype=np.uint8)).save(d / f"{idx:04d}.png")
            frames.append({"index": idx, "box": {"cx": 24, "cy": 20, "w": 20, "h": 24}, "label": label})
        (d.parent / "vid7.json").write_text(json.dumps({"video_id": "vid7", "frames": frames}))
    samples = load_dataset(tmp_path)
    assert len(samples) == 6
    assert {s.box.source for s in samples} == {"annotation"}
    assert Counter((s.split, s.label) for s in samples) == {("train", 0): 2, ("train", 1): 2, ("test", 0): 2}
    (tmp_path / "train" / "altered" / "vid7" / "0009.png").unlink()
    with pytest.raises(ManifestError, match="0009.png"):
        load_faceforensics(tmp_path)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(strength=-1)
    with pytest.raises(ValueError):
        SynthConfig(regions=("ears",))
    with pytest.raises(ValueError):
        SynthConfig(frames_per_video=5, frames_sampled=6)
    assert SynthConfig.from_dict(SynthConfig(regions=("mouth", "eyes")).to_dict()).regions == ("mouth", "eyes")
