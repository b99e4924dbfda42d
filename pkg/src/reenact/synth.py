"""Synthetic reenactment corpus and dataset loaders.

Every video is a procedurally drawn face (head ellipse, eyes, nose, mouth) over
a static textured background, with smooth per-frame head motion and mouth
movement. The altered counterpart of a video is the same sequence with
localized artifacts added on top of the 8-bit original:

* texture perturbation inside the mouth and nose areas, mixing pixel-level
  noise with a smoother blob component so part of it survives strong
  quantization;
* ringing along the face-boundary ellipse.

Optional eye-region texture can be switched on through ``SynthConfig.regions``.

All randomness comes from Philox (a 64-bit counter-based generator) keyed by
``numpy.random.SeedSequence`` entropy derived from ``(seed, video index)``, so
a corpus is a pure function of its config.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .preprocess import NO_C, CompressionLevel, FaceBox, Frame, resize_bilinear, sample_frames

log = logging.getLogger(__name__)

ARTIFACT_REGIONS = ("mouth", "nose", "face-boundary", "eyes")
SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("video_id", "frame_index", "path", "label", "cx", "cy", "w", "h", "split")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 100
    split_ratio: tuple[int, int, int] = (704, 150, 150)
    frames_per_video: int = 30
    frames_sampled: int = 10
    image_size: int = 96
    strength: float = 1.0
    regions: tuple[str, ...] = ("mouth", "nose", "face-boundary")
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "split_ratio", tuple(int(r) for r in self.split_ratio))
        object.__setattr__(self, "regions", tuple(self.regions))
        if self.n_videos < 1:
            raise ValueError("n_videos must be >= 1")
        if len(self.split_ratio) != 3 or min(self.split_ratio) < 0 or sum(self.split_ratio) == 0:
            raise ValueError(f"bad split ratio {self.split_ratio}")
        if self.frames_sampled > self.frames_per_video:
            raise ValueError("frames_sampled cannot exceed frames_per_video")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if self.strength < 0:
            raise ValueError("strength must be >= 0")
        unknown = set(self.regions) - set(ARTIFACT_REGIONS)
        if unknown:
            raise ValueError(f"unknown artifact regions {sorted(unknown)}")

    @property
    def split_counts(self) -> tuple[int, int, int]:
        """Videos per split, proportional to ``split_ratio`` (largest remainder)."""
        total = sum(self.split_ratio)
        raw = [self.n_videos * r / total for r in self.split_ratio]
        counts = [int(math.floor(x)) for x in raw]
        order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
        for i in order[: self.n_videos - sum(counts)]:
            counts[i] += 1
        return tuple(counts)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratio"] = list(self.split_ratio)
        d["regions"] = list(self.regions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known})


@dataclass
class LabeledSample:
    image: Frame
    label: int
    box: FaceBox
    level: CompressionLevel = NO_C
    split: str = "train"
    mask: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def video_id(self) -> str:
        return self.image.video_id

    @property
    def frame_index(self) -> int:
        return self.image.frame_index

    def same_as(self, other: "LabeledSample") -> bool:
        return (
            self.label == other.label
            and self.split == other.split
            and self.box == other.box
            and self.video_id == other.video_id
            and self.frame_index == other.frame_index
            and np.array_equal(self.image.pixels, other.image.pixels)
        )


# -- rng helpers -----------------------------------------------------------

def _philox(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def video_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


def video_id_for(index: int) -> str:
    return f"v{index:04d}"


def video_index(video_id: str) -> int:
    m = re.fullmatch(r"v(\d+)", video_id)
    if not m:
        raise ValueError(f"not a synthetic video id: {video_id!r}")
    return int(m.group(1))


# -- procedural face -------------------------------------------------------

@dataclass(frozen=True)
class _VideoParams:
    cx: float
    cy: float
    rx: float
    ry: float
    skin: np.ndarray
    eye: np.ndarray
    lip: np.ndarray
    motion_amp: tuple[float, float]
    motion_freq: tuple[float, float]
    motion_phase: tuple[float, float]
    mouth_freq: float
    mouth_phase: float


@dataclass(frozen=True)
class _Geometry:
    cx: float
    cy: float
    rx: float
    ry: float
    mouth_open: float

    @property
    def eyes(self):
        dx, dy = 0.42 * self.rx, -0.28 * self.ry
        return [(self.cx - dx, self.cy + dy), (self.cx + dx, self.cy + dy)]

    @property
    def nose(self):
        return self.cx, self.cy + 0.08 * self.ry

    @property
    def mouth(self):
        return self.cx, self.cy + 0.5 * self.ry

    def box(self) -> FaceBox:
        return FaceBox(self.cx, self.cy, 2 * self.rx, 2 * self.ry, source="annotation")


def _draw_params(rng: np.random.Generator, size: int) -> _VideoParams:
    c = size / 2.0
    rx = size * rng.uniform(0.24, 0.29)
    ry = rx * rng.uniform(1.15, 1.3)
    skin = rng.uniform([150, 105, 80], [235, 190, 160])
    eye = rng.uniform([20, 20, 20], [90, 70, 60])
    lip = rng.uniform([140, 40, 50], [200, 90, 100])
    return _VideoParams(
        cx=c + rng.uniform(-3, 3),
        cy=c + rng.uniform(-3, 3),
        rx=rx,
        ry=ry,
        skin=skin,
        eye=eye,
        lip=lip,
        motion_amp=(rng.uniform(1.0, 4.0), rng.uniform(1.0, 3.0)),
        motion_freq=(rng.uniform(0.02, 0.06), rng.uniform(0.02, 0.06)),
        motion_phase=(rng.uniform(0, 2 * math.pi), rng.uniform(0, 2 * math.pi)),
        mouth_freq=rng.uniform(0.05, 0.15),
        mouth_phase=rng.uniform(0, 2 * math.pi),
    )


def _geometry(p: _VideoParams, t: int) -> _Geometry:
    ax, ay = p.motion_amp
    fx, fy = p.motion_freq
    phx, phy = p.motion_phase
    return _Geometry(
        cx=p.cx + ax * math.sin(2 * math.pi * fx * t + phx),
        cy=p.cy + ay * math.sin(2 * math.pi * fy * t + phy),
        rx=p.rx,
        ry=p.ry,
        mouth_open=0.5 + 0.5 * math.sin(2 * math.pi * p.mouth_freq * t + p.mouth_phase),
    )


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(30, 220, size=(6, 6, 3))
    smooth = resize_bilinear(coarse, size)
    fine = gaussian_filter(rng.standard_normal((size, size)), 1.0) * 18.0
    return smooth + fine[..., None]


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return xx + 0.5, yy + 0.5


def _ellipse_r(xx, yy, cx, cy, rx, ry):
    return np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)


def _boundary_distance(xx, yy, g: _Geometry) -> np.ndarray:
    """Approximate signed pixel distance to the head ellipse (negative inside)."""
    return (_ellipse_r(xx, yy, g.cx, g.cy, g.rx, g.ry) - 1.0) * (0.5 * (g.rx + g.ry))


def _soft(r: np.ndarray, scale: float) -> np.ndarray:
    """Anti-aliased ellipse coverage from normalized radius."""
    return np.clip((1.0 - r) * scale + 0.5, 0.0, 1.0)


def _render(p: _VideoParams, background: np.ndarray, g: _Geometry) -> np.ndarray:
    size = background.shape[0]
    xx, yy = _grid(size)
    img = background.copy()
    r_head = _ellipse_r(xx, yy, g.cx, g.cy, g.rx, g.ry)
    shade = 1.0 - 0.18 * np.clip((yy - g.cy) / g.ry, -1, 1) - 0.08 * np.clip((xx - g.cx) / g.rx, -1, 1)
    head = p.skin[None, None, :] * shade[..., None]
    a = _soft(r_head, 0.5 * (g.rx + g.ry))[..., None]
    img = img * (1 - a) + head * a

    for ex, ey in g.eyes:
        erx, ery = 0.2 * g.rx, 0.1 * g.ry
        r = _ellipse_r(xx, yy, ex, ey, erx, ery)
        a = _soft(r, ery)[..., None]
        img = img * (1 - a) + p.eye[None, None, :] * a
        r = _ellipse_r(xx, yy, ex, ey - 0.04 * g.ry, 0.05 * g.rx, 0.04 * g.ry)
        a = _soft(r, 2.0)[..., None] * 0.8
        img = img * (1 - a) + 235.0 * a

    nx, ny = g.nose
    r = _ellipse_r(xx, yy, nx, ny, 0.11 * g.rx, 0.2 * g.ry)
    a = _soft(r, 0.11 * g.rx)[..., None] * 0.45
    img = img * (1 - a) + (p.skin * 0.7)[None, None, :] * a

    mx, my = g.mouth
    r = _ellipse_r(xx, yy, mx, my, 0.38 * g.rx, (0.05 + 0.1 * g.mouth_open) * g.ry)
    a = _soft(r, 0.1 * g.ry)[..., None]
    img = img * (1 - a) + p.lip[None, None, :] * a
    r = _ellipse_r(xx, yy, mx, my, 0.3 * g.rx, (0.01 + 0.07 * g.mouth_open) * g.ry)
    a = _soft(r, 0.07 * g.ry)[..., None] * g.mouth_open
    img = img * (1 - a) + np.array([40.0, 15.0, 20.0])[None, None, :] * a
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _region_masks(g: _Geometry, size: int) -> dict[str, np.ndarray]:
    xx, yy = _grid(size)
    mx, my = g.mouth
    nx, ny = g.nose
    masks = {
        "mouth": _ellipse_r(xx, yy, mx, my, 0.5 * g.rx, 0.24 * g.ry) <= 1.0,
        "nose": _ellipse_r(xx, yy, nx, ny, 0.2 * g.rx, 0.3 * g.ry) <= 1.0,
        "face-boundary": np.abs(_boundary_distance(xx, yy, g)) <= 3.5,
    }
    eyes = np.zeros((size, size), bool)
    for ex, ey in g.eyes:
        eyes |= _ellipse_r(xx, yy, ex, ey, 0.3 * g.rx, 0.17 * g.ry) <= 1.0
    masks["eyes"] = eyes
    return masks


def artifact_mask(g: _Geometry, size: int, regions: Iterable[str]) -> np.ndarray:
    masks = _region_masks(g, size)
    out = np.zeros((size, size), bool)
    for r in regions:
        out |= masks[r]
    return out


def _artifact(rng: np.random.Generator, g: _Geometry, size: int, regions: Sequence[str]) -> np.ndarray:
    """Additive artifact field (H x W x 3, gray levels) at unit strength."""
    masks = _region_masks(g, size)
    field_ = np.zeros((size, size, 3))
    texture_mask = np.zeros((size, size), bool)
    for r in ("mouth", "nose", "eyes"):
        if r in regions:
            texture_mask |= masks[r]
    fine = rng.standard_normal((size, size))
    blob = gaussian_filter(rng.standard_normal((size, size)), 1.5)
    blob /= blob.std() + 1e-12
    chroma = rng.uniform(-1, 1, size=3)
    if texture_mask.any():
        tex = 12.0 * fine + 14.0 * blob
        field_ += (tex * texture_mask)[..., None]
        field_ += (6.0 * blob * texture_mask)[..., None] * chroma[None, None, :]
    if "face-boundary" in regions:
        xx, yy = _grid(size)
        d = _boundary_distance(xx, yy, g)
        ring = 16.0 * np.cos(math.pi * d / 1.5) * np.exp(-((d / 2.5) ** 2))
        field_ += (ring * masks["face-boundary"])[..., None]
    return field_


# -- video / dataset generation --------------------------------------------

def _frame_stream(config: SynthConfig, vseed: int):
    rng = _philox(vseed, 0)
    params = _draw_params(rng, config.image_size)
    background = _background(rng, config.image_size)
    return params, background


def gen_video(config: SynthConfig, video_seed: int, label: int, video_id: str = "v0000", split: str = "train") -> list[LabeledSample]:
    """Render one sequence; ``label=1`` adds artifacts to the same base video."""
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    params, background = _frame_stream(config, video_seed)
    art_rng = _philox(video_seed, 1)
    size = config.image_size
    out = []
    for t in range(config.frames_per_video):
        g = _geometry(params, t)
        pixels = _render(params, background, g)
        mask = artifact_mask(g, size, config.regions)
        if label == 1:
            art = _artifact(art_rng, g, size, config.regions)
            if config.strength > 0:
                pixels = np.clip(np.round(pixels + config.strength * art), 0, 255).astype(np.uint8)
        out.append(LabeledSample(Frame(pixels, t, video_id), label, g.box(), NO_C, split, mask))
    return out


def assign_splits(config: SynthConfig) -> dict[str, str]:
    """video_id -> split, a pure function of (seed, n_videos, ratio)."""
    rng = _philox(config.seed, 0x5E1)
    perm = rng.permutation(config.n_videos)
    n_train, n_val, _ = config.split_counts
    out = {}
    for rank, idx in enumerate(perm):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        out[video_id_for(int(idx))] = split
    return out


def gen_dataset(config: SynthConfig) -> list[LabeledSample]:
    """One original and one altered sequence per video, ``frames_sampled`` frames each."""
    splits = assign_splits(config)
    samples: list[LabeledSample] = []
    for i in range(config.n_videos):
        vid = video_id_for(i)
        vseed = video_seed(config.seed, i)
        for label in (0, 1):
            frames = gen_video(config, vseed, label, vid, splits[vid])
            pick_seed = video_seed(vseed, 2 + label)
            samples.extend(sample_frames(frames, config.frames_sampled, pick_seed))
    return samples


def artifact_masks_for(config: SynthConfig, samples: Sequence[LabeledSample]) -> list[np.ndarray]:
    """Recompute frame-space artifact masks for synthetic samples (e.g. loaded from disk)."""
    cache: dict[str, _VideoParams] = {}
    out = []
    for s in samples:
        if s.video_id not in cache:
            rng = _philox(video_seed(config.seed, video_index(s.video_id)), 0)
            cache[s.video_id] = _draw_params(rng, config.image_size)
        g = _geometry(cache[s.video_id], s.frame_index)
        out.append(artifact_mask(g, config.image_size, config.regions))
    return out


def split_samples(samples: Sequence[LabeledSample], split: str) -> list[LabeledSample]:
    return [s for s in samples if s.split == split]


# -- on-disk corpus --------------------------------------------------------

def _frame_filename(s: LabeledSample) -> str:
    tag = "altered" if s.label else "original"
    return f"frames/{s.video_id}_{tag}_{s.frame_index:04d}.png"


def write_dataset(samples: Sequence[LabeledSample], out_dir: str | Path, config: SynthConfig | None = None) -> Path:
    """Write PNG frames, ``manifest.csv`` and (if given) ``config.json``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    if config is not None:
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for s in samples:
            rel = _frame_filename(s)
            Image.fromarray(s.image.pixels).save(out / rel, format="PNG")
            b = s.box
            w.writerow([s.video_id, s.frame_index, rel, s.label, repr(b.center_x), repr(b.center_y), repr(b.width), repr(b.height), s.split])
    return manifest


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def load_manifest(path: str | Path) -> list[LabeledSample]:
    """Load a manifest CSV (or a directory containing ``manifest.csv``)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    samples = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
                box = FaceBox(float(row["cx"]), float(row["cy"]), float(row["w"]), float(row["h"]), source="annotation")
                frame_index = int(row["frame_index"])
                split = row["split"]
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed row {row!r}: {exc}") from None
            img_path = root / row["path"]
            if not img_path.exists():
                raise ManifestError(f"{path}:{lineno}: image file not found: {img_path}")
            try:
                pixels = _read_png(img_path)
                samples.append(LabeledSample(Frame(pixels, frame_index, row["video_id"]), label, box, NO_C, split))
            except (ValueError, OSError) as exc:
                raise ManifestError(f"{path}:{lineno}: bad entry {img_path}: {exc}") from None
    return samples


def load_faceforensics(root: str | Path) -> list[LabeledSample]:
    """Load a FaceForensics-style tree with one JSON sidecar per video.

    Expected layout::

        root/<split>/<original|altered>/<video_id>.json
        root/<split>/<original|altered>/<video_id>/<index:04d>.png

    Each sidecar is ``{"video_id", "frames": [{"index", "box": {cx, cy, w, h}, "label"}]}``;
    a frame entry may carry an explicit ``"path"`` relative to the sidecar.
    """
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"dataset directory not found: {root}")
    samples = []
    for sidecar in sorted(root.rglob("*.json")):
        try:
            meta = json.loads(sidecar.read_text())
            vid = str(meta["video_id"])
            frames = meta["frames"]
        except (ValueError, KeyError) as exc:
            raise ManifestError(f"{sidecar}: malformed annotation: {exc}") from None
        split = next((p for p in sidecar.relative_to(root).parts if p in SPLITS), "test")
        for entry in frames:
            try:
                idx = int(entry["index"])
                b = entry["box"]
                box = FaceBox(float(b["cx"]), float(b["cy"]), float(b["w"]), float(b["h"]), source="annotation")
                label = int(entry["label"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{sidecar}: malformed frame entry {entry!r}: {exc}") from None
            rel = entry.get("path") or f"{sidecar.stem}/{idx:04d}.png"
            img_path = sidecar.parent / rel
            if not img_path.exists():
                raise ManifestError(f"{sidecar}: image file not found: {img_path}")
            samples.append(LabeledSample(Frame(_read_png(img_path), idx, vid), label, box, NO_C, split))
    if not samples:
        raise ManifestError(f"no annotated frames found under {root}")
    return samples


def load_dataset(path: str | Path) -> list[LabeledSample]:
    """Manifest CSV if present, otherwise a FaceForensics-style tree."""
    path = Path(path)
    if path.is_file() or (path / "manifest.csv").exists():
        return load_manifest(path)
    if not path.exists():
        raise ManifestError(f"dataset not found: {path}")
    return load_faceforensics(path)


def with_config(config: SynthConfig, **changes) -> SynthConfig:
    return replace(config, **changes)
