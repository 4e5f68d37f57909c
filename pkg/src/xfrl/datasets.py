"""Synthetic speckled-texture benchmark and PGM/manifest ingestion.

Each class is an oriented sinusoidal texture inside a random ellipse on a
dark background, multiplied by unit-mean gamma speckle. The bundled presets
in :data:`PRESETS` are version-pinned; change :data:`BENCHMARK_VERSION` if
any generator parameter changes.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

BENCHMARK_VERSION = 1

SPLIT_SLOT = {"train": 0, "test": 1, "unlabeled": 2}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DomainShift:
    """Background/target appearance knobs selected by ``shift_id``."""

    background: float = 0.08
    clutter: float = 0.0  # amplitude of low-frequency background texture
    ellipse_scale: tuple[float, float] = (0.28, 0.42)  # semi-axes as fraction of image size
    orientation_jitter: float = 0.25  # radians, per sample
    frequency_jitter: float = 0.15  # relative, per sample


SHIFTS: dict[str, DomainShift] = {
    "none": DomainShift(),
    # mild clutter, tight orientation spread: the labelled source domain
    "src": DomainShift(background=0.12, clutter=0.1, orientation_jitter=0.15),
    # brighter cluttered background, smaller targets, looser orientation
    "sar": DomainShift(background=0.15, clutter=0.2, ellipse_scale=(0.18, 0.32), orientation_jitter=0.3),
}


@dataclass(frozen=True)
class SyntheticTaskSpec:
    num_classes: int
    samples_per_class: int
    frequencies: tuple[float, ...]
    orientations: tuple[float, ...]
    speckle_looks: float = 4.0
    contrast_scale: float = 1.0
    shift_id: str = "none"
    image_size: int = 64
    test_counts: tuple[int, ...] | None = None  # per class; default = samples_per_class
    slot: int = 0  # separates noise streams of different tasks under one seed

    def validate(self) -> None:
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        if self.samples_per_class < 0:
            raise DataError("samples_per_class must be nonnegative")
        if len(self.frequencies) != self.num_classes or len(self.orientations) != self.num_classes:
            raise DataError("need one texture frequency and orientation per class")
        if min(self.frequencies) <= 0:
            raise DataError("texture frequencies must be positive")
        if self.speckle_looks <= 0:
            raise DataError("speckle_looks must be positive")
        if self.contrast_scale <= 0:
            raise DataError("contrast_scale must be positive")
        if self.shift_id not in SHIFTS:
            raise DataError(f"unknown shift_id {self.shift_id!r}")
        if self.image_size < 4:
            raise DataError("image_size too small")
        if self.test_counts is not None and len(self.test_counts) != self.num_classes:
            raise DataError("test_counts needs one entry per class")

    def counts(self, split: str) -> tuple[int, ...]:
        if split == "test" and self.test_counts is not None:
            return tuple(self.test_counts)
        return (self.samples_per_class,) * self.num_classes


@dataclass
class LabeledSet:
    images: np.ndarray  # (N, 1, H, W)
    labels: np.ndarray  # (N,) int
    num_classes: int
    role: str = "target"
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "LabeledSet":
        index = np.asarray(index)
        return replace(self, images=self.images[index], labels=self.labels[index])

    def per_class(self, n: int) -> "LabeledSet":
        """First ``n`` samples of every class, in original order."""
        keep = np.concatenate([np.flatnonzero(self.labels == c)[:n] for c in range(self.num_classes)])
        return self.subset(np.sort(keep))


@dataclass
class TaskData:
    train: LabeledSet
    test: LabeledSet

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.train.images.shape[1:])


# ---------------------------------------------------------------------------
# generation


def speckle(image: np.ndarray, looks: float, seed) -> np.ndarray:
    """Multiply by gamma noise with shape ``looks`` and mean 1."""
    if looks <= 0:
        raise DataError("speckle looks must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return image * rng.gamma(looks, 1.0 / looks, size=np.shape(image))


def _sample_image(spec: SyntheticTaskSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    shift = SHIFTS[spec.shift_id]
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / n - 0.5
    theta = spec.orientations[label] + rng.uniform(-shift.orientation_jitter, shift.orientation_jitter)
    freq = spec.frequencies[label] * (1.0 + rng.uniform(-shift.frequency_jitter, shift.frequency_jitter))
    phase = rng.uniform(0, 2 * np.pi)
    texture = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)

    cx, cy = rng.uniform(-0.12, 0.12, size=2)
    a, b = rng.uniform(*shift.ellipse_scale, size=2)
    rot = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(rot) + (yy - cy) * np.sin(rot)
    v = -(xx - cx) * np.sin(rot) + (yy - cy) * np.cos(rot)
    mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0

    img = np.full((n, n), shift.background)
    if shift.clutter:
        ct = rng.uniform(0, np.pi)
        cf = rng.uniform(1.0, 2.5)
        img = img + shift.clutter * (0.5 + 0.5 * np.sin(2 * np.pi * cf * (xx * np.cos(ct) + yy * np.sin(ct))))
    img = np.where(mask, 0.25 + 0.75 * texture, img)
    img = speckle(img, spec.speckle_looks, rng)
    return np.clip(img * spec.contrast_scale, 0.0, 1.0)


def gen_synthetic(spec: SyntheticTaskSpec, seed: int, split: str = "train", role: str = "target") -> LabeledSet:
    """One split of a synthetic task. Every sample has its own noise stream
    keyed by ``(seed, task slot, split, class, index)``; samples are
    interleaved class by class."""
    spec.validate()
    if split not in SPLIT_SLOT:
        raise DataError(f"unknown split {split!r}")
    counts = spec.counts(split)
    order = [(c, i) for i in range(max(counts, default=0)) for c in range(spec.num_classes) if i < counts[c]]
    imgs = np.empty((len(order), 1, spec.image_size, spec.image_size))
    labels = np.empty(len(order), dtype=np.int64)
    for j, (c, i) in enumerate(order):
        rng = np.random.default_rng([seed, spec.slot, SPLIT_SLOT[split], c, i])
        imgs[j, 0] = _sample_image(spec, c, rng)
        labels[j] = c
    return LabeledSet(imgs, labels, spec.num_classes, role, split)


def standardize(data: LabeledSet) -> LabeledSet:
    if len(data) == 0:
        raise DataError("cannot standardize an empty set")
    x = data.images
    axes = tuple(range(1, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    return replace(data, images=(x - mean) / np.maximum(std, 1e-6))


# Version-pinned benchmark presets. Orientations in radians, frequencies in
# cycles per image.
PRESETS: dict[str, SyntheticTaskSpec] = {
    # large labelled source task: five orientations of one texture
    "src5": SyntheticTaskSpec(
        num_classes=5,
        samples_per_class=400,
        frequencies=(5.0,) * 5,
        orientations=tuple(i * np.pi / 5 for i in range(5)),
        speckle_looks=2.0,
        contrast_scale=1.0,
        shift_id="src",
        image_size=32,
        test_counts=(100,) * 5,
        slot=1,
    ),
    # small intermediate task in the target domain, between the source
    # orientations
    "mid3": SyntheticTaskSpec(
        num_classes=3,
        samples_per_class=40,
        frequencies=(5.0,) * 3,
        orientations=(np.pi / 10, np.pi / 2, 9 * np.pi / 10),
        speckle_looks=1.0,
        contrast_scale=0.9,
        shift_id="sar",
        image_size=32,
        test_counts=(100,) * 3,
        slot=2,
    ),
    # target task, sized like the limited-data ship task
    "tgt3": SyntheticTaskSpec(
        num_classes=3,
        samples_per_class=100,
        frequencies=(5.0,) * 3,
        orientations=(0.0, 2 * np.pi / 5, 4 * np.pi / 5),
        speckle_looks=1.0,
        contrast_scale=0.8,
        shift_id="sar",
        image_size=32,
        test_counts=(79, 132, 135),
        slot=3,
    ),
}


def preset(name: str, **overrides) -> SyntheticTaskSpec:
    if name not in PRESETS:
        raise DataError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def make_task(spec: SyntheticTaskSpec | str, seed: int, role: str = "target", standardized: bool = True) -> TaskData:
    if isinstance(spec, str):
        spec = preset(spec)
    train = gen_synthetic(spec, seed, "train", role)
    test = gen_synthetic(spec, seed, "test", role)
    if standardized:
        train, test = standardize(train), standardize(test)
    return TaskData(train, test)


# ---------------------------------------------------------------------------
# PGM + manifest ingestion


def read_pgm(path: Path) -> np.ndarray:
    """Binary P5 PGM with maxval <= 255, scaled to [0, 1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read image ({exc.strerror})") from None
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0][:2].decode(errors='replace')!r}, expected 'P5')")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if width <= 0 or height <= 0 or not 0 < maxval <= 255:
        raise DataError(f"{path}: unsupported PGM dimensions or maxval")
    pos += 1  # single whitespace after maxval
    body = raw[pos : pos + width * height]
    if len(body) != width * height:
        raise DataError(f"{path}: PGM pixel data truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).astype(np.float64) / maxval


def write_pgm(path: Path, image: np.ndarray) -> None:
    img = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def fit_size(image: np.ndarray, size: int) -> np.ndarray:
    """Center crop or zero pad to ``size x size``."""
    out = np.zeros((size, size))
    h, w = image.shape
    sh, sw = max(0, (h - size) // 2), max(0, (w - size) // 2)
    dh, dw = max(0, (size - h) // 2), max(0, (size - w) // 2)
    ch, cw = min(h, size), min(w, size)
    out[dh : dh + ch, dw : dw + cw] = image[sh : sh + ch, sw : sw + cw]
    return out


def load_manifest(directory, image_size: int = 64, split: str | None = None, role: str = "target") -> LabeledSet:
    """Read ``manifest.csv`` (``path,label,split``) and its PGM chips.

    Labels are mapped to dense indices in order of first appearance over
    the whole manifest, so filtered splits share one label map.
    """
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    try:
        lines = manifest.read_text(encoding="utf-8").splitlines()
    except OSError:
        raise DataError(f"{manifest}: manifest not found") from None
    rows = list(csv.reader(lines, quoting=csv.QUOTE_NONE))
    if not rows or [c.strip() for c in rows[0]] != ["path", "label", "split"]:
        raise DataError(f"{manifest}:1: header must be 'path,label,split'")
    label_map: dict[int, int] = {}
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise DataError(f"{manifest}:{lineno}: expected 3 fields, got {len(row)}")
        rel, lab, sp = (c.strip() for c in row)
        try:
            raw_label = int(lab)
        except ValueError:
            raise DataError(f"{manifest}:{lineno}: label {lab!r} is not an integer") from None
        label_map.setdefault(raw_label, len(label_map))
        entries.append((lineno, rel, label_map[raw_label], sp))
    num_classes = max(2, len(label_map))
    images, labels = [], []
    for lineno, rel, lab, sp in entries:
        if split is not None and sp != split:
            continue
        path = directory / rel
        if not path.is_file():
            raise DataError(f"{manifest}:{lineno}: image file {path} not found")
        images.append(fit_size(read_pgm(path), image_size))
        labels.append(lab)
    arr = np.asarray(images, dtype=np.float64).reshape(len(images), 1, image_size, image_size)
    return LabeledSet(arr, np.asarray(labels, dtype=np.int64), num_classes, role, split or "all")


def write_manifest(directory, sets: dict[str, LabeledSet], prefix: str = "img") -> Path:
    """Write image chips plus ``manifest.csv``; the inverse of :func:`load_manifest`."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = ["path,label,split"]
    for split, data in sets.items():
        for i, (img, lab) in enumerate(zip(data.images, data.labels)):
            rel = f"images/{prefix}_{split}_{i:05d}.pgm"
            write_pgm(directory / rel, img[0])
            lines.append(f"{rel},{int(lab)},{split}")
    path = directory / "manifest.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
