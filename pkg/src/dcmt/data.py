"""Synthetic cartilage-band images, masks, splits and batch sampling.

Each image shows a bright curved band on a dark background. Class 0 keeps
the band intact, class 1 carves a notch that removes part of the band's
thickness, class 2 cuts a gap through the full thickness. The segmentation
mask is the band before carving, dilated with a 3x3 structuring element.

Every random draw is derived from ``(seed, subject_id, sample_id)`` or
``(seed, stream, counter)`` through :class:`numpy.random.SeedSequence`
entropy lists, so results never depend on call order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .model import ConfigError

NUM_CLASSES = 3
CLASS_NAMES = ("normal", "partial", "full")
MANIFEST_HEADER = ["sample_id", "subject_id", "class", "split", "labeled"]

# stream ids for derived generators
_SUBJECT, _SLICE, _SPLIT, _SHUFFLE, _AUGMENT = 11, 13, 17, 19, 23


class DataError(ValueError):
    """Invalid sample content or identifiers."""


class FormatError(ValueError):
    """Malformed PGM or manifest file."""


@dataclass
class Sample:
    image: np.ndarray
    label: int
    seg: np.ndarray
    subject_id: int
    sample_id: int
    # columns [start, stop) where the defect is (or would be, for class 0)
    defect_cols: tuple[int, int] = (0, 0)


@dataclass
class DataConfig:
    size: int = 32
    n_subjects: int = 100
    slices_per_subject: int = 6
    dilation: int = 1
    noise: float = 0.05
    train_fraction: float = 0.9
    labeled_fraction: float = 0.1
    labeled_per_batch: int = 8
    unlabeled_per_batch: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.size < 16:
            raise ConfigError("size must be >= 16")
        if self.n_subjects * self.slices_per_subject > 2000:
            raise ConfigError("at most 2000 samples are supported")
        if self.dilation < 0:
            raise ConfigError("dilation must be >= 0")
        if self.labeled_per_batch < 1 or self.unlabeled_per_batch < 0:
            raise ConfigError("invalid batch composition")


@dataclass
class SplitSpec:
    train_fraction: float = 0.9
    labeled_fraction: float = 0.1
    seed: int = 0


@dataclass
class BatchSpec:
    labeled_per_batch: int = 8
    unlabeled_per_batch: int = 4


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng([int(e) & 0xFFFFFFFF for e in entropy])


# ----------------------------------------------------------------------------
# morphology
# ----------------------------------------------------------------------------


def dilate(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Binary dilation with a full 3x3 element, repeated ``iterations`` times."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    mask = np.asarray(mask).astype(bool)
    if iterations == 0:
        # scipy treats iterations=0 as "until stable"
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool), iterations=iterations)


# ----------------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------------


@dataclass
class _Geometry:
    center: float
    amplitude: float
    cycles: float
    phase: float
    thickness: int
    intensity: float
    background: float


def _subject_geometry(seed: int, subject_id: int, size: int) -> _Geometry:
    r = _rng(seed, _SUBJECT, subject_id)
    center = r.uniform(0.38, 0.62) * size
    amplitude = r.uniform(1.0, 0.12 * size)
    cycles = r.uniform(0.5, 1.5)
    phase = r.uniform(0, 2 * math.pi)
    thickness = int(r.integers(3, 6))
    # band contrast of 5-7 noise sigmas at the default noise: visible, but not
    # so clean that a handful of labeled slices solves the task
    contrast = r.uniform(0.25, 0.35)
    background = r.uniform(0.05, 0.2)
    return _Geometry(center, amplitude, cycles, phase, thickness, background + contrast, background)


def band_tops(geom: _Geometry, size: int, phase_jitter: float = 0.0, shift: float = 0.0) -> np.ndarray:
    x = np.arange(size)
    y = geom.center + shift + geom.amplitude * np.sin(2 * math.pi * geom.cycles * x / size + geom.phase + phase_jitter)
    tops = np.rint(y - geom.thickness / 2.0).astype(int)
    return np.clip(tops, 1, size - geom.thickness - 1)


def generate_sample(
    label: int, subject_id: int, sample_id: int, seed: int = 0, size: int = 32, noise: float = 0.05, dilation: int = 1
) -> Sample:
    """Deterministic synthetic slice for the given class and identifiers."""
    if label not in range(NUM_CLASSES):
        raise DataError(f"invalid class id {label!r}")
    if size < 16:
        raise DataError("size must be >= 16")
    geom = _subject_geometry(seed, subject_id, size)
    r = _rng(seed, _SLICE, subject_id, sample_id)
    tops = band_tops(geom, size, r.uniform(-0.3, 0.3), r.uniform(-1.5, 1.5))

    rows = np.arange(size)[:, None]
    band = (rows >= tops[None, :]) & (rows < tops[None, :] + geom.thickness)

    width = int(r.integers(3, 6))
    margin = max(3, size // 8)
    c0 = int(r.integers(margin, size - margin - width + 1))
    c1 = c0 + width
    # at least half the thickness, so a notch stands out from the band's own rounding steps
    depth = int(r.integers((geom.thickness + 1) // 2, geom.thickness))

    carved = band.copy()
    if label == 1:
        for c in range(c0, c1):
            carved[tops[c] : tops[c] + depth, c] = False
    elif label == 2:
        carved[:, c0:c1] = False

    # dark background with a gentle vertical ramp
    img = geom.background + 0.1 * (rows / size) * np.ones((1, size))
    img = np.where(carved, geom.intensity, img)
    img = img + r.normal(0.0, noise, size=(size, size))
    img = np.clip(img, 0.0, 1.0)
    seg = dilate(band, dilation).astype(np.uint8)
    return Sample(image=img, label=label, seg=seg, subject_id=subject_id, sample_id=sample_id, defect_cols=(c0, c1))


def slice_class(subject_id: int, slice_index: int) -> int:
    """Slices of a subject cycle through the classes (offset per subject).

    Mixing classes within a subject keeps the set balanced and stops the
    subject's band geometry from predicting the class.
    """
    return (subject_id + slice_index) % NUM_CLASSES


def generate_dataset(config: DataConfig) -> list[Sample]:
    config.validate()
    samples = []
    sid = 0
    for subject in range(config.n_subjects):
        for k in range(config.slices_per_subject):
            label = slice_class(subject, k)
            samples.append(
                generate_sample(label, subject, sid, config.seed, config.size, config.noise, config.dilation)
            )
            sid += 1
    return samples


# ----------------------------------------------------------------------------
# splits
# ----------------------------------------------------------------------------


@dataclass
class Splits:
    labeled_train: list[Sample]
    unlabeled_train: list[Sample]
    test: list[Sample]

    def subjects(self, part: str) -> set[int]:
        return {s.subject_id for s in getattr(self, part)}


def _apportion(counts: Sequence[int], fraction: float) -> list[int]:
    """Largest-remainder split of ``fraction * sum(counts)`` across groups."""
    total = round(fraction * sum(counts))
    raw = [fraction * c for c in counts]
    quota = [math.floor(x) for x in raw]
    order = sorted(range(len(counts)), key=lambda i: (-(raw[i] - quota[i]), i))
    for i in order[: total - sum(quota)]:
        quota[i] += 1
    return [min(q, c) for q, c in zip(quota, counts)]


def make_splits(samples: Sequence[Sample], spec: SplitSpec) -> Splits:
    """Subject-disjoint train/test and labeled/unlabeled partition.

    Subjects are stratified by their majority class (ties to the lowest id)
    and each stratum is apportioned with largest remainders, so per-class
    proportions hold within rounding.
    """
    if not 0 < spec.train_fraction < 1 or not 0 < spec.labeled_fraction <= 1:
        raise ConfigError("fractions must satisfy 0 < train < 1 and 0 < labeled <= 1")
    counts_by_subject: dict[int, np.ndarray] = {}
    for s in samples:
        counts_by_subject.setdefault(s.subject_id, np.zeros(NUM_CLASSES, dtype=int))[s.label] += 1
    strata: dict[int, list[int]] = {}
    for subj in sorted(counts_by_subject):
        strata.setdefault(int(np.argmax(counts_by_subject[subj])), []).append(subj)
    keys = sorted(strata)
    if sum(len(v) for v in strata.values()) < 2:
        raise ConfigError("need at least 2 subjects")

    r = _rng(spec.seed, _SPLIT)
    shuffled = {k: [int(x) for x in r.permutation(strata[k])] for k in keys}
    sizes = [len(shuffled[k]) for k in keys]
    n_test = _apportion(sizes, 1.0 - spec.train_fraction)
    n_lab = _apportion([n - t for n, t in zip(sizes, n_test)], spec.labeled_fraction)
    if sum(n_test) < 1 or sum(n_test) == sum(sizes):
        raise ConfigError("train_fraction leaves an empty train or test split")
    if sum(n_lab) < 1:
        raise ConfigError("labeled_fraction leaves no labeled subject")

    test_s, lab_s = set(), set()
    for k, nt, nl in zip(keys, n_test, n_lab):
        test_s.update(shuffled[k][:nt])
        lab_s.update(shuffled[k][nt : nt + nl])

    return Splits(
        labeled_train=[s for s in samples if s.subject_id in lab_s],
        unlabeled_train=[s for s in samples if s.subject_id not in lab_s and s.subject_id not in test_s],
        test=[s for s in samples if s.subject_id in test_s],
    )


# ----------------------------------------------------------------------------
# augmentation and batching
# ----------------------------------------------------------------------------


def _translate(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = a[ys, xs]
    return out


def augment_arrays(
    image: np.ndarray, seg: np.ndarray | None, flip: bool, dy: int, dx: int
) -> tuple[np.ndarray, np.ndarray | None]:
    """Optional horizontal flip, then zero-padded integer translation."""
    if flip:
        image = image[:, ::-1]
        seg = seg[:, ::-1] if seg is not None else None
    image = _translate(np.ascontiguousarray(image), dy, dx)
    if seg is not None:
        seg = _translate(np.ascontiguousarray(seg), dy, dx)
    return image, seg


def draw_augmentation(rng: np.random.Generator, max_shift: int = 2) -> tuple[bool, int, int]:
    flip = bool(rng.random() < 0.5)
    dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    return flip, dy, dx


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    flip, dy, dx = draw_augmentation(rng)
    image, seg = augment_arrays(sample.image, sample.seg, flip, dy, dx)
    return replace(sample, image=image, seg=seg)


@dataclass
class BatchItem:
    """What the trainer may see: label and mask are None when hidden."""

    sample_id: int
    image: np.ndarray
    label: int | None
    seg: np.ndarray | None
    labeled: bool


def trainer_view(sample: Sample, labeled: bool, expose_seg: bool = False) -> BatchItem:
    if labeled:
        return BatchItem(sample.sample_id, sample.image, sample.label, sample.seg, True)
    return BatchItem(sample.sample_id, sample.image, None, sample.seg if expose_seg else None, False)


@dataclass
class _PoolState:
    epoch: int = 0
    pos: int = 0


@dataclass
class BatchSampler:
    """Draws fixed-composition batches from the labeled and unlabeled pools.

    Each pool is walked through a seeded permutation and reshuffled when it
    runs out, so within one pass every member is drawn exactly once. The
    state is two ``(epoch, pos)`` pairs and can be saved and restored.
    """

    labeled: list[Sample]
    unlabeled: list[Sample]
    spec: BatchSpec
    seed: int = 0
    expose_unlabeled_seg: bool = False
    state: dict[str, _PoolState] = field(default_factory=lambda: {"labeled": _PoolState(), "unlabeled": _PoolState()})

    def __post_init__(self) -> None:
        if not self.labeled:
            raise DataError("labeled pool is empty; training cannot proceed")
        if self.spec.unlabeled_per_batch and not self.unlabeled:
            raise DataError("batch spec asks for unlabeled samples but the pool is empty")

    def _order(self, pool: str, epoch: int) -> np.ndarray:
        items = self.labeled if pool == "labeled" else self.unlabeled
        return _rng(self.seed, _SHUFFLE, 0 if pool == "labeled" else 1, epoch).permutation(len(items))

    def _draw(self, pool: str, k: int) -> list[Sample]:
        items = self.labeled if pool == "labeled" else self.unlabeled
        st = self.state[pool]
        out = []
        order = self._order(pool, st.epoch)
        while len(out) < k:
            if st.pos >= len(items):
                st.epoch += 1
                st.pos = 0
                order = self._order(pool, st.epoch)
            out.append(items[order[st.pos]])
            st.pos += 1
        return out

    def next_batch(self) -> list[BatchItem]:
        lab = self._draw("labeled", self.spec.labeled_per_batch)
        unl = self._draw("unlabeled", self.spec.unlabeled_per_batch) if self.spec.unlabeled_per_batch else []
        return [trainer_view(s, True) for s in lab] + [
            trainer_view(s, False, self.expose_unlabeled_seg) for s in unl
        ]

    def get_state(self) -> list[int]:
        return [self.state["labeled"].epoch, self.state["labeled"].pos, self.state["unlabeled"].epoch, self.state["unlabeled"].pos]

    def set_state(self, values: Sequence[int]) -> None:
        le, lp, ue, up = (int(v) for v in values)
        self.state = {"labeled": _PoolState(le, lp), "unlabeled": _PoolState(ue, up)}


def augment_batch(items: Sequence[BatchItem], seed: int, step: int) -> list[BatchItem]:
    """Augment every item with draws derived from ``(seed, step)``."""
    r = _rng(seed, _AUGMENT, step)
    out = []
    for it in items:
        image, seg = augment_arrays(it.image, it.seg, *draw_augmentation(r))
        out.append(replace(it, image=image, seg=seg))
    return out


def stack_images(items: Iterable) -> np.ndarray:
    return np.stack([np.asarray(it.image, dtype=np.float64) for it in items])[:, None]


# ----------------------------------------------------------------------------
# PGM and dataset directories
# ----------------------------------------------------------------------------


def write_pgm(raster: np.ndarray, path: str | Path) -> None:
    """Binary P5 PGM, maxval 255."""
    a = np.asarray(raster, dtype=np.float64)
    if a.ndim != 2:
        raise FormatError("PGM raster must be 2-D")
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("raster values must lie in [0, 1]")
    h, w = a.shape
    payload = np.rint(a * 255.0).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + payload)


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError(f"{path}: truncated header")
        tokens.append(raw[i:j])
        i = j
    if i >= len(raw) or not raw[i : i + 1].isspace():
        raise FormatError(f"{path}: missing header terminator")
    i += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: bad magic {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: non-integer header field") from None
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"{path}: unsupported header {w}x{h} maxval {maxval}")
    payload = raw[i:]
    if len(payload) != w * h:
        raise FormatError(f"{path}: expected {w * h} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def write_dataset(out_dir: str | Path, samples: Sequence[Sample], splits: Splits) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "segs").mkdir(parents=True, exist_ok=True)
    where = {s.sample_id: ("train", 1) for s in splits.labeled_train}
    where.update({s.sample_id: ("train", 0) for s in splits.unlabeled_train})
    where.update({s.sample_id: ("test", 1) for s in splits.test})
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for s in samples:
            split, labeled = where[s.sample_id]
            write_pgm(s.image, out / "images" / f"{s.sample_id}.pgm")
            write_pgm(s.seg, out / "segs" / f"{s.sample_id}.pgm")
            writer.writerow([s.sample_id, s.subject_id, s.label, split, labeled])
    return out


def read_dataset(data_dir: str | Path) -> tuple[list[Sample], Splits]:
    root = Path(data_dir)
    samples, lab, unl, test = [], [], [], []
    with open(root / "manifest.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise FormatError(f"manifest header {header!r} != {MANIFEST_HEADER!r}")
        for row in reader:
            if len(row) != len(MANIFEST_HEADER):
                raise FormatError(f"manifest row {row!r}")
            sid, subj, cls, split, labeled = row
            seg = read_pgm(root / "segs" / f"{sid}.pgm")
            s = Sample(
                image=read_pgm(root / "images" / f"{sid}.pgm"),
                label=int(cls),
                seg=(seg > 0.5).astype(np.uint8),
                subject_id=int(subj),
                sample_id=int(sid),
            )
            samples.append(s)
            if split == "test":
                test.append(s)
            elif split == "train":
                (lab if labeled == "1" else unl).append(s)
            else:
                raise FormatError(f"unknown split {split!r}")
    return samples, Splits(lab, unl, test)
