"""Synthetic datasets, the on-disk folder layout, splits, and few-shot draws.

Two procedural families share one geometry:

* structural: each class is a periodic texture; anomalies are normal images
  with one local defect patch (exact pixel mask).
* semantic: each class is a globally distinct low-frequency prototype over a
  shared micro-texture; anomalies are whole images from non-normal classes.

A third kind, mixed, combines both anomaly types in one test set (defects on
the normal classes plus clean images from held-out classes), which is what a
fused detector has to handle.

Label convention (single source of truth): Sample.label is 1 for normal and
0 for anomalous, everywhere in this package.  Metric code flips it so that
the positive class is "anomalous"; that inversion lives in evaluate.py and
nowhere else.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError
from .rng import STREAM_DATA_TEST, STREAM_DATA_TRAIN, STREAM_FEWSHOT, stream_rng

KINDS = ("structural", "semantic", "mixed", "folder")


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray          # (C, H, W) float64 in [0, 1]
    label: int                 # 1 = normal, 0 = anomalous
    mask: np.ndarray | None    # (H, W) uint8, 1 = defect pixel; defects only
    class_id: int
    split: str                 # train | test


@dataclass
class DefectParams:
    size_range: tuple[int, int] = (6, 12)
    intensity_range: tuple[float, float] = (0.35, 0.6)


@dataclass
class DatasetSpec:
    kind: str = "structural"
    num_classes: int = 4
    normal_class_ids: tuple[int, ...] = (0, 1, 2, 3)
    samples_per_class: int = 200        # train normals per class
    test_normals_per_class: int = 50
    test_anomalies_per_class: int = 50
    image_size: int = 32
    channels: int = 1
    noise: float = 0.04
    defect: DefectParams = field(default_factory=DefectParams)
    seed: int = 0
    root: str | None = None             # folder kind only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind != "folder":
            if self.num_classes < 1 or self.samples_per_class < 1:
                raise ConfigError("need at least one class and one sample per class")
            ids = set(self.normal_class_ids)
            if not ids:
                raise ConfigError("normal_class_ids must be nonempty")
            if not ids <= set(range(self.num_classes)):
                raise ConfigError(f"normal_class_ids {sorted(ids)} outside "
                                  f"0..{self.num_classes - 1}")


@dataclass
class LabeledDataset:
    spec: DatasetSpec
    samples: list[Sample]

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    @property
    def class_ids(self) -> list[int]:
        return sorted({s.class_id for s in self.samples})


@dataclass
class RosterEntry:
    """One train/test unit: either a single class's run or the joint run."""

    name: str
    normal_ids: tuple[int, ...]
    train: list[Sample]
    test: list[Sample]          # labels already reflect this entry's normality


# -- procedural textures ------------------------------------------------------


def _grids(size: int):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return y, x


def _texture(size: int, angle: float, freq: float, phase: float,
             amp: float) -> np.ndarray:
    y, x = _grids(size)
    t = (math.cos(angle) * x + math.sin(angle) * y) * (freq / size)
    return amp * np.sin(2.0 * math.pi * t + phase)


def _structural_base(spec: DatasetSpec, class_id: int,
                     phase_jitter: float = 0.0) -> np.ndarray:
    c, n = class_id, spec.num_classes
    angle = math.pi * c / n
    img = 0.5 + _texture(spec.image_size, angle, 3.0 + (c % 3), 0.7 * c + phase_jitter, 0.22)
    img += _texture(spec.image_size, angle + math.pi / 2, 5.0 + (c % 2), 1.3 * c, 0.12)
    return img


def _semantic_base(spec: DatasetSpec, class_id: int) -> np.ndarray:
    c, n = class_id, spec.num_classes
    angle = math.pi * (c + 0.5) / n
    proto = 0.5 + _texture(spec.image_size, angle, 1.0 + (c % 2), 0.9 * c, 0.30)
    proto += _texture(spec.image_size, math.pi / 4, 6.0, 0.0, 0.10)  # shared micro-texture
    return proto


def _finish(img: np.ndarray, rng: np.random.Generator, noise: float,
            channels: int) -> np.ndarray:
    if noise > 0:
        img = img + rng.uniform(-noise, noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[None, :, :], channels, axis=0)


def stamp_defect(img: np.ndarray, spec: DatasetSpec,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, dict]:
    """Stamp one rectangular or elliptical intensity defect; exact mask.

    Returns (image, mask, info) where info records shape and geometry so the
    mask can be checked against the analytic patch area.
    """
    size = spec.image_size
    lo, hi = spec.defect.size_range
    if lo < 1 or hi < lo:
        raise DataError(f"degenerate defect size range {spec.defect.size_range}")
    if hi > size:
        raise DataError("defect larger than image")
    w = int(rng.integers(lo, hi + 1))
    h = int(rng.integers(lo, hi + 1))
    y0 = int(rng.integers(0, size - h + 1))
    x0 = int(rng.integers(0, size - w + 1))
    mask = np.zeros((size, size), dtype=np.uint8)
    shape = "rect" if rng.random() < 0.5 else "ellipse"
    if shape == "rect":
        mask[y0:y0 + h, x0:x0 + w] = 1
    else:
        yy, xx = _grids(size)
        cy, cx = y0 + (h - 1) / 2.0, x0 + (w - 1) / 2.0
        ry, rx = max(h / 2.0, 0.5), max(w / 2.0, 0.5)
        mask[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = 1
    mag = rng.uniform(*spec.defect.intensity_range)
    region = mask.astype(bool)
    # push away from the local mean so clipping cannot hide the defect
    sign = -1.0 if img[:, region].mean() > 0.5 else 1.0
    out = img.copy()
    out[:, region] = np.clip(out[:, region] + sign * mag, 0.0, 1.0)
    info = {"shape": shape, "w": w, "h": h, "x0": x0, "y0": y0,
            "mag": mag, "sign": sign}
    return out, mask, info


def _make_sample(tag: str, img: np.ndarray, label: int, mask, class_id: int,
                 split: str, idx: int) -> Sample:
    return Sample(f"{tag}_c{class_id}_{split}_{idx:04d}", img, label, mask,
                  class_id, split)


def gen_structural(spec: DatasetSpec) -> LabeledDataset:
    if spec.kind != "structural":
        raise ConfigError("spec.kind must be 'structural'")
    samples: list[Sample] = []
    for c in range(spec.num_classes):
        tr = stream_rng(spec.seed, STREAM_DATA_TRAIN + c)
        for i in range(spec.samples_per_class):
            base = _structural_base(spec, c, phase_jitter=tr.uniform(-0.3, 0.3))
            samples.append(_make_sample("st", _finish(base, tr, spec.noise, spec.channels),
                                        1, None, c, "train", i))
        te = stream_rng(spec.seed, STREAM_DATA_TEST + c)
        for i in range(spec.test_normals_per_class):
            base = _structural_base(spec, c, phase_jitter=te.uniform(-0.3, 0.3))
            samples.append(_make_sample("st", _finish(base, te, spec.noise, spec.channels),
                                        1, None, c, "test", i))
        for i in range(spec.test_anomalies_per_class):
            base = _structural_base(spec, c, phase_jitter=te.uniform(-0.3, 0.3))
            img = _finish(base, te, spec.noise, spec.channels)
            img, mask, _ = stamp_defect(img, spec, te)
            samples.append(_make_sample("st", img, 0, mask, c, "test",
                                        spec.test_normals_per_class + i))
    return LabeledDataset(spec, samples)


def gen_semantic(spec: DatasetSpec) -> LabeledDataset:
    if spec.kind != "semantic":
        raise ConfigError("spec.kind must be 'semantic'")
    if spec.num_classes < 2:
        raise DataError("semantic datasets need at least 2 classes")
    if set(spec.normal_class_ids) == set(range(spec.num_classes)):
        warnings.warn("all classes marked normal: anomalous test set will be empty")
    samples: list[Sample] = []
    for c in range(spec.num_classes):
        tr = stream_rng(spec.seed, STREAM_DATA_TRAIN + c)
        for i in range(spec.samples_per_class):
            img = _finish(_semantic_base(spec, c), tr, spec.noise, spec.channels)
            samples.append(_make_sample("se", img, 1, None, c, "train", i))
        te = stream_rng(spec.seed, STREAM_DATA_TEST + c)
        normal = c in spec.normal_class_ids
        for i in range(spec.test_normals_per_class):
            img = _finish(_semantic_base(spec, c), te, spec.noise, spec.channels)
            samples.append(_make_sample("se", img, 1 if normal else 0, None, c,
                                        "test", i))
    return LabeledDataset(spec, samples)


def gen_mixed(spec: DatasetSpec) -> LabeledDataset:
    """Structural textures with both defect and held-out-class anomalies."""
    if spec.kind != "mixed":
        raise ConfigError("spec.kind must be 'mixed'")
    outliers = [c for c in range(spec.num_classes) if c not in spec.normal_class_ids]
    if not outliers:
        raise DataError("mixed datasets need at least one non-normal class")
    half = spec.test_anomalies_per_class // 2
    samples: list[Sample] = []
    for c in spec.normal_class_ids:
        tr = stream_rng(spec.seed, STREAM_DATA_TRAIN + c)
        for i in range(spec.samples_per_class):
            base = _structural_base(spec, c, phase_jitter=tr.uniform(-0.3, 0.3))
            samples.append(_make_sample("mx", _finish(base, tr, spec.noise, spec.channels),
                                        1, None, c, "train", i))
        te = stream_rng(spec.seed, STREAM_DATA_TEST + c)
        for i in range(spec.test_normals_per_class):
            base = _structural_base(spec, c, phase_jitter=te.uniform(-0.3, 0.3))
            samples.append(_make_sample("mx", _finish(base, te, spec.noise, spec.channels),
                                        1, None, c, "test", i))
        for i in range(half):
            base = _structural_base(spec, c, phase_jitter=te.uniform(-0.3, 0.3))
            img = _finish(base, te, spec.noise, spec.channels)
            img, mask, _ = stamp_defect(img, spec, te)
            samples.append(_make_sample("mx", img, 0, mask, c, "test",
                                        spec.test_normals_per_class + i))
    for c in outliers:
        te = stream_rng(spec.seed, STREAM_DATA_TEST + c)
        for i in range(half):
            base = _structural_base(spec, c, phase_jitter=te.uniform(-0.3, 0.3))
            samples.append(_make_sample("mx", _finish(base, te, spec.noise, spec.channels),
                                        0, None, c, "test", i))
    return LabeledDataset(spec, samples)


def generate(spec: DatasetSpec) -> LabeledDataset:
    if spec.kind == "structural":
        return gen_structural(spec)
    if spec.kind == "semantic":
        return gen_semantic(spec)
    if spec.kind == "mixed":
        return gen_mixed(spec)
    if spec.kind == "folder":
        if not spec.root:
            raise ConfigError("folder datasets need spec.root")
        return load_folder(spec.root, image_size=spec.image_size, spec=spec)
    raise ConfigError(f"unknown dataset kind {spec.kind!r}")


# -- splits and few-shot ------------------------------------------------------


def _intrinsically_anomalous(sample: Sample, kind: str) -> bool:
    """Anomalous regardless of which classes an entry calls normal.

    Structural/folder data trusts the generation/folder label (defects stay
    defects even in their own class's entry); for semantic and mixed data
    only masked defect samples are intrinsic - a clean image's status is
    decided by class membership at split time.
    """
    if kind in ("structural", "folder"):
        return sample.label == 0
    return sample.mask is not None


def make_splits(dataset: LabeledDataset, mode: str,
                normal_ids=None) -> list[RosterEntry]:
    """Build the experiment roster.

    single_class: one entry per class that has training normals; that class
    is normal, and for semantic-style data every other class's test images
    act as anomalies.  multi_class: one entry; normal_ids classes are
    normal, everything else (plus any defect sample) is anomalous.
    """
    kind = dataset.spec.kind

    def entry_label(s: Sample, ids: set[int]) -> int:
        if _intrinsically_anomalous(s, kind) or s.class_id not in ids:
            return 0
        return 1

    if mode == "single_class":
        entries = []
        cross_class = kind in ("semantic", "mixed")
        train_classes = sorted({s.class_id for s in dataset.split("train")
                                if s.label == 1})
        if not train_classes:
            raise DataError("dataset has no training normals")
        for c in train_classes:
            own = {c}
            train = [s for s in dataset.split("train")
                     if s.class_id == c and s.label == 1]
            test = [replace(s, label=entry_label(s, own))
                    for s in dataset.split("test")
                    if s.class_id == c or cross_class]
            entries.append(RosterEntry(f"class_{c}", (c,), train, test))
        return entries
    if mode == "multi_class":
        ids = set(normal_ids if normal_ids is not None
                  else dataset.spec.normal_class_ids)
        unknown = ids - set(dataset.class_ids)
        if unknown:
            raise DataError(f"unknown class ids {sorted(unknown)}")
        if not ids:
            raise DataError("normal_ids must be nonempty")
        train = [s for s in dataset.split("train")
                 if s.class_id in ids and s.label == 1]
        test = [replace(s, label=entry_label(s, ids))
                for s in dataset.split("test")]
        if not train:
            raise DataError("no training normals for the requested classes")
        if all(s.label == 1 for s in test):
            raise DataError("roster has no anomalous test samples")
        return [RosterEntry("all", tuple(sorted(ids)), train, test)]
    raise ConfigError(f"unknown split mode {mode!r}")


def few_shot_subsample(train: list[Sample], shots: int, seed: int) -> list[Sample]:
    """Pick exactly `shots` normal samples per class, deterministically.

    Draws are nested: the k-shot subset is a prefix of one fixed per-class
    permutation, so growing k only adds samples.  That keeps shot sweeps
    comparable (no selection luck between adjacent shot counts).
    """
    if shots < 1:
        raise DataError("shots must be >= 1")
    by_class: dict[int, list[Sample]] = {}
    for s in train:
        if s.label != 1:
            raise DataError("few-shot subsampling expects a normal-only train set")
        by_class.setdefault(s.class_id, []).append(s)
    out: list[Sample] = []
    for c in sorted(by_class):
        pool = by_class[c]
        if shots > len(pool):
            raise DataError(f"class {c}: requested {shots} shots, have {len(pool)}")
        rng = stream_rng(seed, STREAM_FEWSHOT, counter=c)
        picked = rng.permutation(len(pool))[:shots]
        out.extend(pool[int(i)] for i in sorted(picked))
    return out


# -- on-disk layout -----------------------------------------------------------


def _read_image(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    return arr[None, :, :]


def _resize_image(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape[1] == size and arr.shape[2] == size:
        return arr
    im = Image.fromarray((arr[0] * 255.0).round().astype(np.uint8), mode="L")
    im = im.resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.float64)[None] / 255.0


def _resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask
    im = Image.fromarray((mask * 255).astype(np.uint8), mode="L")
    im = im.resize((size, size), Image.NEAREST)
    return (np.asarray(im) > 127).astype(np.uint8)


def load_folder(root: str | os.PathLike, image_size: int | None = None,
                spec: DatasetSpec | None = None) -> LabeledDataset:
    """Load the industrial folder convention.

    <category>/train/good/*, <category>/test/<type>/*, and
    <category>/ground_truth/<type>/<stem>_mask.* for anomalous images.
    `root` may be one category or a directory of categories (one class each).
    Images load as grayscale; masks pair by filename stem.
    """
    root = os.fspath(root)
    if not os.path.isdir(root):
        raise DataError(f"dataset root {root!r} does not exist")
    if os.path.isdir(os.path.join(root, "train")):
        categories = [("", 0)]
    else:
        names = sorted(d for d in os.listdir(root)
                       if os.path.isdir(os.path.join(root, d, "train")))
        if not names:
            raise DataError(f"no categories with a train/ folder under {root!r}")
        categories = [(n, i) for i, n in enumerate(names)]

    def finish(arr: np.ndarray) -> np.ndarray:
        return _resize_image(arr, image_size) if image_size else arr

    samples: list[Sample] = []
    for cat, cid in categories:
        cat_dir = os.path.join(root, cat) if cat else root
        good = os.path.join(cat_dir, "train", "good")
        if not os.path.isdir(good):
            raise DataError(f"missing {good!r}")
        for i, fname in enumerate(sorted(os.listdir(good))):
            img = finish(_read_image(os.path.join(good, fname)))
            samples.append(Sample(f"{cat or 'data'}_train_{fname}", img, 1, None,
                                  cid, "train"))
        test_dir = os.path.join(cat_dir, "test")
        if not os.path.isdir(test_dir):
            continue
        for dtype in sorted(os.listdir(test_dir)):
            sub = os.path.join(test_dir, dtype)
            if not os.path.isdir(sub):
                continue
            normal = dtype == "good"
            for fname in sorted(os.listdir(sub)):
                img = finish(_read_image(os.path.join(sub, fname)))
                mask = None
                if not normal:
                    mask = _find_mask(cat_dir, dtype, fname)
                    if mask is None:
                        warnings.warn(f"no mask for {cat}/{dtype}/{fname}; kept without")
                    elif image_size:
                        mask = _resize_mask(mask, image_size)
                samples.append(Sample(f"{cat or 'data'}_test_{dtype}_{fname}", img,
                                      1 if normal else 0, mask, cid, "test"))
    return LabeledDataset(spec or DatasetSpec(kind="folder", root=root), samples)


def _find_mask(cat_dir: str, dtype: str, fname: str) -> np.ndarray | None:
    stem = os.path.splitext(fname)[0]
    gt = os.path.join(cat_dir, "ground_truth", dtype)
    if not os.path.isdir(gt):
        return None
    for cand in sorted(os.listdir(gt)):
        cstem = os.path.splitext(cand)[0]
        if cstem == stem or cstem == f"{stem}_mask":
            with Image.open(os.path.join(gt, cand)) as im:
                return (np.asarray(im.convert("L")) > 127).astype(np.uint8)
    return None


def dump_dataset(dataset: LabeledDataset, root: str | os.PathLike) -> None:
    """Write PNG images + masks in the folder convention, plus a manifest CSV.

    Images quantize to 8-bit grayscale (lossless once quantized).
    """
    root = os.fspath(root)
    rows = []
    for s in dataset.samples:
        cat = f"class{s.class_id}"
        if s.split == "train":
            rel = os.path.join(cat, "train", "good", f"{s.sample_id}.png")
        elif s.label == 1:
            rel = os.path.join(cat, "test", "good", f"{s.sample_id}.png")
        elif s.mask is not None:
            rel = os.path.join(cat, "test", "defect", f"{s.sample_id}.png")
        else:
            rel = os.path.join(cat, "test", "outlier", f"{s.sample_id}.png")
        path = os.path.join(root, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        gray = (s.image[0] * 255.0).round().astype(np.uint8)
        Image.fromarray(gray, mode="L").save(path)
        mask_rel = ""
        if s.mask is not None:
            mask_rel = os.path.join(cat, "ground_truth", "defect",
                                    f"{s.sample_id}_mask.png")
            mpath = os.path.join(root, mask_rel)
            os.makedirs(os.path.dirname(mpath), exist_ok=True)
            Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(mpath)
        rows.append([rel, s.label, s.class_id, s.split, mask_rel])
    with open(os.path.join(root, "manifest.csv"), "w", newline="",
              encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "class_id", "split", "mask_path"])
        writer.writerows(rows)
