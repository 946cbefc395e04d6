"""Dataset tooling: directory index, stratified split, imbalance entropy, size stats, synthetic set.

Dataset layout on disk is ``root/<class_name>/<image files>``.  Split lists are
text files with one ``relative/path<TAB>split`` line per record, sorted by path.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = frozenset({".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"})
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    path: str  # relative to the dataset root, '/'-separated
    label: int
    split: str = "train"


@dataclass
class DatasetIndex:
    root: Path
    class_names: list
    records: list
    skipped: list = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def counts(self, split: str | None = None) -> list[int]:
        c = Counter(r.label for r in self.records if split is None or r.split == split)
        return [c.get(i, 0) for i in range(self.num_classes)]

    def subset(self, split: str) -> list[Record]:
        return [r for r in self.records if r.split == split]

    def split_lines(self) -> list[str]:
        return [f"{r.path}\t{r.split}" for r in sorted(self.records, key=lambda r: r.path)]

    def write_split_file(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.split_lines()), encoding="utf-8")


def _read_size(path: Path) -> tuple[int, int]:
    """(height, width) from the image header; pixel data is not decoded."""
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def scan_image_directory(root, split: str = "train", check_readable: bool = True) -> DatasetIndex:
    """Index ``root/<class>/<image>``; classes and files in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root}: no class directories")
    records, skipped = [], []
    for label, d in enumerate(class_dirs):
        for f in sorted(d.iterdir()):
            if not f.is_file() or f.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            rel = f.relative_to(root).as_posix()
            if check_readable:
                try:
                    _read_size(f)
                except Exception as exc:  # any decode failure means skip
                    skipped.append((rel, str(exc)))
                    continue
            records.append(Record(rel, label, split))
    if skipped:
        log.warning("%s: skipped %d unreadable image(s)", root, len(skipped))
    if not records:
        raise DatasetError(f"{root}: no readable images")
    return DatasetIndex(root, [d.name for d in class_dirs], records, skipped)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(idx: DatasetIndex, ratio: float = 0.7, seed: int = 0, out=None) -> DatasetIndex:
    """Per class: seeded shuffle, first ``round(ratio * count)`` to train, the rest to val.

    Records already marked ``test`` are left alone.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie strictly between 0 and 1, got {ratio}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[Record]] = {}
    for r in idx.records:
        if r.split != "test":
            by_class.setdefault(r.label, []).append(r)
    new = [r for r in idx.records if r.split == "test"]
    for label in sorted(by_class):
        recs = sorted(by_class[label], key=lambda r: r.path)
        if len(recs) < 2:
            log.warning("class %s has %d image(s); all go to train", idx.class_names[label], len(recs))
            new += [replace(r, split="train") for r in recs]
            continue
        perm = rng.permutation(len(recs))
        n_train = _round_half_up(ratio * len(recs))
        new += [replace(recs[j], split="train" if i < n_train else "val") for i, j in enumerate(perm)]
    new.sort(key=lambda r: r.path)
    result = DatasetIndex(idx.root, list(idx.class_names), new, list(idx.skipped))
    if out is not None:
        result.write_split_file(out)
    return result


def load_split_file(root, split_file) -> DatasetIndex:
    """Rebuild an index from a dataset root and a split list written by :func:`stratified_split`."""
    root = Path(root)
    rows = []
    for n, line in enumerate(Path(split_file).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            path, split = line.split("\t")
        except ValueError:
            raise DatasetError(f"{split_file}:{n}: expected 'path<TAB>split'") from None
        if split not in SPLITS:
            raise DatasetError(f"{split_file}:{n}: unknown split {split!r}")
        rows.append((path, split))
    classes = sorted({p.split("/")[0] for p, _ in rows})
    label_of = {c: i for i, c in enumerate(classes)}
    records = []
    for path, split in rows:
        if not (root / path).is_file():
            raise FileNotFoundError(f"{root / path} listed in {split_file} is missing")
        records.append(Record(path, label_of[path.split("/")[0]], split))
    return DatasetIndex(root, classes, records)


# ---------------------------------------------------------------- analysis
def normalized_entropy(counts) -> float:
    """Shannon entropy (base 2) of the class distribution divided by ``log2(n)``.

    Evaluated as ``1 - KL(p || uniform) / log2(n)`` with the ratios ``n*c_i/total``
    formed from integers, so a balanced distribution gives exactly 1.0.
    """
    counts = [int(c) for c in counts]
    n = len(counts)
    if n < 2:
        raise ValueError(f"normalized entropy needs at least 2 classes, got {n}")
    if min(counts) < 1:
        raise ValueError("every class count must be at least 1")
    total = sum(counts)
    kl = math.fsum(c / total * math.log2(n * c / total) for c in counts)
    h = 1.0 - kl / math.log2(n)
    h = min(1.0, max(0.0, h))
    assert 0.0 <= h <= 1.0
    return h


@dataclass
class SizeStats:
    count: int
    max_h: int
    min_h: int
    max_w: int
    min_w: int
    mean_h: float
    std_h: float
    mean_w: float
    std_w: float
    failed: list = field(default_factory=list)

    def mean_std(self) -> str:
        """Table-style ``mean±std×mean±std`` string (height first)."""

        def m(v):
            return f"{v:.2f}".rstrip("0").rstrip(".")

        return f"{m(self.mean_h)}±{self.std_h:.2f}×{m(self.mean_w)}±{self.std_w:.2f}"


def image_size_stats(idx: DatasetIndex) -> SizeStats:
    """Height/width extremes plus mean and population std, from image headers."""
    hs, ws, failed = [], [], []
    for r in idx.records:
        try:
            h, w = _read_size(idx.root / r.path)
        except Exception as exc:
            failed.append((r.path, str(exc)))
            continue
        hs.append(h)
        ws.append(w)
    if not hs:
        raise DatasetError("no decodable images to measure")
    h = np.asarray(hs, dtype=np.float64)
    w = np.asarray(ws, dtype=np.float64)
    return SizeStats(len(hs), max(hs), min(hs), max(ws), min(ws), float(h.mean()), float(h.std()), float(w.mean()), float(w.std()), failed)


# ------------------------------------------------------------------ pixels
def load_images(idx: DatasetIndex, split: str, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Decode one split to uint8 (n, 3, H, W) plus labels; resizes when extents differ."""
    recs = idx.subset(split)
    H, W = size
    out = np.empty((len(recs), 3, H, W), dtype=np.uint8)
    for i, r in enumerate(recs):
        with Image.open(idx.root / r.path) as im:
            im = im.convert("RGB")
            if im.size != (W, H):
                im = im.resize((W, H), Image.BILINEAR)
            out[i] = np.asarray(im).transpose(2, 0, 1)
    return out, np.array([r.label for r in recs], dtype=np.int64)


def normalize(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 pixels to roughly zero-mean, unit-scale floats."""
    return ((images.astype(dtype) / 255.0 - 0.5) / 0.25).astype(dtype)


# --------------------------------------------------------------- synthetic
def synth_images(classes: int, per_class: int, size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Oriented gratings, one texture family per class.

    Neighboring classes differ by a small step in frequency and orientation;
    per-image phase, contrast, tint and pixel noise keep the task from being
    separable by template matching alone.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    images = np.empty((classes * per_class, 3, size, size), dtype=np.uint8)
    labels = np.repeat(np.arange(classes), per_class)
    for c in range(classes):
        freq = 3.0 + 0.6 * c
        theta = 0.35 + 0.22 * c
        phase0 = 1.3 * c
        for j in range(per_class):
            f = freq * (1.0 + rng.uniform(-0.04, 0.04))
            th = theta + rng.uniform(-0.05, 0.05)
            ph = phase0 + rng.uniform(-1.2, 1.2)
            u = xx * math.cos(th) + yy * math.sin(th)
            wave = np.sin(2.0 * math.pi * f * u + ph)
            contrast = rng.uniform(0.5, 0.9)
            tint = rng.uniform(0.8, 1.2, size=3)
            base = 0.5 + 0.5 * contrast * wave[None] * tint[:, None, None]
            img = base + rng.normal(0.0, 0.18, size=(3, size, size))
            images[c * per_class + j] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return images, labels


def synth_dataset_generate(classes: int, per_class: int, size: int, seed: int, out) -> DatasetIndex:
    """Write the synthetic set as PNGs under ``out/class_XX/`` and index it."""
    if size % 32:
        raise ValueError(f"image size {size} must be divisible by 32")
    if classes < 2 or per_class < 1:
        raise ValueError("need at least 2 classes and 1 image per class")
    out = Path(out)
    images, labels = synth_images(classes, per_class, size, seed)
    width = max(2, len(str(classes - 1)))
    try:
        for i, (img, lab) in enumerate(zip(images, labels)):
            d = out / f"class_{lab:0{width}d}"
            d.mkdir(parents=True, exist_ok=True)
            Image.fromarray(img.transpose(1, 2, 0)).save(d / f"img_{i % per_class:04d}.png", optimize=False)
    except OSError as exc:
        raise OSError(f"cannot write synthetic dataset under {out}: {exc}") from exc
    return scan_image_directory(out)


def nearest_centroid_accuracy(images: np.ndarray, labels: np.ndarray, train_frac: float = 0.5, seed: int = 0) -> float:
    """Held-out accuracy of a nearest-class-mean classifier on raw pixels."""
    rng = np.random.default_rng(seed)
    x = images.reshape(len(images), -1).astype(np.float64)
    tr, te = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = max(1, int(len(idx) * train_frac))
        tr += list(idx[:k])
        te += list(idx[k:])
    classes = np.unique(labels)
    cents = np.stack([x[[i for i in tr if labels[i] == c]].mean(axis=0) for c in classes])
    d = ((x[te][:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float(np.mean(classes[d.argmin(axis=1)] == labels[te]))
