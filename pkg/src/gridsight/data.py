"""YOLO-format dataset I/O, grid target encoding and a synthetic shapes generator.

Directory layout::

    root/classes.txt            one class name per line
    root/images/<split>/*.ppm   (or .png when Pillow is installed)
    root/labels/<split>/*.txt   "class_id cx cy w h" per line, normalized
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SHAPE_NAMES = ("disk", "square", "triangle", "ring", "cross")
IMAGE_SUFFIXES = (".ppm", ".png")


class DatasetError(ValueError):
    """Malformed dataset content; the message carries file:line when known."""


@dataclass(frozen=True)
class Annotation:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float


@dataclass
class Sample:
    image: np.ndarray  # float32, 3 x H x W, values in [0, 1]
    annotations: list[Annotation]
    id: str


@dataclass
class Dataset:
    samples: list[Sample]
    class_names: list[str]
    missing_labels: int = 0
    _target_cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def targets_for(self, index: int, grid_sizes: Sequence[int], B: int) -> list[tuple[np.ndarray, np.ndarray]]:
        key = (index, tuple(grid_sizes), B)
        hit = self._target_cache.get(key)
        if hit is None:
            anns = self.samples[index].annotations
            hit = [encode_targets(anns, S, B, self.num_classes)[:2] for S in grid_sizes]
            self._target_cache[key] = hit
        return hit

    def dropped_per_scale(self, grid_sizes: Sequence[int], B: int = 1) -> list[int]:
        return [sum(encode_targets(s.annotations, S, B, self.num_classes)[2] for s in self.samples) for S in grid_sizes]


# ------------------------------------------------------------------ PPM codec


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an H x W x 3 uint8 array as binary P6 with maxval 255."""
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm needs an H x W x 3 uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def _ppm_tokens(buf: bytes, count: int, pos: int) -> tuple[list[int], int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError("truncated PPM header")
        out.append(int(buf[start:pos]))
    return out, pos + 1


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P6 file into an H x W x 3 uint8 array."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM (P6) file")
    try:
        (w, h, maxval), pos = _ppm_tokens(buf, 3, 2)
    except ValueError as e:
        raise DatasetError(f"{path}: bad PPM header ({e})") from None
    if maxval != 255:
        raise DatasetError(f"{path}: only maxval 255 is supported, got {maxval}")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos) if len(buf) - pos >= w * h * 3 else None
    if data is None:
        raise DatasetError(f"{path}: truncated PPM payload")
    return data.reshape(h, w, 3).copy()


def read_image(path: str | os.PathLike, allow_png: bool = True) -> np.ndarray:
    """H x W x 3 uint8 image from PPM, or PNG when Pillow is available."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        return read_ppm(path)
    if suffix == ".png" and allow_png:
        try:
            from PIL import Image
        except ImportError:  # pragma: no cover - optional codec
            raise DatasetError(f"{path}: PNG support needs Pillow") from None
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    raise DatasetError(f"{path}: unsupported image format {suffix!r}")


def to_chw(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32) / np.float32(255.0)


def to_hwc_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour stretch of a C x H x W image to C x size x size."""
    c, h, w = image.shape
    if (h, w) == (size, size):
        return image
    rows = np.minimum((np.arange(size) * h) // size, h - 1)
    cols = np.minimum((np.arange(size) * w) // size, w - 1)
    return image[:, rows][:, :, cols]


# -------------------------------------------------------------------- labels


def parse_label_line(line: str, num_classes: int | None, where: str) -> Annotation:
    fields = line.split(" ")
    if len(fields) != 5:
        raise DatasetError(f"{where}: expected 5 space-separated fields, got {len(fields)}")
    try:
        cid = int(fields[0])
    except ValueError:
        raise DatasetError(f"{where}: class id {fields[0]!r} is not an integer") from None
    if cid < 0 or (num_classes is not None and cid >= num_classes):
        raise DatasetError(f"{where}: class id {cid} outside [0, {num_classes})")
    vals = []
    for name, tok in zip(("cx", "cy", "w", "h"), fields[1:]):
        try:
            v = float(tok)
        except ValueError:
            raise DatasetError(f"{where}: {name} {tok!r} is not a decimal number") from None
        if not np.isfinite(v) or not 0.0 <= v <= 1.0:
            raise DatasetError(f"{where}: {name}={tok} outside [0, 1]")
        vals.append(v)
    if vals[2] <= 0 or vals[3] <= 0:
        raise DatasetError(f"{where}: box width and height must be positive")
    return Annotation(cid, *vals)


def read_labels(path: str | os.PathLike, num_classes: int | None = None) -> list[Annotation]:
    text = Path(path).read_text(encoding="utf-8")
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        out.append(parse_label_line(line.rstrip("\r"), num_classes, f"{path}:{lineno}"))
    return out


def format_labels(annotations: Sequence[Annotation]) -> str:
    return "".join(f"{a.class_id} {a.cx:.6f} {a.cy:.6f} {a.w:.6f} {a.h:.6f}\n" for a in annotations)


def read_classes(root: str | os.PathLike) -> list[str]:
    path = Path(root) / "classes.txt"
    if not path.exists():
        raise DatasetError(f"{path}: missing classes.txt")
    return [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


def load_dataset(root: str | os.PathLike, split: str = "train", num_classes: int | None = None,
                 size: int | None = None, allow_png: bool = True) -> Dataset:
    """Load one split; samples sorted by filename, images resized to ``size``."""
    root = Path(root)
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
    img_dir = root / "images" / split
    if not img_dir.is_dir():
        raise DatasetError(f"{img_dir}: image directory does not exist")
    names = read_classes(root)
    if num_classes is None:
        num_classes = len(names)
    elif num_classes != len(names):
        raise DatasetError(f"{root / 'classes.txt'} lists {len(names)} classes, expected {num_classes}")
    lbl_dir = root / "labels" / split
    samples = []
    missing = 0
    for path in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        image = to_chw(read_image(path, allow_png))
        if size is not None:
            image = resize_image(image, size)
        lbl = lbl_dir / (path.stem + ".txt")
        if lbl.exists():
            anns = read_labels(lbl, num_classes)
        else:
            missing += 1
            anns = []
        samples.append(Sample(image, anns, path.stem))
    if missing:
        logger.warning("%s: %d image(s) without label file treated as background", img_dir, missing)
    return Dataset(samples, names, missing)


def save_dataset(root: str | os.PathLike, split: str, dataset: Dataset) -> None:
    root = Path(root)
    (root / "images" / split).mkdir(parents=True, exist_ok=True)
    (root / "labels" / split).mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("".join(n + "\n" for n in dataset.class_names), encoding="utf-8")
    for s in dataset.samples:
        write_ppm(root / "images" / split / f"{s.id}.ppm", to_hwc_uint8(s.image))
        (root / "labels" / split / f"{s.id}.txt").write_text(format_labels(s.annotations), encoding="utf-8")


# ---------------------------------------------------------- target encoding


def encode_targets(annotations: Sequence[Annotation], S: int, B: int, C: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Encode boxes onto an S x S x (B*5+C) grid.

    The object in cell (i, j) = (floor(cy*S), floor(cx*S)) is written to
    predictor slot 0 as (x offset, y offset, w, h, 1) plus a one-hot class.
    One object per cell: on collision the larger box wins.  Returns
    ``(target, object_mask, dropped)``.
    """
    target = np.zeros((S, S, B * 5 + C), dtype=np.float64)
    mask = np.zeros((S, S), dtype=bool)
    owner: dict[tuple[int, int], Annotation] = {}
    dropped = 0
    for a in annotations:
        i = min(int(np.floor(a.cy * S)), S - 1)
        j = min(int(np.floor(a.cx * S)), S - 1)
        prev = owner.get((i, j))
        if prev is not None:
            dropped += 1
            if a.w * a.h <= prev.w * prev.h:
                continue
        owner[(i, j)] = a
    for (i, j), a in owner.items():
        cell = target[i, j]
        cell[:] = 0.0
        cell[0] = a.cx * S - j
        cell[1] = a.cy * S - i
        cell[2] = a.w
        cell[3] = a.h
        cell[4] = 1.0
        cell[B * 5 + a.class_id] = 1.0
        mask[i, j] = True
    return target, mask, dropped


# --------------------------------------------------------- synthetic shapes


def glyph_mask(kind: int, s: int) -> np.ndarray:
    """Boolean s x s mask of a glyph (0 disk, 1 square, 2 triangle, 3 ring, 4 cross)."""
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    c = s / 2.0
    r2 = (xx - c) ** 2 + (yy - c) ** 2
    if kind == 0:
        return r2 <= c * c
    if kind == 1:
        return np.ones((s, s), dtype=bool)
    if kind == 2:
        return np.abs(xx - c) <= yy / 2.0
    if kind == 3:
        t = max(2.0, s / 5.0)
        return (r2 <= c * c) & (r2 >= (c - t) ** 2)
    if kind == 4:
        t = max(2, s // 3)
        lo = (s - t) // 2
        m = np.zeros((s, s), dtype=bool)
        m[lo : lo + t, :] = True
        m[:, lo : lo + t] = True
        return m
    raise ValueError(f"unknown glyph kind {kind}")


def render_sample(rng: np.random.Generator, size: int, num_classes: int) -> tuple[np.ndarray, list[Annotation]]:
    """One H x W x 3 uint8 image (uniform noise + 1-3 glyphs) and its exact boxes."""
    img = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    n_glyphs = int(rng.integers(1, 4))
    smin, smax = max(12, size // 10), max(13, size // 3)
    taken: list[tuple[int, int, int, int]] = []
    anns = []
    for _ in range(n_glyphs):
        kind = int(rng.integers(0, num_classes))
        s = int(rng.integers(smin, smax + 1))
        color = rng.integers(0, 256, size=3, dtype=np.uint8)
        for _attempt in range(50):
            x0 = int(rng.integers(0, size - s + 1))
            y0 = int(rng.integers(0, size - s + 1))
            box = (x0 - 2, y0 - 2, x0 + s + 2, y0 + s + 2)
            if all(box[2] <= t[0] or t[2] <= box[0] or box[3] <= t[1] or t[3] <= box[1] for t in taken):
                break
        else:
            continue
        m = glyph_mask(kind, s)
        img[y0 : y0 + s, x0 : x0 + s][m] = color
        taken.append((x0, y0, x0 + s, y0 + s))
        ys, xs = np.nonzero(m)
        bx0, bx1 = x0 + xs.min(), x0 + xs.max() + 1
        by0, by1 = y0 + ys.min(), y0 + ys.max() + 1
        anns.append(Annotation(kind, (bx0 + bx1) / 2 / size, (by0 + by1) / 2 / size, (bx1 - bx0) / size, (by1 - by0) / size))
    return img, anns


def synth_shapes(out: str | os.PathLike, n_train: int, n_val: int = 0, num_classes: int = 3,
                 size: int = 160, seed: int = 0) -> Path:
    """Write a deterministic synthetic-shapes dataset in the YOLO layout."""
    if not 1 <= num_classes <= len(SHAPE_NAMES):
        raise ValueError(f"synthetic shapes support 1..{len(SHAPE_NAMES)} classes, got {num_classes}")
    if n_train < 0 or n_val < 0:
        raise ValueError("image counts must be non-negative")
    out = Path(out)
    rng = np.random.default_rng(seed)
    (out).mkdir(parents=True, exist_ok=True)
    (out / "classes.txt").write_text("".join(n + "\n" for n in SHAPE_NAMES[:num_classes]), encoding="utf-8")
    for split, n in (("train", n_train), ("val", n_val)):
        (out / "images" / split).mkdir(parents=True, exist_ok=True)
        (out / "labels" / split).mkdir(parents=True, exist_ok=True)
        for k in range(n):
            img, anns = render_sample(rng, size, num_classes)
            stem = f"{split}_{k:05d}"
            write_ppm(out / "images" / split / f"{stem}.ppm", img)
            (out / "labels" / split / f"{stem}.txt").write_text(format_labels(anns), encoding="utf-8")
    return out


# ------------------------------------------------------------------ batching


def batch_order(n: int, batch_size: int, seed: int, epoch: int = 0, shuffle: bool = True) -> list[np.ndarray]:
    idx = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    return [idx[k : k + batch_size] for k in range(0, n, batch_size)]


def batch_iter(dataset: Dataset, batch_size: int, grid_sizes: Sequence[int], B: int, seed: int = 0,
               epoch: int = 0, shuffle: bool = True, dtype=np.float32) -> Iterator[tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]], np.ndarray]]:
    """Yield ``(images N x 3 x H x W, [(targets, masks) per scale], indices)``.

    Shuffling is deterministic per (seed, epoch); the last partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    for idx in batch_order(len(dataset), batch_size, seed, epoch, shuffle):
        images = np.stack([dataset.samples[i].image for i in idx]).astype(dtype, copy=False)
        per = [dataset.targets_for(int(i), grid_sizes, B) for i in idx]
        targets = [
            (np.stack([p[s][0] for p in per]), np.stack([p[s][1] for p in per]))
            for s in range(len(grid_sizes))
        ]
        yield images, targets, idx
