"""Label parsing, image codecs, resize, target encoding, synthetic data, batching."""

from __future__ import annotations

import hashlib
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridsight.data import (
    Annotation,
    Dataset,
    DatasetError,
    Sample,
    batch_iter,
    encode_targets,
    glyph_mask,
    load_dataset,
    parse_label_line,
    read_image,
    read_labels,
    read_ppm,
    resize_image,
    save_dataset,
    synth_shapes,
    write_ppm,
)
from gridsight.decode import BBox, decode_grid, iou


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def make_split(root: Path, split: str, n: int, classes=("a", "b", "c"), labels=True, size=8):
    (root / "images" / split).mkdir(parents=True, exist_ok=True)
    (root / "labels" / split).mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("".join(c + "\n" for c in classes))
    rng = np.random.default_rng(n)
    for k in range(n):
        write_ppm(root / "images" / split / f"im{k}.ppm", rng.integers(0, 256, (size, size, 3), dtype=np.uint8))


# --------------------------------------------------------------- parsing


def test_parse_label_line():
    assert parse_label_line("2 0.5 0.5 0.25 0.25", 3, "x") == Annotation(2, 0.5, 0.5, 0.25, 0.25)


BAD_LINES = [
    "2 0.5 0.5 0.25",  # too few fields
    "2 0.5 0.5 0.25 0.25 0.1",  # too many
    "2  0.5 0.5 0.25 0.25",  # double space
    "two 0.5 0.5 0.25 0.25",
    "1.5 0.5 0.5 0.25 0.25",
    "3 0.5 0.5 0.25 0.25",  # class id >= C
    "-1 0.5 0.5 0.25 0.25",
    "0 1.5 0.5 0.25 0.25",
    "0 0.5 -0.1 0.25 0.25",
    "0 0.5 0.5 abc 0.25",
    "0 0.5 0.5 0.25 nan",
    "0 0.5 0.5 0.25 inf",
    "0 0.5 0.5 0,25 0.25",
    "0 0.5 0.5 0 0.25",
    "",
]


@pytest.mark.parametrize("line", BAD_LINES)
def test_parser_rejects_malformed(line):
    with pytest.raises(DatasetError, match="f.txt:7"):
        parse_label_line(line, 3, "f.txt:7")


@given(st.text(alphabet="0123456789. -e", max_size=30))
def test_parser_fuzz_either_valid_or_located(line):
    try:
        a = parse_label_line(line, 3, "lbl:1")
    except DatasetError as e:
        assert str(e).startswith("lbl:1:")
    else:
        assert 0 <= a.class_id < 3
        assert all(0.0 <= v <= 1.0 for v in (a.cx, a.cy, a.w, a.h)) and a.w > 0 and a.h > 0


def test_read_labels_reports_file_and_line(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("0 0.5 0.5 0.1 0.1\n\n1 0.5 0.5 0.1\n")
    with pytest.raises(DatasetError, match=r"x\.txt:3"):
        read_labels(p, 3)


# ---------------------------------------------------------------- loading


def test_missing_labels_count_as_background(tmp_path):
    make_split(tmp_path, "train", 3)
    ds = load_dataset(tmp_path, "train")
    assert len(ds) == 3 and ds.missing_labels == 3
    assert all(s.annotations == [] for s in ds.samples)
    assert [s.id for s in ds.samples] == ["im0", "im1", "im2"]


def test_load_errors(tmp_path):
    with pytest.raises(DatasetError, match="does not exist"):
        load_dataset(tmp_path, "train")
    make_split(tmp_path, "train", 1)
    with pytest.raises(DatasetError, match="split"):
        load_dataset(tmp_path, "holdout")
    with pytest.raises(DatasetError, match="classes"):
        load_dataset(tmp_path, "train", num_classes=5)
    (tmp_path / "labels" / "train" / "im0.txt").write_text("4 0.5 0.5 0.1 0.1\n")
    with pytest.raises(DatasetError, match="im0.txt:1"):
        load_dataset(tmp_path, "train")


def test_save_load_roundtrip(tmp_path):
    synth_shapes(tmp_path / "a", 6, 0, 3, 64, seed=2)
    ds = load_dataset(tmp_path / "a", "train")
    save_dataset(tmp_path / "b", "train", ds)
    back = load_dataset(tmp_path / "b", "train")
    assert [s.id for s in back.samples] == [s.id for s in ds.samples]
    for s, t in zip(ds.samples, back.samples):
        assert np.array_equal(s.image, t.image)
        assert len(s.annotations) == len(t.annotations)
        for a, b in zip(s.annotations, t.annotations):
            assert a.class_id == b.class_id
            assert np.allclose([a.cx, a.cy, a.w, a.h], [b.cx, b.cy, b.w, b.h], rtol=0, atol=1e-6)


def test_ppm_roundtrip_and_errors(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    p = tmp_path / "x.ppm"
    write_ppm(p, img)
    assert p.read_bytes().startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(read_ppm(p), img)
    p.write_bytes(b"P6\n# comment\n7 5\n255\n" + img.tobytes())
    assert np.array_equal(read_ppm(p), img)
    p.write_bytes(b"P6\n7 5\n255\n" + img.tobytes()[:-1])
    with pytest.raises(DatasetError, match="truncated"):
        read_ppm(p)
    p.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(DatasetError, match="P6"):
        read_ppm(p)
    p.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(DatasetError, match="maxval"):
        read_ppm(p)
    with pytest.raises(DatasetError, match="unsupported"):
        read_image(tmp_path / "x.bmp")


def test_png_read(tmp_path, rng):
    Image = pytest.importorskip("PIL.Image")
    img = rng.integers(0, 256, (4, 6, 3), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "x.png")
    assert np.array_equal(read_image(tmp_path / "x.png"), img)
    with pytest.raises(DatasetError):
        read_image(tmp_path / "x.png", allow_png=False)


# ----------------------------------------------------------------- resize


def test_resize_examples(rng):
    x = rng.random((3, 8, 8)).astype(np.float32)
    assert resize_image(x, 8) is x
    c = np.full((3, 5, 9), 0.25, np.float32)
    assert np.all(resize_image(c, 16) == 0.25)


@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_resize_up_then_down_is_identity(seed, n):
    x = np.random.default_rng(seed).random((3, n, n))
    assert np.array_equal(resize_image(resize_image(x, 2 * n), n), x)


# --------------------------------------------------------------- encoding


def test_encode_center_cell():
    t, m, d = encode_targets([Annotation(1, 0.5, 0.5, 0.2, 0.3)], 7, 2, 3)
    assert m.sum() == 1 and m[3, 3] and d == 0
    assert list(t[3, 3, :5]) == [0.5, 0.5, 0.2, 0.3, 1.0]
    assert list(t[3, 3, 10:]) == [0.0, 1.0, 0.0]
    assert not t[3, 3, 5:10].any()


def test_encode_empty_and_boundary():
    t, m, d = encode_targets([], 5, 2, 3)
    assert not t.any() and not m.any() and d == 0
    t, m, _ = encode_targets([Annotation(0, 1.0, 1.0, 0.1, 0.1)], 5, 1, 2)
    assert m[4, 4] and t[4, 4, 0] == 1.0


def test_encode_collision_keeps_larger():
    small, big = Annotation(0, 0.51, 0.51, 0.1, 0.1), Annotation(2, 0.52, 0.52, 0.3, 0.3)
    for anns in ([small, big], [big, small]):
        t, m, d = encode_targets(anns, 4, 2, 3)
        assert d == 1 and m.sum() == 1
        assert t[2, 2, 2] == 0.3 and t[2, 2, 12] == 1.0


def inside_annotations(rng, n, C=3, lattice=None):
    out = []
    for _ in range(n):
        w, h = rng.uniform(0.01, 0.5, 2)
        cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
        if lattice:
            w, h, cx, cy = (np.round(v * lattice) / lattice for v in (w, h, cx, cy))
            w, h = max(w, 1 / lattice), max(h, 1 / lattice)
            cx, cy = min(max(cx, w / 2), 1 - w / 2), min(max(cy, h / 2), 1 - h / 2)
        out.append(Annotation(int(rng.integers(0, C)), float(cx), float(cy), float(w), float(h)))
    return out


def roundtrip(anns, S, B=2, C=3):
    t, m, dropped = encode_targets(anns, S, B, C)
    boxes = decode_grid(t, S, B, C, 0.5, logits=False)
    return boxes, dropped


@given(st.integers(0, 2**31 - 1), st.sampled_from([5, 7, 10, 20]))
def test_roundtrip_returns_survivors_with_iou_near_one(seed, S):
    rng = np.random.default_rng(seed)
    anns = inside_annotations(rng, int(rng.integers(0, 10)))
    boxes, dropped = roundtrip(anns, S)
    assert len(boxes) == len(anns) - dropped
    for b in boxes:
        best = max(iou(b, BBox(a.cx, a.cy, a.w, a.h)) for a in anns if a.class_id == b.class_id)
        assert best >= 1.0 - 1e-12


@given(st.integers(0, 2**31 - 1), st.sampled_from([5, 7, 10, 20]))
def test_roundtrip_exact_on_dyadic_coordinates(seed, S):
    # coordinates k / 2**12: every encode and decode step is exact
    rng = np.random.default_rng(seed)
    anns = inside_annotations(rng, int(rng.integers(0, 10)), lattice=4096)
    boxes, dropped = roundtrip(anns, S)
    assert len(boxes) == len(anns) - dropped
    for b in boxes:
        assert max(iou(b, BBox(a.cx, a.cy, a.w, a.h)) for a in anns) == 1.0


# -------------------------------------------------------------- synthetic


def test_synth_deterministic(tmp_path):
    a = synth_shapes(tmp_path / "a", 5, 2, 3, 64, seed=7)
    b = synth_shapes(tmp_path / "b", 5, 2, 3, 64, seed=7)
    c = synth_shapes(tmp_path / "c", 5, 2, 3, 64, seed=8)
    assert tree_digest(a) == tree_digest(b) != tree_digest(c)


def test_synth_empty(tmp_path):
    root = synth_shapes(tmp_path / "e", 0, 0)
    assert len(load_dataset(root, "train")) == 0


@pytest.mark.parametrize("bad", [dict(num_classes=6), dict(num_classes=0), dict(n_train=-1)])
def test_synth_rejects_bad_config(tmp_path, bad):
    kw = dict(n_train=1, n_val=0, num_classes=3)
    kw.update(bad)
    with pytest.raises(ValueError):
        synth_shapes(tmp_path, **kw)


def test_glyph_masks_non_degenerate():
    for k in range(5):
        m = glyph_mask(k, 16)
        assert m.any() and m.shape == (16, 16)
    with pytest.raises(ValueError):
        glyph_mask(5, 16)


def pixel_box(img: np.ndarray, a: Annotation, size: int):
    """Re-measure a glyph from pixels: the dominant colour inside the label box,
    located within a window two pixels wider (glyphs keep that margin free)."""
    x0, x1 = round((a.cx - a.w / 2) * size), round((a.cx + a.w / 2) * size)
    y0, y1 = round((a.cy - a.h / 2) * size), round((a.cy + a.h / 2) * size)
    patch = img[y0:y1, x0:x1].reshape(-1, 3)
    color = Counter(map(tuple, patch)).most_common(1)[0][0]
    wy0, wx0 = max(y0 - 2, 0), max(x0 - 2, 0)
    win = img[wy0 : y1 + 2, wx0 : x1 + 2]
    ys, xs = np.nonzero(np.all(win == np.array(color, np.uint8), axis=-1))
    bx0, bx1 = wx0 + xs.min(), wx0 + xs.max() + 1
    by0, by1 = wy0 + ys.min(), wy0 + ys.max() + 1
    return BBox((bx0 + bx1) / 2 / size, (by0 + by1) / 2 / size, (bx1 - bx0) / size, (by1 - by0) / size)


def test_synth_labels_match_pixels(tmp_path):
    size = 96
    root = synth_shapes(tmp_path, 40, 0, 5, size, seed=3)
    n = 0
    for img_path in sorted((root / "images" / "train").iterdir()):
        img = read_ppm(img_path)
        anns = read_labels(root / "labels" / "train" / (img_path.stem + ".txt"), 5)
        assert 1 <= len(anns) <= 3
        for a in anns:
            v = iou(pixel_box(img, a, size), BBox(a.cx, a.cy, a.w, a.h))
            assert v >= 0.95, (img_path.name, a, v)
            n += 1
    assert n >= 40


# --------------------------------------------------------------- batching


def toy_dataset(n):
    return Dataset([Sample(np.full((3, 4, 4), k, np.float32), [], f"s{k:02d}") for k in range(n)], ["a"])


def test_batch_iter_unshuffled_is_file_order():
    ds = toy_dataset(7)
    batches = list(batch_iter(ds, 3, [2], 1, shuffle=False))
    assert [list(b[2]) for b in batches] == [[0, 1, 2], [3, 4, 5], [6]]
    assert batches[2][0].shape == (1, 3, 4, 4)
    assert batches[0][1][0][0].shape == (3, 2, 2, 6)


@given(st.integers(1, 30), st.integers(1, 8), st.integers(0, 100), st.integers(0, 5))
def test_batch_iter_covers_dataset_once(n, bs, seed, epoch):
    ds = toy_dataset(n)
    seen = [int(i) for _, _, idx in batch_iter(ds, bs, [2], 1, seed, epoch) for i in idx]
    assert sorted(seen) == list(range(n))
    again = [int(i) for _, _, idx in batch_iter(ds, bs, [2], 1, seed, epoch) for i in idx]
    assert seen == again


def test_batch_iter_rejects_zero_batch():
    with pytest.raises(ValueError):
        list(batch_iter(toy_dataset(2), 0, [2], 1))
