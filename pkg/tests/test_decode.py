"""IoU, grid decoding, class-specific scores and non-maximum suppression."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from gridsight.decode import (
    BBox,
    boxes_to_rows,
    class_score,
    decode_arrays,
    decode_grid,
    iou,
    iou_matrix,
    iou_xyxy,
    nms,
    nms_rows,
    postprocess,
)

unit = st.floats(0.0, 1.0, allow_nan=False)
size = st.floats(0.01, 1.0, allow_nan=False)
boxes = st.builds(BBox, unit, unit, size, size)


def rows_close(a, b, score_rel=1e-12):
    assert len(a) == len(b)
    for p, q in zip(a, b):
        assert tuple(p[:5]) == tuple(q[:5])
        assert p[5] == pytest.approx(q[5], rel=score_rel, abs=1e-300)


# ------------------------------------------------------------------ iou


def test_iou_examples():
    a = BBox(0.5, 0.5, 0.2, 0.4)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(0.1, 0.1, 0.1, 0.1)) == 0.0
    assert iou_xyxy([0, 0, 2, 2], [1, 0, 3, 2]) == pytest.approx(1 / 3, abs=1e-15)


def test_iou_empty_union_is_zero():
    assert iou(BBox(0.5, 0.5, 0.0, 0.0), BBox(0.5, 0.5, 0.0, 0.0)) == 0.0


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@given(boxes, boxes, st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_iou_translation_invariant(a, b, dx, dy):
    a2 = BBox(a.cx + dx, a.cy + dy, a.w, a.h)
    b2 = BBox(b.cx + dx, b.cy + dy, b.w, b.h)
    assert iou(a2, b2) == pytest.approx(iou(a, b), abs=1e-9)


@given(boxes, boxes)
def test_iou_one_iff_coincide(a, b):
    if iou(a, b) == 1.0:
        assert a.xyxy() == pytest.approx(b.xyxy(), abs=1e-12)


@given(st.lists(boxes, min_size=1, max_size=5), st.lists(boxes, min_size=1, max_size=5))
def test_iou_matrix_matches_oracle(xs, ys):
    m = iou_matrix(boxes_to_rows(xs)[:, :4], boxes_to_rows(ys)[:, :4])
    for i, a in enumerate(xs):
        for j, b in enumerate(ys):
            want = oracles.box_iou((a.cx, a.cy, a.w, a.h), (b.cx, b.cy, b.w, b.h))
            assert m[i, j] == pytest.approx(want, abs=1e-12)


# --------------------------------------------------------------- decode


def test_decode_all_conf_neg_inf_is_empty():
    raw = np.zeros((3, 3, 2 * 5 + 2))
    raw[..., [4, 9]] = -np.inf
    assert decode_grid(raw, 3, 2, 2) == []


def test_decode_single_cell():
    raw = np.array([[[0.5, 0.5, 0.5, 0.5, 0.8, 1.0, 0.0]]])
    out = decode_grid(raw, 1, 1, 2, logits=False)
    assert out == [BBox(0.5, 0.5, 0.5, 0.5, 0, 0.8)]
    # same cell as logits
    raw = np.array([[[0.5, 0.5, 0.5, 0.5, math.log(0.8 / 0.2), 50.0, -50.0]]])
    (b,) = decode_grid(raw, 1, 1, 2)
    assert (b.cx, b.cy, b.w, b.h, b.class_id) == (0.5, 0.5, 0.5, 0.5, 0)
    assert b.score == pytest.approx(0.8, abs=1e-12)


def test_decode_rejects_malformed_last_dimension():
    with pytest.raises(ValueError, match="B=2"):
        decode_grid(np.zeros((4, 4, 12)), 4, 2, 3)


def random_grid(rng, S, B, C):
    raw = rng.standard_normal((S, S, B * 5 + C)) * 2.0
    for b in range(B):
        raw[..., b * 5 : b * 5 + 2] = rng.uniform(0, 1, (S, S, 2))
        raw[..., b * 5 + 2 : b * 5 + 4] = rng.uniform(0.02, 0.8, (S, S, 2))
    return raw


@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 0.05, 0.2, 0.5]))
def test_decode_matches_enumeration_oracle(seed, thresh):
    rng = np.random.default_rng(seed)
    raw = random_grid(rng, 4, 2, 3)
    got = decode_arrays(raw, 4, 2, 3, thresh)
    rows_close(got, oracles.decode_enumerate(raw, 4, 2, 3, thresh))


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.9))
def test_decode_scores_are_product_and_above_threshold(seed, thresh):
    rng = np.random.default_rng(seed)
    S, B, C = 3, 2, 4
    raw = random_grid(rng, S, B, C)
    probs = np.exp(raw[..., B * 5 :] - raw[..., B * 5 :].max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    best = probs.max(-1)
    confs = {float(1 / (1 + np.exp(-raw[i, j, b * 5 + 4])) * best[i, j]) for i in range(S) for j in range(S) for b in range(B)}
    for box in decode_grid(raw, S, B, C, thresh):
        assert box.score >= thresh
        assert 0.0 <= box.cx <= 1.0 and 0.0 <= box.cy <= 1.0
        assert 0.0 < box.w <= 1.0 and 0.0 < box.h <= 1.0
        assert min(abs(box.score - c) for c in confs) < 1e-12


def test_decode_clips_and_drops_degenerate():
    raw = np.zeros((1, 1, 6))
    raw[0, 0, :5] = [0.0, 0.5, 0.4, 0.2, 10.0]  # left half outside the image
    (b,) = decode_grid(raw, 1, 1, 1)
    assert (b.cx, b.w) == pytest.approx((0.1, 0.2))
    raw[0, 0, :5] = [0.0, 0.5, 0.0, 0.2, 10.0]
    assert decode_grid(raw, 1, 1, 1) == []


def test_class_score_examples():
    assert class_score(0.9, 0.5) == pytest.approx(0.45, abs=1e-15)
    assert class_score(1.0, 0.37) == 0.37
    p = np.array([0.1, 0.2, 0.7])
    assert np.array_equal(class_score(p, 0.3), np.array([q * 0.3 for q in p]))


# ------------------------------------------------------------------ nms


def test_nms_single_box():
    b = BBox(0.5, 0.5, 0.2, 0.2, 1, 0.7)
    assert nms([b]) == [b]


def test_nms_identical_boxes_keeps_best():
    a, b = BBox(0.5, 0.5, 0.2, 0.2, 0, 0.8), BBox(0.5, 0.5, 0.2, 0.2, 0, 0.9)
    assert nms([a, b]) == [b]


def test_nms_class_aware_keeps_other_class():
    a, b = BBox(0.5, 0.5, 0.2, 0.2, 0, 0.9), BBox(0.5, 0.5, 0.2, 0.2, 1, 0.8)
    assert nms([a, b]) == [a, b]
    assert nms([a, b], class_aware=False) == [a]


def test_nms_tie_order_class_then_input():
    a = BBox(0.5, 0.5, 0.2, 0.2, 2, 0.5)
    b = BBox(0.5, 0.5, 0.2, 0.2, 1, 0.5)
    c = BBox(0.5, 0.5, 0.2, 0.2, 1, 0.5)
    assert nms([a, b, c], class_aware=False) == [b]


def test_nms_threshold_is_inclusive():
    # IoU exactly 1/3 suppresses at thresh 1/3
    a = BBox(1.0, 1.0, 2.0, 2.0, 0, 0.9)
    b = BBox(2.0, 1.0, 2.0, 2.0, 0, 0.8)
    assert nms([a, b], 1 / 3) == [a]
    assert nms([a, b], 0.34) == [a, b]


def random_rows(rng, n, C=3, quantize=False):
    rows = np.zeros((n, 6))
    rows[:, 0:2] = rng.uniform(0, 1, (n, 2))
    rows[:, 2:4] = rng.uniform(0.05, 0.5, (n, 2))
    rows[:, 4] = rng.integers(0, C, n)
    rows[:, 5] = rng.uniform(0, 1, n)
    if quantize:  # force score ties
        rows[:, 5] = np.round(rows[:, 5] * 4) / 4
    return rows


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 0.9), st.booleans(), st.booleans())
def test_nms_matches_quadratic_oracle(seed, thresh, aware, ties):
    rng = np.random.default_rng(seed)
    rows = random_rows(rng, 50, quantize=ties)
    got = nms_rows(rows, thresh, aware)
    want = oracles.nms_quadratic([tuple(r) for r in rows], thresh, aware)
    assert [tuple(r) for r in got] == want


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 0.9))
def test_nms_subset_separated_and_idempotent(seed, thresh):
    rng = np.random.default_rng(seed)
    rows = random_rows(rng, 30)
    kept = nms_rows(rows, thresh)
    src = {tuple(r) for r in rows}
    assert all(tuple(r) in src for r in kept)
    assert list(kept[:, 5]) == sorted(kept[:, 5], reverse=True)
    m = iou_matrix(kept[:, :4], kept[:, :4])
    same = kept[:, 4][:, None] == kept[:, 4][None]
    np.fill_diagonal(same, False)
    assert not np.any((m >= thresh) & same)
    assert np.array_equal(nms_rows(kept, thresh), kept)


def test_postprocess_limits(rng):
    grids = [random_grid(rng, S, 2, 3) for S in (8, 4, 2)]
    out = postprocess(grids, 2, 3, conf_thresh=0.0, iou_thresh=1.01, max_candidates=20, max_det=7)
    assert len(out) == 7
    full = np.concatenate([decode_arrays(g, g.shape[0], 2, 3, 0.0) for g in grids])
    top = np.sort(full[:, 5])[::-1][:7]
    assert np.array_equal(out[:, 5], top)
