"""Detector assembly, PGI strip, composite loss, optimizer and training loop."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gridsight import tensor as T
from gridsight.data import Dataset, Sample, batch_iter, render_sample, to_chw
from gridsight.loss import LossHyper, compute_loss, grid_loss
from gridsight.model import ModelConfig, Predictions, build_model, preset, strip_auxiliary
from gridsight.tensor import ShapeError, Tensor
from gridsight.train import SGD, TrainHyper, TrainingDiverged, sgd_step, train

TINY = dict(input_size=32, width=8, depth=1, num_classes=3)


def tiny(**kw) -> ModelConfig:
    return ModelConfig(**{**TINY, **kw})


def tiny_dataset(n, size=32, classes=3, seed=0) -> Dataset:
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(n):
        img, anns = render_sample(rng, size, classes)
        samples.append(Sample(to_chw(img), anns, f"s{k}"))
    return Dataset(samples, [f"c{k}" for k in range(classes)])


def snapshot(model):
    return {p.name: p.tensor.data.copy() for p in model.parameters()}


# ---------------------------------------------------------------- build


def test_preset_c_grid_sizes():
    cfg = preset("c")
    assert (cfg.width, cfg.depth, cfg.input_size, cfg.num_boxes, cfg.num_classes) == (16, 1, 160, 2, 3)
    assert cfg.grid_sizes == [20, 10, 5]


def test_aux_disabled_has_no_aux_parameters():
    m = build_model(preset("c", aux_enabled=False))
    assert m.aux_param_count() == 0
    assert not any(p.aux_only for p in m.parameters())


def test_preset_e_is_larger_than_c():
    assert build_model(preset("e")).param_count() > build_model(preset("c")).param_count()


@pytest.mark.parametrize("kw", [dict(input_size=100), dict(width=6), dict(strides=(16, 8)),
                                dict(strides=(4,)), dict(depth=-1), dict(num_classes=0)])
def test_config_violations_rejected(kw):
    with pytest.raises(ValueError):
        tiny(**kw)


def test_config_roundtrip_dict():
    cfg = preset("e", seed=3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# -------------------------------------------------------------- forward


def test_infer_shapes_and_no_aux(rng):
    m = build_model(tiny())
    x = Tensor(rng.random((2, 3, 32, 32)).astype(np.float32))
    out = m.forward(x, "infer")
    assert out.aux is None
    assert [p.shape for p in out.main] == [(2, S, S, 2 * 5 + 3) for S in (4, 2, 1)]


def test_train_mode_has_aux(rng):
    m = build_model(tiny())
    out = m.forward(Tensor(rng.random((2, 3, 32, 32)).astype(np.float32)), "train")
    assert out.aux is not None and [a.shape for a in out.aux] == [p.shape for p in out.main]


def test_wrong_input_size_rejected(rng):
    m = build_model(tiny())
    with pytest.raises(ShapeError, match="32"):
        m.forward(Tensor(rng.random((1, 3, 64, 64))), "infer")
    with pytest.raises(ValueError):
        m.forward(Tensor(rng.random((1, 3, 32, 32))), "eval")


def test_train_mode_with_eval_stats_equals_infer(rng):
    m = build_model(tiny())
    x = Tensor(rng.random((2, 3, 32, 32)).astype(np.float32))
    with T.no_grad():
        a = m.forward(x, "infer").main
        b = m.forward(x, "train", batch_stats=False).main
    for p, q in zip(a, b):
        assert np.array_equal(p.data, q.data)


# ---------------------------------------------------------------- strip


def test_strip_outputs_bitwise_equal(rng):
    m = build_model(tiny())
    s = strip_auxiliary(m)
    for _ in range(5):
        x = rng.random((2, 3, 32, 32)).astype(np.float32)
        for p, q in zip(m.detect_tensors(x), s.detect_tensors(x)):
            assert np.array_equal(p, q)


def test_strip_parameter_count():
    m = build_model(tiny())
    s = strip_auxiliary(m)
    assert s.param_count() == m.param_count() - m.aux_param_count()
    assert s.aux_param_count() == 0 and m.aux_param_count() > 0
    assert m.has_aux  # original untouched


def test_stripped_model_rejects_train(rng):
    s = strip_auxiliary(build_model(tiny()))
    with pytest.raises(ValueError, match="stripped"):
        s.forward(Tensor(rng.random((1, 3, 32, 32))), "train")


# ----------------------------------------------------------------- loss


def _perfect(S=3, B=2, C=3):
    target = np.zeros((1, S, S, B * 5 + C))
    mask = np.zeros((1, S, S), bool)
    pred = np.zeros_like(target)
    pred[..., 4::5][..., :B] = -1000.0  # every confidence 0
    for (i, j, k) in [(0, 1, 2), (2, 2, 0)]:
        t = [0.4, 0.6, 0.3, 0.5]
        target[0, i, j, :4] = t
        target[0, i, j, 4] = 1.0
        target[0, i, j, B * 5 + k] = 1.0
        mask[0, i, j] = True
        pred[0, i, j, :4] = t
        pred[0, i, j, 4] = 1000.0
        pred[0, i, j, B * 5 :] = -200.0
        pred[0, i, j, B * 5 + k] = 200.0
    return pred, target, mask


def test_loss_perfect_fit_is_zero():
    pred, target, mask = _perfect()
    box, obj, cls = grid_loss(Tensor(pred), target, mask, 2, 3, LossHyper())
    assert float(box.data) == 0.0
    assert float(obj.data) == 0.0
    assert float(cls.data) == pytest.approx(0.0, abs=1e-150)


def test_loss_empty_image_is_zero():
    S, B, C = 3, 2, 3
    pred = np.zeros((1, S, S, B * 5 + C))
    pred[..., [4, 9]] = -1000.0
    preds = Predictions([Tensor(pred)])
    out = compute_loss(preds, [(np.zeros_like(pred), np.zeros((1, S, S), bool))], B, C)
    assert out.total == 0.0


def _random_instance(rng, n, S, B, C):
    pred = rng.standard_normal((n, S, S, B * 5 + C))
    pred[..., [b * 5 + q for b in range(B) for q in (0, 1)]] = rng.uniform(0, 1, (n, S, S, 2 * B))
    pred[..., [b * 5 + q for b in range(B) for q in (2, 3)]] = rng.uniform(0.05, 0.9, (n, S, S, 2 * B))
    target = np.zeros_like(pred)
    mask = rng.random((n, S, S)) < 0.6
    target[..., :4] = rng.uniform(0.05, 0.95, (n, S, S, 4))
    target[..., 4] = 1.0
    cls = rng.integers(0, C, (n, S, S))
    for idx in np.ndindex(n, S, S):
        target[idx + (B * 5 + cls[idx],)] = 1.0
    target *= mask[..., None]
    return pred, target, mask


@settings(max_examples=60)
@given(st.integers(0, 2**31 - 1), st.integers(1, 2))
def test_loss_matches_scalar_oracle(seed, B):
    rng = np.random.default_rng(seed)
    S, C = 2, 2
    pred, target, mask = _random_instance(rng, 2, S, B, C)
    box, obj, cls = grid_loss(Tensor(pred), target, mask, B, C, LossHyper())
    eb, eo, ec = oracles.yolo_loss_scalar(pred, target, mask, B, C)
    assert float(box.data) == pytest.approx(eb, rel=1e-12, abs=1e-12)
    assert float(obj.data) == pytest.approx(eo, rel=1e-12, abs=1e-12)
    assert float(cls.data) == pytest.approx(ec, rel=1e-12, abs=1e-12)


def test_loss_shape_mismatch_rejected():
    pred = Tensor(np.zeros((1, 2, 2, 13)))
    with pytest.raises(ShapeError):
        grid_loss(pred, np.zeros((1, 3, 3, 13)), np.zeros((1, 3, 3), bool), 2, 3, LossHyper())
    with pytest.raises(ShapeError):
        compute_loss(Predictions([pred]), [], 2, 3)


def test_aux_loss_weighted_into_total(rng):
    m = build_model(tiny())
    ds = tiny_dataset(2)
    images, targets, _ = next(batch_iter(ds, 2, m.config.grid_sizes, 2, shuffle=False))
    preds = m.forward(Tensor(images), "train")
    out = compute_loss(preds, targets, 2, 3)
    assert out.aux_loss > 0
    assert out.total == pytest.approx(out.box_loss + out.obj_loss + out.cls_loss + 0.25 * out.aux_loss, rel=1e-6)


# ------------------------------------------------------------------ sgd


def test_sgd_zero_grad_leaves_params():
    m = build_model(tiny())
    before = snapshot(m)
    for p in m.parameters():
        p.tensor.grad = np.zeros_like(p.tensor.data)
    sgd_step(m, lr=0.1)
    after = snapshot(m)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_sgd_half_square_one_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.0)
    T.mul(T.tsum(T.square(p)), 0.5).backward()
    opt.step()
    assert p.data[0] == pytest.approx(0.9, abs=1e-15)
    assert p.grad is None or not p.grad.any()


@given(st.floats(0.0, 0.99), st.floats(0.0, 0.1), st.floats(1e-3, 0.5))
def test_sgd_momentum_recurrence(mu, wd, lr):
    p = Tensor(np.array([1.5]), requires_grad=True)
    opt = SGD([p], lr=lr, momentum=mu, weight_decay=wd)
    x, v = 1.5, 0.0
    for _ in range(3):
        T.mul(T.tsum(T.square(p)), 0.5).backward()
        opt.step()
        v = mu * v + x + wd * x
        x = x - lr * v
        assert p.data[0] == pytest.approx(x, rel=1e-12, abs=1e-15)


# ---------------------------------------------------------------- train


def test_zero_epochs_leave_model_unchanged():
    m = build_model(tiny())
    before = snapshot(m)
    hist = train(m, tiny_dataset(3), TrainHyper(epochs=0, batch_size=2))
    assert hist.epochs == []
    after = snapshot(m)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        train(build_model(tiny()), Dataset([], ["a", "b", "c"]), TrainHyper(epochs=1))


def test_class_mismatch_rejected():
    with pytest.raises(ValueError, match="classes"):
        train(build_model(tiny()), tiny_dataset(2, classes=2), TrainHyper(epochs=1))


def test_nan_loss_aborts_with_epoch_and_step():
    m = build_model(tiny())
    ds = tiny_dataset(4)
    ds.samples[2].image[:] = np.nan
    hyper = TrainHyper(epochs=2, batch_size=1, seed=0)
    with pytest.raises(TrainingDiverged) as exc:
        train(m, ds, hyper)
    order = list(np.random.default_rng([0, 0]).permutation(4))
    assert exc.value.epoch == 0 and exc.value.step == order.index(2)
    assert "epoch" in str(exc.value) and "step" in str(exc.value)


def _repeat_batch(batch_stats, steps=50, lr=1e-3):
    m = build_model(preset("c"))
    ds = tiny_dataset(4, size=160, seed=3)
    images, targets, _ = next(batch_iter(ds, 4, m.config.grid_sizes, 2, shuffle=False))
    opt = SGD([p.tensor for p in m.parameters()], lr=lr, momentum=0.0)
    m.set_stat_updates(False)
    losses = []
    for _ in range(steps):
        preds = m.forward(Tensor(images), "train", batch_stats=batch_stats)
        out = compute_loss(preds, targets, 2, 3)
        out.tensor.backward()
        opt.step()
        losses.append(out.total)
    return losses


def test_repeated_batch_loss_non_increasing():
    # running BN statistics: the loss is a fixed smooth function of the weights
    losses = _repeat_batch(batch_stats=False)
    assert all(b <= a for a, b in zip(losses, losses[1:])), losses


def test_repeated_batch_with_batch_stats_descends():
    # batch statistics converge much faster but overshoot locally at this lr
    losses = _repeat_batch(batch_stats=True)
    assert losses[-1] < 0.5 * losses[0]


def test_training_is_deterministic():
    ds, val = tiny_dataset(6, seed=1), tiny_dataset(2, seed=2)
    hyper = TrainHyper(epochs=2, batch_size=4, seed=5)
    runs = []
    for _ in range(2):
        m = build_model(tiny(seed=9))
        hist = train(m, ds, hyper, val=val)
        runs.append(([r.csv_row() for r in hist.epochs], snapshot(m)))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


# ------------------------------------------------------------ PGI probe


def _grads(m, images, targets, weights):
    for p in m.parameters():
        p.tensor.grad = None
    preds = m.forward(Tensor(images), "train")
    compute_loss(preds, targets, 2, 3, aux_scale_weights=weights).tensor.backward()
    return {p.name: (np.zeros_like(p.tensor.data) if p.tensor.grad is None else p.tensor.grad.copy())
            for p in m.parameters()}


def test_pgi_gradient_attribution():
    m = build_model(tiny(dtype="float64"))
    m.set_stat_updates(False)
    ds = tiny_dataset(2, seed=4)
    images, targets, _ = next(batch_iter(ds, 2, m.config.grid_sizes, 2, shuffle=False, dtype=np.float64))
    full = _grads(m, images, targets, None)
    aux_names = [p.name for p in m.parameters() if p.aux_only]
    assert aux_names and all(np.any(full[k] != 0) for k in aux_names)
    backbone = [p.name for p in m.parameters() if p.name.startswith("backbone.")]
    for s in range(len(m.config.strides)):
        w = [1.0] * len(m.config.strides)
        w[s] = 0.0
        ablated = _grads(m, images, targets, w)
        diff = sum(float(np.linalg.norm(full[k] - ablated[k])) for k in backbone)
        assert diff > 0, f"aux scale {s} does not reach the backbone"
