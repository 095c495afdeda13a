"""Finite-difference gradient checks for every primitive and block.

Each case builds a small randomized float64 problem and reduces the output to
a scalar with a fixed random projection, so no gradient is trivially zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import blocks as B
from . import tensor as T
from .loss import LossHyper, assign, grid_loss
from .tensor import GradCheckReport, Tensor

F64 = np.float64


@dataclass
class CaseResult:
    name: str
    kind: str  # "primitive" or "block"
    report: GradCheckReport
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.report.passed


def _project(out, rng) -> Callable:
    """Fixed random linear functional on a tensor or list of tensors."""
    outs = out if isinstance(out, (list, tuple)) else [out]
    ws = [rng.standard_normal(o.shape) for o in outs]

    def reduce(o):
        os_ = o if isinstance(o, (list, tuple)) else [o]
        total = None
        for t, w in zip(os_, ws):
            s = T.tsum(T.mul(t, w))
            total = s if total is None else T.add(total, s)
        return total

    return reduce


def _check(name, kind, fn, inputs, rng, tol, h=1e-5) -> CaseResult:
    with T.no_grad():
        proto = fn(*inputs)
    reduce = _project(proto, rng)
    rep = T.grad_check(lambda *xs: reduce(fn(*xs)), inputs, h=h, tol=tol)
    return CaseResult(name, kind, rep, sum(t.data.size for t in inputs))


def _t(rng, shape, name, low=None):
    d = rng.standard_normal(shape)
    if low is not None:
        d = np.abs(d) + low
    return Tensor(d, name=name)


def _distinct(rng, shape, name):
    # well separated values: no max-pool ties within the step size
    n = int(np.prod(shape))
    return Tensor((rng.permutation(n).reshape(shape) * 0.1 + rng.uniform(0, 0.01, shape)), name=name)


def primitive_cases(seed: int, tol: float = 1e-4) -> list[CaseResult]:
    rng = np.random.default_rng(seed)
    n, c = int(rng.integers(1, 3)), int(rng.choice([2, 4]))
    hw = int(rng.choice([4, 6]))
    x4 = (n, c, hw, hw)
    out: list[CaseResult] = []

    def case(name, fn, *inputs, h=1e-5):
        out.append(_check(name, "primitive", fn, list(inputs), rng, tol, h))

    case("add", T.add, _t(rng, (3, 4), "a"), _t(rng, (4,), "b"))
    case("sub", T.sub, _t(rng, (3, 1), "a"), _t(rng, (3, 4), "b"))
    case("mul", T.mul, _t(rng, (2, 3, 4), "a"), _t(rng, (3, 1), "b"))
    case("square", T.square, _t(rng, (5,), "x"))
    case("sqrt", T.sqrt, _t(rng, (5,), "x", low=0.2))
    case("exp", T.exp, _t(rng, (5,), "x"))
    case("log", T.log, _t(rng, (5,), "x", low=0.2))
    case("sigmoid", T.sigmoid, _t(rng, (6,), "x"))
    case("silu", T.silu, _t(rng, x4, "x"))
    case("log_softmax", lambda x: T.log_softmax(x, -1), _t(rng, (3, 5), "x"))
    case("sum_axis", lambda x: T.tsum(x, 1), _t(rng, (3, 4, 2), "x"))
    case("mean", T.mean, _t(rng, (3, 4), "x"))
    case("reshape", lambda x: T.reshape(x, (4, 3)), _t(rng, (3, 4), "x"))
    case("transpose", lambda x: T.transpose(x, (0, 2, 3, 1)), _t(rng, x4, "x"))
    case("index_basic", lambda x: T.index(x, (slice(None), slice(1, 3))), _t(rng, (3, 4), "x"))
    case("index_fancy", lambda x: T.index(x, np.array([0, 2, 0])), _t(rng, (3, 4), "x"))
    case("masked_sigmoid", lambda x: T.masked_sigmoid(x, np.array([True, False, True])), _t(rng, (2, 3), "x"))
    case("concat", lambda a, b: T.concat_channels([a, b]), _t(rng, x4, "a"), _t(rng, (n, 2, hw, hw), "b"))
    case("split", lambda x: T.split_channels(x, [1, c - 1]), _t(rng, x4, "x"))
    case("channel_slice", lambda x: T.channel_slice(x, 1, c), _t(rng, x4, "x"))
    for k, s, p in ((3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)):
        case(f"conv2d_k{k}s{s}p{p}", lambda x, w, b, s=s, p=p: T.conv2d(x, w, b, s, p),
             _t(rng, x4, "x"), _t(rng, (3, c, k, k), "w"), _t(rng, (3,), "b"))
    st = T.BatchNormState(np.zeros(c), np.ones(c))
    case("batchnorm_train", lambda x, g, b: T.batchnorm2d(x, g, b, st, True, False),
         _t(rng, (2, c, hw, hw), "x"), _t(rng, (c,), "gamma"), _t(rng, (c,), "beta"))
    st2 = T.BatchNormState(rng.standard_normal(c), rng.uniform(0.5, 2, c))
    case("batchnorm_infer", lambda x, g, b: T.batchnorm2d(x, g, b, st2, False, False),
         _t(rng, x4, "x"), _t(rng, (c,), "gamma"), _t(rng, (c,), "beta"))
    case("maxpool_k3s1p1", lambda x: T.maxpool2d(x, 3, 1, 1), _distinct(rng, x4, "x"))
    case("maxpool_k2s2", lambda x: T.maxpool2d(x, 2, 2), _distinct(rng, x4, "x"))
    case("avgpool_k2", lambda x: T.avgpool2d(x, 2), _t(rng, x4, "x"))
    case("upsample_nearest", lambda x: T.upsample_nearest(x, 2), _t(rng, x4, "x"))
    case("resize_nearest_down", lambda x: T.resize_nearest(x, (hw // 2, hw // 2)), _t(rng, x4, "x"))
    return out


def _block_case(name, module: B.Module, xs, rng, tol, call=None) -> CaseResult:
    module.set_stat_updates(False)
    params = [t for _, t in module.named_tensors()]
    call = call or (lambda m, *a: m(*a))
    k = len(xs)
    fn = lambda *ts: call(module, *ts[:k])
    return _check(name, "block", fn, list(xs) + params, rng, tol)


def block_cases(seed: int, tol: float = 1e-4) -> list[CaseResult]:
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(1, 3))
    hw = int(rng.choice([4, 6]))
    c = 4
    kw = dict(rng=rng, dtype=F64)
    x = lambda ch=c, s=hw: _t(rng, (n, ch, s, s), "x")
    out = [
        _block_case("ConvBlock", B.ConvBlock(c, 6, 3, 1, **kw), [x()], rng, tol),
        _block_case("ConvBlock_s2", B.ConvBlock(c, 4, 3, 2, **kw), [x()], rng, tol),
        _block_case("RepNBottleneck", B.RepNBottleneck(c, c, **kw), [x()], rng, tol),
        _block_case("RepNCSP", B.RepNCSP(c, c, 1, **kw), [x()], rng, tol),
        _block_case("RepNCSPELAN", B.RepNCSPPELAN(c, c, 4, 1, **kw), [x()], rng, tol),
        _block_case("ADown", B.ADown(c, c, **kw), [x()], rng, tol),
        _block_case("SPPELAN", B.SPPELAN(c, c, 2, 3, **kw), [x()], rng, tol),
        _block_case("Silence", B.Silence(), [x()], rng, tol),
        _block_case("Upsample", B.Upsample(2), [x()], rng, tol),
        _block_case("Concat", B.Concat(), [x(), x(2)], rng, tol, lambda m, a, b: m([a, b])),
        _block_case("CBLinear", B.CBLinear(c, [2, 3], **kw), [x()], rng, tol),
        _block_case("CBFuse", B.CBFuse(), [x(c, hw // 2), x(c, hw * 2), x()], rng, tol,
                    lambda m, a, b, t: m([a, b], t)),
        _block_case("RevCouple", B.RevCouple(c, **kw), [x()], rng, tol),
        _block_case("RevCouple_inverse", B.RevCouple(c, **kw), [x()], rng, tol, lambda m, y: m.inverse(y)),
        _block_case("Detect", B.Detect(c, 2, 3, **kw), [x()], rng, tol),
    ]
    out.append(_loss_case(rng, tol))
    return out


def _loss_case(rng, tol) -> CaseResult:
    """Composite grid loss with the responsible-predictor assignment held fixed."""
    n, S, nb, nc = 2, 3, 2, 3
    pred = _t(rng, (n, S, S, nb * 5 + nc), "pred")
    pred.data[..., [2, 3, 7, 8]] = rng.uniform(0.1, 0.6, (n, S, S, 4))
    mask = rng.random((n, S, S)) < 0.5
    target = np.zeros(pred.shape)
    target[..., :4] = rng.uniform(0.1, 0.9, (n, S, S, 4))
    target[..., 4] = 1.0
    target[np.arange(n)[:, None, None], np.arange(S)[None, :, None], np.arange(S)[None, None, :],
           nb * 5 + rng.integers(0, nc, (n, S, S))] = 1.0
    target *= mask[..., None]
    a = assign(pred.data, target, mask, nb)
    hyper = LossHyper()

    def fn(p):
        box, obj, cls = grid_loss(p, target, mask, nb, nc, hyper, a)
        return T.add(T.add(box, obj), cls)

    rep = T.grad_check(fn, [pred], h=1e-5, tol=tol)
    return CaseResult("YoloLoss", "block", rep, pred.data.size)


def run_suite(seeds=(0, 1, 2, 3, 4), tol: float = 1e-4, primitives: bool = True, blocks: bool = True) -> list[tuple[int, CaseResult]]:
    results = []
    for s in seeds:
        if primitives:
            results += [(s, r) for r in primitive_cases(s, tol)]
        if blocks:
            results += [(s, r) for r in block_cases(s, tol)]
    return results


def format_table(results: list[tuple[int, CaseResult]]) -> str:
    """One row per case name: worst error over seeds and PASS/FAIL."""
    agg: dict[str, tuple[str, float, bool, float]] = {}
    for _, r in results:
        kind, worst, ok, tol = agg.get(r.name, (r.kind, 0.0, True, r.report.tol))
        agg[r.name] = (kind, max(worst, r.report.max_rel_error), ok and r.passed, tol)
    lines = [f"{'case':<22}{'kind':<11}{'max_rel_err':>13}  result"]
    for name, (kind, worst, ok, tol) in agg.items():
        lines.append(f"{name:<22}{kind:<11}{worst:>13.3e}  {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines)
