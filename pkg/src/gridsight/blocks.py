"""GELAN building blocks, the reversible coupling block and the grid detect head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, ShapeError, Tensor


class Module:
    """Container of named parameters, batch-norm states and child modules."""

    def __init__(self) -> None:
        self.training = True
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def __setattr__(self, key, value):
        if isinstance(value, Module) and key != "__dict__":
            self.__dict__.setdefault("_children", {})[key] = value
        super().__setattr__(key, value)

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        setattr(self, name, t)
        return t

    def add_child(self, name: str, module: Module) -> Module:
        setattr(self, name, module)
        return module

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_tensors(f"{prefix}{cname}.")

    def named_bn_states(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        if isinstance(self, BatchNorm):
            yield prefix.rstrip("."), self.state
        for cname, child in self._children.items():
            yield from child.named_bn_states(f"{prefix}{cname}.")

    def modules(self) -> Iterator[Module]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def set_stat_updates(self, enabled: bool) -> None:
        for m in self.modules():
            if isinstance(m, BatchNorm):
                m.update_stats = enabled

    def num_params(self) -> int:
        return sum(t.data.size for _, t in self.named_tensors())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)


class Conv(Module):
    def __init__(self, cin, cout, k, stride=1, padding=0, bias=False, *, rng, dtype=np.float32):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.add_param("weight", _kaiming(rng, (cout, cin, k, k), dtype))
        self.bias = self.add_param("bias", np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, c, *, dtype=np.float32, eps=1e-5, momentum=0.03):
        super().__init__()
        self.add_param("gamma", np.ones(c, dtype=dtype))
        self.add_param("beta", np.zeros(c, dtype=dtype))
        self.state = BatchNormState(np.zeros(c, dtype=dtype), np.ones(c, dtype=dtype), momentum, eps)
        self.update_stats = True

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.state, self.training, self.update_stats)


class ConvBlock(Module):
    """conv (autopad) -> batch norm -> SiLU."""

    def __init__(self, cin, cout, k=1, stride=1, *, rng, dtype=np.float32):
        super().__init__()
        if k % 2 == 0:
            raise ShapeError(f"ConvBlock needs an odd kernel for autopad, got k={k}")
        self.cin, self.cout = cin, cout
        self.conv = Conv(cin, cout, k, stride, k // 2, rng=rng, dtype=dtype)
        self.bn = BatchNorm(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.silu(self.bn(self.conv(x)))


class RepNBottleneck(Module):
    """Two 3x3 conv blocks, residual add when the channel count is unchanged."""

    def __init__(self, cin, cout, *, rng, dtype=np.float32):
        super().__init__()
        self.residual = cin == cout
        self.cv1 = ConvBlock(cin, cout, 3, rng=rng, dtype=dtype)
        self.cv2 = ConvBlock(cout, cout, 3, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv2(self.cv1(x))
        return T.add(x, y) if self.residual else y


class RepNCSP(Module):
    """CSP wrapper: one half through ``n`` bottlenecks, the other bypassed, then merged."""

    def __init__(self, cin, cout, n=1, *, rng, dtype=np.float32):
        super().__init__()
        c_ = max(cout // 2, 1)
        self.cv1 = ConvBlock(cin, c_, 1, rng=rng, dtype=dtype)
        self.cv2 = ConvBlock(cin, c_, 1, rng=rng, dtype=dtype)
        self.m = [self.add_child(f"m{i}", RepNBottleneck(c_, c_, rng=rng, dtype=dtype)) for i in range(n)]
        self.cv3 = ConvBlock(2 * c_, cout, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        a = self.cv1(x)
        for b in self.m:
            a = b(a)
        return self.cv3(T.concat_channels([a, self.cv2(x)]))


class RepNCSPPELAN(Module):
    """ELAN-style dual path: 1x1 conv, split, stacked bottlenecks on one half,
    every intermediate map kept, concatenated and projected by a 1x1 conv."""

    def __init__(self, cin, cout, c_mid, n=1, *, rng, dtype=np.float32):
        super().__init__()
        if c_mid % 2:
            raise ShapeError(f"RepNCSPPELAN needs an even c_mid, got {c_mid}")
        h = c_mid // 2
        self.half = h
        self.cv1 = ConvBlock(cin, c_mid, 1, rng=rng, dtype=dtype)
        self.stages = [self.add_child(f"stage{i}", RepNBottleneck(h, h, rng=rng, dtype=dtype)) for i in range(n)]
        self.cv2 = ConvBlock(h * (2 + n), cout, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        a, b = T.split_channels(self.cv1(x), [self.half, self.half])
        kept = [a, b]
        y = b
        for stage in self.stages:
            y = stage(y)
            kept.append(y)
        return self.cv2(T.concat_channels(kept))


class ADown(Module):
    """Halve spatial size: first channel half via 3x3 stride-2 conv, second via
    2x2 max-pool then 1x1 conv; results concatenated."""

    def __init__(self, cin, cout, *, rng, dtype=np.float32):
        super().__init__()
        if cin % 2 or cout % 2:
            raise ShapeError(f"ADown needs even channel counts, got cin={cin}, cout={cout}")
        self.half = cin // 2
        self.cv1 = ConvBlock(cin // 2, cout // 2, 3, 2, rng=rng, dtype=dtype)
        self.cv2 = ConvBlock(cin // 2, cout // 2, 1, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ShapeError(f"ADown needs even spatial dims, got {h}x{w}")
        a, b = T.split_channels(x, [self.half, self.half])
        return T.concat_channels([self.cv1(a), self.cv2(T.maxpool2d(b, 2, 2))])


class SPPELAN(Module):
    def __init__(self, cin, cout, c_mid, k=5, *, rng, dtype=np.float32):
        super().__init__()
        self.k = k
        self.cv1 = ConvBlock(cin, c_mid, 1, rng=rng, dtype=dtype)
        self.cv5 = ConvBlock(4 * c_mid, cout, 1, rng=rng, dtype=dtype)

    def pooled(self, x: Tensor) -> list[Tensor]:
        maps = [self.cv1(x)]
        for _ in range(3):
            maps.append(T.maxpool2d(maps[-1], self.k, 1, self.k // 2))
        return maps

    def forward(self, x: Tensor) -> Tensor:
        return self.cv5(T.concat_channels(self.pooled(x)))


class Silence(Module):
    """Pass-through; both branches of the network read from its output."""

    def forward(self, x: Tensor) -> Tensor:
        return x


class Upsample(Module):
    def __init__(self, factor=2):
        super().__init__()
        self.factor = factor

    def forward(self, x: Tensor) -> Tensor:
        return T.upsample_nearest(x, self.factor)


class Concat(Module):
    def forward(self, xs: Sequence[Tensor]) -> Tensor:
        return T.concat_channels(xs)


class CBLinear(Module):
    """1x1 conv to ``sum(split_sizes)`` channels, split in order."""

    def __init__(self, cin, split_sizes, *, rng, dtype=np.float32):
        super().__init__()
        self.split_sizes = list(split_sizes)
        self.conv = Conv(cin, sum(self.split_sizes), 1, bias=True, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> list[Tensor]:
        y = self.conv(x)
        if len(self.split_sizes) == 1:
            return [y]
        return T.split_channels(y, self.split_sizes)


def cb_fuse(pieces: Sequence[Tensor], target: Tensor) -> Tensor:
    """Sum of ``target`` and every piece nearest-resized to the target's H, W."""
    out = target
    size = target.shape[2:]
    for i, p in enumerate(pieces):
        if p.shape[1] != target.shape[1]:
            raise ShapeError(f"cb_fuse piece {i} has {p.shape[1]} channels, target has {target.shape[1]}")
        out = T.add(out, T.resize_nearest(p, size))
    return out


class CBFuse(Module):
    def forward(self, pieces: Sequence[Tensor], target: Tensor) -> Tensor:
        return cb_fuse(pieces, target)


class RevCouple(Module):
    """Additive coupling: y1 = x1 + f(x2), y2 = x2 + g(y1); exactly invertible."""

    def __init__(self, c, *, rng, dtype=np.float32, zero_init=False):
        super().__init__()
        if c % 2:
            raise ShapeError(f"RevCouple needs an even channel count, got {c}")
        self.half = c // 2
        self.f = ConvBlock(self.half, self.half, 3, rng=rng, dtype=dtype)
        self.g = ConvBlock(self.half, self.half, 3, rng=rng, dtype=dtype)
        if zero_init:
            self.f.conv.weight.data[...] = 0
            self.g.conv.weight.data[...] = 0

    def _check(self, x: Tensor) -> None:
        if x.shape[1] != 2 * self.half:
            raise ShapeError(f"RevCouple built for {2 * self.half} channels, got {x.shape[1]}")

    def forward(self, x: Tensor) -> Tensor:
        self._check(x)
        x1, x2 = T.split_channels(x, [self.half, self.half])
        y1 = T.add(x1, self.f(x2))
        y2 = T.add(x2, self.g(y1))
        return T.concat_channels([y1, y2])

    def inverse(self, y: Tensor) -> Tensor:
        self._check(y)
        saved = [m.update_stats for m in self.modules() if isinstance(m, BatchNorm)]
        self.set_stat_updates(False)
        try:
            y1, y2 = T.split_channels(y, [self.half, self.half])
            x2 = T.sub(y2, self.g(y1))
            x1 = T.sub(y1, self.f(x2))
            return T.concat_channels([x1, x2])
        finally:
            for m, s in zip((m for m in self.modules() if isinstance(m, BatchNorm)), saved):
                m.update_stats = s


class Detect(Module):
    """1x1 conv to B*5+C channels laid out as N x S x S x (B*5+C).

    Per predictor b the slots are (x, y, w, h, conf); x, y, w, h go through a
    sigmoid, conf and the C class logits stay raw.
    """

    def __init__(self, cin, B, C, *, rng, dtype=np.float32, conf_bias=-4.0):
        super().__init__()
        self.B, self.C = B, C
        self.depth = B * 5 + C
        self.conv = Conv(cin, self.depth, 1, bias=True, rng=rng, dtype=dtype)
        for b in range(B):
            self.conv.bias.data[b * 5 + 4] = conf_bias
        mask = np.zeros(self.depth, dtype=bool)
        for b in range(B):
            mask[b * 5 : b * 5 + 4] = True
        self.box_mask = mask

    def forward(self, x: Tensor) -> Tensor:
        y = T.transpose(self.conv(x), (0, 2, 3, 1))
        return T.masked_sigmoid(y, self.box_mask)


KINDS = (
    "ConvBlock", "RepNBottleneck", "RepNCSP", "RepNCSPPELAN", "ADown", "SPPELAN", "Silence",
    "Upsample", "Concat", "CBLinear", "CBFuse", "Detect", "RevCouple",
)


@dataclass(frozen=True)
class BlockSpec:
    """Declarative description of one block and its closed-form output shape."""

    kind: str
    in_channels: int
    out_channels: int = 0
    mid_channels: int = 0
    depth: int = 1
    kernel: int = 1
    stride: int = 1
    num_boxes: int = 1
    num_classes: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.kind in ("RevCouple", "ADown") and self.in_channels % 2:
            raise ShapeError(f"{self.kind} requires even in_channels, got {self.in_channels}")
        if self.kind == "ADown" and self.out_channels % 2:
            raise ShapeError(f"ADown requires even out_channels, got {self.out_channels}")
        if self.kind == "RepNCSPPELAN" and self.mid_channels % 2:
            raise ShapeError(f"RepNCSPPELAN requires even mid_channels, got {self.mid_channels}")

    def output_shape(self, shape: tuple[int, int, int, int]) -> tuple[int, ...]:
        n, c, h, w = shape
        k = self.kind
        if k in ("Silence", "CBFuse"):
            return shape
        if k == "RevCouple":
            return shape
        if k == "ConvBlock":
            p = self.kernel // 2
            return (n, self.out_channels, T.conv_output_size(h, self.kernel, self.stride, p),
                    T.conv_output_size(w, self.kernel, self.stride, p))
        if k in ("RepNBottleneck", "RepNCSP", "RepNCSPPELAN", "SPPELAN", "CBLinear"):
            return (n, self.out_channels, h, w)
        if k == "ADown":
            return (n, self.out_channels, h // 2, w // 2)
        if k == "Upsample":
            return (n, c, h * self.stride, w * self.stride)
        if k == "Concat":
            return (n, c + self.out_channels, h, w)
        if k == "Detect":
            return (n, h, w, self.num_boxes * 5 + self.num_classes)
        raise AssertionError(k)

    def build(self, rng: np.random.Generator, dtype=np.float32) -> Module:
        k, cin, cout = self.kind, self.in_channels, self.out_channels
        if k == "ConvBlock":
            return ConvBlock(cin, cout, self.kernel, self.stride, rng=rng, dtype=dtype)
        if k == "RepNBottleneck":
            return RepNBottleneck(cin, cout, rng=rng, dtype=dtype)
        if k == "RepNCSP":
            return RepNCSP(cin, cout, self.depth, rng=rng, dtype=dtype)
        if k == "RepNCSPPELAN":
            return RepNCSPPELAN(cin, cout, self.mid_channels, self.depth, rng=rng, dtype=dtype)
        if k == "ADown":
            return ADown(cin, cout, rng=rng, dtype=dtype)
        if k == "SPPELAN":
            return SPPELAN(cin, cout, self.mid_channels, self.kernel, rng=rng, dtype=dtype)
        if k == "Silence":
            return Silence()
        if k == "Upsample":
            return Upsample(self.stride)
        if k == "Concat":
            return Concat()
        if k == "CBLinear":
            return CBLinear(cin, [cout], rng=rng, dtype=dtype)
        if k == "CBFuse":
            return CBFuse()
        if k == "Detect":
            return Detect(cin, self.num_boxes, self.num_classes, rng=rng, dtype=dtype)
        if k == "RevCouple":
            return RevCouple(cin, rng=rng, dtype=dtype)
        raise AssertionError(k)
