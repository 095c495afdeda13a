"""Toy YOLOv9-style detector: GELAN backbone and neck, grid heads, and a
training-only auxiliary reversible branch that can be stripped for inference."""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .blocks import (
    ADown,
    CBLinear,
    ConvBlock,
    Detect,
    Module,
    RepNCSPPELAN,
    RevCouple,
    Silence,
    SPPELAN,
    cb_fuse,
)
from .tensor import ShapeError, Tensor

STRIDES = (8, 16, 32)


@dataclass
class ModelConfig:
    input_size: int = 160
    num_classes: int = 3
    num_boxes: int = 2
    strides: tuple[int, ...] = STRIDES
    width: int = 16
    depth: int = 1
    aux_enabled: bool = True
    seed: int = 0
    dtype: str = "float32"
    name: str = "c"

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.validate()

    def validate(self) -> None:
        if not self.strides or any(s not in STRIDES for s in self.strides):
            raise ValueError(f"strides must be a non-empty subset of {STRIDES}, got {self.strides}")
        if list(self.strides) != sorted(set(self.strides)):
            raise ValueError(f"strides must be strictly increasing, got {self.strides}")
        if self.input_size <= 0 or self.input_size % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        for s in self.strides:
            if self.input_size % s:
                raise ValueError(f"input_size {self.input_size} not divisible by stride {s}")
        if self.width < 4 or self.width % 4:
            raise ValueError(f"width must be a positive multiple of 4, got {self.width}")
        if self.depth < 0:
            raise ValueError(f"depth must be non-negative, got {self.depth}")
        if self.num_classes < 1 or self.num_boxes < 1:
            raise ValueError("num_classes and num_boxes must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def grid_sizes(self) -> list[int]:
        return [self.input_size // s for s in self.strides]

    @property
    def scales(self) -> list[tuple[int, int]]:
        return [(s, self.input_size // s) for s in self.strides]

    @property
    def depth_last(self) -> int:
        return self.num_boxes * 5 + self.num_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


PRESETS = {
    "c": dict(width=16, depth=1),
    "e": dict(width=24, depth=2),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name], name=name)
    kw.update(overrides)
    return ModelConfig(**kw)


@dataclass
class Parameter:
    tensor: Tensor
    name: str
    trainable: bool = True
    aux_only: bool = False


@dataclass
class Predictions:
    main: list[Tensor]
    aux: list[Tensor] | None = None


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        w, n = cfg.width, cfg.depth
        c3 = 4 * w
        kw = dict(rng=rng, dtype=dtype)
        self.silence = Silence()
        self.stem = ConvBlock(3, w, 3, 2, **kw)
        self.down1 = ADown(w, 2 * w, **kw)
        self.elan1 = RepNCSPPELAN(2 * w, 2 * w, w, n, **kw)
        self.down2 = ADown(2 * w, c3, **kw)
        self.elan2 = RepNCSPPELAN(c3, c3, c3, n, **kw)
        self.down3 = ADown(c3, c3, **kw)
        self.elan3 = RepNCSPPELAN(c3, c3, c3, n, **kw)
        self.down4 = ADown(c3, c3, **kw)
        self.elan4 = RepNCSPPELAN(c3, c3, c3, n, **kw)
        self.spp = SPPELAN(c3, c3, 2 * w, **kw)

    def forward(self, x: Tensor) -> list[Tensor]:
        y = self.stem(x)
        y = self.elan1(self.down1(y))
        p3 = self.elan2(self.down2(y))
        p4 = self.elan3(self.down3(p3))
        p5 = self.spp(self.elan4(self.down4(p4)))
        return [p3, p4, p5]


class Neck(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        c = 4 * cfg.width
        self.elan4 = RepNCSPPELAN(2 * c, c, c, cfg.depth, rng=rng, dtype=dtype)
        self.elan3 = RepNCSPPELAN(2 * c, c, c, cfg.depth, rng=rng, dtype=dtype)

    def forward(self, feats: list[Tensor]) -> list[Tensor]:
        p3, p4, p5 = feats
        n4 = self.elan4(T.concat_channels([T.upsample_nearest(p5, 2), p4]))
        n3 = self.elan3(T.concat_channels([T.upsample_nearest(n4, 2), p3]))
        return [n3, n4, p5]


class Heads(Module):
    def __init__(self, cfg: ModelConfig, cin: int, rng, dtype):
        super().__init__()
        self.levels = [STRIDES.index(s) for s in cfg.strides]
        self.heads = [
            self.add_child(f"p{lvl + 3}", Detect(cin, cfg.num_boxes, cfg.num_classes, rng=rng, dtype=dtype))
            for lvl in self.levels
        ]

    def forward(self, feats: list[Tensor]) -> list[Tensor]:
        return [head(feats[lvl]) for head, lvl in zip(self.heads, self.levels)]


class Auxiliary(Module):
    """Reversible auxiliary branch.

    A light image path (from the silence output) is fused level by level with
    CBLinear taps of the main backbone, passed through additive coupling blocks
    and supervised by its own detect heads.  Training only.
    """

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        w = cfg.width
        ca = 2 * w
        c3 = 4 * w
        kw = dict(rng=rng, dtype=dtype)
        self.stem = ConvBlock(3, w // 2, 3, 2, **kw)
        self.down1 = ADown(w // 2, w, **kw)
        self.down2 = ADown(w, ca, **kw)
        self.down3 = ADown(ca, ca, **kw)
        self.down4 = ADown(ca, ca, **kw)
        self.cbl3 = CBLinear(c3, [ca], **kw)
        self.cbl4 = CBLinear(c3, [ca, ca], **kw)
        self.cbl5 = CBLinear(c3, [ca, ca, ca], **kw)
        self.rev3 = RevCouple(ca, **kw)
        self.rev4 = RevCouple(ca, **kw)
        self.rev5 = RevCouple(ca, **kw)
        self.heads = Heads(cfg, ca, rng, dtype)

    def forward(self, x: Tensor, feats: list[Tensor]) -> list[Tensor]:
        p3, p4, p5 = feats
        t3 = self.cbl3(p3)
        t4 = self.cbl4(p4)
        t5 = self.cbl5(p5)
        a = self.down2(self.down1(self.stem(x)))
        a3 = self.rev3(cb_fuse([t3[0], t4[0], t5[0]], a))
        a4 = self.rev4(cb_fuse([t4[1], t5[1]], self.down3(a3)))
        a5 = self.rev5(cb_fuse([t5[2]], self.down4(a4)))
        return self.heads([a3, a4, a5])


class Model(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        self.backbone = Backbone(cfg, rng, dtype)
        self.neck = Neck(cfg, rng, dtype)
        self.head = Heads(cfg, 4 * cfg.width, rng, dtype)
        self.aux = Auxiliary(cfg, rng, dtype) if cfg.aux_enabled else None
        self.stripped = False

    @property
    def has_aux(self) -> bool:
        return self.aux is not None

    def parameters(self) -> list[Parameter]:
        return [
            Parameter(t, name, True, name.startswith("aux."))
            for name, t in self.named_tensors()
        ]

    def param_count(self) -> int:
        return self.num_params()

    def aux_param_count(self) -> int:
        return sum(p.tensor.data.size for p in self.parameters() if p.aux_only)

    def forward(self, images: Tensor, mode: str = "infer", batch_stats: bool | None = None) -> Predictions:
        """Run the network.

        ``mode="train"`` also evaluates the auxiliary branch; ``"infer"`` never
        touches it.  ``batch_stats`` selects batch-norm batch statistics
        (default: only in train mode).
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if mode == "train" and self.stripped:
            raise ValueError("auxiliary branch was stripped; this model only supports mode='infer'")
        s = self.config.input_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (s, s):
            raise ShapeError(f"expected images of shape N x 3 x {s} x {s}, got {images.shape}")
        if batch_stats is None:
            batch_stats = mode == "train"
        self.train(batch_stats)
        x = self.backbone.silence(images)
        feats = self.backbone(x)
        main = self.head(self.neck(feats))
        aux = None
        if mode == "train" and self.aux is not None:
            aux = self.aux(x, feats)
        return Predictions(main, aux)

    def detect_tensors(self, images: np.ndarray) -> list[np.ndarray]:
        """Inference-mode raw grids as numpy arrays (no graph recorded)."""
        with T.no_grad():
            preds = self.forward(Tensor(images.astype(self.config.dtype, copy=False)), "infer")
        return [p.data for p in preds.main]


def build_model(config: ModelConfig) -> Model:
    return Model(config)


def strip_auxiliary(model: Model) -> Model:
    """Copy of ``model`` without the auxiliary branch; inference outputs are unchanged."""
    aux = model.aux
    model.aux = None
    model._children.pop("aux", None)
    try:
        stripped = copy.deepcopy(model)
    finally:
        model.aux = aux
        if aux is not None:
            model._children["aux"] = aux
    stripped.config = dataclasses.replace(model.config, aux_enabled=False)
    stripped.stripped = True
    return stripped
