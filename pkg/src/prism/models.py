"""Small video classifiers built on :mod:`prism.autograd`.

Three architectures share one parameter convention (a name -> array dict
whose shapes depend only on the :class:`ModelSpec`):

``conv3d-micro``
    two blocks of 3-D conv, relu, 2x spatial mean-pool; global mean over
    (T, H, W); linear head.  ``head="flatten"`` swaps the global mean for a
    flatten that keeps time and position, like the fully connected layers
    on top of a C3D-style trunk.
``conv2d-mean``
    the same blocks with 1x3x3 kernels (per-frame 2-D conv), so the
    temporal mean at the end makes it invariant to frame order.
``conv2d-recurrent``
    per-frame 2-D embedding fed through the affine recurrence
    ``h_t = h_{t-1} U + e_t V + b``; the last state goes to the head.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .rng import stream

ARCHITECTURES = ("conv3d-micro", "conv2d-mean", "conv2d-recurrent")
HEADS = ("mean", "flatten")


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "conv3d-micro"
    num_classes: int = 6
    geometry: tuple[int, int, int, int] = (8, 16, 16, 3)
    widths: tuple[int, ...] = (8, 16)
    kernel: tuple[int, int, int] = (3, 3, 3)
    head: str = "mean"

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.head == "flatten" and self.arch != "conv3d-micro":
            raise ValueError(f"{self.arch} has no flatten head (conv3d-micro only)")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        T, H, W, C = self.geometry
        scale = 2 ** len(self.widths)
        if H % scale or W % scale:
            raise ValueError(f"H and W must be divisible by {scale} for {len(self.widths)} pooling blocks")
        kt, kh, kw = self.conv_kernel
        if kt > T or kh > H or kw > W:
            raise ValueError(f"kernel {self.conv_kernel} larger than geometry {self.geometry}")

    @property
    def conv_kernel(self) -> tuple[int, int, int]:
        if self.arch == "conv3d-micro":
            return tuple(self.kernel)
        return (1, self.kernel[1], self.kernel[2])

    def with_arch(self, arch: str) -> "ModelSpec":
        return replace(self, arch=arch, head=self.head if arch == "conv3d-micro" else "mean")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = self.geometry[3]
        for i, cout in enumerate(self.widths):
            shapes[f"conv{i}.w"] = (*self.conv_kernel, cin, cout)
            shapes[f"conv{i}.b"] = (cout,)
            cin = cout
        if self.arch == "conv2d-recurrent":
            shapes["rec.u"] = (cin, cin)
            shapes["rec.v"] = (cin, cin)
            shapes["rec.b"] = (cin,)
        feat = cin
        if self.head == "flatten":
            T, H, W, _ = self.geometry
            s = 2 ** len(self.widths)
            feat = cin * T * (H // s) * (W // s)
        shapes["head.w"] = (feat, self.num_classes)
        shapes["head.b"] = (self.num_classes,)
        return shapes

    def num_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))


def init_params(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """Uniform(-sqrt(3/fan_in), sqrt(3/fan_in)) weights, zero biases."""
    rng = stream(seed, "init", spec.arch)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, np.float32)
            continue
        fan_in = int(np.prod(shape[:-1]))
        bound = np.sqrt(3.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return params


def bind(graph: ag.Graph, params: dict[str, np.ndarray]) -> dict[str, ag.Node]:
    """Register ``params`` as parameter leaves of ``graph``."""
    return {name: graph.param(value, name=name) for name, value in params.items()}


def _bias(x: ag.Node, b: ag.Node) -> ag.Node:
    shape = (1,) * (x.ndim - 1) + (b.shape[0],)
    return x + ag.expand(ag.reshape(b, shape), x.shape)


def _pool2(x: ag.Node) -> ag.Node:
    B, T, H, W, C = x.shape
    x = ag.reshape(x, (B, T, H // 2, 2, W // 2, 2, C))
    return ag.mean(x, axis=(3, 5))


def _blocks(spec: ModelSpec, p: dict[str, ag.Node], x: ag.Node) -> ag.Node:
    for i in range(len(spec.widths)):
        x = ag.conv3d(x, p[f"conv{i}.w"])
        x = ag.relu(_bias(x, p[f"conv{i}.b"]))
        x = _pool2(x)
    return x


def forward(spec: ModelSpec, params: dict[str, ag.Node], batch: ag.Node) -> ag.Node:
    """Logits ``(B, num_classes)`` for a ``(B, T, H, W, C)`` batch node."""
    if batch.ndim != 5 or tuple(batch.shape[1:]) != tuple(spec.geometry):
        raise ag.ShapeError(f"batch shape {batch.shape} does not match geometry {spec.geometry}")
    feats = _blocks(spec, params, batch)
    if spec.arch == "conv2d-recurrent":
        emb = ag.mean(feats, axis=(2, 3))  # (B, T, D)
        h = None
        for t in range(emb.shape[1]):
            step = ag.take(emb, 1, t) @ params["rec.v"]
            if h is not None:
                step = step + h @ params["rec.u"]
            h = _bias(step, params["rec.b"])
        z = h
    elif spec.head == "flatten":
        z = ag.reshape(feats, (feats.shape[0], int(np.prod(feats.shape[1:]))))
    else:
        z = ag.mean(feats, axis=(1, 2, 3))
    return _bias(z @ params["head.w"], params["head.b"])


def embed(spec: ModelSpec, params: dict[str, np.ndarray], videos: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Pooled pre-head features ``(N, widths[-1])`` for a stack of videos."""
    out = []
    for start in range(0, len(videos), chunk):
        g = ag.Graph()
        with g.no_record():
            p = {k: g.const(v) for k, v in params.items()}
            feats = _blocks(spec, p, g.const(videos[start : start + chunk]))
            out.append(np.mean(feats.value, axis=(1, 2, 3), dtype=np.float64))
    return np.concatenate(out, axis=0)


def predict(spec: ModelSpec, params: dict[str, np.ndarray], videos: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Logits for a stack of videos, evaluated without recording a graph."""
    out = []
    for start in range(0, len(videos), chunk):
        g = ag.Graph()
        with g.no_record():
            p = {k: g.const(v) for k, v in params.items()}
            out.append(forward(spec, p, g.const(videos[start : start + chunk])).value)
    return np.concatenate(out, axis=0)
