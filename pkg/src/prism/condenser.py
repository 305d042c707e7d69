"""Sparse key-frame condensation with gradient-guided frame insertion.

A synthetic video stores only a few key frames at explicit time indices;
the frames in between are linear blends of the two flanking keys.  Key
frames are learned by matching, per class, the parameter gradient a
freshly initialised network receives from the synthetic batch to the one
it receives from a real batch.  Every ``check_period`` iterations of the
insertion phase, each video may promote one in-between frame to a key: the
one whose loss gradient points most against both flanking key gradients.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autograd as ag
from .models import ModelSpec, bind, forward, init_params
from .rng import derive_seed, stream
from .videogen import VideoDataset, sample_real_batch

log = logging.getLogger(__name__)

MAGIC = b"PVSC"
FORMAT_VERSION = 1

INSERTION_MODES = ("gradient", "random", "disabled")
CRITERIA = ("cosine", "l2")
KEY_GRADIENTS = ("chain", "probe")
L2_THRESHOLD = 0.141


class NumericAbort(RuntimeError):
    """The matching loss became NaN or infinite."""


# ---------------------------------------------------------------------------
# sparse videos


@dataclass
class SparseVideo:
    label: int
    horizon: int
    indices: list[int]
    frames: list[np.ndarray]

    def __post_init__(self):
        self.indices = [int(i) for i in self.indices]
        self.frames = [np.asarray(f, dtype=np.float32) for f in self.frames]
        if len(self.indices) != len(self.frames):
            raise ValueError("one frame per key index required")
        if len(self.indices) < 2 or self.indices[0] != 0 or self.indices[-1] != self.horizon - 1:
            raise ValueError(f"key set must contain 0 and {self.horizon - 1}, got {self.indices}")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError(f"key indices must be strictly increasing, got {self.indices}")

    @property
    def key_count(self) -> int:
        return len(self.indices)

    @property
    def frame_shape(self) -> tuple[int, ...]:
        return self.frames[0].shape

    def copy(self) -> "SparseVideo":
        return SparseVideo(self.label, self.horizon, list(self.indices), [f.copy() for f in self.frames])

    def insert(self, t: int, frame: np.ndarray) -> None:
        if t in self.indices or not 0 < t < self.horizon - 1:
            raise ValueError(f"cannot insert key at {t}")
        pos = int(np.searchsorted(self.indices, t))
        self.indices.insert(pos, int(t))
        self.frames.insert(pos, np.asarray(frame, dtype=np.float32).copy())


def init_synthetic(class_ids, vpc: int, geometry, seed: int) -> list[SparseVideo]:
    """``vpc`` two-key videos per class, pixels ~ clip(N(0.5, 0.25^2), 0, 1)."""
    if vpc < 1:
        raise ValueError("vpc must be at least 1")
    T, H, W, C = geometry
    rng = stream(seed, "syn-init")
    out = []
    for c in class_ids:
        for _ in range(vpc):
            frames = np.clip(rng.normal(0.5, 0.25, size=(2, H, W, C)), 0.0, 1.0).astype(np.float32)
            out.append(SparseVideo(int(c), T, [0, T - 1], [frames[0], frames[1]]))
    return out


def segments(indices: list[int]):
    """Yield ``(t, left_key_pos, alpha)`` for every non-key time index."""
    for j in range(len(indices) - 1):
        lo, hi = indices[j], indices[j + 1]
        for t in range(lo + 1, hi):
            yield t, j, (hi - t) / (hi - lo)


def interpolate(video: SparseVideo) -> np.ndarray:
    """Full ``(T, H, W, C)`` sequence; keys verbatim, blends in between."""
    out = np.empty((video.horizon, *video.frame_shape), np.float32)
    for i, f in zip(video.indices, video.frames):
        out[i] = f
    for t, j, alpha in segments(video.indices):
        out[t] = np.float32(alpha) * video.frames[j] + np.float32(1.0 - alpha) * video.frames[j + 1]
    return out


def interpolate_node(keys: list[ag.Node], indices: list[int], horizon: int) -> ag.Node:
    """Graph version of :func:`interpolate`; gradients flow back to ``keys``."""
    slots: list[ag.Node | None] = [None] * horizon
    for i, k in zip(indices, keys):
        slots[i] = k
    for t, j, alpha in segments(indices):
        slots[t] = ag.scale(keys[j], alpha) + ag.scale(keys[j + 1], 1.0 - alpha)
    return ag.stack(slots, axis=0)


# ---------------------------------------------------------------------------
# gradient matching


def param_gradient(spec: ModelSpec, params: dict[str, np.ndarray], batch: np.ndarray, labels) -> np.ndarray:
    """Flattened task-loss gradient w.r.t. ``params`` (first order only)."""
    g = ag.Graph()
    p = bind(g, params)
    loss = ag.softmax_cross_entropy(forward(spec, p, g.const(batch)), labels)
    grads = g.backward(loss, p.values())
    return np.concatenate([grads[node].ravel() for node in p.values()])


def matching_loss(spec: ModelSpec, params: dict[str, ag.Node], syn: dict[int, ag.Node],
                  real: dict[int, np.ndarray]) -> ag.Node:
    """Sum over classes of ||grad_theta L(syn_c) - grad_theta L(real_c)||^2.

    ``params`` are parameter leaves of the graph holding the ``syn`` batch
    nodes; ``real`` batches are plain arrays and their gradient is a constant.
    """
    graph = next(iter(params.values())).graph
    raw = {k: v.value for k, v in params.items()}
    leaves = list(params.values())
    total = None
    for c in sorted(syn):
        x = syn[c]
        g_real = param_gradient(spec, raw, real[c], np.full(len(real[c]), c))
        loss = ag.softmax_cross_entropy(forward(spec, params, x), np.full(x.shape[0], c))
        g_syn = graph.grad_as_node(loss, leaves)
        term = ag.sqnorm(g_syn - graph.const(g_real))
        total = term if total is None else total + term
    return total


def key_gradients(video: SparseVideo, position_grads: np.ndarray) -> list[np.ndarray]:
    """Chain-rule gradient of each key from per-position gradients ``(T, ...)``.

    Every blended position passes ``alpha`` of its gradient to the left key
    and ``1 - alpha`` to the right key.
    """
    out = [position_grads[i].astype(np.float64) for i in video.indices]
    for t, j, alpha in segments(video.indices):
        out[j] += alpha * position_grads[t]
        out[j + 1] += (1.0 - alpha) * position_grads[t]
    return [g.astype(np.float32) for g in out]


def frame_gradients(video: SparseVideo, position_grads: np.ndarray, key_gradient: str = "probe") -> dict[int, np.ndarray]:
    """Flattened gradient for every time index.

    Non-key positions get their probe gradient (the blended frame treated as
    its own leaf).  Keys get their own-position gradient by default, or the
    chain-rule total (own position plus alpha-weighted shares of the blended
    positions) with ``key_gradient="chain"``.
    """
    out = {t: position_grads[t].ravel().astype(np.float32) for t in range(video.horizon)}
    if key_gradient == "chain":
        for i, g in zip(video.indices, key_gradients(video, position_grads)):
            out[i] = g.ravel()
    return out


# ---------------------------------------------------------------------------
# insertion


@dataclass(frozen=True)
class InsertionEvent:
    iteration: int
    class_id: int
    video: int
    time: int
    left: int
    right: int
    cos_left: float
    cos_right: float
    criterion: str = "cosine"
    mode: str = "gradient"


def cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    na, nb = math.sqrt(a @ a), math.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        return None
    return float(a @ b) / (na * nb)


def unit_distance(cos: float) -> float:
    """``||a/|a| - b/|b|||`` from the cosine of the angle between a and b."""
    return math.sqrt(max(0.0, 2.0 - 2.0 * cos))


def _eligible(cl: float, cr: float, criterion: str, eps: float, threshold: float) -> bool:
    if criterion == "cosine":
        return cl < eps and cr < eps
    return unit_distance(cl) > threshold and unit_distance(cr) > threshold


def insertion_scan(video: SparseVideo, grads: dict[int, np.ndarray], *, eps: float = 0.0,
                   criterion: str = "cosine", mode: str = "gradient", threshold: float = L2_THRESHOLD,
                   cap: int | None = None, rng: np.random.Generator | None = None,
                   iteration: int = 0, video_index: int = 0) -> InsertionEvent | None:
    """Pick at most one non-key time index to promote, or ``None``.

    A candidate is eligible when both its cosines with the flanking key
    gradients are below ``eps`` (or, for ``criterion="l2"``, both unit
    distances exceed ``threshold``).  ``mode="gradient"`` takes the eligible
    candidate with the smallest max-cosine, lowest index on ties;
    ``mode="random"`` takes a uniform draw from all candidates whenever any
    candidate is eligible.  The caller commits the insertion.
    """
    if mode == "disabled":
        return None
    cap = video.horizon if cap is None else min(cap, video.horizon)
    if video.key_count >= cap:
        return None
    scored = []
    for t, j, _ in segments(video.indices):
        left, right = video.indices[j], video.indices[j + 1]
        cl, cr = cosine(grads[t], grads[left]), cosine(grads[t], grads[right])
        if cl is None or cr is None:
            log.debug("zero gradient at t=%d, candidate skipped", t)
            continue
        scored.append((t, left, right, cl, cr))
    eligible = [s for s in scored if _eligible(s[3], s[4], criterion, eps, threshold)]
    if not eligible:
        return None
    if mode == "random":
        if rng is None:
            raise ValueError("random insertion needs an rng")
        pool = [(t, video.indices[j], video.indices[j + 1]) for t, j, _ in segments(video.indices)]
        t, left, right = pool[int(rng.integers(len(pool)))]
        cl = cosine(grads[t], grads[left])
        cr = cosine(grads[t], grads[right])
        cl = float("nan") if cl is None else cl
        cr = float("nan") if cr is None else cr
        return InsertionEvent(iteration, video.label, video_index, t, left, right, cl, cr, criterion, mode)
    # min over max-cosine == max over min-distance, so one ordering serves both criteria
    t, left, right, cl, cr = min(eligible, key=lambda s: (max(s[3], s[4]), s[0]))
    return InsertionEvent(iteration, video.label, video_index, t, left, right, cl, cr, criterion, mode)


def verify_blockage(g_t, g_i, g_next, lambdas=None) -> bool:
    """True iff <g_t, lam*(-g_i) + (1-lam)*(-g_next)> > 0 for every lam sampled.

    Requires <g_t, g_i> < 0 and <g_t, g_next> < 0.  ``lambdas`` defaults to
    eleven evenly spaced values on [0, 1]; endpoints are always included.
    """
    g_t, g_i, g_next = (np.asarray(v, np.float64).ravel() for v in (g_t, g_i, g_next))
    a, b = float(g_t @ g_i), float(g_t @ g_next)
    if not (a < 0 and b < 0):
        raise ValueError(f"precondition violated: <g_t,g_i>={a:.3g}, <g_t,g_next>={b:.3g} must both be < 0")
    lam = np.linspace(0.0, 1.0, 11) if lambdas is None else np.asarray(lambdas, np.float64)
    lam = np.union1d(lam, [0.0, 1.0])
    for l in lam:
        v = l * (-g_i) + (1.0 - l) * (-g_next)
        if not float(g_t @ v) > 0:
            return False
    return True


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class PhaseSchedule:
    total: int
    warmup: float = 0.2
    cooldown: float = 0.2
    period: int = 10

    def __post_init__(self):
        if self.total < 1 or self.period < 1:
            raise ValueError("total and period must be positive")
        if not (0 <= self.warmup and 0 <= self.cooldown and self.warmup + self.cooldown < 1):
            raise ValueError("need 0 <= warmup, cooldown and warmup + cooldown < 1")

    @property
    def insertion_start(self) -> int:
        return math.floor(Fraction(str(self.warmup)) * self.total)

    @property
    def cooldown_start(self) -> int:
        return math.ceil((1 - Fraction(str(self.cooldown))) * self.total)


def phase_of(iteration: int, schedule: PhaseSchedule) -> str:
    if not 0 <= iteration < schedule.total:
        raise ValueError(f"iteration {iteration} outside [0, {schedule.total})")
    if iteration < schedule.insertion_start:
        return "warm-up"
    if iteration >= schedule.cooldown_start:
        return "cool-down"
    return "insertion"


# ---------------------------------------------------------------------------
# outer loop


@dataclass(frozen=True)
class CondenseConfig:
    vpc: int = 1
    iterations: int = 400
    lr: float = 0.1
    momentum: float = 0.95
    real_batch: int = 32
    eps: float = 0.0
    insertion: str = "gradient"
    criterion: str = "cosine"
    l2_threshold: float = L2_THRESHOLD
    warmup: float = 0.2
    cooldown: float = 0.2
    check_period: int = 10
    max_keys: int | None = None
    key_gradient: str = "probe"
    theta_reset: int = 1
    theta_lr: float = 0.01
    flip: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.insertion not in INSERTION_MODES:
            raise ValueError(f"insertion must be one of {INSERTION_MODES}")
        if self.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}")
        if self.key_gradient not in KEY_GRADIENTS:
            raise ValueError(f"key_gradient must be one of {KEY_GRADIENTS}")
        if self.vpc < 1 or self.iterations < 1 or self.real_batch < 1 or self.theta_reset < 1:
            raise ValueError("vpc, iterations, real_batch and theta_reset must be positive")

    @property
    def schedule(self) -> PhaseSchedule:
        return PhaseSchedule(self.iterations, self.warmup, self.cooldown, self.check_period)

    def replace(self, **changes) -> "CondenseConfig":
        return replace(self, **changes)


@dataclass
class CondenseResult:
    videos: list[SparseVideo]
    events: list[InsertionEvent]
    loss_trace: list[float]
    key_counts: list[list[int]] = field(default_factory=list)


def condense(config: CondenseConfig, dataset: VideoDataset, spec: ModelSpec, callback=None) -> CondenseResult:
    """Learn a sparse synthetic set for ``dataset`` with network ``spec``."""
    if dataset.num_classes != spec.num_classes or tuple(dataset.geometry) != tuple(spec.geometry):
        raise ValueError("dataset classes/geometry do not match the model spec")
    T = spec.geometry[0]
    classes = list(dataset.class_ids)
    label_of = {c: k for k, c in enumerate(classes)}
    videos = init_synthetic(classes, config.vpc, spec.geometry, config.seed)
    momenta = [[np.zeros_like(f) for f in v.frames] for v in videos]
    by_class = {c: [j for j, v in enumerate(videos) if v.label == c] for c in classes}
    schedule = config.schedule
    cap = T if config.max_keys is None else min(config.max_keys, T)
    events: list[InsertionEvent] = []
    trace: list[float] = []
    counts: list[list[int]] = []
    theta = None

    for it in range(config.iterations):
        if theta is None or it % config.theta_reset == 0:
            theta = init_params(spec, derive_seed(config.seed, "theta", it))
        graph = ag.Graph()
        params = bind(graph, theta)
        positions: dict[int, list[ag.Node]] = {}
        syn, real = {}, {}
        for c in classes:
            clips = []
            for j in by_class[c]:
                full = interpolate(videos[j])
                positions[j] = [graph.data(full[t]) for t in range(T)]
                clips.append(ag.stack(positions[j], axis=0))
            syn[label_of[c]] = ag.stack(clips, axis=0)
            rng = stream(config.seed, "real", it, c)
            real[label_of[c]] = sample_real_batch(dataset, c, config.real_batch, rng, flip=config.flip)
        loss = matching_loss(spec, params, syn, real)
        value = float(loss.value)
        if not math.isfinite(value):
            culprit = _nonfinite_class(spec, theta, syn, real, classes)
            raise NumericAbort(f"non-finite matching loss at iteration {it} (class {culprit})")
        trace.append(value)
        leaves = [n for j in sorted(positions) for n in positions[j]]
        grads = graph.backward(loss, leaves)

        scan = phase_of(it, schedule) == "insertion" and it % schedule.period == 0
        pending = []
        for j, video in enumerate(videos):
            pos = np.stack([grads[n] for n in positions[j]])
            kg = key_gradients(video, pos)
            for f, buf, g in zip(video.frames, momenta[j], kg):
                buf *= np.float32(config.momentum)
                buf += g
                f -= np.float32(config.lr) * buf
            if scan:
                fg = frame_gradients(video, pos, config.key_gradient)
                rng = stream(config.seed, "insert", it, j)
                ev = insertion_scan(video, fg, eps=config.eps, criterion=config.criterion,
                                    mode=config.insertion, threshold=config.l2_threshold, cap=cap,
                                    rng=rng, iteration=it, video_index=by_class[video.label].index(j))
                if ev is not None:
                    pending.append((j, ev))
        for j, ev in pending:
            frame = interpolate(videos[j])[ev.time]
            videos[j].insert(ev.time, frame)
            momenta[j].insert(videos[j].indices.index(ev.time), np.zeros_like(frame))
            events.append(ev)
            log.info("iter %d: class %d video %d gained key %d (cos %.3f, %.3f)",
                     it, ev.class_id, ev.video, ev.time, ev.cos_left, ev.cos_right)
        if config.theta_reset > 1:
            theta = _theta_step(spec, theta, videos, label_of, config.theta_lr)
        counts.append([v.key_count for v in videos])
        if callback is not None:
            callback(it, value, videos)
    return CondenseResult(videos, events, trace, counts)


def _theta_step(spec, theta, videos, label_of, lr):
    batch = np.stack([interpolate(v) for v in videos])
    labels = np.array([label_of[v.label] for v in videos])
    flat = param_gradient(spec, theta, batch, labels)
    out, start = {}, 0
    for k, v in theta.items():
        out[k] = v - np.float32(lr) * flat[start : start + v.size].reshape(v.shape)
        start += v.size
    return out


def _nonfinite_class(spec, theta, syn, real, classes):
    for k, c in enumerate(classes):
        g = param_gradient(spec, theta, real[k], np.full(len(real[k]), k))
        s = param_gradient(spec, theta, syn[k].value, np.full(syn[k].shape[0], k))
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(s))):
            return c
    return "unknown"


# ---------------------------------------------------------------------------
# container


def to_bytes(videos: list[SparseVideo], geometry) -> bytes:
    """PVSC container; frames are clamped to [0, 1] on export."""
    T, H, W, C = geometry
    out = [MAGIC, struct.pack("<6I", FORMAT_VERSION, T, H, W, C, len(videos))]
    for v in videos:
        out.append(struct.pack("<2I", v.label, v.key_count))
        out.append(struct.pack(f"<{v.key_count}I", *v.indices))
        for f in v.frames:
            out.append(np.clip(f, 0.0, 1.0).astype("<f4").tobytes())
    return b"".join(out)


def from_bytes(blob: bytes) -> tuple[list[SparseVideo], tuple[int, int, int, int]]:
    if blob[:4] != MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}: expected {MAGIC!r}")
    version, T, H, W, C, n = struct.unpack_from("<6I", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    offset, frame = 28, H * W * C
    videos = []
    for _ in range(n):
        label, k = struct.unpack_from("<2I", blob, offset)
        offset += 8
        indices = list(struct.unpack_from(f"<{k}I", blob, offset))
        offset += 4 * k
        if len(blob) < offset + 4 * k * frame:
            raise ValueError("truncated PVSC payload")
        data = np.frombuffer(blob, "<f4", count=k * frame, offset=offset).astype(np.float32)
        offset += 4 * k * frame
        videos.append(SparseVideo(label, T, indices, list(data.reshape(k, H, W, C))))
    if offset != len(blob):
        raise ValueError("trailing bytes after PVSC payload")
    return videos, (T, H, W, C)


def save(videos: list[SparseVideo], geometry, path) -> int:
    blob = to_bytes(videos, geometry)
    Path(path).write_bytes(blob)
    return len(blob)


def load(path):
    return from_bytes(Path(path).read_bytes())
