"""Train fresh classifiers on condensed or coreset data and score them on
the real held-out split.  Also: storage accounting, the report table and
key-frame image dumps.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .condenser import NumericAbort, SparseVideo, interpolate
from .models import ModelSpec, bind, forward, init_params, predict
from .rng import derive_seed, stream
from .videogen import VideoDataset

log = logging.getLogger(__name__)

REPORT_HEADER = ("method", "architecture", "seed_group", "accuracy_mean", "accuracy_std",
                 "frames_total", "bytes", "index_bytes")
RUNS_HEADER = ("method", "architecture", "repeat", "seed", "accuracy")
HISTOGRAM_HEADER = ("method", "class_id", "frames")
BYTES_PER_VALUE = 4


@dataclass(frozen=True)
class EvalProtocol:
    epochs: int = 100
    lr: float = 0.1
    batch_size: int = 32
    repeats: int = 3
    momentum: float = 0.95
    flip: bool = False
    clip: float | None = 1.0
    architectures: tuple[str, ...] = ("conv3d-micro", "conv2d-mean", "conv2d-recurrent")

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.repeats < 1:
            raise ValueError("epochs must be >= 0, batch_size and repeats >= 1")


@dataclass(frozen=True)
class StorageAccount:
    frames: int
    bytes: int
    index_bytes: int


def storage_of(item, geometry) -> StorageAccount:
    """Bytes needed to store ``item`` as float32 frames.

    ``item`` is either a list of :class:`SparseVideo` (only key frames count)
    or an integer number of full-length videos (coreset / dense).
    """
    T, H, W, C = geometry
    if isinstance(item, (int, np.integer)):
        frames, index = int(item) * T, 0
    else:
        frames = sum(v.key_count for v in item)
        index = BYTES_PER_VALUE * frames
    return StorageAccount(frames, frames * H * W * C * BYTES_PER_VALUE, index)


def expand_condensed(videos: list[SparseVideo], class_ids) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(N, T, H, W, C)`` clamped videos plus label positions."""
    pos = {c: k for k, c in enumerate(class_ids)}
    dense = np.stack([np.clip(interpolate(v), 0.0, 1.0) for v in videos])
    labels = np.array([pos[v.label] for v in videos], np.int64)
    return dense, labels


def fingerprint(video: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(video, np.float32).tobytes()).hexdigest()


def check_isolation(train_videos: np.ndarray, dataset: VideoDataset) -> bool:
    """True when no training video is byte-identical to a real train video."""
    real = {fingerprint(v) for v in dataset.train.reshape(-1, *dataset.geometry)}
    return not any(fingerprint(v) in real for v in train_videos)


@dataclass
class EvalRun:
    accuracy: float
    per_class: np.ndarray
    counts: np.ndarray
    final_loss: float


def _loss_and_grads(spec, params, batch, labels):
    g = ag.Graph()
    p = bind(g, params)
    loss = ag.softmax_cross_entropy(forward(spec, p, g.const(batch)), labels)
    grads = g.backward(loss, list(p.values()))
    return float(loss.value), {k: grads[n] for k, n in p.items()}


def score(spec: ModelSpec, params, dataset: VideoDataset) -> tuple[float, np.ndarray, np.ndarray]:
    """Top-1 accuracy on the real test split, overall and per class."""
    videos, labels = dataset.split_arrays("test")
    pred = np.argmax(predict(spec, params, videos), axis=1)
    hits = np.bincount(labels, weights=(pred == labels), minlength=dataset.num_classes)
    counts = np.bincount(labels, minlength=dataset.num_classes)
    return float(np.mean(pred == labels)), hits / counts, counts


def _eval_spec(dataset: VideoDataset, arch: str, model: ModelSpec | None) -> ModelSpec:
    if model is None:
        return ModelSpec(arch=arch, num_classes=dataset.num_classes, geometry=dataset.geometry)
    if model.num_classes != dataset.num_classes or tuple(model.geometry) != tuple(dataset.geometry):
        raise ValueError("model spec classes/geometry do not match the dataset")
    return model.with_arch(arch)


def train_and_test(videos: np.ndarray, labels: np.ndarray, dataset: VideoDataset,
                   protocol: EvalProtocol, arch: str, seed: int, model: ModelSpec | None = None) -> EvalRun:
    """Fresh network, SGD with momentum on ``videos``, scored on real test data.

    ``model`` supplies widths and head; ``arch`` overrides its architecture.
    """
    if len(videos) == 0:
        raise ValueError("empty training set")
    spec = _eval_spec(dataset, arch, model)
    params = init_params(spec, seed)
    bufs = {k: np.zeros_like(v) for k, v in params.items()}
    n = len(videos)
    loss = float("nan")
    for epoch in range(protocol.epochs):
        rng = stream(seed, "eval-order", epoch)
        order = rng.permutation(n)
        for start in range(0, n, protocol.batch_size):
            idx = order[start : start + protocol.batch_size]
            batch = videos[idx]
            if protocol.flip:
                mask = rng.random(len(idx)) < 0.5
                batch = np.where(mask[:, None, None, None, None], batch[:, :, :, ::-1], batch)
            loss, grads = _loss_and_grads(spec, params, batch, labels[idx])
            if not math.isfinite(loss):
                raise NumericAbort(f"non-finite training loss: arch {arch}, seed {seed}, epoch {epoch}, batch at {start}")
            if protocol.clip is not None:
                norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
                if norm > protocol.clip:
                    grads = {k: g * np.float32(protocol.clip / norm) for k, g in grads.items()}
            for k in params:
                bufs[k] = np.float32(protocol.momentum) * bufs[k] + grads[k]
                params[k] = params[k] - np.float32(protocol.lr) * bufs[k]
    acc, per_class, counts = score(spec, params, dataset)
    return EvalRun(acc, per_class, counts, loss)


def eval_seeds(seed: int, repeats: int) -> list[int]:
    """Seeds shared by every cell so methods are compared on the same draws."""
    return [derive_seed(seed, "eval", r) for r in range(repeats)]


@dataclass
class Method:
    """A training set to be evaluated, with its storage footprint."""

    name: str
    videos: np.ndarray
    labels: np.ndarray
    storage: StorageAccount
    frames_per_class: dict[int, int]
    uses_real_train: bool = False

    @classmethod
    def from_sparse(cls, name, videos: list[SparseVideo], dataset: VideoDataset) -> "Method":
        dense, labels = expand_condensed(videos, dataset.class_ids)
        fpc = {c: sum(v.key_count for v in videos if v.label == c) for c in dataset.class_ids}
        return cls(name, dense, labels, storage_of(videos, dataset.geometry), fpc)

    @classmethod
    def from_dense(cls, name, videos: np.ndarray, labels: np.ndarray, dataset: VideoDataset) -> "Method":
        T = dataset.geometry[0]
        fpc = {c: int(np.sum(labels == k)) * T for k, c in enumerate(dataset.class_ids)}
        return cls(name, videos, labels, storage_of(len(videos), dataset.geometry), fpc, True)


@dataclass
class EvalReport:
    method: str
    architecture: str
    seed_group: str
    accuracies: list[float]
    per_class: np.ndarray
    storage: StorageAccount
    frames_per_class: dict[int, int] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def row(self) -> tuple:
        s = self.storage
        return (self.method, self.architecture, self.seed_group, f"{self.mean:.6f}", f"{self.std:.6f}",
                s.frames, s.bytes, s.index_bytes)


def _run_job(job) -> tuple[float, np.ndarray]:
    r = train_and_test(*job)
    return r.accuracy, r.per_class


def full_report(methods: list[Method], dataset: VideoDataset, protocol: EvalProtocol, seed: int,
                mapper=None, model: ModelSpec | None = None) -> list[EvalReport]:
    """Evaluate every method on every architecture with ``protocol.repeats`` seeds.

    ``mapper(fn, jobs)`` may run the independent training jobs concurrently;
    it must return results in job order.
    """
    mapper = mapper or (lambda fn, jobs: [fn(j) for j in jobs])
    for m in methods:
        if not m.uses_real_train and not check_isolation(m.videos, dataset):
            raise ValueError(f"method {m.name}: training set contains real train videos")
    seeds = eval_seeds(seed, protocol.repeats)
    group = f"{seed}x{protocol.repeats}"
    cells = [(m, arch) for m in methods for arch in protocol.architectures]
    jobs = [(m.videos, m.labels, dataset, protocol, arch, s, model) for m, arch in cells for s in seeds]
    results = mapper(_run_job, jobs)
    out = []
    for k, (m, arch) in enumerate(cells):
        runs = results[k * len(seeds) : (k + 1) * len(seeds)]
        per_class = np.mean([p for _, p in runs], axis=0)
        rep = EvalReport(m.name, arch, group, [a for a, _ in runs], per_class, m.storage, m.frames_per_class)
        log.info("%s / %s: %.3f +- %.3f", m.name, arch, rep.mean, rep.std)
        out.append(rep)
    return out


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def report_csv(reports: list[EvalReport]) -> str:
    return _csv(REPORT_HEADER, (r.row() for r in reports))


def runs_csv(reports: list[EvalReport], seed: int) -> str:
    rows = []
    for r in reports:
        for i, (s, a) in enumerate(zip(eval_seeds(seed, len(r.accuracies)), r.accuracies)):
            rows.append((r.method, r.architecture, i, s, f"{a:.6f}"))
    return _csv(RUNS_HEADER, rows)


def histogram_csv(methods: list[Method]) -> str:
    return _csv(HISTOGRAM_HEADER, ((m.name, c, n) for m in methods for c, n in sorted(m.frames_per_class.items())))


def per_class_csv(reports: list[EvalReport], class_ids) -> str:
    rows = [(r.method, r.architecture, c, f"{a:.6f}") for r in reports for c, a in zip(class_ids, r.per_class)]
    return _csv(("method", "architecture", "class_id", "accuracy"), rows)


def write_ppm(path, frame: np.ndarray) -> None:
    """Binary P6 pixmap, 8 bits per channel; grey frames are replicated."""
    img = np.clip(frame, 0.0, 1.0)
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    if img.shape[-1] != 3:
        raise ValueError(f"cannot write {img.shape[-1]}-channel frame as P6")
    data = np.round(img * 255.0).astype(np.uint8)
    H, W, _ = data.shape
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode("ascii") + data.tobytes())


def dump_frames(videos: list[SparseVideo], out_dir) -> list[Path]:
    """Every key frame as ``<class>_<video>_<time index>.ppm``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seen: dict[int, int] = {}
    paths = []
    for v in videos:
        j = seen.get(v.label, 0)
        seen[v.label] = j + 1
        for t, f in zip(v.indices, v.frames):
            p = out_dir / f"{v.label}_{j}_{t}.ppm"
            write_ppm(p, f)
            paths.append(p)
    return paths
