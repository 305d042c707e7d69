"""MovingShapes: procedurally generated toy action videos.

Each class is a :class:`MotionProgram`: a sprite following a motion law.
Videos of a class differ by seeded jitter in start position, sprite size,
intensity and (where the law has one) phase.  Frames are grayscale sprites
on black, replicated over the channel axis, with values in [0, 1].

Binary container (all integers u32 little-endian)::

    b"PVDC" | version | T | H | W | C | n_classes | train_per_class
    | test_per_class | class id table (n_classes x u32)
    | float32 LE frames ordered by (split, class, index)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import stream

MAGIC = b"PVDC"
FORMAT_VERSION = 1

LAWS = ("linear-translate", "bounce", "zigzag", "circular-orbit", "grow-shrink", "hold-then-jump")
SPRITES = ("square", "disk")
_RANKS = {
    "linear-translate": 0,
    "circular-orbit": 1,
    "grow-shrink": 1,
    "bounce": 2,
    "zigzag": 2,
    "hold-then-jump": 3,
}


class DatasetFormatError(ValueError):
    """A dataset file is malformed or does not match the expected geometry."""


@dataclass(frozen=True)
class MotionProgram:
    """Motion law of one class.

    ``velocity`` is in px/frame.  ``amplitude`` is the zigzag half-height,
    orbit radius, relative size swing of grow-shrink, or jump length of
    hold-then-jump.  ``period`` is in frames.
    """

    class_id: int
    law: str
    sprite: str = "disk"
    velocity: tuple[float, float] = (0.0, 0.0)
    amplitude: float = 0.0
    period: float = 4.0
    radius: tuple[float, float] = (1.5, 2.5)
    intensity: tuple[float, float] = (0.6, 1.0)
    name: str = ""

    def __post_init__(self):
        if self.law not in LAWS:
            raise ValueError(f"unknown motion law {self.law!r}")
        if self.sprite not in SPRITES:
            raise ValueError(f"unknown sprite {self.sprite!r}")

    @property
    def nonlinearity_rank(self) -> int:
        return _RANKS[self.law]


def default_programs() -> list[MotionProgram]:
    """The six-class benchmark: two straight translations, four nonlinear motions.

    Sprite kinds alternate so that models blind to frame order and position
    (e.g. ``conv2d-mean``) still have an appearance cue.
    """
    return [
        MotionProgram(0, "linear-translate", "disk", velocity=(1.5, 0.0), name="translate-right"),
        MotionProgram(1, "linear-translate", "square", velocity=(-1.5, 0.0), name="translate-left"),
        MotionProgram(2, "bounce", "disk", velocity=(3.0, 0.0), name="bounce"),
        MotionProgram(3, "zigzag", "square", velocity=(1.0, 0.0), amplitude=3.0, period=4.0, name="zigzag"),
        MotionProgram(4, "circular-orbit", "disk", amplitude=4.0, period=8.0, name="orbit"),
        MotionProgram(5, "hold-then-jump", "square", velocity=(1.0, 0.0), amplitude=7.0, name="hold-jump"),
    ]


def program_by_name(name: str, class_id: int) -> MotionProgram:
    extra = [MotionProgram(0, "grow-shrink", amplitude=0.5, period=8.0, name="grow-shrink")]
    for p in default_programs() + extra:
        if p.name == name:
            return replace(p, class_id=class_id)
    raise KeyError(name)


PROGRAM_NAMES = ("translate-right", "translate-left", "bounce", "zigzag", "orbit", "hold-jump", "grow-shrink")


# ---------------------------------------------------------------------------
# motion laws


def reflect(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fold ``x`` into ``[lo, hi]`` by mirror reflection at both walls."""
    span = hi - lo
    u = np.mod(np.asarray(x, dtype=np.float64) - lo, 2 * span)
    return lo + np.where(u <= span, u, 2 * span - u)


def _interval(lo, hi, what):
    if hi < lo:
        raise ValueError(f"sprite cannot fit geometry: empty range for {what}")
    return lo, hi


def trajectory(program: MotionProgram, T: int, H: int, W: int, rng: np.random.Generator):
    """Sprite centres ``(T, 2)`` as (x, y) and radii ``(T,)`` for one video."""
    r = rng.uniform(*program.radius)
    if 2 * r + 1 > min(H, W):
        raise ValueError(f"sprite cannot fit geometry: radius {r:.2f} in {H}x{W}")
    t = np.arange(T, dtype=np.float64)
    vx, vy = program.velocity
    law = program.law
    radii = np.full(T, r)
    margin = 1.0

    def start(span_x, span_y):
        x0 = rng.uniform(*_interval(margin + max(0.0, -span_x), W - 1 - margin - max(0.0, span_x), "x"))
        y0 = rng.uniform(*_interval(margin + max(0.0, -span_y), H - 1 - margin - max(0.0, span_y), "y"))
        return x0, y0

    if law == "linear-translate":
        x0, y0 = start(vx * (T - 1), vy * (T - 1))
        x, y = x0 + vx * t, y0 + vy * t
    elif law == "bounce":
        # Start close enough to the wall that the reflection lands mid-clip.
        hit = rng.uniform(0.3, 0.6) * (T - 1)
        wall = W - 1 if vx > 0 else 0.0
        x0 = wall - vx * hit
        y0 = rng.uniform(*_interval(margin, H - 1 - margin, "y"))
        x = reflect(x0 + vx * t, 0.0, W - 1)
        y = np.full(T, y0)
    elif law == "zigzag":
        amp, period = program.amplitude, program.period
        x0, y0 = start(vx * (T - 1), 0.0)
        y0 = rng.uniform(*_interval(margin + amp, H - 1 - margin - amp, "y"))
        phase = 2 * rng.integers(0, 2) - 1
        tri = 1.0 - 4.0 * np.abs(np.mod(t / period + 0.25, 1.0) - 0.5)
        x, y = x0 + vx * t, y0 + phase * amp * tri
    elif law == "circular-orbit":
        R = program.amplitude
        cx = rng.uniform(*_interval(margin + R, W - 1 - margin - R, "x"))
        cy = rng.uniform(*_interval(margin + R, H - 1 - margin - R, "y"))
        phi = rng.uniform(0, 2 * math.pi)
        omega = 2 * math.pi / program.period
        x, y = cx + R * np.cos(omega * t + phi), cy + R * np.sin(omega * t + phi)
    elif law == "grow-shrink":
        x0, y0 = start(0.0, 0.0)
        x, y = np.full(T, x0), np.full(T, y0)
        radii = r * (1.0 + program.amplitude * np.sin(2 * math.pi * t / program.period))
    else:  # hold-then-jump
        jump = program.amplitude
        dx, dy = (np.sign(vx) * jump, np.sign(vy) * jump)
        x0, y0 = start(dx, dy)
        t_jump = rng.integers(T // 2 - 1, T // 2 + 2)
        after = (t >= t_jump).astype(np.float64)
        x, y = x0 + dx * after, y0 + dy * after
    centers = np.stack([x, y], axis=1)
    if np.any(centers < 0) or np.any(centers[:, 0] > W - 1) or np.any(centers[:, 1] > H - 1):
        raise ValueError(f"motion law {law} leaves the frame")
    return centers, radii


def render(centers: np.ndarray, radii: np.ndarray, sprite: str, intensity: float, H: int, W: int, C: int):
    """Anti-aliased sprite frames ``(T, H, W, C)`` in [0, 1]."""
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    dx = xs[None] - centers[:, 0, None, None]
    dy = ys[None] - centers[:, 1, None, None]
    if sprite == "disk":
        d = np.sqrt(dx * dx + dy * dy)
    else:
        d = np.maximum(np.abs(dx), np.abs(dy))
    cover = np.clip(radii[:, None, None] + 0.5 - d, 0.0, 1.0)
    frames = np.clip(intensity * cover, 0.0, 1.0).astype(np.float32)
    return np.repeat(frames[..., None], C, axis=-1)


def render_video(program: MotionProgram, geometry, rng: np.random.Generator) -> np.ndarray:
    T, H, W, C = geometry
    centers, radii = trajectory(program, T, H, W, rng)
    intensity = rng.uniform(*program.intensity)
    return render(centers, radii, program.sprite, intensity, H, W, C)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class VideoDataset:
    """Class-balanced train/test splits.

    ``train`` and ``test`` are float32 arrays of shape
    ``(n_classes, per_class, T, H, W, C)``; axis 0 follows ``class_ids``.
    """

    train: np.ndarray
    test: np.ndarray
    class_ids: list[int]
    seed: int | None = None
    programs: list[MotionProgram] = field(default_factory=list)

    @property
    def geometry(self) -> tuple[int, int, int, int]:
        return tuple(int(d) for d in self.train.shape[2:])

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def class_index(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise KeyError(f"unknown class {class_id}") from None

    def split_arrays(self, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        """Flattened ``(videos, labels)`` for a split, ordered by (class, index)."""
        data = self.train if split == "train" else self.test
        K, N = data.shape[:2]
        labels = np.repeat(np.asarray(self.class_ids, dtype=np.int64), N)
        return data.reshape(K * N, *data.shape[2:]), labels

    def ranks(self) -> dict[int, int]:
        return {p.class_id: p.nonlinearity_rank for p in self.programs}


def generate(programs, train_per_class: int, test_per_class: int, geometry, seed: int) -> VideoDataset:
    programs = list(programs)
    if not programs:
        raise ValueError("generate needs at least one motion program")
    ids = [p.class_id for p in programs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate class ids in programs: {ids}")
    geometry = tuple(int(g) for g in geometry)
    splits = {}
    for split, count in (("train", train_per_class), ("test", test_per_class)):
        arr = np.empty((len(programs), count, *geometry), np.float32)
        for k, program in enumerate(programs):
            for i in range(count):
                rng = stream(seed, "video", split, program.class_id, i)
                arr[k, i] = render_video(program, geometry, rng)
        splits[split] = arr
    return VideoDataset(splits["train"], splits["test"], ids, seed, programs)


def sample_real_batch(dataset: VideoDataset, class_id: int, batch_size: int, seed, flip: bool = False) -> np.ndarray:
    """``batch_size`` distinct train videos of one class, optionally h-flipped.

    ``seed`` is an int or a ``numpy.random.Generator``.
    """
    pool = dataset.train[dataset.class_index(class_id)]
    if batch_size > len(pool):
        raise ValueError(f"batch size {batch_size} exceeds {len(pool)} train videos of class {class_id}")
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "real-batch", class_id)
    idx = rng.choice(len(pool), size=batch_size, replace=False)
    batch = pool[idx].copy()
    if flip:
        flips = rng.random(batch_size) < 0.5
        batch[flips] = batch[flips][:, :, :, ::-1, :]
    return batch


# ---------------------------------------------------------------------------
# container


def to_bytes(dataset: VideoDataset) -> bytes:
    K, n_train = dataset.train.shape[:2]
    n_test = dataset.test.shape[1]
    T, H, W, C = dataset.geometry
    header = MAGIC + struct.pack("<8I", FORMAT_VERSION, T, H, W, C, K, n_train, n_test)
    header += struct.pack(f"<{K}I", *dataset.class_ids)
    payload = dataset.train.astype("<f4").tobytes() + dataset.test.astype("<f4").tobytes()
    return header + payload


def from_bytes(blob: bytes, geometry=None) -> VideoDataset:
    if blob[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {blob[:4]!r}: expected {MAGIC!r}")
    if len(blob) < 36:
        raise DatasetFormatError("truncated header")
    version, T, H, W, C, K, n_train, n_test = struct.unpack_from("<8I", blob, 4)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {version}")
    if geometry is not None and tuple(geometry) != (T, H, W, C):
        raise DatasetFormatError(f"geometry mismatch: file has {(T, H, W, C)}, expected {tuple(geometry)}")
    offset = 36
    if len(blob) < offset + 4 * K:
        raise DatasetFormatError("truncated class table")
    class_ids = list(struct.unpack_from(f"<{K}I", blob, offset))
    offset += 4 * K
    frame = T * H * W * C
    expected = 4 * frame * K * (n_train + n_test)
    if len(blob) - offset != expected:
        raise DatasetFormatError(f"truncated payload: {len(blob) - offset} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=offset).astype(np.float32)
    cut = K * n_train * frame
    train = data[:cut].reshape(K, n_train, T, H, W, C)
    test = data[cut:].reshape(K, n_test, T, H, W, C)
    return VideoDataset(train, test, class_ids)


def save(dataset: VideoDataset, path) -> int:
    blob = to_bytes(dataset)
    Path(path).write_bytes(blob)
    return len(blob)


def load(path, geometry=None) -> VideoDataset:
    return from_bytes(Path(path).read_bytes(), geometry)
