"""Coreset baselines and the ablation grid.

Herding and k-center both work in an embedding space produced by a fixed,
randomly initialized ``conv3d-micro`` network (no training).  Ties in either
greedy rule go to the lowest video index, which keeps every selector a pure
function of its inputs.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .condenser import CondenseConfig
from .models import ModelSpec, embed, init_params
from .rng import derive_seed, stream
from .videogen import VideoDataset

log = logging.getLogger(__name__)

CSV_HEADER = ("class_id", "rank", "video_index", "score")


@dataclass
class CoresetSelection:
    """Per-class chosen train indices, in selection order."""

    method: str
    vpc: int
    indices: dict[int, list[int]]
    scores: dict[int, list[float]]
    feature_space: str = "none"

    def __post_init__(self):
        for cid, idx in self.indices.items():
            if len(idx) != self.vpc:
                raise ValueError(f"class {cid}: selected {len(idx)} videos, expected {self.vpc}")
            if len(set(idx)) != len(idx):
                raise ValueError(f"class {cid}: duplicate indices {idx}")

    def videos(self, dataset: VideoDataset) -> tuple[np.ndarray, np.ndarray]:
        """Selected train videos and their label positions, in class order."""
        vids, labels = [], []
        for k, cid in enumerate(dataset.class_ids):
            for i in self.indices[cid]:
                vids.append(dataset.train[k, i])
                labels.append(k)
        return np.stack(vids), np.asarray(labels, np.int64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for cid in sorted(self.indices):
            for rank, (i, s) in enumerate(zip(self.indices[cid], self.scores[cid])):
                w.writerow((cid, rank, i, f"{s:.9g}"))
        return buf.getvalue()


def _check_vpc(dataset: VideoDataset, vpc: int) -> None:
    n = dataset.train.shape[1]
    if not 1 <= vpc <= n:
        raise ValueError(f"VPC {vpc} outside [1, {n}] (per-class train count)")


def random_coreset(dataset: VideoDataset, vpc: int, seed: int) -> CoresetSelection:
    _check_vpc(dataset, vpc)
    n = dataset.train.shape[1]
    idx, scores = {}, {}
    for cid in dataset.class_ids:
        pick = stream(seed, "coreset-random", cid).choice(n, size=vpc, replace=False)
        idx[cid] = [int(i) for i in pick]
        scores[cid] = [0.0] * vpc
    return CoresetSelection("random", vpc, idx, scores)


def herding_order(feats: np.ndarray, k: int) -> tuple[list[int], list[float]]:
    """Greedy mean matching: each pick minimizes ||mu - mean(chosen)||.

    Candidates are compared on ``||m*S - n*(chosen sum + f)||^2`` (``S`` the
    class sum, ``n`` its size, ``m`` the new coreset size), which orders them
    identically but is exact for integer-valued features, so ties really tie
    and go to the lowest index.
    """
    feats = np.asarray(feats, np.float64)
    n = len(feats)
    S = feats.sum(axis=0)
    chosen, scores = [], []
    total = np.zeros_like(S)
    for step in range(1, k + 1):
        key = np.sum(np.square(step * S - n * (total + feats)), axis=1)
        key[chosen] = np.inf
        best = int(np.argmin(key))
        chosen.append(best)
        scores.append(float(np.sqrt(key[best])) / (n * step))
        total += feats[best]
    return chosen, scores


def kcenter_order(feats: np.ndarray, k: int, first: int | None = None) -> tuple[list[int], list[float]]:
    """Greedy max-min cover seeded at the point nearest the mean (or ``first``)."""
    feats = np.asarray(feats, np.float64)
    n = len(feats)
    if first is None:
        key = np.sum(np.square(n * feats - feats.sum(axis=0)), axis=1)
        first = int(np.argmin(key))
        scores = [float(np.sqrt(key[first])) / n]
    else:
        scores = [0.0]
    chosen = [first]
    nearest = np.sum(np.square(feats - feats[first]), axis=1)
    for _ in range(k - 1):
        masked = nearest.copy()
        masked[chosen] = -np.inf
        nxt = int(np.argmax(masked))
        chosen.append(nxt)
        scores.append(float(np.sqrt(nearest[nxt])))
        nearest = np.minimum(nearest, np.sum(np.square(feats - feats[nxt]), axis=1))
    return chosen, scores


def selection_features(dataset: VideoDataset, seed: int, spec: ModelSpec | None = None) -> tuple[dict[int, np.ndarray], str]:
    """Per-class train embeddings from a fixed random conv3d-micro."""
    spec = (spec or ModelSpec(num_classes=dataset.num_classes, geometry=dataset.geometry)).with_arch("conv3d-micro")
    fseed = derive_seed(seed, "coreset-features")
    params = init_params(spec, fseed)
    feats = {cid: embed(spec, params, dataset.train[k]) for k, cid in enumerate(dataset.class_ids)}
    return feats, f"conv3d-micro-random-init:{fseed}"


def _greedy_coreset(method, order_fn, dataset, vpc, features, space):
    _check_vpc(dataset, vpc)
    idx, scores = {}, {}
    for cid in dataset.class_ids:
        f = np.asarray(features[cid], np.float64)
        if np.all(f == f[0]):
            log.warning("%s: class %d has identical features; falling back to index order", method, cid)
            idx[cid], scores[cid] = list(range(vpc)), [0.0] * vpc
            continue
        idx[cid], scores[cid] = order_fn(f, vpc)
    return CoresetSelection(method, vpc, idx, scores, space)


def herding_coreset(dataset: VideoDataset, vpc: int, features=None, seed: int = 0) -> CoresetSelection:
    space = "given"
    if features is None:
        features, space = selection_features(dataset, seed)
    return _greedy_coreset("herding", herding_order, dataset, vpc, features, space)


def kcenter_coreset(dataset: VideoDataset, vpc: int, features=None, seed: int = 0) -> CoresetSelection:
    space = "given"
    if features is None:
        features, space = selection_features(dataset, seed)
    return _greedy_coreset("kcenter", kcenter_order, dataset, vpc, features, space)


CORESETS = {"random": random_coreset, "herding": herding_coreset, "kcenter": kcenter_coreset}


# Ablation grid: each pair contrasts one knob.  The first member of the first
# three pairs is the base configuration itself, so it differs in zero fields.
ABLATION_TAGS = (
    "with-insertion", "no-insertion",
    "negative-grad", "random-position",
    "cosine", "l2",
    "no-warmup", "no-cooldown",
)


@dataclass
class AblationVariant:
    tag: str
    config: CondenseConfig
    changed: tuple[str, ...] = field(default=())


def _changes(tag: str, base: CondenseConfig) -> dict:
    return {
        "with-insertion": {"insertion": "gradient"},
        "no-insertion": {"insertion": "disabled"},
        "negative-grad": {"insertion": "gradient"},
        "random-position": {"insertion": "random"},
        "cosine": {"criterion": "cosine"},
        "l2": {"criterion": "l2", "l2_threshold": 0.141},
        "no-warmup": {"warmup": 0.0},
        "no-cooldown": {"cooldown": 0.0},
    }[tag]


def config_diff(a: CondenseConfig, b: CondenseConfig) -> tuple[str, ...]:
    return tuple(f.name for f in fields(a) if getattr(a, f.name) != getattr(b, f.name))


def ablation_matrix(base: CondenseConfig, only: str | None = None) -> list[AblationVariant]:
    """The base run followed by the eight tagged variants (or just ``only``)."""
    if only is not None and only not in ABLATION_TAGS:
        raise ValueError(f"unknown ablation {only!r}; expected one of {ABLATION_TAGS}")
    out = [AblationVariant("base", base)]
    for tag in ABLATION_TAGS:
        if only is not None and tag != only:
            continue
        cfg = base.replace(**_changes(tag, base))
        out.append(AblationVariant(tag, cfg, config_diff(base, cfg)))
    return out
