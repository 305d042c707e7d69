"""``prism`` command line.

Every command reads a run config (``--config``, or built-in defaults) and
works inside one output directory::

    dataset.pvdc            gen-data
    condensed.pvsc          condense (+ insertions.csv, loss.csv, frames/)
    coreset_<method>.csv    baseline
    ablate/<tag>/...        ablate (+ ablate/summary.csv)
    eval.csv                eval (+ eval_runs.csv, eval_per_class.csv,
                            frames_histogram.csv)
    report.csv              report

Timestamps go only to ``<command>.log.json`` sidecars, so every other file
is a pure function of the config.  Exit codes: 0 ok, 2 config error,
3 numeric abort, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines, condenser, config as cfgmod, evaluation, videogen

log = logging.getLogger("prism")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4
INSERTION_HEADER = ("iteration", "class_id", "video", "time", "left", "right", "cos_left", "cos_right",
                    "criterion", "mode")
LOSS_HEADER = ("iteration", "loss", "key_frames")
ABLATION_HEADER = ("tag", "changed", "key_frames", "bytes", "insertions", "final_loss")


class MissingArtifact(Exception):
    def __init__(self, path):
        super().__init__(f"missing artifact: {path}")
        self.path = path


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(path)
    return path


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _sidecar(out: Path, command: str, args) -> None:
    info = {"command": command, "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "argv": [str(a) for a in args]}
    (out / f"{command}.log.json").write_text(json.dumps(info, indent=1) + "\n")


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _dataset(run, out: Path, path=None):
    path = Path(path) if path else out / "dataset.pvdc"
    return videogen.load(_require(path), run.geometry)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(run, out: Path, args) -> int:
    ds = videogen.generate(run.motion_programs(), run.train_per_class, run.test_per_class, run.geometry, run.seed)
    n = videogen.save(ds, out / "dataset.pvdc")
    T, H, W, C = run.geometry
    print(f"wrote {out / 'dataset.pvdc'}: geometry {T}x{H}x{W}x{C}, {len(run.programs)} classes, {n} bytes")
    return EXIT_OK


def write_condensed(result, ds, run, target: Path, frames: bool = True):
    """PVSC file, insertion log, loss trace and (optionally) frame dumps."""
    target.mkdir(parents=True, exist_ok=True)
    condenser.save(result.videos, run.geometry, target / "condensed.pvsc")
    _write_csv(target / "insertions.csv", INSERTION_HEADER,
               ((e.iteration, e.class_id, e.video, e.time, e.left, e.right, f"{e.cos_left:.9g}",
                 f"{e.cos_right:.9g}", e.criterion, e.mode) for e in result.events))
    _write_csv(target / "loss.csv", LOSS_HEADER,
               ((i, f"{v:.9g}", sum(k)) for i, (v, k) in enumerate(zip(result.loss_trace, result.key_counts))))
    if frames:
        evaluation.dump_frames(result.videos, target / "frames")
    return evaluation.storage_of(result.videos, run.geometry)


def _summary(label, storage, events):
    return (f"{label}: {storage.frames} key frames, {storage.bytes} bytes "
            f"(+{storage.index_bytes} index bytes), {events} insertions")


def cmd_condense(run, out: Path, args) -> int:
    ds = _dataset(run, out, args.data)
    result = condenser.condense(run.condense, ds, run.model_spec())
    storage = write_condensed(result, ds, run, out)
    print(_summary("condensed", storage, len(result.events)))
    return EXIT_OK


def _ablate_one(job):
    run, tag, cfg, data_path, target = job
    ds = videogen.load(data_path, run.geometry)
    result = condenser.condense(cfg, ds, run.model_spec())
    storage = write_condensed(result, ds, run, Path(target))
    return tag, storage, len(result.events), result.loss_trace[-1]


def cmd_ablate(run, out: Path, args) -> int:
    data_path = _require(Path(args.data) if args.data else out / "dataset.pvdc")
    variants = baselines.ablation_matrix(run.condense, only=args.only)
    jobs = [(run, v.tag, v.config, data_path, out / "ablate" / v.tag) for v in variants]
    results = _map(_ablate_one, jobs, args.jobs)
    rows = []
    for v, (tag, storage, n_events, final) in zip(variants, results):
        print(_summary(tag, storage, n_events))
        rows.append((tag, ";".join(v.changed), storage.frames, storage.bytes, n_events, f"{final:.9g}"))
    _write_csv(out / "ablate" / "summary.csv", ABLATION_HEADER, rows)
    return EXIT_OK


def cmd_baseline(run, out: Path, args) -> int:
    ds = _dataset(run, out, args.data)
    vpc = run.condense.vpc
    for name, fn in baselines.CORESETS.items():
        sel = fn(ds, vpc, run.seed) if name == "random" else fn(ds, vpc, seed=run.seed)
        (out / f"coreset_{name}.csv").write_text(sel.to_csv())
        print(f"{name}: {sum(len(v) for v in sel.indices.values())} videos ({sel.feature_space})")
    return EXIT_OK


def read_selection(path: Path) -> dict[int, list[int]]:
    idx: dict[int, list[tuple[int, int]]] = {}
    with open(_require(path), newline="") as fh:
        for row in csv.DictReader(fh):
            idx.setdefault(int(row["class_id"]), []).append((int(row["rank"]), int(row["video_index"])))
    return {c: [i for _, i in sorted(v)] for c, v in idx.items()}


def load_method(name: str, ds, out: Path) -> evaluation.Method:
    if name == "full":
        v, l = ds.split_arrays("train")
        return evaluation.Method.from_dense(name, v, l, ds)
    if name in baselines.CORESETS:
        chosen = read_selection(out / f"coreset_{name}.csv")
        v = np.stack([ds.train[ds.class_index(c), i] for c in ds.class_ids for i in chosen[c]])
        l = np.array([ds.class_index(c) for c in ds.class_ids for _ in chosen[c]], np.int64)
        return evaluation.Method.from_dense(name, v, l, ds)
    path = out / "condensed.pvsc" if name == "prism" else out / name / "condensed.pvsc"
    if name != "prism" and not name.startswith("ablate/"):
        raise ValueError(f"unknown method {name!r}")
    videos, geometry = condenser.load(_require(path))
    if tuple(geometry) != tuple(ds.geometry):
        raise ValueError(f"{path}: geometry {geometry} does not match dataset {ds.geometry}")
    return evaluation.Method.from_sparse(name, videos, ds)


def cmd_eval(run, out: Path, args) -> int:
    ds = _dataset(run, out, args.data)
    methods = [load_method(name, ds, out) for name in run.methods]
    reports = evaluation.full_report(methods, ds, run.eval, run.seed, lambda fn, jobs: _map(fn, jobs, args.jobs),
                                     run.model_spec())
    (out / "eval.csv").write_text(evaluation.report_csv(reports))
    (out / "eval_runs.csv").write_text(evaluation.runs_csv(reports, run.seed))
    (out / "eval_per_class.csv").write_text(evaluation.per_class_csv(reports, ds.class_ids))
    (out / "frames_histogram.csv").write_text(evaluation.histogram_csv(methods))
    for r in reports:
        print(f"{r.method:>16} {r.architecture:>17}: {r.mean:.3f} +- {r.std:.3f}  "
              f"({r.storage.frames} frames, {r.storage.bytes} bytes)")
    return EXIT_OK


def cmd_report(run, out: Path, args) -> int:
    inputs = [Path(p) for p in args.inputs] or [out / "eval.csv"]
    rows, header = [], None
    for p in inputs:
        with open(_require(p), newline="") as fh:
            reader = csv.reader(fh)
            head = tuple(next(reader))
            if header is None:
                header = head
            elif head != header:
                raise ValueError(f"{p}: header {head} differs from {header}")
            rows.extend(reader)
    _write_csv(out / "report.csv", header, rows)
    print(f"wrote {out / 'report.csv'}: {len(rows)} rows")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "condense": cmd_condense, "ablate": cmd_ablate,
            "baseline": cmd_baseline, "eval": cmd_eval, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (defaults built in)")
    common.add_argument("--out", help="output directory (overrides [run] out)")
    common.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
    common.add_argument("--jobs", type=int, default=1, help="max worker processes")
    common.add_argument("--data", help="dataset file (default <out>/dataset.pvdc)")
    p = argparse.ArgumentParser(prog="prism", description="Sparse key-frame video condensation toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the toy video dataset")
    sub.add_parser("condense", parents=[common], help="learn a sparse synthetic set")
    a = sub.add_parser("ablate", parents=[common], help="run the ablation grid")
    a.add_argument("--only", choices=baselines.ABLATION_TAGS, help="run base plus one variant")
    sub.add_parser("baseline", parents=[common], help="select random / herding / k-center coresets")
    e = sub.add_parser("eval", parents=[common], help="train and score evaluation models")
    e.add_argument("--repeats", type=int, help="runs per cell (overrides [eval] repeats)")
    r = sub.add_parser("report", parents=[common], help="merge evaluation CSVs")
    r.add_argument("inputs", nargs="*", help="CSV files to merge (default <out>/eval.csv)")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    level = os.environ.get("PRISM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        run = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
        run = run.with_overrides(seed=args.seed, out=args.out, repeats=getattr(args, "repeats", None))
    except FileNotFoundError as exc:
        print(f"error: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (cfgmod.ConfigError, ValueError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        code = COMMANDS[args.command](run, out, args)
    except MissingArtifact as exc:
        print(f"error: missing artifact: {exc.path}", file=sys.stderr)
        return EXIT_MISSING
    except condenser.NumericAbort as exc:
        print(f"error: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:  # includes DatasetFormatError
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _sidecar(out, args.command, argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
