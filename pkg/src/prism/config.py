"""Run configuration: a flat ``key = value`` file with ``[section]`` headers.

Sections and keys (all optional except ``[data] programs`` when a file is
given; ``#`` and ``;`` start comments)::

    [run]       seed, out
    [data]      programs (comma list of names), geometry (T,H,W,C),
                train_per_class, test_per_class
    [model]     widths (comma list), head (mean | flatten)
    [condense]  any CondenseConfig field, e.g. vpc, iterations, lr,
                insertion, criterion, warmup, cooldown, check_period
    [eval]      epochs, lr, batch_size, repeats, momentum, flip, clip,
                architectures (comma list)
    [methods]   list (comma list of prism, random, herding, kcenter, full,
                or ablate/<tag>)

A run is a pure function of the parsed :class:`RunConfig`.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .condenser import CondenseConfig
from .evaluation import EvalProtocol
from .models import ModelSpec
from .videogen import PROGRAM_NAMES, MotionProgram, program_by_name

DEFAULT_PROGRAMS = ("translate-right", "translate-left", "bounce", "zigzag", "orbit", "hold-jump")
DEFAULT_METHODS = ("prism", "random", "herding", "kcenter")


class ConfigError(ValueError):
    """Bad configuration; the message names the field and, if known, the line."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "out"
    programs: tuple[str, ...] = DEFAULT_PROGRAMS
    geometry: tuple[int, int, int, int] = (8, 16, 16, 3)
    train_per_class: int = 64
    test_per_class: int = 32
    widths: tuple[int, ...] = (8, 16)
    head: str = "flatten"
    condense: CondenseConfig = field(default_factory=CondenseConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)
    methods: tuple[str, ...] = DEFAULT_METHODS

    def motion_programs(self) -> list[MotionProgram]:
        return [program_by_name(name, k) for k, name in enumerate(self.programs)]

    def model_spec(self, arch: str = "conv3d-micro") -> ModelSpec:
        base = ModelSpec(num_classes=len(self.programs), geometry=self.geometry,
                         widths=self.widths, head=self.head)
        return base.with_arch(arch)

    def with_overrides(self, seed=None, out=None, repeats=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed, condense=cfg.condense.replace(seed=seed))
        if out is not None:
            cfg = dataclasses.replace(cfg, out=out)
        if repeats is not None:
            cfg = dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, repeats=repeats))
        return cfg


def _line_index(text: str) -> dict[tuple[str, str], int]:
    lines, section = {}, None
    for n, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
        elif section and s and s[0] not in "#;":
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            lines.setdefault((section, key), n)
    return lines


def _list(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(cast):
    return lambda t: None if t.strip().lower() in ("", "none") else cast(t)


def _caster(tp):
    """Parser for a dataclass field annotation (annotations are strings here)."""
    tp = str(tp).replace(" ", "")
    if tp.endswith("|None"):
        return _optional(_caster(tp[: -len("|None")]))
    if tp == "bool":
        return _bool
    if tp == "int":
        return int
    if tp == "float":
        return float
    if tp == "str":
        return str
    if tp.startswith("tuple[str"):
        return _list
    raise TypeError(f"no parser for {tp}")


_SCALARS = {
    "run": {"seed": int, "out": str},
    "data": {"programs": _list, "geometry": lambda t: tuple(int(x) for x in _list(t)),
             "train_per_class": int, "test_per_class": int},
    "model": {"widths": lambda t: tuple(int(x) for x in _list(t)), "head": str},
    "methods": {"list": _list},
}
_RENAME = {("methods", "list"): "methods"}


def parse(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from None
    lines = _line_index(text)

    def where(sec, key):
        n = lines.get((sec, key))
        return f"{source}:{n}" if n else source

    known = set(_SCALARS) | {"condense", "eval"}
    for sec in parser.sections():
        if sec not in known:
            raise ConfigError(f"{source}: unknown section [{sec}]")

    top, condense, protocol = {}, {}, {}
    for sec, table in _SCALARS.items():
        if not parser.has_section(sec):
            continue
        for key, raw in parser.items(sec):
            if key not in table:
                raise ConfigError(f"{where(sec, key)}: unknown field [{sec}] {key}")
            try:
                top[_RENAME.get((sec, key), key)] = table[key](raw)
            except ValueError as exc:
                raise ConfigError(f"{where(sec, key)}: field [{sec}] {key}: {exc}") from None
    for sec, cls, dest in (("condense", CondenseConfig, condense), ("eval", EvalProtocol, protocol)):
        if not parser.has_section(sec):
            continue
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in parser.items(sec):
            if key not in types:
                raise ConfigError(f"{where(sec, key)}: unknown field [{sec}] {key}")
            try:
                dest[key] = _caster(types[key])(raw)
            except ValueError as exc:
                raise ConfigError(f"{where(sec, key)}: field [{sec}] {key}: {exc}") from None

    if "programs" not in top:
        raise ConfigError(f"{source}: missing field [data] programs")
    for name in top["programs"]:
        if name not in PROGRAM_NAMES:
            raise ConfigError(f"{where('data', 'programs')}: field [data] programs: unknown program {name!r}")
    if not top["programs"]:
        raise ConfigError(f"{where('data', 'programs')}: field [data] programs is empty")

    seed = top.get("seed", 0)
    condense.setdefault("seed", seed)
    try:
        cfg = RunConfig(**top, condense=CondenseConfig(**condense), eval=EvalProtocol(**protocol))
        cfg.model_spec()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(str(path)) from exc
    return parse(text, str(path))


def dump(cfg: RunConfig) -> str:
    """Inverse of :func:`parse` (every field written explicitly)."""
    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(str(x) for x in v)
        return str(v)

    out = [
        "[run]", f"seed = {cfg.seed}", f"out = {cfg.out}", "",
        "[data]", f"programs = {fmt(cfg.programs)}", f"geometry = {fmt(cfg.geometry)}",
        f"train_per_class = {cfg.train_per_class}", f"test_per_class = {cfg.test_per_class}", "",
        "[model]", f"widths = {fmt(cfg.widths)}", f"head = {cfg.head}", "",
        "[condense]",
    ]
    out += [f"{f.name} = {fmt(getattr(cfg.condense, f.name))}" for f in dataclasses.fields(cfg.condense)]
    out += ["", "[eval]"]
    out += [f"{f.name} = {fmt(getattr(cfg.eval, f.name))}" for f in dataclasses.fields(cfg.eval)]
    out += ["", "[methods]", f"list = {fmt(cfg.methods)}", ""]
    return "\n".join(out)
