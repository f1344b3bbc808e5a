"""Command-line front end: run files, presets, seeds and output trees.

A run file is a flat list of sections with ``key = value`` lines::

    [run]
    out = results
    seed = 7

    [spec tails]
    scenario = tail_suite
    etas = 0.004, 0.008
    ns = 50, 200, inf

Lines starting with ``#`` are comments. ``[run]`` holds the output directory
and the global seed; every ``[spec NAME]`` section becomes one
:class:`~htsgd.experiments.ExperimentSpec` whose ``base_seed`` is the global
seed. Each spec writes to ``<out>/<NAME>/``.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
import typing
from dataclasses import dataclass, fields

from htsgd.errors import HtsgdError
from htsgd.experiments import ExperimentSpec, run_spec

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_PARSE = 2
EXIT_PRECONDITION = 3

RUN_KEYS = ("out", "seed")
_TUPLE_INT = ("bs", "ms")
_TUPLE_NUM = ("ns",)


class RunFileError(Exception):
    """Syntax or schema problem at a given line and column (both 1-based)."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class RunFile:
    out: str
    seed: int
    specs: tuple  # ((name, ((key, raw_value), ...)), ...)

    def spec_items(self, name) -> dict:
        for n, items in self.specs:
            if n == name:
                return dict(items)
        raise KeyError(name)

    def build_specs(self) -> list:
        return [build_spec(name, dict(items), self.seed) for name, items in self.specs]


def _spec_fields() -> dict:
    hints = typing.get_type_hints(ExperimentSpec)
    return {f.name: hints[f.name] for f in fields(ExperimentSpec)
            if f.name not in ("name", "base_seed")}


SPEC_KEYS = _spec_fields()


def _parse_scalar(key, text, kind):
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def convert_value(key: str, text: str):
    """Typed value of ``key`` from its raw text; raises ValueError on bad input."""
    kind = SPEC_KEYS[key]
    if kind is tuple:
        parts = [p.strip() for p in text.split(",")]
        if not parts or any(p == "" for p in parts):
            raise ValueError(f"empty entry in list {text!r}")
        if key in _TUPLE_INT:
            return tuple(int(p) for p in parts)
        if key in _TUPLE_NUM:
            return tuple(math.inf if p == "inf" else int(p) for p in parts)
        return tuple(float(p) for p in parts)
    return _parse_scalar(key, text, kind)


def parse_run_file(text: str) -> RunFile:
    out, seed = None, 0
    specs = []
    section = None
    names = set()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        col = raw.index(line[0]) + 1
        if line.startswith("["):
            if not line.endswith("]"):
                raise RunFileError("section header is missing ']'", lineno, col + len(line))
            head = line[1:-1].split()
            if head == ["run"]:
                section = ("run",)
            elif len(head) == 2 and head[0] == "spec":
                if head[1] in names:
                    raise RunFileError(f"duplicate spec name {head[1]!r}", lineno, col)
                names.add(head[1])
                specs.append((head[1], []))
                section = ("spec", head[1])
            else:
                raise RunFileError(f"unknown section {line!r}", lineno, col)
            seen = set()
            continue
        if "=" not in line:
            raise RunFileError("expected 'key = value'", lineno, col)
        key, value = (s.strip() for s in line.split("=", 1))
        after = raw.split("=", 1)[1]
        vcol = raw.index("=") + 2 + len(after) - len(after.lstrip())
        if section is None:
            raise RunFileError("key outside of any section", lineno, col)
        if key in seen:
            raise RunFileError(f"duplicate key {key!r}", lineno, col)
        seen.add(key)
        if section[0] == "run":
            if key not in RUN_KEYS:
                raise RunFileError(f"unknown key {key!r} in [run]", lineno, col)
            if key == "out":
                out = value
            else:
                try:
                    seed = int(value)
                except ValueError:
                    raise RunFileError(f"seed must be an integer, got {value!r}", lineno, vcol)
            continue
        if key not in SPEC_KEYS:
            raise RunFileError(f"unknown key {key!r} in [spec {section[1]}]", lineno, col)
        try:
            convert_value(key, value)
        except ValueError as exc:
            raise RunFileError(f"bad value for {key!r}: {exc}", lineno, vcol)
        specs[-1][1].append((key, _canonical(key, value)))
    if out is None:
        raise RunFileError("[run] section must set 'out'", 0, 0)
    for name, items in specs:
        if "scenario" not in dict(items):
            raise RunFileError(f"spec {name!r} has no scenario", 0, 0)
    return RunFile(out, seed, tuple((n, tuple(items)) for n, items in specs))


def _canonical(key, value) -> str:
    v = convert_value(key, value)
    if isinstance(v, tuple):
        return ", ".join("inf" if x == math.inf else repr(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def serialize_run_file(rf: RunFile) -> str:
    lines = ["[run]", f"out = {rf.out}", f"seed = {rf.seed}"]
    for name, items in rf.specs:
        lines += ["", f"[spec {name}]"]
        lines += [f"{k} = {v}" for k, v in items]
    return "\n".join(lines) + "\n"


def build_spec(name: str, items: dict, seed: int) -> ExperimentSpec:
    kw = {k: convert_value(k, v) for k, v in items.items()}
    return ExperimentSpec(name=name, base_seed=seed, **kw)


def apply_overrides(rf: RunFile, overrides) -> RunFile:
    """``out=..``, ``seed=..``, ``<spec>.<key>=..`` or ``<key>=..`` for every spec."""
    out, seed = rf.out, rf.seed
    specs = [(n, dict(items)) for n, items in rf.specs]
    for ov in overrides:
        if "=" not in ov:
            raise RunFileError(f"override {ov!r} is not key=value")
        key, value = (s.strip() for s in ov.split("=", 1))
        target = None
        if "." in key:
            target, key = key.split(".", 1)
        if target in (None, "run") and key in RUN_KEYS:
            if key == "out":
                out = value
            else:
                try:
                    seed = int(value)
                except ValueError:
                    raise RunFileError(f"override seed must be an integer, got {value!r}")
            continue
        if key not in SPEC_KEYS:
            raise RunFileError(f"unknown key {key!r} in override {ov!r}")
        try:
            canon = _canonical(key, value)
        except ValueError as exc:
            raise RunFileError(f"bad value in override {ov!r}: {exc}")
        hit = False
        for n, items in specs:
            if target is None or target == n:
                items[key] = canon
                hit = True
        if not hit:
            raise RunFileError(f"override {ov!r} names no spec in the run file")
    return RunFile(out, seed, tuple((n, tuple(items.items())) for n, items in specs))


# ---------------------------------------------------------------------------
# presets

PRESETS = {
    "desk_default": (
        "Desk-scale tour of every scenario (minutes on one core).",
        """\
[run]
out = out/desk_default
seed = 0

[spec histograms]
scenario = histograms
d = 100
etas = 0.008
bs = 1
ns = 100, 500
chains = 1000
iterations = 1000
burn_in = 500

[spec tails]
scenario = tail_suite
etas = 0.002, 0.004, 0.008
bs = 1, 4
ns = 50, 200, 500
chains = 400
iterations = 3000
burn_in = 1000

[spec theory]
scenario = theory_suite
etas = 0.005
bs = 1
ns = 50, 200
chains = 400
iterations = 3000
burn_in = 1000
mc = 100000
replicates = 2

[spec logistic]
scenario = strongly_convex_suite
gammas = 0.1
mus = 0.1, 2.5
sigma2s = 1.0
bs = 1
ns = 50, 500
chains = 1000
iterations = 1000
burn_in = 200
mc = 200000
replicates = 2

[spec calibration]
scenario = estimator_calibration
alphas = 1.2, 1.5, 1.8
ms = 10000, 100000
trials = 20
block_length = 100
"""),
    "paper_grid_4_1": (
        "Full linear-regression grid at d=100 with 1600 chains per cell (overnight).",
        """\
[run]
out = out/paper_grid_4_1
seed = 0

[spec grid]
scenario = tail_suite
d = 100
etas = 0.001, 0.002, 0.003, 0.004, 0.005, 0.006, 0.007, 0.008, 0.009, 0.01
bs = 1, 2, 5, 10, 20
ns = 20, 50, 100, 200, 500
chains = 1600
iterations = 10000
burn_in = 1000
"""),
    "appendix_f": (
        "One-dimensional logistic regression with random ridge: closed forms, roots, ensembles.",
        """\
[run]
out = out/appendix_f
seed = 0

[spec logistic]
scenario = strongly_convex_suite
gammas = 0.05, 0.1, 0.2
mus = 0.1, 0.5, 2.5
sigma2s = 1.0
bs = 1
ns = 50, 500
chains = 3000
iterations = 1000
burn_in = 200
mc = 1000000
replicates = 10
"""),
    "calibration": (
        "Block tail-index estimator against exact symmetric stable samples.",
        """\
[run]
out = out/calibration
seed = 0

[spec calibration]
scenario = estimator_calibration
alphas = 1.2, 1.5, 1.8, 2.0
ms = 10000, 1000000
trials = 20
block_length = 100
"""),
}


def list_presets() -> str:
    return "\n".join(f"{name}\t{PRESETS[name][0]}" for name in sorted(PRESETS)) + "\n"


def load_preset(name: str) -> RunFile:
    if name not in PRESETS:
        raise RunFileError(f"unknown preset {name!r}; see 'htsgd presets'")
    return parse_run_file(PRESETS[name][1])


# ---------------------------------------------------------------------------


def execute(rf: RunFile, overrides=(), threads: int = 1, out=None) -> int:
    """Run every spec of ``rf``; returns the exit status."""
    out = sys.stdout if out is None else out
    try:
        specs = rf.build_specs()
    except HtsgdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    for spec in specs:
        t0 = time.perf_counter()
        try:
            res = run_spec(spec, threads=threads)
        except HtsgdError as exc:
            msg = str(exc)
            if not msg.startswith("spec "):
                msg = f"spec {spec.name!r}: {msg}"
            print(f"error: {msg}", file=sys.stderr)
            return EXIT_PRECONDITION
        target = os.path.join(rf.out, spec.name)
        # the output location is not part of the result, so it is not echoed
        echoed = [o for o in overrides if o.split("=", 1)[0].strip() not in ("out", "run.out")]
        res.write(target, {"overrides": echoed, "run_seed": rf.seed})
        dt = time.perf_counter() - t0
        for name, table in res.tables.items():
            print(f"{spec.name}/{name}.csv: {len(table.rows)} rows", file=out)
        print(f"{spec.name}: done in {dt:.1f}s, {len(res.metadata['flagged'])} flagged cells",
              file=out)
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="htsgd", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    rp = sub.add_parser("run", help="execute a run file or a preset")
    rp.add_argument("run_file", nargs="?", help="path to a run file")
    rp.add_argument("--preset", help="use a named preset instead of a file")
    rp.add_argument("--seed", type=int, help="global seed (overrides the run file)")
    rp.add_argument("--out", help="output directory (overrides the run file)")
    rp.add_argument("--threads", type=int, default=1, help="worker threads for grid cells")
    rp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                    help="set a spec key (KEY or SPEC.KEY); repeatable")
    rp.add_argument("--print", dest="print_only", action="store_true",
                    help="print the effective run file and exit")
    sub.add_parser("presets", help="list preset names")
    args = ap.parse_args(argv)

    if args.command == "presets":
        sys.stdout.write(list_presets())
        return EXIT_OK

    if (args.run_file is None) == (args.preset is None):
        print("error: give exactly one of RUN_FILE or --preset", file=sys.stderr)
        return EXIT_PARSE
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_PARSE
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    try:
        if args.preset is not None:
            rf = load_preset(args.preset)
        else:
            with open(args.run_file) as fh:
                rf = parse_run_file(fh.read())
        rf = apply_overrides(rf, overrides)
    except RunFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    if args.print_only:
        sys.stdout.write(serialize_run_file(rf))
        return EXIT_OK
    try:
        return execute(rf, overrides, threads=args.threads)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
