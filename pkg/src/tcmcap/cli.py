"""Command-line front end.

Subcommands: ``capacity``, ``sweep``, ``oracle`` and ``pbar``. Options may also
come from a flat ``key=value`` file passed with ``--config``; flags given on the
command line win. Exit codes: 0 success, 2 usage, 3 solver failure, 4 numerical
domain failure.
"""

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile

from . import activations as acts
from . import oracle as orc
from . import solver as slv
from .errors import DomainError, SolverError
from .overlap import curve_for

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_DOMAIN = 0, 2, 3, 4

DEFAULT_SWEEP_LEVELS = ("1", "2-full", "3-full")

_DEFAULTS = {
    "activation": None,
    "level": None,
    "grid_order": slv.SolverConfig.grid_order,
    "alpha_lo": slv.SolverConfig.alpha_bracket[0],
    "alpha_hi": slv.SolverConfig.alpha_bracket[1],
    "format": "pretty",
    "out": None,
    "plot_data": None,
    "d": 4096,
    "samples": 100000,
    "seed": 0,
    "polish": True,
    "chunk": 1000,
    "lattice": "0:0.05:1",
}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config


def read_config(path):
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, val = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _DEFAULTS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        out[key] = val
    return out


def _as_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


_CASTS = {
    "grid_order": int,
    "alpha_lo": float,
    "alpha_hi": float,
    "d": int,
    "samples": int,
    "seed": int,
    "chunk": int,
    "polish": _as_bool,
}


def resolve(args):
    """Merge defaults, the config file and explicit flags (in that order)."""
    merged = dict(_DEFAULTS)
    if args.config:
        merged.update(read_config(args.config))
    for key in _DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    for key, cast in _CASTS.items():
        try:
            merged[key] = cast(merged[key])
        except (TypeError, ValueError):
            raise UsageError(f"bad value for {key}: {merged[key]!r}") from None
    for key in ("activation", "level"):
        val = merged[key]
        if isinstance(val, str):
            val = [val]
        if val is not None:
            val = [t.strip() for item in val for t in item.split(",") if t.strip()]
        merged[key] = val
    if merged["format"] not in ("csv", "json", "pretty"):
        raise UsageError("format must be csv, json or pretty")
    return merged


def _activations(opts, default_all=False):
    names = opts["activation"]
    if not names:
        if default_all:
            return list(acts.BUILTIN)
        raise UsageError("--activation is required")
    try:
        return [acts.get(n).name for n in names]
    except DomainError as exc:
        raise UsageError(str(exc)) from None


def _levels(opts, default):
    names = opts["level"]
    if names is None:
        names = list(default)
    if not names:
        raise UsageError("at least one level is required")
    try:
        return [slv.Level.parse(n) for n in names]
    except DomainError as exc:
        raise UsageError(str(exc)) from None


def _solver_config(opts):
    try:
        return slv.SolverConfig(grid_order=opts["grid_order"], alpha_bracket=(opts["alpha_lo"], opts["alpha_hi"]))
    except DomainError as exc:
        raise UsageError(str(exc)) from None


def parse_lattice(spec):
    """``start:step:end`` inclusive, within [0, 1]."""
    try:
        start, step, end = (float(t) for t in spec.split(":"))
    except ValueError:
        raise UsageError(f"lattice must look like start:step:end, got {spec!r}") from None
    if not (0.0 <= start <= end <= 1.0) or not step > 0.0:
        raise UsageError("lattice needs 0 <= start <= end <= 1 and step > 0")
    n = int(math.floor((end - start) / step + 1e-9)) + 1
    pts = [start + k * step for k in range(n)]
    return [min(p, end) for p in pts]


# ------------------------------------------------------------------ output


def write_atomic(path, text):
    """Write ``text`` to ``path`` via a temporary file in the same directory."""
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tcmcap-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    wr.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def _pretty(header, rows):
    cells = [[str(h) for h in header]] + [[_pretty_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _pretty_cell(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return "" if v is None else str(v)


def _emit(opts, text):
    if opts["out"]:
        write_atomic(opts["out"], text)
    else:
        sys.stdout.write(text)


def _render(fmt, header, rows, payload):
    if fmt == "json":
        return json.dumps(payload, indent=2) + "\n"
    if fmt == "csv":
        return _csv_text(header, [[_fmt(v) for v in r] for r in rows])
    return _pretty(header, rows)


# ---------------------------------------------------------------- commands


def report_header(reports):
    keys = []
    for rep in reports:
        for k in rep.row():
            if k not in keys:
                keys.append(k)
    return ["activation", "level", "variant"] + keys + ["stationarity_residual", "psi_residual"]


def report_values(rep, keys):
    row = rep.row()
    fixed = {
        "activation": rep.activation,
        "level": rep.level,
        "variant": rep.variant,
        "stationarity_residual": rep.stationarity_residual,
        "psi_residual": rep.psi_residual,
    }
    return [fixed[k] if k in fixed else row.get(k, 0.0) for k in keys]


def cmd_capacity(opts):
    names = _activations(opts)
    levels = _levels(opts, ())
    cfg = _solver_config(opts)
    reports = [slv.capacity(lv, name, cfg) for name in names for lv in levels]
    header = report_header(reports)
    rows = [report_values(r, header) for r in reports]
    payload = [dict(r.to_dict(), row=r.row()) for r in reports]
    _emit(opts, _render(opts["format"], header, rows, payload if len(payload) > 1 else payload[0]))
    for r in reports:
        if r.note:
            print(f"note: {r.activation} level {r.level}: {r.note}", file=sys.stderr)
    return EXIT_OK


def sweep_matrix(results, names, levels):
    """Rows ``[level, alpha(act1), alpha(act2), ...]``; failed cells are None."""
    rows = []
    for lv in levels:
        row = [lv.label]
        for a in names:
            rep = results[(a, lv.label)]
            row.append(rep.alpha_c if isinstance(rep, slv.CapacityReport) else None)
        rows.append(row)
    return rows


def plot_rows(results, names, levels):
    rows = []
    for a in names:
        for i, lv in enumerate(levels, 1):
            rep = results[(a, lv.label)]
            if isinstance(rep, slv.CapacityReport):
                rows.append([a, i, lv.label, rep.alpha_c])
    return rows


def _plot_path(opts):
    if opts["plot_data"]:
        return opts["plot_data"]
    if opts["out"]:
        stem, _ = os.path.splitext(opts["out"])
        return stem + "-plot.csv"
    return None


def cmd_sweep(opts):
    names = _activations(opts, default_all=True)
    levels = _levels(opts, DEFAULT_SWEEP_LEVELS)
    cfg = _solver_config(opts)
    results = slv.sweep(names, levels, cfg)
    header = ["level"] + names
    rows = sweep_matrix(results, names, levels)
    payload = {
        "activations": names,
        "levels": [lv.label for lv in levels],
        "alpha_c": {a: {lv.label: results[(a, lv.label)].alpha_c if isinstance(results[(a, lv.label)], slv.CapacityReport) else None for lv in levels} for a in names},
        "errors": {f"{a}/{lv}": str(e) for (a, lv), e in results.items() if not isinstance(e, slv.CapacityReport)},
    }
    _emit(opts, _render(opts["format"], header, rows, payload))
    plot = _plot_path(opts)
    if plot:
        prow = plot_rows(results, names, levels)
        write_atomic(plot, _csv_text(["activation", "level_index", "level", "alpha_c"], [[_fmt(v) for v in r] for r in prow]))
    failed = [(k, e) for k, e in results.items() if not isinstance(e, slv.CapacityReport)]
    for (a, lv), e in failed:
        print(f"error: {a} level {lv}: {e}", file=sys.stderr)
    return EXIT_SOLVER if failed else EXIT_OK


def cmd_oracle(opts):
    names = _activations(opts)
    try:
        cfg = orc.McConfig(opts["d"], opts["samples"], opts["seed"], opts["polish"], opts["chunk"])
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    ests = [orc.mc_estimate(n, cfg) for n in names]
    if opts["format"] == "pretty":
        lines = [
            f"{e.activation}: d={e.d} samples={e.samples} seed={e.seed}\n"
            f"  mean   {e.mean:.6f} +/- {e.stderr:.6f}\n"
            f"  limit  {e.limit:.6f}\n"
            f"  gap    {e.gap:+.6f}\n"
            f"  fallbacks {e.n_infeasible_fallbacks}, rescaled {e.n_rescaled}\n"
            for e in ests
        ]
        _emit(opts, "".join(lines))
        return EXIT_OK
    keys = ["activation", "d", "samples", "seed", "mean", "stderr", "limit", "gap", "n_infeasible_fallbacks", "n_rescaled"]
    rows = [[e.to_dict()[k] for k in keys] for e in ests]
    payload = [e.to_dict() for e in ests]
    _emit(opts, _render(opts["format"], keys, rows, payload if len(payload) > 1 else payload[0]))
    return EXIT_OK


def cmd_pbar(opts):
    names = _activations(opts)
    if len(names) != 1:
        raise UsageError("pbar takes a single activation")
    pts = parse_lattice(opts["lattice"])
    curve = curve_for(names[0], opts["grid_order"])
    text = _csv_text(["p", "pbar"], [[f"{p:.12g}", f"{curve.direct(p):.12g}"] for p in pts])
    _emit(opts, text)
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="tcmcap", description="Capacity of wide treelike committee machines.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--activation", action="append", help="activation id (repeat or comma-separate)")
        p.add_argument("--config", help="key=value file; flags override it")
        p.add_argument("--format", choices=("csv", "json", "pretty"))
        p.add_argument("--out", help="output file (written atomically)")

    def solver_flags(p):
        p.add_argument("--level", action="append", help="1, 2-partial, 2-full, 3-full or r-full:N")
        p.add_argument("--grid-order", dest="grid_order", type=int)
        p.add_argument("--alpha-lo", dest="alpha_lo", type=float)
        p.add_argument("--alpha-hi", dest="alpha_hi", type=float)

    p = sub.add_parser("capacity", help="capacity and stationary parameters at one or more levels")
    common(p)
    solver_flags(p)
    p.set_defaults(func=cmd_capacity)

    p = sub.add_parser("sweep", help="capacity matrix over activations and levels")
    common(p)
    solver_flags(p)
    p.add_argument("--plot-data", dest="plot_data", help="long-format CSV of level index vs capacity")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="finite-d Monte Carlo estimate of the projection value")
    common(p)
    p.add_argument("--d", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--chunk", type=int)
    p.add_argument("--no-polish", dest="polish", action="store_false", default=None)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("pbar", help="dump the overlap curve on a lattice")
    common(p)
    p.add_argument("--lattice", help="start:step:end (default 0:0.05:1)")
    p.add_argument("--grid-order", dest="grid_order", type=int)
    p.set_defaults(func=cmd_pbar)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = resolve(args)
        return args.func(opts)
    except UsageError as exc:
        print(f"tcmcap {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverError as exc:
        print(f"tcmcap {args.command}: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DomainError as exc:
        print(f"tcmcap {args.command}: domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
