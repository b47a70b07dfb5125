"""Command-line entry points for the experiment suites.

Every subcommand writes its data files plus ``manifest.json`` (full
configuration, package version, seed, wall time) into the output
directory.  Settings come from, in increasing priority, built-in defaults,
a flat ``key = value`` file given by ``--config``, and command-line flags.
The default output directory is ``$ANNULUS_SLE_OUTPUT`` or ``./runs``.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import endpoint as ep
from . import explorer as ex
from . import loewner as lw
from . import martingale4 as m4
from . import restriction as rs
from .errors import AnnulusSLEError, DomainError, GeometryError
from .specialfn import identity_residuals

ENV_OUTPUT = "ANNULUS_SLE_OUTPUT"
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    """A setting is missing, malformed or out of range."""


def _floats(text):
    return [float(v) for v in str(text).replace(",", " ").split()]


def _complex(text):
    return complex(str(text).replace(" ", ""))


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file; blank lines and ``#`` comments are skipped."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


# ---------------------------------------------------------------- parser

def _common(sp):
    sp.add_argument("--config", help="flat key = value file; flags override it")
    sp.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    sp.add_argument("--output-dir", default=None,
                    help=f"output directory (default ${ENV_OUTPUT} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="annulus-sle", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="subcommand", required=True)

    sp = sub.add_parser("kernel-check", help="residuals of the kernel identities")
    _common(sp)
    sp.add_argument("--r", type=_floats, default=[0.5, 1.0, 2.0],
                    help="moduli, comma separated (default 0.5,1,2)")
    sp.add_argument("--grid", type=int, default=30, help="grid points per axis (default 30)")

    sp = sub.add_parser("trace", help="one SLE driving path and its trace")
    _common(sp)
    sp.add_argument("--p", type=float, default=1.0, help="modulus (default 1)")
    sp.add_argument("--kappa", type=float, default=2.0, help="SLE parameter (default 2)")
    sp.add_argument("--dt", type=float, default=1e-3, help="driving step (default 1e-3)")
    sp.add_argument("--t-max", type=float, default=None, help="final time (default 0.95 p)")
    sp.add_argument("--n-points", type=int, default=200, help="trace points (default 200)")

    sp = sub.add_parser("endpoint", help="histogram of the terminal argument")
    _common(sp)
    sp.add_argument("--p", type=float, default=1.0, help="modulus (default 1)")
    sp.add_argument("--kappa", type=float, default=2.0, help="SLE parameter (default 2)")
    sp.add_argument("--dt", type=float, default=2e-4, help="driving step (default 2e-4)")
    sp.add_argument("--n-paths", type=int, default=2000, help="paths (default 2000)")
    sp.add_argument("--eps", type=float, default=0.02, help="stop at t = p - eps (default 0.02)")
    sp.add_argument("--bins", type=int, default=ep.DEFAULT_BINS, help="histogram bins")

    sp = sub.add_parser("explorer", help="harmonic explorer martingale drift")
    _common(sp)
    sp.add_argument("--outer", type=int, default=10, help="outer hex radius (default 10)")
    sp.add_argument("--inner", type=int, default=4, help="inner hex radius (default 4)")
    sp.add_argument("--mode", choices=ex.MODES, default="dirichlet0", help="inner boundary rule")
    sp.add_argument("--n-runs", type=int, default=2000, help="explorations (default 2000)")
    sp.add_argument("--f0", type=int, nargs=2, default=[-3, 7], metavar=("Q", "R"),
                    help="observed face in axial coordinates (default -3 7)")

    sp = sub.add_parser("sle4-observable", help="flatness of the SLE_4 observable")
    _common(sp)
    sp.add_argument("--p", type=float, default=1.5, help="modulus (default 1.5)")
    sp.add_argument("--z0", type=_complex, default=m4_default_z0(), help="start point in A_{p/2}")
    sp.add_argument("--dt", type=float, default=1e-3, help="driving step (default 1e-3)")
    sp.add_argument("--n-paths", type=int, default=5000, help="paths (default 5000)")
    sp.add_argument("--times", type=_floats, default=[0.3, 0.6, 0.9, 1.2],
                    help="sample times (default 0.3,0.6,0.9,1.2)")
    sp.add_argument("--mode", choices=m4.MODES, default="slit", help="inner boundary rule")
    sp.add_argument("--kappa", type=float, default=m4.KAPPA, help="4 except for controls")

    sp = sub.add_parser("restriction", help="SLE_8/3 restriction martingale")
    _common(sp)
    sp.add_argument("--p", type=float, default=1.0, help="modulus (default 1)")
    sp.add_argument("--c", type=float, default=math.pi, help="slit position (default pi)")
    sp.add_argument("--tau", type=float, default=0.3, help="slit capacity time (default 0.3)")
    sp.add_argument("--dt", type=float, default=1e-3, help="driving step (default 1e-3)")
    sp.add_argument("--n-paths", type=int, default=3000, help="paths (default 3000)")
    sp.add_argument("--times", type=_floats, default=None,
                    help="sample times (default 0.25,0.5,0.75 times p)")
    sp.add_argument("--alpha", type=float, default=rs.ALPHA, help="exponent (default 5/8)")
    sp.add_argument("--kappa", type=float, default=rs.KAPPA, help="8/3 except for controls")
    sp.add_argument("--dump-paths", action="store_true", help="also write paths.jsonl")
    return ap


def m4_default_z0():
    return 0.8 * complex(math.cos(math.pi / 3), math.sin(math.pi / 3))


_CONVERT = {int: int, float: float, _floats: _floats, _complex: _complex}


def _apply_config(parser, sub, argv):
    """Re-parse with values from --config as defaults, so flags still win."""
    ns = parser.parse_args(argv)
    if not ns.config:
        return ns
    sp = sub.choices[ns.subcommand]
    actions = {a.dest: a for a in sp._actions}
    vals = read_config(ns.config)
    defaults = {}
    for k, v in vals.items():
        if k not in actions or k in ("config", "help"):
            raise ConfigError(f"unknown setting {k!r} for {ns.subcommand}")
        a = actions[k]
        if a.nargs == 2:
            defaults[k] = [a.type(x) for x in v.replace(",", " ").split()]
        elif isinstance(a, argparse._StoreTrueAction):
            defaults[k] = v.lower() in ("1", "true", "yes", "on")
        else:
            conv = _CONVERT.get(a.type, str) if a.type else str
            try:
                defaults[k] = conv(v)
            except ValueError as e:
                raise ConfigError(f"bad value for {k}: {v!r}") from e
            if a.choices and defaults[k] not in a.choices:
                raise ConfigError(f"{k} must be one of {a.choices}")
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


# ------------------------------------------------------------ validation

def _need(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate(ns):
    """Check every knob against the module preconditions before running."""
    c = ns.subcommand
    if hasattr(ns, "p"):
        _need(ns.p > 0, f"p must be positive, got {ns.p}")
    if hasattr(ns, "dt"):
        _need(ns.dt > 0, f"dt must be positive, got {ns.dt}")
        _need(ns.dt < ns.p, "dt must be smaller than p")
    if hasattr(ns, "kappa"):
        _need(ns.kappa > 0, f"kappa must be positive, got {ns.kappa}")
    for k in ("n_paths", "n_runs", "n_points"):
        if hasattr(ns, k):
            _need(getattr(ns, k) >= 1, f"{k.replace('_', '-')} must be at least 1")
    _need(ns.seed >= 0, "seed must be non-negative")
    if c == "kernel-check":
        _need(len(ns.r) > 0 and all(r > 0 for r in ns.r), "every r must be positive")
        _need(ns.grid >= 2, "grid must be at least 2")
    elif c == "trace":
        t = 0.95 * ns.p if ns.t_max is None else ns.t_max
        _need(0 < t < ns.p, "t-max must lie in (0, p)")
        _need(ns.dt <= t, "dt must not exceed t-max")
    elif c == "endpoint":
        _need(0 < ns.eps < ns.p / 10, "eps must lie in (0, p/10)")
        _need(ns.bins >= 2, "bins must be at least 2")
    elif c == "explorer":
        _need(ns.outer > ns.inner >= 1, "need outer > inner >= 1")
    elif c == "sle4-observable":
        _need(math.exp(-ns.p / 2) < abs(ns.z0) < 1, "z0 must lie in the open annulus A_{p/2}")
        _need(all(0 <= t < ns.p for t in ns.times), "times must lie in [0, p)")
    elif c == "restriction":
        _need(0 < ns.tau < ns.p, "tau must lie in (0, p)")
        _need(abs(lw.wrap(ns.c)) > 1e-9, "c must not be a multiple of 2 pi")
        times = ns.times if ns.times is not None else [0.25 * ns.p, 0.5 * ns.p, 0.75 * ns.p]
        _need(all(0 < t < ns.p for t in times), "times must lie in (0, p)")
        _need(ns.alpha > 0, "alpha must be positive")


# ------------------------------------------------------------ subcommands

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def _f(x):
    return repr(float(x))


def _kernel_check(ns, out: Path):
    rows = []
    for r in ns.r:
        for name, v in identity_residuals(r, ns.grid).items():
            rows.append([name, _f(r), _f(v)])
    _write_csv(out / "kernel_check.csv", ["identity", "r", "max_residual"], rows)
    w = csv.writer(sys.stdout)
    w.writerow(["identity", "r", "max_residual"])
    w.writerows(rows)
    return ["kernel_check.csv"]


def _trace(ns, out: Path):
    t_max = 0.95 * ns.p if ns.t_max is None else ns.t_max
    drv = lw.sample_driving(ns.kappa, ns.p, ns.dt, t_max, ep.path_rng(ns.seed, 0))
    ts = np.linspace(0.0, t_max, ns.n_points)
    tr = lw.compute_trace(drv, ts)
    drv.to_csv(out / "driving.csv")
    tr.to_csv(out / "trace.csv")
    return ["driving.csv", "trace.csv"]


def _endpoint(ns, out: Path):
    hist = ep.estimate_endpoint(ns.kappa, ns.p, ns.n_paths, ns.dt, ns.eps, ns.seed, ns.bins)
    mean, se = hist.mean_and_se()
    summary = {"n_paths": hist.n_paths, "n_dropped": hist.n_dropped, "mean_arg": mean,
               "se_arg": se, "circular_variance": hist.circular_variance()}
    cand = None
    if ns.kappa == 2.0:
        cand = ep.DensityCandidate("lambda2")
        stat, pval, dof = ep.chi2_test(hist, cand)
        summary.update(chi2=stat, p_value=pval, dof=dof)
    hist.to_csv(out / "endpoint_hist.csv", cand)
    with open(out / "endpoint_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return ["endpoint_hist.csv", "endpoint_summary.json"]


def _explorer(ns, out: Path):
    dom = ex.build_domain(ns.outer, ns.inner)
    f0 = tuple(ns.f0)
    if f0 not in dom.index:
        raise ConfigError(f"f0 = {f0} is not a face of the domain")
    mean, se = ex.martingale_drift(dom, f0, ns.n_runs, seed=ns.seed, mode=ns.mode)
    st = ex.run(dom, ep.path_rng(ns.seed, 0), ns.mode)
    ex.write_log(st, out / "explorer_log.jsonl")
    ex.write_paths(st, out / "explorer_paths.csv")
    with open(out / "explorer_drift.json", "w") as fh:
        json.dump({"mode": ns.mode, "f0": list(f0), "n_runs": ns.n_runs,
                   "mean_drift": mean, "se": se}, fh, indent=2)
    return ["explorer_drift.json", "explorer_log.jsonl", "explorer_paths.csv"]


def _observable(ns, out: Path):
    rep = m4.run_observable(ns.p, ns.z0, ns.n_paths, ns.dt, ns.times, ns.mode, ns.seed,
                            kappa=ns.kappa)
    rep.to_csv(out / "observable.csv")
    with open(out / "observable_summary.json", "w") as fh:
        json.dump({"initial": rep.initial, "times": rep.times.tolist(),
                   "mean": rep.mean.tolist(), "std_error": rep.std_error.tolist(),
                   "n_swallowed": rep.n_swallowed.tolist(),
                   "n_ambiguous": rep.n_ambiguous.tolist(), "reliable": rep.reliable},
                  fh, indent=2)
    return ["observable.csv", "observable_summary.json"]


def _restriction(ns, out: Path):
    hull = rs.make_slit_hull(ns.p, ns.c, ns.tau)
    times = ns.times if ns.times is not None else [0.25 * ns.p, 0.5 * ns.p, 0.75 * ns.p]
    gts = [0.9 * ns.p]
    rec = np.unique(np.concatenate([[0.0], times, gts]))
    batch = rs.run_batch(hull, ns.n_paths, ns.dt, rec, ns.seed, kappa=ns.kappa)
    rep = rs.mc_restriction(hull, ns.n_paths, ns.dt, times, ns.seed, gts, ns.alpha,
                            batch=batch)
    rep.to_json(out / "restriction_report.json")
    rep.to_csv(out / "restriction_M.csv")
    files = ["restriction_report.json", "restriction_M.csv"]
    if ns.dump_paths:
        rs.write_paths_jsonl(batch, out / "paths.jsonl", ns.alpha)
        files.append("paths.jsonl")
    return files


RUNNERS = {"kernel-check": _kernel_check, "trace": _trace, "endpoint": _endpoint,
           "explorer": _explorer, "sle4-observable": _observable, "restriction": _restriction}


def _jsonable(v):
    if isinstance(v, complex):
        return [v.real, v.imag]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def main(argv=None) -> int:
    parser = build_parser()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    try:
        ns = _apply_config(parser, sub, argv)
        validate(ns)
    except (ConfigError, OSError) as e:
        print(f"annulus-sle: invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(ns.output_dir or os.environ.get(ENV_OUTPUT, "runs"))
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    try:
        files = RUNNERS[ns.subcommand](ns, out)
    except ConfigError as e:
        print(f"annulus-sle: invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (DomainError, GeometryError) as e:
        print(f"annulus-sle: invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (AnnulusSLEError, FloatingPointError, ArithmeticError) as e:
        print(f"annulus-sle: numerical failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    config = {k: _jsonable(v) for k, v in sorted(vars(ns).items())}
    manifest = {"subcommand": ns.subcommand, "config": config, "version": __version__,
                "seed": ns.seed, "started": started, "wall_time_s": time.time() - t0,
                "files": files}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
