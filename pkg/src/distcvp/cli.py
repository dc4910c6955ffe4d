"""Command-line interface: ``distcvp {validate,eval,simulate,sweep}``.

Exit codes: 0 success, 1 invalid parameters, 2 decoding errors in
infinite-round mode (the protocol is supposed to be error-free).
"""

from __future__ import annotations

import argparse
import json
import math
import re
import sys
import warnings

from . import __version__
from .analytic import InfeasibleAllocation, allocate_bins, infinite_round_quantities, pe_rate_constant
from .geometry import GeometryError, cell_geometry, offset_geometry
from .harness import (
    CSV_COLUMNS,
    SweepSpec,
    estimate_infinite_round,
    simulate_single_round,
    sweep,
    sweep_metadata,
    write_table,
)
from .lattice import LatticeParameterError, make_lattice
from .protocols import ProtocolConfig, ProtocolError, config_from_rate

EXIT_OK, EXIT_INVALID, EXIT_ERRORS = 0, 1, 2

_PI = re.compile(r"^\s*([0-9]*\.?[0-9]*)\s*\*?\s*pi\s*(?:/\s*([0-9]*\.?[0-9]+))?\s*$", re.IGNORECASE)


def parse_angle(text: str) -> float:
    """Radians, or multiples of pi such as ``pi/3``, ``2pi/5``, ``0.45*pi``."""
    m = _PI.match(text)
    if m:
        k = float(m.group(1)) if m.group(1) else 1.0
        d = float(m.group(2)) if m.group(2) else 1.0
        return k * math.pi / d
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an angle: {text!r}") from None


def parse_bins(text: str) -> dict[int, int]:
    """``"-2:4,2:4"`` -> {-2: 4, 2: 4}."""
    out = {}
    try:
        for part in text.split(","):
            j, n = part.split(":")
            out[int(j)] = int(n)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bins must look like '-2:4,2:4', got {text!r}") from None
    return out


def _add_lattice(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--theta", type=parse_angle, default=parse_angle("pi/3"),
                   help="radians or a multiple of pi, e.g. pi/3, 2pi/5")
    p.add_argument("--alpha", type=float, default=1.0)


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--order", choices=("12", "21", "inf"), default="inf")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--rate", type=float, default=4.0, help="Stage-II rate in bits (single-round orders)")
    g.add_argument("--bins", type=parse_bins, default=None, help="explicit bin counts, e.g. --bins=-2:4,2:4")
    o = p.add_mutually_exclusive_group()
    o.add_argument("--d1", type=float, default=None, help="offset parameter (top-left corner width)")
    o.add_argument("--offset-zero", action="store_true", help="zero offset (default)")
    p.add_argument("--max-rounds", type=int, default=64)


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default=None, help="output file (default: stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="distcvp", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check lattice parameters")
    _add_lattice(v)

    e = sub.add_parser("eval", help="analytic quantities for one configuration")
    _add_lattice(e)
    _add_config(e)

    s = sub.add_parser("simulate", help="Monte Carlo for one configuration")
    _add_lattice(s)
    _add_config(s)
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    _add_output(s)

    w = sub.add_parser("sweep", help="grid over one parameter")
    _add_lattice(w)
    _add_config(w)
    w.add_argument("--param", choices=("theta", "d1", "rate", "alpha"), required=True)
    w.add_argument("--min", dest="lo", type=parse_angle, required=True)
    w.add_argument("--max", dest="hi", type=parse_angle, required=True)
    w.add_argument("--steps", type=int, default=20)
    w.add_argument("--samples", type=int, default=0)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--workers", type=int, default=1)
    _add_output(w)
    return ap


def _offset(lat, args):
    if args.d1 is None or lat.is_rectangular:
        return None
    return offset_geometry(lat, args.d1)


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)


def cmd_validate(args) -> int:
    lat = make_lattice(args.rho, args.theta, args.alpha)
    print(f"valid: rho={lat.rho!r} theta={lat.theta!r} alpha={lat.alpha!r} "
          f"rho*cos(theta)={lat.c!r} rho*sin(theta)={lat.s!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    lat = make_lattice(args.rho, args.theta, args.alpha)
    offset = _offset(lat, args)
    geom = cell_geometry(lat, offset)
    out = {
        "rho": lat.rho, "theta": lat.theta, "alpha": lat.alpha, "d1": args.d1,
        "thresholds": list(geom.thresholds), "lengths": list(geom.lengths),
        "heights": list(geom.heights), "L0": geom.L0_fraction, "H0": geom.H0_fraction,
    }
    if args.order == "inf":
        q = infinite_round_quantities(lat, args.d1)
        out.update(rbar=q.rbar, nbar=q.nbar, Q=list(q.Q), P_top=list(q.P_top), P_bottom=list(q.P_bottom))
    else:
        k = pe_rate_constant(lat, offset, int(args.order))
        out.update(order=args.order, p0=k.p0, constant=k.constant, decay=k.decay,
                   split_entropy=k.split_entropy)
        if args.bins is None:
            alloc = allocate_bins(geom, args.rate, int(args.order))
            out.update(rate=args.rate, pe=k.error_prob(args.rate),
                       bins_real={str(j): n for j, n in alloc.real.items()},
                       bins={str(j): n for j, n in alloc.counts.items()})
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_simulate(args) -> int:
    lat = make_lattice(args.rho, args.theta, args.alpha)
    offset = _offset(lat, args)
    geom = cell_geometry(lat, offset)
    row = {c: None for c in CSV_COLUMNS}
    row.update(parameter=None, L0=geom.L0_fraction, H0=geom.H0_fraction, samples=args.samples, status="ok")
    if args.order == "inf":
        q = infinite_round_quantities(lat, args.d1)
        st = estimate_infinite_round(lat, args.d1, args.samples, args.seed, args.max_rounds, raise_on_error=False)
        row.update(rbar_analytic=q.rbar, nbar_analytic=q.nbar, rbar_empirical=st.rbar.mean,
                   rbar_stderr=st.rbar.std_error, nbar_empirical=st.nbar.mean, nbar_stderr=st.nbar.std_error,
                   errors=st.errors)
    else:
        if args.bins is not None:
            cfg = ProtocolConfig(args.order, args.bins, offset, args.max_rounds)
        else:
            cfg = config_from_rate(lat, args.rate, args.order, offset, args.max_rounds)
        k = pe_rate_constant(lat, offset, int(args.order))
        st = simulate_single_round(lat, cfg, args.samples, args.seed)
        row.update(pe_analytic=k.error_prob(st.rate_exact), pe_empirical=st.pe.mean, pe_stderr=st.pe.std_error,
                   rate_codelength=st.rate_codelength.mean, rate_plugin=st.rate_plugin,
                   pe_exact=st.pe_exact, rate_exact=st.rate_exact,
                   errors=int(round(st.pe.mean * st.pe.n_samples)))
    meta = {"version": __version__, "seed": args.seed, "command": "simulate",
            **{f"config.{k}": v for k, v in vars(args).items() if k not in ("func", "out", "format")}}
    meta = {k: (v if not isinstance(v, dict) else {str(a): b for a, b in v.items()}) for k, v in meta.items()}
    _emit(write_table([row], args.out, args.format, meta), args.out)
    if args.order == "inf" and row["errors"]:
        print(f"error: {row['errors']} decoding errors in infinite-round mode", file=sys.stderr)
        return EXIT_ERRORS
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.bins is not None:
        raise ValueError("sweep derives bins from --rate; --bins is not supported here")
    d1 = None if args.offset_zero else args.d1
    spec = SweepSpec(args.param, args.lo, args.hi, args.steps, rho=args.rho, theta=args.theta, alpha=args.alpha,
                     order=args.order, rate=args.rate, d1=d1, samples=args.samples, seed=args.seed,
                     max_rounds=args.max_rounds)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rows = sweep(spec, workers=args.workers)
    for r in rows:
        if r["status"] != "ok":
            print(f"warning: {args.param}={r['parameter']!r} {r['status']}", file=sys.stderr)
    _emit(write_table(rows, args.out, args.format, sweep_metadata(spec)), args.out)
    if spec.order == "inf" and any(r.get("errors") for r in rows):
        print("error: decoding errors in infinite-round mode", file=sys.stderr)
        return EXIT_ERRORS
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "eval": cmd_eval, "simulate": cmd_simulate, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (LatticeParameterError, GeometryError, InfeasibleAllocation, ProtocolError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
