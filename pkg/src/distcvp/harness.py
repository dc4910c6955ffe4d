"""Seeded Monte Carlo estimates, parameter sweeps and table output.

Every estimator draws from ``numpy.random.default_rng(seed)`` in fixed-size
chunks, so results depend only on the seed and the sample count.  Sweep
points get independent substreams ``SeedSequence([seed, index])``, which
makes serial and parallel sweeps produce identical rows.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import special

from .analytic import (
    InfeasibleAllocation,
    gaussian_differential_entropy,
    infinite_round_quantities,
    pe_rate_constant,
)
from .geometry import GeometryError, babai_cell, cell_geometry, offset_geometry
from .lattice import Lattice2D, LatticeParameterError, babai_coeffs, make_lattice, nearest_coeffs
from .protocols import (
    InfiniteRoundPlan,
    ProtocolConfig,
    ProtocolError,
    SingleRoundPlan,
    config_from_rate,
    run_batch,
)

CHUNK = 1 << 18

CSV_COLUMNS = (
    "parameter", "L0", "H0", "pe_analytic", "pe_empirical", "pe_stderr",
    "rbar_analytic", "rbar_empirical", "nbar_empirical", "errors",
    "nbar_analytic", "rbar_stderr", "nbar_stderr", "rate_codelength", "rate_plugin",
    "pe_exact", "rate_exact", "samples", "status",
)


class InfiniteRoundError(RuntimeError):
    """The zero-error protocol decoded a wrong lattice point."""

    def __init__(self, message: str, sample: np.ndarray):
        super().__init__(message)
        self.sample = sample


# --------------------------------------------------------------------------
# estimates
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SimEstimate:
    n_samples: int
    mean: float
    std_error: float
    units: str = ""

    def within(self, value: float, k: float = 3.0) -> bool:
        return abs(self.mean - value) <= k * self.std_error


@dataclass
class MomentAccumulator:
    """Pairwise-mergeable count / mean / sum of squared deviations."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def add(self, values) -> "MomentAccumulator":
        v = np.asarray(values, dtype=float).ravel()
        if v.size:
            other = MomentAccumulator(int(v.size), float(v.mean()), float(((v - v.mean()) ** 2).sum()))
            self.merge(other)
        return self

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.n == 0:
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean += delta * other.n / n
        self.m2 += other.m2 + delta * delta * self.n * other.n / n
        self.n = n
        return self

    def estimate(self, units: str = "") -> SimEstimate:
        if self.n < 1:
            raise ValueError("no samples")
        var = self.m2 / (self.n - 1) if self.n > 1 else 0.0
        return SimEstimate(self.n, self.mean, math.sqrt(var / self.n), units)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def sample_cell(lat: Lattice2D, offset, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the Babai cell of the origin (direct rectangle sampling)."""
    cell = babai_cell(lat, offset)
    u = rng.random((n, 2))
    return np.column_stack([cell.xmin + u[:, 0] * cell.width, cell.ymin + u[:, 1] * cell.height])


def _chunks(n: int):
    done = 0
    while done < n:
        k = min(CHUNK, n - done)
        yield k
        done += k


def _check_n(n_samples: int) -> None:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")


def plugin_entropy(counts: Iterable[int]) -> float:
    c = np.array(list(counts), dtype=float)
    p = c / c.sum()
    return float(-(p * np.log2(p)).sum())


@dataclass(frozen=True)
class SingleRoundStats:
    pe: SimEstimate
    rate_codelength: SimEstimate
    rate_plugin: float
    pe_exact: float
    rate_exact: float
    bins: dict


def simulate_single_round(lat: Lattice2D, cfg: ProtocolConfig, n_samples: int, seed,
                          plan: SingleRoundPlan | None = None) -> SingleRoundStats:
    """Error probability and Stage-II rate of a single-round protocol, uniform source on the cell.

    The rate is reported both as the mean ideal codelength of the
    transcripts and as the plug-in entropy of the observed transcripts.
    """
    _check_n(n_samples)
    plan = plan if plan is not None else SingleRoundPlan(lat, cfg)
    rng = _rng(seed)
    err, bits = MomentAccumulator(), MomentAccumulator()
    counts: Counter = Counter()
    for k in _chunks(n_samples):
        x = sample_cell(lat, cfg.offset, k, rng)
        u, res = run_batch(lat, x, cfg, plan)
        wrong = np.any(res.decoded + u != nearest_coeffs(lat, x), axis=1)
        err.add(wrong)
        bits.add(res.bits)
        keys, cnt = np.unique(res.symbols, axis=0, return_counts=True)
        counts.update({tuple(int(v) for v in key): int(c) for key, c in zip(keys, cnt)})
    return SingleRoundStats(err.estimate("probability"), bits.estimate("bits"), plugin_entropy(counts.values()),
                            plan.exact_error_prob(), plan.exact_rate(), dict(cfg.bins or {}))


def estimate_error_prob(lat: Lattice2D, cfg: ProtocolConfig, n_samples: int, seed) -> SimEstimate:
    """Fraction of uniform-on-cell samples whose single-round decision is not the nearest point."""
    _check_n(n_samples)
    plan = SingleRoundPlan(lat, cfg)
    rng = _rng(seed)
    acc = MomentAccumulator()
    for k in _chunks(n_samples):
        x = sample_cell(lat, cfg.offset, k, rng)
        u, res = run_batch(lat, x, cfg, plan)
        acc.add(np.any(res.decoded + u != nearest_coeffs(lat, x), axis=1))
    return acc.estimate("probability")


@dataclass(frozen=True)
class InfiniteRoundStats:
    rbar: SimEstimate
    nbar: SimEstimate
    errors: int
    entered: int                       # runs that reached the bit exchange
    extra_rounds: dict[int, int]       # histogram of exchanged bit pairs, for entered runs
    diagnostic: np.ndarray | None = field(default=None, repr=False)


def estimate_infinite_round(lat: Lattice2D, d1: float | None, n_samples: int, seed,
                            max_rounds: int = 64, raise_on_error: bool = True) -> InfiniteRoundStats:
    """Average Stage-II bits and rounds of the bit-exchange protocol over a uniform source.

    ``d1=None`` is the zero offset.  Any decoding error raises
    :class:`InfiniteRoundError` carrying the offending inputs unless
    ``raise_on_error`` is false.
    """
    _check_n(n_samples)
    offset = None if d1 is None or lat.is_rectangular else offset_geometry(lat, d1)
    cfg = ProtocolConfig("inf", None, offset, max_rounds)
    plan = InfiniteRoundPlan(lat, offset, max_rounds)
    rng = _rng(seed)
    bits, rounds = MomentAccumulator(), MomentAccumulator()
    hist: Counter = Counter()
    errors = 0
    bad = []
    for k in _chunks(n_samples):
        x = sample_cell(lat, offset, k, rng)
        u, res = run_batch(lat, x, cfg, plan)
        wrong = np.any(res.decoded + u != nearest_coeffs(lat, x), axis=1)
        if np.any(wrong):
            errors += int(wrong.sum())
            bad.append(x[wrong][:10])
        bits.add(res.bits)
        rounds.add(res.rounds)
        entered = res.extra_rounds[res.extra_rounds > 0]
        hist.update(Counter(entered.tolist()))
    diag = np.concatenate(bad) if bad else None
    if errors and raise_on_error:
        raise InfiniteRoundError(f"{errors} decoding errors in {n_samples} runs; first inputs: {diag[:3].tolist()}", diag)
    return InfiniteRoundStats(bits.estimate("bits"), rounds.estimate("rounds"), errors,
                              int(sum(hist.values())), dict(sorted(hist.items())), diag)


# --------------------------------------------------------------------------
# Stage I
# --------------------------------------------------------------------------

ENTROPY_ESTIMATORS = ("grassberger", "miller-madow", "plugin")


def entropy_estimates(counts: Sequence[int]) -> dict[str, float]:
    """Plug-in, Miller-Madow and Grassberger entropy estimates (bits) from symbol counts.

    Plug-in underestimates by roughly ``(K-1)/(2N ln 2)`` when the ``K``
    observed symbols are comparable in number to the ``N`` samples;
    Miller-Madow adds that term back and Grassberger's digamma estimator
    removes most of the remaining bias.
    """
    c = np.asarray(counts, dtype=float)
    n = c.sum()
    p = c / n
    plugin = float(-(p * np.log2(p)).sum())
    mm = float(plugin + (len(c) - 1) / (2.0 * n * math.log(2.0)))
    g = special.digamma(c) + 0.5 * (-1.0) ** c * (special.digamma(0.5 * (c + 1)) - special.digamma(0.5 * c))
    gr = float((math.log(n) - (c * g).sum() / n) / math.log(2.0))
    return {"plugin": plugin, "miller-madow": mm, "grassberger": gr}


@dataclass(frozen=True)
class Stage1Result:
    estimate: SimEstimate      # H(U) + 2 log2(alpha) + log2 det V (unit scale), chosen estimator
    estimator: str
    entropies: dict            # raw H(U) under every estimator
    distinct_cells: int
    target: float              # h1 + h2

    @property
    def raw_entropy(self) -> float:
        return self.entropies["plugin"]


def stage1_entropy_experiment(alpha: float, source: str = "gaussian", n_samples: int = 10**6, seed=0,
                              lat: Lattice2D | None = None, estimator: str = "grassberger") -> Stage1Result:
    """Entropy of the Babai coefficients of an iid source, normalized by the cell area.

    ``source`` is ``"gaussian"`` (iid standard normal coordinates) or
    ``"uniform-square"`` (uniform on [0, 1)^2).  The default lattice is the
    square lattice, whose unit-scale determinant is 1.  The reported value
    ``H(U) + 2 log2(alpha) + log2 det V`` approaches ``h1 + h2`` as alpha -> 0.
    The standard error is the delta-method error of the plug-in estimate.
    """
    _check_n(n_samples)
    if estimator not in ENTROPY_ESTIMATORS:
        raise ValueError(f"estimator must be one of {ENTROPY_ESTIMATORS}")
    base = lat if lat is not None else make_lattice(1.0, math.pi / 2)
    scaled = base.scaled(alpha)
    rng = _rng(seed)
    if source == "gaussian":
        draw = lambda k: rng.standard_normal((k, 2))  # noqa: E731
        target = 2.0 * gaussian_differential_entropy(1.0)
    elif source in ("uniform-square", "uniform"):
        draw = lambda k: rng.random((k, 2))  # noqa: E731
        target = 0.0
    else:
        raise ValueError(f"unknown source {source!r}")
    counts: Counter = Counter()
    for k in _chunks(n_samples):
        u = babai_coeffs(scaled, draw(k))
        keys, cnt = np.unique(u, axis=0, return_counts=True)
        counts.update({(int(a), int(b)): int(c) for (a, b), c in zip(keys, cnt)})
    c = np.array([counts[k] for k in sorted(counts)], dtype=float)
    est = entropy_estimates(c)
    p = c / n_samples
    h = est["plugin"]
    se = math.sqrt(max(float((p * np.log2(p) ** 2).sum()) - h * h, 0.0) / n_samples)
    shift = 2.0 * math.log2(alpha) + math.log2(base.det)
    if len(counts) < 100:
        warnings.warn(f"only {len(counts)} distinct cells hit; the entropy estimate is undersampled", stacklevel=2)
    return Stage1Result(SimEstimate(n_samples, est[estimator] + shift, se, "bits"), estimator, est,
                        len(counts), target)


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

SWEEP_PARAMS = ("theta", "d1", "rate", "alpha")


@dataclass(frozen=True)
class SweepSpec:
    """Grid over one parameter with everything else fixed.

    ``d1=None`` means zero offset.  ``rate`` is the Stage-II rate for the
    single-round orders (the source is uniform on one cell, so Stage I costs
    nothing and this is also the sum rate).
    """

    param: str
    lo: float
    hi: float
    steps: int
    rho: float = 1.0
    theta: float = 2 * math.pi / 5
    alpha: float = 1.0
    order: str = "inf"
    rate: float = 4.0
    d1: float | None = None
    samples: int = 0
    seed: int = 0
    max_rounds: int = 64

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ValueError(f"param must be one of {SWEEP_PARAMS}, got {self.param!r}")
        if self.steps < 2:
            raise ValueError("steps must be >= 2")
        if not self.lo < self.hi:
            raise ValueError("min must be < max")
        if self.samples < 0:
            raise ValueError("samples must be >= 0")
        object.__setattr__(self, "order", str(self.order) if str(self.order) in ("12", "21") else "inf")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.steps)


def _point_values(spec: SweepSpec, value: float):
    p = {"rho": spec.rho, "theta": spec.theta, "alpha": spec.alpha, "rate": spec.rate, "d1": spec.d1}
    p[spec.param] = float(value)
    return p


def evaluate_point(spec: SweepSpec, index: int) -> dict:
    """One sweep row; invalid points become rows with a warning in ``status``."""
    value = float(spec.grid[index])
    row = {k: None for k in CSV_COLUMNS}
    row.update(parameter=value, samples=spec.samples, status="ok")
    p = _point_values(spec, value)
    seed = np.random.SeedSequence([spec.seed, index])
    try:
        lat = make_lattice(p["rho"], p["theta"], p["alpha"])
        d1 = p["d1"]
        offset = None if d1 is None or lat.is_rectangular else offset_geometry(lat, d1)
        geom = cell_geometry(lat, offset)
        row["L0"] = geom.L0_fraction
        row["H0"] = geom.H0_fraction
        if spec.order == "inf":
            q = infinite_round_quantities(lat, d1)
            row["rbar_analytic"], row["nbar_analytic"] = q.rbar, q.nbar
            if spec.samples:
                st = estimate_infinite_round(lat, d1, spec.samples, seed, spec.max_rounds, raise_on_error=False)
                row.update(rbar_empirical=st.rbar.mean, rbar_stderr=st.rbar.std_error,
                           nbar_empirical=st.nbar.mean, nbar_stderr=st.nbar.std_error, errors=st.errors)
        else:
            k = pe_rate_constant(lat, offset, int(spec.order))
            row["pe_analytic"] = k.error_prob(p["rate"])
            if spec.samples:
                cfg = config_from_rate(lat, p["rate"], spec.order, offset, spec.max_rounds)
                st = simulate_single_round(lat, cfg, spec.samples, seed)
                row.update(pe_empirical=st.pe.mean, pe_stderr=st.pe.std_error,
                           rate_codelength=st.rate_codelength.mean, rate_plugin=st.rate_plugin,
                           pe_exact=st.pe_exact, rate_exact=st.rate_exact,
                           errors=int(round(st.pe.mean * st.pe.n_samples)))
    except (LatticeParameterError, GeometryError, InfeasibleAllocation, ProtocolError) as exc:
        row["status"] = f"skipped: {exc}"
    return row


def _evaluate_star(args):
    return evaluate_point(*args)


def sweep(spec: SweepSpec, workers: int = 1) -> list[dict]:
    """Evaluate every grid point; the rows do not depend on ``workers``."""
    jobs = [(spec, i) for i in range(spec.steps)]
    if workers <= 1:
        rows = [evaluate_point(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_evaluate_star, jobs))
    for r in rows:
        if r["status"] != "ok":
            warnings.warn(f"{spec.param}={r['parameter']!r} {r['status']}", stacklevel=2)
    return rows


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str] = CSV_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def rows_to_json(rows: Sequence[dict], metadata: dict, columns: Sequence[str] = CSV_COLUMNS) -> str:
    doc = {"metadata": {k: _jsonable(v) for k, v in metadata.items()},
           "rows": [{c: _jsonable(r.get(c)) for c in columns} for r in rows]}
    return json.dumps(doc, indent=2) + "\n"


def sweep_metadata(spec: SweepSpec, workers: int | None = None) -> dict:
    from . import __version__

    meta = {"version": __version__, "seed": spec.seed}
    meta.update({f"config.{k}": v for k, v in asdict(spec).items()})
    return meta


def write_table(rows: Sequence[dict], path: str | None, fmt: str = "csv", metadata: dict | None = None) -> str:
    """Serialize rows as CSV or JSON; write to ``path`` if given and return the text."""
    if fmt == "csv":
        text = rows_to_csv(rows)
    elif fmt == "json":
        text = rows_to_json(rows, metadata or {})
    else:
        raise ValueError(f"format must be csv or json, got {fmt!r}")
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    return text
