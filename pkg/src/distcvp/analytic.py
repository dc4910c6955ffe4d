"""Closed-form rate and error evaluators.

Every logarithm is base 2.  For a single-round protocol with a uniform
source on the Babai cell the fine-quantization error probability behaves as

    P_e ~ K * 2 ** (-R_sum / (1 - p0))

where ``p0`` is the probability of the error-free subinterval (``L0`` for the
12 order, ``H0`` for the 21 order) and ``K`` is :func:`pe_rate_constant`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import (
    GEOM_TOL,
    BoundaryProfile,
    CellGeometry,
    GeometryError,
    boundary_profile,
    cell_geometry,
    offset_geometry,
)
from .lattice import Lattice2D

NORM_TOL = 1e-12
DEGENERATE_TOL = 1e-6     # 1 - p0 below this makes the decay exponent meaningless


class InfeasibleAllocation(ValueError):
    """The Stage-II rate cannot give every active subinterval at least one bin."""


def entropy(p: Sequence[float]) -> float:
    """Shannon entropy in bits, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("distribution has negative weights")
    if abs(p.sum() - 1.0) > NORM_TOL * max(1, p.size):
        raise ValueError(f"distribution sums to {p.sum()!r}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def _h(p: np.ndarray) -> np.ndarray:
    """Row-wise entropy of an array of (possibly unnormalized-by-rounding) distributions."""
    p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return t.sum(axis=-1)


def stage1_rate_limit(alpha: float, h1: float, h2: float) -> float:
    """Small-scale approximation ``H(U) ~ h1 + h2 - 2 log2(alpha)`` (det V = 1 at unit scale)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return h1 + h2 - 2.0 * math.log2(alpha)


def gaussian_differential_entropy(sigma: float = 1.0) -> float:
    return 0.5 * math.log2(2.0 * math.pi * math.e * sigma * sigma)


def gamma_fn(geom: CellGeometry, profile: BoundaryProfile, x1) -> np.ndarray:
    """``(|u'(x1)| + |l'(x1)|) / (4H)`` for a source uniform on the cell."""
    return profile.slope_sum(x1) / (4.0 * geom.H)


def gamma_table(geom: CellGeometry, order: int = 12) -> np.ndarray:
    """Per-subinterval gamma for the 12 order (j=-2..2) or 21 order (j=-1..1)."""
    if order == 12:
        return np.array(geom.slope_sums) / (4.0 * geom.H)
    if order == 21:
        return np.array(geom.band_slope_sums) / (4.0 * geom.L)
    raise ValueError(f"order must be 12 or 21, got {order!r}")


# --------------------------------------------------------------------------
# split entropies
# --------------------------------------------------------------------------

def _plogp_integral(pa: np.ndarray, pb: np.ndarray, width: float) -> float:
    """Exact integral of -p log2 p over a piece on which p runs linearly from pa to pb."""
    def F(p):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(p > 0, -(0.5 * p * p * np.log(np.where(p > 0, p, 1.0)) - 0.25 * p * p), 0.0)

    pa = np.clip(pa, 0.0, 1.0)
    pb = np.clip(pb, 0.0, 1.0)
    dp = pb - pa
    flat = np.abs(dp) < 1e-14
    with np.errstate(divide="ignore", invalid="ignore"):
        sloped = (F(pb) - F(pa)) / np.where(flat, 1.0, dp)
    mid = 0.5 * (pa + pb)
    with np.errstate(divide="ignore", invalid="ignore"):
        level = np.where(mid > 0, -mid * np.log(np.where(mid > 0, mid, 1.0)), 0.0)
    vals = np.where(flat, level, sloped)
    return float(width * vals.sum() / math.log(2.0))


def _split_integral(split, breaks: np.ndarray) -> float:
    """Integral of H(split(t)) dt where ``split`` is linear between ``breaks``."""
    total = 0.0
    for a, b in zip(breaks[:-1], breaks[1:]):
        if b - a > 0:
            total += _plogp_integral(np.asarray(split(a)), np.asarray(split(b)), b - a)
    return total


def _breaks(*arrays) -> np.ndarray:
    pts = np.unique(np.concatenate(arrays))
    keep = np.concatenate([[True], np.diff(pts) > 1e-13])
    return pts[keep]


def expected_split_entropy_12(geom: CellGeometry, profile: BoundaryProfile) -> float:
    """E[H(Q(X1))] with X1 uniform across the cell, Q the three-way column split.

    The split probabilities are linear between profile breakpoints, so the
    integral is evaluated exactly piece by piece.
    """
    if geom.is_trivial:
        return 0.0
    br = _breaks(geom.interval_edges, profile.upper.xs, profile.lower.xs)
    return _split_integral(profile.split_12, br) / geom.L


def expected_split_entropy_21(geom: CellGeometry, profile: BoundaryProfile) -> float:
    """E[H(P(X2))] with X2 uniform across the cell, P the three-way row split."""
    if geom.is_trivial:
        return 0.0
    br = _breaks(geom.band_edge_list, profile.left.xs, profile.right.xs)
    return _split_integral(profile.split_21, br) / geom.H


def _order_terms(geom: CellGeometry, profile: BoundaryProfile, order: int):
    """(p, a, split_entropy, zero_index): P(W=j), gamma_j * len_j (normalized), E[H(split)]."""
    if order == 12:
        p = geom.p_intervals
        a = np.array(geom.heights) / (4.0 * geom.H)
        return p, a, expected_split_entropy_12(geom, profile), 2
    if order == 21:
        p = geom.p_bands
        a = np.array(geom.band_spans) / (4.0 * geom.L)
        return p, a, expected_split_entropy_21(geom, profile), 1
    raise ValueError(f"order must be 12 or 21, got {order!r}")


# --------------------------------------------------------------------------
# bin allocation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BinAllocation:
    order: int
    real: dict[int, float]
    counts: dict[int, int]
    total_rate: float
    error_prob: float          # modeled P_e at the real-valued optimum


def _active(p: np.ndarray, a: np.ndarray, zero: int) -> list[int]:
    return [k for k in range(len(p)) if k != zero and p[k] > GEOM_TOL and a[k] > 0]


def allocate_bins(geom: CellGeometry, total_rate_II: float, order: int = 12,
                  profile: BoundaryProfile | None = None) -> BinAllocation:
    """Rate-optimal bin counts per subinterval.

    The modeled Stage-II rate is ``H(W) + sum_j P(W=j) log2 N_j + E[H(split)]``.
    Minimizing the modeled error ``sum_j P(W=j) gamma_j len_j / N_j`` under
    that rate gives ``N_j`` proportional to ``gamma_j * len_j`` (equal
    conditional error in every subinterval).
    """
    prof = profile if profile is not None else geom.profile
    if prof is None:
        raise GeometryError("geometry carries no boundary profile; pass profile=")
    p, a, hsplit, zero = _order_terms(geom, prof, order)
    offs = zero
    act = _active(p, a, zero)
    if not act:
        return BinAllocation(order, {}, {}, float(total_rate_II), 0.0)
    if total_rate_II <= 0:
        raise InfeasibleAllocation("Stage-II rate must be positive for a nonrectangular lattice")
    hw = entropy(p / p.sum())
    pa = p[act]
    budget = total_rate_II - hw - hsplit
    log_lam = (float(np.sum(pa * np.log2(a[act]))) - budget) / float(pa.sum())
    lam = 2.0 ** log_lam
    real = {k - offs: float(a[k] / lam) for k in act}
    small = {j: n for j, n in real.items() if n < 1.0}
    if small:
        raise InfeasibleAllocation(
            f"rate {total_rate_II!r} too small: real-valued bin counts {small} are below 1"
        )
    counts = {j: max(1, int(round(n))) for j, n in real.items()}
    return BinAllocation(order, real, counts, float(total_rate_II), float(pa.sum() * lam))


# --------------------------------------------------------------------------
# rate/error constants
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RateErrorConstant:
    """``P_e ~ constant * 2 ** (-R_sum / (1 - p0))`` for a single-round order."""

    order: int
    p0: float
    constant: float
    split_entropy: float = 0.0

    @property
    def decay(self) -> float:
        return math.inf if self.p0 >= 1.0 else 1.0 / (1.0 - self.p0)

    def error_prob(self, rate: float) -> float:
        if self.constant == 0.0:
            return 0.0
        return self.constant * 2.0 ** (-rate * self.decay)


def pe_rate_constant(lat: Lattice2D, offset=None, order: int = 12) -> RateErrorConstant:
    """Limiting value of ``P_e * 2**(R_sum/(1-p0))`` for a uniform source on the cell.

    For the 12 order (lengths normalized by the cell width, ``H`` the cell
    height)::

        K = (1-L0)/4 * (1/L0)**(L0/(1-L0))
              * prod_{j!=0} (H_j/(L_j H))**(L_j/(1-L0))
              * 2**(E[H(Q(X1))]/(1-L0))

    The 21 order is the same expression with the roles of the axes swapped:
    band probabilities replace L_j and the horizontal excursions replace H_j.
    A rectangular lattice returns ``constant = 0``.
    """
    prof = boundary_profile(lat, offset)
    geom = cell_geometry(lat, offset, profile=prof)
    p, a, hsplit, zero = _order_terms(geom, prof, order)
    p0 = float(p[zero])
    if geom.is_trivial:
        return RateErrorConstant(order, 1.0, 0.0, 0.0)
    if 1.0 - p0 < DEGENERATE_TOL:
        raise GeometryError(f"degenerate configuration: p0 = {p0!r} leaves no error-prone region")
    e = 1.0 - p0
    log_k = math.log2(e / 4.0)
    if p0 > 0:
        log_k += (p0 / e) * math.log2(1.0 / p0)
    for k in _active(p, a, zero):
        # a_k = gamma_k len_k = H_k / (4H); the 1/4 is pulled out front
        log_k += (p[k] / e) * math.log2(4.0 * a[k] / p[k])
    log_k += hsplit / e
    return RateErrorConstant(order, p0, float(2.0 ** log_k), float(hsplit))


def analytic_error_prob(lat: Lattice2D, rate: float, offset=None, order: int = 12) -> float:
    return pe_rate_constant(lat, offset, order).error_prob(rate)


def modeled_error_prob(geom: CellGeometry, order: int, bins: dict[int, float]) -> float:
    """Fine-quantization P_e for given (possibly real) bin counts."""
    if order == 12:
        p, a, offs = geom.p_intervals, np.array(geom.heights) / (4 * geom.H), 2
    else:
        p, a, offs = geom.p_bands, np.array(geom.band_spans) / (4 * geom.L), 1
    return float(sum(p[j + offs] * a[j + offs] / n for j, n in bins.items()))


# --------------------------------------------------------------------------
# infinite rounds
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class InfiniteRoundQuantities:
    rbar: float
    nbar: float
    Q: tuple[float, float, float]                  # P(W2 = -1, 0, 1)
    P_top: tuple[float, float, float]              # P(W1 = -1, 0, 1 | W2 = 1)
    P_bottom: tuple[float, float, float]           # P(W1 = -1, 0, 1 | W2 = -1)
    d: tuple[float, float, float, float] | None = field(default=None)


def infinite_round_quantities(lat: Lattice2D, d1: float | None = None) -> InfiniteRoundQuantities:
    """Average bits and rounds of the zero-error bit-exchange protocol.

    With ``Q_{+-1} = H_{+-1}/H``, ``H_1 = d1(1-c)/s``, ``H_{-1} = d3(1-c)/s``
    (unit scale) and the round-1 splits ``P_1 = (d1, 1-d1-d2, d2)``,
    ``P_{-1} = (d4, 1-d4-d3, d3)``::

        R = H(Q) + Q_1 H(P_1) + Q_{-1} H(P_{-1}) + 4 (Q_1 (1-P_{1,0}) + Q_{-1} (1-P_{-1,0}))
        N = 1 + 2 (Q_1 (1-P_{1,0}) + Q_{-1} (1-P_{-1,0}))

    ``d1=None`` means zero offset, where this reduces to
    ``H(Q) + (1-Q0) H(P) + 4 (1-P0)(1-Q0)``.
    """
    c, s = lat.c, lat.s
    if c == 0.0:
        return InfiniteRoundQuantities(0.0, 1.0, (0.0, 1.0, 0.0), (0.0, 1.0, 0.0), (0.0, 1.0, 0.0))
    d = 0.5 * c if d1 is None else d1 / lat.alpha
    if not (0.0 < d <= c * (1 + 1e-12)):
        raise GeometryError(f"d1 must satisfy 0 < d1 <= alpha*rho*cos(theta), got {d1!r}")
    d = min(d, c)
    d2 = d * (1 - c) / c
    d3 = c - d
    d4 = (1 - c) * (c - d) / c
    q1 = d * (1 - c) / (s * s)
    qm = d3 * (1 - c) / (s * s)
    Q = (qm, 1.0 - q1 - qm, q1)
    Pt = (d, 1.0 - d - d2, d2)
    Pb = (d4, 1.0 - d4 - d3, d3)
    hq, ht, hb = _h(np.array(Q)), _h(np.array(Pt)), _h(np.array(Pb))
    enter = q1 * (1.0 - Pt[1]) + qm * (1.0 - Pb[1])
    rbar = float(hq + q1 * ht + qm * hb + 4.0 * enter)
    nbar = 1.0 + 2.0 * enter
    scale = lat.alpha
    return InfiniteRoundQuantities(rbar, nbar, Q, Pt, Pb, tuple(scale * v for v in (d, d2, d3, d4)))


def zero_offset_rate(Q0: float, P: Sequence[float], Q: Sequence[float]) -> tuple[float, float]:
    """Zero-offset form: ``(H(Q) + (1-Q0) H(P) + 4(1-P0)(1-Q0), 1 + 2(1-P0)(1-Q0))``."""
    P = np.asarray(P, dtype=float)
    P0 = float(P[1])
    rbar = entropy(Q) + (1 - Q0) * entropy(P) + 4 * (1 - P0) * (1 - Q0)
    return rbar, 1 + 2 * (1 - P0) * (1 - Q0)


def offset_sweep_objective(lat: Lattice2D, d1: float, order, rate: float = 4.0) -> float:
    """Objective plotted against d1: analytic P_e at ``rate`` (orders 12, 21) or R_II (infinite)."""
    if order in ("inf", "infinite"):
        return infinite_round_quantities(lat, d1).rbar
    return analytic_error_prob(lat, rate, offset_geometry(lat, d1), int(order))
