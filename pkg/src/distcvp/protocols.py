"""Two-node protocols for locating the nearest lattice point.

Node 1 observes ``x1`` and node 2 observes ``x2``.  Stage I agrees on the
Babai cell: node 2 sends ``u2``, node 1 replies with ``u1``.  Both nodes then
work in coordinates relative to the Babai point, i.e. inside the Babai cell of
the origin, and run one of the Stage-II protocols:

* single round, order 12: node 1 sends the subinterval index ``W1`` and a bin
  index ``Z1``; node 2 cuts its column at the Voronoi boundaries evaluated at
  the bin midpoint and replies with ``Z2`` in {-1, 0, 1};
* single round, order 21: the mirror image with the roles of the axes swapped;
* infinite rounds: a round-1 split into seven rectangles followed, inside the
  four rectangles crossed by a Voronoi boundary, by a one-bit-per-node
  exchange of binary expansions until the boundary side is known.

Each protocol has a scalar path built from two node state machines exchanging
:class:`Message` objects and a vectorized batch path used by the harness; the
two share the same plan tables.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .analytic import allocate_bins
from .geometry import (
    GEOM_TOL,
    OffsetSpec,
    Rect,
    babai_cell,
    boundary_profile,
    cell_geometry,
    decode_rect,
    offset_vector,
    rect_voronoi_area,
)
from .lattice import Lattice2D, LatticePoint, babai_coeffs, nearest_coeffs

ORDERS = ("12", "21", "inf")
MAX_BINS = 10**8     # beyond this the plan tables (and exact evaluation) no longer fit comfortably in memory


class ProtocolError(RuntimeError):
    """A protocol run could not complete (misconfiguration or round cap reached)."""


def normalize_order(order) -> str:
    o = str(order).lower()
    if o in ("infinite", "infinity"):
        o = "inf"
    if o not in ORDERS:
        raise ValueError(f"order must be one of 12, 21, inf; got {order!r}")
    return o


@dataclass(frozen=True)
class ProtocolConfig:
    """Protocol selection.

    Parameters
    ----------
    order : {"12", "21", "inf"}
    bins : mapping j -> N_j
        Bin counts per nonzero subinterval (single-round orders only).
    offset : OffsetSpec or None
        Shift of the rectangular partition; ``None`` is the zero offset.
    max_rounds : int
        Cap on bit-exchange rounds for the infinite order.
    """

    order: str = "12"
    bins: Mapping[int, int] | None = None
    offset: OffsetSpec | None = None
    max_rounds: int = 64

    def __post_init__(self):
        object.__setattr__(self, "order", normalize_order(self.order))
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.bins is not None:
            bins = {int(j): int(n) for j, n in dict(self.bins).items()}
            object.__setattr__(self, "bins", bins)


def config_from_rate(lat: Lattice2D, rate: float, order="12", offset: OffsetSpec | None = None,
                     max_rounds: int = 64) -> ProtocolConfig:
    """Single-round config with integer bin counts from :func:`allocate_bins` at Stage-II rate ``rate``."""
    order = normalize_order(order)
    if order == "inf":
        return ProtocolConfig("inf", None, offset, max_rounds)
    geom = cell_geometry(lat, offset)
    alloc = allocate_bins(geom, rate, int(order))
    return ProtocolConfig(order, alloc.counts, offset, max_rounds)


# --------------------------------------------------------------------------
# transcripts
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Message:
    sender: int            # 1 or 2
    label: str             # "u2", "u1", "W1", "Z1", "W2", "Z2", "B1", "B2"
    symbol: int
    codelength: float      # ideal codelength -log2 P(symbol | history), bits


@dataclass
class Transcript:
    messages: list[Message] = field(default_factory=list)
    decode1: LatticePoint | None = None
    decode2: LatticePoint | None = None
    rounds: int = 0

    def send(self, msg: Message) -> Message:
        self.messages.append(msg)
        return msg

    @property
    def bits(self) -> float:
        return float(sum(m.codelength for m in self.messages))

    def stage_bits(self, labels: Sequence[str]) -> float:
        return float(sum(m.codelength for m in self.messages if m.label in labels))

    @property
    def agree(self) -> bool:
        return self.decode1 == self.decode2


def _bits(p: float) -> float:
    if p <= 0.0:
        raise ProtocolError("symbol with zero probability was sent")
    return 0.0 if p >= 1.0 else -math.log2(p)


# --------------------------------------------------------------------------
# Stage I
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Stage1Model:
    """Symbol probabilities for the Babai coefficients, e.g. estimated by the harness."""

    joint: Mapping[tuple[int, int], float]

    @classmethod
    def from_samples(cls, u: np.ndarray) -> "Stage1Model":
        u = np.asarray(u).reshape(-1, 2)
        cnt = Counter(map(tuple, u.tolist()))
        n = len(u)
        return cls({k: v / n for k, v in cnt.items()})

    @cached_property
    def marginal_u2(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for (u1, u2), p in self.joint.items():
            out[u2] = out.get(u2, 0.0) + p
        return out

    def bits_u2(self, u2: int) -> float:
        return _bits(self.marginal_u2.get(u2, 0.0))

    def bits_u1(self, u1: int, u2: int) -> float:
        return _bits(self.joint.get((u1, u2), 0.0) / self.marginal_u2[u2])


def run_stage1(lat: Lattice2D, x, offset=None, model: Stage1Model | None = None,
               transcript: Transcript | None = None) -> tuple[tuple[int, int], Transcript]:
    """Node 2 sends ``u2``, node 1 replies with ``u1``.

    Without a ``model`` the source is taken to be confined to one Babai cell
    and both messages cost 0 bits.
    """
    tr = transcript if transcript is not None else Transcript()
    x0 = offset_vector(offset)
    x1, x2 = float(x[0]), float(x[1])
    # node 2
    u2 = int(np.floor((x2 - x0[1]) / lat.v22 + 0.5))
    tr.send(Message(2, "u2", u2, 0.0 if model is None else model.bits_u2(u2)))
    # node 1 (knows x1 and the received u2)
    u1 = int(np.floor((x1 - x0[0] - lat.v12 * u2) / lat.v11 + 0.5))
    tr.send(Message(1, "u1", u1, 0.0 if model is None else model.bits_u1(u1, u2)))
    tr.rounds += 1
    return (u1, u2), tr


def _rebase(lat: Lattice2D, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=float) - np.asarray(u, dtype=float) @ lat.basis.T


# --------------------------------------------------------------------------
# single round
# --------------------------------------------------------------------------

@dataclass
class BatchResult:
    """Vectorized outcome of a protocol on many inputs (coordinates in the origin cell)."""

    decoded: np.ndarray        # (n, 2) integer coefficients relative to the Babai point
    bits: np.ndarray           # Stage-II ideal codelength per run
    rounds: np.ndarray         # Stage-II rounds per run
    symbols: np.ndarray        # (n, k) integer symbols identifying the transcript
    extra_rounds: np.ndarray | None = None


def _int_pos(f0, f1, w):
    """Exact integral over a width ``w`` of the positive part of a linear function running f0 -> f1."""
    f0 = np.asarray(f0, dtype=float)
    f1 = np.asarray(f1, dtype=float)
    both = (f0 >= 0) & (f1 >= 0)
    cross = (f0 > 0) != (f1 > 0)
    hi = np.maximum(f0, f1)
    span = np.abs(f1 - f0)
    with np.errstate(divide="ignore", invalid="ignore"):
        part = np.where(span > 0, w * hi * hi / (2.0 * span), 0.0)
    return np.where(both, 0.5 * w * (f0 + f1), np.where(cross & ~both, part, 0.0))


class SingleRoundPlan:
    """Tables shared by both nodes for a single-round Stage II.

    Notation: the *primary* coordinate is binned by the first sender (x1 for
    order 12, x2 for order 21); the *secondary* coordinate is cut by the
    replying node at the boundary-profile values of the bin midpoint.

    Inside one subinterval the two slanted boundaries are straight, so a
    piece of a bin meets at most three Voronoi cells: the origin's, the
    neighbour across the high boundary and the neighbour across the low one.
    This is verified per subinterval when the plan is built, and rectangle
    decisions are then made from exact area integrals; subintervals failing
    the check fall back to polygon clipping.
    """

    def __init__(self, lat: Lattice2D, cfg: ProtocolConfig):
        if cfg.order not in ("12", "21"):
            raise ValueError("SingleRoundPlan needs order 12 or 21")
        self.lat = lat
        self.cfg = cfg
        self.order = cfg.order
        self.profile = boundary_profile(lat, cfg.offset)
        self.geom = cell_geometry(lat, cfg.offset, profile=self.profile)
        self.cell = self.geom.cell
        g = self.geom
        if self.order == "12":
            self.axis = 0
            self.edges = g.interval_edges
            self.index = tuple(range(-2, 3))
            self._lo_cut, self._hi_cut = self.profile.lower, self.profile.upper
            self.q_lo, self.q_hi = self.cell.ymin, self.cell.ymax
            self.p_extent = g.L
        else:
            self.axis = 1
            self.edges = g.band_edge_list
            self.index = tuple(range(-1, 2))
            self._lo_cut, self._hi_cut = self.profile.left, self.profile.right
            self.q_lo, self.q_hi = self.cell.xmin, self.cell.xmax
            self.p_extent = g.H
        self.zero = len(self.index) // 2
        self.widths = np.diff(self.edges)
        self.p_w = self.widths / self.p_extent
        bins = dict(cfg.bins or {})
        n = np.ones(len(self.index), dtype=np.int64)
        for k, j in enumerate(self.index):
            if j == 0 or self.widths[k] <= GEOM_TOL * self.p_extent:
                continue
            if j not in bins or bins[j] < 1:
                raise ProtocolError(f"bin count N_{j} must be >= 1 for a subinterval of positive length")
            n[k] = bins[j]
        if n.sum() > MAX_BINS:
            raise ProtocolError(f"{int(n.sum())} bins exceed the supported maximum {MAX_BINS}; lower the rate")
        self.n_bins = n
        self._neighbours = [self._column_cells(k) for k in range(len(self.index))]
        self._decode_cache: dict[tuple[int, int, int], tuple[int, int]] = {}

    # -- geometry helpers ----------------------------------------------------

    def _make_rect(self, a, b, q0, q1) -> Rect:
        return Rect(a, b, q0, q1) if self.axis == 0 else Rect(q0, q1, a, b)

    def _column_cells(self, k: int):
        """(high neighbour, low neighbour) coefficients if only three cells meet column k, else None."""
        a, b = self.edges[k], self.edges[k + 1]
        if self.index[k] == 0 or b - a <= 0:
            return None
        mid = 0.5 * (a + b)
        out = []
        for f, wall in ((self._hi_cut, self.q_hi), (self._lo_cut, self.q_lo)):
            v = float(f(mid))
            if abs(v - wall) <= GEOM_TOL * self.lat.alpha:
                out.append((0, 0))
                continue
            q = 0.5 * (v + wall)
            pt = np.array([mid, q]) if self.axis == 0 else np.array([q, mid])
            out.append(tuple(int(t) for t in nearest_coeffs(self.lat, pt)))
        col = self._make_rect(a, b, self.q_lo, self.q_hi)
        y = [self.lat.basis @ np.array(u, dtype=float) for u in {(0, 0), *out}]
        covered = sum(rect_voronoi_area(self.lat, col, yy) for yy in y)
        if abs(covered - col.area) > 1e-10 * col.area:
            return None
        return tuple(out)

    # -- tables --------------------------------------------------------------

    def bin_interval(self, w: int, z: int) -> tuple[float, float]:
        k = w + self.zero
        a = self.edges[k]
        width = self.widths[k] / self.n_bins[k]
        return a + z * width, a + (z + 1) * width

    def cuts(self, w: int, z: int) -> tuple[float, float]:
        a, b = self.bin_interval(w, z)
        mid = 0.5 * (a + b)
        lo = float(np.clip(self._lo_cut(mid), self.q_lo, self.q_hi))
        hi = float(np.clip(self._hi_cut(mid), lo, self.q_hi))
        return lo, hi

    def piece(self, w: int, z: int, k2: int) -> Rect:
        a, b = self.bin_interval(w, z)
        lo, hi = self.cuts(w, z)
        q = ((self.q_lo, lo), (lo, hi), (hi, self.q_hi))[k2 + 1]
        return self._make_rect(a, b, q[0], q[1])

    def _fast_decode(self, k: int, z: np.ndarray, k2: np.ndarray):
        """Vectorized decisions and error areas for pieces of subinterval k."""
        up, dn = self._neighbours[k]
        width = self.widths[k] / self.n_bins[k]
        a = self.edges[k] + z * width
        b = a + width
        mid = 0.5 * (a + b)
        lo = np.clip(self._lo_cut(mid), self.q_lo, self.q_hi)
        hi = np.clip(self._hi_cut(mid), lo, self.q_hi)
        ql = np.choose(k2 + 1, [np.full_like(lo, self.q_lo), lo, hi])
        qh = np.choose(k2 + 1, [lo, hi, np.full_like(hi, self.q_hi)])
        ua, ub = self._hi_cut(a), self._hi_cut(b)
        la, lb = self._lo_cut(a), self._lo_cut(b)
        area_up = _int_pos(qh - ua, qh - ub, width) - _int_pos(ql - ua, ql - ub, width)
        area_dn = _int_pos(la - ql, lb - ql, width) - _int_pos(la - qh, lb - qh, width)
        total = width * (qh - ql)
        area_0 = total - area_up - area_dn
        cands = [((0, 0), area_0), (up, area_up), (dn, area_dn)]
        merged: dict[tuple[int, int], np.ndarray] = {}
        for u, ar in cands:
            merged[u] = merged.get(u, 0.0) + ar
        keys = sorted(merged)
        areas = np.stack([np.broadcast_to(merged[u], total.shape) for u in keys], axis=1)
        best = areas.max(axis=1)
        pick = np.argmax(areas >= (best - 1e-12 * total)[:, None], axis=1)
        pick = np.where(total > 0, pick, keys.index((0, 0)))
        dec = np.array(keys, dtype=np.int64)[pick]
        return dec, np.maximum(total - areas[np.arange(len(pick)), pick], 0.0)

    def decode(self, w: int, z: int, k2: int) -> tuple[int, int]:
        """Coefficients (relative to the Babai point) agreed on for a transcript."""
        if w == 0:
            return (0, 0)
        key = (w, z, k2)
        hit = self._decode_cache.get(key)
        if hit is None:
            k = w + self.zero
            if self._neighbours[k] is not None:
                d, _ = self._fast_decode(k, np.array([z]), np.array([k2]))
                hit = (int(d[0, 0]), int(d[0, 1]))
            else:
                rect = self.piece(w, z, k2)
                hit = (0, 0) if rect.area <= 0.0 else decode_rect(self.lat, rect).point.u
            self._decode_cache[key] = hit
        return hit

    def iter_pieces(self):
        for k, j in enumerate(self.index):
            if j == 0 or self.widths[k] <= 0:
                continue
            for z in range(int(self.n_bins[k])):
                for k2 in (-1, 0, 1):
                    yield j, z, k2

    def exact_error_prob(self) -> float:
        """Exact P_e for a uniform source on the cell, from rectangle-Voronoi areas."""
        err = 0.0
        for k, j in enumerate(self.index):
            if j == 0 or self.widths[k] <= 0:
                continue
            n = int(self.n_bins[k])
            if self._neighbours[k] is not None:
                for start in range(0, n, 1 << 18):
                    stop = min(n, start + (1 << 18))
                    z = np.repeat(np.arange(start, stop), 3)
                    k2 = np.tile(np.array([-1, 0, 1]), stop - start)
                    _, e = self._fast_decode(k, z, k2)
                    err += float(e.sum())
            else:
                for z in range(n):
                    for k2 in (-1, 0, 1):
                        rect = self.piece(j, z, k2)
                        if rect.area > 0.0:
                            err += decode_rect(self.lat, rect).error_area
        return err / self.cell.area

    def exact_rate(self) -> float:
        """Entropy of the Stage-II transcript for a uniform source (bits)."""
        probs = [np.array([self.p_w[self.zero]])]
        for k, j in enumerate(self.index):
            if j == 0 or self.widths[k] <= 0:
                continue
            n = int(self.n_bins[k])
            width = self.widths[k] / n
            mid = self.edges[k] + (np.arange(n) + 0.5) * width
            lo = np.clip(self._lo_cut(mid), self.q_lo, self.q_hi)
            hi = np.clip(self._hi_cut(mid), lo, self.q_hi)
            pieces = np.concatenate([lo - self.q_lo, hi - lo, self.q_hi - hi])
            probs.append(width * pieces / self.cell.area)
        p = np.concatenate(probs)
        p = p[p > 0]
        return float(-(p * np.log2(p)).sum())

    # -- vectorized ----------------------------------------------------------

    def classify(self, xp: np.ndarray, xq: np.ndarray):
        """(w, z, k2, bits) for arrays of primary / secondary coordinates."""
        xp = np.asarray(xp, dtype=float)
        xq = np.asarray(xq, dtype=float)
        kk = np.clip(np.searchsorted(self.edges, xp, side="right") - 1, 0, len(self.index) - 1)
        w = kk - self.zero
        width = self.widths[kk] / self.n_bins[kk]
        safe = np.where(width > 0, width, 1.0)
        z = np.floor((xp - self.edges[kk]) / safe).astype(np.int64)
        z = np.clip(z, 0, self.n_bins[kk] - 1)
        z = np.where(w == 0, 0, z)
        mid = self.edges[kk] + (z + 0.5) * width
        lo = np.clip(self._lo_cut(mid), self.q_lo, self.q_hi)
        hi = np.clip(self._hi_cut(mid), lo, self.q_hi)
        k2 = np.where(xq < lo, -1, np.where(xq < hi, 0, 1))
        k2 = np.where(w == 0, 0, k2)
        span = self.q_hi - self.q_lo
        piece = np.choose(k2 + 1, [lo - self.q_lo, hi - lo, self.q_hi - hi]) / span
        with np.errstate(divide="ignore"):
            bits = -np.log2(self.p_w[kk])
            bits = bits + np.where(w == 0, 0.0, np.log2(self.n_bins[kk]) - np.log2(np.where(w == 0, 1.0, piece)))
        return w, z, k2, bits

    def run_batch(self, x_rel: np.ndarray) -> BatchResult:
        """Run on points already expressed relative to their Babai point."""
        x_rel = np.asarray(x_rel, dtype=float).reshape(-1, 2)
        xp, xq = x_rel[:, self.axis], x_rel[:, 1 - self.axis]
        w, z, k2, bits = self.classify(xp, xq)
        decoded = np.zeros((len(x_rel), 2), dtype=np.int64)
        for k, j in enumerate(self.index):
            m = w == j
            if j == 0 or not np.any(m):
                continue
            if self._neighbours[k] is not None:
                decoded[m], _ = self._fast_decode(k, z[m], k2[m])
            else:
                decoded[m] = [self.decode(j, int(a), int(c)) for a, c in zip(z[m], k2[m])]
        rounds = np.where(w == 0, 1, 2)
        return BatchResult(decoded, bits, rounds, np.stack([w, z, k2], axis=1))


class _SingleRoundNode:
    def __init__(self, plan: SingleRoundPlan, coord: float, name: int):
        self.plan, self.coord, self.name = plan, coord, name
        self.w = self.z = self.k2 = None

    def decide(self) -> LatticePoint:
        d = self.plan.decode(self.w, self.z, self.k2 if self.k2 is not None else 0)
        return self.plan.lat.point(d)


class _Binner(_SingleRoundNode):
    """The node that bins its coordinate first."""

    def first_messages(self) -> list[Message]:
        p = self.plan
        w, z, _, _ = p.classify(np.array([self.coord]), np.array([0.0]))
        self.w, self.z = int(w[0]), int(z[0])
        k = self.w + p.zero
        wl, zl = ("W1", "Z1") if p.order == "12" else ("W2", "Z2")
        msgs = [Message(self.name, wl, self.w, _bits(p.p_w[k]))]
        if self.w != 0:
            msgs.append(Message(self.name, zl, self.z, math.log2(p.n_bins[k])))
        return msgs

    def receive(self, msg: Message) -> None:
        self.k2 = msg.symbol


class _Cutter(_SingleRoundNode):
    """The node that places cuts at the bin midpoint and replies."""

    def receive(self, msg: Message) -> None:
        if msg.label in ("W1", "W2"):
            self.w, self.z, self.k2 = msg.symbol, 0, 0
        else:
            self.z = msg.symbol

    def reply(self) -> Message | None:
        p = self.plan
        if self.w == 0:
            return None
        lo, hi = p.cuts(self.w, self.z)
        self.k2 = -1 if self.coord < lo else (0 if self.coord < hi else 1)
        piece = (lo - p.q_lo, hi - lo, p.q_hi - hi)[self.k2 + 1] / (p.q_hi - p.q_lo)
        label = "Z2" if p.order == "12" else "Z1"
        return Message(self.name, label, self.k2, _bits(piece))


def run_single_round(lat: Lattice2D, x, cfg: ProtocolConfig, plan: SingleRoundPlan | None = None,
                     stage1_model: Stage1Model | None = None) -> Transcript:
    """Stage I followed by a single-round Stage II in order ``cfg.order``."""
    plan = plan if plan is not None else SingleRoundPlan(lat, cfg)
    u, tr = run_stage1(lat, x, cfg.offset, stage1_model)
    xr = _rebase(lat, np.asarray(x, dtype=float), np.array(u))
    if plan.order == "12":
        first, second = _Binner(plan, xr[0], 1), _Cutter(plan, xr[1], 2)
        n_first, n_second = (first, second)
    else:
        first, second = _Binner(plan, xr[1], 2), _Cutter(plan, xr[0], 1)
        n_first, n_second = (first, second)
    for msg in n_first.first_messages():
        tr.send(msg)
        n_second.receive(msg)
    tr.rounds += 1
    reply = n_second.reply()
    if reply is not None:
        tr.send(reply)
        n_first.receive(reply)
        tr.rounds += 1
    base = np.array(u)
    d_first = np.array(n_first.decide().u) + base
    d_second = np.array(n_second.decide().u) + base
    p1, p2 = (d_first, d_second) if plan.order == "12" else (d_second, d_first)
    tr.decode1, tr.decode2 = lat.point(p1), lat.point(p2)
    return tr


# --------------------------------------------------------------------------
# infinite rounds
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Round1Rect:
    """One of the seven rectangles of the round-1 partition."""

    w2: int
    w1: int
    rect: Rect
    error: bool            # a Voronoi boundary crosses the interior
    slope: int             # +1: boundary runs lower-left to upper-right, -1: upper-left to lower-right, 0: none
    point: tuple[int, int]   # decision for error-free rectangles
    n_cells: int


class InfiniteRoundPlan:
    """Round-1 partition and bit-exchange rules for the zero-error protocol.

    Round 1: node 2 sends ``W2`` over the bands ``J_-1, J_0, J_1`` (cut where
    the Voronoi cell of the origin meets the side walls); for ``W2 = +-1``
    node 1 sends ``W1`` over three intervals cut where the cell meets the
    top (resp. bottom) wall.  In an error rectangle both nodes rescale their
    coordinate to ``[0, 1)`` and exchange one bit of the binary expansion
    each per round.  With ``a``, ``b`` the scaled coordinates the boundary is
    ``b = a`` (slope +1) or ``b = 1 - a`` (slope -1); the exchange halts at
    the first bit position where the side of the boundary is settled: bits
    differ for slope +1, bits agree for slope -1.
    """

    def __init__(self, lat: Lattice2D, offset: OffsetSpec | None = None, max_rounds: int = 64):
        self.lat = lat
        self.offset = offset
        self.max_rounds = int(max_rounds)
        self.profile = boundary_profile(lat, offset)
        self.geom = cell_geometry(lat, offset, profile=self.profile)
        g, cell = self.geom, self.geom.cell
        self.cell = cell
        self.band_edges = g.band_edge_list
        self.Q = g.p_bands
        top_x = np.array([cell.xmin, g.top_contact[0], g.top_contact[1], cell.xmax])
        bot_x = np.array([cell.xmin, g.bottom_contact[0], g.bottom_contact[1], cell.xmax])
        if lat.is_rectangular:
            top_x = bot_x = np.array([cell.xmin, cell.xmin, cell.xmax, cell.xmax])
        self.row_edges = {1: top_x, -1: bot_x}
        self.P = {w2: np.diff(e) / cell.width for w2, e in self.row_edges.items()}
        self.rects = self._build()
        self._by_key = {(r.w2, r.w1): r for r in self.rects}

    def _build(self) -> list[Round1Rect]:
        out = []
        e = self.band_edges
        for w2 in (-1, 0, 1):
            y0, y1 = e[w2 + 1], e[w2 + 2]
            if w2 == 0:
                rows = [(0, self.cell.xmin, self.cell.xmax)]
            else:
                xs = self.row_edges[w2]
                rows = [(w1, xs[w1 + 1], xs[w1 + 2]) for w1 in (-1, 0, 1)]
            for w1, x0, x1 in rows:
                r = Rect(float(x0), float(x1), float(y0), float(y1))
                if r.area <= 0.0:
                    out.append(Round1Rect(w2, w1, r, False, 0, (0, 0), 0))
                    continue
                dec = decode_rect(self.lat, r)
                error = dec.n_cells > 1
                slope = self._diagonal(r, w2) if error else 0
                point = tuple(int(v) for v in nearest_coeffs(self.lat, np.array(r.center)))
                out.append(Round1Rect(w2, w1, r, error, slope, point, dec.n_cells))
        return out

    def _diagonal(self, r: Rect, w2: int) -> int:
        f = self.profile.upper if w2 == 1 else self.profile.lower
        tol = 1e-9 * self.lat.alpha
        y_left, y_right = float(f(r.xmin)), float(f(r.xmax))
        if abs(y_left - r.ymin) <= tol and abs(y_right - r.ymax) <= tol:
            return 1
        if abs(y_left - r.ymax) <= tol and abs(y_right - r.ymin) <= tol:
            return -1
        raise ProtocolError(f"Voronoi boundary is not a diagonal of round-1 rectangle {r}")

    @property
    def error_rects(self) -> list[Round1Rect]:
        return [r for r in self.rects if r.error]

    def rect(self, w2: int, w1: int) -> Round1Rect:
        return self._by_key[(w2, w1)]

    def round1(self, x1: np.ndarray, x2: np.ndarray):
        """Round-1 symbols and codelengths for arrays of (rebased) coordinates."""
        w2 = np.clip(np.searchsorted(self.band_edges, x2, side="right") - 1, 0, 2) - 1
        w1 = np.zeros_like(w2)
        bits = -np.log2(self.Q[w2 + 1])
        for s in (-1, 1):
            m = w2 == s
            if np.any(m):
                xs = self.row_edges[s]
                k = np.clip(np.searchsorted(xs, x1[m], side="right") - 1, 0, 2)
                w1[m] = k - 1
                bits[m] += -np.log2(self.P[s][k])
        return w2, w1, bits

    def exchange(self, a: np.ndarray, b: np.ndarray, slope: int):
        """Vectorized bit exchange on scaled coordinates in [0, 1).

        Returns the number of exchanged bit pairs and the lower-left corner
        of the final dyadic square in scaled coordinates.
        """
        a = a.copy()
        b = b.copy()
        n = np.zeros(a.shape, dtype=np.int64)
        A = np.zeros(a.shape)
        B = np.zeros(a.shape)
        live = np.ones(a.shape, dtype=bool)
        scale = 1.0
        for k in range(1, self.max_rounds + 1):
            idx = np.nonzero(live)[0]
            if idx.size == 0:
                break
            scale *= 0.5
            ba = np.floor(2.0 * a[idx])
            bb = np.floor(2.0 * b[idx])
            a[idx] = 2.0 * a[idx] - ba
            b[idx] = 2.0 * b[idx] - bb
            A[idx] += ba * scale
            B[idx] += bb * scale
            stop = (ba != bb) if slope > 0 else (ba == bb)
            done = idx[stop]
            n[done] = k
            live[done] = False
        if np.any(live):
            raise ProtocolError(
                f"bit exchange did not halt within max_rounds={self.max_rounds} "
                f"({int(live.sum())} inputs on or numerically at a rectangle diagonal)"
            )
        return n, A, B

    def run_batch(self, x_rel: np.ndarray) -> BatchResult:
        x_rel = np.asarray(x_rel, dtype=float).reshape(-1, 2)
        x1, x2 = x_rel[:, 0], x_rel[:, 1]
        w2, w1, bits = self.round1(x1, x2)
        decoded = np.zeros((len(x_rel), 2), dtype=np.int64)
        extra = np.zeros(len(x_rel), dtype=np.int64)
        for r in self.rects:
            m = (w2 == r.w2) & (w1 == r.w1)
            if not np.any(m):
                continue
            if not r.error:
                decoded[m] = r.point
                continue
            rc = r.rect
            a = (x1[m] - rc.xmin) / rc.width
            b = (x2[m] - rc.ymin) / rc.height
            n, A, B = self.exchange(np.clip(a, 0.0, np.nextafter(1.0, 0.0)),
                                    np.clip(b, 0.0, np.nextafter(1.0, 0.0)), r.slope)
            side = np.ldexp(1.0, -n)
            centers = np.stack([rc.xmin + (A + 0.5 * side) * rc.width,
                                rc.ymin + (B + 0.5 * side) * rc.height], axis=1)
            decoded[m] = nearest_coeffs(self.lat, centers)
            extra[m] = n
        bits = bits + 2.0 * extra
        rounds = 1 + extra
        return BatchResult(decoded, bits, rounds, np.stack([w2, w1], axis=1), extra)


class _InfNode:
    def __init__(self, plan: InfiniteRoundPlan, coord: float, name: int):
        self.plan, self.coord, self.name = plan, coord, name
        self.w2 = self.w1 = None
        self.A = self.B = 0.0
        self.n = 0
        self.done = False
        self.rem = None
        self.last = None

    @property
    def region(self) -> Round1Rect:
        return self.plan.rect(self.w2, self.w1)

    def start_exchange(self) -> None:
        r = self.region
        if not r.error:
            self.done = True
            return
        rc = r.rect
        t = (self.coord - rc.xmin) / rc.width if self.name == 1 else (self.coord - rc.ymin) / rc.height
        self.rem = min(max(t, 0.0), math.nextafter(1.0, 0.0))

    def next_bit(self) -> int:
        bit = int(math.floor(2.0 * self.rem))
        self.rem = 2.0 * self.rem - bit
        self.last = bit
        return bit

    def observe(self, mine: int, theirs: int) -> None:
        self.n += 1
        step = math.ldexp(1.0, -self.n)
        a_bit, b_bit = (mine, theirs) if self.name == 1 else (theirs, mine)
        self.A += a_bit * step
        self.B += b_bit * step
        slope = self.region.slope
        self.done = (a_bit != b_bit) if slope > 0 else (a_bit == b_bit)

    def decide(self) -> LatticePoint:
        r = self.region
        if not r.error:
            return self.plan.lat.point(r.point)
        rc = r.rect
        side = math.ldexp(1.0, -self.n)
        c = np.array([rc.xmin + (self.A + 0.5 * side) * rc.width, rc.ymin + (self.B + 0.5 * side) * rc.height])
        return self.plan.lat.point(nearest_coeffs(self.plan.lat, c))


def run_infinite_round(lat: Lattice2D, x, cfg: ProtocolConfig | None = None,
                       plan: InfiniteRoundPlan | None = None,
                       stage1_model: Stage1Model | None = None) -> Transcript:
    """Stage I followed by the zero-error bit-exchange protocol."""
    cfg = cfg if cfg is not None else ProtocolConfig("inf")
    plan = plan if plan is not None else InfiniteRoundPlan(lat, cfg.offset, cfg.max_rounds)
    u, tr = run_stage1(lat, x, cfg.offset, stage1_model)
    xr = _rebase(lat, np.asarray(x, dtype=float), np.array(u))
    n1, n2 = _InfNode(plan, float(xr[0]), 1), _InfNode(plan, float(xr[1]), 2)

    # round 1
    w2, _, _ = plan.round1(np.array([0.0]), np.array([n2.coord]))
    w2 = int(w2[0])
    tr.send(Message(2, "W2", w2, _bits(plan.Q[w2 + 1])))
    n1.w2 = n2.w2 = w2
    w1 = 0
    if w2 != 0:
        k = int(np.clip(np.searchsorted(plan.row_edges[w2], n1.coord, side="right") - 1, 0, 2))
        w1 = k - 1
        tr.send(Message(1, "W1", w1, _bits(plan.P[w2][k])))
    n1.w1 = n2.w1 = w1
    tr.rounds += 1
    n1.start_exchange()
    n2.start_exchange()

    # bit exchange
    while not (n1.done and n2.done):
        if n1.n >= plan.max_rounds:
            raise ProtocolError(f"bit exchange did not halt within max_rounds={plan.max_rounds}")
        b1, b2 = n1.next_bit(), n2.next_bit()
        tr.send(Message(1, "B1", b1, 1.0))
        tr.send(Message(2, "B2", b2, 1.0))
        n1.observe(b1, b2)
        n2.observe(b2, b1)
        tr.rounds += 1

    base = np.array(u)
    tr.decode1 = lat.point(np.array(n1.decide().u) + base)
    tr.decode2 = lat.point(np.array(n2.decide().u) + base)
    return tr


# --------------------------------------------------------------------------
# batch driver
# --------------------------------------------------------------------------

def make_plan(lat: Lattice2D, cfg: ProtocolConfig):
    if cfg.order == "inf":
        return InfiniteRoundPlan(lat, cfg.offset, cfg.max_rounds)
    return SingleRoundPlan(lat, cfg)


def run_batch(lat: Lattice2D, x: np.ndarray, cfg: ProtocolConfig, plan=None):
    """Stage I + Stage II on many inputs.

    Returns ``(u_babai, result)`` where ``result.decoded`` is relative to the
    Babai point (add ``u_babai`` for absolute coefficients).
    """
    plan = plan if plan is not None else make_plan(lat, cfg)
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    u = babai_coeffs(lat, x, offset_vector(cfg.offset))
    return u, plan.run_batch(_rebase(lat, x, u))
