"""Convex-hull inequalities for soft-threshold, ReLU and SatLin rows.

A row computes w = f(a'y + offset) for y in a box. Besides the O(1) base
inequalities (the 1-D envelopes of f over the argument range) each kind
has up to two exponential families indexed by pairs (I, o);
`separate_families` finds the most violated member with a sorted greedy,
which solves the underlying fractional knapsack exactly. The families
describe the ReLU hull completely but not the soft-threshold or SatLin
hull, so `separate` falls back to `separate_hull`, an LP over the affine
pieces of f, when no family member is violated.
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, QhullError

from milp_core import LinExpr, MilpModel, SolveOptions, SolveStatus, solve
from model_ir import Relu, SatLin, SoftThreshold

logger = logging.getLogger(__name__)

VIOLATION_TOL = 1e-9
WIDTH_TOL = 1e-12
HULL_MAX_DIM = 12

FIXED_UPPER = 'fixed_upper_piece'
FIXED_LOWER = 'fixed_lower_piece'
FIXED_LINEAR = 'fixed_linear_piece'
FIXED_ZERO = 'fixed_zero'
GENERAL = 'general'

CUT_MODES = ('per_component', 'global_one', 'off')


class SeparationError(Exception):
    pass


@dataclass
class HullQuery:
    kind: object
    a: np.ndarray
    ylo: np.ndarray
    yhi: np.ndarray
    offset: float
    l0: np.ndarray
    u0: np.ndarray
    lJ: float
    uJ: float
    L: float
    U: float

    @classmethod
    def build(cls, kind, a, ylo, yhi, offset: float = 0.0, arg_range: Optional[Tuple[float, float]] = None):
        """arg_range: optional tighter bounds on a'y + offset (e.g. from OBBT)."""
        a = np.asarray(a, dtype=float)
        ylo = np.asarray(ylo, dtype=float)
        yhi = np.asarray(yhi, dtype=float)
        l0 = np.where(a >= 0, ylo, yhi)
        u0 = np.where(a >= 0, yhi, ylo)
        lJ = float(a @ l0 + offset)
        uJ = float(a @ u0 + offset)
        L, U = lJ, uJ
        if arg_range is not None:
            L, U = max(lJ, float(arg_range[0])), min(uJ, float(arg_range[1]))
            if L > U:
                L = U = 0.5 * (L + U)
        return cls(kind, a, ylo, yhi, float(offset), l0, u0, lJ, uJ, L, U)

    @property
    def d(self) -> int:
        return self.a.size

    def f(self, z):
        return self.kind.apply(z)

    def graph_point(self, y) -> float:
        return float(self.f(float(self.a @ np.asarray(y, dtype=float) + self.offset)))


@dataclass
class CutInequality:
    """w (sense) g.y + h, with sense '<=' for upper inequalities and '>=' for lower ones."""
    g: np.ndarray
    h: float
    sense: str
    family: str
    violation: float = 0.0
    I: Tuple[int, ...] = ()
    o: Optional[int] = None

    def rhs(self, y) -> float:
        return float(self.g @ np.asarray(y, dtype=float) + self.h)

    def violated_by(self, y, w) -> float:
        r = self.rhs(y)
        return float(w - r) if self.sense == '<=' else float(r - w)

    def as_constraint(self, model: MilpModel, y_vars: Sequence[int], w_var: int, name: str = None) -> int:
        expr = model.expr(w_var) - model.dot(self.g, y_vars, self.h)
        return model.add_constr(expr, self.sense, 0.0, name=name)


# ---------------------------------------------------------------------------
# classification and base inequalities
# ---------------------------------------------------------------------------

def classify(query: HullQuery) -> str:
    L, U, kind = query.L, query.U, query.kind
    if isinstance(kind, SoftThreshold):
        lam = kind.lam
        if L >= lam:
            return FIXED_UPPER
        if U <= -lam:
            return FIXED_LOWER
        if -lam <= L and U <= lam:
            return FIXED_ZERO
        return GENERAL
    if isinstance(kind, Relu):
        if L >= 0.0:
            return FIXED_LINEAR
        if U <= 0.0:
            return FIXED_ZERO
        return GENERAL
    if isinstance(kind, SatLin):
        b, c = float(kind.lo), float(kind.hi)
        if U <= b:
            return FIXED_LOWER
        if L >= c:
            return FIXED_UPPER
        if b <= L and U <= c:
            return FIXED_LINEAR
        return GENERAL
    raise SeparationError('unsupported kind %r' % kind)


def degenerate_piece(query: HullQuery, case: str) -> Tuple[float, float]:
    """(slope, intercept) with w = slope * (a'y + offset) + intercept on a degenerate row."""
    kind = query.kind
    if case == FIXED_ZERO:
        return 0.0, 0.0
    if isinstance(kind, SoftThreshold):
        return (1.0, -kind.lam) if case == FIXED_UPPER else (1.0, kind.lam)
    if isinstance(kind, Relu):
        return 1.0, 0.0
    if case == FIXED_LOWER:
        return 0.0, float(kind.lo)
    if case == FIXED_UPPER:
        return 0.0, float(kind.hi)
    return 1.0, 0.0


def _hull_1d(points: List[Tuple[float, float]], upper: bool) -> List[Tuple[float, float]]:
    hull: List[Tuple[float, float]] = []
    for p in points:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            cross = (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1)
            if (upper and cross >= 0) or (not upper and cross <= 0):
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def _from_z(query: HullQuery, slope: float, intercept: float, sense: str, family: str) -> CutInequality:
    # w (sense) slope * (a'y + offset) + intercept
    return CutInequality(slope * query.a, slope * query.offset + intercept, sense, family)


def base_inequalities(query: HullQuery) -> List[CutInequality]:
    """Secants of the scalar envelopes over [L, U] plus the globally valid pieces of the kind."""
    L, U = query.L, query.U
    out: List[CutInequality] = []
    if U - L > WIDTH_TOL:
        xs = [L] + [bp for bp in sorted(set(query.kind.breakpoints())) if L < bp < U] + [U]
        pts = [(x, float(query.f(x))) for x in xs]
        for upper in (True, False):
            hull = _hull_1d(pts, upper)
            for (x1, y1), (x2, y2) in zip(hull, hull[1:]):
                if x2 - x1 <= WIDTH_TOL:
                    continue
                m = (y2 - y1) / (x2 - x1)
                out.append(_from_z(query, m, y1 - m * x1, '<=' if upper else '>=', 'base'))
    kind = query.kind
    if isinstance(kind, SoftThreshold):
        out.append(_from_z(query, 1.0, kind.lam, '<=', 'base'))
        out.append(_from_z(query, 1.0, -kind.lam, '>=', 'base'))
    elif isinstance(kind, SatLin):
        out.append(_from_z(query, 0.0, float(kind.lo), '>=', 'base'))
        out.append(_from_z(query, 0.0, float(kind.hi), '<=', 'base'))
    else:
        out.append(_from_z(query, 0.0, 0.0, '>=', 'base'))
        out.append(_from_z(query, 1.0, 0.0, '>=', 'base'))
    return out


# ---------------------------------------------------------------------------
# exponential families
# ---------------------------------------------------------------------------

def _families(kind) -> List[Tuple[str, float, float]]:
    """(family, threshold, shift) for each exponential family of the kind."""
    if isinstance(kind, SoftThreshold):
        return [('upper', kind.lam, 0.0), ('lower', -kind.lam, 0.0)]
    if isinstance(kind, Relu):
        return [('upper', 0.0, 0.0)]
    b, c = float(kind.lo), float(kind.hi)
    return [('upper', b, b), ('lower', c, c)]


def _active(query: HullQuery) -> np.ndarray:
    r = query.a * (query.u0 - query.l0)
    return np.flatnonzero((query.a != 0) & (r > WIDTH_TOL))


def family_inequality(query: HullQuery, family: str, tau: float, shift: float,
                      I: Sequence[int], o: int) -> CutInequality:
    a, l0, u0 = query.a, query.l0, query.u0
    g = np.zeros(query.d)
    if family == 'upper':
        lI = query.uJ - float(np.sum(a[list(I)] * (u0[list(I)] - l0[list(I)])))
        kappa = (lI - tau) / (u0[o] - l0[o])
        g[list(I)] = a[list(I)]
        g[o] += kappa
        h = -float(a[list(I)] @ l0[list(I)]) - kappa * l0[o] + shift
        return CutInequality(g, h, '<=', family, I=tuple(I), o=o)
    uI = query.lJ + float(np.sum(a[list(I)] * (u0[list(I)] - l0[list(I)])))
    kappa = (uI - tau) / (l0[o] - u0[o])
    g[list(I)] = a[list(I)]
    g[o] += kappa
    h = -float(a[list(I)] @ u0[list(I)]) - kappa * u0[o] + shift
    return CutInequality(g, h, '>=', family, I=tuple(I), o=o)


def enumerate_inequalities(query: HullQuery) -> List[CutInequality]:
    """Every member of the exponential families (2^d * d pairs at most)."""
    active = list(_active(query))
    r = query.a * (query.u0 - query.l0)
    out = []
    for family, tau, shift in _families(query.kind):
        for size in range(len(active) + 1):
            for I in itertools.combinations(active, size):
                rI = float(np.sum(r[list(I)]))
                for o in active:
                    if o in I:
                        continue
                    if family == 'upper':
                        lI = query.uJ - rI
                        ok = lI >= tau and lI - r[o] < tau
                    else:
                        uI = query.lJ + rI
                        ok = uI <= tau and uI + r[o] > tau
                    if ok:
                        out.append(family_inequality(query, family, tau, shift, I, o))
    return out


def _greedy(query: HullQuery, family: str, tau: float, yhat: np.ndarray) -> Optional[Tuple[List[int], int]]:
    active = _active(query)
    r = query.a * (query.u0 - query.l0)
    width = query.u0 - query.l0
    with np.errstate(divide='ignore', invalid='ignore'):
        theta = np.clip((yhat - query.l0) / width, 0.0, 1.0)
    ratio = theta if family == 'upper' else 1.0 - theta
    order = sorted(active, key=lambda i: (ratio[i], i))
    I: List[int] = []
    if family == 'upper':
        running = query.uJ
        if running < tau:
            return None
        for i in order:
            if running - r[i] < tau:
                return I, int(i)
            running -= r[i]
            I.append(int(i))
    else:
        running = query.lJ
        if running > tau:
            return None
        for i in order:
            if running + r[i] > tau:
                return I, int(i)
            running += r[i]
            I.append(int(i))
    return None


def separate_families(query: HullQuery, yhat, what: float) -> Optional[CutInequality]:
    """Most violated exponential-family inequality at (yhat, what), or None."""
    yhat = np.asarray(yhat, dtype=float)
    best: Optional[CutInequality] = None
    for family, tau, shift in _families(query.kind):
        pair = _greedy(query, family, tau, yhat)
        if pair is None:
            continue
        cut = family_inequality(query, family, tau, shift, *pair)
        cut.violation = cut.violated_by(yhat, what)
        if cut.violation > VIOLATION_TOL and (best is None or cut.violation > best.violation):
            best = cut
    return best


# ---------------------------------------------------------------------------
# exact hull from the affine pieces
# ---------------------------------------------------------------------------

def _cells(query: HullQuery) -> List[Tuple[float, float, float, float]]:
    """(lo, hi, slope, intercept) of f on each argument interval between breakpoints in [L, U]."""
    L, U = query.L, query.U
    if U - L <= WIDTH_TOL:
        return [(L, U, 0.0, float(query.f(L)))]
    edges = [L] + [bp for bp in sorted(set(query.kind.breakpoints())) if L < bp < U] + [U]
    out = []
    for lo, hi in zip(edges, edges[1:]):
        flo, fhi = float(query.f(lo)), float(query.f(hi))
        slope = (fhi - flo) / (hi - lo)
        out.append((lo, hi, slope, flo - slope * lo))
    return out


def hull_points(query: HullQuery) -> np.ndarray:
    """Lifted vertices (y, f(a'y + offset)) of every cell of box ∩ {L <= a'y + offset <= U}.

    A vertex of a cell lies on an edge of the box, so box vertices plus the
    crossings of box edges with the cell planes cover all of them.
    """
    d = query.d
    if d > HULL_MAX_DIM:
        raise SeparationError('hull points need d <= %d, got %d' % (HULL_MAX_DIM, d))
    a, off, L, U = query.a, query.offset, query.L, query.U
    planes = [L] + [bp for bp in sorted(set(query.kind.breakpoints())) if L < bp < U] + [U]
    verts = np.array(list(itertools.product(*zip(query.ylo, query.yhi))), dtype=float).reshape(-1, d)
    z = verts @ a + off
    pts = [verts[(z >= L - 1e-9) & (z <= U + 1e-9)]]
    for i in np.flatnonzero(a != 0):
        base = verts[verts[:, i] == query.ylo[i]]
        zb = base @ a + off
        for c in planes:
            t = query.ylo[i] + (c - zb) / a[i]
            keep = (t >= query.ylo[i]) & (t <= query.yhi[i])
            if np.any(keep):
                p = base[keep].copy()
                p[:, i] = t[keep]
                pts.append(p)
    ys = np.vstack(pts)
    w = query.f(np.clip(ys @ a + off, L, U))
    return np.unique(np.round(np.column_stack([ys, w]), 12), axis=0)


def hull_facets(query: HullQuery) -> List[CutInequality]:
    """Non-vertical facets of conv{(y, f(a'y + offset))} from a convex hull of the lifted cell vertices."""
    pts = hull_points(query)
    try:
        hull = ConvexHull(pts)
    except (QhullError, ValueError) as e:
        raise SeparationError('graph hull is not full-dimensional: %s' % e)
    out: List[CutInequality] = []
    seen = set()
    for row in hull.equations:
        n_y, n_w, off = row[:-2], row[-2], row[-1]
        if abs(n_w) <= 1e-9:
            continue
        cut = CutInequality(-n_y / n_w, float(-off / n_w), '<=' if n_w > 0 else '>=', 'hull')
        key = (cut.sense,) + tuple(np.round(np.append(cut.g, cut.h), 9))
        if key not in seen:
            seen.add(key)
            out.append(cut)
    return out


def _hull_lp(query: HullQuery, cells, yhat: np.ndarray, sgn: float):
    # disjunctive hull: y = sum y_j, sum mu_j = 1, y_j in mu_j * cell_j
    d, m = query.d, len(cells)
    n = m * (d + 1)
    c = np.zeros(n)
    A_eq = np.zeros((d + 1, n))
    A_ub = np.zeros((m * (2 * d + 2), n))
    r = 0
    for j, (lo, hi, slope, icpt) in enumerate(cells):
        ys, mu = slice(j * (d + 1), j * (d + 1) + d), j * (d + 1) + d
        c[ys] = -sgn * slope * query.a
        c[mu] = -sgn * (slope * query.offset + icpt)
        A_eq[:d, ys] = np.eye(d)
        A_eq[d, mu] = 1.0
        A_ub[r:r + d, ys] = np.eye(d)
        A_ub[r:r + d, mu] = -query.yhi
        A_ub[r + d:r + 2 * d, ys] = -np.eye(d)
        A_ub[r + d:r + 2 * d, mu] = query.ylo
        A_ub[r + 2 * d, ys] = query.a
        A_ub[r + 2 * d, mu] = query.offset - hi
        A_ub[r + 2 * d + 1, ys] = -query.a
        A_ub[r + 2 * d + 1, mu] = lo - query.offset
        r += 2 * d + 2
    bounds = [(None, None)] * n
    for j in range(m):
        bounds[j * (d + 1) + d] = (0.0, None)
    return linprog(c, A_ub=A_ub, b_ub=np.zeros(A_ub.shape[0]), A_eq=A_eq, b_eq=np.append(yhat, 1.0),
                   bounds=bounds, method='highs')


def _excess(query: HullQuery, cell, cut: CutInequality, sgn: float) -> Optional[float]:
    """max over the cell of sgn * (piece - cut); None if the LP fails."""
    lo, hi, slope, icpt = cell
    coef = sgn * (slope * query.a - cut.g)
    res = linprog(-coef, A_ub=np.vstack([query.a, -query.a]),
                  b_ub=np.array([hi - query.offset, query.offset - lo]),
                  bounds=list(zip(query.ylo, query.yhi)), method='highs')
    if res.status != 0:
        return None
    return float(-res.fun + sgn * (slope * query.offset + icpt - cut.h))


def separate_hull(query: HullQuery, yhat, what: float) -> Optional[CutInequality]:
    """Exact separation from conv of the graph over the box by the disjunctive LP of the affine pieces.

    The cut is read from the duals of the equality rows; it supports the
    envelope at yhat and is shifted until it holds on every piece.
    """
    yhat = np.clip(np.asarray(yhat, dtype=float), query.ylo, query.yhi)
    fz = query.graph_point(yhat)
    if what > fz + VIOLATION_TOL:
        sgn, sense, family = 1.0, '<=', 'hull_upper'
    elif what < fz - VIOLATION_TOL:
        sgn, sense, family = -1.0, '>=', 'hull_lower'
    else:
        return None
    cells = _cells(query)
    res = _hull_lp(query, cells, yhat, sgn)
    if res.status != 0:
        logger.debug('hull LP for %s not solved: %s', type(query.kind).__name__, res.message)
        return None
    marg = np.asarray(res.eqlin.marginals, dtype=float)
    cut = CutInequality(-sgn * marg[:-1], float(-sgn * marg[-1]), sense, family)
    excess = [_excess(query, cell, cut, sgn) for cell in cells]
    if any(e is None for e in excess):
        return None
    cut.h += sgn * max(0.0, max(excess))
    cut.violation = cut.violated_by(yhat, what)
    return cut if cut.violation > VIOLATION_TOL else None


def separate(query: HullQuery, yhat, what: float) -> Optional[CutInequality]:
    """Most violated family inequality, else an exact hull cut for the two-kink kinds."""
    cut = separate_families(query, yhat, what)
    if cut is None and isinstance(query.kind, (SoftThreshold, SatLin)):
        cut = separate_hull(query, yhat, what)
    return cut


# ---------------------------------------------------------------------------
# root cut loop
# ---------------------------------------------------------------------------

@dataclass
class CutSite:
    """One piecewise-affine output component inside an encoded model."""
    label: str
    component: int
    query: HullQuery
    y_vars: List[int]
    w_var: int


@dataclass
class CutLogEntry:
    round: int
    step: str
    component: int
    family: str
    violation: float
    size_I: int
    cut: Optional[CutInequality] = None


@dataclass
class CutLog:
    entries: List[CutLogEntry] = field(default_factory=list)
    relaxation: List[float] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.entries)

    def rows(self) -> List[Dict[str, object]]:
        return [{'round': e.round, 'step': e.step, 'component': e.component, 'family': e.family,
                 'violation': e.violation, 'size_I': e.size_I} for e in self.entries]


def root_cut_loop(model: MilpModel, sites: Sequence[CutSite], options: SolveOptions = None,
                  rounds: int = 5, mode: str = 'per_component', log: CutLog = None) -> int:
    """Tighten the root relaxation with separated hull cuts; returns the number of cuts added."""
    if mode not in CUT_MODES:
        raise SeparationError('unknown cut mode %r' % mode)
    log = log if log is not None else CutLog()
    if mode == 'off' or not sites:
        return 0
    lp_opts = SolveOptions(gap=0.0, time_limit=options.time_limit if options else None, relaxed=True)
    added = 0
    for rnd in range(1, rounds + 1):
        res = solve(model, lp_opts)
        if res.status != SolveStatus.OPTIMAL or res.values is None:
            raise SeparationError('root relaxation not solved (%s): %s' % (res.status.value, res.message))
        log.relaxation.append(float(res.objective))
        found: List[Tuple[CutSite, CutInequality]] = []
        for site in sites:
            yhat = res.values[site.y_vars]
            cut = separate(site.query, yhat, res.values[site.w_var])
            if cut is not None:
                found.append((site, cut))
        if not found:
            break
        if mode == 'global_one':
            found = [max(found, key=lambda sc: sc[1].violation)]
        for site, cut in found:
            cut.as_constraint(model, site.y_vars, site.w_var,
                              name='cut[%d][%s][%d]' % (rnd, site.label, site.component))
            log.entries.append(CutLogEntry(rnd, site.label, site.component, cut.family, cut.violation, len(cut.I), cut))
        added += len(found)
        logger.debug('cut round %d: %d cuts, relaxation %.6g', rnd, len(found), res.objective)
    return added
