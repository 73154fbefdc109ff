"""Per-iteration variable bounds.

Bounds are kept per (iteration, value name): at k = 0 the names are the
state slots, at k >= 1 they are step outputs (a slot at k >= 1 is the
output rebound to it). Piecewise-affine steps also carry bounds on their
affine argument ("pre" bounds), which feed the big-M constants.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from linalg import interval_affine, solve_for_explicit
from model_ir import AffineImplicit, PiecewiseAffine, ProblemFamily, Step

logger = logging.getLogger(__name__)

Key = Tuple[int, str]


class BoundError(Exception):
    pass


class MissingSeedError(BoundError):
    pass


class CrossingBoundsError(BoundError):
    def __init__(self, message: str, key: Optional[Key] = None, index: Optional[int] = None):
        super().__init__(message)
        self.key = key
        self.index = index


class Provenance(str, Enum):
    INIT = 'init'
    INTERVAL = 'interval'
    THEORY = 'theory'
    OBBT = 'obbt'
    POSTPROCESS = 'postprocess'


CROSS_TOL = 1e-7


class IterBounds:
    """Bound table; treat as immutable outside this module and copy before changing."""

    def __init__(self, x_lower, x_upper):
        self.x_lower = np.asarray(x_lower, dtype=float).copy()
        self.x_upper = np.asarray(x_upper, dtype=float).copy()
        self.lower: Dict[Key, np.ndarray] = {}
        self.upper: Dict[Key, np.ndarray] = {}
        self.provenance: Dict[Key, np.ndarray] = {}
        self.pre_lower: Dict[Key, np.ndarray] = {}
        self.pre_upper: Dict[Key, np.ndarray] = {}

    @property
    def K(self) -> int:
        return max((k for k, _ in self.lower), default=-1)

    def copy(self) -> 'IterBounds':
        out = IterBounds(self.x_lower, self.x_upper)
        out.lower = {k: v.copy() for k, v in self.lower.items()}
        out.upper = {k: v.copy() for k, v in self.upper.items()}
        out.provenance = {k: v.copy() for k, v in self.provenance.items()}
        out.pre_lower = {k: v.copy() for k, v in self.pre_lower.items()}
        out.pre_upper = {k: v.copy() for k, v in self.pre_upper.items()}
        return out

    def has(self, k: int, name: str) -> bool:
        return (k, name) in self.lower

    def get(self, k: int, name: str) -> Tuple[np.ndarray, np.ndarray]:
        try:
            return self.lower[(k, name)], self.upper[(k, name)]
        except KeyError:
            raise MissingSeedError('no bounds for %r at iteration %d' % (name, k))

    def get_pre(self, k: int, name: str) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        return self.pre_lower.get((k, name)), self.pre_upper.get((k, name))

    def set(self, k: int, name: str, lo, hi, tag: Provenance) -> None:
        lo = np.asarray(lo, dtype=float).copy()
        hi = np.asarray(hi, dtype=float).copy()
        _check_order(lo, hi, (k, name))
        self.lower[(k, name)] = lo
        self.upper[(k, name)] = np.maximum(hi, lo)
        self.provenance[(k, name)] = np.full(lo.size, tag.value, dtype=object)

    def set_pre(self, k: int, name: str, lo, hi) -> None:
        self.pre_lower[(k, name)] = np.asarray(lo, dtype=float).copy()
        self.pre_upper[(k, name)] = np.asarray(hi, dtype=float).copy()

    def tighten(self, k: int, name: str, lo, hi, tag: Provenance) -> float:
        """Intersect with [lo, hi]; returns the largest width reduction."""
        old_lo, old_hi = self.get(k, name)
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        new_lo = np.maximum(old_lo, lo)
        new_hi = np.minimum(old_hi, hi)
        _check_order(new_lo, new_hi, (k, name))
        new_hi = np.maximum(new_hi, new_lo)
        won = (new_lo > old_lo) | (new_hi < old_hi)
        prov = self.provenance[(k, name)]
        prov[won] = tag.value
        self.lower[(k, name)] = new_lo
        self.upper[(k, name)] = new_hi
        return float(np.max((new_lo - old_lo) + (old_hi - new_hi), initial=0.0))

    def tighten_pre(self, k: int, name: str, lo, hi) -> float:
        old_lo, old_hi = self.pre_lower[(k, name)], self.pre_upper[(k, name)]
        new_lo = np.maximum(old_lo, lo)
        new_hi = np.minimum(old_hi, hi)
        _check_order(new_lo, new_hi, (k, name))
        new_hi = np.maximum(new_hi, new_lo)
        self.pre_lower[(k, name)] = new_lo
        self.pre_upper[(k, name)] = new_hi
        return float(np.max((new_lo - old_lo) + (old_hi - new_hi), initial=0.0))

    def width(self, k: int, name: str) -> np.ndarray:
        lo, hi = self.get(k, name)
        return hi - lo

    def to_dict(self) -> dict:
        out = {'x': {'lower': self.x_lower.tolist(), 'upper': self.x_upper.tolist()}, 'iterations': {}}
        for (k, name) in sorted(self.lower):
            out['iterations'].setdefault(str(k), {})[name] = {
                'lower': self.lower[(k, name)].tolist(),
                'upper': self.upper[(k, name)].tolist(),
                'provenance': list(self.provenance[(k, name)]),
            }
        return out


def _check_order(lo: np.ndarray, hi: np.ndarray, key: Key) -> None:
    bad = np.flatnonzero(lo > hi + CROSS_TOL * (1.0 + np.abs(hi)))
    if bad.size:
        i = int(bad[0])
        raise CrossingBoundsError('bounds cross for %r at iteration %d, component %d: %g > %g'
                                  % (key[1], key[0], i, lo[i], hi[i]), key=key, index=i)


# ---------------------------------------------------------------------------
# interval propagation
# ---------------------------------------------------------------------------

def state_key(family: ProblemFamily, k: int, slot: str) -> str:
    return slot if k == 0 else family.algorithm.slot_output(slot)


def ref_bounds(family: ProblemFamily, bounds: IterBounds, ref, k: int) -> Tuple[np.ndarray, np.ndarray]:
    if ref.kind == 'state':
        j = max(k - ref.lag, 0)
        return bounds.get(j, state_key(family, j, ref.name))
    if ref.kind == 'cur':
        return bounds.get(k, family.algorithm.resolve_cur(ref.name))
    if ref.kind == 'param':
        return bounds.x_lower, bounds.x_upper
    return bounds.get(0, ref.name)


def input_box(family: ProblemFamily, bounds: IterBounds, step: Step, k: int) -> Tuple[np.ndarray, np.ndarray]:
    los, his = [], []
    for ref in step.inputs:
        lo, hi = ref_bounds(family, bounds, ref, k)
        los.append(lo)
        his.append(hi)
    return np.concatenate(los), np.concatenate(his)


def explicit_map(step: Step, coefs: Mapping[str, float]) -> Tuple[np.ndarray, np.ndarray]:
    """(B~, offset) of an affine step in explicit form; implicit steps are solved through M."""
    mat = step.matrix_at(coefs)
    off = step.offset_vec()
    if isinstance(step, AffineImplicit):
        both = solve_for_explicit(step.M, np.hstack([mat, off.reshape(-1, 1)]))
        return both[:, :-1], both[:, -1]
    return mat, off


def step_interval(family: ProblemFamily, bounds: IterBounds, step: Step, k: int):
    """Output bounds of `step` at iteration k; for piecewise steps also the argument bounds."""
    coefs = family.algorithm.coefficients(k)
    ylo, yhi = input_box(family, bounds, step, k)
    mat, off = explicit_map(step, coefs)
    lo, hi = interval_affine(mat, ylo, yhi)
    lo, hi = lo + off, hi + off
    if isinstance(step, PiecewiseAffine):
        return step.kind.apply(lo), step.kind.apply(hi), (lo, hi)
    return lo, hi, None


def seed_bounds(family: ProblemFamily) -> IterBounds:
    bounds = IterBounds(family.params.lower, family.params.upper)
    vals_lo = family.layout.split(family.init.lower)
    vals_hi = family.layout.split(family.init.upper)
    for slot, _ in family.layout.slots:
        bounds.set(0, slot, vals_lo[slot], vals_hi[slot], Provenance.INIT)
    for slot, src in family.init.ties:
        bounds.set(0, slot, vals_lo[src], vals_hi[src], Provenance.INIT)
    return bounds


def propagate_interval(family: ProblemFamily, K: int, seed: IterBounds) -> IterBounds:
    """Extend `seed` by interval propagation through iteration K; existing iterations are kept."""
    for slot in family.layout.names:
        if not seed.has(0, slot):
            raise MissingSeedError('seed has no bounds for slot %r at iteration 0' % slot)
    out = seed.copy()
    for k in range(1, K + 1):
        for step in family.algorithm.steps:
            if out.has(k, step.output):
                continue
            lo, hi, pre = step_interval(family, out, step, k)
            out.set(k, step.output, lo, hi, Provenance.INTERVAL)
            if pre is not None:
                out.set_pre(k, step.output, *pre)
    return out


def refine_iteration(family: ProblemFamily, bounds: IterBounds, k: int) -> IterBounds:
    """Re-run propagation for iteration k from the current inputs, never loosening."""
    out = bounds.copy()
    for step in family.algorithm.steps:
        lo, hi, pre = step_interval(family, out, step, k)
        if pre is not None:
            if (k, step.output) in out.pre_lower:
                out.tighten_pre(k, step.output, *pre)
            else:
                out.set_pre(k, step.output, *pre)
            plo, phi = out.get_pre(k, step.output)
            lo, hi = step.kind.apply(plo), step.kind.apply(phi)
        out.tighten(k, step.output, lo, hi, Provenance.INTERVAL)
    return out


# ---------------------------------------------------------------------------
# operator-theory bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TheoryParams:
    mode: str
    beta: float = 0.0
    D_c: float = 0.0
    q_exp: float = 0.0
    alphas: Tuple[float, ...] = ()
    R: Optional[float] = None  # None: computed by the verifier

    def validate(self) -> List[str]:
        out = []
        if self.mode == 'contractive' and not 0.0 < self.beta < 1.0:
            out.append('contractive mode needs 0 < beta < 1')
        elif self.mode == 'averaged' and not (self.D_c > 0 and self.q_exp > 0):
            out.append('averaged mode needs D_c > 0 and q_exp > 0')
        elif self.mode == 'user_sequence':
            a = np.asarray(self.alphas, dtype=float)
            if a.size == 0 or np.any(a <= 0) or np.any(np.diff(a) > 0):
                out.append('user alpha sequence must be positive and nonincreasing')
        elif self.mode not in ('contractive', 'averaged', 'user_sequence'):
            out.append('unknown theory mode %r' % self.mode)
        if self.R is not None and self.R < 0:
            out.append('R must be >= 0')
        return out

    def with_R(self, R: float) -> 'TheoryParams':
        return TheoryParams(self.mode, self.beta, self.D_c, self.q_exp, self.alphas, float(R))


def alpha_sequence(tp: TheoryParams, K: int) -> List[float]:
    ks = np.arange(1, K + 1, dtype=float)
    if tp.mode in ('contractive', 'averaged') and tp.R is None:
        raise BoundError('%s theory bounds need the radius R' % tp.mode)
    if tp.mode == 'contractive':
        return list(2.0 * tp.beta ** (ks - 1) * tp.R)
    if tp.mode == 'averaged':
        return list(tp.D_c / ks ** tp.q_exp * tp.R)
    seq = list(tp.alphas[:K])
    if len(seq) < K:
        raise BoundError('user alpha sequence has %d entries, need %d' % (len(seq), K))
    return seq


def theory_bounds(prev_lo, prev_hi, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    """Bounds at k from the residual-slot bounds at k-1 when ||s^k - s^{k-1}||_inf <= alpha."""
    return np.asarray(prev_lo, dtype=float) - alpha, np.asarray(prev_hi, dtype=float) + alpha


def theory_table(family: ProblemFamily, bounds: IterBounds, k: int, alpha: float) -> IterBounds:
    slot = family.layout.residual_slot
    prev_lo, prev_hi = bounds.get(k - 1, state_key(family, k - 1, slot))
    ot = IterBounds(bounds.x_lower, bounds.x_upper)
    ot.set(k, state_key(family, k, slot), *theory_bounds(prev_lo, prev_hi, alpha), Provenance.THEORY)
    return ot


def combine(ip: IterBounds, ot: IterBounds) -> Tuple[IterBounds, float]:
    """Elementwise tightest of two sound tables; returns (table, fraction of OT components strictly tighter)."""
    out = ip.copy()
    tighter = 0
    total = 0
    for key in ot.lower:
        lo_ot, hi_ot = ot.lower[key], ot.upper[key]
        if key not in out.lower:
            out.lower[key] = lo_ot.copy()
            out.upper[key] = hi_ot.copy()
            out.provenance[key] = ot.provenance[key].copy()
            continue
        lo_ip, hi_ip = out.lower[key], out.upper[key]
        won = (lo_ot > lo_ip) | (hi_ot < hi_ip)
        tighter += int(np.count_nonzero(won))
        total += won.size
        new_lo, new_hi = np.maximum(lo_ip, lo_ot), np.minimum(hi_ip, hi_ot)
        bad = np.flatnonzero(new_lo > new_hi + CROSS_TOL * (1.0 + np.abs(new_hi)))
        if bad.size:
            raise CrossingBoundsError('combined bounds cross for %r at iteration %d, component %d; '
                                      'the theory sequence is likely invalid' % (key[1], key[0], bad[0]),
                                      key=key, index=int(bad[0]))
        out.lower[key] = new_lo
        out.upper[key] = np.maximum(new_hi, new_lo)
        out.provenance[key][won] = Provenance.THEORY.value
    return out, (tighter / total if total else 0.0)


def postprocess_delta(family: ProblemFamily, bounds: IterBounds, deltas: Sequence[float]) -> IterBounds:
    """Tighten residual-slot bounds with s^k in s^0 +/- sum_{j<=k} delta_j."""
    out = bounds.copy()
    slot = family.layout.residual_slot
    lo0, hi0 = out.get(0, slot)
    total = 0.0
    for k, delta in enumerate(deltas, start=1):
        total += float(delta)
        key = state_key(family, k, slot)
        if not out.has(k, key):
            break
        out.tighten(k, key, lo0 - total, hi0 + total, Provenance.POSTPROCESS)
    return out


def contains(bounds: IterBounds, family: ProblemFamily, traj, tol: float = 1e-9) -> List[str]:
    """Bound violations of a simulated trajectory (empty when contained)."""
    out = []
    for k in range(min(traj.K, bounds.K) + 1):
        values = traj.states[0] if k == 0 else traj.outputs[k]
        for name, val in values.items():
            if not bounds.has(k, name):
                continue
            lo, hi = bounds.get(k, name)
            scale = tol * (1.0 + np.abs(val))
            if np.any(val < lo - scale) or np.any(val > hi + scale):
                out.append('%s at k=%d outside bounds' % (name, k))
    return out
