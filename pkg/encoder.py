"""MILP encodings of the verification problem.

Variable names follow one scheme so exported LP files diff cleanly:
x[i], s[k][name][i], bin_omega[k][name][i], bin_zeta[k][name][i],
t_plus[i], t_minus[i], bin_w[i], bin_gamma[i], delta; the radius model
adds fp[slot][i] for the fixed point.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from bound_engine import CROSS_TOL, IterBounds, Provenance, input_box, state_key, step_interval
from cutgen import GENERAL, CutSite, HullQuery, base_inequalities, classify, degenerate_piece
from milp_core import LinExpr, MilpModel, VarId
from model_ir import (AffineExplicit, AffineImplicit, PiecewiseAffine, ProblemFamily, Relu, SatLin,
                      SoftThreshold, Step, Trajectory, gather)

logger = logging.getLogger(__name__)

DEFAULT_RADIUS_BOX = 100.0


class EncodingError(Exception):
    pass


@dataclass
class VarMap:
    x: List[VarId] = field(default_factory=list)
    s: Dict[Tuple[int, str], List[VarId]] = field(default_factory=dict)
    omega: Dict[Tuple[int, str, int], VarId] = field(default_factory=dict)
    zeta: Dict[Tuple[int, str, int], VarId] = field(default_factory=dict)
    t_plus: Dict[int, VarId] = field(default_factory=dict)
    t_minus: Dict[int, VarId] = field(default_factory=dict)
    w: Dict[int, VarId] = field(default_factory=dict)
    gamma: Dict[int, VarId] = field(default_factory=dict)
    delta: Optional[VarId] = None
    sites: List[CutSite] = field(default_factory=list)
    K: int = 0

    def vars_of(self, k: int, name: str) -> List[VarId]:
        try:
            return self.s[(k, name)]
        except KeyError:
            raise EncodingError('no variables for %r at iteration %d' % (name, k))


def _add_vector(model: MilpModel, lo, hi, fmt: str) -> List[VarId]:
    return [model.add_var(float(l), float(max(h, l)), name=fmt % i) for i, (l, h) in enumerate(zip(lo, hi))]


def step_inputs(family: ProblemFamily, varmap: VarMap, step: Step, k: int, fixed_point: bool = False) -> List[VarId]:
    alg = family.algorithm
    out: List[VarId] = []
    for ref in step.inputs:
        if ref.kind == 'param':
            out.extend(varmap.x)
            continue
        if ref.kind == 'state':
            if fixed_point:
                key = (k, alg.slot_output(ref.name))
            else:
                j = max(k - ref.lag, 0)
                key = (j, state_key(family, j, ref.name))
        elif ref.kind == 'cur':
            key = (k, alg.resolve_cur(ref.name))
        else:
            key = (0, ref.name)
        out.extend(varmap.vars_of(*key))
    return out


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def encode_objective(model: MilpModel, varmap: VarMap, prev_vars: Sequence[int], cur_vars: Sequence[int],
                     prev_bounds, cur_bounds) -> VarId:
    """delta = ||cur - prev||_inf, exact at the maximum; sets the objective to max delta."""
    prev_lo, prev_hi = (np.asarray(b, dtype=float) for b in prev_bounds)
    cur_lo, cur_hi = (np.asarray(b, dtype=float) for b in cur_bounds)
    t_lo = cur_lo - prev_hi
    t_hi = cur_hi - prev_lo
    if not (np.all(np.isfinite(t_lo)) and np.all(np.isfinite(t_hi))):
        raise EncodingError('residual bounds must be finite')
    bad = np.flatnonzero(t_lo > t_hi + CROSS_TOL * (1.0 + np.abs(t_hi)))
    if bad.size:
        raise EncodingError('residual bounds cross at component %d: %g > %g' % (bad[0], t_lo[bad[0]], t_hi[bad[0]]))
    t_hi = np.maximum(t_hi, t_lo)
    d = t_lo.size
    abs_hi = np.maximum(np.maximum(t_hi, -t_lo), 0.0)
    abs_lo = np.maximum(0.0, np.maximum(t_lo, -t_hi))
    delta_max = float(np.max(abs_hi)) if d else 0.0

    delta = model.add_var(0.0, delta_max, name='delta')
    varmap.delta = delta
    gammas = []
    for i in range(d):
        t = model.expr(cur_vars[i]) - model.expr(prev_vars[i])
        if t_lo[i] >= 0.0:
            tp = model.add_var(0.0, max(t_hi[i], 0.0), name='t_plus[%d]' % i)
            model.add_constr(model.expr(tp), '=', t, name='t_def[%d]' % i)
            mag = model.expr(tp)
            varmap.t_plus[i] = tp
        elif t_hi[i] <= 0.0:
            tm = model.add_var(0.0, max(-t_lo[i], 0.0), name='t_minus[%d]' % i)
            model.add_constr(model.expr(tm), '=', -t, name='t_def[%d]' % i)
            mag = model.expr(tm)
            varmap.t_minus[i] = tm
        else:
            tp = model.add_var(0.0, t_hi[i], name='t_plus[%d]' % i)
            tm = model.add_var(0.0, -t_lo[i], name='t_minus[%d]' % i)
            w = model.add_binary(name='bin_w[%d]' % i)
            model.add_constr(model.expr(tp) - model.expr(tm), '=', t, name='t_def[%d]' % i)
            model.add_constr(model.expr(tp) - model.expr(w, t_hi[i]), '<=', 0.0, name='t_plus_on[%d]' % i)
            model.add_constr(model.expr(tm) + model.expr(w, -t_lo[i]), '<=', -t_lo[i], name='t_minus_on[%d]' % i)
            mag = model.expr(tp) + model.expr(tm)
            varmap.t_plus[i], varmap.t_minus[i], varmap.w[i] = tp, tm, w
        g = model.add_binary(name='bin_gamma[%d]' % i)
        varmap.gamma[i] = g
        gammas.append(model.expr(g))
        model.add_constr(model.expr(delta) - mag, '>=', 0.0, name='delta_lo[%d]' % i)
        slack = delta_max - abs_lo[i]
        model.add_constr(model.expr(delta) - mag + model.expr(g, slack), '<=', slack, name='delta_hi[%d]' % i)
    if gammas:
        model.add_constr(LinExpr.sum(gammas), '=', 1.0, name='gamma_sum')
    model.set_objective(model.expr(delta), 'max')
    return delta


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def encode_affine(model: MilpModel, step: Step, in_vars: Sequence[int], out_vars: Sequence[int],
                  coefs: Optional[Mapping[str, float]] = None, label: str = '') -> None:
    mat = step.matrix_at(coefs or {})
    off = step.offset_vec()
    if mat.shape[1] != len(in_vars):
        raise EncodingError("step '%s': %d inputs, matrix has %d columns" % (step.output, len(in_vars), mat.shape[1]))
    if isinstance(step, AffineExplicit):
        if mat.shape[0] != len(out_vars):
            raise EncodingError("step '%s': %d outputs, matrix has %d rows" % (step.output, len(out_vars), mat.shape[0]))
        for i, w in enumerate(out_vars):
            model.add_constr(model.expr(w) - model.dot(mat[i], in_vars), '=', off[i], name='aff[%s][%d]' % (label, i))
    elif isinstance(step, AffineImplicit):
        M = np.asarray(step.M, dtype=float)
        if M.shape != (len(out_vars), len(out_vars)):
            raise EncodingError("step '%s': M is %dx%d for %d outputs" % ((step.output,) + M.shape + (len(out_vars),)))
        for i in range(M.shape[0]):
            model.add_constr(model.dot(M[i], out_vars) - model.dot(mat[i], in_vars), '=', off[i],
                             name='kkt[%s][%d]' % (label, i))
    else:
        raise EncodingError("step '%s' is not affine" % step.output)


def bigM_constants(a, ylo, yhi) -> Tuple[float, float]:
    """(min, max) of a'y over the box [ylo, yhi]."""
    a = np.asarray(a, dtype=float)
    ylo = np.asarray(ylo, dtype=float)
    yhi = np.asarray(yhi, dtype=float)
    pos, neg = np.maximum(a, 0.0), np.minimum(a, 0.0)
    return float(pos @ ylo + neg @ yhi), float(pos @ yhi + neg @ ylo)


def _soft_threshold_block(model, kind: SoftThreshold, z: LinExpr, w: int, L: float, U: float, om, ze, tag):
    lam = kind.lam
    W = model.expr(w)
    model.add_constr(z - om * (U - lam), '<=', lam, name='st_up[%s]' % tag)
    model.add_constr(z - om * (lam - L), '>=', L, name='st_on[%s]' % tag)
    model.add_constr(z - ze * (L + lam), '>=', -lam, name='st_lo[%s]' % tag)
    model.add_constr(z + ze * (U + lam), '<=', U, name='st_off[%s]' % tag)
    model.add_constr(W - om * (U - lam), '<=', 0.0, name='st_wpos[%s]' % tag)
    model.add_constr(W - ze * (L + lam), '>=', 0.0, name='st_wneg[%s]' % tag)
    model.add_constr(W - z, '>=', -lam, name='st_sec_lo[%s]' % tag)
    model.add_constr(W - z, '<=', lam, name='st_sec_hi[%s]' % tag)
    model.add_constr(W - z + om * (2.0 * lam), '<=', lam, name='st_eq_up[%s]' % tag)
    model.add_constr(W - z - ze * (2.0 * lam), '>=', -lam, name='st_eq_lo[%s]' % tag)
    model.add_constr(om + ze, '<=', 1.0, name='st_one[%s]' % tag)


def _relu_block(model, z: LinExpr, w: int, L: float, U: float, om, tag):
    W = model.expr(w)
    model.add_constr(W, '>=', 0.0, name='relu_pos[%s]' % tag)
    model.add_constr(W - z, '>=', 0.0, name='relu_lin[%s]' % tag)
    model.add_constr(W - z - om * L, '<=', -L, name='relu_on[%s]' % tag)
    model.add_constr(W - om * U, '<=', 0.0, name='relu_off[%s]' % tag)


def _satlin_block(model, kind: SatLin, z: LinExpr, w: int, L: float, U: float, om, ze, tag):
    b, c = float(kind.lo), float(kind.hi)
    W = model.expr(w)
    model.add_constr(z - om * (U - c), '<=', c, name='sat_up[%s]' % tag)
    model.add_constr(z - om * (c - L), '>=', L, name='sat_on[%s]' % tag)
    model.add_constr(z + ze * (b - L), '>=', b, name='sat_lo[%s]' % tag)
    model.add_constr(z + ze * (U - b), '<=', U, name='sat_off[%s]' % tag)
    model.add_constr(W - om * (c - b), '>=', b, name='sat_wmin[%s]' % tag)
    model.add_constr(W + ze * (c - b), '<=', c, name='sat_wmax[%s]' % tag)
    model.add_constr(W - z - ze * (b - L), '<=', 0.0, name='sat_lin_hi[%s]' % tag)
    model.add_constr(W - z + om * (U - c), '>=', 0.0, name='sat_lin_lo[%s]' % tag)
    model.add_constr(om + ze, '<=', 1.0, name='sat_one[%s]' % tag)


def encode_pwa(model: MilpModel, varmap: VarMap, step: PiecewiseAffine, in_vars: Sequence[int],
               out_vars: Sequence[int], ylo, yhi, coefs: Optional[Mapping[str, float]] = None,
               pre=None, k: int = 1, hull_base: bool = True) -> None:
    """Big-M encoding per output component, with pruning and degenerate rows as equalities.

    pre: optional (lo, hi) bounds on the affine argument, intersected with the box range.
    """
    mat = step.matrix_at(coefs or {})
    off = step.offset_vec()
    if mat.shape != (len(out_vars), len(in_vars)):
        raise EncodingError("step '%s': matrix %dx%d vs %d outputs, %d inputs"
                            % ((step.output,) + mat.shape + (len(out_vars), len(in_vars))))
    ylo = np.asarray(ylo, dtype=float)
    yhi = np.asarray(yhi, dtype=float)
    if not (np.all(np.isfinite(ylo)) and np.all(np.isfinite(yhi))):
        raise EncodingError("step '%s' at k=%d has an unbounded input" % (step.output, k))
    label = '%d][%s' % (k, step.output)
    for i, w in enumerate(out_vars):
        kind = step.kind.row(i)
        arg = None if pre is None or pre[0] is None else (pre[0][i], pre[1][i])
        query = HullQuery.build(kind, mat[i], ylo, yhi, off[i], arg_range=arg)
        L, U = query.L, query.U
        z = model.dot(mat[i], in_vars, off[i])
        tag = '%s][%d' % (label, i)
        case = classify(query)
        if case != GENERAL:
            slope, icpt = degenerate_piece(query, case)
            model.add_constr(model.expr(w) - z * slope, '=', icpt, name='pwa_fixed[%s]' % tag)
            continue
        key = (k, step.output, i)
        if isinstance(kind, Relu):
            om = model.add_binary(name='bin_omega[%s]' % tag)
            varmap.omega[key] = om
            _relu_block(model, z, w, L, U, model.expr(om), tag)
        else:
            thr_hi = kind.lam if isinstance(kind, SoftThreshold) else float(kind.hi)
            thr_lo = -kind.lam if isinstance(kind, SoftThreshold) else float(kind.lo)
            om = ze = LinExpr()
            if U > thr_hi:
                varmap.omega[key] = model.add_binary(name='bin_omega[%s]' % tag)
                om = model.expr(varmap.omega[key])
            if L < thr_lo:
                varmap.zeta[key] = model.add_binary(name='bin_zeta[%s]' % tag)
                ze = model.expr(varmap.zeta[key])
            if isinstance(kind, SoftThreshold):
                _soft_threshold_block(model, kind, z, w, L, U, om, ze, tag)
            else:
                _satlin_block(model, kind, z, w, L, U, om, ze, tag)
        if hull_base:
            for j, ineq in enumerate(base_inequalities(query)):
                ineq.as_constraint(model, in_vars, w, name='hull[%s][%d]' % (tag, j))
        varmap.sites.append(CutSite('%d.%s' % (k, step.output), i, query, list(in_vars), w))


def _encode_step(model, varmap, family, bounds, step, k, in_vars, out_vars, hull_base, box=None):
    coefs = family.algorithm.coefficients(k)
    label = '%d][%s' % (k, step.output)
    if isinstance(step, PiecewiseAffine):
        ylo, yhi = box if box is not None else input_box(family, bounds, step, k)
        encode_pwa(model, varmap, step, in_vars, out_vars, ylo, yhi, coefs,
                   pre=bounds.get_pre(k, step.output), k=k, hull_base=hull_base)
    else:
        encode_affine(model, step, in_vars, out_vars, coefs, label=label)


def _encode_params(model: MilpModel, varmap: VarMap, family: ProblemFamily, bounds: IterBounds) -> None:
    varmap.x = _add_vector(model, bounds.x_lower, bounds.x_upper, 'x[%d]')
    for r, (row, rhs) in enumerate(family.params.extra_rows):
        model.add_constr(model.dot(row, varmap.x), '<=', float(rhs), name='x_row[%d]' % r)


def _encode_init(model: MilpModel, varmap: VarMap, family: ProblemFamily, bounds: IterBounds) -> None:
    for slot in family.layout.names:
        lo, hi = bounds.get(0, slot)
        varmap.s[(0, slot)] = _add_vector(model, lo, hi, 's[0][%s][%%d]' % slot)
    for slot, src in family.init.ties:
        for i, (a, b) in enumerate(zip(varmap.s[(0, slot)], varmap.s[(0, src)])):
            model.add_constr(model.expr(a) - model.expr(b), '=', 0.0, name='tie[%s][%d]' % (slot, i))


def encode_iterations(family: ProblemFamily, K: int, bounds: IterBounds, hull_base: bool = True,
                      name: Optional[str] = None) -> Tuple[MilpModel, VarMap]:
    """Constraints of K iterations without an objective (the feasible set of the verification problem)."""
    if K < 1:
        raise EncodingError('K must be >= 1')
    model = MilpModel(name or '%s_K%d' % (family.name, K))
    varmap = VarMap(K=K)
    _encode_params(model, varmap, family, bounds)
    _encode_init(model, varmap, family, bounds)
    for k in range(1, K + 1):
        for step in family.algorithm.steps:
            in_vars = step_inputs(family, varmap, step, k)
            lo, hi = bounds.get(k, step.output)
            if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
                raise EncodingError("bounds of '%s' at k=%d are not finite" % (step.output, k))
            out_vars = _add_vector(model, lo, hi, 's[%d][%s][%%d]' % (k, step.output))
            varmap.s[(k, step.output)] = out_vars
            _encode_step(model, varmap, family, bounds, step, k, in_vars, out_vars, hull_base)
    return model, varmap


def encode_vp(family: ProblemFamily, K: int, bounds: IterBounds, hull_base: bool = True) -> Tuple[MilpModel, VarMap]:
    """Maximize ||s^K - s^(K-1)||_inf of the residual slot over X and S."""
    model, varmap = encode_iterations(family, K, bounds, hull_base=hull_base)
    slot = family.layout.residual_slot
    prev_key = state_key(family, K - 1, slot)
    cur_key = state_key(family, K, slot)
    encode_objective(model, varmap, varmap.vars_of(K - 1, prev_key), varmap.vars_of(K, cur_key),
                     bounds.get(K - 1, prev_key), bounds.get(K, cur_key))
    logger.debug('encoded %s: %d vars, %d constraints, %d cut sites',
                 model.name, model.num_vars, model.num_constrs, len(varmap.sites))
    return model, varmap


# ---------------------------------------------------------------------------
# initial distance to a fixed point
# ---------------------------------------------------------------------------

def radius_bounds(family: ProblemFamily, radius_box: float = DEFAULT_RADIUS_BOX) -> IterBounds:
    """Bounds of one fixed-point iteration when every slot of s* lies in [-radius_box, radius_box]."""
    alg = family.algorithm
    rb = IterBounds(family.params.lower, family.params.upper)
    init_lo = family.layout.split(family.init.lower)
    init_hi = family.layout.split(family.init.upper)
    star = {}
    for slot in family.layout.names:
        lo = np.minimum(-radius_box, init_lo[slot])
        hi = np.maximum(radius_box, init_hi[slot])
        star[slot] = (np.full_like(lo, -radius_box), np.full_like(hi, radius_box))
        rb.set(0, slot, lo, hi, Provenance.INIT)
    bindings = alg.bindings()
    for step in alg.steps:
        lo, hi, pre = step_interval(family, rb, step, 1)
        if step.output in bindings:
            slo, shi = star[bindings[step.output]]
            lo, hi = np.maximum(lo, slo), np.minimum(hi, shi)
            if np.any(lo > hi):
                raise EncodingError("no fixed point of '%s' inside the radius box" % step.output)
        rb.set(1, step.output, lo, hi, Provenance.INTERVAL)
        if pre is not None:
            rb.set_pre(1, step.output, *pre)
    return rb


def encode_radius(family: ProblemFamily, radius_box: float = DEFAULT_RADIUS_BOX,
                  hull_base: bool = True) -> Tuple[MilpModel, VarMap]:
    """Maximize ||s^0 - s*||_1 over x in X, s^0 in S and s* = T(s*, x)."""
    alg = family.algorithm
    rb = radius_bounds(family, radius_box)
    seed = IterBounds(family.params.lower, family.params.upper)
    lo0, hi0 = family.layout.split(family.init.lower), family.layout.split(family.init.upper)
    for slot in family.layout.names:
        seed.set(0, slot, lo0[slot], hi0[slot], Provenance.INIT)

    model = MilpModel('%s_radius' % family.name)
    varmap = VarMap(K=1)
    _encode_params(model, varmap, family, seed)
    _encode_init(model, varmap, family, seed)
    bindings = alg.bindings()
    for slot in family.layout.names:
        out = alg.slot_output(slot)
        lo, hi = rb.get(1, out)
        varmap.s[(1, out)] = _add_vector(model, lo, hi, 'fp[%s][%%d]' % slot)
    for step in alg.steps:
        in_vars = step_inputs(family, varmap, step, 1, fixed_point=True)
        if step.output in bindings:
            out_vars = varmap.s[(1, step.output)]
        else:
            lo, hi = rb.get(1, step.output)
            out_vars = _add_vector(model, lo, hi, 's[1][%s][%%d]' % step.output)
            varmap.s[(1, step.output)] = out_vars
        box = _fixed_point_box(family, rb, step)
        _encode_step(model, varmap, family, rb, step, 1, in_vars, out_vars, hull_base, box=box)

    slot = family.layout.residual_slot
    s0 = varmap.s[(0, slot)]
    fp = varmap.s[(1, alg.slot_output(slot))]
    fp_lo, fp_hi = rb.get(1, alg.slot_output(slot))
    t_lo, t_hi = lo0[slot] - fp_hi, hi0[slot] - fp_lo
    terms = []
    for i in range(len(s0)):
        t = model.expr(s0[i]) - model.expr(fp[i])
        tp = model.add_var(0.0, max(t_hi[i], 0.0), name='t_plus[%d]' % i)
        tm = model.add_var(0.0, max(-t_lo[i], 0.0), name='t_minus[%d]' % i)
        model.add_constr(model.expr(tp) - model.expr(tm), '=', t, name='t_def[%d]' % i)
        if t_lo[i] < 0.0 < t_hi[i]:
            w = model.add_binary(name='bin_w[%d]' % i)
            model.add_constr(model.expr(tp) - model.expr(w, t_hi[i]), '<=', 0.0, name='t_plus_on[%d]' % i)
            model.add_constr(model.expr(tm) + model.expr(w, -t_lo[i]), '<=', -t_lo[i], name='t_minus_on[%d]' % i)
            varmap.w[i] = w
        varmap.t_plus[i], varmap.t_minus[i] = tp, tm
        terms.append(model.expr(tp) + model.expr(tm))
    model.set_objective(LinExpr.sum(terms), 'max')
    return model, varmap


def _fixed_point_box(family: ProblemFamily, rb: IterBounds, step: Step):
    """Input box at the fixed point: state references read s* (the rebound outputs)."""
    alg = family.algorithm
    los, his = [], []
    for ref in step.inputs:
        if ref.kind == 'param':
            lo, hi = rb.x_lower, rb.x_upper
        elif ref.kind == 'state':
            lo, hi = rb.get(1, alg.slot_output(ref.name))
        elif ref.kind == 'cur':
            lo, hi = rb.get(1, alg.resolve_cur(ref.name))
        else:
            lo, hi = family.layout.split(family.init.lower)[ref.name], family.layout.split(family.init.upper)[ref.name]
        los.append(lo)
        his.append(hi)
    return np.concatenate(los), np.concatenate(his)


# ---------------------------------------------------------------------------
# assignments from simulated trajectories
# ---------------------------------------------------------------------------

def _piece_binaries(kind, z: float) -> Tuple[int, int]:
    if isinstance(kind, SoftThreshold):
        return int(z >= kind.lam), int(z <= -kind.lam)
    if isinstance(kind, Relu):
        return int(z >= 0.0), 0
    return int(z >= float(kind.hi)), int(z <= float(kind.lo))


def trajectory_assignment(family: ProblemFamily, varmap: VarMap, traj: Trajectory) -> Dict[int, float]:
    """Full variable assignment of the K-iteration model reproducing `traj`."""
    K = varmap.K
    if traj.K < K:
        raise EncodingError('trajectory has %d iterations, model needs %d' % (traj.K, K))
    out: Dict[int, float] = {}
    for v, val in zip(varmap.x, traj.x):
        out[v] = float(val)
    for slot in family.layout.names:
        for v, val in zip(varmap.s[(0, slot)], traj.states[0][slot]):
            out[v] = float(val)
    for k in range(1, K + 1):
        coefs = family.algorithm.coefficients(k)
        for step in family.algorithm.steps:
            for v, val in zip(varmap.s[(k, step.output)], traj.outputs[k][step.output]):
                out[v] = float(val)
            if not isinstance(step, PiecewiseAffine):
                continue
            y = gather(family, step, k, traj.states, traj.outputs[k], traj.x)
            z = step.matrix_at(coefs) @ y + step.offset_vec()
            for i, zi in enumerate(z):
                om, ze = _piece_binaries(step.kind.row(i), float(zi))
                if (k, step.output, i) in varmap.omega:
                    out[varmap.omega[(k, step.output, i)]] = float(om)
                if (k, step.output, i) in varmap.zeta:
                    out[varmap.zeta[(k, step.output, i)]] = float(ze)
    if varmap.delta is not None:
        t = traj.residual_vector(K) - traj.residual_vector(K - 1)
        for i, ti in enumerate(t):
            if i in varmap.t_plus:
                out[varmap.t_plus[i]] = max(float(ti), 0.0) if i in varmap.t_minus else float(ti)
            if i in varmap.t_minus:
                out[varmap.t_minus[i]] = max(-float(ti), 0.0) if i in varmap.t_plus else -float(ti)
            if i in varmap.w:
                out[varmap.w[i]] = float(ti > 0.0)
        top = int(np.argmax(np.abs(t))) if t.size else 0
        for i, g in varmap.gamma.items():
            out[g] = float(i == top)
        out[varmap.delta] = float(np.max(np.abs(t))) if t.size else 0.0
    return out
