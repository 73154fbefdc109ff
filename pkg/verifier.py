"""Sequential verification driver.

For K = 1..Kmax: interval bounds, optional theory bounds, OBBT, encoding,
root cuts, warm start, MILP solve, then the residual post-processing that
feeds the next K.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from baseline import SampleMaxResult
from bound_engine import (BoundError, IterBounds, Provenance, TheoryParams, alpha_sequence, combine,
                          postprocess_delta, propagate_interval, refine_iteration, seed_bounds, theory_table)
from cutgen import CUT_MODES, CutLog, CutLogEntry, SeparationError, root_cut_loop
from encoder import (DEFAULT_RADIUS_BOX, EncodingError, VarMap, encode_iterations, encode_radius, encode_vp,
                     step_inputs, trajectory_assignment)
from linalg import LinalgError
from milp_core import LinExpr, MilpModel, ModelError, SolveOptions, SolveStatus, solve
from model_ir import ModelIRError, PiecewiseAffine, ProblemFamily, simulate, validate
from sentry_init import record_bound, tag_run
from utils import Stopwatch, env_int, log_event

logger = logging.getLogger(__name__)

OBBT_WORKERS = env_int('VERIFY_OBBT_WORKERS', 4)
OBBT_MARGIN = 1e-6
OBBT_STOP = 1e-6

REPORT_COLUMNS = ['K', 'delta', 'best_bound', 'status', 'milp_time_s', 'obbt_time_s', 'cuts', 'sample_max',
                  'frac_ot_tighter']


class VerificationError(Exception):
    def __init__(self, message: str, stage: Optional[str] = None, report: 'VerificationReport' = None):
        super().__init__(message)
        self.stage = stage
        self.report = report


@dataclass
class VerifyConfig:
    kmax: int
    gap: float = 0.05
    time_limit: Optional[float] = 7200.0
    obbt_rounds: int = 3
    obbt_enabled: bool = True
    obbt_reuse_cuts: bool = False
    cut_mode: str = 'per_component'
    cut_rounds: int = 5
    hull_base: bool = True
    theory: Optional[TheoryParams] = None
    compute_R: bool = False
    radius_box: float = DEFAULT_RADIUS_BOX

    def validate(self) -> List[str]:
        out = []
        if self.kmax < 1:
            out.append('kmax must be >= 1')
        if not 0.0 < self.gap < 1.0:
            out.append('gap must lie in (0, 1)')
        if self.obbt_rounds < 0:
            out.append('obbt_rounds must be >= 0')
        if self.cut_mode not in CUT_MODES:
            out.append('cut_mode must be one of %s' % ', '.join(CUT_MODES))
        if self.time_limit is not None and self.time_limit <= 0:
            out.append('time_limit must be positive')
        if self.theory is not None:
            out.extend(self.theory.validate())
        return out

    def solve_options(self) -> SolveOptions:
        return SolveOptions(gap=self.gap, time_limit=self.time_limit)


@dataclass
class KRecord:
    K: int
    delta: float
    best_bound: float
    status: str
    milp_time_s: float
    obbt_time_s: float
    cuts: int
    sample_max: Optional[float] = None
    frac_ot_tighter: float = 0.0
    incumbent: Optional[float] = None


@dataclass
class VerificationReport:
    family: str
    records: List[KRecord] = field(default_factory=list)
    R: Optional[float] = None
    bounds: Dict[int, dict] = field(default_factory=dict)

    @property
    def deltas(self) -> List[float]:
        return [r.delta for r in self.records]

    @property
    def upper_bounds(self) -> List[float]:
        return [r.best_bound for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        rows = [{c: getattr(r, c) for c in REPORT_COLUMNS} for r in self.records]
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)

    def to_dict(self) -> dict:
        return {'family': self.family, 'R': self.R, 'records': [asdict(r) for r in self.records],
                'bounds': {str(k): v for k, v in self.bounds.items()}}

    def to_json(self, path: str) -> None:
        with open(path, 'w', encoding='utf-8') as fh:
            json.dump(self.to_dict(), fh, indent=2)


# ---------------------------------------------------------------------------
# optimization-based bound tightening
# ---------------------------------------------------------------------------

@dataclass
class ObbtTarget:
    k: int
    name: str
    index: int
    expr: LinExpr
    pre: bool = False


def _obbt_targets(family: ProblemFamily, model: MilpModel, varmap: VarMap, K: int) -> List[ObbtTarget]:
    out = []
    for k in range(max(1, K - 1), K + 1):
        for step in family.algorithm.steps:
            for i, v in enumerate(varmap.vars_of(k, step.output)):
                out.append(ObbtTarget(k, step.output, i, model.expr(v)))
    coefs = family.algorithm.coefficients(K)
    for step in family.algorithm.steps:
        if not isinstance(step, PiecewiseAffine):
            continue
        in_vars = step_inputs(family, varmap, step, K)
        mat, off = step.matrix_at(coefs), step.offset_vec()
        for i in range(mat.shape[0]):
            out.append(ObbtTarget(K, step.output, i, model.dot(mat[i], in_vars, off[i]), pre=True))
    return out


def _solve_target(model: MilpModel, target: ObbtTarget, time_limit: Optional[float]) -> Tuple[float, float]:
    vals = []
    for sense in ('min', 'max'):
        m = model.clone('%s_obbt_%s_%s_%d' % (model.name, sense, target.name, target.index))
        m.set_objective(target.expr, sense)
        res = solve(m, SolveOptions(gap=0.0, time_limit=time_limit, relaxed=True))
        if res.status != SolveStatus.OPTIMAL or res.objective is None:
            raise VerificationError('OBBT LP for %s[%d] at k=%d ended %s: %s'
                                    % (target.name, target.index, target.k, res.status.value, res.message),
                                    stage='obbt')
        vals.append(res.objective)
    lo, hi = vals
    return lo - OBBT_MARGIN * (1.0 + abs(lo)), hi + OBBT_MARGIN * (1.0 + abs(hi))


def apply_cut_pool(model: MilpModel, varmap: VarMap, pool: Sequence[CutLogEntry]) -> int:
    """Re-add cuts found on an earlier model at the matching (step, component) sites."""
    sites = {(s.label, s.component): s for s in varmap.sites}
    added = 0
    for entry in pool:
        site = sites.get((entry.step, entry.component))
        if site is None or entry.cut is None or len(entry.cut.g) != len(site.y_vars):
            continue
        entry.cut.as_constraint(model, site.y_vars, site.w_var, name='pool[%s][%d]' % (entry.step, added))
        added += 1
    return added


def obbt_pass(family: ProblemFamily, K: int, bounds: IterBounds, config: Optional[VerifyConfig] = None,
              cut_pool: Sequence[CutLogEntry] = ()) -> IterBounds:
    """Tighten bounds at iterations K-1..K and the piecewise arguments at K by LP; never loosens."""
    config = config or VerifyConfig(kmax=K)
    out = bounds.copy()
    for rnd in range(1, config.obbt_rounds + 1):
        model, varmap = encode_iterations(family, K, out, hull_base=config.hull_base,
                                          name='%s_obbt_K%d_r%d' % (family.name, K, rnd))
        if config.obbt_reuse_cuts and cut_pool:
            apply_cut_pool(model, varmap, cut_pool)
        model.compiled()
        targets = _obbt_targets(family, model, varmap, K)
        with ThreadPoolExecutor(max_workers=max(1, OBBT_WORKERS)) as ex:
            results = list(ex.map(lambda t: _solve_target(model, t, config.time_limit), targets))
        gain = 0.0
        for target, (lo, hi) in zip(targets, results):
            if target.pre:
                cur_lo, cur_hi = out.get_pre(target.k, target.name)
            else:
                cur_lo, cur_hi = out.get(target.k, target.name)
            new_lo, new_hi = cur_lo.copy(), cur_hi.copy()
            new_lo[target.index] = lo
            new_hi[target.index] = hi
            if target.pre:
                gain = max(gain, out.tighten_pre(target.k, target.name, new_lo, new_hi))
            else:
                gain = max(gain, out.tighten(target.k, target.name, new_lo, new_hi, Provenance.OBBT))
        for k in range(max(1, K - 1), K + 1):
            out = refine_iteration(family, out, k)
        logger.debug('OBBT K=%d round %d: %d targets, max gain %.3g', K, rnd, len(targets), gain)
        if gain < OBBT_STOP:
            break
    return out


# ---------------------------------------------------------------------------
# warm starts and the initial radius
# ---------------------------------------------------------------------------

def incumbent_point(family: ProblemFamily, varmap: VarMap, values) -> Tuple[np.ndarray, np.ndarray]:
    """(x, s0) read from a solved model."""
    values = np.asarray(values, dtype=float)
    x = values[varmap.x]
    s0 = family.layout.join({slot: values[varmap.s[(0, slot)]] for slot in family.layout.names})
    return x, s0


def warm_start_extend(family: ProblemFamily, point: Tuple[np.ndarray, np.ndarray], model: MilpModel,
                      varmap: VarMap) -> Optional[Dict[int, float]]:
    """Assignment of the K-model obtained by re-simulating from (x, s0); None if it does not check out."""
    x, s0 = point
    try:
        traj = simulate(family, x, s0, varmap.K)
        assignment = trajectory_assignment(family, varmap, traj)
    except (ModelIRError, EncodingError) as e:
        logger.warning('warm start dropped: %s', e)
        return None
    vec = np.zeros(model.num_vars)
    missing = [v for v in range(model.num_vars) if v not in assignment]
    if missing:
        logger.warning('warm start dropped: %d variables unassigned (first %s)', len(missing),
                       model.var_name(missing[0]))
        return None
    for v, val in assignment.items():
        vec[v] = val
    violations = model.check_assignment(vec)
    if violations:
        logger.warning('warm start dropped: %d violations, first: %s', len(violations), violations[0])
        return None
    return assignment


def compute_R(family: ProblemFamily, options: Optional[SolveOptions] = None,
              radius_box: float = DEFAULT_RADIUS_BOX) -> float:
    """Upper bound on max ||s0 - s*||_1 over X and S (hence on the l2 distance)."""
    model, _ = encode_radius(family, radius_box=radius_box)
    res = solve(model, options or SolveOptions())
    if res.status in (SolveStatus.INFEASIBLE, SolveStatus.UNBOUNDED, SolveStatus.ERROR):
        raise VerificationError('radius model ended %s: %s' % (res.status.value, res.message), stage='radius')
    R = res.best_bound if res.best_bound is not None else res.objective
    if R is None:
        raise VerificationError('radius model has no bound', stage='radius')
    return max(float(R), 0.0)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def _pick_start(family, model, varmap, candidates) -> Optional[Dict[int, float]]:
    best, best_val = None, None
    for point in candidates:
        assignment = warm_start_extend(family, point, model, varmap)
        if assignment is None:
            continue
        val = assignment.get(varmap.delta, 0.0)
        if best_val is None or val > best_val:
            best, best_val = assignment, val
    return best


def run_sequential(family: ProblemFamily, config: VerifyConfig, baseline: Optional[SampleMaxResult] = None,
                   cut_log: Optional[CutLog] = None, keep_bounds: bool = False,
                   on_model: Optional[Callable[[int, MilpModel], None]] = None) -> VerificationReport:
    """Solve the verification problem for K = 1..config.kmax, reusing bounds across K."""
    diags = config.validate() + validate(family, kmax=config.kmax)
    if diags:
        raise VerificationError('; '.join(diags), stage='validate')
    report = VerificationReport(family.name)
    cut_log = cut_log if cut_log is not None else CutLog()
    tag_run(family=family.name)
    stage = 'setup'
    try:
        alphas = None
        if config.theory is not None:
            theory = config.theory
            if config.compute_R or (theory.R is None and theory.mode != 'user_sequence'):
                stage = 'radius'
                report.R = compute_R(family, config.solve_options(), config.radius_box)
                theory = theory.with_R(report.R)
            alphas = alpha_sequence(theory, config.kmax)
        elif config.compute_R:
            stage = 'radius'
            report.R = compute_R(family, config.solve_options(), config.radius_box)

        bounds = seed_bounds(family)
        uppers: List[float] = []
        prev_point = None
        for K in range(1, config.kmax + 1):
            tag_run(K=K)
            stage = 'bounds'
            bounds = propagate_interval(family, K, bounds)
            frac = 0.0
            if alphas is not None:
                bounds, frac = combine(bounds, theory_table(family, bounds, K, alphas[K - 1]))
            obbt_time = 0.0
            if config.obbt_enabled and config.obbt_rounds > 0:
                stage = 'obbt'
                with Stopwatch() as sw:
                    bounds = obbt_pass(family, K, bounds, config, cut_pool=cut_log.entries)
                obbt_time = sw.seconds

            stage = 'encode'
            model, varmap = encode_vp(family, K, bounds, hull_base=config.hull_base)
            stage = 'cuts'
            ncuts = root_cut_loop(model, varmap.sites, config.solve_options(), rounds=config.cut_rounds,
                                  mode=config.cut_mode, log=cut_log)

            stage = 'warm_start'
            candidates = []
            if prev_point is not None:
                candidates.append(prev_point)
            if baseline is not None and K <= len(baseline.points):
                candidates.append(baseline.point(K))
            start = _pick_start(family, model, varmap, candidates)
            if start is not None:
                model.set_warm_start(start)
            if on_model is not None:
                on_model(K, model)

            stage = 'solve'
            res = solve(model, config.solve_options())
            if res.status not in (SolveStatus.OPTIMAL, SolveStatus.TIME_LIMIT):
                raise VerificationError('K=%d: solver ended %s: %s' % (K, res.status.value, res.message),
                                        stage='solve', report=report)
            upper = res.best_bound if res.best_bound is not None else res.objective
            if upper is None:
                raise VerificationError('K=%d: no bound available after %s' % (K, res.status.value),
                                        stage='solve', report=report)
            if not res.has_incumbent:
                logger.warning('K=%d: no incumbent, reporting the best bound %.6g', K, upper)
            delta = res.objective if res.has_incumbent else upper
            report.records.append(KRecord(
                K=K, delta=float(delta), best_bound=float(upper), status=res.status.value,
                milp_time_s=res.wall_time, obbt_time_s=obbt_time, cuts=ncuts,
                sample_max=baseline.at(K) if baseline is not None and K <= len(baseline.values) else None,
                frac_ot_tighter=frac, incumbent=res.objective))
            log_event(logger, 'solved', K=K, status=res.status.value, cuts=ncuts, seconds=round(res.wall_time, 3))
            record_bound(K, delta, upper)

            if res.has_incumbent:
                prev_point = incumbent_point(family, varmap, res.values)
            stage = 'postprocess'
            uppers.append(max(float(upper), 0.0))
            bounds = postprocess_delta(family, bounds, uppers)
            if keep_bounds:
                report.bounds[K] = bounds.to_dict()
    except VerificationError as e:
        if e.report is None:
            e.report = report
        raise
    except (BoundError, EncodingError, SeparationError, ModelError, LinalgError, ModelIRError) as e:
        logger.exception('verification of %s failed at stage %s', family.name, stage)
        raise VerificationError('%s failed: %s' % (stage, e), stage=stage, report=report) from e
    return report
