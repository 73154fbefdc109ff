"""Problem families and the step IR of a first-order method.

A family bundles the parameter set X, the initial-iterate set S and the
algorithm, written as an ordered list of steps evaluated once per
iteration. `simulate` is the reference executor used by the baselines and
by every oracle in the tests.
"""
import logging
from dataclasses import dataclass, field
from typing import ClassVar, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg as sla

from linalg import LinalgError, as_matrix, as_vector, lu_checked

logger = logging.getLogger(__name__)


class ModelIRError(Exception):
    pass


# ---------------------------------------------------------------------------
# scalar kinds of piecewise-affine steps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SoftThreshold:
    lam: float
    name: ClassVar[str] = 'soft_threshold'

    def apply(self, z):
        z = np.asarray(z, dtype=float)
        return np.sign(z) * np.maximum(np.abs(z) - self.lam, 0.0)

    def row(self, i: int) -> 'SoftThreshold':
        return self

    def breakpoints(self) -> Tuple[float, ...]:
        return (-self.lam, self.lam)

    def to_dict(self) -> dict:
        return {'type': self.name, 'lam': self.lam}


@dataclass(frozen=True)
class Relu:
    name: ClassVar[str] = 'relu'

    def apply(self, z):
        return np.maximum(np.asarray(z, dtype=float), 0.0)

    def row(self, i: int) -> 'Relu':
        return self

    def breakpoints(self) -> Tuple[float, ...]:
        return (0.0,)

    def to_dict(self) -> dict:
        return {'type': self.name}


@dataclass(frozen=True, eq=False)
class SatLin:
    """Clamp to [lo, hi]; lo/hi are scalars or one value per row."""
    lo: object
    hi: object
    name: ClassVar[str] = 'satlin'

    def apply(self, z):
        return np.clip(np.asarray(z, dtype=float), self.lo, self.hi)

    def row(self, i: int) -> 'SatLin':
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        return SatLin(float(lo if lo.ndim == 0 else lo[i]), float(hi if hi.ndim == 0 else hi[i]))

    def breakpoints(self) -> Tuple[float, ...]:
        """Kinks of one row; vector bounds go through row(i) first."""
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.ndim or hi.ndim:
            if lo.size and hi.size and np.all(lo == lo.flat[0]) and np.all(hi == hi.flat[0]):
                return (float(lo.flat[0]), float(hi.flat[0]))
            raise ModelIRError('SatLin with per-row bounds has no single set of breakpoints; use row(i)')
        return (float(lo), float(hi))

    def to_dict(self) -> dict:
        return {'type': self.name, 'lo': np.asarray(self.lo).tolist(), 'hi': np.asarray(self.hi).tolist()}


KINDS = {'soft_threshold': SoftThreshold, 'relu': Relu, 'satlin': SatLin}


def kind_from_dict(d: Mapping) -> object:
    t = d.get('type')
    if t == 'soft_threshold':
        return SoftThreshold(float(d['lam']))
    if t == 'relu':
        return Relu()
    if t == 'satlin':
        return SatLin(d['lo'], d['hi'])
    raise ModelIRError('unknown piecewise kind %r' % t)


# ---------------------------------------------------------------------------
# IR types
# ---------------------------------------------------------------------------

REF_KINDS = ('state', 'cur', 'param', 'init')


@dataclass(frozen=True)
class Ref:
    """Input reference of a step.

    state: slot `name` at iteration k - lag (clamped at 0)
    cur:   output `name` of an earlier step in the same iteration
    param: the parameter x
    init:  slot `name` of the initial state
    """
    kind: str
    name: str = ''
    lag: int = 1

    def to_dict(self) -> dict:
        d = {'kind': self.kind}
        if self.name:
            d['name'] = self.name
        if self.kind == 'state':
            d['lag'] = self.lag
        return d


def state(name: str, lag: int = 1) -> Ref:
    return Ref('state', name, lag)


def cur(name: str) -> Ref:
    return Ref('cur', name)


def init(name: str) -> Ref:
    return Ref('init', name)


PARAM = Ref('param')


@dataclass(frozen=True)
class ParamSet:
    lower: np.ndarray
    upper: np.ndarray
    extra_rows: Tuple[Tuple[np.ndarray, float], ...] = ()

    @property
    def dim(self) -> int:
        return int(np.asarray(self.lower).size)


@dataclass(frozen=True)
class InitSet:
    kind: str
    lower: np.ndarray
    upper: np.ndarray
    ties: Tuple[Tuple[str, str], ...] = ()

    @classmethod
    def singleton(cls, value, ties=()) -> 'InitSet':
        v = as_vector(value, 's0')
        return cls('singleton', v, v.copy(), tuple(ties))

    @classmethod
    def box(cls, lower, upper, ties=()) -> 'InitSet':
        return cls('box', as_vector(lower, 's0 lower'), as_vector(upper, 's0 upper'), tuple(ties))


@dataclass(frozen=True)
class StateLayout:
    slots: Tuple[Tuple[str, int], ...]
    residual_slot: str
    history: Mapping[str, int] = field(default_factory=dict)

    @property
    def names(self) -> List[str]:
        return [n for n, _ in self.slots]

    def dim(self, name: str) -> int:
        for n, d in self.slots:
            if n == name:
                return d
        raise ModelIRError('unknown slot %r' % name)

    def hist(self, name: str) -> int:
        return int(self.history.get(name, 1))

    @property
    def total_dim(self) -> int:
        return sum(d for _, d in self.slots)

    def split(self, vec) -> Dict[str, np.ndarray]:
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if vec.size != self.total_dim:
            raise ModelIRError('state has %d entries, layout needs %d' % (vec.size, self.total_dim))
        out, pos = {}, 0
        for n, d in self.slots:
            out[n] = vec[pos:pos + d].copy()
            pos += d
        return out

    def join(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(values[n], dtype=float).reshape(-1) for n, _ in self.slots])


@dataclass(frozen=True, eq=False, kw_only=True)
class Step:
    output: str
    inputs: Tuple[Ref, ...]
    offset: Optional[np.ndarray] = None
    scheduled: Mapping[str, np.ndarray] = field(default_factory=dict)

    variant: ClassVar[str] = ''

    @property
    def base(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def output_dim(self) -> int:
        return int(self.base.shape[0])

    def matrix_at(self, coefs: Mapping[str, float]) -> np.ndarray:
        """Operative B~/B/A_rows for one iteration's schedule coefficients."""
        mat = np.array(self.base, dtype=float)
        for cname, extra in self.scheduled.items():
            mat = mat + float(coefs[cname]) * np.asarray(extra, dtype=float)
        return mat

    def offset_vec(self) -> np.ndarray:
        if self.offset is None:
            return np.zeros(self.output_dim)
        return np.asarray(self.offset, dtype=float)


@dataclass(frozen=True, eq=False, kw_only=True)
class AffineExplicit(Step):
    Btilde: np.ndarray
    variant: ClassVar[str] = 'affine_explicit'

    @property
    def base(self) -> np.ndarray:
        return self.Btilde


@dataclass(frozen=True, eq=False, kw_only=True)
class AffineImplicit(Step):
    M: np.ndarray
    B: np.ndarray
    variant: ClassVar[str] = 'affine_implicit'

    @property
    def base(self) -> np.ndarray:
        return self.B

    @property
    def output_dim(self) -> int:
        return int(np.asarray(self.M).shape[0])


@dataclass(frozen=True, eq=False, kw_only=True)
class PiecewiseAffine(Step):
    kind: object
    A_rows: np.ndarray
    variant: ClassVar[str] = 'piecewise'

    @property
    def base(self) -> np.ndarray:
        return self.A_rows


@dataclass(frozen=True, eq=False)
class AlgorithmIR:
    layout: StateLayout
    steps: Tuple[Step, ...]
    schedule: Mapping[str, np.ndarray] = field(default_factory=dict)
    rebind: Mapping[str, str] = field(default_factory=dict)

    def bindings(self) -> Dict[str, str]:
        """Step output -> slot it becomes at the next iteration."""
        out = {s.output: s.output for s in self.steps if s.output in self.layout.names}
        out.update(self.rebind)
        return out

    def slot_output(self, slot: str) -> str:
        for o, s in self.bindings().items():
            if s == slot:
                return o
        raise ModelIRError('slot %r is never written' % slot)

    def step(self, output: str) -> Step:
        for s in self.steps:
            if s.output == output:
                return s
        raise ModelIRError('no step writes %r' % output)

    def resolve_cur(self, name: str) -> str:
        if any(s.output == name for s in self.steps):
            return name
        if name in self.layout.names:
            return self.slot_output(name)
        raise ModelIRError('unknown current-iteration value %r' % name)

    def coefficients(self, k: int) -> Dict[str, float]:
        """Schedule coefficients for the iteration producing s^k (k >= 1)."""
        out = {}
        for cname, seq in self.schedule.items():
            seq = np.asarray(seq, dtype=float)
            if k - 1 >= seq.size:
                raise ModelIRError('schedule %r undefined at k=%d' % (cname, k))
            out[cname] = float(seq[k - 1])
        return out

    @property
    def kmax(self) -> Optional[int]:
        if not self.schedule:
            return None
        return min(int(np.asarray(v).size) for v in self.schedule.values())


@dataclass(frozen=True, eq=False)
class ProblemFamily:
    params: ParamSet
    init: InitSet
    algorithm: AlgorithmIR
    name: str = 'family'
    data: Mapping[str, object] = field(default_factory=dict)

    @property
    def layout(self) -> StateLayout:
        return self.algorithm.layout


@dataclass
class Trajectory:
    """states[k]: slot values of s^k; outputs[k]: every step output at iteration k (empty for k=0)."""
    layout: StateLayout
    states: List[Dict[str, np.ndarray]]
    outputs: List[Dict[str, np.ndarray]]
    x: np.ndarray

    def __len__(self):
        return len(self.states)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.layout.join(self.states[k])

    @property
    def K(self) -> int:
        return len(self.states) - 1

    def residual_vector(self, k: int) -> np.ndarray:
        return self.states[k][self.layout.residual_slot]


# ---------------------------------------------------------------------------
# dimensions and validation
# ---------------------------------------------------------------------------

def ref_dim(family: ProblemFamily, ref: Ref) -> int:
    alg = family.algorithm
    if ref.kind in ('state', 'init'):
        return alg.layout.dim(ref.name)
    if ref.kind == 'cur':
        return alg.step(alg.resolve_cur(ref.name)).output_dim
    if ref.kind == 'param':
        return family.params.dim
    raise ModelIRError('unknown reference kind %r' % ref.kind)


def input_dim(family: ProblemFamily, step: Step) -> int:
    return sum(ref_dim(family, r) for r in step.inputs)


def _check_refs(family: ProblemFamily, idx: int, step: Step) -> List[str]:
    alg = family.algorithm
    diags = []
    earlier = {s.output for s in alg.steps[:idx]}
    slot_of = alg.bindings()
    for ref in step.inputs:
        if ref.kind not in REF_KINDS:
            diags.append("step '%s': unknown reference kind %r" % (step.output, ref.kind))
        elif ref.kind in ('state', 'init'):
            if ref.name not in alg.layout.names:
                diags.append("step '%s': reads unknown slot %r" % (step.output, ref.name))
            elif ref.kind == 'state' and not 1 <= ref.lag <= alg.layout.hist(ref.name):
                diags.append("step '%s': lag %d of slot %r exceeds history" % (step.output, ref.lag, ref.name))
        elif ref.kind == 'cur':
            names = earlier | {slot_of[o] for o in earlier if o in slot_of}
            if ref.name not in names:
                diags.append("step '%s': %r is not computed earlier in the iteration" % (step.output, ref.name))
    return diags


def _check_kind(step: PiecewiseAffine) -> List[str]:
    kind = step.kind
    if isinstance(kind, SoftThreshold):
        if not kind.lam > 0:
            return ["step '%s': λ must be > 0" % step.output]
    elif isinstance(kind, SatLin):
        lo = np.broadcast_to(np.asarray(kind.lo, dtype=float), (step.output_dim,))
        hi = np.broadcast_to(np.asarray(kind.hi, dtype=float), (step.output_dim,))
        if np.any(lo > hi):
            return ["step '%s': SatLin needs b_lo <= c_hi" % step.output]
    elif not isinstance(kind, Relu):
        return ["step '%s': unsupported piecewise kind %r" % (step.output, kind)]
    return []


def validate(family: ProblemFamily, kmax: Optional[int] = None) -> List[str]:
    """Every invariant violation of the family, as readable diagnostics."""
    diags: List[str] = []
    params, init_set, alg = family.params, family.init, family.algorithm
    layout = alg.layout

    lo, hi = np.asarray(params.lower, dtype=float), np.asarray(params.upper, dtype=float)
    if lo.shape != hi.shape:
        diags.append('parameter box bounds differ in length')
    elif np.any(lo > hi):
        diags.append('parameter box has lower > upper')
    elif params.extra_rows and not _params_nonempty(params):
        diags.append('parameter set is empty')

    if not layout.slots:
        diags.append('layout has no slots')
    for n, d in layout.slots:
        if d <= 0:
            diags.append('slot %r has non-positive dimension' % n)
        if layout.hist(n) < 1:
            diags.append('slot %r history must be >= 1' % n)
    if layout.residual_slot not in layout.names:
        diags.append('residual slot %r is not a slot' % layout.residual_slot)

    ilo, ihi = np.asarray(init_set.lower, dtype=float), np.asarray(init_set.upper, dtype=float)
    if ilo.size != layout.total_dim or ihi.size != layout.total_dim:
        diags.append('initial set has dimension %d, layout needs %d' % (ilo.size, layout.total_dim))
    elif init_set.kind == 'singleton' and not np.array_equal(ilo, ihi):
        diags.append('singleton initial set needs lower == upper')
    elif init_set.kind == 'box' and np.any(ilo > ihi):
        diags.append('initial box has lower > upper')
    elif init_set.kind not in ('singleton', 'box'):
        diags.append('initial set kind must be singleton or box')
    for a, b in init_set.ties:
        if a not in layout.names or b not in layout.names or layout.dim(a) != layout.dim(b):
            diags.append('tie %r = %r does not pair slots of equal dimension' % (a, b))

    outputs = [s.output for s in alg.steps]
    if len(set(outputs)) != len(outputs):
        diags.append('a step output is written more than once per iteration')
    bindings = alg.bindings()
    for o in bindings:
        if o not in outputs:
            diags.append('rebind source %r is not a step output' % o)
    written = list(bindings.values())
    for n in layout.names:
        if written.count(n) != 1:
            diags.append('slot %r must be written exactly once per iteration' % n)

    for idx, step in enumerate(alg.steps):
        ref_diags = _check_refs(family, idx, step)
        diags.extend(ref_diags)
        base = np.asarray(step.base, dtype=float)
        if base.ndim != 2 or not np.all(np.isfinite(base)):
            diags.append("step '%s': matrix must be finite 2-D" % step.output)
            continue
        if not ref_diags:
            try:
                ncols = input_dim(family, step)
            except ModelIRError as e:
                diags.append("step '%s': %s" % (step.output, e))
                ncols = base.shape[1]
            if ncols != base.shape[1]:
                diags.append("step '%s': inputs have %d entries, matrix has %d columns"
                             % (step.output, ncols, base.shape[1]))
        for cname, extra in step.scheduled.items():
            if np.asarray(extra).shape != base.shape:
                diags.append("step '%s': scheduled matrix %r has wrong shape" % (step.output, cname))
            if cname not in alg.schedule:
                diags.append("step '%s': coefficient %r missing from schedule" % (step.output, cname))
        if step.offset is not None and np.asarray(step.offset).size != step.output_dim:
            diags.append("step '%s': offset has wrong length" % step.output)
        if isinstance(step, AffineImplicit):
            M = np.asarray(step.M, dtype=float)
            if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] != base.shape[0]:
                diags.append("step '%s': M must be square with B's row count" % step.output)
            else:
                try:
                    lu_checked(M)
                except LinalgError:
                    diags.append("step '%s': M not invertible" % step.output)
        if isinstance(step, PiecewiseAffine):
            diags.extend(_check_kind(step))
        slot = bindings.get(step.output)
        if slot in layout.names and layout.dim(slot) != step.output_dim:
            diags.append("step '%s': output dim %d differs from slot %r" % (step.output, step.output_dim, slot))

    if kmax is not None and alg.schedule:
        if alg.kmax < kmax:
            diags.append('schedule defined only up to k=%d, need %d' % (alg.kmax, kmax))
    return diags


def _params_nonempty(params: ParamSet) -> bool:
    from milp_core import MilpModel, SolveOptions, SolveStatus, solve

    model = MilpModel('param_feasibility')
    xs = [model.add_var(l, u, name='x[%d]' % i) for i, (l, u) in enumerate(zip(params.lower, params.upper))]
    for row, rhs in params.extra_rows:
        model.add_constr(model.dot(row, xs), '<=', float(rhs))
    model.set_objective(model.dot(np.zeros(len(xs)), xs), 'max')
    res = solve(model, SolveOptions(relaxed=True))
    return res.status == SolveStatus.OPTIMAL


# ---------------------------------------------------------------------------
# reference executor
# ---------------------------------------------------------------------------

def eval_step(step: Step, y: np.ndarray, coefs: Mapping[str, float]) -> np.ndarray:
    mat = step.matrix_at(coefs)
    if mat.shape[1] != y.size:
        raise ModelIRError("step '%s': input has %d entries, matrix needs %d" % (step.output, y.size, mat.shape[1]))
    rhs = mat @ y + step.offset_vec()
    if isinstance(step, AffineExplicit):
        return rhs
    if isinstance(step, AffineImplicit):
        return sla.solve(np.asarray(step.M, dtype=float), rhs)
    if isinstance(step, PiecewiseAffine):
        return step.kind.apply(rhs)
    raise ModelIRError('unknown step variant %r' % type(step).__name__)


def gather(family: ProblemFamily, step: Step, k: int, states: Sequence[Mapping[str, np.ndarray]],
           current: Mapping[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    alg = family.algorithm
    parts = []
    for ref in step.inputs:
        if ref.kind == 'state':
            parts.append(states[max(k - ref.lag, 0)][ref.name])
        elif ref.kind == 'cur':
            parts.append(current[alg.resolve_cur(ref.name)])
        elif ref.kind == 'param':
            parts.append(x)
        else:
            parts.append(states[0][ref.name])
    return np.concatenate(parts) if parts else np.zeros(0)


def apply_ties(family: ProblemFamily, s0: np.ndarray) -> np.ndarray:
    if not family.init.ties:
        return s0
    vals = family.layout.split(s0)
    for slot, src in family.init.ties:
        vals[slot] = vals[src].copy()
    return family.layout.join(vals)


def simulate(family: ProblemFamily, x, s0, K: int) -> Trajectory:
    """Run K iterations from (x, s0) with exact scalar nonlinearities."""
    alg = family.algorithm
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != family.params.dim:
        raise ModelIRError('x has %d entries, family needs %d' % (x.size, family.params.dim))
    if K < 0:
        raise ModelIRError('K must be >= 0')
    states = [alg.layout.split(s0)]
    outputs: List[Dict[str, np.ndarray]] = [{}]
    bindings = alg.bindings()
    for k in range(1, K + 1):
        coefs = alg.coefficients(k)
        current: Dict[str, np.ndarray] = {}
        for step in alg.steps:
            y = gather(family, step, k, states, current, x)
            current[step.output] = eval_step(step, y, coefs)
        states.append({slot: current[o].copy() for o, slot in bindings.items()})
        outputs.append(current)
    return Trajectory(alg.layout, states, outputs, x)


def residual_inf(traj: Trajectory, k: int) -> float:
    if not 1 <= k <= traj.K:
        raise ModelIRError('residual index %d outside 1..%d' % (k, traj.K))
    diff = traj.residual_vector(k) - traj.residual_vector(k - 1)
    return float(np.max(np.abs(diff))) if diff.size else 0.0


def residual_series(traj: Trajectory) -> np.ndarray:
    return np.array([residual_inf(traj, k) for k in range(1, traj.K + 1)])


# ---------------------------------------------------------------------------
# sampling from X and S
# ---------------------------------------------------------------------------

def sample_params(family: ProblemFamily, rng: np.random.Generator, n: int, max_tries: int = 1000) -> np.ndarray:
    lo, hi = np.asarray(family.params.lower, float), np.asarray(family.params.upper, float)
    rows = family.params.extra_rows
    out = []
    tries = 0
    while len(out) < n:
        x = rng.uniform(lo, hi)
        tries += 1
        if all(float(np.dot(r, x)) <= rhs + 1e-12 for r, rhs in rows):
            out.append(x)
        elif tries > max_tries * n:
            raise ModelIRError('rejection sampling of X failed after %d draws' % tries)
    return np.array(out).reshape(n, lo.size)


def sample_init(family: ProblemFamily, rng: np.random.Generator, n: int) -> np.ndarray:
    lo, hi = np.asarray(family.init.lower, float), np.asarray(family.init.upper, float)
    draws = rng.uniform(lo, hi, size=(n, lo.size))
    return np.array([apply_ties(family, s) for s in draws]).reshape(n, lo.size)


# ---------------------------------------------------------------------------
# step builders for the common affine and piecewise-affine steps
# ---------------------------------------------------------------------------

def _eye(d):
    return np.eye(d)


def gradient_step(P, eta: float, output: str = 's', slot: str = 's') -> AffineExplicit:
    """w = (I - eta P) v - eta x for f(v, x) = v'Pv/2 + x'v."""
    P = as_matrix(P, 'P')
    d = P.shape[0]
    return AffineExplicit(output=output, inputs=(state(slot), PARAM),
                          Btilde=np.hstack([_eye(d) - eta * P, -eta * _eye(d)]))


def momentum_step(P, eta: float, coef: str, output: str = 's', slot: str = 's') -> AffineExplicit:
    """Heavy-ball style gradient step on g^k + beta^k (g^k - g^{k-1}); needs history 2."""
    P = as_matrix(P, 'P')
    d = P.shape[0]
    G = _eye(d) - eta * P
    base = np.hstack([G, np.zeros((d, d)), -eta * _eye(d)])
    extra = np.hstack([G, -G, np.zeros((d, d))])
    return AffineExplicit(output=output, inputs=(state(slot, 1), state(slot, 2), PARAM),
                          Btilde=base, scheduled={coef: extra})


def shrinkage_step(d: int, lam: float, output: str = 's', source: Ref = None) -> AffineExplicit:
    return AffineExplicit(output=output, inputs=(source or state(output),),
                          Btilde=_eye(d) / (1.0 + lam))


def averaged_restart_step(d: int, H: int, output: str = 's', slot: str = 's') -> AffineExplicit:
    """Average of the last H iterates of `slot`; needs history H."""
    return AffineExplicit(output=output, inputs=tuple(state(slot, j) for j in range(1, H + 1)),
                          Btilde=np.hstack([_eye(d)] * H) / H)


def halpern_step(P, eta: float, coef: str, output: str = 's', slot: str = 's') -> AffineExplicit:
    """beta^k ((I - eta P) g - eta x) + (1 - beta^k) s^0."""
    P = as_matrix(P, 'P')
    d = P.shape[0]
    base = np.hstack([np.zeros((d, d)), _eye(d), np.zeros((d, d))])
    extra = np.hstack([_eye(d) - eta * P, -_eye(d), -eta * _eye(d)])
    return AffineExplicit(output=output, inputs=(state(slot), init(slot), PARAM),
                          Btilde=base, scheduled={coef: extra})


def prox_qp_step(P, lam: float, output: str = 's', slot: str = 's') -> AffineImplicit:
    """(P + I/lam) w = v/lam - x."""
    P = as_matrix(P, 'P')
    d = P.shape[0]
    return AffineImplicit(output=output, inputs=(state(slot), PARAM),
                          M=P + _eye(d) / lam, B=np.hstack([_eye(d) / lam, -_eye(d)]))


def prox_kkt_step(P, A, b, lam: float, output: str = 's', source: Ref = None) -> AffineImplicit:
    """KKT system of the prox of an equality-constrained quadratic; output is (w, nu)."""
    P, A = as_matrix(P, 'P'), as_matrix(A, 'A')
    d, m = P.shape[0], A.shape[0]
    M = np.block([[P + _eye(d) / lam, A.T], [A, np.zeros((m, m))]])
    B = np.vstack([np.hstack([_eye(d) / lam, -_eye(d)]), np.zeros((m, 2 * d))])
    offset = np.concatenate([np.zeros(d), as_vector(b, 'b')])
    return AffineImplicit(output=output, inputs=(source or state('s'), PARAM), M=M, B=B, offset=offset)


def affine_projection_step(A, b, output: str = 's', slot: str = 's') -> AffineExplicit:
    A = as_matrix(A, 'A')
    pinv = np.linalg.pinv(A)
    d = A.shape[1]
    return AffineExplicit(output=output, inputs=(state(slot),), Btilde=_eye(d) - pinv @ A,
                          offset=pinv @ as_vector(b, 'b'))


def soft_threshold_step(A_rows, lam: float, inputs: Sequence[Ref], output: str = 's', offset=None,
                        scheduled=None) -> PiecewiseAffine:
    return PiecewiseAffine(output=output, inputs=tuple(inputs), kind=SoftThreshold(float(lam)),
                           A_rows=as_matrix(A_rows, 'A_rows'), offset=offset, scheduled=scheduled or {})


def relu_step(A_rows, inputs: Sequence[Ref], output: str = 's', offset=None, scheduled=None) -> PiecewiseAffine:
    return PiecewiseAffine(output=output, inputs=tuple(inputs), kind=Relu(),
                           A_rows=as_matrix(A_rows, 'A_rows'), offset=offset, scheduled=scheduled or {})


def satlin_step(A_rows, lo, hi, inputs: Sequence[Ref], output: str = 's', offset=None) -> PiecewiseAffine:
    return PiecewiseAffine(output=output, inputs=tuple(inputs), kind=SatLin(lo, hi),
                           A_rows=as_matrix(A_rows, 'A_rows'), offset=offset)


# ---------------------------------------------------------------------------
# JSON document
# ---------------------------------------------------------------------------

def _tolist(a):
    return None if a is None else np.asarray(a, dtype=float).tolist()


def _data_to_json(v):
    if isinstance(v, np.ndarray):
        return {'ndarray': v.tolist(), 'dtype': v.dtype.str}
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, Mapping):
        return {str(k): _data_to_json(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_data_to_json(x) for x in v]
    return v


def _data_from_json(v):
    if isinstance(v, Mapping):
        if set(v) == {'ndarray', 'dtype'}:
            return np.asarray(v['ndarray'], dtype=np.dtype(v['dtype']))
        return {k: _data_from_json(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_data_from_json(x) for x in v]
    return v


def step_to_dict(step: Step) -> dict:
    d = {'output': step.output, 'variant': step.variant, 'inputs': [r.to_dict() for r in step.inputs]}
    if isinstance(step, AffineExplicit):
        d['Btilde'] = _tolist(step.Btilde)
    elif isinstance(step, AffineImplicit):
        d['M'] = _tolist(step.M)
        d['B'] = _tolist(step.B)
    else:
        d['kind'] = step.kind.to_dict()
        d['A_rows'] = _tolist(step.A_rows)
    if step.offset is not None:
        d['offset'] = _tolist(step.offset)
    if step.scheduled:
        d['scheduled'] = {k: _tolist(v) for k, v in step.scheduled.items()}
    return d


def step_from_dict(d: Mapping) -> Step:
    try:
        common = dict(output=d['output'],
                      inputs=tuple(Ref(r['kind'], r.get('name', ''), int(r.get('lag', 1))) for r in d['inputs']),
                      offset=None if d.get('offset') is None else as_vector(d['offset'], 'offset'),
                      scheduled={k: as_matrix(v, k) for k, v in (d.get('scheduled') or {}).items()})
        variant = d['variant']
        if variant == AffineExplicit.variant:
            return AffineExplicit(Btilde=as_matrix(d['Btilde'], 'Btilde'), **common)
        if variant == AffineImplicit.variant:
            return AffineImplicit(M=as_matrix(d['M'], 'M'), B=as_matrix(d['B'], 'B'), **common)
        if variant == PiecewiseAffine.variant:
            return PiecewiseAffine(kind=kind_from_dict(d['kind']), A_rows=as_matrix(d['A_rows'], 'A_rows'), **common)
    except (KeyError, TypeError, LinalgError) as e:
        raise ModelIRError('malformed step %r: %s' % (d.get('output'), e)) from e
    raise ModelIRError('unknown step variant %r' % variant)


def family_to_dict(family: ProblemFamily) -> dict:
    alg = family.algorithm
    return {
        'name': family.name,
        'params': {
            'lower': _tolist(family.params.lower),
            'upper': _tolist(family.params.upper),
            'extra_rows': [{'row': _tolist(r), 'rhs': float(h)} for r, h in family.params.extra_rows],
        },
        'init': {
            'kind': family.init.kind,
            'lower': _tolist(family.init.lower),
            'upper': _tolist(family.init.upper),
            'ties': [list(t) for t in family.init.ties],
        },
        'algorithm': {
            'slots': [{'name': n, 'dim': d, 'history': alg.layout.hist(n)} for n, d in alg.layout.slots],
            'residual_slot': alg.layout.residual_slot,
            'steps': [step_to_dict(s) for s in alg.steps],
            'schedule': {k: _tolist(v) for k, v in alg.schedule.items()},
            'rebind': dict(alg.rebind),
        },
        'data': _data_to_json(family.data),
    }


def family_from_dict(d: Mapping) -> ProblemFamily:
    try:
        p, i, a = d['params'], d['init'], d['algorithm']
        params = ParamSet(as_vector(p['lower'], 'X lower'), as_vector(p['upper'], 'X upper'),
                          tuple((as_vector(r['row'], 'row'), float(r['rhs'])) for r in p.get('extra_rows', [])))
        ties = tuple(tuple(t) for t in i.get('ties', []))
        if i['kind'] == 'singleton':
            init_set = InitSet('singleton', as_vector(i['lower'], 's0'),
                               as_vector(i.get('upper', i['lower']), 's0'), ties)
        else:
            init_set = InitSet(i['kind'], as_vector(i['lower'], 's0 lower'), as_vector(i['upper'], 's0 upper'), ties)
        layout = StateLayout(tuple((s['name'], int(s['dim'])) for s in a['slots']), a['residual_slot'],
                             {s['name']: int(s.get('history', 1)) for s in a['slots']})
        alg = AlgorithmIR(layout, tuple(step_from_dict(s) for s in a['steps']),
                          {k: as_vector(v, k) for k, v in (a.get('schedule') or {}).items()},
                          dict(a.get('rebind') or {}))
    except (KeyError, TypeError, LinalgError) as e:
        raise ModelIRError('malformed family document: %s' % e) from e
    return ProblemFamily(params, init_set, alg, d.get('name', 'family'), data=_data_from_json(d.get('data') or {}))
