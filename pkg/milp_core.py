"""Solver-agnostic MILP/LP model and the pluggable backend contract.

Models are built append-only with `add_var` / `add_constr` and handed to
`solve`, which dispatches to the active backend. The default backend is
HiGHS through `scipy.optimize.milp`; `CbcBackend` (python-mip) is optional.
"""
import logging
import math
import os
import time
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Mapping, NewType, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, milp
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_fixed

try:
    import mip
except Exception:
    mip = None

logger = logging.getLogger(__name__)

VarId = NewType('VarId', int)

CONTINUOUS = 'continuous'
BINARY = 'binary'
SENSES = ('<=', '=', '>=')
FEAS_TOL = 1e-7


class ModelError(Exception):
    pass


class UnknownVariableError(ModelError):
    pass


class BoundInversionError(ModelError):
    pass


class BackendError(Exception):
    pass


class SolveStatus(str, Enum):
    OPTIMAL = 'optimal_within_gap'
    TIME_LIMIT = 'time_limit'
    INFEASIBLE = 'infeasible'
    UNBOUNDED = 'unbounded'
    ERROR = 'error'


class LinExpr:
    """Sparse linear expression sum(coef * var) + constant; duplicate vars merge."""

    __slots__ = ('terms', 'constant')

    def __init__(self, terms: Optional[Mapping[int, float]] = None, constant: float = 0.0):
        self.terms: Dict[int, float] = {}
        self.constant = float(constant)
        if terms:
            for v, c in terms.items():
                self._add(v, c)

    def _add(self, v: int, c: float) -> None:
        c = float(c)
        if not math.isfinite(c):
            raise ModelError('non-finite coefficient on variable %d' % v)
        if c == 0.0:
            return
        new = self.terms.get(int(v), 0.0) + c
        if new == 0.0:
            self.terms.pop(int(v), None)
        else:
            self.terms[int(v)] = new

    @classmethod
    def of(cls, v: int, coef: float = 1.0) -> 'LinExpr':
        return cls({v: coef})

    @classmethod
    def const(cls, value: float) -> 'LinExpr':
        return cls(constant=value)

    @classmethod
    def sum(cls, items: Iterable['LinExpr']) -> 'LinExpr':
        out = cls()
        for e in items:
            out += e
        return out

    def copy(self) -> 'LinExpr':
        out = LinExpr()
        out.terms = dict(self.terms)
        out.constant = self.constant
        return out

    @staticmethod
    def _coerce(other) -> 'LinExpr':
        if isinstance(other, LinExpr):
            return other
        return LinExpr.const(float(other))

    def __iadd__(self, other):
        other = self._coerce(other)
        for v, c in other.terms.items():
            self._add(v, c)
        self.constant += other.constant
        return self

    def __add__(self, other):
        out = self.copy()
        out += other
        return out

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, scalar):
        s = float(scalar)
        out = LinExpr(constant=self.constant * s)
        if s != 0.0:
            out.terms = {v: c * s for v, c in self.terms.items()}
        return out

    __rmul__ = __mul__

    def __repr__(self):
        body = ' + '.join('%g*v%d' % (c, v) for v, c in sorted(self.terms.items()))
        return 'LinExpr(%s + %g)' % (body or '0', self.constant)


ExprLike = Union[LinExpr, float, int]


@dataclass
class Constraint:
    expr: LinExpr
    sense: str
    rhs: float
    name: str


@dataclass
class SolveOptions:
    gap: float = 1e-4
    time_limit: Optional[float] = None
    relaxed: bool = False
    verbose: bool = False


@dataclass
class SolveResult:
    status: SolveStatus
    objective: Optional[float] = None
    best_bound: Optional[float] = None
    values: Optional[np.ndarray] = None
    wall_time: float = 0.0
    message: str = ''
    backend: str = ''

    @property
    def has_incumbent(self) -> bool:
        return self.values is not None

    def value(self, v: int) -> float:
        if self.values is None:
            raise ModelError('no incumbent available')
        return float(self.values[int(v)])

    def evaluate(self, expr: LinExpr) -> float:
        if self.values is None:
            raise ModelError('no incumbent available')
        return expr.constant + sum(c * float(self.values[v]) for v, c in expr.terms.items())

    @property
    def gap(self) -> Optional[float]:
        if self.objective is None or self.best_bound is None:
            return None
        return abs(self.best_bound - self.objective) / max(abs(self.objective), 1e-10)


@dataclass
class CompiledModel:
    A: sparse.csr_matrix
    row_lo: np.ndarray
    row_hi: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    binary: np.ndarray


class MilpModel:
    def __init__(self, name: str = 'model'):
        self.name = name
        self._lb: List[float] = []
        self._ub: List[float] = []
        self._kind: List[str] = []
        self._names: List[str] = []
        self.constraints: List[Constraint] = []
        self.objective: LinExpr = LinExpr()
        self.sense: str = 'max'
        self.warm_start: Dict[int, float] = {}
        self._compiled: Optional[Tuple[int, int, CompiledModel]] = None

    # -- construction -------------------------------------------------------

    @property
    def num_vars(self) -> int:
        return len(self._lb)

    @property
    def num_constrs(self) -> int:
        return len(self.constraints)

    def add_var(self, lb: float = 0.0, ub: float = 0.0, kind: str = CONTINUOUS, name: Optional[str] = None) -> VarId:
        lb, ub = float(lb), float(ub)
        if math.isnan(lb) or math.isnan(ub):
            raise ModelError('NaN bound on %s' % name)
        if lb > ub:
            raise BoundInversionError('variable %s has lower bound %g > upper bound %g' % (name, lb, ub))
        if kind == BINARY and (lb < 0.0 or ub > 1.0):
            raise BoundInversionError('binary %s must have bounds within [0, 1]' % name)
        if kind not in (CONTINUOUS, BINARY):
            raise ModelError('unknown variable kind %r' % kind)
        self._lb.append(lb)
        self._ub.append(ub)
        self._kind.append(kind)
        self._names.append(name or 'v%d' % len(self._names))
        return VarId(len(self._lb) - 1)

    def add_binary(self, name: Optional[str] = None) -> VarId:
        return self.add_var(0.0, 1.0, BINARY, name)

    def var_bounds(self, v: int) -> Tuple[float, float]:
        self._check_var(v)
        return self._lb[v], self._ub[v]

    def var_kind(self, v: int) -> str:
        self._check_var(v)
        return self._kind[v]

    def var_name(self, v: int) -> str:
        self._check_var(v)
        return self._names[v]

    def _check_var(self, v: int) -> None:
        if not 0 <= int(v) < len(self._lb):
            raise UnknownVariableError('unknown variable id %r' % v)

    def expr(self, v: int, coef: float = 1.0) -> LinExpr:
        self._check_var(v)
        return LinExpr.of(v, coef)

    def dot(self, coefs: Sequence[float], vars_: Sequence[int], constant: float = 0.0) -> LinExpr:
        out = LinExpr(constant=constant)
        for c, v in zip(coefs, vars_):
            out._add(v, c)
        return out

    def add_constr(self, lhs: ExprLike, sense: str, rhs: ExprLike = 0.0, name: Optional[str] = None) -> int:
        if sense not in SENSES:
            raise ModelError('unknown constraint sense %r' % sense)
        expr = LinExpr._coerce(lhs) - LinExpr._coerce(rhs)
        for v in expr.terms:
            self._check_var(v)
        self.constraints.append(Constraint(expr, sense, -expr.constant, name or 'c%d' % len(self.constraints)))
        return len(self.constraints) - 1

    def set_objective(self, expr: ExprLike, sense: str = 'max') -> None:
        if sense not in ('max', 'min'):
            raise ModelError('objective sense must be max or min')
        expr = LinExpr._coerce(expr)
        for v in expr.terms:
            self._check_var(v)
        self.objective = expr
        self.sense = sense

    def set_warm_start(self, assignment: Mapping[int, float]) -> None:
        for v in assignment:
            self._check_var(v)
        self.warm_start = {int(v): float(x) for v, x in assignment.items()}

    def clone(self, name: Optional[str] = None) -> 'MilpModel':
        out = MilpModel(name or self.name)
        out._lb, out._ub = list(self._lb), list(self._ub)
        out._kind, out._names = list(self._kind), list(self._names)
        out.constraints = list(self.constraints)
        out.objective = self.objective.copy()
        out.sense = self.sense
        out.warm_start = dict(self.warm_start)
        out._compiled = self._compiled
        return out

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, expr: LinExpr, values: Sequence[float]) -> float:
        return expr.constant + sum(c * float(values[v]) for v, c in expr.terms.items())

    def check_assignment(self, values: Sequence[float], tol: float = FEAS_TOL) -> List[str]:
        """Violations of bounds, integrality and constraints; empty list means feasible."""
        values = np.asarray(values, dtype=float)
        if values.size != self.num_vars:
            return ['assignment has %d values, model has %d variables' % (values.size, self.num_vars)]
        out = []
        for v, x in enumerate(values):
            if x < self._lb[v] - tol or x > self._ub[v] + tol:
                out.append('%s=%g outside [%g, %g]' % (self._names[v], x, self._lb[v], self._ub[v]))
            if self._kind[v] == BINARY and abs(x - round(x)) > tol:
                out.append('%s=%g not integral' % (self._names[v], x))
        for con in self.constraints:
            lhs = sum(c * values[v] for v, c in con.expr.terms.items())
            scale = tol * (1.0 + abs(con.rhs))
            if (con.sense == '<=' and lhs > con.rhs + scale) or (con.sense == '>=' and lhs < con.rhs - scale) \
                    or (con.sense == '=' and abs(lhs - con.rhs) > scale):
                out.append('%s violated: %g %s %g' % (con.name, lhs, con.sense, con.rhs))
        return out

    def check_ready(self) -> None:
        for v in range(self.num_vars):
            if not (math.isfinite(self._lb[v]) and math.isfinite(self._ub[v])):
                raise ModelError('variable %s has an infinite bound' % self._names[v])

    # -- compilation and export --------------------------------------------

    def compiled(self) -> CompiledModel:
        key = (self.num_vars, self.num_constrs)
        if self._compiled is not None and self._compiled[:2] == key:
            return self._compiled[2]
        rows, cols, data = [], [], []
        row_lo = np.empty(self.num_constrs)
        row_hi = np.empty(self.num_constrs)
        for r, con in enumerate(self.constraints):
            for v, c in con.expr.terms.items():
                rows.append(r)
                cols.append(v)
                data.append(c)
            row_lo[r] = con.rhs if con.sense in ('>=', '=') else -np.inf
            row_hi[r] = con.rhs if con.sense in ('<=', '=') else np.inf
        A = sparse.csr_matrix((data, (rows, cols)), shape=(self.num_constrs, self.num_vars))
        comp = CompiledModel(A, row_lo, row_hi, np.array(self._lb), np.array(self._ub),
                             np.array([k == BINARY for k in self._kind], dtype=bool))
        self._compiled = (key[0], key[1], comp)
        return comp

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.num_vars)
        for v, coef in self.objective.terms.items():
            c[v] = coef
        return c

    def to_lp(self) -> str:
        def fmt(expr: LinExpr) -> str:
            parts = []
            for v, c in sorted(expr.terms.items()):
                parts.append('%s %.17g %s' % ('-' if c < 0 else '+', abs(c), self._names[v]))
            return ' '.join(parts) if parts else '0 %s' % (self._names[0] if self._names else '')

        lines = ['\\ Model %s' % self.name]
        if self.objective.constant:
            lines.append('\\ objective constant %.17g' % self.objective.constant)
        lines.append('Maximize' if self.sense == 'max' else 'Minimize')
        lines.append(' obj: %s' % fmt(self.objective))
        lines.append('Subject To')
        for con in self.constraints:
            lines.append(' %s: %s %s %.17g' % (con.name, fmt(con.expr), con.sense, con.rhs))
        lines.append('Bounds')
        for v in range(self.num_vars):
            if self._kind[v] != BINARY:
                lines.append(' %.17g <= %s <= %.17g' % (self._lb[v], self._names[v], self._ub[v]))
        bins = [self._names[v] for v in range(self.num_vars) if self._kind[v] == BINARY]
        if bins:
            lines.append('Binaries')
            lines.extend(' %s' % n for n in bins)
        lines.append('End')
        return '\n'.join(lines) + '\n'

    def write_lp(self, path: str) -> None:
        with open(path, 'w', encoding='utf-8') as fh:
            fh.write(self.to_lp())


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

class SolverBackend:
    name = 'abstract'

    def solve(self, model: MilpModel, options: SolveOptions) -> SolveResult:
        raise NotImplementedError


class HighsBackend(SolverBackend):
    """HiGHS via scipy.optimize.milp. Stateless, so safe to share across threads."""

    name = 'highs'

    _STATUS = {0: SolveStatus.OPTIMAL, 1: SolveStatus.TIME_LIMIT, 2: SolveStatus.INFEASIBLE,
               3: SolveStatus.UNBOUNDED}

    def solve(self, model: MilpModel, options: SolveOptions) -> SolveResult:
        comp = model.compiled()
        sign = -1.0 if model.sense == 'max' else 1.0
        c = sign * model.objective_vector()
        integrality = np.zeros(model.num_vars) if options.relaxed else comp.binary.astype(float)
        constraints = [LinearConstraint(comp.A, comp.row_lo, comp.row_hi)] if model.num_constrs else None
        opts = {'disp': bool(options.verbose), 'mip_rel_gap': float(options.gap)}
        if options.time_limit is not None:
            opts['time_limit'] = float(options.time_limit)
        try:
            res = milp(c, integrality=integrality, bounds=Bounds(comp.lb, comp.ub),
                       constraints=constraints, options=opts)
        except Exception as e:
            raise BackendError('HiGHS failed: %s' % e) from e

        status = self._STATUS.get(res.status, SolveStatus.ERROR)
        const = model.objective.constant
        values = None if res.x is None else np.asarray(res.x, dtype=float)
        objective = None if values is None else sign * float(res.fun) + const
        dual = getattr(res, 'mip_dual_bound', None)
        if dual is not None and np.isfinite(dual) and not options.relaxed and comp.binary.any():
            best = sign * float(dual) + const
        elif status == SolveStatus.OPTIMAL:
            best = objective
        else:
            best = None
        if status == SolveStatus.OPTIMAL and objective is not None and best is not None:
            best = max(best, objective) if model.sense == 'max' else min(best, objective)
        return SolveResult(status, objective, best, values, message=str(res.message), backend=self.name)


class CbcBackend(SolverBackend):
    """CBC via python-mip; passes warm starts to the solver."""

    name = 'cbc'

    def __init__(self):
        if not mip:
            raise BackendError('python-mip package not available')

    def solve(self, model: MilpModel, options: SolveOptions) -> SolveResult:
        try:
            m = mip.Model(sense=mip.MAXIMIZE if model.sense == 'max' else mip.MINIMIZE, solver_name=mip.CBC)
            m.verbose = 1 if options.verbose else 0
            binary = not options.relaxed
            xs = [m.add_var(name=model.var_name(v), lb=lo, ub=hi,
                            var_type=mip.BINARY if binary and model.var_kind(v) == BINARY else mip.CONTINUOUS)
                  for v, (lo, hi) in enumerate(zip(model._lb, model._ub))]
            for con in model.constraints:
                lhs = mip.xsum(c * xs[v] for v, c in con.expr.terms.items())
                if con.sense == '<=':
                    m += lhs <= con.rhs, con.name
                elif con.sense == '>=':
                    m += lhs >= con.rhs, con.name
                else:
                    m += lhs == con.rhs, con.name
            m.objective = mip.xsum(c * xs[v] for v, c in model.objective.terms.items()) + model.objective.constant
            m.max_mip_gap = options.gap
            if model.warm_start and binary:
                m.start = [(xs[v], x) for v, x in model.warm_start.items()]
            kwargs = {'relax': options.relaxed}
            if options.time_limit is not None:
                kwargs['max_seconds'] = options.time_limit
            st = m.optimize(**kwargs)
        except Exception as e:
            raise BackendError('CBC failed: %s' % e) from e

        OS = mip.OptimizationStatus
        if st == OS.OPTIMAL:
            status = SolveStatus.OPTIMAL
        elif st in (OS.FEASIBLE, OS.NO_SOLUTION_FOUND):
            status = SolveStatus.TIME_LIMIT
        elif st in (OS.INFEASIBLE, OS.INT_INFEASIBLE):
            status = SolveStatus.INFEASIBLE
        elif st == OS.UNBOUNDED:
            status = SolveStatus.UNBOUNDED
        else:
            status = SolveStatus.ERROR
        values = None
        objective = None
        if m.num_solutions:
            values = np.array([x.x for x in xs], dtype=float)
            objective = float(m.objective_value)
        best = float(m.objective_bound) if m.objective_bound is not None and np.isfinite(m.objective_bound) else None
        if status == SolveStatus.OPTIMAL and best is None:
            best = objective
        return SolveResult(status, objective, best, values, message=str(st), backend=self.name)


BACKENDS = {'highs': HighsBackend, 'cbc': CbcBackend}


def available_backends() -> List[str]:
    out = ['highs']
    if mip:
        out.append('cbc')
    return out


def make_backend(name: str) -> SolverBackend:
    try:
        cls = BACKENDS[name]
    except KeyError:
        raise BackendError('unknown MILP backend %r (known: %s)' % (name, ', '.join(BACKENDS)))
    return cls()


def _default_backend() -> SolverBackend:
    name = os.getenv('VERIFY_MILP_BACKEND', 'highs')
    try:
        return make_backend(name)
    except BackendError as e:
        logger.warning('falling back to HiGHS: %s', e)
        return HighsBackend()


_backend: SolverBackend = _default_backend()


def set_backend(backend: SolverBackend):
    global _backend
    _backend = backend


def get_backend() -> SolverBackend:
    return _backend


@retry(stop=stop_after_attempt(2), wait=wait_fixed(0.1), retry=retry_if_exception_type(BackendError), reraise=True)
def _solve_with_retry(backend: SolverBackend, model: MilpModel, options: SolveOptions) -> SolveResult:
    return backend.solve(model, options)


def _start_vector(model: MilpModel) -> Optional[np.ndarray]:
    if len(model.warm_start) != model.num_vars:
        return None
    vec = np.array([model.warm_start[v] for v in range(model.num_vars)])
    if model.check_assignment(vec):
        return None
    return vec


def solve(model: MilpModel, options: Optional[SolveOptions] = None,
          backend: Optional[SolverBackend] = None) -> SolveResult:
    """Solve `model`; backend failures come back as SolveStatus.ERROR."""
    options = options or SolveOptions()
    backend = backend or _backend
    model.check_ready()
    t0 = time.perf_counter()
    try:
        result = _solve_with_retry(backend, model, options)
    except BackendError as e:
        logger.warning('backend %s failed on %s: %s', backend.name, model.name, e)
        result = SolveResult(SolveStatus.ERROR, message=str(e), backend=backend.name)

    if not options.relaxed and result.status in (SolveStatus.OPTIMAL, SolveStatus.TIME_LIMIT):
        start = _start_vector(model)
        if start is not None:
            start_obj = model.evaluate(model.objective, start)
            better = result.objective is None or (
                start_obj > result.objective if model.sense == 'max' else start_obj < result.objective)
            if better:
                logger.debug('%s: warm start (%.6g) replaces incumbent', model.name, start_obj)
                result.values = start
                result.objective = start_obj
    result.wall_time = time.perf_counter() - t0
    return result
