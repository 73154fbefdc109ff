import numpy as np
import pytest

from milp_core import (BackendError, BoundInversionError, LinExpr, MilpModel, ModelError, SolveOptions,
                       SolveResult, SolveStatus, SolverBackend, UnknownVariableError, available_backends, solve)


def _knapsack():
    m = MilpModel('knap')
    a = m.add_binary('a')
    b = m.add_binary('b')
    c = m.add_var(0.0, 1.0, name='c')
    m.add_constr(m.dot([3.0, 2.0, 2.0], [a, b, c]), '<=', 4.0, name='cap')
    m.set_objective(m.dot([5.0, 3.0, 2.0], [a, b, c]), 'max')
    return m, (a, b, c)


def test_linexpr_merges_and_cancels():
    e = LinExpr.of(0, 2.0) + LinExpr.of(1) - LinExpr.of(0, 2.0) + 3.0
    assert e.terms == {1: 1.0}
    assert e.constant == 3.0
    assert (2 * e).terms == {1: 2.0}
    assert LinExpr.sum([LinExpr.of(2), LinExpr.of(2)]).terms == {2: 2.0}


def test_add_var_rejects_bad_bounds():
    m = MilpModel()
    with pytest.raises(BoundInversionError):
        m.add_var(1.0, 0.0, name='x')
    with pytest.raises(ModelError):
        m.add_var(float('nan'), 1.0)
    with pytest.raises(UnknownVariableError):
        m.add_constr(LinExpr.of(7), '<=', 1.0)
    with pytest.raises(ModelError):
        m.add_constr(LinExpr.const(0.0), '<', 1.0)


def test_infinite_bound_refused_before_solve():
    m = MilpModel()
    v = m.add_var(0.0, np.inf, name='free')
    m.set_objective(m.expr(v), 'min')
    with pytest.raises(ModelError):
        solve(m)


def test_highs_solves_small_milp():
    m, (a, b, c) = _knapsack()
    res = solve(m, SolveOptions(gap=0.0))
    assert res.status == SolveStatus.OPTIMAL
    # a = 1, c = 0.5: 5 + 1 = 6 beats a + b (infeasible) and b + c (5)
    assert res.objective == pytest.approx(6.0, abs=1e-6)
    assert res.best_bound >= res.objective - 1e-6
    assert m.check_assignment(res.values) == []


def test_relaxation_is_an_upper_bound():
    m, _ = _knapsack()
    lp = solve(m, SolveOptions(relaxed=True))
    ip = solve(m, SolveOptions(gap=0.0))
    assert lp.objective >= ip.objective - 1e-9


def test_infeasible_status():
    m = MilpModel()
    v = m.add_var(0.0, 1.0, name='v')
    m.add_constr(m.expr(v), '>=', 2.0)
    m.set_objective(m.expr(v))
    assert solve(m).status == SolveStatus.INFEASIBLE


def test_warm_start_used_when_better():
    class Lazy(SolverBackend):
        name = 'lazy'

        def solve(self, model, options):
            return SolveResult(SolveStatus.TIME_LIMIT, objective=0.0, best_bound=10.0,
                               values=np.zeros(model.num_vars), backend=self.name)

    m, (a, b, c) = _knapsack()
    m.set_warm_start({a: 1.0, b: 0.0, c: 0.5})
    res = solve(m, backend=Lazy())
    assert res.objective == pytest.approx(6.0)
    assert res.status == SolveStatus.TIME_LIMIT


def test_infeasible_warm_start_ignored():
    class Lazy(SolverBackend):
        name = 'lazy'

        def solve(self, model, options):
            return SolveResult(SolveStatus.TIME_LIMIT, objective=0.0, best_bound=10.0,
                               values=np.zeros(model.num_vars), backend=self.name)

    m, (a, b, c) = _knapsack()
    m.set_warm_start({a: 1.0, b: 1.0, c: 0.0})
    assert solve(m, backend=Lazy()).objective == 0.0


def test_backend_failure_becomes_error_status():
    calls = []

    class Broken(SolverBackend):
        name = 'broken'

        def solve(self, model, options):
            calls.append(1)
            raise BackendError('boom')

    m, _ = _knapsack()
    res = solve(m, backend=Broken())
    assert res.status == SolveStatus.ERROR
    assert 'boom' in res.message
    assert len(calls) == 2


def test_clone_is_independent():
    m, (a, b, c) = _knapsack()
    m.compiled()
    other = m.clone('copy')
    other.add_constr(other.expr(a), '=', 0.0)
    assert other.num_constrs == m.num_constrs + 1
    assert solve(other, SolveOptions(gap=0.0)).objective == pytest.approx(5.0, abs=1e-6)
    assert solve(m, SolveOptions(gap=0.0)).objective == pytest.approx(6.0, abs=1e-6)


def test_lp_export_names_variables(tmp_path):
    m, _ = _knapsack()
    path = tmp_path / 'knap.lp'
    m.write_lp(str(path))
    text = path.read_text()
    assert 'Maximize' in text and 'Binaries' in text
    assert ' cap: ' in text
    assert 'highs' in available_backends()
