import json

import numpy as np
import pytest

from baseline import sample_max
from bound_engine import TheoryParams, contains, propagate_interval, seed_bounds
from cutgen import CutLog
from encoder import encode_iterations, encode_vp
from generators import gen_gradient, gen_identity, gen_lasso, gen_network_flow
from milp_core import ModelError, SolveOptions, solve
from model_ir import (PARAM, AlgorithmIR, InitSet, ParamSet, ProblemFamily, StateLayout, relu_step, sample_init,
                      sample_params, simulate)
from verifier import (REPORT_COLUMNS, VerificationError, VerifyConfig, compute_R, incumbent_point, obbt_pass,
                      run_sequential, warm_start_extend)


def _config(kmax, **kw):
    kw.setdefault('gap', 1e-6)
    kw.setdefault('time_limit', 120.0)
    return VerifyConfig(kmax=kmax, **kw)


def test_identity_residuals_are_zero():
    report = run_sequential(gen_identity(d=2, s0=np.array([0.5, -0.5])), _config(3))
    assert [r.K for r in report.records] == [1, 2, 3]
    assert report.deltas == pytest.approx([0.0, 0.0, 0.0], abs=1e-6)
    assert all(r.status == 'optimal_within_gap' for r in report.records)


def test_gradient_closed_form():
    report = run_sequential(gen_gradient(P=1.0, eta=0.5), _config(5), keep_bounds=True)
    expected = [0.5 ** K for K in range(1, 6)]
    assert report.deltas == pytest.approx(expected, abs=1e-5)
    for r in report.records:
        assert r.best_bound >= r.delta - 1e-9
    # Prop. 4 style tightening: |s^K| <= sum of the residual bounds
    upper = report.bounds[5]['iterations']['5']['s']['upper'][0]
    assert upper <= sum(report.upper_bounds) + 1e-6


def test_gradient_with_theory_bounds():
    cfg = _config(3, theory=TheoryParams('contractive', beta=0.5))
    report = run_sequential(gen_gradient(P=1.0, eta=0.5), cfg)
    assert report.R == pytest.approx(1.0, abs=1e-3)
    assert report.deltas == pytest.approx([0.5, 0.25, 0.125], abs=1e-5)
    assert all(0.0 <= r.frac_ot_tighter <= 1.0 for r in report.records)


def test_report_frame_and_json(tmp_path):
    report = run_sequential(gen_gradient(), _config(2, obbt_enabled=False))
    frame = report.to_frame()
    assert list(frame.columns) == REPORT_COLUMNS
    assert len(frame) == 2
    path = tmp_path / 'report.json'
    report.to_json(str(path))
    doc = json.loads(path.read_text())
    assert doc['family'] == 'gradient'
    assert [r['K'] for r in doc['records']] == [1, 2]


def test_lasso_dominates_sample_max(small_lasso):
    base = sample_max(small_lasso, 50, 3, seed=2, workers=1)
    log = CutLog()
    report = run_sequential(small_lasso, _config(3, gap=0.05), baseline=base, cut_log=log)
    for r in report.records:
        assert r.sample_max == pytest.approx(base.at(r.K))
        assert r.delta >= r.sample_max - 1e-7
        assert r.best_bound >= r.delta - 1e-9
    assert sum(r.cuts for r in report.records) == log.total


def _relu_family():
    """s = relu(x) with x in the box [-1, 2] cut down to [0, 1] by two extra rows."""
    params = ParamSet(np.array([-1.0]), np.array([2.0]),
                      extra_rows=((np.array([1.0]), 1.0), (np.array([-1.0]), 0.0)))
    step = relu_step(np.array([[1.0]]), inputs=(PARAM,), output='s')
    return ProblemFamily(params, InitSet.singleton(np.zeros(1)),
                         AlgorithmIR(StateLayout((('s', 1),), 's'), (step,)), 'relu')


def test_obbt_uses_the_parameter_rows():
    fam = _relu_family()
    bounds = propagate_interval(fam, 1, seed_bounds(fam))
    assert bounds.get(1, 's')[1][0] == pytest.approx(2.0)
    out = obbt_pass(fam, 1, bounds, _config(1))
    lo, hi = out.get(1, 's')
    assert hi[0] == pytest.approx(1.0, abs=1e-5)
    assert lo[0] == pytest.approx(0.0, abs=1e-5)
    assert out.provenance[(1, 's')][0] in ('obbt', 'interval')


def test_obbt_leaves_identity_bounds_unchanged():
    fam = gen_identity(d=2)
    bounds = propagate_interval(fam, 1, seed_bounds(fam))
    out = obbt_pass(fam, 1, bounds, _config(1))
    assert np.allclose(out.get(1, 's')[0], bounds.get(1, 's')[0])
    assert np.allclose(out.get(1, 's')[1], bounds.get(1, 's')[1])


def test_obbt_never_loosens_and_stays_sound(small_lasso, rng):
    bounds = propagate_interval(small_lasso, 2, seed_bounds(small_lasso))
    first = obbt_pass(small_lasso, 2, bounds, _config(2, obbt_rounds=1))
    second = obbt_pass(small_lasso, 2, first, _config(2, obbt_rounds=1))
    for k in (1, 2):
        assert np.all(first.width(k, 'z') <= bounds.width(k, 'z') + 1e-12)
        assert np.all(second.width(k, 'z') <= first.width(k, 'z') + 1e-12)
    for x, s0 in zip(sample_params(small_lasso, rng, 200), sample_init(small_lasso, rng, 200)):
        assert contains(second, small_lasso, simulate(small_lasso, x, s0, 2)) == []


def test_warm_start_from_previous_incumbent(small_lasso, rng):
    b1 = propagate_interval(small_lasso, 1, seed_bounds(small_lasso))
    m1, v1 = encode_vp(small_lasso, 1, b1)
    res = solve(m1, SolveOptions(gap=1e-4))
    x, s0 = incumbent_point(small_lasso, v1, res.values)
    assert np.allclose(x, res.values[v1.x])

    b2 = propagate_interval(small_lasso, 2, b1)
    m2, v2 = encode_vp(small_lasso, 2, b2)
    assignment = warm_start_extend(small_lasso, (x, s0), m2, v2)
    assert assignment is not None
    vec = np.array([assignment[v] for v in range(m2.num_vars)])
    assert m2.check_assignment(vec) == []
    traj = simulate(small_lasso, x, s0, 2)
    assert assignment[v2.delta] == pytest.approx(np.max(np.abs(traj.states[2]['z'] - traj.states[1]['z'])))


def test_warm_start_outside_bounds_is_dropped():
    fam = gen_gradient()
    b = propagate_interval(fam, 1, seed_bounds(fam))
    model, varmap = encode_vp(fam, 1, b)
    assert warm_start_extend(fam, (np.array([5.0]), np.zeros(1)), model, varmap) is None


def test_compute_R_gradient():
    assert compute_R(gen_gradient(), SolveOptions(gap=1e-6)) == pytest.approx(1.0, abs=1e-5)


def test_invalid_config_is_rejected():
    with pytest.raises(VerificationError) as ei:
        run_sequential(gen_identity(), VerifyConfig(kmax=0))
    assert ei.value.stage == 'validate'
    with pytest.raises(VerificationError):
        run_sequential(gen_identity(), VerifyConfig(kmax=1, gap=2.0))


def test_stage_failure_keeps_partial_report():
    def on_model(K, model):
        if K == 2:
            raise ModelError('refused')

    with pytest.raises(VerificationError) as ei:
        run_sequential(gen_gradient(), _config(3, obbt_enabled=False), on_model=on_model)
    assert ei.value.stage == 'warm_start'
    assert [r.K for r in ei.value.report.records] == [1]


def test_obbt_model_matches_encoding_size(small_lasso):
    bounds = propagate_interval(small_lasso, 2, seed_bounds(small_lasso))
    model, varmap = encode_iterations(small_lasso, 2, bounds)
    vp, _ = encode_vp(small_lasso, 2, bounds)
    assert vp.num_vars > model.num_vars
    assert len(varmap.sites) > 0


@pytest.mark.parametrize('family', [
    gen_lasso(p=3, n=4, lam=0.1, seed=5, variant='fista', signals=20),
    gen_network_flow(n_s=2, n_d=1, edge_prob=1.0, seed=1, variant='pdhg'),
    gen_network_flow(n_s=2, n_d=1, edge_prob=1.0, seed=1, variant='pdhg_momentum'),
], ids=['fista', 'pdhg', 'pdhg_momentum'])
def test_momentum_and_primal_dual_families_dominate_sample_max(family):
    base = sample_max(family, 50, 3, seed=4, workers=1)
    report = run_sequential(family, _config(3, gap=0.05), baseline=base)
    assert [r.K for r in report.records] == [1, 2, 3]
    for r in report.records:
        assert r.delta >= r.sample_max - 1e-6
        assert r.best_bound >= r.delta - 1e-6


def test_obbt_tightens_preactivation_bounds_of_fista(rng):
    fam = gen_lasso(p=3, n=4, lam=0.1, seed=5, variant='fista', signals=20)
    off = propagate_interval(fam, 2, seed_bounds(fam))
    on = obbt_pass(fam, 2, off, _config(2, obbt_rounds=2))
    assert off.pre_lower
    for key in off.pre_lower:
        lo_off, hi_off = off.get_pre(*key)
        lo_on, hi_on = on.get_pre(*key)
        assert np.all(lo_on >= lo_off - 1e-12)
        assert np.all(hi_on <= hi_off + 1e-12)
    for k in (1, 2):
        for step in fam.algorithm.steps:
            assert np.all(on.width(k, step.output) <= off.width(k, step.output) + 1e-12)
    for x, s0 in zip(sample_params(fam, rng, 100), sample_init(fam, rng, 100)):
        assert contains(on, fam, simulate(fam, x, s0, 2)) == []


def test_zero_radius_is_used_as_given():
    fam = gen_identity(d=2)
    report = run_sequential(fam, _config(2, theory=TheoryParams('contractive', beta=0.5, R=0.0)))
    assert report.R is None
    assert report.deltas == pytest.approx([0.0, 0.0], abs=1e-6)
