import numpy as np
import pytest

from bound_engine import propagate_interval, seed_bounds
from encoder import (EncodingError, VarMap, bigM_constants, encode_affine, encode_iterations, encode_objective,
                     encode_pwa, encode_radius, encode_vp, trajectory_assignment)
from generators import gen_gradient, gen_identity, ista_family
from milp_core import MilpModel, SolveOptions, SolveStatus, solve
from model_ir import (AffineExplicit, InitSet, ParamSet, ProblemFamily, prox_kkt_step, relu_step, residual_inf,
                      sample_init, sample_params, satlin_step, shrinkage_step, simulate, soft_threshold_step, state)

EXACT = SolveOptions(gap=0.0)


def _vector(model, lo, hi, name):
    return [model.add_var(l, h, name='%s[%d]' % (name, i)) for i, (l, h) in enumerate(zip(lo, hi))]


def _fix(model, vars_, values):
    for v, val in zip(vars_, values):
        model.add_constr(model.expr(v), '=', float(val))


def _range(model, v):
    """(min, max) of variable v over the model's feasible set."""
    out = []
    for sense in ('min', 'max'):
        m = model.clone()
        m.set_objective(m.expr(v), sense)
        res = solve(m, EXACT)
        assert res.status == SolveStatus.OPTIMAL
        out.append(res.objective)
    return tuple(out)


def _objective_model(prev_box, cur_box, cur_value=None):
    model = MilpModel('obj')
    d = len(cur_box[0])
    prev = _vector(model, *prev_box, name='p')
    cur = _vector(model, *cur_box, name='c')
    if cur_value is not None:
        _fix(model, cur, cur_value)
    varmap = VarMap()
    encode_objective(model, varmap, prev, cur, prev_box, cur_box)
    assert len(varmap.gamma) == d
    return model


def test_objective_single_component():
    model = _objective_model(([0.0], [0.0]), ([-1.0], [1.0]), cur_value=[0.7])
    assert solve(model, EXACT).objective == pytest.approx(0.7, abs=1e-5)


def test_objective_picks_the_largest_magnitude():
    model = _objective_model(([0.0, 0.0], [0.0, 0.0]), ([-5.0, -5.0], [5.0, 5.0]), cur_value=[1.0, -3.0])
    assert solve(model, EXACT).objective == pytest.approx(3.0, abs=1e-5)


def test_objective_over_a_free_box():
    model = _objective_model((np.zeros(3), np.zeros(3)), (np.full(3, -1.0), np.full(3, 2.0)))
    assert solve(model, EXACT).objective == pytest.approx(2.0, abs=1e-5)


def test_objective_rejects_crossing_bounds():
    model = MilpModel()
    p = _vector(model, [0.0], [0.0], 'p')
    c = _vector(model, [0.0], [1.0], 'c')
    with pytest.raises(EncodingError):
        encode_objective(model, VarMap(), p, c, ([0.0], [0.0]), ([2.0], [1.0]))


def test_bigM_constants():
    assert bigM_constants([1.0, -2.0], [0.0, -1.0], [1.0, 0.0]) == pytest.approx((0.0, 3.0))
    assert bigM_constants([0.0, 0.0], [-4.0, -1.0], [1.0, 3.0]) == (0.0, 0.0)


def test_bigM_constants_match_lp(rng):
    a = rng.normal(size=4)
    lo = rng.uniform(-2, 0, size=4)
    hi = lo + rng.uniform(0, 3, size=4)
    model = MilpModel()
    y = _vector(model, lo, hi, 'y')
    t = model.add_var(-100.0, 100.0, name='t')
    model.add_constr(model.expr(t) - model.dot(a, y), '=', 0.0)
    assert _range(model, t) == pytest.approx(bigM_constants(a, lo, hi), abs=1e-5)


def _pwa_model(step, ylo, yhi, yfix, hull_base=True):
    model = MilpModel('pwa')
    y = _vector(model, ylo, yhi, 'y')
    w = _vector(model, np.full(step.output_dim, -50.0), np.full(step.output_dim, 50.0), 'w')
    _fix(model, y, yfix)
    varmap = VarMap()
    encode_pwa(model, varmap, step, y, w, ylo, yhi, hull_base=hull_base)
    return model, w, varmap


def test_soft_threshold_degenerate_row_is_an_equality():
    step = soft_threshold_step([[1.0]], 0.5, inputs=(state('s'),))
    model, w, varmap = _pwa_model(step, [1.0], [2.0], [1.2])
    assert not varmap.omega and not varmap.zeta
    assert _range(model, w[0]) == pytest.approx((0.7, 0.7), abs=1e-5)


@pytest.mark.parametrize('hull_base', [True, False])
@pytest.mark.parametrize('y', [-1.0, -0.3, 0.0, 0.7, 2.0])
def test_relu_row_is_exact(y, hull_base):
    step = relu_step([[1.0]], inputs=(state('s'),))
    model, w, _ = _pwa_model(step, [-1.0], [2.0], [y], hull_base=hull_base)
    assert _range(model, w[0]) == pytest.approx((max(y, 0.0), max(y, 0.0)), abs=1e-5)


def test_satlin_saturates():
    step = satlin_step([[1.0]], 0.0, 1.0, inputs=(state('s'),))
    model, w, varmap = _pwa_model(step, [-2.0], [3.0], [2.0])
    assert (1, 's', 0) in varmap.omega and (1, 's', 0) in varmap.zeta
    assert _range(model, w[0]) == pytest.approx((1.0, 1.0), abs=1e-5)


def test_soft_threshold_prunes_one_binary():
    # argument range [-0.2, 2] never reaches -lambda
    step = soft_threshold_step([[1.0]], 0.5, inputs=(state('s'),))
    _, _, varmap = _pwa_model(step, [-0.2], [2.0], [0.0])
    assert (1, 's', 0) in varmap.omega
    assert (1, 's', 0) not in varmap.zeta


@pytest.mark.parametrize('make', [
    lambda A: soft_threshold_step(A, 0.3, inputs=(state('s'),)),
    lambda A: relu_step(A, inputs=(state('s'),), offset=np.array([0.1, -0.2])),
    lambda A: satlin_step(A, np.array([-0.5, 0.0]), np.array([0.5, 0.3]), inputs=(state('s'),)),
])
def test_pwa_rows_reproduce_the_simulator(make, rng):
    A = rng.normal(size=(2, 3))
    step = make(A)
    lo, hi = -np.ones(3), np.ones(3)
    for _ in range(5):
        y = rng.uniform(lo, hi)
        expected = step.kind.apply(A @ y + step.offset_vec())
        model, w, _ = _pwa_model(step, lo, hi, y)
        for i, v in enumerate(w):
            assert _range(model, v) == pytest.approx((expected[i], expected[i]), abs=1e-5)


def test_shrinkage_halves_the_input():
    step = shrinkage_step(2, 1.0)
    model = MilpModel()
    v = _vector(model, [-4.0, -4.0], [4.0, 4.0], 'v')
    w = _vector(model, [-4.0, -4.0], [4.0, 4.0], 'w')
    _fix(model, v, [3.0, -1.0])
    encode_affine(model, step, v, w)
    assert _range(model, w[0]) == pytest.approx((1.5, 1.5), abs=1e-6)
    assert _range(model, w[1]) == pytest.approx((-0.5, -0.5), abs=1e-6)


def test_prox_kkt_step_matches_dense_solve():
    P = np.array([[2.0, 0.3], [0.3, 1.0]])
    A = np.array([[1.0, 1.0]])
    b = np.array([0.5])
    lam = 0.8
    step = prox_kkt_step(P, A, b, lam)
    v, x = np.array([0.4, -0.2]), np.array([0.1, 0.3])
    M = np.block([[P + np.eye(2) / lam, A.T], [A, np.zeros((1, 1))]])
    expected = np.linalg.solve(M, np.concatenate([v / lam - x, b]))

    model = MilpModel()
    y = _vector(model, -np.ones(4), np.ones(4), 'y')
    out = _vector(model, np.full(3, -10.0), np.full(3, 10.0), 'w')
    _fix(model, y, np.concatenate([v, x]))
    encode_affine(model, step, y, out)
    for i in range(3):
        lo, hi = _range(model, out[i])
        assert lo == pytest.approx(expected[i], abs=1e-5)
        assert hi == pytest.approx(expected[i], abs=1e-5)


def test_affine_dimension_mismatch():
    model = MilpModel()
    y = _vector(model, [0.0], [1.0], 'y')
    step = AffineExplicit(output='s', inputs=(state('s'),), Btilde=np.eye(2))
    with pytest.raises(EncodingError):
        encode_affine(model, step, y, y)


def _vp(family, K):
    bounds = propagate_interval(family, K, seed_bounds(family))
    model, varmap = encode_vp(family, K, bounds)
    return model, varmap, solve(model, EXACT)


def test_vp_identity_is_zero():
    _, _, res = _vp(gen_identity(d=2, s0=np.array([0.3, -0.1])), 1)
    assert res.objective == pytest.approx(0.0, abs=1e-6)


def test_vp_gradient_first_step():
    model, varmap, res = _vp(gen_gradient(P=1.0, eta=0.5), 1)
    assert res.objective == pytest.approx(0.5, abs=1e-5)
    assert model.var_name(varmap.delta) == 'delta'
    assert model.var_name(varmap.x[0]) == 'x[0]'
    assert model.var_name(varmap.vars_of(1, 's')[0]) == 's[1][s][0]'


def test_vp_collapsed_family_matches_simulation(rng):
    D = rng.normal(size=(3, 4)) / np.sqrt(3)
    x = rng.normal(size=3)
    s0 = rng.normal(size=4)
    eta = 1.0 / np.linalg.norm(D, 2) ** 2
    fam = ista_family(D, 0.1, eta, x, x, s0)
    traj = simulate(fam, x, s0, 4)
    for K in range(1, 5):
        _, _, res = _vp(fam, K)
        assert res.objective == pytest.approx(residual_inf(traj, K), abs=1e-5)


def test_trajectory_assignment_is_feasible(small_lasso, small_flow, rng):
    from generators import fista_family
    fista = fista_family(small_lasso.data['D'], 0.1, small_lasso.data['eta'], small_lasso.params.lower,
                         small_lasso.params.upper, small_lasso.init.lower, horizon=10)
    for fam, K in ((small_lasso, 3), (fista, 3), (small_flow, 2)):
        bounds = propagate_interval(fam, K, seed_bounds(fam))
        model, varmap = encode_vp(fam, K, bounds)
        x = sample_params(fam, rng, 1)[0]
        s0 = sample_init(fam, rng, 1)[0]
        assignment = trajectory_assignment(fam, varmap, simulate(fam, x, s0, K))
        assert len(assignment) == model.num_vars
        vec = np.array([assignment[v] for v in range(model.num_vars)])
        assert model.check_assignment(vec, tol=1e-6) == []


def test_iterations_need_positive_K():
    fam = gen_identity()
    with pytest.raises(EncodingError):
        encode_iterations(fam, 0, seed_bounds(fam))


def test_radius_identity_box_corner():
    fam = gen_identity(d=2, s0=np.zeros(2))
    model, _ = encode_radius(fam, radius_box=1.0)
    assert solve(model, EXACT).objective == pytest.approx(2.0, abs=1e-5)


def test_radius_gradient():
    model, varmap = encode_radius(gen_gradient(P=1.0, eta=0.5))
    assert solve(model, EXACT).objective == pytest.approx(1.0, abs=1e-5)
    assert model.var_name(varmap.vars_of(1, 's')[0]) == 'fp[s][0]'


def test_radius_ista_matches_per_signal_fixed_points():
    D = np.array([[1.0, 0.2], [0.1, 0.8]])
    lam, eta = 0.1, 0.5
    fam = ista_family(D, lam, eta, [-1.0, -1.0], [1.0, 1.0], np.zeros(2))
    model, _ = encode_radius(fam, radius_box=10.0)
    R = solve(model, EXACT).objective

    grid = np.linspace(-1.0, 1.0, 41)
    X = np.array([(a, b) for a in grid for b in grid])
    G = np.eye(2) - eta * D.T @ D
    Z = np.zeros_like(X)
    for _ in range(300):
        Z = fam.algorithm.steps[0].kind.apply(Z @ G.T + eta * X @ D)
    brute = np.abs(Z).sum(axis=1).max()
    # z*(x) is Lipschitz in x, which bounds what the grid can miss
    sv = np.linalg.svd(D, compute_uv=False)
    slack = np.sqrt(2.0) * sv[0] / sv[-1] ** 2 * (0.025 * np.sqrt(2.0))
    assert brute - 1e-5 <= R <= brute + slack
