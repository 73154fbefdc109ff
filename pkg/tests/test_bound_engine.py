import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bound_engine import (BoundError, CrossingBoundsError, IterBounds, MissingSeedError, Provenance, TheoryParams,
                          alpha_sequence, combine, contains, postprocess_delta, propagate_interval,
                          refine_iteration, seed_bounds, theory_bounds, theory_table)
from generators import gen_gradient, gen_identity
from model_ir import sample_init, sample_params, simulate


def test_gradient_interval_bounds_are_exact():
    fam = gen_gradient(P=1.0, eta=0.5)
    b = propagate_interval(fam, 2, seed_bounds(fam))
    lo, hi = b.get(1, 's')
    assert lo[0] == pytest.approx(-0.5) and hi[0] == pytest.approx(0.5)
    lo, hi = b.get(2, 's')
    assert lo[0] == pytest.approx(-0.75) and hi[0] == pytest.approx(0.75)
    assert list(b.provenance[(2, 's')]) == ['interval']


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_interval_bounds_contain_sampled_trajectories(seed):
    from generators import gen_lasso
    fam = gen_lasso(p=3, n=4, lam=0.1, seed=3, signals=20, variant='fista', horizon=10)
    b = propagate_interval(fam, 4, seed_bounds(fam))
    rng = np.random.default_rng(seed)
    for x, s0 in zip(sample_params(fam, rng, 5), sample_init(fam, rng, 5)):
        assert contains(b, fam, simulate(fam, x, s0, 4)) == []


def test_flow_bounds_contain_sampled_trajectories(small_flow, rng):
    b = propagate_interval(small_flow, 2, seed_bounds(small_flow))
    for x, s0 in zip(sample_params(small_flow, rng, 5), sample_init(small_flow, rng, 5)):
        assert contains(b, small_flow, simulate(small_flow, x, s0, 2)) == []
    assert b.get_pre(1, 'wi')[0] is not None


def test_propagation_keeps_existing_iterations():
    fam = gen_gradient()
    b = propagate_interval(fam, 1, seed_bounds(fam))
    b.tighten(1, 's', [-0.1], [0.1], Provenance.OBBT)
    b2 = propagate_interval(fam, 2, b)
    assert b2.get(1, 's')[1][0] == pytest.approx(0.1)
    # s^2 = 0.5 s^1 - 0.5 x with |s^1| <= 0.1
    assert b2.get(2, 's')[1][0] == pytest.approx(0.55)


def test_missing_seed_raises():
    fam = gen_identity()
    with pytest.raises(MissingSeedError):
        propagate_interval(fam, 1, IterBounds(fam.params.lower, fam.params.upper))


def test_tighten_never_loosens_and_detects_crossing():
    b = IterBounds(np.zeros(1), np.ones(1))
    b.set(0, 's', [0.0, 0.0], [1.0, 1.0], Provenance.INIT)
    gain = b.tighten(0, 's', [-5.0, 0.5], [5.0, 0.75], Provenance.OBBT)
    assert gain == pytest.approx(0.75)
    lo, hi = b.get(0, 's')
    assert list(lo) == [0.0, 0.5] and list(hi) == [1.0, 0.75]
    assert list(b.provenance[(0, 's')]) == ['init', 'obbt']
    with pytest.raises(CrossingBoundsError) as ei:
        b.tighten(0, 's', [2.0, 0.0], [3.0, 1.0], Provenance.OBBT)
    assert ei.value.index == 0


def test_refine_iteration_uses_tightened_inputs():
    fam = gen_gradient()
    b = propagate_interval(fam, 2, seed_bounds(fam))
    b.tighten(1, 's', [0.0], [0.0], Provenance.OBBT)
    b = refine_iteration(fam, b, 2)
    lo, hi = b.get(2, 's')
    assert lo[0] == pytest.approx(-0.5) and hi[0] == pytest.approx(0.5)


def test_alpha_sequences():
    assert alpha_sequence(TheoryParams('contractive', beta=0.5, R=2.0), 3) == pytest.approx([4.0, 2.0, 1.0])
    assert alpha_sequence(TheoryParams('averaged', D_c=1.0, q_exp=0.5, R=1.0), 4) == pytest.approx(
        [1.0, 1 / np.sqrt(2), 1 / np.sqrt(3), 0.5])
    with pytest.raises(BoundError):
        alpha_sequence(TheoryParams('user_sequence', alphas=(1.0,)), 2)
    assert TheoryParams('contractive', beta=1.5).validate()
    assert TheoryParams('user_sequence', alphas=(1.0, 2.0)).validate()


def test_radius_must_be_set_for_rate_based_sequences():
    with pytest.raises(BoundError):
        alpha_sequence(TheoryParams('contractive', beta=0.5), 2)
    assert TheoryParams('contractive', beta=0.5).R is None
    # R = 0 is a valid radius, not a request to compute one
    assert alpha_sequence(TheoryParams('contractive', beta=0.5, R=0.0), 2) == [0.0, 0.0]
    assert alpha_sequence(TheoryParams('user_sequence', alphas=(2.0, 1.0)), 2) == [2.0, 1.0]


def test_combine_counts_theory_wins():
    fam = gen_identity(d=2)
    ip = propagate_interval(fam, 1, seed_bounds(fam))
    ot = theory_table(fam, ip, 1, 0.5)
    table, frac = combine(ip, ot)
    # identity bounds at k = 1 are already [-1, 1]; theory gives [-1.5, 1.5]
    assert frac == 0.0
    assert np.allclose(table.get(1, 's')[1], 1.0)

    ip2 = ip.copy()
    ip2.set(1, 's', [-3.0, -3.0], [3.0, 1.0], Provenance.INTERVAL)
    table, frac = combine(ip2, theory_table(fam, ip2, 1, 0.5))
    assert frac == pytest.approx(1.0)
    assert np.allclose(table.get(1, 's')[0], [-1.5, -1.5])
    assert list(table.provenance[(1, 's')]) == ['theory', 'theory']


def test_combine_raises_on_invalid_theory():
    fam = gen_identity(d=1)
    ip = propagate_interval(fam, 1, seed_bounds(fam))
    ot = IterBounds(ip.x_lower, ip.x_upper)
    ot.set(1, 's', [5.0], [6.0], Provenance.THEORY)
    with pytest.raises(CrossingBoundsError):
        combine(ip, ot)


def test_postprocess_delta_tightens_residual_slot():
    fam = gen_gradient()
    b = propagate_interval(fam, 3, seed_bounds(fam))
    out = postprocess_delta(fam, b, [0.5, 0.25, 0.125])
    assert out.get(1, 's')[1][0] == pytest.approx(0.5)
    assert out.get(2, 's')[1][0] == pytest.approx(0.75)
    assert out.get(3, 's')[1][0] == pytest.approx(0.875)
    assert out.get(3, 's')[0][0] == pytest.approx(-0.875)
    assert out.to_dict()['iterations']['3']['s']['upper'] == [pytest.approx(0.875)]


def test_theory_bounds_widen_previous_iterate():
    lo, hi = theory_bounds(np.array([-1.0]), np.array([1.0]), 0.5)
    assert lo.tolist() == [-1.5] and hi.tolist() == [1.5]
    lo, hi = theory_bounds(np.array([-1.0, 0.0]), np.array([1.0, 2.0]), 0.0)
    assert lo.tolist() == [-1.0, 0.0] and hi.tolist() == [1.0, 2.0]
