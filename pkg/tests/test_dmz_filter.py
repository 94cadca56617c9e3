import math

import numpy as np
import pytest

from qttdmz.baselines import run_ekf
from qttdmz.densities import ExpPolyadicDensity, isotropic_gaussian
from qttdmz.dmz import (
    DensityState,
    DmzFilter,
    assimilate,
    build_update_factor,
    estimate_moments,
    export_marginal,
    init_density,
    predict,
    rescale,
)
from qttdmz.errors import DegenerateStateError, DomainError, NumericalError
from qttdmz.models import cubic_sensor_preset, linear_preset, multimode_preset, simulate
from qttdmz.operators import SolverParams, assemble_generator, build_propagator, choose_substeps
from qttdmz.polyadic import Grid, PolyadicFunction
from qttdmz.qtt import qtt_from_dense, qtt_identity, qtt_to_dense
from qttdmz.reference import dense_filter, dense_generator, dense_propagator, dense_update_factor
from qttdmz.tt import TruncationPolicy, tt_norm, tt_ones, tt_zeros

TIGHT = TruncationPolicy(1e-13)


def dense_of(state, grid):
    return qtt_to_dense(state.u, [grid.levels] * grid.d)


def state_from(values, grid, policy=TIGHT):
    return DensityState(qtt_from_dense(np.asarray(values, dtype=float), policy))


# --- initial density -------------------------------------------------------------


def test_separable_gaussian_has_unit_ranks():
    g = Grid.cube(3, -3.0, 3.0, 16)
    st = init_density(isotropic_gaussian(3, 0.5), g, TruncationPolicy(1e-10))
    # separable: the bonds between axes carry rank 1
    assert [st.u.ranks[4 * a] for a in range(4)] == [1, 1, 1, 1]


@pytest.mark.parametrize("d", [1, 2, 3])
def test_quartic_initial_density_accuracy(d):
    m = cubic_sensor_preset(d)
    g = Grid(m.lower, m.upper, 16)
    eps = 1e-8
    st = init_density(m.sigma0, g, TruncationPolicy(eps))
    ref = m.sigma0(np.stack(g.meshgrid(), axis=-1))
    assert np.linalg.norm(dense_of(st, g) - ref) <= eps * np.linalg.norm(ref)


def test_zero_initial_density_is_degenerate():
    g = Grid.cube(2, -1.0, 1.0, 4)
    st = init_density(lambda x: np.zeros(x.shape[:-1]), g, TIGHT)
    assert st.degenerate
    assert tt_norm(st.u) == 0.0


def test_negative_initial_density_rejected():
    g = Grid.cube(1, -1.0, 1.0, 8)
    with pytest.raises(DomainError):
        init_density(lambda x: x[..., 0], g, TIGHT)


# --- predict -----------------------------------------------------------------------


def test_predict_zero_density():
    g = Grid.cube(1, -1.0, 1.0, 8)
    prop = qtt_identity([3])
    out = predict(DensityState(tt_zeros((2, 2, 2))), prop, TIGHT)
    assert not dense_of(out, g).any()


def test_predict_identity_keeps_state(rng):
    g = Grid.cube(2, -1.0, 1.0, 8)
    vals = rng.random((8, 8))
    out = predict(state_from(vals, g), qtt_identity([3, 3]), TIGHT, dt=0.1)
    np.testing.assert_allclose(dense_of(out, g), vals, atol=1e-12)
    assert out.t == pytest.approx(0.1)


def test_predict_heat_equation_matches_dense():
    g = Grid.cube(1, -4.0, 4.0, 32)
    z = PolyadicFunction.zero(1)
    p = SolverParams(0.01, 100, q=1.0, s=1.0, eps1=1e-13, eps2=1e-13)
    prop = build_propagator(assemble_generator(g, z, z, p), p)
    u0 = np.exp(-g.nodes(0) ** 2)
    out = dense_of(predict(state_from(u0, g), prop, TIGHT), g)
    ref = dense_propagator(dense_generator(g, z, z, 1.0, 1.0), p.tau, 100) @ u0
    assert np.abs(out - ref).max() <= 1e-10 * np.abs(ref).max()


# --- update factor --------------------------------------------------------------------


def test_zero_increment_gives_ones():
    m = multimode_preset()
    g = Grid(m.lower, m.upper, 8)
    out = qtt_to_dense(build_update_factor(m.h, np.zeros(3), m.s, g, TIGHT), [3] * 3)
    np.testing.assert_array_equal(out, np.ones((8, 8, 8)))


def test_linear_observation_factor():
    g = Grid.cube(1, -2.0, 2.0, 16)
    h = PolyadicFunction.univariate(1, [[(0, lambda x: x)]])
    out = qtt_to_dense(build_update_factor(h, [0.2], 2.0, g, TIGHT), [4])
    np.testing.assert_allclose(out, np.exp(0.1 * g.nodes(0)), rtol=1e-13)


@pytest.mark.parametrize("fused", [True, False])
def test_multimode_factor_matches_pointwise(rng, fused):
    m = multimode_preset()
    g = Grid(m.lower, m.upper, 16)
    dy = 0.3 * rng.standard_normal(3)
    out = qtt_to_dense(build_update_factor(m.h, dy, m.s, g, TruncationPolicy(1e-13), fused=fused), [4] * 3)
    ref = dense_update_factor(g, m.h, dy, m.s)
    assert np.linalg.norm(out - ref) <= 1e-10 * np.linalg.norm(ref)


def test_factor_overflow_reports_node():
    m = cubic_sensor_preset(2)
    g = Grid(m.lower, m.upper, 8)
    with pytest.raises(NumericalError, match="node"):
        build_update_factor(m.h, [1e4, 1e4], m.s, g, TIGHT)


def test_factor_increment_length_checked():
    m = cubic_sensor_preset(2)
    g = Grid(m.lower, m.upper, 8)
    with pytest.raises(DomainError):
        build_update_factor(m.h, [1.0], m.s, g, TIGHT)


# --- assimilate and rescale ------------------------------------------------------------


def test_assimilate_with_ones(rng):
    g = Grid.cube(2, -1.0, 1.0, 8)
    vals = rng.random((8, 8))
    out = assimilate(state_from(vals, g), tt_ones((2,) * 6), TIGHT)
    np.testing.assert_allclose(dense_of(out, g), vals, atol=1e-13)
    assert out.j == 1


def test_assimilate_zero_density():
    g = Grid.cube(1, -1.0, 1.0, 8)
    out = assimilate(DensityState(tt_zeros((2,) * 3)), tt_ones((2,) * 3), TIGHT)
    assert not dense_of(out, g).any()


def test_assimilate_matches_pointwise_product(rng):
    g = Grid.cube(2, -1.0, 1.0, 8)
    a, b = rng.random((8, 8)), rng.random((8, 8))
    out = dense_of(assimilate(state_from(a, g), qtt_from_dense(b), TIGHT), g)
    assert np.abs(out - a * b).max() <= 1e-11 * np.abs(a * b).max()


def test_rescale_properties(rng):
    g = Grid.cube(2, -1.0, 1.0, 8)
    vals = 5 * rng.random((8, 8))
    st = state_from(vals, g)
    once = rescale(st)
    assert tt_norm(once.u) == pytest.approx(1.0, abs=1e-14)
    assert once.scale_log == pytest.approx(math.log(np.linalg.norm(vals)), abs=1e-13)
    twice = rescale(once)
    np.testing.assert_allclose(dense_of(twice, g), dense_of(once, g), atol=1e-15)
    assert twice.scale_log == pytest.approx(once.scale_log, abs=1e-14)


def test_rescale_zero_raises():
    with pytest.raises(DegenerateStateError):
        rescale(DensityState(tt_zeros((2, 2))))


# --- statistics ------------------------------------------------------------------------


def test_symmetric_density_has_zero_mean():
    g = Grid.cube(3, -2.0, 2.0, 8)
    st = init_density(isotropic_gaussian(3, 0.7), g, TIGHT)
    np.testing.assert_allclose(estimate_moments(st, g), 0.0, atol=1e-14)


def test_concentrated_density_mean():
    g = Grid.cube(2, -2.0, 2.0, 16)
    vals = np.full((16, 16), 1e-12)
    vals[3, 11] = 1.0
    mean = estimate_moments(state_from(vals, g), g)
    assert abs(mean[0] - g.nodes(0)[3]) < g.spacing[0]
    assert abs(mean[1] - g.nodes(1)[11]) < g.spacing[1]


def test_moments_match_weighted_average(rng):
    g = Grid.cube(2, -1.0, 3.0, 16)
    vals = rng.random((16, 16))
    mean, second = estimate_moments(state_from(vals, g), g, second=True)
    X, Y = g.meshgrid()
    ref = np.array([(vals * X).sum(), (vals * Y).sum()]) / vals.sum()
    ref2 = np.array([(vals * X**2).sum(), (vals * Y**2).sum()]) / vals.sum()
    assert np.abs(mean - ref).max() <= 1e-11 * np.abs(ref).max()
    assert np.abs(second - ref2).max() <= 1e-11 * np.abs(ref2).max()


def test_moments_need_positive_mass():
    g = Grid.cube(1, -1.0, 1.0, 4)
    with pytest.raises(DegenerateStateError):
        estimate_moments(DensityState(tt_zeros((2, 2))), g)


def test_separable_marginal_is_factor():
    g = Grid.cube(2, -3.0, 3.0, 16)
    st = init_density(isotropic_gaussian(2, 0.5), g, TIGHT)
    marg = export_marginal(st, g, 0)
    x = g.nodes(0)
    fac = np.exp(-(x**2))
    np.testing.assert_allclose(marg, fac / (fac.sum() * g.spacing[0]), rtol=1e-12)


def test_marginal_consistency_and_oracle(rng):
    g = Grid.cube(3, -1.0, 1.0, 8)
    vals = rng.random((8, 8, 8))
    st = state_from(vals, g)
    m2 = export_marginal(st, g, (0, 2))
    m1 = export_marginal(st, g, 0)
    np.testing.assert_allclose(m2.sum(axis=1) * g.spacing[2], m1, atol=1e-12)
    ref = vals.sum(axis=(0, 1))
    ref = ref / (ref.sum() * g.spacing[2])
    out = export_marginal(st, g, 2)
    assert np.abs(out - ref).max() <= 1e-11 * np.abs(ref).max()
    assert out.sum() * g.spacing[2] == pytest.approx(1.0)


def test_marginal_axes_validated():
    g = Grid.cube(2, -1.0, 1.0, 4)
    st = init_density(isotropic_gaussian(2, 0.5), g, TIGHT)
    with pytest.raises(DomainError):
        export_marginal(st, g, (0, 0))
    with pytest.raises(DomainError):
        export_marginal(st, g, 5)


# --- filter runs ---------------------------------------------------------------------------


def _filter_setup(model, n, eps=1e-10, dt=0.01):
    g = Grid(model.lower, model.upper, n)
    from qttdmz.operators import max_potential

    nsub = choose_substeps(g, model.q, dt, max_potential(g, model.h, model.s))
    p = SolverParams(dt, nsub, model.q, model.s, eps, eps)
    prop = build_propagator(assemble_generator(g, model.f, model.h, p), p)
    return g, p, DmzFilter(g, model.h, model.s, prop, dt, p.policy1())


def test_filter_matches_dense_reference():
    m = multimode_preset()
    g, p, filt = _filter_setup(m, 16, 1e-10)
    traj = simulate(m, 0.2, 0.01, seed=3)
    states = []
    run = filt.run(m.sigma0, traj.dy, callback=lambda st: states.append(st))
    sigma = m.sigma0(np.stack(g.meshgrid(), axis=-1))
    ref = dense_filter(g, m.f, m.h, m.q, m.s, sigma, traj.dy[1:], 0.01, p.n_substeps)
    last = states[-1]
    approx = math.exp(last.scale_log) * dense_of(last, g)
    assert np.linalg.norm(approx - ref[-1]) <= 1e-6 * np.linalg.norm(ref[0])
    X = g.meshgrid()
    mean_ref = [(ref[-1] * X[i]).sum() / ref[-1].sum() for i in range(3)]
    np.testing.assert_allclose(run.estimates[-1], mean_ref, atol=1e-8)


def test_multimode_density_stays_mirror_symmetric():
    m = multimode_preset()
    g, p, filt = _filter_setup(m, 16, 1e-8)
    traj = simulate(m, 0.3, 0.01, seed=11)
    worst = []

    def check(st):
        u = dense_of(st, g)
        worst.append(np.linalg.norm(u - u[::-1, ::-1, ::-1]) / np.linalg.norm(u))

    filt.run(m.sigma0, traj.dy, callback=check)
    assert max(worst) <= 10 * 1e-8


def test_positivity_tendency():
    m = multimode_preset()
    g, p, filt = _filter_setup(m, 16, 1e-8)
    traj = simulate(m, 0.3, 0.01, seed=5)
    lows = []
    filt.run(m.sigma0, traj.dy, callback=lambda st: lows.append(dense_of(st, g).min() / np.abs(dense_of(st, g)).max()))
    assert min(lows) >= -10 * 1e-8


def test_filter_run_is_deterministic():
    m = cubic_sensor_preset(2)
    g, p, filt = _filter_setup(m, 16, 1e-8)
    traj = simulate(m, 0.1, 0.01, seed=2)
    a = filt.run(m.sigma0, traj.dy)
    b = filt.run(m.sigma0, traj.dy)
    assert np.array_equal(a.estimates, b.estimates)
    assert a.estimates.shape == (11, 2)
    np.testing.assert_allclose(a.times, traj.times)


def test_potential_weight_one_tracks_kalman():
    # linear-Gaussian model: the exact posterior mean is the Kalman-Bucy mean
    model = linear_preset([[-0.5]], [[1.0]], q=1.0, s=0.5, prior_var=0.5, bound=6.0)
    g = Grid(model.lower, model.upper, 128)
    traj = simulate(model, 2.0, 0.01, seed=4)
    sigma = model.sigma0(g.points()).reshape(g.shape)
    kalman = run_ekf(model, traj).estimates[1:, 0]
    gaps = {}
    for w in (1.0, 0.5):
        states = dense_filter(g, model.f, model.h, model.q, model.s, sigma, traj.dy[1:], 0.01, 20, potential_weight=w)
        means = np.array([(u * g.nodes(0)).sum() / u.sum() for u in states[1:]])
        gaps[w] = np.abs(means - kalman).max()
    assert gaps[1.0] < 0.05
    assert gaps[1.0] < gaps[0.5]
