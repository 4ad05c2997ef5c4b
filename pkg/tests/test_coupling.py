import numpy as np
import pytest

from rdsmix import ShapeError
from rdsmix.control import ControlShift
from rdsmix.coupling import (
    CouplingParams,
    LiftedState,
    LiftedSystem,
    coupling_step,
    iterate_coupling,
    kantorovich_estimate,
    lifted_cost,
    lifted_distance,
    maximal_coupling_conditional,
    pairs_at_distance,
    pushforward_tv,
    simulate_direct,
    simulate_lifted,
    tune_coupling,
    tv_distance_densities,
)
from rdsmix.metrics import two_sample_check
from rdsmix.noise import MovingAverageKernel, PastWindow, sample_kernel, stationary_past
from rdsmix.systems import LinearMap, ScalarNonlinearMap


def iid_tent():
    return MovingAverageKernel((), scales=1.0)


def shifted_tent_tv(s, n=200_001):
    # independent quadrature of 0.5 * int |p(x) - p(x - s)| for the tent on [-1, 1]
    x = np.linspace(-1 - abs(s), 1 + abs(s), n)
    return 0.5 * np.trapezoid(np.abs(np.maximum(0, 1 - np.abs(x)) - np.maximum(0, 1 - np.abs(x - s))), x)


def batch(kernel, v, n, past=None):
    past = kernel.default_past((n,)) if past is None else past
    return LiftedState(np.broadcast_to(np.asarray(v, dtype=float), (n, np.size(v))).copy(), past)


# ---------------------------------------------------------------------------
# distances and TV

def test_lifted_distance_examples(rng):
    k = iid_tent()
    U = batch(k, [0.3], 4)
    assert np.all(lifted_distance(U, U, 10.0) == 0.0)
    U2 = LiftedState(U.state + 0.1, U.past)
    np.testing.assert_allclose(lifted_distance(U, U2, 10.0), 1.0)
    e = U.past.entries.copy()
    e[:, -1, 0] += 0.25
    e[:, 0, 0] += 1.0
    U3 = LiftedState(U.state, PastWindow(e, k.base))
    np.testing.assert_allclose(lifted_distance(U, U3, 10.0), 0.25 + 2.0 ** -(k.length - 1))


def test_lifted_distance_triangle(rng):
    k = MovingAverageKernel((0.5,), scales=0.2)
    P = stationary_past(k, rng, (200,))
    pts = [LiftedState(rng.normal(size=(200, 2)), PastWindow(P.entries[rng.permutation(200)], k.base)) for _ in range(3)]
    a, b, c = pts
    assert np.all(lifted_distance(a, c, 3.0) <= lifted_distance(a, b, 3.0) + lifted_distance(b, c, 3.0) + 1e-12)


def test_tv_distance_examples():
    grid = np.linspace(-1, 3, 400_001)
    u0 = lambda x: ((x >= 0) & (x <= 1)).astype(float)
    assert tv_distance_densities(u0, lambda x: u0(x - 0.5), grid) == pytest.approx(0.5, abs=1e-4)
    assert tv_distance_densities(u0, lambda x: u0(x - 2.0), grid) == pytest.approx(1.0, abs=1e-4)
    assert tv_distance_densities(u0, u0, grid) == 0.0
    with pytest.raises(ShapeError):
        tv_distance_densities(np.ones((3, 3)), np.ones((3, 3)), np.zeros((3, 3)))


def test_maximal_coupling_meet_rate_and_marginal(rng):
    p = lambda x: ((x >= 0) & (x <= 1)).astype(float)
    q = lambda x: ((x >= 0.5) & (x <= 1.5)).astype(float)
    n = 20_000
    x = rng.uniform(0, 1, n)
    y, met = maximal_coupling_conditional(x, p, q, lambda r, k: r.uniform(0.5, 1.5, k), rng)
    se = np.sqrt(0.25 / n)
    assert abs(met.mean() - 0.5) < 3 * se
    np.testing.assert_array_equal(y[met], x[met])
    assert two_sample_check(y[:5000], rng.uniform(0.5, 1.5, 5000), n_boot=40, rng=rng).passed


# ---------------------------------------------------------------------------
# the coupling step

def test_identical_pairs_stay_identical(rng):
    k = MovingAverageKernel((0.5,), scales=0.2)
    m = ScalarNonlinearMap(0.5, beta=0.3)
    U = LiftedState(rng.normal(size=(50, 1)), stationary_past(k, rng, (50,)))
    params = CouplingParams(theta=0.1, L=4.0, delta_reg=1e-3)
    V, V2, st = coupling_step(U, U, m, k, params, rng)
    assert st.met.all() and st.close.all()
    np.testing.assert_array_equal(V.state, V2.state)
    np.testing.assert_array_equal(V.past.entries, V2.past.entries)
    _, _, stats = iterate_coupling(U, U, m, k, params, 10, rng)
    assert np.all(stats.distances == 0.0)


def test_linear_meet_rate_matches_translation_tv(rng):
    # for S(u, eta) = a u + eta the shifted law of the noise is a translate by a (v - v')
    a, gap, n = 0.5, 0.6, 20_000
    k = iid_tent()
    m = LinearMap([[a]])
    U = batch(k, [0.0], n)
    U2 = LiftedState(U.state + gap, U.past)
    params = CouplingParams(theta=1.0, L=1.0, delta_reg=1e-12)
    V, V2, st = coupling_step(U, U2, m, k, params, rng)
    expected = 1.0 - shifted_tent_tv(a * gap)
    assert abs(st.met.mean() - expected) < 3 * np.sqrt(expected * (1 - expected) / n)
    np.testing.assert_allclose(V.state[st.met], V2.state[st.met], atol=1e-12)
    np.testing.assert_allclose(st.noise2[st.met] - st.noise[st.met], -a * gap, atol=1e-9)
    # marginal fidelity: the second copy's noise is a draw from the kernel
    assert two_sample_check(st.noise2[:5000, 0], sample_kernel(k, U.past[:5000], rng)[:, 0], n_boot=40, rng=rng).passed


def test_far_pairs_use_independent_noise(rng):
    k = iid_tent()
    m = LinearMap([[0.5]])
    n = 20_000
    U = batch(k, [0.0], n)
    U2 = LiftedState(U.state + 5.0, U.past)
    _, _, st = coupling_step(U, U2, m, k, CouplingParams(theta=1.0, L=1.0, delta_reg=1e-3), rng)
    assert not st.close.any() and not st.met.any()
    assert abs(np.corrcoef(st.noise[:, 0], st.noise2[:, 0])[0, 1]) < 0.03


def test_met_pairs_decay_at_the_past_rate(rng):
    # after a meet the states agree and only the past differs; i.i.d. noise keeps meeting and the
    # single differing entry loses a factor base per step
    k = iid_tent()
    m = LinearMap([[0.5]])
    U = batch(k, [0.0], 500)
    U2 = LiftedState(U.state + 1e-3, U.past)
    _, _, stats = iterate_coupling(U, U2, m, k, CouplingParams(theta=1.0, L=1.0, delta_reg=1e-12), 6, rng)
    all_met = stats.met.all(axis=0)
    assert all_met.mean() > 0.99
    d = stats.distances[:, all_met]
    np.testing.assert_allclose(d[1], 0.5e-3, rtol=1e-6)
    np.testing.assert_allclose(d[2:] / d[1:-1], 0.5, rtol=1e-9)


def test_coupling_step_requires_batch():
    k = iid_tent()
    U = LiftedState(np.zeros(1), k.default_past())
    with pytest.raises(ShapeError):
        coupling_step(U, U, LinearMap([[0.5]]), k, CouplingParams(0.1, 1.0, 1e-3), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# Kantorovich estimate, pushforward TV, lift consistency

def test_kantorovich_estimate(rng):
    k = iid_tent()
    U = LiftedState(rng.normal(size=(30, 1)), k.default_past((30,)))
    cost = lifted_cost(2.0)
    assert kantorovich_estimate(cost, U, U) == 0.0
    perm = rng.permutation(30)
    U2 = LiftedState(U.state[perm], U.past)
    assert kantorovich_estimate(cost, U, U2) > 0.0
    assert kantorovich_estimate(cost, U, U2, rematch=True) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ShapeError):
        kantorovich_estimate(cost, U, U[:10])


@pytest.mark.parametrize("gap", [0.01, 0.05, 0.2])
def test_pushforward_tv_linear(gap):
    k = iid_tent()
    shift = ControlShift(LinearMap([[0.5]]), 1e-12)
    grid = np.linspace(-1.5, 1.5, 60_001)
    tv = pushforward_tv(shift, k, k.default_past((grid.size,)), [gap], [0.0], grid)
    assert tv == pytest.approx(shifted_tent_tv(0.5 * gap), abs=1e-4)


def test_pushforward_tv_slope_is_linear_for_small_gaps():
    k = iid_tent()
    shift = ControlShift(ScalarNonlinearMap(0.5, beta=0.3), 1e-3)
    grid = np.linspace(-1.5, 1.5, 30_001)
    past = k.default_past((grid.size,))
    gaps = np.array([1e-3, 2e-3, 4e-3])
    tvs = np.array([pushforward_tv(shift, k, past, [0.2 + g], [0.2], grid) for g in gaps])
    np.testing.assert_allclose(tvs[1:] / tvs[:-1], 2.0, rtol=0.02)


def test_lifted_and_direct_simulation_agree():
    k = MovingAverageKernel((0.5,), scales=0.2)
    m = ScalarNonlinearMap(0.5, beta=0.3)
    past = stationary_past(k, np.random.default_rng(1), (8,))
    v0 = np.linspace(-1, 1, 8)[:, None]
    a = simulate_lifted(LiftedSystem(m, k), LiftedState(v0, past), 20, np.random.default_rng(2))
    b = simulate_direct(m, k, v0, past, 20, np.random.default_rng(2))
    np.testing.assert_array_equal(a, b)


def test_pairs_at_distance(rng):
    k = iid_tent()
    U, U2 = pairs_at_distance(rng.normal(size=(100, 3)), k.default_past((100,)), 0.04, 8.0, rng)
    np.testing.assert_allclose(lifted_distance(U, U2, 8.0), 0.04)


def test_tune_coupling_linear_system(rng):
    k = iid_tent()
    m = LinearMap([[0.5]])
    n = 2000
    past = k.default_past((n,))
    states = rng.normal(size=(n, 1))
    rep = tune_coupling(m, k, states, past, sample_kernel(k, past, rng), rng, n_pairs=n)
    p = rep.params
    # the regularized inverse leaves a fraction delta / (1 + delta) of the linear part uncorrected
    assert rep.q_prime == pytest.approx(0.5 * p.delta_reg / (1 + p.delta_reg), rel=1e-6)
    assert rep.satisfied
    assert p.q == 0.5 and p.N * p.theta < 1 - p.q
