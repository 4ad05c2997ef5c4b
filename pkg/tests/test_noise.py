import numpy as np
import pytest
from scipy.linalg import toeplitz

from rdsmix import DomainError, ParameterError, ShapeError
from rdsmix.metrics import fit_exponential_decay, two_sample_check
from rdsmix.noise import (
    AR1TentKernel,
    MarkovKernel,
    MovingAverageKernel,
    PastWindow,
    PeriodicBasisKernel,
    TanhWeight,
    append_past,
    box_kernel,
    compose_conditional,
    density_normalization,
    kernel_convergence_curve,
    ma_filter,
    noise_lift_step,
    past_distance,
    recurrence_probability,
    sample_kernel,
    stationary_past,
    tent_pdf,
    truncation_length,
)


def symmetric_bump(prev, y):
    # 1-D density on [-1, 1] proportional to 1 - y^2, independent of the past
    return np.prod(0.75 * (1.0 - y**2), axis=-1) * np.ones(np.shape(prev)[:-1])


def window(values, base=2.0):
    return PastWindow(np.asarray(values, dtype=float)[:, None], base)


# ---------------------------------------------------------------------------
# pasts

def test_truncation_length_bounds_tail():
    L = truncation_length(4.0, 2.0, 1e-9)
    assert 2.0 ** (-L) * 4.0 < 1e-9 <= 2.0 ** (-(L - 1)) * 4.0


def test_past_distance_examples():
    a = window([0.0, 0.0, 0.0])
    assert past_distance(a, a) == 0.0
    assert past_distance(a, window([0.0, 0.0, 0.5])) == pytest.approx(0.5)
    assert past_distance(a, window([0.0, 1.0, 0.25])) == pytest.approx(0.75)


def test_past_distance_is_a_metric(rng):
    x, y, z = (PastWindow(rng.normal(size=(1000, 6, 2))) for _ in range(3))
    np.testing.assert_array_equal(past_distance(x, y), past_distance(y, x))
    assert np.all(past_distance(x, z) <= past_distance(x, y) + past_distance(y, z) + 1e-12)
    assert np.all(past_distance(x, x) == 0)


def test_past_distance_shape_mismatch():
    with pytest.raises(ShapeError):
        past_distance(window([0, 0]), window([0, 0, 0]))


def test_append_past_shifts_window():
    w = window([1.0, 2.0])
    out = append_past(w, [3.0])
    np.testing.assert_array_equal(out.entries[:, 0], [2.0, 3.0])
    zero = window([0.0, 0.0, 0.0])
    np.testing.assert_array_equal(append_past(zero, [0.0]).entries, zero.entries)


def test_append_past_rejects_outside_support():
    with pytest.raises(DomainError):
        append_past(window([0.0, 0.0]), [2.0], support=(np.array([-1.0]), np.array([1.0])))


# ---------------------------------------------------------------------------
# moving-average kernels

def toeplitz_shift(coeffs, past):
    """Conditional mean of the next value by inverting the lower-triangular MA matrix."""
    L = len(past)
    col = np.zeros(L + 1)
    col[0] = 1.0
    col[1 : len(coeffs) + 1] = coeffs[:L]
    A = toeplitz(col, np.zeros(L + 1))
    # solve for innovations with the next innovation set to zero
    zeta = np.linalg.solve(A[:L, :L], past)
    return A[L, :L] @ zeta


@pytest.mark.parametrize("past, expected", [([0.0, 0.0, 1.0], 0.5), ([0.0, 1.0, 0.0], -0.25)])
def test_ma1_conditional_shift(past, expected):
    k = MovingAverageKernel([0.5], scales=1.0)
    full = np.zeros(k.length)
    full[-len(past):] = past
    h = k.conditional_shift(window(full))
    assert h[0] == pytest.approx(expected, abs=1e-12)
    assert h[0] == pytest.approx(toeplitz_shift(np.array([0.5]), full), abs=1e-12)


def test_ma_shift_matches_toeplitz_oracle(rng):
    coeffs = np.array([0.4, -0.2, 0.1])
    k = MovingAverageKernel(coeffs, scales=0.3)
    past = rng.uniform(k.lower[0], k.upper[0], size=k.length)
    assert k.conditional_shift(window(past))[0] == pytest.approx(toeplitz_shift(coeffs, past), abs=1e-10)


def test_zero_past_has_zero_shift():
    k = MovingAverageKernel([0.5, 0.2], scales=[0.1, 0.3])
    np.testing.assert_array_equal(k.conditional_shift(k.default_past()), 0.0)


def test_inverse_filter_reconstructs_window(rng):
    k = MovingAverageKernel([0.5, 0.3], scales=0.2, dim=2)
    zeta = rng.uniform(-1, 1, size=(k.length, 2)) * 0.2
    eta = ma_filter(k.coeffs, zeta)
    back = k.reconstruct_innovations(PastWindow(eta))
    np.testing.assert_allclose(back, zeta, atol=1e-8)


def test_ma_rejects_nonsummable_coefficients():
    with pytest.raises(ParameterError):
        MovingAverageKernel([0.6, 0.4])


def test_ma_sample_mean_is_shift(rng):
    k = MovingAverageKernel([0.5], scales=0.2)
    past = stationary_past(k, rng)
    h = k.conditional_shift(past)[0]
    draws = sample_kernel(k, past.broadcast_to((100_000,)), rng)[:, 0]
    se = draws.std() / np.sqrt(draws.size)
    assert abs(draws.mean() - h) < 3 * se


def test_markov_sampler_mean_matches_quadrature(rng):
    k = MarkovKernel(symmetric_bump, [-1.0], [1.0])
    past = k.default_past((100_000,))
    draws = sample_kernel(k, past, rng)[:, 0]
    grid = np.linspace(-1, 1, 20001)
    dens = symmetric_bump(np.zeros((grid.size, 1)), grid[:, None])
    mean = np.trapezoid(grid * dens, grid)
    se = draws.std() / np.sqrt(draws.size)
    assert abs(draws.mean() - mean) < 3 * se


def test_ar1_sample_mean(rng):
    k = AR1TentKernel(0.5, scale=0.2)
    past = PastWindow.constant([0.3], k.length, batch_shape=(100_000,))
    draws = sample_kernel(k, past, rng)[:, 0]
    assert abs(draws.mean() - 0.15) < 3 * draws.std() / np.sqrt(draws.size)


def test_product_kernel_coordinates_uncorrelated(rng):
    k = PeriodicBasisKernel([0.3, 0.2])
    draws = sample_kernel(k, k.default_past((10_000,)), rng)
    assert abs(np.corrcoef(draws.T)[0, 1]) < 0.03


def make_kernels():
    return [
        MovingAverageKernel([0.5], scales=0.2),
        MovingAverageKernel([0.5], scales=[0.2, 0.1]),
        MovingAverageKernel([0.5], scales=[0.2, 0.1], innovation="uniform"),
        AR1TentKernel(0.7, scale=0.1),
        box_kernel([0.5], [1.0]),
        MarkovKernel(symmetric_bump, [-1.0], [1.0]),
        PeriodicBasisKernel([0.3, 0.2, 0.1]),
        PeriodicBasisKernel([0.3, 0.2], weight=TanhWeight(0.5, 0.05)),
    ]


@pytest.mark.parametrize("kernel", make_kernels(), ids=lambda k: type(k).__name__)
def test_samples_stay_in_support(kernel, rng):
    past = stationary_past(kernel, rng, (1000,), burn_in=5)
    draws = sample_kernel(kernel, past.broadcast_to((100, 1000)), rng)
    assert draws.shape == (100, 1000, kernel.dim)
    assert np.all(kernel.contains(draws))


@pytest.mark.parametrize("kernel", [k for k in make_kernels() if k.dim <= 2], ids=lambda k: type(k).__name__)
def test_density_normalizes(kernel, rng):
    past = stationary_past(kernel, rng, burn_in=3)
    # the trapezoid rule is first order across the jumps of a uniform innovation density
    jumps = getattr(kernel, "innovation", "tent") == "uniform"
    tol = 2e-3 if jumps else 1e-6
    assert density_normalization(kernel, past) == pytest.approx(1.0, abs=tol)


def test_tanh_weight_normalizer_exact_in_2d(rng):
    k = PeriodicBasisKernel([0.3, 0.2], weight=TanhWeight(0.5, 0.05))
    past = stationary_past(k, rng, burn_in=3)
    assert density_normalization(k, past, n_grid=4001) == pytest.approx(1.0, abs=2e-4)


# ---------------------------------------------------------------------------
# compositions and forgetting

def test_lift_step_reproduces_compose_conditional():
    k = MovingAverageKernel([0.5], scales=0.2)
    past = k.default_past()
    a = compose_conditional(k, past, 3, 2, 500, np.random.default_rng(1))
    rng = np.random.default_rng(1)
    w = past.broadcast_to((500,))
    seq = []
    for _ in range(5):
        w = noise_lift_step(w, k, rng)
        seq.append(w.latest)
    np.testing.assert_array_equal(a, np.stack(seq[3:], axis=1))


def test_compose_conditional_projection_consistency(rng):
    k = AR1TentKernel(0.6, scale=0.2)
    past = PastWindow.constant([0.4], k.length)
    two = compose_conditional(k, past, 0, 2, 2000, rng)[:, 0]
    one = compose_conditional(k, past, 0, 1, 2000, rng)[:, 0]
    assert two_sample_check(two, one, n_boot=50, rng=rng).passed


def test_iid_kernel_forgets_immediately(rng):
    k = box_kernel([-1.0], [1.0])
    a = compose_conditional(k, PastWindow.constant([-1.0], k.length), 0, 1, 2000, rng)[:, 0]
    b = compose_conditional(k, PastWindow.constant([1.0], k.length), 0, 1, 2000, rng)[:, 0]
    assert two_sample_check(a, b, n_boot=50, rng=rng).passed


def test_ma1_exact_forgetting(rng):
    k = MovingAverageKernel([0.5], scales=0.2)
    p1 = PastWindow.constant(k.lower, k.length)
    p2 = PastWindow.constant(k.upper, k.length)
    curve = kernel_convergence_curve(k, p1, p2, m=1, k_max=4, ensemble=1000, rng=rng, n_boot=50)
    assert curve[0].distance > 5 * curve[0].stderr
    for pt in curve[2:]:
        assert pt.distance < 3 * pt.stderr


def test_ma1_mean_difference_at_lag_zero(rng):
    # conditional means differ by |a_1| times the difference of the newest entries
    k = MovingAverageKernel([0.5], scales=0.2)
    past1 = append_past(k.default_past(), [0.2])
    past0 = k.default_past()
    diff = k.conditional_shift(past1) - k.conditional_shift(past0)
    assert abs(diff[0]) == pytest.approx(0.5 * 0.2)
    a = compose_conditional(k, past1, 0, 1, 100_000, rng)[:, 0, 0]
    b = compose_conditional(k, past0, 0, 1, 100_000, rng)[:, 0, 0]
    se = np.hypot(a.std(), b.std()) / np.sqrt(a.size)
    assert abs(abs(a.mean() - b.mean()) - 0.1) < 3 * se


def test_identical_pasts_give_floor_distances(rng):
    k = MovingAverageKernel([0.5], scales=0.2)
    p = k.default_past()
    curve = kernel_convergence_curve(k, p, p, m=1, k_max=2, ensemble=1000, rng=rng, n_boot=50)
    assert all(pt.distance < 2 * pt.stderr for pt in curve)


def test_geometric_ma_decay_rate(rng):
    # a_l = 2^-l is the AR(1) process with coefficient 1/2, so pasts are forgotten at rate log 2
    coeffs = 0.5 ** np.arange(1, 31)
    k = MovingAverageKernel(coeffs, scales=0.2)
    p1 = PastWindow.constant(k.lower, k.length)
    p2 = PastWindow.constant(k.upper, k.length)
    curve = kernel_convergence_curve(k, p1, p2, m=1, k_max=6, ensemble=2000, rng=rng, n_boot=30)
    ks = np.array([pt.k for pt in curve])
    ds = np.array([pt.distance for pt in curve])
    floor = 3 * np.array([pt.stderr for pt in curve])
    fit = fit_exponential_decay(ks, ds, floor=floor)
    assert np.log(2) / 2 <= fit.gamma <= 2 * np.log(2)


# ---------------------------------------------------------------------------
# recurrence

def test_recurrence_uniform_iid(rng):
    k = box_kernel([-1.0], [1.0])
    p = recurrence_probability(k, n=1, delta=0.5, s=0, ensemble=10_000, pasts=k.default_past(), rng=rng)
    assert p == pytest.approx(0.5, abs=0.02)


def test_recurrence_zero_for_support_away_from_zero(rng):
    k = box_kernel([0.5], [1.0])
    assert recurrence_probability(k, 1, 0.3, 0, 2000, k.default_past(), rng) == 0.0


def test_recurrence_ma1_uniform_matches_quadrature(rng):
    scale, a, delta = 0.5, 0.5, 0.3
    k = MovingAverageKernel([a], scales=scale, innovation="uniform")
    pasts = PastWindow(np.stack([PastWindow.constant(v, k.length).entries for v in (k.lower, k.upper)]))
    est = recurrence_probability(k, n=1, delta=delta, s=2, ensemble=10_000, pasts=pasts, rng=rng)
    # eta = scale * (Z2 + a Z1) with independent uniforms, independent of the past
    z1 = np.linspace(-1, 1, 200_001)
    lo = np.clip(-delta / scale - a * z1, -1, 1)
    hi = np.clip(delta / scale - a * z1, -1, 1)
    exact = np.trapezoid(0.5 * (hi - lo) * 0.5, z1)
    se = np.sqrt(exact * (1 - exact) / 10_000)
    assert est > 0
    assert abs(est - exact) < 3 * se


def test_recurrence_rejects_nonpositive_delta(rng):
    k = box_kernel([-1.0], [1.0])
    with pytest.raises(ParameterError):
        recurrence_probability(k, 1, 0.0, 0, 10, k.default_past(), rng)


def test_tent_pdf_integrates_to_one():
    x = np.linspace(-1, 1, 10001)
    assert np.trapezoid(tent_pdf(x), x) == pytest.approx(1.0, abs=1e-7)
