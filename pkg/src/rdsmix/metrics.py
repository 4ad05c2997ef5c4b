"""Distances between empirical laws and exponential-decay fits.

The dual-Lipschitz norm ``sup{<f, mu - nu> : |f| <= 1, Lip f <= 1}`` equals
the Wasserstein-1 distance for the truncated cost ``min(|x - y|, 2)`` (the
constraint ``|f| <= 1`` only bounds the oscillation of ``f`` because
``mu - nu`` has zero mass).  Both forms are used below: the dual LP in one
dimension, optimal assignment or the primal transport LP otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist
from scipy.stats import wasserstein_distance

from .errors import FitError, ShapeError

MAX_SUPPORT = 2000
PRIMAL_LP_LIMIT = 150


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted point cloud; ``samples`` has shape ``(n, dim)``."""

    samples: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] == 0:
            raise ShapeError("samples need shape (n, dim) with n >= 1")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples must be finite")
        if self.weights is None:
            w = np.full(x.shape[0], 1.0 / x.shape[0])
        else:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (x.shape[0],) or np.any(w < 0) or w.sum() <= 0:
                raise ValueError("weights must be nonnegative, one per sample, not all zero")
            w = w / w.sum()
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def mean(self) -> np.ndarray:
        return self.weights @ self.samples


def _as_measure(m) -> EmpiricalMeasure:
    return m if isinstance(m, EmpiricalMeasure) else EmpiricalMeasure(m)


def _subsample(m: EmpiricalMeasure, cap: int, rng) -> EmpiricalMeasure:
    if m.size <= cap:
        return m
    if m.is_uniform:
        idx = rng.choice(m.size, size=cap, replace=False)
        return EmpiricalMeasure(m.samples[idx])
    idx = rng.choice(m.size, size=cap, replace=True, p=m.weights)
    return EmpiricalMeasure(m.samples[idx])


def _dual_lp_1d(points: np.ndarray, signed: np.ndarray) -> float:
    order = np.argsort(points, kind="stable")
    z, inv = np.unique(points[order], return_inverse=True)
    w = np.bincount(inv, weights=signed[order])
    m = z.size
    if m == 1:
        return 0.0
    gaps = np.diff(z)
    rows = np.arange(m - 1)
    diff = sparse.csr_matrix(
        (np.r_[-np.ones(m - 1), np.ones(m - 1)], (np.r_[rows, rows], np.r_[rows, rows + 1])),
        shape=(m - 1, m),
    )
    res = linprog(-w, A_ub=sparse.vstack([diff, -diff]), b_ub=np.r_[gaps, gaps],
                  bounds=(-1.0, 1.0), method="highs")
    if res.status != 0:
        raise RuntimeError(f"dual-Lipschitz LP failed: {res.message}")
    return float(max(-res.fun, 0.0))


def _primal_lp(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    cost = np.minimum(cdist(a.samples, b.samples), 2.0)
    na, nb = cost.shape
    rows_a = sparse.kron(sparse.eye(na), np.ones((1, nb)))
    rows_b = sparse.kron(np.ones((1, na)), sparse.eye(nb))
    res = linprog(cost.ravel(), A_eq=sparse.vstack([rows_a, rows_b]), b_eq=np.r_[a.weights, b.weights],
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def dual_lipschitz_estimate(mu, nu, max_support: int = MAX_SUPPORT, rng=None) -> float:
    """Dual-Lipschitz distance between two empirical measures, in ``[0, 2]``.

    Exact on the (possibly subsampled) joint support of at most
    ``max_support`` points.  Subsampling uses ``rng`` (seeded default).
    """
    mu, nu = _as_measure(mu), _as_measure(nu)
    if mu.dim != nu.dim:
        raise ShapeError(f"measures live in different dimensions ({mu.dim} vs {nu.dim})")
    rng = np.random.default_rng(0) if rng is None else rng
    half = max_support // 2
    mu, nu = _subsample(mu, half, rng), _subsample(nu, half, rng)
    if mu.dim == 1:
        pts = np.r_[mu.samples[:, 0], nu.samples[:, 0]]
        if mu.is_uniform and nu.is_uniform and mu.size == nu.size and np.ptp(pts) <= 2.0:
            # the truncation of the cost never binds, so sorted matching is optimal
            return float(np.mean(np.abs(np.sort(mu.samples[:, 0]) - np.sort(nu.samples[:, 0]))))
        return _dual_lp_1d(pts, np.r_[mu.weights, -nu.weights])
    if mu.is_uniform and nu.is_uniform and mu.size == nu.size:
        cost = np.minimum(cdist(mu.samples, nu.samples), 2.0)
        r, c = linear_sum_assignment(cost)
        return float(cost[r, c].mean())
    if mu.size * nu.size <= PRIMAL_LP_LIMIT**2:
        return _primal_lp(mu, nu)
    n = min(half, max(mu.size, nu.size))
    a = EmpiricalMeasure(mu.samples[rng.choice(mu.size, n, p=mu.weights)])
    b = EmpiricalMeasure(nu.samples[rng.choice(nu.size, n, p=nu.weights)])
    return dual_lipschitz_estimate(a, b, max_support, rng)


def w1_empirical_1d(samples_a, samples_b) -> float:
    """Wasserstein-1 distance between two 1-D samples (an upper proxy for the dual-Lipschitz norm)."""
    a = np.asarray(samples_a, dtype=float).ravel()
    b = np.asarray(samples_b, dtype=float).ravel()
    if a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    return float(wasserstein_distance(a, b))


@dataclass(frozen=True)
class TwoSampleResult:
    distance: float
    threshold: float
    passed: bool
    stderr: float


def bootstrap_stderr(samples_a, samples_b, n_boot: int = 200, rng=None, max_support: int = MAX_SUPPORT) -> float:
    """RMS of distances between resampled pairs drawn from the pooled sample.

    Under the null hypothesis of equal laws this is the Monte Carlo error of
    the distance estimator at the given sample sizes.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    a = np.asarray(samples_a, dtype=float).reshape(len(samples_a), -1)
    b = np.asarray(samples_b, dtype=float).reshape(len(samples_b), -1)
    half = max_support // 2
    na, nb = min(a.shape[0], half), min(b.shape[0], half)
    pooled = np.concatenate([a, b])
    sq = np.empty(n_boot)
    for i in range(n_boot):
        ia = rng.integers(pooled.shape[0], size=na)
        ib = rng.integers(pooled.shape[0], size=nb)
        sq[i] = dual_lipschitz_estimate(pooled[ia], pooled[ib], max_support, rng) ** 2
    return float(np.sqrt(sq.mean()))


def two_sample_check(samples_a, samples_b, tol_multiplier: float = 3.0, n_boot: int = 200, rng=None,
                     max_support: int = MAX_SUPPORT) -> TwoSampleResult:
    """Compare two samples: distance against ``tol_multiplier`` bootstrap errors."""
    rng = np.random.default_rng(0) if rng is None else rng
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    dist = dual_lipschitz_estimate(a, b, max_support, rng)
    se = bootstrap_stderr(a, b, n_boot, rng, max_support)
    thr = tol_multiplier * se
    return TwoSampleResult(dist, thr, bool(dist <= thr), se)


@dataclass(frozen=True)
class DistanceEstimate:
    """Noise-corrected distance; ``stderr`` is the standard error of the squared estimate, in distance units."""

    distance: float
    stderr: float
    raw: float
    null: float


def debiased_distance(samples_a, samples_b, n_null: int = 10, rng=None,
                      max_support: int = MAX_SUPPORT) -> DistanceEstimate:
    """Distance between the laws behind two large samples, corrected for the empirical floor.

    Both samples are split into disjoint chunks that fit in ``max_support``;
    the mean squared chunk-pair distance minus the mean squared distance of
    chunk pairs resampled without replacement from the pooled sample
    estimates the squared population distance.  Every sample point is used,
    which is what makes distances far below the single-chunk floor visible.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    a = np.asarray(samples_a, dtype=float).reshape(len(samples_a), -1)
    b = np.asarray(samples_b, dtype=float).reshape(len(samples_b), -1)
    size = min(a.shape[0], b.shape[0], max_support // 2)
    n_chunks = min(a.shape[0], b.shape[0]) // size
    ia = rng.permutation(a.shape[0])[: n_chunks * size].reshape(n_chunks, size)
    ib = rng.permutation(b.shape[0])[: n_chunks * size].reshape(n_chunks, size)
    raw = np.array([dual_lipschitz_estimate(a[i], b[j], max_support, rng) ** 2 for i, j in zip(ia, ib)])
    pooled = np.concatenate([a, b])
    null = np.empty(n_null)
    for t in range(n_null):
        perm = rng.permutation(pooled.shape[0])
        null[t] = dual_lipschitz_estimate(pooled[perm[:size]], pooled[perm[size : 2 * size]], max_support, rng) ** 2
    # Chunk pairs and null pairs share the same spread to first order, so the
    # null variance stands in for both when there is a single chunk.
    var = null.var(ddof=1) if n_null > 1 else 0.0
    var_raw = raw.var(ddof=1) if n_chunks > 1 else var
    se2 = np.sqrt(var_raw / n_chunks + var / n_null)
    d2 = raw.mean() - null.mean()
    return DistanceEstimate(float(np.sqrt(max(d2, 0.0))), float(np.sqrt(se2)),
                            float(np.sqrt(raw.mean())), float(np.sqrt(null.mean())))


@dataclass(frozen=True)
class MixFit:
    """Fit ``d_k ~ C exp(-gamma k)``; ``window`` lists the ``k`` values actually used."""

    C: float
    gamma: float
    r2: float
    window: tuple = field(default=())


def fit_exponential_decay(ks, ds, window=None, floor=None) -> MixFit:
    """Least squares of ``log d`` on ``k``.

    ``window = (k_lo, k_hi)`` restricts the range (inclusive); points with
    ``d <= floor`` (scalar or per-point) are dropped as Monte Carlo noise.
    """
    ks = np.asarray(ks, dtype=float)
    ds = np.asarray(ds, dtype=float)
    if ks.shape != ds.shape:
        raise ShapeError("ks and ds must have equal shapes")
    use = np.isfinite(ds) & (ds > 0)
    if window is not None:
        use &= (ks >= window[0]) & (ks <= window[1])
    if floor is not None:
        use &= ds > np.broadcast_to(np.asarray(floor, dtype=float), ds.shape)
    if use.sum() < 3:
        raise FitError(f"only {int(use.sum())} usable points for the decay fit (need 3)")
    x, y = ks[use], np.log(ds[use])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (intercept + slope * x)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 if ss_tot == 0 else float(np.clip(1.0 - np.sum(resid**2) / ss_tot, 0.0, 1.0))
    return MixFit(float(np.exp(intercept)), float(-slope), r2, tuple(int(k) for k in x))
