"""Conditional noise kernels ``Q(xi; .)`` and the stationary processes they generate.

A noise past ``xi`` is stored as a :class:`PastWindow`: a finite window of the
most recent noise vectors (oldest first, newest last) with geometric metric
weights ``base**k``, ``k = -L+1, ..., 0``.  All kernels accept batched windows
(leading batch axes on ``entries``) so that ensembles are sampled in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .errors import DomainError, ParameterError, SamplerError, ShapeError

SUPPORT_ATOL = 1e-9


def truncation_length(diam: float, base: float = 2.0, tol_tail: float = 1e-9) -> int:
    """Window length ``L`` with ``base**(-L) * diam < tol_tail``."""
    if not base > 1.0:
        raise ParameterError(f"metric base must exceed 1, got {base}")
    if tol_tail <= 0:
        raise ParameterError("tol_tail must be positive")
    if diam <= tol_tail:
        return 1
    return max(1, math.ceil(math.log(diam / tol_tail) / math.log(base)))


@dataclass(frozen=True)
class PastWindow:
    """Truncated noise history.

    ``entries`` has shape ``(*batch, L, dim)``; ``entries[..., -1, :]`` is the
    most recent value ``xi_0`` and ``entries[..., -1 - j, :]`` is ``xi_{-j}``.
    """

    entries: np.ndarray
    base: float = 2.0

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=float)
        if entries.ndim < 2:
            raise ShapeError("past entries need shape (..., L, dim)")
        if not self.base > 1.0:
            raise ParameterError(f"metric base must exceed 1, got {self.base}")
        object.__setattr__(self, "entries", entries)

    @property
    def length(self) -> int:
        return self.entries.shape[-2]

    @property
    def dim(self) -> int:
        return self.entries.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.entries.shape[:-2]

    @property
    def latest(self) -> np.ndarray:
        return self.entries[..., -1, :]

    def __getitem__(self, idx) -> PastWindow:
        return PastWindow(self.entries[idx], self.base)

    def broadcast_to(self, batch_shape) -> PastWindow:
        shape = tuple(np.atleast_1d(batch_shape)) if np.ndim(batch_shape) else (int(batch_shape),)
        return PastWindow(np.broadcast_to(self.entries, shape + self.entries.shape[-2:]).copy(), self.base)

    @classmethod
    def constant(cls, value, length: int, base: float = 2.0, batch_shape=()) -> PastWindow:
        value = np.atleast_1d(np.asarray(value, dtype=float))
        entries = np.broadcast_to(value, tuple(batch_shape) + (length, value.shape[-1])).copy()
        return cls(entries, base)


def past_weights(length: int, base: float) -> np.ndarray:
    """Metric weights ``base**k`` ordered like window entries (oldest first)."""
    return base ** (np.arange(length, dtype=float) - (length - 1))


def past_distance(xi: PastWindow, xi2: PastWindow, base: float | None = None):
    """Truncated weighted distance ``sum_k base**k * |xi_k - xi2_k|``."""
    if xi.length != xi2.length or xi.dim != xi2.dim:
        raise ShapeError(
            f"windows differ: (L={xi.length}, dim={xi.dim}) vs (L={xi2.length}, dim={xi2.dim})"
        )
    base = xi.base if base is None else base
    if not base > 1.0:
        raise ParameterError(f"metric base must exceed 1, got {base}")
    norms = np.linalg.norm(xi.entries - xi2.entries, axis=-1)
    out = norms @ past_weights(xi.length, base)
    return out[()] if np.ndim(out) == 0 else out


def append_past(xi: PastWindow, y, support=None) -> PastWindow:
    """Shift the window: drop the oldest entry, append ``y`` as the newest."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1:] != (xi.dim,):
        raise ShapeError(f"noise vector of dim {y.shape[-1:]} appended to window of dim {xi.dim}")
    if support is not None:
        lower, upper = support
        if np.any(y < np.asarray(lower) - SUPPORT_ATOL) or np.any(y > np.asarray(upper) + SUPPORT_ATOL):
            raise DomainError("appended noise vector lies outside the support box")
    batch = np.broadcast_shapes(xi.batch_shape, y.shape[:-1])
    old = np.broadcast_to(xi.entries[..., 1:, :], batch + (xi.length - 1, xi.dim))
    new = np.broadcast_to(y[..., None, :], batch + (1, xi.dim))
    return PastWindow(np.concatenate([old, new], axis=-2), xi.base)


# ---------------------------------------------------------------------------
# one-dimensional building blocks

def tent_pdf(x):
    return np.clip(1.0 - np.abs(x), 0.0, None)


def uniform_pdf(x):
    return np.where(np.abs(x) <= 1.0, 0.5, 0.0)


def tent_ppf(u):
    u = np.asarray(u, dtype=float)
    return np.where(u < 0.5, np.sqrt(2.0 * u) - 1.0, 1.0 - np.sqrt(2.0 * (1.0 - u)))


def _tent_sample(rng, size):
    return rng.triangular(-1.0, 0.0, 1.0, size=size)


def _uniform_sample(rng, size):
    return rng.uniform(-1.0, 1.0, size=size)


INNOVATIONS = {
    "tent": (tent_pdf, _tent_sample, True),
    "uniform": (uniform_pdf, _uniform_sample, False),
}


# ---------------------------------------------------------------------------
# kernels

class NoiseKernel:
    """Conditional law of the next noise vector given a truncated past.

    Subclasses implement :meth:`density`; :meth:`sample` defaults to envelope
    rejection with a uniform proposal over the support box.
    """

    max_attempts = 1_000_000

    def __init__(self, lower, upper, base: float = 2.0, tol_tail: float = 1e-9, split: int | None = None):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if self.lower.shape != self.upper.shape or np.any(self.upper <= self.lower):
            raise ParameterError("support box needs lower < upper componentwise")
        self.dim = self.lower.size
        self.base = float(base)
        self.tol_tail = float(tol_tail)
        self.length = truncation_length(self.diameter, self.base, self.tol_tail)
        self.split = self.dim if split is None else int(split)
        if not 1 <= self.split <= self.dim:
            raise ParameterError(f"split index must be in [1, {self.dim}]")

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    @property
    def support(self):
        return self.lower, self.upper

    def contains(self, y, atol: float = SUPPORT_ATOL):
        y = np.asarray(y, dtype=float)
        return np.all((y >= self.lower - atol) & (y <= self.upper + atol), axis=-1)

    def default_past(self, batch_shape=()) -> PastWindow:
        """Constant window at the point of the box closest to the origin."""
        centre = np.clip(0.0, self.lower, self.upper)
        return PastWindow.constant(centre, self.length, self.base, batch_shape)

    def check_past(self, past: PastWindow) -> PastWindow:
        if past.length != self.length or past.dim != self.dim:
            raise ShapeError(
                f"kernel expects windows (L={self.length}, dim={self.dim}), "
                f"got (L={past.length}, dim={past.dim})"
            )
        return past

    def density(self, past: PastWindow, y):
        raise NotImplementedError

    def density_bound(self, past: PastWindow):
        """Upper bound on ``y -> density(past, y)`` used as rejection envelope.

        The generic version scans a deterministic point set and inflates the
        maximum by 25%; subclasses with closed-form bounds override it.
        """
        pts = _scan_points(self.lower, self.upper)
        entries = past.entries.reshape((-1,) + past.entries.shape[-2:])
        out = np.empty(entries.shape[0])
        for i, e in enumerate(entries):
            p = PastWindow(np.broadcast_to(e, (len(pts),) + e.shape), past.base)
            out[i] = 1.25 * np.max(self.density(p, pts))
        return out.reshape(past.batch_shape)

    def sample(self, past: PastWindow, rng):
        return self._envelope_rejection(past, rng)

    def _envelope_rejection(self, past: PastWindow, rng):
        batch = past.batch_shape
        flat_entries = past.entries.reshape((-1,) + past.entries.shape[-2:])
        n = flat_entries.shape[0]
        bound = np.broadcast_to(np.asarray(self.density_bound(past), dtype=float), batch).reshape(n)
        out = np.empty((n, self.dim))
        pending = np.ones(n, dtype=bool)
        attempts = 0
        while pending.any():
            if attempts >= self.max_attempts:
                raise SamplerError(f"envelope rejection failed after {attempts} attempts")
            idx = np.flatnonzero(pending)
            cand = rng.uniform(self.lower, self.upper, size=(idx.size, self.dim))
            dens = self.density(PastWindow(flat_entries[idx], past.base), cand)
            if np.any(dens > bound[idx] * (1 + 1e-9)):
                raise SamplerError("density exceeds its rejection envelope")
            accept = rng.uniform(size=idx.size) * bound[idx] <= dens
            out[idx[accept]] = cand[accept]
            pending[idx[accept]] = False
            attempts += 1
        return out.reshape(batch + (self.dim,))


def _scan_points(lower, upper, n_total: int = 4096):
    dim = lower.size
    if dim <= 2:
        per_axis = 257 if dim == 1 else 65
        axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(lower, upper)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    u = qmc.Halton(d=dim, seed=0).random(n_total)
    return lower + u * (upper - lower)


def ma_inverse_coefficients(coeffs, length: int) -> np.ndarray:
    """Coefficients ``b_1..b_length`` of the inverse of ``1 + sum_l a_l z^l``."""
    a = np.zeros(length + 1)
    coeffs = np.asarray(coeffs, dtype=float)
    a[1 : min(length, coeffs.size) + 1] = coeffs[:length]
    b = np.zeros(length + 1)
    for l in range(1, length + 1):
        b[l] = -(a[l] + np.dot(a[1:l], b[l - 1 : 0 : -1]))
    return b[1:]


def ma_filter(coeffs, series) -> np.ndarray:
    """Apply ``x_k -> x_k + sum_l c_l x_{k-l}`` along axis -2 (terms before the window dropped)."""
    series = np.asarray(series, dtype=float)
    out = series.copy()
    length = series.shape[-2]
    for l, c in enumerate(np.asarray(coeffs, dtype=float)[: length - 1], start=1):
        out[..., l:, :] += c * series[..., :-l, :]
    return out


class MovingAverageKernel(NoiseKernel):
    """Conditional kernel of ``eta_k = zeta_k + sum_l a_l zeta_{k-l}`` with i.i.d. ``zeta``.

    Innovations are ``scales * Z`` with ``Z`` having independent tent (default)
    or uniform coordinates on ``[-1, 1]``.  Given a past, the next value has
    density ``innovation((y - h(xi)) / scales)`` with
    ``h(xi) = -sum_l b_l xi_{1-l}``, where ``b`` inverts the moving average.
    """

    def __init__(self, coeffs=(), scales=1.0, dim: int | None = None, innovation: str = "tent",
                 base: float = 2.0, tol_tail: float = 1e-9, split: int | None = None):
        self.coeffs = np.atleast_1d(np.asarray(coeffs, dtype=float)).ravel()
        if np.sum(np.abs(self.coeffs)) >= 1.0:
            raise ParameterError("moving-average coefficients need sum |a_l| < 1")
        scales = np.atleast_1d(np.asarray(scales, dtype=float))
        if dim is None:
            dim = scales.size
        self.scales = np.broadcast_to(scales, (dim,)).copy()
        if np.any(self.scales <= 0):
            raise ParameterError("innovation scales must be positive")
        if innovation not in INNOVATIONS:
            raise ParameterError(f"unknown innovation density {innovation!r}")
        self.innovation = innovation
        self._pdf, self._draw, self.is_lipschitz = INNOVATIONS[innovation]
        half = (1.0 + np.sum(np.abs(self.coeffs))) * self.scales
        super().__init__(-half, half, base=base, tol_tail=tol_tail, split=split)
        self.inverse_coeffs = ma_inverse_coefficients(self.coeffs, self.length)

    def conditional_shift(self, past: PastWindow) -> np.ndarray:
        self.check_past(past)
        recent_first = past.entries[..., ::-1, :]
        return -np.einsum("l,...ld->...d", self.inverse_coeffs, recent_first)

    def density(self, past: PastWindow, y):
        z = (np.asarray(y, dtype=float) - self.conditional_shift(past)) / self.scales
        return np.prod(self._pdf(z) / self.scales, axis=-1)

    def density_bound(self, past: PastWindow):
        peak = 1.0 if self.innovation == "tent" else 0.5
        return np.full(past.batch_shape, np.prod(peak / self.scales))

    def sample(self, past: PastWindow, rng):
        h = self.conditional_shift(past)
        return h + self.scales * self._draw(rng, h.shape)

    def reconstruct_innovations(self, past: PastWindow) -> np.ndarray:
        """Innovations ``zeta_k`` recovered from the window by the inverse filter."""
        return ma_filter(self.inverse_coeffs, past.entries)


class MarkovKernel(NoiseKernel):
    """Kernel whose density depends only on the newest past entry.

    ``transition_density(prev, y)`` must broadcast over leading axes.  Pass a
    module-level function (not a lambda) if the kernel will be shipped to
    worker processes.
    """

    def __init__(self, transition_density, lower, upper, density_bound: float | None = None,
                 base: float = 2.0, tol_tail: float = 1e-9, split: int | None = None):
        super().__init__(lower, upper, base=base, tol_tail=tol_tail, split=split)
        self.transition_density = transition_density
        self._bound = density_bound

    def density(self, past: PastWindow, y):
        self.check_past(past)
        inside = self.contains(y)
        return np.where(inside, self.transition_density(past.latest, np.asarray(y, dtype=float)), 0.0)

    def density_bound(self, past: PastWindow):
        if self._bound is not None:
            return np.full(past.batch_shape, float(self._bound))
        return super().density_bound(past)


@dataclass(frozen=True)
class BoxDensity:
    """Uniform transition density on a box, independent of the past."""

    lower: tuple
    upper: tuple

    def __call__(self, prev, y):
        lo, hi = np.asarray(self.lower, dtype=float), np.asarray(self.upper, dtype=float)
        y = np.asarray(y, dtype=float)
        val = 1.0 / np.prod(hi - lo)
        return np.full(np.broadcast_shapes(np.shape(prev)[:-1], y.shape[:-1]), val)


def box_kernel(lower, upper, base: float = 2.0, tol_tail: float = 1e-9) -> MarkovKernel:
    """I.i.d. uniform noise on ``[lower, upper]``."""
    lo = np.atleast_1d(np.asarray(lower, dtype=float))
    hi = np.broadcast_to(np.asarray(upper, dtype=float), lo.shape)
    if np.any(hi <= lo):
        raise ParameterError("box needs upper > lower in every coordinate")
    dens = BoxDensity(tuple(lo), tuple(hi))
    return MarkovKernel(dens, lo, hi, density_bound=float(1.0 / np.prod(hi - lo)), base=base, tol_tail=tol_tail)


class AR1TentKernel(MarkovKernel):
    """``y = lam * prev + scale * Z`` with tent-distributed ``Z`` (coordinatewise)."""

    def __init__(self, lam: float, scale=1.0, dim: int | None = None, base: float = 2.0,
                 tol_tail: float = 1e-9):
        if not abs(lam) < 1:
            raise ParameterError("autoregression coefficient needs |lam| < 1")
        scale = np.atleast_1d(np.asarray(scale, dtype=float))
        dim = scale.size if dim is None else dim
        self.lam = float(lam)
        self.scale = np.broadcast_to(scale, (dim,)).copy()
        half = self.scale / (1.0 - abs(self.lam))
        super().__init__(self._transition, -half, half, density_bound=float(np.prod(1.0 / self.scale)),
                         base=base, tol_tail=tol_tail)

    def _transition(self, prev, y):
        z = (y - self.lam * prev) / self.scale
        return np.prod(tent_pdf(z) / self.scale, axis=-1)

    def sample(self, past: PastWindow, rng):
        prev = past.latest
        return self.lam * prev + self.scale * _tent_sample(rng, prev.shape)


# ---------------------------------------------------------------------------
# periodic-basis kernels

def periodic_basis(n_basis: int, t) -> np.ndarray:
    """Orthonormal trigonometric basis of ``L2(0, 1)``: ``1, sqrt2 cos 2pi t, sqrt2 sin 2pi t, ...``."""
    t = np.asarray(t, dtype=float)
    out = np.empty(t.shape + (n_basis,))
    out[..., 0] = 1.0
    for l in range(1, n_basis):
        k = (l + 1) // 2
        trig = np.cos if l % 2 == 1 else np.sin
        out[..., l] = math.sqrt(2.0) * trig(2.0 * math.pi * k * t)
    return out


def noise_path(coeffs, t) -> np.ndarray:
    """Evaluate ``sum_l coeffs[..., l] * phi_l(t)``; returns shape ``coeffs.shape[:-1] + t.shape``."""
    coeffs = np.asarray(coeffs, dtype=float)
    phi = periodic_basis(coeffs.shape[-1], t)
    return np.tensordot(coeffs, phi, axes=([-1], [-1]))


@dataclass(frozen=True)
class ConstantWeight:
    """``g == 1``: the kernel is the product of the coefficient laws."""

    lower: float = 1.0
    upper: float = 1.0

    def __call__(self, past: PastWindow, y):
        y = np.asarray(y, dtype=float)
        return np.ones(np.broadcast_shapes(past.batch_shape, y.shape[:-1]))


@dataclass(frozen=True)
class TanhWeight:
    """``g(xi, y) = 1 + strength * tanh(<xi_0, y> / scale)``; Lipschitz and >= 1 - |strength|."""

    strength: float = 0.5
    scale: float = 1.0

    def __post_init__(self):
        if not abs(self.strength) < 1:
            raise ParameterError("weight strength must satisfy |strength| < 1")

    @property
    def lower(self) -> float:
        return 1.0 - abs(self.strength)

    @property
    def upper(self) -> float:
        return 1.0 + abs(self.strength)

    def __call__(self, past: PastWindow, y):
        y = np.asarray(y, dtype=float)
        return 1.0 + self.strength * np.tanh(np.sum(past.latest * y, axis=-1) / self.scale)


class PeriodicBasisKernel(NoiseKernel):
    """Density ``g(xi, y) / m(xi)`` against the product law ``nu`` of the coefficients.

    Coordinate ``l`` is the coefficient of basis function ``phi_l`` and has
    reference density ``tent(y_l / a_l) / a_l`` on ``[-a_l, a_l]``.
    """

    def __init__(self, half_widths, weight=None, base: float = 2.0, tol_tail: float = 1e-9,
                 split: int | None = None, n_norm: int = 4096):
        self.half_widths = np.atleast_1d(np.asarray(half_widths, dtype=float))
        if np.any(self.half_widths <= 0):
            raise ParameterError("coefficient half-widths must be positive")
        self.weight = ConstantWeight() if weight is None else weight
        if not self.weight.lower > 0:
            raise ParameterError("weight must be bounded below by a positive constant")
        super().__init__(-self.half_widths, self.half_widths, base=base, tol_tail=tol_tail, split=split)
        self.n_norm = n_norm
        self._nodes, self._node_weights = _reference_quadrature(self.half_widths, n_norm)

    def reference_density(self, y):
        y = np.asarray(y, dtype=float)
        a = self.half_widths[: y.shape[-1]]
        return np.prod(tent_pdf(y / a) / a, axis=-1)

    def normalizer(self, past: PastWindow):
        """``m(xi) = int g(xi, y) nu(dy)``."""
        self.check_past(past)
        if isinstance(self.weight, ConstantWeight):
            return np.ones(past.batch_shape)
        g = self.weight(PastWindow(past.entries[..., None, :, :], past.base), self._nodes)
        return g @ self._node_weights

    def density(self, past: PastWindow, y):
        y = np.asarray(y, dtype=float)
        return self.weight(past, y) * self.reference_density(y) / self.normalizer(past)

    def density_bound(self, past: PastWindow):
        return self.weight.upper * np.prod(1.0 / self.half_widths) / self.normalizer(past)

    def sample(self, past: PastWindow, rng):
        """Rejection from the reference law ``nu`` with acceptance ``g / sup g``."""
        batch = past.batch_shape
        flat = past.entries.reshape((-1,) + past.entries.shape[-2:])
        n = flat.shape[0]
        out = np.empty((n, self.dim))
        pending = np.ones(n, dtype=bool)
        attempts = 0
        while pending.any():
            if attempts >= self.max_attempts:
                raise SamplerError(f"weighted rejection failed after {attempts} attempts")
            idx = np.flatnonzero(pending)
            cand = self.half_widths * _tent_sample(rng, (idx.size, self.dim))
            g = self.weight(PastWindow(flat[idx], past.base), cand)
            accept = rng.uniform(size=idx.size) * self.weight.upper <= g
            out[idx[accept]] = cand[accept]
            pending[idx[accept]] = False
            attempts += 1
        return out.reshape(batch + (self.dim,))

    def conditional_density(self, past: PastWindow, y_n, y_dagger):
        """Density of the first ``n`` coordinates given the remaining ones.

        ``g(xi, y_n, y_dagger) D_n(y_n) / int_{F_n} g(xi, z, y_dagger) nu_n(dz)``.
        """
        y_n = np.asarray(y_n, dtype=float)
        y_dagger = np.asarray(y_dagger, dtype=float)
        n = y_n.shape[-1]
        if n + y_dagger.shape[-1] != self.dim:
            raise ShapeError("split coordinates do not add up to the noise dimension")
        full = np.concatenate(_concat_broadcast(y_n, y_dagger), axis=-1)
        num = self.weight(past, full) * self.reference_density(y_n)
        nodes, w = _reference_quadrature(self.half_widths[:n], self.n_norm)
        z = np.concatenate(_concat_broadcast(nodes, y_dagger[..., None, :]), axis=-1)
        g = self.weight(PastWindow(past.entries[..., None, :, :], past.base), z)
        return num / (g @ w)


def _concat_broadcast(a, b):
    shape = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
    return (np.broadcast_to(a, shape + a.shape[-1:]), np.broadcast_to(b, shape + b.shape[-1:]))


def _reference_quadrature(half_widths, n_norm: int):
    """Nodes and weights integrating against the product tent law.

    Gauss-Legendre on each half of every tent (exact away from the kink) for
    up to two coordinates; scrambled Sobol points through the tent quantile
    function otherwise.
    """
    dim = half_widths.size
    if dim <= 2:
        x, w = np.polynomial.legendre.leggauss(48)
        # tent(x) on [-1, 0] and [0, 1]
        left = 0.5 * (x - 1.0)
        right = 0.5 * (x + 1.0)
        nodes_1d = np.concatenate([left, right])
        weights_1d = np.concatenate([0.5 * w * tent_pdf(left), 0.5 * w * tent_pdf(right)])
        grids = np.meshgrid(*([nodes_1d] * dim), indexing="ij")
        wgrids = np.meshgrid(*([weights_1d] * dim), indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=-1) * half_widths
        weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
        return nodes, weights
    m = int(2 ** math.ceil(math.log2(max(n_norm, 2))))
    u = qmc.Sobol(d=dim, scramble=True, seed=0).random(m)
    return tent_ppf(u) * half_widths, np.full(m, 1.0 / m)


# ---------------------------------------------------------------------------
# sampling operations

def sample_kernel(kernel: NoiseKernel, past: PastWindow, rng):
    """One draw from ``Q(past; .)`` (batched over the window's batch axes)."""
    kernel.check_past(past)
    return kernel.sample(past, rng)


def noise_lift_step(past: PastWindow, kernel: NoiseKernel, rng) -> PastWindow:
    """One step of the Markov lift of the noise: draw ``y ~ Q(past; .)`` and append it."""
    y = sample_kernel(kernel, past, rng)
    return append_past(past, y, support=kernel.support)


def stationary_past(kernel: NoiseKernel, rng, batch_shape=(), burn_in: int | None = None) -> PastWindow:
    """Window drawn (approximately) from the stationary past law by running the lift."""
    past = kernel.default_past(batch_shape)
    for _ in range(2 * kernel.length if burn_in is None else burn_in):
        past = noise_lift_step(past, kernel, rng)
    return past


def compose_conditional(kernel: NoiseKernel, past: PastWindow, k: int, m: int, ensemble: int, rng) -> np.ndarray:
    """Samples of ``Q_k^m(past; .)``: the last ``m`` of ``k + m`` sequential draws.

    Returns an array of shape ``(ensemble, m, dim)``.
    """
    if k < 0 or m < 1:
        raise ParameterError("need k >= 0 and m >= 1")
    window = kernel.check_past(past).broadcast_to((ensemble,))
    draws = np.empty((ensemble, m, kernel.dim))
    for step in range(k + m):
        window = noise_lift_step(window, kernel, rng)
        if step >= k:
            draws[:, step - k] = window.latest
    return draws


@dataclass(frozen=True)
class CurvePoint:
    k: int
    distance: float
    stderr: float


def kernel_convergence_curve(kernel: NoiseKernel, past: PastWindow, past2: PastWindow, m: int, k_max: int,
                             ensemble: int, rng, n_boot: int = 200, max_support: int = 2000) -> list[CurvePoint]:
    """Dual-Lipschitz distance between ``Q_k^m(past)`` and ``Q_k^m(past2)`` for ``k = 0..k_max``.

    One sequential chain of ``k_max + m`` draws is run per ensemble member and
    pasts; the length-``m`` block starting after ``k`` draws is a sample of
    ``Q_k^m``.
    """
    from .metrics import two_sample_check

    paths = []
    for start in (past, past2):
        window = kernel.check_past(start).broadcast_to((ensemble,))
        path = np.empty((ensemble, k_max + m, kernel.dim))
        for step in range(k_max + m):
            window = noise_lift_step(window, kernel, rng)
            path[:, step] = window.latest
        paths.append(path)
    curve = []
    for k in range(k_max + 1):
        a = paths[0][:, k : k + m].reshape(ensemble, -1)
        b = paths[1][:, k : k + m].reshape(ensemble, -1)
        res = two_sample_check(a, b, n_boot=n_boot, rng=rng, max_support=max_support)
        curve.append(CurvePoint(k, res.distance, res.stderr))
    return curve


def recurrence_probability(kernel: NoiseKernel, n: int, delta: float, s: int, ensemble: int, pasts, rng,
                           target=None) -> float:
    """Worst case over ``pasts`` of the Monte Carlo estimate of ``Q_s^n(xi; O_delta(target))``.

    The neighbourhood is the product of Euclidean balls: every one of the
    ``n`` draws lies within ``delta`` of its target vector (zero by default).
    """
    if delta <= 0:
        raise ParameterError("delta must be positive")
    if isinstance(pasts, PastWindow):
        pasts = [pasts[i] for i in np.ndindex(pasts.batch_shape)] if pasts.batch_shape else [pasts]
    target = np.zeros((n, kernel.dim)) if target is None else np.broadcast_to(np.asarray(target, float), (n, kernel.dim))
    worst = 1.0
    for past in pasts:
        draws = compose_conditional(kernel, past, s, n, ensemble, rng)
        hit = np.all(np.linalg.norm(draws - target, axis=-1) < delta, axis=-1)
        worst = min(worst, float(np.mean(hit)))
    return worst


def estimate_lipschitz(kernel: NoiseKernel, pasts: PastWindow, rng, n_pairs: int = 10_000) -> float:
    """Largest difference quotient of the density over random pairs.

    Half of the pairs are independent uniform points of (past, support box);
    the other half are local perturbations, which probe the slope.  The
    distance on pairs is ``d(xi, xi') + |y - y'|``.
    """
    flat = pasts.entries.reshape((-1,) + pasts.entries.shape[-2:])
    i1 = rng.integers(flat.shape[0], size=n_pairs)
    i2 = rng.integers(flat.shape[0], size=n_pairs)
    xi1 = PastWindow(flat[i1], kernel.base)
    y1 = rng.uniform(kernel.lower, kernel.upper, size=(n_pairs, kernel.dim))
    local = np.arange(n_pairs) < n_pairs // 2
    eps = 1e-3 * kernel.diameter
    e2 = np.where(local[:, None, None], flat[i1], flat[i2])
    y2 = np.where(local[:, None], y1 + eps * rng.uniform(-1, 1, size=y1.shape),
                  rng.uniform(kernel.lower, kernel.upper, size=y1.shape))
    e2 = np.where(local[:, None, None],
                  e2 + 0.1 * eps * rng.uniform(-1, 1, size=e2.shape) * (np.arange(e2.shape[1]) == e2.shape[1] - 1)[:, None],
                  e2)
    y2 = np.clip(y2, kernel.lower, kernel.upper)
    e2 = np.clip(e2, kernel.lower, kernel.upper)
    xi2 = PastWindow(e2, kernel.base)
    num = np.abs(kernel.density(xi1, y1) - kernel.density(xi2, y2))
    den = past_distance(xi1, xi2) + np.linalg.norm(y1 - y2, axis=-1)
    ok = den > 0
    return float(np.max(num[ok] / den[ok])) if ok.any() else 0.0


def density_normalization(kernel: NoiseKernel, past: PastWindow, n_grid: int = 4001) -> float:
    """Integral of ``y -> density(past, y)`` over the support box (dimension <= 2), by the trapezoid rule."""
    if kernel.dim > 2:
        raise ParameterError("grid quadrature of the density is limited to dimension <= 2")
    past = kernel.check_past(past)
    axes = [np.linspace(lo, hi, n_grid) for lo, hi in zip(kernel.lower, kernel.upper)]
    if kernel.dim == 1:
        return float(np.trapezoid(kernel.density(past, axes[0][:, None]), axes[0]))
    rows = np.empty(n_grid)
    for lo in range(0, n_grid, 256):
        x = axes[0][lo : lo + 256]
        mesh = np.stack(np.meshgrid(x, axes[1], indexing="ij"), axis=-1)
        rows[lo : lo + x.size] = np.trapezoid(kernel.density(past, mesh), axes[1], axis=-1)
    return float(np.trapezoid(rows, axes[0]))
