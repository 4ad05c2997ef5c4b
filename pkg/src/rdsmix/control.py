"""Regularized right inverses, the coupling control shift, and controllability tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, expm

from .errors import InfeasibleError, ParameterError, ShapeError
from .systems.base import TimeOneMap, orthonormal_basis

DELTA_GRID = 10.0 ** -np.arange(0, 9)
RANK_RTOL = 1e-8


def regularized_right_inverse(A, delta: float) -> np.ndarray:
    """``B = A^T (A A^T + delta I)^{-1}`` via a positive-definite solve (batched over leading axes)."""
    if not delta > 0:
        raise ParameterError(f"regularization must be positive, got {delta}")
    A = np.asarray(A, dtype=float)
    if A.ndim < 2:
        raise ShapeError("A must be a matrix")
    m = A.shape[-2]
    M = A @ np.swapaxes(A, -1, -2) + delta * np.eye(m)
    if A.ndim == 2:
        return cho_solve(cho_factor(M), A).T
    return np.swapaxes(np.linalg.solve(M, A), -1, -2)


def _basis(G, dim):
    if G is None:
        return np.eye(dim)
    Q = orthonormal_basis(G)
    if Q.shape[0] != dim:
        raise ShapeError(f"subspace basis has ambient dimension {Q.shape[0]}, expected {dim}")
    return Q


def right_inverse_residual(A, B, G=None):
    """``max_{f in G, |f| = 1} |A B f - f|`` (spectral norm of ``(AB - I) Q_G``)."""
    A = np.asarray(A, dtype=float)
    m = A.shape[-2]
    Q = _basis(G, m)
    R = (A @ np.asarray(B, dtype=float) - np.eye(m)) @ Q
    if Q.shape[1] == 0:
        return np.zeros(R.shape[:-2])[()]
    out = np.linalg.norm(R, ord=2, axis=(-2, -1))
    return out[()] if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class RegularizationChoice:
    delta: float
    grid: np.ndarray
    worst_residual: np.ndarray

    @property
    def monotone(self) -> bool:
        """Worst residual nonincreasing as the grid parameter decreases."""
        order = np.argsort(-self.grid)
        r = self.worst_residual[order]
        return bool(np.all(np.diff(r) <= 1e-12 * max(1.0, r.max())))


def residual_sweep(A_samples, G=None, grid=DELTA_GRID) -> np.ndarray:
    """Worst residual over the samples for each regularization on the grid."""
    A = np.asarray(A_samples, dtype=float)
    return np.array([float(np.max(right_inverse_residual(A, regularized_right_inverse(A, d), G))) for d in grid])


def select_regularization(A_samples, G=None, eps: float = 0.05, grid=DELTA_GRID) -> RegularizationChoice:
    """Largest grid value whose worst residual over all sampled ``A`` is at most ``eps``."""
    grid = np.asarray(grid, dtype=float)
    worst = residual_sweep(A_samples, G, grid)
    ok = np.flatnonzero(worst <= eps)
    if ok.size == 0:
        raise InfeasibleError(
            f"no regularization on the grid reaches residual {eps}; best was {worst.min():.3g}"
        )
    best = ok[np.argmax(grid[ok])]
    return RegularizationChoice(float(grid[best]), grid, worst)


@dataclass(frozen=True)
class ControlShift:
    """``Phi(v, v', xi) = B_delta(v, xi) P_G D_v S(v, xi) (v - v')`` with values in ``F_n``.

    ``B_delta`` is the regularized right inverse of ``D_eta S`` restricted to
    the first ``split`` noise coordinates; the shift is padded with zeros
    outside those coordinates.
    """

    smap: TimeOneMap
    delta: float
    G: np.ndarray | None = None
    split: int | None = None

    @property
    def n(self) -> int:
        return self.smap.dim_noise if self.split is None else int(self.split)

    def projector(self) -> np.ndarray:
        Q = _basis(self.G, self.smap.dim_state)
        return Q @ Q.T

    def operators(self, v, xi):
        """``(B, P_G D_v S)`` at the base point."""
        Ju, Je = self.smap.jacobians(v, xi)
        B = regularized_right_inverse(Je[..., : self.n], self.delta)
        return B, self.projector() @ Ju

    def __call__(self, v, v2, xi) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        dv = v - np.asarray(v2, dtype=float)
        B, PJ = self.operators(v, xi)
        phi_n = np.einsum("...ij,...j->...i", B @ PJ, dv)
        out = np.zeros(phi_n.shape[:-1] + (self.smap.dim_noise,))
        out[..., : self.n] = phi_n
        return out


def control_shift(smap: TimeOneMap, G, delta: float, v, v2, xi, split: int | None = None) -> np.ndarray:
    return ControlShift(smap, delta, G, split)(v, v2, xi)


@dataclass(frozen=True)
class SqueezeReport:
    q_prime: float
    C_prime: float
    kappa: float
    residual: float


def squeezing_certificate(shift: ControlShift, v, v2, xi) -> SqueezeReport:
    """Worst one-step contraction ``|S(v, xi) - S(v', xi + Phi)| / |v - v'|`` over the samples.

    Also reports ``C' = max |Phi| / |v - v'|``, the determining defect
    ``kappa = max |(I - P_G) D_v S|`` and the worst right-inverse residual on
    ``G`` at the sampled base points.
    """
    smap = shift.smap
    v = np.asarray(v, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    xi = np.asarray(xi, dtype=float)
    dv = np.linalg.norm(v - v2, axis=-1)
    if np.any(dv == 0):
        raise ValueError("pairs must be distinct")
    Ju, Je = smap.jacobians(v, xi)
    A = Je[..., : shift.n]
    B = regularized_right_inverse(A, shift.delta)
    P = shift.projector()
    phi_n = np.einsum("...ij,...j->...i", B @ P @ Ju, v - v2)
    phi = np.zeros(phi_n.shape[:-1] + (smap.dim_noise,))
    phi[..., : shift.n] = phi_n
    gap = np.linalg.norm(smap.apply(v, xi) - smap.apply(v2, xi + phi), axis=-1)
    I = np.eye(smap.dim_state)
    kappa = np.linalg.norm((I - P) @ Ju, ord=2, axis=(-2, -1))
    res = right_inverse_residual(A, B, _basis(shift.G, smap.dim_state))
    return SqueezeReport(
        q_prime=float(np.max(gap / dv)),
        C_prime=float(np.max(np.linalg.norm(phi, axis=-1) / dv)),
        kappa=float(np.max(kappa)),
        residual=float(np.max(res)),
    )


@dataclass(frozen=True)
class ControllabilityReport:
    gramian: np.ndarray
    rank: int
    min_eigenvalue: float
    controllable: bool


def kalman_matrix(A, B) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    blocks, M = [], B
    for _ in range(A.shape[0]):
        blocks.append(M)
        M = A @ M
    return np.hstack(blocks)


def numerical_rank(M, rtol: float = RANK_RTOL) -> int:
    s = np.linalg.svd(np.atleast_2d(M), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def gramian_time_invariant(A, B, horizon: float = 1.0) -> np.ndarray:
    """``int_0^T e^{At} B B^T e^{A^T t} dt`` by the Van Loan block exponential."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    m = A.shape[0]
    M = np.zeros((2 * m, 2 * m))
    M[:m, :m] = -A
    M[:m, m:] = B @ B.T
    M[m:, m:] = A.T
    F = expm(M * horizon)
    W = F[m:, m:].T @ F[:m, m:]
    return 0.5 * (W + W.T)


def gramian_time_varying(A_samples, times, B) -> np.ndarray:
    """``int Phi(T, t) B B^T Phi(T, t)^T dt`` by the trapezoid rule on the sample times.

    The transition matrices are products of midpoint exponentials.
    """
    A_samples = np.asarray(A_samples, dtype=float)
    times = np.asarray(times, dtype=float)
    m = A_samples.shape[-1]
    B = np.asarray(B, dtype=float).reshape(m, -1)
    BB = B @ B.T
    K = times.size
    Phi = np.eye(m)
    integrand = np.empty((K, m, m))
    integrand[-1] = BB
    for k in range(K - 2, -1, -1):
        dt = times[k + 1] - times[k]
        Phi = Phi @ expm(0.5 * (A_samples[k] + A_samples[k + 1]) * dt)
        integrand[k] = Phi @ BB @ Phi.T
    W = np.trapezoid(integrand, times, axis=0)
    return 0.5 * (W + W.T)


def kalman_controllability(A, B, horizon: float = 1.0, times=None, rtol: float = RANK_RTOL) -> ControllabilityReport:
    """Controllability of ``x' = A x + B u`` (``A`` constant, or samples ``A[k]`` at ``times``)."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 3:
        if times is None:
            times = np.linspace(0.0, horizon, A.shape[0])
        W = gramian_time_varying(A, times, B)
        ev = np.linalg.eigvalsh(W)
        rank = numerical_rank(W, rtol)
    else:
        A = np.atleast_2d(A)
        W = gramian_time_invariant(A, B, horizon)
        ev = np.linalg.eigvalsh(W)
        rank = numerical_rank(kalman_matrix(A, B), rtol)
    dim = W.shape[0]
    return ControllabilityReport(W, rank, float(ev[0]), bool(rank == dim and ev[0] > rtol * max(ev[-1], 0.0)))
