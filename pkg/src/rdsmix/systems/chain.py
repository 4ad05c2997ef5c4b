"""Chain of anharmonic oscillators damped and forced at its end sites.

Potential ``V(q) = sum_i (a_i q_i^2 + F_i(q_i)) + sum_i b_i (q_i - q_{i+1})^2``;
the first and last momenta feel friction ``gamma_1, gamma_n`` and the
forcing ``zeta_1, zeta_n``.  Over one unit of time each forcing is the
expansion ``sum_l c_l phi_l(t)`` in the periodic basis, so the noise vector of
the time-one map is the array of coefficients (site-major).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from ..errors import IntegratorBlowup, ParameterError, ShapeError
from ..noise import periodic_basis
from . import _chain_numba as nb
from .base import TimeOneMap

PERTURBATIONS = {"none": 0, "sin": 1, "one_minus_cos": 2}


@dataclass(frozen=True)
class OscillatorChainSpec:
    """Parameters of the chain.  Scalars broadcast to all sites (or bonds)."""

    n: int = 2
    a: tuple = (1.0,)
    b: tuple = (1.0,)
    perturbation: str = "one_minus_cos"
    amp: tuple = (0.1,)
    gamma1: float = 1.0
    gamma_n: float = 1.0
    h: float = 1e-3
    n_basis: int = 3
    _arrays: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError("chain needs at least one site")
        if self.perturbation not in PERTURBATIONS:
            raise ParameterError(f"unknown perturbation {self.perturbation!r}")
        nsub = round(1.0 / self.h)
        if nsub < 1 or abs(nsub * self.h - 1.0) > 1e-12:
            raise ParameterError("integrator step must divide the unit interval")
        a = np.broadcast_to(np.asarray(self.a, dtype=float), (self.n,)).copy()
        b = np.broadcast_to(np.asarray(self.b, dtype=float), (max(self.n - 1, 0),)).copy()
        amp = np.broadcast_to(np.asarray(self.amp, dtype=float), (self.n,)).copy()
        if np.any(a <= 0):
            raise ParameterError("quadratic coefficients a_i must be positive")
        if np.any(b < 0):
            raise ParameterError("bond coefficients b_i must be nonnegative")
        if self.gamma1 < 0 or self.gamma_n < 0:
            raise ParameterError("damping coefficients must be nonnegative")
        damp = np.zeros(self.n)
        damp[0] += self.gamma1
        if self.n > 1:
            damp[-1] += self.gamma_n
        sites = np.array([0] if self.n == 1 else [0, self.n - 1], dtype=np.int64)
        kind = np.full(self.n, PERTURBATIONS[self.perturbation], dtype=np.int64)
        t_mid = (np.arange(nsub) + 0.5) * self.h
        object.__setattr__(self, "_arrays", dict(
            a=a, b=b, amp=amp, kind=kind, damp=damp, sites=sites, nsub=nsub,
            phi=np.ascontiguousarray(periodic_basis(self.n_basis, t_mid)),
        ))

    @property
    def dim_state(self) -> int:
        return 2 * self.n

    @property
    def sites(self) -> np.ndarray:
        return self._arrays["sites"]

    @property
    def n_forced(self) -> int:
        return self.sites.size

    @property
    def dim_noise(self) -> int:
        return self.n_forced * self.n_basis

    @property
    def nsub(self) -> int:
        return self._arrays["nsub"]

    @property
    def damping(self) -> np.ndarray:
        return self._arrays["damp"]

    def _params(self):
        A = self._arrays
        return A["a"], A["b"], A["kind"], A["amp"], A["damp"], A["sites"]

    def F(self, x):
        amp = self._arrays["amp"]
        if self.perturbation == "sin":
            return amp * np.sin(x)
        if self.perturbation == "one_minus_cos":
            return amp * (1.0 - np.cos(x))
        return np.zeros_like(np.asarray(x, dtype=float) * amp)

    def dF(self, x):
        amp = self._arrays["amp"]
        if self.perturbation == "sin":
            return amp * np.cos(x)
        if self.perturbation == "one_minus_cos":
            return amp * np.sin(x)
        return np.zeros_like(np.asarray(x, dtype=float) * amp)

    def d2F(self, x):
        amp = self._arrays["amp"]
        if self.perturbation == "sin":
            return -amp * np.sin(x)
        if self.perturbation == "one_minus_cos":
            return amp * np.cos(x)
        return np.zeros_like(np.asarray(x, dtype=float) * amp)

    def check_lower_bound(self, grid=None) -> dict:
        """Numerical check of ``F_i'(0) = 0`` and ``inf F_i'' > -2 a_i`` on a grid."""
        grid = np.linspace(-2 * np.pi, 2 * np.pi, 4001) if grid is None else np.asarray(grid, dtype=float)
        d1 = self.dF(np.zeros(self.n))
        d2 = self.d2F(grid[:, None]).min(axis=0)
        a = self._arrays["a"]
        return {
            "slope_at_zero": d1,
            "inf_second_derivative": d2,
            "passed": bool(np.all(np.abs(d1) < 1e-12) and np.all(d2 > -2 * a)),
        }


def _split(spec: OscillatorChainSpec, x):
    x = np.asarray(x, dtype=float)
    return x[..., : spec.n], x[..., spec.n :]


def potential(spec: OscillatorChainSpec, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    a, b = spec._arrays["a"], spec._arrays["b"]
    v = np.sum(a * q**2 + spec.F(q), axis=-1)
    if spec.n > 1:
        v = v + np.sum(b * np.diff(q, axis=-1) ** 2, axis=-1)
    return v


def grad_potential(spec: OscillatorChainSpec, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    a, b = spec._arrays["a"], spec._arrays["b"]
    g = 2 * a * q + spec.dF(q)
    if spec.n > 1:
        bond = 2 * b * np.diff(q, axis=-1)
        g = g.copy()
        g[..., :-1] -= bond
        g[..., 1:] += bond
    return g


def hessian_potential(spec: OscillatorChainSpec, q) -> np.ndarray:
    """Tridiagonal ``D^2 V(q)`` (batched)."""
    q = np.asarray(q, dtype=float)
    a, b = spec._arrays["a"], spec._arrays["b"]
    diag = 2 * a + spec.d2F(q)
    H = np.zeros(q.shape + (spec.n,))
    idx = np.arange(spec.n)
    H[..., idx, idx] = diag
    if spec.n > 1:
        i = np.arange(spec.n - 1)
        H[..., i, i] += 2 * b
        H[..., i + 1, i + 1] += 2 * b
        H[..., i, i + 1] = -2 * b
        H[..., i + 1, i] = -2 * b
    return H


def hamiltonian(spec: OscillatorChainSpec, p, q) -> np.ndarray:
    """``H(p, q) = |p|^2 / 2 + V(q)``."""
    p = np.asarray(p, dtype=float)
    out = 0.5 * np.sum(p**2, axis=-1) + potential(spec, q)
    return out[()] if np.ndim(out) == 0 else out


def chain_vector_field(spec: OscillatorChainSpec, p, q, zeta):
    """Right-hand side ``(dq/dt, dp/dt)`` for forcing values ``zeta`` at the forced sites."""
    p = np.asarray(p, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if zeta.shape[-1:] != (spec.n_forced,):
        raise ShapeError(f"forcing needs {spec.n_forced} components")
    pdot = -grad_potential(spec, q) - spec.damping * p
    pdot = np.array(np.broadcast_to(pdot, np.broadcast_shapes(pdot.shape, zeta.shape[:-1] + (spec.n,))))
    for j, s in enumerate(spec.sites):
        pdot[..., s] += zeta[..., j]
    return p.copy(), pdot


def forcing_path(spec: OscillatorChainSpec, coeffs) -> np.ndarray:
    """Forcing held on each substep: ``path[..., s, j] = sum_l c[..., j, l] phi_l(t_s)``."""
    c = np.asarray(coeffs, dtype=float).reshape(np.shape(coeffs)[:-1] + (spec.n_forced, spec.n_basis))
    return np.einsum("...jl,sl->...sj", c, spec._arrays["phi"])


def chain_time_one_flow(spec: OscillatorChainSpec, state, path, return_trajectory: bool = False):
    """RK4 over ``[0, 1]`` with the forcing ``path[s, j]`` held on substep ``s``.

    Returns the final state, or all ``nsub + 1`` substep nodes when
    ``return_trajectory`` is set.
    """
    state = np.ascontiguousarray(state, dtype=float)
    path = np.ascontiguousarray(path, dtype=float)
    if state.shape != (spec.dim_state,):
        raise ShapeError(f"state must have shape ({spec.dim_state},)")
    if path.shape != (spec.nsub, spec.n_forced):
        raise ShapeError(f"path must have shape ({spec.nsub}, {spec.n_forced}) on the integrator grid")
    traj = nb.flow_path(state, path, spec.h, *spec._params())
    if not np.all(np.isfinite(traj[-1])):
        raise IntegratorBlowup("chain integration produced a non-finite state")
    return traj if return_trajectory else traj[-1]


def energy_rate(spec: OscillatorChainSpec, x, zeta) -> np.ndarray:
    """Closed-form ``dH/dt = -sum damping p^2 + sum zeta_j p_{site_j}``."""
    _, p = _split(spec, x)
    return -np.sum(spec.damping * p**2, axis=-1) + np.sum(np.asarray(zeta) * p[..., spec.sites], axis=-1)


def energy_drift(spec: OscillatorChainSpec, trajectory, path) -> np.ndarray:
    """Per-substep mismatch between numerical ``dH/dt`` and its closed form.

    Returns ``(H_{s+1} - H_s)/h`` minus the Simpson average of the closed-form
    rate over the substep; the midpoint state is the cubic Hermite
    interpolant of the stored nodes, so the residual is ``O(h^4)``.
    """
    x = np.asarray(trajectory, dtype=float)
    path = np.asarray(path, dtype=float)
    h = spec.h
    q, p = _split(spec, x)
    H = hamiltonian(spec, p, q)
    x0, x1 = x[:-1], x[1:]

    def field_(y, z):
        qq, pp = _split(spec, y)
        dq, dp = chain_vector_field(spec, pp, qq, z)
        return np.concatenate([dq, dp], axis=-1)

    f0, f1 = field_(x0, path), field_(x1, path)
    xm = 0.5 * (x0 + x1) + h / 8.0 * (f0 - f1)
    simpson = (energy_rate(spec, x0, path) + 4 * energy_rate(spec, xm, path) + energy_rate(spec, x1, path)) / 6.0
    return np.diff(H) / h - simpson


def linear_damped_matrix(spec: OscillatorChainSpec) -> np.ndarray:
    """Generator of the damped linear chain (``F_i = 0``) in ``[q, p]`` coordinates."""
    n = spec.n
    lin = OscillatorChainSpec(n=n, a=tuple(spec._arrays["a"]), b=tuple(spec._arrays["b"]) or (0.0,),
                              perturbation="none", amp=(0.0,), gamma1=spec.gamma1, gamma_n=spec.gamma_n,
                              h=spec.h, n_basis=spec.n_basis)
    A = np.zeros((2 * n, 2 * n))
    A[:n, n:] = np.eye(n)
    A[n:, :n] = -hessian_potential(lin, np.zeros(n))
    A[n:, n:] = -np.diag(spec.damping)
    return A


def control_matrix(spec: OscillatorChainSpec) -> np.ndarray:
    """Input matrix injecting forcing into the momenta of the forced sites."""
    B = np.zeros((spec.dim_state, spec.n_forced))
    for j, s in enumerate(spec.sites):
        B[spec.n + s, j] = 1.0
    return B


@dataclass(frozen=True)
class LinearizedChain:
    times: np.ndarray
    A: np.ndarray
    B: np.ndarray


def linearized_chain(spec: OscillatorChainSpec, trajectory) -> LinearizedChain:
    """Time-varying linearisation ``A(t)`` along stored substep nodes, with constant ``B``."""
    x = np.asarray(trajectory, dtype=float)
    q, _ = _split(spec, x)
    n = spec.n
    A = np.zeros((x.shape[0], 2 * n, 2 * n))
    A[:, :n, n:] = np.eye(n)
    A[:, n:, :n] = -hessian_potential(spec, q)
    A[:, n:, n:] = -np.diag(spec.damping)
    times = np.arange(x.shape[0]) * spec.h
    return LinearizedChain(times, A, control_matrix(spec))


class ChainMap(TimeOneMap):
    """Time-one map of the chain with noise given by periodic-basis coefficients."""

    def __init__(self, spec: OscillatorChainSpec | None = None):
        self.spec = OscillatorChainSpec() if spec is None else spec
        self.dim_state = self.spec.dim_state
        self.dim_noise = self.spec.dim_noise

    @property
    def state_labels(self):
        n = self.spec.n
        return [f"q{i + 1}" for i in range(n)] + [f"p{i + 1}" for i in range(n)]

    def _batch(self, u, eta):
        u, eta = self.check(u, eta)
        shape = np.broadcast_shapes(u.shape[:-1], eta.shape[:-1])
        uf = np.ascontiguousarray(np.broadcast_to(u, shape + u.shape[-1:]).reshape(-1, self.dim_state))
        cf = np.ascontiguousarray(np.broadcast_to(eta, shape + eta.shape[-1:]).reshape(
            -1, self.spec.n_forced, self.spec.n_basis))
        return shape, uf, cf

    def apply(self, u, eta):
        shape, uf, cf = self._batch(u, eta)
        out = nb.flow_batch(uf, cf, self.spec._arrays["phi"], self.spec.h, *self.spec._params())
        if not np.all(np.isfinite(out)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(out), axis=1))[0])
            raise IntegratorBlowup(f"chain integration blew up for batch member {bad}")
        return out.reshape(shape + (self.dim_state,))

    def apply_with_jacobians(self, u, eta):
        shape, uf, cf = self._batch(u, eta)
        x, J = nb.flow_tangent_block(uf, cf, self.spec._arrays["phi"], self.spec.h, *self.spec._params())
        m = self.dim_state
        return (x.reshape(shape + (m,)), J[:, :, :m].reshape(shape + (m, m)),
                J[:, :, m:].reshape(shape + (m, self.dim_noise)))

    def jacobians(self, u, eta):
        _, Ju, Je = self.apply_with_jacobians(u, eta)
        return Ju, Je

    def jac_state(self, u, eta):
        return self.apply_with_jacobians(u, eta)[1]

    def jac_noise(self, u, eta):
        return self.apply_with_jacobians(u, eta)[2]


def linear_flow_oracle(spec: OscillatorChainSpec, state) -> np.ndarray:
    """``expm(A) @ state`` for the damped linear chain."""
    return expm(linear_damped_matrix(spec)) @ np.asarray(state, dtype=float)
