"""Spectrally truncated complex Ginzburg-Landau equation with kicks.

On ``(0, pi)`` with Dirichlet conditions the modes are
``e_j = sqrt(2/pi) sin(j x)`` with ``-Laplacian e_j = j^2 e_j``.  The free flow
``u_t = (nu + i) u_xx - i c |u|^{2s} u`` is integrated in modal coordinates by
an integrating-factor RK4 scheme; the nonlinearity is evaluated on ``M = 2N``
interior grid points, which makes the Galerkin projection exact for ``s = 1``.
The kicked map is ``u -> S(u) + eta``.

Real vectors represent complex mode vectors as ``[Re u_1..Re u_N, Im u_1..Im u_N]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import IntegratorBlowup, ParameterError
from .base import TimeOneMap


@dataclass(frozen=True)
class CGLSpectralSpec:
    n_modes: int = 16
    nu: float = 0.1
    c: float = 1.0
    s: int = 1
    kick_scale: float = 0.5
    substeps: int = 64
    grid_factor: int = 2
    _cache: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_modes < 1 or self.substeps < 1:
            raise ParameterError("need at least one mode and one substep")
        if self.nu <= 0 or self.c < 0:
            raise ParameterError("need nu > 0 and c >= 0")
        if int(self.s) != self.s or self.s < 1:
            raise ParameterError("the power s must be a positive integer")
        j = np.arange(1, self.n_modes + 1)
        M = self.grid_factor * self.n_modes
        x = np.arange(1, M + 1) * np.pi / (M + 1)
        E = np.sqrt(2.0 / np.pi) * np.sin(np.outer(x, j))
        alpha = j.astype(float) ** 2
        dt = 1.0 / self.substeps
        lam = -(self.nu + 1j) * alpha
        object.__setattr__(self, "_cache", dict(
            alpha=alpha, grid=x, modes_on_grid=E, weight=np.pi / (M + 1),
            dt=dt, E1=np.exp(lam * dt), E2=np.exp(lam * dt / 2),
        ))

    @property
    def alpha(self) -> np.ndarray:
        return self._cache["alpha"]

    @property
    def kick_bounds(self) -> np.ndarray:
        """``b_j = kick_scale / j^2`` so that ``sum alpha_j b_j^2`` converges."""
        return self.kick_scale / self.alpha

    @property
    def dim_real(self) -> int:
        return 2 * self.n_modes


def to_complex(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = v.shape[-1] // 2
    return v[..., :n] + 1j * v[..., n:]


def to_real(u) -> np.ndarray:
    u = np.asarray(u, dtype=complex)
    return np.concatenate([u.real, u.imag], axis=-1)


def _synth(spec, u):
    return u @ spec._cache["modes_on_grid"].T


def _project(spec, f):
    C = spec._cache
    return C["weight"] * (f @ C["modes_on_grid"])


def _nonlinear(spec, u):
    if spec.c == 0:
        return np.zeros_like(u)
    g = _synth(spec, u)
    return _project(spec, -1j * spec.c * np.abs(g) ** (2 * spec.s) * g)


def _nonlinear_tangent(spec, u, d):
    """Derivative of the projected nonlinearity at ``u`` along ``d[..., k, :]``."""
    if spec.c == 0:
        return np.zeros_like(d)
    g = _synth(spec, u)[..., None, :]
    dg = _synth(spec, d)
    mod2 = np.abs(g) ** 2
    s = spec.s
    term = mod2**s * dg + s * mod2 ** (s - 1) * 2.0 * np.real(np.conj(g) * dg) * g
    return _project(spec, -1j * spec.c * term)


def cgl_free_flow(spec: CGLSpectralSpec, u, with_tangent: bool = False):
    """Time-one free flow of complex mode vectors ``u[..., N]``.

    With ``with_tangent`` the exact derivative of the discrete scheme is
    propagated along the ``2N`` real directions and returned as a real
    ``(2N, 2N)`` matrix per batch member.
    """
    C = spec._cache
    E1, E2, dt = C["E1"], C["E2"], C["dt"]
    u = np.array(u, dtype=complex)
    if with_tangent:
        eye = np.eye(spec.n_modes)
        d = np.broadcast_to(np.concatenate([eye, 1j * eye]), u.shape[:-1] + (2 * spec.n_modes, spec.n_modes)).copy()
    for _ in range(spec.substeps):
        a1 = u
        k1 = _nonlinear(spec, a1)
        a2 = E2 * (u + 0.5 * dt * k1)
        k2 = _nonlinear(spec, a2)
        a3 = E2 * u + 0.5 * dt * k2
        k3 = _nonlinear(spec, a3)
        a4 = E1 * u + dt * E2 * k3
        k4 = _nonlinear(spec, a4)
        if with_tangent:
            dk1 = _nonlinear_tangent(spec, a1, d)
            dk2 = _nonlinear_tangent(spec, a2, E2 * (d + 0.5 * dt * dk1))
            dk3 = _nonlinear_tangent(spec, a3, E2 * d + 0.5 * dt * dk2)
            dk4 = _nonlinear_tangent(spec, a4, E1 * d + dt * E2 * dk3)
            d = E1 * d + dt / 6.0 * (E1 * dk1 + 2 * E2 * dk2 + 2 * E2 * dk3 + dk4)
        u = E1 * u + dt / 6.0 * (E1 * k1 + 2 * E2 * k2 + 2 * E2 * k3 + k4)
    if not np.all(np.isfinite(u)):
        raise IntegratorBlowup("CGL free flow produced a non-finite state")
    if with_tangent:
        J = np.swapaxes(np.concatenate([d.real, d.imag], axis=-1), -1, -2)
        return u, J
    return u


def cgl_kick_step(spec: CGLSpectralSpec, u, eta) -> np.ndarray:
    """``S(u) + eta`` for complex mode vectors; ``eta`` should respect the kick bounds."""
    return cgl_free_flow(spec, u) + np.asarray(eta, dtype=complex)


def cgl_energy(spec: CGLSpectralSpec, u) -> np.ndarray:
    """``int |u_x|^2 / 2 + c |u|^{2s+2} / (2s+2)`` (exact quadrature for ``s = 1``)."""
    u = np.asarray(u, dtype=complex)
    kinetic = 0.5 * np.sum(spec.alpha * np.abs(u) ** 2, axis=-1)
    if spec.c == 0:
        return kinetic
    g = _synth(spec, u)
    pot = spec._cache["weight"] * np.sum(np.abs(g) ** (2 * spec.s + 2), axis=-1)
    return kinetic + spec.c / (2 * spec.s + 2) * pot


class CGLKickMap(TimeOneMap):
    """Kicked CGL as a map on real vectors of length ``2N``; ``D_eta S = I``."""

    def __init__(self, spec: CGLSpectralSpec | None = None):
        self.spec = CGLSpectralSpec() if spec is None else spec
        self.dim_state = self.dim_noise = self.spec.dim_real

    @property
    def state_labels(self):
        n = self.spec.n_modes
        return [f"re{j + 1}" for j in range(n)] + [f"im{j + 1}" for j in range(n)]

    @property
    def noise_bounds(self) -> np.ndarray:
        b = self.spec.kick_bounds
        return np.concatenate([b, b])

    def apply(self, u, eta):
        u, eta = self.check(u, eta)
        return to_real(cgl_free_flow(self.spec, to_complex(u))) + eta

    def jac_state(self, u, eta):
        u, eta = self.check(u, eta)
        shape = np.broadcast_shapes(u.shape[:-1], eta.shape[:-1])
        _, J = cgl_free_flow(self.spec, to_complex(np.broadcast_to(u, shape + u.shape[-1:])), with_tangent=True)
        return J

    def jac_noise(self, u, eta):
        u, eta = self.check(u, eta)
        shape = np.broadcast_shapes(u.shape[:-1], eta.shape[:-1])
        return np.broadcast_to(np.eye(self.dim_state), shape + (self.dim_state,) * 2).copy()

    def energy(self, u):
        return cgl_energy(self.spec, to_complex(u))
