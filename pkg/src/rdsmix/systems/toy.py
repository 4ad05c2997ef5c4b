"""Small closed-form systems used as oracles."""

from __future__ import annotations

import numpy as np

from .base import TimeOneMap


class LinearMap(TimeOneMap):
    """``S(u, eta) = A u + eta``."""

    def __init__(self, A):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        self.A = A
        self.dim_state = self.dim_noise = A.shape[0]

    def apply(self, u, eta):
        u, eta = self.check(u, eta)
        return u @ self.A.T + eta

    def jac_state(self, u, eta):
        u, eta = self.check(u, eta)
        return np.broadcast_to(self.A, np.broadcast_shapes(u.shape[:-1], eta.shape[:-1]) + self.A.shape).copy()

    def jac_noise(self, u, eta):
        u, eta = self.check(u, eta)
        shape = np.broadcast_shapes(u.shape[:-1], eta.shape[:-1])
        return np.broadcast_to(np.eye(self.dim_state), shape + self.A.shape).copy()


class ScalarNonlinearMap(TimeOneMap):
    """``S(u, eta) = c tanh(u) + eta + beta sin(eta) cos(u)`` on the line.

    With ``beta = 0`` this is a contraction with constant ``c`` and unit noise
    Jacobian; ``beta != 0`` makes ``D_u S`` depend on the noise, so the
    control shift is a genuinely nonlinear function of the noise.
    """

    dim_state = 1
    dim_noise = 1

    def __init__(self, contraction: float = 0.5, beta: float = 0.0):
        self.contraction = float(contraction)
        self.beta = float(beta)

    def apply(self, u, eta):
        u, eta = self.check(u, eta)
        return self.contraction * np.tanh(u) + eta + self.beta * np.sin(eta) * np.cos(u)

    def jac_state(self, u, eta):
        u, eta = self.check(u, eta)
        d = self.contraction / np.cosh(u) ** 2 - self.beta * np.sin(eta) * np.sin(u)
        return d[..., None]

    def jac_noise(self, u, eta):
        u, eta = self.check(u, eta)
        d = 1.0 + self.beta * np.cos(eta) * np.cos(u)
        return d[..., None]
