"""Time-one maps ``S(u, eta)`` and model-independent hypothesis checkers."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import IntegratorBlowup, ShapeError

FD_STEP = 1e-6


def central_difference(fun, x, step: float = FD_STEP) -> np.ndarray:
    """Jacobian of ``fun`` at ``x`` by central differences (batched over leading axes)."""
    x = np.asarray(x, dtype=float)
    dim = x.shape[-1]
    eye = np.eye(dim) * step
    cols = [(fun(x + e) - fun(x - e)) / (2.0 * step) for e in eye]
    return np.stack(cols, axis=-1)


class TimeOneMap:
    """A map ``S(u, eta)`` on ``R^dim_state`` driven by noise vectors in ``R^dim_noise``.

    ``apply`` must broadcast over leading batch axes.  Jacobians default to
    central finite differences; subclasses override them with analytic forms.
    """

    dim_state: int
    dim_noise: int

    def apply(self, u, eta) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, u, eta):
        return self.apply(u, eta)

    def check(self, u, eta):
        u = np.asarray(u, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if u.shape[-1:] != (self.dim_state,) or eta.shape[-1:] != (self.dim_noise,):
            raise ShapeError(
                f"expected state dim {self.dim_state} and noise dim {self.dim_noise}, "
                f"got {u.shape[-1:]} and {eta.shape[-1:]}"
            )
        return u, eta

    def jac_state(self, u, eta) -> np.ndarray:
        return self.fd_jac_state(u, eta)

    def jac_noise(self, u, eta) -> np.ndarray:
        return self.fd_jac_noise(u, eta)

    def jacobians(self, u, eta):
        return self.jac_state(u, eta), self.jac_noise(u, eta)

    def fd_jac_state(self, u, eta, step: float = FD_STEP) -> np.ndarray:
        u, eta = self.check(u, eta)
        return central_difference(lambda x: self.apply(x, eta), u, step)

    def fd_jac_noise(self, u, eta, step: float = FD_STEP) -> np.ndarray:
        u, eta = self.check(u, eta)
        return central_difference(lambda y: self.apply(u, y), eta, step)

    def iterate(self, u, noises) -> np.ndarray:
        """Apply the map along ``noises[..., k, :]``; returns the path including ``u``."""
        u = np.asarray(u, dtype=float)
        noises = np.asarray(noises, dtype=float)
        path = [u]
        for k in range(noises.shape[-2]):
            u = self.apply(u, noises[..., k, :])
            if not np.all(np.isfinite(u)):
                raise IntegratorBlowup(f"non-finite state after step {k + 1}")
            path.append(u)
        return np.stack(path, axis=-2)

    @property
    def state_labels(self) -> list[str]:
        return [f"u{i}" for i in range(self.dim_state)]


def free_contraction_factor(smap: TimeOneMap, samples, k: int = 1) -> float:
    """``max ||S_k(u; 0)|| / ||u||`` over the sample states."""
    u = np.asarray(samples, dtype=float)
    norms = np.linalg.norm(u, axis=-1)
    if np.any(norms == 0):
        raise ValueError("sample set must not contain the origin")
    zero = np.zeros(u.shape[:-1] + (smap.dim_noise,))
    v = u
    for _ in range(k):
        v = smap.apply(v, zero)
    return float(np.max(np.linalg.norm(v, axis=-1) / norms))


def orthonormal_basis(G) -> np.ndarray:
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    if G.shape[1] == 0:
        return G
    q, r = np.linalg.qr(G)
    keep = np.abs(np.diag(r)) > 1e-12 * max(1.0, np.abs(r).max())
    return q[:, keep]


def projector(G, dim: int) -> np.ndarray:
    Q = orthonormal_basis(G) if np.size(G) else np.zeros((dim, 0))
    return Q @ Q.T


def determining_defect(smap: TimeOneMap, G, states, noises) -> float:
    """``max ||(I - P_G) D_u S(u, eta)||`` (spectral norm) over the sample pairs."""
    J = smap.jac_state(states, noises)
    P = projector(G, smap.dim_state)
    R = (np.eye(smap.dim_state) - P) @ J
    return float(np.max(np.linalg.norm(R, ord=2, axis=(-2, -1))))


@dataclass(frozen=True)
class AbsorptionReport:
    rho: float
    entry_times: dict
    stayed: bool
    rho_invariant: float = float("nan")


def _bounded_noise(rng, n: int, dim: int, bound: float) -> np.ndarray:
    e = rng.normal(size=(n, dim))
    return e * (bound * rng.uniform(size=(n, 1)) ** (1.0 / dim) / np.linalg.norm(e, axis=1, keepdims=True))


def _in_ball(rng, n: int, dim: int, radius: float, surface: bool = False) -> np.ndarray:
    d = rng.normal(size=(n, dim))
    r = radius if surface else radius * rng.uniform(size=(n, 1)) ** (1.0 / dim)
    return r * d / np.linalg.norm(d, axis=1, keepdims=True)


def _norm_history(smap: TimeOneMap, u, noise_bound: float, horizon: int, rng, what: str) -> np.ndarray:
    out = np.empty((horizon + 1, u.shape[0]))
    out[0] = np.linalg.norm(u, axis=1)
    for k in range(horizon):
        u = smap.apply(u, _bounded_noise(rng, u.shape[0], smap.dim_noise, noise_bound))
        if not np.all(np.isfinite(u)):
            raise IntegratorBlowup(f"non-finite state at step {k + 1} of the {what}")
        out[k + 1] = np.linalg.norm(u, axis=1)
    return out


def absorbing_set_estimate(smap: TimeOneMap, noise_bound: float, radii, rng, n_traj: int = 1000,
                           horizon: int = 200, margin: float = 0.05) -> AbsorptionReport:
    """Census of trajectories under noises with ``||eta|| <= noise_bound``.

    ``rho`` is the largest norm seen over the second half of all horizons,
    inflated by ``margin``.  The entry time for radius ``r`` is the first step
    after which every trajectory started on the sphere of radius ``r`` stays
    in ``B(rho)``.  The forward orbit of ``B(rho)`` is the invariant set; a
    Euclidean ball is generally not invariant itself, so ``rho_invariant``
    bounds the norm along trajectories started uniformly in ``B(rho)``.
    """
    radii = [float(r) for r in radii]
    dim_s = smap.dim_state
    norms = {r: _norm_history(smap, _in_ball(rng, n_traj, dim_s, r, surface=True), noise_bound, horizon, rng,
                              "absorption census") for r in radii}
    rho = (1.0 + margin) * max(float(n[horizon // 2 :].max()) for n in norms.values())
    orbit = _norm_history(smap, _in_ball(rng, n_traj, dim_s, rho), noise_bound, horizon, rng, "orbit of B(rho)")
    rho_inv = (1.0 + margin) * max(rho, float(orbit.max()))
    entry, stayed = {}, True
    for r, n in norms.items():
        outside = np.flatnonzero(np.any(n > rho, axis=1))
        t = int(outside[-1] + 1) if outside.size else 0
        entry[r] = t
        stayed &= t <= horizon // 2
    return AbsorptionReport(rho, entry, bool(stayed), rho_inv)


def write_trajectory_csv(path, states, labels=None) -> Path:
    """Dump a trajectory ``states[k, :]`` as CSV with columns ``step, <labels>``."""
    states = np.asarray(states, dtype=float)
    labels = labels or [f"u{i}" for i in range(states.shape[1])]
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *labels])
        for k, row in enumerate(states):
            w.writerow([k, *(repr(float(v)) for v in row)])
    return path
