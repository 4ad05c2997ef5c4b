"""Coupling operators on the lifted space ``state x noise past``.

A close pair ``(U, U')`` is coupled by drawing ``zeta ~ Q(xi)``, pushing it
through ``Psi(zeta) = zeta + Phi(v, v', zeta)`` and maximally coupling the
law of ``Psi(zeta)`` with ``Q(xi')``.  On the meeting event the second copy
uses the controlled noise and the states squeeze; otherwise it is drawn from
the residual law, so both marginals are exactly the one-step transitions.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .control import ControlShift, select_regularization, squeezing_certificate
from .errors import InfeasibleError, SamplerError, ShapeError
from .noise import NoiseKernel, PastWindow, append_past, noise_lift_step, past_distance, sample_kernel
from .systems.base import TimeOneMap

log = logging.getLogger(__name__)

FD_DET_STEP = 1e-7
INVERSE_TOL = 1e-13
INVERSE_MAXITER = 60
RESIDUAL_BLOCK = 2048


@dataclass(frozen=True)
class LiftedState:
    """Point ``U = (v, xi)`` of the lifted space; both parts may carry the same batch axes."""

    state: np.ndarray
    past: PastWindow

    def __post_init__(self):
        object.__setattr__(self, "state", np.asarray(self.state, dtype=float))

    def __getitem__(self, idx) -> LiftedState:
        return LiftedState(self.state[idx], self.past[idx])

    @property
    def batch_shape(self):
        return self.state.shape[:-1]


@dataclass(frozen=True)
class CouplingParams:
    theta: float
    L: float
    delta_reg: float
    eps: float = 0.05
    q: float = 0.5
    N: float = float("nan")


def lifted_distance(U: LiftedState, U2: LiftedState, L: float):
    """``L |v - v'| + d(xi, xi')``."""
    out = L * np.linalg.norm(U.state - U2.state, axis=-1) + past_distance(U.past, U2.past)
    return out[()] if np.ndim(out) == 0 else out


class LiftedSystem:
    """Markov lift ``(v, xi) -> (S(v, eta), xi eta)`` with ``eta ~ Q(xi; .)``."""

    def __init__(self, smap: TimeOneMap, kernel: NoiseKernel):
        if smap.dim_noise != kernel.dim:
            raise ShapeError(f"map expects noise dim {smap.dim_noise}, kernel produces {kernel.dim}")
        self.smap = smap
        self.kernel = kernel

    def transition(self, U: LiftedState, eta) -> LiftedState:
        return LiftedState(self.smap.apply(U.state, eta), append_past(U.past, eta, support=self.kernel.support))

    def step(self, U: LiftedState, rng) -> LiftedState:
        return self.transition(U, sample_kernel(self.kernel, U.past, rng))


def simulate_lifted(system: LiftedSystem, U0: LiftedState, steps: int, rng) -> np.ndarray:
    """State path ``v_0..v_steps`` obtained by iterating the lift."""
    U = U0
    path = [U.state]
    for _ in range(steps):
        U = system.step(U, rng)
        path.append(U.state)
    return np.stack(path, axis=-2)


def simulate_direct(smap: TimeOneMap, kernel: NoiseKernel, v0, past0: PastWindow, steps: int, rng) -> np.ndarray:
    """State path from first generating the noise sequence, then iterating ``S`` along it."""
    past = past0
    noises = []
    for _ in range(steps):
        past = noise_lift_step(past, kernel, rng)
        noises.append(past.latest)
    noises = np.stack(noises, axis=-2) if noises else np.zeros(np.shape(v0)[:-1] + (0, kernel.dim))
    return smap.iterate(v0, noises)


def tv_distance_densities(p, q, grid, weights=None) -> float:
    """``0.5 * int |p - q|`` by quadrature (trapezoid on a 1-D grid, or explicit weights)."""
    grid = np.asarray(grid, dtype=float)
    pv = p(grid) if callable(p) else np.asarray(p, dtype=float)
    qv = q(grid) if callable(q) else np.asarray(q, dtype=float)
    diff = np.abs(pv - qv)
    if weights is not None:
        return float(0.5 * np.sum(diff * weights))
    if grid.ndim != 1:
        raise ShapeError("multi-dimensional grids need explicit quadrature weights")
    return float(min(1.0, 0.5 * np.trapezoid(diff, grid)))


def maximal_coupling_conditional(x, p, q, q_sampler, rng, max_attempts: int = 100_000):
    """Couple a draw ``x ~ p`` with a draw from ``q`` maximally.

    ``p`` and ``q`` are density callables (batched), ``q_sampler(rng, k)``
    returns ``k`` draws from ``q``.  Returns ``(y, met)``; ``P(met) = 1 - TV``.
    """
    x = np.asarray(x, dtype=float)
    px, qx = p(x), q(x)
    met = rng.uniform(size=px.shape) * px <= qx
    y = x.copy()
    pending = np.flatnonzero(~met)
    attempts = 0
    while pending.size:
        if attempts >= max_attempts:
            raise SamplerError(f"residual sampler failed after {attempts} rounds")
        cand = np.asarray(q_sampler(rng, pending.size), dtype=float)
        ratio = p(cand) / q(cand)
        accept = rng.uniform(size=pending.size) < 1.0 - ratio
        y[pending[accept]] = cand[accept]
        pending = pending[~accept]
        attempts += 1
    return y, met


# ---------------------------------------------------------------------------
# the coupling step

class Pushforward:
    """Law of ``Psi(zeta) = zeta + Phi(v, v', zeta)`` for ``zeta ~ Q(xi)`` (batched over pairs)."""

    def __init__(self, shift: ControlShift, kernel: NoiseKernel, v, v2, past: PastWindow):
        self.shift = shift
        self.kernel = kernel
        self.v = np.asarray(v, dtype=float)
        self.v2 = np.asarray(v2, dtype=float)
        self.past = past

    def phi(self, zeta):
        return self.shift(self.v, self.v2, zeta)

    def __call__(self, zeta):
        return zeta + self.phi(zeta)

    def log_abs_det(self, zeta, phi0=None):
        """``log |det(I + D Phi)|`` on ``F_n`` by forward differences."""
        zeta = np.asarray(zeta, dtype=float)
        n = self.shift.n
        phi0 = self.phi(zeta) if phi0 is None else phi0
        h = FD_DET_STEP * np.maximum(1.0, np.abs(zeta[..., :n]))
        pert = np.repeat(zeta[..., None, :], n, axis=-2)
        idx = np.arange(n)
        pert[..., idx, idx] += h
        v = self.v[..., None, :]
        v2 = self.v2[..., None, :]
        cols = (self.shift(v, v2, pert)[..., :n] - phi0[..., None, :n]) / h[..., :, None]
        Jm = np.eye(n) + np.swapaxes(cols, -1, -2)
        return np.linalg.slogdet(Jm)[1]

    def density_at_preimage(self, zeta, phi0=None):
        """Density of ``Psi(zeta)`` under the pushforward, in terms of the preimage."""
        return self.kernel.density(self.past, zeta) * np.exp(-self.log_abs_det(zeta, phi0))

    def inverse(self, y):
        """Fixed point ``z = y - Phi(z)``; returns ``(z, converged)``."""
        y = np.asarray(y, dtype=float)
        z = y - self.phi(y)
        ok = np.zeros(y.shape[:-1], dtype=bool)
        for _ in range(INVERSE_MAXITER):
            z_new = y - self.phi(z)
            ok = np.all(np.abs(z_new - z) <= INVERSE_TOL * (1.0 + np.abs(z)), axis=-1)
            z = z_new
            if ok.all():
                break
        return z, ok & np.all(np.isfinite(z), axis=-1)

    def density(self, y):
        """Pushforward density at ``y`` (``nan`` where the inverse did not converge)."""
        z, ok = self.inverse(y)
        out = self.density_at_preimage(z)
        return np.where(ok, out, np.nan)


@dataclass
class StepStats:
    distance_before: np.ndarray
    distance_after: np.ndarray
    close: np.ndarray
    met: np.ndarray
    squeezed: np.ndarray
    degraded: np.ndarray
    noise: np.ndarray
    noise2: np.ndarray


def _select(P: PastWindow, idx) -> PastWindow:
    return PastWindow(P.entries[idx], P.base)


def coupling_step(U: LiftedState, U2: LiftedState, smap: TimeOneMap, kernel: NoiseKernel, params: CouplingParams,
                  rng, shift: ControlShift | None = None, max_rounds: int = 100_000):
    """One application of the coupling operators to a batch of pairs ``U[i], U2[i]``.

    Returns ``(U_next, U2_next, StepStats)``.
    """
    if U.state.ndim != 2:
        raise ShapeError("coupling_step expects a batch of pairs with state shape (P, dim)")
    shift = ControlShift(smap, params.delta_reg, split=kernel.split) if shift is None else shift
    P = U.state.shape[0]
    d0 = np.atleast_1d(lifted_distance(U, U2, params.L))
    close = d0 <= params.theta
    zeta = sample_kernel(kernel, U.past, rng)
    zeta2 = np.empty_like(zeta)
    met = np.zeros(P, dtype=bool)
    degraded = np.zeros(P, dtype=bool)

    far = np.flatnonzero(~close)
    if far.size:
        zeta2[far] = sample_kernel(kernel, _select(U2.past, far), rng)

    near = np.flatnonzero(close)
    if near.size:
        pf = Pushforward(shift, kernel, U.state[near], U2.state[near], _select(U.past, near))
        past2 = _select(U2.past, near)
        z = zeta[near]
        phi0 = pf.phi(z)
        x = z + phi0
        p_x = pf.density_at_preimage(z, phi0)
        q_x = kernel.density(past2, x)
        hit = rng.uniform(size=near.size) * p_x <= q_x
        zeta2[near[hit]] = x[hit]
        met[near[hit]] = True

        # Residual law by rejection from Q(xi').  Each round proposes a block
        # of k candidates per pending pair and keeps the first acceptance,
        # which is the same law as one-at-a-time rejection.
        pending = np.flatnonzero(~hit)
        rounds, k = 0, 2
        while pending.size:
            if rounds >= max_rounds:
                raise SamplerError(f"residual sampler failed after {rounds} rounds")
            rep = np.repeat(pending, k)
            sub = Pushforward(shift, kernel, pf.v[rep], pf.v2[rep], _select(pf.past, rep))
            sub_past2 = _select(past2, rep)
            y = sample_kernel(kernel, sub_past2, rng)
            p_y = sub.density(y)
            q_y = kernel.density(sub_past2, y)
            u = rng.uniform(size=rep.size)
            bad = ~np.isfinite(p_y)
            event = (bad | (u < 1.0 - np.where(bad, 0.0, p_y) / q_y)).reshape(pending.size, k)
            done = event.any(axis=1)
            pick = np.flatnonzero(done) * k + np.argmax(event[done], axis=1)
            if bad[pick].any():
                log.warning("pushforward inverse failed for %d pair(s); using an independent draw",
                            int(bad[pick].sum()))
                degraded[near[pending[done][bad[pick]]]] = True
            zeta2[near[pending[done]]] = y[pick]
            pending = pending[~done]
            rounds += 1
            k = min(2 * k, max(2, RESIDUAL_BLOCK // max(pending.size, 1)))

    U_next = LiftedState(smap.apply(U.state, zeta), append_past(U.past, zeta))
    U2_next = LiftedState(smap.apply(U2.state, zeta2), append_past(U2.past, zeta2))
    d1 = np.atleast_1d(lifted_distance(U_next, U2_next, params.L))
    squeezed = close & (d1 <= params.q * d0)
    return U_next, U2_next, StepStats(d0, d1, close, met, squeezed, degraded, zeta, zeta2)


@dataclass
class CouplingStats:
    """Per-step records of an ensemble of coupled paths (arrays indexed ``[step, pair]``)."""

    distances: np.ndarray
    met: np.ndarray
    squeezed: np.ndarray
    close: np.ndarray

    @property
    def geometric_event(self) -> np.ndarray:
        """Pairs whose distance satisfied ``d_k <= q^k d_0`` at every step (all squeezed)."""
        return np.all(self.squeezed, axis=0)

    def write_csv(self, path) -> Path:
        path = Path(path)
        K, P = self.met.shape
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair", "step", "distance", "met", "squeezed"])
            for i in range(P):
                w.writerow([i, 0, repr(float(self.distances[0, i])), "", ""])
                for k in range(K):
                    w.writerow([i, k + 1, repr(float(self.distances[k + 1, i])),
                                int(self.met[k, i]), int(self.squeezed[k, i])])
        return path


def iterate_coupling(U: LiftedState, U2: LiftedState, smap: TimeOneMap, kernel: NoiseKernel,
                     params: CouplingParams, k_max: int, rng, shift: ControlShift | None = None):
    """Apply :func:`coupling_step` ``k_max`` times; returns final pairs and :class:`CouplingStats`."""
    shift = ControlShift(smap, params.delta_reg, split=kernel.split) if shift is None else shift
    dists = [np.atleast_1d(lifted_distance(U, U2, params.L))]
    met, sq, close = [], [], []
    for _ in range(k_max):
        U, U2, st = coupling_step(U, U2, smap, kernel, params, rng, shift)
        dists.append(st.distance_after)
        met.append(st.met)
        sq.append(st.squeezed)
        close.append(st.close)
    stats = CouplingStats(np.array(dists), np.array(met).reshape(k_max, -1), np.array(sq).reshape(k_max, -1),
                          np.array(close).reshape(k_max, -1))
    return U, U2, stats


def kantorovich_estimate(cost, U: LiftedState, U2: LiftedState, rematch: bool = False) -> float:
    """Upper bound on ``K_F`` from paired samples (the pairing is a transport plan).

    With ``rematch`` the pairing is replaced by an optimal assignment for the
    empirical cost matrix, which can only lower the bound.
    """
    n = U.state.shape[0]
    if U2.state.shape[0] != n:
        raise ShapeError("equal sample counts required")
    paired = float(np.mean(cost(U, U2)))
    if not rematch or n < 2:
        return paired
    C = np.empty((n, n))
    for i in range(n):
        Ui = LiftedState(np.broadcast_to(U.state[i], U2.state.shape),
                         PastWindow(np.broadcast_to(U.past.entries[i], U2.past.entries.shape), U.past.base))
        C[i] = cost(Ui, U2)
    r, c = linear_sum_assignment(C)
    return min(paired, float(C[r, c].mean()))


def lifted_cost(L: float):
    """``F = d_X`` with state weight ``L`` (picklable)."""
    return _LiftedCost(L)


@dataclass(frozen=True)
class _LiftedCost:
    L: float

    def __call__(self, U, U2):
        return lifted_distance(U, U2, self.L)


def pushforward_tv(shift: ControlShift, kernel: NoiseKernel, past: PastWindow, v, v2, grid) -> float:
    """Quadrature TV between ``Q(xi)`` and its image under ``Psi`` (1-D noise)."""
    if kernel.dim != 1:
        raise ShapeError("pushforward TV by quadrature is implemented for 1-D noise")
    grid = np.asarray(grid, dtype=float)
    y = grid[:, None]
    vv = np.broadcast_to(np.asarray(v, dtype=float), (grid.size, shift.smap.dim_state))
    vv2 = np.broadcast_to(np.asarray(v2, dtype=float), (grid.size, shift.smap.dim_state))
    pf = Pushforward(shift, kernel, vv, vv2, past)
    p_push = pf.density(y)
    if not np.all(np.isfinite(p_push)):
        raise SamplerError("pushforward inverse failed on the quadrature grid")
    return tv_distance_densities(kernel.density(past, y), p_push, grid)


# ---------------------------------------------------------------------------
# tuning

@dataclass(frozen=True)
class TuningReport:
    params: CouplingParams
    q_prime: float
    C_prime: float
    kappa: float
    residual: float
    miss_distances: tuple
    miss_rates: tuple
    miss_counts: tuple
    n_pairs: int
    halvings: int

    @property
    def satisfied(self) -> bool:
        p = self.params
        return bool(p.q < 1 and p.N * p.theta < 1 - p.q)


def pairs_at_distance(states, pasts: PastWindow, d: float, L: float, rng) -> tuple[LiftedState, LiftedState]:
    """Pairs sharing the past, with states offset by ``d / L`` in a random direction."""
    states = np.asarray(states, dtype=float)
    u = rng.normal(size=states.shape)
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    return LiftedState(states, pasts), LiftedState(states + (d / L) * u, pasts)


def miss_statistics(smap, kernel, params, shift, states, pasts, distances, rng):
    """Fraction of pairs at each lifted distance whose one-step distance did not contract by ``q``."""
    rates, counts = [], []
    for d in distances:
        U, U2 = pairs_at_distance(states, pasts, d, params.L, rng)
        _, _, st = coupling_step(U, U2, smap, kernel, params, rng, shift)
        misses = int(np.sum(~st.squeezed))
        counts.append(misses)
        rates.append(misses / st.squeezed.size)
    return np.array(rates), np.array(counts)


def fit_miss_slope(distances, rates, n: int, z: float = 3.0) -> float:
    """Slope through the origin of miss rate against distance, plus ``z`` standard errors."""
    d = np.asarray(distances, dtype=float)
    r = np.asarray(rates, dtype=float)
    slope = float(d @ r / (d @ d))
    var = np.maximum(r * (1 - r), 1.0 / n) / n
    se = float(np.sqrt(np.sum(d**2 * var)) / (d @ d))
    return slope + z * se


def tune_coupling(smap: TimeOneMap, kernel: NoiseKernel, states, pasts: PastWindow, noises, rng, eps: float = 0.05,
                  G=None, pair_scale: float = 1e-2, n_pairs: int | None = None, max_halvings: int = 12,
                  theta0: float | None = None) -> TuningReport:
    """Measure ``delta_reg, q', C'`` and choose ``(L, q, theta, N)``.

    ``states``/``pasts`` are base points for the miss-rate measurement;
    ``noises`` are the noise samples paired with ``states`` for the
    regularization and squeezing grids.
    """
    states = np.asarray(states, dtype=float)
    noises = np.asarray(noises, dtype=float)
    Je = smap.jac_noise(states, noises)[..., : kernel.split]
    delta = select_regularization(Je, G, eps).delta
    shift = ControlShift(smap, delta, G, kernel.split)
    dirs = rng.normal(size=states.shape)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    rep = squeezing_certificate(shift, states, states + pair_scale * dirs, noises)
    if rep.q_prime >= 1:
        raise InfeasibleError(f"measured squeezing constant q' = {rep.q_prime:.3g} is not below 1")
    # Grow L until the shift term no longer dominates the contraction factor.
    target = 1.0 / kernel.base if rep.q_prime < 1.0 / kernel.base else 0.5 * (1.0 + rep.q_prime)
    L = 1.0
    while rep.C_prime / L + rep.q_prime > target:
        L *= 2
    q = max(1.0 / kernel.base, rep.C_prime / L + rep.q_prime)
    theta = 0.1 / L if theta0 is None else theta0
    params = CouplingParams(theta=theta, L=L, delta_reg=delta, eps=eps, q=q)
    n = states.shape[0] if n_pairs is None else n_pairs
    idx = np.arange(states.shape[0])[:n]
    N_hat, rates, counts, dists = np.inf, None, None, None
    halvings = 0
    while True:
        if not (np.isfinite(N_hat) and N_hat * params.theta >= 1 - q):
            dists = params.theta * np.array([0.125, 0.25, 0.5])
            rates, counts = miss_statistics(smap, kernel, params, shift, states[idx], pasts[idx], dists, rng)
            N_hat = fit_miss_slope(dists, rates, idx.size)
            if N_hat * params.theta < 1 - q:
                break
        if halvings >= max_halvings:
            break
        params = replace(params, theta=params.theta / 2)
        halvings += 1
    params = replace(params, N=float(N_hat))
    return TuningReport(params, rep.q_prime, rep.C_prime, rep.kappa, rep.residual, tuple(dists), tuple(rates),
                        tuple(int(c) for c in counts), int(idx.size), halvings)
