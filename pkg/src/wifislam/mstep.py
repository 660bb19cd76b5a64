"""Closed-form penalized M-step and the block criterion it maximizes.

For one AP with occupancy weights A = diag(S1_j), weighted signal sums
b = S2_j, log-distance design D_j and prior precision P, the maximizer of
the penalized block criterion at fixed sigma2 profiles delta out of the
(c1, c2) regression:

    M0 = A + (sigma2 / n) P
    delta(u) = M0^{-1} (b - A u),  u = c1 1 + c2 D
    stationarity over span{1, D}:  v' M1 u = v' M2 b  for v in {1, D}

with M1 = A (I - M0^{-1} A) and M2 = I - A M0^{-1}, i.e. the 2x2 system

    [W1 W2; W2 W3] [c1; c2] = [1' M2 b; D' M2 b],   d = W1 W3 - W2^2.

sigma2 then updates in closed form as the mean over APs of
R_j = F_j' A F_j - 2 b' F_j + S3_j. Because M0 itself contains sigma2, the
sweep is iterated to a fixed point (secant-accelerated, bisection fallback)
so the returned parameters are a joint stationary point of the criterion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.linalg import LinAlgError
from scipy.linalg import cho_factor, cho_solve

from .grid import ParameterError
from .propagation import PerturbationPrior, Theta
from .stats import SufficientStats

SIGMA2_FLOOR = 1e-6


def penalized_Q(theta, stats: SufficientStats, n, prior: PerturbationPrior,
                penalty_n: float | None = None) -> float:
    """Penalized intermediate quantity (up to an additive constant).

    theta may be a Theta or a (c1, c2, delta, sigma2) tuple; the tuple form
    exists so finite-difference probes can step outside Theta's validation.
    `n` weights the prior penalty (1/n by default; pass penalty_n to inspect
    the n+1 variant).
    """
    if isinstance(theta, Theta):
        c1, c2, delta, sigma2 = theta.c1, theta.c2, theta.delta, theta.sigma2
        f = theta.F
    else:
        c1, c2, delta, sigma2 = theta
        c1 = np.atleast_1d(np.asarray(c1, dtype=np.float64))
        c2 = np.atleast_1d(np.asarray(c2, dtype=np.float64))
        delta = np.atleast_2d(np.asarray(delta, dtype=np.float64))
        f = c1[:, None] + c2[:, None] * prior.grid.log_distances + delta
    if sigma2 <= 0:
        raise ParameterError(f"sigma2 must be positive, got {sigma2}")
    pen_n = float(n) if penalty_n is None else float(penalty_n)
    b = stats.n_aps
    penalty = -0.5 / pen_n * float(np.einsum("jx,xy,jy->", delta, prior.precision, delta))
    bracket = stats.s3 - 2.0 * np.sum(stats.s2 * f, axis=1) + np.sum(stats.s1 * f * f, axis=1)
    return penalty - 0.5 * b * np.log(sigma2) - float(bracket.sum()) / (2.0 * sigma2)


@dataclass
class MStepResult:
    theta: Theta
    frozen_aps: list[int] = field(default_factory=list)
    sigma2_clamped: bool = False
    sweeps: int = 0
    converged: bool = True


def _solve_aps(stats: SufficientStats, pen_n: np.ndarray, sigma2: float,
               prior: PerturbationPrior, theta_prev: Theta, aps: np.ndarray):
    """Per-AP closed-form solve at a fixed sigma2.

    Returns (c1, c2, delta, R) for the requested APs plus the frozen list.
    The Cholesky factor of M0 is reused across APs whose occupancy vector
    and penalty weight are bitwise identical (always true in full-visibility
    mode), which never changes the numbers, only skips redundant work.
    """
    grid = theta_prev.grid
    p_mat = prior.precision
    c1 = np.empty(len(aps))
    c2 = np.empty(len(aps))
    delta = np.empty((len(aps), grid.n_cells))
    resid = np.empty(len(aps))
    frozen: list[int] = []

    chol = None
    chol_key: tuple | None = None
    for i, j in enumerate(aps):
        a_j = stats.s1[j]
        gamma = sigma2 / pen_n[j]
        if chol is None or not (chol_key[0] == gamma and np.array_equal(chol_key[1], a_j)):
            m0 = gamma * p_mat
            m0[np.diag_indices_from(m0)] += a_j
            try:
                chol = cho_factor(m0, lower=True)
            except LinAlgError:
                m0[np.diag_indices_from(m0)] += 1e-12 * np.trace(m0)
                chol = cho_factor(m0, lower=True)
            chol_key = (gamma, a_j.copy())
        d_j = grid.log_distances[j]
        b_j = stats.s2[j]
        rhs = np.stack([a_j, a_j * d_j, b_j], axis=1)
        t = cho_solve(chol, rhs)  # columns: M0^-1 A1, M0^-1 AD, M0^-1 b
        t1, t2, t3 = t[:, 0], t[:, 1], t[:, 2]

        w1 = float(a_j.sum() - a_j @ t1)
        w2 = float(a_j @ d_j - a_j @ t2)
        w3 = float(a_j @ (d_j * d_j) - (a_j * d_j) @ t2)
        r1 = float(b_j.sum() - a_j @ t3)
        r2 = float(d_j @ b_j - (a_j * d_j) @ t3)
        det = w1 * w3 - w2 * w2
        if det <= 1e-12 * max(abs(w1 * w3), 1e-300):
            # collinear design (occupancy mass on one distance ring)
            c1[i], c2[i] = theta_prev.c1[j], theta_prev.c2[j]
            frozen.append(int(j))
        else:
            c1[i] = (w3 * r1 - w2 * r2) / det
            c2[i] = (w1 * r2 - w2 * r1) / det
        delta[i] = t3 - c1[i] * t1 - c2[i] * t2
        f_j = c1[i] + c2[i] * d_j + delta[i]
        resid[i] = float(f_j @ (a_j * f_j) - 2.0 * (b_j @ f_j) + stats.s3[j])
    return c1, c2, delta, resid, frozen


def m_step(stats: SufficientStats, n, prior: PerturbationPrior, theta_prev: Theta,
           estimate_sigma2: bool = True, penalty_n_plus_one: bool = False,
           ap_subset=None, tol: float = 1e-10, max_sweeps: int = 100) -> MStepResult:
    """Maximize the penalized block criterion given sufficient statistics.

    n is the block observation count (scalar, or per-AP array in partial
    mode); theta_prev supplies the sigma2 seed and the freeze values for
    collinear APs. Only APs in `ap_subset` update; the rest keep theta_prev's
    values. With estimate_sigma2=False the previous variance is kept and a
    single closed-form pass is exact.
    """
    b = stats.n_aps
    aps = np.arange(b) if ap_subset is None else np.asarray(sorted(ap_subset), dtype=np.int64)
    n_arr = np.broadcast_to(np.asarray(n, dtype=np.float64), (b,))
    if np.any(n_arr[aps] <= 0):
        raise ParameterError("block observation count must be positive")
    pen_n = n_arr + 1.0 if penalty_n_plus_one else n_arr

    def sweep(sigma2: float):
        return _solve_aps(stats, pen_n, sigma2, prior, theta_prev, aps)

    if not estimate_sigma2:
        c1, c2, delta, resid, frozen = sweep(theta_prev.sigma2)
        sigma2 = theta_prev.sigma2
        sweeps, converged, clamped = 1, True, False
    else:
        def h(sigma2: float) -> tuple[float, tuple]:
            sol = sweep(sigma2)
            return float(np.mean(sol[3])), sol

        x = float(theta_prev.sigma2)
        hx, sol = h(x)
        sweeps, converged, clamped = 1, False, False
        x_prev, f_prev = x, hx - x
        for _ in range(max_sweeps - 1):
            if abs(hx - x) <= tol * max(1.0, abs(x)):
                converged = True
                break
            if hx <= SIGMA2_FLOOR:
                clamped = True
                x_new = SIGMA2_FLOOR
            elif sweeps >= 2 and abs((hx - x) - f_prev) > 1e-300 and x != x_prev:
                # secant step on f(s) = h(s) - s
                x_new = x - (hx - x) * (x - x_prev) / ((hx - x) - f_prev)
                if not (x_new > 0) or not np.isfinite(x_new):
                    x_new = hx
            else:
                x_new = hx
            x_prev, f_prev = x, hx - x
            x = float(x_new)
            hx, sol = h(x)
            sweeps += 1
            if clamped:
                break
        if not converged and not clamped:
            x, hx, sol, n_bis = _bisect_fixed_point(h, x)
            sweeps += n_bis
            converged = abs(hx - x) <= 1e-8 * max(1.0, abs(x))
        sigma2 = hx
        if clamped or sigma2 <= SIGMA2_FLOOR:
            sigma2 = SIGMA2_FLOOR
            clamped = True
            converged = True
        c1, c2, delta, resid, frozen = sol

    new_c1 = theta_prev.c1.copy()
    new_c2 = theta_prev.c2.copy()
    new_delta = theta_prev.delta.copy()
    new_c1[aps] = c1
    new_c2[aps] = c2
    new_delta[aps] = delta
    theta = Theta(theta_prev.grid, new_c1, new_c2, new_delta, sigma2)
    return MStepResult(theta=theta, frozen_aps=frozen, sigma2_clamped=clamped,
                       sweeps=sweeps, converged=converged)


def _bisect_fixed_point(h, x0: float, max_iter: int = 200):
    """Bisection fallback for sigma2 = h(sigma2) when iteration stalls."""
    lo = SIGMA2_FLOOR
    f_lo, sol_lo = h(lo)
    f_lo -= lo
    n_eval = 1
    if f_lo <= 0:
        return lo, f_lo + lo, sol_lo, n_eval
    hi = max(2.0 * x0, 1.0)
    f_hi, sol_hi = h(hi)
    f_hi -= hi
    n_eval += 1
    while f_hi > 0 and hi < 1e12:
        hi *= 4.0
        f_hi, sol_hi = h(hi)
        f_hi -= hi
        n_eval += 1
    x, fx, sol = hi, f_hi, sol_hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid, sol = h(mid)
        f_mid -= mid
        n_eval += 1
        x, fx = mid, f_mid
        if abs(f_mid) <= 1e-12 * max(1.0, mid):
            break
        if f_mid > 0:
            lo = mid
        else:
            hi = mid
    return x, fx + x, sol, n_eval
