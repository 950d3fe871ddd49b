"""Finite-rank projections of the watched kernel and the reduced N-state chain.

Everything here lives on the index set of the metastable union M.  Measures
are row vectors, test functions column vectors; the projector on the top-N
invariant subspaces is assembled from the binormalized eigenpairs, and the
(mu_i, psi_j) basis makes the reduced matrix an exact N x N compression of
the truncated kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (BasisDegenerate, NegativeEntry, NeumannDiverged,
                     NumericError, Overflow, ThetaTooLarge)
from .spectral import solve_qsd

BIORTH_TOL = 1e-8
COMPLETENESS_TOL = 1e-6
ROW_SUM_TOL = 1e-10
CLAMP_FLOOR = -1e-8
NEUMANN_TOL = 1e-14
SQUARING_DRIFT_TOL = 1e-12


def choose_m(sigma, theta, h0=None):
    """Time dilution m = ceil(exp(theta / sigma^2))."""
    if h0 is not None and not (0.0 < theta < h0):
        raise ThetaTooLarge(f"theta = {theta} not in (0, H0 = {h0})")
    if theta <= 0:
        raise ThetaTooLarge("theta must be positive")
    ratio = theta / sigma ** 2
    if ratio > 600.0:
        raise Overflow(f"theta/sigma^2 = {ratio:.1f} > 600; m unrepresentable")
    return int(math.ceil(math.exp(ratio)))


def default_theta(h0, sigma):
    """min(H0/4, sigma^2 ln 1e6): keeps m <= 1e6 and theta well below H0."""
    return min(h0 / 4.0, sigma ** 2 * math.log(1e6))


def ball_local_indices(trace_on_m, ball_grid_indices):
    """Positions of each ball's grid indices inside the M kernel domain."""
    return [trace_on_m.local_indices(np.asarray(b, int))
            for b in ball_grid_indices]


def solve_all_qsds(trace_on_m, ball_grid_indices):
    return [solve_qsd(trace_on_m, b, ball_index=i)
            for i, b in enumerate(ball_grid_indices)]


def build_pstar(trace_on_m, ball_grid_indices, qsds=None):
    """Hop matrix P*_ij = P^{QSD_i}[first watched step lands in ball j]."""
    if qsds is None:
        qsds = solve_all_qsds(trace_on_m, ball_grid_indices)
    local = ball_local_indices(trace_on_m, ball_grid_indices)
    n = len(local)
    size = trace_on_m.size
    pstar = np.zeros((n, n))
    for i in range(n):
        row = np.zeros(size)
        row[local[i]] = qsds[i].qsd
        pushed = row @ trace_on_m.matrix
        for j in range(n):
            pstar[i, j] = pushed[local[j]].sum()
    if np.abs(pstar.sum(axis=1) - 1.0).max() > ROW_SUM_TOL:
        raise NumericError("P* rows must sum to 1 (trace kernel is stochastic)")
    return pstar, qsds


@dataclass(frozen=True)
class Projectors:
    """Spectral projector Pi0, QSD projector Pi*, and the (mu, psi) basis."""

    pi0: np.ndarray         # (|M|, |M|)
    pistar: np.ndarray      # (|M|, |M|)
    mu: np.ndarray          # (N, |M|) rows are signed measures
    psi: np.ndarray         # (N, |M|) rows are test functions psi_j
    eps: np.ndarray         # (N, N)
    indicators: np.ndarray  # (N, |M|) rows 1_{B_j}
    qsd_rows: np.ndarray    # (N, |M|) rows QSD_i extended by zeros


def build_projectors(decomp, n_balls, ball_local, qsds):
    """Assemble Pi0 (top-N spectral projector), Pi*, mu_i, psi_j and eps_ij.

    mu_i = QSD_i [Id - Pi0_perp Pi*]^{-1} Pi0, realized by summing the
    Neumann series of the N x N matrix eps (the series is geometric because
    eps is exponentially small in the metastable regime).
    """
    n = n_balls
    if decomp.n_modes < n:
        raise NumericError("decomposition must retain at least N modes")
    for c in decomp.defective_clusters:
        if any(k < n for k in c):
            raise NumericError("top-N modes contain a defective cluster")
    size = decomp.right.shape[0]
    R = decomp.right[:, :n]
    L = decomp.left[:n, :]
    if np.abs(L @ R - np.eye(n)).max() > BIORTH_TOL:
        raise NumericError("top-N modes are not binormalized")
    pi0 = (R @ L).real

    indicators = np.zeros((n, size))
    qsd_rows = np.zeros((n, size))
    for j, loc in enumerate(ball_local):
        indicators[j, loc] = 1.0
        qsd_rows[j, loc] = qsds[j].qsd
    pistar = indicators.T @ qsd_rows

    psi = (pi0 @ indicators.T).T
    eps = np.eye(n) - qsd_rows @ psi.T

    # hypothesis <QSD_i| Pi0 Pi* != 0, i.e. rows of (I - eps) Q do not vanish
    if np.abs((np.eye(n) - eps) @ qsd_rows).max(axis=1).min() < 1e-12:
        raise BasisDegenerate("<QSD_i| Pi0 Pi* vanished for some ball")

    # Neumann series for (I - eps)^{-1} in the N-dimensional coordinates
    acc = np.eye(n)
    term = np.eye(n)
    grow = 0
    last = np.inf
    for _ in range(10_000):
        term = term @ eps
        inc = np.abs(term).max()
        acc += term
        if inc < NEUMANN_TOL:
            break
        grow = grow + 1 if inc > last else 0
        if grow >= 5:
            raise NeumannDiverged("Neumann increments grew 5 consecutive terms")
        last = inc
    else:
        raise NeumannDiverged("Neumann series did not reach tolerance")
    mu = acc @ (qsd_rows @ pi0)

    if np.abs(mu @ psi.T - np.eye(n)).max() > BIORTH_TOL:
        raise NumericError("<mu_i, psi_j> = delta_ij failed")
    completeness = np.abs(psi.T @ mu - pi0).sum(axis=1).max()
    if completeness > COMPLETENESS_TOL:
        raise NumericError(
            f"sum_i psi_i x mu_i differs from Pi0 by {completeness:.3g}")
    return Projectors(pi0, pistar, mu, psi, eps, indicators, qsd_rows)


def build_kstar(trace_on_m, projectors):
    """Finite-rank kernel K* = Pi* K0 as a dense matrix on M."""
    return projectors.pistar @ trace_on_m.matrix


def build_p(trace_on_m, decomp, projectors, m):
    """Reduced matrix P_ij = <mu_i, (trunc K0)^m psi_j> via eigencoordinates.

    Also reports the per-entry multiplicative deviation from the watched-chain
    probability <QSD_i, (K0)^m 1_{B_j}> predicted to be exponentially small.
    """
    if m < 1:
        raise NumericError("m must be >= 1")
    n = projectors.mu.shape[0]
    lam = decomp.eigenvalues[:n]
    R = decomp.right[:, :n]
    L = decomp.left[:n, :]
    a = projectors.mu @ R                 # (N, N) <mu_i, phi_k>
    b = L @ projectors.psi.T              # (N, N) <pi_k, psi_j>
    p = (a * lam[None, :] ** m) @ b
    if np.abs(p.imag).max() > 1e-12:
        raise NumericError("reduced matrix has a nonreal part")
    p = p.real
    if p.min() < CLAMP_FLOOR:
        raise NegativeEntry(
            f"P entry {p.min():.3g} below {CLAMP_FLOOR}; sigma too large "
            "for the asymptotic regime")
    clamped = p.min() < 0.0
    p = np.clip(p, 0.0, None)
    sums = p.sum(axis=1)
    if np.abs(sums - 1.0).max() > ROW_SUM_TOL:
        raise NumericError(f"P row sums off by {np.abs(sums - 1).max():.3g}")
    p = p / sums[:, None]

    # multiplicative comparison against the exact watched-chain hop
    km = stochastic_power(trace_on_m.matrix, m)
    exact = (projectors.qsd_rows @ km) @ projectors.indicators.T
    rel = p / exact - 1.0
    return p, rel, clamped


def reduced_chain_marginals(p, start, n_steps):
    """delta_start P^n for n = 0..n_steps, stacked as rows."""
    n = p.shape[0]
    v = np.zeros(n)
    v[start] = 1.0
    out = [v.copy()]
    for _ in range(n_steps):
        v = v @ p
        out.append(v.copy())
    return np.array(out)


def stochastic_power(matrix, n):
    """matrix^n by repeated squaring, renormalizing row sums each squaring.

    Raises if any squaring drifts row sums by more than 1e-12, which would
    signal accumulating error rather than representable roundoff.
    """
    if n < 0:
        raise NumericError("power must be nonnegative")
    result = np.eye(matrix.shape[0])
    base = matrix.copy()
    k = n
    while k:
        if k & 1:
            result = result @ base
            result = _renormalize(result)
        k >>= 1
        if k:
            base = base @ base
            base = _renormalize(base)
    return result


def _renormalize(m):
    sums = m.sum(axis=1)
    if np.abs(sums - 1.0).max() > SQUARING_DRIFT_TOL * m.shape[0]:
        raise NumericError("row sums drifted during repeated squaring")
    return m / sums[:, None]


@dataclass(frozen=True)
class ReducedChainModel:
    """Everything the reduction produces, ready for serialization."""

    n_balls: int
    m: int
    theta: float
    p: np.ndarray
    pstar: np.ndarray
    eps: np.ndarray
    eigenvalues: np.ndarray
    rho: float
    multiplicative_error: np.ndarray
    qsds: tuple

    def to_dict(self):
        return {
            "n_balls": self.n_balls,
            "m": self.m,
            "theta": self.theta,
            "P": self.p.tolist(),
            "P_star": self.pstar.tolist(),
            "eps": self.eps.tolist(),
            "eigenvalues": [[z.real, z.imag] for z in self.eigenvalues],
            "rho": self.rho,
            "multiplicative_error": self.multiplicative_error.tolist(),
            "qsd_lambda0": [q.lambda0 for q in self.qsds],
            "qsd_gap_ratio": [q.gap_ratio for q in self.qsds],
        }


def build_reduced_chain(trace_on_m, decomp, ball_grid_indices, sigma, theta,
                        h0=None):
    """Full reduction: QSDs, P*, projectors, m and the reduced matrix P."""
    pstar, qsds = build_pstar(trace_on_m, ball_grid_indices)
    local = ball_local_indices(trace_on_m, ball_grid_indices)
    n = len(local)
    projectors = build_projectors(decomp, n, local, qsds)
    m = choose_m(sigma, theta, h0=h0)
    p, rel, _ = build_p(trace_on_m, decomp, projectors, m)
    mods = np.abs(decomp.eigenvalues)
    rho = float(mods[n]) if decomp.n_modes > n else 0.0
    model = ReducedChainModel(n, m, float(theta), p, pstar,
                              projectors.eps, decomp.eigenvalues[:n + 1],
                              rho, rel, tuple(qsds))
    return model, projectors


def diluted_marginal_deviation(trace_on_m, projectors, p, start_local, m,
                               n_max):
    """Exact comparison of the watched chain against the reduced chain.

    Returns per-step deviations max_j |delta_x (K0)^{nm} 1_{B_j} - (P^n)_ij|
    for n = 0..n_max, computed by repeated squaring and vector iteration.
    """
    km = stochastic_power(trace_on_m.matrix, m)
    v = np.zeros(trace_on_m.size)
    v[start_local] = 1.0
    marginals = reduced_chain_marginals(p, _ball_of_local(projectors, start_local), n_max)
    devs = []
    for n in range(n_max + 1):
        lhs = projectors.indicators @ v
        devs.append(float(np.abs(lhs - marginals[n]).max()))
        if n < n_max:
            v = v @ km
    return np.array(devs)


def _ball_of_local(projectors, local_index):
    hits = np.where(projectors.indicators[:, local_index] > 0)[0]
    if hits.size != 1:
        raise NumericError("start index must lie in exactly one ball")
    return int(hits[0])
