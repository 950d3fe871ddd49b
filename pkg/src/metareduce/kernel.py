"""Gaussian transition densities discretized to finite kernel matrices.

The continuous kernel has density N^{-1} exp(-I(x,y)/sigma^2) with
I(x,y) = <y - pi(x), cov^{-1} (y - pi(x))> / 2.  On a grid the matrix entry
is density * cell volume, then rows are normalized: that is the finite-volume
surrogate for conditioning the chain on staying in the box.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (DegenerateRow, NoConvergence, NonRecurrentComplement,
                     NumericError, SingularCovariance)

ROW_SUM_TOL = 1e-12
TRACE_ROW_TOL = 1e-10
RAW_ROW_FLOOR = 1e-300
POWER_ITER_CAP = 200_000
POWER_ITER_TOL = 1e-12


@dataclass(frozen=True)
class KernelMatrix:
    """Dense nonnegative matrix over grid-cell indices with quadrature weight.

    ``kind`` is "stochastic" (rows sum to 1) or "substochastic" (rows sum to
    at most 1).  ``domain`` holds the flattened grid indices the rows/columns
    refer to, so sub-kernels remember where they live.
    """

    matrix: np.ndarray
    weight: float
    kind: str
    domain: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "domain", np.asarray(self.domain, dtype=int))
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise NumericError("kernel matrix must be square")
        if m.shape[0] != self.domain.size:
            raise NumericError("domain size must match matrix dimension")
        if (m < 0).any():
            raise NumericError("kernel matrix entries must be nonnegative")
        sums = m.sum(axis=1)
        if self.kind == "stochastic":
            if np.abs(sums - 1.0).max() > ROW_SUM_TOL:
                raise NumericError("stochastic kernel rows must sum to 1")
        elif self.kind == "substochastic":
            if sums.max() > 1.0 + ROW_SUM_TOL:
                raise NumericError("substochastic kernel rows must sum to <= 1")
        else:
            raise NumericError(f"unknown kernel kind '{self.kind}'")

    @property
    def size(self):
        return self.matrix.shape[0]

    def local_indices(self, subset):
        """Positions inside this kernel's domain of the given grid indices."""
        pos = np.searchsorted(self.domain, subset)
        if (pos >= self.domain.size).any() or (self.domain[pos] != subset).any():
            raise NumericError("subset is not contained in the kernel domain")
        return pos


def gaussian_rate(model, x, y):
    """One-step large-deviation rate <y - pi(x), cov^{-1}(y - pi(x))> / 2."""
    x = np.atleast_1d(np.asarray(x, float))
    y = np.atleast_1d(np.asarray(y, float))
    r = y - np.atleast_1d(model.pi(x))
    try:
        z = np.linalg.solve(model.cov, r)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(str(exc)) from exc
    return float(0.5 * r @ z)


def discretize_kernel(model, grid, row_chunk=256):
    """Row-normalized Gaussian quadrature kernel on all grid nodes.

    Rows are assembled in chunks so the (n, n, d) difference tensor is never
    materialized in full.
    """
    if model.sigma <= 0:
        raise NumericError("discretize_kernel needs sigma > 0")
    pts = grid.points()
    n = grid.n_nodes
    images = np.array([np.atleast_1d(model.pi(p)) for p in pts])
    try:
        cov_inv = np.linalg.inv(model.cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(str(exc)) from exc
    norm = (2 * np.pi * model.sigma ** 2) ** (model.dim / 2) \
        * np.sqrt(np.linalg.det(model.cov))
    raw = np.empty((n, n))
    for start in range(0, n, row_chunk):
        stop = min(start + row_chunk, n)
        diffs = pts[None, :, :] - images[start:stop, None, :]
        quad = np.einsum("ijk,kl,ijl->ij", diffs, cov_inv, diffs)
        raw[start:stop] = np.exp(-0.5 * quad / model.sigma ** 2)
    raw *= grid.weight / norm
    sums = raw.sum(axis=1)
    if sums.min() < RAW_ROW_FLOOR:
        raise DegenerateRow(
            f"raw row sum {sums.min():.3g} underflowed; refine sigma or grid")
    return KernelMatrix(raw / sums[:, None], grid.weight, "stochastic",
                        np.arange(grid.n_nodes))


def killed_kernel(kernel, subset):
    """Sub-kernel of the process killed on first exit from the subset."""
    subset = np.asarray(subset, dtype=int)
    if subset.size == 0:
        raise NumericError("killed_kernel needs a nonempty subset")
    if subset.size == kernel.domain.size:
        warnings.warn("subset is the full domain; killed kernel equals the kernel")
        return KernelMatrix(kernel.matrix.copy(), kernel.weight, kernel.kind,
                            kernel.domain.copy())
    loc = kernel.local_indices(subset)
    sub = kernel.matrix[np.ix_(loc, loc)]
    if kernel.kind == "stochastic" and sub.sum(axis=1).min() > 1.0 - 1e-15:
        raise NumericError("killing a proper subset must lose mass in some row")
    return KernelMatrix(sub, kernel.weight, "substochastic", subset)


def trace_kernel(kernel, subset):
    """Kernel of the chain watched only on the subset.

    Computed as K_AA + K_AC (Id - K_CC)^{-1} K_CA through a dense solve.
    Rows are renormalized only to absorb solver residue below 1e-10.
    """
    if kernel.kind != "stochastic":
        raise NumericError("trace_kernel needs a stochastic kernel")
    subset = np.asarray(subset, dtype=int)
    if subset.size == kernel.domain.size:
        return KernelMatrix(kernel.matrix.copy(), kernel.weight, "stochastic",
                            kernel.domain.copy())
    loc = kernel.local_indices(subset)
    comp = np.setdiff1d(np.arange(kernel.size), loc)
    K = kernel.matrix
    Kaa = K[np.ix_(loc, loc)]
    Kac = K[np.ix_(loc, comp)]
    Kca = K[np.ix_(comp, loc)]
    Kcc = K[np.ix_(comp, comp)]
    eye = np.eye(comp.size)
    try:
        lu, piv = scipy.linalg.lu_factor(eye - Kcc)
    except scipy.linalg.LinAlgError as exc:
        raise NonRecurrentComplement(str(exc)) from exc
    if np.abs(np.diag(lu)).min() < 1e-14:
        raise NonRecurrentComplement("(Id - K_cc) is singular to working precision")
    traced = Kaa + Kac @ scipy.linalg.lu_solve((lu, piv), Kca)
    sums = traced.sum(axis=1)
    if np.abs(sums - 1.0).max() > TRACE_ROW_TOL:
        raise NumericError(
            f"trace kernel lost probability: max row defect "
            f"{np.abs(sums - 1.0).max():.3g}")
    traced = np.clip(traced, 0.0, None)
    traced /= traced.sum(axis=1)[:, None]
    return KernelMatrix(traced, kernel.weight, "stochastic", subset)


def invariant_measure(kernel, tol=POWER_ITER_TOL, max_iter=POWER_ITER_CAP):
    """Left fixed probability vector of a stochastic kernel (power iteration)."""
    if kernel.kind != "stochastic":
        raise NumericError("invariant_measure needs a stochastic kernel")
    K = kernel.matrix
    pi = np.full(kernel.size, 1.0 / kernel.size)
    for _ in range(max_iter):
        nxt = pi @ K
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() <= tol:
            resid = np.abs(nxt @ K - nxt).sum()
            if resid > 1e-10:
                raise NoConvergence(f"residual {resid:.3g} above 1e-10")
            return nxt
        pi = nxt
    raise NoConvergence(f"power iteration did not converge in {max_iter} steps")


# --- kernel cache -----------------------------------------------------------

def kernel_metadata(model, grid):
    return {
        "map_id": model.map_id,
        "dim": model.dim,
        "box": model.box.tolist(),
        "nodes": list(grid.shape),
        "sigma": model.sigma,
        "cov": model.cov.tolist(),
    }


def cache_key(meta):
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_kernel(cache_dir, model, grid, kernel):
    """Write the <hash>.meta.json / <hash>.kern sidecar pair."""
    cache_dir.mkdir(parents=True, exist_ok=True)
    meta = kernel_metadata(model, grid)
    key = cache_key(meta)
    meta["hash"] = key
    payload = np.ascontiguousarray(kernel.matrix, dtype="<f8")
    (cache_dir / f"{key}.kern").write_bytes(payload.tobytes())
    (cache_dir / f"{key}.meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=1))
    return key


def load_kernel(cache_dir, model, grid):
    """Return the cached kernel on an exact metadata match, else None."""
    meta = kernel_metadata(model, grid)
    key = cache_key(meta)
    meta_path = cache_dir / f"{key}.meta.json"
    data_path = cache_dir / f"{key}.kern"
    if not (meta_path.exists() and data_path.exists()):
        return None
    stored = json.loads(meta_path.read_text())
    stored.pop("hash", None)
    if stored != meta:
        return None
    n = grid.n_nodes
    raw = np.frombuffer(data_path.read_bytes(), dtype="<f8")
    if raw.size != n * n:
        return None
    return KernelMatrix(raw.reshape(n, n).copy(), grid.weight, "stochastic",
                        np.arange(n))
