"""Per-office IPW and within-regression fits with permutation lookup tables.

Each office fit stores a square table ``T`` over its new hires such that the
estimate is ``sum_i T[i, i]`` and the estimate after re-assigning row
treatments by a shuffle ``s`` (outcomes held fixed) is ``sum_i T[s[i], i]``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .design import DEFAULT_RANK_TOL, EstimationSample, OfficeSample
from .exceptions import NumericalError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_TABLE_BUDGET = 8 * 10**8
KINDS = ("ipw", "late")


class GramFactor:
    """Pivoted QR factor of a weighted design, applied as ``(X'X)^{-1} rhs``."""

    def __init__(self, X: np.ndarray, tol: float = 1e-12):
        R, piv = la.qr(X, mode="r", pivoting=True)
        k = X.shape[1]
        R = R[:k, :k]
        diag = np.abs(np.diag(R))
        if diag.size == 0 or diag[-1] <= tol * diag[0]:
            raise NumericalError("weighted Gram matrix is singular")
        self.R = R
        self.piv = piv

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """``rhs`` has the coefficient axis first."""
        rp = rhs[self.piv]
        y = la.solve_triangular(self.R, rp, trans="T")
        z = la.solve_triangular(self.R, y)
        out = np.empty_like(z)
        out[self.piv] = z
        return out


@dataclass(frozen=True, eq=False)
class OfficeFit:
    office_id: str
    kind: str
    rows: tuple[int, ...]
    estimate: np.ndarray
    table: np.ndarray | None
    factor: GramFactor | None
    sample: OfficeSample

    @property
    def m(self) -> int:
        return len(self.rows)


@dataclass(frozen=True, eq=False)
class AggregateFit:
    kind: str
    names: tuple[str, ...]
    estimate: np.ndarray
    office_fits: tuple[OfficeFit, ...]
    weights: np.ndarray
    m: int

    @property
    def n_offices(self) -> int:
        return len(self.office_fits)

    @property
    def has_tables(self) -> bool:
        return all(f.table is not None for f in self.office_fits)


def _ipw_parts(D, P):
    w = 1.0 / P
    k = D.shape[2]
    X = (np.sqrt(w)[..., None] * D).reshape(-1, k)
    Z = D * w[..., None]
    return GramFactor(X), Z


def _ipw_estimate(D, Y, P) -> np.ndarray:
    factor, Z = _ipw_parts(D, P)
    return factor.solve(np.einsum("ijk,ij->k", Z, Y))


def ipw_fit(office: OfficeSample, with_table: bool = True) -> OfficeFit:
    """Inverse-probability weighted regression of ``Y`` on ``D`` in one office."""
    if office.P is None:
        raise ValidationError(f"office {office.office_id!r} has no assignment probabilities (not an IPW sample)")
    D, Y, P = office.D, office.Y, office.P
    factor, Z = _ipw_parts(D, P)
    if with_table:
        m, _, k = D.shape
        M = np.einsum("ijk,lj->kil", Z, Y).reshape(k, m * m)
        table = factor.solve(M).reshape(k, m, m).transpose(1, 2, 0)
        estimate = table[np.arange(m), np.arange(m)].sum(axis=0)
    else:
        table = None
        estimate = factor.solve(np.einsum("ijk,ij->k", Z, Y))
    return OfficeFit(office.office_id, "ipw", office.rows, estimate, table, factor, office)


def _within_weights(D: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """``W[i, j] = (sum_i' D_i'j D_i'j')^{-1} D_ij`` via per-column SVD."""
    cols = np.ascontiguousarray(D.transpose(1, 0, 2))
    U, s, Vt = np.linalg.svd(cols, full_matrices=False)
    smin, smax = s[:, -1], s[:, 0]
    if np.any(smin <= 0) or np.any(smin**2 <= rank_tol * smax**2):
        raise NumericalError("a column Gram matrix is singular; sample was not rank-validated")
    # pinv_j = V diag(1/s) U'; W_ij is column i of pinv_j
    pinv = np.einsum("jlk,jl,jil->jki", Vt, 1.0 / s, U)
    return pinv.transpose(2, 0, 1)


def _within_estimate(D, Y) -> np.ndarray:
    W = _within_weights(D)
    return np.einsum("ijk,ij->k", W, Y) / D.shape[1]


def within_fit(office: OfficeSample, with_table: bool = True, rank_tol: float = DEFAULT_RANK_TOL) -> OfficeFit:
    """Column-by-column least squares across new hires, averaged over columns."""
    D, Y = office.D, office.Y
    J = D.shape[1]
    W = _within_weights(D, rank_tol)
    if with_table:
        m = D.shape[0]
        table = np.einsum("ijk,lj->ilk", W, Y) / J
        estimate = table[np.arange(m), np.arange(m)].sum(axis=0)
    else:
        table = None
        estimate = np.einsum("ijk,ij->k", W, Y) / J
    return OfficeFit(office.office_id, "late", office.rows, estimate, table, None, office)


def _check_shuffle(sigma, m) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.int64)
    if sigma.shape != (m,) or not np.array_equal(np.sort(sigma), np.arange(m)):
        raise ValidationError("permutation is not a bijection on the office's new hires")
    return sigma


def permuted_estimate(fit: OfficeFit, sigma) -> np.ndarray:
    """Estimate with row ``i`` taking the treatments of row ``sigma[i]``."""
    sigma = _check_shuffle(sigma, fit.m)
    if fit.table is not None:
        return fit.table[sigma, np.arange(fit.m)].sum(axis=0)
    o = fit.sample
    if fit.kind == "ipw":
        return _ipw_estimate(o.D[sigma], o.Y, o.P[sigma])
    return _within_estimate(o.D[sigma], o.Y)


def aggregate(office_fits) -> AggregateFit:
    """Hire-count weighted average of office estimates."""
    fits = tuple(office_fits)
    if not fits:
        raise ValidationError("cannot aggregate an empty list of office fits")
    k = fits[0].estimate.shape
    if any(f.estimate.shape != k for f in fits):
        raise ValidationError("office estimates have different dimensions")
    kinds = {f.kind for f in fits}
    if len(kinds) != 1:
        raise ValidationError("cannot aggregate IPW and within-regression fits together")
    sizes = np.array([f.m for f in fits], dtype=np.float64)
    m = int(sizes.sum())
    weights = sizes / m
    estimate = np.einsum("o,ok->k", weights, np.stack([f.estimate for f in fits]))
    names = ("intercept",) + tuple(f"x{c}" for c in range(1, k[0]))
    return AggregateFit(kinds.pop(), names, estimate, fits, weights, m)


def fit_sample(
    sample: EstimationSample,
    kind: str | None = None,
    threads: int = 1,
    table_budget: int = DEFAULT_TABLE_BUDGET,
) -> AggregateFit:
    """Fit every office (in parallel when ``threads > 1``) and aggregate."""
    kind = (kind or sample.mode).lower()
    if kind not in KINDS:
        raise ValidationError(f"estimator kind must be one of {KINDS}")
    entries = sum(o.m**2 for o in sample.offices) * sample.dim
    with_table = entries <= table_budget
    if not with_table:
        logger.warning("lookup tables need %d entries (budget %d); permuted estimates will refit",
                       entries, table_budget)
    if kind == "ipw":
        def one(o):
            return ipw_fit(o, with_table)
    else:
        def one(o):
            return within_fit(o, with_table, sample.rank_tol)
    if threads > 1 and len(sample.offices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fits = list(pool.map(one, sample.offices))
    else:
        fits = [one(o) for o in sample.offices]
    agg = aggregate(fits)
    return AggregateFit(agg.kind, sample.names, agg.estimate, agg.office_fits, agg.weights, agg.m)
