"""Permutation tests, conservative variance, confidence intervals, and
Berry-Esseen bound arithmetic for aggregate fits."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .design import DEFAULT_ENUMERATION_CAP, DesignPlan, draw_matrix, enumerate_matrix, split_positions
from .estimation import AggregateFit, permuted_estimate
from .exceptions import ValidationError

logger = logging.getLogger(__name__)

ENUMERATE = "enumerate"
TIE_RTOL = 1e-10
_CHUNK = 2_000_000


@dataclass(frozen=True, eq=False)
class PermutationResult:
    coordinate: int
    name: str
    observed: float
    draws: np.ndarray
    p_one_sided: float
    p_two_sided: float
    n_draws: int
    mode: str
    group_size: int


@dataclass(frozen=True, eq=False)
class VarianceReport:
    v_hat: np.ndarray
    deviations: np.ndarray
    n_offices: int
    perm_variance: np.ndarray
    berry_esseen: np.ndarray
    C: float = 1.0
    label: str = "proportional bound, up to a universal constant"


class _Gather:
    """Flattened office tables for vectorized evaluation of many shuffles."""

    def __init__(self, fit: AggregateFit):
        sizes = np.array([f.m for f in fit.office_fits], dtype=np.int64)
        self.sizes = sizes
        flat = [f.table.reshape(-1, f.table.shape[-1]) for f in fit.office_fits]
        self.flat = np.concatenate(flat)
        starts = np.cumsum([0] + [len(t) for t in flat[:-1]])
        local = np.concatenate([np.arange(m) for m in sizes])
        self.base = np.repeat(starts, sizes) + local
        self.stride = np.repeat(sizes, sizes)
        self.weight = np.repeat(fit.weights, sizes)
        colmax = np.concatenate([np.abs(f.table).max(axis=0) for f in fit.office_fits])
        self.scale = self.weight @ colmax

    def __call__(self, positions: np.ndarray) -> np.ndarray:
        positions = np.atleast_2d(positions)
        M = positions.shape[1]
        step = max(1, _CHUNK // max(M, 1))
        out = np.empty((len(positions), self.flat.shape[1]))
        for lo in range(0, len(positions), step):
            idx = self.base + positions[lo:lo + step] * self.stride
            out[lo:lo + step] = np.einsum("rmk,m->rk", self.flat[idx], self.weight)
        return out


def _refit_stats(fit: AggregateFit, positions: np.ndarray) -> np.ndarray:
    sizes = [f.m for f in fit.office_fits]
    out = np.empty((len(positions), len(fit.estimate)))
    for r, row in enumerate(np.atleast_2d(positions)):
        parts = split_positions(sizes, row)
        out[r] = sum(w * permuted_estimate(f, s) for f, w, s in zip(fit.office_fits, fit.weights, parts))
    return out


def _evaluator(fit: AggregateFit):
    if fit.has_tables:
        g = _Gather(fit)
        return g, g.scale
    return (lambda pos: _refit_stats(fit, pos)), None


def _check_plan(fit: AggregateFit, plan: DesignPlan):
    ids = [f.office_id for f in fit.office_fits]
    if [o.office_id for o in plan.offices] != ids or plan.sizes != [f.m for f in fit.office_fits]:
        raise ValidationError("design plan does not match the fitted offices")


def permutation_draws(
    fit: AggregateFit,
    plan: DesignPlan,
    R=ENUMERATE,
    cap: int = DEFAULT_ENUMERATION_CAP,
    threads: int = 1,
):
    """Observed statistic and the permuted statistics for every coordinate.

    Returns ``(observed, draws, mode, group_size, scale)``.  ``draws`` has one
    row per group element (enumerated, identity first) or per Monte Carlo draw.
    """
    _check_plan(fit, plan)
    sizes = plan.sizes
    group_size = plan.group_size
    evaluate, scale = _evaluator(fit)
    identity = np.concatenate([np.arange(m) for m in sizes])[None, :]
    observed = evaluate(identity)[0]
    if R == ENUMERATE:
        positions = enumerate_matrix(sizes, cap)
        draws = evaluate(positions)
        mode = "enumerated"
    else:
        R = int(R)
        if R < 1:
            raise ValidationError("Monte Carlo mode needs at least one draw")
        mode = "monte_carlo"
        bounds = np.linspace(0, R, max(1, min(threads, R)) + 1).astype(np.int64)

        def chunk(b):
            lo, hi = b
            out = np.empty((hi - lo, len(observed)))
            step = 2048
            for s in range(lo, hi, step):
                pos = draw_matrix(sizes, plan.master_seed, np.arange(s, min(hi, s + step)))
                out[s - lo:s - lo + len(pos)] = evaluate(pos)
            return out

        spans = list(zip(bounds[:-1], bounds[1:]))
        if len(spans) > 1:
            with ThreadPoolExecutor(max_workers=len(spans)) as pool:
                draws = np.concatenate(list(pool.map(chunk, spans)))
        else:
            draws = chunk(spans[0])
    if scale is None:
        scale = np.maximum(np.abs(draws).max(axis=0), np.abs(observed))
    return observed, draws, mode, group_size, scale


def one_sided_p(observed: float, draws: np.ndarray, mode: str, tol: float = 0.0) -> float:
    """Right-tail p-value; ties within ``tol`` count as at least as extreme."""
    hits = int(np.count_nonzero(draws >= observed - tol))
    if mode == "enumerated":
        return hits / len(draws)
    return (1 + hits) / (1 + len(draws))


def left_p(observed: float, draws: np.ndarray, mode: str, tol: float = 0.0) -> float:
    """Left-tail p-value; ties within ``tol`` count as at least as extreme."""
    hits = int(np.count_nonzero(draws <= observed + tol))
    if mode == "enumerated":
        return hits / len(draws)
    return (1 + hits) / (1 + len(draws))


def two_sided_p(p: float, denom: int, p_left: float | None = None) -> float:
    """``2 * min(p, 1 - p + 1/denom)`` capped at one.

    ``denom`` is the group size for enumerated tests and ``R + 1`` for
    Monte Carlo tests.  ``1 - p + 1/denom`` is the left-tail p-value when
    no draw ties the observed statistic; pass the counted ``p_left`` to keep
    the test valid when ties occur.
    """
    left = 1.0 - p + 1.0 / denom if p_left is None else p_left
    return min(1.0, 2.0 * min(p, left))


def permutation_tests(
    fit: AggregateFit,
    plan: DesignPlan,
    R=ENUMERATE,
    coordinates=None,
    cap: int = DEFAULT_ENUMERATION_CAP,
    threads: int = 1,
) -> list[PermutationResult]:
    observed, draws, mode, group_size, scale = permutation_draws(fit, plan, R, cap, threads)
    coords = range(len(observed)) if coordinates is None else coordinates
    denom = group_size if mode == "enumerated" else len(draws) + 1
    out = []
    for c in coords:
        if not 0 <= c < len(observed):
            raise ValidationError(f"coordinate {c} out of range")
        tol = TIE_RTOL * scale[c]
        p = one_sided_p(observed[c], draws[:, c], mode, tol)
        pl = left_p(observed[c], draws[:, c], mode, tol)
        out.append(PermutationResult(c, fit.names[c], float(observed[c]), draws[:, c].copy(), p,
                                     two_sided_p(p, denom, pl), len(draws), mode, group_size))
    return out


def permutation_test(fit, plan, R=ENUMERATE, coordinate: int = 1, cap=DEFAULT_ENUMERATION_CAP, threads=1):
    """Randomization test of the sharp null for one coefficient."""
    return permutation_tests(fit, plan, R, [coordinate], cap, threads)[0]


def conservative_variance(fit: AggregateFit) -> np.ndarray:
    """Between-office dispersion bound on the estimator's design variance."""
    N = fit.n_offices
    if N < 2:
        raise ValidationError("cannot estimate between-office variance with a single office")
    b = fit.weights[:, None] * np.stack([f.estimate for f in fit.office_fits])
    dev = b - fit.estimate[None, :] / N
    return N / (N - 1) * (dev**2).sum(axis=0)


def office_deviations(fit: AggregateFit) -> np.ndarray:
    b = fit.weights[:, None] * np.stack([f.estimate for f in fit.office_fits])
    return b - fit.estimate[None, :] / fit.n_offices


def confidence_interval(estimate, v_hat, level: float = 0.95):
    """Normal interval ``estimate +/- z * sqrt(v_hat)``; conservative when
    ``v_hat`` over-estimates the design variance."""
    if not 0.0 < level < 1.0:
        raise ValidationError(f"confidence level must lie in (0, 1), got {level}")
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if np.any(v_hat < 0):
        raise ValidationError("variance estimate must be non-negative")
    z = sps.norm.ppf((1.0 + level) / 2.0)
    half = z * np.sqrt(v_hat)
    estimate = np.asarray(estimate, dtype=np.float64)
    return estimate - half, estimate + half


def _hoeffding(table: np.ndarray) -> np.ndarray:
    m = table.shape[0]
    if m < 2:
        return np.zeros(table.shape[-1])
    centered = (
        table
        - table.mean(axis=1, keepdims=True)
        - table.mean(axis=0, keepdims=True)
        + table.mean(axis=(0, 1), keepdims=True)
    )
    return (centered**2).sum(axis=(0, 1)) / (m - 1)


def permutation_variance(
    fit: AggregateFit,
    mode: str = "hoeffding",
    R: int | None = None,
    seed: int = 0,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> np.ndarray:
    """Variance of the permuted statistic over the group, per coordinate."""
    sizes = [f.m for f in fit.office_fits]
    if mode == "hoeffding":
        if not fit.has_tables:
            raise ValidationError("closed-form permutation variance needs lookup tables")
        total = np.zeros(len(fit.estimate))
        for f, w in zip(fit.office_fits, fit.weights):
            if f.m < 2:
                warnings.warn(f"office {f.office_id!r} has a single hire and contributes zero variance")
            total += w**2 * _hoeffding(f.table)
        return total
    evaluate, _ = _evaluator(fit)
    if mode == "enumerated":
        return evaluate(enumerate_matrix(sizes, cap)).var(axis=0)
    if mode == "monte_carlo":
        if not R or R < 2:
            raise ValidationError("Monte Carlo variance needs R >= 2 draws")
        return evaluate(draw_matrix(sizes, seed, np.arange(R))).var(axis=0, ddof=1)
    raise ValidationError(f"unknown permutation variance mode {mode!r}")


def berry_esseen_bound(tables, sigma, C: float = 1.0) -> np.ndarray:
    """``(C / sigma^3) * sum_o (m_o^2 / m^3) * sum_{i,i'} |T_o[i, i']|^3``.

    ``tables`` is a list of ``(m_o, m_o, k)`` (or ``(m_o, m_o)``) arrays;
    the result has one entry per coordinate.
    """
    tables = [np.asarray(t, dtype=np.float64) for t in tables]
    tables = [t[..., None] if t.ndim == 2 else t for t in tables]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), tables[0].shape[-1:])
    if np.any(sigma <= 0):
        raise ValidationError("degenerate distribution: sigma must be positive")
    m = sum(t.shape[0] for t in tables)
    total = sum((t.shape[0] ** 2 / m**3) * (np.abs(t) ** 3).sum(axis=(0, 1)) for t in tables)
    return C * total / sigma**3


def variance_report(fit: AggregateFit, C: float = 1.0, perm_mode: str = "hoeffding", **kw) -> VarianceReport:
    v_hat = conservative_variance(fit)
    pv = permutation_variance(fit, perm_mode, **kw)
    be = np.full(len(pv), np.nan)
    if fit.has_tables:
        for c in range(len(pv)):
            if pv[c] > 0:
                be[c] = berry_esseen_bound([f.table[..., c] for f in fit.office_fits], math.sqrt(pv[c]), C)[0]
    return VarianceReport(v_hat, office_deviations(fit), fit.n_offices, pv, be, C)


def bonferroni_alpha(alpha: float, n_tests: int) -> float:
    if n_tests < 1:
        raise ValidationError("Bonferroni correction needs at least one test")
    return alpha / n_tests


def write_histogram(path, draws) -> None:
    """Write ``draw_index,statistic`` rows for external plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["draw_index", "statistic"])
        for r, value in enumerate(np.asarray(draws, dtype=np.float64)):
            w.writerow([r, repr(float(value))])
