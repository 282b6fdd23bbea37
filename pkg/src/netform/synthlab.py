"""Synthetic worlds with known potential outcomes and enumeration oracles.

A world fixes a base network, latent traits ``W`` and pair shocks, so that
every potential outcome ``Y_ij^d = 1(d . delta + eps_ij >= 0)`` is known.
Shuffling new hires within offices then yields every counterfactual data set
the design could have produced.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .design import (
    DesignPlan,
    EstimationSample,
    OfficeDesign,
    build_sample,
    draw_matrix,
    enumerate_local,
    enumerate_matrix,
    global_to_local,
    median_threshold,
    restrict_sample,
    with_outcomes,
)
from .estimation import _within_weights, fit_sample
from .exceptions import CapExceededError, ValidationError
from .inference import ENUMERATE, berry_esseen_bound, conservative_variance, permutation_tests
from .network import TREATMENT_NAMES, NetStat, NodeRecord, TemporalNetwork, build_network, treatment_matrix

logger = logging.getLogger(__name__)

WORLD_FORMAT = "netform-world"
WORLD_VERSION = 1
ALPHA_GRID = tuple(round(a / 100, 2) for a in range(1, 100))


@dataclass(frozen=True)
class WorldConfig:
    """Recipe for a synthetic world.

    ``delta`` lists the intercept followed by one coefficient per treatment.
    ``homophily`` scales both the trait-similarity term of the shocks and the
    trait dependence of senior-to-senior ties.  ``sorted_teams`` draws each
    hire's trait around its team's trait and each candidate's trait around a
    random team's trait, which ties the realized indirect connections to
    latent similarity.
    """

    office_sizes: tuple[int, ...] = (3, 3)
    candidates_per_office: int = 6
    teams_per_office: int = 2
    seniors_per_team: int = 2
    edge_prob: float = 0.3
    delta: tuple[float, ...] = (0.0, 0.0)
    homophily: float = 0.0
    treatments: tuple[str, ...] = ("indirect_flag",)
    thresholds: tuple[float | None, ...] | None = None
    covariates: tuple[str, ...] = ("female",)
    balanced_teams: bool = False
    sorted_teams: bool = False
    team_spread: float = 1.0
    replicate_offices: bool = False
    hire_ties: bool = False
    mode: str = "late"
    max_attempts: int = 50

    def __post_init__(self):
        object.__setattr__(self, "office_sizes", tuple(int(m) for m in self.office_sizes))
        object.__setattr__(self, "delta", tuple(float(d) for d in self.delta))
        object.__setattr__(self, "treatments", tuple(self.treatments))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.thresholds is not None:
            object.__setattr__(self, "thresholds", tuple(self.thresholds))
        if not self.office_sizes or min(self.office_sizes) < 2:
            raise ValidationError("every office needs at least two new hires")
        if self.teams_per_office < 1 or self.seniors_per_team < 2:
            raise ValidationError("need at least one team and two seniors per team")
        if self.candidates_per_office < 1:
            raise ValidationError("need at least one candidate tie per office")
        if not 0.0 <= self.edge_prob <= 1.0:
            raise ValidationError("edge probability must lie in [0, 1]")
        if self.homophily < 0:
            raise ValidationError("homophily scale must be non-negative")
        for name in self.treatments:
            if name not in TREATMENT_NAMES:
                raise ValidationError(f"unknown treatment {name!r}")
        if len(self.delta) != 1 + len(self.treatments):
            raise ValidationError("delta needs an intercept plus one entry per treatment")
        if self.thresholds is not None and len(self.thresholds) != len(self.treatments):
            raise ValidationError("one threshold entry per treatment is required")
        if self.replicate_offices and len(set(self.office_sizes)) != 1:
            raise ValidationError("replicated offices must all have the same size")
        if self.mode not in ("ipw", "late"):
            raise ValidationError("mode must be 'ipw' or 'late'")


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    config: WorldConfig
    seed: int
    net: TemporalNetwork
    plan: DesignPlan
    stats: tuple[NetStat, ...]
    W: np.ndarray
    eta: dict
    base_D: dict
    teams: dict

    @property
    def delta(self) -> np.ndarray:
        return np.asarray(self.config.delta, dtype=np.float64)

    @property
    def names(self) -> tuple[str, ...]:
        return ("intercept",) + tuple(s.name for s in self.stats)

    @property
    def sharp_null(self) -> bool:
        return bool(np.all(self.delta[1:] == 0))

    def shocks(self, office_id: str) -> np.ndarray:
        """``eps = h * exp(-|W_i - W_j|) + eta`` over the office's pairs."""
        o = self.plan.office(office_id)
        I, J = np.asarray(o.I), np.asarray(o.J)
        gap = np.abs(self.W[I][:, None] - self.W[J][None, :])
        return self.config.homophily * np.exp(-gap) + self.eta[office_id]

    def potential(self, office_id: str, D: np.ndarray) -> np.ndarray:
        """Outcomes of the office's hire-candidate pairs at treatments ``D``.

        ``D`` is either ``(m, J, k)`` (one value per pair) or ``(k,)`` (the same
        value for every pair).
        """
        D = np.asarray(D, dtype=np.float64)
        return (D @ self.delta + self.shocks(office_id) >= 0).astype(np.float64)

    def covariate(self, name: str) -> dict[int, float | None]:
        return {k: rec.covariates.get(name) for k, rec in enumerate(self.net.nodes) if rec.new_hire}


# --- generation ----------------------------------------------------------------

def _office_block(config: WorldConfig, m: int, rng: np.random.Generator):
    """Latent traits and network ties of one office, with its pair shocks."""
    T, s, c = config.teams_per_office, config.seniors_per_team, config.candidates_per_office
    n_sen = T * s
    team_trait = config.team_spread * rng.normal(size=T)
    W_hire = rng.normal(size=m)
    W_sen = np.repeat(team_trait, s) + 0.3 * rng.normal(size=n_sen)
    W_cand = rng.normal(size=c)
    if config.balanced_teams:
        team = rng.permutation(np.arange(m) % T)
    else:
        team = rng.integers(T, size=m)
    if config.sorted_teams:
        W_hire = team_trait[team] + 0.3 * W_hire
        W_cand = team_trait[rng.integers(T, size=c)] + 0.3 * W_cand
    # senior layer over team seniors and candidates
    W_pool = np.concatenate([W_sen, W_cand])
    n_pool = len(W_pool)
    lo, hi = np.triu_indices(n_pool, k=1)
    p = config.edge_prob * np.exp(-config.homophily * np.abs(W_pool[lo] - W_pool[hi]))
    same_team = (lo < n_sen) & (hi < n_sen) & (lo // s == hi // s)
    keep = same_team | (rng.random(len(lo)) < p)
    pool_edges = list(zip(lo[keep].tolist(), hi[keep].tolist()))
    eta = rng.logistic(size=(m, c))
    covs = {name: rng.integers(0, 2, size=m).astype(float) for name in config.covariates}
    return dict(W_hire=W_hire, W_sen=W_sen, W_cand=W_cand, team=team, pool_edges=pool_edges,
                eta=eta, covs=covs)


def _assemble(config: WorldConfig, blocks):
    nodes, W, edges, teams, eta = [], [], [], {}, {}
    offices = []
    T, s = config.teams_per_office, config.seniors_per_team
    for o, b in enumerate(blocks):
        oid = f"office{o + 1}"
        m, c = len(b["W_hire"]), len(b["W_cand"])
        base = len(nodes)
        hires = list(range(base, base + m))
        for a in range(m):
            covs = {name: float(v[a]) for name, v in b["covs"].items()}
            covs["candidate"] = 0.0
            nodes.append(NodeRecord(f"{oid}_h{a}", oid, True, covs))
        sen0 = len(nodes)
        for k in range(T * s):
            nodes.append(NodeRecord(f"{oid}_s{k}", oid, False, {"candidate": 0.0}))
        cand0 = len(nodes)
        for k in range(c):
            nodes.append(NodeRecord(f"{oid}_c{k}", oid, False, {"candidate": 1.0}))
        W.extend(b["W_hire"].tolist() + b["W_sen"].tolist() + b["W_cand"].tolist())
        for a, t in enumerate(b["team"]):
            for k in range(t * s, (t + 1) * s):
                edges.append((hires[a], sen0 + k))
        if config.hire_ties:
            for a in range(m):
                for a2 in range(a + 1, m):
                    if b["team"][a] == b["team"][a2]:
                        edges.append((hires[a], hires[a2]))
        edges.extend((sen0 + u, sen0 + v) for u, v in b["pool_edges"])
        teams[oid] = tuple(int(t) for t in b["team"])
        eta[oid] = b["eta"]
        offices.append(OfficeDesign(oid, tuple(hires), tuple(range(cand0, cand0 + c))))
    return nodes, np.asarray(W), edges, teams, eta, offices


def _resolve_stats(config, net, plan) -> tuple[NetStat, ...]:
    stats = []
    for c, name in enumerate(config.treatments):
        kind, binarized = TREATMENT_NAMES[name]
        thr = None
        if binarized:
            thr = config.thresholds[c] if config.thresholds is not None else None
            if thr is None:
                thr = median_threshold(net, plan, kind)
        stats.append(NetStat(kind, thr))
    return tuple(stats)


def _realize(config, seed, nodes, W, edges, teams, eta, offices) -> SyntheticWorld:
    n = len(nodes)
    ids = [rec.id for rec in nodes]
    e1 = [(ids[u], ids[v]) for u, v in edges]
    net1 = build_network(nodes, e1, e1)
    plan = DesignPlan(tuple(offices), seed, n)
    stats = _resolve_stats(config, net1, plan)
    base_D = {o.office_id: treatment_matrix(net1, stats, o.I, o.J) for o in plan.offices}
    world = SyntheticWorld(config, seed, net1, plan, stats, W, eta, base_D, teams)
    e2 = list(e1)
    for o in plan.offices:
        Y = world.potential(o.office_id, base_D[o.office_id])
        a, b = np.nonzero(Y)
        e2.extend((ids[o.I[x]], ids[o.J[y]]) for x, y in zip(a.tolist(), b.tolist()))
    net = build_network(nodes, e1, e2)
    return SyntheticWorld(config, seed, net, plan, stats, W, eta, base_D, teams)


def _usable(world: SyntheticWorld) -> str | None:
    for oid, D in world.base_D.items():
        if np.isnan(D).any():
            return f"office {oid} has hires with undefined treatments"
    try:
        sample = world_sample(world)
    except ValidationError as exc:
        return str(exc)
    if sample.plan.sizes != world.plan.sizes:
        return "support filtering removed hires or offices"
    return None


def generate_world(config: WorldConfig, seed: int = 0) -> SyntheticWorld:
    """Draw a world; regenerate (bounded) until the full design is estimable.

    A usable world keeps every office and hire after support and rank checks,
    so the design's permutation group is exactly the office shuffles.  Column
    drops depend only on column multisets and are the same for every shuffle.
    """
    rng = np.random.default_rng(seed)
    reason = None
    for attempt in range(config.max_attempts):
        if config.replicate_offices:
            block = _office_block(config, config.office_sizes[0], rng)
            blocks = [block] * len(config.office_sizes)
        else:
            blocks = [_office_block(config, m, rng) for m in config.office_sizes]
        world = _realize(config, seed, *_assemble(config, blocks))
        reason = _usable(world)
        if reason is None:
            if attempt:
                logger.info("world seed %d usable after %d regenerations", seed, attempt)
            return world
        logger.debug("world seed %d attempt %d rejected: %s", seed, attempt, reason)
    raise ValidationError(
        f"no usable world after {config.max_attempts} attempts (last reason: {reason})"
    )


# --- counterfactuals -------------------------------------------------------------

def _local(world: SyntheticWorld, pi) -> list[np.ndarray]:
    if isinstance(pi, np.ndarray) and pi.ndim == 1 and len(pi) == world.net.n:
        return global_to_local(world.plan, pi)
    local = [np.asarray(s, dtype=np.int64) for s in pi]
    if len(local) != len(world.plan.offices):
        raise ValidationError("need one shuffle per office")
    for s, o in zip(local, world.plan.offices):
        if s.shape != (o.m,) or not np.array_equal(np.sort(s), np.arange(o.m)):
            raise ValidationError(f"invalid shuffle for office {o.office_id!r}")
    return local


def counterfactual_data(world: SyntheticWorld, pi) -> tuple[dict, dict]:
    """Treatments and outcomes had the hires been placed according to ``pi``.

    ``pi`` is a global node permutation in the design group or a list of
    per-office local shuffles.  Hire ``i`` takes the position of ``pi(i)``,
    so its treatments are those of ``pi(i)`` in the base network, while its
    outcomes follow its own potential-outcome rule.
    """
    local = _local(world, pi)
    D, Y = {}, {}
    for o, s in zip(world.plan.offices, local):
        d = world.base_D[o.office_id][s]
        D[o.office_id] = d
        Y[o.office_id] = world.potential(o.office_id, d)
    return D, Y


def world_sample(world: SyntheticWorld, pi=None, mode: str | None = None) -> EstimationSample:
    if pi is None:
        D, Y = world.base_D, {o.office_id: world.potential(o.office_id, world.base_D[o.office_id])
                              for o in world.plan.offices}
    else:
        D, Y = counterfactual_data(world, pi)
    return build_sample(world.plan, D, Y, mode or world.config.mode, world.names)


# --- estimands and counterfactual tables ------------------------------------------

def _edge_coefficients(Ys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """``(sum_d d d')^{-1} sum_d Y^d d`` for stacked potential outcomes.

    ``Ys[..., u]`` is the outcome at ``values[u]``.
    """
    gram = values.T @ values
    rhs = Ys @ values
    return np.linalg.solve(gram, rhs.reshape(-1, values.shape[1]).T).T.reshape(rhs.shape)


def true_estimand(world: SyntheticWorld, sample: EstimationSample, kind: str) -> np.ndarray:
    """Aggregate potential-outcome estimand for the retained design."""
    kind = kind.lower()
    total = np.zeros(sample.dim)
    for o in sample.offices:
        rows, cols = _positions(world, o)
        eps = world.shocks(o.office_id)[np.ix_(rows, cols)]
        if kind == "ipw":
            values = np.asarray(sample.support, dtype=np.float64)
            Ys = (np.einsum("uk,k->u", values, world.delta)[None, None, :] + eps[..., None] >= 0)
            coef = _edge_coefficients(Ys.astype(np.float64), values)
        else:
            coef = np.empty(eps.shape + (sample.dim,))
            for b in range(len(cols)):
                values = o.D[:, b, :]
                Ys = (values @ world.delta)[None, :] + eps[:, b][:, None] >= 0
                coef[:, b] = _edge_coefficients(Ys.astype(np.float64), values)
        total += o.m * coef.mean(axis=(0, 1))
    return total / sample.m


def _positions(world: SyntheticWorld, office) -> tuple[np.ndarray, np.ndarray]:
    design = world.plan.office(office.office_id)
    ri = {v: a for a, v in enumerate(design.I)}
    ci = {v: b for b, v in enumerate(design.J)}
    return np.array([ri[i] for i in office.rows]), np.array([ci[j] for j in office.cols])


def counterfactual_tables(world: SyntheticWorld, sample: EstimationSample, kind: str) -> list[np.ndarray]:
    """Tables whose shuffled diagonals give counterfactual estimates.

    Entry ``[i, i']`` uses hire ``i``'s weights with hire ``i'``'s outcome
    at hire ``i``'s treatment, so ``sum_i' T[s(i'), i']`` is the estimate on
    the data set produced by shuffle ``s``.
    """
    out = []
    for o in sample.offices:
        rows, cols = _positions(world, o)
        eps = world.shocks(o.office_id)[np.ix_(rows, cols)]
        D = o.D
        cf = ((D @ world.delta)[:, None, :] + eps[None, :, :] >= 0).astype(np.float64)
        if kind == "ipw":
            Z = D / o.P[..., None]
            gram = np.einsum("ijk,ijl->kl", Z, D)
            M = np.einsum("ijk,iqj->iqk", Z, cf)
            out.append(np.linalg.solve(gram, M.reshape(-1, D.shape[2]).T).T.reshape(M.shape))
        else:
            Wt = _within_weights(D)
            out.append(np.einsum("ijk,iqj->iqk", Wt, cf) / D.shape[1])
    return out


# --- oracles ---------------------------------------------------------------------

@dataclass
class OracleReport:
    kind: str
    names: tuple[str, ...]
    group_size: int
    estimates: np.ndarray
    realized: np.ndarray
    mean_estimate: np.ndarray
    estimand: np.ndarray
    variance: np.ndarray
    mean_v_hat: np.ndarray | None
    p_one_sided: np.ndarray | None = None
    p_two_sided: np.ndarray | None = None
    be_estimator: np.ndarray | None = None
    C: float = 1.0
    notes: list[str] = field(default_factory=list)

    def rejection_rates(self, two_sided: bool = False, grid=ALPHA_GRID) -> np.ndarray:
        """``P(p <= alpha)`` over the group, shape ``(len(grid), k)``."""
        p = self.p_two_sided if two_sided else self.p_one_sided
        if p is None:
            raise ValidationError("oracle ran without p-values")
        return np.stack([(p <= a + 1e-12).mean(axis=0) for a in grid])

    def validity(self, two_sided: bool = False, grid=ALPHA_GRID) -> np.ndarray:
        """Per-coordinate flag: rejection rate at most alpha on every grid point."""
        rates = self.rejection_rates(two_sided, grid)
        return np.all(rates <= np.asarray(grid)[:, None] + 1e-12, axis=0)

    def summary(self) -> dict:
        def lst(x):
            return None if x is None else np.asarray(x).tolist()

        out = {
            "kind": self.kind,
            "names": list(self.names),
            "group_size": self.group_size,
            "realized": lst(self.realized),
            "mean_estimate": lst(self.mean_estimate),
            "estimand": lst(self.estimand),
            "variance": lst(self.variance),
            "mean_v_hat": lst(self.mean_v_hat),
            "berry_esseen_estimator": lst(self.be_estimator),
            "C": self.C,
            "notes": list(self.notes),
        }
        if self.p_one_sided is not None:
            out["valid_one_sided"] = lst(self.validity(False))
            out["valid_two_sided"] = lst(self.validity(True))
        return out


def _table_enumeration(world: SyntheticWorld, sample: EstimationSample, kind: str, cap: int):
    """Estimates and between-office variance estimates over the whole group,
    read off the counterfactual tables office by office."""
    tables = counterfactual_tables(world, sample, kind)
    sizes = sample.plan.sizes
    per_office = []
    for T, m in zip(tables, sizes):
        perms = enumerate_matrix([m], cap)
        per_office.append(T[perms, np.arange(m)].sum(axis=1))
    # product order: last office varies fastest, identity first
    size = math.prod(len(v) for v in per_office)
    weights = np.asarray(sizes, dtype=np.float64) / sum(sizes)
    scaled = np.empty((size, len(sizes), sample.dim))
    reps = size
    for o, vals in enumerate(per_office):
        reps //= len(vals)
        scaled[:, o] = weights[o] * np.tile(np.repeat(vals, reps, axis=0), (size // (reps * len(vals)), 1))
    estimates = scaled.sum(axis=1)
    N = len(sizes)
    v_hats = None
    if N >= 2:
        v_hats = N / (N - 1) * ((scaled - estimates[:, None, :] / N) ** 2).sum(axis=1)
    return estimates, v_hats, tables


def run_oracle(
    world: SyntheticWorld,
    kind: str | None = None,
    with_pvalues: bool = False,
    cap: int = 10**4,
    placebo: str | None = None,
    C: float = 1.0,
    method: str = "refit",
) -> OracleReport:
    """Treat every group element as the observed assignment and tabulate.

    ``method="refit"`` rebuilds and refits every counterfactual data set.
    ``method="tables"`` reads the same estimates off the counterfactual
    tables, which scales to larger groups but yields no p-values.  With
    ``placebo`` set, the outcome of every counterfactual data set is the
    named hire covariate and each p-value comes from :func:`placebo_run`.
    """
    kind = (kind or world.config.mode).lower()
    if world.plan.group_size > cap:
        raise CapExceededError(f"group has {world.plan.group_size} elements, above the cap {cap}")
    if method == "tables":
        if with_pvalues or placebo is not None:
            raise ValidationError("table enumeration does not produce p-values")
        sample = world_sample(world, None, kind)
        estimates, v_hats, tables = _table_enumeration(world, sample, kind, cap)
        variance = estimates.var(axis=0)
        return OracleReport(
            kind=kind,
            names=world.names,
            group_size=len(estimates),
            estimates=estimates,
            realized=estimates[0],
            mean_estimate=estimates.mean(axis=0),
            estimand=true_estimand(world, sample, kind),
            variance=variance,
            mean_v_hat=None if v_hats is None else v_hats.mean(axis=0),
            be_estimator=_be(tables, variance, C),
            C=C,
        )
    if method != "refit":
        raise ValidationError(f"unknown oracle method {method!r}")
    values = world.covariate(placebo) if placebo is not None else None
    estimates, v_hats, p1, p2 = [], [], [], []
    notes = []
    for local in enumerate_local(world.plan, cap):
        sample = world_sample(world, local, kind)
        if placebo is not None:
            rep = placebo_run(sample, placebo, values, kind=kind, R=ENUMERATE)
            estimates.append([c.estimate for c in rep.coefficients])
            p1.append([c.p_one_sided for c in rep.coefficients])
            p2.append([c.p_two_sided for c in rep.coefficients])
            continue
        fit = fit_sample(sample, kind)
        estimates.append(fit.estimate)
        if fit.n_offices >= 2:
            v_hats.append(conservative_variance(fit))
        if with_pvalues:
            tests = permutation_tests(fit, sample.plan, ENUMERATE)
            p1.append([t.p_one_sided for t in tests])
            p2.append([t.p_two_sided for t in tests])
    estimates = np.asarray(estimates)
    realized_sample = world_sample(world, None, kind)
    estimand = true_estimand(world, realized_sample, kind)
    variance = estimates.var(axis=0)
    be = None
    if placebo is None:
        be = _be(counterfactual_tables(world, realized_sample, kind), variance, C)
    else:
        notes.append(f"placebo outcome {placebo!r}")
    if not v_hats and placebo is None:
        notes.append("single office: no between-office variance estimate")
    return OracleReport(
        kind=kind,
        names=world.names,
        group_size=len(estimates),
        estimates=estimates,
        realized=estimates[0],
        mean_estimate=estimates.mean(axis=0),
        estimand=estimand,
        variance=variance,
        mean_v_hat=np.mean(v_hats, axis=0) if v_hats else None,
        p_one_sided=np.asarray(p1) if p1 else None,
        p_two_sided=np.asarray(p2) if p2 else None,
        be_estimator=be,
        C=C,
        notes=notes,
    )


def sampled_oracle(world: SyntheticWorld, kind: str | None = None, R: int = 10**4, C: float = 1.0) -> OracleReport:
    """Monte Carlo stand-in for :func:`run_oracle` when the group is too large
    to enumerate; draws come from the design's seeded shuffles."""
    kind = (kind or world.config.mode).lower()
    if R < 2:
        raise ValidationError("sampled oracle needs at least two draws")
    sample = world_sample(world, None, kind)
    tables = counterfactual_tables(world, sample, kind)
    sizes = sample.plan.sizes
    pos = draw_matrix(sizes, world.plan.master_seed, np.arange(R))
    weights = np.asarray(sizes, dtype=np.float64) / sum(sizes)
    scaled = np.stack(
        [w * T[p, np.arange(T.shape[0])].sum(axis=1)
         for T, w, p in zip(tables, weights, _split_cols(pos, sizes))],
        axis=1,
    )
    estimates = scaled.sum(axis=1)
    N = len(sizes)
    v_hats = N / (N - 1) * ((scaled - estimates[:, None, :] / N) ** 2).sum(axis=1) if N >= 2 else None
    variance = estimates.var(axis=0, ddof=1)
    return OracleReport(
        kind=kind,
        names=world.names,
        group_size=world.plan.group_size,
        estimates=estimates,
        realized=sample_estimate(tables, weights),
        mean_estimate=estimates.mean(axis=0),
        estimand=true_estimand(world, sample, kind),
        variance=variance,
        mean_v_hat=None if v_hats is None else v_hats.mean(axis=0),
        be_estimator=_be(tables, variance, C),
        C=C,
        notes=[f"monte carlo over {R} draws; group has {world.plan.group_size} elements"],
    )


def _split_cols(pos, sizes):
    edges = np.cumsum([0] + list(sizes))
    return [pos[:, a:b] for a, b in zip(edges[:-1], edges[1:])]


def sample_estimate(tables, weights) -> np.ndarray:
    return sum(w * np.einsum("iik->k", T) for T, w in zip(tables, weights))


def _be(tables, variance, C) -> np.ndarray:
    out = np.full(len(variance), np.nan)
    for c in range(len(variance)):
        if variance[c] > 0:
            out[c] = berry_esseen_bound([t[..., c] for t in tables], math.sqrt(variance[c]), C)[0]
    return out


def naive_pooled_ols(data) -> np.ndarray:
    """Unweighted least squares of ``Y`` on ``D`` pooled over pairs.

    ``data`` is an :class:`EstimationSample` (retained pairs) or a
    :class:`SyntheticWorld` (every hire-candidate pair at the realized
    assignment).
    """
    if isinstance(data, SyntheticWorld):
        pairs = [(data.base_D[o.office_id], data.potential(o.office_id, data.base_D[o.office_id]))
                 for o in data.plan.offices]
    else:
        pairs = [(o.D, o.Y) for o in data.offices]
    k = pairs[0][0].shape[-1]
    X = np.concatenate([d.reshape(-1, k) for d, _ in pairs])
    y = np.concatenate([y.ravel() for _, y in pairs])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef


# --- placebo ---------------------------------------------------------------------

def _missing(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


def placebo_run(
    sample: EstimationSample,
    covariate: str,
    values: Mapping[int, float | None],
    kind: str | None = None,
    R=ENUMERATE,
    level: float = 0.95,
    threads: int = 1,
    net=None,
    config: dict | None = None,
    histogram_path=None,
):
    """Estimate effects on a pre-determined hire covariate.

    The outcome of pair ``(i, j)`` is the covariate of hire ``i``.  Hires with
    a missing value are dropped and counted in the report notes.
    """
    from .report import analyze_sample

    missing = {i for o in sample.offices for i in o.rows if _missing(values.get(i))}
    if missing:
        sample = restrict_sample(sample, i_filter=lambda i: i not in missing)
    if not any(len({float(values[i]) for i in o.rows}) > 1 for o in sample.offices):
        raise ValidationError(f"covariate {covariate!r} is constant within every office")
    outcomes = {
        o.office_id: np.repeat(np.array([float(values[i]) for i in o.rows])[:, None], len(o.cols), axis=1)
        for o in sample.offices
    }
    sample = with_outcomes(sample, outcomes)
    rep = analyze_sample(sample, outcome=covariate, kind=kind, R=R, level=level, threads=threads,
                         net=net, config=config, histogram_path=histogram_path)
    if missing:
        rep.notes.append(f"dropped {len(missing)} new hires with missing {covariate!r}")
    return rep


# --- serialization -----------------------------------------------------------------

def world_to_dict(world: SyntheticWorld) -> dict:
    cfg = asdict(world.config)
    cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}
    ids = [rec.id for rec in world.net.nodes]
    return {
        "format": WORLD_FORMAT,
        "version": WORLD_VERSION,
        "seed": world.seed,
        "config": cfg,
        "thresholds": [s.binarize_threshold for s in world.stats],
        "nodes": [
            {"id": rec.id, "office": rec.office, "new_hire": rec.new_hire,
             "covariates": dict(sorted(rec.covariates.items())), "W": float(w)}
            for rec, w in zip(world.net.nodes, world.W)
        ],
        "edges_t1": [[ids[a], ids[b]] for a, b in world.net.edges(1)],
        "edges_t2": [[ids[a], ids[b]] for a, b in world.net.edges(2)],
        "offices": [
            {"office_id": o.office_id, "I": ids_of(ids, o.I), "J": ids_of(ids, o.J),
             "teams": list(world.teams[o.office_id]), "eta": world.eta[o.office_id].tolist()}
            for o in world.plan.offices
        ],
    }


def ids_of(ids, idx):
    return [ids[k] for k in idx]


def world_to_json(world: SyntheticWorld) -> str:
    return json.dumps(world_to_dict(world), sort_keys=True, indent=1) + "\n"


def world_from_json(text: str) -> SyntheticWorld:
    raw = json.loads(text)
    if raw.get("format") != WORLD_FORMAT:
        raise ValidationError("not a world document")
    if raw.get("version") != WORLD_VERSION:
        raise ValidationError(f"unsupported world version {raw.get('version')!r}")
    cfg = dict(raw["config"])
    cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}
    config = WorldConfig(**cfg)
    nodes = [NodeRecord(r["id"], r["office"], r["new_hire"], r["covariates"]) for r in raw["nodes"]]
    W = np.array([r["W"] for r in raw["nodes"]], dtype=np.float64)
    net = build_network(nodes, raw["edges_t1"], raw["edges_t2"])
    offices = tuple(
        OfficeDesign(o["office_id"], tuple(net.index_of(x) for x in o["I"]),
                     tuple(net.index_of(x) for x in o["J"]))
        for o in raw["offices"]
    )
    plan = DesignPlan(offices, raw["seed"], net.n)
    stats = tuple(
        NetStat(TREATMENT_NAMES[name][0], thr) for name, thr in zip(config.treatments, raw["thresholds"])
    )
    eta = {o["office_id"]: np.array(o["eta"], dtype=np.float64) for o in raw["offices"]}
    teams = {o["office_id"]: tuple(o["teams"]) for o in raw["offices"]}
    base_D = {o.office_id: treatment_matrix(net, stats, o.I, o.J) for o in plan.offices}
    return SyntheticWorld(config, raw["seed"], net, plan, stats, W, eta, base_D, teams)


def export_world_csv(world: SyntheticWorld, directory) -> dict[str, str]:
    """Write ``nodes.csv``, ``edges_t1.csv`` and ``edges_t2.csv``."""
    os.makedirs(directory, exist_ok=True)
    covs = sorted({k for rec in world.net.nodes for k in rec.covariates} - {"candidate"})
    paths = {name: os.path.join(directory, f"{name}.csv") for name in ("nodes", "edges_t1", "edges_t2")}
    with open(paths["nodes"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "office", "new_hire", "candidate"] + covs)
        for rec in world.net.nodes:
            row = [rec.id, rec.office or "", int(rec.new_hire), int(rec.covariates.get("candidate", 0))]
            row += ["" if _missing(rec.covariates.get(c)) else repr(float(rec.covariates[c])) for c in covs]
            w.writerow(row)
    ids = [rec.id for rec in world.net.nodes]
    for t in (1, 2):
        with open(paths[f"edges_t{t}"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["src", "dst"])
            for a, b in world.net.edges(t):
                w.writerow([ids[a], ids[b]])
    return paths
