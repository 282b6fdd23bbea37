"""Within-office permutation designs and support-validated estimation samples.

The randomization group shuffles the new hires of each office among
themselves and fixes every other node.  Monte Carlo draws are pure functions
of ``(master_seed, draw_index)`` so they can be generated in any order.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .exceptions import CapExceededError, ValidationError
from .network import NetStat, TemporalNetwork, raw_statistic, treatment_matrix

logger = logging.getLogger(__name__)

DEFAULT_ENUMERATION_CAP = 10**6
DEFAULT_RANK_TOL = 1e-10

MODES = ("ipw", "late")


@dataclass(frozen=True)
class OfficeDesign:
    office_id: str
    I: tuple[int, ...]
    J: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "I", tuple(int(i) for i in self.I))
        object.__setattr__(self, "J", tuple(int(j) for j in self.J))
        if len(self.I) < 1:
            raise ValidationError(f"office {self.office_id!r} has no new hires")
        if len(set(self.I)) != len(self.I) or len(set(self.J)) != len(self.J):
            raise ValidationError(f"office {self.office_id!r} lists a node twice")
        if set(self.I) & set(self.J):
            raise ValidationError(f"office {self.office_id!r}: new hires overlap candidate ties")

    @property
    def m(self) -> int:
        return len(self.I)


@dataclass(frozen=True)
class DesignPlan:
    offices: tuple[OfficeDesign, ...]
    master_seed: int = 0
    n: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "offices", tuple(self.offices))
        seen_ids = set()
        hires = {}
        for office in self.offices:
            if office.office_id in seen_ids:
                raise ValidationError(f"duplicate office id {office.office_id!r}")
            seen_ids.add(office.office_id)
            for i in office.I:
                if i in hires:
                    raise ValidationError(
                        f"node {i} is a new hire in both {hires[i]!r} and {office.office_id!r}"
                    )
                hires[i] = office.office_id
        for office in self.offices:
            clash = [j for j in office.J if j in hires]
            if clash:
                raise ValidationError(
                    f"office {office.office_id!r}: candidate ties {clash[:5]} are new hires "
                    f"of office {hires[clash[0]]!r}"
                )
        if self.n is not None:
            top = max((max(o.I + o.J) for o in self.offices), default=-1)
            if top >= self.n:
                raise ValidationError("design references node indices beyond the network size")

    @property
    def sizes(self) -> list[int]:
        return [o.m for o in self.offices]

    @property
    def group_size(self) -> int:
        return math.prod(math.factorial(m) for m in self.sizes)

    def office(self, office_id: str) -> OfficeDesign:
        for o in self.offices:
            if o.office_id == office_id:
                return o
        raise KeyError(office_id)


def plan_from_network(
    net: TemporalNetwork,
    master_seed: int = 0,
    candidates: str = "all",
    candidate_flag: str | None = "candidate",
) -> DesignPlan:
    """Derive offices from the roster.

    New hires are grouped by office label.  Candidate ties are all other
    nodes (``candidates="all"``) or those sharing the office label
    (``"office"``).  If every record carries the ``candidate_flag`` covariate,
    only flagged nodes are candidates.
    """
    if candidates not in ("all", "office"):
        raise ValidationError(f"unknown candidate scope {candidates!r}")
    by_office: dict[str, list[int]] = {}
    for k, rec in enumerate(net.nodes):
        if rec.new_hire:
            by_office.setdefault(rec.office, []).append(k)
    flagged = candidate_flag is not None and all(
        candidate_flag in rec.covariates for rec in net.nodes
    )
    pool = [
        k
        for k, rec in enumerate(net.nodes)
        if not rec.new_hire and (not flagged or rec.covariates[candidate_flag])
    ]
    offices = []
    for office_id, I in by_office.items():
        if candidates == "office":
            J = [k for k in pool if net.nodes[k].office == office_id]
        else:
            J = pool
        offices.append(OfficeDesign(office_id, tuple(I), tuple(J)))
    if not offices:
        raise ValidationError("roster contains no new hires")
    return DesignPlan(tuple(offices), master_seed, net.n)


# --- the permutation group -------------------------------------------------

def _rng(master_seed: int, draw_index: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(master_seed) & (2**64 - 1), spawn_key=(int(draw_index),))
    return np.random.Generator(np.random.PCG64(seq))


def draw_positions(sizes: Sequence[int], master_seed: int, draw_index: int) -> np.ndarray:
    """Concatenated local shuffles for one draw.

    Each office's hires are ordered by i.i.d. uniform keys, which yields a
    uniform shuffle of every office independently.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    offsets = np.repeat(np.cumsum(sizes) - sizes, sizes)
    keys = _rng(master_seed, draw_index).random(int(sizes.sum()))
    return np.lexsort((keys, labels)) - offsets


def draw_matrix(sizes: Sequence[int], master_seed: int, draw_indices) -> np.ndarray:
    draw_indices = np.asarray(draw_indices, dtype=np.int64)
    out = np.empty((len(draw_indices), int(np.sum(sizes))), dtype=np.int64)
    for r, index in enumerate(draw_indices):
        out[r] = draw_positions(sizes, master_seed, index)
    return out


def split_positions(sizes: Sequence[int], positions: np.ndarray) -> list[np.ndarray]:
    return np.split(np.asarray(positions), np.cumsum(sizes)[:-1])


def sample_local(plan: DesignPlan, draw_index: int) -> list[np.ndarray]:
    """Independent uniform shuffles of each office, as local position arrays."""
    return split_positions(plan.sizes, draw_positions(plan.sizes, plan.master_seed, draw_index))


def local_to_global(plan: DesignPlan, local: Sequence[np.ndarray]) -> np.ndarray:
    if plan.n is None:
        raise ValidationError("plan has no node count; cannot build a global permutation")
    pi = np.arange(plan.n)
    for office, sigma in zip(plan.offices, local):
        I = np.asarray(office.I)
        pi[I] = I[np.asarray(sigma)]
    return pi


def global_to_local(plan: DesignPlan, pi) -> list[np.ndarray]:
    """Inverse of :func:`local_to_global`; raises if ``pi`` is outside the group."""
    pi = np.asarray(pi, dtype=np.int64)
    if plan.n is not None and pi.shape != (plan.n,):
        raise ValidationError("permutation has the wrong length")
    moved = np.nonzero(pi != np.arange(len(pi)))[0]
    hires = set()
    local = []
    for office in plan.offices:
        I = np.asarray(office.I)
        hires.update(office.I)
        pos = {node: a for a, node in enumerate(office.I)}
        try:
            local.append(np.array([pos[int(node)] for node in pi[I]], dtype=np.int64))
        except KeyError:
            raise ValidationError(f"permutation moves a hire out of office {office.office_id!r}") from None
    if any(int(k) not in hires for k in moved):
        raise ValidationError("permutation moves a node that is not a new hire")
    return local


def sample_permutation(plan: DesignPlan, draw_index: int) -> np.ndarray:
    """Uniform element of the group for draw ``draw_index`` (global index form)."""
    return local_to_global(plan, sample_local(plan, draw_index))


def _check_cap(plan: DesignPlan, cap: int):
    size = plan.group_size
    if size > cap:
        raise CapExceededError(
            f"group has {size} elements, above the enumeration cap {cap}; use Monte Carlo draws"
        )


def enumerate_local(plan: DesignPlan, cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[tuple[np.ndarray, ...]]:
    """Every group element as per-office local arrays; the identity comes first."""
    _check_cap(plan, cap)
    per_office = [list(itertools.permutations(range(m))) for m in plan.sizes]
    for combo in itertools.product(*per_office):
        yield tuple(np.asarray(s, dtype=np.int64) for s in combo)


def enumerate_group(plan: DesignPlan, cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[np.ndarray]:
    for local in enumerate_local(plan, cap):
        yield local_to_global(plan, local)


def enumerate_matrix(sizes: Sequence[int], cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """All group elements stacked as rows of concatenated local positions."""
    size = math.prod(math.factorial(m) for m in sizes)
    if size > cap:
        raise CapExceededError(
            f"group has {size} elements, above the enumeration cap {cap}; use Monte Carlo draws"
        )
    blocks = [np.array(list(itertools.permutations(range(m))), dtype=np.int64).reshape(-1, m) for m in sizes]
    out = np.empty((size, sum(sizes)), dtype=np.int64)
    reps = size
    tile = 1
    col = 0
    # itertools.product order: last office varies fastest
    for block in blocks:
        reps //= len(block)
        out[:, col:col + block.shape[1]] = np.tile(np.repeat(block, reps, axis=0), (tile, 1))
        tile *= len(block)
        col += block.shape[1]
    return out


# --- assignment probabilities ------------------------------------------------

@dataclass(frozen=True)
class ProbabilityTable:
    """Column-wise assignment distribution of one office.

    ``freq[j, u]`` is the share of new hires whose treatment in column ``j``
    equals ``values[u]``.  It does not depend on the row.
    """

    values: np.ndarray
    freq: np.ndarray

    def prob(self, j: int, d) -> float:
        d = np.asarray(d, dtype=np.float64)
        hit = np.nonzero((self.values == d).all(axis=1))[0]
        return float(self.freq[j, hit[0]]) if hit.size else 0.0


def assignment_probabilities(D: np.ndarray) -> tuple[ProbabilityTable, np.ndarray]:
    """Empirical per-column treatment frequencies and realized weights ``P``."""
    D = np.asarray(D, dtype=np.float64)
    m, J, k = D.shape
    if m == 0 or J == 0:
        raise ValidationError("assignment probabilities need a non-empty treatment array")
    values, codes = np.unique(D.reshape(-1, k), axis=0, return_inverse=True)
    codes = codes.reshape(m, J)
    U = len(values)
    flat = codes + U * np.arange(J)[None, :]
    freq = np.bincount(flat.ravel(), minlength=U * J).reshape(J, U) / m
    P = freq[np.arange(J)[None, :], codes]
    return ProbabilityTable(values, freq), P


# --- estimation samples ----------------------------------------------------

@dataclass(frozen=True)
class DropRecord:
    office_id: str
    reason: str
    pairs: int
    rows: tuple[int, ...] = ()
    cols: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class OfficeSample:
    office_id: str
    rows: tuple[int, ...]
    cols: tuple[int, ...]
    D: np.ndarray
    Y: np.ndarray
    P: np.ndarray | None = None
    probs: ProbabilityTable | None = None

    @property
    def m(self) -> int:
        return len(self.rows)

    @property
    def n_pairs(self) -> int:
        return len(self.rows) * len(self.cols)

    def column_multiset(self, j: int) -> np.ndarray:
        """Treatment values of column ``j`` sorted lexicographically."""
        col = self.D[:, j, :]
        return col[np.lexsort(col.T[::-1])]


@dataclass(frozen=True, eq=False)
class EstimationSample:
    mode: str
    names: tuple[str, ...]
    plan: DesignPlan
    offices: tuple[OfficeSample, ...]
    drops: tuple[DropRecord, ...]
    n_input_pairs: int
    support: np.ndarray | None = None
    rank_tol: float = DEFAULT_RANK_TOL

    @property
    def m(self) -> int:
        return sum(o.m for o in self.offices)

    @property
    def n_pairs(self) -> int:
        return sum(o.n_pairs for o in self.offices)

    @property
    def dim(self) -> int:
        return len(self.names)

    def office(self, office_id: str) -> OfficeSample:
        for o in self.offices:
            if o.office_id == office_id:
                return o
        raise KeyError(office_id)

    def dropped_pairs(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for rec in self.drops:
            out[rec.reason] = out.get(rec.reason, 0) + rec.pairs
        return out


def _is_integer_valued(D: np.ndarray) -> bool:
    finite = D[np.isfinite(D)]
    return bool(np.all(finite == np.round(finite)))


def _full_support_columns(D: np.ndarray, support: np.ndarray) -> np.ndarray:
    m, J, k = D.shape
    hit = np.zeros((len(support), J), dtype=bool)
    for u, value in enumerate(support):
        hit[u] = (D == value).all(axis=2).any(axis=0)
    return hit.all(axis=0)


def _full_rank_columns(D: np.ndarray, rank_tol: float) -> np.ndarray:
    gram = np.einsum("ijk,ijl->jkl", D, D)
    s = np.linalg.svd(gram, compute_uv=False)
    return s[:, -1] > rank_tol * s[:, 0]


def _validate_office(
    office_id, rows, cols, D, Y, mode, support, rank_tol, drops
) -> OfficeSample | None:
    """Drop undefined rows and unidentified columns of one office."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    bad_rows = np.isnan(D).any(axis=(1, 2)) if D.size else np.zeros(len(rows), dtype=bool)
    if bad_rows.any():
        drops.append(DropRecord(office_id, "undefined_treatment", int(bad_rows.sum()) * len(cols),
                                rows=tuple(rows[bad_rows].tolist())))
        rows, D, Y = rows[~bad_rows], D[~bad_rows], Y[~bad_rows]
    if len(rows) < 2:
        drops.append(DropRecord(office_id, "singleton_office", len(rows) * len(cols), rows=tuple(rows.tolist())))
        return None
    if len(cols):
        if mode == "ipw":
            keep = _full_support_columns(D, support)
            reason = "no_full_support"
        else:
            keep = _full_rank_columns(D, rank_tol)
            reason = "rank_deficient"
        if not keep.all():
            drops.append(DropRecord(office_id, reason, int((~keep).sum()) * len(rows),
                                    cols=tuple(cols[~keep].tolist())))
            cols, D, Y = cols[keep], D[:, keep], Y[:, keep]
    if len(cols) == 0:
        drops.append(DropRecord(office_id, "no_columns", 0, rows=tuple(rows.tolist())))
        return None
    P = probs = None
    if mode == "ipw":
        probs, P = assignment_probabilities(D)
    return OfficeSample(office_id, tuple(rows.tolist()), tuple(cols.tolist()),
                        np.ascontiguousarray(D), np.ascontiguousarray(Y, dtype=np.float64), P, probs)


def _finish(mode, names, plan, offices, drops, n_input, support, rank_tol) -> EstimationSample:
    if not offices:
        raise ValidationError("no identifying variation: every office was dropped")
    eff = DesignPlan(
        tuple(OfficeDesign(o.office_id, o.rows, o.cols) for o in offices),
        plan.master_seed,
        plan.n,
    )
    for rec in drops:
        logger.debug("dropped %s pairs in office %s: %s", rec.pairs, rec.office_id, rec.reason)
    return EstimationSample(mode, tuple(names), eff, tuple(offices), tuple(drops), n_input, support, rank_tol)


def default_names(k: int) -> tuple[str, ...]:
    return ("intercept",) + tuple(f"x{c}" for c in range(1, k))


def build_sample(
    plan: DesignPlan,
    D: Mapping[str, np.ndarray],
    Y: Mapping[str, np.ndarray],
    mode: str = "late",
    names: Sequence[str] | None = None,
    support: np.ndarray | None = None,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> EstimationSample:
    """Validate support and rank per office and assemble the estimation sample.

    ``D[office_id]`` has shape ``(m_o, |J_o|, k)`` with the intercept first;
    ``Y[office_id]`` has shape ``(m_o, |J_o|)``.  In IPW mode the target
    support defaults to every distinct treatment vector observed in any
    office; a column is kept only if it attains all of them.
    """
    mode = mode.lower()
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    arrays = {}
    for office in plan.offices:
        d = np.asarray(D[office.office_id], dtype=np.float64)
        y = np.asarray(Y[office.office_id], dtype=np.float64)
        if d.ndim != 3 or d.shape[:2] != (office.m, len(office.J)) or y.shape != d.shape[:2]:
            raise ValidationError(f"office {office.office_id!r}: treatment/outcome shape mismatch")
        arrays[office.office_id] = (d, y)
    k = next(iter(arrays.values()))[0].shape[2]
    if any(d.shape[2] != k for d, _ in arrays.values()):
        raise ValidationError("treatment dimension differs across offices")
    names = tuple(names) if names is not None else default_names(k)
    if len(names) != k:
        raise ValidationError("coefficient names do not match the treatment dimension")

    if mode == "ipw":
        for d, _ in arrays.values():
            if not _is_integer_valued(d):
                raise ValidationError(
                    "continuous treatment values cannot be matched exactly in IPW mode; use LATE mode"
                )
        if support is None:
            defined = [d.reshape(-1, k) for d, _ in arrays.values()]
            stacked = np.concatenate(defined) if defined else np.empty((0, k))
            stacked = stacked[~np.isnan(stacked).any(axis=1)]
            support = np.unique(stacked, axis=0)
        support = np.asarray(support, dtype=np.float64).reshape(-1, k)
        if len(support) < 2:
            raise ValidationError("no identifying variation: treatment takes a single value")
    else:
        support = None

    n_input = sum(o.m * len(o.J) for o in plan.offices)
    drops: list[DropRecord] = []
    offices = []
    for office in plan.offices:
        d, y = arrays[office.office_id]
        out = _validate_office(office.office_id, office.I, office.J, d, y, mode, support, rank_tol, drops)
        if out is not None:
            offices.append(out)
    return _finish(mode, names, plan, offices, drops, n_input, support, rank_tol)


def restrict_sample(
    sample: EstimationSample,
    i_filter: Callable[[int], bool] | None = None,
    j_filter: Callable[[int], bool] | None = None,
) -> EstimationSample:
    """Keep rows and columns passing the node predicates and re-validate.

    The permutation group of the result shuffles only the retained hires of
    each office, a subgroup of the original design.
    """
    drops = list(sample.drops)
    offices = []
    for o in sample.offices:
        rk = np.array([i_filter is None or bool(i_filter(i)) for i in o.rows], dtype=bool)
        ck = np.array([j_filter is None or bool(j_filter(j)) for j in o.cols], dtype=bool)
        if rk.all() and ck.all():
            D, Y = o.D, o.Y
        else:
            removed = o.n_pairs - int(rk.sum()) * int(ck.sum())
            drops.append(DropRecord(o.office_id, "filtered", removed,
                                    rows=tuple(np.asarray(o.rows)[~rk].tolist()),
                                    cols=tuple(np.asarray(o.cols)[~ck].tolist())))
            D, Y = o.D[rk][:, ck], o.Y[rk][:, ck]
        rows = np.asarray(o.rows)[rk]
        cols = np.asarray(o.cols)[ck]
        if len(rows) == 0 or len(cols) == 0:
            drops.append(DropRecord(o.office_id, "filtered_empty", 0))
            continue
        out = _validate_office(o.office_id, rows, cols, D, Y, sample.mode, sample.support,
                               sample.rank_tol, drops)
        if out is not None:
            offices.append(out)
    return _finish(sample.mode, sample.names, sample.plan, offices, drops,
                   sample.n_input_pairs, sample.support, sample.rank_tol)


def with_outcomes(sample: EstimationSample, outcomes: Mapping[str, np.ndarray]) -> EstimationSample:
    """Same design and treatments with replaced outcome matrices."""
    offices = []
    for o in sample.offices:
        y = np.asarray(outcomes[o.office_id], dtype=np.float64)
        if y.shape != o.Y.shape:
            raise ValidationError(f"office {o.office_id!r}: outcome shape mismatch")
        offices.append(replace(o, Y=y))
    return replace(sample, offices=tuple(offices))


def shift_outcomes(sample: EstimationSample, coordinate: int, value: float) -> EstimationSample:
    """Impute ``Y - value * D[..., coordinate]`` for a constant-effect null."""
    if not 0 < coordinate < sample.dim:
        raise ValidationError("shift coordinate must be a non-intercept treatment")
    return with_outcomes(
        sample, {o.office_id: o.Y - value * o.D[..., coordinate] for o in sample.offices}
    )


# --- from networks -----------------------------------------------------------

def median_threshold(net: TemporalNetwork, plan: DesignPlan, kind: str, exclude_among=None) -> float:
    """Median of a raw statistic over all pre-drop pairs of the design."""
    values = []
    for office in plan.offices:
        raw = raw_statistic(net, kind, office.I, office.J, exclude_among)
        values.append(raw[~np.isnan(raw)].ravel())
    pooled = np.concatenate(values) if values else np.empty(0)
    if pooled.size == 0:
        raise ValidationError(f"cannot compute a median for {kind!r}: no defined pairs")
    return float(np.median(pooled))


def network_arrays(
    net: TemporalNetwork,
    plan: DesignPlan,
    stats: Sequence[NetStat],
    exclude_among=None,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Treatment arrays and tie-formation outcomes ``Y = A2[I, J]`` per office."""
    D, Y = {}, {}
    a2 = net.adj2
    for office in plan.offices:
        D[office.office_id] = treatment_matrix(net, stats, office.I, office.J, exclude_among)
        I = np.asarray(office.I, dtype=np.int64)
        J = np.asarray(office.J, dtype=np.int64)
        Y[office.office_id] = a2[I][:, J].toarray().astype(np.float64)
    return D, Y


def sample_from_network(
    net: TemporalNetwork,
    plan: DesignPlan,
    stats: Sequence[NetStat],
    mode: str = "late",
    exclude_among=None,
    support=None,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> EstimationSample:
    D, Y = network_arrays(net, plan, stats, exclude_among)
    names = ("intercept",) + tuple(s.name for s in stats)
    return build_sample(plan, D, Y, mode, names, support, rank_tol)
