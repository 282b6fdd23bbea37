"""Sparse two-snapshot networks and the endogenous pair statistics.

Adjacency snapshots are stored as symmetric CSR matrices with unit entries.
Node indices follow roster order; external ids are kept on the records.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import ValidationError

logger = logging.getLogger(__name__)

STAT_KINDS = ("indirect_count", "indirect_flag", "degree", "density")

# CLI-facing treatment names -> (kind, binarized?)
TREATMENT_NAMES = {
    "indirect_flag": ("indirect_flag", False),
    "indirect_count": ("indirect_count", False),
    "degree": ("degree", False),
    "high_degree": ("degree", True),
    "density": ("density", False),
    "high_density": ("density", True),
}


@dataclass(frozen=True)
class NodeRecord:
    id: str
    office: str | None = None
    new_hire: bool = False
    covariates: Mapping[str, float | None] = field(default_factory=dict)

    def __post_init__(self):
        if self.new_hire and not self.office:
            raise ValidationError(f"new hire {self.id!r} has no office")


@dataclass(frozen=True)
class NetStat:
    """One treatment coordinate.

    ``binarize_threshold`` turns the raw statistic into ``1(value > threshold)``.
    The ``indirect_flag`` kind is already binary and ignores it.
    """

    kind: str
    binarize_threshold: float | None = None

    def __post_init__(self):
        if self.kind not in STAT_KINDS:
            raise ValidationError(f"unknown statistic kind {self.kind!r}")

    @property
    def name(self) -> str:
        if self.binarize_threshold is None or self.kind == "indirect_flag":
            return self.kind
        if self.kind == "degree":
            return "high_degree"
        if self.kind == "density":
            return "high_density"
        return f"{self.kind}_gt"

    @property
    def binary(self) -> bool:
        return self.kind == "indirect_flag" or self.binarize_threshold is not None

    @classmethod
    def from_name(cls, name: str, threshold: float | None = None) -> "NetStat":
        try:
            kind, binarized = TREATMENT_NAMES[name]
        except KeyError:
            raise ValidationError(
                f"unknown treatment {name!r}; expected one of {sorted(TREATMENT_NAMES)}"
            ) from None
        if binarized and threshold is None:
            raise ValidationError(f"treatment {name!r} needs a threshold")
        return cls(kind, threshold if binarized else None)


@dataclass(frozen=True, eq=False)
class TemporalNetwork:
    n: int
    nodes: tuple[NodeRecord, ...]
    adj1: sp.csr_matrix
    adj2: sp.csr_matrix
    duplicate_edges: tuple[int, int] = (0, 0)

    def __post_init__(self):
        index = {}
        for k, rec in enumerate(self.nodes):
            if rec.id in index:
                raise ValidationError(f"duplicate node id {rec.id!r}")
            index[rec.id] = k
        object.__setattr__(self, "_index", index)

    def index_of(self, node_id) -> int:
        try:
            return self._index[str(node_id)]
        except KeyError:
            raise ValidationError(f"unknown node id {node_id!r}") from None

    def ids(self, indices: Iterable[int]) -> list[str]:
        return [self.nodes[i].id for i in indices]

    def snapshot(self, t: int) -> sp.csr_matrix:
        if t == 1:
            return self.adj1
        if t == 2:
            return self.adj2
        raise ValidationError(f"snapshot must be 1 or 2, got {t!r}")

    def edges(self, t: int = 1) -> list[tuple[int, int]]:
        """Undirected edges of snapshot ``t`` as ``(lo, hi)`` index pairs."""
        upper = sp.triu(self.snapshot(t), k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        return [(int(upper.row[k]), int(upper.col[k])) for k in order]

    def n_edges(self, t: int = 1) -> int:
        return self.snapshot(t).nnz // 2

    @property
    def new_hires(self) -> list[int]:
        return [k for k, rec in enumerate(self.nodes) if rec.new_hire]

    def _check(self, *indices):
        for i in indices:
            if not 0 <= int(i) < self.n:
                raise ValidationError(f"node index {i} out of range [0, {self.n})")


def _adjacency(n: int, pairs: np.ndarray) -> tuple[sp.csr_matrix, int]:
    if len(pairs) == 0:
        return sp.csr_matrix((n, n), dtype=np.int32), 0
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    keys = np.unique(lo.astype(np.int64) * n + hi)
    dup = len(pairs) - len(keys)
    lo, hi = keys // n, keys % n
    rows = np.concatenate([lo, hi])
    cols = np.concatenate([hi, lo])
    data = np.ones(len(rows), dtype=np.int32)
    mat = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    mat.sort_indices()
    return mat, dup


def build_network(node_rows, edges1, edges2) -> TemporalNetwork:
    """Build an immutable two-snapshot network from external-id edge lists.

    ``node_rows`` holds :class:`NodeRecord` objects or mappings with keys
    ``id``, ``office``, ``new_hire`` and ``covariates``.  Duplicate edges and
    reversed duplicates collapse to one undirected edge; self-loops raise.
    """
    nodes = []
    for row in node_rows:
        if isinstance(row, NodeRecord):
            nodes.append(row)
        else:
            nodes.append(
                NodeRecord(
                    id=str(row["id"]),
                    office=row.get("office") or None,
                    new_hire=bool(row.get("new_hire", False)),
                    covariates=dict(row.get("covariates", {})),
                )
            )
    n = len(nodes)
    index = {}
    for k, rec in enumerate(nodes):
        if rec.id in index:
            raise ValidationError(f"duplicate node id {rec.id!r}")
        index[rec.id] = k

    def resolve(edges, label):
        out = []
        for a, b in edges:
            a, b = str(a), str(b)
            for end in (a, b):
                if end not in index:
                    raise ValidationError(f"{label}: edge ({a}, {b}) references unknown node {end!r}")
            if a == b:
                raise ValidationError(f"{label}: self-loop on node {a!r}")
            out.append((index[a], index[b]))
        return np.asarray(out, dtype=np.int64).reshape(-1, 2)

    adj1, dup1 = _adjacency(n, resolve(edges1, "snapshot 1"))
    adj2, dup2 = _adjacency(n, resolve(edges2, "snapshot 2"))
    if dup1 or dup2:
        logger.info("collapsed duplicate edges: %d in snapshot 1, %d in snapshot 2", dup1, dup2)
    return TemporalNetwork(n, tuple(nodes), adj1, adj2, (dup1, dup2))


def _without_ties_among(adj: sp.csr_matrix, group: Sequence[int] | None) -> sp.csr_matrix:
    if group is None or len(group) == 0:
        return adj
    mask = np.zeros(adj.shape[0], dtype=bool)
    mask[np.asarray(group)] = True
    coo = adj.tocoo()
    keep = ~(mask[coo.row] & mask[coo.col])
    out = sp.csr_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=adj.shape)
    out.sort_indices()
    return out


def indirect_ties(net: TemporalNetwork, i: int, j: int) -> int:
    """Number of common neighbours of ``i`` and ``j`` in snapshot 1."""
    net._check(i, j)
    if i == j:
        raise ValidationError("indirect ties need two distinct nodes")
    a = net.adj1
    ni = a.indices[a.indptr[i]:a.indptr[i + 1]]
    nj = a.indices[a.indptr[j]:a.indptr[j + 1]]
    return int(np.intersect1d(ni, nj, assume_unique=True).size)


def degree(net: TemporalNetwork, i: int, snapshot: int = 1, exclude_among=None) -> int:
    net._check(i)
    a = _without_ties_among(net.snapshot(snapshot), exclude_among)
    return int(a.indptr[i + 1] - a.indptr[i])


def local_density(net: TemporalNetwork, i: int, exclude_among=None) -> float | None:
    """Share of neighbour pairs of ``i`` that are tied; None below degree 2."""
    net._check(i)
    a = _without_ties_among(net.adj1, exclude_among)
    nbrs = a.indices[a.indptr[i]:a.indptr[i + 1]]
    d = len(nbrs)
    if d < 2:
        return None
    closed = a[nbrs][:, nbrs].nnz // 2
    return closed / (d * (d - 1) / 2)


def _row_statistics(adj: sp.csr_matrix, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Degree and local density (NaN where undefined) for the given rows."""
    sub = adj[rows]
    deg = np.diff(sub.indptr).astype(np.float64)
    closed = np.asarray((sub @ adj).multiply(sub).sum(axis=1)).ravel() / 2.0
    pairs = deg * (deg - 1) / 2.0
    dens = np.full(len(rows), np.nan)
    ok = deg >= 2
    dens[ok] = closed[ok] / pairs[ok]
    return deg, dens


def raw_statistic(net: TemporalNetwork, kind: str, I, J, exclude_among=None) -> np.ndarray:
    """Un-binarized statistic over ``I x J`` (NaN marks undefined density)."""
    I = np.asarray(I, dtype=np.int64)
    J = np.asarray(J, dtype=np.int64)
    if kind in ("indirect_count", "indirect_flag"):
        a = net.adj1
        counts = (a[I] @ a[J].T).toarray().astype(np.float64)
        return (counts > 0).astype(np.float64) if kind == "indirect_flag" else counts
    a = _without_ties_among(net.adj1, exclude_among)
    deg, dens = _row_statistics(a, I)
    col = deg if kind == "degree" else dens
    return np.repeat(col[:, None], len(J), axis=1)


def treatment_matrix(net: TemporalNetwork, stats: Sequence[NetStat], I, J, exclude_among=None) -> np.ndarray:
    """Treatment vectors ``(1, stat_1, ..., stat_k)`` for every pair in ``I x J``.

    Returns an array of shape ``(|I|, |J|, 1 + k)``.  Pairs whose density is
    undefined carry NaN in that coordinate; see :func:`undefined_pairs`.

    ``exclude_among`` optionally lists nodes whose mutual ties are ignored when
    computing degree and density.
    """
    I = np.asarray(I, dtype=np.int64)
    J = np.asarray(J, dtype=np.int64)
    net._check(*I, *J)
    if np.intersect1d(I, J).size:
        raise ValidationError("treatment rows and columns must be disjoint")
    out = np.empty((len(I), len(J), 1 + len(stats)))
    out[..., 0] = 1.0
    for c, stat in enumerate(stats, start=1):
        raw = raw_statistic(net, stat.kind, I, J, exclude_among)
        if stat.kind != "indirect_flag" and stat.binarize_threshold is not None:
            nan = np.isnan(raw)
            raw = (raw > stat.binarize_threshold).astype(np.float64)
            raw[nan] = np.nan
        out[..., c] = raw
    return out


def undefined_pairs(D: np.ndarray) -> np.ndarray:
    return np.isnan(D).any(axis=-1)


def apply_permutation(net: TemporalNetwork, pi) -> TemporalNetwork:
    """Relabel snapshot 1 so that the new entry ``(i, j)`` is ``A1[pi[i], pi[j]]``."""
    pi = np.asarray(pi, dtype=np.int64)
    if pi.shape != (net.n,) or not np.array_equal(np.sort(pi), np.arange(net.n)):
        raise ValidationError("permutation is not a bijection on node indices")
    moved = net.adj1[pi][:, pi].tocsr()
    moved.sort_indices()
    return TemporalNetwork(net.n, net.nodes, moved, net.adj2, net.duplicate_edges)
