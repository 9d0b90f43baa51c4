"""Heterogeneous hypergraph over users, built as incidences and equivalent adjacencies.

Combination hyperedges (LT, LA, TA, LTA) are never enumerated on the production
path: with binary incidences, H_LTA H_LTAᵀ = A_L ⊙ A_T ⊙ A_A where A_s = R_s R_sᵀ.
`oracle_adjacency` enumerates them explicitly for verification on small inputs.
"""
import itertools
import logging
from dataclasses import dataclass, field
from functools import reduce
from typing import Dict, Iterable, Tuple

import numpy as np

from disenhcn import sparse
from disenhcn.data import DatasetBundle
from disenhcn.errors import DataError
from disenhcn.schemas import ALL_TYPES, Aspect, HyperedgeType
from disenhcn.sparse import CsrMatrix

logger = logging.getLogger(__name__)

# Aspects whose user chunk propagates through each similarity type.
COVERAGE: Dict[HyperedgeType, Tuple[Aspect, ...]] = {
    HyperedgeType.L: (Aspect.LOCATION,),
    HyperedgeType.T: (Aspect.TIME,),
    HyperedgeType.A: (Aspect.ACTIVITY,),
    HyperedgeType.LT: (Aspect.LOCATION, Aspect.TIME),
    HyperedgeType.LA: (Aspect.LOCATION, Aspect.ACTIVITY),
    HyperedgeType.TA: (Aspect.TIME, Aspect.ACTIVITY),
    HyperedgeType.LTA: (Aspect.LOCATION, Aspect.TIME, Aspect.ACTIVITY),
}
SIMILARITY_TYPES = tuple(t for t in ALL_TYPES if t != HyperedgeType.U)

ORACLE_MAX_COLUMNS = 10 ** 6


@dataclass(frozen=True)
class IncidenceSet:
    """Binary user x entity incidences from the training split."""

    R_ul: CsrMatrix
    R_ut: CsrMatrix
    R_ua: CsrMatrix

    @property
    def n_users(self) -> int:
        return self.R_ul.n_rows

    def for_aspect(self, aspect: Aspect) -> CsrMatrix:
        return {Aspect.LOCATION: self.R_ul, Aspect.TIME: self.R_ut, Aspect.ACTIVITY: self.R_ua}[aspect]


@dataclass(frozen=True)
class AdjacencySet:
    n_users: int
    enabled: Tuple[HyperedgeType, ...]
    raw: Dict[HyperedgeType, CsrMatrix] = field(default_factory=dict)
    similarity: Dict[HyperedgeType, CsrMatrix] = field(default_factory=dict)
    node_to_edge: Dict[Aspect, CsrMatrix] = field(default_factory=dict)
    edge_to_node: Dict[Aspect, CsrMatrix] = field(default_factory=dict)


def build_incidence(bundle: DatasetBundle) -> IncidenceSet:
    if not bundle.train:
        raise DataError("cannot build the hypergraph from an empty training set")
    v = bundle.vocab
    train = np.asarray(bundle.train, dtype=np.int64)
    ones = np.ones(len(train))

    def binary(cols: np.ndarray, n_cols: int) -> CsrMatrix:
        m = sparse.from_arrays(v.n_users, n_cols, train[:, 0], cols, ones)
        return CsrMatrix(m.n_rows, m.n_cols, m.row_ptr, m.col_idx, np.ones_like(m.values))

    return IncidenceSet(
        R_ul=binary(train[:, 1], v.n_locations),
        R_ut=binary(train[:, 2], v.n_times),
        R_ua=binary(train[:, 3], v.n_activities),
    )


def build_equivalent_adjacencies(inc: IncidenceSet, enabled: Iterable[HyperedgeType] = ALL_TYPES) -> AdjacencySet:
    """Normalized propagation operators for every enabled hyperedge type."""
    enabled = tuple(t for t in ALL_TYPES if t in set(enabled))
    similarity_types = [t for t in enabled if t != HyperedgeType.U]

    needed = {a for t in similarity_types for a in COVERAGE[t]}
    base = {}
    for aspect in Aspect:
        if aspect in needed:
            r = inc.for_aspect(aspect)
            base[aspect] = sparse.spgemm(r, sparse.transpose(r))

    raw, similarity = {}, {}
    for t in similarity_types:
        raw[t] = reduce(sparse.hadamard, (base[a] for a in COVERAGE[t]))
        similarity[t] = sparse.sym_normalize(raw[t])
        logger.debug("A_%s: nnz=%d", t.value, raw[t].nnz)

    node_to_edge, edge_to_node = {}, {}
    if HyperedgeType.U in enabled:
        for aspect in Aspect:
            r = inc.for_aspect(aspect)
            node_to_edge[aspect] = sparse.row_normalize(r)
            edge_to_node[aspect] = sparse.row_normalize(sparse.transpose(r))

    logger.info(
        "Built adjacencies for %s (total nnz %d)",
        ",".join(t.value for t in enabled),
        sum(m.nnz for m in raw.values()),
    )
    return AdjacencySet(
        n_users=inc.n_users,
        enabled=enabled,
        raw=raw,
        similarity=similarity,
        node_to_edge=node_to_edge,
        edge_to_node=edge_to_node,
    )


def oracle_adjacency(inc: IncidenceSet, hyperedge_type: HyperedgeType) -> CsrMatrix:
    """H Hᵀ with every combination hyperedge enumerated as its own column."""
    if hyperedge_type == HyperedgeType.U:
        raise DataError("the oracle covers user-similarity types only")
    matrices = [inc.for_aspect(a) for a in COVERAGE[hyperedge_type]]
    dims = tuple(m.n_cols for m in matrices)
    n_cols = int(np.prod(dims, dtype=np.int64))
    if n_cols > ORACLE_MAX_COLUMNS:
        raise DataError(f"oracle instance too large: {n_cols} combination hyperedges")

    rows, cols = [], []
    for u in range(inc.n_users):
        members = [m.col_idx[m.row_ptr[u]:m.row_ptr[u + 1]] for m in matrices]
        for combo in itertools.product(*members):
            rows.append(u)
            cols.append(int(np.ravel_multi_index(combo, dims)))

    h = sparse.from_arrays(inc.n_users, n_cols, rows, cols, np.ones(len(rows)))
    return sparse.spgemm(h, sparse.transpose(h))


def _degree_histogram(m: CsrMatrix) -> Dict[str, int]:
    """Rows bucketed by stored-entry count in powers of two: 0, 1, 2-3, 4-7, ..."""
    degrees = np.diff(m.row_ptr)
    histogram: Dict[str, int] = {}
    if not len(degrees):
        return histogram
    buckets = np.where(degrees > 0, np.floor(np.log2(np.maximum(degrees, 1))).astype(np.int64) + 1, 0)
    for b, count in zip(*np.unique(buckets, return_counts=True)):
        if b == 0:
            label = "0"
        elif b == 1:
            label = "1"
        else:
            label = f"{2 ** (b - 1)}-{2 ** b - 1}"
        histogram[label] = int(count)
    return histogram


def adjacency_stats(adj: AdjacencySet) -> Dict[str, dict]:
    """Per-type nnz, row count, memory footprint and degree histogram."""
    report: Dict[str, dict] = {}
    for t, m in adj.similarity.items():
        report[t.value] = {
            "nnz": m.nnz,
            "rows": m.n_rows,
            "bytes": sparse.nbytes(m),
            "degree_histogram": _degree_histogram(m),
        }
    if adj.node_to_edge:
        operators = list(adj.node_to_edge.values()) + list(adj.edge_to_node.values())
        report[HyperedgeType.U.value] = {
            "nnz": sum(m.nnz for m in adj.node_to_edge.values()),
            "rows": adj.n_users,
            "bytes": sum(sparse.nbytes(m) for m in operators),
            "degree_histogram": _degree_histogram(adj.node_to_edge[Aspect.LOCATION]),
        }
    return report
