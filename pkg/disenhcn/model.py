"""Disentangled hypergraph convolution: parameters, forward pass and scoring.

Each user embedding is three chunks, one per aspect (location, time,
activity). A layer propagates every chunk through each enabled hyperedge
type, fuses the per-type results with attention, and layers are averaged.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from disenhcn.autodiff import Node, Tape
from disenhcn.errors import ShapeError, UsageError
from disenhcn.hypergraph import COVERAGE, AdjacencySet
from disenhcn.schemas import ASPECTS, Aspect, ConvMode, FusionMode, HyperedgeType, ModelConfig

logger = logging.getLogger(__name__)

ENTITY_TABLES = {Aspect.LOCATION: "Q0", Aspect.TIME: "R0", Aspect.ACTIVITY: "S0"}
REPORT_COLUMNS = ["aspect", "type", "min", "q1", "median", "q3", "max"]


def xavier_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


@dataclass
class ParameterSet:
    """Named float64 tables in a fixed order (the checkpoint payload order)."""

    tables: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tables[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tables

    def __iter__(self):
        return iter(self.tables)

    def __len__(self) -> int:
        return len(self.tables)

    def items(self):
        return self.tables.items()

    def names(self) -> List[str]:
        return list(self.tables)

    def shapes(self) -> Dict[str, Tuple[int, int]]:
        return {name: tuple(int(x) for x in t.shape) for name, t in self.tables.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet({name: t.copy() for name, t in self.tables.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tables.values())

    def user_chunk(self, aspect: Aspect, chunk: int) -> np.ndarray:
        i = ASPECTS.index(aspect)
        return self.tables["P0"][:, i * chunk:(i + 1) * chunk]


def attention_names(aspect: Aspect) -> Tuple[str, str, str]:
    return f"W_{aspect.value}", f"b_{aspect.value}", f"a_{aspect.value}"


def conv_name(hyperedge_type: HyperedgeType) -> str:
    return f"conv_W_{hyperedge_type.value}"


def init_params(cfg: ModelConfig, vocab, rng: np.random.Generator) -> ParameterSet:
    """Xavier-uniform tables; attention biases start at zero.

    The per-type maps of the linearized ablation start at the identity.
    """
    c = cfg.chunk
    tables = {
        "P0": xavier_uniform(rng, vocab.n_users, cfg.d),
        "Q0": xavier_uniform(rng, vocab.n_locations, c),
        "R0": xavier_uniform(rng, vocab.n_times, c),
        "S0": xavier_uniform(rng, vocab.n_activities, c),
    }
    for aspect in ASPECTS:
        w, b, a = attention_names(aspect)
        tables[w] = xavier_uniform(rng, c, c)
        tables[b] = np.zeros((1, c))
        tables[a] = xavier_uniform(rng, c, 1)
    if cfg.conv == ConvMode.HGCONV_LINEARIZED:
        for t in cfg.enabled_types:
            tables[conv_name(t)] = np.eye(c)
    return ParameterSet(tables)


@dataclass
class FinalEmbeddings:
    P_L: np.ndarray
    P_T: np.ndarray
    P_A: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray

    @property
    def n_activities(self) -> int:
        return self.S.shape[0]

    def _check(self, u, l, t, a=None) -> None:
        limits = [(u, self.P_L.shape[0], "user"), (l, self.Q.shape[0], "location"), (t, self.R.shape[0], "time")]
        if a is not None:
            limits.append((a, self.S.shape[0], "activity"))
        for index, n, label in limits:
            if not 0 <= index < n:
                raise ShapeError(f"{label} index {index} out of range [0, {n})")

    def context_offset(self, u: int, l: int, t: int) -> float:
        return float(self.P_L[u] @ self.Q[l] + self.P_T[u] @ self.R[t])

    def score(self, u: int, l: int, t: int, a: int) -> float:
        self._check(u, l, t, a)
        return self.context_offset(u, l, t) + float(self.P_A[u] @ self.S[a])

    def score_all_activities(self, u: int, l: int, t: int) -> np.ndarray:
        self._check(u, l, t)
        return self.context_offset(u, l, t) + self.S @ self.P_A[u]

    def score_contexts(self, users, locations, times) -> np.ndarray:
        """Score matrix (n_contexts x N_A) for many contexts at once."""
        users, locations, times = (np.asarray(x, dtype=np.int64) for x in (users, locations, times))
        offset = (self.P_L[users] * self.Q[locations]).sum(axis=1) + (self.P_T[users] * self.R[times]).sum(axis=1)
        return offset[:, None] + self.P_A[users] @ self.S.T


@dataclass
class ForwardResult:
    leaves: Dict[str, Node]
    users: Dict[Aspect, Node]
    entities: Dict[Aspect, Node]
    # One entry per layer: aspect -> (N_U x |enabled|) attention weights.
    attention: List[Dict[Aspect, np.ndarray]]
    types: Tuple[HyperedgeType, ...]

    def embeddings(self) -> FinalEmbeddings:
        return FinalEmbeddings(
            P_L=self.users[Aspect.LOCATION].value,
            P_T=self.users[Aspect.TIME].value,
            P_A=self.users[Aspect.ACTIVITY].value,
            Q=self.entities[Aspect.LOCATION].value,
            R=self.entities[Aspect.TIME].value,
            S=self.entities[Aspect.ACTIVITY].value,
        )


def propagate_layer(
    tape: Tape,
    users: Dict[Aspect, Node],
    entities: Dict[Aspect, Node],
    adj: AdjacencySet,
    cfg: ModelConfig,
    leaves: Dict[str, Node],
) -> Tuple[Dict[Aspect, Dict[HyperedgeType, Node]], Dict[Aspect, Node]]:
    """Intra-type propagation of one layer.

    Returns per-aspect maps type -> user chunk, and the entity tables for the
    next layer (unchanged when the U type is disabled).
    """
    linearized = cfg.conv == ConvMode.HGCONV_LINEARIZED
    chunks: Dict[Aspect, Dict[HyperedgeType, Node]] = {s: {} for s in ASPECTS}
    next_entities = dict(entities)

    for t in cfg.enabled_types:
        if t == HyperedgeType.U:
            for s in ASPECTS:
                edge_features = tape.spmm_const(adj.node_to_edge[s], entities[s])
                if linearized:
                    edge_features = tape.matmul(edge_features, leaves[conv_name(t)])
                chunks[s][t] = edge_features
                next_entities[s] = tape.spmm_const(adj.edge_to_node[s], edge_features)
            continue

        covered = COVERAGE[t]
        for s in ASPECTS:
            if s not in covered:
                chunks[s][t] = users[s]
                continue
            x = tape.spmm_const(adj.similarity[t], users[s])
            if linearized:
                x = tape.matmul(x, leaves[conv_name(t)])
            chunks[s][t] = x

    return chunks, next_entities


def fuse_types(
    tape: Tape,
    chunks: Dict[HyperedgeType, Node],
    leaves: Dict[str, Node],
    aspect: Aspect,
    fusion: FusionMode,
) -> Tuple[Node, np.ndarray]:
    """Fuse per-type chunks of one aspect; also returns the weights used."""
    if not chunks:
        raise UsageError("cannot fuse an empty set of hyperedge types")
    parts = list(chunks.values())
    n, c = parts[0].shape
    k = len(parts)

    if fusion == FusionMode.MEAN:
        total = parts[0]
        for p in parts[1:]:
            total = tape.add(total, p)
        return tape.scale(total, 1.0 / k), np.full((n, k), 1.0 / k)

    if fusion == FusionMode.MAX:
        return tape.maximum(parts), np.full((n, k), np.nan)

    w, b, a = (leaves[name] for name in attention_names(aspect))
    ones_col = tape.constant(np.ones((n, 1)))
    ones_row = tape.constant(np.ones((1, c)))
    bias = tape.matmul(ones_col, b)
    scores = [tape.matmul(tape.tanh(tape.add(tape.matmul(p, w), bias)), a) for p in parts]
    alpha = tape.softmax_rows(tape.concat_cols(scores))

    fused = None
    for i, p in enumerate(parts):
        weight = tape.matmul(tape.slice_cols(alpha, i, i + 1), ones_row)
        term = tape.hadamard_dense(weight, p)
        fused = term if fused is None else tape.add(fused, term)
    return fused, alpha.value


def combine_layers(tape: Tape, snapshots: List[Node]) -> Node:
    """Uniform average of the layer snapshots of one table."""
    total = snapshots[0]
    for s in snapshots[1:]:
        total = tape.add(total, s)
    return tape.scale(total, 1.0 / len(snapshots))


def forward(params: ParameterSet, adj: AdjacencySet, cfg: ModelConfig, tape: Tape) -> ForwardResult:
    c = cfg.chunk
    leaves = {name: tape.leaf(value, name) for name, value in params.items()}
    if leaves["P0"].shape[1] != cfg.d:
        raise ShapeError(f"P0 has {leaves['P0'].shape[1]} columns, model expects d={cfg.d}")

    users = {s: tape.slice_cols(leaves["P0"], i * c, (i + 1) * c) for i, s in enumerate(ASPECTS)}
    entities = {s: leaves[ENTITY_TABLES[s]] for s in ASPECTS}
    user_layers = {s: [users[s]] for s in ASPECTS}
    entity_layers = {s: [entities[s]] for s in ASPECTS}
    attention = []

    for _ in range(cfg.layers):
        chunks, entities = propagate_layer(tape, users, entities, adj, cfg, leaves)
        weights = {}
        for s in ASPECTS:
            users[s], weights[s] = fuse_types(tape, chunks[s], leaves, s, cfg.fusion)
            user_layers[s].append(users[s])
            entity_layers[s].append(entities[s])
        attention.append(weights)

    return ForwardResult(
        leaves=leaves,
        users={s: combine_layers(tape, user_layers[s]) for s in ASPECTS},
        entities={s: combine_layers(tape, entity_layers[s]) for s in ASPECTS},
        attention=attention,
        types=tuple(cfg.enabled_types),
    )


def final_embeddings(params: ParameterSet, adj: AdjacencySet, cfg: ModelConfig) -> FinalEmbeddings:
    return forward(params, adj, cfg, Tape()).embeddings()


def attention_report(params: ParameterSet, adj: AdjacencySet, cfg: ModelConfig) -> pd.DataFrame:
    """Five-number summary of the attention weights over users per (aspect, type).

    With several layers each user's weight is the average over layers.
    """
    if cfg.fusion != FusionMode.ATTENTION:
        raise UsageError(f"attention report needs fusion=attention, model uses {cfg.fusion.value}")
    result = forward(params, adj, cfg, Tape())

    rows = []
    for s in ASPECTS:
        pooled = np.mean([layer[s] for layer in result.attention], axis=0)
        for k, t in enumerate(result.types):
            q = np.percentile(pooled[:, k], [0, 25, 50, 75, 100])
            rows.append([s.value, t.value, *q.tolist()])
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)
