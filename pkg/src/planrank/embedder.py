"""Node featurization and tree encoders (child-sum TreeLSTM, TreeCNN).

Every plan of a candidate list is embedded in one batched pass: the nodes of
all trees are flattened into a single feature matrix ordered by node height,
so the TreeLSTM can process one height level at a time and the TreeCNN can
gather children by row index.
"""
from __future__ import annotations

import math
import zlib
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from planrank import numerics as nx
from planrank.errors import DimensionMismatch
from planrank.numerics import ParamStore, Tensor
from planrank.plan_ir import OP_KINDS, PlanNode, PlanTree

NUM_OPS = len(OP_KINDS)
TABLE_BUCKETS = 16
FEATURE_DIM = NUM_OPS + 1 + 1 + TABLE_BUCKETS
EMBEDDERS = ("tree_lstm", "tree_cnn")

_OP_INDEX = {op: i for i, op in enumerate(OP_KINDS)}


@dataclass(frozen=True)
class CorpusScaling:
    """Normalizers for log-cardinality and log-cost, fixed at training time."""

    max_log_card: float
    max_log_cost: float

    @classmethod
    def from_plans(cls, plans: Sequence[PlanTree]) -> "CorpusScaling":
        card, cost = 0.0, 0.0
        for p in plans:
            for node in p.root.walk():
                card = max(card, math.log1p(node.est_cardinality))
                cost = max(cost, math.log1p(node.est_cost))
        return cls(max(card, 1e-12), max(cost, 1e-12))

    def to_obj(self) -> dict:
        return {"max_log_card": self.max_log_card, "max_log_cost": self.max_log_cost}

    @classmethod
    def from_obj(cls, obj: dict) -> "CorpusScaling":
        return cls(float(obj["max_log_card"]), float(obj["max_log_cost"]))


def table_bucket(table_id: str) -> int:
    return zlib.crc32(table_id.encode("utf-8")) % TABLE_BUCKETS


@dataclass(frozen=True)
class NodeFeatures:
    op_onehot: tuple[float, ...]
    log_card: float
    log_cost: float
    table_bits: tuple[float, ...]

    def vector(self) -> np.ndarray:
        return np.array(self.op_onehot + (self.log_card, self.log_cost) + self.table_bits)


@dataclass(frozen=True)
class FeatureTree:
    features: NodeFeatures
    children: tuple["FeatureTree", ...] = ()


def node_features(node: PlanNode, scaling: CorpusScaling) -> NodeFeatures:
    onehot = [0.0] * NUM_OPS
    onehot[_OP_INDEX[node.operator_kind]] = 1.0
    bits = [0.0] * TABLE_BUCKETS
    for t in node.table_ids:
        bits[table_bucket(t)] = 1.0
    return NodeFeatures(
        tuple(onehot),
        min(math.log1p(node.est_cardinality) / scaling.max_log_card, 1.0),
        min(math.log1p(node.est_cost) / scaling.max_log_cost, 1.0),
        tuple(bits),
    )


def featurize(plan: PlanTree, scaling: CorpusScaling) -> FeatureTree:
    def rec(node: PlanNode) -> FeatureTree:
        return FeatureTree(node_features(node, scaling), tuple(rec(c) for c in node.children))

    return rec(plan.root)


# ---------------------------------------------------------------------------
# Batched forest layout
# ---------------------------------------------------------------------------


@dataclass
class ForestBatch:
    """Flattened nodes of several trees, ordered by (height, tree, pre-order).

    ``levels[h]`` is the row range holding nodes of height ``h``; for each
    non-leaf level, ``child_rows``/``child_parent`` list every (child row,
    parent offset within the level) pair in parent-then-child order.
    """

    x: np.ndarray
    levels: list[tuple[int, int]]
    child_rows: list[np.ndarray]
    child_parent: list[np.ndarray]
    left: np.ndarray  # first child row, or num_nodes when absent
    right: np.ndarray  # second child row, or num_nodes when absent
    roots: np.ndarray
    tree_rows: list[np.ndarray]

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def num_trees(self) -> int:
        return len(self.roots)


def build_batch(trees: Sequence[FeatureTree]) -> ForestBatch:
    flat: list[tuple[int, int, int, FeatureTree, list[int]]] = []  # height, tree, seq, node, kids

    def visit(node: FeatureTree, tree: int) -> int:
        me = len(flat)
        flat.append([0, tree, me, node, []])
        kids = [visit(c, tree) for c in node.children]
        flat[me][4] = kids
        flat[me][0] = 1 + max((flat[k][0] for k in kids), default=-1)
        return me

    roots_seq = [visit(t, i) for i, t in enumerate(trees)]
    order = sorted(range(len(flat)), key=lambda s: (flat[s][0], flat[s][1], s))
    row_of = {s: r for r, s in enumerate(order)}
    n = len(flat)

    x = np.stack([flat[s][3].features.vector() for s in order]) if n else np.zeros((0, FEATURE_DIM))
    left = np.full(n, n, dtype=np.intp)
    right = np.full(n, n, dtype=np.intp)
    levels: list[tuple[int, int]] = []
    child_rows: list[np.ndarray] = []
    child_parent: list[np.ndarray] = []
    start = 0
    while start < n:
        h = flat[order[start]][0]
        stop = start
        while stop < n and flat[order[stop]][0] == h:
            stop += 1
        rows, parents = [], []
        for r in range(start, stop):
            kids = [row_of[k] for k in flat[order[r]][4]]
            if kids:
                left[r] = kids[0]
            if len(kids) > 1:
                right[r] = kids[1]
            rows.extend(kids)
            parents.extend([r - start] * len(kids))
        levels.append((start, stop))
        child_rows.append(np.array(rows, dtype=np.intp))
        child_parent.append(np.array(parents, dtype=np.intp))
        start = stop
    tree_rows = [[] for _ in trees]
    for r, s in enumerate(order):
        tree_rows[flat[s][1]].append(r)
    return ForestBatch(
        x, levels, child_rows, child_parent, left, right,
        np.array([row_of[s] for s in roots_seq], dtype=np.intp),
        [np.array(rows, dtype=np.intp) for rows in tree_rows],
    )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def init_embedder(params: ParamStore, kind: str, d_model: int, rng: np.random.Generator) -> None:
    f, d = FEATURE_DIM, d_model
    if kind == "tree_lstm":
        params.uniform("embed.lstm.w_iou", (f, 3 * d), f, rng)
        params.zeros("embed.lstm.b_iou", (3 * d,))
        params.uniform("embed.lstm.u_iou", (d, 3 * d), d, rng)
        params.uniform("embed.lstm.w_f", (f, d), f, rng)
        params.zeros("embed.lstm.b_f", (d,))
        params.uniform("embed.lstm.u_f", (d, d), d, rng)
        params.uniform("embed.lstm.w_out", (d, d), d, rng)
        params.zeros("embed.lstm.b_out", (d,))
    elif kind == "tree_cnn":
        params.uniform("embed.cnn.w_in", (f, d), f, rng)
        params.zeros("embed.cnn.b_in", (d,))
        for r in range(2):
            params.uniform(f"embed.cnn.conv{r}.w", (3 * d, d), 3 * d, rng)
            params.zeros(f"embed.cnn.conv{r}.b", (d,))
            params.zeros(f"embed.cnn.conv{r}.absent", (1, d))
        params.uniform("embed.cnn.w_out", (d, d), d, rng)
        params.zeros("embed.cnn.b_out", (d,))
    else:
        raise ValueError(f"unknown embedder {kind!r}; expected one of {EMBEDDERS}")


def _check_dims(batch: ForestBatch, w: Tensor) -> None:
    if batch.x.shape[1] != w.shape[0]:
        raise DimensionMismatch(f"feature width {batch.x.shape[1]} != weight input dim {w.shape[0]}")


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------


def embed_tree_lstm(batch: ForestBatch, params: ParamStore) -> Tensor:
    """Child-sum TreeLSTM, returning one d_model row per tree.

    For node j with children C(j)::

        h~ = sum_k h_k
        i, o, u = sigmoid/sigmoid/tanh(W x_j + U h~ + b)
        f_k = sigmoid(W_f x_j + U_f h_k + b_f)        (one gate per child)
        c_j = i * u + sum_k f_k * c_k
        h_j = o * tanh(c_j)
    """
    w_iou, u_iou, b_iou = params["embed.lstm.w_iou"], params["embed.lstm.u_iou"], params["embed.lstm.b_iou"]
    w_f, u_f, b_f = params["embed.lstm.w_f"], params["embed.lstm.u_f"], params["embed.lstm.b_f"]
    _check_dims(batch, w_iou)
    d = u_f.shape[0]
    x = Tensor(batch.x)
    x_iou = nx.linear(x, w_iou, b_iou)
    x_f = nx.linear(x, w_f, b_f)

    h_all: Tensor | None = None
    c_all: Tensor | None = None
    for (start, stop), rows, parents in zip(batch.levels, batch.child_rows, batch.child_parent):
        iou = nx.slice_rows(x_iou, start, stop)
        n_level = stop - start
        if len(rows):
            h_kids = nx.take_rows(h_all, rows)
            c_kids = nx.take_rows(c_all, rows)
            iou = nx.add(iou, nx.matmul(nx.segment_sum(h_kids, parents, n_level), u_iou))
            f = nx.sigmoid(nx.add(nx.take_rows(nx.slice_rows(x_f, start, stop), parents),
                                  nx.matmul(h_kids, u_f)))
            carried = nx.segment_sum(nx.mul(f, c_kids), parents, n_level)
        i = nx.sigmoid(nx.slice_cols(iou, 0, d))
        o = nx.sigmoid(nx.slice_cols(iou, d, 2 * d))
        u = nx.tanh(nx.slice_cols(iou, 2 * d, 3 * d))
        c = nx.mul(i, u)
        if len(rows):
            c = nx.add(c, carried)
        h = nx.mul(o, nx.tanh(c))
        h_all = h if h_all is None else nx.concat([h_all, h], axis=0)
        c_all = c if c_all is None else nx.concat([c_all, c], axis=0)
    root_h = nx.take_rows(h_all, batch.roots)
    return nx.linear(root_h, params["embed.lstm.w_out"], params["embed.lstm.b_out"])


def embed_tree_cnn(batch: ForestBatch, params: ParamStore) -> Tensor:
    """Two rounds of (node, left child, right child) convolution, max-pooled per tree."""
    _check_dims(batch, params["embed.cnn.w_in"])
    z = nx.linear(Tensor(batch.x), params["embed.cnn.w_in"], params["embed.cnn.b_in"])
    for r in range(2):
        padded = nx.concat([z, params[f"embed.cnn.conv{r}.absent"]], axis=0)
        triangle = nx.concat([z, nx.take_rows(padded, batch.left), nx.take_rows(padded, batch.right)], axis=1)
        z = nx.tanh(nx.linear(triangle, params[f"embed.cnn.conv{r}.w"], params[f"embed.cnn.conv{r}.b"]))
    pooled = nx.segment_max(z, batch.tree_rows)
    return nx.linear(pooled, params["embed.cnn.w_out"], params["embed.cnn.b_out"])


def embed_batch(kind: str, batch: ForestBatch, params: ParamStore) -> Tensor:
    if kind == "tree_lstm":
        return embed_tree_lstm(batch, params)
    if kind == "tree_cnn":
        return embed_tree_cnn(batch, params)
    raise ValueError(f"unknown embedder {kind!r}")


def embed_plans(kind: str, plans: Sequence[PlanTree], scaling: CorpusScaling, params: ParamStore) -> Tensor:
    return embed_batch(kind, build_batch([featurize(p, scaling) for p in plans]), params)
