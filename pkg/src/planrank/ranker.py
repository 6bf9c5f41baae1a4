"""Listwise ranking head: set-transformer context, position scores, permutation decoding."""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np

from planrank import numerics as nx
from planrank.assignment import assignment_value, solve_assignment
from planrank.embedder import CorpusScaling, ForestBatch, build_batch, embed_batch, featurize
from planrank.errors import DimensionMismatch, ListTooLong, NonFiniteScores
from planrank.numerics import ParamStore, Tensor


@dataclass(frozen=True)
class RankerConfig:
    d_model: int = 32
    num_layers: int = 1
    num_heads: int = 4
    d_ff: int = 0  # 0 means 4 * d_model
    n_max: int = 32

    def __post_init__(self):
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for name in ("d_model", "num_layers", "num_heads", "d_ff", "n_max"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads

    def to_obj(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RankedList:
    """``permutation[i]`` is the 0-based position of plan i; ``by_position`` lists plans best-first."""

    permutation: tuple[int, ...]
    by_position: tuple[int, ...]

    @classmethod
    def from_permutation(cls, perm: Sequence[int]) -> "RankedList":
        by_position = [0] * len(perm)
        for plan, pos in enumerate(perm):
            by_position[pos] = plan
        return cls(tuple(perm), tuple(by_position))

    def relabel(self, order: Sequence[int]) -> "RankedList":
        """Express a ranking of ``plans[order]`` in terms of the original plan indices."""
        perm = [0] * len(order)
        for new, old in enumerate(order):
            perm[old] = self.permutation[new]
        return RankedList.from_permutation(perm)


def init_ranker(params: ParamStore, cfg: RankerConfig, rng: np.random.Generator) -> None:
    d, f = cfg.d_model, cfg.d_ff
    for layer in range(cfg.num_layers):
        p = f"rank.layer{layer}"
        for w in ("wq", "wk", "wv", "wo"):
            params.uniform(f"{p}.{w}", (d, d), d, rng)
        params.zeros(f"{p}.bo", (d,))
        params.ones(f"{p}.ln1.gain", (d,))
        params.zeros(f"{p}.ln1.shift", (d,))
        params.uniform(f"{p}.ff.w1", (d, f), d, rng)
        params.zeros(f"{p}.ff.b1", (f,))
        params.uniform(f"{p}.ff.w2", (f, d), f, rng)
        params.zeros(f"{p}.ff.b2", (d,))
        params.ones(f"{p}.ln2.gain", (d,))
        params.zeros(f"{p}.ln2.shift", (d,))
    params.uniform("rank.head.w", (d, d), d, rng)
    params.zeros("rank.head.b", (d,))
    params.uniform("rank.pos_queries", (cfg.n_max, d), d, rng)


def _split_heads(t: Tensor, n: int, cfg: RankerConfig) -> Tensor:
    return nx.transpose(nx.reshape(t, (n, cfg.num_heads, cfg.d_k)), (1, 0, 2))


def encode_context(embeddings: Tensor, params: ParamStore, cfg: RankerConfig,
                   attention_out: list | None = None) -> Tensor:
    """Post-norm transformer encoder over the plan list; no positional encoding.

    Per head, ``A = softmax(Q K^T / sqrt(d_k))`` over the list and the head
    output is ``A V``. When ``attention_out`` is given, each layer's
    attention array of shape (heads, n, n) is appended to it.
    """
    n, d = embeddings.shape
    if n > cfg.n_max:
        raise ListTooLong(f"{n} plans exceeds n_max={cfg.n_max}")
    if d != cfg.d_model:
        raise DimensionMismatch(f"embedding width {d} != d_model {cfg.d_model}")
    h = embeddings
    inv_sqrt_dk = 1.0 / math.sqrt(cfg.d_k)
    for layer in range(cfg.num_layers):
        p = f"rank.layer{layer}"
        q = _split_heads(nx.matmul(h, params[f"{p}.wq"]), n, cfg)
        k = _split_heads(nx.matmul(h, params[f"{p}.wk"]), n, cfg)
        v = _split_heads(nx.matmul(h, params[f"{p}.wv"]), n, cfg)
        attn = nx.softmax(nx.scale(nx.matmul(q, nx.transpose(k, (0, 2, 1))), inv_sqrt_dk))
        if attention_out is not None:
            attention_out.append(attn.data.copy())
        heads = nx.reshape(nx.transpose(nx.matmul(attn, v), (1, 0, 2)), (n, d))
        mixed = nx.linear(heads, params[f"{p}.wo"], params[f"{p}.bo"])
        h = nx.layer_norm(nx.add(h, mixed), params[f"{p}.ln1.gain"], params[f"{p}.ln1.shift"])
        ff = nx.linear(nx.relu(nx.linear(h, params[f"{p}.ff.w1"], params[f"{p}.ff.b1"])),
                       params[f"{p}.ff.w2"], params[f"{p}.ff.b2"])
        h = nx.layer_norm(nx.add(h, ff), params[f"{p}.ln2.gain"], params[f"{p}.ln2.shift"])
    return h


def score_positions(contextual: Tensor, params: ParamStore, cfg: RankerConfig) -> Tensor:
    """``s[i, j] = <W z_i + b, q_j>`` for the first n position queries; later positions are masked off."""
    n, d = contextual.shape
    if d != cfg.d_model:
        raise DimensionMismatch(f"contextual width {d} != d_model {cfg.d_model}")
    if n > cfg.n_max:
        raise ListTooLong(f"{n} plans exceeds n_max={cfg.n_max}")
    projected = nx.linear(contextual, params["rank.head.w"], params["rank.head.b"])
    queries = nx.slice_rows(params["rank.pos_queries"], 0, n)
    return nx.matmul(projected, nx.transpose(queries, (1, 0)))


def decode_permutation(scores) -> RankedList:
    """Permutation maximizing ``sum_i s[i, pi(i)]``; ties go to the lexicographically smallest."""
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 2:
        raise ValueError(f"expected a square score matrix with n >= 2, got shape {s.shape}")
    if not np.isfinite(s).all():
        raise NonFiniteScores("score matrix contains non-finite entries")
    perm, _ = solve_assignment(s)
    return RankedList.from_permutation(perm)


def decoded_value(scores: np.ndarray, ranked: RankedList) -> float:
    return assignment_value(scores, ranked.permutation)


# ---------------------------------------------------------------------------
# Full forward pass
# ---------------------------------------------------------------------------


def plan_batch(plans, scaling: CorpusScaling) -> ForestBatch:
    return build_batch([featurize(p, scaling) for p in plans])


def forward_batch(batch: ForestBatch, params: ParamStore, embedder: str, cfg: RankerConfig,
                  attention_out: list | None = None) -> tuple[Tensor, Tensor]:
    """(plan embeddings, score matrix) for one candidate list."""
    if batch.num_trees > cfg.n_max:
        raise ListTooLong(f"{batch.num_trees} plans exceeds n_max={cfg.n_max}")
    emb = embed_batch(embedder, batch, params)
    z = encode_context(emb, params, cfg, attention_out)
    return emb, score_positions(z, params, cfg)


def score_matrix(cs, model) -> np.ndarray:
    batch = plan_batch(cs.plans, model.scaling)
    return forward_batch(batch, model.params, model.embedder, model.ranker)[1].data


def rank_plans(cs, model) -> RankedList:
    """Featurize, embed, contextualize, score and decode one candidate set."""
    return decode_permutation(score_matrix(cs, model))
