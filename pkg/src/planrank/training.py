"""Position-aware listwise loss, the end-to-end training loop, and checkpoints."""
from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from planrank import numerics as nx
from planrank.container import read_container, write_container
from planrank.dataset import CandidateSet
from planrank.embedder import EMBEDDERS, CorpusScaling, init_embedder
from planrank.errors import DivergedLoss, InvalidConfig, InvalidRanks, NonFiniteValue
from planrank.numerics import ParamStore, Tensor
from planrank.ranker import RankerConfig, forward_batch, init_ranker, plan_batch

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"
INIT_STREAM = 0x1A17
SHUFFLE_STREAM = 0x5AFF


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    epochs: int = 200
    batch: int = 1
    seed: int = 0
    embedder: str = "tree_lstm"
    ranker: RankerConfig = field(default_factory=RankerConfig)

    def __post_init__(self):
        if not 0.0 < self.learning_rate < 1.0:
            raise InvalidConfig(f"learning_rate must lie in (0, 1), got {self.learning_rate!r}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise InvalidConfig(f"epochs must be a positive integer, got {self.epochs!r}")
        if not isinstance(self.batch, int) or self.batch < 1:
            raise InvalidConfig(f"batch must be a positive integer, got {self.batch!r}")
        if self.embedder not in EMBEDDERS:
            raise InvalidConfig(f"embedder must be one of {EMBEDDERS}, got {self.embedder!r}")

    def to_obj(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch": self.batch,
            "seed": self.seed,
            "embedder": self.embedder,
            "ranker": self.ranker.to_obj(),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["ranker"] = RankerConfig(**obj.get("ranker", {}))
        return cls(**obj)


@dataclass
class ModelCheckpoint:
    config: TrainConfig
    params: ParamStore
    scaling: CorpusScaling
    metadata: dict = field(default_factory=dict)

    @property
    def embedder(self) -> str:
        return self.config.embedder

    @property
    def ranker(self) -> RankerConfig:
        return self.config.ranker


def init_params(cfg: TrainConfig) -> ParamStore:
    rng = np.random.default_rng([cfg.seed, INIT_STREAM])
    params = ParamStore()
    init_embedder(params, cfg.embedder, cfg.ranker.d_model, rng)
    init_ranker(params, cfg.ranker, rng)
    return params


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _check_ranks(y: Sequence[int], n: int) -> None:
    if len(y) != n or sorted(y) != list(range(1, n + 1)):
        raise InvalidRanks(f"ground-truth positions {list(y)} are not a permutation of 1..{n}")


def listwise_loss(scores: Tensor, y: Sequence[int]) -> Tensor:
    """Sum over plans of the cross-entropy between each plan's softmax over
    positions and its true (1-based) position ``y[i]``."""
    scores = nx.as_tensor(scores)
    n = scores.shape[0]
    if scores.shape != (n, n):
        raise InvalidRanks(f"score matrix must be square, got shape {scores.shape}")
    _check_ranks(y, n)
    target = np.zeros((n, n))
    target[np.arange(n), np.asarray(y) - 1] = 1.0
    return nx.scale(nx.sum_(nx.mul(nx.log_softmax(scores), target)), -1.0)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = self.params.grad(name)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(train_set: Sequence[CandidateSet], cfg: TrainConfig,
          on_epoch: Callable[[int, float], None] | None = None,
          init: ParamStore | None = None) -> ModelCheckpoint:
    """Fit embedder and ranker jointly; deterministic given (data, cfg)."""
    if not train_set:
        raise InvalidConfig("empty training set")
    for cs in train_set:
        if cs.n > cfg.ranker.n_max:
            raise InvalidConfig(f"query {cs.query_id} has {cs.n} plans > n_max={cfg.ranker.n_max}")
    scaling = CorpusScaling.from_plans([p for cs in train_set for p in cs.plans])
    params = init if init is not None else init_params(cfg)
    opt = Adam(params, cfg.learning_rate)
    batches = [(plan_batch(cs.plans, scaling), cs.true_ranks) for cs in train_set]
    rng = np.random.default_rng([cfg.seed, SHUFFLE_STREAM])

    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(batches))
        total = 0.0
        params.zero_grad()
        pending = 0
        for step, idx in enumerate(order):
            batch, y = batches[idx]
            try:
                loss = listwise_loss(forward_batch(batch, params, cfg.embedder, cfg.ranker)[1], y)
            except NonFiniteValue as exc:
                raise DivergedLoss(f"non-finite value at epoch {epoch}, step {step}, "
                                   f"query {train_set[idx].query_id}: {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergedLoss(f"loss {value} at epoch {epoch}, query {train_set[idx].query_id}")
            total += value
            nx.backward(loss)
            pending += 1
            if pending == cfg.batch or step == len(order) - 1:
                opt.step()
                params.zero_grad()
                pending = 0
        epoch_losses.append(total / len(batches))
        log.debug("epoch %d mean loss %.6f", epoch + 1, epoch_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, epoch_losses[-1])

    metadata = {"epochs_run": cfg.epochs, "final_loss": epoch_losses[-1], "epoch_losses": epoch_losses}
    return ModelCheckpoint(cfg, params, scaling, metadata)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def checkpoint_bytes_meta(c: ModelCheckpoint) -> dict:
    return {"train_config": c.config.to_obj(), "scaling": c.scaling.to_obj(), "metadata": c.metadata}


def save_checkpoint(c: ModelCheckpoint, path: str | Path) -> None:
    write_container(path, CHECKPOINT_KIND, checkpoint_bytes_meta(c), c.params.state())


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    meta, tensors = read_container(path, CHECKPOINT_KIND)
    return ModelCheckpoint(
        TrainConfig.from_obj(meta["train_config"]),
        ParamStore.from_state(tensors),
        CorpusScaling.from_obj(meta["scaling"]),
        meta.get("metadata", {}),
    )
