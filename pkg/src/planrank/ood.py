"""In-distribution classifier, confidence function and threshold calibration.

The detector ``f`` maps a per-plan feature vector to a probability of being
in-distribution. Confidence is ``g(x) = max(f(x), 1 - f(x))``, so it lives in
[0.5, 1]. Thresholds ``tau_in`` / ``tau_out`` come from percentiles of ``g``
on held-out in-distribution plans and on synthesized negatives.

The classifier's hidden layer is made of Gaussian radial units centred in
the standardized training data and its output has no bias, so far from
anything seen in training every unit is silent and ``f`` tends to 0.5:
unfamiliar inputs get *low* confidence instead of an arbitrary confident
extrapolation. That is what turns ``g`` into a memorization signal.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from planrank import numerics as nx
from planrank.container import read_container, write_container
from planrank.dataset import CandidateSet
from planrank.embedder import NUM_OPS, build_batch, embed_batch, featurize, node_features
from planrank.errors import DimensionMismatch, EmptySet, InvalidConfig, TooFewExamples
from planrank.numerics import ParamStore, Tensor
from planrank.plan_ir import OP_KINDS, PlanTree
from planrank.training import Adam

log = logging.getLogger(__name__)

DETECTOR_KIND = "ood_detector"
MIN_EXAMPLES = 50
NEGATIVE_STREAM = 0x0DD
HOLDOUT_STREAM = 0x401D
INIT_STREAM = 0x1417
AGGREGATE_DIM = 3 + NUM_OPS
_OP_INDEX = {op: i for i, op in enumerate(OP_KINDS)}


@dataclass(frozen=True)
class DetectorConfig:
    hidden: int = 128
    epochs: int = 300
    learning_rate: float = 0.05
    noise_scale: float = 3.0
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.hidden, int) or self.hidden < 1:
            raise InvalidConfig(f"hidden must be a positive integer, got {self.hidden!r}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise InvalidConfig(f"epochs must be a positive integer, got {self.epochs!r}")
        if not 0.0 < self.learning_rate < 1.0:
            raise InvalidConfig(f"learning_rate must lie in (0, 1), got {self.learning_rate!r}")
        if not self.noise_scale > 0:
            raise InvalidConfig(f"noise_scale must be positive, got {self.noise_scale!r}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise InvalidConfig(f"holdout_fraction must lie in (0, 1), got {self.holdout_fraction!r}")

    def to_obj(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Thresholds:
    tau_in: float
    tau_out: float
    degraded: bool = False  # calibration overlap: the two g-distributions were not separated

    def __post_init__(self):
        if not self.degraded and not (0.5 <= self.tau_out < self.tau_in <= 1.0):
            raise InvalidConfig(f"need 0.5 <= tau_out < tau_in <= 1, got {self.tau_out}, {self.tau_in}")

    def to_obj(self) -> dict:
        return {"tau_in": self.tau_in, "tau_out": self.tau_out, "degraded": self.degraded}

    @classmethod
    def from_obj(cls, obj: dict) -> "Thresholds":
        return cls(float(obj["tau_in"]), float(obj["tau_out"]), bool(obj.get("degraded", False)))


@dataclass
class OodDetector:
    """``f(x) = sigmoid(sum_j w_j exp(-gamma_j ||z - c_j||^2))`` with ``z`` the standardized input."""

    centers: np.ndarray  # (hidden, dim), in standardized units
    log_gamma: np.ndarray  # (hidden,)
    w_out: np.ndarray  # (hidden,)
    mean: np.ndarray
    scale: np.ndarray
    thresholds: Thresholds | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.centers.shape[1]

    @property
    def degraded(self) -> bool:
        return self.thresholds is None or self.thresholds.degraded

    def probability(self, x) -> np.ndarray:
        """``f(x)`` for one vector (returns a scalar array) or a matrix of row vectors."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        rows = x[None, :] if single else x
        if rows.ndim != 2 or rows.shape[1] != self.input_dim:
            raise DimensionMismatch(f"detector expects {self.input_dim} features, got shape {x.shape}")
        z = (rows - self.mean) / self.scale
        d2 = np.maximum(_sq_dist(z, self.centers), 0.0)
        logits = np.exp(-d2 * np.exp(self.log_gamma)) @ self.w_out
        out = _stable_sigmoid(logits)
        return out[0] if single else out

    def confidence(self, x) -> np.ndarray:
        """``g(x) = max(f(x), 1 - f(x))``."""
        f = self.probability(x)
        return np.maximum(f, 1.0 - f)


def _sq_dist(z: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return (z * z).sum(axis=1, keepdims=True) - 2.0 * z @ centers.T + (centers * centers).sum(axis=1)[None, :]


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def confidence(det: OodDetector, x) -> np.ndarray:
    return det.confidence(x)


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


def plan_aggregates(plan: PlanTree, scaling) -> np.ndarray:
    """[mean scaled log-card, mean scaled log-cost, node count, operator histogram]."""
    cards, costs = [], []
    hist = np.zeros(NUM_OPS)
    for node in plan.root.walk():
        feats = node_features(node, scaling)
        cards.append(feats.log_card)
        costs.append(feats.log_cost)
        hist[_OP_INDEX[node.operator_kind]] += 1.0
    count = len(cards)
    return np.concatenate([[math.fsum(cards) / count, math.fsum(costs) / count, float(count)], hist])


def plan_features(plans: Sequence[PlanTree], model) -> np.ndarray:
    """Detector inputs for each plan: its embedding followed by its raw aggregates."""
    batch = build_batch([featurize(p, model.scaling) for p in plans])
    emb = embed_batch(model.embedder, batch, model.params).data
    aggs = np.stack([plan_aggregates(p, model.scaling) for p in plans])
    return np.concatenate([emb, aggs], axis=1)


def candidate_features(cs: CandidateSet, model) -> np.ndarray:
    return plan_features(cs.plans, model)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def synthesize_negatives(in_dist: np.ndarray, noise_scale: float, rng: np.random.Generator) -> np.ndarray:
    """Equal parts Gaussian-noised rows (``noise_scale`` times each column's spread) and column-shuffled rows."""
    n, dim = in_dist.shape
    spread = in_dist.std(axis=0)
    n_noise = n // 2
    noisy_rows = in_dist[rng.permutation(n)[:n_noise]]
    noisy = noisy_rows + rng.normal(size=(n_noise, dim)) * (noise_scale * spread)
    shuffled = np.empty((n - n_noise, dim))
    for j in range(dim):
        shuffled[:, j] = in_dist[rng.permutation(n)[: n - n_noise], j]
    return np.concatenate([noisy, shuffled], axis=0)


def _bce(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from logits."""
    pos = nx.mul(nx.log_sigmoid(logits), labels)
    neg = nx.mul(nx.log_sigmoid(nx.scale(logits, -1.0)), 1.0 - labels)
    return nx.scale(nx.mean(nx.add(pos, neg)), -1.0)


def _rbf_hidden(z: np.ndarray, params: ParamStore, hidden: int) -> Tensor:
    c = params["centers"]
    cc = nx.reshape(nx.sum_(nx.mul(c, c), axis=1), (1, hidden))
    zz = Tensor((z * z).sum(axis=1, keepdims=True))
    d2 = nx.add(nx.sub(zz, nx.scale(nx.matmul(Tensor(z), nx.transpose(c, (1, 0))), 2.0)), cc)
    return nx.exp(nx.scale(nx.mul(d2, nx.exp(params["log_gamma"])), -1.0))


def train_detector(in_dist: np.ndarray, cfg: DetectorConfig = DetectorConfig()) -> OodDetector:
    """Fit ``f`` on in-distribution rows (label 1) against synthesized negatives (label 0).

    Centers start at randomly chosen training rows; every unit's initial
    width is the median squared distance from a center to its fifth-nearest
    training row. Full-batch adaptive-moment descent on mean cross-entropy.
    """
    in_dist = np.asarray(in_dist, dtype=np.float64)
    if in_dist.ndim != 2 or in_dist.shape[0] < MIN_EXAMPLES:
        raise TooFewExamples(f"need at least {MIN_EXAMPLES} in-distribution rows, got {len(in_dist)}")
    n = in_dist.shape[0]
    hidden = min(cfg.hidden, n)
    rng = np.random.default_rng([cfg.seed, NEGATIVE_STREAM])
    negatives = synthesize_negatives(in_dist, cfg.noise_scale, rng)
    labels = np.concatenate([np.ones(n), np.zeros(len(negatives))])[:, None]

    mean = in_dist.mean(axis=0)
    scale = in_dist.std(axis=0)
    scale[scale == 0] = 1.0
    z_in = (in_dist - mean) / scale
    z = np.concatenate([z_in, (negatives - mean) / scale], axis=0)

    init_rng = np.random.default_rng([cfg.seed, INIT_STREAM])
    centers = z_in[np.sort(init_rng.choice(n, size=hidden, replace=False))]
    d2 = np.maximum(_sq_dist(z_in, centers), 0.0)
    width = float(np.median(np.sort(d2, axis=0)[min(5, n - 1)]))
    params = ParamStore()
    params.add("centers", centers.copy())
    params.add("log_gamma", np.full((1, hidden), -math.log(max(width, 1e-12))))
    params.zeros("w_out", (hidden, 1))
    opt = Adam(params, cfg.learning_rate)
    loss = None
    for _ in range(cfg.epochs):
        params.zero_grad()
        loss = _bce(nx.matmul(_rbf_hidden(z, params, hidden), params["w_out"]), labels)
        nx.backward(loss)
        opt.step()
    log.debug("detector final loss %.6f", float(loss.data))
    return OodDetector(
        params["centers"].data.copy(), params["log_gamma"].data[0].copy(), params["w_out"].data[:, 0].copy(),
        mean, scale,
        metadata={"config": cfg.to_obj(), "train_rows": n, "final_loss": float(loss.data)},
    )


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


def thresholds_from_confidences(g_in: np.ndarray, g_out: np.ndarray) -> Thresholds:
    """5th percentile of in-distribution g against 95th percentile of negative g.

    On overlap the thresholds fall back to the medians: ``tau_in`` is the
    midpoint plus half the gap (the in-distribution median) and ``tau_out``
    the midpoint, and the result is flagged degraded.
    """
    g_in = np.asarray(g_in, dtype=np.float64).ravel()
    g_out = np.asarray(g_out, dtype=np.float64).ravel()
    if g_in.size == 0 or g_out.size == 0:
        raise EmptySet("calibration needs nonempty in-distribution and negative sets")
    tau_in = float(np.percentile(g_in, 5))
    tau_out = float(np.percentile(g_out, 95))
    if tau_out < tau_in:
        return Thresholds(tau_in, tau_out)
    m_in, m_out = float(np.median(g_in)), float(np.median(g_out))
    mid = 0.5 * (m_in + m_out)
    half_gap = 0.5 * abs(m_in - m_out)
    log.warning("calibration overlap: tau_out %.4f >= tau_in %.4f", tau_out, tau_in)
    return Thresholds(mid + half_gap, mid, degraded=True)


def calibrate_thresholds(det: OodDetector, in_dist_holdout: np.ndarray, negatives: np.ndarray) -> Thresholds:
    if len(in_dist_holdout) == 0 or len(negatives) == 0:
        raise EmptySet("calibration needs nonempty in-distribution and negative sets")
    return thresholds_from_confidences(confidence(det, in_dist_holdout), confidence(det, negatives))


def fit_detector(train_set: Sequence[CandidateSet], model, cfg: DetectorConfig = DetectorConfig()) -> OodDetector:
    """Train on most training queries, calibrate on the held-out rest (split by query, never by plan)."""
    if len(train_set) < 2:
        raise TooFewExamples("need at least 2 training queries to hold some out for calibration")
    rng = np.random.default_rng([cfg.seed, HOLDOUT_STREAM])
    order = rng.permutation(len(train_set))
    n_hold = min(max(1, round(cfg.holdout_fraction * len(train_set))), len(train_set) - 1)
    hold_idx = sorted(order[:n_hold].tolist())
    fit_idx = sorted(order[n_hold:].tolist())
    fit_x = np.concatenate([candidate_features(train_set[i], model) for i in fit_idx])
    hold_x = np.concatenate([candidate_features(train_set[i], model) for i in hold_idx])

    det = train_detector(fit_x, cfg)
    neg_rng = np.random.default_rng([cfg.seed, NEGATIVE_STREAM, 1])
    negatives = synthesize_negatives(hold_x, cfg.noise_scale, neg_rng)
    g_in, g_out = confidence(det, hold_x), confidence(det, negatives)
    det.thresholds = thresholds_from_confidences(g_in, g_out)
    det.metadata.update({
        "holdout_rows": int(hold_x.shape[0]),
        "mean_g_in": float(g_in.mean()),
        "mean_g_negative": float(g_out.mean()),
        "confidence_gap": float(g_in.mean() - g_out.mean()),
        "embedder": model.embedder,
    })
    return det


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_detector(det: OodDetector, path: str | Path) -> None:
    meta = {"thresholds": det.thresholds.to_obj() if det.thresholds else None, "metadata": det.metadata}
    tensors = {"centers": det.centers, "log_gamma": det.log_gamma, "w_out": det.w_out,
               "mean": det.mean, "scale": det.scale}
    write_container(path, DETECTOR_KIND, meta, tensors)


def load_detector(path: str | Path) -> OodDetector:
    meta, t = read_container(path, DETECTOR_KIND)
    th = meta.get("thresholds")
    return OodDetector(t["centers"], t["log_gamma"], t["w_out"], t["mean"], t["scale"],
                       Thresholds.from_obj(th) if th else None, meta.get("metadata", {}))
