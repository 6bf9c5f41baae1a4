"""Hybrid top-k plan selection with fallback to the native optimizer's plan."""
from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from planrank.dataset import CandidateSet
from planrank.errors import DegradedDetector, KOutOfRange
from planrank.ood import Thresholds, candidate_features
from planrank.ranker import RankedList

DEFAULT_K = 3
DEFAULT_TIE_EPSILON = 1e-6

MODEL_RANK = "ModelRank"
CBO_FALLBACK = "CboFallback"


@dataclass(frozen=True)
class TraceEntry:
    rank: int  # 1-based position in the model's ranking
    plan_index: int
    plan_id: str
    g: float
    passed: bool

    def to_obj(self) -> dict:
        return {"rank": self.rank, "plan_index": self.plan_index, "plan_id": self.plan_id,
                "g": self.g, "passed": self.passed}


@dataclass(frozen=True)
class DecisionOutcome:
    query_id: str
    chosen_index: int
    chosen_plan_id: str
    source: str  # MODEL_RANK or CBO_FALLBACK
    model_rank: int | None  # i in ModelRank(i)
    k: int
    tau_in: float
    trace: tuple[TraceEntry, ...]
    tie_group: tuple[str, ...] = field(default=())
    forced: bool = False

    @property
    def fell_back(self) -> bool:
        return self.source == CBO_FALLBACK

    def to_obj(self) -> dict:
        return {
            "query_id": self.query_id,
            "chosen_plan_id": self.chosen_plan_id,
            "chosen_index": self.chosen_index,
            "source": self.source,
            "model_rank": self.model_rank,
            "k": self.k,
            "tau_in": self.tau_in,
            "forced": self.forced,
            "tie_group": list(self.tie_group),
            "trace": [t.to_obj() for t in self.trace],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_obj(), indent=2, sort_keys=False)


def select_first_confident(by_position: Sequence[int], g_of, tau_in: float, k: int,
                           cbo_index: int) -> tuple[int, int | None, list[tuple[int, int, float, bool]]]:
    """The selection loop on its own: (chosen plan, model rank or None, trace rows).

    ``g_of(plan_index)`` is evaluated lazily, once per inspected rank.
    """
    trace = []
    for i in range(1, k + 1):
        plan = by_position[i - 1]
        g = float(g_of(plan))
        passed = g >= tau_in
        trace.append((i, plan, g, passed))
        if passed:
            return plan, i, trace
    return cbo_index, None, trace


def hybrid_select(ranked: RankedList, cs: CandidateSet, det, th: Thresholds | None = None,
                  k: int = DEFAULT_K, *, model=None, features: np.ndarray | None = None,
                  force: bool = False, tie_group: Sequence[int] = ()) -> DecisionOutcome:
    """Walk the model's top-k and take the first plan the detector calls in-distribution.

    Per-plan detector inputs come from ``features`` when given, otherwise
    they are computed with ``model``. ``th`` defaults to the detector's own
    calibrated thresholds. A degraded detector is refused unless ``force``.
    """
    n = cs.n
    if len(ranked.by_position) != n:
        raise ValueError(f"ranking covers {len(ranked.by_position)} plans, candidate set has {n}")
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= n:
        raise KOutOfRange(f"k={k!r} outside 1..{n}")
    th = th if th is not None else det.thresholds
    degraded = th is None or th.degraded or getattr(det, "degraded", False)
    if degraded and not force:
        raise DegradedDetector("detector calibration is degraded; pass force=True to use it anyway")
    if th is None:
        raise DegradedDetector("no thresholds available")
    if features is None:
        if model is None:
            raise ValueError("hybrid_select needs either precomputed features or a model")
        features = candidate_features(cs, model)

    def g_of(plan: int) -> float:
        return float(det.confidence(features[plan]))

    chosen, rank, rows = select_first_confident(ranked.by_position, g_of, th.tau_in, int(k), cs.cbo_index)
    ids = cs.plan_ids()
    return DecisionOutcome(
        query_id=cs.query_id,
        chosen_index=chosen,
        chosen_plan_id=ids[chosen],
        source=MODEL_RANK if rank is not None else CBO_FALLBACK,
        model_rank=rank,
        k=int(k),
        tau_in=th.tau_in,
        trace=tuple(TraceEntry(i, p, ids[p], g, ok) for i, p, g, ok in rows),
        tie_group=tuple(ids[p] for p in tie_group),
        forced=bool(force and degraded),
    )


def resolve_ties(ranked: RankedList, scores, epsilon: float | None = None) -> list[int]:
    """Plans whose first-position score is within ``epsilon`` of the top plan's, in decoded order.

    ``epsilon`` defaults to ``DEFAULT_TIE_EPSILON`` times the score scale
    ``max(1, max |s|)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    if epsilon is None:
        epsilon = DEFAULT_TIE_EPSILON * max(1.0, float(np.abs(s).max()))
    if not epsilon >= 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon!r}")
    top = ranked.by_position[0]
    ref = s[top, 0]
    return [p for p in ranked.by_position if abs(s[p, 0] - ref) <= epsilon]
