"""Selection-policy metrics and comparison reports.

Four policies are compared on a test split: the model's first-ranked plan,
the hybrid gate with fallback, the native optimizer's plan and the oracle
best plan. Each gets top-1/2/3 rates (percent of queries whose chosen plan
has true rank <= k) and the cumulative mean latency of its choices.
"""
from __future__ import annotations

import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

from planrank.dataset import CandidateSet
from planrank.decision import DEFAULT_K, hybrid_select
from planrank.errors import DataError, MissingQuery
from planrank.ranker import rank_plans

REPORT_VERSION = 1
POLICIES = ("model_top1", "hybrid", "cbo", "best")
TOP_KS = (1, 2, 3)


def _chosen_index(cs: CandidateSet, plan_id: str) -> int:
    try:
        return cs.plan_ids().index(plan_id)
    except ValueError:
        raise DataError(f"query {cs.query_id}: decision {plan_id!r} is not one of its plans") from None


def _lookup(decisions: Mapping[str, str], cs: CandidateSet) -> int:
    if cs.query_id not in decisions:
        raise MissingQuery(f"no decision for query {cs.query_id}")
    return _chosen_index(cs, decisions[cs.query_id])


def top_k_accuracy(decisions: Mapping[str, str], truth: Sequence[CandidateSet], k: int) -> float:
    """Percent of queries whose chosen plan id has tie-broken true rank <= k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not truth:
        raise MissingQuery("no queries to score")
    hits = sum(cs.true_ranks[_lookup(decisions, cs)] <= k for cs in truth)
    return 100.0 * hits / len(truth)


def cumulative_time(decisions: Mapping[str, str], truth: Sequence[CandidateSet]) -> float:
    """Sum of the chosen plans' mean measured latencies (ms)."""
    return math.fsum(cs.mean_latency_ms[_lookup(decisions, cs)] for cs in truth)


@dataclass(frozen=True)
class QueryRow:
    query_id: str
    chosen_plan_id: str
    chosen_latency_ms: float
    best_latency_ms: float

    @property
    def regret_ms(self) -> float:
        return self.chosen_latency_ms - self.best_latency_ms

    def to_obj(self) -> dict:
        return {"query_id": self.query_id, "chosen_plan_id": self.chosen_plan_id,
                "chosen_latency_ms": self.chosen_latency_ms, "best_latency_ms": self.best_latency_ms,
                "regret_ms": self.regret_ms}


@dataclass(frozen=True)
class PolicyResult:
    name: str
    top_k: dict[int, float]
    cumulative_time_ms: float
    rows: tuple[QueryRow, ...]
    fallbacks: int = 0

    def to_obj(self) -> dict:
        return {
            "policy": self.name,
            **{f"top_{k}": self.top_k[k] for k in TOP_KS},
            "cumulative_time_ms": self.cumulative_time_ms,
            "fallbacks": self.fallbacks,
            "queries": [r.to_obj() for r in self.rows],
        }


@dataclass(frozen=True)
class EvalReport:
    policies: dict[str, PolicyResult]
    k: int
    num_queries: int
    random_top1: float  # percent; mean of 1/n over queries
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> PolicyResult:
        return self.policies[name]

    def to_obj(self) -> dict:
        return {
            "format_version": REPORT_VERSION,
            "k": self.k,
            "num_queries": self.num_queries,
            "random_top1": self.random_top1,
            "metadata": self.metadata,
            "policies": [self.policies[name].to_obj() for name in POLICIES if name in self.policies],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_obj(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def table(self) -> str:
        head = f"{'policy':<12}{'top-1 %':>10}{'top-2 %':>10}{'top-3 %':>10}{'total ms':>16}{'fallbacks':>11}"
        lines = [head, "-" * len(head)]
        for name in POLICIES:
            if name not in self.policies:
                continue
            p = self.policies[name]
            lines.append(f"{name:<12}{p.top_k[1]:>10.2f}{p.top_k[2]:>10.2f}{p.top_k[3]:>10.2f}"
                         f"{p.cumulative_time_ms:>16.3f}{p.fallbacks:>11d}")
        lines.append(f"{self.num_queries} queries, hybrid k={self.k}, random top-1 {self.random_top1:.2f}%")
        lines.append("note: cbo top-k rates are reported because synthetic ranks are known for every candidate.")
        return "\n".join(lines)


def policy_result(name: str, decisions: Mapping[str, str], test_set: Sequence[CandidateSet],
                  fallbacks: int = 0) -> PolicyResult:
    rows = tuple(
        QueryRow(cs.query_id, decisions[cs.query_id], cs.mean_latency_ms[_lookup(decisions, cs)],
                 cs.mean_latency_ms[cs.best_index])
        for cs in test_set
    )
    return PolicyResult(
        name,
        {k: top_k_accuracy(decisions, test_set, k) for k in TOP_KS},
        cumulative_time(decisions, test_set),
        rows,
        fallbacks,
    )


def compare_policies(test_set: Sequence[CandidateSet], model, detector, thresholds=None,
                     k: int = DEFAULT_K, force: bool = False) -> EvalReport:
    """Evaluate model-top-1, hybrid, CBO and oracle-best on one test split."""
    if not test_set:
        raise MissingQuery("empty test set")
    choices: dict[str, dict[str, str]] = {name: {} for name in POLICIES}
    fallbacks = 0
    for cs in test_set:
        ids = cs.plan_ids()
        ranked = rank_plans(cs, model)
        choices["model_top1"][cs.query_id] = ids[ranked.by_position[0]]
        outcome = hybrid_select(ranked, cs, detector, thresholds, min(k, cs.n), model=model, force=force)
        choices["hybrid"][cs.query_id] = outcome.chosen_plan_id
        fallbacks += outcome.fell_back
        choices["cbo"][cs.query_id] = ids[cs.cbo_index]
        choices["best"][cs.query_id] = ids[cs.best_index]
    policies = {
        name: policy_result(name, choices[name], test_set, fallbacks if name == "hybrid" else 0)
        for name in POLICIES
    }
    random_top1 = 100.0 * math.fsum(1.0 / cs.n for cs in test_set) / len(test_set)
    return EvalReport(policies, k, len(test_set), random_top1)
