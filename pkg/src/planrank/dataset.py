"""Candidate sets, ranking labels, splitting and the JSONL dataset format."""
from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from planrank.errors import (
    DataError,
    EmptyRuns,
    LengthMismatch,
    MalformedDocument,
    NonFiniteLatency,
    TooFewQueries,
    VersionMismatch,
)
from planrank.plan_ir import PlanTree, plan_from_obj, plan_to_obj

FORMAT_VERSION = 1
N_MAX = 32
SPLIT_STREAM = 0x5B1D


@dataclass(frozen=True)
class CandidateSet:
    """All candidate plans of one query with their measured latencies.

    ``true_ranks`` are 1-based: rank 1 is the fastest plan.
    """

    query_id: str
    plans: tuple[PlanTree, ...]
    latency_runs_ms: tuple[tuple[float, ...], ...]
    mean_latency_ms: tuple[float, ...]
    true_ranks: tuple[int, ...]
    cbo_index: int

    @property
    def n(self) -> int:
        return len(self.plans)

    @property
    def best_index(self) -> int:
        return self.true_ranks.index(1)

    def plan_ids(self) -> list[str]:
        return [p.plan_id for p in self.plans]

    def permuted(self, order: Sequence[int]) -> "CandidateSet":
        """The same query with plans listed in ``order`` (labels recomputed)."""
        order = list(order)
        return build_candidate_set(
            self.query_id,
            [self.plans[i] for i in order],
            [self.latency_runs_ms[i] for i in order],
            order.index(self.cbo_index),
        )


def organize_ranking(latency_runs_ms: Sequence[Sequence[float]]) -> tuple[list[float], list[int]]:
    """Mean latency per plan and 1-based ranks by ascending mean (index breaks ties)."""
    means = []
    for i, runs in enumerate(latency_runs_ms):
        if len(runs) == 0:
            raise EmptyRuns(f"plan {i} has no latency measurements")
        for v in runs:
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise NonFiniteLatency(f"plan {i}: latency {v!r} is not a finite nonnegative number")
        means.append(math.fsum(runs) / len(runs))
    order = sorted(range(len(means)), key=lambda i: (means[i], i))
    ranks = [0] * len(means)
    for position, i in enumerate(order, start=1):
        ranks[i] = position
    return means, ranks


def build_candidate_set(query_id: str, plans: Sequence[PlanTree],
                        runs: Sequence[Sequence[float]], cbo_index: int) -> CandidateSet:
    if len(plans) != len(runs):
        raise LengthMismatch(f"{len(plans)} plans but {len(runs)} run lists")
    if len(plans) < 2:
        raise DataError(f"query {query_id}: a candidate set needs at least 2 plans, got {len(plans)}")
    if len(plans) > N_MAX:
        raise DataError(f"query {query_id}: {len(plans)} plans exceeds the limit of {N_MAX}")
    ids = [p.plan_id for p in plans]
    if len(set(ids)) != len(ids):
        raise DataError(f"query {query_id}: duplicate plan ids")
    if isinstance(cbo_index, bool) or not isinstance(cbo_index, int) or not 0 <= cbo_index < len(plans):
        raise DataError(f"query {query_id}: cbo_index {cbo_index!r} out of range")
    means, ranks = organize_ranking(runs)
    return CandidateSet(
        query_id,
        tuple(plans),
        tuple(tuple(float(v) for v in r) for r in runs),
        tuple(means),
        tuple(ranks),
        cbo_index,
    )


def ingest_measurements(plans: Sequence[PlanTree], runs: Sequence[Sequence[float]],
                        cbo_index: int, query_id: str = "q") -> CandidateSet:
    """Wrap externally measured plans and latencies into a labelled candidate set."""
    return build_candidate_set(query_id, plans, runs, cbo_index)


def split_dataset(data: Sequence[CandidateSet], ratio: float, seed: int
                  ) -> tuple[list[CandidateSet], list[CandidateSet]]:
    """Query-level split: ``ceil(ratio * N)`` sets for training, the rest for test."""
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio {ratio} must lie strictly between 0 and 1")
    n = len(data)
    if n < 2:
        raise TooFewQueries(f"need at least 2 queries to split, got {n}")
    n_train = min(math.ceil(ratio * n), n - 1)
    perm = np.random.default_rng([seed, SPLIT_STREAM]).permutation(n)
    train_idx = sorted(perm[:n_train].tolist())
    test_idx = sorted(perm[n_train:].tolist())
    return [data[i] for i in train_idx], [data[i] for i in test_idx]


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------


def candidate_set_to_obj(cs: CandidateSet) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "query_id": cs.query_id,
        "plans": [plan_to_obj(p) for p in cs.plans],
        "latency_runs_ms": [list(r) for r in cs.latency_runs_ms],
        "cbo_index": cs.cbo_index,
    }


def candidate_set_from_obj(obj: dict) -> CandidateSet:
    """Decode one dataset record; means and ranks are always recomputed."""
    if not isinstance(obj, dict):
        raise MalformedDocument("dataset record must be a JSON object")
    version = obj.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"dataset format_version {version} != {FORMAT_VERSION}")
    try:
        query_id = str(obj["query_id"])
        plans = [plan_from_obj(p) for p in obj["plans"]]
        runs = obj["latency_runs_ms"]
        cbo_index = obj["cbo_index"]
    except KeyError as exc:
        raise MalformedDocument(f"dataset record missing field {exc}") from exc
    if not isinstance(runs, list) or not all(isinstance(r, list) for r in runs):
        raise MalformedDocument("latency_runs_ms must be a list of lists")
    return build_candidate_set(query_id, plans, runs, cbo_index)


def dumps_candidate_set(cs: CandidateSet) -> str:
    return json.dumps(candidate_set_to_obj(cs), separators=(",", ":"), allow_nan=False)


def write_dataset(path: str | Path, sets: Iterable[CandidateSet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for cs in sets:
            fh.write(dumps_candidate_set(cs))
            fh.write("\n")


def read_dataset(path: str | Path) -> list[CandidateSet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedDocument(f"{path}:{lineno}: {exc}") from exc
            out.append(candidate_set_from_obj(obj))
    return out
