"""Synthetic workload generator standing in for executing plans on a live DBMS.

Each query is a random join tree over base tables with known true
cardinalities. A toy cost-based planner picks scan methods, join methods
and join orientation bottom-up from *estimated* cardinalities.

The native estimate of every node is shared by all candidates of a query:
the true cardinality, shrunk by a factor per join below the node (the
independence-assumption underestimate) and multiplied by one lognormal
error draw. The native plan is planned from these estimates directly and
is always candidate 0. Further candidates are explored by planning from
estimates perturbed per node by log-uniform factors exp(U(-r, r)), which
is what drives plan diversity, and by occasionally taking a near-optimal
alternative join method. Every candidate is then *recorded* with the native
estimates and the costs they imply, like asking the optimizer to explain a
hinted plan, so estimated costs of all candidates are directly comparable.

Latency model (milliseconds, rows are true cardinalities, L/R = outer/inner
child rows, out = node output rows, N = table size)::

    SeqScan     1e-4 * N
    IndexScan   0.05 * log2(N + 1) + 3e-3 * out
    HashJoin    5e-4 * R * (1 + R / 2e6) + 2e-4 * L + 5e-5 * out
    MergeJoin   sort(L) + sort(R) + 1e-4 * L + 1.2e-4 * R + 5e-5 * out
    NestedLoop  2e-6 * L * R + 1e-4 * L + 5e-5 * out
    Sort        sort(rows),  sort(r) = 1.5e-4 * r * log2(r + 2)
    Aggregate   1e-4 * input rows
    Materialize 5e-5 * input rows

A plan's true latency is the sum over its nodes. Measured runs multiply it
by mean-one lognormal noise with the configured coefficient of variation.
The native-optimizer choice (``cbo_index``) is the candidate whose recorded
root estimated cost is smallest (the native plan, unless exploration found
one that is cheaper under the same estimates).
"""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from planrank.dataset import N_MAX, CandidateSet, build_candidate_set
from planrank.errors import InvalidConfig
from planrank.plan_ir import OpKind, PlanNode, PlanTree, structure_key

# Join outputs are underestimated by exp(-JOIN_UNDERESTIMATE) per join in the subtree.
JOIN_UNDERESTIMATE = 2.0
# Log-normal spread of the native estimate error that no candidate can see past.
ESTIMATE_ERROR = 0.3
TABLE_POOL = 40
LEAF_PROBABILITY = 0.45
SORT_PROBABILITY = 0.3
AGGREGATE_PROBABILITY = 0.3
EXPLORATION_ATTEMPTS_PER_PLAN = 25
# Chance that exploration takes a near-optimal alternative join method instead of the cheapest.
JOIN_SWAP_PROBABILITY = 0.2
WORKLOAD_STREAM = 0x9E37
SHIFT_STREAM = 0x5417


@dataclass(frozen=True)
class WorkloadConfig:
    num_queries: int = 200
    plans_per_query: tuple[int, int] = (2, 16)
    perturbation_log_range: float = 1.5
    noise_cv: float = 0.05
    runs_per_plan: int = 3
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "plans_per_query", tuple(self.plans_per_query))
        validate_workload_config(self)

    def doubled(self) -> "WorkloadConfig":
        """Distribution-shifted variant: perturbation range doubled."""
        return replace(self, perturbation_log_range=2.0 * self.perturbation_log_range)


def validate_workload_config(cfg: WorkloadConfig) -> None:
    lo_hi = cfg.plans_per_query
    if not isinstance(cfg.num_queries, int) or cfg.num_queries < 1:
        raise InvalidConfig(f"num_queries must be a positive integer, got {cfg.num_queries!r}")
    if len(lo_hi) != 2 or not all(isinstance(v, int) for v in lo_hi) or not 2 <= lo_hi[0] <= lo_hi[1] <= N_MAX:
        raise InvalidConfig(f"plans_per_query must be a range within [2, {N_MAX}], got {lo_hi!r}")
    r = cfg.perturbation_log_range
    if not isinstance(r, (int, float)) or not math.isfinite(r) or r < 0:
        raise InvalidConfig(f"perturbation_log_range must be finite and >= 0, got {r!r}")
    if not isinstance(cfg.noise_cv, (int, float)) or not 0 <= cfg.noise_cv < 1:
        raise InvalidConfig(f"noise_cv must lie in [0, 1), got {cfg.noise_cv!r}")
    if not isinstance(cfg.runs_per_plan, int) or cfg.runs_per_plan < 1:
        raise InvalidConfig(f"runs_per_plan must be a positive integer, got {cfg.runs_per_plan!r}")
    if not isinstance(cfg.seed, int):
        raise InvalidConfig(f"seed must be an integer, got {cfg.seed!r}")


# ---------------------------------------------------------------------------
# Cost oracle
# ---------------------------------------------------------------------------


def _sort_cost(rows: float) -> float:
    return 1.5e-4 * rows * math.log2(rows + 2.0)


def scan_cost(op: OpKind, table_rows: float, out_rows: float) -> float:
    if op is OpKind.SEQ_SCAN:
        return 1e-4 * table_rows
    return 0.05 * math.log2(table_rows + 1.0) + 3e-3 * out_rows


def join_cost(op: OpKind, outer: float, inner: float, out: float) -> float:
    emit = 5e-5 * out
    if op is OpKind.HASH_JOIN:
        return 5e-4 * inner * (1.0 + inner / 2e6) + 2e-4 * outer + emit
    if op is OpKind.MERGE_JOIN:
        return _sort_cost(outer) + _sort_cost(inner) + 1e-4 * outer + 1.2e-4 * inner + emit
    if op is OpKind.NESTED_LOOP:
        return 2e-6 * outer * inner + 1e-4 * outer + emit
    raise ValueError(f"{op} is not a join")


def unary_cost(op: OpKind, in_rows: float) -> float:
    if op is OpKind.SORT:
        return _sort_cost(in_rows)
    if op is OpKind.AGGREGATE:
        return 1e-4 * in_rows
    return 5e-5 * in_rows


# ---------------------------------------------------------------------------
# Query skeletons
# ---------------------------------------------------------------------------


@dataclass
class _Skel:
    """Logical query node: a base-table scan, a join, or a unary operator."""

    kind: str  # "scan" | "join" | "sort" | "aggregate"
    rows: float  # true output cardinality
    children: list["_Skel"] = field(default_factory=list)
    table: str = ""
    table_rows: float = 0.0
    joins_below: int = 0
    uid: int = 0


def _draw_join_tree(rng: np.random.Generator, depth: int, force: bool, tables: list[str]) -> _Skel:
    if depth == 1 or (not force and rng.random() < LEAF_PROBABILITY):
        table_rows = float(10.0 ** rng.uniform(2.0, 7.0))
        sel = float(10.0 ** rng.uniform(-3.0, 0.0))
        return _Skel("scan", max(1.0, table_rows * sel), table=tables.pop(), table_rows=table_rows)
    forced_side = int(rng.integers(2)) if force else -1
    left = _draw_join_tree(rng, depth - 1, forced_side == 0, tables)
    right = _draw_join_tree(rng, depth - 1, forced_side == 1, tables)
    out = max(1.0, max(left.rows, right.rows) * float(10.0 ** rng.uniform(-1.5, 0.5)))
    return _Skel("join", out, [left, right], joins_below=1 + left.joins_below + right.joins_below)


def draw_query(rng: np.random.Generator) -> _Skel:
    depth = int(rng.integers(2, 6))
    tables = [f"t{i:02d}" for i in rng.permutation(TABLE_POOL)]
    root = _draw_join_tree(rng, depth, True, tables)
    if rng.random() < SORT_PROBABILITY:
        root = _Skel("sort", root.rows, [root], joins_below=root.joins_below)
    if rng.random() < AGGREGATE_PROBABILITY:
        rows = max(1.0, root.rows * float(10.0 ** rng.uniform(-3.0, 0.0)))
        root = _Skel("aggregate", rows, [root], joins_below=root.joins_below)
    for uid, node in enumerate(_skel_walk(root)):
        node.uid = uid
    return root


def _skel_walk(node: _Skel):
    yield node
    for c in node.children:
        yield from _skel_walk(c)


# ---------------------------------------------------------------------------
# Toy planner
# ---------------------------------------------------------------------------

_JOIN_CHOICES = [(op, swap) for op in (OpKind.HASH_JOIN, OpKind.MERGE_JOIN, OpKind.NESTED_LOOP)
                 for swap in (False, True)]


@dataclass
class _Planned:
    node: PlanNode
    true_rows: float
    true_cost: float  # cumulative over the subtree
    chosen_rows: float  # the estimate the operator choice was made under


def _plan(skel: _Skel, choose: dict[int, float], record: dict[int, float], swap_window: float = 1.0,
          rng: np.random.Generator | None = None) -> _Planned:
    """Pick physical operators bottom-up by minimizing local cost under ``choose``.

    The emitted nodes carry the ``record`` estimates and costs, the way a
    hinted plan is reported back by the native optimizer. With ``rng``
    given, each join may instead take a random alternative whose estimated
    cost is within ``swap_window`` times the cheapest.
    """
    e, shown = choose[skel.uid], record[skel.uid]
    if skel.kind == "scan":
        op = min((OpKind.SEQ_SCAN, OpKind.INDEX_SCAN), key=lambda o: scan_cost(o, skel.table_rows, e))
        node = PlanNode(op, shown, scan_cost(op, skel.table_rows, shown), (skel.table,))
        return _Planned(node, skel.rows, scan_cost(op, skel.table_rows, skel.rows), e)
    kids = [_plan(c, choose, record, swap_window, rng) for c in skel.children]
    if skel.kind == "join":
        a, b = kids
        options = []
        for op, swap in _JOIN_CHOICES:
            outer, inner = (b, a) if swap else (a, b)
            options.append((join_cost(op, outer.chosen_rows, inner.chosen_rows, e), op, outer, inner))
        best = min(options, key=lambda o: o[0])
        if rng is not None and rng.random() < JOIN_SWAP_PROBABILITY:
            near = [o for o in options if o[0] <= best[0] * swap_window and o is not best]
            if near:
                best = near[int(rng.integers(len(near)))]
        _, op, outer, inner = best
        local = join_cost(op, outer.node.est_cardinality, inner.node.est_cardinality, shown)
        true_local = join_cost(op, outer.true_rows, inner.true_rows, skel.rows)
        children = (outer, inner)
    else:
        op = OpKind.SORT if skel.kind == "sort" else OpKind.AGGREGATE
        (child,) = kids
        local = unary_cost(op, child.node.est_cardinality)
        true_local = unary_cost(op, child.true_rows)
        children = (child,)
    est_cost = local + sum(c.node.est_cost for c in children)
    node = PlanNode(op, shown, est_cost, (), tuple(c.node for c in children))
    return _Planned(node, skel.rows, true_local + sum(c.true_cost for c in children), e)


def base_estimates(root: _Skel, rng: np.random.Generator | None = None) -> dict[int, float]:
    """The native optimizer's estimates: biased low on joins, plus a per-node error shared by all candidates."""
    nodes = list(_skel_walk(root))
    errors = rng.normal(0.0, ESTIMATE_ERROR, size=len(nodes)) if rng is not None else np.zeros(len(nodes))
    return {n.uid: max(1.0, n.rows * math.exp(-JOIN_UNDERESTIMATE * n.joins_below + float(err)))
            for n, err in zip(nodes, errors)}


def _perturbed(base: dict[int, float], r: float, rng: np.random.Generator) -> dict[int, float]:
    if r == 0:
        return dict(base)
    factors = rng.uniform(-r, r, size=len(base))
    return {uid: base[uid] * math.exp(float(f)) for uid, f in zip(sorted(base), factors)}


def _noisy_runs(latency: float, cfg: WorkloadConfig, rng: np.random.Generator) -> list[float]:
    if cfg.noise_cv == 0:
        return [latency] * cfg.runs_per_plan
    sigma = math.sqrt(math.log1p(cfg.noise_cv ** 2))
    noise = rng.lognormal(-0.5 * sigma * sigma, sigma, size=cfg.runs_per_plan)
    return [latency * float(v) for v in noise]


def generate_query(cfg: WorkloadConfig, index: int, prefix: str = "q") -> CandidateSet:
    """One query's candidate set, from its own (seed, index) random stream."""
    rng = np.random.default_rng([cfg.seed, WORKLOAD_STREAM, index])
    skel = draw_query(rng)
    base = base_estimates(skel, rng)
    lo, hi = cfg.plans_per_query
    target = int(rng.integers(lo, hi + 1))

    r = cfg.perturbation_log_range
    native = _plan(skel, base, base)
    found: dict[str, _Planned] = {structure_key(native.node): native}
    extra: list[_Planned] = []
    for _ in range(EXPLORATION_ATTEMPTS_PER_PLAN * target):
        if len(found) == target:
            break
        planned = _plan(skel, _perturbed(base, r, rng), base, math.exp(r), rng if r > 0 else None)
        key = structure_key(planned.node)
        if key not in found:
            found[key] = planned
        elif len(extra) < 2:
            extra.append(planned)
    candidates = list(found.values())
    # Too few distinct plans: pad with repeated structures up to the minimum list size.
    candidates += extra[: max(0, 2 - len(candidates))]

    query_id = f"{prefix}{index:05d}"
    plans = [PlanTree(f"{query_id}-p{j}", c.node) for j, c in enumerate(candidates)]
    runs = [_noisy_runs(c.true_cost, cfg, rng) for c in candidates]
    est_costs = [c.node.est_cost for c in candidates]
    cbo_index = min(range(len(candidates)), key=lambda j: (est_costs[j], j))
    return build_candidate_set(query_id, plans, runs, cbo_index)


def generate_synthetic_workload(cfg: WorkloadConfig, prefix: str = "q") -> list[CandidateSet]:
    validate_workload_config(cfg)
    return [generate_query(cfg, q, prefix) for q in range(cfg.num_queries)]




def replace_with_shifted(test_set: Sequence[CandidateSet], cfg: WorkloadConfig, fraction: float = 0.1,
                         prefix: str = "s") -> list[CandidateSet]:
    """Swap a seeded ``fraction`` of ``test_set`` for fresh queries drawn with the perturbation range doubled.

    Replacements keep their slot in the list; their query ids use ``prefix``
    and indices past ``cfg.num_queries`` so they never collide with the
    original workload.
    """
    if not 0.0 <= fraction <= 1.0:
        raise InvalidConfig(f"fraction must lie in [0, 1], got {fraction!r}")
    count = math.ceil(fraction * len(test_set) - 1e-9)
    rng = np.random.default_rng([cfg.seed, SHIFT_STREAM])
    slots = sorted(rng.permutation(len(test_set))[:count].tolist())
    shifted_cfg = cfg.doubled()
    out = list(test_set)
    for j, slot in enumerate(slots):
        out[slot] = generate_query(shifted_cfg, cfg.num_queries + j, prefix)
    return out
