"""Plan-tree intermediate representation and its JSON codecs.

Two input dialects are understood:

* the portable schema, ``{plan_id, op, rows, cost, tables, children}``
  nested recursively (``plan_id`` only on the root);
* PostgreSQL ``EXPLAIN (FORMAT JSON)`` output, either the full
  ``[{"Plan": ...}]`` document or a bare node object.

Serialization always emits the portable schema in canonical form.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterator

from planrank.errors import MalformedDocument, StructuralError

FORMAT_VERSION = 1


class OpKind(str, enum.Enum):
    SEQ_SCAN = "SeqScan"
    INDEX_SCAN = "IndexScan"
    HASH_JOIN = "HashJoin"
    MERGE_JOIN = "MergeJoin"
    NESTED_LOOP = "NestedLoop"
    SORT = "Sort"
    AGGREGATE = "Aggregate"
    MATERIALIZE = "Materialize"
    OTHER = "Other"

    @property
    def is_join(self) -> bool:
        return self in JOIN_KINDS

    @property
    def is_scan(self) -> bool:
        return self in SCAN_KINDS


OP_KINDS: tuple[OpKind, ...] = tuple(OpKind)
JOIN_KINDS = frozenset({OpKind.HASH_JOIN, OpKind.MERGE_JOIN, OpKind.NESTED_LOOP})
SCAN_KINDS = frozenset({OpKind.SEQ_SCAN, OpKind.INDEX_SCAN})

# PostgreSQL node types; anything else maps to Other.
_PG_NODE_TYPES = {
    "Seq Scan": OpKind.SEQ_SCAN,
    "Index Scan": OpKind.INDEX_SCAN,
    "Index Only Scan": OpKind.INDEX_SCAN,
    "Bitmap Index Scan": OpKind.INDEX_SCAN,
    "Hash Join": OpKind.HASH_JOIN,
    "Merge Join": OpKind.MERGE_JOIN,
    "Nested Loop": OpKind.NESTED_LOOP,
    "Sort": OpKind.SORT,
    "Incremental Sort": OpKind.SORT,
    "Aggregate": OpKind.AGGREGATE,
    "HashAggregate": OpKind.AGGREGATE,
    "GroupAggregate": OpKind.AGGREGATE,
    "Materialize": OpKind.MATERIALIZE,
}


def op_from_name(name: str) -> OpKind:
    """Map an operator name in either dialect to the closed vocabulary."""
    try:
        return OpKind(name)
    except ValueError:
        return _PG_NODE_TYPES.get(name, OpKind.OTHER)


@dataclass(frozen=True)
class PlanNode:
    operator_kind: OpKind
    est_cardinality: float
    est_cost: float
    table_ids: tuple[str, ...] = ()
    children: tuple["PlanNode", ...] = ()

    def walk(self) -> Iterator["PlanNode"]:
        """Pre-order traversal."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


def count_nodes(root: PlanNode) -> int:
    return sum(1 for _ in root.walk())


@dataclass(frozen=True)
class PlanTree:
    plan_id: str
    root: PlanNode
    node_count: int = 0
    warnings: tuple[str, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if self.node_count == 0:
            object.__setattr__(self, "node_count", count_nodes(self.root))

    def with_id(self, plan_id: str) -> "PlanTree":
        return PlanTree(plan_id, self.root, self.node_count)


@dataclass(frozen=True)
class Violation:
    kind: str  # "StructuralError" | "RangeError" | "CountError"
    path: str
    message: str

    def __str__(self):
        return f"{self.kind} at {self.path}: {self.message}"


def validate_tree(plan: PlanTree) -> list[Violation]:
    """Check every PlanNode/PlanTree invariant; violations are returned, not raised."""
    out: list[Violation] = []
    seen: set[int] = set()
    reachable = 0
    stack: list[tuple[PlanNode, str]] = [(plan.root, "root")]
    while stack:
        node, path = stack.pop()
        if id(node) in seen:
            out.append(Violation("StructuralError", path, "node reachable more than once"))
            continue
        seen.add(id(node))
        reachable += 1
        for name, value in (("est_cardinality", node.est_cardinality), ("est_cost", node.est_cost)):
            if not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
                out.append(Violation("RangeError", path, f"{name}={value!r} must be finite and >= 0"))
        n_children = len(node.children)
        if node.operator_kind.is_join and n_children != 2:
            out.append(Violation("StructuralError", path,
                                 f"{node.operator_kind.value} has {n_children} children, expected 2"))
        elif node.operator_kind.is_scan and n_children != 0:
            out.append(Violation("StructuralError", path,
                                 f"{node.operator_kind.value} has {n_children} children, expected 0"))
        elif n_children > 2:
            out.append(Violation("StructuralError", path, f"arity {n_children} exceeds 2"))
        for i in reversed(range(n_children)):
            stack.append((node.children[i], f"{path}.{i}"))
    if plan.node_count != reachable:
        out.append(Violation("CountError", "root",
                             f"node_count={plan.node_count} but {reachable} nodes are reachable"))
    return out


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _number(obj: dict, key: str, path: str, warnings: list[str]) -> float:
    if key not in obj or obj[key] is None:
        warnings.append(f"{path}: missing '{key}', defaulted to 0")
        return 0.0
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MalformedDocument(f"{path}: '{key}' must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise MalformedDocument(f"{path}: '{key}'={value!r} must be finite and >= 0")
    return value


def _portable_node(obj: Any, path: str, warnings: list[str]) -> PlanNode:
    if not isinstance(obj, dict):
        raise MalformedDocument(f"{path}: plan node must be an object")
    if "op" not in obj or not isinstance(obj["op"], str):
        raise MalformedDocument(f"{path}: missing operator name 'op'")
    op = op_from_name(obj["op"])
    if op is OpKind.OTHER and obj["op"] != OpKind.OTHER.value:
        warnings.append(f"{path}: unknown operator {obj['op']!r} mapped to Other")
    tables = obj.get("tables", [])
    if not isinstance(tables, list) or not all(isinstance(t, str) for t in tables):
        raise MalformedDocument(f"{path}: 'tables' must be a list of strings")
    children = obj.get("children", [])
    if not isinstance(children, list):
        raise MalformedDocument(f"{path}: 'children' must be a list")
    return PlanNode(
        op,
        _number(obj, "rows", path, warnings),
        _number(obj, "cost", path, warnings),
        tuple(tables),
        tuple(_portable_node(c, f"{path}.{i}", warnings) for i, c in enumerate(children)),
    )


def _pg_node(obj: Any, path: str, warnings: list[str]) -> PlanNode:
    if not isinstance(obj, dict) or not isinstance(obj.get("Node Type"), str):
        raise MalformedDocument(f"{path}: EXPLAIN node without 'Node Type'")
    op = op_from_name(obj["Node Type"])
    tables = [obj["Relation Name"]] if isinstance(obj.get("Relation Name"), str) else []
    children = obj.get("Plans", [])
    if not isinstance(children, list):
        raise MalformedDocument(f"{path}: 'Plans' must be a list")
    return PlanNode(
        op,
        _number(obj, "Plan Rows", path, warnings),
        _number(obj, "Total Cost", path, warnings),
        tuple(tables),
        tuple(_pg_node(c, f"{path}.{i}", warnings) for i, c in enumerate(children)),
    )


def plan_from_obj(obj: Any, plan_id: str | None = None) -> PlanTree:
    """Build a validated PlanTree from an already-decoded JSON value."""
    warnings: list[str] = []
    if isinstance(obj, list):
        if len(obj) != 1:
            raise MalformedDocument("EXPLAIN document must hold exactly one plan")
        obj = obj[0]
    if not isinstance(obj, dict):
        raise MalformedDocument("plan document must be a JSON object")
    if "op" in obj:
        root = _portable_node(obj, "root", warnings)
        doc_id = obj.get("plan_id")
    elif "Plan" in obj:
        root = _pg_node(obj["Plan"], "root", warnings)
        doc_id = obj.get("plan_id")
    elif "Node Type" in obj:
        root = _pg_node(obj, "root", warnings)
        doc_id = None
    else:
        raise MalformedDocument("no plan root found (expected 'op', 'Plan' or 'Node Type')")
    if doc_id is not None and not isinstance(doc_id, str):
        doc_id = str(doc_id)
    tree = PlanTree(plan_id or doc_id or "plan", root, warnings=tuple(warnings))
    violations = validate_tree(tree)
    structural = [v for v in violations if v.kind == "StructuralError"]
    if structural:
        raise StructuralError("; ".join(map(str, structural)))
    if violations:
        raise MalformedDocument("; ".join(map(str, violations)))
    return tree


def parse_plan(text: str | bytes) -> PlanTree:
    """Parse a plan document (portable schema or PostgreSQL EXPLAIN JSON)."""
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedDocument(f"not valid JSON: {exc}") from exc
    return plan_from_obj(obj)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _node_obj(node: PlanNode) -> dict:
    return {
        "op": node.operator_kind.value,
        "rows": float(node.est_cardinality),
        "cost": float(node.est_cost),
        "tables": list(node.table_ids),
        "children": [_node_obj(c) for c in node.children],
    }


def plan_to_obj(plan: PlanTree) -> dict:
    obj = {"plan_id": plan.plan_id}
    obj.update(_node_obj(plan.root))
    return obj


def serialize_plan(plan: PlanTree) -> str:
    return json.dumps(plan_to_obj(plan), separators=(",", ":"), allow_nan=False)


def structure_key(node: PlanNode) -> str:
    """Operator/table shape of a subtree, ignoring the numeric estimates."""
    inner = ",".join(structure_key(c) for c in node.children)
    return f"{node.operator_kind.value}[{'|'.join(node.table_ids)}]({inner})"
