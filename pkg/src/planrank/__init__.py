"""Listwise learned query-plan ranking with a confidence-gated fallback.

Typical flow: build candidate sets (``dataset`` / ``synthetic``), train the
embedder and ranker jointly (``training``), fit the in-distribution
detector (``ood``), then choose plans with ``decision.hybrid_select`` and
score policies with ``evalkit.compare_policies``.
"""
from planrank.dataset import CandidateSet, build_candidate_set, ingest_measurements, organize_ranking, split_dataset
from planrank.decision import DecisionOutcome, hybrid_select, resolve_ties
from planrank.evalkit import EvalReport, compare_policies, cumulative_time, top_k_accuracy
from planrank.ood import OodDetector, Thresholds, calibrate_thresholds, confidence, train_detector
from planrank.plan_ir import OpKind, PlanNode, PlanTree, parse_plan, serialize_plan, validate_tree
from planrank.ranker import RankedList, RankerConfig, decode_permutation, rank_plans
from planrank.synthetic import WorkloadConfig, generate_synthetic_workload
from planrank.training import ModelCheckpoint, TrainConfig, listwise_loss, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CandidateSet", "build_candidate_set", "ingest_measurements", "organize_ranking", "split_dataset",
    "DecisionOutcome", "hybrid_select", "resolve_ties",
    "EvalReport", "compare_policies", "cumulative_time", "top_k_accuracy",
    "OodDetector", "Thresholds", "calibrate_thresholds", "confidence", "train_detector",
    "OpKind", "PlanNode", "PlanTree", "parse_plan", "serialize_plan", "validate_tree",
    "RankedList", "RankerConfig", "decode_permutation", "rank_plans",
    "WorkloadConfig", "generate_synthetic_workload",
    "ModelCheckpoint", "TrainConfig", "listwise_loss", "load_checkpoint", "save_checkpoint", "train",
]
