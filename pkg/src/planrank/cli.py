"""Command-line entry point: ``planrank <command> --config run.json``.

Commands: gen-data, train, train-ood, rank, decide, eval, inspect. Every
command reads one JSON run config; relative paths in it resolve against the
config file's directory. Exit codes: 0 ok, 1 usage/config error, 2 data
error, 3 model or version error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from planrank.container import read_header
from planrank.dataset import CandidateSet, candidate_set_from_obj, read_dataset, split_dataset, write_dataset
from planrank.decision import DEFAULT_K, hybrid_select, resolve_ties
from planrank.errors import DataError, InvalidConfig, ModelError, PlanRankError
from planrank.evalkit import compare_policies
from planrank.ood import DetectorConfig, fit_detector, load_detector, save_detector
from planrank.ranker import RankerConfig, rank_plans, score_matrix
from planrank.synthetic import WorkloadConfig, generate_synthetic_workload, replace_with_shifted
from planrank.training import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("planrank")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3
SPLIT_VERSION = 1


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Run config
# ---------------------------------------------------------------------------

_SECTIONS = {"seed", "workload", "split", "train", "ood", "decision", "eval", "paths"}
_PATH_KEYS = {"dataset", "split", "checkpoint", "detector", "report"}


@dataclass
class RunConfig:
    seed: int
    workload: WorkloadConfig
    split_ratio: float
    train: TrainConfig
    ood: DetectorConfig
    k: int
    epsilon: float | None
    force: bool
    shift_fraction: float
    paths: dict[str, Path] = field(default_factory=dict)


def _only_known(section: str, obj, allowed) -> dict:
    if not isinstance(obj, dict):
        raise UsageError(f"config section {section!r} must be an object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise UsageError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    return obj


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def load_run_config(path: Path, seed: int | None = None, embedder: str | None = None) -> RunConfig:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    _only_known("config", raw, _SECTIONS)
    seed = int(raw.get("seed", 0)) if seed is None else seed

    wl = dict(_only_known("workload", raw.get("workload", {}), _names(WorkloadConfig) - {"seed"}))
    split = _only_known("split", raw.get("split", {}), {"ratio"})
    tr = dict(_only_known("train", raw.get("train", {}), _names(TrainConfig) - {"seed"}))
    ranker = _only_known("train.ranker", tr.pop("ranker", {}), _names(RankerConfig))
    ood = _only_known("ood", raw.get("ood", {}), _names(DetectorConfig) - {"seed"})
    dec = _only_known("decision", raw.get("decision", {}), {"k", "epsilon", "force"})
    ev = _only_known("eval", raw.get("eval", {}), {"shift_fraction"})
    paths = _only_known("paths", raw.get("paths", {}), _PATH_KEYS)
    if embedder is not None:
        tr["embedder"] = embedder

    base = path.parent
    try:
        return RunConfig(
            seed=seed,
            workload=WorkloadConfig(**wl, seed=seed),
            split_ratio=float(split.get("ratio", 0.8)),
            train=TrainConfig(**tr, seed=seed, ranker=RankerConfig(**ranker)),
            ood=DetectorConfig(**ood, seed=seed),
            k=int(dec.get("k", DEFAULT_K)),
            epsilon=dec.get("epsilon"),
            force=bool(dec.get("force", False)),
            shift_fraction=float(ev.get("shift_fraction", 0.1)),
            paths={key: Path(os.path.normpath(base / value)) for key, value in paths.items()},
        )
    except (TypeError, ValueError, InvalidConfig) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from None


def _path(cfg: RunConfig, key: str, override: str | None = None, must_exist: bool = False) -> Path:
    if override is not None:
        p = Path(override)
    elif key in cfg.paths:
        p = cfg.paths[key]
    else:
        raise UsageError(f"config has no paths.{key} entry and no override was given")
    if must_exist and not p.exists():
        raise UsageError(f"{key} file {p} does not exist")
    return p


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# Shared loading helpers
# ---------------------------------------------------------------------------


def split_manifest(train_set, test_set, cfg: RunConfig) -> dict:
    return {
        "format_version": SPLIT_VERSION,
        "seed": cfg.seed,
        "ratio": cfg.split_ratio,
        "train": [cs.query_id for cs in train_set],
        "test": [cs.query_id for cs in test_set],
    }


def load_split(cfg: RunConfig) -> tuple[list[CandidateSet], list[CandidateSet]]:
    data = read_dataset(_path(cfg, "dataset", must_exist=True))
    manifest_path = _path(cfg, "split", must_exist=True)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"split manifest {manifest_path} is not valid JSON: {exc}") from None
    if manifest.get("format_version") != SPLIT_VERSION:
        raise DataError(f"split manifest format_version {manifest.get('format_version')!r} != {SPLIT_VERSION}")
    by_id = {cs.query_id: cs for cs in data}
    try:
        return [by_id[q] for q in manifest["train"]], [by_id[q] for q in manifest["test"]]
    except KeyError as exc:
        raise DataError(f"split manifest names unknown query {exc}") from None


def read_candidate_file(path: Path) -> CandidateSet:
    """A single candidate-set object, or the first record of a dataset JSONL file."""
    if not path.exists():
        raise UsageError(f"input file {path} does not exist")
    text = path.read_text(encoding="utf-8").strip()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        try:
            obj = json.loads(text.splitlines()[0])
        except (json.JSONDecodeError, IndexError) as exc:
            raise DataError(f"{path}: not a candidate-set JSON object: {exc}") from None
    return candidate_set_from_obj(obj)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    data = generate_synthetic_workload(cfg.workload)
    dataset_path = _path(cfg, "dataset", args.out)
    dataset_path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(dataset_path, data)
    train_set, test_set = split_dataset(data, cfg.split_ratio, cfg.seed)
    manifest = split_manifest(train_set, test_set, cfg)
    _write_text(_path(cfg, "split"), json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(data)} queries to {dataset_path} ({len(train_set)} train / {len(test_set)} test)")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    train_set, _ = load_split(cfg)

    def report(epoch: int, loss: float) -> None:
        print(f"epoch {epoch:4d}  loss {loss:.6f}", flush=True)

    ckpt = train(train_set, cfg.train, on_epoch=report)
    out = _path(cfg, "checkpoint", args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    print(f"wrote checkpoint {out}")
    return EXIT_OK


def cmd_train_ood(cfg: RunConfig, args) -> int:
    model = load_checkpoint(_path(cfg, "checkpoint", must_exist=True))
    train_set, _ = load_split(cfg)
    det = fit_detector(train_set, model, cfg.ood)
    out = _path(cfg, "detector", args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_detector(det, out)
    th = det.thresholds
    print(f"tau_in {th.tau_in:.6f}  tau_out {th.tau_out:.6f}  degraded {th.degraded}  "
          f"gap {det.metadata['confidence_gap']:.4f}")
    print(f"wrote detector {out}")
    return EXIT_OK


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if out:
        _write_text(Path(out), text)
    else:
        sys.stdout.write(text)


def cmd_rank(cfg: RunConfig, args) -> int:
    model = load_checkpoint(_path(cfg, "checkpoint", must_exist=True))
    cs = read_candidate_file(Path(args.input))
    scores = score_matrix(cs, model)
    ranked = rank_plans(cs, model)
    ids = cs.plan_ids()
    _emit({
        "query_id": cs.query_id,
        "permutation": list(ranked.permutation),
        "by_position": [ids[p] for p in ranked.by_position],
        "scores": scores.tolist(),
    }, args.out)
    return EXIT_OK


def cmd_decide(cfg: RunConfig, args) -> int:
    model = load_checkpoint(_path(cfg, "checkpoint", must_exist=True))
    det = load_detector(_path(cfg, "detector", must_exist=True))
    cs = read_candidate_file(Path(args.input))
    scores = score_matrix(cs, model)
    ranked = rank_plans(cs, model)
    k = args.k if args.k is not None else cfg.k
    ties = resolve_ties(ranked, scores, cfg.epsilon)
    outcome = hybrid_select(ranked, cs, det, None, k, model=model, force=args.force or cfg.force,
                            tie_group=ties)
    _emit(outcome.to_obj(), args.out)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    model = load_checkpoint(_path(cfg, "checkpoint", must_exist=True))
    det = load_detector(_path(cfg, "detector", must_exist=True))
    _, test_set = load_split(cfg)
    k = args.k if args.k is not None else cfg.k
    force = args.force or cfg.force
    report = compare_policies(test_set, model, det, None, k, force)
    out = report.to_obj()
    print(report.table())
    if cfg.shift_fraction > 0:
        shifted = replace_with_shifted(test_set, cfg.workload, cfg.shift_fraction)
        shifted_report = compare_policies(shifted, model, det, None, k, force)
        out["shifted"] = {"fraction": cfg.shift_fraction, **shifted_report.to_obj()}
        print()
        print(f"with {cfg.shift_fraction:.0%} of test queries replaced by shifted queries:")
        print(shifted_report.table())
    dest = _path(cfg, "report", args.out)
    _write_text(dest, json.dumps(out, indent=2, sort_keys=True, allow_nan=False) + "\n")
    print(f"wrote report {dest}")
    return EXIT_OK


def cmd_inspect(cfg: RunConfig, args) -> int:
    target = Path(args.file) if args.file else _path(cfg, "checkpoint")
    if not target.exists():
        raise UsageError(f"{target} does not exist")
    header, _ = read_header(target.read_bytes())
    _emit(header, args.out)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "train-ood": cmd_train_ood,
    "rank": cmd_rank,
    "decide": cmd_decide,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output path")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging to standard error")

    parser = _Parser(prog="planrank", description="Listwise learned plan ranking with a guarded fallback.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=text, description=text)

    add("gen-data", "generate the synthetic workload and its train/test split")
    p = add("train", "train the ranker on the train split")
    p.add_argument("--embedder", choices=("tree_lstm", "tree_cnn"))
    add("train-ood", "fit and calibrate the in-distribution detector")
    p = add("rank", "rank one candidate set")
    p.add_argument("input", help="candidate-set JSON file")
    for name, text in (("decide", "hybrid plan choice for one candidate set"),
                       ("eval", "compare selection policies on the test split")):
        p = add(name, text)
        if name == "decide":
            p.add_argument("input", help="candidate-set JSON file")
        p.add_argument("--k", type=int, help="how many top-ranked plans the gate may inspect")
        p.add_argument("--force", action="store_true", help="use a degraded detector anyway")
    p = add("inspect", "dump a checkpoint or detector header")
    p.add_argument("file", nargs="?", help="file to inspect (default: the configured checkpoint)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_run_config(Path(args.config), args.seed, getattr(args, "embedder", None))
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"planrank: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ModelError as exc:
        print(f"planrank: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (DataError, PlanRankError, OSError) as exc:
        print(f"planrank: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
