"""Acceptance criteria, one PASS/FAIL line each (printed in the pytest summary).

The end-to-end criteria share one seeded run of configs/benchmark.json,
executed in-process through the same code paths the CLI uses.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import randomize
from planrank import numerics as nx
from planrank.assignment import solve_assignment
from planrank.cli import load_run_config, main
from planrank.dataset import split_dataset
from planrank.embedder import CorpusScaling
from planrank.evalkit import POLICIES, compare_policies
from planrank.numerics import Tensor
from planrank.ood import fit_detector
from planrank.ranker import RankedList, RankerConfig, forward_batch, plan_batch, rank_plans, score_matrix
from planrank.synthetic import WorkloadConfig, generate_synthetic_workload, replace_with_shifted
from planrank.training import (
    ModelCheckpoint, TrainConfig, init_params, listwise_loss, load_checkpoint, save_checkpoint, train,
)
from test_decision import ScriptedDetector, selection_oracle, candidate_set, features
from test_ranker import brute_force, random_score_matrix
from test_training import naive_loss

ROOT = Path(__file__).resolve().parent.parent
BENCHMARK_CONFIG = ROOT / "configs" / "benchmark.json"

RESULTS: list[str] = []


def record(number, name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def model_for(embedder, seed, d=32):
    cfg = TrainConfig(embedder=embedder, seed=seed, ranker=RankerConfig(d_model=d))
    rng = np.random.default_rng(seed)
    return ModelCheckpoint(cfg, randomize(init_params(cfg), rng), CorpusScaling(12.0, 12.0))


@pytest.fixture(scope="module")
def benchmark():
    """Seeded end-to-end run: generate, split, train, fit the detector, evaluate."""
    cfg = load_run_config(BENCHMARK_CONFIG)
    start = time.perf_counter()
    data = generate_synthetic_workload(cfg.workload)
    train_set, test_set = split_dataset(data, cfg.split_ratio, cfg.seed)
    model = train(train_set, cfg.train)
    trained = time.perf_counter()
    detector = fit_detector(train_set, model, cfg.ood)
    report = compare_policies(test_set, model, detector, None, cfg.k, cfg.force)
    shifted_set = replace_with_shifted(test_set, cfg.workload, cfg.shift_fraction)
    shifted = compare_policies(shifted_set, model, detector, None, cfg.k, cfg.force)
    done = time.perf_counter()
    return dict(cfg=cfg, data=data, train=train_set, test=test_set, model=model, detector=detector,
                report=report, shifted=shifted, train_seconds=trained - start, seconds=done - start)


def test_01_gradient_fidelity():
    start = time.perf_counter()
    # Small queries can yield fewer distinct plans than requested; keep genuine 4-plan sets.
    pool = generate_synthetic_workload(WorkloadConfig(num_queries=30, plans_per_query=(4, 4), seed=101))
    sets = [cs for cs in pool if cs.n == 4][:10]
    assert len(sets) == 10
    worst = {}
    for e, embedder in enumerate(("tree_lstm", "tree_cnn")):
        worst[embedder] = 0.0
        for i, cs in enumerate(sets):
            model = model_for(embedder, 1000 * e + i)
            batch = plan_batch(cs.plans, model.scaling)

            def fn():
                return listwise_loss(forward_batch(batch, model.params, embedder, model.ranker)[1], cs.true_ranks)

            err = nx.grad_check(fn, model.params, eps=1e-5, coords_per_param=4, select="largest")
            worst[embedder] = max(worst[embedder], err)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    record(1, "gradient fidelity", ok,
           f"max rel err tree_lstm {worst['tree_lstm']:.2e}, tree_cnn {worst['tree_cnn']:.2e} "
           f"(< 1e-4), {elapsed:.1f}s (< 60s)")


def test_02_attention_rows_sum_to_one():
    rng = np.random.default_rng(202)
    data = generate_synthetic_workload(WorkloadConfig(num_queries=100, plans_per_query=(2, 16), seed=202))
    worst = 0.0
    for i, cs in enumerate(data):
        model = model_for("tree_lstm" if i % 2 else "tree_cnn", 5000 + i)
        maps = []
        forward_batch(plan_batch(cs.plans, model.scaling), model.params, model.embedder, model.ranker, maps)
        for a in maps:
            worst = max(worst, float(np.abs(a.sum(axis=-1) - 1.0).max()))
    record(2, "attention normalization", worst <= 1e-10, f"max |row sum - 1| = {worst:.1e} over 100 passes (<= 1e-10)")


def test_03_loss_anchors():
    uniform = abs(float(listwise_loss(Tensor(np.zeros((4, 4))), [1, 2, 3, 4]).data) - 4 * math.log(4))
    y = [3, 1, 2]
    s = np.full((3, 3), -30.0)
    s[np.arange(3), np.array(y) - 1] = 30.0
    saturated = float(listwise_loss(Tensor(s), y).data)
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 17))
        s = rng.normal(scale=3.0, size=(n, n))
        y = (rng.permutation(n) + 1).tolist()
        worst = max(worst, abs(float(listwise_loss(Tensor(s), y).data) - naive_loss(s, y)))
    ok = uniform <= 1e-12 and saturated < 1e-9 and worst <= 1e-12
    record(3, "loss anchors", ok,
           f"|L - 4 ln 4| = {uniform:.1e}, saturated L = {saturated + 0.0:.1e}, oracle max diff {worst:.1e}")


def test_04_decoder_optimality():
    rng = np.random.default_rng(404)
    start = time.perf_counter()
    mismatches = 0
    for trial in range(500):
        n = 2 + trial % 7
        s = random_score_matrix(rng, n, trial % 3)
        perm, value = solve_assignment(s)
        best, oracle_perm = brute_force(s)
        if perm != oracle_perm or abs(value - best) > 1e-12 * n * (1 + np.abs(s).max()):
            mismatches += 1
    elapsed = time.perf_counter() - start
    record(4, "decoder optimality", mismatches == 0 and elapsed < 30,
           f"{mismatches} mismatches vs n! enumeration on 500 matrices (n 2..8), {elapsed:.1f}s (< 30s)")


def test_05_set_equivariance():
    rng = np.random.default_rng(505)
    data = generate_synthetic_workload(WorkloadConfig(num_queries=100, plans_per_query=(2, 16), seed=505))
    models = [model_for("tree_lstm", 51), model_for("tree_cnn", 52)]
    failures = 0
    for i, cs in enumerate(data):
        model = models[i % 2]
        order = rng.permutation(cs.n).tolist()
        direct = rank_plans(cs, model)
        permuted = rank_plans(cs.permuted(order), model).relabel(order)
        failures += permuted != direct
    record(5, "set-equivariance", failures == 0, f"{failures} of 100 permuted sets disagree")


def test_06_selection_loop_conformance():
    rng = np.random.default_rng(606)
    disagreements = always = never = 0
    for case in range(10_000):
        n = int(rng.integers(2, 11))
        k = int(rng.integers(1, n + 1))
        tau_in = float(rng.uniform(0.5, 1.0))
        mode = case % 3
        if mode == 0:
            g = np.ones(n)
        elif mode == 1:
            g, tau_in = np.full(n, 0.5), max(tau_in, 0.51)
        else:
            g = rng.uniform(0.5, 1.0, size=n)
        order = rng.permutation(n)
        g_by_plan = np.empty(n)
        g_by_plan[order] = g
        ranked = RankedList.from_permutation(np.argsort(order).tolist())
        out = hybrid(ranked, n, g_by_plan, tau_in, k)
        expected = selection_oracle(g.tolist(), tau_in, k)
        disagreements += (out.source, out.model_rank) != expected
        always += mode == 0 and (out.source, out.model_rank) == ("ModelRank", 1)
        never += mode == 1 and out.source == "CboFallback"
    ok = disagreements == 0 and always == 3334 and never == 3333
    record(6, "selection-loop conformance", ok,
           f"{disagreements} disagreements in 10^4 cases; always-confident -> rank 1 in {always}/3334, "
           f"never-confident -> fallback in {never}/3333")


def hybrid(ranked, n, g_by_plan, tau_in, k):
    from planrank.decision import hybrid_select
    from planrank.ood import Thresholds
    return hybrid_select(ranked, candidate_set(n), ScriptedDetector(g_by_plan), Thresholds(tau_in, 0.5, degraded=True),
                         k, features=features(n), force=True)


def test_07_ood_confidence_gap(benchmark):
    det = benchmark["detector"]
    gap = det.metadata["confidence_gap"]
    th = det.thresholds
    ok = gap >= 0.2 and th.tau_out < th.tau_in and not th.degraded
    record(7, "OOD confidence gap", ok,
           f"mean g holdout {det.metadata['mean_g_in']:.3f} - negatives {det.metadata['mean_g_negative']:.3f} "
           f"= {gap:.3f} (>= 0.2); tau_out {th.tau_out:.3f} < tau_in {th.tau_in:.3f}")


def test_08a_top1_vs_random(benchmark):
    r = benchmark["report"]
    top1 = r["model_top1"].top_k[1]
    record("8a", "model top-1 vs random", top1 >= 3 * r.random_top1,
           f"top-1 {top1:.1f}% vs 3 x random {3 * r.random_top1:.1f}% (random {r.random_top1:.1f}%)")


def test_08b_top3(benchmark):
    top3 = benchmark["report"]["model_top1"].top_k[3]
    record("8b", "model top-3", top3 >= 70.0, f"top-3 {top3:.1f}% (>= 70%)")


def test_08c_hybrid_vs_cbo(benchmark):
    r = benchmark["report"]
    h, c = r["hybrid"].cumulative_time_ms, r["cbo"].cumulative_time_ms
    record("8c", "hybrid vs native time", h <= c,
           f"hybrid {h:.1f} ms <= native {c:.1f} ms (model-top-1 {r['model_top1'].cumulative_time_ms:.1f} ms, "
           f"best {r['best'].cumulative_time_ms:.1f} ms, fallbacks {r['hybrid'].fallbacks}/{r.num_queries})")


def test_08d_hybrid_under_shift(benchmark):
    r = benchmark["shifted"]
    h, m = r["hybrid"].cumulative_time_ms, r["model_top1"].cumulative_time_ms
    record("8d", "hybrid vs model under shift", h <= m,
           f"with 10% shifted queries: hybrid {h:.1f} ms <= model-top-1 {m:.1f} ms "
           f"(native {r['cbo'].cumulative_time_ms:.1f} ms, fallbacks {r['hybrid'].fallbacks}/{r.num_queries})")


def test_08e_runtime(benchmark):
    record("8e", "benchmark runtime", benchmark["seconds"] < 15 * 60,
           f"{benchmark['seconds']:.0f}s end to end, {benchmark['train_seconds']:.0f}s of it training "
           f"({benchmark['cfg'].train.epochs} epochs) (< 900s)")


def test_09_determinism_and_persistence(benchmark, tmp_path):
    from test_cli import TINY
    digests = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        (d / "run.json").write_text(json.dumps(TINY))
        for cmd in ("gen-data", "train", "train-ood", "eval"):
            assert main([cmd, "--config", str(d / "run.json")]) == 0
        digests.append({name: (d / "out" / name).read_bytes()
                        for name in ("data.jsonl", "model.ckpt", "report.json")})
    same_files = digests[0] == digests[1]
    model = benchmark["model"]
    save_checkpoint(model, tmp_path / "bench.ckpt")
    back = load_checkpoint(tmp_path / "bench.ckpt")
    held_out = benchmark["test"][:20]
    exact = sum(np.array_equal(score_matrix(cs, back), score_matrix(cs, model))
                and rank_plans(cs, back) == rank_plans(cs, model) for cs in held_out)
    record(9, "determinism and persistence", same_files and exact == 20,
           f"dataset/checkpoint/report byte-identical across reruns: {same_files}; "
           f"round-trip bit-exact on {exact}/20 held-out sets")


def test_10_metric_monotonicity(benchmark):
    reports = [benchmark["report"], benchmark["shifted"]]
    mono = all(r[name].top_k[1] <= r[name].top_k[2] <= r[name].top_k[3] for r in reports for name in POLICIES)
    best_ok = all(r["best"].top_k[1] == 100.0 and
                  r["best"].cumulative_time_ms == min(r[n].cumulative_time_ms for n in POLICIES) for r in reports)
    record(10, "metric monotonicity", mono and best_ok,
           f"top-k nondecreasing for every policy: {mono}; best policy 100% top-1 and minimal time: {best_ok}")
