import itertools
import time

import numpy as np
import pytest

from conftest import random_model, randomize
from planrank import numerics as nx
from planrank.assignment import solve_assignment
from planrank.embedder import CorpusScaling
from planrank.errors import DimensionMismatch, ListTooLong, NonFiniteScores
from planrank.numerics import ParamStore, Tensor
from planrank.ranker import (
    RankedList, RankerConfig, decode_permutation, decoded_value, encode_context, forward_batch,
    init_ranker, plan_batch, rank_plans, score_matrix, score_positions,
)
from planrank.training import ModelCheckpoint, TrainConfig, init_params

_PERMS = {n: np.array(list(itertools.permutations(range(n)))) for n in range(2, 9)}


def brute_force(s):
    """Best value and the lexicographically first permutation attaining it."""
    n = s.shape[0]
    perms = _PERMS[n]
    values = s[np.arange(n), perms].sum(axis=1)
    best = values.max()
    tol = 1e-12 * n * (1.0 + np.abs(s).max())
    first = int(np.flatnonzero(values >= best - tol)[0])
    return float(best), perms[first].tolist()


def random_score_matrix(rng, n, kind):
    if kind == 0:
        return rng.normal(size=(n, n))
    if kind == 1:
        return rng.integers(-2, 3, size=(n, n)).astype(float)  # many exact ties
    return np.repeat(rng.normal(size=(1, n)), n, axis=0)  # every permutation ties


class TestDecode:
    def test_identity_dominant(self):
        assert decode_permutation(np.eye(5)).permutation == (0, 1, 2, 3, 4)

    def test_all_equal_gives_identity(self):
        assert decode_permutation(np.full((6, 6), 0.25)).permutation == tuple(range(6))

    def test_anti_diagonal(self):
        s = np.fliplr(np.eye(4))
        r = decode_permutation(s)
        assert r.permutation == (3, 2, 1, 0)
        assert r.by_position == (3, 2, 1, 0)

    def test_matches_brute_force(self, rng):
        start = time.perf_counter()
        for trial in range(500):
            n = 2 + trial % 7
            s = random_score_matrix(rng, n, trial % 3)
            perm, value = solve_assignment(s)
            best, oracle_perm = brute_force(s)
            assert abs(value - best) <= 1e-12 * n * (1 + np.abs(s).max())
            assert perm == oracle_perm, (s, perm, oracle_perm)
        assert time.perf_counter() - start < 30

    def test_by_position_inverts_permutation(self, rng):
        r = decode_permutation(rng.normal(size=(7, 7)))
        assert [r.permutation[p] for p in r.by_position] == list(range(7))
        assert decoded_value(np.eye(7), RankedList.from_permutation(range(7))) == 7.0

    def test_rejects_non_finite(self):
        s = np.zeros((3, 3))
        s[1, 1] = np.nan
        with pytest.raises(NonFiniteScores):
            decode_permutation(s)

    @pytest.mark.parametrize("shape", [(2, 3), (1, 1), (3,)])
    def test_rejects_bad_shape(self, shape):
        with pytest.raises(ValueError):
            decode_permutation(np.zeros(shape))

    def test_relabel(self):
        r = RankedList.from_permutation([1, 0, 2])  # plans listed in order [2, 0, 1]
        back = r.relabel([2, 0, 1])
        assert back.by_position == (0, 2, 1)


class TestAttention:
    def _ctx(self, rng, n, d=16, heads=4, layers=2):
        cfg = RankerConfig(d_model=d, num_heads=heads, num_layers=layers)
        ps = ParamStore()
        init_ranker(ps, cfg, rng)
        randomize(ps, rng)
        return cfg, ps

    def test_rows_sum_to_one(self, rng):
        cfg, ps = self._ctx(rng, 0)
        for _ in range(100):
            n = int(rng.integers(2, 17))
            maps = []
            encode_context(Tensor(rng.normal(scale=3, size=(n, cfg.d_model))), ps, cfg, maps)
            for a in maps:
                assert a.shape == (cfg.num_heads, n, n)
                assert np.max(np.abs(a.sum(axis=-1) - 1.0)) <= 1e-10

    def test_identical_embeddings(self, rng):
        cfg, ps = self._ctx(rng, 2, layers=1)
        e = np.repeat(rng.normal(size=(1, cfg.d_model)), 2, axis=0)
        maps = []
        z = encode_context(Tensor(e), ps, cfg, maps).data
        assert np.allclose(maps[0], 0.5, atol=1e-15)
        assert np.array_equal(z[0], z[1])

    def test_dimension_checks(self, rng):
        cfg, ps = self._ctx(rng, 0, layers=1)
        with pytest.raises(DimensionMismatch):
            encode_context(Tensor(np.zeros((3, cfg.d_model + 1))), ps, cfg)
        with pytest.raises(ListTooLong):
            encode_context(Tensor(np.zeros((cfg.n_max + 1, cfg.d_model))), ps, cfg)


class TestScores:
    def test_zero_parameters(self, rng):
        cfg = RankerConfig(d_model=8, num_heads=2)
        ps = ParamStore()
        init_ranker(ps, cfg, rng)
        for k in ps:
            ps[k].data[...] = 0.0
        assert not score_positions(Tensor(rng.normal(size=(4, 8))), ps, cfg).data.any()

    def test_identical_rows(self, rng):
        cfg = RankerConfig(d_model=8, num_heads=2)
        ps = ParamStore()
        init_ranker(ps, cfg, rng)
        z = np.repeat(rng.normal(size=(1, 8)), 5, axis=0)
        s = score_positions(Tensor(z), ps, cfg).data
        assert all(np.array_equal(s[0], s[i]) for i in range(5))

    def test_bit_identical_recompute(self, small_workload):
        model = random_model()
        cs = small_workload[0]
        assert np.array_equal(score_matrix(cs, model), score_matrix(cs, model))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RankerConfig(d_model=30, num_heads=4)
        with pytest.raises(ValueError):
            RankerConfig(num_layers=0)


class TestRankPlans:
    @pytest.mark.parametrize("embedder", ["tree_lstm", "tree_cnn"])
    def test_set_equivariance(self, embedder, small_workload, rng):
        model = random_model(embedder, 3)
        checked = 0
        while checked < 100:
            cs = small_workload[checked % len(small_workload)]
            order = rng.permutation(cs.n).tolist()
            s = score_matrix(cs, model)
            s_perm = score_matrix(cs.permuted(order), model)
            assert np.max(np.abs(s_perm - s[order])) < 1e-12
            ids = cs.plan_ids()
            a = [ids[i] for i in rank_plans(cs, model).by_position]
            b = [cs.permuted(order).plan_ids()[i] for i in rank_plans(cs.permuted(order), model).by_position]
            assert a == b
            checked += 1

    def test_duplicate_plans_tie_broken_in_list_order(self, small_workload):
        from planrank.dataset import build_candidate_set
        from planrank.plan_ir import PlanTree
        model = random_model(seed=5)
        base = small_workload[3]
        dup = PlanTree("copy", base.plans[1].root)
        cs = build_candidate_set("q", list(base.plans) + [dup], list(base.latency_runs_ms) + [[1.0]], 0)
        s = score_matrix(cs, model)
        assert np.max(np.abs(s[1] - s[-1])) < 1e-12
        pos = list(rank_plans(cs, model).permutation)
        swapped = list(pos)
        swapped[1], swapped[-1] = pos[-1], pos[1]
        rows = np.arange(len(pos))
        assert abs(s[rows, pos].sum() - s[rows, swapped].sum()) < 1e-12
        assert pos[1] < pos[-1]

    def test_equal_rows_need_not_be_adjacent(self):
        s = np.array([[10.0, 0.0, 10.0], [0.0, 10.0, 0.0], [10.0, 0.0, 10.0]])
        assert tuple(decode_permutation(s).permutation) == (0, 1, 2)

    def test_too_long_list(self, small_workload):
        cfg = TrainConfig(ranker=RankerConfig(d_model=8, num_heads=2, n_max=3))
        ps = init_params(cfg)
        cs = max(small_workload, key=lambda c: c.n)
        with pytest.raises(ListTooLong):
            forward_batch(plan_batch(cs.plans, CorpusScaling(1, 1)), ps, cfg.embedder, cfg.ranker)

    def test_full_pipeline_gradient(self, small_workload):
        from planrank.training import listwise_loss
        model = random_model("tree_cnn", 7, d=8)
        cs = small_workload[0]
        batch = plan_batch(cs.plans, model.scaling)

        def fn():
            return listwise_loss(forward_batch(batch, model.params, model.embedder, model.ranker)[1], cs.true_ranks)

        assert nx.grad_check(fn, model.params, coords_per_param=3, select="largest") < 1e-4
