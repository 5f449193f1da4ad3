import itertools
import math

import numpy as np
import pytest
from scipy.linalg import hadamard

from sgbgh.evaluation import (binary_codes, evaluate, group_average, hit_edge_set, layer_hamming_stats,
                              ndcg_at_k, rank_sources, read_metrics_csv, recall_at_k,
                              sample_non_neighbors, write_metrics_csv, write_similarity_csv)
from sgbgh.graph import BipartiteGraph, DatasetSplit, split_dataset
from sgbgh.model import FinalEmbedding, ModelConfig, binarize_scenario, forward, single_layer
from sgbgh.graph import build_normalized_adjacency
from sgbgh.retrieval import PackedCodebook
from conftest import random_graph


def make_split(nu, nv, train, test):
    train = np.array(train, dtype=np.int64).reshape(-1, 2)
    test = np.array(test, dtype=np.int64).reshape(-1, 2)
    g = BipartiteGraph(nu, nv, np.concatenate([train, test]))
    return DatasetSplit(g, train, test)


def codebook(alphas, codes, nu):
    return PackedCodebook.from_embedding(FinalEmbedding(np.asarray(alphas, float), np.asarray(codes, np.int8), nu))


# ---------------------------------------------------------------- metrics

def test_recall_examples():
    assert recall_at_k([1, 2, 3], {1, 3}, 3) == 1.0
    assert recall_at_k([1, 2, 3], {4, 5}, 3) == 0.0
    assert recall_at_k([1, 2, 3, 4], {4, 9}, 3) == 0.0
    with pytest.raises(ValueError):
        recall_at_k([1], set(), 1)


def test_ndcg_examples():
    assert ndcg_at_k([7, 1, 2], {7}, 3) == 1.0
    assert ndcg_at_k([1, 7, 2], {7}, 3) == pytest.approx(1 / math.log2(3))
    assert ndcg_at_k([1, 7, 2], {7}, 3) == pytest.approx(0.6309, abs=1e-4)
    assert ndcg_at_k([3, 4, 1, 2], {3, 4}, 4) == 1.0


def _ndcg_brute(ranked, relevant, k):
    gains = [1.0 if v in relevant else 0.0 for v in ranked[:k]]
    dcg = sum(g / math.log2(i + 2) for i, g in enumerate(gains))
    ideal = sorted([1.0] * len(relevant) + [0.0] * k, reverse=True)[:k]
    return dcg / sum(g / math.log2(i + 2) for i, g in enumerate(ideal))


@pytest.mark.parametrize("seed", range(30))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    ranked = list(rng.permutation(50)[:30])
    relevant = set(int(v) for v in rng.choice(50, size=rng.integers(1, 15), replace=False))
    for k in (1, 5, 20, 30):
        assert recall_at_k(ranked, relevant, k) == len(set(ranked[:k]) & relevant) / len(relevant)
        assert ndcg_at_k(ranked, relevant, k) == pytest.approx(_ndcg_brute(ranked, relevant, k))
        assert 0 <= ndcg_at_k(ranked, relevant, k) <= 1


# ---------------------------------------------------------------- evaluate

def perfect_fixture(adversarial=False):
    """3 sources over Hadamard rows; each source's test items carry its own row (or its negation)."""
    h = hadamard(8).astype(np.int8)
    nu, per, filler = 3, 5, 135
    nv = nu * per + filler
    codes = np.empty((nu + nv, 1, 8), dtype=np.int8)
    codes[:nu, 0] = h[1:4]
    train, test = [], []
    for u in range(nu):
        for j in range(per):
            v = u * per + j
            codes[nu + v, 0] = -h[1 + u] if adversarial else h[1 + u]
            test.append((u, v))
        train.append((u, nu * per + u))
    codes[nu + nu * per:, 0] = h[5]
    return codebook(np.ones((nu + nv, 1)), codes, nu), make_split(nu, nv, train, test)


def test_perfect_fixture():
    cb, split = perfect_fixture()
    rep = evaluate(cb, split)
    assert rep.num_evaluated == 3
    assert all(rep.recall[k] == 1.0 and rep.ndcg[k] == 1.0 for k in rep.ks)
    hits = hit_edge_set(cb, split)
    assert sorted(map(tuple, hits)) == sorted(map(tuple, split.test_edges))


def test_adversarial_fixture():
    cb, split = perfect_fixture(adversarial=True)
    assert len(hit_edge_set(cb, split)) == 0
    assert evaluate(cb, split).recall[100] == 0.0


def test_random_embeddings_recall():
    rng = np.random.default_rng(0)
    nu, nv = 200, 1000
    train, test = [], []
    for u in range(nu):
        vs = rng.choice(nv, 20, replace=False)
        train += [(u, v) for v in vs[:10]]
        test += [(u, v) for v in vs[10:]]
    split = make_split(nu, nv, train, test)
    codes = np.where(rng.random((nu + nv, 3, 64)) < 0.5, 1, -1)
    rep = evaluate(codebook(rng.uniform(0.1, 1, (nu + nv, 3)), codes, nu), split)
    mean = 20 / 990
    # hypergeometric variance of hits among 20 draws from 990 with 10 relevant
    var_hits = 20 * (10 / 990) * (980 / 990) * (970 / 989)
    sigma = math.sqrt(var_hits / 100 / nu)
    assert abs(rep.recall[20] - mean) < 3 * sigma
    recalls = [rep.recall[k] for k in rep.ks]
    assert recalls == sorted(recalls)


def test_monotone_on_planted(planted_split):
    rng = np.random.default_rng(1)
    n = 100
    cb = codebook(rng.uniform(0, 1, (n, 2)), np.where(rng.random((n, 2, 16)) < 0.5, 1, -1), 40)
    rep = evaluate(cb, planted_split)
    r = [rep.recall[k] for k in rep.ks]
    assert r == sorted(r) and r[-1] == 1.0  # Top-100 of <= 60 destinations covers everything
    assert set(rep.as_dict()) == {f"{m}@{k}" for m in ("recall", "ndcg") for k in rep.ks}


def test_exclusion_fixture():
    nu, nv = 2, 30
    alphas = np.ones((nu + nv, 1))
    alphas[nu:, 0] = np.linspace(1.0, 0.1, nv)   # global order: dest 0 scores highest
    codes = np.ones((nu + nv, 1, 8), dtype=np.int8)
    train = [(0, v) for v in range(25)] + [(1, 28), (1, 29)]
    test = [(0, 25), (1, 0)]
    split = make_split(nu, nv, train, test)
    cb = codebook(alphas, codes, nu)
    on = evaluate(cb, split, ks=(20,))
    off = evaluate(cb, split, ks=(20,), exclude_train=False)
    assert on.recall[20] == 1.0 and off.recall[20] == 0.5
    r_on = rank_sources(cb, split, [0, 1], 20)
    r_off = rank_sources(cb, split, [0, 1], 20, exclude_train=False)
    assert np.array_equal(r_on[1], r_off[1])     # train items never reach the top for source 1
    assert not np.array_equal(r_on[0], r_off[0])


def test_evaluate_errors():
    split = make_split(2, 3, [(0, 0), (1, 1)], [])
    cb = codebook(np.ones((5, 1)), np.ones((5, 1, 8)), 2)
    with pytest.raises(ValueError, match="no test edges"):
        evaluate(cb, split)
    with pytest.raises(ValueError, match="graph has"):
        evaluate(codebook(np.ones((6, 1)), np.ones((6, 1, 8)), 2), split)


def test_hit_subset_of_test(planted_split):
    rng = np.random.default_rng(3)
    cb = codebook(rng.uniform(0, 1, (100, 2)), np.where(rng.random((100, 2, 16)) < 0.5, 1, -1), 40)
    hits = hit_edge_set(cb, planted_split, k=10)
    test = set(map(tuple, planted_split.test_edges.tolist()))
    assert 0 < len(hits) < len(test) and set(map(tuple, hits.tolist())) <= test


def test_metrics_csv_round_trip(tmp_path, planted_split):
    cb, split = perfect_fixture()
    rep = evaluate(cb, split)
    write_metrics_csv(rep, tmp_path / "m.csv")
    back = read_metrics_csv(tmp_path / "m.csv")
    assert back == {k: (rep.recall[k], rep.ndcg[k]) for k in rep.ks}


def test_binarize_scenarios_and_single_layer(planted_split):
    cfg = ModelConfig(dim=16, layers=2)
    table = np.random.default_rng(0).normal(size=(100, 16))
    _, final = forward(table, build_normalized_adjacency(planted_split), cfg, 40)
    ones = FinalEmbedding(np.ones_like(final.alphas), final.codes, 40)
    a = evaluate(PackedCodebook.from_embedding(binarize_scenario(final, "B_UV")), planted_split)
    b = evaluate(PackedCodebook.from_embedding(ones), planted_split)
    assert a.recall == b.recall and a.ndcg == b.ndcg
    for l in range(3):
        rep = evaluate(PackedCodebook.from_embedding(single_layer(final, l)), planted_split)
        assert 0 <= rep.recall[20] <= 1


# ---------------------------------------------------------------- layer statistics

def test_identical_codes_give_one(planted_split):
    codes = np.ones((100, 3, 16), dtype=np.int8)
    final = FinalEmbedding(np.ones((100, 3)), codes, 40)
    rows = layer_hamming_stats(final, planted_split.test_edges, planted_split, neg_samples=50)
    assert all(r["mean"] == 1.0 for r in rows if r["count"])
    assert {r["kind"] for r in rows} == {"neighbor", "non-neighbor"}
    assert len(rows) == 2 * 3 * 8


def test_random_codes_half():
    g = random_graph(64, 500, 0.02, 0)
    split = split_dataset(g, 0.8, 0)
    rng = np.random.default_rng(0)
    codes = np.where(rng.random((564, 2, 64)) < 0.5, 1, -1).astype(np.int8)
    rows = layer_hamming_stats(FinalEmbedding(np.ones((564, 2)), codes, 64), split.test_edges, split,
                               neg_samples=20, seed=1)
    for kind, layer in itertools.product(("neighbor", "non-neighbor"), (0, 1)):
        sel = [r for r in rows if r["kind"] == kind and r["layer"] == layer]
        n = sum(r["count"] for r in sel)
        mean = sum(r["mean"] * r["count"] for r in sel if r["count"]) / n
        # pairs sharing one node are still independent; 20 of ~490 draws rarely repeat a pair
        assert abs(mean - 0.5) < 3 * 0.0625 / math.sqrt(n)
        assert abs(group_average(rows, kind, layer) - 0.5) < 0.05


def test_alpha_invariance(planted_split):
    rng = np.random.default_rng(2)
    codes = np.where(rng.random((100, 3, 16)) < 0.5, 1, -1).astype(np.int8)
    a = layer_hamming_stats(FinalEmbedding(np.ones((100, 3)), codes, 40), planted_split.test_edges,
                            planted_split, neg_samples=100)
    b = layer_hamming_stats(FinalEmbedding(rng.uniform(0.01, 9, (100, 3)), codes, 40),
                            planted_split.test_edges, planted_split, neg_samples=100)
    assert a == b


def test_missing_groups_are_none(planted_split):
    codes = np.ones((100, 1, 8), dtype=np.int8)
    rows = layer_hamming_stats(FinalEmbedding(np.ones((100, 1)), codes, 40),
                               np.zeros((0, 2), dtype=np.int64), planted_split, neg_samples=10)
    nb = [r for r in rows if r["kind"] == "neighbor"]
    assert all(r["mean"] is None and r["count"] == 0 for r in nb)
    assert group_average(rows, "neighbor", 0) is None


def test_non_neighbor_sampler_contract(planted_split):
    rng = np.random.default_rng(0)
    total = 0
    for u in range(planted_split.num_sources):
        vs = sample_non_neighbors(planted_split, u, 2500, rng)
        assert not planted_split.in_any(np.full(len(vs), u), vs).any()
        total += len(vs)
    assert total == 100_000


def test_non_neighbor_sampler_dense_and_saturated():
    split = make_split(2, 4, [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)], [(1, 3)])
    rng = np.random.default_rng(0)
    assert set(sample_non_neighbors(split, 0, 100, rng).tolist()) == {3}
    assert len(sample_non_neighbors(split, 1, 100, rng)) == 0


def test_binary_codes_sources(planted_split):
    cfg = ModelConfig(dim=8, layers=2)
    table = np.random.default_rng(0).normal(size=(100, 8))
    state, final = forward(table, build_normalized_adjacency(planted_split), cfg, 40)
    cb = PackedCodebook.from_embedding(final)
    assert np.array_equal(binary_codes(state), final.codes)
    assert np.array_equal(binary_codes(cb), final.codes)
    with pytest.raises(TypeError):
        binary_codes(table)


def test_similarity_csv(tmp_path):
    rows = [{"layer": 0, "group": 0, "kind": "neighbor", "mean": None, "count": 0},
            {"layer": 0, "group": 1, "kind": "neighbor", "mean": 0.75, "count": 4}]
    write_similarity_csv(rows, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines == ["layer,group,kind,mean,count", "0,0,neighbor,,0", "0,1,neighbor,0.75,4"]
