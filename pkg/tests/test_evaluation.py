from collections import Counter
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gatedlongrec.data import generate_synthetic
from gatedlongrec.evaluation import (BASELINES, EvalError, EvalReport, FirstOrderTransitions, GlobalPop,
                                     RankedList, SeqPop, baseline_fot, baseline_global_pop, decompose,
                                     evaluate_baseline, evaluate_model, format_table, mrr_at_k,
                                     rank_full_catalog, ranks_from_scores, read_report, recall_at_k,
                                     run_ablation)
from gatedlongrec.model import HyperParams, ModelParams

from helpers import FIXTURE_CATE, FIXTURE_SEQUENCES, five_item_fixture, sort_oracle


# ---------------------------------------------------------------- metrics

def test_metric_examples():
    assert recall_at_k([1], 100) == 1.0
    assert recall_at_k([101], 100) == 0.0
    assert recall_at_k([1, 50, 200], 100) == pytest.approx(2 / 3)
    assert mrr_at_k([1], 100) == 1.0
    assert mrr_at_k([4], 3) == 0.0
    assert mrr_at_k([1, 2], 100) == 0.75
    assert recall_at_k([None, 1], 5) == 0.5 and mrr_at_k([None, 2], 5) == 0.25
    with pytest.raises(ValueError):
        recall_at_k([0], 5)


def test_rank_examples():
    assert rank_full_catalog([0.1, 0.9, 0.3], 1) == 1
    assert rank_full_catalog(np.ones(10), 4) == 10
    assert rank_full_catalog([0.5, 0.2, 0.5], 2) == 2
    assert rank_full_catalog([0.5, 0.5, 0.5], 0) == 3


def test_metrics_match_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        scores = rng.integers(0, 6, size=n).astype(float) if rng.random() < 0.5 else rng.normal(size=n)
        truth = int(rng.integers(n))
        K = int(rng.integers(1, 20))
        r = rank_full_catalog(scores, truth)
        assert r == sort_oracle(list(scores), truth)
        assert recall_at_k([r], K) == (1.0 if r <= K else 0.0)
        assert mrr_at_k([r], K) == (1.0 / r if r <= K else 0.0)


@given(st.lists(st.integers(1, 300), min_size=1, max_size=50), st.integers(1, 300))
def test_metric_means_are_exact(ranks, K):
    hits = [r for r in ranks if r <= K]
    assert recall_at_k(ranks, K) == pytest.approx(len(hits) / len(ranks), abs=1e-15)
    assert mrr_at_k(ranks, K) == pytest.approx(float(sum(Fraction(1, r) for r in hits) / len(ranks)), abs=1e-12)
    assert 0 <= mrr_at_k(ranks, K) <= recall_at_k(ranks, K) <= 1


def test_row_ranks_match_single_ranks():
    rng = np.random.default_rng(1)
    scores = rng.integers(0, 4, size=(30, 12)).astype(float)
    truths = rng.integers(0, 12, size=30)
    np.testing.assert_array_equal(ranks_from_scores(scores, truths),
                                  [rank_full_catalog(s, t) for s, t in zip(scores, truths)])


def test_ranked_list_invariants():
    rl = RankedList([2, 0, 1], [3.0, 2.0, 2.0])
    assert rl.rank_of(1) == 3 and rl.rank_of(7) is None and rl.top(2) == [2, 0]
    with pytest.raises(ValueError):
        RankedList([0, 1], [1.0, 2.0])
    with pytest.raises(ValueError):
        RankedList([0, 0], [2.0, 1.0])


# ---------------------------------------------------------------- baselines on the fixture

def fixture_train_symbols(kind="item"):
    out = []
    for u in sorted(FIXTURE_SEQUENCES):
        seq = [v for v, t in FIXTURE_SEQUENCES[u] if t < 100]
        out.append(seq if kind == "item" else [FIXTURE_CATE[v] for v in seq])
    return out


def test_global_pop_examples():
    assert GlobalPop([5, 3, 3, 1]).order.tolist() == [0, 1, 2, 3]
    assert GlobalPop([0, 3, 0, 1]).order.tolist() == [1, 3, 0, 2]
    ds = five_item_fixture()
    # hand count over train actions: items (3, 4, 3, 2, 2)
    assert baseline_global_pop(ds).items.tolist() == [1, 0, 2, 3, 4]
    counts = Counter(v for seq in fixture_train_symbols() for v in seq)
    oracle = sorted(range(5), key=lambda v: (-counts[v], v))
    assert baseline_global_pop(ds).items.tolist() == oracle


def test_fot_matrix_matches_pair_counts():
    ds = five_item_fixture()
    P = baseline_fot(ds).matrix()
    pairs = Counter(p for seq in fixture_train_symbols() for p in zip(seq, seq[1:]))
    for a in range(5):
        out = sum(c for (x, _), c in pairs.items() if x == a)
        for b in range(5):
            assert P[a, b] == (pairs[(a, b)] / out if out else 0.0)
        assert abs(P[a].sum() - 1) < 1e-9
    assert P[0, 1] == pytest.approx(2 / 3) and P[2, 3] == pytest.approx(1 / 3) and P[4, 0] == 1.0
    # the validation action 3 -> 1 is not a training pair
    assert P[3, 1] == 0.0


def test_fot_examples():
    gp = GlobalPop([1, 1, 1])
    fot = FirstOrderTransitions(3, gp)
    fot.add_sequence([0, 1, 0, 1])
    assert fot.ranked_list(0).top(1) == [1]
    assert fot.ranked_list(2).items.tolist() == gp.order.tolist()


def test_seq_pop_examples():
    gp = GlobalPop([0, 0, 5, 0])
    sp = SeqPop(gp)
    assert sp.ranked_list([0, 0, 0, 1]).top(2) == [0, 1]
    assert sp.ranked_list([3]).items.tolist() == [3, 2, 0, 1]
    # frequency tie goes to the more recent item
    assert sp.ranked_list([1, 0]).top(2) == [0, 1]


def seq_pop_oracle(prefix, counts):
    freq = Counter(prefix)
    last = {s: i for i, s in enumerate(prefix)}
    gp = sorted(range(len(counts)), key=lambda v: (-counts[v], v))
    seen = sorted(freq, key=lambda s: (-freq[s], -last[s], gp.index(s)))
    return seen + [v for v in gp if v not in freq]


def test_seq_pop_matches_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 12))
        counts = rng.integers(0, 4, size=n)
        prefix = rng.integers(0, n, size=int(rng.integers(1, 15))).tolist()
        sp = SeqPop(GlobalPop(counts))
        got = sp.ranked_list(prefix).items.tolist()
        assert got == seq_pop_oracle(prefix, counts)
        for t in range(n):
            assert sp.rank_of(prefix, t) == got.index(t) + 1


def test_fixture_baseline_ranks():
    ds = five_item_fixture()
    # test targets: u0 item 2 after 1, u1 item 3 after 4, u2 item 1 after 1, item 0 after 1
    assert evaluate_baseline("fot", ds).item_ranks.tolist() == [1, 4, 3, 2]
    assert evaluate_baseline("global_pop", ds).item_ranks.tolist() == [3, 4, 1, 2]
    assert evaluate_baseline("seq_pop", ds).item_ranks.tolist() == [4, 5, 1, 2]
    fot = evaluate_baseline("fot", ds, item_ks=(1, 100))
    assert fot.metrics()["item_recall@1"] == 0.25
    assert fot.metrics()["item_mrr@100"] == pytest.approx((1 + 1 / 4 + 1 / 3 + 1 / 2) / 4)


def test_baselines_are_total_orders():
    ds = generate_synthetic(10, 4, 5, 30, 3, 0)
    gp = GlobalPop.from_dataset(ds)
    fot = FirstOrderTransitions.from_dataset(ds)
    sp = SeqPop(gp)
    lists = [gp.ranked_list()] + [fot.ranked_list(v) for v in range(ds.num_items)]
    lists += [sp.ranked_list([a.item for a in seq[:10]]) for seq in ds.sequences]
    for rl in lists:
        assert sorted(rl.items.tolist()) == list(range(ds.num_items))
    for v in range(ds.num_items):
        row = fot.probabilities(v)
        if row:
            assert abs(sum(row.values()) - 1) < 1e-9
        rl = fot.ranked_list(v)
        for t in range(ds.num_items):
            assert fot.rank_of(v, t) == rl.rank_of(t)


@pytest.mark.parametrize("name", BASELINES)
def test_every_baseline_reports(name):
    ds = five_item_fixture()
    rep = evaluate_baseline(name, ds)
    assert rep.n_targets == 4
    assert all(0 <= v <= 1 for v in rep.metrics().values())
    assert (rep.cate_ranks is not None) == name.endswith("_cate")
    with pytest.raises(ValueError):
        evaluate_baseline("markov", ds)


# ---------------------------------------------------------------- reports and model evaluation

def test_decomposition_counts():
    d = decompose([1, 150, 3, 500], [1, 1, 9, 9], 100, 3)
    assert d == {"targets": 4, "cate_correct": 2, "item_correct": 2, "both_correct": 1, "item_only_correct": 1}


@given(st.lists(st.tuples(st.integers(1, 300), st.integers(1, 6)), min_size=1, max_size=60))
def test_decomposition_total_probability(pairs):
    item, cate = zip(*pairs)
    d = decompose(item, cate)
    rep = EvalReport("m", "test", len(pairs), np.array(item), np.array(cate), decomposition=d)
    m = rep.metrics()
    p_cate = d["cate_correct"] / len(pairs)
    total = p_cate * m["item_correct_given_cate_correct"] + (1 - p_cate) * m["item_correct_given_cate_wrong"]
    assert abs(total - m["item_correct_rate"]) < 1e-9
    assert d["both_correct"] + d["item_only_correct"] == d["item_correct"]
    assert all(0 <= v <= 1 for v in m.values())


def test_untrained_model_is_near_chance():
    ds = generate_synthetic(120, 10, 100, 60, 5, 0)
    assert ds.num_items == 1000
    hyper = HyperParams(M=5, T=5, k=2, Z=8, dropout=0.0, d_e=16, d_c=8, d_s=16, d_l=16)
    params = ModelParams.init(hyper, ds.num_items, ds.num_cates, np.random.default_rng(0), dtype=np.float32)
    rep = evaluate_model(params, ds, "test", hyper, item_ks=(100,))
    assert rep.n_targets > 500
    assert abs(rep.recall(100) - 0.1) <= 0.03


def _trained_like(seed=0, variant="full"):
    ds = generate_synthetic(8, 3, 4, 30, 3, 0)
    hyper = HyperParams(M=3, T=3, k=2, Z=4, dropout=0.0, d_e=4, d_c=3, d_s=4, d_l=4, variant=variant)
    return ds, hyper, ModelParams.init(hyper, ds.num_items, ds.num_cates, np.random.default_rng(seed))


def test_evaluate_model_report(tmp_path):
    ds, hyper, params = _trained_like()
    rep = evaluate_model(params, ds, "test", hyper, item_ks=(1, 5, 100))
    d = rep.decomposition
    assert d["targets"] == rep.n_targets == len(rep.item_ranks)
    assert d["cate_correct"] <= d["targets"]
    assert set(rep.metrics()) >= {"item_recall@1", "item_mrr@5", "cate_recall@3", "item_correct_rate"}
    rep.write(tmp_path / "r.txt")
    kv = read_report(tmp_path / "r.txt")
    assert kv["n_targets"] == str(rep.n_targets)
    assert float(kv["item_recall@5"]) == pytest.approx(rep.recall(5), abs=1e-6)
    table = format_table([rep, evaluate_baseline("fot", ds)])
    assert table.splitlines()[0].split()[:2] == ["name", "targets"] and len(table.splitlines()) == 3


def test_evaluate_model_rejects_mismatched_vocab():
    ds, hyper, _ = _trained_like()
    wrong = ModelParams.init(hyper, ds.num_items + 1, ds.num_cates, np.random.default_rng(0))
    with pytest.raises(EvalError):
        evaluate_model(wrong, ds, "test", hyper)


def test_memorised_ceiling():
    """Scores that always put the truth first give perfect metrics."""
    ranks = np.ones(20, dtype=int)
    rep = EvalReport("oracle", "test", 20, ranks, ranks, item_ks=(1, 100), decomposition=decompose(ranks, ranks))
    assert rep.recall(1) == 1.0 and rep.mrr(100) == 1.0


def test_run_ablation():
    ds, hyper, params = _trained_like()
    short = run_ablation("short", params, ds, "test", hyper)
    direct = evaluate_model(params, ds, "test", hyper, ablate="short")
    assert short.name == "GatedLongRec_Short"
    np.testing.assert_array_equal(short.item_ranks, direct.item_ranks)
    ds2, h_long, p_long = _trained_like(variant="long")
    long_rep = run_ablation("long", p_long, ds2, "test", h_long)
    np.testing.assert_array_equal(long_rep.item_ranks, evaluate_model(p_long, ds2, "test", h_long).item_ranks)
    with pytest.raises(EvalError):
        run_ablation("short", p_long, ds2, "test", h_long)
    with pytest.raises(ValueError):
        run_ablation("both", params, ds, "test", hyper)


def test_long_ablation_ignores_recent_items():
    from gatedlongrec.data import make_examples
    ds, hyper, params = _trained_like()
    by_cate = {}
    for seq in ds.sequences:
        for a in seq:
            by_cate.setdefault(a.category, set()).add(a.item)
    swap = {c: sorted(v) for c, v in by_cate.items()}
    examples = make_examples(ds, "test", hyper.M, hyper.T)
    # same categories, different items: only the short-term branch can notice
    other = [replace(e, recent=[replace(a, item=swap[a.category][(swap[a.category].index(a.item) + 1)
                                                                  % len(swap[a.category])])
                                for a in e.recent]) for e in examples]
    assert any(e.recent != o.recent for e, o in zip(examples, other))
    a = evaluate_model(params, ds, "test", hyper, ablate="long", examples=examples)
    b = evaluate_model(params, ds, "test", hyper, ablate="long", examples=other)
    np.testing.assert_array_equal(a.item_ranks, b.item_ranks)
    c = evaluate_model(params, ds, "test", hyper, examples=other)
    assert not np.array_equal(evaluate_model(params, ds, "test", hyper, examples=examples).item_ranks, c.item_ranks)
