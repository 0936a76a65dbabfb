"""Acceptance criteria 1-10, one test per criterion.

A summary line per criterion is printed at the end of the run. Training
criteria use dropout 0, embedding and hidden width 32 and lr 0.01 so that the
desk-scale corpora converge in minutes.
"""

import re
import time
from collections import Counter

import numpy as np
import pytest

from gatedlongrec import numerics as nx
from gatedlongrec.cli import main
from gatedlongrec.data import generate_synthetic, make_examples
from gatedlongrec.evaluation import (FirstOrderTransitions, GlobalPop, SeqPop, evaluate_baseline, evaluate_model,
                                     mrr_at_k, rank_full_catalog, recall_at_k)
from gatedlongrec.model import HyperParams, ModelParams, forward, gate_top_k
from gatedlongrec.training import TrainConfig, TrainState, early_stop_check, fit, lambda_schedule_update

from helpers import (FIXTURE_CATE, FIXTURE_SEQUENCES, brute_force_gate, five_item_fixture, sort_oracle,
                     toy_joint_loss)


# ---------------------------------------------------------------- 1

@pytest.mark.criterion(1, "joint-loss gradient matches central differences on toy dims")
def test_gradient_suite(record):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        loss, params = toy_joint_loss(1000 + seed, dtype=np.longdouble)
        named = params.named()
        assert named["E_item"].shape[1] <= 8 and named["E_cate"].shape[1] <= 4
        assert max(max(t.shape) for k, t in named.items() if not k.startswith("E_")) <= 8
        worst = max(worst, nx.gradient_check(loss, list(named.values()), eps=1e-5, max_coords=None))
    elapsed = time.perf_counter() - start
    record(f"max relative error {worst:.2e} over 50 instances, every coordinate, {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 60


# ---------------------------------------------------------------- 2

@pytest.mark.criterion(2, "category, conditional and mixed distributions sum to one")
def test_normalisation_suite(record):
    rng = np.random.default_rng(2)
    ds = generate_synthetic(20, 5, 6, 40, 4, 2)
    examples = make_examples(ds, "train", 4, 4)
    worst = 0.0
    for trial in range(1000):
        hyper = HyperParams(M=4, T=4, k=int(rng.integers(1, 5)), Z=8, dropout=float(rng.choice([0.0, 0.3])),
                            d_e=6, d_c=4, d_s=5, d_l=5)
        params = ModelParams.init(hyper, ds.num_items, ds.num_cates, rng)
        ex = examples[int(rng.integers(len(examples)))]
        if trial % 2:
            out = forward(params, hyper, ex, rng.integers(0, ds.num_items, hyper.Z), mode="train", rng=rng)
        else:
            out = forward(params, hyper, ex)
        sums = [out.cate_dist.sum(), out.mixed_dist.sum()] + [c.sum() for _, _, c in out.gated]
        worst = max(worst, max(abs(s - 1.0) for s in sums))
    record(f"max |sum - 1| = {worst:.1e} over 1000 passes")
    assert worst <= 1e-6


# ---------------------------------------------------------------- 3

@pytest.mark.criterion(3, "top-k gating equals brute-force argmax-k")
def test_gating_oracle(record):
    rng = np.random.default_rng(3)
    ties = 0
    for _ in range(1000):
        C = int(rng.integers(1, 10))
        E = rng.normal(size=(4, C))
        if rng.random() < 0.4:
            E[:, rng.integers(C, size=max(1, C // 2))] = E[:, :1]
            ties += 1
        h = rng.normal(size=4)
        cands = rng.choice(C, size=int(rng.integers(0, C + 1)), replace=False).tolist()
        k = int(rng.integers(1, 5))
        got, want = gate_top_k(h, E, cands, k), brute_force_gate(h, E, cands, k)
        assert [c for c, _ in got] == [c for c, _ in want]
        np.testing.assert_allclose([w for _, w in got], [w for _, w in want], rtol=0, atol=1e-12)
    record(f"1000 instances, {ties} with duplicated category embeddings")


# ---------------------------------------------------------------- 4

@pytest.mark.criterion(4, "Recall@K and MRR@K equal a sort-based oracle")
def test_metric_oracle(record):
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        scores = rng.integers(0, 10, size=n).astype(float) if rng.random() < 0.5 else rng.normal(size=n)
        truths = rng.integers(0, n, size=int(rng.integers(1, 8)))
        ranks = [rank_full_catalog(scores, t) for t in truths]
        oracle = [sort_oracle(list(scores), int(t)) for t in truths]
        assert ranks == oracle
        for K in (1, 3, 10, 100):
            assert recall_at_k(ranks, K) == sum(r <= K for r in oracle) / len(oracle)
            assert mrr_at_k(ranks, K) == sum(1.0 / r if r <= K else 0.0 for r in oracle) / len(oracle)
    record("1000 score vectors, exact equality")


# ---------------------------------------------------------------- 5

@pytest.mark.criterion(5, "baselines match count oracles on the 5-item fixture")
def test_baseline_oracle(record):
    ds = five_item_fixture()
    for kind, symbol in (("item", lambda v: v), ("cate", lambda v: FIXTURE_CATE[v])):
        train = [[symbol(v) for v, t in FIXTURE_SEQUENCES[u] if t < 100] for u in sorted(FIXTURE_SEQUENCES)]
        n = 5 if kind == "item" else 3
        pairs = Counter(p for seq in train for p in zip(seq, seq[1:]))
        P = FirstOrderTransitions.from_dataset(ds, kind).matrix()
        for a in range(n):
            out = sum(c for (x, _), c in pairs.items() if x == a)
            np.testing.assert_array_equal(P[a], [pairs[(a, b)] / out if out else 0.0 for b in range(n)])
            if out:
                assert abs(P[a].sum() - 1.0) <= 1e-9

        counts = Counter(s for seq in train for s in seq)
        gp_oracle = sorted(range(n), key=lambda s: (-counts[s], s))
        gp = GlobalPop.from_dataset(ds, kind)
        assert gp.order.tolist() == gp_oracle

        seq_ranks, gp_ranks = [], []
        for u in sorted(FIXTURE_SEQUENCES):
            full = [symbol(v) for v, _ in FIXTURE_SEQUENCES[u]]
            for pos, (_, t) in enumerate(FIXTURE_SEQUENCES[u]):
                if 200 <= t < 300:
                    prefix, target = full[:pos], full[pos]
                    freq = Counter(prefix)
                    last = {s: i for i, s in enumerate(prefix)}
                    seen = sorted(freq, key=lambda s: (-freq[s], -last[s], gp_oracle.index(s)))
                    order = seen + [s for s in gp_oracle if s not in freq]
                    seq_ranks.append(order.index(target) + 1)
                    gp_ranks.append(gp_oracle.index(target) + 1)
                    assert SeqPop(gp).ranked_list(prefix).items.tolist() == order
        suffix = "" if kind == "item" else "_cate"
        field = "item_ranks" if kind == "item" else "cate_ranks"
        assert getattr(evaluate_baseline("seq_pop" + suffix, ds), field).tolist() == seq_ranks
        assert getattr(evaluate_baseline("global_pop" + suffix, ds), field).tolist() == gp_ranks
    record("FOT matrix, GlobalPop order and SeqPop ranks for items and categories")


# ---------------------------------------------------------------- 6

@pytest.mark.slow
@pytest.mark.criterion(6, "overfit 50 sequences to training Recall@1 >= 0.95 within 200 epochs")
def test_overfit(record):
    start = time.perf_counter()
    ds = generate_synthetic(50, 5, 20, 100, 5, 0)
    assert ds.num_items == 100 and ds.num_cates == 5 and len(ds.sequences) == 50
    hyper = HyperParams(M=5, T=5, k=2, Z=32, dropout=0.0, d_e=32, d_c=32, d_s=32, d_l=32)
    train = make_examples(ds, "train", 5, 5)
    params = ModelParams.init(hyper, ds.num_items, ds.num_cates, np.random.default_rng(1), dtype=np.float32)
    config = TrainConfig(learning_rate=0.01, batch_size=64, max_epochs=200, patience_stop=200)
    best = {"recall": 0.0, "epoch": 0}

    def training_recall(state, rec):
        r1 = evaluate_model(state.params, ds, "train", hyper, item_ks=(1,), examples=train).recall(1)
        if r1 > best["recall"]:
            best.update(recall=r1, epoch=rec["epoch"])
        return r1 >= 0.95

    result = fit(params, hyper, config, train, train[:500], ds.item_counts, on_epoch=training_recall)
    elapsed = time.perf_counter() - start
    record(f"training Recall@1 {best['recall']:.3f} at epoch {best['epoch']}, "
           f"{len(train)} targets, {elapsed:.0f}s")
    assert result.stop_reason == "callback" and best["recall"] >= 0.95
    assert len(result.history) <= 200
    assert elapsed < 600


# ---------------------------------------------------------------- 7, 8

def _train_and_test(ds, hyper, epochs, seed=1):
    train = make_examples(ds, "train", hyper.M, hyper.T)
    valid = make_examples(ds, "valid", hyper.M, hyper.T)
    params = ModelParams.init(hyper, ds.num_items, ds.num_cates, np.random.default_rng(seed), dtype=np.float32)
    config = TrainConfig(learning_rate=0.01, batch_size=64, max_epochs=epochs)
    result = fit(params, hyper, config, train, valid, ds.item_counts)
    return evaluate_model(result.best_params, ds, "test", hyper, item_ks=(1, 100)).recall(1)


@pytest.mark.slow
@pytest.mark.criterion(7, "full model beats the Short ablation by >= 0.20 test Recall@1")
def test_mechanism(record):
    start = time.perf_counter()
    ds = generate_synthetic(200, 5, 40, 120, 10, 0)
    base = dict(M=10, T=20, k=3, Z=32, dropout=0.0, d_e=32, d_c=32, d_s=32, d_l=32)
    full = _train_and_test(ds, HyperParams(**base), 6)
    short = _train_and_test(ds, HyperParams(**base, variant="short"), 6)
    elapsed = time.perf_counter() - start
    record(f"full {full:.3f} vs short {short:.3f}, gap {full - short:.3f}, {elapsed:.0f}s")
    assert full - short >= 0.20
    assert elapsed < 1800


@pytest.mark.slow
@pytest.mark.criterion(8, "k=1 gating scores below k=2 under intent noise")
def test_k_sweep(record):
    ds = generate_synthetic(200, 5, 40, 120, 10, 0, intent_noise=0.3)
    base = dict(M=10, T=20, Z=32, dropout=0.0, d_e=32, d_c=32, d_s=32, d_l=32)
    r = {k: _train_and_test(ds, HyperParams(**base, k=k), 5) for k in (1, 2)}
    record(f"test Recall@1 k=1 {r[1]:.3f}, k=2 {r[2]:.3f}")
    assert r[1] < r[2]


# ---------------------------------------------------------------- 9

class _Params:
    def named(self):
        return {}


def _state(**cfg):
    config = TrainConfig(**cfg)
    return TrainState.create(_Params(), config), config


def _lambdas(losses, **cfg):
    state, config = _state(**cfg)
    out = []
    for epoch, loss in enumerate(losses, 1):
        state.epoch = epoch
        out.append(lambda_schedule_update(state, loss, config).lam)
    return out


def _stop_epoch(losses, **cfg):
    state, config = _state(**cfg)
    for epoch, loss in enumerate(losses, 1):
        state.epoch = epoch
        stop, reason, _ = early_stop_check(state, loss, config)
        if stop:
            return epoch, reason
    return None, None


@pytest.mark.criterion(9, "lambda schedule and early stopping scenarios")
def test_schedules(record):
    assert _lambdas([5.0, 4.0, 3.0, 2.0, 1.0]) == [0.5] * 5
    assert _lambdas([2.0, 2.0], patience_lambda=1) == [0.5, 1.0]
    assert _lambdas([2.0, 3.0, 1.0, 0.5, 0.1], patience_lambda=1) == [0.5, 1.0, 1.0, 1.0, 1.0]
    assert _lambdas([3.0, 3.0, 3.0, 3.0, 1.0]) == [0.5, 0.5, 0.5, 1.0, 1.0]

    assert _stop_epoch([1.0] + [1.0] * 10) == (11, "patience")
    assert _stop_epoch([1.0] + [1.0] * 9) == (None, None)
    assert _stop_epoch([1.0] + [2.0] * 8 + [0.5] + [2.0] * 9) == (None, None)
    assert _stop_epoch([1.0] + [2.0] * 8 + [0.5] + [2.0] * 10) == (20, "patience")
    assert _stop_epoch([3.0, 2.0, 1.0], max_epochs=3) == (3, "max_epochs")

    # inside the loop: lr 0 keeps every validation loss equal
    ds = generate_synthetic(10, 3, 3, 30, 3, 9)
    hyper = HyperParams(M=3, T=3, k=2, Z=4, dropout=0.0, d_e=4, d_c=3, d_s=4, d_l=4)
    train, valid = make_examples(ds, "train", 3, 3), make_examples(ds, "valid", 3, 3)
    params = ModelParams.init(hyper, ds.num_items, ds.num_cates, np.random.default_rng(0))
    result = fit(params, hyper, TrainConfig(learning_rate=0.0, patience_lambda=3), train, valid, ds.item_counts)
    lams = [h["lambda"] for h in result.history]
    # epoch 1 sets the minimum, epochs 2-4 fail to beat it, so epoch 5 trains with lambda 1
    assert lams == [0.5] * 4 + [1.0] * (len(lams) - 4)
    # the switch restarts the minimum at epoch 5, then ten epochs without a new one end the run
    assert result.stop_reason == "patience" and len(lams) == 4 + 1 + 10
    record(f"7 unit scenarios; loop switched once after epoch 4 and stopped at epoch {len(lams)}")


# ---------------------------------------------------------------- 10

@pytest.mark.criterion(10, "identical single-threaded runs give bit-identical checkpoints and logs")
def test_determinism(tmp_path, record):
    data = tmp_path / "syn"
    assert main(["synth", "--out", str(data), "--users", "20", "--cates", "4", "--items-per-cate", "5",
                 "--seq-len", "40", "--M", "4"]) == 0
    args = ["--set", "M=4", "--set", "T=4", "--set", "k=2", "--set", "Z=8", "--set", "d_e=16", "--set", "d_c=8",
            "--set", "d_s=16", "--set", "d_l=16", "--set", "dropout=0.2", "--lr", "0.01", "--epochs", "4",
            "--seed", "11", "--threads", "1"]
    for run in ("a", "b"):
        assert main(["train", "--dataset", str(data), "--out", str(tmp_path / run), *args]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()
    strip = lambda p: re.sub(r"seconds=\S+", "seconds=", p.read_text())
    log_a = strip(a / "train.log")
    assert log_a == strip(b / "train.log") and log_a.count("\n") == 4
    assert (a / "config.txt").read_text().replace(str(a), "") == (b / "config.txt").read_text().replace(str(b), "")
    record("checkpoints byte-equal; logs equal apart from wall-clock seconds")


# ---------------------------------------------------------------- 11

@pytest.mark.criterion(11, "Taobao Recall@100 full above Short (stretch)")
def test_taobao_stretch():
    pytest.skip("optional stretch: needs the public Taobao log and a multi-hour run")
