"""Shared builders for the test-suite."""

from dataclasses import replace

import numpy as np

from gatedlongrec import numerics as nx
from gatedlongrec.data import Action, Dataset, NegativeSampler, generate_synthetic, make_examples
from gatedlongrec.model import HyperParams, ModelParams, collate, forward_batch
from gatedlongrec.training import category_loss, item_loss, joint_loss

TOY_HYPER = HyperParams(M=3, T=3, k=2, Z=3, dropout=0.0, d_e=4, d_c=3, d_s=4, d_l=4)


def toy_dataset(seed, num_users=4, num_cates=3, items_per_cate=2, seq_len=14):
    return generate_synthetic(num_users, num_cates, items_per_cate, seq_len, 3, seed)


def toy_joint_loss(seed, lam=0.5, hyper=TOY_HYPER, batch_size=4, variant="full", dtype=np.float64):
    """Random toy instance (|V|=6, |C|=3, dims <= 4).

    Returns ``(loss_fn, params)`` where ``loss_fn`` rebuilds the joint loss from
    the current parameter values.
    """
    rng = np.random.default_rng(seed)
    ds = toy_dataset(rng)
    examples = make_examples(ds, "train", hyper.M, hyper.T)
    h = replace(hyper, variant=variant)
    params = ModelParams.init(h, ds.num_items, ds.num_cates, rng, dtype=dtype)
    chosen = rng.choice(len(examples), batch_size, replace=False)
    batch = collate([examples[i] for i in chosen], h.M, h.T, h.k)
    sampler = NegativeSampler(ds.item_counts, h.Z)
    cands = np.concatenate([batch.target_items[:, None], sampler.sample_batch(batch.target_items, rng)], axis=1)

    def loss():
        out = forward_batch(params, h, batch, cands)
        return joint_loss(item_loss(out.mixed, 0), category_loss(out.cate_dist, batch.target_cates), lam)

    return loss, params


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def grad_of(loss_fn, tensors):
    nx.backward(loss_fn())
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


# Five items, three categories, three users. Timestamps below 100 are train,
# [100, 200) valid and [200, 300) test.
FIXTURE_CATE = {0: 0, 1: 0, 2: 1, 3: 1, 4: 2}
FIXTURE_SEQUENCES = {
    "u0": [(0, 10), (1, 11), (0, 12), (2, 13), (3, 14), (1, 150), (2, 250)],
    "u1": [(1, 20), (2, 21), (1, 22), (2, 23), (4, 24), (3, 260)],
    "u2": [(3, 30), (4, 31), (0, 32), (1, 33), (1, 270), (0, 271)],
}


def five_item_fixture() -> Dataset:
    users = sorted(FIXTURE_SEQUENCES)
    sequences = [[Action(v, FIXTURE_CATE[v], t) for v, t in FIXTURE_SEQUENCES[u]] for u in users]
    train = [a for seq in sequences for a in seq if a.timestamp < 100]
    item_counts = np.bincount([a.item for a in train], minlength=5)
    cate_counts = np.bincount([a.category for a in train], minlength=3)
    return Dataset(users, sequences, [f"i{v}" for v in range(5)], [f"c{c}" for c in range(3)],
                   item_counts, cate_counts, None, (100, 200, 300))


def brute_force_gate(h, E, cands, k):
    cands = sorted(set(cands))
    if not cands:
        return [(None, 1.0)]
    scores = np.array([float(np.dot(h, E[:, c])) for c in cands])
    alpha = np.exp(scores - scores.max())
    alpha /= alpha.sum()
    ranked = sorted(range(len(cands)), key=lambda i: (-alpha[i], cands[i]))[:k]
    total = sum(alpha[i] for i in ranked)
    return [(cands[i], alpha[i] / total) for i in ranked]


def sort_oracle(scores, truth):
    # stable sort with the truth placed after every equal score
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i == truth))
    return order.index(truth) + 1
