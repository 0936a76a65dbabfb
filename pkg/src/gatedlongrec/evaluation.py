"""Ranking metrics, popularity / Markov baselines, ablations and the
category-correctness breakdown."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset, make_examples
from .model import HyperParams, ModelParams, collate, forward_batch

ITEM_K = 100
CATE_K = 3
BASELINES = ("global_pop", "global_pop_cate", "seq_pop", "seq_pop_cate", "fot", "fot_cate")


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------- metrics

def _ranks(ranks) -> np.ndarray:
    # None / nan mean "not ranked" and count as a miss
    out = np.array([np.nan if r is None else r for r in np.atleast_1d(ranks)], dtype=np.float64)
    if np.any(out[~np.isnan(out)] < 1):
        raise ValueError("ranks start at 1")
    return out


def recall_at_k(ranks, K: int) -> float:
    r = _ranks(ranks)
    if r.size == 0:
        return 0.0
    return float(np.mean(np.where(np.isnan(r), False, r <= K)))


def mrr_at_k(ranks, K: int) -> float:
    r = _ranks(ranks)
    if r.size == 0:
        return 0.0
    hit = ~np.isnan(r) & (r <= K)
    rr = np.zeros_like(r)
    rr[hit] = 1.0 / r[hit]
    return float(np.mean(rr))


def rank_full_catalog(scores, truth: int) -> int:
    """1-based rank of ``truth``; items tied with it count ahead of it."""
    scores = np.asarray(scores)
    return int(np.count_nonzero(scores >= scores[truth]))


def ranks_from_scores(scores: np.ndarray, truths) -> np.ndarray:
    """Row-wise :func:`rank_full_catalog`."""
    scores = np.asarray(scores)
    truths = np.asarray(truths)
    target = scores[np.arange(scores.shape[0]), truths]
    return np.count_nonzero(scores >= target[:, None], axis=1)


@dataclass
class RankedList:
    items: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.items.shape != self.scores.shape:
            raise ValueError("items and scores differ in length")
        if np.any(np.diff(self.scores) > 0):
            raise ValueError("scores must be non-increasing")
        if len(np.unique(self.items)) != len(self.items):
            raise ValueError("ranked items must be distinct")

    def __len__(self):
        return len(self.items)

    def rank_of(self, item: int) -> int | None:
        hit = np.flatnonzero(self.items == item)
        return int(hit[0]) + 1 if hit.size else None

    def top(self, n: int) -> list[int]:
        return self.items[:n].tolist()


# ---------------------------------------------------------------- baselines

def _symbols(seq, kind: str) -> list[int]:
    return [a.item for a in seq] if kind == "item" else [a.category for a in seq]


def _vocab(dataset: Dataset, kind: str) -> int:
    return dataset.num_items if kind == "item" else dataset.num_cates


def _train_counts(dataset: Dataset, kind: str) -> np.ndarray:
    return np.asarray(dataset.item_counts if kind == "item" else dataset.cate_counts, dtype=np.int64)


def _backoff_order(keys: dict[int, tuple], gp_order: np.ndarray) -> np.ndarray:
    """Symbols carrying a key, sorted by it, followed by the rest in popularity order."""
    head = sorted(keys, key=lambda s: keys[s])
    seen = np.zeros(len(gp_order), dtype=bool)
    seen[head] = True
    return np.concatenate([np.array(head, dtype=np.int64), gp_order[~seen[gp_order]]])


def _backoff_rank(keys: dict[int, tuple], target: int, gp_rank: np.ndarray) -> int:
    if target in keys:
        key = keys[target]
        return 1 + sum(1 for k in keys.values() if k < key)
    ahead_seen = sum(1 for s in keys if gp_rank[s] < gp_rank[target])
    return len(keys) + 1 + int(gp_rank[target]) - ahead_seen


class GlobalPop:
    """Static ranking by training-split popularity; ties go to the lower index."""

    def __init__(self, counts):
        self.counts = np.asarray(counts, dtype=np.int64)
        self.order = np.lexsort((np.arange(len(self.counts)), -self.counts))
        self.rank = np.empty(len(self.counts), dtype=np.int64)
        self.rank[self.order] = np.arange(len(self.counts))

    @classmethod
    def from_dataset(cls, dataset: Dataset, kind: str = "item") -> "GlobalPop":
        return cls(_train_counts(dataset, kind))

    def ranked_list(self) -> RankedList:
        # scores encode the order strictly so that the list is a total order
        n = len(self.order)
        return RankedList(self.order, np.arange(n, 0, -1, dtype=np.float64))

    def rank_of(self, target: int) -> int:
        return int(self.rank[target]) + 1


def baseline_global_pop(dataset: Dataset) -> RankedList:
    return GlobalPop.from_dataset(dataset, "item").ranked_list()


def baseline_global_pop_cate(dataset: Dataset) -> RankedList:
    return GlobalPop.from_dataset(dataset, "cate").ranked_list()


class SeqPop:
    """Popularity within the user's own prefix.

    Ties on frequency go to the more recent symbol, then to global
    popularity; symbols absent from the prefix follow in global order.
    """

    def __init__(self, global_pop: GlobalPop):
        self.gp = global_pop

    def keys(self, prefix: Sequence[int]) -> dict[int, tuple]:
        counts = Counter(prefix)
        last = {s: i for i, s in enumerate(prefix)}
        return {s: (-counts[s], -last[s], int(self.gp.rank[s])) for s in counts}

    def ranked_list(self, prefix: Sequence[int]) -> RankedList:
        order = _backoff_order(self.keys(prefix), self.gp.order)
        return RankedList(order, np.arange(len(order), 0, -1, dtype=np.float64))

    def rank_of(self, prefix: Sequence[int], target: int) -> int:
        return _backoff_rank(self.keys(prefix), target, self.gp.rank)


def baseline_seq_pop(prefix: Sequence[int], global_pop: GlobalPop) -> RankedList:
    return SeqPop(global_pop).ranked_list(prefix)


baseline_seq_pop_cate = baseline_seq_pop


class FirstOrderTransitions:
    """Maximum-likelihood bigram model over consecutive training actions."""

    def __init__(self, num_symbols: int, global_pop: GlobalPop):
        self.n = num_symbols
        self.gp = global_pop
        self.rows: dict[int, Counter] = defaultdict(Counter)

    @classmethod
    def from_dataset(cls, dataset: Dataset, kind: str = "item") -> "FirstOrderTransitions":
        model = cls(_vocab(dataset, kind), GlobalPop.from_dataset(dataset, kind))
        for seq in dataset.sequences:
            train = [a for a in seq if dataset.split_of(a.timestamp) == "train"]
            model.add_sequence(_symbols(train, kind))
        return model

    def add_sequence(self, symbols: Sequence[int]) -> None:
        for a, b in zip(symbols[:-1], symbols[1:]):
            self.rows[a][b] += 1

    def probabilities(self, prev: int) -> dict[int, float]:
        row = self.rows.get(prev)
        if not row:
            return {}
        total = sum(row.values())
        return {s: c / total for s, c in row.items()}

    def matrix(self) -> np.ndarray:
        P = np.zeros((self.n, self.n))
        for a, row in self.rows.items():
            total = sum(row.values())
            for b, c in row.items():
                P[a, b] = c / total
        return P

    def keys(self, prev: int) -> dict[int, tuple]:
        row = self.rows.get(prev) or {}
        total = sum(row.values())
        return {s: (-c / total, int(self.gp.rank[s])) for s, c in row.items()}

    def ranked_list(self, prev: int) -> RankedList:
        order = _backoff_order(self.keys(prev), self.gp.order)
        return RankedList(order, np.arange(len(order), 0, -1, dtype=np.float64))

    def rank_of(self, prev: int, target: int) -> int:
        return _backoff_rank(self.keys(prev), target, self.gp.rank)


def baseline_fot(dataset: Dataset) -> FirstOrderTransitions:
    return FirstOrderTransitions.from_dataset(dataset, "item")


def baseline_fot_cate(dataset: Dataset) -> FirstOrderTransitions:
    return FirstOrderTransitions.from_dataset(dataset, "cate")


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    name: str
    split: str
    n_targets: int
    item_ranks: np.ndarray | None = None
    cate_ranks: np.ndarray | None = None
    item_ks: tuple[int, ...] = (ITEM_K,)
    cate_k: int = CATE_K
    decomposition: dict[str, int] | None = None
    extra: dict[str, str] = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        out: dict[str, float] = {}
        if self.item_ranks is not None:
            for K in self.item_ks:
                out[f"item_recall@{K}"] = recall_at_k(self.item_ranks, K)
                out[f"item_mrr@{K}"] = mrr_at_k(self.item_ranks, K)
        if self.cate_ranks is not None:
            out[f"cate_recall@{self.cate_k}"] = recall_at_k(self.cate_ranks, self.cate_k)
            out[f"cate_mrr@{self.cate_k}"] = mrr_at_k(self.cate_ranks, self.cate_k)
        if self.decomposition is not None:
            d = self.decomposition
            out["item_correct_rate"] = d["item_correct"] / max(1, self.n_targets)
            out["item_correct_given_cate_correct"] = d["both_correct"] / max(1, d["cate_correct"])
            out["item_correct_given_cate_wrong"] = d["item_only_correct"] / max(1, self.n_targets - d["cate_correct"])
        return out

    def recall(self, K: int) -> float:
        return recall_at_k(self.item_ranks, K)

    def mrr(self, K: int) -> float:
        return mrr_at_k(self.item_ranks, K)

    def key_values(self) -> dict[str, str]:
        kv = {"name": self.name, "split": self.split, "n_targets": str(self.n_targets)}
        kv.update({k: f"{v:.6f}" for k, v in self.metrics().items()})
        if self.decomposition is not None:
            kv.update({f"count.{k}": str(v) for k, v in self.decomposition.items()})
        kv.update(self.extra)
        return kv

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(f"{k}={v}\n" for k, v in self.key_values().items()), encoding="utf-8")

    def table(self) -> str:
        return format_table([self])


def format_table(reports: Sequence[EvalReport]) -> str:
    cols = []
    for r in reports:
        for k in r.metrics():
            if k not in cols:
                cols.append(k)
    header = ["name", "targets"] + cols
    rows = [[r.name, str(r.n_targets)] + [f"{r.metrics()[c]:.4f}" if c in r.metrics() else "-" for c in cols]
            for r in reports]
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


def read_report(path) -> dict[str, str]:
    from .data import read_key_values
    return read_key_values(path)


def decompose(item_ranks, cate_ranks, item_k: int = ITEM_K, cate_k: int = CATE_K) -> dict[str, int]:
    item_ok = np.asarray(item_ranks) <= item_k
    cate_ok = np.asarray(cate_ranks) <= cate_k
    return {
        "targets": int(item_ok.size),
        "cate_correct": int(cate_ok.sum()),
        "item_correct": int(item_ok.sum()),
        "both_correct": int((item_ok & cate_ok).sum()),
        "item_only_correct": int((item_ok & ~cate_ok).sum()),
    }


# ---------------------------------------------------------------- model evaluation

def check_compatible(params: ModelParams, dataset: Dataset) -> None:
    if params.num_items != dataset.num_items or params.num_cates != dataset.num_cates:
        raise EvalError(f"checkpoint vocabulary {params.num_items} items / {params.num_cates} categories does not "
                        f"match dataset {dataset.num_items} / {dataset.num_cates}")


def score_examples(params: ModelParams, hyper: HyperParams, examples, batch_size: int = 128,
                   ablate: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Full-catalog item ranks and category ranks for each example."""
    item_ranks, cate_ranks = [], []
    for start in range(0, len(examples), batch_size):
        batch = collate(examples[start:start + batch_size], hyper.M, hyper.T, hyper.k)
        out = forward_batch(params, hyper, batch, None, train=False, ablate=ablate)
        item_ranks.append(ranks_from_scores(out.mixed.data, batch.target_items))
        cate_ranks.append(ranks_from_scores(out.cate_dist.data, batch.target_cates))
    if not item_ranks:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(item_ranks), np.concatenate(cate_ranks)


def evaluate_model(params: ModelParams, dataset: Dataset, split: str = "test", hyper: HyperParams | None = None,
                   item_ks: Iterable[int] = (ITEM_K,), name: str | None = None, batch_size: int = 128,
                   ablate: str | None = None, examples=None) -> EvalReport:
    """Rank every target of ``split`` against the whole catalog.

    ``params`` may also be a checkpoint path. A target counts as
    category-correct when its category is among the top three of the
    predicted category distribution, and item-correct when its rank is at
    most 100, whatever ``item_ks`` holds.
    """
    if isinstance(params, (str, Path)):
        from .checkpoint import load_checkpoint
        params, saved_hyper, _ = load_checkpoint(params)
        hyper = hyper or saved_hyper
    if hyper is None:
        raise EvalError("hyper-parameters are required")
    check_compatible(params, dataset)
    item_ks = tuple(item_ks)
    if examples is None:
        examples = make_examples(dataset, split, hyper.M, hyper.T)
    item_ranks, cate_ranks = score_examples(params, hyper, examples, batch_size, ablate)
    label = name or (params.variant if ablate is None else f"{params.variant}-without-{'long' if ablate == 'short' else 'short'}")
    return EvalReport(label, split, len(examples), item_ranks, cate_ranks, item_ks, CATE_K,
                      decompose(item_ranks, cate_ranks, ITEM_K, CATE_K))


def run_ablation(variant: str, params: ModelParams, dataset: Dataset, split: str = "test",
                 hyper: HyperParams | None = None, **kwargs) -> EvalReport:
    """Evaluate the ``short`` or ``long`` ablation.

    Parameters trained as that variant are evaluated directly. Full-model
    parameters are evaluated with the other branch replaced by zeros.
    """
    if variant not in ("short", "long"):
        raise ValueError("variant must be 'short' or 'long'")
    if params.variant == variant:
        return evaluate_model(params, dataset, split, hyper, name=f"GatedLongRec_{variant.capitalize()}", **kwargs)
    if params.variant != "full":
        raise EvalError(f"cannot derive the {variant} ablation from a {params.variant} model")
    return evaluate_model(params, dataset, split, hyper, name=f"GatedLongRec_{variant.capitalize()}",
                          ablate=variant, **kwargs)


# ---------------------------------------------------------------- baseline evaluation

def _targets(dataset: Dataset, split: str):
    for seq in dataset.sequences:
        for n in range(1, len(seq)):
            if dataset.split_of(seq[n].timestamp) == split:
                yield seq, n


def evaluate_baseline(name: str, dataset: Dataset, split: str = "test",
                      item_ks: Iterable[int] = (ITEM_K,)) -> EvalReport:
    """Report for one baseline row; ``*_cate`` variants fill the category metrics."""
    if name not in BASELINES:
        raise ValueError(f"unknown baseline '{name}' (choose from {', '.join(BASELINES)})")
    kind = "cate" if name.endswith("_cate") else "item"
    family = name[:-5] if kind == "cate" else name
    gp = GlobalPop.from_dataset(dataset, kind)
    fot = FirstOrderTransitions.from_dataset(dataset, kind) if family == "fot" else None
    seq_pop = SeqPop(gp)
    ranks = []
    for seq, n in _targets(dataset, split):
        symbols = _symbols(seq[: n + 1], kind)
        target = symbols[-1]
        if family == "global_pop":
            ranks.append(gp.rank_of(target))
        elif family == "seq_pop":
            ranks.append(seq_pop.rank_of(symbols[:-1], target))
        else:
            ranks.append(fot.rank_of(symbols[-2], target))
    ranks = np.asarray(ranks, dtype=np.int64)
    if kind == "item":
        return EvalReport(name, split, len(ranks), item_ranks=ranks, item_ks=tuple(item_ks))
    return EvalReport(name, split, len(ranks), cate_ranks=ranks)
