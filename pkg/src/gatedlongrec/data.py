"""Action logs, filtering, temporal splits, windowed examples and negatives.

The prepared-dataset directory layout::

    item_vocab.tsv   token<TAB>index<TAB>train_count
    cate_vocab.tsv   token<TAB>index<TAB>train_count
    sequences.tsv    user_id<TAB>v:c:t v:c:t ...
    manifest.txt     key=value lines (thresholds, split bounds, generator seed)
"""

from __future__ import annotations

import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

UNK = "UNK"
SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    """Raised for malformed inputs or degenerate corpora."""


@dataclass(frozen=True)
class RawAction:
    user: str
    item: str
    category: str
    timestamp: int
    behavior: str


@dataclass(frozen=True)
class Action:
    item: int
    category: int
    timestamp: int
    behavior: str = ""


@dataclass
class Dataset:
    users: list[str]
    sequences: list[list[Action]]
    item_tokens: list[str]
    cate_tokens: list[str]
    item_counts: np.ndarray
    cate_counts: np.ndarray
    unk_index: int | None = None
    bounds: tuple[int, int, int] | None = None  # (train_end, valid_end, test_end)
    manifest: dict[str, str] = field(default_factory=dict)

    @property
    def num_items(self) -> int:
        return len(self.item_tokens)

    @property
    def num_cates(self) -> int:
        return len(self.cate_tokens)

    def split_of(self, timestamp: int) -> str:
        if self.bounds is None:
            raise DataError("dataset has not been split")
        train_end, valid_end, test_end = self.bounds
        if timestamp < train_end:
            return "train"
        if timestamp < valid_end:
            return "valid"
        if timestamp < test_end:
            return "test"
        raise DataError(f"timestamp {timestamp} lies beyond the test range")

    def split_counts(self) -> dict[str, int]:
        counts = Counter(self.split_of(a.timestamp) for seq in self.sequences for a in seq)
        return {s: counts.get(s, 0) for s in SPLITS}

    def stats(self) -> dict[str, float]:
        n_actions = sum(len(s) for s in self.sequences)
        out = {
            "users": len(self.sequences),
            "items": self.num_items,
            "categories": self.num_cates,
            "avg_actions_per_user": n_actions / max(1, len(self.sequences)),
        }
        if self.bounds is not None:
            for name, n in self.split_counts().items():
                out[f"{name}_actions"] = n
        return out


@dataclass
class Example:
    user: int
    position: int
    target_item: int
    target_cate: int
    recent: list[Action]
    distant_by_cate: dict[int, list[Action]]


# ---------------------------------------------------------------- parsing

def _split_fields(line: str) -> list[str]:
    if "\t" in line:
        return line.split("\t")
    return line.split(",")


def parse_action_log(path, max_bad_fraction: float = 0.01) -> tuple[list[RawAction], int]:
    """Read a ``user,item,category,timestamp,behavior`` log (CSV or TSV).

    Returns the actions in file order and the number of malformed lines. A
    header line is recognised by a non-integer timestamp field on line one.
    """
    path = Path(path)
    actions: list[RawAction] = []
    bad: list[tuple[int, str]] = []
    n_lines = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            fields = [f.strip() for f in _split_fields(line)]
            if lineno == 1 and len(fields) == 5 and not _is_int(fields[3]):
                continue
            n_lines += 1
            if len(fields) != 5 or not _is_int(fields[3]) or int(fields[3]) < 0 or not all(fields[:3]):
                bad.append((lineno, line))
                continue
            actions.append(RawAction(fields[0], fields[1], fields[2], int(fields[3]), fields[4]))
    if n_lines == 0:
        log.warning("action log %s is empty", path)
    if bad and len(bad) > max_bad_fraction * n_lines:
        sample = "; ".join(f"line {n}: {text!r}" for n, text in bad[:5])
        raise DataError(f"{len(bad)} of {n_lines} lines malformed in {path} ({sample})")
    if bad:
        log.warning("%d malformed lines skipped in %s", len(bad), path)
    return actions, len(bad)


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


def restrict_window(actions: Iterable[RawAction], start: int | None, end: int | None) -> list[RawAction]:
    return [a for a in actions if (start is None or a.timestamp >= start) and (end is None or a.timestamp < end)]


# ---------------------------------------------------------------- filtering

def filter_dataset(actions: Sequence[RawAction], min_item_actions: int = 20, user_min: int = 20,
                   user_max: int = 300, min_cate_items: int = 100) -> Dataset:
    """Items with too few actions go first, then users outside the length
    band, then categories with too few surviving items are merged into UNK.

    Each step runs once in that order. The result is unsplit; training counts
    are filled in by :func:`temporal_split`.
    """
    if min(min_item_actions, user_min, user_max, min_cate_items) <= 0:
        raise DataError("filter thresholds must be positive")

    item_freq = Counter(a.item for a in actions)
    kept = [a for a in actions if item_freq[a.item] >= min_item_actions]
    user_freq = Counter(a.user for a in kept)
    kept = [a for a in kept if user_min <= user_freq[a.user] <= user_max]
    if not kept:
        raise DataError("no actions survive filtering")

    item_cate: dict[str, str] = {}
    for a in kept:
        item_cate.setdefault(a.item, a.category)
    cate_items = Counter(item_cate.values())
    merged = {c for c, n in cate_items.items() if n < min_cate_items}

    cate_tokens = [UNK]
    cate_index = {UNK: 0}
    item_tokens: list[str] = []
    item_index: dict[str, int] = {}
    user_tokens: list[str] = []
    user_index: dict[str, int] = {}
    by_user: list[list[tuple[int, int, Action]]] = []

    for order, a in enumerate(kept):
        if a.item not in item_index:
            item_index[a.item] = len(item_tokens)
            item_tokens.append(a.item)
        c = UNK if item_cate[a.item] in merged else item_cate[a.item]
        if c not in cate_index:
            cate_index[c] = len(cate_tokens)
            cate_tokens.append(c)
        if a.user not in user_index:
            user_index[a.user] = len(user_tokens)
            user_tokens.append(a.user)
            by_user.append([])
        by_user[user_index[a.user]].append(
            (a.timestamp, order, Action(item_index[a.item], cate_index[c], a.timestamp, a.behavior)))

    # stable (timestamp, log order)
    sequences = [[t[2] for t in sorted(rows, key=lambda r: (r[0], r[1]))] for rows in by_user]
    return Dataset(
        users=user_tokens,
        sequences=sequences,
        item_tokens=item_tokens,
        cate_tokens=cate_tokens,
        item_counts=np.zeros(len(item_tokens), dtype=np.int64),
        cate_counts=np.zeros(len(cate_tokens), dtype=np.int64),
        unk_index=0,
        manifest={
            "min_item_actions": str(min_item_actions),
            "user_min": str(user_min),
            "user_max": str(user_max),
            "min_cate_items": str(min_cate_items),
            "merged_categories": str(len(merged)),
        },
    )


def temporal_split(dataset: Dataset, train_end: int, valid_end: int, test_end: int) -> Dataset:
    """Mark half-open time ranges ``[., train_end)``, ``[train_end, valid_end)``
    and ``[valid_end, test_end)``. Actions at or after ``test_end`` are dropped;
    sequences are otherwise kept whole so later targets see earlier context.
    """
    if not train_end < valid_end < test_end:
        raise DataError("split bounds must satisfy train_end < valid_end < test_end")
    sequences = [[a for a in seq if a.timestamp < test_end] for seq in dataset.sequences]
    keep = [i for i, s in enumerate(sequences) if s]
    sequences = [sequences[i] for i in keep]
    users = [dataset.users[i] for i in keep]

    item_counts = np.zeros(dataset.num_items, dtype=np.int64)
    cate_counts = np.zeros(dataset.num_cates, dtype=np.int64)
    n_test = 0
    for seq in sequences:
        for a in seq:
            if a.timestamp < train_end:
                item_counts[a.item] += 1
                cate_counts[a.category] += 1
            elif a.timestamp >= valid_end:
                n_test += 1
    if item_counts.sum() == 0:
        raise DataError("training split is empty")
    if n_test == 0:
        raise DataError("test split is empty")
    manifest = dict(dataset.manifest)
    manifest.update(train_end=str(train_end), valid_end=str(valid_end), test_end=str(test_end))
    return Dataset(users, sequences, dataset.item_tokens, dataset.cate_tokens, item_counts, cate_counts,
                   dataset.unk_index, (train_end, valid_end, test_end), manifest)


# ---------------------------------------------------------------- examples

def window(sequence: Sequence[Action], position: int, M: int, T: int) -> tuple[list[Action], dict[int, list[Action]]]:
    """Recent window and per-category distant history for the action at ``position``."""
    start = max(0, position - M)
    recent = list(sequence[start:position])
    distant: dict[int, list[Action]] = defaultdict(list)
    for a in sequence[:start]:
        distant[a.category].append(a)
    return recent, {c: acts[-T:] for c, acts in distant.items()}


def make_examples(dataset: Dataset, split: str, M: int, T: int) -> list[Example]:
    if M < 1 or T < 1:
        raise ValueError("M and T must be at least 1")
    if split not in SPLITS:
        raise ValueError(f"unknown split '{split}'")
    out = []
    for u, seq in enumerate(dataset.sequences):
        for n in range(1, len(seq)):
            target = seq[n]
            if dataset.split_of(target.timestamp) != split:
                continue
            recent, distant = window(seq, n, M, T)
            out.append(Example(u, n, target.item, target.category, recent, distant))
    return out


def example_from_history(history: Sequence[tuple[int, int]], M: int, T: int) -> Example:
    """Build an inference example whose target follows ``history``."""
    if not history:
        raise DataError("history must contain at least one action")
    seq = [Action(v, c, i) for i, (v, c) in enumerate(history)]
    recent, distant = window(seq, len(seq), M, T)
    return Example(0, len(seq), -1, -1, recent, distant)


# ---------------------------------------------------------------- negatives

class NegativeSampler:
    """Draws items proportionally to their training popularity."""

    def __init__(self, counts, Z: int):
        counts = np.asarray(counts, dtype=np.float64)
        if Z < 1:
            raise ValueError("Z must be at least 1")
        if counts.size < 2 or np.count_nonzero(counts) < 2:
            raise DataError("negative sampling needs at least two items with training counts")
        self.Z = Z
        self.cdf = np.cumsum(counts) / counts.sum()
        self.cdf[-1] = 1.0

    def _draw(self, rng, shape):
        return np.searchsorted(self.cdf, rng.random(shape), side="right")

    def sample(self, positive: int, rng: np.random.Generator) -> np.ndarray:
        return self.sample_batch(np.array([positive]), rng)[0]

    def sample_batch(self, positives, rng: np.random.Generator) -> np.ndarray:
        positives = np.asarray(positives)
        out = self._draw(rng, (positives.size, self.Z))
        clash = out == positives[:, None]
        while clash.any():
            out[clash] = self._draw(rng, int(clash.sum()))
            clash = out == positives[:, None]
        return out


def sample_negatives(sampler: NegativeSampler, positive_item: int, rng: np.random.Generator) -> np.ndarray:
    return sampler.sample(positive_item, rng)


# ---------------------------------------------------------------- synthetic corpus

def generate_synthetic(num_users: int, num_cates: int, items_per_cate: int, seq_len: int, M: int,
                       rng: np.random.Generator | int, intent_noise: float = 0.0,
                       split_fractions: tuple[float, float] = (0.8, 0.9), seed: int | None = None) -> Dataset:
    """Sequences with a planted long-range rule.

    Categories advance cyclically, one step per action, so every category is
    revisited before it can drop out of an M-window. The item at position n of
    category c is ``perm_c(v)``, with ``v`` the latest item of c that lies more
    than M steps back; without such an item a uniform draw from c seeds the
    chain. The recent window therefore carries no information on which item of
    c comes next.

    ``intent_noise`` is the fraction of each category's items (lowest indices)
    that, when they are the latest action, make the user skip over the next
    category to the one after. The jump is visible in item identities but not
    in the category sequence.

    Timestamps are action positions (seconds); train/valid/test boundaries sit at
    ``split_fractions`` of ``seq_len``.
    """
    # a single category is allowed: it degenerates to one deterministic chain
    if num_cates < 1 or min(num_users, items_per_cate, seq_len, M) < 2:
        raise ValueError("sizes must be at least 2 (num_cates at least 1)")
    if not 0.0 <= intent_noise < 1.0:
        raise ValueError("intent_noise must be in [0, 1)")
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
        rng = np.random.default_rng(seed)

    perms = np.stack([rng.permutation(items_per_cate) for _ in range(num_cates)])
    n_skip = int(round(intent_noise * items_per_cate))

    sequences = []
    for _ in range(num_users):
        cats = np.empty(seq_len, dtype=np.int64)
        local = np.empty(seq_len, dtype=np.int64)
        last_seen: list[list[int]] = [[] for _ in range(num_cates)]  # positions per category
        for n in range(seq_len):
            if n == 0:
                c = int(rng.integers(num_cates))
            else:
                step = 2 if (local[n - 1] < n_skip and num_cates > 2) else 1
                c = int((cats[n - 1] + step) % num_cates)
            cats[n] = c
            pred = _last_before(last_seen[c], n - M)
            local[n] = perms[c][local[pred]] if pred is not None else int(rng.integers(items_per_cate))
            last_seen[c].append(n)
        sequences.append([Action(int(c * items_per_cate + j), int(c), int(n), "pv")
                          for n, (c, j) in enumerate(zip(cats, local))])

    num_items = num_cates * items_per_cate
    train_end = int(round(split_fractions[0] * seq_len))
    valid_end = int(round(split_fractions[1] * seq_len))
    manifest = {
        "generator": "planted_long_term",
        "num_users": str(num_users),
        "num_cates": str(num_cates),
        "items_per_cate": str(items_per_cate),
        "seq_len": str(seq_len),
        "M": str(M),
        "intent_noise": repr(float(intent_noise)),
        "seed": "none" if seed is None else str(seed),
        "permutations": ";".join(",".join(map(str, p)) for p in perms),
    }
    base = Dataset(
        users=[f"u{u}" for u in range(num_users)],
        sequences=sequences,
        item_tokens=[f"i{v}" for v in range(num_items)],
        cate_tokens=[f"c{c}" for c in range(num_cates)],
        item_counts=np.zeros(num_items, dtype=np.int64),
        cate_counts=np.zeros(num_cates, dtype=np.int64),
        manifest=manifest,
    )
    return temporal_split(base, train_end, valid_end, seq_len)


def _last_before(positions: list[int], limit: int) -> int | None:
    """Largest entry of the ascending list strictly below ``limit``."""
    for p in reversed(positions):
        if p < limit:
            return p
    return None


def planted_permutations(dataset: Dataset) -> np.ndarray:
    text = dataset.manifest["permutations"]
    return np.array([[int(x) for x in row.split(",")] for row in text.split(";")])


# ---------------------------------------------------------------- disk format

def save_dataset(dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "item_vocab.tsv").open("w", encoding="utf-8") as fh:
        for i, (tok, n) in enumerate(zip(dataset.item_tokens, dataset.item_counts)):
            fh.write(f"{tok}\t{i}\t{int(n)}\n")
    with (out / "cate_vocab.tsv").open("w", encoding="utf-8") as fh:
        for i, (tok, n) in enumerate(zip(dataset.cate_tokens, dataset.cate_counts)):
            fh.write(f"{tok}\t{i}\t{int(n)}\n")
    with (out / "sequences.tsv").open("w", encoding="utf-8") as fh:
        for user, seq in zip(dataset.users, dataset.sequences):
            fh.write(user + "\t" + " ".join(f"{a.item}:{a.category}:{a.timestamp}" for a in seq) + "\n")
    manifest = dict(dataset.manifest)
    if dataset.unk_index is not None:
        manifest["unk_index"] = str(dataset.unk_index)
    if dataset.bounds is not None:
        manifest.update(train_end=str(dataset.bounds[0]), valid_end=str(dataset.bounds[1]),
                        test_end=str(dataset.bounds[2]))
    with (out / "manifest.txt").open("w", encoding="utf-8") as fh:
        for k in sorted(manifest):
            fh.write(f"{k}={manifest[k]}\n")


def _read_vocab(path: Path) -> tuple[list[str], np.ndarray]:
    tokens, counts = [], []
    with path.open(encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            tok, idx, n = line.rstrip("\n").split("\t")
            if int(idx) != i:
                raise DataError(f"{path}: index {idx} out of order at line {i + 1}")
            tokens.append(tok)
            counts.append(int(n))
    return tokens, np.array(counts, dtype=np.int64)


def read_key_values(path) -> dict[str, str]:
    out = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"no prepared dataset at {root}")
    item_tokens, item_counts = _read_vocab(root / "item_vocab.tsv")
    cate_tokens, cate_counts = _read_vocab(root / "cate_vocab.tsv")
    users, sequences = [], []
    with (root / "sequences.tsv").open(encoding="utf-8") as fh:
        for line in fh:
            user, _, rest = line.rstrip("\n").partition("\t")
            seq = []
            for tok in rest.split():
                v, c, t = tok.split(":")
                seq.append(Action(int(v), int(c), int(t)))
            users.append(user)
            sequences.append(seq)
    manifest = read_key_values(root / "manifest.txt") if (root / "manifest.txt").exists() else {}
    bounds = None
    if all(k in manifest for k in ("train_end", "valid_end", "test_end")):
        bounds = (int(manifest["train_end"]), int(manifest["valid_end"]), int(manifest["test_end"]))
    unk = int(manifest["unk_index"]) if "unk_index" in manifest else None
    return Dataset(users, sequences, item_tokens, cate_tokens, item_counts, cate_counts, unk, bounds, manifest)


def dataset_dir_exists(path) -> bool:
    return os.path.isfile(os.path.join(path, "sequences.tsv"))
