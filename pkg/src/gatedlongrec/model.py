"""The GatedLongRec network.

Recent categories feed an intent GRU whose state scores every category
through the tied category embedding. The same scores, restricted to the
categories present among distant actions, pick the top-k categories. One
shared long-term GRU summarises each picked category's distant items, a
short-term GRU summarises the recent items, and a fusion matrix maps each
``[long, short]`` pair into item-embedding space. The k conditional item
distributions are mixed with the renormalised gate weights.

Every function here works on a single example (1-D vectors, index lists) as
well as on a batch (leading dimension ``B``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import Example
from .numerics import ShapeError, Tensor

VARIANTS = ("full", "short", "long")


@dataclass
class HyperParams:
    M: int = 20
    T: int = 20
    k: int = 3
    Z: int = 1024
    dropout: float = 0.2
    d_e: int = 300
    d_c: int = 64
    d_s: int = 300
    d_l: int = 300
    variant: str = "full"

    def __post_init__(self):
        if min(self.M, self.T, self.k, self.Z) < 1:
            raise ValueError("M, T, k and Z must all be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def d_f(self) -> int:
        # the fused vector is scored against E_item, so it lives in item space
        return self.d_e


@dataclass
class GruParams:
    W_r: Tensor
    W_z: Tensor
    W_h: Tensor

    def __post_init__(self):
        shapes = {self.W_r.shape, self.W_z.shape, self.W_h.shape}
        if len(shapes) != 1:
            raise ShapeError(f"GRU matrices disagree in shape: {shapes}")

    @property
    def hidden(self) -> int:
        return self.W_r.shape[0]

    @property
    def inputs(self) -> int:
        return self.W_r.shape[1] - self.W_r.shape[0]

    @classmethod
    def init(cls, hidden: int, inputs: int, rng, dtype=np.float64) -> "GruParams":
        return cls(*(_uniform((hidden, hidden + inputs), rng, dtype) for _ in range(3)))


def _uniform(shape, rng, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(shape[1])
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


@dataclass
class ModelParams:
    E_item: Tensor
    E_cate: Tensor
    gru_intent: GruParams
    gru_long: GruParams
    gru_short: GruParams
    W_f: Tensor
    variant: str = "full"

    @property
    def num_items(self) -> int:
        return self.E_item.shape[1]

    @property
    def num_cates(self) -> int:
        return self.E_cate.shape[1]

    @classmethod
    def init(cls, hyper: HyperParams, num_items: int, num_cates: int, rng, dtype=np.float64) -> "ModelParams":
        fused_in = {"full": hyper.d_l + hyper.d_s, "short": hyper.d_s, "long": hyper.d_l}[hyper.variant]
        return cls(
            E_item=_uniform((hyper.d_e, num_items), rng, dtype),
            E_cate=_uniform((hyper.d_c, num_cates), rng, dtype),
            gru_intent=GruParams.init(hyper.d_c, hyper.d_c, rng, dtype),
            gru_long=GruParams.init(hyper.d_l, hyper.d_e, rng, dtype),
            gru_short=GruParams.init(hyper.d_s, hyper.d_e, rng, dtype),
            W_f=_uniform((hyper.d_f, fused_in), rng, dtype),
            variant=hyper.variant,
        )

    def named(self) -> dict[str, Tensor]:
        """Parameters in the fixed order used by checkpoints and the optimizer."""
        out = {"E_item": self.E_item, "E_cate": self.E_cate}
        for prefix in ("gru_intent", "gru_long", "gru_short"):
            g = getattr(self, prefix)
            out[f"{prefix}.W_r"] = g.W_r
            out[f"{prefix}.W_z"] = g.W_z
            out[f"{prefix}.W_h"] = g.W_h
        out["W_f"] = self.W_f
        return out

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray], variant: str = "full") -> "ModelParams":
        t = {k: Tensor(np.array(v), requires_grad=True) for k, v in arrays.items()}
        return cls(
            E_item=t["E_item"],
            E_cate=t["E_cate"],
            gru_intent=GruParams(t["gru_intent.W_r"], t["gru_intent.W_z"], t["gru_intent.W_h"]),
            gru_long=GruParams(t["gru_long.W_r"], t["gru_long.W_z"], t["gru_long.W_h"]),
            gru_short=GruParams(t["gru_short.W_r"], t["gru_short.W_z"], t["gru_short.W_h"]),
            W_f=t["W_f"],
            variant=variant,
        )

    def copy(self, dtype=None) -> "ModelParams":
        arrays = {k: (v.data if dtype is None else v.data.astype(dtype)) for k, v in self.named().items()}
        return ModelParams.from_named(arrays, self.variant)

    def check_dims(self, hyper: HyperParams) -> None:
        if self.E_item.shape[0] != hyper.d_e or self.E_cate.shape[0] != hyper.d_c:
            raise ShapeError("embedding widths do not match hyper-parameters")
        if self.gru_intent.hidden != self.E_cate.shape[0]:
            raise ShapeError("intent GRU width must equal the category embedding width")
        if self.W_f.shape[0] != self.E_item.shape[0]:
            raise ShapeError("fusion output width must equal the item embedding width")


# ---------------------------------------------------------------- recurrent core

def gru_step(params: GruParams, h_prev, e, mask=None, dropout_mask=None) -> Tensor:
    """One gated update with the gate ``z`` keeping the previous state.

    ``dropout_mask`` multiplies the new state; ``mask`` (1 = real step,
    0 = padding) then leaves ``h_prev`` untouched where 0.
    """
    h_prev, e = nx.as_tensor(h_prev), nx.as_tensor(e)
    if h_prev.shape[-1] != params.hidden or e.shape[-1] != params.inputs:
        raise ShapeError(f"gru_step: state {h_prev.shape} / input {e.shape} do not fit "
                         f"hidden={params.hidden}, inputs={params.inputs}")
    x = nx.concat([h_prev, e])
    r = nx.sigmoid(nx.linear_map(params.W_r, x))
    z = nx.sigmoid(nx.linear_map(params.W_z, x))
    h_tilde = nx.tanh(nx.linear_map(params.W_h, nx.concat([nx.mul(r, h_prev), e])))
    h = nx.blend(z, h_prev, h_tilde)
    if dropout_mask is not None:
        h = nx.mul(h, dropout_mask)
    if mask is not None:
        h = nx.blend(np.asarray(mask, dtype=h.data.dtype)[..., None], h, h_prev)
    return h


def encode_sequence(params: GruParams, embeddings: Sequence, h0=None, mask=None, dropout_mask=None) -> Tensor:
    """Left fold of :func:`gru_step`; returns the final state.

    ``mask`` has the step axis last (``(..., L)``); ``dropout_mask`` has it
    first (``(L, ..., hidden)``) and is applied to the state after every step.
    An empty list returns ``h0``.
    """
    if h0 is None:
        lead = embeddings[0].shape[:-1] if embeddings else ()
        dtype = embeddings[0].data.dtype if embeddings else params.W_r.data.dtype
        h0 = Tensor(np.zeros((*lead, params.hidden), dtype=dtype))
    h = nx.as_tensor(h0)
    for t, e in enumerate(embeddings):
        h = gru_step(params, h, e, None if mask is None else mask[..., t],
                     None if dropout_mask is None else dropout_mask[t])
    return h


def _encode_ids(gru: GruParams, E: Tensor, ids, mask=None, dropout_mask=None) -> Tensor:
    ids = np.asarray(ids)
    steps = [nx.take_columns(E, ids[..., t]) for t in range(ids.shape[-1])]
    return encode_sequence(gru, steps, mask=mask, dropout_mask=dropout_mask)


def intent_encode(params: ModelParams, recent_cates, mask=None, dropout_mask=None) -> Tensor:
    recent_cates = np.asarray(recent_cates)
    if recent_cates.shape[-1] == 0:
        raise ShapeError("intent encoder needs at least one recent action")
    return _encode_ids(params.gru_intent, params.E_cate, recent_cates, mask, dropout_mask)


def encode_long_term(params: ModelParams, items, mask=None, dropout_mask=None) -> Tensor:
    items = np.asarray(items)
    if items.shape[-1] == 0:
        raise ShapeError("long-term encoder needs at least one distant action")
    return _encode_ids(params.gru_long, params.E_item, items, mask, dropout_mask)


def encode_short_term(params: ModelParams, items, mask=None, dropout_mask=None) -> Tensor:
    items = np.asarray(items)
    if items.shape[-1] == 0:
        raise ShapeError("short-term encoder needs at least one recent action")
    return _encode_ids(params.gru_short, params.E_item, items, mask, dropout_mask)


# ---------------------------------------------------------------- heads

def category_logits(h_cate, E_cate) -> Tensor:
    return nx.matmul(h_cate, E_cate)


def predict_category(h_cate, E_cate) -> Tensor:
    return nx.softmax(category_logits(h_cate, E_cate))


def top_k_positions(alpha: np.ndarray, cands: np.ndarray, valid: np.ndarray, k: int):
    """Positions of the k largest weights per row, lower category id first on ties.

    Returns ``(positions, slot_valid)``, both ``(..., k)``; rows with fewer than
    k valid candidates get padded slots marked invalid.
    """
    alpha, cands, valid = np.asarray(alpha), np.asarray(cands), np.asarray(valid, dtype=bool)
    key_alpha = np.where(valid, -alpha, np.inf)
    key_cate = np.where(valid, cands, np.iinfo(np.int64).max)
    order = np.lexsort((key_cate, key_alpha), axis=-1)
    width = order.shape[-1]
    if width < k:
        pad = np.zeros((*order.shape[:-1], k - width), dtype=order.dtype)
        order = np.concatenate([order, pad], axis=-1)
    positions = order[..., :k]
    slot_valid = np.take_along_axis(np.concatenate(
        [valid, np.zeros((*valid.shape[:-1], max(0, k - width)), dtype=bool)], axis=-1), positions, axis=-1)
    slot_valid &= np.arange(k) < np.minimum(valid.sum(axis=-1, keepdims=True), k)
    return positions, slot_valid


def candidate_alpha(cate_scores: Tensor, cand_cates, cand_valid) -> Tensor:
    """Softmax of the intent scores restricted to the candidate categories."""
    return nx.softmax(nx.take_along(cate_scores, cand_cates), mask=cand_valid)


def gate_weights(alpha: Tensor, cand_valid, positions, slot_valid) -> Tensor:
    """Renormalise the picked weights; rows with no candidate put weight 1 on
    slot 0 (the empty-gate fallback)."""
    dtype = alpha.data.dtype
    picked = nx.mul(nx.take_along(alpha, positions), slot_valid.astype(dtype))
    empty = ~np.asarray(cand_valid, dtype=bool).any(axis=-1, keepdims=True)
    fallback = np.zeros(slot_valid.shape, dtype=dtype)
    fallback[..., :1] = empty
    numer = nx.add(picked, fallback)
    denom = nx.add(nx.total(picked, axis=-1, keepdims=True), empty.astype(dtype))
    return nx.divide(numer, denom)


def gate_top_k(h_cate, E_cate, candidate_cates: Sequence[int], k: int) -> list[tuple[int | None, float]]:
    """Single-example gate: ``[(category, renormalised weight), ...]``.

    With no candidates the result is ``[(None, 1.0)]``.
    """
    h = np.asarray(getattr(h_cate, "data", h_cate))
    E = np.asarray(getattr(E_cate, "data", E_cate))
    cands = np.asarray(sorted(set(int(c) for c in candidate_cates)), dtype=np.int64)
    if cands.size == 0:
        return [(None, 1.0)]
    scores = h @ E[:, cands]
    alpha = nx.softmax(scores).data
    positions, slot_valid = top_k_positions(alpha, cands, np.ones(cands.size, dtype=bool), k)
    sel = positions[slot_valid]
    weights = alpha[sel] / alpha[sel].sum()
    return [(int(cands[p]), float(w)) for p, w in zip(sel, weights)]


def fuse(W_f, h_long, h_short) -> Tensor:
    parts = [p for p in (h_long, h_short) if p is not None]
    if not parts:
        raise ShapeError("fuse needs at least one branch")
    x = parts[0] if len(parts) == 1 else nx.concat(parts)
    return nx.linear_map(W_f, x)


def score_items(h_c, E_item, candidates=None) -> Tensor:
    """Conditional item distribution: full catalog when ``candidates`` is None,
    otherwise over the given ids (``(J,)`` for one example, ``(B, J)`` for a
    batch, shared across any slot axis)."""
    h_c = nx.as_tensor(h_c)
    if candidates is None:
        return nx.softmax(nx.matmul(h_c, E_item))
    cand_emb = nx.take_columns(E_item, np.asarray(candidates))
    if h_c.data.ndim == 1:
        logits = nx.linear_map(cand_emb, h_c)
    elif h_c.data.ndim == 2:
        logits = nx.einsum("bd,bjd->bj", h_c, cand_emb)
    else:
        logits = nx.einsum("bkd,bjd->bkj", h_c, cand_emb)
    return nx.softmax(logits)


def mix_predictions(weights, conditionals) -> Tensor:
    """``sum_c weight_c * p(. | c)`` over the slot axis (second to last)."""
    weights, conditionals = nx.as_tensor(weights), nx.as_tensor(conditionals)
    if conditionals.shape[:-1] != weights.shape:
        raise ShapeError(f"mixture weights {weights.shape} do not match conditionals {conditionals.shape}")
    w = nx.reshape(weights, (*weights.shape, 1))
    return nx.total(nx.mul(w, conditionals), axis=-2)


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    recent_items: np.ndarray
    recent_cates: np.ndarray
    recent_mask: np.ndarray
    cand_cates: np.ndarray
    cand_valid: np.ndarray
    dist_items: np.ndarray
    dist_mask: np.ndarray
    target_items: np.ndarray
    target_cates: np.ndarray

    def __len__(self):
        return self.recent_items.shape[0]


def collate(examples: Sequence[Example], M: int, T: int, k: int = 1) -> Batch:
    """Pad examples into arrays. Sequences are right-aligned; candidate
    categories are sorted ascending."""
    B = len(examples)
    width = max([k] + [len(e.distant_by_cate) for e in examples])
    recent_items = np.zeros((B, M), dtype=np.int64)
    recent_cates = np.zeros((B, M), dtype=np.int64)
    recent_mask = np.zeros((B, M), dtype=bool)
    cand_cates = np.zeros((B, width), dtype=np.int64)
    cand_valid = np.zeros((B, width), dtype=bool)
    dist_items = np.zeros((B, width, T), dtype=np.int64)
    dist_mask = np.zeros((B, width, T), dtype=bool)
    for b, ex in enumerate(examples):
        recent = ex.recent[-M:]
        if not recent:
            raise ShapeError(f"example for user {ex.user} at {ex.position} has no recent actions")
        n = len(recent)
        recent_items[b, M - n:] = [a.item for a in recent]
        recent_cates[b, M - n:] = [a.category for a in recent]
        recent_mask[b, M - n:] = True
        for j, c in enumerate(sorted(ex.distant_by_cate)):
            acts = ex.distant_by_cate[c][-T:]
            cand_cates[b, j] = c
            cand_valid[b, j] = True
            dist_items[b, j, T - len(acts):] = [a.item for a in acts]
            dist_mask[b, j, T - len(acts):] = True
    return Batch(recent_items, recent_cates, recent_mask, cand_cates, cand_valid, dist_items, dist_mask,
                 np.array([e.target_item for e in examples], dtype=np.int64),
                 np.array([e.target_cate for e in examples], dtype=np.int64))


@dataclass
class BatchOutput:
    cate_dist: Tensor
    alpha: Tensor
    gate_cates: np.ndarray
    gate_valid: np.ndarray
    weights: Tensor
    conditionals: Tensor
    mixed: Tensor
    candidates: np.ndarray | None = None


def _dropout(shape, rate, rng, dtype):
    keep = (rng.random(shape) >= rate).astype(dtype)
    return keep / (1.0 - rate)


def forward_batch(params: ModelParams, hyper: HyperParams, batch: Batch, candidates=None,
                  train: bool = False, rng: np.random.Generator | None = None,
                  ablate: str | None = None) -> BatchOutput:
    """Run the full pipeline on a padded batch.

    ``candidates`` (``(B, J)`` item ids, positive first) selects sampled
    scoring; ``None`` scores the whole catalog. ``ablate`` in {"short", "long"}
    zeroes the other branch at the fusion input while keeping ``W_f``.
    """
    dtype = params.E_item.data.dtype
    B = len(batch)
    drop = train and hyper.dropout > 0
    if drop and rng is None:
        raise ValueError("training-mode dropout needs an rng")

    def mask_for(width, *lead):
        return _dropout((*lead, width), hyper.dropout, rng, dtype) if drop else None

    M, T = batch.recent_items.shape[1], batch.dist_items.shape[2]
    h_cate = intent_encode(params, batch.recent_cates, batch.recent_mask, mask_for(params.gru_intent.hidden, M, B))
    cate_scores = category_logits(h_cate, params.E_cate)
    cate_dist = nx.softmax(cate_scores)

    alpha = candidate_alpha(cate_scores, batch.cand_cates, batch.cand_valid)
    # the discrete pick is a constant for differentiation
    positions, slot_valid = top_k_positions(alpha.data, batch.cand_cates, batch.cand_valid, hyper.k)
    weights = gate_weights(alpha, batch.cand_valid, positions, slot_valid)
    gate_cates = np.take_along_axis(batch.cand_cates, positions, axis=-1)

    variant = params.variant
    use_long = variant in ("full", "long")
    use_short = variant in ("full", "short")
    h_short = None
    if use_short:
        h_short = encode_short_term(params, batch.recent_items, batch.recent_mask,
                                    mask_for(params.gru_short.hidden, M, B))
        if ablate == "long":
            h_short = Tensor(np.zeros(h_short.shape, dtype=dtype))
    h_long = None
    if use_long:
        dist_items = np.take_along_axis(batch.dist_items, positions[..., None], axis=1)
        dist_mask = np.take_along_axis(batch.dist_mask, positions[..., None], axis=1) & slot_valid[..., None]
        h_long = encode_long_term(params, dist_items, dist_mask, mask_for(params.gru_long.hidden, T, B, hyper.k))
        if ablate == "short":
            h_long = Tensor(np.zeros(h_long.shape, dtype=dtype))
    if h_short is not None:
        h_short = nx.broadcast(nx.reshape(h_short, (B, 1, h_short.shape[-1])), (B, hyper.k, h_short.shape[-1]))
    h_c = fuse(params.W_f, h_long, h_short)

    conditionals = score_items(h_c, params.E_item, candidates)
    mixed = mix_predictions(weights, conditionals)
    return BatchOutput(cate_dist, alpha, gate_cates, slot_valid, weights, conditionals, mixed,
                       None if candidates is None else np.asarray(candidates))


# ---------------------------------------------------------------- single example

@dataclass
class ForwardOutput:
    cate_dist: np.ndarray
    gated: list[tuple[int | None, float, np.ndarray]]
    mixed_dist: np.ndarray
    candidates: np.ndarray | None = None
    raw: BatchOutput | None = field(default=None, repr=False)


def forward(params: ModelParams, hyper: HyperParams, example: Example, negatives=None, mode: str = "infer",
            rng: np.random.Generator | None = None, ablate: str | None = None) -> ForwardOutput:
    if mode not in ("train", "infer"):
        raise ValueError("mode must be 'train' or 'infer'")
    batch = collate([example], hyper.M, hyper.T, hyper.k)
    candidates = None
    if mode == "train":
        if negatives is None:
            raise ValueError("train mode needs negative samples")
        candidates = np.concatenate([[example.target_item], np.asarray(negatives)])[None, :]
    out = forward_batch(params, hyper, batch, candidates, train=mode == "train", rng=rng, ablate=ablate)
    gated = []
    empty = not batch.cand_valid[0].any()
    for j in range(hyper.k):
        if empty and j == 0:
            gated.append((None, float(out.weights.data[0, j]), out.conditionals.data[0, j]))
        elif out.gate_valid[0, j]:
            gated.append((int(out.gate_cates[0, j]), float(out.weights.data[0, j]), out.conditionals.data[0, j]))
    return ForwardOutput(out.cate_dist.data[0], gated, out.mixed.data[0],
                         None if candidates is None else candidates[0], out)


def with_variant(hyper: HyperParams, variant: str) -> HyperParams:
    return replace(hyper, variant=variant)


def hyper_fields() -> list[str]:
    return [f.name for f in fields(HyperParams)]
