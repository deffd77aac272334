"""Position-aware CTR models: one shared base plus eight head variants.

The full pipeline has three stages:

* base: embeds user/context/item ids and runs an MLP once per candidate
  item, giving a per-item representation that ignores positions;
* interaction: embeds the user's per-position click history, aggregates
  each position's sequence with context-aware attention, mixes in the
  position embedding, and (optionally) runs transformer blocks across
  positions - once per request, independent of the candidate count;
* combination: a small MLP that pairs every item representation with
  every position representation, producing a candidates x positions
  probability matrix from cheap per-pair work.

Variant tags select which stages are active and how position information
enters (not at all, as an additive wide weight, as a learned seen
probability, or through the combination/interaction stages). The
`DPIN+ItemAction` variant reruns the whole interaction stage per
candidate, which is the quality upper bound and the latency worst case.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import CONTEXT_FIELDS, ITEM_FIELDS, TIME_BUCKETS, USER_FIELDS, Request, VOCAB_FIELDS
from .errors import FormatError, UsageError

VARIANTS = (
    "DIN",
    "DIN+PosInWide",
    "DIN+PAL",
    "DIN+ActualPosInWide",
    "DIN+Combination",
    "DPIN-Transformer",
    "DPIN",
    "DPIN+ItemAction",
)

_DIN_FAMILY = {"DIN", "DIN+PosInWide", "DIN+PAL", "DIN+ActualPosInWide", "DIN+Combination"}
_DPIN_FAMILY = {"DPIN-Transformer", "DPIN", "DPIN+ItemAction"}

CHECKPOINT_MAGIC = b"DPIN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Shapes of every stage; identical across variants for fair comparison."""

    vocab_sizes: dict[str, int]
    embed_dim: int = 8
    mlp_hidden: tuple[int, ...] = (64, 32, 16)
    combination_hidden: int = 16
    d_model: int = 32
    heads: int = 2
    blocks: int = 2
    max_len: int = 30
    max_position: int = 10

    def validate(self) -> None:
        if self.d_model % self.heads != 0:
            raise UsageError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if any(h < 1 for h in self.mlp_hidden) or self.combination_hidden < 1:
            raise UsageError("hidden sizes must be positive")
        missing = [f for f in VOCAB_FIELDS if f not in self.vocab_sizes]
        if missing:
            raise UsageError(f"vocab_sizes missing fields {missing}")

    @property
    def user_dim(self) -> int:
        return len(USER_FIELDS) * self.embed_dim

    @property
    def context_dim(self) -> int:
        return len(CONTEXT_FIELDS) * self.embed_dim

    @property
    def item_dim(self) -> int:
        return len(ITEM_FIELDS) * self.embed_dim

    @property
    def behavior_dim(self) -> int:
        # clicked item fields + click-time context fields + recency bucket
        return (len(ITEM_FIELDS) + len(CONTEXT_FIELDS) + 1) * self.embed_dim

    @property
    def item_rep_dim(self) -> int:
        return self.mlp_hidden[-1]

    @property
    def din_rep_dim(self) -> int:
        return self.item_rep_dim + self.behavior_dim


def paper_scale_config(vocab_sizes: dict[str, int]) -> ModelConfig:
    """The production-scale preset (expensive; desk defaults are elsewhere)."""
    return ModelConfig(
        vocab_sizes=vocab_sizes,
        embed_dim=8,
        mlp_hidden=(1024, 512, 128),
        combination_hidden=128,
        d_model=64,
        heads=2,
        blocks=2,
        max_len=300,
        max_position=25,
    )


@dataclass
class ParameterSet:
    """All named learnable tensors of one model variant."""

    config: ModelConfig
    variant: str
    tensors: dict[str, Tensor]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def total_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for name in self.names():
            self.tensors[name].grad = None

    def copy(self) -> "ParameterSet":
        clone = {
            name: Tensor(t.data.copy(), requires_grad=True, name=name)
            for name, t in self.tensors.items()
        }
        return ParameterSet(config=self.config, variant=self.variant, tensors=clone)


def _param_specs(config: ModelConfig, variant: str) -> list[tuple[str, str, tuple[int, ...]]]:
    """(name, init kind, shape) for every tensor of `variant`, in draw order."""
    d = config.embed_dim
    dm = config.d_model
    specs: list[tuple[str, str, tuple[int, ...]]] = []

    for f in VOCAB_FIELDS:
        specs.append((f"embed.{f}", "embed", (config.vocab_sizes[f], d)))
    specs.append(("embed.position", "embed", (config.max_position + 1, d)))
    specs.append(("embed.time_bucket", "embed", (TIME_BUCKETS, d)))

    fan_in = config.user_dim + config.context_dim + config.item_dim
    for i, width in enumerate(config.mlp_hidden):
        specs.append((f"base.w{i}", "weight", (fan_in, width)))
        specs.append((f"base.b{i}", "zero", (width,)))
        fan_in = width

    if variant in _DIN_FAMILY:
        att_in = config.behavior_dim + config.item_dim
        specs.append(("flat_att.wa", "weight", (att_in, dm)))
        specs.append(("flat_att.ba", "zero", (dm,)))
        specs.append(("flat_att.wb", "weight", (dm, 1)))
        specs.append(("flat_att.bb", "zero", (1,)))
        if variant == "DIN+Combination":
            specs.append(("comb.w1", "weight", (config.din_rep_dim + d, config.combination_hidden)))
            specs.append(("comb.b1", "zero", (config.combination_hidden,)))
            specs.append(("comb.w2", "weight", (config.combination_hidden, 1)))
            specs.append(("comb.b2", "zero", (1,)))
        else:
            specs.append(("head.w", "weight", (config.din_rep_dim, 1)))
            specs.append(("head.b", "zero", (1,)))
        if variant in ("DIN+PosInWide", "DIN+ActualPosInWide"):
            specs.append(("wide.position", "zero", (config.max_position + 1, 1)))
        if variant == "DIN+PAL":
            specs.append(("pal.seen", "zero", (config.max_position + 1, 1)))
        return specs

    if variant not in _DPIN_FAMILY:
        raise UsageError(f"unknown variant {variant!r}; valid tags: {', '.join(VARIANTS)}")

    extra = config.item_dim if variant == "DPIN+ItemAction" else 0
    att_in = config.behavior_dim + config.context_dim + extra
    specs.append(("pos_att.wa", "weight", (att_in, dm)))
    specs.append(("pos_att.ba", "zero", (dm,)))
    specs.append(("pos_att.wb", "weight", (dm, 1)))
    specs.append(("pos_att.bb", "zero", (1,)))

    inter_in = d + config.context_dim + config.behavior_dim + extra
    specs.append(("inter.wv", "weight", (inter_in, dm)))
    specs.append(("inter.bv", "zero", (dm,)))

    if variant != "DPIN-Transformer":
        dk = dm // config.heads
        for b in range(config.blocks):
            for h in range(config.heads):
                specs.append((f"tf{b}.wq{h}", "weight", (dm, dk)))
                specs.append((f"tf{b}.wk{h}", "weight", (dm, dk)))
                specs.append((f"tf{b}.wv{h}", "weight", (dm, dk)))
            specs.append((f"tf{b}.wo", "weight", (dm, dm)))
            specs.append((f"tf{b}.ln1.gain", "one", (dm,)))
            specs.append((f"tf{b}.ln1.bias", "zero", (dm,)))
            specs.append((f"tf{b}.ff.w1", "weight", (dm, 4 * dm)))
            specs.append((f"tf{b}.ff.b1", "zero", (4 * dm,)))
            specs.append((f"tf{b}.ff.w2", "weight", (4 * dm, dm)))
            specs.append((f"tf{b}.ff.b2", "zero", (dm,)))
            specs.append((f"tf{b}.ln2.gain", "one", (dm,)))
            specs.append((f"tf{b}.ln2.bias", "zero", (dm,)))

    comb_in = config.item_rep_dim + dm + d
    specs.append(("comb.w1", "weight", (comb_in, config.combination_hidden)))
    specs.append(("comb.b1", "zero", (config.combination_hidden,)))
    specs.append(("comb.w2", "weight", (config.combination_hidden, 1)))
    specs.append(("comb.b2", "zero", (1,)))
    return specs


def build_model(config: ModelConfig, variant: str, seed: int) -> ParameterSet:
    """Initialize every tensor of `variant`; deterministic in seed."""
    config.validate()
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; valid tags: {', '.join(VARIANTS)}")
    rng = np.random.default_rng([seed, 0xD1A1])
    tensors: dict[str, Tensor] = {}
    for name, kind, shape in _param_specs(config, variant):
        if kind == "embed":
            data = rng.normal(0.0, 0.01, size=shape)
        elif kind == "weight":
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ParameterSet(config=config, variant=variant, tensors=tensors)


# -- batch preparation --------------------------------------------------------


@dataclass
class PreparedBatch:
    """Dense id arrays for a batch of requests with a uniform candidate count."""

    size: int  # number of requests B
    num_items: int  # candidates per request J
    user_ids: np.ndarray  # [B, 2]
    context_ids: np.ndarray  # [B, 4]
    item_ids: np.ndarray  # [B*J, 2], request-major
    bids: np.ndarray  # [B*J]
    seq_item_ids: np.ndarray  # [B, K, L, 2]
    seq_context_ids: np.ndarray  # [B, K, L, 4]
    seq_buckets: np.ndarray  # [B, K, L]
    seq_mask: np.ndarray  # [B, K, L] float 0/1
    flat_item_ids: np.ndarray  # [B, L, 2]
    flat_context_ids: np.ndarray  # [B, L, 4]
    flat_buckets: np.ndarray  # [B, L]
    flat_mask: np.ndarray  # [B, L] float 0/1
    positions: np.ndarray | None = None  # [B*J] logged display positions
    clicks: np.ndarray | None = None  # [B*J] float 0/1


def prepare_batch(requests: list[Request], config: ModelConfig) -> PreparedBatch:
    if not requests:
        raise UsageError("prepare_batch needs at least one request")
    k_max = config.max_position
    seq_len = config.max_len
    n_items = requests[0].num_candidates
    if any(r.num_candidates != n_items for r in requests):
        raise UsageError("all requests in a batch must have the same candidate count")

    b = len(requests)
    user_ids = np.zeros((b, len(USER_FIELDS)), dtype=np.int64)
    context_ids = np.zeros((b, len(CONTEXT_FIELDS)), dtype=np.int64)
    item_ids = np.zeros((b * n_items, len(ITEM_FIELDS)), dtype=np.int64)
    bids = np.zeros(b * n_items)
    seq_item = np.zeros((b, k_max, seq_len, len(ITEM_FIELDS)), dtype=np.int64)
    seq_ctx = np.zeros((b, k_max, seq_len, len(CONTEXT_FIELDS)), dtype=np.int64)
    seq_bucket = np.zeros((b, k_max, seq_len), dtype=np.int64)
    seq_mask = np.zeros((b, k_max, seq_len))
    flat_item = np.zeros((b, seq_len, len(ITEM_FIELDS)), dtype=np.int64)
    flat_ctx = np.zeros((b, seq_len, len(CONTEXT_FIELDS)), dtype=np.int64)
    flat_bucket = np.zeros((b, seq_len), dtype=np.int64)
    flat_mask = np.zeros((b, seq_len))

    have_labels = all(r.positions and r.clicks for r in requests)
    positions = np.zeros(b * n_items, dtype=np.int64) if have_labels else None
    clicks = np.zeros(b * n_items) if have_labels else None

    for bi, req in enumerate(requests):
        user_ids[bi] = req.user_ids
        context_ids[bi] = req.context_ids
        for j, cand in enumerate(req.candidates):
            item_ids[bi * n_items + j] = cand.item_ids
            bids[bi * n_items + j] = cand.bid
        if req.sequences.max_position < k_max:
            raise UsageError("request sequences cover fewer positions than the model expects")
        for k in range(1, k_max + 1):
            for l, rec in enumerate(req.sequences.at(k)[:seq_len]):
                seq_item[bi, k - 1, l] = rec.item_ids
                seq_ctx[bi, k - 1, l] = rec.context_ids
                seq_bucket[bi, k - 1, l] = rec.bucket
                seq_mask[bi, k - 1, l] = 1.0
        for l, rec in enumerate(req.sequences.flattened()[:seq_len]):
            flat_item[bi, l] = rec.item_ids
            flat_ctx[bi, l] = rec.context_ids
            flat_bucket[bi, l] = rec.bucket
            flat_mask[bi, l] = 1.0
        if have_labels:
            for j, (pos, click) in enumerate(zip(req.positions, req.clicks)):
                positions[bi * n_items + j] = pos
                clicks[bi * n_items + j] = click

    return PreparedBatch(
        size=b,
        num_items=n_items,
        user_ids=user_ids,
        context_ids=context_ids,
        item_ids=item_ids,
        bids=bids,
        seq_item_ids=seq_item,
        seq_context_ids=seq_ctx,
        seq_buckets=seq_bucket,
        seq_mask=seq_mask,
        flat_item_ids=flat_item,
        flat_context_ids=flat_ctx,
        flat_buckets=flat_bucket,
        flat_mask=flat_mask,
        positions=positions,
        clicks=clicks,
    )


# -- forward passes -----------------------------------------------------------

_MASK_OFF = -1e9


def _embed_concat(params: ParameterSet, fields: tuple[str, ...], ids: np.ndarray) -> Tensor:
    """Concat per-field embeddings: ids [..., len(fields)] -> [prod(...), len(fields)*d]."""
    flat = ids.reshape(-1, len(fields))
    parts = [ad.embedding(params.tensors[f"embed.{f}"], flat[:, i]) for i, f in enumerate(fields)]
    return ad.concat(parts, axis=1)


def behavior_embedding(
    params: ParameterSet, item_ids: np.ndarray, context_ids: np.ndarray, buckets: np.ndarray
) -> Tensor:
    """Embed one historical click: item fields, click-time context, recency."""
    items = _embed_concat(params, ITEM_FIELDS, item_ids)
    ctx = _embed_concat(params, CONTEXT_FIELDS, context_ids)
    rec = ad.embedding(params.tensors["embed.time_bucket"], buckets.reshape(-1))
    return ad.concat([items, ctx, rec], axis=1)


def base_module_forward(
    params: ParameterSet, user_ids: np.ndarray, context_ids: np.ndarray, item_ids: np.ndarray
) -> Tensor:
    """Per-item representation from (user, context, item) ids only.

    user_ids [B,2], context_ids [B,4], item_ids [B,J,2] -> [B*J, item_rep_dim].
    Row b*J+j depends only on request b's user/context and its item j.
    """
    user_ids = np.atleast_2d(user_ids)
    context_ids = np.atleast_2d(context_ids)
    if item_ids.ndim == 2:
        item_ids = item_ids[None, :, :]
    b, j = item_ids.shape[0], item_ids.shape[1]
    if user_ids.shape[0] != b or context_ids.shape[0] != b:
        raise UsageError("base_module_forward: batch sizes disagree")
    u = _embed_concat(params, USER_FIELDS, user_ids)
    c = _embed_concat(params, CONTEXT_FIELDS, context_ids)
    i = _embed_concat(params, ITEM_FIELDS, item_ids)
    uc = ad.repeat_rows(ad.concat([u, c], axis=1), j)
    x = ad.concat([uc, i], axis=1)
    for li in range(len(params.config.mlp_hidden)):
        x = ad.relu(ad.matmul(x, params.tensors[f"base.w{li}"]) + params.tensors[f"base.b{li}"])
    return x


def interest_aggregation(
    params: ParameterSet,
    seq_embeddings: Tensor,
    mask: np.ndarray,
    query: Tensor,
    weight_prefix: str = "pos_att",
) -> Tensor:
    """Attention-pool a behavior sequence against a query vector.

    seq_embeddings [N, L, D], mask [N, L] (1 = real record), query [N, Q].
    Padding slots get zero weight; an all-padding sequence pools to zeros.
    """
    n, seq_len, dim = seq_embeddings.shape
    rows = ad.reshape(seq_embeddings, (n * seq_len, dim))
    att_in = ad.concat([rows, ad.repeat_rows(query, seq_len)], axis=1)
    hidden = ad.relu(
        ad.matmul(att_in, params.tensors[f"{weight_prefix}.wa"]) + params.tensors[f"{weight_prefix}.ba"]
    )
    logits = ad.matmul(hidden, params.tensors[f"{weight_prefix}.wb"]) + params.tensors[f"{weight_prefix}.bb"]
    # padding slots get an additive -1e9 so their softmax weight underflows to 0
    logits = ad.reshape(logits, (n, seq_len)) + Tensor((1.0 - mask) * _MASK_OFF)
    weights = ad.softmax(logits)
    pooled = ad.reshape(ad.bmm(ad.reshape(weights, (n, 1, seq_len)), seq_embeddings), (n, dim))
    has_any = (mask.sum(axis=1) > 0).astype(np.float64)[:, None]
    return pooled * Tensor(has_any)


def position_interaction(
    params: ParameterSet,
    position_ids: np.ndarray,
    context: Tensor,
    pooled_behavior: Tensor,
    item_query: Tensor | None = None,
) -> Tensor:
    """Nonlinear mix of position embedding, context and pooled behavior."""
    pos = ad.embedding(params.tensors["embed.position"], position_ids.reshape(-1))
    parts = [pos, context, pooled_behavior]
    if item_query is not None:
        parts.append(item_query)
    x = ad.concat(parts, axis=1)
    return ad.relu(ad.matmul(x, params.tensors["inter.wv"]) + params.tensors["inter.bv"])


def transformer_encode(params: ParameterSet, v: Tensor) -> Tensor:
    """Self-attention blocks across the position axis: [B, K, d_model] -> same."""
    cfg = params.config
    if v.ndim != 3 or v.shape[1] != cfg.max_position or v.shape[2] != cfg.d_model:
        raise UsageError(
            f"transformer_encode expects [B, {cfg.max_position}, {cfg.d_model}], got {v.shape}"
        )
    b, k, dm = v.shape
    dk = dm // cfg.heads
    inv_sqrt_dk = 1.0 / np.sqrt(dk)
    x = ad.reshape(v, (b * k, dm))
    for blk in range(cfg.blocks):
        heads = []
        for h in range(cfg.heads):
            q = ad.reshape(ad.matmul(x, params.tensors[f"tf{blk}.wq{h}"]), (b, k, dk))
            key = ad.reshape(ad.matmul(x, params.tensors[f"tf{blk}.wk{h}"]), (b, k, dk))
            val = ad.reshape(ad.matmul(x, params.tensors[f"tf{blk}.wv{h}"]), (b, k, dk))
            scores = ad.bmm(q, ad.transpose_last2(key)) * inv_sqrt_dk
            attended = ad.bmm(ad.softmax(scores), val)
            heads.append(ad.reshape(attended, (b * k, dk)))
        mha = ad.matmul(ad.concat(heads, axis=1), params.tensors[f"tf{blk}.wo"])
        x = ad.layer_norm(x + mha, params.tensors[f"tf{blk}.ln1.gain"], params.tensors[f"tf{blk}.ln1.bias"])
        ff = ad.matmul(
            ad.relu(ad.matmul(x, params.tensors[f"tf{blk}.ff.w1"]) + params.tensors[f"tf{blk}.ff.b1"]),
            params.tensors[f"tf{blk}.ff.w2"],
        ) + params.tensors[f"tf{blk}.ff.b2"]
        x = ad.layer_norm(x + ff, params.tensors[f"tf{blk}.ln2.gain"], params.tensors[f"tf{blk}.ln2.bias"])
    return ad.reshape(x, (b, k, dm))


def combination_forward(
    params: ParameterSet,
    item_rep: Tensor,
    position_rep: Tensor | None,
    position_ids: np.ndarray,
) -> Tensor:
    """Pairwise head: sigmoid(ReLU([item, position, E(k)] W1 + b1) W2 + b2)."""
    pos_embed = ad.embedding(params.tensors["embed.position"], position_ids.reshape(-1))
    parts = [item_rep] + ([position_rep] if position_rep is not None else []) + [pos_embed]
    x = ad.concat(parts, axis=1)
    hidden = ad.relu(ad.matmul(x, params.tensors["comb.w1"]) + params.tensors["comb.b1"])
    out = ad.sigmoid(ad.matmul(hidden, params.tensors["comb.w2"]) + params.tensors["comb.b2"])
    return ad.reshape(out, (out.shape[0],))


# -- variant pipelines --------------------------------------------------------


def _expand_ids(ids: np.ndarray, times: int) -> np.ndarray:
    """[B, ...] -> [B*times, ...] repeating each row block `times` times."""
    return np.repeat(ids, times, axis=0)


def _din_item_rep(params: ParameterSet, prep: PreparedBatch) -> Tensor:
    """Base output concatenated with item-queried pooling of the flat history."""
    cfg = params.config
    b, j, seq_len = prep.size, prep.num_items, cfg.max_len
    base = base_module_forward(
        params, prep.user_ids, prep.context_ids, prep.item_ids.reshape(b, j, -1)
    )
    item_vec = _embed_concat(params, ITEM_FIELDS, prep.item_ids)
    seq_emb = behavior_embedding(
        params,
        _expand_ids(prep.flat_item_ids, j).reshape(-1, 2),
        _expand_ids(prep.flat_context_ids, j).reshape(-1, 4),
        _expand_ids(prep.flat_buckets, j).reshape(-1),
    )
    seq3 = ad.reshape(seq_emb, (b * j, seq_len, cfg.behavior_dim))
    mask = _expand_ids(prep.flat_mask, j)
    agg = interest_aggregation(params, seq3, mask, item_vec, weight_prefix="flat_att")
    return ad.concat([base, agg], axis=1)


def _din_logit(params: ParameterSet, rep: Tensor) -> Tensor:
    return ad.matmul(rep, params.tensors["head.w"]) + params.tensors["head.b"]


def _dpin_position_rep(
    params: ParameterSet, prep: PreparedBatch, per_item: bool
) -> Tensor:
    """Per-position representations.

    Returns [B*K, d_model], or [B*J*K, d_model] ordered (request, item,
    position) when the interaction stage is rerun per candidate.
    """
    cfg = params.config
    b, j, k, seq_len = prep.size, prep.num_items, cfg.max_position, cfg.max_len
    ctx_vec = _embed_concat(params, CONTEXT_FIELDS, prep.context_ids)

    if per_item:
        groups = b * j * k
        seq_item = _expand_ids(prep.seq_item_ids, j)
        seq_ctx = _expand_ids(prep.seq_context_ids, j)
        seq_bucket = _expand_ids(prep.seq_buckets, j)
        mask = _expand_ids(prep.seq_mask, j).reshape(groups, seq_len)
        ctx_groups = ad.repeat_rows(ad.repeat_rows(ctx_vec, j), k)
        item_vec = _embed_concat(params, ITEM_FIELDS, prep.item_ids)
        item_groups = ad.repeat_rows(item_vec, k)
        batch_rows = b * j
    else:
        groups = b * k
        seq_item, seq_ctx, seq_bucket = prep.seq_item_ids, prep.seq_context_ids, prep.seq_buckets
        mask = prep.seq_mask.reshape(groups, seq_len)
        ctx_groups = ad.repeat_rows(ctx_vec, k)
        item_groups = None
        batch_rows = b

    seq_emb = behavior_embedding(
        params, seq_item.reshape(-1, 2), seq_ctx.reshape(-1, 4), seq_bucket.reshape(-1)
    )
    seq3 = ad.reshape(seq_emb, (groups, seq_len, cfg.behavior_dim))
    query = ctx_groups if item_groups is None else ad.concat([ctx_groups, item_groups], axis=1)
    pooled = interest_aggregation(params, seq3, mask, query, weight_prefix="pos_att")

    pos_ids = np.tile(np.arange(1, k + 1), batch_rows)
    v = position_interaction(params, pos_ids, ctx_groups, pooled, item_query=item_groups)
    if params.variant == "DPIN-Transformer":
        return v
    encoded = transformer_encode(params, ad.reshape(v, (batch_rows, k, cfg.d_model)))
    return ad.reshape(encoded, (groups, cfg.d_model))


def _position_table_column(params: ParameterSet, name: str, position_ids: np.ndarray) -> Tensor:
    col = ad.embedding(params.tensors[name], position_ids.reshape(-1))
    return ad.reshape(col, (position_ids.size,))


def score_displayed(
    params: ParameterSet, prep: PreparedBatch, positions: np.ndarray | None = None
) -> Tensor:
    """Click probability for each displayed (item, logged position) sample.

    `positions` overrides the logged positions (used by evaluation
    protocols that score at a fixed slot); ordering stays request-major.
    """
    variant = params.variant
    cfg = params.config
    if positions is None:
        if prep.positions is None:
            raise UsageError("score_displayed needs logged positions")
        positions = prep.positions
    b, j, k = prep.size, prep.num_items, cfg.max_position

    if variant in _DIN_FAMILY:
        rep = _din_item_rep(params, prep)
        if variant == "DIN":
            return ad.reshape(ad.sigmoid(_din_logit(params, rep)), (b * j,))
        if variant in ("DIN+PosInWide", "DIN+ActualPosInWide"):
            logit = ad.reshape(_din_logit(params, rep), (b * j,))
            return ad.sigmoid(logit + _position_table_column(params, "wide.position", positions))
        if variant == "DIN+PAL":
            p_click = ad.reshape(ad.sigmoid(_din_logit(params, rep)), (b * j,))
            p_seen = ad.sigmoid(_position_table_column(params, "pal.seen", positions))
            return p_click * p_seen
        return combination_forward(params, rep, None, positions)

    base = base_module_forward(
        params, prep.user_ids, prep.context_ids, prep.item_ids.reshape(b, j, -1)
    )
    if variant == "DPIN+ItemAction":
        r_pos = _dpin_position_rep(params, prep, per_item=True)
        # row (b, j) pairs with its own position block
        row_idx = np.arange(b * j) * k + (positions - 1)
    else:
        r_pos = _dpin_position_rep(params, prep, per_item=False)
        row_idx = np.repeat(np.arange(b), j) * k + (positions - 1)
    selected = ad.gather_rows(r_pos, row_idx)
    return combination_forward(params, base, selected, positions)


def predict_matrix(params: ParameterSet, request: Request) -> np.ndarray:
    """CTR of every candidate at every position: [J, K], entries in (0, 1).

    Row j is independent of the other candidates; for the factorized
    variants the interaction stage runs once regardless of J.
    """
    cfg = params.config
    variant = params.variant
    prep = prepare_batch([request], cfg)
    j, k = prep.num_items, cfg.max_position
    pos_tiled = np.tile(np.arange(1, k + 1), j)

    with ad.no_grad():
        if variant in _DIN_FAMILY:
            rep = _din_item_rep(params, prep)
            if variant == "DIN":
                p = ad.sigmoid(_din_logit(params, rep))
                matrix = ad.reshape(ad.repeat_rows(p, k), (j, k))
            elif variant in ("DIN+PosInWide", "DIN+ActualPosInWide"):
                logit = ad.repeat_rows(_din_logit(params, rep), k)
                shift = _position_table_column(params, "wide.position", pos_tiled)
                matrix = ad.reshape(ad.sigmoid(ad.reshape(logit, (j * k,)) + shift), (j, k))
            elif variant == "DIN+PAL":
                p_click = ad.reshape(ad.repeat_rows(ad.sigmoid(_din_logit(params, rep)), k), (j * k,))
                p_seen = ad.sigmoid(_position_table_column(params, "pal.seen", pos_tiled))
                matrix = ad.reshape(p_click * p_seen, (j, k))
            else:
                pairs = ad.repeat_rows(rep, k)
                matrix = ad.reshape(combination_forward(params, pairs, None, pos_tiled), (j, k))
            return matrix.data.copy()

        base = base_module_forward(
            params, prep.user_ids, prep.context_ids, prep.item_ids.reshape(1, j, -1)
        )
        if variant == "DPIN+ItemAction":
            r_pos = _dpin_position_rep(params, prep, per_item=True)
        else:
            per_position = _dpin_position_rep(params, prep, per_item=False)
            r_pos = ad.tile_rows(per_position, j)
        pairs = ad.repeat_rows(base, k)
        matrix = ad.reshape(combination_forward(params, pairs, r_pos, pos_tiled), (j, k))
        return matrix.data.copy()


def pal_heads(params: ParameterSet, request: Request) -> tuple[np.ndarray, np.ndarray]:
    """Expose both factors of the seen/click decomposition: ([J], [K])."""
    if params.variant != "DIN+PAL":
        raise UsageError("pal_heads is only defined for the DIN+PAL variant")
    prep = prepare_batch([request], params.config)
    k = params.config.max_position
    with ad.no_grad():
        rep = _din_item_rep(params, prep)
        p_click = ad.sigmoid(_din_logit(params, rep)).data.reshape(-1)
        p_seen = ad.sigmoid(
            _position_table_column(params, "pal.seen", np.arange(1, k + 1))
        ).data.reshape(-1)
    return p_click.copy(), p_seen.copy()


# -- checkpoints --------------------------------------------------------------


def _config_to_text(config: ModelConfig, variant: str) -> str:
    lines = [
        f"variant={variant}",
        f"embed_dim={config.embed_dim}",
        "mlp_hidden=" + ",".join(str(h) for h in config.mlp_hidden),
        f"combination_hidden={config.combination_hidden}",
        f"d_model={config.d_model}",
        f"heads={config.heads}",
        f"blocks={config.blocks}",
        f"max_len={config.max_len}",
        f"max_position={config.max_position}",
    ]
    for f in VOCAB_FIELDS:
        lines.append(f"vocab.{f}={config.vocab_sizes[f]}")
    return "\n".join(lines) + "\n"


def _config_from_text(text: str) -> tuple[ModelConfig, str]:
    kv: dict[str, str] = {}
    for line in text.strip().splitlines():
        key, _, value = line.partition("=")
        kv[key] = value
    try:
        config = ModelConfig(
            vocab_sizes={f: int(kv[f"vocab.{f}"]) for f in VOCAB_FIELDS},
            embed_dim=int(kv["embed_dim"]),
            mlp_hidden=tuple(int(x) for x in kv["mlp_hidden"].split(",")),
            combination_hidden=int(kv["combination_hidden"]),
            d_model=int(kv["d_model"]),
            heads=int(kv["heads"]),
            blocks=int(kv["blocks"]),
            max_len=int(kv["max_len"]),
            max_position=int(kv["max_position"]),
        )
        return config, kv["variant"]
    except KeyError as exc:
        raise FormatError(f"checkpoint config is missing key {exc}") from exc


def save_checkpoint(path, params: ParameterSet) -> None:
    """Binary, bit-exact serialization of config, variant and all tensors."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = _config_to_text(params.config, params.variant).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for name in params.names():
        t = params.tensors[name]
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", t.data.ndim))
        for dim in t.data.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> ParameterSet:
    raw = Path(path).read_bytes()
    view = io.BytesIO(raw)

    def take(n: int, what: str) -> bytes:
        chunk = view.read(n)
        if len(chunk) != n:
            raise FormatError(f"checkpoint truncated while reading {what}")
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a model checkpoint (bad magic bytes)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    config, variant = _config_from_text(take(cfg_len, "config").decode("utf-8"))

    tensors: dict[str, Tensor] = {}
    while view.tell() < len(raw):
        (name_len,) = struct.unpack("<I", take(4, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "tensor rank"))
        shape = tuple(struct.unpack("<Q", take(8, "tensor dim"))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * count, f"values of {name}"), dtype="<f8").reshape(shape)
        tensors[name] = Tensor(data.copy(), requires_grad=True, name=name)

    expected = {name: shape for name, _, shape in _param_specs(config, variant)}
    if set(expected) != set(tensors):
        raise FormatError("checkpoint tensors do not match the declared variant")
    for name, shape in expected.items():
        if tensors[name].data.shape != shape:
            raise FormatError(f"checkpoint tensor {name!r} has shape {tensors[name].data.shape}, expected {shape}")
    return ParameterSet(config=config, variant=variant, tensors=tensors)
