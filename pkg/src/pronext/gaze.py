"""One hierarchical focal/context stage.

The patch mask splits the feature map into a focal branch and a context
branch. The focal branch is reassembled in place (context patches zeroed),
downsampled by 2-stride max pooling and abstracted by a channel-doubling
deformable convolution. The context branch compresses focal/context
interaction into one fixed-length embedding: patch tokens are projected to a
common width, given a conditional position encoding (depthwise convolution
over the token grid), and run through cross-attention blocks with focal
queries and context keys/values; the mean over focal tokens is the stage's
Context Impression.

Two code paths compute the same thing:
  * the unbatched operations below (`split_by_mask`, `context_impression`,
    ...) follow the per-sample token-list formulation and serve as the
    reference;
  * `gaze_shift` runs whole batches by keeping all P^2 tokens and expressing
    the split through attention key weights and a weighted token mean, which
    is algebraically identical and vectorizes. In soft-mask mode the binary
    weights become the raw probabilities, keeping everything differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, InputError
from .parsers import (PatchMask, plain_field_parse, shift_parse,
                      spatial_attention_parse)


@dataclass
class StageOutput:
    f_next: ad.Tensor          # (B, H/2, W/2, 2C)
    e_c: ad.Tensor | None      # (B, D) context impression, None when disabled
    mask: PatchMask | None


@dataclass
class CALayerParams:
    ln_q_g: ad.Tensor
    ln_q_b: ad.Tensor
    ln_kv_g: ad.Tensor
    ln_kv_b: ad.Tensor
    attn: ad.AttentionParams
    ln_f_g: ad.Tensor
    ln_f_b: ad.Tensor
    ffn_w1: ad.Tensor
    ffn_b1: ad.Tensor
    ffn_w2: ad.Tensor
    ffn_b2: ad.Tensor


@dataclass
class GazeStageParams:
    """Everything one stage owns besides its parser parameters."""

    deform_w: ad.Tensor        # (3, 3, C, 2C)
    deform_b: ad.Tensor
    offset_w: ad.Tensor        # (3, 3, C, 18), zero-init: starts as rigid conv
    offset_b: ad.Tensor
    token_w: ad.Tensor         # (k*k*C, D)
    token_b: ad.Tensor
    pe_w: ad.Tensor            # (3, 3, D) depthwise over the patch grid
    pe_b: ad.Tensor
    ca_layers: list = field(default_factory=list)
    out_ln_g: ad.Tensor | None = None
    out_ln_b: ad.Tensor | None = None
    heads: int = 1
    ffn_enabled: bool = True


# ---------------------------------------------------------------------------
# unbatched reference operations
# ---------------------------------------------------------------------------


def _tokens_from_map(f, k):
    """(H, W, C) -> (P*P, k*k*C) flattened patches, row-major grid order."""
    H, W, C = f.shape
    P, Q = H // k, W // k
    t = ad.reshape(f, (P, k, Q, k, C))
    t = ad.transpose(t, (0, 2, 1, 3, 4))
    return ad.reshape(t, (P * Q, k * k * C))


def _map_from_tokens(tokens, H, W, k):
    C = tokens.shape[1] // (k * k)
    P, Q = H // k, W // k
    t = ad.reshape(tokens, (P, Q, k, k, C))
    t = ad.transpose(t, (0, 2, 1, 3, 4))
    return ad.reshape(t, (H, W, C))


def split_by_mask(f, m, k):
    """Partition one feature map into focal and context token lists.

    f: (H, W, C); m: PatchMask (first sample used). Returns
    (focal_tokens, context_tokens, (focal_positions, context_positions));
    positions are (row, col) patch coordinates, row-major within each group.
    """
    if f.ndim != 3:
        raise DimensionError("split_by_mask expects a single (H, W, C) sample")
    H, W, C = f.shape
    P = H // k
    if m.grid_side != P:
        raise DimensionError(f"mask grid {m.grid_side} does not match H/k = {P}")
    binary = m.binary[0]
    tokens = _tokens_from_map(f, k)
    flat = binary.reshape(-1)
    focal_idx = np.nonzero(flat == 1)[0]
    context_idx = np.nonzero(flat == 0)[0]
    positions = (np.stack(np.divmod(focal_idx, P), axis=1),
                 np.stack(np.divmod(context_idx, P), axis=1))
    return ad.take_rows(tokens, focal_idx), ad.take_rows(tokens, context_idx), positions


def focal_reassemble(focal_tokens, positions, H, W, k):
    """Write focal patches back in place; context positions stay zero."""
    P = H // k
    pos = np.asarray(positions)
    if pos.size and (pos.min() < 0 or pos.max() >= P):
        raise InputError("focal_reassemble: position outside the patch grid")
    flat_idx = pos[:, 0] * P + pos[:, 1]
    grid = ad.embed_rows(focal_tokens, flat_idx, P * P)  # raises on duplicates
    return _map_from_tokens(grid, H, W, k)


def focal_abstract(masked_map, params):
    """2-stride max pooling then channel-doubling deformable convolution."""
    H = masked_map.shape[-3]
    W = masked_map.shape[-2]
    if H % 2 or W % 2:
        raise DimensionError("focal_abstract needs even spatial dims")
    pooled = ad.max_pool2d(masked_map, window=2, stride=2)
    return ad.deformable_conv2d(pooled, params.deform_w, params.deform_b,
                                params.offset_w, params.offset_b)


def conditional_position_encoding(focal_tokens, context_tokens, positions, params):
    """Scatter all tokens onto the patch grid, convolve, gather back per group.

    positions is the (focal_positions, context_positions) pair from
    split_by_mask. Token width must match the depthwise kernel channels.
    """
    pos_f, pos_c = positions
    P = int(max(pos_f.max(initial=-1), pos_c.max(initial=-1))) + 1
    idx_f = pos_f[:, 0] * P + pos_f[:, 1]
    idx_c = pos_c[:, 0] * P + pos_c[:, 1]
    all_idx = np.concatenate([idx_f, idx_c])
    D = focal_tokens.shape[-1]
    grid = ad.embed_rows(ad.concat([focal_tokens, context_tokens], axis=0), all_idx, P * P)
    grid = ad.reshape(grid, (P, P, D))
    enc = ad.depthwise_conv2d(grid, params.pe_w, params.pe_b)
    enc = ad.reshape(enc, (P * P, D))
    return ad.take_rows(enc, idx_f), ad.take_rows(enc, idx_c)


def _ca_block(h, kv, layer, heads, ffn_enabled, key_weights=None):
    """Pre-normalized cross-attention + feed-forward, both residual."""
    q_n = ad.layer_norm(h, layer.ln_q_g, layer.ln_q_b)
    kv_n = ad.layer_norm(kv, layer.ln_kv_g, layer.ln_kv_b)
    h = ad.add(h, ad.multi_head_cross_attention(q_n, kv_n, heads, layer.attn,
                                                key_weights=key_weights))
    if ffn_enabled:
        f_n = ad.layer_norm(h, layer.ln_f_g, layer.ln_f_b)
        mid = ad.gelu(ad.linear(f_n, layer.ffn_w1, layer.ffn_b1))
        h = ad.add(h, ad.linear(mid, layer.ffn_w2, layer.ffn_b2))
    return h


def context_impression(focal_tokens, context_tokens, positions, params):
    """Reference (single sample) Context Impression.

    Projects both groups to the common width, adds conditional position
    encodings, runs the cross-attention stack (focal queries, context
    keys/values), and mean-pools the focal tokens.
    """
    if focal_tokens.shape[0] == 0 or context_tokens.shape[0] == 0:
        raise InputError("context_impression needs both groups nonempty")
    q = ad.linear(focal_tokens, params.token_w, params.token_b)
    kv = ad.linear(context_tokens, params.token_w, params.token_b)
    pe_f, pe_c = conditional_position_encoding(q, kv, positions, params)
    h = ad.add(q, pe_f)
    kv = ad.add(kv, pe_c)
    for layer in params.ca_layers:
        h = _ca_block(h, kv, layer, params.heads, params.ffn_enabled)
    h = ad.layer_norm(h, params.out_ln_g, params.out_ln_b)
    return ad.reduce_mean(h, axis=0)


# ---------------------------------------------------------------------------
# batched stage
# ---------------------------------------------------------------------------


def run_parser(f, k, parser_mode, parser_params, mode="hard", band_pass=True):
    if parser_mode == "shift":
        return shift_parse(f, k, parser_params, mode=mode, band_pass=band_pass)
    if parser_mode == "spatial_attention":
        return spatial_attention_parse(f, k, parser_params, mode=mode)
    if parser_mode == "plain_field":
        return plain_field_parse(f, k, parser_params, mode=mode)
    raise ConfigError(f"unknown parser mode '{parser_mode}'")


def _batched_tokens(f, k):
    B, H, W, C = f.shape
    P, Q = H // k, W // k
    t = ad.reshape(f, (B, P, k, Q, k, C))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    return ad.reshape(t, (B, P * Q, k * k * C))


def _padded_group_indices(binary, value):
    """Per-sample indices of mask == value, padded to the batch max count.

    Returns (idx (B, T), valid (B, T)). Padding repeats index 0; padded rows
    are excluded from attention/pooling so they carry zero gradient.
    """
    B = binary.shape[0]
    flats = [np.nonzero(binary[b].reshape(-1) == value)[0] for b in range(B)]
    T = max(len(f) for f in flats)
    idx = np.zeros((B, T), dtype=np.int64)
    valid = np.zeros((B, T), dtype=binary.dtype)
    for b, f in enumerate(flats):
        idx[b, :len(f)] = f
        valid[b, :len(f)] = 1.0
    return idx, valid


def context_impression_batched(f, k, mask, params):
    """Batched Context Impression.

    All P^2 tokens are projected and position-encoded on the grid. In hard
    mode the focal/context groups are then gathered into packed (padded)
    token blocks, matching the reference split semantics: group membership is
    an index selection, so no gradient flows from the embedding into the
    parser. In soft mode membership stays a smooth weighting (probabilities
    as query-mean weights and complementary attention key weights), which is
    the differentiable surrogate used by gradient checks.
    """
    B = f.shape[0]
    P = f.shape[1] // k
    tokens = _batched_tokens(f, k)                               # (B, P^2, kkC)
    x = ad.linear(tokens, params.token_w, params.token_b)        # (B, P^2, D)
    D = x.shape[-1]
    grid = ad.reshape(x, (B, P, P, D))
    pe = ad.reshape(ad.depthwise_conv2d(grid, params.pe_w, params.pe_b), (B, P * P, D))
    x = ad.add(x, pe)

    if mask.soft:
        m_flat = ad.reshape(mask.mask, (B, P * P))
        ctx_w = ad.sub(ad.Tensor(np.ones((B, P * P), dtype=x.dtype)), m_flat)
        h = x
        for layer in params.ca_layers:
            h = _ca_block(h, x, layer, params.heads, params.ffn_enabled, key_weights=ctx_w)
        h = ad.layer_norm(h, params.out_ln_g, params.out_ln_b)
        qw = ad.reshape(m_flat, (B, P * P, 1))
        return ad.div(ad.reduce_sum(ad.mul(h, qw), axis=1),
                      ad.reduce_sum(qw, axis=1))

    idx_f, valid_f = _padded_group_indices(mask.binary, 1.0)
    idx_c, valid_c = _padded_group_indices(mask.binary, 0.0)
    h = ad.gather_tokens(x, idx_f)                               # (B, Tf, D)
    kv = ad.gather_tokens(x, idx_c)                              # (B, Tc, D)
    for layer in params.ca_layers:
        h = _ca_block(h, kv, layer, params.heads, params.ffn_enabled,
                      key_weights=valid_c)
    h = ad.layer_norm(h, params.out_ln_g, params.out_ln_b)
    qw = ad.Tensor(valid_f[:, :, None])
    return ad.div(ad.reduce_sum(ad.mul(h, qw), axis=1),
                  ad.Tensor(valid_f.sum(axis=1, keepdims=True)))


def gaze_shift(f, k, parser_mode, parser_params, stage_params, mode="hard",
               band_pass=True, context_enabled=True):
    """One full stage: parse, mask, abstract, compress.

    f: (B, H, W, C) with H == W divisible by 2k. Returns StageOutput with the
    halved/doubled focal map and (optionally) the context impression.
    """
    if f.ndim != 4:
        raise DimensionError("gaze_shift expects a batched (B, H, W, C) tensor")
    B, H, W, C = f.shape
    if H != W:
        raise DimensionError("gaze_shift input must be square")
    if H % (2 * k):
        raise DimensionError(f"side {H} must be divisible by 2*k = {2 * k}")

    m = run_parser(f, k, parser_mode, parser_params, mode=mode, band_pass=band_pass)
    P = m.grid_side
    mask_up = ad.upsample_nearest2d(ad.reshape(m.mask, (B, P, P, 1)), k)
    masked = ad.mul(f, mask_up)                                  # focal patches in place
    f_next = focal_abstract(masked, stage_params)

    e_c = None
    if context_enabled:
        e_c = context_impression_batched(f, k, m, stage_params)
    return StageOutput(f_next=f_next, e_c=e_c, mask=m)


def plain_abstract(f, stage_params):
    """Parser-free stage reduction (the ablation baseline): the whole map goes
    through the same pooling + deformable abstraction, no context branch."""
    return StageOutput(f_next=focal_abstract(f, stage_params), e_c=None, mask=None)


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------


def _init_ca_layer(rng, D, dtype):
    def mat():
        return ad.trunc_normal(rng, (D, D), std=0.02, dtype=dtype)

    def vec():
        return ad.zeros_param(D, dtype=dtype)

    def ones():
        return ad.Tensor(np.ones(D), requires_grad=True, dtype=dtype)

    attn = ad.AttentionParams(wq=mat(), wk=mat(), wv=mat(), wo=mat(),
                              bq=vec(), bk=vec(), bv=vec(), bo=vec())
    return CALayerParams(ln_q_g=ones(), ln_q_b=vec(), ln_kv_g=ones(), ln_kv_b=vec(),
                         attn=attn, ln_f_g=ones(), ln_f_b=vec(),
                         ffn_w1=mat(), ffn_b1=vec(), ffn_w2=mat(), ffn_b2=vec())


def init_gaze_stage(rng, C, k, D, ca_layers, heads, ffn_enabled=True, dtype=None):
    """Parameters for one stage operating on C input channels."""
    dtype = dtype or ad.default_dtype()
    if D % heads:
        raise ConfigError(f"embedding length {D} not divisible by {heads} heads")
    token_in = k * k * C
    params = GazeStageParams(
        deform_w=ad.trunc_normal(rng, (3, 3, C, 2 * C), std=0.02, dtype=dtype),
        deform_b=ad.zeros_param(2 * C, dtype=dtype),
        offset_w=ad.zeros_param((3, 3, C, 18), dtype=dtype),
        offset_b=ad.zeros_param(18, dtype=dtype),
        token_w=ad.trunc_normal(rng, (token_in, D), std=0.02, dtype=dtype),
        token_b=ad.zeros_param(D, dtype=dtype),
        pe_w=ad.trunc_normal(rng, (3, 3, D), std=0.02, dtype=dtype),
        pe_b=ad.zeros_param(D, dtype=dtype),
        ca_layers=[_init_ca_layer(rng, D, dtype) for _ in range(ca_layers)],
        out_ln_g=ad.Tensor(np.ones(D), requires_grad=True, dtype=dtype),
        out_ln_b=ad.zeros_param(D, dtype=dtype),
        heads=heads,
        ffn_enabled=ffn_enabled,
    )
    return params
