"""Attention mechanisms over frame features and object sets.

Three variants:
  - sdp_temporal: scaled dot-product self-attention across a video's frames,
    pooled to a single context vector.
  - dotprod_select: object selection whose N x N weights couple every object
    pair; queries mix the previous interaction state and the frame context
    into each object before the Gram-matrix softmax.
  - alpha_select: object selection scoring each object independently through
    tanh + a learned functional, one weight per object.

All functions accept per-sample matrices ([d, n]) or batched ([B, d, n])
inputs and return matching ranks. Padded positions are masked by adding -1e9
to their logits pre-softmax; pooled outputs average valid rows only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import EmptyInputError, ShapeError
from .layers import linear_batch

MASK_FILL = -1e9


@dataclass
class AttentionOutput:
    attended: T.Tensor  # pooled feature [d] or [B, d]
    weights: T.Tensor   # attention map, retained for co-attention/inspection


@dataclass
class SelectionInputs:
    projected_objects: T.Tensor     # [d_theta, N] or [B, d_theta, N]
    frame_context: T.Tensor         # [d_v] or [B, d_v]
    prev_interaction: T.Tensor      # [d_h] or [B, d_h]
    valid_mask: np.ndarray | None   # bool [N] or [B, N]; None = all valid


def _lift(mat, mask):
    """Promote [d, n] (+ mask [n]) to batch rank; report whether we did."""
    if mat.ndim == 2:
        lifted = T.reshape(mat, (1,) + mat.shape)
        m = None if mask is None else np.asarray(mask, bool).reshape(1, -1)
        return lifted, m, True
    if mat.ndim == 3:
        m = None if mask is None else np.asarray(mask, bool)
        return mat, m, False
    raise ShapeError(f"expected [d, n] or [B, d, n], got {mat.shape}")


def _check_mask(mask, n, allow_empty):
    if mask is None:
        return None
    if mask.shape[-1] != n:
        raise ShapeError(f"mask length {mask.shape[-1]} vs {n} positions")
    if not allow_empty and not mask.any(axis=-1).all():
        raise EmptyInputError("a sample has no valid positions")
    return mask


def _key_bias(mask, dtype):
    """Additive [B, 1, n] logit bias sending padded keys to -1e9."""
    bias = np.where(mask, 0.0, MASK_FILL).astype(dtype)[:, None, :]
    return T.Tensor(bias)


def _masked_mean_rows(rows, mask):
    """Mean over valid rows of [B, n, d] given bool mask [B, n] -> [B, d]."""
    if mask is None:
        return T.reduce_mean_rows(rows)
    dtype = rows.dtype
    w = mask.astype(dtype)[:, :, None]
    counts = np.maximum(mask.sum(axis=-1, keepdims=True), 1).astype(dtype)
    summed = T.reduce_sum(T.mul(rows, T.Tensor(w)), axis=-2)
    return T.div(summed, T.Tensor(counts))


def sdp_temporal(V_proj, scale, mask=None, allow_empty=False):
    """Temporal self-attention over projected frame features [d_phi, T].

    weights = row_softmax(V'V / scale) with padded frames masked; attended is
    the mean over valid query rows of weights @ V'.
    """
    x, m, squeeze = _lift(V_proj, mask)
    n = x.shape[-1]
    if n == 0:
        raise EmptyInputError("sdp_temporal over zero frames")
    m = _check_mask(m, n, allow_empty)
    xt = T.transpose_last2(x)                       # [B, T, d]
    logits = T.mul(T.matmul(xt, x), 1.0 / float(scale))
    if m is not None:
        logits = T.add(logits, _key_bias(m, x.dtype))
    weights = T.row_softmax(logits)                 # [B, T, T]
    pooled_rows = T.matmul(weights, xt)             # [B, T, d]
    attended = _masked_mean_rows(pooled_rows, m)    # [B, d]
    if squeeze:
        attended = T.reshape(attended, (attended.shape[-1],))
        weights = T.reshape(weights, weights.shape[1:])
    return AttentionOutput(attended=attended, weights=weights)


def _selection_query(inputs, W_h, W_c, squeeze):
    """X = repeat(W_h h_prev + W_c context) + projected_objects.

    inputs.projected_objects is already batch-rank here; h/context may still
    be per-sample vectors when squeeze is set.
    """
    h = inputs.prev_interaction
    ctx = inputs.frame_context
    if squeeze:
        h = T.reshape(h, (1, -1))
        ctx = T.reshape(ctx, (1, -1))
    mixed = T.add(linear_batch(W_h, h), linear_batch(W_c, ctx))  # [B, d_theta]
    return T.broadcast_add(mixed, inputs.projected_objects)


def dotprod_select(inputs, W_h, W_c, scale, allow_empty=False):
    """Pairwise-coupled selection: softmax of the query Gram matrix / scale."""
    proj, m, squeeze = _lift(inputs.projected_objects, inputs.valid_mask)
    n = proj.shape[-1]
    if n == 0:
        raise EmptyInputError("selection over zero objects")
    m = _check_mask(m, n, allow_empty)
    lifted = SelectionInputs(proj, inputs.frame_context, inputs.prev_interaction, m)
    x = _selection_query(lifted, W_h, W_c, squeeze)  # [B, d_theta, N]
    xt = T.transpose_last2(x)
    logits = T.mul(T.matmul(xt, x), 1.0 / float(scale))
    if m is not None:
        logits = T.add(logits, _key_bias(m, x.dtype))
    weights = T.row_softmax(logits)                  # [B, N, N]
    pooled_rows = T.matmul(weights, T.transpose_last2(proj))
    attended = _masked_mean_rows(pooled_rows, m)     # [B, d_theta]
    if squeeze:
        attended = T.reshape(attended, (attended.shape[-1],))
        weights = T.reshape(weights, weights.shape[1:])
    return AttentionOutput(attended=attended, weights=weights)


def alpha_select(inputs, W_h, W_c, w_k, allow_empty=False):
    """Per-object selection: weights = softmax(w_k' tanh(X)), one per object."""
    proj, m, squeeze = _lift(inputs.projected_objects, inputs.valid_mask)
    n = proj.shape[-1]
    if n == 0:
        raise EmptyInputError("selection over zero objects")
    m = _check_mask(m, n, allow_empty)
    lifted = SelectionInputs(proj, inputs.frame_context, inputs.prev_interaction, m)
    x = _selection_query(lifted, W_h, W_c, squeeze)  # [B, d_theta, N]
    scores = T.matmul(T.reshape(w_k, (1, 1, -1)), T.tanh(x))  # [B, 1, N]
    if m is not None:
        scores = T.add(scores, _key_bias(m, x.dtype))
    weights = T.row_softmax(scores)                  # [B, 1, N]
    attended = T.matmul(proj, T.transpose_last2(weights))  # [B, d_theta, 1]
    attended = T.reshape(attended, attended.shape[:-1])
    if squeeze:
        attended = T.reshape(attended, (attended.shape[-1],))
        weights = T.reshape(weights, weights.shape[1:])
    return AttentionOutput(attended=attended, weights=weights)
