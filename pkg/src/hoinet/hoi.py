"""Recurrent higher-order interaction module and baseline interaction schemes.

Per frame, K attentive selections each pool the frame's objects into one
vector; the K vectors concatenate into one LSTM step. The final hidden state
is the video's interaction representation. Baselines replace selection with
mean-pooling over objects or over all object pairs/triplets.

Per-video functions take feature-first matrices ([m, N] objects, [m] context);
the *_batch variants take leading-batch-axis arrays and blend skipped frames
(no valid objects) back to the carried state so one graph serves a whole
minibatch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import tensor as T
from .attention import SelectionInputs, alpha_select, dotprod_select
from .errors import ConfigError, EmptyInputError, FrameSkippedError, ShapeError
from .layers import (
    LinearLayer,
    LstmCell,
    MlpBlock,
    lstm_cell_step,
    mlp_forward,
    named_params,
    named_stats,
    set_stats,
)


@dataclass
class HoiConfig:
    K: int = 2
    d_theta: int = 2048
    lstm_hidden: int = 2048
    selection: str = "dotprod"  # or "alpha"

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.selection not in ("dotprod", "alpha"):
            raise ConfigError(f"unknown selection kind {self.selection!r}")


class HoiParams:
    """Parameters for one interaction module.

    g_theta[k] projects raw object features to d_theta; W_h/W_c mix the
    previous hidden state and the frame context into the selection query;
    w_score[k] is the per-object scoring functional used by alpha selection.
    """

    def __init__(self, cfg, in_dim, ctx_dim, rng, dtype=np.float32,
                 g_theta_dims=None, mlp_dropout=0.0):
        self.cfg = cfg
        self.in_dim = in_dim
        self.ctx_dim = ctx_dim
        dims = tuple(g_theta_dims) if g_theta_dims else (in_dim, cfg.d_theta, cfg.d_theta, cfg.d_theta)
        if dims[0] != in_dim or dims[-1] != cfg.d_theta:
            raise ConfigError(f"g_theta dims {dims} must run {in_dim} -> {cfg.d_theta}")
        self.g_theta_dims = dims
        self.g_theta = [MlpBlock(dims, rng, dtype=dtype, dropout=mlp_dropout) for _ in range(cfg.K)]
        self.W_h = [LinearLayer(cfg.lstm_hidden, cfg.d_theta, rng, dtype=dtype) for _ in range(cfg.K)]
        self.W_c = [LinearLayer(ctx_dim, cfg.d_theta, rng, dtype=dtype) for _ in range(cfg.K)]
        lim = 1.0 / np.sqrt(cfg.d_theta)
        self.w_score = [
            T.Tensor(rng.uniform(-lim, lim, cfg.d_theta).astype(dtype), requires_grad=True)
            for _ in range(cfg.K)
        ]
        self.lstm = LstmCell(cfg.K * cfg.d_theta, cfg.lstm_hidden, rng, dtype=dtype)

    def _components(self):
        return {
            "g_theta": self.g_theta,
            "W_h": self.W_h,
            "W_c": self.W_c,
            "w_score": self.w_score,
            "lstm": self.lstm,
        }

    def named_parameters(self, prefix="hoi"):
        return named_params(self._components(), prefix)

    def named_stats(self, prefix="hoi"):
        return named_stats(self._components(), prefix)

    def set_stats(self, values, prefix="hoi"):
        set_stats(self._components(), values, prefix)


@dataclass
class HoiState:
    h: T.Tensor
    c: T.Tensor
    weight_history: list = field(default_factory=list)


def init_state(params, batch=None, dtype=None):
    h, c = params.lstm.zero_state(batch=batch, dtype=dtype)
    return HoiState(h=h, c=c)


def _select(params, k, proj, v_ct, h_prev, mask, allow_empty):
    inputs = SelectionInputs(proj, v_ct, h_prev, mask)
    if params.cfg.selection == "dotprod":
        return dotprod_select(inputs, params.W_h[k], params.W_c[k],
                              np.sqrt(float(params.cfg.d_theta)), allow_empty=allow_empty)
    return alpha_select(inputs, params.W_h[k], params.W_c[k], params.w_score[k],
                        allow_empty=allow_empty)


def hoi_step(state, objects, v_ct, params, mask=None, mode="eval", rng=None):
    """One frame: K selections over the objects, one LSTM step.

    objects: [m, N]; v_ct: [ctx_dim] raw frame context. Raises
    FrameSkippedError when no object is valid (caller may carry the state).
    """
    if objects.ndim != 2:
        raise ShapeError(f"hoi_step expects [m, N] objects, got {objects.shape}")
    if objects.shape[-1] == 0 or (mask is not None and not np.asarray(mask, bool).any()):
        raise FrameSkippedError("frame has no valid objects")
    attended, weights = [], []
    for k in range(params.cfg.K):
        proj = mlp_forward(params.g_theta[k], objects, mode, rng)
        out = _select(params, k, proj, v_ct, state.h, mask, allow_empty=False)
        attended.append(out.attended)
        weights.append(out.weights)
    x = T.concat(attended, axis=0)  # [K * d_theta]
    h, c = lstm_cell_step(params.lstm, x, state.h, state.c)
    return HoiState(h=h, c=c, weight_history=state.weight_history + [weights])


def hoi_step_batch(state, objects, v_ct, params, mask=None, mode="eval", rng=None):
    """Batched frame step [B, m, N]; samples with no valid objects keep their
    previous state (the computed update is blended out)."""
    B = objects.shape[0]
    if mask is not None:
        mask = np.asarray(mask, bool)
        frame_live = mask.any(axis=-1)
    else:
        frame_live = np.ones(B, bool)
    attended, weights = [], []
    for k in range(params.cfg.K):
        proj = mlp_forward(params.g_theta[k], objects, mode, rng)
        out = _select(params, k, proj, v_ct, state.h, mask, allow_empty=True)
        attended.append(out.attended)
        weights.append(out.weights)
    x = T.concat(attended, axis=-1)  # [B, K * d_theta]
    h, c = lstm_cell_step(params.lstm, x, state.h, state.c)
    if not frame_live.all():
        keep = T.Tensor(frame_live.astype(objects.dtype)[:, None])
        drop = T.Tensor((~frame_live).astype(objects.dtype)[:, None])
        h = T.add(T.mul(h, keep), T.mul(state.h, drop))
        c = T.add(T.mul(c, keep), T.mul(state.c, drop))
    return HoiState(h=h, c=c, weight_history=state.weight_history + [weights])


def _frame_arrays(video):
    """Pull (frames [T, m], list of (objects [N_t, m], mask)) out of a sample."""
    frames = video.frame_features
    frames = frames.data if isinstance(frames, T.Tensor) else np.asarray(frames)
    sets = []
    for entry in video.object_sets:
        feats, mask = entry
        feats = feats.data if isinstance(feats, T.Tensor) else np.asarray(feats)
        sets.append((feats, None if mask is None else np.asarray(mask, bool)))
    return frames, sets


def hoi_rollout(video, params, mode="eval", rng=None):
    """Fold hoi_step over all frames from zero state.

    Returns (final hidden state, list of per-frame hidden states, length T).
    Frames with no valid objects carry the state unchanged but still emit the
    carried hidden state into the sequence so time indexing stays aligned.
    """
    frames, sets = _frame_arrays(video)
    T_len = frames.shape[0]
    if T_len == 0:
        raise EmptyInputError("zero-length video")
    dtype = frames.dtype
    state = init_state(params, dtype=dtype)
    h_seq = []
    for t in range(T_len):
        feats, mask = sets[t]
        v_ct = T.Tensor(frames[t])
        try:
            state = hoi_step(state, T.Tensor(feats.T), v_ct, params, mask=mask, mode=mode, rng=rng)
        except FrameSkippedError:
            pass
        h_seq.append(state.h)
    return state.h, h_seq


def hoi_rollout_batch(frames, object_steps, params, mode="eval", rng=None):
    """Batched rollout.

    frames: [B, m, T] array; object_steps: list over t of (objects [B, m, N_t],
    mask [B, N_t] or None). Returns (h_final [B, hidden], h_seq list of [B, hidden]).
    """
    T_len = frames.shape[-1]
    if T_len == 0 or len(object_steps) != T_len:
        raise EmptyInputError(f"need one object set per frame, got {len(object_steps)} vs {T_len}")
    B = frames.shape[0]
    state = init_state(params, batch=B, dtype=frames.dtype)
    frames_t = T.Tensor(frames)
    h_seq = []
    for t in range(T_len):
        objs, mask = object_steps[t]
        objs = objs if isinstance(objs, T.Tensor) else T.Tensor(objs)
        v_ct = T.reshape(T.slice_axis(frames_t, -1, t, t + 1), (B, -1))
        state = hoi_step_batch(state, objs, v_ct, params, mask=mask, mode=mode, rng=rng)
        h_seq.append(state.h)
    return state.h, h_seq


class MeanpoolParams:
    """Object branch baseline: project objects, mean-pool, LSTM over time."""

    def __init__(self, in_dim, d_hidden, lstm_hidden, rng, dtype=np.float32, dims=None):
        dims = tuple(dims) if dims else (in_dim, d_hidden, d_hidden, d_hidden)
        self.g = MlpBlock(dims, rng, dtype=dtype)
        self.lstm = LstmCell(dims[-1], lstm_hidden, rng, dtype=dtype)

    def _components(self):
        return {"g": self.g, "lstm": self.lstm}

    def named_parameters(self, prefix="pool"):
        return named_params(self._components(), prefix)

    def named_stats(self, prefix="pool"):
        return named_stats(self._components(), prefix)

    def set_stats(self, values, prefix="pool"):
        set_stats(self._components(), values, prefix)


def _masked_mean_cols(mat, mask):
    """Mean over valid columns of [B, d, N] with bool mask [B, N] -> [B, d]."""
    if mask is None:
        return T.reduce_mean_rows(T.transpose_last2(mat))
    w = mask.astype(mat.dtype)[:, None, :]
    counts = np.maximum(mask.sum(axis=-1), 1).astype(mat.dtype)[:, None]
    summed = T.reduce_sum(T.mul(mat, T.Tensor(w)), axis=-1)
    return T.div(summed, T.Tensor(counts))


def baseline_meanpool(video, params, mode="eval", rng=None):
    """Mean of projected objects per frame, LSTM over frames, final h."""
    frames, sets = _frame_arrays(video)
    if frames.shape[0] == 0:
        raise EmptyInputError("zero-length video")
    state_h, state_c = params.lstm.zero_state(dtype=frames.dtype)
    for feats, mask in sets:
        if feats.shape[0] == 0 or (mask is not None and not mask.any()):
            continue
        proj = mlp_forward(params.g, T.Tensor(feats.T), mode, rng)  # [d, N]
        m = None if mask is None else mask.reshape(1, -1)
        pooled = _masked_mean_cols(T.reshape(proj, (1,) + proj.shape), m)
        pooled = T.reshape(pooled, (pooled.shape[-1],))
        state_h, state_c = lstm_cell_step(params.lstm, pooled, state_h, state_c)
    return state_h


def baseline_meanpool_batch(object_steps, params, mode="eval", rng=None):
    """Batched mean-pool baseline over (objects [B, m, N], mask) steps."""
    if not object_steps:
        raise EmptyInputError("zero-length video batch")
    first = object_steps[0][0]
    B = first.shape[0]
    dtype = first.dtype if not isinstance(first, T.Tensor) else first.data.dtype
    h, c = params.lstm.zero_state(batch=B, dtype=dtype)
    for objs, mask in object_steps:
        objs = objs if isinstance(objs, T.Tensor) else T.Tensor(objs)
        mask = None if mask is None else np.asarray(mask, bool)
        proj = mlp_forward(params.g, objs, mode, rng)
        pooled = _masked_mean_cols(proj, mask)
        h_new, c_new = lstm_cell_step(params.lstm, pooled, h, c)
        if mask is not None and not mask.any(axis=-1).all():
            live = mask.any(axis=-1)
            keep = T.Tensor(live.astype(objs.dtype)[:, None])
            drop = T.Tensor((~live).astype(objs.dtype)[:, None])
            h = T.add(T.mul(h_new, keep), T.mul(h, drop))
            c = T.add(T.mul(c_new, keep), T.mul(c, drop))
        else:
            h, c = h_new, c_new
    return h


class TuplesParams:
    """Tuple baseline: every object combination concatenated through an MLP."""

    def __init__(self, in_dim, arity, d_hidden, lstm_hidden, rng, dtype=np.float32, dims=None):
        if arity not in (2, 3):
            raise ConfigError(f"arity must be 2 or 3, got {arity}")
        self.arity = arity
        dims = tuple(dims) if dims else (arity * in_dim, d_hidden, d_hidden, d_hidden)
        if dims[0] != arity * in_dim:
            raise ConfigError(f"tuple MLP input dim must be {arity * in_dim}")
        self.g = MlpBlock(dims, rng, dtype=dtype)
        self.lstm = LstmCell(dims[-1], lstm_hidden, rng, dtype=dtype)

    def _components(self):
        return {"g": self.g, "lstm": self.lstm}

    def named_parameters(self, prefix="tuples"):
        return named_params(self._components(), prefix)

    def named_stats(self, prefix="tuples"):
        return named_stats(self._components(), prefix)

    def set_stats(self, values, prefix="tuples"):
        set_stats(self._components(), values, prefix)


def tuple_combinations(n, arity):
    """Lexicographic index combinations, the deterministic enumeration order."""
    return list(combinations(range(n), arity))


def baseline_tuples(video, arity, params, mode="eval", rng=None):
    """All C(N, arity) combinations through the MLP, mean, LSTM over time.

    Object features enter combination assembly as data (gradients flow into
    parameters, not object features). Frames with fewer valid objects than
    `arity` are skipped with the state carried.
    """
    if params.arity != arity:
        raise ConfigError(f"params built for arity {params.arity}, got {arity}")
    frames, sets = _frame_arrays(video)
    if frames.shape[0] == 0:
        raise EmptyInputError("zero-length video")
    h, c = params.lstm.zero_state(dtype=frames.dtype)
    for feats, mask in sets:
        try:
            pooled = tuples_frame(feats, mask, arity, params, mode=mode, rng=rng)
        except FrameSkippedError:
            continue  # carry state across frames with too few objects
        h, c = lstm_cell_step(params.lstm, pooled, h, c)
    return h


def tuples_frame(feats, mask, arity, params, mode="eval", rng=None):
    """Single-frame tuple features; FrameSkippedError when too few objects."""
    valid = np.arange(feats.shape[0]) if mask is None else np.flatnonzero(mask)
    if valid.size < arity:
        raise FrameSkippedError(f"{valid.size} valid objects < arity {arity}")
    combos = tuple_combinations(valid.size, arity)
    cols = np.stack(
        [np.concatenate([feats[valid[i]] for i in combo]) for combo in combos], axis=1
    )  # [arity * m, C]
    proj = mlp_forward(params.g, T.Tensor(cols), mode, rng)
    return T.reduce_mean_rows(T.transpose_last2(proj))  # mean over combinations
