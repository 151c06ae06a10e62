"""Parameterized building blocks: linear, batch-norm MLP stages, LSTM cell,
dropout, embedding lookup.

Layout conventions:
  - feature-set matrices are features-first: [d, n] per sample, [B, d, n] batched
  - vector batches are rows: [B, d]
  - linear_forward consumes feature-first layouts; linear_batch consumes [B, d]
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import (
    BatchTooSmallError,
    ConfigError,
    EmptyInputError,
    ShapeError,
    VocabError,
)


def xavier_uniform(rng, out_dim, in_dim, dtype):
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(dtype)


class LinearLayer:
    """Affine map y = W x + b with W stored [out, in], b zero-initialized."""

    def __init__(self, in_dim, out_dim, rng, dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.W = T.Tensor(xavier_uniform(rng, out_dim, in_dim, dtype), requires_grad=True)
        self.b = T.Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def parameters(self):
        return {"W": self.W, "b": self.b}


def linear_forward(layer, x):
    """Apply to a feature vector [in], a matrix [in, n], or batched [B, in, n]."""
    if x.ndim == 1:
        if x.shape[0] != layer.in_dim:
            raise ShapeError(f"linear expects dim {layer.in_dim}, got {x.shape}")
        col = T.matmul(layer.W, T.reshape(x, (layer.in_dim, 1)))
        return T.add(T.reshape(col, (layer.out_dim,)), layer.b)
    if x.shape[-2] != layer.in_dim:
        raise ShapeError(f"linear expects dim {layer.in_dim}, got {x.shape}")
    return T.broadcast_add(layer.b, T.matmul(layer.W, x))


def linear_batch(layer, x):
    """Apply to a batch of row vectors [B, in] -> [B, out]."""
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(f"linear_batch expects [B, {layer.in_dim}], got {x.shape}")
    return T.add(T.matmul(x, T.transpose_last2(layer.W)), layer.b)


class BatchNorm:
    """Per-feature normalization with running statistics.

    `feature_axis` selects the feature dimension; statistics are taken over
    every other axis. Train mode uses batch statistics and updates the running
    buffers; eval mode uses the running buffers only.
    """

    def __init__(self, dim, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = T.Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = T.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def state_arrays(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def batchnorm_forward(bn, x, mode, feature_axis=-2):
    """Normalize over all non-feature axes; affine by gamma/beta."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be train or eval, got {mode!r}")
    ax = feature_axis if feature_axis >= 0 else feature_axis + x.ndim
    if ax < 0 or ax >= x.ndim or x.shape[ax] != bn.dim:
        raise ShapeError(f"batchnorm dim {bn.dim} vs input {x.shape} axis {feature_axis}")
    norm_axes = tuple(i for i in range(x.ndim) if i != ax)
    count = 1
    for i in norm_axes:
        count *= x.shape[i]
    bshape = tuple(bn.dim if i == ax else 1 for i in range(x.ndim))
    gamma = T.reshape(bn.gamma, bshape)
    beta = T.reshape(bn.beta, bshape)

    if mode == "train":
        if count < 2:
            raise BatchTooSmallError(f"batch statistics need n >= 2, got n = {count}")
        mean = T.reduce_mean(x, axis=norm_axes, keepdims=True)
        centered = T.sub(x, mean)
        var = T.reduce_mean(T.square(centered), axis=norm_axes, keepdims=True)
        xhat = T.div(centered, T.sqrt(T.add(var, float(bn.eps))))
        # running buffers track batch statistics outside the graph
        m = bn.momentum
        batch_mean = mean.data.reshape(bn.dim)
        batch_var = var.data.reshape(bn.dim)
        bn.running_mean = ((1 - m) * bn.running_mean + m * batch_mean).astype(bn.running_mean.dtype)
        bn.running_var = ((1 - m) * bn.running_var + m * batch_var).astype(bn.running_var.dtype)
    else:
        rm = T.constant(bn.running_mean.reshape(bshape), like=x)
        rv = T.constant(bn.running_var.reshape(bshape), like=x)
        xhat = T.div(T.sub(x, rm), T.sqrt(T.add(rv, float(bn.eps))))
    return T.add(T.mul(xhat, gamma), beta)


def dropout_forward(x, rate, mode, rng=None):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if rate < 0 or rate >= 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return T.mul(x, T.constant(keep, like=x))


class MlpStage:
    def __init__(self, in_dim, out_dim, rng, dtype, use_bn=True, relu=True, dropout=0.0):
        self.bn = BatchNorm(in_dim, dtype=dtype) if use_bn else None
        self.lin = LinearLayer(in_dim, out_dim, rng, dtype=dtype)
        self.relu = relu
        self.dropout = dropout


class MlpBlock:
    """Stack of (batch-norm, linear, relu[, dropout]) stages.

    dims = (in, h1, ..., out); one stage per consecutive pair.
    """

    def __init__(self, dims, rng, dtype=np.float32, dropout=0.0, use_bn=True):
        if len(dims) < 2:
            raise ConfigError("MlpBlock needs at least one stage")
        self.dims = tuple(int(d) for d in dims)
        self.stages = [
            MlpStage(dims[i], dims[i + 1], rng, dtype, use_bn=use_bn, dropout=dropout)
            for i in range(len(dims) - 1)
        ]

    @property
    def in_dim(self):
        return self.dims[0]

    @property
    def out_dim(self):
        return self.dims[-1]


def mlp_forward(block, x, mode, rng=None):
    """Run the stage stack on [d, n] or [B, d, n] feature-set matrices."""
    if x.ndim < 2:
        raise ShapeError(f"mlp_forward expects a feature matrix, got {x.shape}")
    if x.shape[-1] == 0:
        raise EmptyInputError("mlp_forward on an empty feature set")
    if x.shape[-2] != block.in_dim:
        raise ShapeError(f"mlp expects feature dim {block.in_dim}, got {x.shape}")
    out = x
    for stage in block.stages:
        if stage.bn is not None:
            out = batchnorm_forward(stage.bn, out, mode, feature_axis=-2)
        out = linear_forward(stage.lin, out)
        if stage.relu:
            out = T.relu(out)
        if stage.dropout:
            out = dropout_forward(out, stage.dropout, mode, rng)
    return out


class LstmCell:
    """Single-step LSTM with gate order (input, forget, candidate, output).

    W_ih: [4h, in], W_hh: [4h, h], b: [4h]; forget-gate bias initialized to 1.
    """

    def __init__(self, in_dim, hidden, rng, dtype=np.float32):
        self.in_dim = in_dim
        self.hidden = hidden
        self.W_ih = T.Tensor(xavier_uniform(rng, 4 * hidden, in_dim, dtype), requires_grad=True)
        self.W_hh = T.Tensor(xavier_uniform(rng, 4 * hidden, hidden, dtype), requires_grad=True)
        bias = np.zeros(4 * hidden, dtype=dtype)
        bias[hidden : 2 * hidden] = 1.0
        self.b = T.Tensor(bias, requires_grad=True)

    def parameters(self):
        return {"W_ih": self.W_ih, "W_hh": self.W_hh, "b": self.b}

    def zero_state(self, batch=None, dtype=None):
        dt = dtype or self.W_ih.dtype
        shape = (self.hidden,) if batch is None else (batch, self.hidden)
        return T.Tensor(np.zeros(shape, dt)), T.Tensor(np.zeros(shape, dt))


def lstm_cell_step(cell, x, h_prev, c_prev):
    """One LSTM step on row vectors: [in]/[h] or batched [B, in]/[B, h]."""
    squeeze = x.ndim == 1
    if squeeze:
        x = T.reshape(x, (1, -1))
        h_prev = T.reshape(h_prev, (1, -1))
        c_prev = T.reshape(c_prev, (1, -1))
    if x.shape[-1] != cell.in_dim or h_prev.shape[-1] != cell.hidden:
        raise ShapeError(
            f"lstm expects in={cell.in_dim} h={cell.hidden}, got x {x.shape} h {h_prev.shape}"
        )
    gates = T.add(
        T.add(T.matmul(x, T.transpose_last2(cell.W_ih)), T.matmul(h_prev, T.transpose_last2(cell.W_hh))),
        cell.b,
    )
    h = cell.hidden
    i = T.sigmoid(T.slice_axis(gates, -1, 0, h))
    f = T.sigmoid(T.slice_axis(gates, -1, h, 2 * h))
    g = T.tanh(T.slice_axis(gates, -1, 2 * h, 3 * h))
    o = T.sigmoid(T.slice_axis(gates, -1, 3 * h, 4 * h))
    c = T.add(T.mul(f, c_prev), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c))
    if squeeze:
        h_new = T.reshape(h_new, (cell.hidden,))
        c = T.reshape(c, (cell.hidden,))
    return h_new, c


def named_params(component, prefix=""):
    """Flat name -> Tensor map for any composition of the layer types here.

    Understands LinearLayer, BatchNorm, LstmCell, MlpStage, MlpBlock, Tensor,
    and lists/tuples/dicts of those. Names are dotted paths.
    """
    sep = "." if prefix else ""
    out = {}
    if isinstance(component, T.Tensor):
        out[prefix or "param"] = component
    elif isinstance(component, LinearLayer):
        out[f"{prefix}{sep}W"] = component.W
        out[f"{prefix}{sep}b"] = component.b
    elif isinstance(component, BatchNorm):
        out[f"{prefix}{sep}gamma"] = component.gamma
        out[f"{prefix}{sep}beta"] = component.beta
    elif isinstance(component, LstmCell):
        out[f"{prefix}{sep}W_ih"] = component.W_ih
        out[f"{prefix}{sep}W_hh"] = component.W_hh
        out[f"{prefix}{sep}b"] = component.b
    elif isinstance(component, MlpStage):
        if component.bn is not None:
            out.update(named_params(component.bn, f"{prefix}{sep}bn"))
        out.update(named_params(component.lin, f"{prefix}{sep}lin"))
    elif isinstance(component, MlpBlock):
        for i, stage in enumerate(component.stages):
            out.update(named_params(stage, f"{prefix}{sep}stage{i}"))
    elif isinstance(component, (list, tuple)):
        for i, item in enumerate(component):
            out.update(named_params(item, f"{prefix}{sep}{i}"))
    elif isinstance(component, dict):
        for key, item in component.items():
            out.update(named_params(item, f"{prefix}{sep}{key}"))
    else:
        raise TypeError(f"cannot collect parameters from {type(component).__name__}")
    return out


def named_stats(component, prefix=""):
    """Flat name -> numpy array map of non-learned state (batch-norm buffers)."""
    sep = "." if prefix else ""
    out = {}
    if isinstance(component, BatchNorm):
        out[f"{prefix}{sep}running_mean"] = component.running_mean
        out[f"{prefix}{sep}running_var"] = component.running_var
    elif isinstance(component, MlpStage):
        if component.bn is not None:
            out.update(named_stats(component.bn, f"{prefix}{sep}bn"))
    elif isinstance(component, MlpBlock):
        for i, stage in enumerate(component.stages):
            out.update(named_stats(stage, f"{prefix}{sep}stage{i}"))
    elif isinstance(component, (list, tuple)):
        for i, item in enumerate(component):
            out.update(named_stats(item, f"{prefix}{sep}{i}"))
    elif isinstance(component, dict):
        for key, item in component.items():
            out.update(named_stats(item, f"{prefix}{sep}{key}"))
    elif isinstance(component, (T.Tensor, LinearLayer, LstmCell)):
        pass
    else:
        raise TypeError(f"cannot collect stats from {type(component).__name__}")
    return out


def set_stats(component, values, prefix=""):
    """Write back buffers produced by named_stats (checkpoint restore)."""
    sep = "." if prefix else ""
    if isinstance(component, BatchNorm):
        component.running_mean = np.array(values[f"{prefix}{sep}running_mean"])
        component.running_var = np.array(values[f"{prefix}{sep}running_var"])
    elif isinstance(component, MlpStage):
        if component.bn is not None:
            set_stats(component.bn, values, f"{prefix}{sep}bn")
    elif isinstance(component, MlpBlock):
        for i, stage in enumerate(component.stages):
            set_stats(stage, values, f"{prefix}{sep}stage{i}")
    elif isinstance(component, (list, tuple)):
        for i, item in enumerate(component):
            set_stats(item, values, f"{prefix}{sep}{i}")
    elif isinstance(component, dict):
        for key, item in component.items():
            set_stats(item, values, f"{prefix}{sep}{key}")


def embedding_lookup(table, ids):
    """Row(s) of an embedding table: scalar id -> [Emb], id array -> [..., Emb]."""
    ids_arr = np.asarray(ids)
    vocab = table.shape[0]
    if ids_arr.size and (ids_arr.min() < 0 or ids_arr.max() >= vocab):
        raise VocabError(f"token id outside [0, {vocab})")
    if ids_arr.ndim == 0:
        return T.reshape(T.gather_rows(table, ids_arr.reshape(1)), (table.shape[1],))
    return T.gather_rows(table, ids_arr)
