"""Action classifier: coarse temporal-attention branch plus the recurrent
interaction branch, fused by one linear head.

The coarse branch projects per-frame image features with a two-stage MLP and
pools them with scaled dot-product attention over time. The fine branch is the
interaction rollout's final hidden state. Both vectors are batch-normalized
separately before concatenation and the class projection.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import sdp_temporal
from .errors import ConfigError, LabelError
from .hoi import (
    HoiConfig,
    HoiParams,
    MeanpoolParams,
    baseline_meanpool,
    baseline_meanpool_batch,
    hoi_rollout,
    hoi_rollout_batch,
)
from .layers import (
    BatchNorm,
    LinearLayer,
    MlpBlock,
    batchnorm_forward,
    linear_batch,
    linear_forward,
    mlp_forward,
    named_params,
    named_stats,
    set_stats,
)


class SinetModel:
    """Two-branch video classifier.

    g_phi keeps the image feature width (two stages by default), so the fusion
    layer consumes g_phi's output width plus the interaction LSTM width.
    """

    def __init__(self, num_classes, in_dim=2048, hoi_cfg=None, rng=None,
                 dtype=np.float32, g_phi_dims=None, mlp_dropout=0.0,
                 fine_design="hoi"):
        if num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {num_classes}")
        if fine_design not in ("hoi", "meanpool"):
            raise ConfigError(f"fine_design must be hoi or meanpool, got {fine_design!r}")
        if rng is None:
            rng = np.random.default_rng()
        self.num_classes = num_classes
        self.in_dim = in_dim
        self.fine_design = fine_design
        self.hoi_cfg = hoi_cfg or HoiConfig()
        phi_dims = tuple(g_phi_dims) if g_phi_dims else (in_dim, in_dim, in_dim)
        if phi_dims[0] != in_dim:
            raise ConfigError(f"g_phi dims {phi_dims} must start at {in_dim}")
        self.g_phi = MlpBlock(phi_dims, rng, dtype=dtype, dropout=mlp_dropout)
        self.d_coarse = phi_dims[-1]
        if fine_design == "hoi":
            self.hoi = HoiParams(self.hoi_cfg, in_dim=in_dim, ctx_dim=in_dim, rng=rng,
                                 dtype=dtype, mlp_dropout=mlp_dropout)
            self.pool = None
        else:
            # ablation baseline: same projection capacity and cell width,
            # selection replaced by a plain mean over objects
            self.hoi = None
            self.pool = MeanpoolParams(in_dim, self.hoi_cfg.d_theta,
                                       self.hoi_cfg.lstm_hidden, rng, dtype=dtype)
        self.d_fine = self.hoi_cfg.lstm_hidden
        self.bn_coarse = BatchNorm(self.d_coarse, dtype=dtype)
        self.bn_fine = BatchNorm(self.d_fine, dtype=dtype)
        self.fusion = LinearLayer(self.d_coarse + self.d_fine, num_classes, rng, dtype=dtype)

    def _components(self):
        fine = {"hoi": self.hoi._components()} if self.hoi is not None \
            else {"pool": self.pool._components()}
        return {
            "g_phi": self.g_phi,
            **fine,
            "bn_coarse": self.bn_coarse,
            "bn_fine": self.bn_fine,
            "fusion": self.fusion,
        }

    def named_parameters(self, prefix="sinet"):
        return named_params(self._components(), prefix)

    def named_stats(self, prefix="sinet"):
        return named_stats(self._components(), prefix)

    def set_stats(self, values, prefix="sinet"):
        set_stats(self._components(), values, prefix)


def _coarse_branch(model, frames, mode, rng, frame_mask=None):
    """frames: Tensor [m, T] or [B, m, T] -> pooled [d] or [B, d]."""
    proj = mlp_forward(model.g_phi, frames, mode, rng)
    out = sdp_temporal(proj, np.sqrt(float(model.d_coarse)), mask=frame_mask)
    return out.attended


def sinet_forward(model, video, mode="eval", rng=None):
    """Score one video: logits [num_classes].

    The pre-fusion batch norms normalize over the video batch axis, so a
    single video cannot supply train-mode statistics; train mode surfaces
    BatchTooSmallError here by design (training runs the batched path).
    """
    frames = video.frame_features
    frames = frames.data if isinstance(frames, T.Tensor) else np.asarray(frames)
    v_c = _coarse_branch(model, T.Tensor(frames.T), mode, rng)
    if model.fine_design == "hoi":
        v_oi, _ = hoi_rollout(video, model.hoi, mode=mode, rng=rng)
    else:
        v_oi = baseline_meanpool(video, model.pool, mode=mode, rng=rng)
    v_c = batchnorm_forward(model.bn_coarse, T.reshape(v_c, (1, -1)), mode, feature_axis=-1)
    v_oi = batchnorm_forward(model.bn_fine, T.reshape(v_oi, (1, -1)), mode, feature_axis=-1)
    fused = T.concat([v_c, v_oi], axis=-1)
    logits = linear_batch(model.fusion, fused)
    return T.reshape(logits, (model.num_classes,))


def sinet_forward_batch(model, frames, object_steps, mode="eval", rng=None,
                        frame_mask=None):
    """Score a batch: frames [B, m, T], object_steps as in hoi_rollout_batch.

    Returns logits [B, num_classes].
    """
    frames = frames.data if isinstance(frames, T.Tensor) else np.asarray(frames)
    v_c = _coarse_branch(model, T.Tensor(frames), mode, rng, frame_mask=frame_mask)
    if model.fine_design == "hoi":
        v_oi, _ = hoi_rollout_batch(frames, object_steps, model.hoi, mode=mode, rng=rng)
    else:
        v_oi = baseline_meanpool_batch(object_steps, model.pool, mode=mode, rng=rng)
    v_c = batchnorm_forward(model.bn_coarse, v_c, mode, feature_axis=-1)
    v_oi = batchnorm_forward(model.bn_fine, v_oi, mode, feature_axis=-1)
    fused = T.concat([v_c, v_oi], axis=-1)
    return linear_batch(model.fusion, fused)


def cross_entropy(logits, labels):
    """Negative log softmax probability of the true class.

    logits [C] with an int label gives a scalar; logits [B, C] with labels [B]
    gives the batch mean. Stable via log-sum-exp.
    """
    num_classes = logits.shape[-1]
    labels_arr = np.asarray(labels)
    if labels_arr.shape != logits.shape[:-1]:
        raise LabelError(f"labels {labels_arr.shape} do not match logits {logits.shape}")
    if labels_arr.min() < 0 or labels_arr.max() >= num_classes:
        raise LabelError(f"labels must lie in [0, {num_classes}), got {labels_arr}")
    lse = T.logsumexp_last(logits)
    picked = T.take_index_last(logits, labels_arr)
    nll = T.sub(lse, picked)
    if nll.ndim == 0:
        return nll
    return T.reduce_mean(nll)


def topk_accuracy(logits, labels, k):
    """Fraction of rows whose label ranks in the top k logits.

    Ties rank the lower class index first so results are deterministic.
    """
    data = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    if data.ndim == 1:
        data = data[None, :]
    labels_arr = np.atleast_1d(np.asarray(labels))
    num_classes = data.shape[-1]
    if k < 1 or k > num_classes:
        raise ConfigError(f"k must lie in [1, {num_classes}], got {k}")
    if labels_arr.shape[0] != data.shape[0]:
        raise LabelError(f"{labels_arr.shape[0]} labels for {data.shape[0]} rows")
    # stable argsort on negated scores keeps lower indices first on ties
    top = np.argsort(-data, axis=-1, kind="stable")[:, :k]
    hits = (top == labels_arr[:, None]).any(axis=-1)
    return float(hits.mean())
