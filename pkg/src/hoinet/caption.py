"""Two-layer LSTM caption decoder over the interaction module.

Per word step: the attention LSTM fuses the previous language hidden state,
the mean projected frame feature, and the previous word embedding; a temporal
attention over projected frame features yields an attended context and (in the
co-attention variant) the same weights pool the interaction hidden sequence;
the language LSTM consumes all three and projects to vocabulary logits.

Variant gates which context vectors reach the language LSTM:
  with_coattention  attended frames + frame weights reused on the h sequence
  without           attended frames + an independent attention over h
  img_only          attended frames only (object path zeroed, never computed)
  obj_only          independent attention over h only (image path zeroed)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, EmptyInputError, SequenceError, ShapeError
from .hoi import HoiConfig, HoiParams, hoi_rollout
from .layers import (
    LinearLayer,
    LstmCell,
    MlpBlock,
    dropout_forward,
    embedding_lookup,
    linear_forward,
    lstm_cell_step,
    mlp_forward,
    named_params,
    named_stats,
    set_stats,
    xavier_uniform,
)
from .sinet import cross_entropy

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

VARIANTS = ("with_coattention", "without", "img_only", "obj_only")


class CaptionModel:
    """Decoder parameters; defaults follow the published dimensioning."""

    def __init__(self, vocab_size, in_dim=2048, d_phi=1024, d_theta=512,
                 hoi_hidden=1024, d_emb=512, d_lstm=512, K=2, rng=None,
                 dtype=np.float32, mlp_dropout=0.5, emb_dropout=0.25):
        if vocab_size < 4:
            raise ConfigError(f"vocabulary must cover the 4 reserved ids, got {vocab_size}")
        if rng is None:
            rng = np.random.default_rng()
        self.vocab_size = vocab_size
        self.in_dim = in_dim
        self.d_phi = d_phi
        self.hoi_hidden = hoi_hidden
        self.d_emb = d_emb
        self.d_lstm = d_lstm
        self.emb_dropout = emb_dropout
        self.g_phi = MlpBlock((in_dim, d_phi), rng, dtype=dtype, dropout=mlp_dropout)
        cfg = HoiConfig(K=K, d_theta=d_theta, lstm_hidden=hoi_hidden)
        self.hoi = HoiParams(cfg, in_dim=in_dim, ctx_dim=in_dim, rng=rng, dtype=dtype,
                             g_theta_dims=(in_dim, d_theta), mlp_dropout=mlp_dropout)
        self.embed = T.Tensor(xavier_uniform(rng, vocab_size, d_emb, dtype), requires_grad=True)
        self.attn_lstm = LstmCell(d_lstm + d_phi + d_emb, d_lstm, rng, dtype=dtype)
        self.lang_lstm = LstmCell(d_lstm + d_phi + hoi_hidden, d_lstm, rng, dtype=dtype)
        # frame attention: scores = w' tanh(W_h h1 + W_c X) over time columns
        self.img_W_h = LinearLayer(d_lstm, d_phi, rng, dtype=dtype)
        self.img_W_c = LinearLayer(d_phi, d_phi, rng, dtype=dtype)
        self.img_w = T.Tensor((rng.uniform(-1, 1, d_phi) / np.sqrt(d_phi)).astype(dtype),
                              requires_grad=True)
        # independent attention over the interaction hidden sequence
        self.obj_W_h = LinearLayer(d_lstm, hoi_hidden, rng, dtype=dtype)
        self.obj_W_c = LinearLayer(hoi_hidden, hoi_hidden, rng, dtype=dtype)
        self.obj_w = T.Tensor((rng.uniform(-1, 1, hoi_hidden) / np.sqrt(hoi_hidden)).astype(dtype),
                              requires_grad=True)
        self.W_p = LinearLayer(d_lstm, vocab_size, rng, dtype=dtype)

    def _components(self):
        return {
            "g_phi": self.g_phi,
            "hoi": self.hoi._components(),
            "embed": self.embed,
            "attn_lstm": self.attn_lstm,
            "lang_lstm": self.lang_lstm,
            "img_W_h": self.img_W_h,
            "img_W_c": self.img_W_c,
            "img_w": self.img_w,
            "obj_W_h": self.obj_W_h,
            "obj_W_c": self.obj_W_c,
            "obj_w": self.obj_w,
            "W_p": self.W_p,
        }

    def named_parameters(self, prefix="caption"):
        return named_params(self._components(), prefix)

    def named_stats(self, prefix="caption"):
        return named_stats(self._components(), prefix)

    def set_stats(self, values, prefix="caption"):
        set_stats(self._components(), values, prefix)

    def zero_coarse(self, dtype):
        return T.Tensor(np.zeros(self.d_phi, dtype=dtype))

    def zero_fine(self, dtype):
        return T.Tensor(np.zeros(self.hoi_hidden, dtype=dtype))


def attention_lstm_step(model, h2_prev, mean_vc, word_id, state,
                        phase="eval", rng=None):
    """One attention-LSTM step; returns (h1, new (h, c) state).

    Input is the concatenation of the previous language hidden state, the
    mean projected frame feature, and the relu'd word embedding.
    """
    emb = embedding_lookup(model.embed, np.array([int(word_id)]))
    emb = T.relu(T.reshape(emb, (model.d_emb,)))
    emb = dropout_forward(emb, model.emb_dropout, phase, rng)
    x1 = T.concat([h2_prev, mean_vc, emb], axis=0)
    h1, c1 = lstm_cell_step(model.attn_lstm, x1, state[0], state[1])
    return h1, (h1, c1)


def _alpha_attend(h1, feats, W_h, W_c, w):
    """Additive attention over the columns of feats [d, T] driven by h1.

    Returns (attended [d], weights [1, T]).
    """
    query = linear_forward(W_h, h1)
    keys = linear_forward(W_c, feats)
    scores = T.matmul(T.reshape(w, (1, -1)), T.tanh(T.broadcast_add(query, keys)))
    weights = T.row_softmax(scores)
    attended = T.reshape(T.matmul(feats, T.transpose_last2(weights)), (feats.shape[0],))
    return attended, weights


def temporal_attend(model, h1, V_proj):
    """Attend over projected frame features [d_phi, T] -> (v_c hat, weights)."""
    if V_proj.ndim != 2 or V_proj.shape[0] != model.d_phi:
        raise ShapeError(f"expected [d_phi, T] features, got {V_proj.shape}")
    if V_proj.shape[-1] == 0:
        raise EmptyInputError("cannot attend over zero frames")
    return _alpha_attend(h1, V_proj, model.img_W_h, model.img_W_c, model.img_w)


def co_attend(alpha, h_seq):
    """Pool the interaction hidden sequence with the frame weights.

    alpha: [1, T] weights; h_seq: list of [d] hidden states, one per frame.
    """
    if len(h_seq) == 0:
        raise EmptyInputError("cannot pool an empty hidden sequence")
    if len(h_seq) != alpha.shape[-1]:
        raise ShapeError(f"{len(h_seq)} hidden states for {alpha.shape[-1]} weights")
    cols = [T.reshape(h, (-1, 1)) for h in h_seq]
    stacked = cols[0] if len(cols) == 1 else T.concat(cols, axis=1)
    pooled = T.matmul(stacked, T.transpose_last2(alpha))
    return T.reshape(pooled, (stacked.shape[0],))


def language_lstm_step(model, h1, vc_hat, h_hat, state):
    """One language-LSTM step; returns (logits over the vocabulary, new state)."""
    x2 = T.concat([h1, vc_hat, h_hat], axis=0)
    h2, c2 = lstm_cell_step(model.lang_lstm, x2, state[0], state[1])
    logits = linear_forward(model.W_p, h2)
    return logits, (h2, c2)


def _stack_columns(h_seq):
    cols = [T.reshape(h, (-1, 1)) for h in h_seq]
    return cols[0] if len(cols) == 1 else T.concat(cols, axis=1)


def _prepare(model, video, variant, phase, rng):
    """Run the per-video encoders a decode loop needs for `variant`."""
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    frames = video.frame_features
    frames = frames.data if isinstance(frames, T.Tensor) else np.asarray(frames)
    dtype = frames.dtype
    needs_img = variant != "obj_only"
    needs_obj = variant != "img_only"
    if needs_img:
        V_proj = mlp_forward(model.g_phi, T.Tensor(frames.T), phase, rng)
        mean_vc = T.reduce_mean(V_proj, axis=-1)
    else:
        V_proj = None
        mean_vc = model.zero_coarse(dtype)
    if needs_obj:
        _, h_seq = hoi_rollout(video, model.hoi, mode=phase, rng=rng)
        H = _stack_columns(h_seq)
    else:
        h_seq, H = None, None
    return mean_vc, V_proj, h_seq, H, dtype


def _word_step(model, variant, word_id, states, mean_vc, V_proj, h_seq, H,
               dtype, phase="eval", rng=None):
    """Advance both LSTMs one word; returns (logits, new states)."""
    (s1, s2) = states
    h1, s1 = attention_lstm_step(model, s2[0], mean_vc, word_id, s1, phase, rng)
    if variant == "obj_only":
        vc_hat = model.zero_coarse(dtype)
        alpha = None
    else:
        vc_hat, alpha = temporal_attend(model, h1, V_proj)
    if variant == "img_only":
        h_hat = model.zero_fine(dtype)
    elif variant == "with_coattention":
        h_hat = co_attend(alpha, h_seq)
    else:
        h_hat, _ = _alpha_attend(h1, H, model.obj_W_h, model.obj_W_c, model.obj_w)
    logits, s2 = language_lstm_step(model, h1, vc_hat, h_hat, s2)
    return logits, (s1, s2)


MAX_WORDS = 30


def check_tokens(tokens, vocab_size):
    """Validate a teacher-forcing sequence: BOS, up to 30 interior words, EOS."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 2:
        raise SequenceError(f"need at least [BOS, EOS], got {ids.tolist()}")
    if ids[0] != BOS_ID:
        raise SequenceError(f"sequence must start with BOS id {BOS_ID}, got {ids[0]}")
    if ids[-1] != EOS_ID:
        raise SequenceError(f"sequence must end with EOS id {EOS_ID}, got {ids[-1]}")
    interior = ids[1:-1]
    if interior.size > MAX_WORDS:
        raise SequenceError(f"at most {MAX_WORDS} words allowed, got {interior.size}")
    bad = np.isin(interior, (PAD_ID, BOS_ID, EOS_ID))
    if bad.any():
        raise SequenceError(f"reserved ids inside the sequence: {interior[bad].tolist()}")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise SequenceError(f"token ids outside [0, {vocab_size})")
    return ids


def _init_states(model, dtype):
    s1 = model.attn_lstm.zero_state(dtype=dtype)
    s2 = model.lang_lstm.zero_state(dtype=dtype)
    return s1, s2


def teacher_forced_logits(model, video, tokens, mode="with_coattention",
                          phase="eval", rng=None):
    """Logit tensors for each next-word position under teacher forcing."""
    ids = check_tokens(tokens, model.vocab_size)
    mean_vc, V_proj, h_seq, H, dtype = _prepare(model, video, mode, phase, rng)
    states = _init_states(model, dtype)
    out = []
    for i in range(len(ids) - 1):
        logits, states = _word_step(model, mode, ids[i], states, mean_vc,
                                    V_proj, h_seq, H, dtype, phase, rng)
        out.append(logits)
    return out


def caption_nll(model, video, tokens, mode="with_coattention", phase="eval",
                rng=None):
    """Teacher-forced negative log-likelihood, summed over word steps."""
    ids = check_tokens(tokens, model.vocab_size)
    logits_seq = teacher_forced_logits(model, video, tokens, mode, phase, rng)
    total = None
    for i, logits in enumerate(logits_seq):
        step_loss = cross_entropy(logits, int(ids[i + 1]))
        total = step_loss if total is None else T.add(total, step_loss)
    return total


@dataclass
class DecodeHypothesis:
    tokens: tuple = ()
    logp: float = 0.0
    states: tuple = None
    done: bool = False


def _hyp_order(hyp):
    return (-hyp.logp, len(hyp.tokens), hyp.tokens)


def beam_core(step_fn, init_states, vocab_size, beam, max_len,
              eos_id=EOS_ID, length_norm=False):
    """Generic beam search over a step function.

    step_fn(prev_word_id, states) -> (log-probability vector [vocab], states).
    Hypotheses terminate on EOS; at max_len words every survivor is forced to
    end with EOS so all scores cover a complete sequence. Finished hypotheses
    stay in the pruning pool, frozen, which makes beam=1 reduce to greedy.
    """
    if beam < 1:
        raise ConfigError(f"beam must be >= 1, got {beam}")
    pool = [DecodeHypothesis(states=init_states)]
    for depth in range(max_len + 1):
        if all(h.done for h in pool):
            break
        candidates = [h for h in pool if h.done]
        for hyp in pool:
            if hyp.done:
                continue
            prev = hyp.tokens[-1] if hyp.tokens else BOS_ID
            logp_vec, states = step_fn(prev, hyp.states)
            if depth == max_len:
                candidates.append(DecodeHypothesis(
                    hyp.tokens, hyp.logp + float(logp_vec[eos_id]), None, True))
                continue
            for wid in range(vocab_size):
                score = hyp.logp + float(logp_vec[wid])
                if wid == eos_id:
                    candidates.append(DecodeHypothesis(hyp.tokens, score, None, True))
                else:
                    candidates.append(DecodeHypothesis(
                        hyp.tokens + (wid,), score, states, False))
        candidates.sort(key=_hyp_order)
        pool = candidates[:beam]

    def final_score(h):
        if length_norm:
            return h.logp / (len(h.tokens) + 1)
        return h.logp

    pool.sort(key=lambda h: (-final_score(h), len(h.tokens), h.tokens))
    return pool


def beam_decode(model, video, beam=5, max_len=MAX_WORDS,
                mode="with_coattention", length_norm=False):
    """Decode one video; returns word ids without BOS or EOS."""
    mean_vc, V_proj, h_seq, H, dtype = _prepare(model, video, mode, "eval", None)
    init_states = _init_states(model, dtype)

    def step_fn(prev_word, states):
        logits, new_states = _word_step(model, mode, prev_word, states,
                                        mean_vc, V_proj, h_seq, H, dtype)
        z = logits.data
        logp = z - (np.max(z) + np.log(np.exp(z - np.max(z)).sum()))
        return logp, new_states

    ranked = beam_core(step_fn, init_states, model.vocab_size, beam, max_len,
                       length_norm=length_norm)
    return list(ranked[0].tokens)
