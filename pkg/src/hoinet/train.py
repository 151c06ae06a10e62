"""Optimization and evaluation: Adam, plateau schedule, deterministic
training loops for both tasks, caption metrics.

Every random choice derives from integer-tuple seeded generators
((seed, 2, epoch) shuffles, (seed, 3, epoch, batch) dropout), so a fixed
seed and config reproduce logs, checkpoints, and decodes exactly.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import caption as CAP
from . import dataio as D
from . import tensor as T
from .caption import caption_nll, teacher_forced_logits
from .errors import ConfigError, EmptyInputError, NumericError
from .hoi import HoiConfig
from .sinet import SinetModel, cross_entropy, sinet_forward_batch, topk_accuracy

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class AdamState:
    """Bias-corrected Adam moments keyed by parameter name."""

    def __init__(self, named_params, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2,
                 eps=ADAM_EPS):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in named_params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in named_params.items()}


def adam_step(state, named_params, grads):
    """One update over all parameters; rejects non-finite gradients whole."""
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name, p in named_params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.data = p.data - state.lr * update
    return named_params


@dataclass
class PlateauSchedule:
    """Cut the rate 10x when validation loss stalls for `patience` epochs."""

    lr: float
    patience: int = 5
    factor: float = 0.1
    min_delta: float = 1e-4
    best: float = np.inf
    stale: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")


def plateau_update(sched, val_loss):
    if not np.isfinite(val_loss):
        raise NumericError(f"validation loss is not finite: {val_loss}")
    if val_loss < sched.best - sched.min_delta:
        sched.best = float(val_loss)
        sched.stale = 0
    else:
        sched.stale += 1
        if sched.stale >= sched.patience:
            sched.lr *= sched.factor
            sched.stale = 0
    return sched.lr


@dataclass
class RunConfig:
    task: str = "action"
    lr: float | None = None          # defaults: 1e-5 action, 1e-3 caption
    batch: int | None = None         # defaults: 64 action, 32 caption
    K: int = 2
    selection: str = "dotprod"
    mode: str = "img+obj+coattn"     # caption context gating
    precision: str = "f32"
    seed: int = 0
    epochs: int = 10
    patience: int = 5
    clip_norm: float | None = None
    d_theta: int = 32
    lstm_hidden: int = 32
    d_phi: int = 32
    d_emb: int = 16
    d_lstm: int = 24
    num_classes: int | None = None
    beam: int = 5

    def __post_init__(self):
        if self.task not in ("action", "caption"):
            raise ConfigError(f"task must be action or caption, got {self.task!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.mode not in MODE_VARIANTS:
            raise ConfigError(f"mode must be one of {sorted(MODE_VARIANTS)}")
        if self.lr is None:
            self.lr = 1e-5 if self.task == "action" else 1e-3
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch is None:
            self.batch = 64 if self.task == "action" else 32
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


MODE_VARIANTS = {
    "img": "img_only",
    "obj": "obj_only",
    "img+obj": "without",
    "img+obj+coattn": "with_coattention",
}


# ---------------------------------------------------------------------------
# batching

def collate(samples, dtype):
    """Pad a list of samples to common frame and object counts with masks."""
    if not samples:
        raise EmptyInputError("empty batch")
    B = len(samples)
    m = samples[0].frame_features.shape[1]
    T_max = max(s.frame_features.shape[0] for s in samples)
    frames = np.zeros((B, m, T_max), dtype)
    frame_mask = np.zeros((B, T_max), bool)
    for i, s in enumerate(samples):
        t_i = s.frame_features.shape[0]
        frames[i, :, :t_i] = s.frame_features.T
        frame_mask[i, :t_i] = True
    steps = []
    for t in range(T_max):
        sizes = [s.object_sets[t][0].shape[0] if t < len(s.object_sets) else 0
                 for s in samples]
        n_max = max(max(sizes), 1)
        objs = np.zeros((B, m, n_max), dtype)
        mask = np.zeros((B, n_max), bool)
        for i, s in enumerate(samples):
            if t >= len(s.object_sets):
                continue
            feats, fmask = s.object_sets[t]
            n = feats.shape[0]
            if n == 0:
                continue
            objs[i, :, :n] = feats.T.astype(dtype)
            mask[i, :n] = True if fmask is None else np.asarray(fmask, bool)
        steps.append((objs, mask))
    labels = None
    if samples[0].label is not None:
        labels = np.asarray([s.label for s in samples], dtype=np.int64)
    return frames, steps, frame_mask, labels


def epoch_batches(n, batch, seed, epoch):
    """Seeded shuffle split; a trailing single sample joins the prior batch."""
    perm = np.random.default_rng((seed, 2, epoch)).permutation(n)
    slices = [perm[i:i + batch] for i in range(0, n, batch)]
    if len(slices) > 1 and len(slices[-1]) == 1:
        slices[-2] = np.concatenate([slices[-2], slices[-1]])
        slices.pop()
    return slices


def clip_gradients(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
    if total > max_norm and total > 0:
        scale = max_norm / total  # python float, so array dtypes survive
        return {n: (None if g is None else g * scale) for n, g in grads.items()}
    return grads


def cast_samples(samples, dtype):
    """Copy samples with features in the run precision."""
    out = []
    for s in samples:
        sets = [(feats.astype(dtype), mask) for feats, mask in s.object_sets]
        out.append(D.VideoSample(id=s.id, frame_features=s.frame_features.astype(dtype),
                                 object_sets=sets, label=s.label, caption=s.caption))
    return out


def snapshot(model):
    return {
        "params": {k: v.data.copy() for k, v in model.named_parameters().items()},
        "stats": {k: v.copy() for k, v in model.named_stats().items()},
    }


def load_snapshot(model, snap):
    for name, tensor in model.named_parameters().items():
        tensor.data = snap["params"][name].copy()
    model.set_stats({k: v.copy() for k, v in snap["stats"].items()})


def save_checkpoint_dir(path, model, adam=None, config=None):
    optim = {}
    extra = dict(config or {})
    if adam is not None:
        for name in adam.m:
            optim[name + ".m"] = adam.m[name]
            optim[name + ".v"] = adam.v[name]
        extra["adam.t"] = str(adam.t)
        extra["adam.lr"] = repr(adam.lr)
    D.checkpoint_save(path, model.named_parameters(), stats=model.named_stats(),
                      optim=optim, config=extra)


def load_adam(checkpoint, named_params, default_lr):
    lr = float(checkpoint.config.get("adam.lr", default_lr))
    adam = AdamState(named_params, lr)
    adam.t = int(checkpoint.config.get("adam.t", 0))
    for name in named_params:
        if name + ".m" in checkpoint.optim:
            adam.m[name] = checkpoint.optim[name + ".m"].copy()
            adam.v[name] = checkpoint.optim[name + ".v"].copy()
    return adam


# ---------------------------------------------------------------------------
# task plumbing

def build_action_model(config, in_dim, num_classes, rng=None):
    rng = rng or np.random.default_rng((config.seed, 4))
    if config.selection == "meanpool":
        # ablation baseline; HoiConfig only carries the widths here
        hoi_cfg = HoiConfig(K=config.K, d_theta=config.d_theta,
                            lstm_hidden=config.lstm_hidden)
        fine = "meanpool"
    else:
        hoi_cfg = HoiConfig(K=config.K, d_theta=config.d_theta,
                            lstm_hidden=config.lstm_hidden,
                            selection=config.selection)
        fine = "hoi"
    return SinetModel(num_classes, in_dim=in_dim, hoi_cfg=hoi_cfg, rng=rng,
                      dtype=config.dtype,
                      g_phi_dims=(in_dim, config.d_phi, config.d_phi),
                      fine_design=fine)


def build_caption_model(config, in_dim, vocab_size, rng=None):
    rng = rng or np.random.default_rng((config.seed, 4))
    return CAP.CaptionModel(vocab_size, in_dim=in_dim, d_phi=config.d_phi,
                            d_theta=config.d_theta, hoi_hidden=config.lstm_hidden,
                            d_emb=config.d_emb, d_lstm=config.d_lstm, K=config.K,
                            rng=rng, dtype=config.dtype)


def _action_batch_loss(model, samples, dtype, mode):
    frames, steps, frame_mask, labels = collate(samples, dtype)
    logits = sinet_forward_batch(model, frames, steps, mode=mode,
                                 frame_mask=frame_mask)
    return cross_entropy(logits, labels), logits, labels


def eval_action(model, samples, batch, dtype, k=1):
    """Mean loss and top-k accuracy over a sample list, eval mode."""
    losses, hits, total = [], 0.0, 0
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        loss, logits, labels = _action_batch_loss(model, chunk, dtype, "eval")
        losses.append(float(loss.data) * len(chunk))
        hits += topk_accuracy(logits, labels, k) * len(chunk)
        total += len(chunk)
    return sum(losses) / total, hits / total


def eval_caption(model, samples, vocab, variant):
    """Mean per-video NLL and teacher-forced next-token accuracy."""
    total_nll, correct, steps = 0.0, 0, 0
    for sample in samples:
        ids = vocab.encode(sample.caption)
        logits_seq = teacher_forced_logits(model, sample, ids, mode=variant)
        for i, logits in enumerate(logits_seq):
            if int(np.argmax(logits.data)) == ids[i + 1]:
                correct += 1
            steps += 1
            total_nll += float(cross_entropy(logits, int(ids[i + 1])).data)
    if not samples:
        raise EmptyInputError("no caption samples to evaluate")
    return total_nll / len(samples), correct / max(steps, 1)


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)
    best_val: float = np.inf
    best_snapshot: dict | None = None
    model: object = None
    adam: object = None

    @property
    def log_text(self):
        header = "epoch\ttrain_loss\tval_loss\tmetric"
        lines = [header] + [
            f"{e}\t{tl:.6f}\t{vl:.6f}\t{mt:.6f}" for e, tl, vl, mt in self.rows]
        return "\n".join(lines)


def train_loop(config, train_samples, val_samples, vocab=None, model=None,
               out_dir=None, adam=None, start_epoch=1):
    """Seeded epoch loop with per-epoch validation and best-model retention.

    Returns a TrainResult; with `out_dir` set, also writes last/ and best/
    checkpoints plus metrics.tsv there. Resuming from a checkpoint means
    passing the restored model and optimizer plus the next `start_epoch`;
    epoch-keyed shuffle streams then continue exactly where they left off.
    """
    if len(train_samples) == 0 or len(val_samples) == 0:
        raise EmptyInputError("train and validation sets must be non-empty")
    dtype = config.dtype
    if config.task == "caption":
        train_samples = cast_samples(train_samples, dtype)
        val_samples = cast_samples(val_samples, dtype)
    in_dim = train_samples[0].frame_features.shape[1]

    if config.task == "action":
        if model is None:
            classes = config.num_classes
            if classes is None:
                classes = int(max(s.label for s in train_samples)) + 1
            model = build_action_model(config, in_dim, classes)
    else:
        if vocab is None:
            raise ConfigError("caption task needs a vocabulary")
        if model is None:
            model = build_caption_model(config, in_dim, len(vocab))
        variant = MODE_VARIANTS[config.mode]

    named = model.named_parameters()
    if adam is None:
        adam = AdamState(named, config.lr)
    sched = PlateauSchedule(lr=adam.lr, patience=config.patience)
    result = TrainResult(model=model, adam=adam)

    meta = {
        "task": config.task, "K": str(config.K),
        "selection": config.selection, "mode": config.mode,
        "precision": config.precision, "d_theta": str(config.d_theta),
        "lstm_hidden": str(config.lstm_hidden), "d_phi": str(config.d_phi),
        "d_emb": str(config.d_emb), "d_lstm": str(config.d_lstm),
        "in_dim": str(in_dim),
    }
    if config.task == "action":
        meta["num_classes"] = str(model.num_classes)
    else:
        meta["vocab_size"] = str(model.vocab_size)

    if out_dir is not None:
        save_checkpoint_dir(f"{out_dir}/last", model, adam, config=meta)

    for epoch in range(start_epoch, config.epochs + 1):
        epoch_loss, seen = 0.0, 0
        for b, idx in enumerate(epoch_batches(len(train_samples), config.batch,
                                              config.seed, epoch)):
            batch = [train_samples[int(i)] for i in idx]
            rng = np.random.default_rng((config.seed, 3, epoch, b))
            for p in named.values():
                p.grad = None
            with T.Graph() as g:
                if config.task == "action":
                    loss, _, _ = _action_batch_loss(model, batch, dtype, "train")
                else:
                    parts = []
                    for sample in batch:
                        ids = vocab.encode(sample.caption)
                        parts.append(caption_nll(model, sample, ids, mode=variant,
                                                 phase="train", rng=rng))
                    total = parts[0]
                    for part in parts[1:]:
                        total = T.add(total, part)
                    loss = T.div(total, float(len(parts)))
                if not np.isfinite(loss.data):
                    raise NumericError(
                        f"loss diverged at epoch {epoch} batch {b}: {loss.data}")
                T.backward(loss, g)
            grads = {n: p.grad for n, p in named.items()}
            if config.clip_norm is not None:
                grads = clip_gradients(grads, config.clip_norm)
            adam.lr = sched.lr
            adam_step(adam, named, grads)
            epoch_loss += float(loss.data) * len(batch)
            seen += len(batch)

        train_loss = epoch_loss / seen
        if config.task == "action":
            val_loss, metric = eval_action(model, val_samples, config.batch, dtype)
        else:
            val_loss, metric = eval_caption(model, val_samples, vocab, variant)
        if not np.isfinite(val_loss):
            raise NumericError(f"validation loss diverged at epoch {epoch}")
        result.rows.append((epoch, train_loss, val_loss, metric))
        plateau_update(sched, val_loss)

        if val_loss < result.best_val:
            result.best_val = val_loss
            result.best_snapshot = snapshot(model)
            if out_dir is not None:
                save_checkpoint_dir(f"{out_dir}/best", model, adam,
                                    config={**meta, "epoch": str(epoch)})
        if out_dir is not None:
            save_checkpoint_dir(f"{out_dir}/last", model, adam,
                                config={**meta, "epoch": str(epoch)})

    if out_dir is not None:
        with open(f"{out_dir}/metrics.tsv", "w", encoding="utf-8") as fh:
            fh.write(result.log_text + "\n")
    return result


# ---------------------------------------------------------------------------
# caption quality metrics

def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _as_reference_list(references):
    if references and isinstance(references[0], (str, int, np.integer)):
        return [list(references)]
    return [list(r) for r in references]


def bleu(candidate, references, n_max=4):
    """Cumulative B@1..B@n_max with clipped precision and brevity penalty.

    The brevity penalty is the standard one: 1 when the candidate is longer
    than the closest reference, else exp(1 - r/c).
    """
    refs = _as_reference_list(references)
    candidate = list(candidate)
    c = len(candidate)
    if c == 0 or not refs:
        return [0.0] * n_max
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    precisions = []
    for n in range(1, n_max + 1):
        cand_counts = _ngram_counts(candidate, n)
        total = sum(cand_counts.values())
        if total == 0:
            precisions.append(0.0)
            continue
        best = Counter()
        for ref in refs:
            for gram, cnt in _ngram_counts(ref, n).items():
                best[gram] = max(best[gram], cnt)
        clipped = sum(min(cnt, best[gram]) for gram, cnt in cand_counts.items())
        precisions.append(clipped / total)
    bp = 1.0 if c > r else float(np.exp(1.0 - r / c))
    scores = []
    for k in range(1, n_max + 1):
        ps = precisions[:k]
        if min(ps) == 0.0:
            scores.append(0.0)
        else:
            scores.append(bp * float(np.exp(np.mean(np.log(ps)))))
    return scores


def corpus_bleu(pairs, n_max=4):
    """Aggregate clipped counts over (candidate, references) pairs."""
    clipped = np.zeros(n_max)
    totals = np.zeros(n_max)
    c_len, r_len = 0, 0
    for candidate, references in pairs:
        refs = _as_reference_list(references)
        candidate = list(candidate)
        if not candidate:
            r_len += min(len(r) for r in refs) if refs else 0
            continue
        c_len += len(candidate)
        r_len += min((abs(len(ref) - len(candidate)), len(ref)) for ref in refs)[1]
        for n in range(1, n_max + 1):
            cand_counts = _ngram_counts(candidate, n)
            best = Counter()
            for ref in refs:
                for gram, cnt in _ngram_counts(ref, n).items():
                    best[gram] = max(best[gram], cnt)
            clipped[n - 1] += sum(min(cnt, best[gram]) for gram, cnt in cand_counts.items())
            totals[n - 1] += sum(cand_counts.values())
    if c_len == 0:
        return [0.0] * n_max
    bp = 1.0 if c_len > r_len else float(np.exp(1.0 - r_len / c_len))
    scores = []
    for k in range(1, n_max + 1):
        ps = [clipped[i] / totals[i] if totals[i] else 0.0 for i in range(k)]
        if min(ps) == 0.0:
            scores.append(0.0)
        else:
            scores.append(bp * float(np.exp(np.mean(np.log(ps)))))
    return scores


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references, beta=1.2):
    """Longest-common-subsequence F-measure, best reference kept."""
    refs = _as_reference_list(references)
    candidate = list(candidate)
    if not candidate or not refs:
        return 0.0
    best = 0.0
    for ref in refs:
        if not ref:
            continue
        lcs = _lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p = lcs / len(candidate)
        r = lcs / len(ref)
        f = (1 + beta * beta) * p * r / (r + beta * beta * p)
        best = max(best, f)
    return best
