"""Command-line entry point.

Subcommands: train, eval, decode, flops, synth, gradcheck. Exit codes:
0 success, 1 validation or check failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import dataio as D
from .caption import beam_decode
from .costmodel import (DEVIATION_NOTE, REFERENCE_TOTALS, flop_hoi,
                        flop_table)
from .errors import ConfigError, HoinetError
from .gradsuite import PASS_THRESHOLD, run_suite
from .train import (MODE_VARIANTS, RunConfig, bleu, build_action_model,
                    build_caption_model, cast_samples, corpus_bleu,
                    eval_action, eval_caption, rouge_l, train_loop)

CONFIG_KEYS = {
    "task": str, "lr": float, "batch": int, "K": int, "selection": str,
    "mode": str, "precision": str, "seed": int, "epochs": int,
    "patience": int, "clip_norm": float, "d_theta": int, "lstm_hidden": int,
    "d_phi": int, "d_emb": int, "d_lstm": int, "num_classes": int,
    "beam": int,
}


def read_config_file(path):
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config line {line!r}")
        try:
            values[key] = CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return values


def make_config(args):
    """Config file values first, explicit flags override them."""
    values = {}
    if getattr(args, "config", None):
        values = read_config_file(args.config)
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return RunConfig(**values)


def _split(samples, seed, val_frac=0.2):
    perm = np.random.default_rng((seed, 9)).permutation(len(samples))
    shuffled = [samples[int(i)] for i in perm]
    n_val = max(1, int(len(samples) * val_frac))
    return shuffled[n_val:], shuffled[:n_val]


def _load_samples(path):
    return list(D.load_manifest(path))


def prepare_data(args, cfg):
    """Returns (train samples, val samples, vocab or None)."""
    if getattr(args, "data", None):
        train = _load_samples(args.data)
        if getattr(args, "val", None):
            val = _load_samples(args.val)
        else:
            train, val = _split(train, cfg.seed)
        vocab = None
        if cfg.task == "caption":
            if getattr(args, "vocab", None):
                vocab = D.Vocabulary.load(args.vocab)
            else:
                vocab = D.Vocabulary.build(
                    [s.caption for s in train if s.caption is not None])
        return train, val, vocab
    # no manifest: fall back to the built-in synthetic worlds
    if cfg.task == "action":
        ds = D.synth_triad(cfg.seed)
        train, val = _split(ds.samples, cfg.seed)
        return train, val, None
    ds = D.synth_caption(cfg.seed)
    train, val = _split(ds.samples, cfg.seed)
    return train, val, ds.vocab


def _model_from_checkpoint(ck):
    c = ck.config
    if "task" not in c:
        raise ConfigError("checkpoint lacks run metadata; cannot rebuild the model")
    cfg = RunConfig(
        task=c["task"], K=int(c["K"]), selection=c["selection"],
        mode=c.get("mode", "img+obj+coattn"), precision=c["precision"],
        d_theta=int(c["d_theta"]), lstm_hidden=int(c["lstm_hidden"]),
        d_phi=int(c["d_phi"]), d_emb=int(c["d_emb"]), d_lstm=int(c["d_lstm"]))
    in_dim = int(c["in_dim"])
    if cfg.task == "action":
        model = build_action_model(cfg, in_dim, int(c["num_classes"]))
    else:
        model = build_caption_model(cfg, in_dim, int(c["vocab_size"]))
    D.restore_model(model, ck)
    return model, cfg


def cmd_train(args):
    cfg = make_config(args)
    train, val, vocab = prepare_data(args, cfg)
    result = train_loop(cfg, train, val, vocab=vocab, out_dir=args.out)
    if args.out and vocab is not None:
        vocab.save(os.path.join(args.out, "vocab.txt"))
    print(result.log_text)
    return 0


def cmd_eval(args):
    ck = D.checkpoint_load(args.ckpt)
    model, cfg = _model_from_checkpoint(ck)
    samples = _load_samples(args.data) if args.data else None
    if cfg.task == "action":
        if samples is None:
            _, samples = _split(D.synth_triad(args.seed or 0).samples,
                                args.seed or 0)
        loss, acc = eval_action(model, samples, cfg.batch, cfg.dtype)
        print(f"loss\t{loss:.6f}")
        print(f"top1\t{acc:.6f}")
        return 0
    vocab = _resolve_vocab(args, samples)
    if samples is None:
        ds = D.synth_caption(args.seed or 0)
        _, samples = _split(ds.samples, args.seed or 0)
        vocab = ds.vocab
    samples = cast_samples(samples, cfg.dtype)
    variant = MODE_VARIANTS[cfg.mode]
    nll, acc = eval_caption(model, samples, vocab, variant)
    pairs = []
    for s in samples:
        ids = beam_decode(model, s, beam=args.beam or cfg.beam, mode=variant)
        pairs.append((vocab.decode(ids), [s.caption]))
    scores = corpus_bleu(pairs)
    rl = float(np.mean([rouge_l(c, refs) for c, refs in pairs]))
    print(f"nll\t{nll:.6f}")
    print(f"token_acc\t{acc:.6f}")
    for i, score in enumerate(scores, start=1):
        print(f"bleu{i}\t{score:.6f}")
    print(f"rouge_l\t{rl:.6f}")
    return 0


def _resolve_vocab(args, samples):
    if getattr(args, "vocab", None):
        return D.Vocabulary.load(args.vocab)
    beside = os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), "vocab.txt")
    if os.path.exists(beside):
        return D.Vocabulary.load(beside)
    if samples is not None:
        return D.Vocabulary.build(
            [s.caption for s in samples if s.caption is not None])
    return None


def cmd_decode(args):
    ck = D.checkpoint_load(args.ckpt)
    model, cfg = _model_from_checkpoint(ck)
    if cfg.task != "caption":
        raise ConfigError("decode needs a caption checkpoint")
    samples = _load_samples(args.data) if args.data else None
    vocab = _resolve_vocab(args, samples)
    if samples is None:
        ds = D.synth_caption(args.seed or 0)
        _, samples = _split(ds.samples, args.seed or 0)
        vocab = ds.vocab
    samples = cast_samples(samples, cfg.dtype)
    variant = MODE_VARIANTS[args.mode or cfg.mode]
    for s in samples:
        ids = beam_decode(model, s, beam=args.beam or cfg.beam, mode=variant)
        print(f"{s.id}\t{' '.join(vocab.decode(ids))}")
    return 0


def cmd_flops(args):
    if args.K is not None:
        report = flop_hoi(args.N, args.T, args.K, args.d, args.d)
        for term, value in report.terms.items():
            print(f"{term}\t{value}")
        print(f"per_step\t{report.per_timestep}")
        print(f"total\t{report.total:.6g}")
        ref = REFERENCE_TOTALS.get(report.design)
        if ref is not None:
            dev = (report.total - ref) / ref
            note = f" ({DEVIATION_NOTE})" if abs(dev) > 0.05 else ""
            print(f"reference\t{ref:.4g}\t{dev:+.1%}{note}")
        return 0
    print(flop_table(args.N, args.T, args.d, args.d, tsv=args.tsv))
    return 0


def cmd_synth(args):
    if args.task == "action":
        ds = D.synth_triad(args.seed, sigma=args.sigma)
        manifest = D.save_dataset(ds.samples, args.out)
        print(f"wrote {len(ds.samples)} action samples to {manifest}")
        return 0
    ds = D.synth_caption(args.seed, sigma=args.sigma)
    manifest = D.save_dataset(ds.samples, args.out)
    ds.vocab.save(os.path.join(args.out, "vocab.txt"))
    print(f"wrote {len(ds.samples)} caption samples to {manifest}")
    return 0


def cmd_gradcheck(args):
    precision = args.precision or "f64"
    max_err, rows = run_suite(precision=precision, seeds=args.seeds,
                              graph_seeds=args.graph_seeds)
    for name, err in rows:
        print(f"{name}\t{err:.3e}")
    threshold = PASS_THRESHOLD[precision]
    status = "pass" if max_err < threshold else "FAIL"
    print(f"max_relative_error\t{max_err:.3e}\t({status}, threshold {threshold:g})")
    return 0 if max_err < threshold else 1


def _add_run_flags(p):
    p.add_argument("--task", choices=["action", "caption"])
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--selection", choices=["dotprod", "alpha"])
    p.add_argument("--mode", choices=sorted(MODE_VARIANTS))
    p.add_argument("--precision", choices=["f32", "f64"])
    p.add_argument("--d-theta", dest="d_theta", type=int)
    p.add_argument("--lstm-hidden", dest="lstm_hidden", type=int)
    p.add_argument("--d-phi", dest="d_phi", type=int)
    p.add_argument("--d-emb", dest="d_emb", type=int)
    p.add_argument("--d-lstm", dest="d_lstm", type=int)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--beam", type=int)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hoinet",
        description="higher-order object interaction models for video")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="train a model")
    _add_run_flags(p)
    p.add_argument("--data", help="manifest.tsv for training")
    p.add_argument("--val", help="manifest.tsv for validation")
    p.add_argument("--vocab", help="vocabulary file (caption task)")
    p.add_argument("--out", help="checkpoint/metrics directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="manifest.tsv to score")
    p.add_argument("--vocab")
    p.add_argument("--seed", type=int)
    p.add_argument("--beam", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", help="beam-decode captions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--vocab")
    p.add_argument("--seed", type=int)
    p.add_argument("--beam", type=int)
    p.add_argument("--mode", choices=sorted(MODE_VARIANTS))
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("flops", help="analytic cost table")
    p.add_argument("--N", type=int, default=15)
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--d", type=int, default=2048)
    p.add_argument("--K", type=int)
    p.add_argument("--tsv", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--task", choices=["action", "caption"], default="action")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference verification")
    p.add_argument("--precision", choices=["f32", "f64"], default="f64")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--graph-seeds", dest="graph_seeds", type=int)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except HoinetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
