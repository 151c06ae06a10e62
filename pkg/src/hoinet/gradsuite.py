"""Finite-difference verification suite.

Checks every differentiable op against central differences, then three
end-to-end graphs: the action classifier with its loss, the caption decoder
teacher-forced NLL, and a bare interaction rollout. Each case runs across
many seeds; the suite reports the worst relative error seen anywhere.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .caption import CaptionModel, caption_nll
from .dataio import VideoSample
from .hoi import HoiConfig, HoiParams, hoi_rollout
from .sinet import SinetModel, cross_entropy, sinet_forward

PASS_THRESHOLD = {"f64": 1e-4, "f32": 5e-2}
STEP = {"f64": 1e-5, "f32": 1e-2}


def _p(rng, *shape, dtype=np.float64, positive=False, away=0.0):
    data = rng.standard_normal(shape).astype(dtype)
    if positive:
        data = np.abs(data) + 0.5
    elif away:
        data = data + away * np.sign(data)
    return T.Tensor(data, requires_grad=True)


def op_cases(rng, dtype):
    """(name, params, f) triples covering each differentiable op."""
    cases = []

    def case(name, params, build_out):
        # fixed random weighting drawn once, so f is the same scalar
        # function on every grad_check evaluation and every output
        # coordinate matters differently
        probe = build_out()
        w = T.Tensor(rng.standard_normal(probe.shape).astype(dtype))
        cases.append((name, params,
                      lambda: T.reduce_sum(T.mul(build_out(), w))))

    a = _p(rng, 3, 4, dtype=dtype)
    b = _p(rng, 3, 4, dtype=dtype)
    case("add", [a, b], lambda: T.add(a, b))
    c, d = _p(rng, 4, dtype=dtype), _p(rng, 4, dtype=dtype)
    case("sub", [c, d], lambda: T.sub(c, d))
    e, f = _p(rng, 2, 3, dtype=dtype), _p(rng, 2, 3, dtype=dtype)
    case("mul", [e, f], lambda: T.mul(e, f))
    g = _p(rng, 2, 3, dtype=dtype)
    h = _p(rng, 2, 3, dtype=dtype, positive=True)
    case("div", [g, h], lambda: T.div(g, h))
    i = _p(rng, 5, dtype=dtype)
    case("neg", [i], lambda: T.neg(i))
    j = _p(rng, 4, 3, dtype=dtype)
    case("tanh", [j], lambda: T.tanh(j))
    k = _p(rng, 4, 3, dtype=dtype)
    case("sigmoid", [k], lambda: T.sigmoid(k))
    l = _p(rng, 4, 4, dtype=dtype, away=0.1)  # keep clear of the kink
    case("relu", [l], lambda: T.relu(l))
    m = _p(rng, 3, 3, dtype=dtype)
    case("exp", [m], lambda: T.exp(m))
    n = _p(rng, 3, 3, dtype=dtype, positive=True)
    case("log", [n], lambda: T.log(n))
    o = _p(rng, 3, 3, dtype=dtype, positive=True)
    case("sqrt", [o], lambda: T.sqrt(o))
    p = _p(rng, 3, 3, dtype=dtype)
    case("square", [p], lambda: T.square(p))
    q, r = _p(rng, 3, 4, dtype=dtype), _p(rng, 4, 2, dtype=dtype)
    case("matmul", [q, r], lambda: T.matmul(q, r))
    s = _p(rng, 2, 6, dtype=dtype)
    case("reshape", [s], lambda: T.reshape(s, (3, 4)))
    t, u = _p(rng, 2, 3, dtype=dtype), _p(rng, 2, 2, dtype=dtype)
    case("concat", [t, u], lambda: T.concat([t, u], axis=1))
    v = _p(rng, 4, 5, dtype=dtype)
    case("slice_axis", [v], lambda: T.slice_axis(v, 1, 1, 4))
    w = _p(rng, 3, 5, dtype=dtype)
    case("row_softmax", [w], lambda: T.row_softmax(w))
    x = _p(rng, 3, 5, dtype=dtype)
    case("logsumexp_last", [x], lambda: T.logsumexp_last(x))
    y, z = _p(rng, 4, dtype=dtype), _p(rng, 4, 3, dtype=dtype)
    case("broadcast_add", [y, z], lambda: T.broadcast_add(y, z))
    aa = _p(rng, 4, 3, dtype=dtype)
    case("reduce_mean_rows", [aa], lambda: T.reduce_mean_rows(aa))
    ab = _p(rng, 2, 3, 4, dtype=dtype)
    case("reduce_sum", [ab], lambda: T.reduce_sum(ab, axis=(0, 2)))
    ac = _p(rng, 2, 3, 4, dtype=dtype)
    case("reduce_mean", [ac],
         lambda: T.reduce_mean(ac, axis=1, keepdims=True))
    ad = _p(rng, 5, 3, dtype=dtype)
    ids = rng.integers(0, 5, size=4)
    case("gather_rows", [ad], lambda: T.gather_rows(ad, ids))
    ae = _p(rng, 4, 6, dtype=dtype)
    picks = rng.integers(0, 6, size=4)
    case("take_index_last", [ae], lambda: T.take_index_last(ae, picks))
    return cases


def _nudge_biases(named, rng, scale=0.05):
    # zero-init biases can sit exactly on a relu kink where central
    # differences are invalid; shift them off before checking
    for name, p in named.items():
        if name.endswith(".b"):
            p.data = p.data + scale * rng.standard_normal(p.data.shape).astype(p.data.dtype)


def _toy_video(rng, T_frames, N_objs, m, dtype):
    frames = rng.standard_normal((T_frames, m)).astype(dtype)
    sets = [(rng.standard_normal((N_objs, m)).astype(dtype), None)
            for _ in range(T_frames)]
    return VideoSample(id="g", frame_features=frames, object_sets=sets)


def sinet_case(seed, dtype):
    rng = np.random.default_rng((seed, 11))
    cfg = HoiConfig(K=2, d_theta=8, lstm_hidden=8)
    model = SinetModel(4, in_dim=8, hoi_cfg=cfg, rng=rng, dtype=dtype,
                       g_phi_dims=(8, 8, 8))
    named = model.named_parameters()
    _nudge_biases(named, rng)
    video = _toy_video(rng, T_frames=2, N_objs=3, m=8, dtype=dtype)
    label = int(rng.integers(0, 4))

    def f():
        return cross_entropy(sinet_forward(model, video, mode="eval"), label)
    return "graph_sinet", list(named.values()), f


def caption_case(seed, dtype):
    rng = np.random.default_rng((seed, 12))
    model = CaptionModel(6, in_dim=5, d_phi=4, d_theta=4, hoi_hidden=4,
                         d_emb=3, d_lstm=4, K=2, rng=rng, dtype=dtype,
                         mlp_dropout=0.0, emb_dropout=0.0)
    named = model.named_parameters()
    _nudge_biases(named, rng)
    video = _toy_video(rng, T_frames=2, N_objs=2, m=5, dtype=dtype)
    tokens = [1, 4, 5, 2]

    def f():
        return caption_nll(model, video, tokens, mode="with_coattention")
    return "graph_caption", list(named.values()), f


def hoi_case(seed, dtype):
    rng = np.random.default_rng((seed, 13))
    cfg = HoiConfig(K=2, d_theta=6, lstm_hidden=6)
    params = HoiParams(cfg, in_dim=6, ctx_dim=6, rng=rng, dtype=dtype)
    named = params.named_parameters()
    _nudge_biases(named, rng)
    video = _toy_video(rng, T_frames=3, N_objs=3, m=6, dtype=dtype)
    w = rng.standard_normal(cfg.lstm_hidden).astype(dtype)

    def f():
        final_h, _ = hoi_rollout(video, params, mode="eval")
        return T.reduce_sum(T.mul(final_h, T.Tensor(w)))
    return "graph_hoi_rollout", list(named.values()), f


def run_suite(precision="f64", seeds=20, graph_seeds=None, progress=None):
    """Run every case over `seeds` seeds; returns (max_err, rows).

    rows: (case name, worst error over seeds). graph_seeds lets callers run
    the heavier end-to-end graphs on fewer seeds than the op cases.
    """
    if precision not in STEP:
        raise ValueError(f"precision must be f32 or f64, got {precision!r}")
    dtype = np.float64 if precision == "f64" else np.float32
    h = STEP[precision]
    if graph_seeds is None:
        graph_seeds = seeds
    worst = {}
    for seed in range(seeds):
        rng = np.random.default_rng((seed, 10))
        for name, params, f in op_cases(rng, dtype):
            err = T.grad_check(f, params, h=h)
            worst[name] = max(worst.get(name, 0.0), err)
            if progress:
                progress(name, seed, err)
    for seed in range(graph_seeds):
        for case_fn in (sinet_case, caption_case, hoi_case):
            name, params, f = case_fn(seed, dtype)
            err = T.grad_check(f, params, h=h)
            worst[name] = max(worst.get(name, 0.0), err)
            if progress:
                progress(name, seed, err)
    rows = sorted(worst.items())
    max_err = max(worst.values())
    return max_err, rows
