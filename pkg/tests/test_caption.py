"""Decoder: step oracles, teacher-forcing composition, beam-search equivalences."""

from types import SimpleNamespace

import numpy as np
import pytest

from hoinet import caption as C
from hoinet import tensor as T
from hoinet.errors import ConfigError, EmptyInputError, SequenceError, ShapeError
from hoinet.layers import linear_forward, lstm_cell_step, mlp_forward
from hoinet.sinet import cross_entropy


def make_model(seed=0, vocab=6, m=4, d_phi=3, d_theta=3, hidden=3, d_emb=3,
               d_lstm=3, K=1):
    rng = np.random.default_rng(seed)
    return C.CaptionModel(vocab, in_dim=m, d_phi=d_phi, d_theta=d_theta,
                          hoi_hidden=hidden, d_emb=d_emb, d_lstm=d_lstm, K=K,
                          rng=rng, dtype=np.float64, mlp_dropout=0.0,
                          emb_dropout=0.0)


def make_video(seed=1, T_len=3, N=2, m=4):
    rng = np.random.default_rng(seed)
    frames = rng.standard_normal((T_len, m))
    sets = [(rng.standard_normal((N, m)), None) for _ in range(T_len)]
    return SimpleNamespace(id=f"v{seed}", frame_features=frames, object_sets=sets,
                           label=None, caption=None)


def nudge_biases(model, seed=99):
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters().items():
        if name.endswith(".b"):
            p.data = p.data + 0.05 * rng.standard_normal(p.data.shape)


class TestDimensions:
    def test_published_widths_compose(self):
        model = C.CaptionModel(50, rng=np.random.default_rng(0))
        assert model.attn_lstm.W_ih.data.shape[1] == 512 + 1024 + 512
        assert model.lang_lstm.W_ih.data.shape[1] == 512 + 1024 + 1024
        assert model.W_p.W.data.shape == (50, 512)


class TestAttentionLstmStep:
    def test_zero_state_bos_defined(self):
        model = make_model()
        state = model.attn_lstm.zero_state(dtype=np.float64)
        h2 = T.Tensor(np.zeros(3))
        mean_vc = T.Tensor(np.zeros(3))
        h1, (h, c) = C.attention_lstm_step(model, h2, mean_vc, C.BOS_ID, state)
        assert h1.shape == (3,)
        assert np.isfinite(h1.data).all()
        assert h1 is h

    def test_deterministic(self):
        model = make_model(seed=2)
        state = model.attn_lstm.zero_state(dtype=np.float64)
        h2 = T.Tensor(np.ones(3) * 0.3)
        mean_vc = T.Tensor(np.ones(3) * -0.2)
        a, _ = C.attention_lstm_step(model, h2, mean_vc, 4, state)
        b, _ = C.attention_lstm_step(model, h2, mean_vc, 4, state)
        np.testing.assert_array_equal(a.data, b.data)

    def test_grad_check_one_step(self):
        model = make_model(seed=3)
        nudge_biases(model)
        h2 = T.Tensor(np.full(3, 0.1))
        mean_vc = T.Tensor(np.full(3, -0.3))

        def f():
            state = model.attn_lstm.zero_state(dtype=np.float64)
            h1, _ = C.attention_lstm_step(model, h2, mean_vc, 4, state)
            return T.reduce_sum(T.square(h1))

        params = [model.embed] + list(model.attn_lstm.parameters().values())
        assert T.grad_check(f, params) < 1e-4


class TestTemporalAttend:
    def test_single_frame_gets_full_weight(self):
        model = make_model(seed=4)
        h1 = T.Tensor(np.full(3, 0.2))
        V = T.Tensor(np.random.default_rng(5).standard_normal((3, 1)))
        v_hat, alpha = C.temporal_attend(model, h1, V)
        np.testing.assert_allclose(alpha.data, [[1.0]], atol=1e-12)
        np.testing.assert_allclose(v_hat.data, V.data[:, 0], atol=1e-12)

    def test_identical_frames_uniform(self):
        model = make_model(seed=6)
        h1 = T.Tensor(np.full(3, -0.4))
        col = np.random.default_rng(7).standard_normal((3, 1))
        V = T.Tensor(np.repeat(col, 4, axis=1))
        v_hat, alpha = C.temporal_attend(model, h1, V)
        np.testing.assert_allclose(alpha.data, np.full((1, 4), 0.25), atol=1e-12)
        np.testing.assert_allclose(v_hat.data, col[:, 0], atol=1e-12)

    def test_matches_op_composition(self):
        """Same result as composing the public ops by hand."""
        model = make_model(seed=8)
        rng = np.random.default_rng(9)
        h1 = T.Tensor(rng.standard_normal(3))
        V = T.Tensor(rng.standard_normal((3, 5)))
        v_hat, alpha = C.temporal_attend(model, h1, V)

        query = linear_forward(model.img_W_h, h1)
        keys = linear_forward(model.img_W_c, V)
        scores = T.matmul(T.reshape(model.img_w, (1, 3)),
                          T.tanh(T.broadcast_add(query, keys)))
        want_alpha = T.row_softmax(scores)
        want_v = T.matmul(V, T.transpose_last2(want_alpha))
        np.testing.assert_array_equal(alpha.data, want_alpha.data)
        np.testing.assert_array_equal(v_hat.data, want_v.data[:, 0])

    def test_zero_frames_rejected(self):
        model = make_model(seed=10)
        with pytest.raises(EmptyInputError):
            C.temporal_attend(model, T.Tensor(np.zeros(3)), T.Tensor(np.zeros((3, 0))))


class TestCoAttend:
    def test_one_hot_selects_that_state(self):
        rng = np.random.default_rng(11)
        h_seq = [T.Tensor(rng.standard_normal(4)) for _ in range(3)]
        alpha = T.Tensor(np.array([[0.0, 0.0, 1.0]]))
        out = C.co_attend(alpha, h_seq)
        np.testing.assert_allclose(out.data, h_seq[2].data, atol=1e-12)

    def test_uniform_is_mean(self):
        rng = np.random.default_rng(12)
        h_seq = [T.Tensor(rng.standard_normal(4)) for _ in range(5)]
        alpha = T.Tensor(np.full((1, 5), 0.2))
        out = C.co_attend(alpha, h_seq)
        want = np.mean([h.data for h in h_seq], axis=0)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_convex_combination_bounds(self):
        rng = np.random.default_rng(13)
        h_seq = [T.Tensor(rng.standard_normal(4)) for _ in range(6)]
        w = rng.random(6)
        alpha = T.Tensor((w / w.sum()).reshape(1, 6))
        out = C.co_attend(alpha, h_seq).data
        stack = np.stack([h.data for h in h_seq])
        assert (out >= stack.min(axis=0) - 1e-12).all()
        assert (out <= stack.max(axis=0) + 1e-12).all()

    def test_length_mismatch(self):
        h_seq = [T.Tensor(np.zeros(4))] * 3
        with pytest.raises(ShapeError):
            C.co_attend(T.Tensor(np.zeros((1, 2))), h_seq)
        with pytest.raises(EmptyInputError):
            C.co_attend(T.Tensor(np.zeros((1, 0))), [])


class TestLanguageLstmStep:
    def test_zero_projection_uniform_distribution(self):
        model = make_model(seed=14)
        model.W_p.W.data[...] = 0.0
        model.W_p.b.data[...] = 0.0
        state = model.lang_lstm.zero_state(dtype=np.float64)
        logits, _ = C.language_lstm_step(model, T.Tensor(np.ones(3)),
                                         T.Tensor(np.ones(3)),
                                         T.Tensor(np.ones(3)), state)
        probs = T.row_softmax(T.reshape(logits, (1, -1))).data[0]
        np.testing.assert_allclose(probs, np.full(6, 1 / 6), atol=1e-12)

    def test_distribution_sums_to_one(self):
        model = make_model(seed=15)
        state = model.lang_lstm.zero_state(dtype=np.float64)
        rng = np.random.default_rng(16)
        logits, _ = C.language_lstm_step(model, T.Tensor(rng.standard_normal(3)),
                                         T.Tensor(rng.standard_normal(3)),
                                         T.Tensor(rng.standard_normal(3)), state)
        probs = T.row_softmax(T.reshape(logits, (1, -1))).data
        np.testing.assert_allclose(probs.sum(), 1.0, atol=1e-6)

    def test_grad_check_one_step(self):
        model = make_model(seed=17)
        nudge_biases(model)
        rng = np.random.default_rng(18)
        h1 = T.Tensor(rng.standard_normal(3))
        vc = T.Tensor(rng.standard_normal(3))
        hh = T.Tensor(rng.standard_normal(3))

        def f():
            state = model.lang_lstm.zero_state(dtype=np.float64)
            logits, _ = C.language_lstm_step(model, h1, vc, hh, state)
            return cross_entropy(logits, 4)

        params = list(model.lang_lstm.parameters().values())
        params += list(model.W_p.parameters().values())
        assert T.grad_check(f, params) < 1e-4


class TestCaptionNll:
    def test_uniform_model_log_vocab_per_step(self):
        model = make_model(seed=19, vocab=5)
        model.W_p.W.data[...] = 0.0
        model.W_p.b.data[...] = 0.0
        video = make_video(seed=20)
        tokens = [C.BOS_ID, 4, 4, C.EOS_ID]
        loss = C.caption_nll(model, video, tokens)
        np.testing.assert_allclose(loss.data, 3 * np.log(5.0), rtol=1e-10)

    def test_img_only_leaves_interaction_params_untouched(self):
        model = make_model(seed=21)
        video = make_video(seed=22)
        hoi_params = [p for n, p in model.named_parameters().items() if ".hoi." in n]
        with T.Graph() as g:
            loss = C.caption_nll(model, video, [C.BOS_ID, 4, C.EOS_ID], mode="img_only")
            T.backward(loss, g)
        assert all(p.grad is None for p in hoi_params)

    def test_full_mode_matches_hand_unrolled_steps(self):
        """Sum of manual word steps reproduces caption_nll bit-exactly."""
        model = make_model(seed=23)
        video = make_video(seed=24, T_len=2)
        tokens = [C.BOS_ID, 4, 5, C.EOS_ID]
        got = C.caption_nll(model, video, tokens).data

        from hoinet.hoi import hoi_rollout
        V = mlp_forward(model.g_phi, T.Tensor(video.frame_features.T), "eval")
        mean_vc = T.reduce_mean(V, axis=-1)
        _, h_seq = hoi_rollout(video, model.hoi)
        s1 = model.attn_lstm.zero_state(dtype=np.float64)
        s2 = model.lang_lstm.zero_state(dtype=np.float64)
        total = None
        for i in range(3):
            h1, s1 = C.attention_lstm_step(model, s2[0], mean_vc, tokens[i], s1)
            vc_hat, alpha = C.temporal_attend(model, h1, V)
            h_hat = C.co_attend(alpha, h_seq)
            logits, s2 = C.language_lstm_step(model, h1, vc_hat, h_hat, s2)
            step = cross_entropy(logits, tokens[i + 1])
            total = step if total is None else T.add(total, step)
        np.testing.assert_array_equal(got, total.data)

    def test_all_variants_finite_and_nonnegative(self):
        model = make_model(seed=25)
        video = make_video(seed=26)
        tokens = [C.BOS_ID, 4, C.EOS_ID]
        for variant in C.VARIANTS:
            loss = float(C.caption_nll(model, video, tokens, mode=variant).data)
            assert np.isfinite(loss) and loss >= 0.0

    def test_variant_name_checked(self):
        model = make_model(seed=27)
        with pytest.raises(ConfigError):
            C.caption_nll(model, make_video(seed=28), [1, 4, 2], mode="both")

    @pytest.mark.parametrize("bad", [
        [4, 5, C.EOS_ID],               # no BOS
        [C.BOS_ID, 4, 5],               # no EOS
        [C.BOS_ID],                     # too short
        [C.BOS_ID, C.EOS_ID, C.EOS_ID],  # interior EOS
        [C.BOS_ID, C.PAD_ID, C.EOS_ID],  # interior PAD
        [C.BOS_ID] + [4] * 31 + [C.EOS_ID],  # over the word limit
    ])
    def test_malformed_sequences_rejected(self, bad):
        model = make_model(seed=29)
        with pytest.raises(SequenceError):
            C.caption_nll(model, make_video(seed=30), bad)

    def test_grad_check_small_decoder(self):
        model = make_model(seed=31, vocab=5)
        nudge_biases(model)
        video = make_video(seed=32, T_len=2, N=2)
        tokens = [C.BOS_ID, 4, C.EOS_ID]

        def f():
            return C.caption_nll(model, video, tokens)

        params = list(model.named_parameters().values())
        assert T.grad_check(f, params) < 1e-4


def table_step_fn(tables, vocab):
    """Deterministic log-prob tables keyed by (prev word, depth)."""
    def step(prev, depth):
        state = 0 if depth is None else depth
        key = (prev, state)
        if key in tables:
            logp = np.array(tables[key], dtype=np.float64)
        else:
            rng = np.random.default_rng(hash(key) % (2**32))
            z = rng.standard_normal(vocab)
            logp = z - (np.max(z) + np.log(np.exp(z - np.max(z)).sum()))
        return logp, state + 1
    return step


class TestBeamCore:
    def test_beam_two_beats_greedy_on_rigged_tree(self):
        # prev BOS: word 3 looks best; word 4's continuation wins overall
        tables = {
            (C.BOS_ID, 0): [-9, -9, -5.0, -0.1, -0.3],
            (3, 1): [-9, -9, -3.0, -4.0, -4.0],
            (4, 1): [-9, -9, -0.2, -4.0, -4.0],
        }
        step = table_step_fn(tables, 5)
        greedy = C.beam_core(step, 0, 5, beam=1, max_len=2)
        wide = C.beam_core(step, 0, 5, beam=2, max_len=2)
        assert greedy[0].tokens == (3,)
        assert wide[0].tokens == (4,)
        np.testing.assert_allclose(wide[0].logp, -0.5, atol=1e-12)

    def test_eos_favoring_model_returns_empty(self):
        tables = {(C.BOS_ID, 0): [-9, -9, -0.01, -5.0, -5.0]}
        out = C.beam_core(table_step_fn(tables, 5), 0, 5, beam=3, max_len=4)
        assert out[0].tokens == ()

    def test_wide_beam_equals_exhaustive_search(self):
        """With no pruning the beam must pick the global optimum."""
        vocab, max_len = 3, 3
        step = table_step_fn({}, vocab)

        def score(words):
            logp, state, prev = 0.0, 0, C.BOS_ID
            for w in words:
                vec, state = step(prev, state)
                logp += vec[w]
                prev = w
            vec, _ = step(prev, state)
            return logp + vec[C.EOS_ID]

        leaves = [()]
        frontier = [()]
        for _ in range(max_len):
            frontier = [s + (w,) for s in frontier for w in (0, 1)]
            leaves.extend(frontier)
        best = min(leaves, key=lambda s: (-score(s), len(s), s))

        got = C.beam_core(step, 0, vocab, beam=200, max_len=max_len)
        assert got[0].tokens == best
        np.testing.assert_allclose(got[0].logp, score(best), atol=1e-12)

    def test_beam_must_be_positive(self):
        with pytest.raises(ConfigError):
            C.beam_core(table_step_fn({}, 4), 0, 4, beam=0, max_len=2)


class TestBeamDecode:
    def test_beam_one_is_greedy(self):
        model = make_model(seed=33, vocab=7)
        video = make_video(seed=34)
        got = C.beam_decode(model, video, beam=1, max_len=4)

        # explicit greedy loop over the same step pipeline
        mean_vc, V, h_seq, H, dtype = C._prepare(model, video, "with_coattention", "eval", None)
        states = C._init_states(model, dtype)
        words, prev = [], C.BOS_ID
        for _ in range(4):
            logits, states = C._word_step(model, "with_coattention", prev, states,
                                          mean_vc, V, h_seq, H, dtype)
            nxt = int(np.argmax(logits.data))
            if nxt == C.EOS_ID:
                break
            words.append(nxt)
            prev = nxt
        assert got == words

    def test_eos_bias_yields_empty_caption(self):
        model = make_model(seed=35)
        model.W_p.b.data[C.EOS_ID] = 50.0
        assert C.beam_decode(model, make_video(seed=36), beam=3) == []

    def test_decode_is_clean_word_list(self):
        model = make_model(seed=37, vocab=9)
        out = C.beam_decode(model, make_video(seed=38), beam=4, max_len=5)
        assert len(out) <= 5
        assert all(w not in (C.BOS_ID, C.EOS_ID) for w in out)

    def test_beam_validation(self):
        model = make_model(seed=39)
        with pytest.raises(ConfigError):
            C.beam_decode(model, make_video(seed=40), beam=0)
