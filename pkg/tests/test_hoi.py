"""Recurrent interaction module: compositional oracles, invariances, baselines."""

from types import SimpleNamespace

import numpy as np
import pytest

from hoinet import attention as A
from hoinet import hoi as H
from hoinet import tensor as T
from hoinet.errors import EmptyInputError, FrameSkippedError
from hoinet.layers import lstm_cell_step, mlp_forward


def make_params(seed=0, K=2, m=6, d_theta=5, hidden=4, selection="dotprod", ctx_dim=None):
    cfg = H.HoiConfig(K=K, d_theta=d_theta, lstm_hidden=hidden, selection=selection)
    rng = np.random.default_rng(seed)
    return H.HoiParams(cfg, in_dim=m, ctx_dim=ctx_dim or m, rng=rng, dtype=np.float64)


def make_video(seed=1, T_len=3, N=4, m=6, masks=None):
    rng = np.random.default_rng(seed)
    frames = rng.standard_normal((T_len, m))
    sets = []
    for t in range(T_len):
        feats = rng.standard_normal((N, m))
        mask = None if masks is None else masks[t]
        sets.append((feats, mask))
    return SimpleNamespace(id=f"v{seed}", frame_features=frames, object_sets=sets,
                           label=None, caption=None)


class TestHoiStep:
    def test_three_steps_match_hand_unrolled_composition(self):
        """hoi_step must be bit-identical to composing the public ops by hand."""
        params = make_params(seed=3, K=2)
        video = make_video(seed=4, T_len=3)
        frames, sets = video.frame_features, video.object_sets

        state = H.init_state(params, dtype=np.float64)
        for t in range(3):
            state = H.hoi_step(state, T.Tensor(sets[t][0].T), T.Tensor(frames[t]), params)

        # hand-unrolled: mlp -> dotprod_select per group -> concat -> lstm step
        h = T.Tensor(np.zeros(4, np.float64))
        c = T.Tensor(np.zeros(4, np.float64))
        for t in range(3):
            objects = T.Tensor(sets[t][0].T)
            v_ct = T.Tensor(frames[t])
            attended = []
            for k in range(2):
                proj = mlp_forward(params.g_theta[k], objects, "eval")
                out = A.dotprod_select(
                    A.SelectionInputs(proj, v_ct, h, None),
                    params.W_h[k], params.W_c[k], np.sqrt(5.0),
                )
                attended.append(out.attended)
            x = T.concat(attended, axis=0)
            h, c = lstm_cell_step(params.lstm, x, h, c)

        assert np.array_equal(state.h.data, h.data)
        assert np.array_equal(state.c.data, c.data)

    def test_identical_groups_give_identical_attended(self):
        params = make_params(seed=5, K=2)
        # clone group-2 params from group-1
        for a, b in [(params.g_theta[0], params.g_theta[1])]:
            for sa, sb in zip(a.stages, b.stages):
                sb.lin.W.data[:] = sa.lin.W.data
                sb.lin.b.data[:] = sa.lin.b.data
                sb.bn.gamma.data[:] = sa.bn.gamma.data
                sb.bn.beta.data[:] = sa.bn.beta.data
                sb.bn.running_mean[:] = sa.bn.running_mean
                sb.bn.running_var[:] = sa.bn.running_var
        params.W_h[1].W.data[:] = params.W_h[0].W.data
        params.W_h[1].b.data[:] = params.W_h[0].b.data
        params.W_c[1].W.data[:] = params.W_c[0].W.data
        params.W_c[1].b.data[:] = params.W_c[0].b.data
        video = make_video(seed=6, T_len=1)
        state = H.init_state(params, dtype=np.float64)
        state = H.hoi_step(state, T.Tensor(video.object_sets[0][0].T),
                           T.Tensor(video.frame_features[0]), params)
        w1, w2 = state.weight_history[0]
        assert np.array_equal(w1.data, w2.data)

    def test_all_masked_frame_raises(self):
        params = make_params(seed=7, K=1)
        state = H.init_state(params, dtype=np.float64)
        with pytest.raises(FrameSkippedError):
            H.hoi_step(state, T.Tensor(np.zeros((6, 3))), T.Tensor(np.zeros(6)),
                       params, mask=np.zeros(3, bool))

    def test_weight_history_rows_are_distributions(self):
        for selection in ("dotprod", "alpha"):
            params = make_params(seed=8, selection=selection)
            video = make_video(seed=9, T_len=4)
            _, _ = H.hoi_rollout(video, params)
            state = H.init_state(params, dtype=np.float64)
            for t in range(4):
                state = H.hoi_step(state, T.Tensor(video.object_sets[t][0].T),
                                   T.Tensor(video.frame_features[t]), params)
            assert len(state.weight_history) == 4
            for per_group in state.weight_history:
                for w in per_group:
                    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


class TestHoiRollout:
    def test_single_frame_rollout(self):
        params = make_params(seed=10)
        video = make_video(seed=11, T_len=1)
        final, h_seq = H.hoi_rollout(video, params)
        assert len(h_seq) == 1
        assert np.array_equal(final.data, h_seq[0].data)

    def test_zero_video_zero_params_fixed_point(self):
        params = make_params(seed=12, K=1)
        for p in params.named_parameters().values():
            p.data[:] = 0
        video = make_video(seed=13, T_len=3)
        video.frame_features[:] = 0
        video.object_sets = [(np.zeros_like(f), m) for f, m in video.object_sets]
        final, h_seq = H.hoi_rollout(video, params)
        np.testing.assert_array_equal(final.data, np.zeros(4))

    def test_empty_video_rejected(self):
        params = make_params(seed=14)
        video = SimpleNamespace(id="e", frame_features=np.zeros((0, 6)),
                                object_sets=[], label=None, caption=None)
        with pytest.raises(EmptyInputError):
            H.hoi_rollout(video, params)

    def test_skipped_frames_carry_state(self):
        params = make_params(seed=15, K=1)
        masks = [np.ones(4, bool), np.zeros(4, bool), np.ones(4, bool)]
        video = make_video(seed=16, T_len=3, masks=masks)
        final, h_seq = H.hoi_rollout(video, params)
        assert len(h_seq) == 3
        assert np.array_equal(h_seq[0].data, h_seq[1].data)
        assert not np.array_equal(h_seq[1].data, h_seq[2].data)

    @pytest.mark.parametrize("selection", ["dotprod", "alpha"])
    def test_within_frame_permutation_invariant(self, selection):
        params = make_params(seed=17, selection=selection)
        video = make_video(seed=18, T_len=3)
        final, _ = H.hoi_rollout(video, params)
        rng = np.random.default_rng(19)
        permuted = make_video(seed=18, T_len=3)
        permuted.object_sets = [
            (f[rng.permutation(f.shape[0])], m) for f, m in permuted.object_sets
        ]
        final_p, _ = H.hoi_rollout(permuted, params)
        np.testing.assert_allclose(final.data, final_p.data, atol=1e-6)

    def test_temporal_order_sensitive(self):
        params = make_params(seed=20)
        video = make_video(seed=21, T_len=4)
        final, _ = H.hoi_rollout(video, params)
        swapped = make_video(seed=21, T_len=4)
        swapped.frame_features = swapped.frame_features[::-1].copy()
        swapped.object_sets = swapped.object_sets[::-1]
        final_s, _ = H.hoi_rollout(swapped, params)
        assert np.abs(final.data - final_s.data).max() > 1e-3

    @pytest.mark.parametrize("selection", ["dotprod", "alpha"])
    def test_grad_check_full_rollout(self, selection):
        params = make_params(seed=22, K=2, m=4, d_theta=3, hidden=3, selection=selection)
        # zero-init biases can park a relu-dead column exactly on the kink,
        # where central differences are invalid; nudge all biases off zero
        nrng = np.random.default_rng(99)
        for name, p in params.named_parameters().items():
            if name.endswith(".b"):
                p.data = p.data + 0.05 * nrng.standard_normal(p.data.shape)
        video = make_video(seed=23, T_len=3, N=3, m=4)

        def f():
            final, _ = H.hoi_rollout(video, params)
            return T.reduce_sum(T.square(final))

        tensors = list(params.named_parameters().values())
        assert T.grad_check(f, tensors) < 1e-4

    def test_batched_rollout_matches_per_video(self):
        params = make_params(seed=24, K=2)
        videos = [make_video(seed=30 + i, T_len=3, N=4, m=6) for i in range(3)]
        # stack into [B, m, T] and per-step [B, m, N]
        frames = np.stack([v.frame_features.T for v in videos])
        steps = []
        for t in range(3):
            objs = np.stack([v.object_sets[t][0].T for v in videos])
            steps.append((objs, None))
        h_batch, seq = H.hoi_rollout_batch(frames, steps, params)
        assert len(seq) == 3
        for i, v in enumerate(videos):
            h_one, _ = H.hoi_rollout(v, params)
            np.testing.assert_allclose(h_batch.data[i], h_one.data, atol=1e-10)

    def test_batched_rollout_blends_empty_frames(self):
        params = make_params(seed=25, K=1)
        videos = [make_video(seed=40 + i, T_len=3, N=4, m=6) for i in range(2)]
        masks = np.ones((2, 3, 4), bool)
        masks[1, 1, :] = False  # video 1 skips frame 1
        frames = np.stack([v.frame_features.T for v in videos])
        steps = []
        for t in range(3):
            objs = np.stack([v.object_sets[t][0].T for v in videos])
            steps.append((objs, masks[:, t]))
        h_batch, _ = H.hoi_rollout_batch(frames, steps, params)
        for i, v in enumerate(videos):
            v.object_sets = [(f, masks[i, t]) for t, (f, _) in enumerate(v.object_sets)]
            h_one, _ = H.hoi_rollout(v, params)
            np.testing.assert_allclose(h_batch.data[i], h_one.data, atol=1e-10)


class TestBaselines:
    def test_meanpool_single_object_equals_plain_lstm(self):
        rng = np.random.default_rng(50)
        params = H.MeanpoolParams(6, 5, 4, rng, dtype=np.float64)
        video = make_video(seed=51, T_len=3, N=1, m=6)
        final = H.baseline_meanpool(video, params)
        h = T.Tensor(np.zeros(4, np.float64))
        c = T.Tensor(np.zeros(4, np.float64))
        for feats, _ in video.object_sets:
            proj = mlp_forward(params.g, T.Tensor(feats.T), "eval")
            h, c = lstm_cell_step(params.lstm, T.reshape(proj, (5,)), h, c)
        np.testing.assert_allclose(final.data, h.data, atol=1e-12)

    def test_meanpool_duplicate_object_idempotent(self):
        rng = np.random.default_rng(52)
        params = H.MeanpoolParams(6, 5, 4, rng, dtype=np.float64)
        video = make_video(seed=53, T_len=2, N=1, m=6)
        doubled = make_video(seed=53, T_len=2, N=1, m=6)
        doubled.object_sets = [
            (np.vstack([f, f]), None) for f, _ in doubled.object_sets
        ]
        a = H.baseline_meanpool(video, params)
        b = H.baseline_meanpool(doubled, params)
        np.testing.assert_allclose(a.data, b.data, atol=1e-9)

    def test_meanpool_equals_uniform_frozen_alpha_attention(self):
        """K=1 alpha selection with zeroed query params is exactly mean-pooling."""
        rng = np.random.default_rng(54)
        pool = H.MeanpoolParams(6, 5, 4, rng, dtype=np.float64)
        hoi = make_params(seed=55, K=1, m=6, d_theta=5, hidden=4, selection="alpha")
        # share the projection MLP and the LSTM; freeze attention to uniform
        hoi.g_theta[0] = pool.g
        hoi.lstm = pool.lstm
        hoi.W_h[0].W.data[:] = 0
        hoi.W_h[0].b.data[:] = 0
        hoi.W_c[0].W.data[:] = 0
        hoi.W_c[0].b.data[:] = 0
        hoi.w_score[0].data[:] = 0
        video = make_video(seed=56, T_len=3, N=4, m=6)
        final_hoi, _ = H.hoi_rollout(video, hoi)
        final_pool = H.baseline_meanpool(video, pool)
        np.testing.assert_allclose(final_hoi.data, final_pool.data, atol=1e-12)

    def test_tuples_single_pair(self):
        rng = np.random.default_rng(57)
        params = H.TuplesParams(6, 2, 5, 4, rng, dtype=np.float64)
        video = make_video(seed=58, T_len=2, N=2, m=6)
        final = H.baseline_tuples(video, 2, params)
        h = T.Tensor(np.zeros(4, np.float64))
        c = T.Tensor(np.zeros(4, np.float64))
        for feats, _ in video.object_sets:
            col = np.concatenate([feats[0], feats[1]]).reshape(-1, 1)
            proj = mlp_forward(params.g, T.Tensor(col), "eval")
            h, c = lstm_cell_step(params.lstm, T.reshape(proj, (5,)), h, c)
        np.testing.assert_allclose(final.data, h.data, atol=1e-12)

    def test_combination_counts(self):
        assert len(H.tuple_combinations(15, 2)) == 105
        assert len(H.tuple_combinations(15, 3)) == 455
        assert len(H.tuple_combinations(2, 2)) == 1

    def test_tuples_skips_thin_frames(self):
        rng = np.random.default_rng(59)
        params = H.TuplesParams(6, 3, 5, 4, rng, dtype=np.float64)
        video = make_video(seed=60, T_len=2, N=2, m=6)  # N < arity everywhere
        final = H.baseline_tuples(video, 3, params)
        np.testing.assert_array_equal(final.data, np.zeros(4))

    def test_tuples_frame_error(self):
        rng = np.random.default_rng(61)
        params = H.TuplesParams(6, 3, 5, 4, rng, dtype=np.float64)
        with pytest.raises(FrameSkippedError):
            H.tuples_frame(np.zeros((2, 6)), None, 3, params)

    def test_meanpool_batch_matches_per_video(self):
        rng = np.random.default_rng(62)
        params = H.MeanpoolParams(6, 5, 4, rng, dtype=np.float64)
        videos = [make_video(seed=70 + i, T_len=3, N=4, m=6) for i in range(3)]
        steps = []
        for t in range(3):
            objs = np.stack([v.object_sets[t][0].T for v in videos])
            steps.append((objs, None))
        hb = H.baseline_meanpool_batch(steps, params)
        for i, v in enumerate(videos):
            h1 = H.baseline_meanpool(v, params)
            np.testing.assert_allclose(hb.data[i], h1.data, atol=1e-10)
