import numpy as np
import pytest

from osqapg.dsp import FeatureStats, make_mel_filterbank
from osqapg.likelihood import ml_loss_and_head_grads
from osqapg.nn import (
    AdamState,
    CheckpointDimensionError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    NetworkDims,
    NetworkParams,
    TrainHyper,
    adam_step,
    backward,
    forward,
    init_params,
    linear_to_mel_grads,
    load_checkpoint,
    save_checkpoint,
)

NO_REG = TrainHyper(dropout_in=0.0, dropout_hidden=0.0, l2=0.0)


@pytest.fixture(scope="module")
def fb4():
    return make_mel_filterbank(4, 64, 16000)


def small_net(seed, dims=NetworkDims(6, (8,), 4)):
    params = init_params(dims, seed)
    rng = np.random.default_rng(seed + 1000)
    # nonzero biases keep the variance head away from its trivial point
    return params.map(lambda a: a + 0.1 * rng.standard_normal(a.shape))


def numeric_grad(loss, params, h=1e-5):
    out = []
    for a in params.arrays():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            up = loss()
            a[idx] = old - h
            down = loss()
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n)
        assert np.all(err <= rtol * np.maximum(np.abs(a), np.abs(n)) + atol), err.max()


class TestInit:
    def test_deterministic(self):
        dims = NetworkDims(6, (8, 8), 4)
        a, b = init_params(dims, 3), init_params(dims, 3)
        assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))

    def test_seeds_differ(self):
        dims = NetworkDims(6, (8,), 4)
        a, b = init_params(dims, 0), init_params(dims, 1)
        assert any(not np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))

    def test_full_size_head_shape(self):
        params = init_params(NetworkDims(704, (1024, 1024, 1024), 64), 0)
        assert params.mask_head[0].shape == (64, 1024)
        assert params.var_head[0].shape == (64, 1024)
        assert params.hidden[0][0].shape == (1024, 704)

    def test_glorot_bounds_and_zero_bias(self):
        params = init_params(NetworkDims(30, (50,), 20), 0)
        W, b = params.hidden[0]
        assert np.abs(W).max() <= np.sqrt(6 / 80)
        assert not np.any(b)

    def test_zero_sized_layer(self):
        with pytest.raises(ValueError):
            NetworkDims(6, (0,), 4)


class TestForward:
    def test_ranges(self, fb4):
        params = small_net(0)
        x = np.random.default_rng(0).standard_normal((50, 6)) * 10
        post, _ = forward(params, x, NO_REG, fb4)
        assert np.all((post.mask_mel > 0) & (post.mask_mel < 1))
        assert np.all(post.var_mel >= 1e-4)
        assert np.all((post.mask_lin >= 0) & (post.mask_lin <= 1))
        assert np.all(post.var_lin >= 1e-4)

    def test_zero_weights(self):
        fb = make_mel_filterbank(64, 512, 16000)
        params = init_params(NetworkDims(704, (16,), 64), 0).map(np.zeros_like)
        post, _ = forward(params, np.ones((3, 704)), NO_REG, fb)
        np.testing.assert_array_equal(post.mask_mel, 0.5)
        np.testing.assert_array_equal(post.var_mel, 1 + 1e-4)
        # band-average heads expand constants to the same constant on every bin
        np.testing.assert_allclose(post.mask_lin, 0.5, atol=1e-12)
        np.testing.assert_allclose(post.var_lin, 1 + 1e-4, rtol=1e-12)

    def test_deterministic_without_dropout(self, fb4):
        params = small_net(1)
        x = np.random.default_rng(1).standard_normal((5, 6))
        a, _ = forward(params, x, TrainHyper(), fb4)
        b, _ = forward(params, x, TrainHyper(), fb4)
        assert np.array_equal(a.mask_lin, b.mask_lin) and np.array_equal(a.var_lin, b.var_lin)

    def test_dimension_mismatch(self, fb4):
        with pytest.raises(ValueError):
            forward(small_net(0), np.ones((2, 5)), NO_REG, fb4)
        with pytest.raises(ValueError):
            forward(small_net(0), np.ones((2, 6)), NO_REG, make_mel_filterbank(8, 64, 16000))

    def test_inverted_dropout_preserves_expectation(self, fb4):
        params = small_net(2)
        x = np.random.default_rng(2).standard_normal(6)
        hyper = TrainHyper(dropout_in=0.2, dropout_hidden=0.5)
        _, clean = forward(params, x, hyper, fb4)
        # rows draw independent masks, so one batched call is 10^4 draws
        _, noisy = forward(params, np.tile(x, (10000, 1)), hyper, fb4, np.random.default_rng(3))
        pre = noisy.pre[0]
        se = pre.std(axis=0, ddof=1) / np.sqrt(len(pre))
        assert np.all(np.abs(pre.mean(axis=0) - clean.pre[0][0]) <= 3 * se)


class TestBackward:
    def test_zero_head_grads(self, fb4):
        params = small_net(0)
        _, cache = forward(params, np.ones((3, 6)), NO_REG, fb4)
        grads = backward(params, cache, np.zeros((3, 4)), np.zeros((3, 4)), NO_REG)
        assert all(not np.any(g) for g in grads.arrays())

    def test_l2_term_in_isolation(self, fb4):
        params = small_net(0)
        hyper = TrainHyper(l2=0.1)
        _, cache = forward(params, np.ones((3, 6)), hyper, fb4)
        grads = backward(params, cache, np.zeros((3, 4)), np.zeros((3, 4)), hyper)
        for (W, b), (gW, gb) in zip([*params.hidden, params.mask_head, params.var_head],
                                    [*grads.hidden, grads.mask_head, grads.var_head]):
            assert np.array_equal(gW, 0.2 * W)
            assert not np.any(gb)

    def test_sum_of_mask_matches_finite_differences(self, fb4):
        params = small_net(5)
        x = np.random.default_rng(5).standard_normal((3, 6))

        def loss():
            return forward(params, x, NO_REG, fb4)[0].mask_mel.sum()

        post, cache = forward(params, x, NO_REG, fb4)
        grads = backward(params, cache, np.ones((3, 4)), np.zeros((3, 4)), NO_REG)
        assert_grads_close(grads.arrays(), numeric_grad(loss, params))

    def test_random_trials_match_finite_differences(self, fb4):
        rng = np.random.default_rng(42)
        for trial in range(100):
            params = small_net(trial)
            x = rng.standard_normal((2, 6))
            gm, gv = rng.standard_normal((2, 2, 4))

            def loss():
                post = forward(params, x, NO_REG, fb4)[0]
                return np.sum(gm * post.mask_mel + gv * post.var_mel)

            _, cache = forward(params, x, NO_REG, fb4)
            grads = backward(params, cache, gm, gv, NO_REG)
            assert_grads_close(grads.arrays(), numeric_grad(loss, params))

    def test_mismatched_cache(self, fb4):
        _, cache = forward(small_net(0), np.ones((2, 6)), NO_REG, fb4)
        other = small_net(0, NetworkDims(6, (8, 8), 4))
        with pytest.raises(ValueError):
            backward(other, cache, np.zeros((2, 4)), np.zeros((2, 4)), NO_REG)


class TestLinearToMelGrads:
    def test_full_chain_ml_loss(self, fb4):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 6))
        X = rng.standard_normal((3, 33)) + 1j * rng.standard_normal((3, 33))
        S = 0.5 * X + 0.2 * (rng.standard_normal((3, 33)) + 1j * rng.standard_normal((3, 33)))
        for seed in range(5):
            params = small_net(seed)

            def loss():
                return ml_loss_and_head_grads(S, X, forward(params, x, NO_REG, fb4)[0]).loss

            post, cache = forward(params, x, NO_REG, fb4)
            res = ml_loss_and_head_grads(S, X, post)
            gm, gv = linear_to_mel_grads(fb4, post, res.d_mask_lin, res.d_var_lin, NO_REG.c_sigma)
            grads = backward(params, cache, gm, gv, NO_REG)
            assert_grads_close(grads.arrays(), numeric_grad(loss, params), atol=1e-7)

    def test_clamped_bins_pass_nothing(self, fb4):
        params = small_net(0)
        post, _ = forward(params, np.zeros((1, 6)), NO_REG, fb4)
        post.mask_mel[:] = 1.0 - 1e-15
        post.var_mel[:] = 1e-6  # expands far below the floor
        gm, gv = linear_to_mel_grads(fb4, post, np.ones((1, 33)), np.ones((1, 33)), 1e-4)
        assert not np.any(gv)


class TestAdam:
    def test_zero_grad_identity(self):
        params = small_net(0)
        state = AdamState.zeros_like(params, 1e-3)
        new, state2 = adam_step(params, params.map(np.zeros_like), state)
        assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), new.arrays()))
        assert state2.t == 1

    @pytest.mark.parametrize("g", [3.7, -0.02])
    def test_first_step_is_sign(self, g):
        params = small_net(0)
        new, _ = adam_step(params, params.map(lambda a: np.full_like(a, g)), AdamState.zeros_like(params, 1e-3))
        for a, b in zip(params.arrays(), new.arrays()):
            np.testing.assert_allclose(b - a, -1e-3 * np.sign(g), atol=1e-6)

    def test_deterministic_and_pure(self):
        params = small_net(0)
        grads = small_net(1)
        state = AdamState.zeros_like(params)
        a, sa = adam_step(params, grads, state)
        b, sb = adam_step(params, grads, state)
        assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
        assert state.t == 0 and not np.any(state.m[0])

    def test_shape_mismatch(self):
        params = small_net(0)
        other = small_net(0, NetworkDims(6, (9,), 4))
        with pytest.raises(ValueError):
            adam_step(params, other, AdamState.zeros_like(params))


class TestCheckpoint:
    @pytest.fixture
    def blob(self):
        params = init_params(NetworkDims(10, (7, 7, 7), 4), 0)
        stats = FeatureStats(np.arange(10.0), np.full(10, 2.0))
        return params, stats, save_checkpoint(params, stats, {"Q": 2, "sample_rate": 16000, "note": "x"})

    def test_round_trip_bit_exact(self, blob):
        params, stats, data = blob
        p2, s2, meta = load_checkpoint(data)
        for a, b in zip(params.arrays(), p2.arrays()):
            assert a.tobytes() == b.tobytes()
        assert s2.mean.tobytes() == stats.mean.tobytes()
        assert meta["Q"] == 2 and meta["note"] == "x" and meta["sample_rate"] == 16000

    def test_magic_first(self, blob):
        assert blob[2].startswith(b"OSQAPG01")

    def test_bad_magic(self, blob):
        with pytest.raises(CheckpointFormatError, match="unrecognized checkpoint format"):
            load_checkpoint(b"XXXXXXXX" + blob[2][8:])

    def test_truncated_payload(self, blob):
        with pytest.raises(CheckpointTruncatedError, match="truncated payload"):
            load_checkpoint(blob[2][:-9])

    def test_trailing_bytes(self, blob):
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(blob[2] + b"\0")

    def test_stats_dimension_mismatch(self):
        params = init_params(NetworkDims(10, (7,), 4), 0)
        with pytest.raises(CheckpointDimensionError):
            save_checkpoint(params, FeatureStats(np.zeros(9), np.ones(9)))

    def test_params_structure(self):
        params = init_params(NetworkDims(3, (4, 5), 2), 0)
        again = NetworkParams.from_arrays(params.arrays())
        assert again.dims == params.dims
