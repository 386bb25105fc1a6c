import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from osqapg.dsp import MelFilterbank
from osqapg.likelihood import gaussian_log_likelihood, log_likelihood_partials
from osqapg.nn import AdamState, MaskPosterior, NetworkDims, TrainHyper, forward, init_params
from osqapg.policy import (
    PGConfig,
    PGItem,
    ScoredCandidate,
    baseline_subtract,
    pg_update_step,
    pg_utterance_grads,
    sample_output_candidates,
)

HYPER = TrainHyper(dropout_in=0.0, dropout_hidden=0.0, l2=0.0)
ONE_BIN = MelFilterbank(np.ones((1, 1)), np.ones((1, 1)))


def posterior(mask, var):
    """Posterior from (n_bins, T) arrays."""
    mask, var = np.asarray(mask, float), np.asarray(var, float)
    return MaskPosterior(mask.T, var.T, mask.T, var.T)


def random_spec(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def toy_net(seed=0, n_in=2, hidden=4):
    params = init_params(NetworkDims(n_in, (hidden,), 1), seed)
    rng = np.random.default_rng(seed + 7)
    return params.map(lambda a: a + 0.1 * rng.standard_normal(a.shape))


class TestSampling:
    def test_epsilon_zero_gives_map(self):
        rng = np.random.default_rng(0)
        X = random_spec(rng, (5, 7))
        post = posterior(rng.uniform(0, 1, (5, 7)), np.full((5, 7), 0.3))
        cands = sample_output_candidates(post, X, PGConfig(K=4, epsilon=0.0), rng)
        for c in cands:
            assert np.array_equal(c.mask, post.mask)
            assert np.array_equal(c.output, cands[0].output)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(0.0, 1.0), st.floats(0.0, 0.5))
    def test_constraints(self, seed, eps, lam):
        rng = np.random.default_rng(seed)
        X = random_spec(rng, (6, 4))
        post = posterior(rng.uniform(0, 1, (6, 4)), rng.uniform(1e-4, 2, (6, 4)))
        for c in sample_output_candidates(post, X, PGConfig(K=3, epsilon=eps, lam=lam), rng):
            assert np.all((c.mask >= 0) & (c.mask <= 1))
            assert np.all(np.abs(c.mask - post.mask) <= lam + 1e-12)
            np.testing.assert_array_equal(c.output, c.mask * X)

    def test_default_lambda_bound(self):
        rng = np.random.default_rng(1)
        X = random_spec(rng, (20, 20))
        post = posterior(rng.uniform(0, 1, (20, 20)), np.full((20, 20), 5.0))
        cands = sample_output_candidates(post, X, PGConfig(), rng)
        assert max(np.abs(c.mask - post.mask).max() for c in cands) <= 0.05 + 1e-12

    def test_small_noise_matches_delta_method(self):
        rng = np.random.default_rng(2)
        n = 4000
        X = np.full((1, n), 10.0 * np.exp(0.7j))
        post = posterior(np.full((1, n), 0.5), np.full((1, n), 1e-4))
        cands = sample_output_candidates(post, X, PGConfig(K=2, epsilon=1.0, lam=10.0), rng)
        delta = np.concatenate([c.mask - 0.5 for c in cands], axis=None)
        predicted = np.sqrt(1e-4) / 10.0
        assert predicted / 3 <= delta.std() <= 3 * predicted

    def test_k_below_two(self):
        with pytest.raises(ValueError):
            PGConfig(K=1)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(0)
        post = posterior(np.ones((2, 2)), np.ones((2, 2)))
        with pytest.raises(ValueError):
            sample_output_candidates(post, np.ones((3, 2)), PGConfig(K=2), rng)


class TestBaseline:
    def test_hand_value(self):
        assert baseline_subtract([60, 40]).tolist() == [10.0, -10.0]

    def test_all_equal(self):
        assert not np.any(baseline_subtract([3.3] * 5))

    def test_nan(self):
        with pytest.raises(ValueError):
            baseline_subtract([1.0, float("nan")])
        with pytest.raises(ValueError):
            baseline_subtract([1.0])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=30))
    def test_sums_to_zero(self, z):
        assert abs(baseline_subtract(z).sum()) <= 1e-9 * max(1.0, max(abs(v) for v in z))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=20), st.integers(-10 ** 6, 10 ** 6))
    def test_shift_invariant_exactly(self, z, c):
        scores = [v / 8 for v in z]
        a = baseline_subtract(scores)
        b = baseline_subtract([s + c for s in scores])
        assert a.tobytes() == b.tobytes()


def weighted_ll(params, feats, X, cands, fb):
    """sum_k B_k / (K T) * sum_tau ln p(candidate_k | X)."""
    post, _ = forward(params, feats, HYPER, fb)
    T = feats.shape[0]
    return sum(c.adv_score / (len(cands) * T)
               * gaussian_log_likelihood(c.output.T, X.T, post.mask_lin, post.var_lin) for c in cands)


def fd_grads(params, fn, h=1e-6):
    out = []
    for a in params.arrays():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            up = fn()
            a[idx] = old - h
            down = fn()
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


class TestUtteranceGrads:
    def setup_method(self):
        self.params = toy_net()
        self.feats = np.array([[0.3, -1.2]])
        self.X = np.array([[1.5 - 0.5j]])
        self.post, self.cache = forward(self.params, self.feats, HYPER, ONE_BIN)
        G = self.post.mask
        self.cands = [ScoredCandidate(G + d, (G + d) * self.X, adv_score=b)
                      for d, b in ((0.03, 1.0), (-0.03, -1.0))]

    def grads(self, cands=None, feats=None, X=None):
        feats = self.feats if feats is None else feats
        X = self.X if X is None else X
        post, cache = forward(self.params, feats, HYPER, ONE_BIN)
        return pg_utterance_grads(cands or self.cands, post, cache, X, self.params, HYPER, ONE_BIN)

    def test_single_bin_matches_finite_differences(self):
        analytic = self.grads().arrays()
        numeric = fd_grads(self.params, lambda: weighted_ll(self.params, self.feats, self.X, self.cands, ONE_BIN))
        for a, n in zip(analytic, numeric):
            np.testing.assert_allclose(a, n, rtol=1e-4, atol=1e-9)

    def test_zero_advantages_zero_gradient(self):
        cands = [ScoredCandidate(c.mask, c.output, adv_score=0.0) for c in self.cands]
        assert all(not np.any(g) for g in self.grads(cands).arrays())

    def test_missing_scores(self):
        with pytest.raises(ValueError):
            self.grads([ScoredCandidate(c.mask, c.output) for c in self.cands])

    def test_frame_duplication_invariant(self):
        feats = np.array([[0.3, -1.2], [1.0, 0.4]])
        X = np.array([[1.5 - 0.5j, 0.2 + 0.9j]])
        post, _ = forward(self.params, feats, HYPER, ONE_BIN)
        cands = [ScoredCandidate(post.mask + d, (post.mask + d) * X, adv_score=b)
                 for d, b in ((0.04, 0.7), (-0.02, -0.7))]
        dup = [ScoredCandidate(np.tile(c.mask, 2), np.tile(c.output, 2), adv_score=c.adv_score) for c in cands]
        a = self.grads(cands, feats, X).arrays()
        b = self.grads(dup, np.tile(feats, (2, 1)), np.tile(X, 2)).arrays()
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-15)

    def test_scaling_linear(self):
        scaled = [ScoredCandidate(c.mask, c.output, adv_score=3.0 * c.adv_score) for c in self.cands]
        for x, y in zip(self.grads().arrays(), self.grads(scaled).arrays()):
            np.testing.assert_allclose(y, 3.0 * x, rtol=1e-12)


class TestEstimator:
    def test_unbiased_two_point_score(self):
        # one real bin, X = 1, mask mean mu: ln p's mask partial is the exact score
        # function of Re(S~), so E[B * partial] = (K - 1) / K * d/dmu P(Z = 1)
        rng = np.random.default_rng(0)
        n, K, mu, var, thr = 25000, 4, 0.5, 0.01, 0.55
        X = np.ones((1, n), complex)
        post = posterior(np.full((1, n), mu), np.full((1, n), var))
        cands = sample_output_candidates(post, X, PGConfig(K=K, epsilon=1.0, lam=1e9), rng)
        Z = np.array([(c.output.real > thr).astype(float)[0] for c in cands])
        B = Z - Z.mean(axis=0)
        partial = np.array([log_likelihood_partials(c.output, X, post.mask, post.variance)[0][0] for c in cands])
        per_group = (B * partial).mean(axis=0)
        sd = np.sqrt(var)
        expected = (K - 1) / K * norm.pdf((thr - mu) / sd) / sd
        se = per_group.std(ddof=1) / np.sqrt(n)
        assert abs(per_group.mean() - expected) <= 3 * se


def toy_item():
    return PGItem(features=np.array([[1.0, 0.0]]), mixture=np.array([[1.0 + 0j]]))


def quad_score(item, bins):
    return -(bins.real[0, 0] - 0.7) ** 2


class TestUpdateStep:
    def run(self, cfg, n, seed=0, score=quad_score):
        params = toy_net(3)
        # start from a calibrated variance, as after supervised pre-training
        params.var_head[1][:] = np.log(0.01)
        adam = AdamState.zeros_like(params, cfg.step_size)
        rng = np.random.default_rng(seed)
        records = []
        for u in range(n):
            params, adam, rec = pg_update_step([toy_item()], params, adam, score, cfg, rng, HYPER, ONE_BIN, u)
            records.append(rec)
        return params, records

    def map_mask(self, params):
        return forward(params, toy_item().features, HYPER, ONE_BIN)[0].mask_lin[0, 0]

    def test_quadratic_toy_converges(self):
        cfg = PGConfig(K=16, I=1, epsilon=1.0, lam=1.0, step_size=1e-2)
        params, _ = self.run(cfg, 300)
        assert abs(self.map_mask(params) - 0.7) <= 0.05

    def test_epsilon_zero_freezes_parameters(self):
        start = toy_net(3)
        start.var_head[1][:] = np.log(0.01)
        params, _ = self.run(PGConfig(K=4, epsilon=0.0, step_size=1e-2), 20)
        assert all(np.array_equal(a, b) for a, b in zip(start.arrays(), params.arrays()))

    def test_fixed_seed_identical_records(self):
        cfg = PGConfig(K=4, epsilon=0.5, lam=0.2, step_size=1e-3)
        _, a = self.run(cfg, 5)
        _, b = self.run(cfg, 5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.row(0.0), y.row(0.0))
            assert all(np.array_equal(p, q) for p, q in zip(x.adv_scores, y.adv_scores))

    def test_scorer_failure_leaves_params(self):
        params = toy_net(3)
        snapshot = [a.copy() for a in params.arrays()]
        adam = AdamState.zeros_like(params)

        def broken(item, bins):
            raise RuntimeError("scorer down")

        with pytest.raises(RuntimeError, match="scorer down"):
            pg_update_step([toy_item()], params, adam, broken, PGConfig(K=2), np.random.default_rng(0),
                           HYPER, ONE_BIN)
        assert all(np.array_equal(a, b) for a, b in zip(snapshot, params.arrays()))
        assert adam.t == 0

    def test_record_contents(self):
        item = toy_item()
        item.clean = np.array([[0.7 + 0j]])
        params = toy_net(3)
        _, _, rec = pg_update_step([item, item], params, AdamState.zeros_like(params), quad_score,
                                   PGConfig(K=3), np.random.default_rng(0), HYPER, ONE_BIN, 4)
        g = self.map_mask(params)
        assert rec.update == 4
        assert rec.map_score == pytest.approx(-(g - 0.7) ** 2)
        assert rec.mse == pytest.approx((g - 0.7) ** 2)
        assert len(rec.adv_scores) == 2 and len(rec.row()) == 6

    def test_empty_batch(self):
        params = toy_net(3)
        with pytest.raises(ValueError):
            pg_update_step([], params, AdamState.zeros_like(params), quad_score, PGConfig(K=2),
                           np.random.default_rng(0), HYPER, ONE_BIN)
