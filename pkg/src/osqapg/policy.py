"""Policy-gradient training of the mask network against a black-box score.

Per utterance: the network's complex-Gaussian posterior is sampled K times,
each sample is projected back onto the real-mask constraint with the
phase-sensitive formula, mixed with the MAP mask by epsilon-greedy, and
confined to a lambda-ball around it. The candidates are scored, the scores
are centred on their mean, and the centred scores weight the gradients of
the candidates' log-likelihoods.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .dsp import MelFilterbank
from .likelihood import log_likelihood_partials
from .masks import compute_psa
from .nn import (
    AdamState,
    ForwardCache,
    MaskPosterior,
    NetworkParams,
    TrainHyper,
    adam_step,
    backward,
    forward,
    linear_to_mel_grads,
)


@dataclass(frozen=True)
class PGConfig:
    K: int = 20
    I: int = 10
    epsilon: float = 0.05
    lam: float = 0.05
    step_size: float = 1e-6
    seed: int = 0
    updates: int = 10000
    dropout: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2 for baseline subtraction")
        if self.I < 1:
            raise ValueError("I must be at least 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


@dataclass
class ScoredCandidate:
    mask: np.ndarray  # (n_bins, T)
    output: np.ndarray  # complex (n_bins, T)
    raw_score: float | None = None
    adv_score: float | None = None


def _bins(x) -> np.ndarray:
    return np.asarray(getattr(x, "bins", x))


def sample_output_candidates(
    post: MaskPosterior, X, cfg: PGConfig, rng: np.random.Generator
) -> list[ScoredCandidate]:
    """Draw K constrained outputs around the MAP mask (scores left unset)."""
    if cfg.K < 2:
        raise ValueError("K must be at least 2")
    x = _bins(X)
    G, var = post.mask, post.variance
    if G.shape != x.shape or var.shape != x.shape:
        raise ValueError(f"posterior shape {G.shape} does not match mixture {x.shape}")
    mean = G * x
    std = np.sqrt(var)
    out = []
    for _ in range(cfg.K):
        noise = rng.standard_normal((2, *x.shape)) * std
        s_tilde = mean + (noise[0] + 1j * noise[1])
        Gk = compute_psa(s_tilde, x)
        Gk = np.where(rng.random(x.shape) < cfg.epsilon, Gk, G)
        delta = Gk - G
        Gk = np.where(np.abs(delta) > cfg.lam, G + np.sign(delta) * cfg.lam, Gk)
        Gk = np.clip(Gk, 0.0, 1.0)
        out.append(ScoredCandidate(Gk, Gk * x))
    return out


def baseline_subtract(raw_scores) -> np.ndarray:
    """B_k = Z_k - mean(Z), evaluated in exact rational arithmetic.

    Each B_k is the correctly rounded value of the exact difference, so an
    exactly representable shift of all scores leaves every B_k bit-identical.
    """
    raw = list(raw_scores)
    if len(raw) < 2:
        raise ValueError("need at least two scores")
    exact = []
    for z in raw:
        if not isinstance(z, Fraction):
            z = float(z)
            if not np.isfinite(z):
                raise ValueError(f"non-finite score {z}")
        exact.append(Fraction(z))
    mean = sum(exact) / len(exact)
    return np.array([float(z - mean) for z in exact])


def pg_utterance_grads(
    candidates: list[ScoredCandidate],
    post: MaskPosterior,
    cache: ForwardCache,
    X,
    params: NetworkParams,
    hyper: TrainHyper,
    fb: MelFilterbank,
) -> NetworkParams:
    """sum_k B_k / (K T) * sum_tau grad log p(candidate_k | X, params).

    Candidates are fixed labels: gradients reach the parameters only through
    the MAP mask and variance heads. The result is an ascent direction and
    carries no weight-decay term.
    """
    if any(c.adv_score is None for c in candidates):
        raise ValueError("every candidate needs an adv_score")
    x = _bins(X).T  # (T, n_bins)
    T = x.shape[0]
    K = len(candidates)
    G, var = post.mask_lin, post.var_lin
    d_mask = np.zeros_like(G)
    d_var = np.zeros_like(var)
    for c in candidates:
        if c.adv_score == 0.0:
            continue
        dm, dv = log_likelihood_partials(c.output.T, x, G, var)
        w = c.adv_score / (K * T)
        d_mask += w * dm
        d_var += w * dv
    g_mask_mel, g_var_mel = linear_to_mel_grads(fb, post, d_mask, d_var, hyper.c_sigma)
    return backward(params, cache, g_mask_mel, g_var_mel, replace(hyper, l2=0.0))


@dataclass
class PGItem:
    """One training utterance as seen by the policy-gradient step.

    ``score`` context is opaque here; the step's ``score_fn`` receives the
    item and a candidate's output bins.
    """

    features: np.ndarray  # (T, n_in), normalized
    mixture: np.ndarray  # complex (n_bins, T)
    clean: np.ndarray | None = None  # complex (n_bins, T), only for logging MSE
    context: object = None


@dataclass
class PGLogRecord:
    update: int
    map_score: float
    cand_score: float
    adv_var: float
    mse: float
    seconds: float
    adv_scores: list[np.ndarray] = field(default_factory=list, repr=False)

    def row(self, elapsed: float | None = None) -> list:
        return [self.update, self.map_score, self.cand_score, self.adv_var, self.mse,
                self.seconds if elapsed is None else elapsed]


def _score_all(score_fn, jobs, workers):
    if workers > 1 and getattr(score_fn, "thread_safe", False):
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda j: float(score_fn(*j)), jobs))
    return [float(score_fn(*j)) for j in jobs]


def pg_update_step(
    batch: list[PGItem],
    params: NetworkParams,
    adam: AdamState,
    score_fn,
    cfg: PGConfig,
    rng: np.random.Generator,
    hyper: TrainHyper,
    fb: MelFilterbank,
    update: int = 0,
) -> tuple[NetworkParams, AdamState, PGLogRecord]:
    """One parameter update from ``len(batch)`` utterances.

    ``score_fn(item, output_bins) -> float`` is the black-box score. Any
    exception it raises aborts the update before the parameters change.
    """
    if not batch:
        raise ValueError("empty batch")
    t0 = time.perf_counter()
    total = None
    map_scores, cand_scores, adv_vars, mses, advs = [], [], [], [], []
    for item in batch:
        post, cache = forward(params, item.features, hyper, fb, rng if cfg.dropout else None)
        cands = sample_output_candidates(post, item.mixture, cfg, rng)
        map_out = post.mask * item.mixture
        scores = _score_all(score_fn, [(item, map_out)] + [(item, c.output) for c in cands], cfg.workers)
        adv = baseline_subtract(scores[1:])
        for c, z, b in zip(cands, scores[1:], adv):
            c.raw_score, c.adv_score = z, float(b)
        g = pg_utterance_grads(cands, post, cache, item.mixture, params, hyper, fb)
        total = g if total is None else NetworkParams.from_arrays(
            [a + b for a, b in zip(total.arrays(), g.arrays())])
        map_scores.append(scores[0])
        cand_scores.append(np.mean(scores[1:]))
        adv_vars.append(np.var(adv))
        advs.append(adv)
        if item.clean is not None:
            mses.append(np.mean(np.abs(item.clean - map_out) ** 2))
    # ascend the averaged estimate by handing its negation to the minimizer
    descent = total.map(lambda a: -a / len(batch))
    params, adam = adam_step(params, descent, adam)
    record = PGLogRecord(
        update,
        float(np.mean(map_scores)),
        float(np.mean(cand_scores)),
        float(np.mean(adv_vars)),
        float(np.mean(mses)) if mses else float("nan"),
        time.perf_counter() - t0,
        advs,
    )
    return params, adam, record
