"""End-to-end glue: utterance preparation, supervised and policy-gradient
training loops, enhancement and evaluation."""

from __future__ import annotations

import functools
import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from . import dsp
from .data import Utterance, mix_at_snr
from .dsp import FeatureStats, MelFilterbank, Spectrogram, Waveform
from .likelihood import ml_loss_and_head_grads, psa_mmse_loss_and_head_grads
from .masks import PostProcessConfig, apply_mask, postprocess_mask
from .nn import (
    AdamState,
    MaskPosterior,
    NetworkParams,
    TrainHyper,
    adam_step,
    backward,
    forward,
    linear_to_mel_grads,
)
from .policy import PGConfig, PGItem, PGLogRecord, pg_update_step
from .scorers import ScoreRequest, band_correlation_score, sdr_score

log = logging.getLogger(__name__)

MIN_STEP = 1e-7


@dataclass(frozen=True)
class FrontEnd:
    frame_len: int = dsp.FRAME_LEN
    hop: int = dsp.HOP
    n_mels: int = dsp.N_MELS
    Q: int = dsp.CONTEXT
    sample_rate: int = dsp.SAMPLE_RATE

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1

    @property
    def n_in(self) -> int:
        return (2 * self.Q + 1) * self.n_mels

    @property
    def filterbank(self) -> MelFilterbank:
        return _filterbank(self.n_mels, self.frame_len, self.sample_rate)

    def meta(self) -> dict:
        return {"Q": self.Q, "n_mels": self.n_mels, "n_bins": self.n_bins,
                "sample_rate": self.sample_rate, "frame_len": self.frame_len}

    @classmethod
    def from_meta(cls, meta: dict) -> "FrontEnd":
        frame_len = int(meta.get("frame_len", dsp.FRAME_LEN))
        return cls(frame_len, frame_len // 2, int(meta.get("n_mels", dsp.N_MELS)),
                   int(meta.get("Q", dsp.CONTEXT)), int(meta.get("sample_rate", dsp.SAMPLE_RATE)))


@functools.lru_cache(maxsize=8)
def _filterbank(n_mels, frame_len, sample_rate):
    return dsp.make_mel_filterbank(n_mels, frame_len, sample_rate)


@dataclass
class Prepared:
    """An utterance analysed with zero padding so synthesis covers every sample."""

    id: str
    snr_db: float
    clean: Waveform
    mixture: Waveform
    S: np.ndarray  # complex (n_bins, T)
    X: np.ndarray
    feats: np.ndarray  # raw log-mel context features (T, n_in)

    @property
    def n_frames(self) -> int:
        return self.X.shape[1]

    def synthesize(self, bins: np.ndarray, fe: FrontEnd) -> Waveform:
        spec = Spectrogram(bins, fe.frame_len, fe.hop, self.mixture.sample_rate)
        return dsp.padded_istft(spec, len(self.mixture))


def prepare(utt: Utterance, fe: FrontEnd) -> Prepared:
    X = dsp.padded_stft(utt.mixture, fe.frame_len, fe.hop)
    S = dsp.padded_stft(utt.clean, fe.frame_len, fe.hop)
    feats = dsp.make_features(X, fe.filterbank, fe.Q)
    return Prepared(utt.id, utt.snr_db, utt.clean, utt.mixture, S.bins, X.bins, feats)


def feature_stats(prepared: list[Prepared]) -> FeatureStats:
    return FeatureStats.from_features([p.feats for p in prepared])


def normalized(p: Prepared, stats: FeatureStats) -> np.ndarray:
    return (p.feats - stats.mean) / stats.std


def init_variance_bias(params: NetworkParams, prepared: list[Prepared], fe: FrontEnd,
                       c_sigma: float = TrainHyper.c_sigma) -> NetworkParams:
    """Start the variance head at the band-averaged residual power of a 0.5 mask.

    Spectral error powers are in the thousands for full-scale audio; starting
    the exponential head at 1 would leave Adam hundreds of epochs from a
    sensible likelihood.
    """
    fb = fe.filterbank
    resid = np.concatenate([np.abs(p.S - 0.5 * p.X) ** 2 for p in prepared], axis=1)
    target = resid.mean(axis=1) / 2.0
    band = (fb.forward @ target) / fb.forward.sum(axis=1)
    W, _ = params.var_head
    out = params.copy()
    out.var_head = (out.var_head[0], np.log(np.maximum(band - c_sigma, c_sigma)))
    return out


# -- supervised (ML / MMSE) training -------------------------------------------

_LOSSES = {"ml": ml_loss_and_head_grads, "mmse": psa_mmse_loss_and_head_grads}


def _stack(batch, stats):
    feats = np.concatenate([normalized(p, stats) for p in batch])
    S = np.concatenate([p.S.T for p in batch])
    X = np.concatenate([p.X.T for p in batch])
    # each utterance contributes its frame average, then utterances are averaged
    w = np.concatenate([np.full(p.n_frames, 1.0 / (p.n_frames * len(batch))) for p in batch])
    return feats, S, X, w[:, None]


def _slice(post, lo, hi):
    return MaskPosterior(post.mask_mel[lo:hi], post.var_mel[lo:hi], post.mask_lin[lo:hi], post.var_lin[lo:hi])


def supervised_grads(params, batch, stats, fb, hyper, mode, rng=None):
    """Frame-averaged loss over ``batch`` and its parameter gradient (incl. L2)."""
    feats, S, X, w = _stack(batch, stats)
    post, cache = forward(params, feats, hyper, fb, rng)
    g = _LOSSES[mode](S, X, post)
    gm, gv = linear_to_mel_grads(fb, post, g.d_mask_lin * w, g.d_var_lin * w, hyper.c_sigma)
    loss, lo = 0.0, 0
    for p in batch:
        hi = lo + p.n_frames
        loss += _LOSSES[mode](S[lo:hi], X[lo:hi], _slice(post, lo, hi)).loss / (p.n_frames * len(batch))
        lo = hi
    return loss, backward(params, cache, gm, gv, hyper)


def supervised_loss(params, utts, stats, fb, hyper, mode) -> float:
    """Mean per-frame loss over ``utts`` without dropout."""
    losses = []
    for p in utts:
        post, _ = forward(params, normalized(p, stats), hyper, fb)
        losses.append(_LOSSES[mode](p.S.T, p.X.T, post).loss / p.n_frames)
    return float(np.mean(losses))


def train_supervised(
    params: NetworkParams,
    train: list[Prepared],
    val: list[Prepared] | None,
    stats: FeatureStats,
    fe: FrontEnd,
    hyper: TrainHyper = TrainHyper(),
    mode: str = "ml",
    max_updates: int = 10000,
    batch_size: int = 4,
    seed: int = 0,
    on_epoch=None,
):
    """Adam with step halving on validation stalls; stops once the step drops
    below 1e-7 or after ``max_updates``. Returns the best-validation
    parameters and one history row per epoch.

    With ``val=None`` the step is never halved and exactly ``max_updates``
    updates run; the final parameters are returned.
    """
    if mode not in _LOSSES:
        raise ValueError(f"mode must be one of {sorted(_LOSSES)}")
    fb = fe.filterbank
    rng = np.random.default_rng(seed)
    adam = AdamState.zeros_like(params, hyper.step_size)
    best_params = params
    best = supervised_loss(params, val, stats, fb, hyper, mode) if val else np.inf
    history = []
    updates, epoch = 0, 0
    while updates < max_updates and adam.step_size >= MIN_STEP:
        epoch += 1
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = [train[i] for i in order[start:start + batch_size]]
            loss, grads = supervised_grads(params, batch, stats, fb, hyper, mode, rng)
            params, adam = adam_step(params, grads, adam)
            losses.append(loss)
            updates += 1
            if updates >= max_updates:
                break
        event = ""
        if not val:
            val_loss = float("nan")
            best_params = params
        elif (val_loss := supervised_loss(params, val, stats, fb, hyper, mode)) < best:
            best, best_params = val_loss, params
        else:
            adam = replace(adam, step_size=adam.step_size / 2)
            event = "halve"
        row = {"epoch": epoch, "updates": updates, "train_loss": float(np.mean(losses)),
               "val_loss": val_loss, "step_size": adam.step_size, "event": event}
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return best_params, history


# -- inference -------------------------------------------------------------------


def map_posterior(params, stats, fe, hyper, p: Prepared):
    post, _ = forward(params, normalized(p, stats), hyper, fe.filterbank)
    return post


def enhance_prepared(params, stats, fe, hyper, p: Prepared, post_cfg=None, identity=False):
    """MAP mask (optionally post-processed) applied to the mixture; returns (waveform, mask)."""
    if identity:
        mask = np.ones(p.X.shape)
    else:
        mask = map_posterior(params, stats, fe, hyper, p).mask
        if post_cfg is not None:
            mask = postprocess_mask(mask, post_cfg)
    return p.synthesize(apply_mask(mask, p.X), fe), mask


def enhance_waveform(params, stats, fe, hyper, mixture: Waveform, post_cfg=PostProcessConfig(),
                     identity=False) -> Waveform:
    if mixture.sample_rate != fe.sample_rate:
        raise ValueError(f"expected {fe.sample_rate} Hz input, got {mixture.sample_rate} Hz")
    X = dsp.padded_stft(mixture, fe.frame_len, fe.hop)
    p = Prepared("", 0.0, mixture, mixture, X.bins, X.bins, dsp.make_features(X, fe.filterbank, fe.Q))
    return enhance_prepared(params, stats, fe, hyper, p, post_cfg, identity)[0]


def evaluate(params, stats, fe, hyper, prepared: list[Prepared], post_cfg=None, identity=False,
             extra_scorers=None) -> list[dict]:
    """One metrics row per utterance followed by one mean row per SNR."""
    extra_scorers = extra_scorers or {}
    rows = []
    for p in prepared:
        enh, _ = enhance_prepared(params, stats, fe, hyper, p, post_cfg, identity)
        obs = ScoreRequest(p.mixture, p.clean, p.mixture)
        out = ScoreRequest(enh, p.clean, p.mixture)
        row = {"id": p.id, "snr_db": p.snr_db,
               "SDR_obs": sdr_score(obs), "SDR_enh": sdr_score(out),
               "bandcorr_obs": band_correlation_score(obs), "bandcorr_enh": band_correlation_score(out)}
        for name, scorer in extra_scorers.items():
            row[f"{name}_obs"] = scorer(obs)
            row[f"{name}_enh"] = scorer(out)
        rows.append(row)
    means = []
    for snr in sorted({r["snr_db"] for r in rows}):
        sel = [r for r in rows if r["snr_db"] == snr]
        mean = {"id": f"mean@{snr:g}dB", "snr_db": snr}
        for key in sel[0]:
            if key not in ("id", "snr_db"):
                mean[key] = float(np.mean([r[key] for r in sel]))
        means.append(mean)
    return rows + means


# -- policy-gradient training ------------------------------------------------------


class WaveformScoring:
    """Adapter from a waveform scorer to the ``score_fn(item, bins)`` hook."""

    def __init__(self, scorer, fe: FrontEnd):
        self.scorer, self.fe = scorer, fe
        self.thread_safe = getattr(scorer, "thread_safe", False)

    def __call__(self, item: PGItem, bins: np.ndarray) -> float:
        p: Prepared = item.context
        return float(self.scorer(ScoreRequest(p.synthesize(bins, self.fe), p.clean, p.mixture)))


def pg_items(prepared: list[Prepared], stats: FeatureStats) -> list[PGItem]:
    return [PGItem(normalized(p, stats), p.X, p.S, p) for p in prepared]


def remix(prepared: list[Prepared], fe: FrontEnd, rng: np.random.Generator, snrs=None) -> Prepared:
    """A fresh mixture: random clean source, random noise source, random SNR.

    Noise sources are recovered as ``mixture - clean``; a noise shorter than
    the clean signal is tiled, a longer one cropped.
    """
    snrs = sorted({p.snr_db for p in prepared}) if snrs is None else list(snrs)
    a, b = rng.integers(len(prepared), size=2)
    src, other = prepared[a], prepared[b]
    noise = other.mixture.samples - other.clean.samples
    n = len(src.clean)
    noise = np.tile(noise, -(-n // len(noise)))[:n]
    snr = float(snrs[rng.integers(len(snrs))])
    utt = mix_at_snr(src.clean, Waveform(noise, src.clean.sample_rate), snr,
                     f"{src.id}+{other.id}@{snr:g}")
    return prepare(utt, fe)


def mean_map_score(params, stats, fe, hyper, prepared, scorer) -> float:
    score = WaveformScoring(scorer, fe)
    vals = []
    for item in pg_items(prepared, stats):
        post, _ = forward(params, item.features, hyper, fe.filterbank)
        vals.append(score(item, post.mask * item.mixture))
    return float(np.mean(vals))


def train_pg(
    params: NetworkParams,
    train: list[Prepared],
    stats: FeatureStats,
    fe: FrontEnd,
    scorer,
    cfg: PGConfig = PGConfig(),
    hyper: TrainHyper = TrainHyper(),
    val: list[Prepared] | None = None,
    val_every: int = 10,
    on_update=None,
    on_validate=None,
    remix_sources: bool = False,
):
    """Run ``cfg.updates`` policy-gradient updates from ``params``.

    Each update draws ``cfg.I`` utterances; with ``remix_sources`` every one
    is a new mixture of a random clean source, a random noise source and a
    random training SNR, otherwise training mixtures are reused as given.
    ``on_update(record, elapsed)`` sees every log record; with ``val`` given,
    ``on_validate(update, mean_map_score)`` runs before the first update and
    every ``val_every`` updates.
    """
    fb = fe.filterbank
    rng = np.random.default_rng(cfg.seed)
    items = pg_items(train, stats)
    score_fn = WaveformScoring(scorer, fe)
    adam = AdamState.zeros_like(params, cfg.step_size)
    records: list[PGLogRecord] = []
    t0 = time.perf_counter()

    def validate(u):
        if val is not None and on_validate is not None:
            on_validate(u, mean_map_score(params, stats, fe, hyper, val, scorer))

    validate(0)
    for u in range(1, cfg.updates + 1):
        if remix_sources:
            batch = pg_items([remix(train, fe, rng) for _ in range(cfg.I)], stats)
        else:
            idx = rng.choice(len(items), size=cfg.I, replace=len(items) < cfg.I)
            batch = [items[i] for i in idx]
        params, adam, rec = pg_update_step(batch, params, adam, score_fn, cfg, rng, hyper, fb, u)
        records.append(rec)
        if on_update is not None:
            on_update(rec, time.perf_counter() - t0)
        if val_every and u % val_every == 0:
            validate(u)
    return params, records
