"""Short-time Fourier analysis/synthesis, mel compression and network input features."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

FRAME_LEN = 512
HOP = 256
SAMPLE_RATE = 16000
N_MELS = 64
CONTEXT = 5
LOG_EPS = 1e-6
STD_FLOOR = 1e-8
PINV_RIDGE = 1e-8


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be one-dimensional")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class Spectrogram:
    """One-sided STFT, ``bins`` has shape (n_bins, n_frames)."""

    bins: np.ndarray
    frame_len: int
    hop: int
    sample_rate: int

    @property
    def n_bins(self) -> int:
        return self.bins.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]

    def with_bins(self, bins: np.ndarray) -> "Spectrogram":
        return Spectrogram(bins, self.frame_len, self.hop, self.sample_rate)


def sqrt_hann(frame_len: int) -> np.ndarray:
    """Periodic square-root Hann window."""
    n = np.arange(frame_len)
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_len))


def _check_framing(frame_len: int, hop: int) -> None:
    if frame_len < 2 or frame_len & (frame_len - 1):
        raise ValueError(f"frame_len must be a power of two, got {frame_len}")
    if hop != frame_len // 2:
        raise ValueError("hop must be frame_len / 2")


def stft(w: Waveform, frame_len: int = FRAME_LEN, hop: int = HOP) -> Spectrogram:
    _check_framing(frame_len, hop)
    x = w.samples
    if x.shape[0] < frame_len:
        raise ValueError("input too short")
    n_frames = (x.shape[0] - frame_len) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop][:n_frames]
    bins = np.fft.rfft(frames * sqrt_hann(frame_len), axis=1).T
    return Spectrogram(np.ascontiguousarray(bins), frame_len, hop, w.sample_rate)


def istft(spec: Spectrogram) -> Waveform:
    """Weighted overlap-add; output length is (T - 1) * hop + frame_len."""
    _check_framing(spec.frame_len, spec.hop)
    if spec.bins.ndim != 2 or spec.n_bins != spec.frame_len // 2 + 1:
        raise ValueError(
            f"spectrogram has {spec.bins.shape[0]} bins, expected {spec.frame_len // 2 + 1}"
        )
    if spec.n_frames < 1:
        raise ValueError("spectrogram has no frames")
    frames = np.fft.irfft(spec.bins.T, n=spec.frame_len, axis=1) * sqrt_hann(spec.frame_len)
    out = np.zeros((spec.n_frames - 1) * spec.hop + spec.frame_len)
    # 50% overlap: even frames tile without overlap, as do odd frames
    for parity in (0, 1):
        sel = frames[parity::2]
        if sel.shape[0] == 0:
            continue
        start = parity * spec.hop
        stop = start + sel.shape[0] * spec.frame_len
        out[start:stop] += sel.reshape(-1)
    return Waveform(out, spec.sample_rate)


def analysis_padding(n_samples: int, hop: int = HOP) -> tuple[int, int]:
    """Zero padding (front, back) that puts every original sample in the
    fully overlapped region of the WOLA synthesis."""
    back = hop + (-n_samples) % hop
    return hop, back


def padded_stft(w: Waveform, frame_len: int = FRAME_LEN, hop: int = HOP) -> Spectrogram:
    front, back = analysis_padding(len(w), hop)
    return stft(Waveform(np.pad(w.samples, (front, back)), w.sample_rate), frame_len, hop)


def padded_istft(spec: Spectrogram, n_samples: int) -> Waveform:
    """Inverse of :func:`padded_stft`, trimmed back to ``n_samples``."""
    y = istft(spec).samples
    front, _ = analysis_padding(n_samples, spec.hop)
    return Waveform(y[front:front + n_samples], spec.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    forward: np.ndarray  # (B, Omega)
    inverse: np.ndarray  # (Omega, B)

    @property
    def n_bands(self) -> int:
        return self.forward.shape[0]

    @property
    def n_bins(self) -> int:
        return self.forward.shape[1]

    @cached_property
    def band_weights(self) -> np.ndarray:
        """Filter weight sum of each band, ``forward @ 1``."""
        return self.forward.sum(axis=1)

    @cached_property
    def band_inverse(self) -> np.ndarray:
        """Maps per-band average values to linear bins: ``inverse @ diag(band_weights)``.

        A constant band vector maps to the same constant on every bin.
        """
        return self.inverse * self.band_weights


def pseudo_inverse(forward: np.ndarray, ridge: float = PINV_RIDGE) -> np.ndarray:
    """Right pseudo-inverse F^T (F F^T + ridge I)^-1 with one refinement pass.

    The refinement removes the O(ridge / lambda_min) bias of the plain ridge
    solve, which otherwise exceeds 1e-8 for 64 bands at 512 points.
    """
    gram = forward @ forward.T
    eye = np.eye(gram.shape[0])
    a = gram + ridge * eye
    y = np.linalg.solve(a, eye)
    y = y + np.linalg.solve(a, eye - gram @ y)
    return forward.T @ y


def make_mel_filterbank(
    n_bands: int = N_MELS, frame_len: int = FRAME_LEN, sample_rate: int = SAMPLE_RATE
) -> MelFilterbank:
    n_bins = frame_len // 2 + 1
    if n_bands < 2:
        raise ValueError("need at least 2 mel bands")
    if n_bands >= n_bins:
        raise ValueError("filterbank wider than spectrum")
    """Triangular filters, peak 1, centres equally spaced in mel from 0 Hz to
    Nyquist inclusive. Neighbouring triangles meet at each other's centres, so
    the filters sum to one on every FFT bin."""
    freqs = np.arange(n_bins) * sample_rate / frame_len
    c = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_bands))
    # mirrored outer feet; only the inner halves of the end filters touch any bin
    lo = np.r_[-c[1], c[:-1]][:, None]
    hi = np.r_[c[1:], sample_rate - c[-2]][:, None]
    center = c[:, None]
    rising = (freqs - lo) / (center - lo)
    falling = (hi - freqs) / (hi - center)
    forward = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(forward.max(axis=1) <= 0.0)
    if empty.size:
        raise ValueError(f"mel bands {empty.tolist()} contain no FFT bin")
    return MelFilterbank(forward, pseudo_inverse(forward))


def mel_project(fb: MelFilterbank, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != fb.n_bins:
        raise ValueError(f"expected {fb.n_bins} bins, got {v.shape[0]}")
    return fb.forward @ v


def mel_reconstruct(
    fb: MelFilterbank, m: np.ndarray, clamp_lo: float = 0.0, clamp_hi: float | None = 1.0
) -> np.ndarray:
    """Expand mel-domain values ``inverse @ m`` to linear bins and clamp.

    Masks use ``[0, 1]``; variances use ``[C_sigma, None]``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape[0] != fb.n_bands:
        raise ValueError(f"expected {fb.n_bands} mel bands, got {m.shape[0]}")
    return np.clip(fb.inverse @ m, clamp_lo, clamp_hi)


def expand_band_values(
    fb: MelFilterbank, a: np.ndarray, clamp_lo: float = 0.0, clamp_hi: float | None = 1.0
) -> np.ndarray:
    """Expand per-band averages (e.g. network gains) to linear bins and clamp.

    Equivalent to ``mel_reconstruct(fb, band_weights * a)``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape[0] != fb.n_bands:
        raise ValueError(f"expected {fb.n_bands} mel bands, got {a.shape[0]}")
    return np.clip(fb.band_inverse @ a, clamp_lo, clamp_hi)


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be vectors of equal length")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def from_features(cls, features) -> "FeatureStats":
        """Per-dimension statistics of one (T, D) array or a list of them."""
        if not isinstance(features, np.ndarray):
            features = np.concatenate(list(features), axis=0)
        return cls(features.mean(axis=0), features.std(axis=0))


def log_mel(spec: Spectrogram, fb: MelFilterbank) -> np.ndarray:
    """Log mel magnitudes, shape (T, B)."""
    return np.log(mel_project(fb, np.abs(spec.bins)) + LOG_EPS).T


def stack_context(frames: np.ndarray, Q: int) -> np.ndarray:
    """Concatenate frames tau-Q..tau+Q, repeating edge frames."""
    if Q < 0:
        raise ValueError("context Q must be nonnegative")
    T = frames.shape[0]
    idx = np.clip(np.arange(T)[:, None] + np.arange(-Q, Q + 1)[None, :], 0, T - 1)
    return frames[idx].reshape(T, -1)


def make_features(
    spec: Spectrogram, fb: MelFilterbank, Q: int = CONTEXT, stats: FeatureStats | None = None
) -> np.ndarray:
    """Context-stacked log-mel input vectors, one row per frame: shape (T, (2Q+1)B)."""
    feats = stack_context(log_mel(spec, fb), Q)
    if stats is not None:
        if stats.mean.shape[0] != feats.shape[1]:
            raise ValueError(
                f"stats dimension {stats.mean.shape[0]} does not match features {feats.shape[1]}"
            )
        feats = (feats - stats.mean) / stats.std
    return feats
