"""Time-frequency masks: oracle targets, application, and musical-noise post-processing.

Masks are real arrays shaped like the spectrogram bins (n_bins, n_frames)
with every gain in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

G_MIN = 0.158  # -16 dB
BETA = 0.3


@dataclass(frozen=True)
class PostProcessConfig:
    g_min: float = G_MIN
    beta: float = BETA

    def __post_init__(self):
        if not 0.0 <= self.g_min <= 1.0:
            raise ValueError("g_min must lie in [0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")


def _bins(x) -> np.ndarray:
    return np.asarray(getattr(x, "bins", x))


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def compute_irm(S, N) -> np.ndarray:
    """Ideal ratio mask |S| / (|S| + |N|), 0 where both vanish."""
    s, n = np.abs(_bins(S)), np.abs(_bins(N))
    _same_shape(s, n)
    den = s + n
    out = np.zeros_like(den)
    np.divide(s, den, out=out, where=den > 0)
    return out


def compute_psa(S, X) -> np.ndarray:
    """Phase-sensitive mask clip(|S|/|X| cos(theta_S - theta_X), 0, 1).

    |S| cos(dtheta) / |X| equals Re(S conj(X)) / |X|^2, which is what gets
    evaluated. Bins where X is zero give 0.
    """
    s, x = _bins(S), _bins(X)
    _same_shape(s, x)
    power = np.abs(x) ** 2
    out = np.zeros(power.shape)
    np.divide((s * np.conj(x)).real, power, out=out, where=power > 0)
    return np.clip(out, 0.0, 1.0)


def apply_mask(G: np.ndarray, X):
    """Scale each bin of ``X`` by the real gain ``G``; keeps the mixture phase.

    Returns a Spectrogram when given one, otherwise a complex array.
    """
    G = np.asarray(G, dtype=np.float64)
    x = _bins(X)
    _same_shape(G, x)
    out = G * x
    return X.with_bins(out) if hasattr(X, "with_bins") else out


def postprocess_mask(G: np.ndarray, cfg: PostProcessConfig = PostProcessConfig()) -> np.ndarray:
    """Floor at ``g_min`` then smooth causally along time.

    The recursion reads the already-smoothed previous frame; the first frame
    is floored but passed through unsmoothed.
    """
    out = np.maximum(cfg.g_min, np.asarray(G, dtype=np.float64))
    for t in range(1, out.shape[1]):
        out[:, t] = cfg.beta * out[:, t] + (1.0 - cfg.beta) * out[:, t - 1]
    return out
