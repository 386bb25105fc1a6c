"""WAV I/O, SNR-controlled mixing and a synthetic speech-like corpus."""

from __future__ import annotations

import os
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dsp import SAMPLE_RATE, Waveform

TRAIN_SNRS = (-6.0, 0.0, 6.0, 12.0)
# Upper pole bound kept below 0.95: at 0.95 one bin can hold ~18% of the noise energy.
NOISE_POLE_RANGE = (0.5, 0.85)


def load_wav(path, sample_rate: int | None = SAMPLE_RATE) -> Waveform:
    """Read a 16-bit PCM mono WAV, mapping integers to [-1, 1) by /32768."""
    try:
        with wave.open(os.fspath(path), "rb") as f:
            channels, width, rate, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            if channels != 1:
                raise ValueError(f"{path}: expected mono, got {channels} channels")
            if width != 2:
                raise ValueError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
            if sample_rate is not None and rate != sample_rate:
                raise ValueError(f"{path}: expected {sample_rate} Hz, got {rate} Hz (no resampling)")
            raw = f.readframes(n)
    except wave.Error as exc:
        raise ValueError(f"{path}: not a PCM RIFF/WAVE file ({exc})") from exc
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate)


def quantize(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def save_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM mono, rounding to nearest and clipping at full scale."""
    with wave.open(os.fspath(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(quantize(w.samples).tobytes())


@dataclass(frozen=True)
class Utterance:
    clean: Waveform
    noise: Waveform  # already scaled: mixture = clean + noise
    mixture: Waveform
    snr_db: float
    id: str = ""


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float, id: str = "") -> Utterance:
    """Scale ``noise`` to the requested SNR and add it to ``clean``.

    The resulting triple is jointly scaled by 1 / max(1, peak), which leaves
    the SNR unchanged.
    """
    if len(clean) != len(noise) or clean.sample_rate != noise.sample_rate:
        raise ValueError("clean and noise must have equal lengths and sample rates")
    p_clean = np.mean(clean.samples ** 2)
    p_noise = np.mean(noise.samples ** 2)
    if p_clean <= 0:
        raise ValueError("clean signal has zero energy")
    if p_noise <= 0:
        raise ValueError("noise signal has zero energy")
    g = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    s, n = clean.samples, g * noise.samples
    x = s + n
    peak = max(np.max(np.abs(s)), np.max(np.abs(n)), np.max(np.abs(x)))
    k = 1.0 / max(1.0, peak)
    sr = clean.sample_rate
    return Utterance(Waveform(k * s, sr), Waveform(k * n, sr), Waveform(k * x, sr), float(snr_db), id)


def measured_snr(utt: Utterance) -> float:
    return float(10.0 * np.log10(np.mean(utt.clean.samples ** 2) / np.mean(utt.noise.samples ** 2)))


def synth_utterance(seed, duration_s: float = 2.0, sample_rate: int = SAMPLE_RATE):
    """Deterministic (clean, noise) pair.

    clean: three harmonics of a random 100-300 Hz fundamental, amplitude
    modulated by a 2-8 Hz raised cosine. noise: white Gaussian noise through
    a first-order lowpass with a random pole.
    """
    if duration_s < 0.5:
        raise ValueError("duration must be at least 0.5 s")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(100.0, 300.0)
    amps = rng.uniform(0.3, 1.0, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    tone = sum(a * np.cos(2.0 * np.pi * (h + 1) * f0 * t + p) for h, (a, p) in enumerate(zip(amps, phases)))
    f_mod = rng.uniform(2.0, 8.0)
    env = 0.5 * (1.0 - np.cos(2.0 * np.pi * f_mod * t + rng.uniform(0.0, 2.0 * np.pi)))
    clean = tone * env
    clean *= 0.5 / np.max(np.abs(clean))
    pole = rng.uniform(*NOISE_POLE_RANGE)
    noise = lfilter([1.0 - pole], [1.0, -pole], rng.standard_normal(n))
    noise *= 0.5 / np.max(np.abs(noise))
    return Waveform(clean, sample_rate), Waveform(noise, sample_rate)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    clean_path: Path
    noise_path: Path
    snr_db: float


@dataclass(frozen=True)
class CorpusManifest:
    entries: tuple[ManifestEntry, ...]
    sample_rate: int

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def snrs(self) -> list[float]:
        return sorted({e.snr_db for e in self.entries})


def load_manifest(path) -> CorpusManifest:
    """Parse ``sample_rate=<int>`` followed by ``id,clean_path,noise_path,snr_db`` lines.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    root = path.parent
    lines = path.read_text(encoding="utf-8").splitlines()
    sample_rate = None
    entries = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if sample_rate is None:
            key, _, value = line.partition("=")
            if key.strip() != "sample_rate" or not value.strip().isdigit():
                raise ValueError(f"{path}:{lineno}: expected header 'sample_rate=<int>'")
            sample_rate = int(value)
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 comma-separated fields, got {len(fields)}")
        uid, clean, noise, snr = fields
        try:
            snr_db = float(snr)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: bad snr_db {snr!r}") from None
        paths = []
        for p in (clean, noise):
            p = Path(p)
            p = p if p.is_absolute() else root / p
            if not p.is_file():
                raise ValueError(f"{path}:{lineno}: cannot read {p}")
            paths.append(p)
        entries.append(ManifestEntry(uid, paths[0], paths[1], snr_db))
    if sample_rate is None:
        raise ValueError(f"{path}: missing 'sample_rate=' header")
    if not entries:
        raise ValueError(f"{path}: manifest has no entries")
    return CorpusManifest(tuple(entries), sample_rate)


def write_manifest(path, manifest: CorpusManifest) -> None:
    path = Path(path)
    rows = [f"sample_rate={manifest.sample_rate}"]
    for e in manifest.entries:
        clean, noise = (os.path.relpath(p, path.parent) for p in (e.clean_path, e.noise_path))
        rows.append(f"{e.id},{clean},{noise},{e.snr_db:g}")
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


def generate_corpus(
    n: int,
    seed: int,
    snrs=TRAIN_SNRS,
    out_dir=".",
    duration_s: float = 2.0,
    sample_rate: int = SAMPLE_RATE,
    prefix: str = "utt",
) -> CorpusManifest:
    """Write ``n`` synthetic clean/noise WAV pairs plus ``manifest.txt``.

    Entry ``i`` gets SNR ``snrs[i % len(snrs)]`` and seed ``(seed, i)``.
    """
    out = Path(out_dir)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "noise").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        uid = f"{prefix}{i:04d}"
        clean, noise = synth_utterance([seed, i], duration_s, sample_rate)
        cp, np_ = out / "clean" / f"{uid}.wav", out / "noise" / f"{uid}.wav"
        save_wav(cp, clean)
        save_wav(np_, noise)
        entries.append(ManifestEntry(uid, cp, np_, float(snrs[i % len(snrs)])))
    manifest = CorpusManifest(tuple(entries), sample_rate)
    write_manifest(out / "manifest.txt", manifest)
    return manifest


def load_utterance(entry: ManifestEntry, sample_rate: int = SAMPLE_RATE) -> Utterance:
    """Load one manifest entry and mix it; longer noise is cropped, shorter is tiled."""
    clean = load_wav(entry.clean_path, sample_rate)
    noise = load_wav(entry.noise_path, sample_rate)
    if len(noise) != len(clean):
        reps = -(-len(clean) // len(noise))
        noise = Waveform(np.tile(noise.samples, reps)[: len(clean)], noise.sample_rate)
    return mix_at_snr(clean, noise, entry.snr_db, entry.id)


def load_corpus(manifest: CorpusManifest) -> list[Utterance]:
    return [load_utterance(e, manifest.sample_rate) for e in manifest.entries]
