"""Black-box quality scores and their normalization to [0, 100].

A scorer is any callable ``scorer(req: ScoreRequest) -> float``. It may
carry a ``thread_safe`` attribute; callables without one are treated as
not thread safe.
"""

from __future__ import annotations

import os
import selectors
import shlex
import socket
import subprocess
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import FRAME_LEN, HOP, N_MELS, Waveform, make_mel_filterbank, mel_project, stft

SDR_CAP_DB = 60.0
DEFAULT_TIMEOUT = 30.0


@dataclass(frozen=True)
class ScoreRequest:
    enhanced: Waveform
    clean: Waveform
    mixture: Waveform

    def __post_init__(self):
        n = {len(self.enhanced), len(self.clean), len(self.mixture)}
        r = {self.enhanced.sample_rate, self.clean.sample_rate, self.mixture.sample_rate}
        if len(n) != 1 or len(r) != 1:
            raise ValueError("score request signals must share length and sample rate")


@dataclass(frozen=True)
class ScoreScale:
    gain: float
    offset: float
    lo: float = 0.0
    hi: float = 100.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("scale requires lo < hi")


# -10 dB -> 0, +30 dB -> 100
SDR_SCALE = ScoreScale(2.5, 25.0)
PESQ_SCALE = ScoreScale(20.0, 10.0)
STOI_SCALE = ScoreScale(100.0, 0.0)


def scale_score(z: float, scale: ScoreScale) -> float:
    return float(min(max(scale.gain * z + scale.offset, scale.lo), scale.hi))


def mix_scores(z1: float, z2: float, gamma: float = 0.5) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    return gamma * z1 + (1.0 - gamma) * z2


def sdr(reference: np.ndarray, estimate: np.ndarray) -> float:
    """10 log10(|s|^2 / |s - s_hat|^2) in dB, capped at +60 dB."""
    reference = np.asarray(reference)
    signal = np.sum(np.abs(reference) ** 2)
    if signal <= 0:
        raise ValueError("clean reference has zero energy")
    distortion = np.sum(np.abs(reference - np.asarray(estimate)) ** 2)
    if distortion < 1e-12 * signal:
        return SDR_CAP_DB
    return float(min(10.0 * np.log10(signal / distortion), SDR_CAP_DB))


def sdr_score(req: ScoreRequest) -> float:
    return sdr(req.clean.samples, req.enhanced.samples)


_BANDCORR_GROUPS = 16
_BANDCORR_SEG = 30
_BANDCORR_SEG_HOP = 15
_fb_cache: dict[int, object] = {}


def _envelopes(w: Waveform) -> np.ndarray:
    fb = _fb_cache.get(w.sample_rate)
    if fb is None:
        fb = _fb_cache[w.sample_rate] = make_mel_filterbank(N_MELS, FRAME_LEN, w.sample_rate)
    mel = mel_project(fb, np.abs(stft(w, FRAME_LEN, HOP).bins))  # (64, T)
    return mel.reshape(_BANDCORR_GROUPS, -1, mel.shape[1]).sum(axis=1)


def band_correlation_score(req: ScoreRequest) -> float:
    """Mean clipped Pearson correlation of grouped mel envelopes, in [0, 1].

    A simplified intelligibility proxy, not STOI. Inputs shorter than one
    30-frame segment (but at least 384 ms) are scored as a single segment.
    """
    if len(req.clean) < 0.384 * req.clean.sample_rate:
        raise ValueError("input too short for band correlation (need >= 384 ms)")
    ref, est = _envelopes(req.clean), _envelopes(req.enhanced)
    T = ref.shape[1]
    seg = min(_BANDCORR_SEG, T)
    scores = []
    for start in range(0, T - seg + 1, _BANDCORR_SEG_HOP):
        a = ref[:, start:start + seg]
        b = est[:, start:start + seg]
        a = a - a.mean(axis=1, keepdims=True)
        b = b - b.mean(axis=1, keepdims=True)
        sa, sb = np.sqrt(np.mean(a * a, axis=1)), np.sqrt(np.mean(b * b, axis=1))
        ok = (sa >= 1e-10) & (sb >= 1e-10)
        r = np.zeros(a.shape[0])
        r[ok] = np.mean(a[ok] * b[ok], axis=1) / (sa[ok] * sb[ok])
        scores.append(np.maximum(0.0, r))
    return float(np.clip(np.mean(scores), 0.0, 1.0))


# -- external scorers -----------------------------------------------------------


class ScorerError(RuntimeError):
    pass


class ScorerTimeoutError(ScorerError):
    pass


class ScorerProtocolError(ScorerError):
    pass


class ScorerRemoteError(ScorerError):
    pass


class ExternalEndpoint:
    """Line-protocol connection to an external scorer.

    ``spec`` is ``cmd:<command line>`` (a long-lived child process talking
    over stdin/stdout) or ``tcp:<host>:<port>``. Requests are serialized; the
    connection is dropped and reopened lazily after a timeout or EOF.
    """

    thread_safe = False

    def __init__(self, spec: str, timeout: float = DEFAULT_TIMEOUT):
        kind, _, target = spec.partition(":")
        if kind not in ("cmd", "tcp") or not target:
            raise ValueError(f"endpoint must be 'cmd:<command>' or 'tcp:<host>:<port>', got {spec!r}")
        self.spec, self.kind, self.target, self.timeout = spec, kind, target, timeout
        self._proc = None
        self._sock = None
        self._buf = b""

    def _open(self):
        if self.kind == "cmd":
            if self._proc is None or self._proc.poll() is not None:
                self._proc = subprocess.Popen(
                    shlex.split(self.target), stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0
                )
                self._buf = b""
        elif self._sock is None:
            host, _, port = self.target.rpartition(":")
            try:
                self._sock = socket.create_connection((host, int(port)), timeout=self.timeout)
            except OSError as exc:
                raise ScorerError(f"cannot connect to {self.spec}: {exc}") from exc
            self._buf = b""

    def close(self):
        if self._proc is not None:
            if self._proc.poll() is None:
                self._proc.kill()
            self._proc.wait()
            for stream in (self._proc.stdin, self._proc.stdout):
                stream.close()
            self._proc = None
        if self._sock is not None:
            self._sock.close()
            self._sock = None
        self._buf = b""

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def _read_line(self) -> bytes:
        deadline = time.monotonic() + self.timeout
        if self.kind == "cmd":
            fd = self._proc.stdout.fileno()
            sel = selectors.DefaultSelector()
            sel.register(fd, selectors.EVENT_READ)
        try:
            while b"\n" not in self._buf:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ScorerTimeoutError(f"no response from {self.spec} within {self.timeout} s")
                if self.kind == "cmd":
                    if not sel.select(remaining):
                        continue
                    chunk = os.read(fd, 4096)
                else:
                    self._sock.settimeout(remaining)
                    try:
                        chunk = self._sock.recv(4096)
                    except socket.timeout:
                        continue
                if not chunk:
                    raise ScorerProtocolError(f"{self.spec} closed the connection")
                self._buf += chunk
        finally:
            if self.kind == "cmd":
                sel.close()
        line, _, self._buf = self._buf.partition(b"\n")
        return line

    def request(self, line: str) -> str:
        self._open()
        data = line.encode("utf-8")
        try:
            if self.kind == "cmd":
                self._proc.stdin.write(data)
                self._proc.stdin.flush()
            else:
                self._sock.sendall(data)
            return self._read_line().decode("utf-8", errors="replace").rstrip("\r")
        except (ScorerError, OSError) as exc:
            self.close()
            if isinstance(exc, ScorerError):
                raise
            raise ScorerError(f"{self.spec}: {exc}") from exc


def parse_response(line: str) -> float:
    if line.startswith("OK "):
        try:
            value = float(line[3:].strip())
        except ValueError:
            raise ScorerProtocolError(f"malformed score in response {line!r}") from None
        if not np.isfinite(value):
            raise ScorerProtocolError(f"non-finite score in response {line!r}")
        return value
    if line.startswith("ERR"):
        raise ScorerRemoteError(line[3:].strip())
    raise ScorerProtocolError(f"malformed response {line!r}")


def external_score(req: ScoreRequest, endpoint, timeout: float = DEFAULT_TIMEOUT) -> float:
    """Score through an external process: persist the three signals as WAV
    in a request-scoped temp directory, send one ``SCORE`` line, read one
    ``OK <value>`` / ``ERR <message>`` line. Temp files are always removed.
    """
    from .data import save_wav

    own = isinstance(endpoint, str)
    ep = ExternalEndpoint(endpoint, timeout) if own else endpoint
    try:
        with tempfile.TemporaryDirectory(prefix="osqapg-score-") as tmp:
            paths = []
            for name in ("enhanced", "clean", "mixture"):
                p = Path(tmp) / f"{name}.wav"
                save_wav(p, getattr(req, name))
                paths.append(str(p))
            return parse_response(ep.request("SCORE " + " ".join(paths) + "\n"))
    finally:
        if own:
            ep.close()


class Scorer:
    """Raw score function plus its normalization."""

    def __init__(self, fn, scale: ScoreScale | None = None, name: str = "", thread_safe: bool = True,
                 endpoint: ExternalEndpoint | None = None):
        self.fn, self.scale, self.name, self.thread_safe = fn, scale, name, thread_safe
        self.endpoint = endpoint

    def close(self) -> None:
        if self.endpoint is not None:
            self.endpoint.close()

    def raw(self, req: ScoreRequest) -> float:
        return float(self.fn(req))

    def __call__(self, req: ScoreRequest) -> float:
        z = self.raw(req)
        return scale_score(z, self.scale) if self.scale is not None else z


class MixedScorer:
    def __init__(self, first, second, gamma: float = 0.5):
        self.first, self.second, self.gamma = first, second, gamma
        self.name = f"mix({getattr(first, 'name', '?')},{getattr(second, 'name', '?')})"
        self.thread_safe = getattr(first, "thread_safe", False) and getattr(second, "thread_safe", False)

    def __call__(self, req: ScoreRequest) -> float:
        return mix_scores(self.first(req), self.second(req), self.gamma)

    def close(self) -> None:
        for s in (self.first, self.second):
            if hasattr(s, "close"):
                s.close()


def external_scorer(spec: str, scale: ScoreScale | None = None, timeout: float = DEFAULT_TIMEOUT) -> Scorer:
    ep = ExternalEndpoint(spec, timeout)
    return Scorer(lambda req: external_score(req, ep, timeout), scale, name="ext", thread_safe=False,
                  endpoint=ep)


def make_scorer(name: str, ext: str | None = None, timeout: float = DEFAULT_TIMEOUT) -> Scorer:
    """Normalized scorer by name: ``sdr``, ``bandcorr``, ``pesq``/``stoi``
    (external, needs ``ext``) or ``mix`` (equal mix of sdr and bandcorr)."""
    if name == "sdr":
        return Scorer(sdr_score, SDR_SCALE, "sdr")
    if name == "bandcorr":
        return Scorer(band_correlation_score, STOI_SCALE, "bandcorr")
    if name in ("pesq", "stoi"):
        if not ext:
            raise ValueError(f"scorer {name!r} needs an external endpoint")
        return external_scorer(ext, PESQ_SCALE if name == "pesq" else STOI_SCALE, timeout)
    if name == "mix":
        if ext:
            raise ValueError("mix over external scorers needs two endpoints; build MixedScorer directly")
        return MixedScorer(make_scorer("sdr"), make_scorer("bandcorr"), 0.5)
    raise ValueError(f"unknown scorer {name!r}")
