"""Fully connected mask/variance network with hand-written backprop and Adam.

Layout: ReLU hidden layers, then two heads reading the last hidden layer:
a sigmoid head giving per-band mask means and an exponential head giving
per-band error variances (plus a floor ``c_sigma``). Band values are read
as averages over each filter and expanded to linear bins with
``MelFilterbank.band_inverse``; variances are expanded in the log domain. Weights are stored
as (out, in) matrices and frames are processed as rows, so a layer computes
``z @ W.T + b``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .dsp import MelFilterbank, FeatureStats

C_SIGMA = 1e-4
MAGIC = b"OSQAPG01"


@dataclass(frozen=True)
class TrainHyper:
    c_sigma: float = C_SIGMA
    dropout_in: float = 0.2
    dropout_hidden: float = 0.5
    l2: float = 1e-4
    step_size: float = 1e-4

    def __post_init__(self):
        if self.c_sigma <= 0:
            raise ValueError("c_sigma must be positive")
        for p in (self.dropout_in, self.dropout_hidden):
            if not 0.0 <= p < 1.0:
                raise ValueError("dropout probabilities must lie in [0, 1)")
        if self.l2 < 0:
            raise ValueError("l2 must be nonnegative")


@dataclass(frozen=True)
class NetworkDims:
    n_in: int
    hidden: tuple[int, ...]
    n_out: int

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        sizes = (self.n_in, *self.hidden, self.n_out)
        if not self.hidden:
            raise ValueError("need at least one hidden layer")
        if min(sizes) < 1:
            raise ValueError(f"zero-sized layer in {sizes}")


@dataclass
class NetworkParams:
    hidden: list[tuple[np.ndarray, np.ndarray]]
    mask_head: tuple[np.ndarray, np.ndarray]
    var_head: tuple[np.ndarray, np.ndarray]

    @property
    def dims(self) -> NetworkDims:
        return NetworkDims(
            self.hidden[0][0].shape[1],
            tuple(W.shape[0] for W, _ in self.hidden),
            self.mask_head[0].shape[0],
        )

    def arrays(self) -> list[np.ndarray]:
        """All tensors in declared order: hidden W, b pairs, mask head, variance head."""
        out = []
        for W, b in [*self.hidden, self.mask_head, self.var_head]:
            out += [W, b]
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "NetworkParams":
        arrays = list(arrays)
        if len(arrays) < 6 or len(arrays) % 2:
            raise ValueError("parameter list must hold W, b pairs for >= 3 layers")
        pairs = [(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
        return cls(pairs[:-2], pairs[-2], pairs[-1])

    def map(self, fn) -> "NetworkParams":
        return NetworkParams.from_arrays([fn(a) for a in self.arrays()])

    def copy(self) -> "NetworkParams":
        return self.map(np.copy)


def _check_chain(params: NetworkParams) -> None:
    prev = params.hidden[0][0].shape[1]
    for i, (W, b) in enumerate(params.hidden):
        if W.shape[1] != prev or b.shape != (W.shape[0],):
            raise ValueError(f"hidden layer {i} has inconsistent shape {W.shape}/{b.shape}")
        prev = W.shape[0]
    for name, (W, b) in (("mask", params.mask_head), ("variance", params.var_head)):
        if W.shape[1] != prev or b.shape != (W.shape[0],):
            raise ValueError(f"{name} head has inconsistent shape {W.shape}/{b.shape}")
    if params.mask_head[0].shape != params.var_head[0].shape:
        raise ValueError("mask and variance heads differ in shape")


def init_params(dims: NetworkDims, seed: int) -> NetworkParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)

    def layer(n_in, n_out):
        limit = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out)

    hidden = []
    prev = dims.n_in
    for h in dims.hidden:
        hidden.append(layer(prev, h))
        prev = h
    return NetworkParams(hidden, layer(prev, dims.n_out), layer(prev, dims.n_out))


@dataclass
class MaskPosterior:
    """Per-frame mask means and error variances; rows are frames.

    ``mask_mel``/``var_mel`` are (T, B); ``mask_lin``/``var_lin`` are (T, n_bins).
    """

    mask_mel: np.ndarray
    var_mel: np.ndarray
    mask_lin: np.ndarray
    var_lin: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        """Linear-domain MAP mask laid out like spectrogram bins (n_bins, T)."""
        return self.mask_lin.T

    @property
    def variance(self) -> np.ndarray:
        return self.var_lin.T


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer, post-dropout
    pre: list[np.ndarray] = field(default_factory=list)  # hidden pre-activations
    drop: list[np.ndarray | None] = field(default_factory=list)  # inverted-dropout multipliers
    head_in: np.ndarray | None = None
    mask_mel: np.ndarray | None = None
    var_exp: np.ndarray | None = None


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _dropout(z, p, rng):
    if rng is None or p == 0.0:
        return z, None
    keep = (rng.random(z.shape) >= p) / (1.0 - p)
    return z * keep, keep


def forward(
    params: NetworkParams,
    x: np.ndarray,
    hyper: TrainHyper,
    fb: MelFilterbank,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[MaskPosterior, ForwardCache]:
    """Run a batch of feature rows ``x`` (T, n_in) through the network.

    Dropout is active only when ``dropout_rng`` is given.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n_in = params.hidden[0][0].shape[1]
    if x.shape[1] != n_in:
        raise ValueError(f"feature length {x.shape[1]} does not match input dim {n_in}")
    if params.mask_head[0].shape[0] != fb.n_bands:
        raise ValueError("network output size does not match the mel filterbank")
    cache = ForwardCache()
    z, keep = _dropout(x, hyper.dropout_in, dropout_rng)
    cache.drop.append(keep)
    for W, b in params.hidden:
        cache.inputs.append(z)
        a = z @ W.T + b
        cache.pre.append(a)
        z, keep = _dropout(np.maximum(a, 0.0), hyper.dropout_hidden, dropout_rng)
        cache.drop.append(keep)
    cache.head_in = z
    mask_mel = _sigmoid(z @ params.mask_head[0].T + params.mask_head[1])
    cache.mask_mel = mask_mel
    cache.var_exp = np.exp(z @ params.var_head[0].T + params.var_head[1])
    var_mel = cache.var_exp + hyper.c_sigma
    post = MaskPosterior(
        mask_mel,
        var_mel,
        np.clip(mask_mel @ fb.band_inverse.T, 0.0, 1.0),
        np.maximum(_expand_var(fb, var_mel), hyper.c_sigma),
    )
    return post, cache


def _expand_var(fb: MelFilterbank, var_mel: np.ndarray) -> np.ndarray:
    # geometric: band variances span decades, and a linear expansion of such
    # vectors overshoots below zero next to every large jump
    return np.exp(np.log(var_mel) @ fb.band_inverse.T)


def linear_to_mel_grads(
    fb: MelFilterbank,
    post: MaskPosterior,
    d_mask_lin: np.ndarray,
    d_var_lin: np.ndarray,
    c_sigma: float = C_SIGMA,
) -> tuple[np.ndarray, np.ndarray]:
    """Pull linear-bin gradients back through the clamped pseudo-inverse.

    Clamped bins pass no gradient.
    """
    raw_mask = post.mask_mel @ fb.band_inverse.T
    raw_var = _expand_var(fb, post.var_mel)
    d_mask = np.where((raw_mask > 0.0) & (raw_mask < 1.0), d_mask_lin, 0.0)
    d_log_var = np.where(raw_var > c_sigma, d_var_lin * raw_var, 0.0)
    return d_mask @ fb.band_inverse, (d_log_var @ fb.band_inverse) / post.var_mel


def backward(
    params: NetworkParams,
    cache: ForwardCache,
    grad_mask_mel: np.ndarray,
    grad_var_mel: np.ndarray,
    hyper: TrainHyper,
) -> NetworkParams:
    """Gradients of a scalar loss given its partials w.r.t. the head outputs.

    ``grad_*_mel`` are (T, B), summed over rows. An L2 term ``l2 * |W|^2``
    contributes ``2 * l2 * W`` to each weight gradient.
    """
    if cache.head_in is None or len(cache.pre) != len(params.hidden):
        raise ValueError("cache does not come from a forward pass of these parameters")
    z = cache.head_in
    grad_mask_mel = np.atleast_2d(grad_mask_mel)
    grad_var_mel = np.atleast_2d(grad_var_mel)
    if grad_mask_mel.shape != cache.mask_mel.shape or z.shape[1] != params.mask_head[0].shape[1]:
        raise ValueError("cache does not match these parameters")
    da_mu = grad_mask_mel * cache.mask_mel * (1.0 - cache.mask_mel)
    da_sig = grad_var_mel * cache.var_exp

    def with_l2(W, g):
        return g + 2.0 * hyper.l2 * W if hyper.l2 else g

    Wm, Ws = params.mask_head[0], params.var_head[0]
    mask_grad = (with_l2(Wm, da_mu.T @ z), da_mu.sum(axis=0))
    var_grad = (with_l2(Ws, da_sig.T @ z), da_sig.sum(axis=0))
    dz = da_mu @ Wm + da_sig @ Ws
    hidden_grads = []
    for i in range(len(params.hidden) - 1, -1, -1):
        keep = cache.drop[i + 1]
        if keep is not None:
            dz = dz * keep
        da = dz * (cache.pre[i] > 0.0)
        W = params.hidden[i][0]
        hidden_grads.append((with_l2(W, da.T @ cache.inputs[i]), da.sum(axis=0)))
        dz = da @ W
    hidden_grads.reverse()
    return NetworkParams(hidden_grads, mask_grad, var_grad)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    step_size: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: NetworkParams, step_size: float = 1e-4, **kw) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays],
                   0, step_size, **kw)


def adam_step(
    params: NetworkParams, grads: NetworkParams, state: AdamState
) -> tuple[NetworkParams, AdamState]:
    """One bias-corrected Adam step that descends ``grads``. Inputs are not mutated."""
    ps, gs = params.arrays(), grads.arrays()
    if len(ps) != len(gs) or len(ps) != len(state.m):
        raise ValueError("parameter, gradient and state structures differ")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p.append(p - state.step_size * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return NetworkParams.from_arrays(new_p), replace(state, m=new_m, v=new_v, t=t)


# -- checkpoints --------------------------------------------------------------


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointDimensionError(CheckpointError):
    pass


def save_checkpoint(params: NetworkParams, stats: FeatureStats, meta: dict | None = None) -> bytes:
    """Serialize to bytes: magic, u32-length-prefixed UTF-8 JSON header,
    then every array as little-endian float64 in header order.

    ``meta`` keys ``Q``, ``n_mels``, ``n_bins``, ``sample_rate`` and
    ``frame_len`` are lifted into the header; everything else is kept as
    free-form creation metadata.
    """
    _check_chain(params)
    meta = dict(meta or {})
    dims = params.dims
    if stats.mean.shape[0] != dims.n_in:
        raise CheckpointDimensionError("feature statistics do not match the input dim")
    arrays = params.arrays() + [stats.mean, stats.std]
    header = {
        "dims": {"n_in": dims.n_in, "hidden": list(dims.hidden), "n_out": dims.n_out},
        "Q": meta.pop("Q", None),
        "n_mels": meta.pop("n_mels", dims.n_out),
        "n_bins": meta.pop("n_bins", None),
        "sample_rate": meta.pop("sample_rate", None),
        "frame_len": meta.pop("frame_len", None),
        "meta": meta,
        "arrays": [list(a.shape) for a in arrays],
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(text)), text]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
    return b"".join(parts)


def load_checkpoint(blob: bytes) -> tuple[NetworkParams, FeatureStats, dict]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("unrecognized checkpoint format")
    pos = len(MAGIC)
    if len(blob) < pos + 4:
        raise CheckpointTruncatedError("truncated header")
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + n:
        raise CheckpointTruncatedError("truncated header")
    try:
        header = json.loads(blob[pos: pos + n].decode("utf-8"))
        shapes = [tuple(s) for s in header["arrays"]]
        dims = header["dims"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"unrecognized checkpoint format: bad header ({exc})") from exc
    pos += n
    expected = 2 * (len(dims["hidden"]) + 2) + 2
    if len(shapes) != expected:
        raise CheckpointDimensionError(
            f"header declares {len(dims['hidden'])} hidden layers but lists {len(shapes)} arrays"
        )
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * count
        if end > len(blob):
            raise CheckpointTruncatedError("truncated payload")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
                      .reshape(shape).astype(np.float64))
        pos = end
    if pos != len(blob):
        raise CheckpointFormatError("unrecognized checkpoint format: trailing bytes")
    params = NetworkParams.from_arrays(arrays[:-2])
    try:
        _check_chain(params)
    except ValueError as exc:
        raise CheckpointDimensionError(str(exc)) from exc
    got = params.dims
    if (got.n_in, list(got.hidden), got.n_out) != (dims["n_in"], list(dims["hidden"]), dims["n_out"]):
        raise CheckpointDimensionError(f"arrays give dims {got}, header declares {dims}")
    if arrays[-2].shape != (got.n_in,) or arrays[-1].shape != (got.n_in,):
        raise CheckpointDimensionError("feature statistics do not match the input dim")
    if header.get("n_mels") not in (None, got.n_out):
        raise CheckpointDimensionError("mel band count does not match the output dim")
    meta = dict(header.get("meta", {}))
    for key in ("Q", "n_mels", "n_bins", "sample_rate", "frame_len"):
        if header.get(key) is not None:
            meta[key] = header[key]
    return params, FeatureStats(arrays[-2], arrays[-1]), meta
