"""Frequency-domain action auto-encoding.

A horizon-H chunk of control deltas is normalized per dimension, turned
into orthonormal type-II DCT coefficients per column, flattened and
encoded to a single quantizable latent. Decoding runs a small
cross-attention decoder from a latent sequence back to coefficients and
inverts the DCT. Chunk columns follow the 7-dim layout
[dx, dy, dz, droll, dpitch, dyaw, dgrip].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .quantizer import standardize_latent
from .tensor import (
    Module,
    Tensor,
    as_tensor,
    concat,
    gelu,
    linear,
    matmul,
    parameter,
    reduce_mean,
    reshape,
    softmax,
    square,
    tanh,
    transpose,
)

NORMALIZED_TOLERANCE = 1e-5


# -- normalization ---------------------------------------------------------------


@dataclass
class NormalizerStats:
    """Per-dimension [lo, hi] bounds; degenerate dims have lo == hi."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if np.any(self.lo > self.hi):
            raise ValueError("normalizer stats need lo <= hi per dimension")

    @property
    def degenerate(self) -> np.ndarray:
        return self.hi <= self.lo

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"lo": self.lo.tolist(), "hi": self.hi.tolist()}))

    @classmethod
    def from_json(cls, path) -> "NormalizerStats":
        doc = json.loads(Path(path).read_text())
        return cls(lo=np.array(doc["lo"]), hi=np.array(doc["hi"]))


def fit_normalizer(chunks, lo_pct: float = 1.0, hi_pct: float = 99.0) -> NormalizerStats:
    """Percentile bounds over a dataset of (H, d_a) chunks."""
    chunks = [np.asarray(c) for c in chunks]
    if not chunks:
        raise ValueError("fit_normalizer needs a nonempty dataset")
    stacked = np.concatenate([c.reshape(-1, c.shape[-1]) for c in chunks], axis=0)
    lo = np.percentile(stacked, lo_pct, axis=0)
    hi = np.percentile(stacked, hi_pct, axis=0)
    return NormalizerStats(lo=lo, hi=hi)


def normalize(chunk: np.ndarray, stats: NormalizerStats) -> np.ndarray:
    """Affine [lo, hi] -> [-1, 1] with clipping; degenerate dims map to 0."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.shape[-1] != stats.lo.shape[0]:
        raise ValueError("normalize: dimension count does not match stats")
    span = stats.hi - stats.lo
    safe = np.where(stats.degenerate, 1.0, span)
    out = 2.0 * (chunk - stats.lo) / safe - 1.0
    out = np.where(stats.degenerate, 0.0, out)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def denormalize(chunk: np.ndarray, stats: NormalizerStats) -> np.ndarray:
    """Inverse of normalize on non-degenerate dims; degenerate dims return lo."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.shape[-1] != stats.lo.shape[0]:
        raise ValueError("denormalize: dimension count does not match stats")
    span = stats.hi - stats.lo
    out = (chunk + 1.0) / 2.0 * span + stats.lo
    out = np.where(stats.degenerate, stats.lo, out)
    return out.astype(np.float32)


# -- orthonormal DCT ---------------------------------------------------------------


def dct_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """Orthonormal type-II DCT matrix D, so coeffs = D @ signal and D.T @ D = I."""
    k = np.arange(n)[:, None]
    t = np.arange(n)[None, :]
    mat = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * t + 1) * k / (2 * n))
    mat[0] *= np.sqrt(0.5)
    return mat.astype(dtype)


def dct_forward(chunk: np.ndarray) -> np.ndarray:
    """Type-II orthonormal DCT applied independently to each column."""
    chunk = np.asarray(chunk)
    d = dct_matrix(chunk.shape[0], dtype=np.float64)
    return (d @ chunk.astype(np.float64)).astype(chunk.dtype)


def dct_inverse(coeffs: np.ndarray) -> np.ndarray:
    """Exact inverse (type-III orthonormal) of dct_forward."""
    coeffs = np.asarray(coeffs)
    d = dct_matrix(coeffs.shape[0], dtype=np.float64)
    return (d.T @ coeffs.astype(np.float64)).astype(coeffs.dtype)


def action_loss(pred, target) -> Tensor:
    """Mean squared error over all H x d_a entries."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"action_loss: shape mismatch {pred.shape} vs {target.shape}")
    return reduce_mean(square(pred - target))


# -- learned encoder / decoder ---------------------------------------------------


class ActionEncoder(Module):
    """Two-layer feed-forward map from flattened DCT coefficients to a d-latent."""

    def __init__(self, horizon: int, action_dim: int, latent_dim: int, hidden: int = 128,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.horizon = horizon
        self.action_dim = action_dim
        self.latent_dim = latent_dim
        n_in = horizon * action_dim
        self.w1 = parameter(rng, (n_in, hidden), dtype=dtype)
        self.b1 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w2 = parameter(rng, (hidden, latent_dim), dtype=dtype)
        self.b2 = Tensor(np.zeros(latent_dim, dtype=dtype), requires_grad=True)
        self._dct = Tensor(dct_matrix(horizon, dtype=dtype))

    def encode(self, chunk) -> Tensor:
        """Normalized (H, d_a) chunk or (B, H, d_a) batch -> latent(s)."""
        chunk = as_tensor(chunk)
        if chunk.shape[-2:] != (self.horizon, self.action_dim):
            raise ValueError(f"encode_action: chunk shape {chunk.shape} != (H={self.horizon}, d_a={self.action_dim})")
        if np.max(np.abs(chunk.data)) > 1.0 + NORMALIZED_TOLERANCE:
            raise ValueError("encode_action: chunk is not normalized to [-1, 1]")
        coeffs = matmul(self._dct, chunk)  # broadcasts over leading batch dims
        flat = reshape(coeffs, chunk.shape[:-2] + (self.horizon * self.action_dim,))
        h = gelu(linear(flat, self.w1, self.b1))
        return standardize_latent(linear(h, self.w2, self.b2))


class ActionDecoder(Module):
    """Cross-attention decoder: a latent sequence -> (H, d_a) coefficient grid -> chunk.

    One learned query per horizon step attends over the projected latents;
    the coefficient head is tanh-bounded to [-sqrt(H), sqrt(H)], the exact
    range attainable by orthonormal DCT coefficients of [-1, 1] signals.
    """

    def __init__(self, horizon: int, action_dim: int, latent_dim: int, width: int = 64,
                 max_latents: int = 48, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.horizon = horizon
        self.action_dim = action_dim
        self.latent_dim = latent_dim
        self.width = width
        self.max_latents = max_latents
        self.queries = parameter(rng, (horizon, width), scale=0.5, dtype=dtype)
        self.latent_pos = parameter(rng, (max_latents, latent_dim), scale=0.1, dtype=dtype)
        self.wk = parameter(rng, (latent_dim, width), dtype=dtype)
        self.wv = parameter(rng, (latent_dim, width), dtype=dtype)
        # direct mean-latent path: couples output to the latents from step one
        self.w_direct = parameter(rng, (latent_dim, width), scale=1.0 / np.sqrt(latent_dim) * 4, dtype=dtype)
        self.w_mlp1 = parameter(rng, (width, 2 * width), dtype=dtype)
        self.b_mlp1 = Tensor(np.zeros(2 * width, dtype=dtype), requires_grad=True)
        self.w_mlp2 = parameter(rng, (2 * width, width), dtype=dtype)
        self.b_mlp2 = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        self.w_out = parameter(rng, (width, action_dim), dtype=dtype)
        self.b_out = Tensor(np.zeros(action_dim, dtype=dtype), requires_grad=True)
        self._dct_t = Tensor(dct_matrix(horizon, dtype=dtype).T)
        self._coeff_scale = float(np.sqrt(horizon))

    def valid_latent_count(self, n: int) -> bool:
        return 1 <= n <= self.max_latents and (n == 1 or self.horizon % n == 0)

    def decode(self, latents) -> Tensor:
        """(L, d) or (B, L, d) latents -> normalized (.., H, d_a) chunk."""
        latents = as_tensor(latents)
        squeeze = latents.ndim == 2
        if squeeze:
            latents = reshape(latents, (1,) + latents.shape)
        n = latents.shape[1]
        if latents.shape[-1] != self.latent_dim or not self.valid_latent_count(n):
            raise ValueError(f"decode_action: invalid latent sequence shape {latents.shape}")
        lat = latents + self.latent_pos[:n]
        keys = linear(lat, self.wk)                        # (B, L, w)
        vals = linear(lat, self.wv)
        scores = matmul(self.queries, transpose(keys, (0, 2, 1))) * (1.0 / np.sqrt(self.width))
        attn = softmax(scores, axis=-1)                    # (B, H, L)
        direct = reshape(linear(latents.mean(axis=1), self.w_direct), (latents.shape[0], 1, self.width))
        h = matmul(attn, vals) + direct                    # (B, H, w)
        h = h + gelu(linear(gelu(linear(h, self.w_mlp1, self.b_mlp1)), self.w_mlp2, self.b_mlp2))
        coeffs = tanh(linear(h, self.w_out, self.b_out)) * self._coeff_scale
        chunk = matmul(self._dct_t, coeffs)                # inverse DCT per column
        return reshape(chunk, chunk.shape[1:]) if squeeze else chunk


class ActionCodec:
    """Bundles normalizer stats with the encoder/decoder pair."""

    def __init__(self, encoder: ActionEncoder, decoder: ActionDecoder, stats: NormalizerStats):
        if encoder.horizon != decoder.horizon or encoder.action_dim != decoder.action_dim:
            raise ValueError("encoder/decoder horizon or action_dim mismatch")
        self.encoder = encoder
        self.decoder = decoder
        self.stats = stats

    def roundtrip(self, raw_chunk: np.ndarray, cb) -> np.ndarray:
        """normalize -> encode -> quantize -> decode -> denormalize (single latent path)."""
        from .quantizer import quantize

        norm = normalize(raw_chunk, self.stats)
        z = self.encoder.encode(norm)
        q = quantize(z.data, cb)
        decoded = self.decoder.decode(Tensor(q.vector[None, :]))
        return denormalize(decoded.data, self.stats)
