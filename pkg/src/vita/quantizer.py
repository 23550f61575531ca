"""Shared discrete codebook and the nearest-neighbor quantization operator.

One codebook serves both the visual-motion and action latents. Entries
are trained with the standard pair of quantization losses (codebook +
commitment) while the straight-through estimator carries reconstruction
gradients past the argmin. Low-usage entries are periodically revived
from a ring buffer of recent encoder outputs to avoid collapse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, layer_norm, reduce_mean, reduce_sum, square, straight_through

DEFAULT_COMMITMENT_BETA = 0.25


def standardize_latent(z: Tensor) -> Tensor:
    """Per-sample standardization to per-dim scale 1/sqrt(d) over the last axis.

    Encoders apply this before quantization: it pins latents to the
    codebook's init range and removes the shrink-to-a-point failure mode
    of jointly trained quantized auto-encoders.
    """
    d = z.shape[-1]
    w = Tensor(np.full(d, 1.0 / np.sqrt(d), dtype=z.dtype))
    b = Tensor(np.zeros(d, dtype=z.dtype))
    return layer_norm(z, w, b)


class FrozenCodebookError(RuntimeError):
    pass


@dataclass
class QuantizeResult:
    index: int
    vector: np.ndarray
    sq_distance: float


class Codebook:
    """K x d entry table with usage statistics and a revival buffer.

    Usage counters increment exactly once per quantization; `usage_window`
    tracks assignments since the last revival sweep. When frozen, entries
    must stay byte-identical across training steps (enforced by the
    trainer's stage contracts).
    """

    def __init__(self, num_entries: int, dim: int, rng: np.random.Generator | None = None,
                 recent_capacity: int = 1024, dtype=np.float32):
        if num_entries < 1 or dim < 1:
            raise ValueError("codebook needs num_entries >= 1 and dim >= 1")
        rng = rng or np.random.default_rng(0)
        scale = 1.0 / np.sqrt(dim)
        self.entries = Tensor(rng.uniform(-scale, scale, size=(num_entries, dim)).astype(dtype),
                              requires_grad=True)
        self.usage = np.zeros(num_entries, dtype=np.int64)
        self.usage_window = np.zeros(num_entries, dtype=np.int64)
        self.frozen = False
        self.recent = np.zeros((recent_capacity, dim), dtype=dtype)
        self.recent_count = 0  # monotone write counter; ring index = count % capacity

    @property
    def num_entries(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def params(self) -> dict[str, Tensor]:
        return {} if self.frozen else {"entries": self.entries}

    def record_recent(self, latents: np.ndarray) -> None:
        """Push encoder outputs into the revival ring buffer."""
        latents = np.atleast_2d(latents)
        cap = self.recent.shape[0]
        for row in latents:
            self.recent[self.recent_count % cap] = row
            self.recent_count += 1

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Non-parameter state that must survive a checkpoint for exact resume."""
        return {
            "usage": self.usage.astype(np.float32),
            "usage_window": self.usage_window.astype(np.float32),
            "recent": self.recent,
            "recent_count": np.array([self.recent_count], dtype=np.float32),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.usage = arrays["usage"].astype(np.int64)
        self.usage_window = arrays["usage_window"].astype(np.int64)
        self.recent = arrays["recent"].astype(self.recent.dtype)
        self.recent_count = int(arrays["recent_count"][0])


def nearest_entry(z: np.ndarray, entries: np.ndarray) -> tuple[int, float]:
    """Exact argmin of squared distance; ties resolve to the lowest index."""
    diff = entries - z
    d2 = np.einsum("kd,kd->k", diff, diff)
    k = int(np.argmin(d2))
    return k, float(d2[k])


def quantize(z, cb: Codebook) -> QuantizeResult:
    """Map a single d-vector to its nearest codebook entry, counting usage."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z)
    if z.ndim != 1 or z.shape[0] != cb.dim:
        raise ValueError(f"quantize: latent dim {z.shape} does not match codebook dim {cb.dim}")
    k, d2 = nearest_entry(z, cb.entries.data)
    cb.usage[k] += 1
    cb.usage_window[k] += 1
    return QuantizeResult(index=k, vector=cb.entries.data[k].copy(), sq_distance=d2)


def quantize_batch(zs: np.ndarray, cb: Codebook, count_usage: bool = True) -> np.ndarray:
    """Vectorized nearest-entry indices for an (n, d) batch."""
    zs = np.asarray(zs.data if isinstance(zs, Tensor) else zs)
    if zs.ndim != 2 or zs.shape[1] != cb.dim:
        raise ValueError("quantize_batch expects (n, d) latents matching the codebook dim")
    diff = zs[:, None, :] - cb.entries.data[None, :, :]
    d2 = np.einsum("nkd,nkd->nk", diff, diff)
    idx = np.argmin(d2, axis=1)
    if count_usage:
        np.add.at(cb.usage, idx, 1)
        np.add.at(cb.usage_window, idx, 1)
    return idx


def quantize_straight_through(z: Tensor, cb: Codebook) -> Tensor:
    """Forward value is the selected entry; backward is identity onto z.

    Codebook entries receive no gradient through this path; they are
    trained by the codebook loss term instead.
    """
    res = quantize(z, cb)
    return straight_through(z, res.vector)


def quantize_straight_through_batch(zs: Tensor, cb: Codebook) -> tuple[Tensor, np.ndarray]:
    """Batched straight-through lookup; returns (quantized latents, indices)."""
    idx = quantize_batch(zs.data, cb)
    return straight_through(zs, cb.entries.data[idx]), idx


def vq_losses(z, c, beta: float = DEFAULT_COMMITMENT_BETA) -> tuple[Tensor, Tensor]:
    """(codebook_loss, commitment_loss) = (||sg(z)-c||^2, beta*||z-sg(c)||^2).

    Accepts single vectors or (n, d) batches; batch losses are means over n.
    """
    z, c = as_tensor(z), as_tensor(c)
    if z.shape != c.shape:
        raise ValueError("vq_losses: shape mismatch")
    sq_cb = square(c - Tensor(z.data))
    sq_commit = square(z - Tensor(c.data))
    if z.ndim > 1:
        codebook_loss = reduce_mean(reduce_sum(sq_cb, axis=-1))
        commit = reduce_mean(reduce_sum(sq_commit, axis=-1))
    else:
        codebook_loss = reduce_sum(sq_cb)
        commit = reduce_sum(sq_commit)
    return codebook_loss, commit * beta


def codebook_loss_for_indices(cb: Codebook, zs: np.ndarray, idx: np.ndarray) -> Tensor:
    """||sg(z) - c_idx||^2 with gradient flowing into the selected entries."""
    from .tensor import embedding

    selected = embedding(cb.entries, idx)
    diff = selected - Tensor(np.asarray(zs))
    return reduce_mean(reduce_sum(square(diff), axis=-1))


def perplexity(usage: np.ndarray) -> float:
    """exp(entropy) of the normalized usage histogram; ranges [1, K]."""
    usage = np.asarray(usage, dtype=np.float64)
    total = usage.sum()
    if total <= 0:
        raise ValueError("perplexity undefined for all-zero usage")
    p = usage / total
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))


def reinit_dead_entries(cb: Codebook, recent_latents: np.ndarray | None = None,
                        threshold: int = 1, rng: np.random.Generator | None = None) -> int:
    """Reset entries whose window usage fell below threshold to recent latents.

    Returns the number of entries reinitialized; window counters reset for
    the whole codebook afterwards.
    """
    if cb.frozen:
        raise FrozenCodebookError("cannot reinitialize entries of a frozen codebook")
    if recent_latents is None:
        n_avail = min(cb.recent_count, cb.recent.shape[0])
        recent_latents = cb.recent[:n_avail]
    recent_latents = np.atleast_2d(recent_latents)
    dead = np.flatnonzero(cb.usage_window < threshold)
    count = 0
    if dead.size and recent_latents.shape[0] > 0:
        rng = rng or np.random.default_rng(0)
        picks = rng.integers(0, recent_latents.shape[0], size=dead.size)
        cb.entries.data[dead] = recent_latents[picks].astype(cb.entries.dtype)
        cb.usage[dead] = 0
        count = int(dead.size)
    cb.usage_window[:] = 0
    return count
