"""Motion-aware visual auto-encoding.

A trainable patch encoder produces a feature grid per frame; learnable
queries cross-attend over the channel-concatenated grids of two
consecutive frames to pool a single motion latent. The frame decoder
conditions the earlier frame's patch features on a (quantized) motion
latent and emits the next frame through a sigmoid. Reconstruction is
scored by mean L1 plus a Gaussian-windowed SSIM term.
"""

from __future__ import annotations

import functools

import numpy as np
from scipy import ndimage

from .quantizer import standardize_latent
from .tensor import (
    Module,
    Tensor,
    absolute,
    as_tensor,
    concat,
    gelu,
    linear,
    matmul,
    parameter,
    reduce_mean,
    reshape,
    sigmoid,
    softmax,
    square,
    transpose,
)

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


# -- SSIM -----------------------------------------------------------------------


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return (g / g.sum()).astype(np.float64)


@functools.lru_cache(maxsize=4)
def _window_1d(dtype_name: str) -> np.ndarray:
    return gaussian_window().astype(dtype_name)


def _blur2d(x: Tensor) -> Tensor:
    """Valid separable Gaussian blur over the (H, W) axes of (B, H, W, C).

    Fused autograd op: 7-tap correlations along each axis, cropped to the
    fully-covered region. The kernel is symmetric, so the adjoint is
    zero-padding followed by the same correlation.
    """
    from .tensor import _make

    b, h, w, c = x.shape
    g = _window_1d(x.dtype.name)
    half = g.shape[0] // 2
    if h < g.shape[0] or w < g.shape[0]:
        raise ValueError(f"frame sides {(h, w)} smaller than SSIM window {g.shape[0]}")
    blurred = ndimage.correlate1d(x.data, g, axis=1, mode="constant")
    blurred = ndimage.correlate1d(blurred, g, axis=2, mode="constant")
    data = blurred[:, half : h - half, half : w - half]

    def backward(grad):
        padded = np.zeros((b, h, w, c), dtype=grad.dtype)
        padded[:, half : h - half, half : w - half] = grad
        gx = ndimage.correlate1d(padded, g, axis=1, mode="constant")
        gx = ndimage.correlate1d(gx, g, axis=2, mode="constant")
        x.accumulate_grad(gx, own=True)

    return _make(data, (x,), backward)


def ssim(x, y) -> Tensor:
    """Mean structural similarity over valid 7x7 Gaussian windows, per channel.

    Inputs are (H, W, C) frames or (B, H, W, C) batches in [0, 1]; returns a
    scalar Tensor in (-1, 1], differentiable in both arguments.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"ssim: frame shapes differ {x.shape} vs {y.shape}")
    if x.ndim == 3:
        x = reshape(x, (1,) + x.shape)
        y = reshape(y, (1,) + y.shape)
    mu_x = _blur2d(x)
    mu_y = _blur2d(y)
    sig_x = _blur2d(square(x)) - square(mu_x)
    sig_y = _blur2d(square(y)) - square(mu_y)
    sig_xy = _blur2d(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * sig_xy + SSIM_C2)
    den = (square(mu_x) + square(mu_y) + SSIM_C1) * (sig_x + sig_y + SSIM_C2)
    return reduce_mean(num / den)


def visual_loss(pred, target, lambda_l1: float = 1.0, lambda_ssim: float = 1.0) -> Tensor:
    """lambda_l1 * mean|pred-target| + lambda_ssim * (1 - SSIM(pred, target))."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError("visual_loss: shape mismatch")
    loss = reduce_mean(absolute(pred - target)) * lambda_l1
    if lambda_ssim:
        loss = loss + (1.0 - ssim(pred, target)) * lambda_ssim
    return loss


def psnr(pred: np.ndarray, target: np.ndarray, cap_db: float = 99.0) -> float:
    """Peak signal-to-noise ratio on [0, 1] frames, capped for identical inputs."""
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2))
    if mse <= 0:
        return cap_db
    return min(cap_db, float(-10.0 * np.log10(mse)))


# -- patch feature extractor -------------------------------------------------------


class PatchEncoder(Module):
    """Non-overlapping patch embedding with one hidden nonlinearity."""

    def __init__(self, frame_size: int, patch_size: int, channels: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if frame_size % patch_size:
            raise ValueError("frame_size must be a multiple of patch_size")
        rng = rng or np.random.default_rng(0)
        self.frame_size = frame_size
        self.patch_size = patch_size
        self.channels = channels
        self.grid = frame_size // patch_size
        n_in = patch_size * patch_size * 3
        self.w1 = parameter(rng, (n_in, channels), dtype=dtype)
        self.b1 = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.w2 = parameter(rng, (channels, channels), dtype=dtype)
        self.b2 = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def extract(self, frame) -> Tensor:
        """(H, W, 3) or (B, H, W, 3) in [0, 1] -> (.., P, P, c) feature grid."""
        frame = as_tensor(frame)
        squeeze = frame.ndim == 3
        if squeeze:
            frame = reshape(frame, (1,) + frame.shape)
        b = frame.shape[0]
        s, p = self.frame_size, self.patch_size
        if frame.shape[1:] != (s, s, 3):
            raise ValueError(f"extract_features: frame shape {frame.shape[1:]} != ({s}, {s}, 3)")
        g = self.grid
        x = reshape(frame, (b, g, p, g, p, 3))
        x = transpose(x, (0, 1, 3, 2, 4, 5))
        x = reshape(x, (b, g * g, p * p * 3))
        h = gelu(linear(x, self.w1, self.b1))
        h = linear(h, self.w2, self.b2) + h
        out = reshape(h, (b, g, g, self.channels))
        return reshape(out, out.shape[1:]) if squeeze else out


class MotionPooler(Module):
    """Learnable-query cross-attention pooling of two feature grids to one latent."""

    def __init__(self, channels: int, latent_dim: int, num_queries: int = 4, query_dim: int = 64,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.latent_dim = latent_dim
        self.num_queries = num_queries
        self.query_dim = query_dim
        self.queries = parameter(rng, (num_queries, query_dim), scale=0.5, dtype=dtype)
        self.wk = parameter(rng, (2 * channels, query_dim), dtype=dtype)
        self.wv = parameter(rng, (2 * channels, query_dim), dtype=dtype)
        self.w_out = parameter(rng, (query_dim, latent_dim), dtype=dtype)
        self.b_out = Tensor(np.zeros(latent_dim, dtype=dtype), requires_grad=True)

    def pool(self, feat_a, feat_b) -> Tensor:
        """Channel-concatenate two (.., P, P, c) grids and pool to (.., d)."""
        feat_a, feat_b = as_tensor(feat_a), as_tensor(feat_b)
        if feat_a.shape != feat_b.shape:
            raise ValueError("motion_pool: feature grids differ in shape")
        squeeze = feat_a.ndim == 3
        if squeeze:
            feat_a = reshape(feat_a, (1,) + feat_a.shape)
            feat_b = reshape(feat_b, (1,) + feat_b.shape)
        b, gh, gw, c = feat_a.shape
        both = concat([feat_a, feat_b], axis=3)
        tokens = reshape(both, (b, gh * gw, 2 * c))
        keys = linear(tokens, self.wk)
        vals = linear(tokens, self.wv)
        scores = matmul(self.queries, transpose(keys, (0, 2, 1))) * (1.0 / np.sqrt(self.query_dim))
        attn = softmax(scores, axis=-1)            # (B, nq, P*P)
        pooled = reduce_mean(matmul(attn, vals), axis=1)
        z = standardize_latent(linear(pooled, self.w_out, self.b_out))
        return reshape(z, (self.latent_dim,)) if squeeze else z


class FrameDecoder(Module):
    """Predicts the next frame from patch features conditioned on a motion latent.

    A linear skip from the feature grid carries static content; one
    self-attention block plus the latent conditioning supplies the motion
    correction. Output is sigmoid-bounded to [0, 1].

    decode_calls counts invocations process-wide; evaluation uses it to
    prove the action-only inference path never touches this decoder.
    """

    decode_calls: int = 0

    def __init__(self, frame_size: int, patch_size: int, channels: int, latent_dim: int,
                 width: int = 64, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.frame_size = frame_size
        self.patch_size = patch_size
        self.channels = channels
        self.latent_dim = latent_dim
        self.width = width
        self.grid = frame_size // patch_size
        n_px = patch_size * patch_size * 3
        self.w_in = parameter(rng, (channels, width), dtype=dtype)
        self.b_in = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        self.w_cond = parameter(rng, (latent_dim, width), dtype=dtype)
        self.pos = parameter(rng, (self.grid * self.grid, width), scale=0.1, dtype=dtype)
        self.wq = parameter(rng, (width, width), dtype=dtype)
        self.wk = parameter(rng, (width, width), dtype=dtype)
        self.wv = parameter(rng, (width, width), dtype=dtype)
        self.w_mlp1 = parameter(rng, (width, 2 * width), dtype=dtype)
        self.b_mlp1 = Tensor(np.zeros(2 * width, dtype=dtype), requires_grad=True)
        self.w_mlp2 = parameter(rng, (2 * width, width), dtype=dtype)
        self.b_mlp2 = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        self.w_px = parameter(rng, (width, n_px), dtype=dtype)
        self.b_px = Tensor(np.zeros(n_px, dtype=dtype), requires_grad=True)
        self.w_skip = parameter(rng, (channels, n_px), dtype=dtype)

    def decode(self, features, latent) -> Tensor:
        """(.., P, P, c) features + (.., d) latent -> (.., S, S, 3) frame in [0, 1]."""
        FrameDecoder.decode_calls += 1
        features, latent = as_tensor(features), as_tensor(latent)
        squeeze = features.ndim == 3
        if squeeze:
            features = reshape(features, (1,) + features.shape)
            latent = reshape(latent, (1,) + latent.shape)
        b, gh, gw, c = features.shape
        if latent.shape != (b, self.latent_dim):
            raise ValueError(f"decode_frame: latent shape {latent.shape} != ({b}, {self.latent_dim})")
        n_tok = gh * gw
        feats = reshape(features, (b, n_tok, c))
        cond = reshape(matmul(latent, self.w_cond), (b, 1, self.width))
        h = linear(feats, self.w_in, self.b_in) + cond + self.pos
        q = linear(h, self.wq)
        k = linear(h, self.wk)
        v = linear(h, self.wv)
        scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(self.width))
        h = h + matmul(softmax(scores, axis=-1), v)
        h = h + gelu(linear(gelu(linear(h, self.w_mlp1, self.b_mlp1)), self.w_mlp2, self.b_mlp2))
        logits = linear(h, self.w_px, self.b_px) + matmul(feats, self.w_skip)
        p = self.patch_size
        img = reshape(logits, (b, gh, gw, p, p, 3))
        img = transpose(img, (0, 1, 3, 2, 4, 5))
        img = reshape(img, (b, gh * p, gw * p, 3))
        out = sigmoid(img)
        return reshape(out, out.shape[1:]) if squeeze else out


class VisualCodec:
    """Convenience bundle of the visual encoder stack and decoder."""

    def __init__(self, patch_encoder: PatchEncoder, pooler: MotionPooler, decoder: FrameDecoder):
        self.patch_encoder = patch_encoder
        self.pooler = pooler
        self.decoder = decoder

    def motion_latents(self, frames_prev: np.ndarray, frames_next: np.ndarray) -> Tensor:
        """Batch of consecutive frame pairs -> (B, d) motion latents."""
        fa = self.patch_encoder.extract(frames_prev)
        fb = self.patch_encoder.extract(frames_next)
        return self.pooler.pool(fa, fb)
