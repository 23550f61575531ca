"""Autoregressive policy core with progressive attention.

The sequence layout is [input | textual | cross-modal]: embedded
instruction words, image patch tokens, one robot-state token, then
generated subtask embeddings, then hybrid codebook-token slots. Input
and textual groups attend bidirectionally within themselves, the
cross-modal group is causal, and information flows strictly
input -> textual -> cross-modal.

Positional embeddings index a canonical padded layout (text slots up to
n_text_max, and so on), so single-sample inference and padded-batch
training see identical embeddings for identical content.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Module,
    Tensor,
    concat,
    embedding,
    gelu,
    layer_norm,
    linear,
    matmul,
    multihead_attention,
    no_grad,
    parameter,
    reshape,
)
from .world import SubtaskToken

SUBTASK_NAMES = [t.name for t in SubtaskToken]
NUM_SUBTASKS = len(SUBTASK_NAMES)

GRAMMAR_WORDS = (
    "reach the red blue green yellow block push onto pad "
    "place each of matching color towel"
).split()


class Vocabulary:
    """Closed word vocabulary: PAD, UNK, the 8 subtask symbols, then grammar words."""

    PAD = 0
    UNK = 1
    SUBTASK_OFFSET = 2

    def __init__(self, words=GRAMMAR_WORDS):
        self.words = sorted(set(words))
        self.word_to_id = {w: self.SUBTASK_OFFSET + NUM_SUBTASKS + i for i, w in enumerate(self.words)}

    @property
    def size(self) -> int:
        return self.SUBTASK_OFFSET + NUM_SUBTASKS + len(self.words)

    def subtask_id(self, token: int) -> int:
        return self.SUBTASK_OFFSET + int(token)

    def encode(self, instruction: str) -> list[int]:
        """Whitespace/punctuation word tokenization; unknown words map to UNK."""
        tokens = [t for t in re.split(r"[^a-z0-9]+", instruction.lower()) if t]
        return [self.word_to_id.get(t, self.UNK) for t in tokens]


def tokenize_text(instruction: str, vocab: Vocabulary | None = None) -> list[int]:
    return (vocab or Vocabulary()).encode(instruction)


# -- progressive attention mask -----------------------------------------------------


def build_progressive_mask(n_input: int, n_textual: int, n_hybrid: int) -> np.ndarray:
    """Boolean (S, S) visibility matrix, S = N + M + L; True = may attend.

    Input rows see all input; textual rows see input plus all textual;
    cross-modal row i sees input, textual, and cross-modal positions <= i.
    """
    if n_input < 1 or n_textual < 0 or n_hybrid < 0:
        raise ValueError("mask needs n_input >= 1, n_textual >= 0, n_hybrid >= 0")
    s = n_input + n_textual + n_hybrid
    mask = np.zeros((s, s), dtype=bool)
    mask[:n_input, :n_input] = True
    mask[n_input : n_input + n_textual, : n_input + n_textual] = True
    for i in range(n_hybrid):
        row = n_input + n_textual + i
        mask[row, : row + 1] = True
    return mask


# -- transformer --------------------------------------------------------------------


class TransformerBlock(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator, dtype=np.float32,
                 mlp_ratio: int = 2):
        if width % heads:
            raise ValueError("width must divide evenly into heads")
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        hidden = mlp_ratio * width
        self.ln1_w = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        self.wq = parameter(rng, (width, width), dtype=dtype)
        self.wk = parameter(rng, (width, width), dtype=dtype)
        self.wv = parameter(rng, (width, width), dtype=dtype)
        self.wo = parameter(rng, (width, width), dtype=dtype)
        self.ln2_w = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        self.w1 = parameter(rng, (width, hidden), dtype=dtype)
        self.b1 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w2 = parameter(rng, (hidden, width), dtype=dtype)
        self.b2 = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """x: (B, S, W); mask: bool (S, S) or (B, S, S)."""
        h = layer_norm(x, self.ln1_w, self.ln1_b)
        qkv = linear(h, concat([self.wq, self.wk, self.wv], axis=1))
        att = multihead_attention(qkv, self.heads, mask)
        x = x + linear(att, self.wo)
        h = layer_norm(x, self.ln2_w, self.ln2_b)
        return x + linear(gelu(linear(h, self.w1, self.b1)), self.w2, self.b2)


@dataclass
class BackboneConfig:
    width: int = 128
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    codebook_size: int = 256
    latent_dim: int = 64
    feature_channels: int = 64
    ctx_pool: int = 2          # spatial mean-pool factor on the patch grid
    patch_grid: int = 8
    n_text_max: int = 10
    state_dim: int = 3
    max_subtasks: int = 2
    max_hybrid: int = 48


class Backbone(Module):
    """Transformer over the hybrid layout with subtask and codebook-token heads."""

    def __init__(self, cfg: BackboneConfig, vocab: Vocabulary | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.vocab = vocab or Vocabulary()
        g = cfg.patch_grid // cfg.ctx_pool
        self.n_ctx_patches = g * g
        self.max_len = cfg.n_text_max + self.n_ctx_patches + 1 + cfg.max_subtasks + cfg.max_hybrid
        w = cfg.width
        self.tok_embed = parameter(rng, (self.vocab.size, w), scale=0.05, dtype=dtype)
        self.patch_proj = parameter(rng, (cfg.feature_channels, w), dtype=dtype)
        self.state_proj = parameter(rng, (cfg.state_dim, w), dtype=dtype)
        self.state_bias = Tensor(np.zeros(w, dtype=dtype), requires_grad=True)
        self.code_proj = parameter(rng, (cfg.latent_dim, w), dtype=dtype)
        self.start_hybrid = parameter(rng, (w,), scale=0.05, dtype=dtype)
        self.pos = parameter(rng, (self.max_len, w), scale=0.05, dtype=dtype)
        self.blocks = [TransformerBlock(w, cfg.heads, rng, dtype, cfg.mlp_ratio)
                       for _ in range(cfg.blocks)]
        self.lnf_w = Tensor(np.ones(w, dtype=dtype), requires_grad=True)
        self.lnf_b = Tensor(np.zeros(w, dtype=dtype), requires_grad=True)
        self.subtask_head = parameter(rng, (w, NUM_SUBTASKS), dtype=dtype)
        self.hybrid_head = parameter(rng, (w, cfg.codebook_size), dtype=dtype)

    # -- slot offsets in the canonical padded layout --------------------------------

    @property
    def patch_pos_offset(self) -> int:
        return self.cfg.n_text_max

    @property
    def state_pos(self) -> int:
        return self.cfg.n_text_max + self.n_ctx_patches

    @property
    def subtask_pos_offset(self) -> int:
        return self.state_pos + 1

    @property
    def hybrid_pos_offset(self) -> int:
        return self.subtask_pos_offset + self.cfg.max_subtasks

    # -- embedding builders ----------------------------------------------------------

    def pool_context_features(self, feats: Tensor) -> Tensor:
        """(.., P, P, c) feature grid -> (.., n_ctx_patches, c) via mean pooling."""
        squeeze = feats.ndim == 3
        if squeeze:
            feats = reshape(feats, (1,) + feats.shape)
        b, p, _, c = feats.shape
        f = self.cfg.ctx_pool
        g = p // f
        x = reshape(feats, (b, g, f, g, f, c))
        x = x.mean(axis=4).mean(axis=2)
        out = reshape(x, (b, g * g, c))
        return reshape(out, out.shape[1:]) if squeeze else out

    def embed_context(self, instruction: str, features: Tensor, state: np.ndarray) -> tuple[Tensor, int]:
        """Single-sample context prefix: (N, width) and n_text.

        features is the (P, P, c) grid from the visual patch encoder; N is
        n_text + n_ctx_patches + 1.
        """
        state = np.asarray(state, dtype=self.tok_embed.dtype)
        if state.shape != (self.cfg.state_dim,):
            raise ValueError(f"embed_context: state shape {state.shape} != ({self.cfg.state_dim},)")
        ids = self.vocab.encode(instruction)[: self.cfg.n_text_max]
        n_text = len(ids)
        parts = []
        if n_text:
            text = embedding(self.tok_embed, np.array(ids)) + self.pos[0:n_text]
            parts.append(text)
        pooled = self.pool_context_features(features)
        patches = matmul(pooled, self.patch_proj) + self.pos[self.patch_pos_offset : self.patch_pos_offset + self.n_ctx_patches]
        parts.append(patches)
        state_tok = matmul(reshape(Tensor(state), (1, self.cfg.state_dim)), self.state_proj) + self.state_bias
        parts.append(state_tok + self.pos[self.state_pos : self.state_pos + 1])
        return concat(parts, axis=0), n_text

    def subtask_embeds(self, subtask_ids: list[int]) -> Tensor:
        ids = np.array([self.vocab.subtask_id(t) for t in subtask_ids])
        pos = self.pos[self.subtask_pos_offset : self.subtask_pos_offset + len(ids)]
        return embedding(self.tok_embed, ids) + pos

    def hybrid_inputs(self, prev_vectors: np.ndarray) -> Tensor:
        """Shifted-right hybrid slot inputs: start embedding then projected codes.

        prev_vectors: (L-1, latent_dim) codebook vectors of tokens 1..L-1.
        """
        n = prev_vectors.shape[0] + 1
        start = reshape(self.start_hybrid, (1, self.cfg.width))
        rows = [start]
        if prev_vectors.shape[0]:
            rows.append(matmul(Tensor(np.asarray(prev_vectors, self.tok_embed.dtype)), self.code_proj))
        emb = concat(rows, axis=0) if len(rows) > 1 else start
        return emb + self.pos[self.hybrid_pos_offset : self.hybrid_pos_offset + n]

    # -- core forward ---------------------------------------------------------------

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """(B, S, W) or (S, W) tokens under a boolean visibility mask."""
        squeeze = x.ndim == 2
        if squeeze:
            x = reshape(x, (1,) + x.shape)
        for block in self.blocks:
            x = block(x, mask)
        x = layer_norm(x, self.lnf_w, self.lnf_b)
        return reshape(x, x.shape[1:]) if squeeze else x

    # -- generation -----------------------------------------------------------------

    def generate_subtasks(self, prefix: Tensor, max_m: int | None = None) -> list[int]:
        """Greedy argmax over the 8-way head, appending each embedding before the next step."""
        max_m = max_m if max_m is not None else self.cfg.max_subtasks
        if max_m < 1:
            raise ValueError("generate_subtasks needs max_m >= 1")
        n = prefix.shape[0]
        out: list[int] = []
        with no_grad():
            for _ in range(max_m):
                seq = prefix if not out else concat([prefix, self.subtask_embeds(out)], axis=0)
                mask = build_progressive_mask(n, len(out), 0)
                h = self.forward(seq, mask)
                logits = matmul(reshape(h[-1], (1, self.cfg.width)), self.subtask_head)
                tok = int(np.argmax(logits.data[0]))
                out.append(tok)
                if tok == int(SubtaskToken.END_SUBTASK):
                    break
        return out

    def generate_hybrid_tokens(self, prefix: Tensor, n_subtasks: int, length: int,
                               codebook_entries: np.ndarray, temperature: float = 0.0,
                               rng: np.random.Generator | None = None) -> list[int]:
        """Sample length codebook indices under the progressive mask.

        prefix is the (N + M, width) input+textual block; temperature 0 is
        greedy, otherwise seeded softmax sampling via rng.
        """
        if length < 1:
            raise ValueError("generate_hybrid_tokens needs length >= 1")
        if length > self.cfg.max_hybrid:
            raise ValueError(f"length {length} exceeds max_hybrid {self.cfg.max_hybrid}")
        n = prefix.shape[0] - n_subtasks
        rng = rng or np.random.default_rng(0)
        tokens: list[int] = []
        with no_grad():
            for i in range(length):
                prev = codebook_entries[np.array(tokens[:i], dtype=int)] if tokens else np.zeros((0, codebook_entries.shape[1]))
                seq = concat([prefix, self.hybrid_inputs(prev)], axis=0)
                mask = build_progressive_mask(n, n_subtasks, i + 1)
                h = self.forward(seq, mask)
                logits = matmul(reshape(h[-1], (1, self.cfg.width)), self.hybrid_head).data[0]
                if temperature <= 0:
                    tok = int(np.argmax(logits))
                else:
                    z = logits / temperature
                    z = z - z.max()
                    p = np.exp(z)
                    p /= p.sum()
                    tok = int(rng.choice(p.size, p=p))
                tokens.append(tok)
        return tokens

    def forward_teacher_forced(self, prefix: Tensor, n_subtasks: int, target_tokens: np.ndarray,
                               codebook_entries: np.ndarray) -> Tensor:
        """One masked pass with ground-truth tokens as inputs; logits (L, K)."""
        targets = np.asarray(target_tokens, dtype=int)
        k = codebook_entries.shape[0]
        if targets.ndim != 1 or targets.size < 1:
            raise ValueError("forward_teacher_forced expects a 1-D token sequence")
        if targets.min() < 0 or targets.max() >= k:
            raise IndexError("target token index out of codebook range")
        n = prefix.shape[0] - n_subtasks
        length = targets.size
        seq = concat([prefix, self.hybrid_inputs(codebook_entries[targets[:-1]])], axis=0)
        mask = build_progressive_mask(n, n_subtasks, length)
        h = self.forward(seq, mask)
        return matmul(h[prefix.shape[0] :], self.hybrid_head)
