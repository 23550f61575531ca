"""Three-stage training: warmup, co-train, fine-tune.

Warmup trains both auto-encoders and the shared codebook on
single-modality batches. Co-train freezes the codebook and encoders,
teacher-forces the backbone on motion tokens produced by the frozen
visual encoder + quantizer, and keeps both decoders learning from the
shared token stream. Fine-tune updates only the action decoder.

All randomness is derived per step from (seed, step, salt), so a resumed
run is bit-identical to an uninterrupted one once optimizer moments and
codebook state are restored from the checkpoint.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .action_codec import (
    ActionDecoder,
    ActionEncoder,
    NormalizerStats,
    action_loss,
    fit_normalizer,
    normalize,
)
from .backbone import Backbone, BackboneConfig, Vocabulary, build_progressive_mask
from .config import ModelConfig, TrainConfig, VitaConfig
from .optim import AdamW, clip_grad_norm
from .quantizer import Codebook, codebook_loss_for_indices, quantize_batch, reinit_dead_entries, perplexity
from .tensor import (
    Tensor,
    absolute,
    concat,
    cross_entropy,
    embedding,
    matmul,
    no_grad,
    reduce_mean,
    reduce_sum,
    reshape,
    square,
    straight_through,
)
from .visual_codec import FrameDecoder, MotionPooler, PatchEncoder, ssim as ssim_score, visual_loss
from .world import SubtaskToken, load_episode, load_manifest, replay_states

METRIC_COLUMNS = [
    "step", "stage", "loss_total", "loss_ce", "loss_l1", "loss_ssim", "loss_mse",
    "loss_codebook", "loss_commit", "codebook_perplexity", "grad_norm", "wallclock_ms",
]

COMPONENTS = ("visual_enc", "visual_pool", "visual_dec", "action_enc", "action_dec", "codebook", "backbone")


class StageError(RuntimeError):
    pass


# -- model bundle ----------------------------------------------------------------------


class ModelBundle:
    """All trainable components plus the codebook, addressable by prefixed names."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rngs = [np.random.default_rng([seed, i]) for i in range(8)]
        grid = cfg.frame_size // cfg.patch_size
        self.patch_encoder = PatchEncoder(cfg.frame_size, cfg.patch_size, cfg.feature_channels, rngs[0])
        self.pooler = MotionPooler(cfg.feature_channels, cfg.latent_dim, cfg.pool_queries,
                                   cfg.pool_query_dim, rngs[1])
        self.frame_decoder = FrameDecoder(cfg.frame_size, cfg.patch_size, cfg.feature_channels,
                                          cfg.latent_dim, cfg.frame_decoder_width, rngs[2])
        self.action_encoder = ActionEncoder(cfg.horizon, cfg.action_dim, cfg.latent_dim,
                                            cfg.action_encoder_hidden, rngs[3])
        self.action_decoder = ActionDecoder(cfg.horizon, cfg.action_dim, cfg.latent_dim,
                                            cfg.action_decoder_width, cfg.max_hybrid, rngs[4])
        self.codebook = Codebook(cfg.codebook_size, cfg.latent_dim, rngs[5], cfg.recent_capacity)
        self.vocab = Vocabulary()
        bcfg = BackboneConfig(width=cfg.width, blocks=cfg.blocks, heads=cfg.heads,
                              mlp_ratio=cfg.mlp_ratio,
                              codebook_size=cfg.codebook_size, latent_dim=cfg.latent_dim,
                              feature_channels=cfg.feature_channels, ctx_pool=cfg.ctx_pool,
                              patch_grid=grid, n_text_max=cfg.n_text_max, state_dim=cfg.state_dim,
                              max_subtasks=cfg.max_subtasks, max_hybrid=cfg.max_hybrid)
        self.backbone = Backbone(bcfg, self.vocab, rngs[6])
        self.norm_stats: NormalizerStats | None = None

    def component_params(self, name: str) -> dict[str, Tensor]:
        if name == "visual_enc":
            return self.patch_encoder.params()
        if name == "visual_pool":
            return self.pooler.params()
        if name == "visual_dec":
            return self.frame_decoder.params()
        if name == "action_enc":
            return self.action_encoder.params()
        if name == "action_dec":
            return self.action_decoder.params()
        if name == "codebook":
            return {"entries": self.codebook.entries}
        if name == "backbone":
            return self.backbone.params()
        raise KeyError(name)

    def named_params(self, components=COMPONENTS) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for comp in components:
            for sub, t in self.component_params(comp).items():
                out[f"{comp}.{sub}"] = t
        return out

    def component_hash(self, name: str) -> str:
        h = hashlib.sha256()
        params = self.component_params(name)
        for key in sorted(params):
            h.update(key.encode())
            h.update(np.ascontiguousarray(params[key].data, dtype="<f4").tobytes())
        return h.hexdigest()

    def all_hashes(self) -> dict[str, str]:
        return {name: self.component_hash(name) for name in COMPONENTS}

    # -- persistence ------------------------------------------------------------------

    def save(self, path, extra: dict[str, np.ndarray] | None = None) -> None:
        arrays = {name: t.data for name, t in self.named_params().items()}
        for key, val in self.codebook.state_arrays().items():
            arrays[f"codebook_state.{key}"] = val
        if self.norm_stats is not None:
            arrays["normalizer.lo"] = self.norm_stats.lo.astype(np.float32)
            arrays["normalizer.hi"] = self.norm_stats.hi.astype(np.float32)
        if extra:
            arrays.update(extra)
        ckpt.save_blob(path, arrays)

    @classmethod
    def load(cls, path, cfg: ModelConfig) -> tuple["ModelBundle", dict[str, np.ndarray]]:
        """Rebuild a bundle from a checkpoint; returns (bundle, leftover arrays)."""
        arrays = ckpt.load_blob(path)
        bundle = cls(cfg, seed=0)
        extras: dict[str, np.ndarray] = {}
        params = bundle.named_params()
        cb_state: dict[str, np.ndarray] = {}
        lo = hi = None
        for name, arr in arrays.items():
            if name in params:
                if params[name].data.shape != arr.shape:
                    raise ckpt.CheckpointError(
                        f"{name}: checkpoint shape {arr.shape} != model shape {params[name].data.shape}")
                params[name].data = arr.astype(np.float32)
            elif name.startswith("codebook_state."):
                cb_state[name.split(".", 1)[1]] = arr
            elif name == "normalizer.lo":
                lo = arr
            elif name == "normalizer.hi":
                hi = arr
            else:
                extras[name] = arr
        missing = [n for n in params if n not in arrays]
        if missing:
            raise ckpt.CheckpointError(f"checkpoint missing parameters: {missing[:4]}...")
        if cb_state:
            bundle.codebook.load_state_arrays(cb_state)
        if lo is not None and hi is not None:
            bundle.norm_stats = NormalizerStats(lo=lo.astype(np.float64), hi=hi.astype(np.float64))
        return bundle, extras


# -- dataset access -------------------------------------------------------------------


class DatasetIndex:
    """Manifest-backed episode access with a small decode cache."""

    def __init__(self, data_dir, horizon: int):
        self.dir = Path(data_dir)
        self.horizon = horizon
        self.manifest = load_manifest(self.dir)
        self.video_pool = [e for e in self.manifest if e["regime"] in ("video_only", "paired")
                           and e["length"] >= 2]
        self.action_pool = [e for e in self.manifest if e["regime"] in ("action_only", "paired")
                            and e["length"] >= horizon + 1]
        self.cotrain_pool = [e for e in self.manifest if e["regime"] in ("video_only", "paired")
                             and e["length"] >= horizon + 1]
        self.paired_pool = [e for e in self.cotrain_pool if e["regime"] == "paired"]
        self._cache: dict[str, object] = {}
        self._states: dict[str, np.ndarray] = {}

    def episode(self, entry: dict):
        ep = self._cache.get(entry["file"])
        if ep is None:
            ep = load_episode(self.dir / entry["file"])
            ep.task = entry["task"]
            ep.seed = entry["seed"]
            ep.regime = entry["regime"]
            if len(self._cache) > 96:
                self._cache.pop(next(iter(self._cache)))
            self._cache[entry["file"]] = ep
        return ep

    def states(self, entry: dict) -> np.ndarray:
        """Replayed (T, state_dim) proprioceptive states for action-bearing episodes."""
        key = entry["file"]
        if key not in self._states:
            ep = self.episode(entry)
            if ep.actions is None:
                raise ValueError("states requested for a video-only episode")
            states = replay_states(entry["task"], entry["seed"], ep.actions)
            self._states[key] = np.stack([s.state_vector() for s in states])
        return self._states[key]

    def all_action_chunks(self, limit: int | None = None) -> np.ndarray:
        """Every stored action row, for normalizer fitting."""
        rows = []
        for entry in self.action_pool:
            ep = self.episode(entry)
            rows.append(np.asarray(ep.actions))
            if limit and len(rows) >= limit:
                break
        return np.concatenate(rows, axis=0)


# -- training ---------------------------------------------------------------------------


@dataclass
class StageReport:
    stage: str
    steps: int
    final_losses: dict
    component_hashes: dict
    codebook_perplexity: list = field(default_factory=list)
    token_accuracy: float | None = None
    wallclock_s: float = 0.0
    checkpoint_path: str = ""
    metrics_path: str = ""

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=1, sort_keys=True, default=str))


def _frames_to_float(frames: np.ndarray) -> np.ndarray:
    return np.asarray(frames, dtype=np.float32) / 255.0


class Trainer:
    """One stage of the regimen over a generated dataset."""

    def __init__(self, cfg: VitaConfig, stage: str, data_dir, out_dir,
                 bundle: ModelBundle | None = None):
        if stage not in ("warmup", "cotrain", "finetune"):
            raise StageError(f"unknown stage {stage!r}")
        self.cfg = cfg
        self.stage = stage
        self.tc: TrainConfig = getattr(cfg, stage)
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.data = DatasetIndex(data_dir, cfg.model.horizon)
        self.step = 0
        self._metrics_rows: list[dict] = []
        self.perplexity_series: list[float] = []
        # valid only while the visual encoder and codebook are frozen (cotrain/finetune)
        self._token_cache: dict[tuple[str, int], np.ndarray] = {}
        self._ctx_cache: dict[tuple[str, int], np.ndarray] = {}

        if bundle is not None:
            self.model = bundle
        elif stage == "warmup":
            self.model = ModelBundle(cfg.model, seed=self.tc.seed)
        else:
            prev = {"cotrain": "warmup", "finetune": "cotrain"}[stage]
            prev_path = self.out_dir / f"{prev}.ckpt"
            if not prev_path.exists():
                raise StageError(f"{stage} requires the {prev} checkpoint at {prev_path}")
            self.model, _ = ModelBundle.load(prev_path, cfg.model)

        if self.model.norm_stats is None:
            self.model.norm_stats = fit_normalizer(self.data.all_action_chunks())

        self.model.codebook.frozen = stage in ("cotrain", "finetune")
        self._build_optimizers()

    # -- optimizer groups -------------------------------------------------------------

    def _opt(self, params: dict[str, Tensor]) -> AdamW:
        tc = self.tc
        return AdamW(params, lr=tc.lr, betas=(tc.beta1, tc.beta2), weight_decay=tc.weight_decay)

    def _build_optimizers(self):
        m = self.model
        if self.stage == "warmup":
            vis = m.named_params(("visual_enc", "visual_pool", "visual_dec"))
            if self.tc.freeze_extractor:
                vis = {k: v for k, v in vis.items() if not k.startswith("visual_enc.")}
            self.opt_visual = self._opt(vis)
            self.opt_action = self._opt(m.named_params(("action_enc", "action_dec")))
            self.opt_codebook = self._opt({"codebook.entries": m.codebook.entries})
            self.opts = [self.opt_visual, self.opt_action, self.opt_codebook]
        elif self.stage == "cotrain":
            self.opt_main = self._opt(m.named_params(("backbone", "visual_dec", "action_dec")))
            self.opts = [self.opt_main]
        else:
            self.opt_main = self._opt(m.named_params(("action_dec",)))
            self.opts = [self.opt_main]

    def _zero_all(self):
        for comp in COMPONENTS:
            for t in self.model.component_params(comp).values():
                t.grad = None

    # -- batch sampling ---------------------------------------------------------------

    def _rng(self, salt: int) -> np.random.Generator:
        return np.random.default_rng([self.tc.seed, self.step, salt])

    def _sample_frame_pairs(self, rng, batch):
        prev, nxt, entries, starts = [], [], [], []
        pool = self.data.video_pool
        for i in rng.integers(0, len(pool), size=batch):
            entry = pool[int(i)]
            ep = self.data.episode(entry)
            t = int(rng.integers(0, ep.frames.shape[0] - 1))
            prev.append(ep.frames[t])
            nxt.append(ep.frames[t + 1])
            entries.append(entry)
            starts.append(t)
        return _frames_to_float(np.stack(prev)), _frames_to_float(np.stack(nxt)), entries, starts

    def _sample_chunks(self, rng, batch):
        chunks, entries, starts = [], [], []
        h = self.cfg.model.horizon
        pool = self.data.action_pool
        for i in rng.integers(0, len(pool), size=batch):
            entry = pool[int(i)]
            ep = self.data.episode(entry)
            t = int(rng.integers(0, ep.actions.shape[0] - h + 1))
            chunks.append(ep.actions[t : t + h])
            entries.append(entry)
            starts.append(t)
        return np.stack(chunks), entries, starts

    def _sample_windows(self, rng, batch, paired_only=False):
        """Co-train windows: (entry, t0) with H+1 frames available."""
        pool = self.data.paired_pool if paired_only else self.data.cotrain_pool
        h = self.cfg.model.horizon
        out = []
        for i in rng.integers(0, len(pool), size=batch):
            entry = pool[int(i)]
            ep = self.data.episode(entry)
            t0 = int(rng.integers(0, ep.frames.shape[0] - h))
            out.append((entry, t0))
        return out

    # -- warmup steps ------------------------------------------------------------------

    def warmup_visual_step(self, rng) -> dict:
        if self.model.codebook.frozen:
            raise StageError("codebook must not be frozen during warmup")
        m, tc = self.model, self.tc
        prev, nxt, _, _ = self._sample_frame_pairs(rng, tc.batch_size)
        feats_prev = m.patch_encoder.extract(Tensor(prev))
        feats_next = m.patch_encoder.extract(Tensor(nxt))
        z = m.pooler.pool(feats_prev, feats_next)
        m.codebook.record_recent(z.data)
        idx = quantize_batch(z.data, m.codebook)
        zq = straight_through(z, m.codebook.entries.data[idx])
        pred = m.frame_decoder.decode(feats_prev, zq)
        l_v = visual_loss(pred, Tensor(nxt), tc.lambda_l1, tc.lambda_ssim)
        l_cb = codebook_loss_for_indices(m.codebook, z.data, idx)
        l_commit = reduce_mean(reduce_sum(square(z - Tensor(m.codebook.entries.data[idx])), axis=-1)) * tc.commitment_beta
        total = l_v + l_cb + l_commit
        self._zero_all()
        total.backward()
        grad_norm = clip_grad_norm({**self.opt_visual.params, **self.opt_codebook.params}, tc.grad_clip)
        self.opt_visual.step()
        self.opt_codebook.step()
        # logged total is the float64 sum of the parts so the decomposition is exact
        l1 = float(np.mean(np.abs(pred.data - nxt), dtype=np.float64)) * tc.lambda_l1
        parts = {
            "loss_ce": 0.0, "loss_l1": l1, "loss_ssim": float(l_v.data) - l1,
            "loss_mse": 0.0, "loss_codebook": float(l_cb.data), "loss_commit": float(l_commit.data),
        }
        return {"loss_total": sum(parts.values()), **parts, "grad_norm": grad_norm}

    def warmup_action_step(self, rng) -> dict:
        if self.model.codebook.frozen:
            raise StageError("codebook must not be frozen during warmup")
        m, tc = self.model, self.tc
        raw, entries, starts = self._sample_chunks(rng, tc.batch_size)
        norm = normalize(raw, m.norm_stats)
        z = m.action_encoder.encode(Tensor(norm))
        m.codebook.record_recent(z.data)
        idx = quantize_batch(z.data, m.codebook)
        zq = straight_through(z, m.codebook.entries.data[idx])
        decoded = m.action_decoder.decode(reshape(zq, (tc.batch_size, 1, m.cfg.latent_dim)))
        l_mse = action_loss(decoded, Tensor(norm))
        l_cb = codebook_loss_for_indices(m.codebook, z.data, idx)
        l_commit = reduce_mean(reduce_sum(square(z - Tensor(m.codebook.entries.data[idx])), axis=-1)) * tc.commitment_beta
        total = l_mse + l_cb + l_commit
        l_align = None
        if tc.align_weight > 0:
            zv = self._aligned_visual_latents(entries, starts)
            if zv is not None:
                sel, zv_data = zv
                l_align = reduce_mean(reduce_sum(square(z[sel] - Tensor(zv_data)), axis=-1)) * tc.align_weight
                total = total + l_align
        self._zero_all()
        total.backward()
        grad_norm = clip_grad_norm({**self.opt_action.params, **self.opt_codebook.params}, tc.grad_clip)
        self.opt_action.step()
        self.opt_codebook.step()
        mse_part = float(l_mse.data) + (float(l_align.data) if l_align is not None else 0.0)
        parts = {
            "loss_ce": 0.0, "loss_l1": 0.0, "loss_ssim": 0.0, "loss_mse": mse_part,
            "loss_codebook": float(l_cb.data), "loss_commit": float(l_commit.data),
        }
        return {"loss_total": sum(parts.values()), **parts, "grad_norm": grad_norm}

    def _aligned_visual_latents(self, entries, starts):
        """Frozen visual latents of the first frame pair of each paired chunk."""
        sel = [i for i, e in enumerate(entries) if e["regime"] == "paired"]
        if not sel:
            return None
        prev, nxt = [], []
        for i in sel:
            ep = self.data.episode(entries[i])
            prev.append(ep.frames[starts[i]])
            nxt.append(ep.frames[starts[i] + 1])
        with no_grad():
            zv = self.model.pooler.pool(
                self.model.patch_encoder.extract(Tensor(_frames_to_float(np.stack(prev)))),
                self.model.patch_encoder.extract(Tensor(_frames_to_float(np.stack(nxt)))))
        return np.array(sel), zv.data

    # -- co-train / fine-tune steps ------------------------------------------------------

    def _window_arrays(self, windows):
        """Frames (B, H+1, S, S, 3) float, states (B, sd), instructions, paired mask, chunks."""
        h = self.cfg.model.horizon
        frames, states, instructions, paired, chunks = [], [], [], [], []
        for entry, t0 in windows:
            ep = self.data.episode(entry)
            frames.append(_frames_to_float(ep.frames[t0 : t0 + h + 1]))
            instructions.append(ep.instruction)
            if entry["regime"] == "paired":
                paired.append(True)
                states.append(self.data.states(entry)[t0])
                chunks.append(normalize(ep.actions[t0 : t0 + h], self.model.norm_stats))
            else:
                paired.append(False)
                states.append(np.zeros(self.cfg.model.state_dim, dtype=np.float32))
                chunks.append(np.zeros((h, self.cfg.model.action_dim), dtype=np.float32))
        return (np.stack(frames), np.stack(states), instructions,
                np.array(paired), np.stack(chunks))

    def _target_tokens(self, frames: np.ndarray, windows=None) -> np.ndarray:
        """Frozen visual encoder + quantizer on ground-truth pairs -> (B, H) indices.

        Cached per (file, t0) in the frozen stages, where the mapping cannot drift.
        """
        b, t = frames.shape[0], frames.shape[1] - 1
        cacheable = windows is not None and self.stage != "warmup"
        if cacheable:
            keys = [(e["file"], t0) for e, t0 in windows]
            missing = [i for i, key in enumerate(keys) if key not in self._token_cache]
        else:
            keys, missing = None, list(range(b))
        if missing:
            sub = frames[missing]
            flat_prev = sub[:, :-1].reshape((-1,) + frames.shape[2:])
            flat_next = sub[:, 1:].reshape((-1,) + frames.shape[2:])
            with no_grad():
                z = self.model.pooler.pool(
                    self.model.patch_encoder.extract(Tensor(flat_prev)),
                    self.model.patch_encoder.extract(Tensor(flat_next)))
            idx = quantize_batch(z.data, self.model.codebook).reshape(len(missing), t)
            if not cacheable:
                return idx
            for j, i in enumerate(missing):
                self._token_cache[keys[i]] = idx[j]
        return np.stack([self._token_cache[k] for k in keys])

    def _pooled_context(self, frames0: np.ndarray, windows=None) -> np.ndarray:
        """Frozen pooled patch features of the first window frame, (B, n_ctx, c)."""
        bb = self.model.backbone
        cacheable = windows is not None and self.stage != "warmup"
        if cacheable:
            keys = [(e["file"], t0) for e, t0 in windows]
            missing = [i for i, key in enumerate(keys) if key not in self._ctx_cache]
        else:
            keys, missing = None, list(range(frames0.shape[0]))
        if missing:
            with no_grad():
                feats = self.model.patch_encoder.extract(Tensor(frames0[missing]))
                pooled = bb.pool_context_features(feats).data
            if not cacheable:
                return pooled
            for j, i in enumerate(missing):
                self._ctx_cache[keys[i]] = pooled[j]
        return np.stack([self._ctx_cache[k] for k in keys])

    def _padded_layout(self):
        bb = self.model.backbone
        n_ctx = bb.cfg.n_text_max + bb.n_ctx_patches + 1
        s_full = n_ctx + bb.cfg.max_subtasks + self.cfg.model.horizon
        return n_ctx, s_full

    def _base_mask(self, s_full: int) -> np.ndarray:
        bb = self.model.backbone
        n_ctx, _ = self._padded_layout()
        return build_progressive_mask(n_ctx, bb.cfg.max_subtasks, self.cfg.model.horizon)

    def _encode_instructions(self, instructions) -> tuple[np.ndarray, np.ndarray]:
        bb = self.model.backbone
        n_text_max = bb.cfg.n_text_max
        token_ids = np.full((len(instructions), n_text_max), Vocabulary.PAD, dtype=int)
        text_lens = np.zeros(len(instructions), dtype=int)
        for i, instr in enumerate(instructions):
            ids = bb.vocab.encode(instr)[:n_text_max]
            token_ids[i, : len(ids)] = ids
            text_lens[i] = len(ids)
        return token_ids, text_lens

    def _batch_embeds(self, pooled_ctx: np.ndarray, states: np.ndarray, instructions,
                      subtask_ids: np.ndarray, subtask_counts: np.ndarray,
                      targets: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Assemble padded (B, S, W) training inputs and per-sample visibility masks."""
        bb = self.model.backbone
        b = pooled_ctx.shape[0]
        h = self.cfg.model.horizon
        n_ctx, s_full = self._padded_layout()
        n_text_max = bb.cfg.n_text_max
        token_ids, text_lens = self._encode_instructions(instructions)
        pooled = Tensor(pooled_ctx)

        text_emb = embedding(bb.tok_embed, token_ids) + bb.pos[0:n_text_max]
        patch_emb = matmul(pooled, bb.patch_proj) + bb.pos[bb.patch_pos_offset : bb.patch_pos_offset + bb.n_ctx_patches]
        state_emb = matmul(Tensor(states.astype(np.float32)), bb.state_proj) + bb.state_bias + bb.pos[bb.state_pos]
        state_emb = reshape(state_emb, (b, 1, bb.cfg.width))

        sub_vocab_ids = np.array([[bb.vocab.subtask_id(t) for t in row] for row in subtask_ids])
        sub_emb = embedding(bb.tok_embed, sub_vocab_ids) + bb.pos[bb.subtask_pos_offset : bb.subtask_pos_offset + bb.cfg.max_subtasks]

        entries = self.model.codebook.entries.data
        prev_vec = np.zeros((b, h, self.cfg.model.latent_dim), dtype=np.float32)
        prev_vec[:, 1:] = entries[targets[:, :-1]]
        hyb = matmul(Tensor(prev_vec), bb.code_proj)
        start = reshape(bb.start_hybrid, (1, 1, bb.cfg.width))
        first = concat([start + Tensor(np.zeros((b, 1, bb.cfg.width), dtype=np.float32)), hyb[:, 1:]], axis=1)
        hyb_emb = first + bb.pos[bb.hybrid_pos_offset : bb.hybrid_pos_offset + h]

        seq = concat([text_emb, patch_emb, state_emb, sub_emb, hyb_emb], axis=1)

        valid = np.ones((b, s_full), dtype=bool)
        for i in range(b):
            valid[i, text_lens[i] : n_text_max] = False
            valid[i, n_ctx + subtask_counts[i] : n_ctx + bb.cfg.max_subtasks] = False
        base = self._base_mask(s_full)
        mask = base[None] & valid[:, None, :] & valid[:, :, None]
        diag = np.arange(s_full)
        mask[:, diag, diag] = True
        return seq, mask

    def _generate_subtasks_batch(self, pooled_ctx, states, instructions) -> tuple[np.ndarray, np.ndarray]:
        """Greedy batched subtask decoding (no gradients); returns ids and counts."""
        bb = self.model.backbone
        b = pooled_ctx.shape[0]
        max_m = bb.cfg.max_subtasks
        n_ctx, _ = self._padded_layout()
        n_text_max = bb.cfg.n_text_max
        token_ids, text_lens = self._encode_instructions(instructions)
        end = int(SubtaskToken.END_SUBTASK)
        ids = np.zeros((b, max_m), dtype=int)
        counts = np.zeros(b, dtype=int)
        done = np.zeros(b, dtype=bool)
        with no_grad():
            pooled = Tensor(pooled_ctx)
            text_emb = embedding(bb.tok_embed, token_ids) + bb.pos[0:n_text_max]
            patch_emb = matmul(pooled, bb.patch_proj) + bb.pos[bb.patch_pos_offset : bb.patch_pos_offset + bb.n_ctx_patches]
            state_emb = reshape(matmul(Tensor(states.astype(np.float32)), bb.state_proj) + bb.state_bias + bb.pos[bb.state_pos],
                                (b, 1, bb.cfg.width))
            for m in range(max_m):
                parts = [text_emb, patch_emb, state_emb]
                if m:
                    sub_ids = np.array([[bb.vocab.subtask_id(t) for t in row[:m]] for row in ids])
                    parts.append(embedding(bb.tok_embed, sub_ids) + bb.pos[bb.subtask_pos_offset : bb.subtask_pos_offset + m])
                seq = concat(parts, axis=1)
                s = n_ctx + m
                valid = np.ones((b, s), dtype=bool)
                for i in range(b):
                    valid[i, text_lens[i] : n_text_max] = False
                base = build_progressive_mask(n_ctx, m, 0)
                mask = base[None] & valid[:, None, :] & valid[:, :, None]
                diag = np.arange(s)
                mask[:, diag, diag] = True
                hidden = bb.forward(seq, mask)
                read_pos = bb.state_pos if m == 0 else n_ctx + m - 1
                logits = matmul(hidden[:, read_pos], bb.subtask_head).data
                tok = np.argmax(logits, axis=1)
                tok[done] = end
                ids[:, m] = tok
                counts[~done] = m + 1
                done |= tok == end
                if done.all():
                    break
        counts = np.maximum(counts, 1)
        return ids, counts

    def _subtasks_from_labels(self, windows) -> tuple[np.ndarray, np.ndarray]:
        """Compressed expert labels for the supervised-subtask ablation."""
        bb = self.model.backbone
        max_m = bb.cfg.max_subtasks
        h = self.cfg.model.horizon
        end = int(SubtaskToken.END_SUBTASK)
        b = len(windows)
        ids = np.full((b, max_m), end, dtype=int)
        counts = np.ones(b, dtype=int)
        for i, (entry, t0) in enumerate(windows):
            ep = self.data.episode(entry)
            if ep.labels is None:
                continue
            seq = []
            for lab in ep.labels[t0 : t0 + h]:
                if not seq or seq[-1] != int(lab):
                    seq.append(int(lab))
            seq = (seq + [end])[:max_m]
            ids[i, : len(seq)] = seq
            counts[i] = len(seq)
        return ids, counts

    def cotrain_step(self, rng) -> dict:
        if not self.model.codebook.frozen:
            raise StageError("codebook must be frozen during co-train")
        m, tc = self.model, self.tc
        h = self.cfg.model.horizon
        windows = self._sample_windows(rng, tc.batch_size)
        frames, states, instructions, paired, chunks = self._window_arrays(windows)
        targets = self._target_tokens(frames, windows)
        pooled_ctx = self._pooled_context(frames[:, 0], windows)
        if tc.supervise_subtasks:
            sub_ids, sub_counts = self._subtasks_from_labels(windows)
        else:
            sub_ids, sub_counts = self._generate_subtasks_batch(pooled_ctx, states, instructions)

        seq, mask = self._batch_embeds(pooled_ctx, states, instructions, sub_ids, sub_counts, targets)
        hidden = m.backbone.forward(seq, mask)
        n_ctx, _ = self._padded_layout()
        hyb_rows = hidden[:, n_ctx + m.backbone.cfg.max_subtasks :]
        logits = matmul(hyb_rows, m.backbone.hybrid_head)
        b, l, k = logits.shape
        l_ce = cross_entropy(reshape(logits, (b * l, k)), targets.reshape(-1))
        token_acc = float(np.mean(np.argmax(logits.data, axis=-1) == targets))

        total = l_ce
        if tc.supervise_subtasks:
            total = total + self._subtask_ce(hidden, sub_ids, sub_counts, n_ctx)
        entries = m.codebook.entries.data

        # visual path: decode a random subset of steps through the frame decoder
        n_vis = max(1, min(tc.visual_loss_steps, h))
        step_pick = rng.integers(0, h, size=(b, n_vis))
        prev_sel = np.stack([frames[i, step_pick[i]] for i in range(b)]).reshape((-1,) + frames.shape[2:])
        next_sel = np.stack([frames[i, step_pick[i] + 1] for i in range(b)]).reshape((-1,) + frames.shape[2:])
        code_sel = entries[np.stack([targets[i, step_pick[i]] for i in range(b)]).reshape(-1)]
        with no_grad():
            feats_sel = m.patch_encoder.extract(Tensor(prev_sel))
        pred = m.frame_decoder.decode(Tensor(feats_sel.data), Tensor(code_sel))
        l1_term = reduce_mean(absolute(pred - Tensor(next_sel))) * (tc.lambda_v * tc.lambda_l1)
        ssim_term = (1.0 - ssim_score(pred, Tensor(next_sel))) * (tc.lambda_v * tc.lambda_ssim)
        total = total + l1_term + ssim_term

        # action path: paired samples only
        mse_term = None
        if tc.lambda_a > 0 and paired.any():
            sel = np.flatnonzero(paired)
            lat = Tensor(entries[targets[sel]])
            decoded = m.action_decoder.decode(lat)
            mse_term = action_loss(decoded, Tensor(chunks[sel])) * tc.lambda_a
            total = total + mse_term

        self._zero_all()
        total.backward()
        grad_norm = clip_grad_norm(self.opt_main.params, tc.grad_clip)
        self.opt_main.step()
        parts = {
            "loss_ce": float(total.data) - float(l1_term.data) - float(ssim_term.data)
            - (float(mse_term.data) if mse_term is not None else 0.0),
            "loss_l1": float(l1_term.data), "loss_ssim": float(ssim_term.data),
            "loss_mse": float(mse_term.data) if mse_term is not None else 0.0,
            "loss_codebook": 0.0, "loss_commit": 0.0,
        }
        return {"loss_total": sum(parts.values()), **parts,
                "grad_norm": grad_norm, "token_accuracy": token_acc}

    def _subtask_ce(self, hidden: Tensor, sub_ids: np.ndarray, sub_counts: np.ndarray, n_ctx: int):
        """Teacher-forced cross-entropy on the subtask head (supervised ablation)."""
        bb = self.model.backbone
        rows, labels = [], []
        for i in range(sub_ids.shape[0]):
            for mth in range(int(sub_counts[i])):
                pos = bb.state_pos if mth == 0 else n_ctx + mth - 1
                rows.append((i, pos))
                labels.append(sub_ids[i, mth])
        ridx = np.array([r[0] for r in rows])
        cidx = np.array([r[1] for r in rows])
        picked = hidden[ridx, cidx]
        logits = matmul(picked, bb.subtask_head)
        return cross_entropy(logits, np.array(labels))

    def finetune_step(self, rng) -> dict:
        m, tc = self.model, self.tc
        windows = self._sample_windows(rng, tc.batch_size, paired_only=True)
        frames, states, instructions, paired, chunks = self._window_arrays(windows)
        targets = self._target_tokens(frames, windows)
        lat = Tensor(m.codebook.entries.data[targets])
        decoded = m.action_decoder.decode(lat)
        mse = action_loss(decoded, Tensor(chunks)) * tc.lambda_a
        self._zero_all()
        mse.backward()
        grad_norm = clip_grad_norm(self.opt_main.params, tc.grad_clip)
        self.opt_main.step()
        parts = {
            "loss_ce": 0.0, "loss_l1": 0.0, "loss_ssim": 0.0,
            "loss_mse": float(mse.data), "loss_codebook": 0.0, "loss_commit": 0.0,
        }
        return {"loss_total": sum(parts.values()), **parts, "grad_norm": grad_norm}

    # -- the loop -----------------------------------------------------------------------

    def train_step(self) -> dict:
        rng = self._rng(1)
        if self.stage == "warmup":
            p_video = len(self.data.video_pool) / max(1, len(self.data.video_pool) + len(self.data.action_pool))
            if self._rng(0).random() < p_video:
                losses = self.warmup_visual_step(rng)
            else:
                losses = self.warmup_action_step(rng)
            if (self.step + 1) % self.tc.revival_interval == 0:
                reinit_dead_entries(self.model.codebook, threshold=self.tc.revival_threshold,
                                    rng=self._rng(2))
        elif self.stage == "cotrain":
            losses = self.cotrain_step(rng)
        else:
            losses = self.finetune_step(rng)
        if not np.isfinite(losses["loss_total"]):
            raise StageError(f"non-finite loss at step {self.step}: {losses}")
        self.step += 1
        return losses

    def train(self, steps: int | None = None) -> StageReport:
        target = steps if steps is not None else self.tc.steps
        t0 = time.perf_counter()
        last = {}
        while self.step < target:
            s0 = time.perf_counter()
            losses = self.train_step()
            losses["wallclock_ms"] = (time.perf_counter() - s0) * 1000.0
            last = losses
            if self.step % self.tc.log_interval == 0 or self.step == target:
                try:
                    ppl = perplexity(self.model.codebook.usage)
                except ValueError:
                    ppl = 0.0
                self.perplexity_series.append(ppl)
                row = {"step": self.step, "stage": self.stage, "codebook_perplexity": ppl}
                for col in METRIC_COLUMNS:
                    if col not in row:
                        row[col] = losses.get(col, 0.0)
                self._metrics_rows.append(row)
        self._write_metrics()
        ckpt_path = self.out_dir / f"{self.stage}.ckpt"
        self.save_checkpoint(ckpt_path)
        report = StageReport(
            stage=self.stage, steps=self.step,
            final_losses={k: v for k, v in last.items() if k.startswith("loss") or k == "token_accuracy"},
            component_hashes=self.model.all_hashes(),
            codebook_perplexity=self.perplexity_series,
            token_accuracy=last.get("token_accuracy"),
            wallclock_s=time.perf_counter() - t0,
            checkpoint_path=str(ckpt_path),
            metrics_path=str(self.out_dir / f"metrics_{self.stage}.csv"),
        )
        report.to_json(self.out_dir / f"report_{self.stage}.json")
        return report

    def _write_metrics(self):
        path = self.out_dir / f"metrics_{self.stage}.csv"
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
            writer.writeheader()
            for row in self._metrics_rows:
                writer.writerow(row)

    # -- state persistence ----------------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        extra: dict[str, np.ndarray] = {"meta.step": np.array([self.step], dtype=np.float32)}
        for gi, opt in enumerate(self.opts):
            st = opt.state
            extra[f"opt{gi}.meta"] = np.array([st.step], dtype=np.float32)
            for name, arr in st.m.items():
                extra[f"opt{gi}.m.{name}"] = arr
            for name, arr in st.v.items():
                extra[f"opt{gi}.v.{name}"] = arr
        self.model.save(path, extra)
        self.model.norm_stats.to_json(self.out_dir / "normalizer.json")

    def resume(self, path) -> None:
        """Restore parameters, optimizer moments, and counters saved by save_checkpoint."""
        bundle, extras = ModelBundle.load(path, self.cfg.model)
        self.model = bundle
        self.model.codebook.frozen = self.stage in ("cotrain", "finetune")
        self._build_optimizers()
        self.step = int(extras.get("meta.step", np.zeros(1))[0])
        for gi, opt in enumerate(self.opts):
            meta = extras.get(f"opt{gi}.meta")
            if meta is not None:
                opt.state.step = int(meta[0])
            for name in opt.params:
                m = extras.get(f"opt{gi}.m.{name}")
                v = extras.get(f"opt{gi}.v.{name}")
                if m is not None:
                    opt.state.m[name] = m.astype(np.float32)
                if v is not None:
                    opt.state.v[name] = v.astype(np.float32)


def run_stage(cfg: VitaConfig, stage: str, data_dir, out_dir, steps: int | None = None) -> StageReport:
    trainer = Trainer(cfg, stage, data_dir, out_dir)
    return trainer.train(steps)
