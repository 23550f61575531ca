"""Closed-loop evaluation, latency profiling, and trace export.

The evaluated inference path mirrors deployment: embed context, generate
subtasks, generate hybrid codebook tokens, decode actions only, execute
the chunk, replan. The visual decoder is invoked solely when visual
decoding is requested; an invocation counter proves the negative case.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .action_codec import denormalize, normalize
from .config import ModelConfig
from .tensor import Tensor, concat, no_grad
from .trainer import ModelBundle
from .quantizer import quantize_batch
from .visual_codec import FrameDecoder, psnr as psnr_db, ssim as ssim_score
from .world import make_env, rollout_expert


@dataclass
class EvalReport:
    task: str
    rollouts: int
    successes: int
    success_rate: float
    mean_episode_length: float
    action_mse: float
    mean_psnr: float | None = None
    mean_ssim: float | None = None
    latency_ms: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=1, sort_keys=True))


class Policy:
    """Checkpoint-backed controller producing one action chunk per plan call."""

    def __init__(self, bundle: ModelBundle, temperature: float = 0.0, visual_decode: bool = False):
        if bundle.norm_stats is None:
            raise ValueError("policy checkpoint has no normalizer stats")
        self.bundle = bundle
        self.temperature = temperature
        self.visual_decode = visual_decode

    def plan(self, instruction: str, frame: np.ndarray, state: np.ndarray,
             sample_seed: int = 0) -> tuple[np.ndarray, dict]:
        """Returns (raw (H, d_a) action chunk, trace record)."""
        m = self.bundle
        h = m.cfg.horizon
        t0 = time.perf_counter()
        with no_grad():
            feats = m.patch_encoder.extract(Tensor(np.asarray(frame, np.float32)))
            prefix, _ = m.backbone.embed_context(instruction, feats, state)
            subtasks = m.backbone.generate_subtasks(prefix)
            full_prefix = concat([prefix, m.backbone.subtask_embeds(subtasks)], axis=0)
            tokens = m.backbone.generate_hybrid_tokens(
                full_prefix, len(subtasks), h, m.codebook.entries.data,
                temperature=self.temperature, rng=np.random.default_rng(sample_seed))
            latents = Tensor(m.codebook.entries.data[np.array(tokens)])
            chunk_norm = m.action_decoder.decode(latents)
        raw = denormalize(chunk_norm.data, m.norm_stats)
        latency_ms = (time.perf_counter() - t0) * 1000.0
        trace = {
            "subtasks": [int(s) for s in subtasks],
            "token_indices": [int(t) for t in tokens],
            "sample_seed": int(sample_seed),
            "latency_ms": latency_ms,
        }
        return raw, trace

    def predict_frame(self, frame: np.ndarray, token: int) -> np.ndarray:
        """Visual decode of one motion token conditioned on the current frame."""
        m = self.bundle
        with no_grad():
            feats = m.patch_encoder.extract(Tensor(np.asarray(frame, np.float32)))
            latent = Tensor(m.codebook.entries.data[token])
            pred = m.frame_decoder.decode(feats, latent)
        return pred.data


def run_rollout(policy: Policy, task: str, seed: int, cap: int, replan_every: int = 0):
    """Execute one episode; returns a record dict with frames, actions, traces."""
    m = policy.bundle
    env = make_env(task, seed, cap)
    h = m.cfg.horizon
    replan = replan_every if replan_every >= 1 else h
    frames = [env.render()]
    actions, states, traces = [], [env.state.state_vector()], []
    pred_frames: list[tuple[int, np.ndarray]] = []
    psnrs, ssims = [], []
    success = False
    done = False
    step = 0
    while not done and step < cap:
        frame_f = frames[-1].astype(np.float32) / 255.0
        chunk, trace = policy.plan(env.instruction, frame_f, states[-1], sample_seed=seed * 10007 + step)
        trace["step"] = step
        traces.append(trace)
        for j in range(min(replan, h)):
            if done or step >= cap:
                break
            _, done, step_success = env.step(chunk[j].astype(np.float64))
            success = success or step_success
            nxt = env.render()
            if policy.visual_decode:
                pred = policy.predict_frame(frame_f, trace["token_indices"][j])
                nxt_f = nxt.astype(np.float32) / 255.0
                psnrs.append(psnr_db(pred, nxt_f))
                ssims.append(float(ssim_score(pred.astype(np.float32), nxt_f).data))
                pred_frames.append((step, (pred * 255.0).round().astype(np.uint8)))
                frame_f = nxt_f
            frames.append(nxt)
            actions.append(chunk[j])
            states.append(env.state.state_vector())
            step += 1
    return {
        "task": task, "seed": seed, "success": success, "steps": step,
        "frames": frames, "actions": actions, "states": states, "traces": traces,
        "pred_frames": pred_frames, "psnrs": psnrs, "ssims": ssims,
    }


def teacher_forced_action_mse(bundle: ModelBundle, task: str, seed: int) -> float:
    """Decode the expert's own motion tokens and compare to the expert chunk.

    Normalized units; isolates token-to-action decoding quality.
    """
    ep = rollout_expert(task, seed)
    h = bundle.cfg.horizon
    frames = ep.frames[: h + 1].astype(np.float32) / 255.0
    with no_grad():
        z = bundle.pooler.pool(
            bundle.patch_encoder.extract(Tensor(frames[:-1])),
            bundle.patch_encoder.extract(Tensor(frames[1:])))
        idx = quantize_batch(z.data, bundle.codebook, count_usage=False)
        decoded = bundle.action_decoder.decode(Tensor(bundle.codebook.entries.data[idx]))
    target = normalize(ep.actions[:h], bundle.norm_stats)
    return float(np.mean((decoded.data - target) ** 2))


def evaluate(bundle: ModelBundle, task: str, n_rollouts: int, seed: int,
             temperature: float = 0.0, replan_every: int = 0, cap: int = 40,
             visual_decode: bool = False, out_dir=None) -> EvalReport:
    """Seeded closed-loop evaluation; deterministic given all arguments."""
    if n_rollouts < 1:
        raise ValueError("evaluate needs n_rollouts >= 1")
    policy = Policy(bundle, temperature=temperature, visual_decode=visual_decode)
    successes = 0
    lengths = []
    latencies = []
    psnrs, ssims = [], []
    records = []
    for r in range(n_rollouts):
        rec = run_rollout(policy, task, seed * 1000003 + r, cap, replan_every)
        successes += int(rec["success"])
        lengths.append(rec["steps"])
        latencies.extend(t["latency_ms"] for t in rec["traces"])
        psnrs.extend(rec["psnrs"])
        ssims.extend(rec["ssims"])
        records.append(rec)
    mse = float(np.mean([teacher_forced_action_mse(bundle, task, seed * 1000003 + r)
                         for r in range(min(n_rollouts, 20))]))
    lat = np.array(latencies)
    report = EvalReport(
        task=task, rollouts=n_rollouts, successes=successes,
        success_rate=successes / n_rollouts,
        mean_episode_length=float(np.mean(lengths)),
        action_mse=mse,
        mean_psnr=float(np.mean(psnrs)) if psnrs else None,
        mean_ssim=float(np.mean(ssims)) if ssims else None,
        latency_ms={"mean": float(lat.mean()), "p95": float(np.percentile(lat, 95))} if lat.size else {},
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.to_json(out_dir / "eval_report.json")
        for rec in records[: min(3, len(records))]:
            write_rollout_artifacts(out_dir / f"rollout_{task}_{rec['seed']}", rec)
    return report


# -- latency ------------------------------------------------------------------------


def latency_profile(bundle: ModelBundle, lengths=(12, 24, 48), repeats: int = 20,
                    warmup_calls: int = 3, seed: int = 0) -> list[dict]:
    """Median ms per inference call for the action-only and dual-decode paths.

    Token generation is timed for each requested sequence length; the
    action decoder runs once per call, the visual decoder once per token
    on the dual path.
    """
    env = make_env("reach", seed)
    frame = env.render().astype(np.float32) / 255.0
    state = env.state.state_vector()
    m = bundle
    rows = []
    for length in lengths:
        if length > m.backbone.cfg.max_hybrid:
            raise ValueError(f"length {length} exceeds max_hybrid {m.backbone.cfg.max_hybrid}")
        for with_visual in (False, True):
            samples = []
            for it in range(warmup_calls + repeats):
                t0 = time.perf_counter()
                with no_grad():
                    feats = m.patch_encoder.extract(Tensor(frame))
                    prefix, _ = m.backbone.embed_context(env.instruction, feats, state)
                    subtasks = m.backbone.generate_subtasks(prefix)
                    full_prefix = concat([prefix, m.backbone.subtask_embeds(subtasks)], axis=0)
                    tokens = m.backbone.generate_hybrid_tokens(
                        full_prefix, len(subtasks), length, m.codebook.entries.data,
                        temperature=0.0)
                    take = min(length, m.cfg.horizon)
                    lat = Tensor(m.codebook.entries.data[np.array(tokens[:take])])
                    m.action_decoder.decode(lat)
                    if with_visual:
                        for tok in tokens:
                            m.frame_decoder.decode(feats, Tensor(m.codebook.entries.data[tok]))
                if it >= warmup_calls:
                    samples.append((time.perf_counter() - t0) * 1000.0)
            rows.append({
                "path": "dual" if with_visual else "action_only",
                "length": int(length),
                "median_ms": float(np.median(samples)),
                "mean_ms": float(np.mean(samples)),
            })
    return rows


# -- trace / artifact export -----------------------------------------------------------


def write_ppm(path, frame: np.ndarray) -> None:
    frame = np.ascontiguousarray(frame, dtype=np.uint8)
    h, w, _ = frame.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(frame.tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a P6 ppm")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def write_rollout_artifacts(rollout_dir, record: dict) -> None:
    """Raw record for later export: frames, traces, actions, states."""
    d = Path(rollout_dir)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(record["frames"]):
        write_ppm(d / "frames" / f"frame_{i:04d}.ppm", frame)
    if record["pred_frames"]:
        (d / "pred_frames").mkdir(exist_ok=True)
        for step, frame in record["pred_frames"]:
            write_ppm(d / "pred_frames" / f"pred_{step:04d}.ppm", frame)
    with open(d / "trace.jsonl", "w") as f:
        for t in record["traces"]:
            f.write(json.dumps(t, sort_keys=True) + "\n")
    doc = {
        "task": record["task"], "seed": record["seed"], "success": bool(record["success"]),
        "steps": int(record["steps"]),
        "actions": [list(map(float, a)) for a in record["actions"]],
        "states": [list(map(float, s)) for s in record["states"]],
        "psnrs": [float(p) for p in record["psnrs"]],
        "ssims": [float(s) for s in record["ssims"]],
    }
    (d / "record.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def export_traces(rollout_dir) -> Path:
    """CSV + PPM + summary bundle regenerated from a rollout's raw record."""
    d = Path(rollout_dir)
    record_path = d / "record.json"
    if not record_path.exists():
        raise FileNotFoundError(f"no rollout record at {record_path}")
    doc = json.loads(record_path.read_text())
    export = d / "export"
    export.mkdir(exist_ok=True)
    n_dims = len(doc["actions"][0]) if doc["actions"] else 0
    n_sdims = len(doc["states"][0]) if doc["states"] else 0
    lines = [",".join(["step"] + [f"action_{i}" for i in range(n_dims)] + [f"state_{i}" for i in range(n_sdims)])]
    for i, act in enumerate(doc["actions"]):
        state = doc["states"][i + 1]
        lines.append(",".join([str(i)] + [f"{v:.8g}" for v in act] + [f"{v:.8g}" for v in state]))
    (export / "steps.csv").write_text("\n".join(lines) + "\n")
    for src in sorted((d / "frames").glob("*.ppm")):
        (export / src.name).write_bytes(src.read_bytes())
    pred_dir = d / "pred_frames"
    if pred_dir.exists():
        for src in sorted(pred_dir.glob("*.ppm")):
            (export / src.name).write_bytes(src.read_bytes())
    summary = {
        "task": doc["task"], "seed": doc["seed"], "success": doc["success"],
        "steps": doc["steps"],
        "mean_psnr": float(np.mean(doc["psnrs"])) if doc["psnrs"] else None,
        "mean_ssim": float(np.mean(doc["ssims"])) if doc["ssims"] else None,
    }
    (export / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return export


# -- codebook inspection ----------------------------------------------------------------


def inspect_codebook(bundle: ModelBundle, data_dir, n_probe: int = 256, seed: int = 0) -> dict:
    """Utilization and cross-modal proximity diagnostics over a probe set.

    Pairs each paired-episode chunk latent with the visual latent of its
    first frame pair; agreement is how often both quantize to the same
    codebook index, compared against a shuffled pairing.
    """
    from .trainer import DatasetIndex

    m = bundle
    data = DatasetIndex(data_dir, m.cfg.horizon)
    rng = np.random.default_rng(seed)
    h = m.cfg.horizon
    zv_list, za_list = [], []
    vis_only_latents = []
    pool = data.paired_pool
    if not pool:
        raise ValueError("inspect_codebook needs paired episodes in the dataset")
    for _ in range(n_probe):
        entry = pool[int(rng.integers(0, len(pool)))]
        ep = data.episode(entry)
        t0 = int(rng.integers(0, ep.actions.shape[0] - h + 1))
        frames = ep.frames[t0 : t0 + 2].astype(np.float32) / 255.0
        with no_grad():
            zv = m.pooler.pool(m.patch_encoder.extract(Tensor(frames[0])),
                               m.patch_encoder.extract(Tensor(frames[1])))
            za = m.action_encoder.encode(Tensor(normalize(ep.actions[t0 : t0 + h], m.norm_stats)))
        zv_list.append(zv.data)
        za_list.append(za.data)
    zv_arr = np.stack(zv_list)
    za_arr = np.stack(za_list)
    iv = quantize_batch(zv_arr, m.codebook, count_usage=False)
    ia = quantize_batch(za_arr, m.codebook, count_usage=False)
    usage = np.bincount(np.concatenate([iv, ia]), minlength=m.codebook.num_entries)
    from .quantizer import perplexity as ppl

    shuffled = rng.permutation(len(ia))
    aligned_agreement = float(np.mean(iv == ia))
    shuffled_agreement = float(np.mean(iv == ia[shuffled]))
    nn_dist = np.linalg.norm(zv_arr - za_arr, axis=1)
    return {
        "codebook_size": m.codebook.num_entries,
        "latent_dim": m.codebook.dim,
        "probe_perplexity": ppl(usage),
        "usage_histogram": usage.tolist(),
        "paired_agreement": aligned_agreement,
        "shuffled_agreement": shuffled_agreement,
        "agreement_margin": aligned_agreement - shuffled_agreement,
        "mean_cross_modal_distance": float(nn_dist.mean()),
    }
