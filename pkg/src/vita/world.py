"""Deterministic planar manipulation world and dataset generator.

A point effector with a gripper moves on a [0,1]^2 table among colored
blocks and pads. Physics is purely kinematic: per-axis clamped deltas,
contact pushing, and attach/carry when the gripper is closed near a
block. Rendering is exact rasterization (no antialiasing), so identical
states give byte-identical frames and stored episodes replay exactly.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TASKS = ("reach", "push", "color_match")
REGIMES = ("video_only", "action_only", "paired")

ACTION_DIM = 7
STEP_LIMIT = 0.1          # per-axis clamp on every action dimension
ATTACH_RADIUS = 0.04
CONTACT_RADIUS = 0.035
REACH_RADIUS = 0.05
PAD_HALF = 0.07
BLOCK_RADIUS = 0.03
GRIP_CLOSED = 0.5         # attached while openness < this
EPISODE_CAP = 40
MIN_EPISODE_LEN = 12      # frames; shorter rollouts are padded with zero actions
TAIL_STEPS = 3
FRAME_SIZE = 64

COLORS = {
    "red": (0.85, 0.20, 0.20),
    "blue": (0.20, 0.35, 0.85),
    "green": (0.20, 0.70, 0.30),
    "yellow": (0.90, 0.85, 0.20),
}
BACKGROUND = (0.75, 0.75, 0.75)


class SubtaskToken(enum.IntEnum):
    GRASP = 0
    LIFT = 1
    MOVE = 2
    PLACE = 3
    ROTATE = 4
    OPEN = 5
    CLOSE = 6
    END_SUBTASK = 7


@dataclass
class WorldObject:
    kind: str          # block | pad | towel
    color: str
    pos: np.ndarray


@dataclass
class WorldState:
    effector: np.ndarray
    gripper: float
    objects: list[WorldObject]
    task: str
    step_count: int = 0

    def copy(self) -> "WorldState":
        return WorldState(
            effector=self.effector.copy(),
            gripper=self.gripper,
            objects=[WorldObject(o.kind, o.color, o.pos.copy()) for o in self.objects],
            task=self.task,
            step_count=self.step_count,
        )

    def state_vector(self) -> np.ndarray:
        """Proprioceptive summary fed to the policy: (x, y, gripper)."""
        return np.array([self.effector[0], self.effector[1], self.gripper], dtype=np.float32)


def _sample_position(rng: np.random.Generator, existing: list[np.ndarray], min_dist: float,
                     lo: float = 0.12, hi: float = 0.88) -> np.ndarray:
    for _ in range(1000):
        p = rng.uniform(lo, hi, size=2)
        if all(np.linalg.norm(p - q) >= min_dist for q in existing):
            return p
    raise RuntimeError("rejection sampling failed to place object")


class Env:
    """Seeded task instance; step() is pure given the current state."""

    def __init__(self, task: str, seed: int, cap: int = EPISODE_CAP):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        self.task = task
        self.seed = seed
        self.cap = cap
        rng = np.random.default_rng([seed, TASKS.index(task)])
        objects: list[WorldObject] = []
        taken: list[np.ndarray] = []
        if task == "reach":
            color = rng.choice(list(COLORS))
            pos = _sample_position(rng, taken, 0.0)
            taken.append(pos)
            objects.append(WorldObject("block", str(color), pos))
            self.instruction = f"reach the {color} block"
        elif task == "push":
            color = rng.choice(list(COLORS))
            bpos = _sample_position(rng, taken, 0.22)
            taken.append(bpos)
            ppos = _sample_position(rng, taken, 0.22)
            taken.append(ppos)
            objects.append(WorldObject("block", str(color), bpos))
            objects.append(WorldObject("pad", str(color), ppos))
            self.instruction = f"push the {color} block onto the {color} pad"
        else:
            pair = rng.choice(list(COLORS), size=2, replace=False)
            for color in pair:
                pos = _sample_position(rng, taken, 0.22)
                taken.append(pos)
                objects.append(WorldObject("block", str(color), pos))
            for color in pair:
                pos = _sample_position(rng, taken, 0.22)
                taken.append(pos)
                objects.append(WorldObject("pad", str(color), pos))
            self.instruction = "place each block onto the pad of matching color"
        # effector spawns well clear of the target so a diffusing random policy
        # rarely wanders into the reach success radius within the episode cap
        eff_clearance = {"reach": 0.4, "push": 0.3, "color_match": 0.25}[task]
        eff = _sample_position(rng, taken, eff_clearance)
        self.state = WorldState(effector=eff, gripper=0.6, objects=objects, task=task)

    # -- dynamics -------------------------------------------------------------

    def step(self, action: np.ndarray) -> tuple[WorldState, bool, bool]:
        """Apply one clamped action; returns (state, done, success)."""
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (ACTION_DIM,):
            raise ValueError(f"action must have shape ({ACTION_DIM},)")
        if not np.all(np.isfinite(action)):
            raise ValueError("non-finite action")
        s = self.state
        delta = np.clip(action[:2], -STEP_LIMIT, STEP_LIMIT)
        dgrip = float(np.clip(action[6], -STEP_LIMIT, STEP_LIMIT))

        carried = self._attached_block()
        new_eff = np.clip(s.effector + delta, 0.0, 1.0)
        moved = new_eff - s.effector
        s.effector = new_eff
        if carried is not None:
            carried.pos = np.clip(carried.pos + moved, 0.0, 1.0)
        else:
            for obj in s.objects:
                if obj.kind != "block":
                    continue
                gap = obj.pos - s.effector
                dist = float(np.linalg.norm(gap))
                if dist < CONTACT_RADIUS:
                    # push the block out to the contact ring, deterministically
                    direction = gap / dist if dist > 1e-9 else np.array([1.0, 0.0])
                    obj.pos = np.clip(s.effector + direction * CONTACT_RADIUS, 0.0, 1.0)
        s.gripper = float(np.clip(s.gripper + dgrip, 0.0, 1.0))
        s.step_count += 1
        success = self._success()
        done = success or s.step_count >= self.cap
        return s, done, success

    def _attached_block(self) -> WorldObject | None:
        s = self.state
        if s.gripper >= GRIP_CLOSED:
            return None
        best = None
        best_d = ATTACH_RADIUS
        for obj in s.objects:
            if obj.kind != "block":
                continue
            d = float(np.linalg.norm(obj.pos - s.effector))
            if d < best_d:
                best, best_d = obj, d
        return best

    def _success(self) -> bool:
        s = self.state
        if self.task == "reach":
            target = next(o for o in s.objects if o.kind == "block")
            return float(np.linalg.norm(target.pos - s.effector)) <= REACH_RADIUS
        blocks = [o for o in s.objects if o.kind == "block"]
        pads = {o.color: o for o in s.objects if o.kind == "pad"}
        for b in blocks:
            pad = pads.get(b.color)
            if pad is None or np.max(np.abs(b.pos - pad.pos)) > PAD_HALF:
                return False
        return True

    def render(self) -> np.ndarray:
        return render(self.state)


def make_env(task: str, seed: int, cap: int = EPISODE_CAP) -> Env:
    return Env(task, seed, cap)


# -- rendering ----------------------------------------------------------------


def render(state: WorldState, size: int = FRAME_SIZE) -> np.ndarray:
    """Rasterize a state to (size, size, 3) uint8; deterministic, no antialiasing."""
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = BACKGROUND
    centers = (np.arange(size) + 0.5) / size
    xs = centers[None, :]   # columns -> x
    ys = centers[:, None]   # rows -> y

    for obj in state.objects:   # pads and towels under blocks
        if obj.kind == "block":
            continue
        mask = (np.abs(xs - obj.pos[0]) <= PAD_HALF) & (np.abs(ys - obj.pos[1]) <= PAD_HALF)
        tint = 0.5 * np.array(COLORS[obj.color]) + 0.5 * np.array(BACKGROUND)
        img[mask] = tint
    for obj in state.objects:
        if obj.kind != "block":
            continue
        mask = (xs - obj.pos[0]) ** 2 + (ys - obj.pos[1]) ** 2 <= BLOCK_RADIUS**2
        img[mask] = COLORS[obj.color]

    ex, ey = state.effector
    arm = 3.5 / size
    thick = 0.8 / size
    cross = ((np.abs(xs - ex) <= arm) & (np.abs(ys - ey) <= thick)) | (
        (np.abs(ys - ey) <= arm) & (np.abs(xs - ex) <= thick)
    )
    img[cross] = (0.05, 0.05, 0.05)
    # gripper aperture shown as a box outline scaled by openness
    half = (1.5 + 2.5 * state.gripper) / size
    on_x = np.abs(np.abs(xs - ex) - half) <= thick
    on_y = np.abs(np.abs(ys - ey) - half) <= thick
    box = (on_x & (np.abs(ys - ey) <= half + thick)) | (on_y & (np.abs(xs - ex) <= half + thick))
    img[box] = (0.05, 0.05, 0.05)
    return np.round(img * 255.0).astype(np.uint8)


# -- scripted expert -------------------------------------------------------------


class Expert:
    """Proportional controller toward the current subgoal, with subtask labels."""

    @staticmethod
    def _approach(eff: np.ndarray, gap: np.ndarray, obstacles: list[np.ndarray]) -> np.ndarray:
        """Clamped step toward the goal, sidestepping non-target blocks."""
        step = np.clip(gap, -STEP_LIMIT, STEP_LIMIT)
        nxt = eff + step
        for b in obstacles:
            if float(np.linalg.norm(nxt - b)) < CONTACT_RADIUS + 0.02:
                norm = float(np.linalg.norm(gap))
                d = gap / norm if norm > 1e-9 else np.array([1.0, 0.0])
                perp = np.array([-d[1], d[0]])
                if float(np.dot(perp, b - eff)) > 0:
                    perp = -perp
                return perp * STEP_LIMIT
        return step

    def action(self, state: WorldState) -> tuple[np.ndarray, SubtaskToken]:
        a = np.zeros(ACTION_DIM, dtype=np.float64)
        task = state.task
        if task == "reach":
            target = next(o for o in state.objects if o.kind == "block")
            gap = target.pos - state.effector
            if float(np.linalg.norm(gap)) <= REACH_RADIUS * 0.9:
                return a, SubtaskToken.END_SUBTASK
            a[:2] = np.clip(gap, -STEP_LIMIT, STEP_LIMIT)
            return a, SubtaskToken.MOVE

        blocks = [o for o in state.objects if o.kind == "block"]
        pads = {o.color: o for o in state.objects if o.kind == "pad"}
        pending = [b for b in blocks if np.max(np.abs(b.pos - pads[b.color].pos)) > PAD_HALF * 0.7]
        if not pending:
            if state.gripper < 0.55:    # release and settle
                a[6] = STEP_LIMIT
                return a, SubtaskToken.PLACE
            return a, SubtaskToken.END_SUBTASK
        block = pending[0]
        pad = pads[block.color]
        carrying = state.gripper < GRIP_CLOSED and float(np.linalg.norm(block.pos - state.effector)) < ATTACH_RADIUS
        if carrying:
            gap = pad.pos - block.pos
            if float(np.max(np.abs(gap))) <= 0.015:
                a[6] = STEP_LIMIT   # open to release
                return a, SubtaskToken.PLACE
            a[:2] = np.clip(gap, -STEP_LIMIT, STEP_LIMIT)
            return a, SubtaskToken.MOVE
        gap = block.pos - state.effector
        if float(np.linalg.norm(gap)) < ATTACH_RADIUS:
            a[6] = -STEP_LIMIT
            return a, SubtaskToken.GRASP
        if state.gripper < 0.55:    # reopen before the next approach
            a[6] = STEP_LIMIT
            return a, SubtaskToken.OPEN
        others = [b.pos for b in blocks if b is not block]
        a[:2] = self._approach(state.effector, gap, others)
        return a, SubtaskToken.MOVE


def expert_action(state: WorldState) -> np.ndarray:
    """Standalone expert controller (label dropped); see Expert for the full form."""
    a, _ = Expert().action(state)
    return a


# -- episodes ---------------------------------------------------------------------


@dataclass
class Episode:
    instruction: str
    frames: np.ndarray                      # (T, S, S, 3) uint8
    actions: np.ndarray | None              # (T-1, d_a) float32
    labels: np.ndarray | None               # (T-1,) uint8
    success: bool
    seed: int
    task: str = ""
    regime: str = ""


def rollout_expert(task: str, seed: int, cap: int = EPISODE_CAP) -> Episode:
    """Run the scripted expert, recording frames, actions, and subtask labels."""
    env = make_env(task, seed, cap)
    expert = Expert()
    frames = [env.render()]
    actions: list[np.ndarray] = []
    labels: list[int] = []
    success = False
    done = False
    tail = 0
    while len(frames) < cap + 1:
        a, label = expert.action(env.state)
        if done:
            a = np.zeros(ACTION_DIM)
            label = SubtaskToken.END_SUBTASK
        a32 = a.astype(np.float32)  # step with the stored precision so replay is exact
        _, step_done, step_success = env.step(a32.astype(np.float64))
        actions.append(a32)
        labels.append(int(label))
        frames.append(env.render())
        success = success or step_success
        if step_done and not done:
            done = True
        if done:
            tail += 1
            if tail >= TAIL_STEPS and len(frames) >= MIN_EPISODE_LEN:
                break
    return Episode(
        instruction=env.instruction,
        frames=np.stack(frames),
        actions=np.stack(actions),
        labels=np.array(labels, dtype=np.uint8),
        success=success,
        seed=seed,
        task=task,
    )


# -- binary episode format ---------------------------------------------------------

EPISODE_MAGIC = b"VEP1"


def save_episode(path, ep: Episode, with_actions: bool = True, with_labels: bool = True) -> None:
    """Little-endian layout: magic, flags u8, T u16, H u16, W u16, d_a u8,
    instruction (u16 len + utf-8), frames u8, then optional actions/labels."""
    frames = np.ascontiguousarray(ep.frames, dtype=np.uint8)
    t, h, w, _ = frames.shape
    flags = (1 if (with_actions and ep.actions is not None) else 0) | (
        2 if (with_labels and ep.labels is not None) else 0
    )
    instr = ep.instruction.encode("utf-8")
    with open(path, "wb") as f:
        f.write(EPISODE_MAGIC)
        f.write(struct.pack("<BHHHB", flags, t, h, w, ACTION_DIM))
        f.write(struct.pack("<H", len(instr)))
        f.write(instr)
        f.write(frames.tobytes())
        if flags & 1:
            f.write(np.ascontiguousarray(ep.actions, dtype="<f4").tobytes())
        if flags & 2:
            f.write(np.ascontiguousarray(ep.labels, dtype=np.uint8).tobytes())


def load_episode(path) -> Episode:
    blob = Path(path).read_bytes()
    if blob[:4] != EPISODE_MAGIC:
        raise ValueError(f"{path}: bad episode magic")
    flags, t, h, w, d_a = struct.unpack_from("<BHHHB", blob, 4)
    off = 4 + 8
    (ilen,) = struct.unpack_from("<H", blob, off)
    off += 2
    instruction = blob[off : off + ilen].decode("utf-8")
    off += ilen
    n_px = t * h * w * 3
    frames = np.frombuffer(blob, dtype=np.uint8, count=n_px, offset=off).reshape(t, h, w, 3).copy()
    off += n_px
    actions = labels = None
    if flags & 1:
        n = (t - 1) * d_a
        actions = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(t - 1, d_a).copy()
        off += 4 * n
    if flags & 2:
        labels = np.frombuffer(blob, dtype=np.uint8, count=t - 1, offset=off).copy()
        off += t - 1
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes")
    return Episode(instruction=instruction, frames=frames, actions=actions, labels=labels,
                   success=False, seed=-1)


def replay_states(task: str, seed: int, actions: np.ndarray, cap: int = EPISODE_CAP) -> list[WorldState]:
    """Re-simulate stored actions from the seeded initial state (exact replay)."""
    env = make_env(task, seed, cap)
    states = [env.state.copy()]
    for a in actions:
        env.step(np.asarray(a, dtype=np.float64))
        states.append(env.state.copy())
    return states


# -- dataset generation --------------------------------------------------------------


def generate_dataset(out_dir, counts: dict[str, int], tasks=TASKS, seed: int = 0,
                     cap: int = EPISODE_CAP) -> list[dict]:
    """Write episode files plus a manifest.json; fully determined by (counts, tasks, seed)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: list[dict] = []
    for regime in REGIMES:
        n = int(counts.get(regime, 0))
        if n < 0:
            raise ValueError("episode counts must be >= 0")
        for i in range(n):
            task = tasks[i % len(tasks)]
            ep_seed = int(np.random.default_rng([seed, REGIMES.index(regime), i]).integers(0, 2**31 - 1))
            ep = rollout_expert(task, ep_seed, cap)
            fname = f"{regime}_{i:05d}.vep"
            with_actions = regime != "video_only"
            save_episode(out_dir / fname, ep, with_actions=with_actions, with_labels=with_actions)
            manifest.append({
                "file": fname,
                "regime": regime,
                "task": task,
                "seed": ep_seed,
                "length": int(ep.frames.shape[0]),
                "success": bool(ep.success),
            })
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_manifest(data_dir) -> list[dict]:
    return json.loads((Path(data_dir) / "manifest.json").read_text())
