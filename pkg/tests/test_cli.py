"""CLI surface and evaluation plumbing."""

import json
import os
from pathlib import Path

import numpy as np
import pytest

from vita.cli import main
from vita.config import VitaConfig
from vita.evaluation import (
    Policy,
    export_traces,
    read_ppm,
    run_rollout,
    teacher_forced_action_mse,
    write_ppm,
    write_rollout_artifacts,
)
from vita.trainer import Trainer
from vita.visual_codec import FrameDecoder
from vita.world import generate_dataset


def small_config(tmp_path) -> Path:
    doc = {
        "data": {"video_only": 4, "action_only": 4, "paired": 6, "seed": 3},
        "warmup": {"steps": 5, "log_interval": 2},
        "cotrain": {"steps": 2, "batch_size": 4, "log_interval": 1},
        "finetune": {"steps": 2, "batch_size": 4, "log_interval": 1},
        "eval": {"rollouts": 2, "episode_cap": 12},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data + all three stages via the CLI, shared by the read-only tests."""
    out = tmp_path_factory.mktemp("cliout")
    cfg = small_config(out)
    assert main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["warmup", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["cotrain", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["finetune", "--config", str(cfg), "--out", str(out)]) == 0
    return out, cfg


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == 1
    assert main([]) == 1
    assert main(["eval", "--bogus-flag"]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "COMMAND" in capsys.readouterr().out


def test_eval_zero_rollouts_usage_error(pipeline):
    out, cfg = pipeline
    assert main(["eval", "--config", str(cfg), "--out", str(out), "--rollouts", "0"]) == 1


def test_missing_checkpoint_is_runtime_error(tmp_path):
    cfg = small_config(tmp_path)
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path), "--rollouts", "1"]) == 2


def test_gen_data_deterministic(tmp_path):
    cfg = small_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--config", str(cfg), "--out", str(a), "--seed", "7"]) == 0
    assert main(["gen-data", "--config", str(cfg), "--out", str(b), "--seed", "7"]) == 0
    files_a = sorted((a / "data").glob("*"))
    files_b = sorted((b / "data").glob("*"))
    assert [f.name for f in files_a] == [f.name for f in files_b]
    for fa, fb in zip(files_a, files_b):
        assert fa.read_bytes() == fb.read_bytes()


def test_pipeline_then_eval_and_rollout(pipeline):
    out, cfg = pipeline
    assert (out / "finetune.ckpt").exists()
    code = main(["eval", "--config", str(cfg), "--out", str(out), "--rollouts", "2",
                 "--task", "reach", "--seed", "5", "--no-visual-decode"])
    assert code == 0
    report = json.loads((out / "eval_report.json").read_text())
    assert report["rollouts"] == 2
    assert report["success_rate"] == report["successes"] / 2

    code = main(["rollout", "--config", str(cfg), "--out", str(out), "--task", "reach",
                 "--seed", "1", "--checkpoint", str(out / "finetune.ckpt")])
    assert code == 0
    roll_dir = out / "rollout_reach_1"
    assert (roll_dir / "trace.jsonl").exists()
    frames = sorted((roll_dir / "frames").glob("*.ppm"))
    assert frames
    img = read_ppm(frames[0])
    assert img.shape == (64, 64, 3)
    for line in (roll_dir / "trace.jsonl").read_text().splitlines():
        doc = json.loads(line)
        assert {"step", "subtasks", "token_indices", "sample_seed", "latency_ms"} <= set(doc)


def test_eval_determinism(pipeline):
    out, cfg = pipeline
    from vita.evaluation import evaluate
    from vita.trainer import ModelBundle
    from vita.config import load_config

    vcfg = load_config(cfg)
    bundle, _ = ModelBundle.load(out / "finetune.ckpt", vcfg.model)
    r1 = evaluate(bundle, "reach", 2, seed=4, cap=10, visual_decode=False)
    r2 = evaluate(bundle, "reach", 2, seed=4, cap=10, visual_decode=False)
    assert r1.success_rate == r2.success_rate
    assert r1.mean_episode_length == r2.mean_episode_length
    assert r1.action_mse == r2.action_mse


def test_no_visual_decode_never_invokes_frame_decoder(pipeline):
    out, cfg = pipeline
    from vita.config import load_config
    from vita.trainer import ModelBundle

    vcfg = load_config(cfg)
    bundle, _ = ModelBundle.load(out / "finetune.ckpt", vcfg.model)
    policy = Policy(bundle, visual_decode=False)
    before = FrameDecoder.decode_calls
    run_rollout(policy, "reach", 3, cap=8)
    assert FrameDecoder.decode_calls == before

    policy_v = Policy(bundle, visual_decode=True)
    run_rollout(policy_v, "reach", 3, cap=8)
    assert FrameDecoder.decode_calls > before


def test_export_traces_roundtrip(pipeline, tmp_path):
    out, cfg = pipeline
    from vita.config import load_config
    from vita.trainer import ModelBundle

    vcfg = load_config(cfg)
    bundle, _ = ModelBundle.load(out / "finetune.ckpt", vcfg.model)
    rec = run_rollout(Policy(bundle, visual_decode=True), "reach", 2, cap=6)
    roll_dir = tmp_path / "roll"
    write_rollout_artifacts(roll_dir, rec)
    export = export_traces(roll_dir)
    csv_text = (export / "steps.csv").read_text()
    assert len(csv_text.strip().splitlines()) - 1 == len(rec["actions"])
    assert (export / "summary.json").exists()
    assert list(export.glob("pred_*.ppm"))
    # re-export is byte-identical
    before = {p.name: p.read_bytes() for p in export.iterdir()}
    export2 = export_traces(roll_dir)
    after = {p.name: p.read_bytes() for p in export2.iterdir()}
    assert before == after


def test_export_traces_requires_artifacts(tmp_path):
    assert main(["export-traces", str(tmp_path / "missing")]) == 2


def test_export_traces_no_pred_frames_without_visual(pipeline, tmp_path):
    out, cfg = pipeline
    from vita.config import load_config
    from vita.trainer import ModelBundle

    vcfg = load_config(cfg)
    bundle, _ = ModelBundle.load(out / "finetune.ckpt", vcfg.model)
    rec = run_rollout(Policy(bundle, visual_decode=False), "reach", 2, cap=6)
    roll_dir = tmp_path / "roll"
    write_rollout_artifacts(roll_dir, rec)
    export = export_traces(roll_dir)
    assert not list(export.glob("pred_*.ppm"))


def test_vita_out_env(tmp_path, monkeypatch):
    cfg = small_config(tmp_path)
    dest = tmp_path / "envout"
    monkeypatch.setenv("VITA_OUT", str(dest))
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert (dest / "data" / "manifest.json").exists()


def test_outputs_stay_under_out(pipeline, tmp_path, monkeypatch):
    out, cfg = pipeline
    monkeypatch.chdir(tmp_path)
    code = main(["eval", "--config", str(cfg), "--out", str(out), "--rollouts", "1",
                 "--task", "reach", "--seed", "9", "--no-visual-decode"])
    assert code == 0
    assert list(tmp_path.iterdir()) == []  # nothing written to the cwd


def test_inspect_codebook(pipeline, capsys):
    out, cfg = pipeline
    code = main(["inspect-codebook", "--config", str(cfg), "--out", str(out),
                 "--checkpoint", str(out / "warmup.ckpt")])
    assert code == 0
    text = capsys.readouterr().out
    assert "probe_perplexity" in text
    doc = json.loads((out / "codebook_report.json").read_text())
    assert doc["codebook_size"] == 256
    assert 1.0 <= doc["probe_perplexity"] <= 256.0


def test_ppm_roundtrip(tmp_path):
    frame = np.random.default_rng(0).integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    path = tmp_path / "f.ppm"
    write_ppm(path, frame)
    np.testing.assert_array_equal(read_ppm(path), frame)


def test_teacher_forced_action_mse_finite(pipeline):
    out, cfg = pipeline
    from vita.config import load_config
    from vita.trainer import ModelBundle

    vcfg = load_config(cfg)
    bundle, _ = ModelBundle.load(out / "finetune.ckpt", vcfg.model)
    val = teacher_forced_action_mse(bundle, "reach", 5)
    assert np.isfinite(val) and val >= 0.0
