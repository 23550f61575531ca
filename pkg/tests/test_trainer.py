"""Trainer: stage contracts, determinism, resume, metrics, config validation."""

import csv
import json

import numpy as np
import pytest

from vita.config import ConfigError, VitaConfig, load_config
from vita.trainer import METRIC_COLUMNS, ModelBundle, StageError, Trainer
from vita.world import generate_dataset


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(root, {"video_only": 8, "action_only": 8, "paired": 10}, seed=3)
    return root


def tiny_cfg(**overrides):
    cfg = VitaConfig()
    cfg.warmup.steps = 6
    cfg.warmup.log_interval = 2
    cfg.cotrain.steps = 3
    cfg.cotrain.batch_size = 6
    cfg.cotrain.log_interval = 1
    cfg.finetune.steps = 3
    cfg.finetune.batch_size = 6
    cfg.finetune.log_interval = 1
    for key, val in overrides.items():
        section, name = key.split(".")
        setattr(getattr(cfg, section), name, val)
    return cfg


@pytest.fixture(scope="module")
def staged(tmp_path_factory, tiny_data):
    """One warmup+cotrain chain reused by the read-only contract tests."""
    out = tmp_path_factory.mktemp("staged")
    cfg = tiny_cfg()
    w = Trainer(cfg, "warmup", tiny_data, out)
    w_report = w.train()
    c = Trainer(cfg, "cotrain", tiny_data, out)
    c_report = c.train()
    return cfg, out, w, w_report, c, c_report


# -- config ------------------------------------------------------------------------


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"frame_size": 64, "bogus": 1}}))
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text(json.dumps({"nonsection": {}}))
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_type_checks(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"warmup": {"steps": "many"}}))
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text(json.dumps({"warmup": {"steps": 12, "lr": 0.01}}))
    cfg = load_config(path)
    assert cfg.warmup.steps == 12 and cfg.warmup.lr == 0.01


def test_config_defaults_roundtrip(tmp_path):
    cfg = load_config(None)
    assert cfg.model.codebook_size == 256
    assert cfg.cotrain.stage == "cotrain"


# -- stage mechanics -----------------------------------------------------------------


def test_warmup_stage_isolation(tiny_data, tmp_path):
    cfg = tiny_cfg()
    tr = Trainer(cfg, "warmup", tiny_data, tmp_path)
    action_before = tr.model.component_hash("action_enc"), tr.model.component_hash("action_dec")
    backbone_before = tr.model.component_hash("backbone")
    tr.warmup_visual_step(np.random.default_rng(0))
    assert tr.model.component_hash("action_enc") == action_before[0]
    assert tr.model.component_hash("action_dec") == action_before[1]
    assert tr.model.component_hash("backbone") == backbone_before

    visual_before = tr.model.component_hash("visual_enc"), tr.model.component_hash("visual_dec")
    tr.warmup_action_step(np.random.default_rng(1))
    assert tr.model.component_hash("visual_enc") == visual_before[0]
    assert tr.model.component_hash("visual_dec") == visual_before[1]


def test_warmup_rejects_frozen_codebook(tiny_data, tmp_path):
    cfg = tiny_cfg()
    tr = Trainer(cfg, "warmup", tiny_data, tmp_path)
    tr.model.codebook.frozen = True
    with pytest.raises(StageError):
        tr.warmup_visual_step(np.random.default_rng(0))


def test_cotrain_requires_warmup_checkpoint(tiny_data, tmp_path):
    with pytest.raises(StageError):
        Trainer(tiny_cfg(), "cotrain", tiny_data, tmp_path)


def test_cotrain_freezes_codebook_and_encoders(staged):
    cfg, out, w, w_report, c, c_report = staged
    assert c_report.component_hashes["codebook"] == w_report.component_hashes["codebook"]
    assert c_report.component_hashes["visual_enc"] == w_report.component_hashes["visual_enc"]
    assert c_report.component_hashes["action_enc"] == w_report.component_hashes["action_enc"]
    # trained components did change
    assert c_report.component_hashes["backbone"] != w_report.component_hashes["backbone"]


def test_finetune_only_updates_action_decoder(staged, tiny_data, tmp_path_factory):
    cfg, out, _, _, _, c_report = staged
    tr = Trainer(cfg, "finetune", tiny_data, out)
    report = tr.train()
    for frozen in ("backbone", "visual_dec", "codebook", "visual_enc", "action_enc", "visual_pool"):
        assert report.component_hashes[frozen] == c_report.component_hashes[frozen], frozen
    assert report.component_hashes["action_dec"] != c_report.component_hashes["action_dec"]


def test_video_only_batch_has_zero_action_loss(tiny_data, tmp_path):
    cfg = tiny_cfg()
    out = tmp_path
    Trainer(cfg, "warmup", tiny_data, out).train()
    tr = Trainer(cfg, "cotrain", tiny_data, out)
    tr.data.cotrain_pool = [e for e in tr.data.cotrain_pool if e["regime"] == "video_only"]
    losses = tr.cotrain_step(np.random.default_rng(0))
    assert losses["loss_mse"] == 0.0
    dec_params = tr.model.component_params("action_dec")
    assert all(p.grad is None for p in dec_params.values())


def test_lambda_a_zero_keeps_action_decoder_constant(tiny_data, tmp_path):
    cfg = tiny_cfg()
    cfg.cotrain.lambda_a = 0.0
    Trainer(cfg, "warmup", tiny_data, tmp_path).train()
    tr = Trainer(cfg, "cotrain", tiny_data, tmp_path)
    before = tr.model.component_hash("action_dec")
    tr.train()
    assert tr.model.component_hash("action_dec") == before


def test_loss_decomposition_sums(staged):
    _, out, _, _, _, _ = staged
    for stage in ("warmup", "cotrain"):
        with open(out / f"metrics_{stage}.csv") as f:
            rows = list(csv.DictReader(f))
        assert rows, stage
        for row in rows:
            parts = sum(float(row[c]) for c in ("loss_ce", "loss_l1", "loss_ssim",
                                                "loss_mse", "loss_codebook", "loss_commit"))
            assert abs(float(row["loss_total"]) - parts) < 1e-6


def test_metrics_columns_fixed(staged):
    _, out, _, _, _, _ = staged
    with open(out / "metrics_warmup.csv") as f:
        header = f.readline().strip().split(",")
    assert header == METRIC_COLUMNS


def test_warmup_report_contains_perplexity_series(staged):
    _, out, _, w_report, _, _ = staged
    assert len(w_report.codebook_perplexity) > 0
    doc = json.loads((out / "report_warmup.json").read_text())
    assert "codebook_perplexity" in doc and len(doc["codebook_perplexity"]) > 0


def test_same_seed_same_hashes(tiny_data, tmp_path_factory):
    outs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(name)
        cfg = tiny_cfg()
        rep = Trainer(cfg, "warmup", tiny_data, out).train()
        outs.append(rep.component_hashes)
    assert outs[0] == outs[1]


def test_resume_equals_uninterrupted(tiny_data, tmp_path_factory):
    cfg = tiny_cfg()
    out_a = tmp_path_factory.mktemp("cont")
    rep_a = Trainer(cfg, "warmup", tiny_data, out_a).train(steps=8)

    out_b = tmp_path_factory.mktemp("split")
    tr = Trainer(cfg, "warmup", tiny_data, out_b)
    tr.train(steps=4)
    tr2 = Trainer(cfg, "warmup", tiny_data, out_b)
    tr2.resume(out_b / "warmup.ckpt")
    assert tr2.step == 4
    rep_b = tr2.train(steps=8)
    assert rep_a.component_hashes == rep_b.component_hashes


def test_nonfinite_loss_aborts(tiny_data, tmp_path):
    cfg = tiny_cfg()
    tr = Trainer(cfg, "warmup", tiny_data, tmp_path)
    tr.model.patch_encoder.w1.data[:] = np.nan
    with pytest.raises(StageError):
        for _ in range(4):
            tr.train_step()


def test_checkpoint_bundle_roundtrip(staged, tmp_path):
    cfg, out, w, _, _, _ = staged
    bundle, extras = ModelBundle.load(out / "warmup.ckpt", cfg.model)
    for comp in ("visual_enc", "action_enc", "codebook", "backbone"):
        assert bundle.component_hash(comp) == w.model.component_hash(comp)
    assert bundle.norm_stats is not None
    assert "meta.step" in extras


def test_supervised_subtask_flag_runs(tiny_data, tmp_path):
    cfg = tiny_cfg()
    cfg.cotrain.supervise_subtasks = True
    Trainer(cfg, "warmup", tiny_data, tmp_path).train()
    tr = Trainer(cfg, "cotrain", tiny_data, tmp_path)
    losses = tr.cotrain_step(np.random.default_rng(0))
    assert np.isfinite(losses["loss_total"])
