import csv
import json

import numpy as np
import pytest
import torch

from fslab import cli
from fslab.ablate import DIRECTION_SETTINGS, ablate, count_flops, export_pr, sweep_variants
from fslab.config import STAGES, ConfigError, RunConfig
from fslab.data import SplitError, load_split, resize_batch
from fslab.metrics import MetricReport, aggregate, frame_metrics, read_pr_csv
from fslab.synthdata import build_corpus
from fslab.train import CheckpointError, load_checkpoint, state_hash, train, evaluate


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus")
    build_corpus(8, path, seed=3, size=32, n_frames=3)
    return path


def _config(corpus, out, **kw):
    base = dict(
        corpus=str(corpus),
        output_dir=str(out),
        input_size=32,
        multi_scale=[1.0],
        loss_reduction="mean",
        optimizer={"lr": 0.03},
        epochs={"spatial_pretrain": 1, "temporal_pretrain": 1, "joint": 2},
        batch_size=4,
    )
    base.update(kw)
    return RunConfig(**base)


# --- config -----------------------------------------------------------------


def test_defaults_mirror_reference_recipe():
    c = RunConfig()
    assert c.optimizer.momentum == 0.9 and c.optimizer.lr == 2e-3 and c.optimizer.weight_decay == 5e-4
    assert c.optimizer.lr_decay_factor == 0.1 and c.optimizer.lr_decay_every_epochs == 20
    assert c.multi_scale == [0.75, 1.0, 1.25] and c.input_size == 64
    assert (c.epochs.spatial_pretrain, c.epochs.temporal_pretrain, c.epochs.joint) == (10, 10, 20)
    assert c.prediction_head == "SA" and c.batch_size == 8


def test_desk_preset_overrides():
    c = RunConfig.desk(seed=4, optimizer={"momentum": 0.5})
    assert c.input_size == 128 and c.loss_reduction == "mean" and c.optimizer.lr == 0.03
    assert c.optimizer.momentum == 0.5 and c.seed == 4


def test_config_errors():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"nope": 1})
    with pytest.raises(ConfigError):
        RunConfig(rcam_mode="sideways")
    with pytest.raises(ConfigError):
        RunConfig(input_size=40)


def test_config_roundtrip_hash_and_env_override(tmp_path, monkeypatch):
    c = RunConfig(seed=3, bpm_n=2)
    c.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == c and back.hash() == c.hash()
    assert RunConfig(seed=3, bpm_n=2, output_dir="elsewhere").hash() == c.hash()
    assert RunConfig(seed=4, bpm_n=2).hash() != c.hash()
    monkeypatch.setenv("FSLAB_SEED", "17")
    assert RunConfig.load(tmp_path / "c.json").seed == 17


def test_scaled_sizes_are_valid_multiples():
    assert RunConfig().scaled_sizes() == [32, 64, 96]
    assert RunConfig(input_size=352).scaled_sizes() == [256, 352, 448]


def test_resize_keeps_masks_binary():
    g = torch.Generator().manual_seed(0)
    masks = (torch.rand(2, 1, 32, 32, generator=g) > 0.5).float()
    frames = torch.rand(2, 3, 32, 32, generator=g)
    for size in (24, 40, 64):
        f, fl, m = resize_batch(frames, frames, masks, size)
        assert f.shape[-1] == fl.shape[-1] == m.shape[-1] == size
        assert set(torch.unique(m).tolist()) <= {0.0, 1.0}


# --- training and evaluation ------------------------------------------------


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config = _config(corpus, out)
    return config, train(config)


def test_smoke_train_writes_all_stage_checkpoints(trained):
    config, final = trained
    assert list(final) == list(STAGES)
    for stage in STAGES:
        ckpt = load_checkpoint(final[stage])
        assert ckpt["stage"] == stage and ckpt["config_hash"] == config.hash()
        assert ckpt["model_hash"] == state_hash(ckpt["model"])
    lines = (final["joint"].parent.parent / "train_log.jsonl").read_text().splitlines()
    assert lines and all("loss" in json.loads(line) for line in lines)


def test_resume_replays_the_next_epoch_bit_identically(trained, tmp_path):
    config, final = trained
    first = final["joint"].parent / "joint_epoch000.pt"
    resumed = RunConfig.from_dict({**config.to_dict(), "output_dir": str(tmp_path)})
    out = train(resumed, resume=first)
    a, b = load_checkpoint(final["joint"]), load_checkpoint(out["joint"])
    assert a["epoch_losses"] == b["epoch_losses"]
    assert a["model_hash"] == b["model_hash"]


def test_resume_refuses_a_different_config(trained, tmp_path):
    config, final = trained
    other = RunConfig.from_dict({**config.to_dict(), "seed": 99, "output_dir": str(tmp_path)})
    with pytest.raises(CheckpointError):
        train(other, resume=final["joint"])


def test_missing_split_is_an_error(corpus, tmp_path):
    with pytest.raises(SplitError):
        load_split(corpus, "test")


def test_evaluate_writes_report_and_masks(trained, tmp_path):
    _, final = trained
    report = evaluate(final["joint"], "val", out_dir=tmp_path)
    assert (tmp_path / "report.json").exists()
    with open(tmp_path / "pr_curve.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["threshold", "precision", "recall"] and len(rows) == 257
    masks = list((tmp_path / "masks").rglob("*.png"))
    assert len(masks) == len(load_split(load_checkpoint(final["joint"])["config"]["corpus"], "val"))
    assert MetricReport.read_json(tmp_path / "report.json").summary() == report.summary()
    for v in report.summary().values():
        assert 0.0 <= v <= 1.0


def test_evaluate_is_deterministic(trained):
    _, final = trained
    a = evaluate(final["joint"], "val")
    b = evaluate(final["joint"], "val")
    assert a.summary() == b.summary()
    np.testing.assert_array_equal(a.pr_curve, b.pr_curve)


def test_mean_head_scores_average_of_both_maps(trained):
    from fslab.train import model_from_checkpoint, predict

    _, final = trained
    model, config = model_from_checkpoint(final["joint"])
    data = load_split(config.corpus, "val")
    sa = predict(model, data.frames, data.flows, config.input_size, "SA")
    sm = predict(model, data.frames, data.flows, config.input_size, "SM")
    mean = predict(model, data.frames, data.flows, config.input_size, "mean")
    np.testing.assert_allclose(mean, (sa + sm) / 2, atol=1e-6)
    report = evaluate(final["joint"], "val", head="mean")
    gts = data.masks[:, 0].numpy()
    expected = aggregate([frame_metrics(s, g, c, t) for s, g, c, t in zip(mean, gts, data.clip_ids, data.frame_ids)])
    assert report.mae == pytest.approx(expected.mae, abs=1e-6)


def test_evaluate_rejects_mismatched_checkpoint(trained, tmp_path):
    _, final = trained
    ckpt = load_checkpoint(final["joint"])
    ckpt["config"]["bpm_n"] = 1
    torch.save(ckpt, tmp_path / "bad.pt")
    with pytest.raises(CheckpointError):
        evaluate(tmp_path / "bad.pt", "val")


# --- ablation and export ----------------------------------------------------


def test_flop_count_of_a_single_conv():
    conv = torch.nn.Conv2d(3, 4, 3, padding=1)
    model = torch.nn.Sequential(conv)
    assert count_flops(model, torch.zeros(1, 3, 5, 5)) == 2 * 3 * 9 * 4 * 25


def test_sweep_expansion():
    assert len(sweep_variants({"settings": DIRECTION_SETTINGS})) == 6
    assert len(sweep_variants({"rcam_mode": ["full-duplex"], "bpm_mode": ["a", "b"], "bpm_n": [0, 2, 4]})) == 6


def test_structural_ablation_is_monotone_in_n(corpus, tmp_path):
    config = _config(corpus, tmp_path)
    rows = ablate(config, {"bpm_mode": ["full-duplex"], "bpm_n": [0, 2, 4]}, tmp_path, train_variants=False)
    params = [r["params"] for r in rows]
    assert params[0] < params[1] < params[2]
    assert all(r["runtime_s_per_frame"] > 0 for r in rows)
    report = json.loads((tmp_path / "ablation_report.json").read_text())
    assert all(report["monotone_in_n"].values())


def test_export_pr_one_series_per_variant(tmp_path):
    perfect = np.ones((256, 2))
    perfect[255, 1] = 0.0
    g = np.zeros((4, 4), bool)
    g[1:3, 1:3] = True
    rep = aggregate([frame_metrics(g.astype(float), g, "a", 0)])
    np.testing.assert_array_equal(rep.pr_curve[:255, 0], 1.0)
    rep.write_json(tmp_path / "r.json")
    export_pr({"x": rep, "y": tmp_path / "r.json", "z": perfect}, tmp_path / "pr.csv")
    back = read_pr_csv(tmp_path / "pr.csv")
    assert sorted(back) == ["x", "y", "z"]
    np.testing.assert_allclose(back["y"], rep.pr_curve, atol=1e-9)


# --- CLI ----------------------------------------------------------------------


def test_cli_exit_codes(tmp_path, corpus, capsys):
    assert cli.main(["synth", "gen", "--clips", "2", "--out", str(tmp_path / "c"), "--size", "32", "--frames", "2"]) == 0
    assert cli.main(["synth", "gen", "--clips", "2", "--out", str(tmp_path / "c")]) == 2
    (tmp_path / "bad.json").write_text('{"unknown_key": 1}')
    assert cli.main(["train", "--config", str(tmp_path / "bad.json")]) == 2
    blowup = _config(corpus, tmp_path / "nan", loss_reduction="sum", optimizer={"lr": 1e6}, epochs={"spatial_pretrain": 6, "temporal_pretrain": 0, "joint": 0})
    blowup.save(tmp_path / "nan.json")
    assert cli.main(["train", "--config", str(tmp_path / "nan.json")]) == 3
    assert "non-finite" in capsys.readouterr().err
