import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from dhgflow.errors import CheckpointError, ConfigurationError, DivergenceError
from dhgflow.pipeline import Checkpoint, RunConfig, load_config, run_stage1, run_stage2, run_stage3
from dhgflow.pipeline.checkpoint import module_hash
from dhgflow.pipeline.config import derive_seed
from dhgflow.pipeline.evaluate import evaluate_model, real_groups
from dhgflow.pipeline.stages import CFM_CKPT, FNO_CKPT, REFINED_CKPT, wsd_factor
from dhgflow.pipeline.suite import (
    ExperimentResult,
    comparison_table,
    metrics_json,
    parse_variant,
    run_experiment_suite,
)
from dhgflow.synthdata import target_train_corpus, write_csv
from dhgflow.pipeline.config import data_config


@pytest.fixture(scope="module")
def fast_module_cfg(tmp_path_factory):
    from conftest import FAST_TOML

    p = tmp_path_factory.mktemp("cfg") / "fast.toml"
    p.write_text(FAST_TOML, encoding="utf-8")
    return load_config(p)


@pytest.fixture(scope="module")
def stage_ckpts(fast_module_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    s1 = run_stage1(fast_module_cfg, 7, out)
    s2 = run_stage2(fast_module_cfg, s1, 7, out)
    s3, diag = run_stage3(fast_module_cfg, s2, 7, out)
    return out, s1, s2, s3, diag


# config ---------------------------------------------------------------------


def test_empty_config_uses_defaults(tmp_path):
    p = tmp_path / "empty.toml"
    p.write_text("", encoding="utf-8")
    cfg = load_config(p)
    assert cfg == RunConfig().validate()
    assert cfg.data.per_domain == 600 and cfg.stage2.grad_clip == 1.0


@pytest.mark.parametrize(
    "text,match",
    [
        ("[stage2]\nlr = 0.0\n", "lr must be positive"),
        ("[stage2]\nlr = -1e-3\n", "lr must be positive"),
        ("[stage2]\nlearning_rate = 1e-3\n", "unknown keys"),
        ("[optimizer]\nlr = 1e-3\n", "unknown config sections"),
        ("[run]\nvariant = \"distill\"\n", "unknown variant"),
        ("[run]\nstage1 = 1\n", "boolean"),
        ("[pretrain]\nlr_schedule = \"cosine\"\n", "lr_schedule"),
        ("[hierarchy]\nbeta = [0.2, 0.5]\n", "one entry per level"),
        ("[synth]\nnoise_std = nan\n", "finite"),
        ("[stage2\n", "fast.toml"),
    ],
)
def test_config_rejections(tmp_path, text, match):
    p = tmp_path / "fast.toml"
    p.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigurationError, match=match):
        load_config(p)


def test_config_int_promoted_to_float(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[stage3]\ngamma_fno = 1\n", encoding="utf-8")
    assert load_config(p).stage3.gamma_fno == 1.0


def test_derive_seed_stays_u64():
    assert derive_seed(2**64 - 1, 5) == 4
    assert 0 <= derive_seed(2**64 - 1, scale=1009) < 2**64


def test_wsd_factor_shape():
    total = 100
    f = [wsd_factor(s, total) for s in range(total)]
    assert f[0] == pytest.approx(0.2) and f[4] == 1.0
    assert all(v == 1.0 for v in f[5:70])
    assert all(a >= b for a, b in zip(f[70:], f[71:]))
    assert f[-1] == pytest.approx(0.01)


# checkpoint -----------------------------------------------------------------


def test_checkpoint_round_trip_bytes(stage_ckpts, tmp_path):
    out = stage_ckpts[0]
    for name in (FNO_CKPT, CFM_CKPT, REFINED_CKPT):
        first = (out / name).read_bytes()
        again = Checkpoint.load(out / name).save(tmp_path / name).read_bytes()
        assert first == again


def test_checkpoint_version_mismatch(stage_ckpts, tmp_path):
    doc = json.loads((stage_ckpts[0] / FNO_CKPT).read_text())
    doc["version"] = 99
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.load(p)
    p.write_text("{not json")
    with pytest.raises(CheckpointError):
        Checkpoint.load(p)
    with pytest.raises(CheckpointError, match="not found"):
        Checkpoint.load(tmp_path / "absent.json")


def test_checkpoint_restores_models(stage_ckpts):
    out, _, _, s3, _ = stage_ckpts
    back = Checkpoint.load(out / REFINED_CKPT)
    assert module_hash(back.field) == module_hash(s3.field)
    assert module_hash(back.fno) == module_hash(s3.fno) and back.fno.frozen
    assert back.hierarchy.diagnostics() == s3.hierarchy.diagnostics()


# stage 1 --------------------------------------------------------------------


def test_stage1_writes_frozen_checkpoint_and_loss(stage_ckpts, fast_module_cfg):
    out, s1 = stage_ckpts[0], stage_ckpts[1]
    assert s1.fno.frozen and s1.stage == 1
    loss = json.loads((out / "pretrain_loss.json").read_text())
    assert len(loss["loss"]) == fast_module_cfg.pretrain.epochs and math.isfinite(loss["final"])
    assert s1.extra["pretrain_domains"] == ["nmc", "lfp"]


def test_stage1_rerun_bit_identical(stage_ckpts, fast_module_cfg, tmp_path):
    run_stage1(fast_module_cfg, 7, tmp_path)
    assert (tmp_path / FNO_CKPT).read_bytes() == (stage_ckpts[0] / FNO_CKPT).read_bytes()


def test_stage1_single_temperature(fast_cfg):
    cfg = replace(fast_cfg, data=replace(fast_cfg.data, pretrain_temps=(24.0,)))
    with pytest.raises(ConfigurationError, match="single temperature"):
        run_stage1(cfg, 7)


def test_stage1_wsd_schedule_runs(fast_cfg):
    const = replace(fast_cfg, pretrain=replace(fast_cfg.pretrain, epochs=10))
    wsd = replace(const, pretrain=replace(const.pretrain, lr_schedule="wsd"))
    a = run_stage1(wsd, 7).extra["pretrain_loss"]
    b = run_stage1(const, 7).extra["pretrain_loss"]
    # one warmup step at full lr, identical until the decay phase starts
    assert a[:8] == b[:8] and a[8:] != b[8:]


def test_stage1_from_csv(fast_cfg, tmp_path):
    from dhgflow.synthdata import pretrain_corpus

    p = tmp_path / "pre.csv"
    write_csv(pretrain_corpus(data_config(fast_cfg), 7), p)
    cfg = replace(fast_cfg, data=replace(fast_cfg.data, pretrain_csv=str(p)))
    ckpt = run_stage1(cfg, 7)
    assert ckpt.extra["pretrain_domains"] == [str(p)]
    assert ckpt.extra["pretrain_loss"] == run_stage1(fast_cfg, 7).extra["pretrain_loss"]


# stage 2 --------------------------------------------------------------------


def test_stage2_leaves_fno_untouched(stage_ckpts):
    _, s1, s2, s3, _ = stage_ckpts
    h = module_hash(s1.fno)
    assert s2.extra["fno_hash"] == h and module_hash(s2.fno) == h
    assert module_hash(s3.fno) == h


def test_stage2_refuses_unfrozen(stage_ckpts, fast_module_cfg):
    s1 = stage_ckpts[1]
    thawed = Checkpoint.from_json(s1.to_json())
    thawed.fno.unfreeze()
    with pytest.raises(ConfigurationError, match="unfrozen"):
        run_stage2(fast_module_cfg, thawed, 7)


def test_stage2_missing_fno_names_artifact(fast_cfg):
    with pytest.raises(ConfigurationError, match="fno.ckpt.json"):
        run_stage2(fast_cfg, None, 7)


def test_stage3_missing_cfm_names_artifact(fast_cfg):
    with pytest.raises(ConfigurationError, match="cfm.ckpt.json"):
        run_stage3(fast_cfg, None, 7)


def test_stage3_rejects_pure_cfm(fast_cfg):
    cfg = replace(fast_cfg, run=replace(fast_cfg.run, variant="pure-cfm"))
    with pytest.raises(ConfigurationError, match="pure-cfm"):
        run_stage3(cfg, run_stage2(cfg, None, 7), 7)


@pytest.mark.parametrize("stage", ["stage2", "stage3"])
def test_divergence_guard(stage_ckpts, fast_module_cfg, tmp_path, stage):
    cfg = replace(fast_module_cfg, **{stage: replace(getattr(fast_module_cfg, stage), lr=1e30, lr_schedule="constant")})
    with pytest.raises(DivergenceError) as exc:
        if stage == "stage2":
            run_stage2(cfg, stage_ckpts[1], 7, tmp_path)
        else:
            run_stage3(cfg, stage_ckpts[2], 7, tmp_path)
    dump = json.loads((tmp_path / f"{stage}.partial.json").read_text())
    assert dump["epoch"] == exc.value.step
    assert len(dump["history"]) == exc.value.step


def test_stage2_guard_quiet_at_paper_lr(fast_cfg):
    # lr 2e-3 at desk scale stays finite: the guard only fires on non-finite losses
    cfg = replace(fast_cfg, run=replace(fast_cfg.run, variant="pure-cfm"), stage2=replace(fast_cfg.stage2, lr=2e-3))
    assert all(math.isfinite(v) for v in run_stage2(cfg, None, 7).extra["cfm_loss"])


def test_stage2_smoothed_loss_decreases(fast_cfg):
    cfg = replace(fast_cfg, data=replace(fast_cfg.data, per_domain=600), stage2=replace(fast_cfg.stage2, epochs=300))
    history = run_stage2(cfg, run_stage1(cfg, 7), 7).extra["cfm_loss"]
    ema = [history[0]]
    for v in history[1:]:
        ema.append(0.98 * ema[-1] + 0.02 * v)
    assert all(b < a for a, b in zip(ema[-50:], ema[-49:]))


def test_stage2_from_csv_matches_synthetic(fast_cfg, tmp_path):
    p = tmp_path / "train.csv"
    write_csv(target_train_corpus(data_config(fast_cfg), 7), p)
    cfg = replace(fast_cfg, run=replace(fast_cfg.run, variant="pure-cfm"))
    via_csv = replace(cfg, data=replace(cfg.data, train_csv=str(p)))
    assert run_stage2(via_csv, None, 7).extra["cfm_loss"] == run_stage2(cfg, None, 7).extra["cfm_loss"]


# stage 3 --------------------------------------------------------------------


def test_stage3_diagnostics_and_clamp(stage_ckpts, fast_module_cfg):
    out, *_, diag = stage_ckpts
    assert json.loads((out / "diagnostics.json").read_text()) == diag
    assert len(diag) == fast_module_cfg.stage3.epochs
    for entry in diag:
        assert set(entry["beta_kj"]) == {"beta_21", "beta_31", "beta_32"}
        assert all(0.0 <= v <= entry["clamp_max"] for v in entry["beta_kj"].values())
        assert len(entry["schedule_beta"]) == 3 and "alpha_gate" in entry


def test_stage3_clamp_override(stage_ckpts, fast_module_cfg):
    _, diag = run_stage3(fast_module_cfg, stage_ckpts[2], 7, clamp_max=0.01)
    for entry in diag:
        assert entry["clamp_max"] == 0.01
        assert all(0.0 <= v <= 0.01 for v in entry["beta_kj"].values())


def test_stage3_lr_reset(stage_ckpts, fast_module_cfg):
    s2, diag = stage_ckpts[2], stage_ckpts[4]
    lr2 = s2.extra["lr"]
    assert lr2[-1] < fast_module_cfg.stage2.lr
    n_batches = 1
    total = fast_module_cfg.stage3.epochs * n_batches
    assert diag[0]["lr"] == pytest.approx(fast_module_cfg.stage3.lr * wsd_factor(0, total))
    assert diag[0]["lr"] > lr2[-1]


def test_stage3_rerun_deterministic(stage_ckpts, fast_module_cfg):
    ckpt, diag = run_stage3(fast_module_cfg, stage_ckpts[2], 7)
    assert ckpt.to_json() == stage_ckpts[3].to_json()
    assert diag == stage_ckpts[4]


# evaluation and suite -------------------------------------------------------


def test_real_groups_layout(fast_module_cfg):
    groups = real_groups(fast_module_cfg, 7)
    assert list(groups) == ["Near", "Low1", "Low2", "High1", "High2", "Train"]
    assert all(x.shape == (fast_module_cfg.data.per_eval_group, 50) for _, x in groups.values())


def test_evaluate_model_report(stage_ckpts, fast_module_cfg):
    s3 = stage_ckpts[3]
    report, generated = evaluate_model(fast_module_cfg, s3.field, s3.fno, 7)
    assert set(report.rmse) == set(generated)
    assert 0 <= report.discrimination_accuracy <= 1
    assert report.discrimination_baseline == pytest.approx(1 / 5)
    again, _ = evaluate_model(fast_module_cfg, s3.field, s3.fno, 7)
    assert again.to_json() == report.to_json()


def test_parse_variant(fast_module_cfg):
    assert parse_variant("freeze", fast_module_cfg).variant == "freeze-3"
    v = parse_variant("freeze-included", fast_module_cfg)
    assert v.include_target and v.method == "freeze"
    assert parse_variant("freeze-clamp0.5", fast_module_cfg).clamp_max == 0.5
    assert parse_variant("freeze-2", fast_module_cfg).variant == "freeze-2"
    assert parse_variant("pure-cfm", fast_module_cfg).variant == "pure-cfm"
    for bad in ("distill", "freeze-wide"):
        with pytest.raises(ConfigurationError):
            parse_variant(bad, fast_module_cfg)


def test_result_variant_closed_set():
    with pytest.raises(ConfigurationError):
        ExperimentResult("x", "distill", 7, "none", None, None)


def test_suite_routing(fast_module_cfg, tmp_path, monkeypatch):
    import dhgflow.pipeline.suite as suite

    calls = []
    for name in ("run_stage1", "run_stage3"):
        real = getattr(suite, name)
        monkeypatch.setattr(suite, name, lambda *a, _r=real, _n=name, **k: calls.append(_n) or _r(*a, **k))
    results = run_experiment_suite(fast_module_cfg, seeds=(7,), variants=("pure-cfm",), out_dir=tmp_path)
    assert calls == []
    assert results[0].pretraining == "none" and results[0].diagnostics == []
    run_experiment_suite(fast_module_cfg, seeds=(7,), variants=("scratch",))
    assert calls == ["run_stage3"]
    assert (tmp_path / "suite_metrics.json").read_text() == metrics_json(results)
    table = (tmp_path / "suite_table.txt").read_text()
    assert table == comparison_table(results) and "pure-cfm" in table


def test_suite_shares_stage1_and_records_clamp(fast_module_cfg, monkeypatch):
    import dhgflow.pipeline.suite as suite

    n = []
    real = suite.run_stage1
    monkeypatch.setattr(suite, "run_stage1", lambda *a, **k: n.append(k.get("include_target")) or real(*a, **k))
    results = run_experiment_suite(fast_module_cfg, seeds=(7,), variants=("freeze", "freeze-clamp0.5", "freeze-included"))
    assert n == [False, True]
    by = {r.label: r for r in results}
    assert by["freeze"].clamp_max == 0.8 and by["freeze-clamp0.5"].clamp_max == 0.5
    assert by["freeze-included"].pretraining == "included" and by["freeze"].pretraining == "excluded"
    assert all(r.status == "ok" and r.metrics is not None for r in results)


def test_cycle_split_reaches_pipeline(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[data]\nper_domain = 60\nper_eval_group = 24\ncycle_split = 120\n", encoding="utf-8")
    cfg = load_config(p)
    assert data_config(cfg).cycle_split == 120
    p.write_text("[data]\ncycle_split = 500\n", encoding="utf-8")
    with pytest.raises(ConfigurationError, match="cycle_split"):
        load_config(p)


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parent.parent / "configs"
    desk = load_config(root / "desk.toml")
    assert replace(desk, run=replace(desk.run, output_dir="runs")) == RunConfig().validate()
    assert load_config(root / "smoke.toml").stage2.epochs == 4
