import json

import pytest

import shared_config
from freefix.config import (GuidanceConfig, PipelineConfig, RefineConfig, RunConfig, apply_overrides, dump_config,
                            load_run_config, parse_gamma_levels, seed_list, validate_model)
from freefix.errors import ConfigError


def test_unknown_keys_are_rejected_with_their_location():
    with pytest.raises(ConfigError) as info:
        validate_model(RunConfig, {"pipeline": {"guidance": {"betta": 0.3}}})
    assert info.value.context["locations"] == ["pipeline.guidance.betta"]
    assert info.value.exit_code == 2


def test_out_of_range_values_are_rejected():
    with pytest.raises(ConfigError):
        validate_model(GuidanceConfig, {"beta": 1.5})
    with pytest.raises(ConfigError):
        validate_model(GuidanceConfig, {"gamma_lo": 0.5, "gamma_mid": 0.1})
    with pytest.raises(ConfigError):
        validate_model(RefineConfig, {"frozen_groups": ["sh"]})


def test_overrides_revalidate():
    run = apply_overrides(RunConfig(), {"pipeline.guidance.beta": 0.3, "synthetic.seed": 4, "scene": None})
    assert run.pipeline.guidance.beta == 0.3 and run.synthetic.seed == 4
    assert run.scene is None
    with pytest.raises(ConfigError) as info:
        apply_overrides(RunConfig(), {"pipeline.guidance.eta": 1.0})
    assert info.value.context["locations"] == ["pipeline.guidance.eta"]
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), {"pipeline.refine.steps": -1})


def test_run_config_file_round_trip(tmp_path):
    run = apply_overrides(RunConfig(), {"denoiser": "bridge:/tmp/x", "pipeline.refine.lambda_s": 0.1})
    path = dump_config(run, tmp_path / "run.json")
    assert load_run_config(path) == run
    assert json.loads(path.read_text())["pipeline"]["refine"]["lambda_s"] == 0.1


def test_bad_denoiser_name():
    with pytest.raises(ConfigError):
        validate_model(RunConfig, {"denoiser": "sdxl"})


def test_parse_gamma_levels():
    assert parse_gamma_levels("0.001,0.01,0.1") == {"gamma_lo": 0.001, "gamma_mid": 0.01, "gamma_hi": 0.1}
    for bad in ("0.1,0.2", "a,b,c"):
        with pytest.raises(ConfigError):
            parse_gamma_levels(bad)


def test_seed_list():
    assert seed_list("0-3") == [0, 1, 2, 3]
    assert seed_list("4,1,7") == [4, 1, 7]


def test_learning_rates_scale_positions_only():
    rates = RefineConfig().learning_rates(extent=2.0)
    assert rates["mu"] == pytest.approx(2 * RefineConfig().lr_mu)
    assert rates["rgb"] == RefineConfig().lr_rgb


def test_learning_rate_decay_is_log_linear():
    decaying = RefineConfig(lr_final_ratio=0.01)
    assert decaying.lr_scale(0, 101) == 1.0
    assert decaying.lr_scale(50, 101) == pytest.approx(0.1)
    assert decaying.lr_scale(100, 101) == pytest.approx(0.01)
    assert RefineConfig().lr_scale(7, 10) == 1.0
    with pytest.raises(ConfigError):
        validate_model(RefineConfig, {"lr_final_ratio": 0.0})


def test_pipeline_defaults():
    config = PipelineConfig()
    assert config.guidance.gammas == (0.001, 0.01, 0.1)
    assert config.interleave and config.confidence_guidance
    assert config.confidence.param_mask == ("mu", "eta", "rgb")


def test_environment_validation(monkeypatch, capsys):
    assert shared_config.Config.validate() and shared_config.validate_config()
    monkeypatch.setattr(shared_config.Config, "THREADS", 0)
    assert not shared_config.Config.validate()
    assert "FREEFIX_THREADS" in capsys.readouterr().out
    assert shared_config.Config.to_dict()["threads"] == 0
