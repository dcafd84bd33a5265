import copy

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twostage_bev.config import (ARMS, ConfigError, ExperimentConfig, from_ini, load_config, save_config,
                                 to_ini)
from twostage_bev.model import pipeline_config


def test_defaults_carry_reference_constants():
    cfg = load_config(None)
    pipe = pipeline_config(cfg)
    assert pipe.pers_nms_iou == 0.75 and pipe.bev_nms_iou == 0.3
    assert pipe.k1 == 100 and pipe.k2 == 100
    assert cfg.loss_weights() == (1.0, 1.0)
    assert tuple(cfg.eval.thresholds) == (0.5, 1.0, 2.0, 4.0)
    assert cfg.train.grad_clip == 35.0 and cfg.train.warmup_steps > 0


def test_ini_roundtrip(tmp_path):
    cfg = ExperimentConfig()
    cfg.model.z_anchors = (0.0, 1.5)
    cfg.ablation.ida = True
    save_config(cfg, tmp_path / "c.ini")
    back = load_config(tmp_path / "c.ini")
    assert back == cfg
    assert to_ini(back) == to_ini(cfg)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5000), st.floats(1e-6, 1.0), st.sampled_from(ARMS), st.booleans())
def test_roundtrip_property(steps, lr, arm, bi):
    cfg = ExperimentConfig()
    cfg.train.steps, cfg.train.lr = steps, lr
    cfg.ablation.arm, cfg.ablation.bidirectional = arm, bi
    assert from_ini(to_ini(cfg)) == cfg


def test_partial_file_takes_defaults():
    cfg = from_ini("[train]\nsteps = 7\n")
    assert cfg.train.steps == 7
    assert cfg.model == ExperimentConfig().model


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[train]\nsteps_typo = 3\n",
    "[train]\nsteps = many\n",
    "[ablation]\narm = camera_only\n",
    "[data]\nnum_views = 0\n",
    "[model]\ndtype = float16\n",
    "not an ini file",
])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        from_ini(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.ini")


def test_arm_overrides_loss_weights():
    base = ExperimentConfig()
    assert base.with_overrides(arm="perspective_only").loss_weights() == (0.0, 1.0)
    assert base.with_overrides(arm="bev_only").loss_weights() == (1.0, 0.0)
    assert base.with_overrides(arm="bev_and_bev").loss_weights() == (1.0, 0.0)
    assert base.with_overrides(arm="perspective_and_bev").loss_weights() == (1.0, 1.0)


def test_overrides_do_not_mutate_base():
    base = ExperimentConfig()
    snapshot = copy.deepcopy(base)
    cfg = base.with_overrides(arm="bev_only", flags=["ida", "long_interval"], seed=9)
    assert cfg.ablation.ida and cfg.ablation.long_interval and not cfg.ablation.bidirectional
    assert cfg.train.seed == 9
    assert base == snapshot
    with pytest.raises(ConfigError):
        base.with_overrides(flags=["turbo"])
