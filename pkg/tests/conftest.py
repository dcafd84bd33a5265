import pytest

from twostage_bev.config import DataConfig, ExperimentConfig, ModelConfig, TrainConfig


def tiny_config(arm="perspective_and_bev", steps=3, num_history=0, views=2, **train_kw) -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.data = DataConfig(num_sequences=1, frames_per_sequence=3, num_views=views, eval_sequences=1, seed=4)
    cfg.model = ModelConfig(backbone_width=8, blocks_per_stage=1, channels=16, bev_h=10, bev_w=10,
                            z_anchors=(0.0, 1.5), encoder_layers=1, encoder_points=2, decoder_layers=2,
                            decoder_points=2, num_queries=8, num_history=num_history, fusion_blocks=1)
    cfg.train = TrainConfig(steps=steps, warmup_steps=2, checkpoint_every=2, **train_kw)
    cfg.ablation.arm = arm
    return cfg.validate()


@pytest.fixture
def tiny():
    return tiny_config
