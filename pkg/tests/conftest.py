import numpy as np
import pytest

from artinerf.synthetic import SyntheticSceneSpec, generate_synthetic_sequence, \
    resolve_scene_spec


def small_arm_spec(**overrides):
    d = resolve_scene_spec("arm3").to_dict()
    d.update({"image_size": 16, "frame_count": 6, "canonical_frame": 3,
              "name": "arm3-small"})
    d.update(overrides)
    return SyntheticSceneSpec.from_dict(d)


@pytest.fixture(scope="session")
def small_ds():
    return generate_synthetic_sequence(small_arm_spec(), oracle_samples=96)


def small_run_config():
    from artinerf.config import RunConfig
    cfg = RunConfig()
    cfg.model.pos_freqs = 3
    cfg.model.time_freqs = 2
    cfg.model.deform_hidden = 12
    cfg.model.scene_hidden = 16
    cfg.model.grid_res = 16
    cfg.model.latent_dim = 4
    cfg.model.decoder_channels = "6,6,4"
    cfg.model.refine_hidden = 4
    cfg.render.samples = 12
    cfg.render.patch = 4
    cfg.render.patches_per_step = 2
    cfg.loss.tcl_half_window = 1
    cfg.loss.ccl_samples = 64
    cfg.train.iters = 12
    cfg.train.checkpoint_interval = 6
    cfg.train.eval_interval = 0
    cfg.train.holdout = "1"
    cfg.train.seed = 0
    return cfg
