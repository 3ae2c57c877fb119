"""The full trainable model: weight-volume generator, pose corrections,
deformation branches, scene field, mask threshold, refinement decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .deform import (DeformNets, TemporalVectorTable, build_deform_nets,
                     init_temporal_table)
from .diffcore.params import ParamStore
from .render import (RefinementNet, SceneField, build_refinement_net,
                     build_scene_field, init_mask_head)
from .skeleton import (Pose, SkeletonTopology, WeightVolumeGenerator,
                       init_pose_correction, init_weight_volume_generator)

# modules the delayed-optimization schedule holds back at the start
DELAYED_PREFIXES = {
    "nonrigid": "deform.nonrigid",
    "segmentation": "render.mask",
    "refinement": "render.refine",
}

MASK_PARAM = "render.mask.b"
CORRECTION_PARAM = "skeleton.pose_corr"
TEMPORAL_TABLE = "deform.temporal.table"


@dataclass
class Model:
    store: ParamStore
    topology: SkeletonTopology
    canonical_pose: Pose
    t_c: int
    frame_count: int
    volume_gen: WeightVolumeGenerator
    deform: DeformNets
    table: TemporalVectorTable
    scene: SceneField
    refine: RefinementNet
    cfg: ModelConfig

    @property
    def joint_count(self):
        return self.topology.joint_count


def build_model(topology: SkeletonTopology, canonical_pose: Pose, t_c: int,
                time_indices, bbox_min, bbox_max, cfg: ModelConfig,
                seed: int = 0) -> Model:
    """Construct all parameters in a fixed order from one seed."""
    store = ParamStore()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA21]))
    frame_count = len(time_indices)
    volume_gen = init_weight_volume_generator(
        store, "skeleton.volume", canonical_pose, topology, bbox_min, bbox_max,
        cfg.grid_res, cfg.latent_dim, cfg.decoder_plan(), rng)
    init_pose_correction(store, CORRECTION_PARAM, frame_count,
                         topology.joint_count)
    nets = build_deform_nets(store, "deform", topology.joint_count,
                             cfg.deform_hidden, cfg.pos_freqs, cfg.time_freqs, rng)
    table = init_temporal_table(store, TEMPORAL_TABLE, time_indices, t_c)
    scene = build_scene_field(store, "render.scene", cfg.scene_hidden,
                              cfg.pos_freqs, rng)
    init_mask_head(store, MASK_PARAM)
    refine = build_refinement_net(store, "render.refine", cfg.refine_hidden, rng)
    return Model(store=store, topology=topology, canonical_pose=canonical_pose,
                 t_c=t_c, frame_count=frame_count, volume_gen=volume_gen,
                 deform=nets, table=table, scene=scene, refine=refine, cfg=cfg)


def build_model_for_dataset(dataset, cfg: ModelConfig, seed: int = 0) -> Model:
    return build_model(dataset.topology, dataset.canonical_pose(), dataset.t_c,
                       dataset.time_indices, dataset.bbox_min, dataset.bbox_max,
                       cfg, seed)
