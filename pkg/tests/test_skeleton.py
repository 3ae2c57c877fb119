"""Kinematics, weight-volume generation, and inverse skinning, checked
against independent brute-force oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artinerf.diffcore import ParamStore, const, no_grad
from artinerf.diffcore.tensor import ContractError
from artinerf.skeleton import (BACKGROUND_FLOOR, MotionWeightVolume, Pose,
                               RigidTransform, SkeletonTopology,
                               all_part_transforms, chain_transform,
                               gaussian_bone_prior, generate_weight_volume,
                               init_weight_volume_generator,
                               joint_world_positions, part_transform,
                               refine_pose, rigid_deform, rodrigues_exp,
                               rodrigues_exp_graph, rodrigues_log,
                               sample_weights, subject_likelihood,
                               voxel_centers)


# -- independent oracles ------------------------------------------------------

def matrix_exp_series(w, terms=20):
    """Truncated matrix-exponential series of the cross-product matrix."""
    K = np.zeros((3, 3))
    K[0, 1], K[0, 2] = -w[2], w[1]
    K[1, 0], K[1, 2] = w[2], -w[0]
    K[2, 0], K[2, 1] = -w[1], w[0]
    out = np.eye(3)
    acc = np.eye(3)
    for n in range(1, terms):
        acc = acc @ K / n
        out = out + acc
    return out


def chain_product_oracle(pose, topology, k):
    """Literal left-to-right 4x4 product over the ancestor chain."""
    Y = np.eye(4)
    for i in topology.ancestor_chain(k):
        H = np.eye(4)
        H[:3, :3] = matrix_exp_series(pose.omega[i].astype(np.float64))
        H[:3, 3] = pose.joints[i]
        Y = Y @ H
    return Y


def two_joint_topology():
    return SkeletonTopology([-1, 0])


# -- rotations ----------------------------------------------------------------

class TestRodrigues:
    def test_zero_rotation_is_identity(self):
        np.testing.assert_array_equal(rodrigues_exp(np.zeros(3)), np.eye(3))

    def test_quarter_turn_about_z(self):
        R = rodrigues_exp([0.0, 0.0, np.pi / 2])
        np.testing.assert_allclose(
            R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-7)

    def test_matches_series_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            w = rng.standard_normal(3)
            w = w / np.linalg.norm(w) * 1.3
            np.testing.assert_allclose(rodrigues_exp(w), matrix_exp_series(w),
                                       atol=1e-6)

    @given(st.floats(1e-7, 10.0), st.integers(0, 10 ** 6))
    @settings(max_examples=60, deadline=None)
    def test_orthonormal_with_unit_determinant(self, mag, seed):
        w = np.random.default_rng(seed).standard_normal(3)
        w = w / np.linalg.norm(w) * mag
        R = rodrigues_exp(w)
        assert np.abs(R @ R.T - np.eye(3)).max() < 1e-5
        assert abs(np.linalg.det(R) - 1.0) < 1e-5

    def test_log_inverts_exp(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            w = rng.standard_normal(3)
            w = w / np.linalg.norm(w) * rng.uniform(1e-4, np.pi - 1e-3)
            np.testing.assert_allclose(rodrigues_log(rodrigues_exp(w)), w, atol=1e-6)

    def test_graph_version_matches_closed_form(self):
        rng = np.random.default_rng(5)
        w = rng.standard_normal((4, 3)).astype(np.float32)
        with no_grad():
            R = rodrigues_exp_graph(const(w))
        np.testing.assert_allclose(R.data, rodrigues_exp(w), atol=1e-6)


class TestChainTransforms:
    def test_single_joint_pure_translation(self):
        topo = SkeletonTopology([-1])
        pose = Pose(np.array([[1.0, 2.0, 3.0]]), np.zeros((1, 3)))
        Y = chain_transform(pose, 0, topo)
        expected = np.eye(4)
        expected[:3, 3] = [1, 2, 3]
        np.testing.assert_allclose(Y, expected, atol=1e-7)

    def test_two_joint_translations_compose_additively(self):
        topo = two_joint_topology()
        pose = Pose(np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]), np.zeros((2, 3)))
        Y = chain_transform(pose, 1, topo)
        np.testing.assert_allclose(Y[:3, 3], [1.0, 2.0, 0.0], atol=1e-7)

    def test_three_joint_chain_matches_product_oracle(self):
        topo = SkeletonTopology([-1, 0, 1])
        rng = np.random.default_rng(2)
        pose = Pose(rng.standard_normal((3, 3)), rng.standard_normal((3, 3)) * 0.8)
        for k in range(3):
            np.testing.assert_allclose(chain_transform(pose, k, topo),
                                       chain_product_oracle(pose, topo, k),
                                       atol=1e-6)

    def test_invalid_joint_rejected(self):
        topo = two_joint_topology()
        pose = Pose(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ContractError):
            chain_transform(pose, 5, topo)


class TestPartTransforms:
    def test_identity_when_poses_match(self):
        topo = SkeletonTopology([-1, 0, 1])
        rng = np.random.default_rng(4)
        pose = Pose(rng.standard_normal((3, 3)), rng.standard_normal((3, 3)) * 0.5)
        for k in range(3):
            m = part_transform(pose, pose, k, topo)
            np.testing.assert_allclose(m.R, np.eye(3), atol=1e-6)
            np.testing.assert_allclose(m.t, 0.0, atol=1e-6)

    def test_pure_translation_hand_case(self):
        # canonical joint at the origin, observed joint at d: map is x -> x - d
        topo = SkeletonTopology([-1])
        pc = Pose(np.zeros((1, 3)), np.zeros((1, 3)))
        po = Pose(np.array([[0.3, -0.2, 0.9]]), np.zeros((1, 3)))
        m = part_transform(pc, po, 0, topo)
        np.testing.assert_allclose(m.R, np.eye(3), atol=1e-7)
        np.testing.assert_allclose(m.t, [-0.3, 0.2, -0.9], atol=1e-6)

    def test_maps_observed_joints_onto_canonical_joints(self):
        topo = SkeletonTopology([-1, 0, 1])
        rng = np.random.default_rng(7)
        pc = Pose(rng.standard_normal((3, 3)), rng.standard_normal((3, 3)) * 0.7)
        po = Pose(pc.joints, rng.standard_normal((3, 3)) * 0.7)
        jc = joint_world_positions(pc, topo)
        jo = joint_world_positions(po, topo)
        for k in range(3):
            m = part_transform(pc, po, k, topo)
            np.testing.assert_allclose(m.apply(jo[k]), jc[k], atol=1e-5)

    def test_rigid_transform_validates_rotation(self):
        with pytest.raises(ContractError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))


class TestPoseCorrection:
    def test_zero_offsets_identity(self):
        topo = two_joint_topology()
        pose = Pose(np.random.rand(2, 3), np.random.rand(2, 3) * 0.5)
        out = refine_pose(pose, np.zeros((3, 6), np.float32), 1)
        np.testing.assert_allclose(out.omega, pose.omega, atol=1e-6)
        np.testing.assert_array_equal(out.joints, pose.joints)

    def test_quarter_turn_offset_on_neutral_joint(self):
        topo = two_joint_topology()
        pose = Pose(np.zeros((2, 3)), np.zeros((2, 3)))
        corr = np.zeros((1, 6), np.float32)
        corr[0, :3] = [0.0, 0.0, np.pi / 2]
        out = refine_pose(pose, corr, 0)
        np.testing.assert_allclose(rodrigues_exp(out.omega[0]),
                                   rodrigues_exp([0, 0, np.pi / 2]), atol=1e-6)

    def test_composition_matches_matrix_product_oracle(self):
        rng = np.random.default_rng(11)
        pose = Pose(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)) * 0.6)
        corr = (rng.standard_normal((1, 6)) * 0.4).astype(np.float32)
        out = refine_pose(pose, corr, 0)
        for k in range(2):
            expected = rodrigues_exp(corr[0, 3 * k:3 * k + 3]) @ \
                rodrigues_exp(pose.omega[k])
            np.testing.assert_allclose(rodrigues_exp(out.omega[k]), expected,
                                       atol=1e-6)

    def test_frame_out_of_range(self):
        pose = Pose(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ContractError):
            refine_pose(pose, np.zeros((3, 6), np.float32), 9)


# -- weight volumes -----------------------------------------------------------

def arm_pose_and_topology():
    topo = SkeletonTopology([-1, 0])
    pose = Pose(np.array([[0.0, 0.0, -0.3], [0.0, 0.0, 0.6]]), np.zeros((2, 3)))
    return topo, pose


def build_generator(res=16, seed=0):
    topo, pose = arm_pose_and_topology()
    store = ParamStore()
    gen = init_weight_volume_generator(
        store, "vol", pose, topo, np.array([-1.0, -1.0, -1.0]),
        np.array([1.0, 1.0, 1.0]), res, 4, (4, 4, 4), np.random.default_rng(seed))
    return store, gen, topo, pose


class TestBonePrior:
    def test_on_axis_voxel_is_log_one(self):
        topo, pose = arm_pose_and_topology()
        prior = gaussian_bone_prior(pose, topo, [-1, -1, -1], [1, 1, 1], 16)
        # the bone for part 1 runs along z from -0.3 to 0.3: pick the nearest
        # voxel center to the segment midpoint and measure its actual distance
        centers = voxel_centers(np.array([-1.0] * 3), np.array([1.0] * 3), 16)
        joints = joint_world_positions(pose, topo)
        seg_len = np.linalg.norm(joints[1] - joints[0])
        i = np.argmin(np.linalg.norm(centers - [0, 0, 0], axis=1))
        d = np.linalg.norm(np.cross(joints[1] - joints[0],
                                    joints[0] - centers[i])) / seg_len
        sigma = 0.1 * seg_len
        expected = -(d * d) / (2 * sigma * sigma)
        assert prior[1].reshape(-1)[i] == pytest.approx(expected, abs=1e-5)

    def test_three_sigma_value(self):
        # a point exactly 3*sigma from the segment has log-weight -4.5
        topo, pose = arm_pose_and_topology()
        joints = joint_world_positions(pose, topo)
        seg_len = np.linalg.norm(joints[1] - joints[0])
        sigma = 0.1 * seg_len
        d = 3 * sigma
        assert -(d * d) / (2 * sigma * sigma) == pytest.approx(-4.5)

    def test_background_floor(self):
        topo, pose = arm_pose_and_topology()
        prior = gaussian_bone_prior(pose, topo, [-1, -1, -1], [1, 1, 1], 8)
        np.testing.assert_allclose(prior[-1], np.log(BACKGROUND_FLOOR))

    def test_monotone_in_segment_distance(self):
        topo, pose = arm_pose_and_topology()
        prior = gaussian_bone_prior(pose, topo, [-1, -1, -1], [1, 1, 1], 12)
        joints = joint_world_positions(pose, topo)
        centers = voxel_centers(np.array([-1.0] * 3), np.array([1.0] * 3), 12)
        a, b = joints[0], joints[1]
        ab = b - a
        tt = np.clip(((centers - a) @ ab) / (ab @ ab), 0, 1)
        d = np.linalg.norm(centers - (a + tt[:, None] * ab), axis=1)
        vals = prior[1].reshape(-1)
        rng = np.random.default_rng(0)
        idx = rng.integers(0, len(d), size=(500, 2))
        for i, j in idx:
            if d[i] < d[j]:
                assert vals[i] >= vals[j]

    def test_degenerate_bbox_rejected(self):
        topo, pose = arm_pose_and_topology()
        with pytest.raises(ContractError):
            gaussian_bone_prior(pose, topo, [0, -1, -1], [0, 1, 1], 8)


class TestWeightVolume:
    def test_zero_decoder_gives_softmax_of_prior(self):
        store, gen, topo, pose = build_generator()
        vol = generate_weight_volume(store, gen)
        logits = gen.prior
        expected = np.exp(logits - logits.max(0)) / \
            np.exp(logits - logits.max(0)).sum(0)
        np.testing.assert_allclose(vol.grid.data, expected, atol=1e-5)

    def test_channels_sum_to_one(self):
        store, gen, *_ = build_generator()
        for p in store:
            p.value = p.value + np.random.default_rng(1) \
                .normal(0, 0.3, p.value.shape).astype(np.float32)
        vol = generate_weight_volume(store, gen)
        np.testing.assert_allclose(vol.grid.data.sum(axis=0), 1.0, atol=1e-6)

    def test_far_voxel_is_background_dominated(self):
        store, gen, *_ = build_generator()
        vol = generate_weight_volume(store, gen)
        w = sample_weights(vol, np.array([0.95, 0.95, 0.95]))[0]
        assert w.argmax() == vol.part_count  # background channel

    def test_bad_resolution_rejected(self):
        topo, pose = arm_pose_and_topology()
        with pytest.raises(ContractError):
            init_weight_volume_generator(
                ParamStore(), "vol", pose, topo, [-1, -1, -1], [1, 1, 1], 12, 4,
                (4, 4, 4), np.random.default_rng(0))


class TestSampling:
    def test_voxel_center_exact(self):
        store, gen, *_ = build_generator()
        vol = generate_weight_volume(store, gen)
        res = gen.res
        centers = voxel_centers(vol.bbox_min, vol.bbox_max, res)
        i = (res // 2, res // 2, res // 2)
        x = centers.reshape(res, res, res, 3)[i]
        expected = vol.grid.data[(slice(None),) + i]
        np.testing.assert_allclose(sample_weights(vol, x)[0], expected, atol=1e-6)

    def test_outside_box_is_pure_background(self):
        store, gen, *_ = build_generator()
        vol = generate_weight_volume(store, gen)
        w = sample_weights(vol, np.array([5.0, 0.0, 0.0]))[0]
        np.testing.assert_array_equal(w[:-1], 0.0)
        assert w[-1] == 1.0

    def test_midpoint_is_arithmetic_mean(self):
        store, gen, *_ = build_generator()
        vol = generate_weight_volume(store, gen)
        res = gen.res
        centers = voxel_centers(vol.bbox_min, vol.bbox_max, res) \
            .reshape(res, res, res, 3)
        a = centers[4, 8, 8]
        b = centers[5, 8, 8]
        mid = (a + b) / 2
        expected = (vol.grid.data[:, 4, 8, 8] + vol.grid.data[:, 5, 8, 8]) / 2
        np.testing.assert_allclose(sample_weights(vol, mid)[0], expected, atol=1e-6)


class TestLikelihoodAndRigidDeform:
    def _setup(self):
        store, gen, topo, pose_c = build_generator()
        vol = generate_weight_volume(store, gen)
        rng = np.random.default_rng(9)
        pose_o = Pose(pose_c.joints, rng.standard_normal((2, 3)) * 0.4)
        return vol, topo, pose_c, pose_o

    def test_far_point_has_zero_likelihood(self):
        vol, topo, pc, po = self._setup()
        L, _ = subject_likelihood(vol, pc, po, np.array([[30.0, 0, 0]]), topo)
        assert L[0] == pytest.approx(0.0, abs=1e-6)

    def test_identity_pose_reduces_to_direct_sampling(self):
        vol, topo, pc, _ = self._setup()
        x = np.array([[0.05, 0.0, 0.1]])
        L, _ = subject_likelihood(vol, pc, pc, x, topo)
        w = sample_weights(vol, x[0])[0]
        assert L[0] == pytest.approx(w[:-1].sum(), abs=1e-6)

    def test_matches_brute_force_oracle(self):
        vol, topo, pc, po = self._setup()
        rng = np.random.default_rng(1)
        x = rng.uniform(-0.6, 0.6, size=(40, 3)).astype(np.float32)
        L, pts = subject_likelihood(vol, pc, po, x, topo)
        # independent per-part loop using the numpy transforms and sampler
        expected = np.zeros(len(x))
        for k in range(topo.joint_count):
            m = part_transform(pc, po, k, topo)
            xk = m.apply(x).astype(np.float32)
            for i in range(len(x)):
                expected[i] += sample_weights(vol, xk[i])[0][k]
        np.testing.assert_allclose(L, expected, atol=1e-6)

    def test_rigid_deform_identity_at_canonical_pose(self):
        vol, topo, pc, _ = self._setup()
        rng = np.random.default_rng(2)
        x = rng.uniform(-0.25, 0.25, size=(60, 3)).astype(np.float32)
        x_r, L, active = rigid_deform(vol, pc, pc, x, topo)
        assert active.any()
        np.testing.assert_allclose(x_r[active], x[active], atol=1e-5)

    def test_rigid_deform_matches_weighted_average_oracle(self):
        vol, topo, pc, po = self._setup()
        rng = np.random.default_rng(3)
        x = rng.uniform(-0.5, 0.5, size=(50, 3)).astype(np.float32)
        x_r, L, active = rigid_deform(vol, pc, po, x, topo)
        R, t = all_part_transforms(pc, po, topo)
        for i in range(len(x)):
            num = np.zeros(3)
            den = 0.0
            for k in range(topo.joint_count):
                xk = R[k] @ x[i] + t[k]
                w = sample_weights(vol, xk)[0][k]
                num += w * xk
                den += w
            if den >= 1e-6:
                assert active[i]
                np.testing.assert_allclose(x_r[i], num / den, atol=1e-5)
            else:
                assert not active[i]
                np.testing.assert_array_equal(x_r[i], x[i])

    def test_inactive_point_passes_through_with_flag(self):
        vol, topo, pc, po = self._setup()
        x = np.array([[25.0, 25.0, 25.0]], np.float32)
        x_r, L, active = rigid_deform(vol, pc, po, x, topo)
        assert not active[0]
        np.testing.assert_array_equal(x_r[0], x[0])

    def test_equivariance_under_quarter_turn(self):
        # rotating both poses and the query by an axis-aligned quarter turn,
        # with the volume's grid rotated the same way, rotates the output
        vol, topo, pc, po = self._setup()
        Rz = rodrigues_exp([0, 0, np.pi / 2])
        rot = lambda p: Pose(p.joints, p.omega, global_rotation=np.array(
            [0, 0, np.pi / 2], np.float32))
        grid_rot = np.rot90(vol.grid.data, k=1, axes=(1, 2))  # x->y quarter turn
        vol_r = MotionWeightVolume(const(np.ascontiguousarray(grid_rot)),
                                   vol.bbox_min, vol.bbox_max)
        rng = np.random.default_rng(8)
        x = rng.uniform(-0.4, 0.4, size=(30, 3)).astype(np.float32)
        x_r, _, act = rigid_deform(vol, pc, po, x, topo)
        x2 = (x @ Rz.T).astype(np.float32)
        x_r2, _, act2 = rigid_deform(vol_r, rot(pc), rot(po), x2, topo)
        np.testing.assert_array_equal(act, act2)
        np.testing.assert_allclose(x_r2[act], (x_r @ Rz.T)[act], atol=1e-4)
