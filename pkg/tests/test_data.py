"""Dataset I/O, sparsification, metrics, and the analytic scene oracle."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artinerf.data import (DatasetError, MetricsRow, load_dataset, psnr,
                           save_dataset, sparsify, ssim)
from artinerf.diffcore.tensor import ContractError
from artinerf.synthetic import (AnalyticScene, SyntheticSceneSpec,
                                analytic_render, generate_synthetic_sequence,
                                resolve_scene_spec)


def tiny_spec(**overrides):
    d = resolve_scene_spec("arm3").to_dict()
    d.update({"image_size": 16, "frame_count": 5, "canonical_frame": 2,
              "name": "tiny"})
    d.update(overrides)
    return SyntheticSceneSpec.from_dict(d)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_synthetic_sequence(tiny_spec(), oracle_samples=96)


class TestSyntheticGeneration:
    def test_every_frame_has_a_nonempty_mask(self, tiny_ds):
        assert tiny_ds.frame_count == 5
        for m in tiny_ds.masks:
            assert m.sum() > 0

    def test_zero_density_scene_is_black_and_empty(self):
        spec = tiny_spec()
        for c in spec.capsules:
            c.amplitude = 0.0
        ds = generate_synthetic_sequence(spec, oracle_samples=32)
        for f, m in zip(ds.frames, ds.masks):
            assert f.max() == 0.0
            assert m.sum() == 0

    def test_rendering_is_deterministic(self, tiny_ds):
        scene = tiny_ds.analytic
        cam = scene.camera_at(1)
        a1, al1 = analytic_render(scene, cam, 1, samples=64)
        a2, al2 = analytic_render(scene, cam, 1, samples=64)
        assert a1.tobytes() == a2.tobytes()
        assert al1.tobytes() == al2.tobytes()

    def test_ray_missing_everything_has_zero_alpha(self, tiny_ds):
        scene = tiny_ds.analytic
        cam = scene.camera_at(0)
        _, alpha = analytic_render(scene, cam, 0, samples=64)
        assert alpha[0, 0] == 0.0  # image corner looks past the subject

    def test_opaque_capsule_center_saturates(self, tiny_ds):
        scene = tiny_ds.analytic
        cam = scene.camera_at(0)
        rgb, alpha = analytic_render(scene, cam, 0, samples=256)
        ys, xs = np.nonzero(alpha > 0.98)
        assert len(xs) > 0  # central subject pixels saturate

    def test_oracle_self_convergence(self, tiny_ds):
        # hard-edged densities converge in mean: halving the sample count
        # moves the image by far less than a percent per pixel on average
        scene = tiny_ds.analytic
        cam = scene.camera_at(2)
        lo, alo = analytic_render(scene, cam, 2, samples=256)
        hi, ahi = analytic_render(scene, cam, 2, samples=512)
        assert np.abs(lo - hi).mean() < 1e-2
        assert np.abs(alo - ahi).mean() < 1e-2

    def test_pose_noise_recorded_not_rendered(self):
        clean = generate_synthetic_sequence(tiny_spec(), oracle_samples=32)
        noisy = generate_synthetic_sequence(tiny_spec(pose_noise_sigma=0.05),
                                            oracle_samples=32)
        assert clean.frames[0].tobytes() == noisy.frames[0].tobytes()
        assert not np.array_equal(clean.poses[0].omega, noisy.poses[0].omega)


class TestDatasetIO:
    def test_round_trip_deep_equal(self, tiny_ds, tmp_path):
        save_dataset(tiny_ds, tmp_path)
        back = load_dataset(tmp_path)
        assert back.frame_count == tiny_ds.frame_count
        assert back.t_c == tiny_ds.t_c
        assert back.time_indices == tiny_ds.time_indices
        assert back.topology.parents == tiny_ds.topology.parents
        assert back.topology.bones == tiny_ds.topology.bones
        np.testing.assert_allclose(back.bbox_min, tiny_ds.bbox_min)
        for a, b in zip(back.poses, tiny_ds.poses):
            np.testing.assert_array_equal(a.joints, b.joints)
            np.testing.assert_array_equal(a.omega, b.omega)
        for a, b in zip(back.cameras, tiny_ds.cameras):
            assert a.to_dict() == b.to_dict()
        for a, b in zip(back.masks, tiny_ds.masks):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(back.frames, tiny_ds.frames):
            # frames round-trip through 8-bit quantization
            assert np.abs(a - b).max() <= 0.5 / 255 + 1e-6
        assert back.synth_spec == tiny_ds.synth_spec
        assert back.analytic is not None

    def test_saved_then_loaded_twice_identical(self, tiny_ds, tmp_path):
        save_dataset(tiny_ds, tmp_path / "a")
        ds2 = load_dataset(tmp_path / "a")
        save_dataset(ds2, tmp_path / "b")
        a = (tmp_path / "a" / "manifest.json").read_bytes()
        b = (tmp_path / "b" / "manifest.json").read_bytes()
        for i in range(ds2.frame_count):
            assert (tmp_path / "a" / "frames" / f"{i:05d}.png").read_bytes() == \
                (tmp_path / "b" / "frames" / f"{i:05d}.png").read_bytes()

    def test_frame_count_mismatch_detected(self, tiny_ds, tmp_path):
        save_dataset(tiny_ds, tmp_path)
        (tmp_path / "frames" / "00004.png").unlink()
        with pytest.raises(DatasetError, match="missing"):
            load_dataset(tmp_path)

    def test_unknown_schema_version(self, tiny_ds, tmp_path):
        import json
        save_dataset(tiny_ds, tmp_path)
        man = json.loads((tmp_path / "manifest.json").read_text())
        man["schema_version"] = 99
        (tmp_path / "manifest.json").write_text(json.dumps(man))
        with pytest.raises(DatasetError, match="expected 1, found 99"):
            load_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest"):
            load_dataset(tmp_path)


class TestSparsify:
    def _ds(self, n=100, t_c=50):
        spec = tiny_spec(frame_count=n, canonical_frame=t_c)
        scene = AnalyticScene(spec)
        from artinerf.data import SequenceDataset
        frame = np.zeros((16, 16, 3), np.float32)
        mask = np.ones((16, 16), np.uint8)
        return SequenceDataset(
            frames=[frame] * n, masks=[mask] * n,
            cameras=[scene.camera_at(t) for t in range(n)],
            poses=[scene.pose_at(t) for t in range(n)],
            time_indices=list(range(n)), t_c=t_c, topology=scene.topology,
            bbox_min=np.zeros(3), bbox_max=np.ones(3))

    def test_identity_fraction(self):
        ds = self._ds(10, 5)
        assert sparsify(ds, 1.0) is ds

    def test_ten_percent_keeps_canonical(self):
        ds = self._ds(100, 57)
        out = sparsify(ds, 0.1)
        assert 10 <= out.frame_count <= 11
        assert out.time_indices[out.t_c] == 57
        assert 57 in out.time_indices

    def test_retained_indices_arithmetic_progression(self):
        ds = self._ds(100, 50)
        out = sparsify(ds, 0.1)
        kept = [t for t in out.time_indices if t != 50 or t % 10 == 0]
        diffs = set(np.diff([t for t in out.time_indices if t % 10 == 0]))
        assert diffs == {10}

    def test_time_indices_preserved_not_renumbered(self):
        ds = self._ds(40, 20)
        out = sparsify(ds, 0.25)
        assert out.time_indices == [t for t in range(40) if t % 4 == 0]

    def test_too_few_frames_rejected(self):
        ds = self._ds(3, 0)
        with pytest.raises(ContractError):
            sparsify(ds, 0.01)

    def test_invalid_fraction_rejected(self):
        ds = self._ds(10, 0)
        with pytest.raises(ContractError):
            sparsify(ds, 0.0)


class TestPSNR:
    def test_identical_images_capped(self):
        img = np.random.rand(8, 8, 3)
        assert psnr(img, img) == 99.0

    def test_closed_form_values(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-6)
        b = np.full((10, 10), 0.01)
        assert psnr(a, b) == pytest.approx(40.0, abs=1e-6)

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        a, b = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
        assert psnr(a, b) == psnr(b, a)

    def test_strictly_decreasing_in_noise(self):
        rng = np.random.default_rng(1)
        base = rng.uniform(0.2, 0.8, (16, 16, 3))
        noise = rng.standard_normal((16, 16, 3))
        vals = [psnr(np.clip(base + amp * noise, 0, 1), base)
                for amp in (0.01, 0.05, 0.1)]
        assert vals[0] > vals[1] > vals[2]

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            psnr(np.zeros((2, 2)), np.zeros((3, 3)))


class TestSSIM:
    def test_identical_images(self):
        img = np.random.default_rng(0).uniform(size=(16, 16, 3))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_negative_image_dissimilar(self):
        img = np.random.default_rng(1).uniform(size=(16, 16))
        assert ssim(img, 1.0 - img) < 1.0

    def test_constant_images_equal_value(self):
        img = np.full((16, 16), 0.37)
        assert ssim(img, img.copy()) == pytest.approx(1.0)

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_too_small_image_rejected(self):
        with pytest.raises(ContractError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_metrics_row_fields(self):
        row = MetricsRow(view_id=3, psnr=31.2, ssim=0.97)
        assert -1.0 <= row.ssim <= 1.0
