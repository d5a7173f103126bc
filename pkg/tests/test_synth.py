"""Tests for the synthetic scenes."""

import math
import tempfile
import unittest
from os import path

import numpy as np
import pytest
import torch

import flowsplat
from flowsplat import settings
from flowsplat.errors import ConfigError, DomainError


def _single_blob(**blob_kwargs):
    blob = {
        "center": (0.0, 0.0, 0.0),
        "n_gaussians": 1,
        "spread": 0.0,
        "scale": 0.05,
        "opacity": 0.9,
        **blob_kwargs,
    }
    return flowsplat.SceneSpec(
        blobs=(flowsplat.BlobSpec(**blob),), n_frames=2, fx=100.0
    )


class TestBlobSpec(unittest.TestCase):
    def test_linear(self):
        blob = flowsplat.BlobSpec(motion="linear", velocity=(0.1, 0.0, -0.2))
        np.testing.assert_allclose(blob.offset(3, 5), [0.3, 0.0, -0.6])

    def test_orbit(self):
        blob = flowsplat.BlobSpec(
            center=(1.0, 0.0, 0.0), motion="orbit", angular_speed=math.pi / 2
        )
        np.testing.assert_allclose(blob.offset(1, 3), [-1.0, 0.0, -1.0], atol=1e-12)
        # a full turn comes back to the start
        np.testing.assert_allclose(blob.offset(4, 5), [0.0, 0.0, 0.0], atol=1e-12)

    def test_waypoints(self):
        blob = flowsplat.BlobSpec(
            motion="waypoints", waypoints=((1.0, 0.0, 0.0), (1.0, 2.0, 0.0))
        )
        np.testing.assert_allclose(blob.offset(0, 5), [0.0, 0.0, 0.0])
        np.testing.assert_allclose(blob.offset(1, 5), [0.5, 0.0, 0.0])
        np.testing.assert_allclose(blob.offset(3, 5), [1.0, 1.0, 0.0])
        np.testing.assert_allclose(blob.offset(4, 5), [1.0, 2.0, 0.0])

    def test_invalid(self):
        for kwargs in (
            {"motion": "teleport"},
            {"motion": "waypoints"},
            {"n_gaussians": 0},
            {"opacity": 0.0},
            {"color": (1.5, 0.0, 0.0)},
            {"center": (0.0, 0.0)},
        ):
            with self.assertRaises(ConfigError):
                flowsplat.BlobSpec(**kwargs)


class TestSceneSpec(unittest.TestCase):
    def test_file_roundtrip(self):
        spec = flowsplat.moving_blob(flow_noise=0.5, seed=7)
        with tempfile.TemporaryDirectory() as tmp_dir:
            spec_filepath = path.join(tmp_dir, "spec.cfg")
            spec.to_file(spec_filepath)
            self.assertEqual(flowsplat.SceneSpec.from_file(spec_filepath), spec)

    def test_unknown_section(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            spec_filepath = path.join(tmp_dir, "spec.cfg")
            with open(spec_filepath, "w") as dst:
                dst.write("[scene]\nbackdrop = true\n\n[lights]\nn = 2\n")
            with self.assertRaises(ConfigError):
                flowsplat.SceneSpec.from_file(spec_filepath)
            with open(spec_filepath, "w") as dst:
                dst.write("[scene]\nbackdrop = true\nlights = 2\n")
            with self.assertRaises(ConfigError):
                flowsplat.SceneSpec.from_file(spec_filepath)

    def test_invalid(self):
        blob = flowsplat.BlobSpec()
        with self.assertRaises(ConfigError):
            flowsplat.SceneSpec(blobs=(blob,), n_frames=1)
        with self.assertRaises(ConfigError):
            flowsplat.SceneSpec(blobs=(blob,), rig="dome")
        with self.assertRaises(ConfigError):
            flowsplat.SceneSpec(blobs=(blob,), rig="arc", n_views=2)
        with self.assertRaises(ConfigError):
            flowsplat.SceneSpec()

    def test_has_motion(self):
        self.assertTrue(flowsplat.moving_blob().has_motion)
        self.assertFalse(flowsplat.static_arc().has_motion)

    def test_rigs(self):
        fixed = flowsplat.rig_cameras(flowsplat.translating_blob())
        self.assertEqual((len(fixed), len(fixed[0])), (4, 2))
        self.assertIs(fixed[0][1], fixed[3][1])
        arc = flowsplat.rig_cameras(flowsplat.moving_blob())
        self.assertEqual(len(arc[0]), 1)
        self.assertFalse(torch.equal(arc[0][0].center, arc[-1][0].center))
        for frame in arc:
            self.assertAlmostEqual(float(frame[0].center.norm()), 2.0)


class TestGenerate(unittest.TestCase):
    def test_linear_flow(self):
        # a 0.2 shift at depth 2 with fx = 100 moves the centre by 10 px
        gt = flowsplat.generate(_single_blob(motion="linear", velocity=(0.2, 0, 0)))
        flow = gt.clean_flows[1][0]
        self.assertTrue(bool(flow.valid[16, 16]))
        torch.testing.assert_close(
            flow.flow[16, 16], torch.tensor([10.0, 0.0], dtype=settings.DTYPE)
        )
        self.assertEqual(int(gt.flow_sources[1][0][16, 16]), 0)
        self.assertIsNone(gt.flows[0])
        # far from the Gaussian there is no contributor and no flow
        self.assertFalse(bool(flow.valid[0, 0]))
        self.assertEqual(gt.labels.tolist(), [True])

    def test_orbit_flow_follows_centres(self):
        spec = _single_blob(
            center=(0.2, 0.0, 0.0), motion="orbit", angular_speed=0.3
        )
        gt = flowsplat.generate(spec)
        cam = gt.cameras[0][0]
        u0, v0, _ = flowsplat.project(cam, gt.states[0].means[0])
        u1, v1, _ = flowsplat.project(cam, gt.states[1].means[0])
        flow = gt.clean_flows[1][0]
        pixel = (int(round(float(v0))), int(round(float(u0))))
        self.assertTrue(bool(flow.valid[pixel]))
        torch.testing.assert_close(flow.flow[pixel], torch.stack([u1 - u0, v1 - v0]))

    def test_reproducible(self):
        spec = flowsplat.moving_blob(flow_noise=0.3)
        a, b = flowsplat.generate(spec, 3), flowsplat.generate(spec, 3)
        for t in range(spec.n_frames):
            self.assertTrue(torch.equal(a.images[t][0], b.images[t][0]))
        self.assertTrue(torch.equal(a.flows[2][0].flow, b.flows[2][0].flow))
        c = flowsplat.generate(spec, 4)
        self.assertFalse(torch.equal(a.images[0][0], c.images[0][0]))

    def test_self_consistent(self):
        gt = flowsplat.generate(flowsplat.translating_blob())
        self.assertEqual((gt.n_frames, gt.n_views), (4, 2))
        # re-rendering the stored states reproduces the stored images
        for t in (0, 3):
            for v in range(gt.n_views):
                out = flowsplat.render(gt.states[t], gt.cameras[t][v])
                torch.testing.assert_close(out.color, gt.images[t][v])
        labels = gt.label_frame()
        self.assertEqual(int(labels["dynamic"].sum()), 8)
        self.assertEqual(sorted(labels["blob"].unique()), [0, 1])
        footprint = gt.motion_footprint(1)
        self.assertEqual(footprint.shape, (32, 32))
        self.assertTrue(bool(footprint.any()))
        trajectories = gt.trajectories()
        self.assertEqual(len(trajectories), 4 * 14)

    def test_observations(self):
        gt = flowsplat.generate(flowsplat.translating_blob())
        obs = gt.observations()
        self.assertEqual(len(obs), 4)
        self.assertIsNone(obs[0].flows)
        self.assertEqual(obs[1].n_views, 2)


class TestCorruptFlow(unittest.TestCase):
    def setUp(self):
        self.flow = flowsplat.FlowField2D(
            torch.zeros((100, 100, 2), dtype=settings.DTYPE)
        )

    def test_noise_statistics(self):
        noisy = flowsplat.corrupt_flow(self.flow, 0.5, 0.0, seed=0)
        values = noisy.flow.numpy()
        self.assertAlmostEqual(float(values.std()), 0.5, delta=0.02)
        self.assertAlmostEqual(float(values.mean()), 0.0, delta=0.02)

    def test_outliers(self):
        corrupted = flowsplat.corrupt_flow(self.flow, 0.0, 0.1, seed=0)
        changed = (corrupted.flow != 0).any(-1)
        self.assertEqual(int(changed.sum()), 1000)
        self.assertLessEqual(float(corrupted.flow.abs().max()), 25.0)

    def test_invalid_pixels_untouched(self):
        valid = torch.zeros((100, 100), dtype=torch.bool)
        valid[:50] = True
        flow = flowsplat.FlowField2D(self.flow.flow, valid)
        noisy = flowsplat.corrupt_flow(flow, 1.0, 0.2, seed=1)
        self.assertEqual(float(noisy.flow[50:].abs().max()), 0.0)
        self.assertTrue(torch.equal(noisy.valid, valid))

    def test_invalid_arguments(self):
        with self.assertRaises(DomainError):
            flowsplat.corrupt_flow(self.flow, -1.0, 0.0)
        with self.assertRaises(DomainError):
            flowsplat.corrupt_flow(self.flow, 0.0, 1.5)


class TestDataset(unittest.TestCase):
    def test_roundtrip(self):
        gt = flowsplat.generate(flowsplat.translating_blob(n_frames=2))
        with tempfile.TemporaryDirectory() as tmp_dir:
            flowsplat.write_dataset(gt, tmp_dir)
            self.assertTrue(path.exists(path.join(tmp_dir, "gt", "cloud.ply")))
            dataset = flowsplat.load_dataset(tmp_dir)
        self.assertEqual(dataset.spec.n_frames, 2)
        frames = dataset.observations()
        self.assertIsNone(frames[0].flows)
        self.assertEqual(len(frames[1].flows), 2)
        self.assertLessEqual(
            float((frames[1].images[0] - gt.images[1][0]).abs().max()), 0.5 / 255 + 1e-9
        )
        # depth maps are stored as 32-bit floats
        self.assertTrue(
            torch.equal(frames[1].depths[1], gt.depths[1][1].float().double())
        )
        torch.testing.assert_close(dataset.gt_means(1), gt.states[1].means)
        self.assertEqual(len(dataset.cloud), len(gt.states[0]))


class TestPerturbedCloud(unittest.TestCase):
    def test_perturbation(self):
        gt = flowsplat.generate(flowsplat.translating_blob(n_frames=2))
        cloud = gt.states[0]
        a = flowsplat.perturbed_cloud(cloud, 1)
        b = flowsplat.perturbed_cloud(cloud, 1)
        self.assertTrue(torch.equal(a.means, b.means))
        self.assertEqual(len(a), len(cloud))
        torch.testing.assert_close(
            a.opacities, torch.full((len(cloud),), 0.5, dtype=settings.DTYPE)
        )
        self.assertFalse(torch.equal(a.means, cloud.means))
        kept = flowsplat.perturbed_cloud(cloud, 1, opacity=None)
        torch.testing.assert_close(kept.opacities, cloud.opacities)


@pytest.mark.parametrize("name", sorted(flowsplat.PRESETS))
def test_presets(name):
    spec = flowsplat.PRESETS[name]()
    gt = flowsplat.generate(spec)
    assert gt.n_frames == spec.n_frames
    assert all(image.shape == (32, 32, 3) for image in gt.images[0])
