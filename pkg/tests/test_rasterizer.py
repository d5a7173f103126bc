"""Tests for the rasterizer."""

import unittest

import numpy as np
import torch

import flowsplat
from flowsplat import settings
from flowsplat.errors import BehindCameraError, DomainError


def _camera(size=32):
    return flowsplat.PinholeCamera.look_at(
        [0.0, 0.0, -2.0], [0.0, 0.0, 0.0], fx=100.0, width=size, height=size
    )


class TestRender(unittest.TestCase):
    def setUp(self):
        self.cam = _camera()
        self.cloud = flowsplat.GaussianCloud.from_parameters(
            [[0.0, 0.0, 0.0]],
            scales=[0.05],
            opacities=[0.9],
            colors=[[1.0, 1.0, 1.0]],
        )

    def test_single_gaussian(self):
        out = flowsplat.render(self.cloud, self.cam)
        self.assertEqual(out.color.shape, (32, 32, 3))
        self.assertAlmostEqual(float(out.alpha[16, 16]), 0.9)
        torch.testing.assert_close(
            out.color[16, 16], torch.full((3,), 0.9, dtype=settings.DTYPE)
        )
        self.assertAlmostEqual(float(out.depth[16, 16]), 2.0)
        # beyond the extent cutoff the pixel is empty and gets the depth sentinel
        self.assertEqual(float(out.alpha[0, 0]), 0.0)
        self.assertEqual(float(out.depth[0, 0]), 0.0)
        # symmetric footprint around the projected centre
        self.assertAlmostEqual(float(out.alpha[16, 18]), float(out.alpha[16, 14]))

    def test_background(self):
        out = flowsplat.render(
            flowsplat.GaussianCloud.empty(), self.cam, background=(0.2, 0.4, 0.6)
        )
        torch.testing.assert_close(
            out.color[5, 7], torch.tensor([0.2, 0.4, 0.6], dtype=settings.DTYPE)
        )
        self.assertEqual(float(out.alpha.max()), 0.0)

    def test_front_to_back(self):
        means = [[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]
        colors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
        front_first = flowsplat.GaussianCloud.from_parameters(
            means, scales=[0.05, 0.05], opacities=[0.95, 0.95], colors=colors
        )
        back_first = flowsplat.GaussianCloud.from_parameters(
            means[::-1],
            scales=[0.05, 0.05],
            opacities=[0.95, 0.95],
            colors=colors[::-1],
        )
        out = flowsplat.render(front_first, self.cam)
        center = out.color[16, 16]
        self.assertGreater(float(center[0]), 10 * float(center[1]))
        # compositing does not depend on the storage order
        torch.testing.assert_close(
            flowsplat.render(back_first, self.cam).color, out.color
        )
        contributors = out.contributors
        self.assertEqual(contributors.index[16, 16, :2].tolist(), [0, 1])
        self.assertGreater(
            float(contributors.weight[16, 16, 0]), float(contributors.weight[16, 16, 1])
        )

    def test_gradients(self):
        self.cloud.requires_grad_()
        out = flowsplat.render(self.cloud, self.cam)
        out.color.sum().backward()
        for tensor in (self.cloud.means, self.cloud.log_scales, self.cloud.sh):
            self.assertIsNotNone(tensor.grad)
            self.assertTrue(bool(torch.isfinite(tensor.grad).all()))

    def test_behind_camera(self):
        behind = flowsplat.GaussianCloud.from_parameters(
            [[0.0, 0.0, -3.0]], scales=[0.05], opacities=[0.9]
        )
        out = flowsplat.render(behind, self.cam)
        self.assertEqual(float(out.alpha.max()), 0.0)
        with self.assertRaises(BehindCameraError):
            flowsplat.project_gaussian(self.cam, behind[0])


class TestProjection(unittest.TestCase):
    def test_isotropic_footprint(self):
        cam = _camera()
        cloud = flowsplat.GaussianCloud.from_parameters(
            [[0.0, 0.0, 0.0]], scales=[0.05], opacities=[0.9]
        )
        proj = flowsplat.project_gaussian(cam, cloud[0])
        expected = (100.0 * 0.05 / 2.0) ** 2 + settings.COV2D_DILATION
        torch.testing.assert_close(
            proj.cov2d[0],
            expected * torch.eye(2, dtype=settings.DTYPE),
            atol=1e-12,
            rtol=0,
        )
        torch.testing.assert_close(
            proj.mean2d[0], torch.tensor([16.0, 16.0], dtype=settings.DTYPE)
        )


class TestRenderFeatures(unittest.TestCase):
    def setUp(self):
        self.cam = _camera()
        self.cloud = flowsplat.GaussianCloud.from_parameters(
            [[0.0, 0.0, 0.0]], scales=[0.05], opacities=[0.9]
        )

    def test_render_flow(self):
        moved = self.cloud.means + torch.tensor([0.1, 0.0, 0.0], dtype=settings.DTYPE)
        flow = flowsplat.render_flow(self.cloud, self.cam, self.cam, moved)
        self.assertEqual(flow.shape, (32, 32, 2))
        # a 0.1 shift at depth 2 moves the centre by 5 px, weighted by alpha 0.9
        torch.testing.assert_close(
            flow[16, 16], torch.tensor([4.5, 0.0], dtype=settings.DTYPE)
        )

    def test_velocity_map(self):
        speed = flowsplat.render_velocity_map(self.cloud, self.cam, [2.0])
        self.assertAlmostEqual(float(speed[16, 16]), 1.8)
        with self.assertRaises(DomainError):
            flowsplat.render_velocity_map(self.cloud, self.cam, [1.0, 2.0])

    def test_depth_mode_floor(self):
        out = flowsplat.render(self.cloud, self.cam)
        depth = flowsplat.render_depth_mode(out, alpha_floor=0.95)
        self.assertEqual(float(depth.max()), 0.0)


def _composite_pixelwise(cloud, cam, colors, background, extent_sigmas):
    """Straightforward per-pixel front-to-back compositing."""
    proj = flowsplat.project_gaussians(cam, cloud.means, cloud.quats, cloud.scales)
    mean2d = proj.mean2d.detach().numpy()
    conics = np.linalg.inv(proj.cov2d.detach().numpy())
    opacities = cloud.opacities.detach().numpy()
    valid = proj.valid.numpy()
    depths = proj.depth.detach().numpy()
    order = [i for i in np.argsort(depths, kind="stable") if valid[i]]
    image = np.zeros((cam.height, cam.width, 3))
    for v in range(cam.height):
        for u in range(cam.width):
            trans, color = 1.0, np.zeros(3)
            for i in order:
                d = np.array([u, v]) - mean2d[i]
                maha2 = d @ conics[i] @ d
                if extent_sigmas is not None and maha2 > extent_sigmas**2:
                    continue
                alpha = min(settings.ALPHA_MAX, opacities[i] * np.exp(-0.5 * maha2))
                if trans * (1 - alpha) < settings.TRANSMITTANCE_MIN:
                    break
                color += trans * alpha * colors[i]
                trans *= 1 - alpha
            image[v, u] = color + trans * background
    return image


class TestCompositingOracle(unittest.TestCase):
    def test_random_scenes(self):
        cam = flowsplat.PinholeCamera.look_at(
            [0.0, 0.0, -2.0], [0.0, 0.0, 0.0], fx=20.0, width=16, height=16
        )
        rng = np.random.default_rng(0)
        for scene in range(6):
            n = 12
            means = np.column_stack(
                [rng.uniform(-0.4, 0.4, (n, 2)), rng.uniform(-0.3, 0.3, n)]
            )
            colors = rng.uniform(0, 1, (n, 3))
            background = rng.uniform(0, 1, 3)
            cloud = flowsplat.GaussianCloud.from_parameters(
                means,
                rotations=rng.normal(size=(n, 4)),
                scales=rng.uniform(0.03, 0.12, (n, 3)),
                opacities=rng.uniform(0.2, 0.95, n),
                colors=colors,
            )
            # with and without footprint truncation
            for extent_sigmas in (settings.EXTENT_SIGMAS, None):
                out = flowsplat.render(
                    cloud, cam, background, extent_sigmas=extent_sigmas
                )
                expected = _composite_pixelwise(
                    cloud, cam, colors, background, extent_sigmas
                )
                np.testing.assert_allclose(
                    out.color.detach().numpy(),
                    expected,
                    atol=1e-5,
                    err_msg=f"scene {scene}, extent {extent_sigmas}",
                )
