"""Tests for the motion correspondence."""

import tempfile
import unittest
from os import path

import pandas as pd
import torch

import flowsplat
from flowsplat import settings
from flowsplat.errors import DomainError, StaleCandidatesError


class TestSpatialIndex(unittest.TestCase):
    def test_query(self):
        index = flowsplat.SpatialIndex(
            [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]
        )
        dist, idx = index.query([[0.9, 0.0, 0.0]], 2)
        self.assertEqual(idx.tolist(), [[1, 0]])
        torch.testing.assert_close(
            dist, torch.tensor([[0.1, 0.9]], dtype=settings.DTYPE)
        )
        # more neighbours than centres returns every centre
        _, idx = index.query([[0.0, 0.0, 0.0]], 10)
        self.assertEqual(idx.shape, (1, 3))
        # k = 1 keeps a 2D result
        _, idx = index.query([[3.0, 0.0, 0.0]], 1)
        self.assertEqual(idx.tolist(), [[2]])
        with self.assertRaises(DomainError):
            index.query([[0.0, 0.0, 0.0]], 0)

    def test_empty(self):
        with self.assertRaises(DomainError):
            flowsplat.build_spatial_index(flowsplat.GaussianCloud.empty())


class TestFlowField2D(unittest.TestCase):
    def test_nonfinite_invalidated(self):
        flow = torch.ones((2, 3, 2), dtype=settings.DTYPE)
        flow[0, 1, 0] = float("nan")
        field = flowsplat.FlowField2D(flow)
        self.assertEqual(field.shape, (2, 3))
        self.assertFalse(bool(field.valid[0, 1]))
        self.assertEqual(float(field.magnitude[0, 1]), 0.0)
        self.assertEqual(int(field.valid.sum()), 5)

    def test_bad_shape(self):
        with self.assertRaises(DomainError):
            flowsplat.FlowField2D(torch.zeros((4, 4), dtype=settings.DTYPE))


class TestForegroundSearch(unittest.TestCase):
    def setUp(self):
        self.cam = flowsplat.PinholeCamera.look_at(
            [0.0, 0.0, -2.0], [0.0, 0.0, 0.0], fx=100.0, width=32, height=32
        )
        # a front Gaussian and a distant one behind it
        self.cloud = flowsplat.GaussianCloud.from_parameters(
            [[0.0, 0.0, 0.0], [0.0, 0.0, 3.0]],
            scales=[0.05, 0.05],
            opacities=[0.95, 0.95],
        )
        out = flowsplat.render(self.cloud, self.cam)
        self.depth, self.alpha = out.depth, out.alpha

    def test_candidates(self):
        cands = flowsplat.foreground_search(
            self.depth, self.cam, self.cloud, 2, self.alpha
        )
        self.assertGreater(len(cands), 0)
        self.assertEqual(cands.k, 2)
        # every valid pixel is covered by the front Gaussian
        self.assertTrue(bool((cands.indices[:, 0] == 0).all()))
        torch.testing.assert_close(
            cands.weights.max(dim=-1).values,
            torch.ones(len(cands), dtype=settings.DTYPE),
        )
        self.assertTrue(bool((cands.weights[:, 1] < 1e-6).all()))
        self.assertEqual(cands.selected(2).tolist(), [True, True])

    def test_stride(self):
        full = flowsplat.foreground_search(self.depth, self.cam, self.cloud, 1)
        strided = flowsplat.foreground_search(
            self.depth, self.cam, self.cloud, 1, stride=2
        )
        self.assertLess(len(strided), len(full))
        self.assertTrue(bool((strided.pixels % 2 == 0).all()))

    def test_no_valid_pixel(self):
        cands = flowsplat.foreground_search(
            torch.zeros((32, 32), dtype=settings.DTYPE), self.cam, self.cloud
        )
        self.assertEqual(len(cands), 0)
        self.assertEqual(cands.indices.shape, (0, 2))

    def test_shape_mismatch(self):
        with self.assertRaises(DomainError):
            flowsplat.foreground_search(
                torch.ones((8, 8), dtype=settings.DTYPE), self.cam, self.cloud
            )

    def test_predicted_flows(self):
        cands = flowsplat.foreground_search(self.depth, self.cam, self.cloud, 1)
        shift = torch.tensor([0.1, 0.0, 0.0], dtype=settings.DTYPE)
        flows, mask = flowsplat.predicted_flows(
            cands, self.cloud, self.cloud.means + shift, self.cam, self.cam
        )
        self.assertTrue(bool(mask.all()))
        torch.testing.assert_close(
            flows[:, 0],
            torch.tensor([5.0, 0.0], dtype=settings.DTYPE).expand(len(cands), 2),
        )

    def test_stale_generation(self):
        cands = flowsplat.foreground_search(self.depth, self.cam, self.cloud)
        self.cloud.bump_generation()
        with self.assertRaises(StaleCandidatesError):
            flowsplat.predicted_flows(
                cands, self.cloud, self.cloud, self.cam, self.cam
            )

    def test_lift_dynamic_mask(self):
        cands = flowsplat.foreground_search(
            self.depth, self.cam, self.cloud, 2, self.alpha
        )
        dynamic_map = torch.ones((32, 32), dtype=settings.DTYPE)
        mask = flowsplat.lift_dynamic_mask(
            [cands], [dynamic_map], 0.5, n_gaussians=2
        )
        # the occluded Gaussian never carries enough weight
        self.assertEqual(mask.flags.tolist(), [True, False])
        mask.check(self.cloud)
        static = flowsplat.lift_dynamic_mask(
            [cands], [torch.zeros_like(dynamic_map)], 0.5, n_gaussians=2
        )
        self.assertFalse(bool(static.flags.any()))
        with self.assertRaises(DomainError):
            flowsplat.lift_dynamic_mask([], [], n_gaussians=2)

    def test_candidates_to_csv(self):
        cands = flowsplat.foreground_search(self.depth, self.cam, self.cloud, 2)
        with tempfile.TemporaryDirectory() as tmp_dir:
            dst_filepath = path.join(tmp_dir, "candidates.csv")
            flowsplat.candidates_to_csv(cands, dst_filepath)
            df = pd.read_csv(dst_filepath)
        self.assertEqual(len(df), 2 * len(cands))
        self.assertEqual(
            list(df.columns), ["u", "v", "rank", "gaussian_index", "weight"]
        )
