"""Tests for the training objectives."""

import math
import tempfile
import unittest
from os import path

import pandas as pd
import pytest
import torch

import flowsplat
from flowsplat import settings
from flowsplat.errors import DomainError, StaleCandidatesError


def _candidates(pixels, indices, weights, generation=0):
    pixels = torch.as_tensor(pixels, dtype=settings.DTYPE)
    weights = torch.as_tensor(weights, dtype=settings.DTYPE)
    return flowsplat.CandidateSet(
        pixels=pixels,
        points=torch.zeros((pixels.shape[0], 3), dtype=settings.DTYPE),
        indices=torch.as_tensor(indices, dtype=torch.int64),
        contributions=weights,
        weights=weights,
        generation=generation,
    )


class TestDynamicMap(unittest.TestCase):
    def test_normalized_magnitude(self):
        flow = torch.zeros((2, 2, 2), dtype=settings.DTYPE)
        flow[0, 0] = torch.tensor([3.0, 4.0])
        flow[1, 1] = torch.tensor([1.0, 0.0])
        dyn = flowsplat.dynamic_map_from_flow(flow)
        torch.testing.assert_close(
            dyn, torch.tensor([[1.0, 0.0], [0.0, 0.2]], dtype=settings.DTYPE)
        )

    def test_static_field(self):
        flow = torch.full((3, 3, 2), 1e-9, dtype=settings.DTYPE)
        self.assertEqual(float(flowsplat.dynamic_map_from_flow(flow).max()), 0.0)


class TestColorLoss(unittest.TestCase):
    def setUp(self):
        self.image = torch.zeros((2, 2, 3), dtype=settings.DTYPE)
        self.rendered = torch.full((2, 2, 3), 0.5, dtype=settings.DTYPE)

    def test_reduces_to_mse(self):
        loss = flowsplat.color_loss_dynamic(self.image, self.rendered, None, 0.0)
        self.assertAlmostEqual(float(loss), 0.25)
        # all-ones attention gives the same value for any weight
        loss = flowsplat.color_loss_dynamic(
            self.image, self.rendered, torch.ones((2, 2), dtype=settings.DTYPE), 0.7
        )
        self.assertAlmostEqual(float(loss), 0.25)

    def test_attention(self):
        dyn = torch.zeros((2, 2), dtype=settings.DTYPE)
        loss = flowsplat.color_loss_dynamic(self.image, self.rendered, dyn, 0.5)
        self.assertAlmostEqual(float(loss), 0.125)

    def test_invalid(self):
        with self.assertRaises(DomainError):
            flowsplat.color_loss_dynamic(self.image, self.rendered, None, 1.5)
        with self.assertRaises(DomainError):
            flowsplat.color_loss_dynamic(self.image, self.rendered[:1])


class TestFlowLosses(unittest.TestCase):
    def setUp(self):
        flow = torch.zeros((1, 2, 2), dtype=settings.DTYPE)
        flow[0, 0] = torch.tensor([1.0, 0.0])
        flow[0, 1] = torch.tensor([0.0, 2.0])
        self.flow = flowsplat.FlowField2D(flow)
        self.cands = _candidates(
            [[0.0, 0.0], [1.0, 0.0]], [[0, 1], [1, 0]], [[1.0, 0.5], [1.0, 1.0]]
        )
        flows = torch.zeros((2, 2, 2), dtype=settings.DTYPE)
        flows[0, 0] = torch.tensor([1.0, 0.0])
        self.predicted = (flows, torch.ones((2, 2), dtype=torch.bool))

    def test_l1(self):
        loss = flowsplat.flow_loss_l1(self.flow, self.cands, self.predicted)
        # residual L1 norms 0, 1, 2, 2
        self.assertAlmostEqual(float(loss), 1.25)

    def test_kl_unit_precision(self):
        loss = flowsplat.flow_loss_kl(
            self.flow,
            self.cands,
            self.predicted,
            torch.ones(2, dtype=settings.DTYPE),
        )
        # 0.5 r^2 w + (-0.5 log w) per pair, r^2 = 0, 1, 4, 4
        expected = (0.0 + (0.25 + 0.5 * math.log(2)) + 2.0 + 2.0) / 4
        self.assertAlmostEqual(float(loss), expected)

    def test_kl_confidence_gradient(self):
        log_conf = torch.zeros(2, dtype=settings.DTYPE, requires_grad=True)
        loss = flowsplat.flow_loss_kl(
            self.flow, self.cands, self.predicted, torch.exp(log_conf)
        )
        loss.backward()
        # large residuals push the confidence down
        self.assertTrue(bool((log_conf.grad > 0).all()))

    def test_invalid_pairs(self):
        mask = torch.zeros((2, 2), dtype=torch.bool)
        predicted = (self.predicted[0], mask)
        self.assertEqual(
            float(flowsplat.flow_loss_l1(self.flow, self.cands, predicted)), 0.0
        )

    def test_render(self):
        rendered = torch.zeros((1, 2, 2), dtype=settings.DTYPE)
        self.assertAlmostEqual(
            float(flowsplat.flow_loss_render(rendered, self.flow)), 1.5
        )
        with self.assertRaises(DomainError):
            flowsplat.flow_loss_render(rendered[:, :1], self.flow)


class TestPhysicalLoss(unittest.TestCase):
    def setUp(self):
        self.means = torch.tensor(
            [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 5.0]],
            dtype=settings.DTYPE,
        )
        self.flags = torch.tensor([True, True, True, False])

    def test_rigid_motion(self):
        moved = self.means + torch.tensor([0.3, -0.2, 0.1], dtype=settings.DTYPE)
        loss = flowsplat.physical_loss(moved, self.means, self.flags)
        self.assertAlmostEqual(float(loss), 0.0)

    def test_nonrigid_motion(self):
        moved = self.means.clone()
        moved[0, 0] += 1.0
        self.assertGreater(
            float(flowsplat.physical_loss(moved, self.means, self.flags)), 0.0
        )
        # static Gaussians are not constrained
        moved = self.means.clone()
        moved[3] += 1.0
        self.assertEqual(
            float(flowsplat.physical_loss(moved, self.means, self.flags)), 0.0
        )

    def test_neighbors(self):
        anchors, nbrs = flowsplat.rigidity_neighbors(self.means, self.flags, 8)
        self.assertEqual(anchors.tolist(), [0, 1, 2])
        self.assertEqual(nbrs.shape, (3, 2))
        for anchor, row in zip(anchors.tolist(), nbrs.tolist()):
            self.assertNotIn(anchor, row)
            self.assertNotIn(3, row)

    def test_stale_states(self):
        with self.assertRaises(StaleCandidatesError):
            flowsplat.physical_loss(self.means[:2], self.means, self.flags)


class TestVelocityAlignment(unittest.TestCase):
    def test_matching_velocity(self):
        cam = flowsplat.PinholeCamera.look_at(
            [0.0, 0.0, -2.0], [0.0, 0.0, 0.0], fx=100.0, width=4, height=4
        )
        flow = torch.zeros((4, 4, 2), dtype=settings.DTYPE)
        flow[..., 0] = 5.0
        cands = _candidates([[2.0, 2.0]], [[0]], [[1.0]])
        means = torch.zeros((1, 3), dtype=settings.DTYPE)
        velocities = torch.tensor([[0.1, 0.0, 0.0]], dtype=settings.DTYPE)
        loss = flowsplat.velocity_alignment(
            cands, flowsplat.FlowField2D(flow), means, velocities, 1.0, cam
        )
        self.assertAlmostEqual(float(loss), 0.0)
        loss = flowsplat.velocity_alignment(
            cands, flowsplat.FlowField2D(flow), means, 2 * velocities, 1.0, cam
        )
        self.assertAlmostEqual(float(loss), 5.0)

    def test_no_candidate(self):
        cam = flowsplat.PinholeCamera.look_at(
            [0.0, 0.0, -2.0], [0.0, 0.0, 0.0], fx=100.0, width=4, height=4
        )
        cands = _candidates(
            torch.zeros((0, 2)), torch.zeros((0, 1)), torch.zeros((0, 1))
        )
        with self.assertLogs(level="WARNING"):
            loss = flowsplat.velocity_alignment(
                cands,
                flowsplat.FlowField2D(torch.zeros((4, 4, 2), dtype=settings.DTYPE)),
                torch.zeros((1, 3), dtype=settings.DTYPE),
                torch.zeros((1, 3), dtype=settings.DTYPE),
                1.0,
                cam,
            )
        self.assertEqual(float(loss), 0.0)


class TestTotalLoss(unittest.TestCase):
    def test_weighting(self):
        parts = {
            "color": torch.tensor(1.0, dtype=settings.DTYPE),
            "flow": torch.tensor(2.0, dtype=settings.DTYPE),
            "physical": torch.tensor(3.0, dtype=settings.DTYPE),
            "velocity": torch.tensor(4.0, dtype=settings.DTYPE),
        }
        iterative = flowsplat.total_loss_iterative(parts, 0.5, 0.1)
        self.assertAlmostEqual(float(iterative.total), 1.0 + 1.5 + 0.2)
        deform = flowsplat.total_loss_deform(parts, 0.1)
        self.assertAlmostEqual(float(deform.total), 1.0 + 0.6)
        self.assertEqual(
            set(deform.as_record()),
            {"loss_color", "loss_flow", "loss_phys", "loss_vel", "lambda_f"},
        )
        with self.assertRaises(DomainError):
            flowsplat.total_loss_deform({"depth": parts["color"]}, 0.1)


class TestSchedule(unittest.TestCase):
    def setUp(self):
        self.state = flowsplat.ScheduleState(
            warmup_end=10, decay_end=110, lambda_max=0.1, lambda_min=0.001
        )

    def test_breakpoints(self):
        self.assertEqual(flowsplat.lambda_schedule(self.state, 0), 0.0)
        self.assertAlmostEqual(flowsplat.lambda_schedule(self.state, 5), 0.05)
        self.assertAlmostEqual(flowsplat.lambda_schedule(self.state, 10), 0.1)
        self.assertAlmostEqual(
            flowsplat.lambda_schedule(self.state, 60), 0.001 + 0.099 * 0.5
        )
        self.assertAlmostEqual(flowsplat.lambda_schedule(self.state, 110), 0.001)
        self.assertAlmostEqual(flowsplat.lambda_schedule(self.state, 500), 0.001)
        with self.assertRaises(DomainError):
            flowsplat.lambda_schedule(self.state, -1)

    def test_monotone_decay(self):
        values = [flowsplat.lambda_schedule(self.state, i) for i in range(10, 111)]
        self.assertTrue(all(a >= b for a, b in zip(values, values[1:])))

    def test_step(self):
        state = flowsplat.ScheduleState.for_iterations(10, lambda_max=1.0)
        values = [state.step() for _ in range(3)]
        self.assertEqual(values[:2], [0.0, 0.5])
        self.assertAlmostEqual(values[2], 1.0)
        self.assertEqual(state.iteration, 3)

    def test_invalid_breakpoints(self):
        with self.assertRaises(DomainError):
            flowsplat.ScheduleState(warmup_end=5, decay_end=5)


def test_training_log():
    log = flowsplat.TrainingLog()
    parts = {"color": torch.tensor(0.5, dtype=settings.DTYPE)}
    log.append(
        0, flowsplat.total_loss_deform(parts, 0.0), gaussian_count=7, wall_ms=1.0
    )
    with tempfile.TemporaryDirectory() as tmp_dir:
        dst_filepath = path.join(tmp_dir, "log.csv")
        log.to_csv(dst_filepath)
        df = pd.read_csv(dst_filepath)
    assert list(df.columns) == flowsplat.LOG_COLUMNS
    assert df["gaussian_count"].tolist() == [7]
    assert df["loss_color"].tolist() == pytest.approx([0.5])
