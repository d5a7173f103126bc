"""Tests for the experiments."""

import tempfile
import unittest
from os import path

import numpy as np
import pandas as pd
import pytest

import flowsplat
from flowsplat.errors import DomainError

FAST = {
    "static_iterations": 3,
    "frame_iterations": 3,
    "coarse_iterations": 3,
    "fine_iterations": 3,
    "densify": False,
}


class TestOccluder(unittest.TestCase):
    def test_rendered_flow_is_squeezed(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            result = flowsplat.occluder_experiment(tmp_dir)
            self.assertTrue(path.exists(path.join(tmp_dir, "occluder_flows.png")))
            df = pd.read_csv(path.join(tmp_dir, "occluder_errors.csv"))
        self.assertEqual(len(df), len(result.table))
        self.assertGreater(len(df), 0)
        self.assertGreater(result.rendered_error, 0.5)
        self.assertLess(result.correspondence_error, 0.05)

    def test_needs_one_moving_gaussian(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            with self.assertRaises(DomainError):
                flowsplat.occluder_experiment(
                    tmp_dir, spec=flowsplat.translating_blob()
                )


class TestGradientSuite(unittest.TestCase):
    def test_every_term(self):
        reports = flowsplat.gradient_suite()
        self.assertEqual(list(reports), list(flowsplat.GRADIENT_TERMS))
        for term, report in reports.items():
            self.assertTrue(report.passed, f"{term}\n{report.to_string()}")
        # the plane features of the field are checked with the deformation loss
        segments = reports["deform"].table["segment"]
        self.assertTrue(segments.str.startswith("model.field.").any())

    def test_subset(self):
        reports = flowsplat.gradient_suite(["flow", "physical"])
        self.assertEqual(list(reports), ["flow", "physical"])

    def test_unknown_term(self):
        with self.assertRaises(DomainError):
            flowsplat.gradient_suite(["segmentation"])


class TestAblation(unittest.TestCase):
    def setUp(self):
        self.spec = flowsplat.translating_blob(n_frames=3)

    def test_paired_variants(self):
        config = flowsplat.TrainConfig(paradigm="deform", **FAST)
        table = flowsplat.run_ablation(
            self.spec, config, seeds=(0,), variants=["full", "baseline"]
        )
        self.assertEqual(table["variant"].tolist(), ["full", "baseline"])
        self.assertEqual(
            list(table.columns),
            ["variant", "seed", "motion_epe", "psnr", "gaussian_count"],
        )
        self.assertTrue(np.isfinite(table["motion_epe"]).all())

    def test_custom_and_unknown_variants(self):
        config = flowsplat.TrainConfig(paradigm="iterative", **FAST)
        table = flowsplat.run_ablation(
            self.spec,
            config,
            seeds=(0,),
            variants=["noisy_l1"],
            overrides={"noisy_l1": {"flow_loss": "l1", "k": 2}},
        )
        self.assertEqual(len(table), 1)
        with self.assertRaises(DomainError):
            flowsplat.run_ablation(self.spec, config, variants=["oracle"])

    def test_summary(self):
        table = pd.DataFrame(
            {
                "variant": ["full", "baseline", "full", "baseline"],
                "seed": [0, 0, 1, 1],
                "motion_epe": [0.1, 0.3, 0.2, 0.5],
                "psnr": [30.0, 29.0, 32.0, 31.0],
                "gaussian_count": [10, 12, 10, 14],
            }
        )
        summary = flowsplat.summarize_ablation(table)
        self.assertEqual(summary["variant"].tolist(), ["full", "baseline"])
        np.testing.assert_allclose(summary["motion_epe"], [0.15, 0.4])
        np.testing.assert_allclose(summary["gaussian_count"], [10, 13])


class TestDynamicMapExperiment(unittest.TestCase):
    def test_columns(self):
        config = flowsplat.TrainConfig(paradigm="deform", **FAST)
        table = flowsplat.dynamic_map_experiment(
            flowsplat.translating_blob(n_frames=3), config
        )
        self.assertEqual(
            list(table.columns), ["frame", "view", "raw_mean", "refined_mean", "iou"]
        )
        # two later frames of two views
        self.assertEqual(len(table), 4)
        self.assertTrue(((table["iou"] >= 0) & (table["iou"] <= 1)).all())

    def test_needs_velocity_head(self):
        config = flowsplat.TrainConfig(paradigm="deform", use_injector=False)
        with self.assertRaises(DomainError):
            flowsplat.dynamic_map_experiment(config=config)


########################################################################################
# convergence experiments
@pytest.mark.slow
def test_flow_supervision_lowers_motion_error():
    table = flowsplat.run_ablation(
        flowsplat.moving_blob(),
        flowsplat.TrainConfig(paradigm="deform"),
        seeds=(0, 1, 2),
        variants=["full", "l1", "no_injector", "baseline"],
    )
    by_variant = table.pivot(index="seed", columns="variant")
    epe, psnr = by_variant["motion_epe"], by_variant["psnr"]
    assert (epe["full"] < epe["baseline"]).all()
    assert (psnr["full"] >= psnr["baseline"] - 0.1).all()
    for variant in ("l1", "no_injector"):
        assert (epe["full"] <= epe[variant]).sum() >= 2
        assert (epe[variant] <= epe["baseline"]).sum() >= 2


@pytest.mark.slow
def test_uncertainty_robustness():
    spec = flowsplat.moving_blob(flow_noise=1.0, outlier_fraction=0.1)
    table = flowsplat.run_ablation(
        spec,
        flowsplat.TrainConfig(paradigm="deform"),
        seeds=(0, 1, 2),
        variants=["full", "l1"],
    )
    epe = table.pivot(index="seed", columns="variant")["motion_epe"]
    assert (epe["full"] <= epe["l1"]).sum() >= 2


@pytest.mark.slow
def test_gaussian_growth_restraint():
    table = flowsplat.run_ablation(
        flowsplat.moving_blob(),
        flowsplat.TrainConfig(paradigm="deform"),
        seeds=(0, 1, 2),
        variants=["full", "baseline"],
    )
    counts = table.pivot(index="seed", columns="variant")["gaussian_count"]
    assert (counts["full"] <= counts["baseline"]).all()


@pytest.mark.slow
def test_refined_dynamic_map():
    static = flowsplat.dynamic_map_experiment(flowsplat.static_arc())
    assert static["raw_mean"].mean() > 0.2
    assert static["refined_mean"].mean() < 0.02
    moving = flowsplat.dynamic_map_experiment(flowsplat.moving_blob())
    assert moving["iou"].mean() > 0.7


@pytest.mark.slow
def test_static_scene_keeps_gaussians_still():
    gt = flowsplat.generate(flowsplat.static_arc())
    result = flowsplat.train_iterative(
        gt.observations(),
        gt.states[0],
        flowsplat.TrainConfig(static_iterations=0),
        gt_means=[s.means for s in gt.states],
    )
    assert result.report.motion_epe <= 1e-3
