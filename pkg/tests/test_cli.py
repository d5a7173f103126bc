"""Tests for the command-line interface."""

import tempfile
import unittest
from os import path

import pandas as pd
import pytest

import flowsplat
from flowsplat import cli

TRAIN_FLAGS = [
    "--static-iterations",
    "2",
    "--frame-iterations",
    "2",
    "--coarse-iterations",
    "2",
    "--fine-iterations",
    "2",
    "--no-densify",
]


class TestCLI(unittest.TestCase):
    def setUp(self):
        self.tmp_dir = tempfile.TemporaryDirectory()
        self.data_dir = path.join(self.tmp_dir.name, "data")
        exit_code = cli.main(
            [
                "generate",
                "--preset",
                "translating_blob",
                "--seed",
                "1",
                "--out",
                self.data_dir,
            ]
        )
        self.assertEqual(exit_code, 0)

    def tearDown(self):
        self.tmp_dir.cleanup()

    def _out(self, name):
        return path.join(self.tmp_dir.name, name)

    def test_generate(self):
        dataset = flowsplat.load_dataset(self.data_dir)
        self.assertEqual(dataset.spec.seed, 1)
        self.assertTrue(path.exists(path.join(self.data_dir, "flow", "0001", "00.flo")))

    def test_train_render_eval(self):
        for command in ("train-iter", "train-deform"):
            train_dir = self._out(command)
            exit_code = cli.main(
                [command, "--data", self.data_dir, "--out", train_dir, *TRAIN_FLAGS]
            )
            self.assertEqual(exit_code, 0)
            for filename in (
                cli.CHECKPOINT_NAME,
                "train_log.csv",
                "frame_metrics.csv",
                "gaussian_counts.csv",
                "train.cfg",
            ):
                self.assertTrue(path.exists(path.join(train_dir, filename)), filename)
            config = flowsplat.TrainConfig.from_file(path.join(train_dir, "train.cfg"))
            self.assertEqual(config.static_iterations, 2)
            self.assertFalse(config.densify)

            render_dir = self._out(f"{command}-render")
            checkpoint_filepath = path.join(train_dir, cli.CHECKPOINT_NAME)
            exit_code = cli.main(
                [
                    "render",
                    "--checkpoint",
                    checkpoint_filepath,
                    "--data",
                    self.data_dir,
                    "--out",
                    render_dir,
                ]
            )
            self.assertEqual(exit_code, 0)
            self.assertTrue(path.exists(path.join(render_dir, "trajectories.csv")))

            metrics_filepath = self._out(f"{command}-metrics.csv")
            exit_code = cli.main(
                [
                    "eval",
                    "--pred",
                    render_dir,
                    "--gt",
                    self.data_dir,
                    "--out",
                    metrics_filepath,
                    "--checkpoint",
                    checkpoint_filepath,
                ]
            )
            self.assertEqual(exit_code, 0)
            df = pd.read_csv(metrics_filepath)
            # four frames of two views and the summary row
            self.assertEqual(len(df), 4 * 2 + 1)
            self.assertEqual(df["frame"].iloc[-1], "all")
        self.assertTrue(path.exists(self._out("displacement_histogram.csv")))

    def test_config_file(self):
        config_filepath = self._out("train.cfg")
        flowsplat.TrainConfig(static_iterations=1, frame_iterations=1).to_file(
            config_filepath
        )
        train_dir = self._out("train")
        exit_code = cli.main(
            [
                "train-iter",
                "--data",
                self.data_dir,
                "--out",
                train_dir,
                "--config",
                config_filepath,
                "--no-densify",
            ]
        )
        self.assertEqual(exit_code, 0)
        log = pd.read_csv(path.join(train_dir, "train_log.csv"))
        # one static step and one step for each of the three later frames
        self.assertEqual(len(log), 1 + 3)

    def test_flowviz(self):
        png_filepath = self._out("flows.png")
        exit_code = cli.main(
            [
                "flowviz",
                path.join(self.data_dir, "flow", "0001", "00.flo"),
                path.join(self.data_dir, "flow", "0002", "00.flo"),
                "--out",
                png_filepath,
            ]
        )
        self.assertEqual(exit_code, 0)
        self.assertEqual(flowsplat.read_png(png_filepath).shape, (32, 66, 3))

    def test_errors(self):
        # a directory without renderings
        exit_code = cli.main(
            [
                "eval",
                "--pred",
                self._out("missing"),
                "--gt",
                self.data_dir,
                "--out",
                self._out("metrics.csv"),
            ]
        )
        self.assertEqual(exit_code, 1)
        exit_code = cli.main(
            ["render", "--checkpoint", self._out("none.fsck"), "--data", self.data_dir]
            + ["--out", self._out("render")]
        )
        self.assertEqual(exit_code, 1)


def test_usage_errors():
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["train-iter", "--data", "data", "--out", "out", "--bogus"])
    assert excinfo.value.code == 2
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["train-iter", "--data", "data", "--out", "out", "--flow-loss", "l2"])
    assert excinfo.value.code == 2
    with pytest.raises(SystemExit) as excinfo:
        cli.main([])
    assert excinfo.value.code == 2
