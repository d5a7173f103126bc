"""Tests for the file formats."""

import struct
import tempfile
import unittest
from os import path

import numpy as np
import torch

import flowsplat
from flowsplat import settings
from flowsplat.errors import FormatError


class TestFlo(unittest.TestCase):
    def setUp(self):
        self.tmp_dir = tempfile.TemporaryDirectory()
        self.flo_filepath = path.join(self.tmp_dir.name, "flow.flo")

    def tearDown(self):
        self.tmp_dir.cleanup()

    def test_roundtrip(self):
        flow = torch.zeros((3, 4, 2), dtype=settings.DTYPE)
        flow[..., 0] = 1.5
        flow[..., 1] = -0.25
        flow[2, 3] = float("nan")
        flowsplat.write_flo(flow, self.flo_filepath)
        # magic, width, height and two f4 per pixel
        self.assertEqual(path.getsize(self.flo_filepath), 12 + 8 * 12)
        field = flowsplat.read_flo(self.flo_filepath)
        self.assertEqual(field.shape, (3, 4))
        self.assertFalse(bool(field.valid[2, 3]))
        self.assertEqual(int(field.valid.sum()), 11)
        self.assertEqual(field.flow[0, 0].tolist(), [1.5, -0.25])

    def test_bad_magic(self):
        with open(self.flo_filepath, "wb") as dst:
            dst.write(np.array([1.0], dtype="<f4").tobytes())
            dst.write(np.array([1, 1], dtype="<i4").tobytes())
            dst.write(np.zeros(2, dtype="<f4").tobytes())
        with self.assertRaises(FormatError):
            flowsplat.read_flo(self.flo_filepath)

    def test_truncated(self):
        flowsplat.write_flo(
            torch.zeros((2, 2, 2), dtype=settings.DTYPE), self.flo_filepath
        )
        with open(self.flo_filepath, "rb") as src:
            raw = src.read()
        with open(self.flo_filepath, "wb") as dst:
            dst.write(raw[:-4])
        with self.assertRaises(FormatError):
            flowsplat.read_flo(self.flo_filepath)


class TestDepthAndPng(unittest.TestCase):
    def test_depth_roundtrip(self):
        depth = torch.rand((5, 7), dtype=settings.DTYPE)
        depth[0, 0] = 0.0
        with tempfile.TemporaryDirectory() as tmp_dir:
            depth_filepath = path.join(tmp_dir, "depth.bin")
            flowsplat.write_depth(depth, depth_filepath)
            # 16-byte header and one 32-bit float per pixel
            self.assertEqual(path.getsize(depth_filepath), 16 + 4 * 5 * 7)
            read = flowsplat.read_depth(depth_filepath)
            self.assertEqual(read.dtype, settings.DTYPE)
            self.assertTrue(torch.equal(read, depth.float().double()))
            with open(depth_filepath, "r+b") as dst:
                dst.write(b"XXXX")
            with self.assertRaises(FormatError):
                flowsplat.read_depth(depth_filepath)

    def test_depth_golden(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            depth_filepath = path.join(tmp_dir, "depth.dpt")
            with open(depth_filepath, "wb") as dst:
                dst.write(settings.DEPTH_MAGIC + struct.pack("<iii", 2, 1, 0))
                dst.write(struct.pack("<ff", 1.5, 2.25))
            read = flowsplat.read_depth(depth_filepath)
            self.assertEqual(read.tolist(), [[1.5, 2.25]])
            # a float64 payload is rejected
            with open(depth_filepath, "wb") as dst:
                dst.write(settings.DEPTH_MAGIC + struct.pack("<iii", 2, 1, 0))
                dst.write(struct.pack("<dd", 1.5, 2.25))
            with self.assertRaises(FormatError):
                flowsplat.read_depth(depth_filepath)

    def test_png_roundtrip(self):
        image = torch.rand((6, 9, 3), dtype=settings.DTYPE)
        with tempfile.TemporaryDirectory() as tmp_dir:
            png_filepath = path.join(tmp_dir, "image.png")
            flowsplat.write_png(image, png_filepath)
            read = flowsplat.read_png(png_filepath)
        self.assertEqual(read.shape, (6, 9, 3))
        self.assertLessEqual(float((read - image).abs().max()), 0.5 / 255 + 1e-12)


class TestCloudPly(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        n = 5
        self.cloud = flowsplat.GaussianCloud.from_parameters(
            rng.normal(size=(n, 3)),
            rotations=rng.normal(size=(n, 4)),
            scales=rng.uniform(0.05, 0.2, size=(n, 3)),
            opacities=rng.uniform(0.1, 0.9, size=n),
            sh=rng.normal(size=(n, 4, 3)),
        )

    def test_roundtrip(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            ply_filepath = path.join(tmp_dir, "cloud.ply")
            flowsplat.save_cloud(self.cloud, ply_filepath)
            loaded = flowsplat.load_cloud(ply_filepath)
        self.assertEqual(loaded.sh_degree, 1)
        for name in ("means", "quats", "log_scales", "opacity_logits", "sh"):
            self.assertTrue(
                torch.equal(getattr(loaded, name), getattr(self.cloud, name)), name
            )

    def test_property_names(self):
        names = flowsplat.cloud_property_names(0)
        self.assertEqual(names[:3], ["x", "y", "z"])
        self.assertEqual(len(names), 14)
        self.assertEqual(len(flowsplat.cloud_property_names(1)), 23)

    def test_not_a_ply(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            ply_filepath = path.join(tmp_dir, "cloud.ply")
            with open(ply_filepath, "w") as dst:
                dst.write("not a ply file\n")
            with self.assertRaises(FormatError):
                flowsplat.load_cloud(ply_filepath)


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.tmp_dir = tempfile.TemporaryDirectory()
        self.ckpt_filepath = path.join(self.tmp_dir.name, "checkpoint.fsck")
        self.cloud = flowsplat.GaussianCloud.from_parameters(
            [[0.0, 0.0, 0.0], [0.5, 0.1, 0.2]], scales=[0.1, 0.2], opacities=[0.3, 0.7]
        )
        self.cloud.init_confidence(1)
        self.cloud.set_dynamic_flags(torch.tensor([False, True]))
        self.cloud.bump_generation()

    def tearDown(self):
        self.tmp_dir.cleanup()

    def test_iterative_states(self):
        moved = self.cloud.with_geometry(self.cloud.means + 1.0)
        flowsplat.save_checkpoint(
            self.ckpt_filepath,
            self.cloud,
            states=[self.cloud, moved],
            config={"paradigm": "iterative"},
        )
        ckpt = flowsplat.load_checkpoint(self.ckpt_filepath)
        self.assertEqual(ckpt.cloud.generation, 1)
        self.assertEqual(ckpt.cloud.dynamic_flags.tolist(), [False, True])
        self.assertTrue(
            torch.equal(ckpt.cloud.log_confidence, self.cloud.log_confidence)
        )
        self.assertIsNone(ckpt.model)
        self.assertEqual(ckpt.config, {"paradigm": "iterative"})
        states = ckpt.frame_states()
        self.assertEqual(len(states), 2)
        self.assertTrue(torch.equal(states[1].means, moved.means))

    def test_deform_model(self):
        model = flowsplat.DeformModel(
            [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]],
            4,
            seed=3,
            field_kwargs={"feature_dim": 2, "resolutions": (4,), "time_resolution": 4},
            width=8,
        )
        model.perturb_heads_(0.1, generator=torch.Generator().manual_seed(0))
        flowsplat.save_checkpoint(self.ckpt_filepath, self.cloud, model=model)
        ckpt = flowsplat.load_checkpoint(self.ckpt_filepath)
        self.assertEqual(ckpt.frame_states(), [])
        for (name, a), (_, b) in zip(
            model.state_dict().items(), ckpt.model.state_dict().items()
        ):
            self.assertTrue(torch.equal(a, b), name)
        torch.testing.assert_close(
            ckpt.model.deform_cloud(ckpt.cloud, 0.5).means,
            model.deform_cloud(self.cloud, 0.5).means,
        )

    def test_corrupted(self):
        flowsplat.save_checkpoint(self.ckpt_filepath, self.cloud)
        with open(self.ckpt_filepath, "rb") as src:
            raw = src.read()

        with open(self.ckpt_filepath, "wb") as dst:
            dst.write(raw[:-8])
        with self.assertRaises(FormatError):
            flowsplat.load_checkpoint(self.ckpt_filepath)

        with open(self.ckpt_filepath, "wb") as dst:
            dst.write(raw[:4] + struct.pack("<I", 99) + raw[8:])
        with self.assertRaises(FormatError):
            flowsplat.load_checkpoint(self.ckpt_filepath)

        with open(self.ckpt_filepath, "wb") as dst:
            dst.write(b"NOPE" + raw[4:])
        with self.assertRaises(FormatError):
            flowsplat.load_checkpoint(self.ckpt_filepath)


class TestByteIdentity(unittest.TestCase):
    def setUp(self):
        self.tmp_dir = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp_dir.cleanup()

    def _read_bytes(self, filepath):
        with open(filepath, "rb") as src:
            return src.read()

    def _assert_rewrite_identical(self, write, read, filename, value):
        first = path.join(self.tmp_dir.name, f"first_{filename}")
        second = path.join(self.tmp_dir.name, f"second_{filename}")
        write(value, first)
        write(read(first), second)
        self.assertEqual(self._read_bytes(first), self._read_bytes(second), filename)

    def test_golden_flo(self):
        flo_filepath = path.join(self.tmp_dir.name, "golden.flo")
        with open(flo_filepath, "wb") as dst:
            dst.write(struct.pack("<fii", settings.FLO_MAGIC, 1, 1))
            dst.write(struct.pack("<ff", 3.0, 4.0))
        self.assertEqual(path.getsize(flo_filepath), 20)
        field = flowsplat.read_flo(flo_filepath)
        self.assertEqual(field.shape, (1, 1))
        self.assertEqual(field.flow[0, 0].tolist(), [3.0, 4.0])

    def test_rewrites(self):
        rng = np.random.default_rng(1)
        flow = torch.as_tensor(rng.normal(size=(4, 6, 2)))
        self._assert_rewrite_identical(
            flowsplat.write_flo, flowsplat.read_flo, "flow.flo", flow
        )
        self._assert_rewrite_identical(
            flowsplat.write_depth,
            flowsplat.read_depth,
            "depth.dpt",
            torch.as_tensor(rng.uniform(1, 3, (4, 6))),
        )
        cloud = flowsplat.GaussianCloud.from_parameters(
            rng.normal(size=(3, 3)),
            scales=rng.uniform(0.05, 0.2, size=3),
            opacities=rng.uniform(0.1, 0.9, size=3),
        )
        self._assert_rewrite_identical(
            flowsplat.save_cloud, flowsplat.load_cloud, "cloud.ply", cloud
        )

    def test_checkpoint_rewrite(self):
        cloud = flowsplat.GaussianCloud.from_parameters(
            [[0.0, 0.0, 0.0], [0.5, 0.1, 0.2]], scales=[0.1, 0.2], opacities=[0.3, 0.7]
        )
        model = flowsplat.DeformModel(
            [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]],
            3,
            field_kwargs={"feature_dim": 2, "resolutions": (4,), "time_resolution": 3},
            width=4,
        )
        first = path.join(self.tmp_dir.name, "first.fsck")
        second = path.join(self.tmp_dir.name, "second.fsck")
        flowsplat.save_checkpoint(first, cloud, model=model, config={"seed": 0})
        ckpt = flowsplat.load_checkpoint(first)
        flowsplat.save_checkpoint(
            second, ckpt.cloud, model=ckpt.model, config=ckpt.config
        )
        self.assertEqual(self._read_bytes(first), self._read_bytes(second))
