"""Image, flow and motion metrics."""

import logging as lg
import math
import os
from collections.abc import Sequence
from dataclasses import dataclass
from os import path

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from flowsplat import formats, settings, utils
from flowsplat.correspondence import FlowField2D, SpatialIndex
from flowsplat.errors import DomainError

__all__ = [
    "METRIC_COLUMNS",
    "MetricReport",
    "evaluate",
    "flow_epe",
    "mask_iou",
    "psnr",
    "ssim",
    "trajectory_epe",
]

METRIC_COLUMNS = ["frame", "view", "psnr", "ssim", "lpips"]


def _pair(a: utils.ArrayLike, b: utils.ArrayLike) -> tuple[torch.Tensor, torch.Tensor]:
    a, b = utils.as_tensor(a).detach(), utils.as_tensor(b).detach()
    if a.shape != b.shape:
        raise DomainError(f"Shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}.")
    return a, b


def psnr(a: utils.ArrayLike, b: utils.ArrayLike) -> float:
    """Peak signal-to-noise ratio of images in [0, 1], capped at `settings.PSNR_MAX`."""
    a, b = _pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return settings.PSNR_MAX
    return min(10 * math.log10(1 / mse), settings.PSNR_MAX)


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    x = torch.arange(size, dtype=settings.DTYPE) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(
    a: utils.ArrayLike,
    b: utils.ArrayLike,
    *,
    window: int | None = None,
    sigma: float | None = None,
) -> float:
    """Structural similarity of images in [0, 1].

    Computed per channel over the valid positions of a Gaussian window and
    averaged, with K1 = 0.01, K2 = 0.03 and a dynamic range of 1.

    Parameters
    ----------
    a, b : array-like of shape (H, W) or (H, W, C)
    window : int, optional
        Window size. Defaults to `settings.SSIM_WINDOW`.
    sigma : float, optional
        Window standard deviation. Defaults to `settings.SSIM_SIGMA`.
    """
    if window is None:
        window = settings.SSIM_WINDOW
    if sigma is None:
        sigma = settings.SSIM_SIGMA
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a.unsqueeze(-1), b.unsqueeze(-1)
    h, w, _ = a.shape
    if h < window or w < window:
        raise DomainError(
            f"Image of size {h}x{w} is smaller than the {window}px window."
        )
    kernel = _gaussian_window(window, sigma)[None, None]
    # channels as the batch dimension
    a = a.permute(2, 0, 1).unsqueeze(1)
    b = b.permute(2, 0, 1).unsqueeze(1)
    mu_a, mu_b = F.conv2d(a, kernel), F.conv2d(b, kernel)
    var_a = F.conv2d(a * a, kernel) - mu_a**2
    var_b = F.conv2d(b * b, kernel) - mu_b**2
    cov = F.conv2d(a * b, kernel) - mu_a * mu_b
    c1, c2 = settings.SSIM_K1**2, settings.SSIM_K2**2
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(ssim_map.mean())


def flow_epe(
    pred: FlowField2D | torch.Tensor, gt: FlowField2D | torch.Tensor
) -> float:
    """Mean end-point error over the pixels valid in both fields.

    Returns NaN (with a warning) when no pixel is valid.
    """
    if not isinstance(pred, FlowField2D):
        pred = FlowField2D(pred)
    if not isinstance(gt, FlowField2D):
        gt = FlowField2D(gt)
    if pred.shape != gt.shape:
        raise DomainError(f"Flow shapes differ: {pred.shape} vs {gt.shape}.")
    valid = pred.valid & gt.valid
    if not bool(valid.any()):
        lg.warning("No pixel is valid in both flow fields.")
        return float("nan")
    err = (pred.flow.detach() - gt.flow.detach()).norm(dim=-1)
    return float(err[valid].mean())


def mask_iou(pred: utils.ArrayLike, gt: utils.ArrayLike) -> float:
    """Intersection over union of two boolean masks, 1 when both are empty."""
    pred = torch.as_tensor(np.asarray(pred)).bool()
    gt = torch.as_tensor(np.asarray(gt)).bool()
    if pred.shape != gt.shape:
        raise DomainError(
            f"Mask shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}."
        )
    union = int((pred | gt).sum())
    if union == 0:
        return 1.0
    return int((pred & gt).sum()) / union


def trajectory_epe(
    pred_means: Sequence[torch.Tensor],
    gt_means: Sequence[torch.Tensor],
    *,
    gt_mask: torch.Tensor | None = None,
) -> float:
    """Mean end-point error of Gaussian displacements.

    Every predicted Gaussian is matched to its nearest ground-truth Gaussian at
    frame 0, and its displacement from frame 0 is compared with the displacement
    of its match at every later frame.

    Parameters
    ----------
    pred_means, gt_means : sequence of torch.Tensor of shape (N, 3) and (M, 3)
        Centres per frame.
    gt_mask : torch.Tensor of shape (M,), optional
        Only predicted Gaussians matched to selected ground-truth Gaussians count,
        e.g. the moving ones.
    """
    if len(pred_means) != len(gt_means):
        raise DomainError(
            f"Got {len(pred_means)} predicted and {len(gt_means)} ground-truth frames."
        )
    if len(pred_means) < 2:
        return 0.0
    pred0 = utils.as_tensor(pred_means[0]).detach()
    gt0 = utils.as_tensor(gt_means[0]).detach()
    _, match = SpatialIndex(gt0).query(pred0, 1)
    match = match[:, 0]
    keep = torch.ones(len(match), dtype=torch.bool)
    if gt_mask is not None:
        keep = torch.as_tensor(gt_mask).bool()[match]
    if not bool(keep.any()):
        lg.warning("No predicted Gaussian is matched to a selected one.")
        return float("nan")
    errors = []
    for pred_t, gt_t in zip(pred_means[1:], gt_means[1:]):
        d_pred = utils.as_tensor(pred_t).detach() - pred0
        d_gt = utils.as_tensor(gt_t).detach()[match] - gt0[match]
        errors.append((d_pred - d_gt).norm(dim=-1)[keep])
    return float(torch.cat(errors).mean())


@dataclass
class MetricReport:
    """Reconstruction metrics of a set of renderings.

    Attributes
    ----------
    frame_metrics : pandas.DataFrame
        One row per (frame, view) with the columns of `METRIC_COLUMNS`; LPIPS is
        reported as "n/a".
    flow_epe : float, optional
        Mean flow end-point error in pixels.
    motion_epe : float, optional
        Trajectory end-point error in scene units.
    mask_iou : float, optional
        IoU of a predicted motion mask with the ground-truth motion footprint.
    """

    frame_metrics: pd.DataFrame
    flow_epe: float | None = None
    motion_epe: float | None = None
    mask_iou: float | None = None

    @property
    def mean_psnr(self) -> float:
        """Mean PSNR over frames and views."""
        return float(self.frame_metrics["psnr"].mean())

    @property
    def mean_ssim(self) -> float:
        """Mean SSIM over frames and views."""
        return float(self.frame_metrics["ssim"].mean())

    def to_frame(self) -> pd.DataFrame:
        """Per-view rows followed by a summary row with frame and view "all"."""
        summary = {
            "frame": "all",
            "view": "all",
            "psnr": self.mean_psnr,
            "ssim": self.mean_ssim,
            "lpips": "n/a",
            "flow_epe": self.flow_epe,
            "motion_epe": self.motion_epe,
            "mask_iou": self.mask_iou,
        }
        return pd.concat(
            [self.frame_metrics, pd.DataFrame([summary])], ignore_index=True
        )

    def to_csv(self, dst_filepath: utils.PathType) -> None:
        """Write the report atomically."""
        with utils.atomic_path(dst_filepath) as tmp_filepath:
            self.to_frame().to_csv(tmp_filepath, index=False)

    @classmethod
    def from_images(
        cls,
        pred_images: Sequence[Sequence[torch.Tensor]],
        gt_images: Sequence[Sequence[torch.Tensor]],
        **kwargs,
    ) -> "MetricReport":
        """Report over images indexed as [frame][view]."""
        rows = []
        for t, (pred_views, gt_views) in enumerate(zip(pred_images, gt_images)):
            for v, (pred, gt) in enumerate(zip(pred_views, gt_views)):
                rows.append(
                    {
                        "frame": t,
                        "view": v,
                        "psnr": psnr(pred, gt),
                        "ssim": ssim(pred, gt),
                        "lpips": "n/a",
                    }
                )
        return cls(frame_metrics=pd.DataFrame(rows, columns=METRIC_COLUMNS), **kwargs)


def _frame_dirs(root: str) -> list[str]:
    frames_dir = path.join(root, "frames")
    if not path.isdir(frames_dir):
        raise DomainError(f"{root} has no `frames` directory.")
    return sorted(d for d in os.listdir(frames_dir) if d.isdigit())


def evaluate(pred_dir: utils.PathType, gt_dir: utils.PathType) -> MetricReport:
    """Compare renderings against a dataset directory.

    Both directories follow the dataset layout. Images are read from
    `frames/<frame>/<view>.png`; flows from `flow/<frame>/<view>.flo` and
    centres from `trajectories.csv` (`gt/trajectories.csv` for the dataset) are
    compared when the prediction provides them.
    """
    pred_dir, gt_dir = str(pred_dir), str(gt_dir)
    pred_images, gt_images, epes = [], [], []
    for frame in _frame_dirs(gt_dir):
        views = sorted(
            f
            for f in os.listdir(path.join(gt_dir, "frames", frame))
            if f.endswith(".png")
        )
        pred_views, gt_views = [], []
        for view in views:
            pred_filepath = path.join(pred_dir, "frames", frame, view)
            if not path.exists(pred_filepath):
                raise DomainError(f"Missing rendering {pred_filepath}.")
            pred_views.append(formats.read_png(pred_filepath))
            gt_views.append(formats.read_png(path.join(gt_dir, "frames", frame, view)))
            flo = view.replace(".png", ".flo")
            pred_flo = path.join(pred_dir, "flow", frame, flo)
            gt_flo = path.join(gt_dir, "flow", frame, flo)
            if path.exists(pred_flo) and path.exists(gt_flo):
                epes.append(
                    flow_epe(formats.read_flo(pred_flo), formats.read_flo(gt_flo))
                )
        pred_images.append(pred_views)
        gt_images.append(gt_views)

    motion_epe = None
    pred_traj = path.join(pred_dir, "trajectories.csv")
    if path.exists(pred_traj):
        pred = pd.read_csv(pred_traj)
        gt = pd.read_csv(path.join(gt_dir, "gt", "trajectories.csv"))
        labels = pd.read_csv(path.join(gt_dir, "gt", "labels.csv"))

        def _means(df, t):
            rows = df[df["frame"] == t].sort_values("gaussian")
            return torch.as_tensor(rows[["x", "y", "z"]].to_numpy(dtype="float64"))

        frames = sorted(set(gt["frame"]))
        labels = labels.sort_values("gaussian")
        gt_mask = torch.as_tensor(labels["dynamic"].to_numpy(dtype=bool))
        motion_epe = trajectory_epe(
            [_means(pred, t) for t in frames],
            [_means(gt, t) for t in frames],
            gt_mask=gt_mask if bool(gt_mask.any()) else None,
        )
    return MetricReport.from_images(
        pred_images,
        gt_images,
        flow_epe=float(np.nanmean(epes)) if epes else None,
        motion_epe=motion_epe,
    )
