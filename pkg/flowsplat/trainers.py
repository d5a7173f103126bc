"""Optimization loops.

Two paradigms share the same building blocks. The iterative paradigm fits frame 0
as a static scene and then tunes only centres and rotations frame by frame. The
deformation paradigm fits a canonical cloud (coarse stage) and then trains it
jointly with a deformation model (fine stage).
"""

import configparser
import dataclasses
import logging as lg
import math
import time
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from os import path

import numpy as np
import pandas as pd
import torch
from torch import nn
from tqdm import tqdm

from flowsplat import settings, utils
from flowsplat.autodiff import GradSet, ParamSet, backward
from flowsplat.camera import PinholeCamera
from flowsplat.correspondence import (
    CandidateSet,
    FlowField2D,
    build_spatial_index,
    foreground_search,
    lift_dynamic_mask,
    predicted_flows,
)
from flowsplat.deform import DeformModel, refined_dynamic_map
from flowsplat.errors import ConfigError, DivergenceError, DomainError, NonFiniteError
from flowsplat.gaussians import PARAMETER_NAMES, GaussianCloud, quaternion_to_rotation
from flowsplat.losses import (
    LossBreakdown,
    ScheduleState,
    TrainingLog,
    color_loss_dynamic,
    dynamic_map_from_flow,
    flow_loss_kl,
    flow_loss_l1,
    flow_loss_render,
    physical_loss,
    rigidity_neighbors,
    total_loss_deform,
    total_loss_iterative,
    velocity_alignment,
)
from flowsplat.metrics import psnr, ssim, trajectory_epe
from flowsplat.rasterizer import render, render_flow
from flowsplat.synth import FrameObservation

__all__ = [
    "DYNAMIC_MAPS",
    "FLOW_LOSSES",
    "PARADIGMS",
    "DeformResult",
    "DensifyResult",
    "GaussianOptimizer",
    "IterativeResult",
    "TrainConfig",
    "TrainReport",
    "densify_and_prune",
    "scene_extent",
    "train_deform",
    "train_iterative",
    "train_static",
]

PARADIGMS = ("iterative", "deform")
FLOW_LOSSES = ("kl", "l1", "render")
DYNAMIC_MAPS = ("refined", "raw", "none")


@dataclass
class TrainConfig:
    """Training configuration.

    Every field can be set from the [train] section of an INI file or from the
    command line (`lr_means` <-> `--lr-means`). Budgets of 0 skip a stage,
    `lambda_max = 0` disables the flow terms and `views_after_first` /
    `max_views` of 0 use every view.
    """

    paradigm: str = "iterative"
    static_iterations: int = settings.STATIC_ITERATIONS
    frame_iterations: int = settings.FRAME_ITERATIONS
    coarse_iterations: int = settings.COARSE_ITERATIONS
    fine_iterations: int = settings.FINE_ITERATIONS
    lr_means: float = settings.LR_MEANS
    lr_quats: float = settings.LR_QUATS
    lr_scales: float = settings.LR_SCALES
    lr_opacity: float = settings.LR_OPACITY
    lr_sh: float = settings.LR_SH
    lr_features: float = settings.LR_FEATURES
    lr_decoder: float = settings.LR_DECODER
    lr_confidence: float = settings.LR_CONFIDENCE
    lambda_c: float = settings.LAMBDA_C
    lambda_p: float = settings.LAMBDA_P
    lambda_max: float = settings.LAMBDA_MAX
    lambda_min_ratio: float = settings.LAMBDA_MIN_RATIO
    warmup_fraction: float = settings.WARMUP_FRACTION
    k: int = settings.K_CANDIDATES
    tau_dyn: float = settings.TAU_DYN
    neighbors: int = settings.PHYSICAL_NEIGHBORS
    alpha_floor: float = settings.ALPHA_FLOOR
    stride: int = settings.PIXEL_STRIDE
    densify: bool = True
    densify_grad_threshold: float = settings.DENSIFY_GRAD_THRESHOLD
    percent_dense: float = settings.PERCENT_DENSE
    min_opacity: float = settings.MIN_OPACITY
    split_factor: float = settings.SPLIT_FACTOR
    densify_interval: int = settings.DENSIFY_INTERVAL
    densify_start: int = settings.DENSIFY_START
    densify_stop: int = settings.DENSIFY_STOP
    flow_loss: str = "kl"
    use_injector: bool = True
    dynamic_map: str = "refined"
    views_after_first: int = 0
    max_views: int = 0
    extent_sigmas: float = settings.EXTENT_SIGMAS
    seed: int = 0

    def __post_init__(self):
        """Validate the configuration."""
        for name, options in (
            ("paradigm", PARADIGMS),
            ("flow_loss", FLOW_LOSSES),
            ("dynamic_map", DYNAMIC_MAPS),
        ):
            if getattr(self, name) not in options:
                raise ConfigError(
                    f"`{name}` must be one of {options}, got '{getattr(self, name)}'."
                )
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name.endswith("_iterations") and value < 0:
                raise ConfigError(f"`{f.name}` must be nonnegative, got {value}.")
            if f.name.startswith("lr_") and not value > 0:
                raise ConfigError(f"`{f.name}` must be positive, got {value}.")
        if not 0 <= self.lambda_c <= 1:
            raise ConfigError(f"`lambda_c` must lie in [0, 1], got {self.lambda_c}.")
        if self.lambda_p < 0 or self.lambda_max < 0 or self.lambda_min_ratio < 0:
            raise ConfigError("Loss weights must be nonnegative.")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError(
                f"`warmup_fraction` must lie in [0, 1), got {self.warmup_fraction}."
            )
        if self.k < 1 or self.neighbors < 1 or self.stride < 1:
            raise ConfigError("`k`, `neighbors` and `stride` must be at least 1.")
        if self.densify_interval < 1:
            raise ConfigError("`densify_interval` must be at least 1.")
        if self.views_after_first < 0 or self.max_views < 0:
            raise ConfigError("View limits must be nonnegative.")

    @classmethod
    def from_file(cls, src_filepath: utils.PathType, **overrides) -> "TrainConfig":
        """Read the [train] section of an INI file, then apply `overrides`."""
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(src_filepath) as src:
                parser.read_file(src)
        except configparser.Error as err:
            raise ConfigError(f"Cannot parse {src_filepath}: {err}") from err
        unknown = set(parser.sections()) - {"train"}
        if unknown:
            raise ConfigError(f"Unknown sections {sorted(unknown)} in {src_filepath}.")
        kwargs = {}
        if parser.has_section("train"):
            kwargs = utils.config_kwargs(cls, parser["train"], section_name="train")
        kwargs.update(overrides)
        return cls(**kwargs)

    def to_file(self, dst_filepath: utils.PathType) -> None:
        """Write the configuration as a [train] section."""
        parser = configparser.ConfigParser(interpolation=None)
        parser["train"] = {
            key: utils.format_config_value(value)
            for key, value in self.to_dict().items()
        }
        with utils.atomic_path(dst_filepath) as tmp_filepath:
            with open(tmp_filepath, "w") as dst:
                parser.write(dst)

    def to_dict(self) -> dict:
        """Plain dictionary of the fields."""
        return dataclasses.asdict(self)

    def lambda_schedule(self, n_iterations: int) -> ScheduleState:
        """Flow-weight schedule over `n_iterations`."""
        return ScheduleState.for_iterations(
            n_iterations,
            warmup_fraction=self.warmup_fraction,
            lambda_max=self.lambda_max,
            lambda_min=self.lambda_min_ratio * self.lambda_max,
        )


@dataclass
class TrainReport:
    """Outcome of a training run.

    Attributes
    ----------
    log : flowsplat.losses.TrainingLog
        One row per optimization step.
    frame_metrics : pandas.DataFrame, optional
        PSNR and SSIM per frame and view of the final states.
    gaussian_counts : list of int
        Gaussian count at the start and after every densification.
    motion_epe : float, optional
        Trajectory end-point error against the ground truth, when given.
    """

    log: TrainingLog = field(default_factory=TrainingLog)
    frame_metrics: pd.DataFrame | None = None
    gaussian_counts: list = field(default_factory=list)
    motion_epe: float | None = None

    def record(self, breakdown: LossBreakdown, gaussian_count: int, tic: float):
        """Append one step to the log."""
        self.log.append(
            len(self.log.rows),
            breakdown,
            gaussian_count=gaussian_count,
            wall_ms=1e3 * (time.perf_counter() - tic),
        )

    def to_dir(self, dst_dir: utils.PathType) -> None:
        """Write `train_log.csv`, `frame_metrics.csv` and `gaussian_counts.csv`."""
        self.log.to_csv(path.join(dst_dir, "train_log.csv"))
        if self.frame_metrics is not None:
            with utils.atomic_path(path.join(dst_dir, "frame_metrics.csv")) as tmp:
                self.frame_metrics.to_csv(tmp, index=False)
        counts = pd.DataFrame(
            {
                "checkpoint": np.arange(len(self.gaussian_counts)),
                "gaussian_count": self.gaussian_counts,
            }
        )
        with utils.atomic_path(path.join(dst_dir, "gaussian_counts.csv")) as tmp:
            counts.to_csv(tmp, index=False)


########################################################################################
# optimizer and adaptive density control
class GaussianOptimizer:
    """Adam over named cloud tensors and, optionally, torch modules.

    Parameters
    ----------
    cloud : GaussianCloud
        Its tensors named in `lrs` must be leaves requiring gradients.
    lrs : mapping of str to float
        Learning rate per cloud parameter name.
    modules : mapping of str to (torch.nn.Module, float), optional
        Extra modules by name prefix with their learning rate.
    """

    def __init__(
        self,
        cloud: GaussianCloud,
        lrs: Mapping[str, float],
        *,
        modules: Mapping[str, tuple[nn.Module, float]] | None = None,
    ):
        """Build the parameter groups."""
        self.cloud = cloud
        available = cloud.parameters()
        self.cloud_names = [name for name in lrs if name in available]
        self.modules = {} if modules is None else dict(modules)
        groups = [
            {"params": [available[name]], "lr": lrs[name], "name": f"cloud.{name}"}
            for name in self.cloud_names
        ]
        for prefix, (module, lr) in self.modules.items():
            params = list(module.parameters())
            groups.append({"params": params, "lr": lr, "name": prefix})
        self.optimizer = torch.optim.Adam(groups, eps=1e-15)

    def param_set(self) -> ParamSet:
        """Current trainable tensors, cloud first."""
        params = ParamSet.from_cloud(self.cloud, names=self.cloud_names)
        for prefix, (module, _) in self.modules.items():
            params = params | ParamSet.from_module(module, prefix=prefix)
        return params

    def step(self, grads: GradSet, params: ParamSet) -> None:
        """Apply one update and renormalize the quaternions."""
        for name, tensor in params.tensors.items():
            tensor.grad = grads[name]
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        self.cloud.normalize_()

    def resize(self, source: torch.Tensor) -> None:
        """Follow a structural change of the cloud.

        Parameters
        ----------
        source : torch.Tensor of shape (N_new,)
            Row of the previous cloud each new row comes from, -1 for new
            Gaussians, whose moments start at zero.
        """
        self.cloud.requires_grad_(self.cloud_names)
        keep = source >= 0
        for group in self.optimizer.param_groups:
            if not group["name"].startswith("cloud."):
                continue
            old = group["params"][0]
            new = getattr(self.cloud, group["name"][len("cloud.") :])
            state = self.optimizer.state.pop(old, None)
            if state:
                for key in ("exp_avg", "exp_avg_sq"):
                    moment = torch.zeros_like(new)
                    moment[keep] = state[key][source[keep]]
                    state[key] = moment
                self.optimizer.state[new] = state
            group["params"][0] = new


@dataclass
class DensifyResult:
    """What `densify_and_prune` did.

    `source` maps every new row to its previous row, -1 for new Gaussians.
    """

    source: torch.Tensor
    n_cloned: int
    n_split: int
    n_pruned: int


def scene_extent(cloud: GaussianCloud) -> float:
    """Radius of the cloud around its centroid (1 for degenerate clouds)."""
    if len(cloud) < 2:
        return 1.0
    means = cloud.means.detach()
    radius = float((means - means.mean(dim=0)).norm(dim=-1).max())
    return 1.1 * radius if radius > 0 else 1.0


@torch.no_grad()
def densify_and_prune(
    cloud: GaussianCloud,
    grad_norms: torch.Tensor,
    grad_dirs: torch.Tensor | None = None,
    *,
    extent: float = 1.0,
    grad_threshold: float | None = None,
    percent_dense: float | None = None,
    min_opacity: float | None = None,
    split_factor: float | None = None,
) -> DensifyResult:
    """Clone, split and prune Gaussians in place.

    Gaussians whose mean positional gradient reaches `grad_threshold` are cloned
    when their largest scale is at most `percent_dense * extent`, and split
    otherwise. A clone is shifted by its largest scale along the gradient; a
    split replaces the Gaussian by two copies offset by plus and minus its largest
    scale along the corresponding axis, with scales divided by `split_factor`.
    Gaussians with opacity below `min_opacity` are then pruned. The generation is
    bumped even when nothing changes.

    Parameters
    ----------
    cloud : GaussianCloud
    grad_norms : torch.Tensor of shape (N,)
        Mean norm of the positional gradient since the last densification.
    grad_dirs : torch.Tensor of shape (N, 3), optional
        Accumulated positional gradient; clones are not shifted if None.
    extent : float, default 1.0
        Scene extent.
    grad_threshold, percent_dense, min_opacity, split_factor : float, optional
        Default to the `settings` values.

    Returns
    -------
    DensifyResult
    """
    if grad_threshold is None:
        grad_threshold = settings.DENSIFY_GRAD_THRESHOLD
    if percent_dense is None:
        percent_dense = settings.PERCENT_DENSE
    if min_opacity is None:
        min_opacity = settings.MIN_OPACITY
    if split_factor is None:
        split_factor = settings.SPLIT_FACTOR
    n = len(cloud)
    if grad_norms.shape != (n,):
        raise DomainError(
            f"Expected {n} gradient norms, got {tuple(grad_norms.shape)}."
        )

    rows = cloud.select(torch.ones(n, dtype=torch.bool))
    s_max, axis = cloud.scales.detach().max(dim=-1)
    high = grad_norms >= grad_threshold
    small = s_max <= percent_dense * extent
    clone, split = high & small, high & ~small

    cloned = {name: tensor[clone] for name, tensor in rows.items()}
    if grad_dirs is not None:
        d = grad_dirs[clone]
        norm = d.norm(dim=-1, keepdim=True)
        unit = torch.where(norm > 0, d / norm.clamp_min(1e-300), 0.0)
        cloned["means"] = cloned["means"] + s_max[clone].unsqueeze(-1) * unit

    halves = {name: tensor[split] for name, tensor in rows.items()}
    rot = quaternion_to_rotation(rows["quats"][split])
    principal = rot[torch.arange(rot.shape[0]), :, axis[split]]
    offset = principal * s_max[split].unsqueeze(-1)
    halves["log_scales"] = halves["log_scales"] - math.log(split_factor)
    plus = dict(halves, means=halves["means"] + offset)
    minus = dict(halves, means=halves["means"] - offset)

    keep = ~split
    merged = {
        name: torch.cat([rows[name][keep], cloned[name], plus[name], minus[name]])
        for name in rows
    }
    n_cloned, n_split = int(clone.sum()), int(split.sum())
    source = torch.cat(
        [
            torch.nonzero(keep)[:, 0],
            torch.full((n_cloned + 2 * n_split,), -1, dtype=torch.int64),
        ]
    )
    alive = torch.sigmoid(merged["opacity_logits"]) >= min_opacity
    merged = {name: tensor[alive] for name, tensor in merged.items()}
    cloud.replace_rows(merged)
    n_pruned = int((~alive).sum())
    lg.debug(
        f"Densification: {n_cloned} cloned, {n_split} split, {n_pruned} pruned, "
        f"{len(cloud)} Gaussians."
    )
    return DensifyResult(
        source=source[alive], n_cloned=n_cloned, n_split=n_split, n_pruned=n_pruned
    )


class _DensifyStats:
    """Positional-gradient statistics since the last densification."""

    def __init__(self, n: int):
        self.norms = torch.zeros(n, dtype=settings.DTYPE)
        self.dirs = torch.zeros((n, 3), dtype=settings.DTYPE)
        self.denom = 0

    def add(self, grad_means: torch.Tensor) -> None:
        self.norms += grad_means.detach().norm(dim=-1)
        self.dirs += grad_means.detach()
        self.denom += 1

    def average(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.norms / max(self.denom, 1), self.dirs


def _densify_due(config: TrainConfig, iteration: int) -> bool:
    return (
        config.densify
        and iteration > 0
        and config.densify_start <= iteration < config.densify_stop
        and iteration % config.densify_interval == 0
    )


def _cloud_lrs(config: TrainConfig, extent: float, names: Sequence[str]) -> dict:
    lrs = {
        "means": config.lr_means * extent,
        "quats": config.lr_quats,
        "log_scales": config.lr_scales,
        "opacity_logits": config.lr_opacity,
        "sh": config.lr_sh,
        "log_confidence": config.lr_confidence,
    }
    return {name: lrs[name] for name in names}


def _gradients(
    loss: torch.Tensor, params: ParamSet, *, stage: str, iteration: int
) -> GradSet:
    try:
        return backward(loss, params)
    except NonFiniteError as err:
        raise DivergenceError(f"{stage} iteration {iteration}: {err}") from err


def _view_indices(n_views: int, limit: int) -> list[int]:
    views = list(range(n_views))
    return views[:limit] if limit > 0 else views


def _densify_step(
    cloud: GaussianCloud,
    opt: GaussianOptimizer,
    stats: _DensifyStats,
    config: TrainConfig,
    report: TrainReport,
    extent: float,
) -> _DensifyStats:
    result = densify_and_prune(
        cloud,
        *stats.average(),
        extent=extent,
        grad_threshold=config.densify_grad_threshold,
        percent_dense=config.percent_dense,
        min_opacity=config.min_opacity,
        split_factor=config.split_factor,
    )
    opt.resize(result.source)
    report.gaussian_counts.append(len(cloud))
    return _DensifyStats(len(cloud))


########################################################################################
# static fitting
def _fit_static(
    cloud: GaussianCloud,
    views: Sequence[tuple[PinholeCamera, torch.Tensor, tuple]],
    n_iterations: int,
    config: TrainConfig,
    report: TrainReport,
    *,
    stage: str,
    rng: np.random.Generator | None = None,
) -> GaussianCloud:
    """Photometric fitting without motion; views are cycled, or sampled with `rng`."""
    cloud = cloud.detach()
    if n_iterations == 0:
        return cloud
    names = list(PARAMETER_NAMES)
    cloud.requires_grad_(names)
    extent = scene_extent(cloud)
    opt = GaussianOptimizer(cloud, _cloud_lrs(config, extent, names))
    stats = _DensifyStats(len(cloud))
    for it in tqdm(range(n_iterations), desc=stage, disable=None):
        tic = time.perf_counter()
        i = it % len(views) if rng is None else int(rng.integers(len(views)))
        cam, image, background = views[i]
        out = render(cloud, cam, background, extent_sigmas=config.extent_sigmas)
        color = color_loss_dynamic(image, out.color, lambda_c=0.0)
        breakdown = total_loss_iterative({"color": color}, config.lambda_p, 0.0)
        params = opt.param_set()
        grads = _gradients(breakdown.total, params, stage=stage, iteration=it)
        stats.add(grads["cloud.means"])
        opt.step(grads, params)
        report.record(breakdown, len(cloud), tic)
        if _densify_due(config, it):
            stats = _densify_step(cloud, opt, stats, config, report, extent)
    return cloud.detach()


def train_static(
    frame0: FrameObservation,
    cloud: GaussianCloud,
    config: TrainConfig | None = None,
    *,
    report: TrainReport | None = None,
) -> GaussianCloud:
    """Fit a static cloud to the views of one frame.

    Parameters
    ----------
    frame0 : FrameObservation
        At least one view.
    cloud : GaussianCloud
        Initialization, left untouched.
    config : TrainConfig, optional
        `static_iterations` and the densification settings apply.
    report : TrainReport, optional
        Receives the log rows and Gaussian counts.

    Returns
    -------
    GaussianCloud

    Raises
    ------
    DivergenceError
        If a loss or gradient becomes non-finite.
    """
    if config is None:
        config = TrainConfig()
    if frame0.n_views < 1:
        raise DomainError("Static fitting needs at least one view.")
    if report is None:
        report = TrainReport()
    if not report.gaussian_counts:
        report.gaussian_counts.append(len(cloud))
    views = [
        (cam, image, frame0.background)
        for cam, image in zip(frame0.cameras, frame0.images)
    ]
    return _fit_static(
        cloud, views, config.static_iterations, config, report, stage="static"
    )


########################################################################################
# flow terms
def _flow_term(
    kind: str,
    flow: FlowField2D,
    cands: CandidateSet,
    state_prev: GaussianCloud,
    state_curr: GaussianCloud,
    cam_prev: PinholeCamera,
    cam_curr: PinholeCamera,
    *,
    confidence: torch.Tensor,
    extent_sigmas: float | None,
) -> torch.Tensor:
    if kind == "render":
        rendered = render_flow(
            state_prev,
            cam_prev,
            cam_curr,
            state_curr.means,
            extent_sigmas=extent_sigmas,
        )
        return flow_loss_render(rendered, flow)
    predicted = predicted_flows(
        cands, state_prev.means, state_curr.means, cam_prev, cam_curr
    )
    if kind == "l1":
        return flow_loss_l1(flow, cands, predicted)
    return flow_loss_kl(flow, cands, predicted, confidence)


def _frame_flows(obs: FrameObservation) -> list:
    return list(obs.flows) if obs.flows is not None else [None] * obs.n_views


def _frame_metrics(
    states: Sequence[GaussianCloud],
    frames: Sequence[FrameObservation],
    config: TrainConfig,
) -> pd.DataFrame:
    rows = []
    with torch.no_grad():
        for t, (state, obs) in enumerate(zip(states, frames)):
            for v, (cam, image) in enumerate(zip(obs.cameras, obs.images)):
                out = render(
                    state.detach(),
                    cam,
                    obs.background,
                    extent_sigmas=config.extent_sigmas,
                )
                big_enough = min(cam.height, cam.width) >= settings.SSIM_WINDOW
                rows.append(
                    {
                        "frame": t,
                        "view": v,
                        "psnr": psnr(out.color, image),
                        "ssim": ssim(out.color, image) if big_enough else float("nan"),
                    }
                )
    return pd.DataFrame(rows, columns=["frame", "view", "psnr", "ssim"])


########################################################################################
# iterative paradigm
@dataclass
class IterativeResult:
    """Per-frame states of the iterative paradigm and the training report."""

    states: list
    report: TrainReport


def _tune_frame(
    prev: GaussianCloud,
    obs_prev: FrameObservation,
    obs: FrameObservation,
    config: TrainConfig,
    report: TrainReport,
) -> GaussianCloud:
    views = _view_indices(obs.n_views, config.views_after_first)
    flows = _frame_flows(obs)
    index = build_spatial_index(prev)
    cands, dyn_maps = {}, {}
    with torch.no_grad():
        for v in views:
            cam_prev = obs_prev.cameras[v]
            out_prev = render(
                prev, cam_prev, obs_prev.background, extent_sigmas=config.extent_sigmas
            )
            cands[v] = foreground_search(
                out_prev.depth,
                cam_prev,
                prev,
                config.k,
                out_prev.alpha,
                alpha_floor=config.alpha_floor,
                stride=config.stride,
                index=index,
                view=v,
            )
            if flows[v] is None:
                lg.warning(
                    f"No flow for frame {obs.frame}, view {v}: "
                    "the flow term is skipped."
                )
            # without a velocity model the refined map falls back to the raw one
            if flows[v] is None or config.dynamic_map == "none":
                dyn_maps[v] = None
            else:
                dyn_maps[v] = dynamic_map_from_flow(flows[v])
    shape = (obs.cameras[0].height, obs.cameras[0].width)
    blank = torch.zeros(shape, dtype=settings.DTYPE)
    mask = lift_dynamic_mask(
        [cands[v] for v in views],
        [blank if dyn_maps[v] is None else dyn_maps[v] for v in views],
        config.tau_dyn,
        n_gaussians=len(prev),
    )
    neighbors = rigidity_neighbors(prev.means, mask.flags, config.neighbors)

    cur = prev.detach()
    cur.set_dynamic_flags(mask.flags.clone())
    names = ["means", "quats", "log_confidence"]
    cur.requires_grad_(names)
    opt = GaussianOptimizer(cur, _cloud_lrs(config, scene_extent(prev), names))
    schedule = config.lambda_schedule(config.frame_iterations)
    stage = f"frame {obs.frame}"
    for it in tqdm(range(config.frame_iterations), desc=stage, disable=None):
        tic = time.perf_counter()
        lambda_f = schedule.step()
        v = views[it % len(views)]
        cam_prev, cam = obs_prev.cameras[v], obs.cameras[v]
        out = render(cur, cam, obs.background, extent_sigmas=config.extent_sigmas)
        parts = {
            "color": color_loss_dynamic(
                obs.images[v], out.color, dyn_maps[v], config.lambda_c
            ),
            "physical": physical_loss(cur, prev, mask, neighbors),
        }
        if lambda_f > 0 and flows[v] is not None:
            cands[v].check_generation(cur)
            parts["flow"] = _flow_term(
                config.flow_loss,
                flows[v],
                cands[v],
                prev,
                cur,
                cam_prev,
                cam,
                confidence=cur.confidence(v),
                extent_sigmas=config.extent_sigmas,
            )
        breakdown = total_loss_iterative(parts, config.lambda_p, lambda_f)
        params = opt.param_set()
        grads = _gradients(breakdown.total, params, stage=stage, iteration=it)
        opt.step(grads, params)
        report.record(breakdown, len(cur), tic)
    return cur.detach()


def train_iterative(
    frames: Sequence[FrameObservation],
    cloud0: GaussianCloud,
    config: TrainConfig | None = None,
    *,
    gt_means: Sequence[torch.Tensor] | None = None,
    gt_mask: torch.Tensor | None = None,
) -> IterativeResult:
    """Train the iterative paradigm.

    Frame 0 is fitted as a static scene; every later frame starts from the
    previous state and tunes only centres, rotations and flow confidences, so
    the Gaussian count, opacities, scales and colours stay as after frame 0.

    Parameters
    ----------
    frames : sequence of FrameObservation
        Observations per frame; flows of frames 1.. supervise the motion.
    cloud0 : GaussianCloud
        Initialization of frame 0.
    config : TrainConfig, optional
    gt_means : sequence of torch.Tensor, optional
        Ground-truth centres per frame for the trajectory error.
    gt_mask : torch.Tensor, optional
        Ground-truth Gaussians the trajectory error is restricted to.

    Returns
    -------
    IterativeResult
    """
    if config is None:
        config = TrainConfig(paradigm="iterative")
    if len(frames) == 0:
        raise DomainError("Need at least one frame.")
    report = TrainReport(gaussian_counts=[len(cloud0)])
    cloud = train_static(frames[0], cloud0, config, report=report)
    cloud.init_confidence(frames[0].n_views)
    cloud.set_dynamic_flags(torch.zeros(len(cloud), dtype=torch.bool))
    states = [cloud.detach()]
    n = len(cloud)
    for t in range(1, len(frames)):
        state = _tune_frame(states[-1], frames[t - 1], frames[t], config, report)
        if len(state) != n:
            raise RuntimeError(f"The Gaussian count changed at frame {t}.")
        states.append(state)
    report.frame_metrics = _frame_metrics(states, frames, config)
    if gt_means is not None:
        report.motion_epe = trajectory_epe(
            [s.means for s in states], gt_means, gt_mask=gt_mask
        )
    return IterativeResult(states=states, report=report)


########################################################################################
# deformation paradigm
@dataclass
class DeformResult:
    """Canonical cloud, deformation model and training report."""

    cloud: GaussianCloud
    model: DeformModel
    report: TrainReport

    def frame_states(self) -> list[GaussianCloud]:
        """Deformed state of every frame, detached."""
        with torch.no_grad():
            return [
                self.model.deform_cloud(self.cloud, self.model.frame_time(t)).detach()
                for t in range(self.model.n_frames)
            ]


def _field_bounds(cloud: GaussianCloud) -> torch.Tensor:
    means = cloud.means.detach()
    pad = 0.5 * scene_extent(cloud)
    return torch.stack([means.min(dim=0).values - pad, means.max(dim=0).values + pad])


def _deform_dynamic_map(
    config: TrainConfig,
    model: DeformModel,
    state: GaussianCloud,
    time_t: float,
    cam: PinholeCamera,
    flow: FlowField2D | None,
) -> torch.Tensor | None:
    if config.dynamic_map == "none":
        return None
    if config.dynamic_map == "refined" and model.velocity_head is not None:
        with torch.no_grad():
            velocities = model.velocities(state.means.detach(), time_t)
        return refined_dynamic_map(
            state, [cam], velocities, model.dt, extent_sigmas=config.extent_sigmas
        )[0]
    if flow is None:
        return None
    return dynamic_map_from_flow(flow)


def train_deform(
    frames: Sequence[FrameObservation],
    cloud: GaussianCloud,
    config: TrainConfig | None = None,
    *,
    gt_means: Sequence[torch.Tensor] | None = None,
    gt_mask: torch.Tensor | None = None,
) -> DeformResult:
    """Train the deformation paradigm.

    The coarse stage fits the canonical cloud to views sampled from every frame
    without deformation. The fine stage samples one frame and view per iteration,
    renders the deformed state and, once the flow weight is positive, adds the
    flow loss on candidates of the deformed state at the previous frame and the
    velocity alignment. Densification acts on the canonical cloud.

    Parameters
    ----------
    frames : sequence of FrameObservation
        At least two frames.
    cloud : GaussianCloud
        Initialization of the canonical cloud.
    config : TrainConfig, optional
    gt_means, gt_mask : optional
        As in `train_iterative`.

    Returns
    -------
    DeformResult
    """
    if config is None:
        config = TrainConfig(paradigm="deform")
    if len(frames) < 2:
        raise DomainError("The deformation paradigm needs at least two frames.")
    if config.dynamic_map == "refined" and not config.use_injector:
        warnings.warn(
            "Without a velocity head the refined dynamic map falls back to the raw one."
        )
    n_views = len(_view_indices(frames[0].n_views, config.max_views))
    rng = np.random.default_rng(config.seed)
    report = TrainReport(gaussian_counts=[len(cloud)])
    views = [
        (obs.cameras[v], obs.images[v], obs.background)
        for obs in frames
        for v in range(n_views)
    ]
    cloud = _fit_static(
        cloud, views, config.coarse_iterations, config, report, stage="coarse", rng=rng
    )

    model = DeformModel(
        _field_bounds(cloud),
        len(frames),
        use_injector=config.use_injector,
        seed=config.seed,
    )
    cloud.init_confidence(n_views)
    names = [*PARAMETER_NAMES, "log_confidence"]
    cloud.requires_grad_(names)
    extent = scene_extent(cloud)
    modules = {
        "model.field": (model.field, config.lr_features),
        "model.decoder": (model.decoder, config.lr_decoder),
    }
    if model.velocity_head is not None:
        modules["model.velocity_head"] = (model.velocity_head, config.lr_decoder)
    opt = GaussianOptimizer(cloud, _cloud_lrs(config, extent, names), modules=modules)
    stats = _DensifyStats(len(cloud))
    schedule = config.lambda_schedule(config.fine_iterations)
    warned = set()
    for it in tqdm(range(config.fine_iterations), desc="fine", disable=None):
        tic = time.perf_counter()
        lambda_f = schedule.step()
        t, v = int(rng.integers(len(frames))), int(rng.integers(n_views))
        obs = frames[t]
        cam, time_t = obs.cameras[v], model.frame_time(t)
        state_t = model.deform_cloud(cloud, time_t)
        out = render(state_t, cam, obs.background, extent_sigmas=config.extent_sigmas)
        flow = _frame_flows(obs)[v] if t > 0 else None
        if t > 0 and flow is None and (t, v) not in warned:
            lg.warning(f"No flow for frame {t}, view {v}: the flow term is skipped.")
            warned.add((t, v))
        dyn = _deform_dynamic_map(config, model, state_t, time_t, cam, flow)
        parts = {
            "color": color_loss_dynamic(obs.images[v], out.color, dyn, config.lambda_c)
        }
        if lambda_f > 0 and flow is not None:
            obs_prev = frames[t - 1]
            cam_prev, time_prev = obs_prev.cameras[v], model.frame_time(t - 1)
            state_prev = model.deform_cloud(cloud, time_prev)
            with torch.no_grad():
                frozen = state_prev.detach()
                out_prev = render(
                    frozen,
                    cam_prev,
                    obs_prev.background,
                    extent_sigmas=config.extent_sigmas,
                )
                cands = foreground_search(
                    out_prev.depth,
                    cam_prev,
                    frozen,
                    config.k,
                    out_prev.alpha,
                    alpha_floor=config.alpha_floor,
                    stride=config.stride,
                    view=v,
                )
            parts["flow"] = _flow_term(
                config.flow_loss,
                flow,
                cands,
                state_prev,
                state_t,
                cam_prev,
                cam,
                confidence=cloud.confidence(v),
                extent_sigmas=config.extent_sigmas,
            )
            if model.velocity_head is not None:
                velocities = model.velocities(state_prev.means, time_prev)
                parts["velocity"] = velocity_alignment(
                    cands, flow, state_prev.means, velocities, model.dt, cam_prev, cam
                )
        breakdown = total_loss_deform(parts, lambda_f)
        params = opt.param_set()
        grads = _gradients(breakdown.total, params, stage="fine", iteration=it)
        stats.add(grads["cloud.means"])
        opt.step(grads, params)
        report.record(breakdown, len(cloud), tic)
        if _densify_due(config, it):
            stats = _densify_step(cloud, opt, stats, config, report, extent)

    result = DeformResult(cloud=cloud.detach(), model=model, report=report)
    states = result.frame_states()
    report.frame_metrics = _frame_metrics(states, frames, config)
    if gt_means is not None:
        report.motion_epe = trajectory_epe(
            [s.means for s in states], gt_means, gt_mask=gt_mask
        )
    return result
