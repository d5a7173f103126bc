"""Training objectives.

Flow losses (uncertainty-aware KL, plain L1 and render-based), dynamic maps, the
dynamic-aware colour and physical losses, velocity alignment, the combined
objectives of both paradigms and the flow-weight schedule. Every reduction is a
mean so that the default weights do not depend on the image resolution.
"""

import logging as lg
import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import pandas as pd
import torch

from flowsplat import settings, utils
from flowsplat.camera import PinholeCamera, flows_between
from flowsplat.correspondence import (
    CandidateSet,
    DynamicMask3D,
    FlowField2D,
    SpatialIndex,
)
from flowsplat.errors import DomainError, StaleCandidatesError
from flowsplat.gaussians import GaussianCloud

__all__ = [
    "LOG_COLUMNS",
    "LossBreakdown",
    "ScheduleState",
    "TrainingLog",
    "color_loss_dynamic",
    "dynamic_map_from_flow",
    "flow_loss_kl",
    "flow_loss_l1",
    "flow_loss_render",
    "lambda_schedule",
    "normalize_map",
    "physical_loss",
    "rigidity_neighbors",
    "total_loss_deform",
    "total_loss_iterative",
    "velocity_alignment",
]

LOG_COLUMNS = [
    "iteration",
    "loss_color",
    "loss_flow",
    "loss_phys",
    "loss_vel",
    "lambda_f",
    "gaussian_count",
    "wall_ms",
]


def _zero() -> torch.Tensor:
    return torch.zeros((), dtype=settings.DTYPE)


def dynamic_map_from_flow(
    flow: FlowField2D | torch.Tensor, *, eps: float | None = None
) -> torch.Tensor:
    """Normalized flow magnitude in [0, 1], all zeros for a (near) static field.

    Parameters
    ----------
    flow : FlowField2D or torch.Tensor of shape (H, W, 2)
    eps : float, optional
        Maximum magnitude below which the map is all zeros. Defaults to
        `settings.EPS_FLOW`.

    Returns
    -------
    torch.Tensor of shape (H, W)
    """
    if eps is None:
        eps = settings.EPS_FLOW
    if not isinstance(flow, FlowField2D):
        flow = FlowField2D(flow)
    return normalize_map(flow.magnitude, eps=eps)


def normalize_map(values: torch.Tensor, *, eps: float | None = None) -> torch.Tensor:
    """Divide a nonnegative map by its maximum, all zeros when the maximum <= eps."""
    if eps is None:
        eps = settings.EPS_FLOW
    peak = values.max() if values.numel() else _zero()
    if float(peak) <= eps:
        return torch.zeros_like(values)
    return values / peak


def color_loss_dynamic(
    image: torch.Tensor,
    rendered: torch.Tensor,
    dynamic_map: torch.Tensor | None = None,
    lambda_c: float | None = None,
) -> torch.Tensor:
    """Colour loss with the dynamic map acting as an attention map.

    (1 - lambda_c) MSE(C, C_hat) + lambda_c MSE(C * D, C_hat * D), with the means
    taken over pixels and channels.

    Parameters
    ----------
    image, rendered : torch.Tensor of shape (H, W, 3)
    dynamic_map : torch.Tensor of shape (H, W), optional
        All ones if None, which reduces the loss to the plain MSE.
    lambda_c : float, optional
        Defaults to `settings.LAMBDA_C`.
    """
    if lambda_c is None:
        lambda_c = settings.LAMBDA_C
    if not 0.0 <= lambda_c <= 1.0:
        raise DomainError(f"`lambda_c` must lie in [0, 1], got {lambda_c}.")
    image = utils.as_tensor(image)
    if image.shape != rendered.shape:
        raise DomainError(
            f"Image shapes differ: {tuple(image.shape)} vs {tuple(rendered.shape)}."
        )
    sq = (image - rendered) ** 2
    loss = (1 - lambda_c) * sq.mean()
    if lambda_c > 0:
        if dynamic_map is None:
            attn = sq
        else:
            dynamic_map = utils.as_tensor(dynamic_map).detach()
            if dynamic_map.shape != image.shape[:2]:
                raise DomainError("Dynamic map does not match the image size.")
            attn = sq * dynamic_map.unsqueeze(-1) ** 2
        loss = loss + lambda_c * attn.mean()
    return loss


def _pair_residuals(
    flow: FlowField2D,
    cands: CandidateSet,
    predicted: tuple[torch.Tensor, torch.Tensor],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Residuals (M, K, 2) between the pixel flow and every candidate flow."""
    flows, mask = predicted
    if flows.shape[:2] != cands.indices.shape:
        raise DomainError("Predicted flows do not match the candidate set.")
    observed, pixel_valid = flow.sample(cands.pixels)
    # the same observed flow supervises every candidate of the pixel
    residual = observed.unsqueeze(1) - flows
    return residual, mask & pixel_valid.unsqueeze(1)


def flow_loss_kl(
    flow: FlowField2D,
    cands: CandidateSet,
    predicted: tuple[torch.Tensor, torch.Tensor],
    confidence: torch.Tensor,
) -> torch.Tensor:
    """Uncertainty-aware flow loss.

    Per candidate, with 1 / sigma^2 = weight * confidence:
    ||F - F_hat||^2 / (2 sigma^2) + log(sigma^2) / 2, averaged over the valid
    (pixel, candidate) pairs. The log term can make the loss negative.

    Parameters
    ----------
    flow : FlowField2D
        Observed flow.
    cands : CandidateSet
    predicted : tuple of torch.Tensor
        Output of `correspondence.predicted_flows`.
    confidence : torch.Tensor of shape (N,)
        Positive per-Gaussian flow confidence of the view.
    """
    residual, valid = _pair_residuals(flow, cands, predicted)
    if not bool(valid.any()):
        return _zero()
    log_c = torch.log(confidence)[cands.indices]
    log_w = torch.log(cands.weights.clamp_min(settings.MIN_WEIGHT))
    log_prec = log_w + log_c
    terms = 0.5 * (residual**2).sum(-1) * torch.exp(log_prec) - 0.5 * log_prec
    return terms[valid].mean()


def flow_loss_l1(
    flow: FlowField2D,
    cands: CandidateSet,
    predicted: tuple[torch.Tensor, torch.Tensor],
) -> torch.Tensor:
    """Plain L1 flow loss over the valid (pixel, candidate) pairs."""
    residual, valid = _pair_residuals(flow, cands, predicted)
    if not bool(valid.any()):
        return _zero()
    return residual.abs().sum(-1)[valid].mean()


def flow_loss_render(rendered_flow: torch.Tensor, flow: FlowField2D) -> torch.Tensor:
    """L1 loss between an alpha-composited rendered flow and the observed flow."""
    if rendered_flow.shape != flow.flow.shape:
        raise DomainError("Rendered flow does not match the observed flow.")
    if not bool(flow.valid.any()):
        return _zero()
    return (rendered_flow - flow.flow).abs().sum(-1)[flow.valid].mean()


def rigidity_neighbors(
    means_prev: torch.Tensor, flags: torch.Tensor, m: int | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest dynamic neighbours of every dynamic Gaussian at t-1.

    Parameters
    ----------
    means_prev : torch.Tensor of shape (N, 3)
    flags : torch.Tensor of shape (N,)
        Dynamic labels.
    m : int, optional
        Neighbours per Gaussian. Defaults to `settings.PHYSICAL_NEIGHBORS`.

    Returns
    -------
    anchors : torch.Tensor of shape (D,)
        Indices of the dynamic Gaussians.
    neighbors : torch.Tensor of shape (D, min(m, D - 1))
        Indices (into the cloud) of their nearest dynamic neighbours.
    """
    if m is None:
        m = settings.PHYSICAL_NEIGHBORS
    anchors = torch.nonzero(flags, as_tuple=True)[0]
    n_dyn = anchors.shape[0]
    if n_dyn < 2:
        return anchors, torch.zeros((n_dyn, 0), dtype=torch.int64)
    index = SpatialIndex(means_prev.detach()[anchors])
    _, local = index.query(means_prev.detach()[anchors], m + 1)
    # push each Gaussian itself to the end, duplicates of its centre stay neighbours
    is_self = local == torch.arange(n_dyn).unsqueeze(-1)
    order = torch.argsort(is_self.to(torch.int8), dim=-1, stable=True)
    local = torch.gather(local, -1, order)[:, : min(m, n_dyn - 1)]
    return anchors, anchors[local]


def physical_loss(
    cloud_t: GaussianCloud | torch.Tensor,
    cloud_prev: GaussianCloud | torch.Tensor,
    mask: DynamicMask3D | torch.Tensor,
    neighbors: tuple[torch.Tensor, torch.Tensor] | None = None,
    *,
    m: int | None = None,
) -> torch.Tensor:
    """Local-rigidity loss over dynamic Gaussians.

    Mean over dynamic Gaussians i and their dynamic neighbours j of
    ||(mu_i,t - mu_j,t) - (mu_i,t-1 - mu_j,t-1)||^2.

    Parameters
    ----------
    cloud_t, cloud_prev : GaussianCloud or torch.Tensor of shape (N, 3)
        States (or centres) at t and t-1.
    mask : DynamicMask3D or torch.Tensor of shape (N,)
    neighbors : tuple of torch.Tensor, optional
        Output of `rigidity_neighbors`, computed from `cloud_prev` if None.
    m : int, optional
        Neighbours per Gaussian when `neighbors` is None.
    """
    if isinstance(cloud_t, GaussianCloud) and isinstance(cloud_prev, GaussianCloud):
        if cloud_t.generation != cloud_prev.generation:
            raise StaleCandidatesError(
                f"States of generations {cloud_t.generation} and "
                f"{cloud_prev.generation} cannot be compared."
            )
        if isinstance(mask, DynamicMask3D):
            mask.check(cloud_prev)
    means_t = cloud_t.means if isinstance(cloud_t, GaussianCloud) else cloud_t
    means_prev = (
        cloud_prev.means if isinstance(cloud_prev, GaussianCloud) else cloud_prev
    )
    if means_t.shape != means_prev.shape:
        raise StaleCandidatesError("The two states have different Gaussian counts.")
    flags = mask.flags if isinstance(mask, DynamicMask3D) else mask
    if flags.shape[0] != means_t.shape[0]:
        raise StaleCandidatesError("Dynamic mask does not match the Gaussian count.")
    if neighbors is None:
        neighbors = rigidity_neighbors(means_prev, flags, m)
    anchors, nbrs = neighbors
    if nbrs.numel() == 0:
        return _zero()
    offset_t = means_t[anchors].unsqueeze(1) - means_t[nbrs]
    offset_prev = means_prev[anchors].unsqueeze(1) - means_prev[nbrs]
    return ((offset_t - offset_prev) ** 2).sum(-1).mean()


def velocity_alignment(
    cands: CandidateSet,
    flow: FlowField2D,
    means: torch.Tensor,
    velocities: torch.Tensor,
    dt: float,
    cam_prev: PinholeCamera,
    cam_curr: PinholeCamera | None = None,
) -> torch.Tensor:
    """L1 alignment of projected velocities with the observed flow.

    For every Gaussian selected as a candidate, Proj(v) dt is taken as
    Proj_curr(mu + v dt) - Proj_prev(mu) and compared with the flow of each pixel
    that selected it. The mean runs over those (pixel, candidate) pairs.

    Parameters
    ----------
    cands : CandidateSet
        Candidates of the view at t - dt.
    flow : FlowField2D
        Observed flow from t - dt to t.
    means : torch.Tensor of shape (N, 3)
        Centres at t - dt.
    velocities : torch.Tensor of shape (N, 3)
    dt : float
    cam_prev : PinholeCamera
    cam_curr : PinholeCamera, optional
        Defaults to `cam_prev`.
    """
    if cam_curr is None:
        cam_curr = cam_prev
    if len(cands) == 0:
        lg.warning("No Gaussian selected for velocity alignment, returning 0.")
        return _zero()
    idx = cands.indices
    proj_flow, ok = flows_between(
        cam_prev, cam_curr, means[idx], means[idx] + velocities[idx] * dt
    )
    observed, pixel_valid = flow.sample(cands.pixels)
    valid = ok & pixel_valid.unsqueeze(1)
    if not bool(valid.any()):
        lg.warning("No valid pair for velocity alignment, returning 0.")
        return _zero()
    residual = (proj_flow - observed.unsqueeze(1)).abs().sum(-1)
    return residual[valid].mean()


@dataclass
class LossBreakdown:
    """Individual loss terms and their weighted total."""

    color: torch.Tensor
    flow: torch.Tensor
    physical: torch.Tensor
    velocity: torch.Tensor
    lambda_p: float
    lambda_f: float
    total: torch.Tensor

    def as_record(self) -> dict[str, float]:
        """Plain floats keyed as in the training log."""
        return {
            "loss_color": float(self.color),
            "loss_flow": float(self.flow),
            "loss_phys": float(self.physical),
            "loss_vel": float(self.velocity),
            "lambda_f": float(self.lambda_f),
        }


def _parts(parts: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    unknown = set(parts) - {"color", "flow", "physical", "velocity"}
    if unknown:
        raise DomainError(f"Unknown loss terms: {sorted(unknown)}.")
    return {
        name: parts.get(name, _zero())
        for name in ("color", "flow", "physical", "velocity")
    }


def total_loss_iterative(
    parts: Mapping[str, torch.Tensor], lambda_p: float, lambda_f: float
) -> LossBreakdown:
    """Objective of the iterative paradigm: color + lambda_p phys + lambda_f flow."""
    p = _parts(parts)
    total = p["color"] + lambda_p * p["physical"] + lambda_f * p["flow"]
    return LossBreakdown(**p, lambda_p=lambda_p, lambda_f=lambda_f, total=total)


def total_loss_deform(
    parts: Mapping[str, torch.Tensor], lambda_f: float
) -> LossBreakdown:
    """Objective of the deformation paradigm: color + lambda_f (flow + velocity)."""
    p = _parts(parts)
    total = p["color"] + lambda_f * (p["flow"] + p["velocity"])
    return LossBreakdown(**p, lambda_p=0.0, lambda_f=lambda_f, total=total)


@dataclass
class ScheduleState:
    """Warmup and cosine-decay schedule of the flow weight.

    Parameters
    ----------
    warmup_end : int
        Iteration at which the weight peaks.
    decay_end : int
        Iteration after which the weight stays at `lambda_min`.
    lambda_max : float, optional
        Defaults to `settings.LAMBDA_MAX`.
    lambda_min : float, optional
        Defaults to `settings.LAMBDA_MIN_RATIO` times `lambda_max`.
    iteration : int, default 0
    """

    warmup_end: int
    decay_end: int
    lambda_max: float | None = None
    lambda_min: float | None = None
    iteration: int = 0

    def __post_init__(self):
        """Resolve defaults and validate the breakpoints."""
        if self.lambda_max is None:
            self.lambda_max = settings.LAMBDA_MAX
        if self.lambda_min is None:
            self.lambda_min = settings.LAMBDA_MIN_RATIO * self.lambda_max
        if not 0 <= self.warmup_end < self.decay_end:
            raise DomainError(
                f"Need 0 <= warmup_end < decay_end, got {self.warmup_end} and "
                f"{self.decay_end}."
            )

    @classmethod
    def for_iterations(
        cls, n_iterations: int, *, warmup_fraction: float | None = None, **kwargs
    ) -> "ScheduleState":
        """Schedule peaking after `warmup_fraction` and decaying until the end."""
        if warmup_fraction is None:
            warmup_fraction = settings.WARMUP_FRACTION
        decay_end = max(int(n_iterations), 1)
        warmup_end = min(int(round(warmup_fraction * decay_end)), decay_end - 1)
        return cls(warmup_end=warmup_end, decay_end=decay_end, **kwargs)

    def step(self) -> float:
        """Weight at the current iteration, then advance the counter."""
        value = lambda_schedule(self, self.iteration)
        self.iteration += 1
        return value


def lambda_schedule(state: ScheduleState, iteration: int) -> float:
    """Flow weight at `iteration`.

    Linear ramp from 0 to `lambda_max` until `warmup_end`, cosine decay to
    `lambda_min` until `decay_end` and constant afterwards.
    """
    if iteration < 0:
        raise DomainError(f"Iteration must be nonnegative, got {iteration}.")
    if iteration < state.warmup_end:
        return state.lambda_max * iteration / state.warmup_end
    if iteration <= state.decay_end:
        progress = (iteration - state.warmup_end) / (state.decay_end - state.warmup_end)
        cosine = 0.5 * (1 + math.cos(math.pi * progress))
        return state.lambda_min + (state.lambda_max - state.lambda_min) * cosine
    return state.lambda_min


@dataclass
class TrainingLog:
    """Per-iteration loss records."""

    rows: list[dict] = field(default_factory=list)

    def append(
        self,
        iteration: int,
        breakdown: LossBreakdown,
        *,
        gaussian_count: int,
        wall_ms: float,
    ) -> None:
        """Record one optimization step."""
        self.rows.append(
            {
                "iteration": iteration,
                **breakdown.as_record(),
                "gaussian_count": gaussian_count,
                "wall_ms": wall_ms,
            }
        )

    def to_frame(self) -> pd.DataFrame:
        """Log as a data frame with the columns of `LOG_COLUMNS`."""
        return pd.DataFrame(self.rows, columns=LOG_COLUMNS)

    def to_csv(self, dst_filepath: utils.PathType) -> None:
        """Write the log atomically."""
        with utils.atomic_path(dst_filepath) as tmp_filepath:
            self.to_frame().to_csv(tmp_filepath, index=False)
