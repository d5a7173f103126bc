"""Motion correspondence between pixels and Gaussians."""

import logging as lg
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch
from scipy import spatial

from flowsplat import settings, utils
from flowsplat.camera import PinholeCamera, flows_between, unproject
from flowsplat.errors import DomainError, StaleCandidatesError
from flowsplat.gaussians import GaussianCloud, quaternion_to_rotation

__all__ = [
    "CandidateSet",
    "DynamicMask3D",
    "FlowField2D",
    "SpatialIndex",
    "build_spatial_index",
    "candidates_to_csv",
    "foreground_search",
    "lift_dynamic_mask",
    "predicted_flows",
]


class SpatialIndex:
    """Exact Euclidean k-nearest-neighbour index over Gaussian centres.

    Parameters
    ----------
    centers : array-like of shape (N, 3)
    generation : int, default 0
        Generation of the cloud the centres were taken from.
    """

    def __init__(self, centers: utils.ArrayLike, *, generation: int = 0):
        """Build the kd-tree."""
        centers = np.asarray(utils.as_tensor(centers).detach(), dtype="float64")
        if centers.shape[0] == 0:
            raise DomainError("Cannot build a spatial index over an empty cloud.")
        self.tree = spatial.cKDTree(centers.reshape(-1, 3))
        self.generation = generation

    def __len__(self) -> int:
        """Number of indexed centres."""
        return self.tree.n

    def query(
        self, points: utils.ArrayLike, k: int
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Distances and indices of the `k` nearest centres, closest first.

        When `k` exceeds the number of centres, every centre is returned.

        Returns
        -------
        dist : torch.Tensor of shape (M, min(k, N))
        index : torch.Tensor of shape (M, min(k, N))
        """
        if k < 1:
            raise DomainError(f"`k` must be at least 1, got {k}.")
        points = np.asarray(utils.as_tensor(points).detach()).reshape(-1, 3)
        k = min(k, len(self))
        # a list of k forces 2D outputs even for k = 1
        dist, index = self.tree.query(points, k=list(range(1, k + 1)))
        return (
            torch.as_tensor(dist, dtype=settings.DTYPE),
            torch.as_tensor(index, dtype=torch.int64),
        )


def build_spatial_index(cloud: GaussianCloud) -> SpatialIndex:
    """Index the centres of `cloud`."""
    return SpatialIndex(cloud.means, generation=cloud.generation)


@dataclass(frozen=True)
class FlowField2D:
    """Dense 2D flow with a validity mask.

    Non-finite flow vectors are invalidated (and zeroed) on construction.

    Parameters
    ----------
    flow : torch.Tensor of shape (H, W, 2)
        Pixel displacement (du, dv).
    valid : torch.Tensor of shape (H, W), optional
        Boolean mask, all True if None.
    """

    flow: torch.Tensor
    valid: torch.Tensor | None = None

    def __post_init__(self):
        """Sanitize the field."""
        flow = utils.as_tensor(self.flow)
        if flow.ndim != 3 or flow.shape[-1] != 2:
            raise DomainError(
                f"Flow must have shape (H, W, 2), got {tuple(flow.shape)}."
            )
        valid = self.valid
        if valid is None:
            valid = torch.ones(flow.shape[:2], dtype=torch.bool)
        valid = torch.as_tensor(valid, dtype=torch.bool) & torch.isfinite(flow).all(-1)
        flow = torch.where(valid.unsqueeze(-1), flow, torch.zeros_like(flow))
        object.__setattr__(self, "flow", flow)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        """(height, width)."""
        return tuple(self.flow.shape[:2])

    @property
    def magnitude(self) -> torch.Tensor:
        """Flow norm, 0 on invalid pixels."""
        return self.flow.norm(dim=-1)

    def sample(self, pixels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Flow vectors and validity at integer pixel coordinates (u, v)."""
        u, v = pixels[:, 0].long(), pixels[:, 1].long()
        return self.flow[v, u], self.valid[v, u]


@dataclass(frozen=True)
class CandidateSet:
    """Foreground candidates of the valid pixels of one view.

    Attributes
    ----------
    pixels : torch.Tensor of shape (M, 2)
        Pixel coordinates (u, v).
    points : torch.Tensor of shape (M, 3)
        Unprojected world points.
    indices : torch.Tensor of shape (M, K)
        Candidate Gaussian indices, nearest first.
    contributions : torch.Tensor of shape (M, K)
        Contribution of each candidate at the unprojected point.
    weights : torch.Tensor of shape (M, K)
        Contributions normalized by their per-pixel maximum.
    generation : int
        Generation of the cloud the candidates index into.
    view : int, default 0
        Camera index in multi-view scenes.
    """

    pixels: torch.Tensor
    points: torch.Tensor
    indices: torch.Tensor
    contributions: torch.Tensor
    weights: torch.Tensor
    generation: int
    view: int = 0

    def __len__(self) -> int:
        """Number of valid pixels."""
        return self.pixels.shape[0]

    @property
    def k(self) -> int:
        """Candidates per pixel."""
        return self.indices.shape[1]

    def selected(self, n_gaussians: int) -> torch.Tensor:
        """Boolean mask of the Gaussians that are a candidate of any pixel."""
        mask = torch.zeros(n_gaussians, dtype=torch.bool)
        mask[self.indices.reshape(-1)] = True
        return mask

    def check_generation(self, cloud: GaussianCloud) -> None:
        """Raise if the candidates were built for another cloud generation."""
        if cloud.generation != self.generation:
            raise StaleCandidatesError(
                f"Candidates were built for generation {self.generation}, the cloud "
                f"is at generation {cloud.generation}."
            )


@dataclass(frozen=True)
class DynamicMask3D:
    """Per-Gaussian dynamic labels.

    Attributes
    ----------
    flags : torch.Tensor of shape (N,)
        True for dynamic Gaussians.
    tau : float
        Threshold that produced the labels.
    generation : int
    """

    flags: torch.Tensor
    tau: float
    generation: int

    def __len__(self) -> int:
        """Number of labelled Gaussians."""
        return self.flags.shape[0]

    def check(self, cloud: GaussianCloud) -> None:
        """Raise if the labels belong to another cloud generation."""
        if cloud.generation != self.generation or len(cloud) != len(self):
            raise StaleCandidatesError(
                f"Dynamic mask of generation {self.generation} ({len(self)} "
                f"Gaussians) does not match the cloud at generation "
                f"{cloud.generation} ({len(cloud)} Gaussians)."
            )


def foreground_search(
    depth_prev: torch.Tensor,
    cam_prev: PinholeCamera,
    cloud_prev: GaussianCloud,
    k: int | None = None,
    alpha_map_prev: torch.Tensor | None = None,
    *,
    alpha_floor: float | None = None,
    stride: int | None = None,
    index: SpatialIndex | None = None,
    view: int = 0,
) -> CandidateSet:
    """Find the foreground candidates of every valid pixel.

    Valid pixels are unprojected with the rendered depth of the previous state and
    the `k` nearest Gaussian centres become their candidates. Each candidate carries
    its contribution at the unprojected point, and the contributions of a pixel are
    normalized so that the largest weight is exactly 1.

    Parameters
    ----------
    depth_prev : torch.Tensor of shape (H, W)
        Depth rendered from `cloud_prev` under `cam_prev`, 0 where empty.
    cam_prev : PinholeCamera
    cloud_prev : GaussianCloud
    k : int, optional
        Candidates per pixel. Defaults to `settings.K_CANDIDATES`.
    alpha_map_prev : torch.Tensor of shape (H, W), optional
        Rendered alpha; pixels below `alpha_floor` are invalid. If None, only the
        depth sentinel is used.
    alpha_floor : float, optional
        Defaults to `settings.ALPHA_FLOOR`.
    stride : int, optional
        Pixel subsampling stride. Defaults to `settings.PIXEL_STRIDE`.
    index : SpatialIndex, optional
        Prebuilt index over `cloud_prev`. Built on the fly if None.
    view : int, default 0
        Camera index recorded in the candidate set.

    Returns
    -------
    CandidateSet
    """
    if k is None:
        k = settings.K_CANDIDATES
    if alpha_floor is None:
        alpha_floor = settings.ALPHA_FLOOR
    if stride is None:
        stride = settings.PIXEL_STRIDE
    depth_prev = utils.as_tensor(depth_prev).detach()
    shape = (cam_prev.height, cam_prev.width)
    if tuple(depth_prev.shape) != shape:
        raise DomainError(
            f"Depth map of shape {tuple(depth_prev.shape)} does not match the "
            f"camera image size {shape}."
        )
    if index is None:
        index = build_spatial_index(cloud_prev)

    valid = torch.isfinite(depth_prev) & (depth_prev > 0)
    if alpha_map_prev is not None:
        alpha_map_prev = utils.as_tensor(alpha_map_prev).detach()
        if tuple(alpha_map_prev.shape) != shape:
            raise DomainError("Alpha map does not match the camera image size.")
        valid &= alpha_map_prev >= alpha_floor
    strided = torch.zeros_like(valid)
    strided[::stride, ::stride] = True
    v, u = torch.nonzero(valid & strided, as_tuple=True)
    pixels = torch.stack([u, v], dim=-1).to(settings.DTYPE)
    points = (
        unproject(cam_prev, pixels[:, 0], pixels[:, 1], depth_prev[v, u])
        if len(u)
        else torch.zeros((0, 3), dtype=settings.DTYPE)
    )

    kk = min(k, len(index))
    if len(u) == 0:
        empty = torch.zeros((0, kk), dtype=settings.DTYPE)
        return CandidateSet(
            pixels=pixels,
            points=points,
            indices=torch.zeros((0, kk), dtype=torch.int64),
            contributions=empty,
            weights=empty,
            generation=cloud_prev.generation,
            view=view,
        )
    _, indices = index.query(points, kk)
    with torch.no_grad():
        means = cloud_prev.means[indices]
        rot = quaternion_to_rotation(cloud_prev.quats[indices])
        local = (
            rot.transpose(-1, -2) @ (points.unsqueeze(1) - means).unsqueeze(-1)
        ).squeeze(-1) / cloud_prev.scales[indices]
        # the normalization is done in log space so that the per-pixel maximum
        # is exactly 1 even when every contribution underflows
        log_phi = torch.log(cloud_prev.opacities[indices]) - 0.5 * (local**2).sum(-1)
        log_w = log_phi - log_phi.max(dim=-1, keepdim=True).values
        weights = torch.exp(log_w).clamp_min(settings.MIN_WEIGHT)
    return CandidateSet(
        pixels=pixels,
        points=points,
        indices=indices,
        contributions=torch.exp(log_phi),
        weights=weights,
        generation=cloud_prev.generation,
        view=view,
    )


def _positions(
    state: GaussianCloud | torch.Tensor, cands: CandidateSet
) -> torch.Tensor:
    if isinstance(state, GaussianCloud):
        cands.check_generation(state)
        return state.means
    return state


def predicted_flows(
    cands: CandidateSet,
    positions_prev: GaussianCloud | torch.Tensor,
    positions_curr: GaussianCloud | torch.Tensor,
    cam_prev: PinholeCamera,
    cam_curr: PinholeCamera,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Reproject the candidate motion into 2D flows.

    Every candidate of a pixel gets its own flow Proj_curr(mu_t) - Proj_prev(mu_t-1),
    all of which are later compared with the same observed flow of that pixel.

    Parameters
    ----------
    cands : CandidateSet
    positions_prev, positions_curr : GaussianCloud or torch.Tensor of shape (N, 3)
        States at t-1 and t. Clouds are checked against the candidate generation;
        gradients flow into both position tensors.
    cam_prev, cam_curr : PinholeCamera

    Returns
    -------
    flows : torch.Tensor of shape (M, K, 2)
    mask : torch.Tensor of shape (M, K)
        False for candidates behind either camera.
    """
    prev = _positions(positions_prev, cands)
    curr = _positions(positions_curr, cands)
    if prev.shape != curr.shape:
        raise StaleCandidatesError("The two states have different Gaussian counts.")
    if cands.indices.numel() and int(cands.indices.max()) >= prev.shape[0]:
        raise StaleCandidatesError("Candidate indices exceed the number of Gaussians.")
    flows, mask = flows_between(
        cam_prev, cam_curr, prev[cands.indices], curr[cands.indices]
    )
    flows = torch.where(mask.unsqueeze(-1), flows, torch.zeros_like(flows))
    return flows, mask


def lift_dynamic_mask(
    cands_per_view: Sequence[CandidateSet],
    dynamic_maps: Sequence[torch.Tensor],
    tau: float | None = None,
    *,
    n_gaussians: int,
) -> DynamicMask3D:
    """Label Gaussians as dynamic from per-view dynamic maps.

    Each Gaussian is credited with the largest weight * D(pixel) over every pixel
    of every view where it is a candidate, and is dynamic when the credit reaches
    `tau`.

    Parameters
    ----------
    cands_per_view : sequence of CandidateSet
    dynamic_maps : sequence of torch.Tensor of shape (H, W)
        Dynamic maps in [0, 1], aligned with `cands_per_view`.
    tau : float, optional
        Defaults to `settings.TAU_DYN`.
    n_gaussians : int

    Returns
    -------
    DynamicMask3D
    """
    if tau is None:
        tau = settings.TAU_DYN
    if len(cands_per_view) == 0:
        raise DomainError("At least one view is needed to lift a dynamic mask.")
    if len(cands_per_view) != len(dynamic_maps):
        raise DomainError("Need exactly one dynamic map per candidate set.")
    generations = {cands.generation for cands in cands_per_view}
    if len(generations) > 1:
        raise StaleCandidatesError(
            f"Candidate sets mix cloud generations {sorted(generations)}."
        )
    credit = torch.zeros(n_gaussians, dtype=settings.DTYPE)
    for cands, dyn in zip(cands_per_view, dynamic_maps):
        if len(cands) == 0:
            continue
        dyn = utils.as_tensor(dyn).detach()
        u, v = cands.pixels[:, 0].long(), cands.pixels[:, 1].long()
        scores = cands.weights * dyn[v, u].unsqueeze(-1)
        credit = credit.scatter_reduce(
            0, cands.indices.reshape(-1), scores.reshape(-1), reduce="amax"
        )
    flags = credit >= tau
    lg.debug(f"{int(flags.sum())} of {n_gaussians} Gaussians labelled dynamic.")
    return DynamicMask3D(flags=flags, tau=tau, generation=generations.pop())


def candidates_to_csv(cands: CandidateSet, dst_filepath: utils.PathType) -> None:
    """Dump a candidate set as CSV rows (u, v, rank, gaussian_index, weight)."""
    m, k = cands.indices.shape
    df = pd.DataFrame(
        {
            "u": cands.pixels[:, 0].long().repeat_interleave(k).numpy(),
            "v": cands.pixels[:, 1].long().repeat_interleave(k).numpy(),
            "rank": np.tile(np.arange(k), m),
            "gaussian_index": cands.indices.reshape(-1).numpy(),
            "weight": cands.weights.reshape(-1).numpy(),
        }
    )
    with utils.atomic_path(dst_filepath) as tmp_filepath:
        df.to_csv(tmp_filepath, index=False)
