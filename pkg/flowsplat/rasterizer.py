"""Differentiable Gaussian rasterizer.

Splats projected Gaussians onto the pixel grid and alpha-composites them front to
back. The implementation is dense over (pixel, Gaussian) pairs, which keeps the
forward pass a handful of tensor operations so that torch autograd provides the
backward pass. Pixel centres sit at integer coordinates.
"""

from dataclasses import dataclass
from functools import cached_property

import torch

from flowsplat import settings, utils
from flowsplat.camera import PinholeCamera, flows_between, project_points
from flowsplat.errors import BehindCameraError, DomainError
from flowsplat.gaussians import Gaussian3D, GaussianCloud, quaternion_to_rotation
from flowsplat.gaussians import sh_to_color as _sh_to_color

__all__ = [
    "Contributors",
    "Projected2DGaussian",
    "RenderOutput",
    "project_gaussian",
    "project_gaussians",
    "render",
    "render_depth_mode",
    "render_features",
    "render_flow",
    "render_velocity_map",
]


@dataclass
class Projected2DGaussian:
    """Screen-space Gaussians (batched).

    Attributes
    ----------
    mean2d : torch.Tensor of shape (N, 2)
        Projected centres in pixels.
    cov2d : torch.Tensor of shape (N, 2, 2)
        Projected covariances in px^2, dilation included.
    depth : torch.Tensor of shape (N,)
        Camera-space depth of the centres.
    source_index : torch.Tensor of shape (N,)
        Index into the cloud.
    valid : torch.Tensor of shape (N,)
        False for Gaussians at or behind the near plane.
    """

    mean2d: torch.Tensor
    cov2d: torch.Tensor
    depth: torch.Tensor
    source_index: torch.Tensor
    valid: torch.Tensor


def project_gaussians(
    cam: PinholeCamera,
    means: torch.Tensor,
    quats: torch.Tensor,
    scales: torch.Tensor,
    *,
    dilation: float | None = None,
) -> Projected2DGaussian:
    """Project 3D Gaussians with the local affine (EWA) approximation.

    cov2d = J W Sigma W^T J^T + dilation * I, with J the Jacobian of the central
    projection at the camera-space centre and W the camera rotation.
    """
    if dilation is None:
        dilation = settings.COV2D_DILATION
    mean2d, depth, valid = project_points(cam, means)
    cam_pts = cam.to_camera(means)
    z = torch.where(valid, depth, torch.ones_like(depth))
    x, y = cam_pts[:, 0], cam_pts[:, 1]
    zeros = torch.zeros_like(z)
    jac = torch.stack(
        [
            torch.stack([cam.fx / z, zeros, -cam.fx * x / (z * z)], dim=-1),
            torch.stack([zeros, cam.fy / z, -cam.fy * y / (z * z)], dim=-1),
        ],
        dim=-2,
    )
    rot = quaternion_to_rotation(quats)
    m = rot * scales.unsqueeze(-2)
    cov3d = m @ m.transpose(-1, -2)
    t = jac @ cam.rotation
    cov2d = t @ cov3d @ t.transpose(-1, -2)
    cov2d = cov2d + dilation * torch.eye(2, dtype=cov2d.dtype)
    return Projected2DGaussian(
        mean2d=mean2d,
        cov2d=cov2d,
        depth=depth,
        source_index=torch.arange(means.shape[0]),
        valid=valid,
    )


def project_gaussian(
    cam: PinholeCamera, g: Gaussian3D, *, dilation: float | None = None
) -> Projected2DGaussian:
    """Project a single Gaussian.

    Raises
    ------
    BehindCameraError
        If the centre lies at or behind the near plane.
    """
    proj = project_gaussians(
        cam,
        g.center.unsqueeze(0),
        g.rotation.as_tensor().unsqueeze(0),
        g.scale.unsqueeze(0),
        dilation=dilation,
    )
    if not bool(proj.valid[0]):
        raise BehindCameraError("Gaussian centre at or behind the camera.")
    return proj


@dataclass
class Contributors:
    """Per-pixel contributor records, ordered by nondecreasing depth.

    Attributes
    ----------
    index : torch.Tensor of shape (H, W, K)
        Source Gaussian index, -1 for padding.
    alpha : torch.Tensor of shape (H, W, K)
    weight : torch.Tensor of shape (H, W, K)
        Transmittance-weighted alpha.
    """

    index: torch.Tensor
    alpha: torch.Tensor
    weight: torch.Tensor


@dataclass
class RenderOutput:
    """Result of one rasterization pass.

    The dense `weights` and `alphas` tensors are indexed by Gaussian in storage
    order; they are the complete contributor records from which `contributors`
    keeps the largest `k_contrib` entries per pixel.
    """

    color: torch.Tensor
    depth: torch.Tensor
    alpha: torch.Tensor
    weights: torch.Tensor
    alphas: torch.Tensor
    depths: torch.Tensor
    transmittance: torch.Tensor
    k_contrib: int = settings.K_CONTRIB

    @cached_property
    def contributors(self) -> Contributors:
        """Capped contributor lists, detached from the autograd graph."""
        h, w, n = self.weights.shape
        k = min(self.k_contrib, n)
        weights = self.weights.detach()
        top_w, top_i = torch.topk(weights, k, dim=-1)
        # reorder the kept records front to back
        rank = torch.argsort(torch.argsort(self.depths.detach(), stable=True))
        order = torch.argsort(rank[top_i], dim=-1, stable=True)
        top_i = torch.gather(top_i, -1, order)
        top_w = torch.gather(top_w, -1, order)
        top_a = torch.gather(self.alphas.detach(), -1, top_i)
        empty = top_w <= 0
        return Contributors(
            index=torch.where(empty, -1, top_i),
            alpha=torch.where(empty, 0.0, top_a),
            weight=torch.where(empty, 0.0, top_w),
        )


def _pixel_grid(height: int, width: int) -> torch.Tensor:
    v, u = torch.meshgrid(
        torch.arange(height, dtype=settings.DTYPE),
        torch.arange(width, dtype=settings.DTYPE),
        indexing="ij",
    )
    return torch.stack([u, v], dim=-1).reshape(-1, 2)


def _composite(
    proj: Projected2DGaussian,
    opacities: torch.Tensor,
    height: int,
    width: int,
    *,
    extent_sigmas: float | None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Front-to-back compositing weights.

    Returns per-pixel alphas and weights of shape (P, N) in storage order and the
    final transmittance of shape (P,).
    """
    n = proj.mean2d.shape[0]
    pixels = _pixel_grid(height, width)
    if n == 0:
        empty = torch.zeros((pixels.shape[0], 0), dtype=settings.DTYPE)
        return empty, empty, torch.ones(pixels.shape[0], dtype=settings.DTYPE)

    a, b, c = proj.cov2d[:, 0, 0], proj.cov2d[:, 0, 1], proj.cov2d[:, 1, 1]
    det = a * c - b * b
    conic_a, conic_b, conic_c = c / det, -b / det, a / det
    d = pixels.unsqueeze(1) - proj.mean2d.unsqueeze(0)
    dx, dy = d[..., 0], d[..., 1]
    maha2 = conic_a * dx * dx + 2 * conic_b * dx * dy + conic_c * dy * dy
    alpha = (opacities * torch.exp(-0.5 * maha2)).clamp(max=settings.ALPHA_MAX)
    mask = proj.valid.unsqueeze(0).expand_as(alpha)
    if extent_sigmas is not None:
        mask = mask & (maha2 <= extent_sigmas**2)
    alpha = torch.where(mask, alpha, torch.zeros_like(alpha))

    depth_key = torch.where(
        proj.valid, proj.depth.detach(), torch.full_like(proj.depth, float("inf"))
    )
    order = torch.argsort(depth_key, stable=True)
    alpha_sorted = alpha[:, order]
    # early termination: a Gaussian that would push the transmittance below the
    # cutoff is skipped together with everything behind it
    trans_test = torch.cumprod(1 - alpha_sorted.detach(), dim=1)
    keep = trans_test >= settings.TRANSMITTANCE_MIN
    alpha_sorted = torch.where(keep, alpha_sorted, torch.zeros_like(alpha_sorted))
    trans_incl = torch.cumprod(1 - alpha_sorted, dim=1)
    trans_excl = torch.cat(
        [torch.ones_like(trans_incl[:, :1]), trans_incl[:, :-1]], dim=1
    )
    weights_sorted = alpha_sorted * trans_excl
    inverse = torch.argsort(order)
    return alpha_sorted[:, inverse], weights_sorted[:, inverse], trans_incl[:, -1]


def render_depth_mode(
    output: RenderOutput, *, alpha_floor: float | None = None
) -> torch.Tensor:
    """Alpha-weighted mean depth, 0 where the pixel alpha is below `alpha_floor`."""
    if alpha_floor is None:
        alpha_floor = settings.ALPHA_FLOOR
    total = output.weights.sum(-1)
    numer = (output.weights * output.depths).sum(-1)
    covered = output.alpha > alpha_floor
    safe = torch.where(covered, total, torch.ones_like(total))
    return torch.where(covered, numer / safe, torch.zeros_like(numer))


def render(
    cloud: GaussianCloud,
    cam: PinholeCamera,
    background: utils.ArrayLike = (0.0, 0.0, 0.0),
    *,
    extent_sigmas: float | None = settings.EXTENT_SIGMAS,
    alpha_floor: float | None = None,
    k_contrib: int | None = None,
) -> RenderOutput:
    """Render colour, depth, alpha and contributor records.

    Parameters
    ----------
    cloud : GaussianCloud
        Gaussians to render, possibly empty.
    cam : PinholeCamera
    background : array-like of shape (3,), default black
        Colour blended behind the Gaussians.
    extent_sigmas : float or None, default `settings.EXTENT_SIGMAS`
        Pixels further than this many standard deviations from a projected centre
        receive no contribution from it. None disables truncation.
    alpha_floor : float, optional
        Pixels with alpha below this get the depth sentinel 0. Defaults to
        `settings.ALPHA_FLOOR`.
    k_contrib : int, optional
        Contributor records kept per pixel. Defaults to `settings.K_CONTRIB`.

    Returns
    -------
    RenderOutput
    """
    if k_contrib is None:
        k_contrib = settings.K_CONTRIB
    background = utils.as_tensor(background).reshape(3)
    h, w = cam.height, cam.width
    proj = project_gaussians(cam, cloud.means, cloud.quats, cloud.scales)
    alphas, weights, trans = _composite(
        proj, cloud.opacities, h, w, extent_sigmas=extent_sigmas
    )
    view_dirs = cloud.means - cam.center
    view_dirs = view_dirs / view_dirs.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    colors = _sh_to_color(cloud.sh, view_dirs)
    color = weights @ colors + trans.unsqueeze(-1) * background
    output = RenderOutput(
        color=color.reshape(h, w, 3),
        depth=torch.zeros((h, w), dtype=settings.DTYPE),
        alpha=(1 - trans).reshape(h, w),
        weights=weights.reshape(h, w, len(cloud)),
        alphas=alphas.reshape(h, w, len(cloud)),
        depths=proj.depth,
        transmittance=trans.reshape(h, w),
        k_contrib=k_contrib,
    )
    output.depth = render_depth_mode(output, alpha_floor=alpha_floor)
    return output


def render_features(
    cloud: GaussianCloud,
    cam: PinholeCamera,
    features: torch.Tensor,
    *,
    extent_sigmas: float | None = settings.EXTENT_SIGMAS,
) -> torch.Tensor:
    """Composite arbitrary per-Gaussian features of shape (N, C) into (H, W, C).

    Uses the same weights as the colour channel, with a zero background.
    """
    if features.shape[0] != len(cloud):
        raise DomainError(
            f"Expected {len(cloud)} per-Gaussian values, got {features.shape[0]}."
        )
    proj = project_gaussians(cam, cloud.means, cloud.quats, cloud.scales)
    _, weights, _ = _composite(
        proj, cloud.opacities, cam.height, cam.width, extent_sigmas=extent_sigmas
    )
    return (weights @ features).reshape(cam.height, cam.width, -1)


def render_velocity_map(
    cloud: GaussianCloud,
    cam: PinholeCamera,
    values: utils.ArrayLike,
    *,
    extent_sigmas: float | None = settings.EXTENT_SIGMAS,
) -> torch.Tensor:
    """Composite a per-Gaussian scalar (e.g. projected speed) into an (H, W) map."""
    values = utils.as_tensor(values).reshape(-1)
    if values.shape[0] != len(cloud):
        raise DomainError(
            f"Expected {len(cloud)} per-Gaussian values, got {values.shape[0]}."
        )
    return render_features(
        cloud, cam, values.unsqueeze(-1), extent_sigmas=extent_sigmas
    )[..., 0]


def render_flow(
    cloud_prev: GaussianCloud,
    cam_prev: PinholeCamera,
    cam_curr: PinholeCamera,
    means_curr: torch.Tensor,
    *,
    extent_sigmas: float | None = settings.EXTENT_SIGMAS,
) -> torch.Tensor:
    """Alpha-composited optical flow of shape (H, W, 2).

    Each Gaussian carries the 2D displacement of its centre between the two
    states, and the displacements are blended with the weights of the previous
    state. Gaussians that cannot be projected in either camera carry no flow.
    """
    flows, valid = flows_between(cam_prev, cam_curr, cloud_prev.means, means_curr)
    flows = torch.where(valid.unsqueeze(-1), flows, torch.zeros_like(flows))
    return render_features(cloud_prev, cam_prev, flows, extent_sigmas=extent_sigmas)
