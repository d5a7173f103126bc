"""Deformation field.

A canonical cloud is deformed per timestamp by decoding features of a multi-level
HexPlane, six 2D feature planes over the (x, y, z, t) box. A velocity head
decodes the features of adjacent timestamps into instantaneous 3D velocities.
"""

from collections.abc import Sequence

import numpy as np
import pandas as pd
import torch
from torch import nn
from torch.nn import functional as F

from flowsplat import settings, utils
from flowsplat.camera import PinholeCamera, flows_between
from flowsplat.errors import DomainError
from flowsplat.gaussians import Gaussian3D, GaussianCloud, Quaternion
from flowsplat.losses import normalize_map
from flowsplat.rasterizer import render_velocity_map

__all__ = [
    "PLANE_AXES",
    "DeformDecoder",
    "DeformModel",
    "HexPlaneField",
    "VelocityHead",
    "deform",
    "displacement_histogram",
    "query_feature",
    "refined_dynamic_map",
    "velocity",
]

# coordinate pairs of the six planes: xy, xz, yz, xt, yt, zt
PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))


class HexPlaneField(nn.Module):
    """Multi-resolution HexPlane feature field.

    Parameters
    ----------
    bounds : array-like of shape (2, 3)
        Lower and upper corners of the scene box. Queries are clamped to it.
    time_range : tuple of float, default (0, 1)
    feature_dim : int, optional
        Channels per plane. Defaults to `settings.FEATURE_DIM`.
    resolutions : sequence of int, optional
        Spatial resolution of each level. Defaults to `settings.PLANE_RESOLUTIONS`.
    time_resolution : int, optional
        Temporal resolution of every level. Defaults to `settings.TIME_RESOLUTION`.
    init_range : tuple of float, optional
        Uniform initialization range of the spatial planes, the time planes start
        at 1. Defaults to `settings.PLANE_INIT_RANGE`.
    generator : torch.Generator, optional
        Seeded generator for the initialization.
    """

    def __init__(
        self,
        bounds: utils.ArrayLike,
        time_range: tuple[float, float] = (0.0, 1.0),
        *,
        feature_dim: int | None = None,
        resolutions: Sequence[int] | None = None,
        time_resolution: int | None = None,
        init_range: tuple[float, float] | None = None,
        generator: torch.Generator | None = None,
    ):
        """Allocate and initialize the planes."""
        super().__init__()
        if feature_dim is None:
            feature_dim = settings.FEATURE_DIM
        if resolutions is None:
            resolutions = settings.PLANE_RESOLUTIONS
        if time_resolution is None:
            time_resolution = settings.TIME_RESOLUTION
        if init_range is None:
            init_range = settings.PLANE_INIT_RANGE
        bounds = utils.as_tensor(bounds).reshape(2, 3)
        if not bool(torch.all(bounds[1] > bounds[0])):
            raise DomainError(f"Degenerate scene bounds {bounds.tolist()}.")
        if time_range[1] <= time_range[0]:
            raise DomainError(f"Degenerate time range {time_range}.")
        self.register_buffer("bounds", bounds.clone())
        self.time_range = (float(time_range[0]), float(time_range[1]))
        self.feature_dim = int(feature_dim)
        self.resolutions = tuple(int(r) for r in resolutions)
        self.time_resolution = int(time_resolution)

        self.planes = nn.ParameterList()
        for res in self.resolutions:
            sizes = (res, res, res, self.time_resolution)
            for a, b in PLANE_AXES:
                # grid_sample reads the last axis as the first coordinate
                plane = torch.empty(
                    (1, self.feature_dim, sizes[b], sizes[a]), dtype=settings.DTYPE
                )
                if b == 3:
                    nn.init.ones_(plane)
                else:
                    plane.uniform_(*init_range, generator=generator)
                self.planes.append(nn.Parameter(plane))

    @property
    def out_dim(self) -> int:
        """Length of a fused feature."""
        return self.feature_dim * len(self.resolutions)

    def normalize(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Map (x, t) to clamped [-1, 1]^4 grid coordinates of shape (M, 4)."""
        lo, hi = self.bounds[0], self.bounds[1]
        xn = 2 * (x - lo) / (hi - lo) - 1
        t0, t1 = self.time_range
        tn = 2 * (t - t0) / (t1 - t0) - 1
        return torch.cat([xn, tn.unsqueeze(-1)], dim=-1).clamp(-1.0, 1.0)

    def forward(self, x: torch.Tensor, t: torch.Tensor | float) -> torch.Tensor:
        """Fused features of shape (M, out_dim) at points (M, 3) and times."""
        x = x.reshape(-1, 3)
        t = utils.as_tensor(t).reshape(-1)
        if t.shape[0] == 1:
            t = t.expand(x.shape[0])
        coords = self.normalize(x, t)
        features = []
        for level in range(len(self.resolutions)):
            fused = 1.0
            for p, (a, b) in enumerate(PLANE_AXES):
                plane = self.planes[level * len(PLANE_AXES) + p]
                grid = coords[:, [a, b]].view(1, 1, -1, 2)
                interp = F.grid_sample(
                    plane,
                    grid,
                    mode="bilinear",
                    align_corners=True,
                    padding_mode="border",
                )
                fused = fused * interp.view(self.feature_dim, -1).T
            features.append(fused)
        return torch.cat(features, dim=-1)

    def manifest(self) -> dict:
        """Shapes and settings needed to rebuild the field."""
        return {
            "bounds": self.bounds.tolist(),
            "time_range": list(self.time_range),
            "feature_dim": self.feature_dim,
            "resolutions": list(self.resolutions),
            "time_resolution": self.time_resolution,
            "plane_shapes": [list(p.shape) for p in self.planes],
        }


def query_feature(
    field: HexPlaneField, x: utils.ArrayLike, t: utils.ArrayLike | float
) -> torch.Tensor:
    """Fused HexPlane feature at point(s) `x` and time(s) `t`.

    Per level, each of the six planes is bilinearly interpolated, the six samples
    are multiplied elementwise and the levels are concatenated.
    """
    x = utils.as_tensor(x)
    single = x.ndim == 1
    out = field(x.reshape(-1, 3), utils.as_tensor(t))
    return out[0] if single else out


def _mlp(in_dim: int, width: int, out_dim: int) -> nn.Sequential:
    mlp = nn.Sequential(
        nn.Linear(in_dim, width),
        nn.ReLU(),
        nn.Linear(width, width),
        nn.ReLU(),
        nn.Linear(width, out_dim),
    ).to(settings.DTYPE)
    nn.init.zeros_(mlp[-1].weight)
    nn.init.zeros_(mlp[-1].bias)
    return mlp


class DeformDecoder(nn.Module):
    """Shared trunk with zero-initialized position, rotation and scale heads."""

    def __init__(self, in_dim: int, *, width: int | None = None):
        """Build the layers."""
        super().__init__()
        if width is None:
            width = settings.DECODER_WIDTH
        self.in_dim, self.width = int(in_dim), int(width)
        self.trunk = nn.Sequential(
            nn.Linear(in_dim, width), nn.ReLU(), nn.Linear(width, width), nn.ReLU()
        ).to(settings.DTYPE)
        self.position = nn.Linear(width, 3).to(settings.DTYPE)
        self.rotation = nn.Linear(width, 4).to(settings.DTYPE)
        self.scale = nn.Linear(width, 3).to(settings.DTYPE)
        for head in (self.position, self.rotation, self.scale):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(
        self, feature: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Offsets (d_mu, d_q, d_log_s) for features of shape (M, in_dim)."""
        h = self.trunk(feature)
        return self.position(h), self.rotation(h), self.scale(h)


class VelocityHead(nn.Module):
    """Decode (g_t, g_t-dt, g_t+dt) into a 3D velocity, zero at initialization."""

    def __init__(self, in_dim: int, *, width: int | None = None):
        """Build the layers."""
        super().__init__()
        if width is None:
            width = settings.DECODER_WIDTH
        self.in_dim, self.width = int(in_dim), int(width)
        self.mlp = _mlp(3 * in_dim, width, 3)

    def forward(
        self, g_t: torch.Tensor, g_prev: torch.Tensor, g_next: torch.Tensor
    ) -> torch.Tensor:
        """Velocities of shape (M, 3)."""
        return self.mlp(torch.cat([g_t, g_prev, g_next], dim=-1))


def deform(decoder: DeformDecoder, g: Gaussian3D, feature: torch.Tensor) -> Gaussian3D:
    """Deform a single canonical Gaussian with the decoded offsets.

    mu' = mu + d_mu, q' = normalize(q + d_q), s' = s exp(d_s); opacity and colour
    are unchanged. The rotation goes through the float-valued `Quaternion`, so
    gradients do not reach d_q: use it for evaluation and train with
    `DeformModel.deform_cloud`, which agrees with it.
    """
    d_mu, d_q, d_s = (o[0] for o in decoder(feature.reshape(1, -1)))
    return Gaussian3D(
        center=g.center + d_mu,
        rotation=Quaternion.from_tensor(g.rotation.as_tensor() + d_q),
        scale=g.scale * torch.exp(d_s),
        sh_coeffs=g.sh_coeffs,
        opacity=g.opacity,
        view_confidence=g.view_confidence,
    )


def velocity(
    field: HexPlaneField,
    head: VelocityHead,
    x: torch.Tensor,
    t: float,
    dt: float,
) -> torch.Tensor:
    """Instantaneous velocity at points `x` of shape (M, 3) and time `t`.

    Neighbour times outside the field's time range use the feature at `t`.
    """
    x = x.reshape(-1, 3)
    g_t = field(x, t)
    t0, t1 = field.time_range
    # tolerate round-off in t = frame * dt
    tol = 1e-9 * (t1 - t0)
    g_prev = field(x, t - dt) if t - dt >= t0 - tol else g_t
    g_next = field(x, t + dt) if t + dt <= t1 + tol else g_t
    return head(g_t, g_prev, g_next)


class DeformModel(nn.Module):
    """HexPlane field, deformation decoder and optional velocity head.

    Parameters
    ----------
    bounds : array-like of shape (2, 3)
        Scene box of the field.
    n_frames : int
        Number of frames; frame f sits at time f / (n_frames - 1).
    use_injector : bool, default True
        Whether to build the velocity head.
    seed : int, default 0
        Seed of the parameter initialization.
    field_kwargs : mapping, optional
        Keyword arguments passed to `HexPlaneField`.
    width : int, optional
        Hidden width of the decoders. Defaults to `settings.DECODER_WIDTH`.
    """

    def __init__(
        self,
        bounds: utils.ArrayLike,
        n_frames: int,
        *,
        use_injector: bool = True,
        seed: int = 0,
        field_kwargs: utils.KwargsType = None,
        width: int | None = None,
    ):
        """Build the sub-modules."""
        super().__init__()
        if n_frames < 2:
            raise DomainError(
                f"A deformation model needs at least 2 frames, got {n_frames}."
            )
        if field_kwargs is None:
            _field_kwargs = {}
        else:
            _field_kwargs = dict(field_kwargs)
        self.n_frames = int(n_frames)
        self.seed = int(seed)
        # the layer initializers draw from the global generator
        with torch.random.fork_rng():
            torch.manual_seed(self.seed)
            self.field = HexPlaneField(bounds, (0.0, 1.0), **_field_kwargs)
            self.decoder = DeformDecoder(self.field.out_dim, width=width)
            self.velocity_head = (
                VelocityHead(self.field.out_dim, width=width) if use_injector else None
            )

    @property
    def dt(self) -> float:
        """Time step between adjacent frames."""
        return 1.0 / (self.n_frames - 1)

    def frame_time(self, frame: int) -> float:
        """Normalized time of `frame`."""
        return frame * self.dt

    def deform_cloud(self, cloud: GaussianCloud, t: float) -> GaussianCloud:
        """State of the canonical `cloud` at time `t`.

        The deformed quaternions are left unnormalized; every consumer normalizes
        them, so a zero offset reproduces the canonical state bit for bit.
        """
        if len(cloud) == 0:
            return cloud.with_geometry(cloud.means)
        d_mu, d_q, d_s = self.decoder(self.field(cloud.means, t))
        return cloud.with_geometry(
            cloud.means + d_mu, cloud.quats + d_q, cloud.log_scales + d_s
        )

    def velocities(self, means: torch.Tensor, t: float) -> torch.Tensor:
        """Velocities at the given centres, zeros without a velocity head."""
        if self.velocity_head is None or means.shape[0] == 0:
            return torch.zeros_like(means)
        return velocity(self.field, self.velocity_head, means, t, self.dt)

    def perturb_heads_(self, std: float, *, generator: torch.Generator) -> None:
        """Add Gaussian noise to the zero-initialized output layers."""
        heads = [self.decoder.position, self.decoder.rotation, self.decoder.scale]
        if self.velocity_head is not None:
            heads.append(self.velocity_head.mlp[-1])
        with torch.no_grad():
            for head in heads:
                for p in head.parameters():
                    noise = torch.randn(p.shape, generator=generator, dtype=p.dtype)
                    p.add_(std * noise)

    def manifest(self) -> dict:
        """Layer sizes and field settings needed to rebuild the model."""
        return {
            "n_frames": self.n_frames,
            "seed": self.seed,
            "use_injector": self.velocity_head is not None,
            "decoder_width": self.decoder.width,
            "field": self.field.manifest(),
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> "DeformModel":
        """Empty model with the architecture described by `manifest`."""
        field = manifest["field"]
        return cls(
            field["bounds"],
            manifest["n_frames"],
            use_injector=manifest["use_injector"],
            seed=manifest["seed"],
            width=manifest["decoder_width"],
            field_kwargs={
                "feature_dim": field["feature_dim"],
                "resolutions": field["resolutions"],
                "time_resolution": field["time_resolution"],
            },
        )


def refined_dynamic_map(
    cloud_t: GaussianCloud,
    cams: Sequence[PinholeCamera],
    velocities: torch.Tensor,
    dt: float,
    *,
    extent_sigmas: float | None = settings.EXTENT_SIGMAS,
) -> list[torch.Tensor]:
    """Dynamic maps rendered from learned velocities, one per camera.

    Each Gaussian carries ||Proj(mu + v dt) - Proj(mu)|| with both projections in
    the same camera, so camera motion does not show up in the map.
    """
    maps = []
    with torch.no_grad():
        means = cloud_t.means.detach()
        moved = means + velocities.detach() * dt
        for cam in cams:
            flow, valid = flows_between(cam, cam, means, moved)
            speed = torch.where(valid, flow.norm(dim=-1), 0.0)
            rendered = render_velocity_map(
                cloud_t.detach(), cam, speed, extent_sigmas=extent_sigmas
            )
            maps.append(normalize_map(rendered))
    return maps


def displacement_histogram(
    model: DeformModel,
    cloud: GaussianCloud,
    *,
    bins: int = 20,
) -> pd.DataFrame:
    """Histogram of per-Gaussian centre displacements between adjacent frames.

    Returns
    -------
    pandas.DataFrame
        Columns `bin_start`, `bin_end` and `count`.
    """
    disp = []
    with torch.no_grad():
        prev = model.deform_cloud(cloud, 0.0).means
        for frame in range(1, model.n_frames):
            curr = model.deform_cloud(cloud, model.frame_time(frame)).means
            disp.append((curr - prev).norm(dim=-1).numpy())
            prev = curr
    values = np.concatenate(disp) if disp else np.zeros(0)
    counts, edges = np.histogram(values, bins=bins)
    return pd.DataFrame(
        {"bin_start": edges[:-1], "bin_end": edges[1:], "count": counts}
    )
