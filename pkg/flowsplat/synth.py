"""Synthetic dynamic scenes.

Scenes are blobs of Gaussians following simple motion programs, observed by a
multi-view rig or a monocular camera moving on an arc. The generator renders the
ground-truth states with `flowsplat.rasterizer` and derives the forward optical
flow of every pixel from the motion of its dominant contributor, which stands in
for a perfect 2D flow predictor.
"""

import configparser
import dataclasses
import logging as lg
import math
import os
import re
from dataclasses import dataclass, field
from os import path

import numpy as np
import pandas as pd
import torch

from flowsplat import formats, settings, utils
from flowsplat.camera import PinholeCamera, flows_between, read_camera, write_camera
from flowsplat.correspondence import FlowField2D
from flowsplat.errors import ConfigError, DomainError
from flowsplat.gaussians import GaussianCloud
from flowsplat.rasterizer import render

__all__ = [
    "MOTIONS",
    "PRESETS",
    "RIGS",
    "BlobSpec",
    "Dataset",
    "FrameObservation",
    "GroundTruth",
    "SceneSpec",
    "corrupt_flow",
    "generate",
    "load_dataset",
    "moving_blob",
    "occluder",
    "perturbed_cloud",
    "rig_cameras",
    "static_arc",
    "translating_blob",
    "write_dataset",
]

MOTIONS = ("static", "linear", "orbit", "waypoints")
RIGS = ("fixed", "ring", "arc")

_BLOB_SECTION_RE = re.compile(r"^blob\.(\d+)$")


def _floats(values, n: int | None = None, *, name: str) -> tuple[float, ...]:
    out = tuple(float(v) for v in np.asarray(values, dtype=float).reshape(-1))
    if n is not None and len(out) != n:
        raise ConfigError(f"`{name}` needs {n} values, got {len(out)}.")
    return out


@dataclass
class BlobSpec:
    """Cluster of Gaussians moving as one.

    Parameters
    ----------
    center : tuple of float, default (0, 0, 0)
        Centre of the cluster at frame 0.
    n_gaussians : int, default 12
    spread : float, default 0.08
        Standard deviation of the member offsets around `center`.
    scale : float, default 0.04
        Mean linear scale of the members.
    color : tuple of float, default (0.8, 0.3, 0.2)
        Mean RGB of the members.
    opacity : float, default 0.8
    motion : {"static", "linear", "orbit", "waypoints"}, default "static"
    velocity : tuple of float, default (0, 0, 0)
        Displacement per frame of the linear program.
    orbit_center : tuple of float, default (0, 0, 0)
        Point on the vertical axis the orbit program turns around.
    angular_speed : float, default 0
        Orbit angle per frame, in radians.
    waypoints : tuple of tuple of float, default ()
        Displacements from `center` reached at evenly spaced frames; the path
        starts at `center` and is linear between waypoints.
    """

    center: tuple = (0.0, 0.0, 0.0)
    n_gaussians: int = 12
    spread: float = 0.08
    scale: float = 0.04
    color: tuple = (0.8, 0.3, 0.2)
    opacity: float = 0.8
    motion: str = "static"
    velocity: tuple = (0.0, 0.0, 0.0)
    orbit_center: tuple = (0.0, 0.0, 0.0)
    angular_speed: float = 0.0
    waypoints: tuple = ()

    def __post_init__(self):
        """Normalize the vectors and validate the program."""
        self.center = _floats(self.center, 3, name="center")
        self.color = _floats(self.color, 3, name="color")
        self.velocity = _floats(self.velocity, 3, name="velocity")
        self.orbit_center = _floats(self.orbit_center, 3, name="orbit_center")
        waypoints = np.asarray(self.waypoints, dtype=float)
        if waypoints.size % 3:
            raise ConfigError("`waypoints` needs a multiple of 3 values.")
        self.waypoints = tuple(
            tuple(float(v) for v in row) for row in waypoints.reshape(-1, 3)
        )
        if self.motion not in MOTIONS:
            raise ConfigError(
                f"Unknown motion program '{self.motion}', expected one of {MOTIONS}."
            )
        if self.motion == "waypoints" and not self.waypoints:
            raise ConfigError("The waypoints program needs at least one waypoint.")
        if self.n_gaussians < 1:
            raise ConfigError(
                f"A blob needs at least 1 Gaussian, got {self.n_gaussians}."
            )
        if self.spread < 0:
            raise ConfigError(f"`spread` must be nonnegative, got {self.spread}.")
        if self.scale <= 0:
            raise ConfigError(f"`scale` must be positive, got {self.scale}.")
        if not 0 < self.opacity <= 1:
            raise ConfigError(f"`opacity` must lie in (0, 1], got {self.opacity}.")
        if not all(0 <= c <= 1 for c in self.color):
            raise ConfigError(f"`color` must lie in [0, 1], got {self.color}.")

    def offset(self, frame: int, n_frames: int) -> np.ndarray:
        """Displacement of the blob at `frame` relative to frame 0."""
        if self.motion == "linear":
            return frame * np.asarray(self.velocity)
        if self.motion == "orbit":
            angle = self.angular_speed * frame
            rel = np.asarray(self.center) - np.asarray(self.orbit_center)
            cos, sin = math.cos(angle), math.sin(angle)
            turned = np.array(
                [cos * rel[0] + sin * rel[2], rel[1], -sin * rel[0] + cos * rel[2]]
            )
            return turned - rel
        if self.motion == "waypoints":
            nodes = np.vstack([np.zeros(3), np.asarray(self.waypoints)])
            s = frame * (len(nodes) - 1) / (n_frames - 1)
            i = min(int(math.floor(s)), len(nodes) - 2)
            frac = s - i
            return (1 - frac) * nodes[i] + frac * nodes[i + 1]
        return np.zeros(3)


@dataclass
class SceneSpec:
    """Synthetic scene description.

    Parameters
    ----------
    blobs : tuple of BlobSpec
    n_frames : int, default 4
    rig : {"fixed", "ring", "arc"}, default "fixed"
        "fixed" spreads `n_views` static cameras over `rig_degrees`, "ring" spreads
        them over a full turn and "arc" is a single camera that sweeps
        `rig_degrees` over the sequence.
    n_views : int, default 1
    width, height : int, default 32
    fx : float, default 32.0
    camera_distance : float, default 2.0
        Distance of the cameras from the origin, which they all look at.
    rig_degrees : float, default 30.0
    background : tuple of float, default black
    backdrop : bool, default False
        Add a static checkered wall of Gaussians behind the blobs.
    backdrop_depth : float, default 1.0
        Distance of the wall behind the origin.
    flow_noise : float, default 0
        Standard deviation of the flow noise in pixels.
    outlier_fraction : float, default 0
        Fraction of valid flow pixels replaced by uniform outliers.
    seed : int, default 0
    """

    blobs: tuple = ()
    n_frames: int = 4
    rig: str = "fixed"
    n_views: int = 1
    width: int = 32
    height: int = 32
    fx: float = 32.0
    camera_distance: float = 2.0
    rig_degrees: float = 30.0
    background: tuple = (0.0, 0.0, 0.0)
    backdrop: bool = False
    backdrop_depth: float = 1.0
    flow_noise: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        """Validate the scene description."""
        self.blobs = tuple(
            b if isinstance(b, BlobSpec) else BlobSpec(**b) for b in self.blobs
        )
        self.background = _floats(self.background, 3, name="background")
        if self.n_frames < 2:
            raise ConfigError(f"A scene needs at least 2 frames, got {self.n_frames}.")
        if self.n_views < 1:
            raise ConfigError(f"A scene needs at least 1 view, got {self.n_views}.")
        if self.rig not in RIGS:
            raise ConfigError(f"Unknown rig '{self.rig}', expected one of {RIGS}.")
        if self.rig == "arc" and self.n_views != 1:
            raise ConfigError("The arc rig is monocular, set `n_views = 1`.")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"Invalid image size {self.width}x{self.height}.")
        if self.fx <= 0 or self.camera_distance <= 0:
            raise ConfigError("`fx` and `camera_distance` must be positive.")
        if self.flow_noise < 0:
            raise ConfigError(
                f"`flow_noise` must be nonnegative, got {self.flow_noise}."
            )
        if not 0 <= self.outlier_fraction <= 1:
            raise ConfigError(
                f"`outlier_fraction` must lie in [0, 1], got {self.outlier_fraction}."
            )
        if not self.blobs and not self.backdrop:
            raise ConfigError("A scene needs at least one blob or the backdrop.")

    @classmethod
    def from_file(cls, src_filepath: utils.PathType) -> "SceneSpec":
        """Read a scene from an INI file with [scene] and [blob.<i>] sections."""
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(src_filepath) as src:
                parser.read_file(src)
        except configparser.Error as err:
            raise ConfigError(f"Cannot parse {src_filepath}: {err}") from err
        blob_sections = []
        for section in parser.sections():
            match = _BLOB_SECTION_RE.match(section)
            if match:
                blob_sections.append((int(match.group(1)), section))
            elif section != "scene":
                raise ConfigError(f"Unknown section [{section}] in {src_filepath}.")
        if not parser.has_section("scene"):
            raise ConfigError(f"Missing [scene] section in {src_filepath}.")
        scene_kwargs = utils.config_kwargs(
            cls, parser["scene"], section_name="scene"
        )
        if "blobs" in scene_kwargs:
            raise ConfigError("Blobs are given as [blob.<i>] sections.")
        blobs = tuple(
            BlobSpec(**utils.config_kwargs(BlobSpec, parser[s], section_name=s))
            for _, s in sorted(blob_sections)
        )
        return cls(blobs=blobs, **scene_kwargs)

    def to_file(self, dst_filepath: utils.PathType) -> None:
        """Write the scene description as an INI file readable by `from_file`."""
        parser = configparser.ConfigParser(interpolation=None)
        parser["scene"] = {
            f.name: utils.format_config_value(getattr(self, f.name))
            for f in dataclasses.fields(self)
            if f.name != "blobs"
        }
        for i, blob in enumerate(self.blobs):
            parser[f"blob.{i}"] = {
                f.name: utils.format_config_value(getattr(blob, f.name))
                for f in dataclasses.fields(blob)
            }
        with utils.atomic_path(dst_filepath) as tmp_filepath:
            with open(tmp_filepath, "w") as dst:
                parser.write(dst)

    @property
    def has_motion(self) -> bool:
        """Whether any blob moves."""
        return any(
            np.any(b.offset(t, self.n_frames) != 0)
            for b in self.blobs
            for t in range(self.n_frames)
        )


def _camera_at(spec: SceneSpec, degrees: float) -> PinholeCamera:
    theta = math.radians(degrees)
    d = spec.camera_distance
    return PinholeCamera.look_at(
        (d * math.sin(theta), 0.0, -d * math.cos(theta)),
        (0.0, 0.0, 0.0),
        fx=spec.fx,
        width=spec.width,
        height=spec.height,
    )


def rig_cameras(spec: SceneSpec) -> list[list[PinholeCamera]]:
    """Cameras indexed as [frame][view]."""
    if spec.rig == "arc":
        return [
            [_camera_at(spec, spec.rig_degrees * (t / (spec.n_frames - 1) - 0.5))]
            for t in range(spec.n_frames)
        ]
    if spec.rig == "ring":
        angles = [360.0 * v / spec.n_views for v in range(spec.n_views)]
    elif spec.n_views == 1:
        angles = [0.0]
    else:
        angles = np.linspace(
            -spec.rig_degrees / 2, spec.rig_degrees / 2, spec.n_views
        ).tolist()
    cams = [_camera_at(spec, a) for a in angles]
    return [list(cams) for _ in range(spec.n_frames)]


def _backdrop(spec: SceneSpec) -> dict[str, np.ndarray]:
    g = settings.BACKDROP_GRID
    # half-width of the field of view at the wall
    extent = 0.5 * spec.width / spec.fx * (spec.camera_distance + spec.backdrop_depth)
    ticks = np.linspace(-extent, extent, g)
    xx, yy = np.meshgrid(ticks, ticks, indexing="ij")
    means = np.stack(
        [xx.ravel(), yy.ravel(), np.full(g * g, spec.backdrop_depth)], axis=-1
    )
    s = 0.6 * 2 * extent / g
    checker = (np.add.outer(np.arange(g), np.arange(g)).ravel() % 2).astype(float)
    colors = np.repeat((0.35 + 0.3 * checker)[:, None], 3, axis=1)
    return {
        "means": means,
        "rotations": np.tile([1.0, 0.0, 0.0, 0.0], (g * g, 1)),
        "scales": np.tile([s, s, 0.1 * s], (g * g, 1)),
        "opacities": np.full(g * g, 0.95),
        "colors": colors,
    }


def _blob_members(blob: BlobSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    n = blob.n_gaussians
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=-1, keepdims=True)
    means = np.tile(blob.center, (n, 1))
    if blob.spread > 0:
        means = means + rng.normal(0.0, blob.spread, (n, 3))
    return {
        "means": means,
        "rotations": quats,
        "scales": blob.scale * rng.uniform(0.8, 1.2, (n, 3)),
        "opacities": np.full(n, blob.opacity),
        "colors": np.clip(np.asarray(blob.color) + rng.normal(0, 0.05, (n, 3)), 0, 1),
    }


def corrupt_flow(
    flow: FlowField2D | torch.Tensor,
    sigma: float,
    outlier_fraction: float,
    seed: int | np.random.Generator = 0,
) -> FlowField2D:
    """Add i.i.d. Gaussian noise and uniform outliers to the valid flow pixels.

    Parameters
    ----------
    flow : FlowField2D or torch.Tensor of shape (H, W, 2)
    sigma : float
        Standard deviation of the noise, in pixels.
    outlier_fraction : float
        Fraction of valid pixels whose flow is replaced by a uniform draw within
        plus or minus a quarter of the image width.
    seed : int or numpy.random.Generator, default 0

    Returns
    -------
    FlowField2D
    """
    if sigma < 0:
        raise DomainError(f"`sigma` must be nonnegative, got {sigma}.")
    if not 0 <= outlier_fraction <= 1:
        raise DomainError(
            f"`outlier_fraction` must lie in [0, 1], got {outlier_fraction}."
        )
    if not isinstance(flow, FlowField2D):
        flow = FlowField2D(flow)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    values = flow.flow.detach().numpy().copy()
    valid = flow.valid.numpy()
    h, w = flow.shape
    if sigma > 0:
        noise = rng.normal(0.0, sigma, values.shape)
        values[valid] += noise[valid]
    if outlier_fraction > 0:
        rows = np.flatnonzero(valid.ravel())
        n_out = int(round(outlier_fraction * rows.size))
        picked = rng.choice(rows, n_out, replace=False)
        flat = values.reshape(-1, 2)
        flat[picked] = rng.uniform(-w / 4, w / 4, (n_out, 2))
    return FlowField2D(torch.as_tensor(values), flow.valid.clone())


@dataclass
class FrameObservation:
    """Everything a trainer sees of one frame.

    Attributes
    ----------
    frame : int
    cameras : list of PinholeCamera
    images : list of torch.Tensor of shape (H, W, 3)
    depths : list of torch.Tensor of shape (H, W), optional
    flows : list of FlowField2D or None, optional
        Forward flows from the previous frame, None for frame 0 or when missing.
    background : tuple of float, default black
        Colour behind the scene.
    """

    frame: int
    cameras: list
    images: list
    depths: list | None = None
    flows: list | None = None
    background: tuple = (0.0, 0.0, 0.0)

    @property
    def n_views(self) -> int:
        """Number of views."""
        return len(self.cameras)


@dataclass
class GroundTruth:
    """Ground-truth states and renderings of a synthetic scene.

    Frames are indexed first, views second. `flows[t]` holds the (possibly
    corrupted) flows from frame t - 1 to t and `clean_flows[t]` their noise-free
    version; both are None at frame 0. `flow_sources[t][v]` is the index of the
    Gaussian whose motion defines the clean flow of each pixel, -1 where invalid.
    """

    spec: SceneSpec
    seed: int
    states: list
    cameras: list
    images: list
    depths: list
    alphas: list
    flows: list
    clean_flows: list
    flow_sources: list
    labels: torch.Tensor
    blob_ids: torch.Tensor

    @property
    def n_frames(self) -> int:
        """Number of frames."""
        return len(self.states)

    @property
    def n_views(self) -> int:
        """Number of views per frame."""
        return len(self.cameras[0])

    def observations(self) -> list[FrameObservation]:
        """Per-frame observations in trainer form."""
        return [
            FrameObservation(
                frame=t,
                cameras=list(self.cameras[t]),
                images=list(self.images[t]),
                depths=list(self.depths[t]),
                flows=None if self.flows[t] is None else list(self.flows[t]),
                background=self.spec.background,
            )
            for t in range(self.n_frames)
        ]

    def trajectories(self) -> pd.DataFrame:
        """Centres of every Gaussian per frame."""
        frames = []
        for t, state in enumerate(self.states):
            means = state.means.detach().numpy()
            frames.append(
                pd.DataFrame(
                    {
                        "frame": t,
                        "gaussian": np.arange(len(state)),
                        "x": means[:, 0],
                        "y": means[:, 1],
                        "z": means[:, 2],
                    }
                )
            )
        return pd.concat(frames, ignore_index=True)

    def label_frame(self) -> pd.DataFrame:
        """Blob membership and motion label of every Gaussian."""
        return pd.DataFrame(
            {
                "gaussian": np.arange(len(self.labels)),
                "blob": self.blob_ids.numpy(),
                "dynamic": self.labels.numpy(),
            }
        )

    def motion_footprint(self, frame: int, view: int = 0) -> torch.Tensor:
        """Pixels whose dominant contributor is a moving Gaussian."""
        out = render(
            self.states[frame], self.cameras[frame][view], self.spec.background
        )
        w_max, dom = out.weights.max(dim=-1)
        return self.labels[dom] & (w_max >= settings.FLOW_WEIGHT_MIN)


def _oracle_flow(
    state_prev: GaussianCloud,
    state_curr: GaussianCloud,
    cam_prev: PinholeCamera,
    cam_curr: PinholeCamera,
    background: tuple,
) -> tuple[FlowField2D, torch.Tensor]:
    out = render(state_prev, cam_prev, background)
    w_max, dom = out.weights.max(dim=-1)
    flows, ok = flows_between(cam_prev, cam_curr, state_prev.means, state_curr.means)
    valid = (w_max >= settings.FLOW_WEIGHT_MIN) & ok[dom]
    flow = torch.where(valid.unsqueeze(-1), flows[dom], 0.0)
    sources = torch.where(valid, dom, -1)
    return FlowField2D(flow, valid), sources


def generate(spec: SceneSpec, seed: int | None = None) -> GroundTruth:
    """Generate the ground truth of a synthetic scene.

    Parameters
    ----------
    spec : SceneSpec
    seed : int, optional
        Overrides `spec.seed`.

    Returns
    -------
    GroundTruth
    """
    if seed is None:
        seed = spec.seed
    rng = np.random.default_rng(seed)
    parts, blob_ids, labels = [], [], []
    offsets = []
    for b, blob in enumerate(spec.blobs):
        members = _blob_members(blob, rng)
        parts.append(members)
        n = blob.n_gaussians
        blob_ids.append(np.full(n, b))
        moving = any(
            np.any(blob.offset(t, spec.n_frames) != 0) for t in range(spec.n_frames)
        )
        labels.append(np.full(n, moving))
        offsets.append(
            np.stack(
                [
                    np.tile(blob.offset(t, spec.n_frames), (n, 1))
                    for t in range(spec.n_frames)
                ]
            )
        )
    if spec.backdrop:
        members = _backdrop(spec)
        n = members["means"].shape[0]
        parts.append(members)
        blob_ids.append(np.full(n, -1))
        labels.append(np.zeros(n, dtype=bool))
        offsets.append(np.zeros((spec.n_frames, n, 3)))

    merged = {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}
    offsets = np.concatenate(offsets, axis=1)
    base = GaussianCloud.from_parameters(
        merged["means"],
        rotations=merged["rotations"],
        scales=merged["scales"],
        opacities=merged["opacities"],
        colors=merged["colors"],
    )
    states = [
        base.detach().with_geometry(base.means + torch.as_tensor(offsets[t]))
        for t in range(spec.n_frames)
    ]

    cameras = rig_cameras(spec)
    images, depths, alphas = [], [], []
    for t, state in enumerate(states):
        renders = [render(state, cam, spec.background) for cam in cameras[t]]
        images.append([out.color for out in renders])
        depths.append([out.depth for out in renders])
        alphas.append([out.alpha for out in renders])

    flows, clean_flows, sources = [None], [None], [None]
    for t in range(1, spec.n_frames):
        frame_flows, frame_clean, frame_sources = [], [], []
        for v in range(len(cameras[t])):
            clean, src = _oracle_flow(
                states[t - 1],
                states[t],
                cameras[t - 1][v],
                cameras[t][v],
                spec.background,
            )
            frame_clean.append(clean)
            frame_sources.append(src)
            if spec.flow_noise > 0 or spec.outlier_fraction > 0:
                frame_flows.append(
                    corrupt_flow(clean, spec.flow_noise, spec.outlier_fraction, rng)
                )
            else:
                frame_flows.append(clean)
        flows.append(frame_flows)
        clean_flows.append(frame_clean)
        sources.append(frame_sources)
    lg.debug(
        f"Generated {spec.n_frames} frames x {len(cameras[0])} views of "
        f"{len(base)} Gaussians."
    )
    return GroundTruth(
        spec=spec,
        seed=seed,
        states=states,
        cameras=cameras,
        images=images,
        depths=depths,
        alphas=alphas,
        flows=flows,
        clean_flows=clean_flows,
        flow_sources=sources,
        labels=torch.as_tensor(np.concatenate(labels)),
        blob_ids=torch.as_tensor(np.concatenate(blob_ids)),
    )


def perturbed_cloud(
    cloud: GaussianCloud,
    seed: int = 0,
    *,
    position_noise: float = 0.01,
    color_noise: float = 0.05,
    opacity: float | None = 0.5,
) -> GaussianCloud:
    """Jittered copy of a cloud, a starting point for static fitting.

    Parameters
    ----------
    cloud : GaussianCloud
    seed : int, default 0
    position_noise : float, default 0.01
        Standard deviation of the centre jitter.
    color_noise : float, default 0.05
        Standard deviation of the base-colour jitter.
    opacity : float or None, default 0.5
        Uniform opacity of the copy, None keeps the opacities.
    """
    rng = np.random.default_rng(seed)
    base = cloud.detach()
    n = len(base)
    means = base.means + torch.as_tensor(rng.normal(0.0, position_noise, (n, 3)))
    sh = base.sh.clone()
    sh[:, 0] += torch.as_tensor(rng.normal(0.0, color_noise, (n, 3))) / settings.SH_C0
    opacities = base.opacities if opacity is None else torch.full((n,), opacity)
    return GaussianCloud.from_parameters(
        means,
        rotations=base.rotations,
        scales=base.scales,
        opacities=opacities.to(settings.DTYPE),
        sh=sh,
    )


########################################################################################
# dataset directories
def _view_name(view: int) -> str:
    return f"{view:02d}"


def _frame_name(frame: int) -> str:
    return f"{frame:04d}"


def write_dataset(gt: GroundTruth, dst_dir: utils.PathType) -> None:
    """Write the observations and ground truth of a scene to a directory.

    Layout: `spec.cfg`, `cams/<frame>_<view>.txt`, `frames/<frame>/<view>.png`,
    `depth/<frame>/<view>.dpt`, `flow/<frame>/<view>.flo` (from frame 1),
    `gt/trajectories.csv`, `gt/labels.csv` and `gt/cloud.ply` (frame 0).
    """
    spec = dataclasses.replace(gt.spec, seed=gt.seed)
    spec.to_file(path.join(dst_dir, "spec.cfg"))
    for t in range(gt.n_frames):
        ft = _frame_name(t)
        for v in range(gt.n_views):
            fv = _view_name(v)
            write_camera(gt.cameras[t][v], path.join(dst_dir, "cams", f"{ft}_{fv}.txt"))
            formats.write_png(
                gt.images[t][v], path.join(dst_dir, "frames", ft, f"{fv}.png")
            )
            formats.write_depth(
                gt.depths[t][v], path.join(dst_dir, "depth", ft, f"{fv}.dpt")
            )
            if gt.flows[t] is not None:
                formats.write_flo(
                    gt.flows[t][v], path.join(dst_dir, "flow", ft, f"{fv}.flo")
                )
    gt_dir = path.join(dst_dir, "gt")
    os.makedirs(gt_dir, exist_ok=True)
    with utils.atomic_path(path.join(gt_dir, "trajectories.csv")) as tmp_filepath:
        gt.trajectories().to_csv(tmp_filepath, index=False)
    with utils.atomic_path(path.join(gt_dir, "labels.csv")) as tmp_filepath:
        gt.label_frame().to_csv(tmp_filepath, index=False)
    formats.save_cloud(gt.states[0], path.join(gt_dir, "cloud.ply"))


@dataclass
class Dataset:
    """A scene read back from a dataset directory."""

    spec: SceneSpec
    frames: list
    trajectories: pd.DataFrame = field(repr=False)
    labels: pd.DataFrame = field(repr=False)
    cloud: GaussianCloud = field(repr=False)

    def observations(self) -> list[FrameObservation]:
        """Per-frame observations in trainer form."""
        return list(self.frames)

    def gt_means(self, frame: int) -> torch.Tensor:
        """Ground-truth centres at `frame`, ordered by Gaussian index."""
        rows = self.trajectories[self.trajectories["frame"] == frame]
        rows = rows.sort_values("gaussian")
        return torch.as_tensor(rows[["x", "y", "z"]].to_numpy(dtype="float64"))


def load_dataset(src_dir: utils.PathType) -> Dataset:
    """Read a directory written by `write_dataset`."""
    spec = SceneSpec.from_file(path.join(src_dir, "spec.cfg"))
    frames = []
    for t in range(spec.n_frames):
        ft = _frame_name(t)
        cams, images, depths, flows = [], [], [], []
        for v in range(spec.n_views):
            fv = _view_name(v)
            cams.append(read_camera(path.join(src_dir, "cams", f"{ft}_{fv}.txt")))
            images.append(
                formats.read_png(path.join(src_dir, "frames", ft, f"{fv}.png"))
            )
            depths.append(
                formats.read_depth(path.join(src_dir, "depth", ft, f"{fv}.dpt"))
            )
            flo_filepath = path.join(src_dir, "flow", ft, f"{fv}.flo")
            flows.append(
                formats.read_flo(flo_filepath) if path.exists(flo_filepath) else None
            )
        frames.append(
            FrameObservation(
                frame=t,
                cameras=cams,
                images=images,
                depths=depths,
                flows=None if t == 0 else flows,
                background=spec.background,
            )
        )
    gt_dir = path.join(src_dir, "gt")
    return Dataset(
        spec=spec,
        frames=frames,
        trajectories=pd.read_csv(path.join(gt_dir, "trajectories.csv")),
        labels=pd.read_csv(path.join(gt_dir, "labels.csv")),
        cloud=formats.load_cloud(path.join(gt_dir, "cloud.ply")),
    )


########################################################################################
# presets
def moving_blob(**overrides) -> SceneSpec:
    """Monocular arc scene with one moving and one static blob over a backdrop."""
    spec = SceneSpec(
        blobs=(
            BlobSpec(
                center=(-0.2, 0.0, 0.0),
                n_gaussians=8,
                color=(0.9, 0.2, 0.1),
                motion="linear",
                velocity=(0.06, 0.0, 0.0),
            ),
            BlobSpec(
                center=(0.3, 0.2, 0.2), n_gaussians=6, color=(0.1, 0.4, 0.9)
            ),
        ),
        n_frames=5,
        rig="arc",
        rig_degrees=10.0,
        backdrop=True,
    )
    return dataclasses.replace(spec, **overrides)


def static_arc(**overrides) -> SceneSpec:
    """Monocular arc scene where nothing moves."""
    spec = moving_blob()
    blobs = tuple(dataclasses.replace(b, motion="static") for b in spec.blobs)
    return dataclasses.replace(spec, blobs=blobs, **overrides)


def translating_blob(**overrides) -> SceneSpec:
    """Two static cameras watching a blob translate next to a static one."""
    spec = SceneSpec(
        blobs=(
            BlobSpec(
                center=(-0.2, 0.0, 0.0),
                n_gaussians=8,
                color=(0.9, 0.2, 0.1),
                motion="linear",
                velocity=(0.05, 0.0, 0.0),
            ),
            BlobSpec(
                center=(0.3, -0.1, 0.1), n_gaussians=6, color=(0.1, 0.7, 0.3)
            ),
        ),
        n_frames=4,
        rig="fixed",
        n_views=2,
        rig_degrees=20.0,
    )
    return dataclasses.replace(spec, **overrides)


def occluder(**overrides) -> SceneSpec:
    """A large moving Gaussian passing behind a static, nearly opaque one."""
    spec = SceneSpec(
        blobs=(
            BlobSpec(
                center=(-0.15, 0.0, 0.6),
                n_gaussians=1,
                spread=0.0,
                scale=0.25,
                color=(0.2, 0.5, 0.9),
                opacity=0.95,
                motion="linear",
                velocity=(0.08, 0.0, 0.0),
            ),
            BlobSpec(
                center=(0.0, 0.0, -0.6),
                n_gaussians=1,
                spread=0.0,
                scale=0.08,
                color=(0.9, 0.6, 0.1),
                opacity=0.95,
            ),
        ),
        n_frames=2,
        rig="fixed",
        fx=40.0,
    )
    return dataclasses.replace(spec, **overrides)


PRESETS = {
    "moving_blob": moving_blob,
    "occluder": occluder,
    "static_arc": static_arc,
    "translating_blob": translating_blob,
}
