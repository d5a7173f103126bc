"""Pinhole cameras.

Projection, unprojection and point flow between two cameras. The camera looks
down +Z, the image origin is the top-left corner and v grows downwards.
"""

from dataclasses import dataclass

import torch

from flowsplat import settings, utils
from flowsplat.errors import BehindCameraError, DomainError, FormatError

__all__ = [
    "PinholeCamera",
    "flow_between",
    "flows_between",
    "project",
    "project_points",
    "read_camera",
    "unproject",
    "write_camera",
]

_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "world_to_cam")


@dataclass(frozen=True, eq=False)
class PinholeCamera:
    """Pinhole camera with a rigid world-to-camera pose.

    Parameters
    ----------
    fx, fy : float
        Focal lengths in pixels.
    cx, cy : float
        Principal point in pixels.
    width, height : int
        Image size in pixels.
    world_to_cam : array-like of shape (3, 4)
        Rotation and translation mapping world points to camera coordinates.
    near : float, default `settings.NEAR`
        Points at or closer than this depth are behind the camera.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: torch.Tensor
    near: float = settings.NEAR

    def __post_init__(self):
        """Validate the intrinsics and the pose."""
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError(
                f"Focal lengths must be positive, got {self.fx, self.fy}."
            )
        if self.width < 1 or self.height < 1:
            raise DomainError(
                f"Image size must be at least 1x1, got {self.width}x{self.height}."
            )
        pose = utils.as_tensor(self.world_to_cam).reshape(3, 4)
        rot = pose[:, :3]
        eye = torch.eye(3, dtype=settings.DTYPE)
        if float((rot @ rot.T - eye).abs().max()) > 1e-9:
            raise DomainError("The rotation part of `world_to_cam` is not orthonormal.")
        object.__setattr__(self, "world_to_cam", pose)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def look_at(
        cls,
        eye: utils.ArrayLike,
        target: utils.ArrayLike,
        *,
        up: utils.ArrayLike = (0.0, -1.0, 0.0),
        fx: float,
        fy: float | None = None,
        width: int,
        height: int,
        cx: float | None = None,
        cy: float | None = None,
    ) -> "PinholeCamera":
        """Camera at `eye` looking at `target`.

        The principal point defaults to the image centre and `fy` to `fx`. `up` is the
        world direction that appears upwards in the image.
        """
        eye = utils.as_tensor(eye)
        forward = utils.as_tensor(target) - eye
        forward = forward / forward.norm()
        right = torch.linalg.cross(forward, utils.as_tensor(up))
        right = right / right.norm()
        down = torch.linalg.cross(forward, right)
        rot = torch.stack([right, down, forward])
        pose = torch.cat([rot, (-rot @ eye).unsqueeze(-1)], dim=1)
        return cls(
            fx=float(fx),
            fy=float(fx if fy is None else fy),
            cx=float(width / 2 if cx is None else cx),
            cy=float(height / 2 if cy is None else cy),
            width=width,
            height=height,
            world_to_cam=pose,
        )

    @property
    def rotation(self) -> torch.Tensor:
        """World-to-camera rotation."""
        return self.world_to_cam[:, :3]

    @property
    def translation(self) -> torch.Tensor:
        """World-to-camera translation."""
        return self.world_to_cam[:, 3]

    @property
    def center(self) -> torch.Tensor:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: torch.Tensor) -> torch.Tensor:
        """Transform world points of shape (..., 3) to camera coordinates."""
        return points @ self.rotation.T + self.translation


def project_points(
    cam: PinholeCamera, points: utils.ArrayLike
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Project world points without raising on points behind the camera.

    Parameters
    ----------
    cam : PinholeCamera
    points : array-like of shape (..., 3)

    Returns
    -------
    uv : torch.Tensor of shape (..., 2)
        Pixel coordinates; meaningless where `in_front` is False.
    depth : torch.Tensor of shape (...)
        Camera-space Z.
    in_front : torch.Tensor of shape (...)
        Whether the point lies beyond the near plane.
    """
    cam_pts = cam.to_camera(utils.as_tensor(points))
    depth = cam_pts[..., 2]
    in_front = depth > cam.near
    # avoid division by ~zero for points that will be discarded anyway
    safe_z = torch.where(in_front, depth, torch.ones_like(depth))
    u = cam.fx * cam_pts[..., 0] / safe_z + cam.cx
    v = cam.fy * cam_pts[..., 1] / safe_z + cam.cy
    return torch.stack([u, v], dim=-1), depth, in_front


def project(
    cam: PinholeCamera, x_world: utils.ArrayLike
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Project world point(s) to pixel coordinates and depth.

    Returns
    -------
    u, v, depth : torch.Tensor
        Pixel coordinates and camera-space depth.

    Raises
    ------
    BehindCameraError
        If any point lies at or behind the near plane.
    """
    uv, depth, in_front = project_points(cam, x_world)
    if not bool(torch.all(in_front)):
        raise BehindCameraError("Cannot project a point at or behind the camera.")
    return uv[..., 0], uv[..., 1], depth


def unproject(
    cam: PinholeCamera,
    u: utils.ArrayLike,
    v: utils.ArrayLike,
    depth: utils.ArrayLike,
) -> torch.Tensor:
    """Lift pixel(s) with known depth back to world coordinates.

    Returns
    -------
    x_world : torch.Tensor of shape (..., 3)
    """
    u, v, depth = (utils.as_tensor(a) for a in (u, v, depth))
    if not bool(torch.all(depth > 0)):
        raise DomainError("Unprojection needs strictly positive depth.")
    cam_pts = torch.stack(
        [(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth], dim=-1
    )
    return (cam_pts - cam.translation) @ cam.rotation


def flows_between(
    cam_prev: PinholeCamera,
    cam_curr: PinholeCamera,
    x_prev: torch.Tensor,
    x_curr: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched `flow_between` returning the flows and a validity mask."""
    uv_prev, _, ok_prev = project_points(cam_prev, x_prev)
    uv_curr, _, ok_curr = project_points(cam_curr, x_curr)
    return uv_curr - uv_prev, ok_prev & ok_curr


def flow_between(
    cam_prev: PinholeCamera,
    cam_curr: PinholeCamera,
    x_prev: utils.ArrayLike,
    x_curr: utils.ArrayLike,
) -> torch.Tensor:
    """Pixel displacement Proj_curr(x_curr) - Proj_prev(x_prev).

    Raises
    ------
    BehindCameraError
        If either endpoint cannot be projected; callers skip such points.
    """
    flow, valid = flows_between(
        cam_prev, cam_curr, utils.as_tensor(x_prev), utils.as_tensor(x_curr)
    )
    if not bool(torch.all(valid)):
        raise BehindCameraError("Flow endpoint at or behind the camera.")
    return flow


def write_camera(cam: PinholeCamera, dst_filepath: utils.PathType) -> None:
    """Write a camera record as `key value` lines."""
    pose = " ".join(repr(float(v)) for v in cam.world_to_cam.reshape(-1))
    lines = [
        f"fx {cam.fx!r}",
        f"fy {cam.fy!r}",
        f"cx {cam.cx!r}",
        f"cy {cam.cy!r}",
        f"width {cam.width}",
        f"height {cam.height}",
        f"world_to_cam {pose}",
    ]
    with utils.atomic_path(dst_filepath) as tmp_filepath:
        with open(tmp_filepath, "w") as dst:
            dst.write("\n".join(lines) + "\n")


def read_camera(src_filepath: utils.PathType) -> PinholeCamera:
    """Read a camera record written by `write_camera`."""
    record = {}
    with open(src_filepath) as src:
        for line in src:
            if not line.strip():
                continue
            key, *values = line.split()
            if key not in _CAMERA_KEYS:
                raise FormatError(f"Unknown camera key '{key}' in {src_filepath}.")
            record[key] = values
    missing = set(_CAMERA_KEYS) - set(record)
    if missing:
        raise FormatError(f"Missing camera keys {sorted(missing)} in {src_filepath}.")
    if len(record["world_to_cam"]) != 12:
        raise FormatError("`world_to_cam` needs 12 numbers.")
    return PinholeCamera(
        fx=float(record["fx"][0]),
        fy=float(record["fy"][0]),
        cx=float(record["cx"][0]),
        cy=float(record["cy"][0]),
        width=int(record["width"][0]),
        height=int(record["height"][0]),
        world_to_cam=torch.tensor(
            [float(v) for v in record["world_to_cam"]], dtype=settings.DTYPE
        ).reshape(3, 4),
    )
