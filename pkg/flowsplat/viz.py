"""Flow visualization with the Middlebury color coding."""

from collections.abc import Sequence

import numpy as np
import torch

from flowsplat import formats, utils
from flowsplat.correspondence import FlowField2D
from flowsplat.errors import DomainError

__all__ = ["color_wheel", "flow_panels", "flow_to_color"]

# hue segments of the wheel: red-yellow, yellow-green, green-cyan, cyan-blue,
# blue-magenta and magenta-red
_SEGMENTS = (15, 6, 4, 11, 13, 6)


def color_wheel() -> np.ndarray:
    """The 55-entry Middlebury color wheel as RGB in [0, 255]."""
    ry, yg, gc, cb, bm, mr = _SEGMENTS
    wheel = np.zeros((sum(_SEGMENTS), 3))
    col = 0
    wheel[col : col + ry, 0] = 255
    wheel[col : col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col : col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col : col + yg, 1] = 255
    col += yg
    wheel[col : col + gc, 1] = 255
    wheel[col : col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col : col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col : col + cb, 2] = 255
    col += cb
    wheel[col : col + bm, 2] = 255
    wheel[col : col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col : col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col : col + mr, 0] = 255
    return wheel


def flow_to_color(
    flow: FlowField2D | utils.ArrayLike, max_mag: float | None = None
) -> torch.Tensor:
    """Color-code a flow field.

    The direction selects the hue on the color wheel and the magnitude, relative
    to `max_mag`, the saturation: zero flow is white and magnitudes at or above
    `max_mag` get the full wheel color. Invalid pixels are black.

    Parameters
    ----------
    flow : FlowField2D or array-like of shape (H, W, 2)
    max_mag : float, optional
        Saturation magnitude. Defaults to the largest valid magnitude.

    Returns
    -------
    torch.Tensor of shape (H, W, 3)
        RGB in [0, 1].
    """
    if not isinstance(flow, FlowField2D):
        flow = FlowField2D(utils.as_tensor(flow))
    u = flow.flow[..., 0].detach().numpy()
    v = flow.flow[..., 1].detach().numpy()
    valid = flow.valid.numpy()
    mag = np.sqrt(u**2 + v**2)
    if max_mag is None:
        max_mag = float(mag[valid].max()) if valid.any() else 0.0
        if max_mag == 0:
            max_mag = 1.0
    elif max_mag <= 0:
        raise DomainError(f"`max_mag` must be positive, got {max_mag}.")

    wheel = color_wheel() / 255
    n_cols = wheel.shape[0]
    rad = np.minimum(mag / max_mag, 1.0)
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (n_cols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % n_cols
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    col = 1 - rad[..., None] * (1 - col)
    col[~valid] = 0.0
    return torch.as_tensor(col)


def flow_panels(
    flows: Sequence[FlowField2D | torch.Tensor],
    dst_filepath: utils.PathType,
    *,
    max_mag: float | None = None,
    gap: int = 2,
) -> torch.Tensor:
    """Write color-coded flows side by side as one PNG.

    All panels share `max_mag`, which defaults to the largest valid magnitude over
    every panel. Returns the composed image.
    """
    fields = [f if isinstance(f, FlowField2D) else FlowField2D(f) for f in flows]
    if not fields:
        raise DomainError("Need at least one flow field.")
    if max_mag is None:
        peaks = [
            float(f.magnitude[f.valid].max()) for f in fields if bool(f.valid.any())
        ]
        max_mag = max(peaks, default=0.0) or 1.0
    panels = []
    for i, f in enumerate(fields):
        if i:
            panels.append(torch.ones((f.shape[0], gap, 3), dtype=torch.float64))
        panels.append(flow_to_color(f, max_mag))
    image = torch.cat(panels, dim=1)
    formats.write_png(image, dst_filepath)
    return image
