"""File formats.

Middlebury `.flo` flow, binary depth maps, 8-bit PNG images, PLY clouds and
checkpoints. Every writer goes through `utils.atomic_path`.
"""

import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np
import rasterio as rio
import torch
from plyfile import PlyData, PlyElement, PlyParseError

from flowsplat import settings, utils
from flowsplat.correspondence import FlowField2D
from flowsplat.deform import DeformModel
from flowsplat.errors import FormatError
from flowsplat.gaussians import PARAMETER_NAMES, GaussianCloud

__all__ = [
    "Checkpoint",
    "cloud_property_names",
    "load_checkpoint",
    "load_cloud",
    "read_depth",
    "read_flo",
    "read_png",
    "save_checkpoint",
    "save_cloud",
    "write_depth",
    "write_flo",
    "write_png",
]

# Middlebury marks unknown flow with components above this value
UNKNOWN_FLOW_THRESHOLD = 1e9
UNKNOWN_FLOW = 1e10


def write_flo(flow: FlowField2D | torch.Tensor, dst_filepath: utils.PathType) -> None:
    """Write a Middlebury `.flo` file.

    Invalid pixels are written with the Middlebury unknown-flow value.
    """
    if not isinstance(flow, FlowField2D):
        flow = FlowField2D(flow)
    data = flow.flow.detach().numpy().astype("<f4")
    data[~flow.valid.numpy()] = UNKNOWN_FLOW
    h, w = flow.shape
    with utils.atomic_path(dst_filepath) as tmp_filepath:
        with open(tmp_filepath, "wb") as dst:
            dst.write(np.array([settings.FLO_MAGIC], dtype="<f4").tobytes())
            dst.write(np.array([w, h], dtype="<i4").tobytes())
            dst.write(data.tobytes())


def read_flo(src_filepath: utils.PathType) -> FlowField2D:
    """Read a Middlebury `.flo` file."""
    with open(src_filepath, "rb") as src:
        raw = src.read()
    if len(raw) < 12:
        raise FormatError(f"{src_filepath} is too short to be a .flo file.")
    magic = np.frombuffer(raw[:4], dtype="<f4")[0]
    if magic != np.float32(settings.FLO_MAGIC):
        raise FormatError(f"Bad .flo magic {magic!r} in {src_filepath}.")
    w, h = np.frombuffer(raw[4:12], dtype="<i4")
    if w < 0 or h < 0 or len(raw) != 12 + 8 * int(w) * int(h):
        raise FormatError(f"Truncated or oversized .flo payload in {src_filepath}.")
    data = np.frombuffer(raw[12:], dtype="<f4").reshape(int(h), int(w), 2)
    valid = np.all(np.abs(data) < UNKNOWN_FLOW_THRESHOLD, axis=-1)
    return FlowField2D(
        torch.as_tensor(data.astype("float64")), torch.as_tensor(valid)
    )


def write_depth(depth: torch.Tensor, dst_filepath: utils.PathType) -> None:
    """Write a depth map: 16-byte header (magic, width, height, reserved) + f4 data."""
    data = np.asarray(utils.as_tensor(depth).detach(), dtype="<f4")
    h, w = data.shape
    with utils.atomic_path(dst_filepath) as tmp_filepath:
        with open(tmp_filepath, "wb") as dst:
            dst.write(settings.DEPTH_MAGIC + struct.pack("<iii", w, h, 0))
            dst.write(data.tobytes())


def read_depth(src_filepath: utils.PathType) -> torch.Tensor:
    """Read a depth map written by `write_depth`, widened to float64."""
    with open(src_filepath, "rb") as src:
        raw = src.read()
    if len(raw) < 16 or raw[:4] != settings.DEPTH_MAGIC:
        raise FormatError(f"{src_filepath} is not a depth file.")
    w, h, _ = struct.unpack("<iii", raw[4:16])
    if w < 0 or h < 0 or len(raw) != 16 + 4 * w * h:
        raise FormatError(f"Truncated or oversized depth payload in {src_filepath}.")
    data = np.frombuffer(raw[16:], dtype="<f4").reshape(h, w)
    return torch.as_tensor(data.astype("float64"))


def write_png(image: torch.Tensor, dst_filepath: utils.PathType) -> None:
    """Write an (H, W, 3) image in [0, 1] as an 8-bit RGB PNG."""
    arr = np.asarray(utils.as_tensor(image).detach().clamp(0, 1))
    arr = np.round(arr * 255).astype("uint8").transpose(2, 0, 1)
    with utils.atomic_path(dst_filepath) as tmp_filepath:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", rio.errors.NotGeoreferencedWarning)
            # no .aux.xml sidecars next to the images
            with rio.Env(GDAL_PAM_ENABLED="NO"):
                with rio.open(
                    tmp_filepath,
                    "w",
                    driver="PNG",
                    width=arr.shape[2],
                    height=arr.shape[1],
                    count=arr.shape[0],
                    dtype="uint8",
                ) as dst:
                    dst.write(arr)


def read_png(src_filepath: utils.PathType) -> torch.Tensor:
    """Read an 8-bit RGB PNG as an (H, W, 3) image in [0, 1]."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", rio.errors.NotGeoreferencedWarning)
        with rio.Env(GDAL_PAM_ENABLED="NO"):
            with rio.open(src_filepath) as src:
                arr = src.read()
    return torch.as_tensor(arr.transpose(1, 2, 0).astype("float64") / 255.0)


def cloud_property_names(sh_degree: int) -> list[str]:
    """PLY vertex properties of a cloud of the given SH degree."""
    names = ["x", "y", "z"]
    names += [f"rot_{i}" for i in range(4)]
    names += [f"scale_{i}" for i in range(3)]
    names += ["opacity"]
    names += [f"f_dc_{i}" for i in range(3)]
    n_rest = 3 * ((sh_degree + 1) ** 2 - 1)
    names += [f"f_rest_{i}" for i in range(n_rest)]
    return names


def save_cloud(cloud: GaussianCloud, dst_filepath: utils.PathType) -> None:
    """Write a cloud as a binary little-endian PLY.

    Scales are stored in log space and opacities as logits, in double precision.
    """
    with torch.no_grad():
        # (N, K, 3) -> channel-major (N, 3, K) as in common splatting tools
        sh = cloud.sh.detach().transpose(1, 2)
        attributes = torch.cat(
            [
                cloud.means.detach(),
                cloud.quats.detach(),
                cloud.log_scales.detach(),
                cloud.opacity_logits.detach().unsqueeze(-1),
                sh[:, :, 0],
                sh[:, :, 1:].reshape(len(cloud), -1),
            ],
            dim=1,
        ).numpy()
    names = cloud_property_names(cloud.sh_degree)
    elements = np.empty(len(cloud), dtype=[(name, "<f8") for name in names])
    for i, name in enumerate(names):
        elements[name] = attributes[:, i]
    ply = PlyData([PlyElement.describe(elements, "vertex")], byte_order="<")
    with utils.atomic_path(dst_filepath) as tmp_filepath:
        ply.write(tmp_filepath)


def load_cloud(src_filepath: utils.PathType) -> GaussianCloud:
    """Read a cloud written by `save_cloud`."""
    try:
        ply = PlyData.read(str(src_filepath))
        vertex = ply["vertex"]
    except (PlyParseError, KeyError, ValueError, EOFError) as err:
        raise FormatError(f"Cannot parse {src_filepath}: {err}") from err
    present = {prop.name for prop in vertex.properties}
    n_rest = len([name for name in present if name.startswith("f_rest_")])
    if n_rest not in (0, 9):
        raise FormatError(f"Unsupported number of f_rest properties: {n_rest}.")
    sh_degree = 0 if n_rest == 0 else 1
    names = cloud_property_names(sh_degree)
    missing = [name for name in names if name not in present]
    if missing:
        raise FormatError(f"Missing PLY properties {missing} in {src_filepath}.")
    data = np.stack([np.asarray(vertex[name], dtype="float64") for name in names], 1)
    data = torch.as_tensor(data.reshape(-1, len(names)))
    n = data.shape[0]
    k = (sh_degree + 1) ** 2
    sh = torch.cat([data[:, 11:14].unsqueeze(-1), data[:, 14:].reshape(n, 3, k - 1)], 2)
    return GaussianCloud(
        means=data[:, 0:3].clone(),
        quats=data[:, 3:7].clone(),
        log_scales=data[:, 7:10].clone(),
        opacity_logits=data[:, 10].clone(),
        sh=sh.transpose(1, 2).contiguous(),
    )


@dataclass
class Checkpoint:
    """Contents of a checkpoint file.

    Attributes
    ----------
    cloud : GaussianCloud
        Final (iterative) or canonical (deformation) cloud.
    states : list of dict, optional
        Per-frame `means` and `quats` of the iterative paradigm.
    model : flowsplat.deform.DeformModel, optional
    config : dict
        Echo of the training configuration.
    """

    cloud: GaussianCloud
    states: list[dict[str, torch.Tensor]] | None = None
    model: DeformModel | None = None
    config: dict | None = None

    def frame_states(self) -> list[GaussianCloud]:
        """Per-frame clouds of the iterative paradigm (empty if none were saved)."""
        if self.states is None:
            return []
        return [
            self.cloud.with_geometry(state["means"], state["quats"])
            for state in self.states
        ]


def _cloud_tensors(cloud: GaussianCloud) -> dict[str, torch.Tensor]:
    tensors = {f"cloud.{name}": getattr(cloud, name) for name in PARAMETER_NAMES}
    if cloud.log_confidence is not None:
        tensors["cloud.log_confidence"] = cloud.log_confidence
    if cloud.dynamic_flags is not None:
        tensors["cloud.dynamic_flags"] = cloud.dynamic_flags.to(torch.uint8)
    return tensors


def save_checkpoint(
    dst_filepath: utils.PathType,
    cloud: GaussianCloud,
    *,
    states: list[GaussianCloud] | None = None,
    model: DeformModel | None = None,
    config: dict | None = None,
) -> None:
    """Write a checkpoint.

    The file holds the magic, a format version, the length of a JSON manifest, the
    manifest and the raw little-endian tensor blob it describes.
    """
    tensors = _cloud_tensors(cloud)
    if states is not None:
        for t, state in enumerate(states):
            tensors[f"states.{t}.means"] = state.means
            tensors[f"states.{t}.quats"] = state.quats
    if model is not None:
        for name, value in model.state_dict().items():
            tensors[f"model.{name}"] = value

    entries, chunks, offset = [], [], 0
    for name, tensor in tensors.items():
        arr = np.ascontiguousarray(tensor.detach().numpy())
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": arr.nbytes,
            }
        )
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "version": settings.CHECKPOINT_VERSION,
        "generation": cloud.generation,
        "n_states": 0 if states is None else len(states),
        "model": None if model is None else model.manifest(),
        "config": config,
        "tensors": entries,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with utils.atomic_path(dst_filepath) as tmp_filepath:
        with open(tmp_filepath, "wb") as dst:
            dst.write(settings.CHECKPOINT_MAGIC)
            dst.write(struct.pack("<IQ", settings.CHECKPOINT_VERSION, len(header)))
            dst.write(header)
            for chunk in chunks:
                dst.write(chunk)


def load_checkpoint(src_filepath: utils.PathType) -> Checkpoint:
    """Read a checkpoint written by `save_checkpoint`."""
    with open(src_filepath, "rb") as src:
        raw = src.read()
    if len(raw) < 16 or raw[:4] != settings.CHECKPOINT_MAGIC:
        raise FormatError(f"{src_filepath} is not a checkpoint.")
    version, header_len = struct.unpack("<IQ", raw[4:16])
    if version != settings.CHECKPOINT_VERSION:
        raise FormatError(
            f"Checkpoint version {version} is not supported (expected "
            f"{settings.CHECKPOINT_VERSION})."
        )
    try:
        manifest = json.loads(raw[16 : 16 + header_len])
    except ValueError as err:
        raise FormatError(f"Corrupted checkpoint manifest: {err}") from err
    blob = raw[16 + header_len :]
    tensors = {}
    for entry in manifest["tensors"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(blob):
            raise FormatError(f"Truncated checkpoint tensor '{entry['name']}'.")
        arr = np.frombuffer(blob[start:stop], dtype=entry["dtype"]).reshape(
            entry["shape"]
        )
        tensors[entry["name"]] = torch.as_tensor(arr.copy())

    flags = tensors.get("cloud.dynamic_flags")
    cloud = GaussianCloud(
        **{name: tensors[f"cloud.{name}"] for name in PARAMETER_NAMES},
        dynamic_flags=None if flags is None else flags.to(torch.bool),
        log_confidence=tensors.get("cloud.log_confidence"),
        generation=manifest["generation"],
    )
    states = None
    if manifest["n_states"]:
        states = [
            {key: tensors[f"states.{t}.{key}"] for key in ("means", "quats")}
            for t in range(manifest["n_states"])
        ]
    model = None
    if manifest["model"] is not None:
        model = DeformModel.from_manifest(manifest["model"])
        prefix = "model."
        model.load_state_dict(
            {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
        )
    return Checkpoint(
        cloud=cloud, states=states, model=model, config=manifest["config"]
    )
