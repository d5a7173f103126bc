"""3D Gaussians.

Gaussian primitives, their covariance and contribution maths, spherical-harmonics
colour and the `GaussianCloud` container holding every learnable per-Gaussian
parameter.
"""

from collections.abc import Iterator, Sequence
from dataclasses import dataclass

import numpy as np
import torch

from flowsplat import settings, utils
from flowsplat.errors import ConfigError, DomainError

__all__ = [
    "Gaussian3D",
    "GaussianCloud",
    "Quaternion",
    "contribution",
    "covariance_from",
    "gaussian_contributions",
    "precision_from",
    "quaternion_multiply",
    "quaternion_to_rotation",
    "rgb_to_sh",
    "sh_to_color",
]


def quaternion_to_rotation(quats: torch.Tensor) -> torch.Tensor:
    """Convert (w, x, y, z) quaternions of shape (..., 4) to rotation matrices.

    The quaternions are normalized first, so any nonzero quaternion is accepted.
    """
    q = quats / quats.norm(dim=-1, keepdim=True).clamp_min(settings.QUAT_EPS)
    w, x, y, z = q.unbind(-1)
    rot = torch.stack(
        [
            1 - 2 * (y * y + z * z),
            2 * (x * y - w * z),
            2 * (x * z + w * y),
            2 * (x * y + w * z),
            1 - 2 * (x * x + z * z),
            2 * (y * z - w * x),
            2 * (x * z - w * y),
            2 * (y * z + w * x),
            1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return rot.reshape(*q.shape[:-1], 3, 3)


def quaternion_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product of (w, x, y, z) quaternions, broadcasting over leading dims."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion (w, x, y, z).

    The components are normalized on construction, so every instance has unit
    length.
    """

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        """Normalize the components."""
        norm = float(np.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2))
        if norm < settings.QUAT_EPS:
            raise DomainError("Cannot build a rotation from a zero quaternion.")
        for name in ("w", "x", "y", "z"):
            object.__setattr__(self, name, float(getattr(self, name)) / norm)

    @classmethod
    def from_tensor(cls, value: utils.ArrayLike) -> "Quaternion":
        """Build a quaternion from a length-4 array (w, x, y, z)."""
        w, x, y, z = (float(v) for v in utils.as_tensor(value).reshape(4))
        return cls(w, x, y, z)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Quaternion":
        """Draw a uniformly distributed rotation."""
        return cls(*rng.normal(size=4))

    def as_tensor(self) -> torch.Tensor:
        """Return the (w, x, y, z) components as a tensor."""
        return torch.tensor([self.w, self.x, self.y, self.z], dtype=settings.DTYPE)

    def to_matrix(self) -> torch.Tensor:
        """Return the 3x3 rotation matrix."""
        return quaternion_to_rotation(self.as_tensor())

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        """Compose rotations, `self` applied after `other`."""
        return Quaternion.from_tensor(
            quaternion_multiply(self.as_tensor(), other.as_tensor())
        )


def _check_scale(scale: torch.Tensor) -> None:
    if not bool(torch.all(scale > 0)):
        raise DomainError(f"Scale components must be strictly positive, got {scale}.")


def covariance_from(
    rotation: Quaternion | utils.ArrayLike, scale: utils.ArrayLike
) -> torch.Tensor:
    """Compute the covariance R diag(s)^2 R^T.

    Parameters
    ----------
    rotation : Quaternion or array-like of shape (..., 4)
        Rotation(s) as (w, x, y, z) quaternions.
    scale : array-like of shape (..., 3)
        Standard deviations along the local axes, strictly positive.

    Returns
    -------
    cov : torch.Tensor of shape (..., 3, 3)
        Symmetric positive definite covariance matrices.
    """
    if isinstance(rotation, Quaternion):
        rotation = rotation.as_tensor()
    scale = utils.as_tensor(scale)
    _check_scale(scale)
    rot = quaternion_to_rotation(utils.as_tensor(rotation))
    m = rot * scale.unsqueeze(-2)
    return m @ m.transpose(-1, -2)


def precision_from(
    rotation: Quaternion | utils.ArrayLike, scale: utils.ArrayLike
) -> torch.Tensor:
    """Compute the precision R diag(s)^-2 R^T, the inverse of `covariance_from`."""
    if isinstance(rotation, Quaternion):
        rotation = rotation.as_tensor()
    scale = utils.as_tensor(scale)
    _check_scale(scale)
    rot = quaternion_to_rotation(utils.as_tensor(rotation))
    m = rot / scale.unsqueeze(-2)
    return m @ m.transpose(-1, -2)


def gaussian_contributions(
    means: torch.Tensor,
    quats: torch.Tensor,
    scales: torch.Tensor,
    opacities: torch.Tensor,
    points: torch.Tensor,
) -> torch.Tensor:
    """Evaluate o * exp(-1/2 d^T Sigma^-1 d) with d = x - mu, batched.

    All inputs broadcast over their leading dimensions; `opacities` has the leading
    shape only.
    """
    d = points - means
    rot = quaternion_to_rotation(quats)
    # express the offset in the local frame, where the precision is diagonal
    local = (rot.transpose(-1, -2) @ d.unsqueeze(-1)).squeeze(-1) / scales
    return opacities * torch.exp(-0.5 * (local * local).sum(-1))


def sh_to_color(sh: torch.Tensor, view_dirs: torch.Tensor) -> torch.Tensor:
    """Evaluate degree 0 or 1 spherical harmonics into RGB in [0, 1].

    Parameters
    ----------
    sh : torch.Tensor of shape (..., K, 3)
        Coefficients per channel, K = 1 (degree 0) or K = 4 (degree 1).
    view_dirs : torch.Tensor of shape (..., 3)
        Unit viewing directions (from the camera towards the Gaussian).

    Returns
    -------
    rgb : torch.Tensor of shape (..., 3)
    """
    n_coeffs = sh.shape[-2]
    if n_coeffs not in (1, 4):
        raise ConfigError(
            f"Only SH degrees 0 and 1 are supported, got {n_coeffs} coefficients."
        )
    result = settings.SH_C0 * sh[..., 0, :]
    if n_coeffs == 4:
        x, y, z = view_dirs[..., 0:1], view_dirs[..., 1:2], view_dirs[..., 2:3]
        result = (
            result
            - settings.SH_C1 * y * sh[..., 1, :]
            + settings.SH_C1 * z * sh[..., 2, :]
            - settings.SH_C1 * x * sh[..., 3, :]
        )
    return (result + 0.5).clamp(0.0, 1.0)


def rgb_to_sh(rgb: utils.ArrayLike) -> torch.Tensor:
    """Degree-0 coefficients whose colour is `rgb`."""
    return (utils.as_tensor(rgb) - 0.5) / settings.SH_C0


@dataclass
class Gaussian3D:
    """A single 3D Gaussian.

    Parameters
    ----------
    center : array-like of shape (3,)
        Mean in world units.
    rotation : Quaternion
        Orientation of the local axes.
    scale : array-like of shape (3,)
        Standard deviations along the local axes, strictly positive.
    sh_coeffs : array-like of shape (K, 3)
        Spherical-harmonics coefficients, K = 1 or 4.
    opacity : float
        Opacity in [0, 1].
    view_confidence : array-like, optional
        Nonnegative flow confidence per registered view.
    """

    center: torch.Tensor
    rotation: Quaternion
    scale: torch.Tensor
    sh_coeffs: torch.Tensor
    opacity: float
    view_confidence: torch.Tensor | None = None

    def __post_init__(self):
        """Validate and convert the fields."""
        self.center = utils.as_tensor(self.center).reshape(3)
        self.scale = utils.as_tensor(self.scale).reshape(3)
        _check_scale(self.scale)
        self.sh_coeffs = utils.as_tensor(self.sh_coeffs).reshape(-1, 3)
        if self.sh_coeffs.shape[0] not in (1, 4):
            raise ConfigError("Only SH degrees 0 and 1 are supported.")
        if not 0.0 <= float(self.opacity) <= 1.0:
            raise DomainError(f"Opacity must lie in [0, 1], got {self.opacity}.")
        self.opacity = float(self.opacity)
        if self.view_confidence is not None:
            self.view_confidence = utils.as_tensor(self.view_confidence).reshape(-1)

    @property
    def covariance(self) -> torch.Tensor:
        """Covariance matrix derived from rotation and scale."""
        return covariance_from(self.rotation, self.scale)


def contribution(g: Gaussian3D, x: utils.ArrayLike) -> torch.Tensor:
    """Contribution of `g` at the point(s) `x` of shape (..., 3)."""
    x = utils.as_tensor(x)
    return gaussian_contributions(
        g.center,
        g.rotation.as_tensor(),
        g.scale,
        torch.tensor(g.opacity, dtype=settings.DTYPE),
        x,
    )


def _logit(p: torch.Tensor) -> torch.Tensor:
    p = p.clamp(1e-12, 1 - 1e-12)
    return torch.log(p) - torch.log1p(-p)


# names of the per-Gaussian tensors in storage order
PARAMETER_NAMES = ("means", "quats", "log_scales", "opacity_logits", "sh")


@dataclass
class GaussianCloud:
    """Ordered collection of Gaussians stored as parameter tensors.

    Scales are stored in log space and opacities as logits so that unconstrained
    gradient steps keep them valid; the properties `scales` and `opacities` expose
    the linear values.

    Parameters
    ----------
    means : torch.Tensor of shape (N, 3)
    quats : torch.Tensor of shape (N, 4)
        Raw (w, x, y, z) quaternions, normalized by `normalize_`.
    log_scales : torch.Tensor of shape (N, 3)
    opacity_logits : torch.Tensor of shape (N,)
    sh : torch.Tensor of shape (N, K, 3)
    dynamic_flags : torch.Tensor of shape (N,), optional
        Boolean dynamic labels.
    log_confidence : torch.Tensor of shape (N, V), optional
        Log flow confidence per registered view (V = 1 for monocular scenes).
    generation : int, default 0
        Counter bumped on every structural change.
    """

    means: torch.Tensor
    quats: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    sh: torch.Tensor
    dynamic_flags: torch.Tensor | None = None
    log_confidence: torch.Tensor | None = None
    generation: int = 0

    def __post_init__(self):
        """Check the per-Gaussian shapes."""
        n = self.means.shape[0]
        for name in PARAMETER_NAMES:
            if getattr(self, name).shape[0] != n:
                raise DomainError(f"`{name}` does not have {n} rows.")
        if self.sh.shape[1] not in (1, 4):
            raise ConfigError("Only SH degrees 0 and 1 are supported.")
        if self.dynamic_flags is not None and self.dynamic_flags.shape != (n,):
            raise DomainError("`dynamic_flags` needs exactly one entry per Gaussian.")
        if self.log_confidence is not None and self.log_confidence.shape[0] != n:
            raise DomainError("`log_confidence` needs exactly one row per Gaussian.")

    @classmethod
    def from_parameters(
        cls,
        means: utils.ArrayLike,
        *,
        rotations: utils.ArrayLike | None = None,
        scales: utils.ArrayLike,
        opacities: utils.ArrayLike,
        colors: utils.ArrayLike | None = None,
        sh: utils.ArrayLike | None = None,
    ) -> "GaussianCloud":
        """Build a cloud from linear-space parameters.

        Parameters
        ----------
        means : array-like of shape (N, 3)
        rotations : array-like of shape (N, 4), optional
            Quaternions, identity if None.
        scales : array-like of shape (N, 3) or (N,)
            Linear scales; a 1D array gives isotropic Gaussians.
        opacities : array-like of shape (N,)
        colors : array-like of shape (N, 3), optional
            Base RGB, converted to degree-0 coefficients. Ignored if `sh` is given.
        sh : array-like of shape (N, K, 3), optional
            Spherical-harmonics coefficients.
        """
        means = utils.as_tensor(means).reshape(-1, 3)
        n = means.shape[0]
        if rotations is None:
            quats = torch.zeros((n, 4), dtype=settings.DTYPE)
            quats[:, 0] = 1.0
        else:
            quats = utils.as_tensor(rotations).reshape(n, 4)
        scales = utils.as_tensor(scales)
        if scales.ndim == 1:
            scales = scales.unsqueeze(-1).expand(n, 3)
        _check_scale(scales)
        opacities = utils.as_tensor(opacities).reshape(n)
        if not bool(torch.all((opacities >= 0) & (opacities <= 1))):
            raise DomainError("Opacities must lie in [0, 1].")
        if sh is None:
            if colors is None:
                colors = torch.full((n, 3), 0.5, dtype=settings.DTYPE)
            sh = rgb_to_sh(colors).reshape(n, 1, 3)
        else:
            sh = utils.as_tensor(sh).reshape(n, -1, 3)
        return cls(
            means=means.clone(),
            quats=quats.clone(),
            log_scales=torch.log(scales).clone(),
            opacity_logits=_logit(opacities),
            sh=sh.clone(),
        ).normalize_()

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian3D]) -> "GaussianCloud":
        """Build a cloud from individual Gaussians."""
        if len(gaussians) == 0:
            return cls.empty()
        return cls.from_parameters(
            torch.stack([g.center for g in gaussians]),
            rotations=torch.stack([g.rotation.as_tensor() for g in gaussians]),
            scales=torch.stack([g.scale for g in gaussians]),
            opacities=torch.tensor([g.opacity for g in gaussians]),
            sh=torch.stack([g.sh_coeffs for g in gaussians]),
        )

    @classmethod
    def empty(cls, *, sh_degree: int = 0) -> "GaussianCloud":
        """Cloud without Gaussians."""
        k = (sh_degree + 1) ** 2
        return cls(
            means=torch.zeros((0, 3), dtype=settings.DTYPE),
            quats=torch.zeros((0, 4), dtype=settings.DTYPE),
            log_scales=torch.zeros((0, 3), dtype=settings.DTYPE),
            opacity_logits=torch.zeros(0, dtype=settings.DTYPE),
            sh=torch.zeros((0, k, 3), dtype=settings.DTYPE),
        )

    def __len__(self) -> int:
        """Number of Gaussians."""
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        """Return a detached view of the `i`-th Gaussian."""
        with torch.no_grad():
            return Gaussian3D(
                center=self.means[i].detach().clone(),
                rotation=Quaternion.from_tensor(self.quats[i]),
                scale=self.scales[i].detach().clone(),
                sh_coeffs=self.sh[i].detach().clone(),
                opacity=float(self.opacities[i]),
                view_confidence=(
                    None
                    if self.log_confidence is None
                    else torch.exp(self.log_confidence[i]).detach().clone()
                ),
            )

    def __iter__(self) -> Iterator[Gaussian3D]:
        """Iterate over detached Gaussians."""
        for i in range(len(self)):
            yield self[i]

    @property
    def rotations(self) -> torch.Tensor:
        """Unit quaternions."""
        return self.quats / self.quats.norm(dim=-1, keepdim=True).clamp_min(
            settings.QUAT_EPS
        )

    @property
    def scales(self) -> torch.Tensor:
        """Linear scales."""
        return torch.exp(self.log_scales)

    @property
    def opacities(self) -> torch.Tensor:
        """Opacities in [0, 1]."""
        return torch.sigmoid(self.opacity_logits)

    @property
    def sh_degree(self) -> int:
        """Spherical-harmonics degree."""
        return 0 if self.sh.shape[1] == 1 else 1

    @property
    def covariances(self) -> torch.Tensor:
        """Covariance matrices of shape (N, 3, 3)."""
        rot = quaternion_to_rotation(self.quats)
        m = rot * self.scales.unsqueeze(-2)
        return m @ m.transpose(-1, -2)

    def parameters(self) -> dict[str, torch.Tensor]:
        """Learnable tensors by name, in storage order."""
        params = {name: getattr(self, name) for name in PARAMETER_NAMES}
        if self.log_confidence is not None:
            params["log_confidence"] = self.log_confidence
        return params

    def requires_grad_(self, names: Sequence[str] | None = None) -> "GaussianCloud":
        """Turn gradients on for `names` (all parameters if None) and off otherwise."""
        params = self.parameters()
        if names is None:
            names = list(params)
        unknown = set(names) - set(params)
        if unknown:
            raise ConfigError(f"Unknown cloud parameters: {sorted(unknown)}.")
        for name, tensor in params.items():
            tensor.requires_grad_(name in names)
        return self

    def detach(self) -> "GaussianCloud":
        """Copy of the cloud sharing no autograd history, same generation."""

        def _copy(tensor):
            return None if tensor is None else tensor.detach().clone()

        return GaussianCloud(
            means=_copy(self.means),
            quats=_copy(self.quats),
            log_scales=_copy(self.log_scales),
            opacity_logits=_copy(self.opacity_logits),
            sh=_copy(self.sh),
            dynamic_flags=_copy(self.dynamic_flags),
            log_confidence=_copy(self.log_confidence),
            generation=self.generation,
        )

    def with_geometry(
        self,
        means: torch.Tensor,
        quats: torch.Tensor | None = None,
        log_scales: torch.Tensor | None = None,
    ) -> "GaussianCloud":
        """Same Gaussians with replaced geometry, e.g. a deformed state.

        The replacement tensors keep their autograd history, and the result shares
        the generation of `self`.
        """
        return GaussianCloud(
            means=means,
            quats=self.quats if quats is None else quats,
            log_scales=self.log_scales if log_scales is None else log_scales,
            opacity_logits=self.opacity_logits,
            sh=self.sh,
            dynamic_flags=self.dynamic_flags,
            log_confidence=self.log_confidence,
            generation=self.generation,
        )

    @torch.no_grad()
    def normalize_(self) -> "GaussianCloud":
        """Renormalize, in place, the stored quaternions whose norm drifted."""
        drifted = (self.quats.norm(dim=-1, keepdim=True) - 1).abs() > 1e-12
        self.quats.copy_(torch.where(drifted, self.rotations, self.quats))
        return self

    def init_confidence(self, n_views: int) -> "GaussianCloud":
        """Initialize the per-view flow confidence to 1."""
        self.log_confidence = torch.zeros((len(self), n_views), dtype=settings.DTYPE)
        return self

    def confidence(self, view: int = 0) -> torch.Tensor:
        """Flow confidence for `view`, clamped to `settings.CONFIDENCE_BOUNDS`."""
        if self.log_confidence is None:
            return torch.ones(len(self), dtype=settings.DTYPE)
        lo, hi = settings.CONFIDENCE_BOUNDS
        view = min(view, self.log_confidence.shape[1] - 1)
        return torch.exp(
            self.log_confidence[:, view].clamp(float(np.log(lo)), float(np.log(hi)))
        )

    def set_dynamic_flags(self, flags: torch.Tensor | None) -> None:
        """Replace the dynamic labels (one boolean per Gaussian)."""
        if flags is not None and flags.shape != (len(self),):
            raise DomainError("`dynamic_flags` needs exactly one entry per Gaussian.")
        self.dynamic_flags = flags

    def bump_generation(self) -> None:
        """Mark a structural change."""
        self.generation += 1

    @torch.no_grad()
    def select(self, mask: torch.Tensor) -> dict[str, torch.Tensor]:
        """Rows of every per-Gaussian tensor selected by `mask` (or an index)."""
        out = {
            name: tensor.detach()[mask].clone()
            for name, tensor in self.parameters().items()
        }
        if self.dynamic_flags is not None:
            out["dynamic_flags"] = self.dynamic_flags[mask].clone()
        return out

    @torch.no_grad()
    def replace_rows(self, rows: dict[str, torch.Tensor]) -> None:
        """Replace every per-Gaussian tensor and bump the generation."""
        for name in PARAMETER_NAMES:
            setattr(self, name, rows[name].detach().clone())
        if self.log_confidence is not None:
            self.log_confidence = rows["log_confidence"].detach().clone()
        if self.dynamic_flags is not None:
            self.dynamic_flags = rows.get("dynamic_flags")
        self.__post_init__()
        self.bump_generation()
