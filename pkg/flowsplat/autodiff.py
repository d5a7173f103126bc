"""Reverse-mode differentiation helpers.

Torch autograd records the forward pass; this module adds a named registry of
flat parameter segments, a checked `backward` that refuses non-finite gradients
and a central finite-difference harness to verify analytic gradients.
"""

from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch

from flowsplat.errors import DomainError, NondeterminismError, NonFiniteError

__all__ = [
    "GradCheckReport",
    "GradSet",
    "ParamSet",
    "Segment",
    "backward",
    "grad_check",
]


@dataclass(frozen=True)
class Segment:
    """Position of a named tensor in the flat parameter vector."""

    name: str
    offset: int
    length: int
    shape: tuple[int, ...]


def _segments(tensors: Mapping[str, torch.Tensor]) -> list[Segment]:
    segments, offset = [], 0
    for name, tensor in tensors.items():
        segments.append(Segment(name, offset, tensor.numel(), tuple(tensor.shape)))
        offset += tensor.numel()
    return segments


class ParamSet:
    """Named, ordered learnable tensors viewed as one flat vector.

    Parameters
    ----------
    tensors : mapping of str to torch.Tensor
        Learnable leaf tensors. The mapping order fixes the segment order.
    """

    def __init__(self, tensors: Mapping[str, torch.Tensor]):
        """Register the tensors."""
        self.tensors = dict(tensors)
        self.segments = _segments(self.tensors)

    @classmethod
    def from_module(cls, module: torch.nn.Module, *, prefix: str) -> "ParamSet":
        """Parameters of a torch module, named `<prefix>.<parameter name>`."""
        return cls({f"{prefix}.{n}": p for n, p in module.named_parameters()})

    @classmethod
    def from_cloud(cls, cloud, *, names: Iterable[str] | None = None) -> "ParamSet":
        """Parameters of a `GaussianCloud`, named `cloud.<parameter name>`."""
        params = cloud.parameters()
        if names is not None:
            params = {name: params[name] for name in names}
        return cls({f"cloud.{n}": p for n, p in params.items()})

    def __or__(self, other: "ParamSet") -> "ParamSet":
        """Concatenate two parameter sets."""
        overlap = set(self.tensors) & set(other.tensors)
        if overlap:
            raise DomainError(f"Duplicated parameter names: {sorted(overlap)}.")
        return ParamSet({**self.tensors, **other.tensors})

    def __getitem__(self, name: str) -> torch.Tensor:
        """Tensor registered as `name`."""
        return self.tensors[name]

    def __len__(self) -> int:
        """Total number of scalar parameters."""
        return sum(seg.length for seg in self.segments)

    @property
    def names(self) -> list[str]:
        """Segment names in order."""
        return [seg.name for seg in self.segments]

    def flatten(self) -> torch.Tensor:
        """Detached flat copy of all parameters."""
        if not self.tensors:
            return torch.zeros(0, dtype=torch.float64)
        return torch.cat([t.detach().reshape(-1) for t in self.tensors.values()])


class GradSet:
    """Gradients with the same segments as a `ParamSet`."""

    def __init__(self, grads: Mapping[str, torch.Tensor]):
        """Store the gradients, rejecting non-finite entries."""
        self.grads = dict(grads)
        self.segments = _segments(self.grads)
        for name, grad in self.grads.items():
            if not bool(torch.isfinite(grad).all()):
                raise NonFiniteError(f"Non-finite gradient in segment '{name}'.")

    def __getitem__(self, name: str) -> torch.Tensor:
        """Gradient of the segment `name`."""
        return self.grads[name]

    def __add__(self, other: "GradSet") -> "GradSet":
        """Segment-wise sum."""
        return GradSet({n: g + other.grads[n] for n, g in self.grads.items()})

    def __mul__(self, factor: float) -> "GradSet":
        """Scale every segment."""
        return GradSet({n: g * factor for n, g in self.grads.items()})

    __rmul__ = __mul__

    def flatten(self) -> torch.Tensor:
        """Flat gradient vector."""
        if not self.grads:
            return torch.zeros(0, dtype=torch.float64)
        return torch.cat([g.reshape(-1) for g in self.grads.values()])


def backward(loss: torch.Tensor, params: ParamSet) -> GradSet:
    """Gradients of a scalar `loss` with respect to every registered parameter.

    Parameters that the loss does not reach get exact zeros.

    Raises
    ------
    NonFiniteError
        If the loss is not finite or a gradient entry is NaN/inf. For gradients,
        the backward pass is replayed in anomaly mode so that the message names
        the first offending autograd node.
    """
    if not bool(torch.isfinite(loss).all()):
        raise NonFiniteError(f"Non-finite loss value {loss.item()}.")
    tensors = list(params.tensors.values())
    if not loss.requires_grad:
        return GradSet({n: torch.zeros_like(t) for n, t in params.tensors.items()})
    grads = torch.autograd.grad(loss, tensors, allow_unused=True, retain_graph=True)
    grads = {
        name: torch.zeros_like(t) if g is None else g
        for (name, t), g in zip(params.tensors.items(), grads)
    }
    bad = [name for name, g in grads.items() if not bool(torch.isfinite(g).all())]
    if bad:
        try:
            with torch.autograd.detect_anomaly(check_nan=True):
                torch.autograd.grad(loss, tensors, allow_unused=True)
        except RuntimeError as err:
            raise NonFiniteError(
                f"Non-finite gradient in segment '{bad[0]}': {err}"
            ) from err
        raise NonFiniteError(f"Non-finite gradient in segment '{bad[0]}'.")
    return GradSet(grads)


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check.

    Attributes
    ----------
    table : pandas.DataFrame
        One row per segment with the maximum relative error, the index of the
        worst entry and the number of checked entries.
    max_rel_error : float
    worst_parameter : str
        `<segment>[<flat index>]` of the worst entry.
    tolerance : float
    """

    table: pd.DataFrame
    max_rel_error: float
    worst_parameter: str
    tolerance: float

    @property
    def passed(self) -> bool:
        """Whether every segment is within tolerance."""
        return self.max_rel_error <= self.tolerance

    def to_string(self) -> str:
        """Plain-text report table."""
        status = "PASSED" if self.passed else "FAILED"
        return (
            f"{self.table.to_string(index=False)}\n"
            f"max relative error {self.max_rel_error:.3e} at {self.worst_parameter}"
            f" (tolerance {self.tolerance:.1e}): {status}"
        )


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: ParamSet,
    *,
    step: float = 1e-4,
    tolerance: float = 1e-4,
    floor: float = 1e-8,
    scale_floor: float = 0.0,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Parameters
    ----------
    loss_fn : callable
        Deterministic closure evaluating the scalar loss from the current values
        of the registered tensors.
    params : ParamSet
        Tensors to perturb, in place, one entry at a time.
    step : float, default 1e-4
        Finite-difference step.
    tolerance : float, default 1e-4
        Maximum accepted relative error.
    floor : float, default 1e-8
        The relative error is |g - g_fd| / max(|g_fd|, floor).
    scale_floor : float, default 0
        Additionally floors the denominator at `scale_floor` times the largest
        |g_fd| of the segment, which discounts entries whose gradient is tiny
        compared to the rest of the segment.

    Raises
    ------
    NondeterminismError
        If two evaluations of `loss_fn` differ.
    """
    if step <= 0:
        raise DomainError(f"`step` must be positive, got {step}.")
    with torch.no_grad():
        first, second = loss_fn(), loss_fn()
    if not torch.equal(first, second):
        raise NondeterminismError(
            f"Loss evaluations differ: {first.item()!r} != {second.item()!r}."
        )
    analytic = backward(loss_fn(), params)

    rows = []
    worst_error, worst_name = 0.0, ""
    for name, tensor in params.tensors.items():
        flat = tensor.data.view(-1)
        grad = analytic[name].reshape(-1).detach().numpy()
        fd = np.zeros_like(grad)
        with torch.no_grad():
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                plus = loss_fn().item()
                flat[j] = orig - step
                minus = loss_fn().item()
                flat[j] = orig
                fd[j] = (plus - minus) / (2 * step)
        if fd.size == 0:
            continue
        denom = np.maximum(np.abs(fd), floor)
        denom = np.maximum(denom, scale_floor * np.abs(fd).max())
        rel = np.abs(grad - fd) / denom
        j = int(np.argmax(rel))
        rows.append(
            {
                "segment": name,
                "max_rel_error": float(rel[j]),
                "worst_index": j,
                "n_checked": fd.size,
            }
        )
        if rel[j] >= worst_error:
            worst_error, worst_name = float(rel[j]), f"{name}[{j}]"
    return GradCheckReport(
        table=pd.DataFrame(
            rows, columns=["segment", "max_rel_error", "worst_index", "n_checked"]
        ),
        max_rel_error=worst_error,
        worst_parameter=worst_name,
        tolerance=tolerance,
    )
