"""Desk-scale experiments on synthetic scenes.

* `occluder_experiment` compares the alpha-composited rendered flow with the
  per-Gaussian correspondence flow behind a static occluder.
* `run_ablation` trains paired variants of the flow supervision on the same seeds.
* `dynamic_map_experiment` compares the raw and the refined dynamic maps.
* `gradient_suite` checks the analytic gradients of every loss term against finite
  differences.
"""

import logging as lg
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from os import path

import numpy as np
import pandas as pd
import torch

from flowsplat import settings, synth, utils
from flowsplat.autodiff import GradCheckReport, ParamSet, grad_check
from flowsplat.camera import flows_between
from flowsplat.correspondence import (
    FlowField2D,
    foreground_search,
    predicted_flows,
)
from flowsplat.deform import DeformModel, refined_dynamic_map
from flowsplat.errors import DomainError
from flowsplat.gaussians import PARAMETER_NAMES
from flowsplat.losses import (
    color_loss_dynamic,
    dynamic_map_from_flow,
    flow_loss_kl,
    physical_loss,
    rigidity_neighbors,
    total_loss_deform,
    total_loss_iterative,
    velocity_alignment,
)
from flowsplat.metrics import mask_iou
from flowsplat.rasterizer import render, render_flow
from flowsplat.trainers import TrainConfig, train_deform, train_iterative
from flowsplat.viz import flow_panels

__all__ = [
    "ABLATIONS",
    "GRADIENT_TERMS",
    "OccluderResult",
    "dynamic_map_experiment",
    "gradient_suite",
    "occluder_experiment",
    "run_ablation",
    "summarize_ablation",
]

ABLATIONS = {
    "full": {},
    "l1": {"flow_loss": "l1"},
    "render": {"flow_loss": "render"},
    "no_injector": {"use_injector": False},
    "raw_map": {"dynamic_map": "raw"},
    "baseline": {"lambda_max": 0.0},
}
GRADIENT_TERMS = ("color", "flow", "physical", "velocity", "iterative", "deform")

ABLATION_COLUMNS = ["variant", "seed", "motion_epe", "psnr", "gaussian_count"]


########################################################################################
# occluder
@dataclass
class OccluderResult:
    """Outcome of the occluder experiment.

    Attributes
    ----------
    table : pandas.DataFrame
        One row per occluded pixel with the ground-truth motion of the moving
        Gaussian, the rendered and the correspondence flows and their relative
        errors.
    rendered_error : float
        Mean relative error of the rendered flow.
    correspondence_error : float
        Mean relative error of the correspondence flow.
    """

    table: pd.DataFrame
    rendered_error: float
    correspondence_error: float


def occluder_experiment(
    dst_dir: utils.PathType,
    *,
    spec: synth.SceneSpec | None = None,
    seed: int = 0,
    k: int | None = None,
) -> OccluderResult:
    """Flow of a moving Gaussian seen behind a static occluder.

    Occluded pixels are those where the moving Gaussian contributes at least
    `settings.FLOW_WEIGHT_MIN` but a static Gaussian contributes more. There the
    rendered flow blends the motion with the occluder's zero motion, whereas the
    correspondence assigns the moving Gaussian its own projected motion.

    Writes `occluder_flows.png` (rendered and correspondence panels) and
    `occluder_errors.csv` to `dst_dir`.

    Parameters
    ----------
    dst_dir : path-like
    spec : synth.SceneSpec, optional
        Scene with exactly one moving Gaussian. Defaults to `synth.occluder()`.
    seed : int, default 0
    k : int, optional
        Candidates per pixel. Defaults to `settings.K_CANDIDATES`.

    Returns
    -------
    OccluderResult
    """
    if spec is None:
        spec = synth.occluder()
    gt = synth.generate(spec, seed)
    moving = torch.nonzero(gt.labels)[:, 0]
    if len(moving) != 1:
        raise DomainError(
            f"The occluder scene needs exactly one moving Gaussian, got {len(moving)}."
        )
    i = int(moving[0])
    prev, curr = gt.states[0], gt.states[1]
    cam_prev, cam_curr = gt.cameras[0][0], gt.cameras[1][0]
    h, w = cam_prev.height, cam_prev.width

    with torch.no_grad():
        out = render(prev, cam_prev, spec.background)
        rendered = render_flow(prev, cam_prev, cam_curr, curr.means)
        flows, _ = flows_between(cam_prev, cam_curr, prev.means, curr.means)
        target = flows[i]
        w_moving = out.weights[..., i]
        others = out.weights.clone()
        others[..., i] = 0.0
        occluded = (w_moving >= settings.FLOW_WEIGHT_MIN) & (
            others.max(dim=-1).values > w_moving
        )
        cands = foreground_search(out.depth, cam_prev, prev, k, out.alpha)
        pred, _ = predicted_flows(cands, prev, curr, cam_prev, cam_curr)
    if not bool(occluded.any()):
        raise DomainError("No pixel of the moving Gaussian is occluded.")

    slot = cands.indices == i
    has = slot.any(dim=-1)
    moving_flow = (pred * slot.unsqueeze(-1)).sum(dim=1)
    correspondence = torch.full((h, w, 2), float("nan"), dtype=settings.DTYPE)
    u, v = cands.pixels[:, 0].long(), cands.pixels[:, 1].long()
    correspondence[v[has], u[has]] = moving_flow[has]

    norm = float(target.norm())
    if norm == 0:
        raise DomainError("The moving Gaussian does not move in the image.")
    rows_v, rows_u = torch.nonzero(occluded, as_tuple=True)
    r = rendered[rows_v, rows_u]
    c = correspondence[rows_v, rows_u]
    table = pd.DataFrame(
        {
            "u": rows_u.numpy(),
            "v": rows_v.numpy(),
            "gt_u": float(target[0]),
            "gt_v": float(target[1]),
            "rendered_u": r[:, 0].numpy(),
            "rendered_v": r[:, 1].numpy(),
            "correspondence_u": c[:, 0].numpy(),
            "correspondence_v": c[:, 1].numpy(),
            "rendered_error": ((r - target).norm(dim=-1) / norm).numpy(),
            "correspondence_error": ((c - target).norm(dim=-1) / norm).numpy(),
        }
    )
    with utils.atomic_path(path.join(dst_dir, "occluder_errors.csv")) as tmp:
        table.to_csv(tmp, index=False)
    flow_panels(
        [
            FlowField2D(rendered, out.alpha >= settings.ALPHA_FLOOR),
            FlowField2D(correspondence),
        ],
        path.join(dst_dir, "occluder_flows.png"),
        max_mag=norm,
    )
    result = OccluderResult(
        table=table,
        rendered_error=float(table["rendered_error"].mean()),
        correspondence_error=float(np.nanmean(table["correspondence_error"])),
    )
    lg.info(
        f"Occluder: {len(table)} occluded pixels, rendered flow error "
        f"{result.rendered_error:.1%}, correspondence error "
        f"{result.correspondence_error:.1%}."
    )
    return result


########################################################################################
# paired ablations
def _train(gt: synth.GroundTruth, config: TrainConfig, seed: int):
    frames = gt.observations()
    init = synth.perturbed_cloud(gt.states[0], seed)
    gt_means = [s.means for s in gt.states]
    gt_mask = gt.labels if bool(gt.labels.any()) else None
    if config.paradigm == "iterative":
        result = train_iterative(
            frames, init, config, gt_means=gt_means, gt_mask=gt_mask
        )
        return result.report, result.states[-1], None
    result = train_deform(frames, init, config, gt_means=gt_means, gt_mask=gt_mask)
    return result.report, result.cloud, result


def run_ablation(
    spec: synth.SceneSpec | None = None,
    config: TrainConfig | None = None,
    *,
    seeds: Sequence[int] = (0, 1, 2),
    variants: Sequence[str] | None = None,
    overrides: Mapping[str, Mapping] | None = None,
) -> pd.DataFrame:
    """Train paired variants on the same scenes and seeds.

    Parameters
    ----------
    spec : synth.SceneSpec, optional
        Defaults to `synth.moving_blob()`.
    config : TrainConfig, optional
        Base configuration of every variant. Defaults to the deformation paradigm.
    seeds : sequence of int, default (0, 1, 2)
        Seeds of the scene, the initialization and the training.
    variants : sequence of str, optional
        Keys of `ABLATIONS` (or of `overrides`). Defaults to every key.
    overrides : mapping, optional
        Extra variants as configuration overrides by name.

    Returns
    -------
    pandas.DataFrame
        One row per variant and seed with the columns of `ABLATION_COLUMNS`.
    """
    if spec is None:
        spec = synth.moving_blob()
    if config is None:
        config = TrainConfig(paradigm="deform")
    table = dict(ABLATIONS)
    if overrides is not None:
        table.update(overrides)
    if variants is None:
        variants = list(table)
    unknown = set(variants) - set(table)
    if unknown:
        raise DomainError(f"Unknown ablation variants {sorted(unknown)}.")

    rows = []
    for seed in seeds:
        gt = synth.generate(spec, seed)
        for variant in variants:
            variant_config = TrainConfig(
                **{**config.to_dict(), **table[variant], "seed": seed}
            )
            lg.info(f"Ablation variant '{variant}', seed {seed}.")
            report, _, _ = _train(gt, variant_config, seed)
            rows.append(
                {
                    "variant": variant,
                    "seed": seed,
                    "motion_epe": report.motion_epe,
                    "psnr": float(report.frame_metrics["psnr"].mean()),
                    "gaussian_count": report.gaussian_counts[-1],
                }
            )
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)


def summarize_ablation(table: pd.DataFrame) -> pd.DataFrame:
    """Mean metrics per variant, in the order of first appearance."""
    order = list(dict.fromkeys(table["variant"]))
    summary = table.groupby("variant")[["motion_epe", "psnr", "gaussian_count"]].mean()
    return summary.loc[order].reset_index()


########################################################################################
# dynamic maps
def dynamic_map_experiment(
    spec: synth.SceneSpec | None = None,
    config: TrainConfig | None = None,
    *,
    seed: int = 0,
    threshold: float | None = None,
) -> pd.DataFrame:
    """Compare raw and refined dynamic maps after deformation training.

    Parameters
    ----------
    spec : synth.SceneSpec, optional
        Defaults to `synth.moving_blob()`.
    config : TrainConfig, optional
        Must keep the velocity head. Defaults to the deformation paradigm.
    seed : int, default 0
    threshold : float, optional
        Refined-map value above which a pixel counts as moving. Defaults to
        `settings.TAU_DYN`.

    Returns
    -------
    pandas.DataFrame
        Columns `frame`, `view`, `raw_mean`, `refined_mean` and `iou`, the last
        one against the ground-truth motion footprint.
    """
    if spec is None:
        spec = synth.moving_blob()
    if config is None:
        config = TrainConfig(paradigm="deform", seed=seed)
    if threshold is None:
        threshold = settings.TAU_DYN
    if config.paradigm != "deform" or not config.use_injector:
        raise DomainError("Refined dynamic maps need the deformation velocity head.")
    gt = synth.generate(spec, seed)
    _, cloud, result = _train(gt, config, seed)
    model = result.model
    rows = []
    with torch.no_grad():
        for t in range(1, gt.n_frames):
            time_t = model.frame_time(t)
            state = model.deform_cloud(cloud, time_t)
            velocities = model.velocities(state.means, time_t)
            refined = refined_dynamic_map(
                state,
                gt.cameras[t],
                velocities,
                model.dt,
                extent_sigmas=config.extent_sigmas,
            )
            for v in range(gt.n_views):
                raw = dynamic_map_from_flow(gt.flows[t][v])
                rows.append(
                    {
                        "frame": t,
                        "view": v,
                        "raw_mean": float(raw.mean()),
                        "refined_mean": float(refined[v].mean()),
                        "iou": mask_iou(
                            refined[v] > threshold, gt.motion_footprint(t, v)
                        ),
                    }
                )
    columns = ["frame", "view", "raw_mean", "refined_mean", "iou"]
    return pd.DataFrame(rows, columns=columns)


########################################################################################
# gradient checks
def _suite_spec(seed: int) -> synth.SceneSpec:
    return synth.SceneSpec(
        blobs=(
            synth.BlobSpec(
                n_gaussians=4,
                spread=0.1,
                scale=0.08,
                opacity=0.5,
                motion="linear",
                velocity=(0.03, 0.01, 0.0),
            ),
        ),
        n_frames=2,
        width=12,
        height=12,
        fx=24.0,
        seed=seed,
    )


def gradient_suite(
    terms: Sequence[str] | None = None,
    *,
    seed: int = 0,
    step: float = 1e-4,
    tolerance: float = 1e-4,
    scale_floor: float = 0.0,
) -> dict[str, GradCheckReport]:
    """Finite-difference checks of every loss term on a small synthetic scene.

    Rendering runs without footprint truncation so that the losses are smooth in
    the checked parameters.

    Parameters
    ----------
    terms : sequence of str, optional
        Subset of `GRADIENT_TERMS`. Defaults to all of them.
    seed : int, default 0
    step, tolerance, scale_floor : float
        Passed to `flowsplat.autodiff.grad_check`.

    Returns
    -------
    dict of str to GradCheckReport
    """
    if terms is None:
        terms = GRADIENT_TERMS
    unknown = set(terms) - set(GRADIENT_TERMS)
    if unknown:
        raise DomainError(f"Unknown gradient terms {sorted(unknown)}.")
    gt = synth.generate(_suite_spec(seed), seed)
    background = gt.spec.background
    prev = gt.states[0].detach()
    cam_prev, cam = gt.cameras[0][0], gt.cameras[1][0]
    image, flow = gt.images[1][0], gt.flows[1][0]
    cur = synth.perturbed_cloud(gt.states[1], seed, opacity=None)
    cur.init_confidence(1)
    with torch.no_grad():
        out_prev = render(prev, cam_prev, background, extent_sigmas=None)
        cands = foreground_search(out_prev.depth, cam_prev, prev, None, out_prev.alpha)
    dyn = dynamic_map_from_flow(flow)
    everyone = torch.ones(len(prev), dtype=torch.bool)
    neighbors = rigidity_neighbors(prev.means, everyone, 3)
    model = DeformModel(
        torch.stack([prev.means.min(dim=0).values, prev.means.max(dim=0).values])
        + torch.tensor([[-0.5], [0.5]], dtype=settings.DTYPE),
        2,
        seed=seed,
        field_kwargs={"feature_dim": 2, "resolutions": (4,), "time_resolution": 2},
        width=4,
    )
    model.perturb_heads_(0.1, generator=torch.Generator().manual_seed(seed))

    def color(state):
        rendered = render(state, cam, background, extent_sigmas=None).color
        return color_loss_dynamic(image, rendered, dyn, settings.LAMBDA_C)

    def flow_kl(state_prev_means, state_means):
        predicted = predicted_flows(cands, state_prev_means, state_means, cam_prev, cam)
        return flow_loss_kl(flow, cands, predicted, cur.confidence(0))

    def velocity(means):
        velocities = model.velocities(means, 0.0)
        return velocity_alignment(
            cands, flow, means, velocities, model.dt, cam_prev, cam
        )

    def iterative():
        parts = {
            "color": color(cur),
            "flow": flow_kl(prev.means, cur.means),
            "physical": physical_loss(cur, prev, everyone, neighbors),
        }
        return total_loss_iterative(parts, settings.LAMBDA_P, settings.LAMBDA_MAX).total

    def deformed():
        state_prev = model.deform_cloud(cur, 0.0)
        state = model.deform_cloud(cur, 1.0)
        parts = {
            "color": color(state),
            "flow": flow_kl(state_prev.means, state.means),
            "velocity": velocity(state_prev.means),
        }
        return total_loss_deform(parts, settings.LAMBDA_MAX).total

    cloud_params = ParamSet.from_cloud(cur, names=PARAMETER_NAMES)
    checks = {
        "color": (lambda: color(cur), cloud_params),
        "flow": (
            lambda: flow_kl(prev.means, cur.means),
            ParamSet.from_cloud(cur, names=["means", "log_confidence"]),
        ),
        "physical": (
            lambda: physical_loss(cur, prev, everyone, neighbors),
            ParamSet.from_cloud(cur, names=["means"]),
        ),
        "velocity": (
            lambda: velocity(prev.means),
            ParamSet.from_module(model.velocity_head, prefix="model.velocity_head"),
        ),
        "iterative": (
            iterative,
            ParamSet.from_cloud(cur, names=["means", "quats", "log_confidence"]),
        ),
        "deform": (
            deformed,
            ParamSet.from_cloud(cur, names=["means"])
            | ParamSet.from_module(model.field, prefix="model.field")
            | ParamSet.from_module(model.decoder, prefix="model.decoder")
            | ParamSet.from_module(model.velocity_head, prefix="model.velocity_head"),
        ),
    }
    cur.requires_grad_([*PARAMETER_NAMES, "log_confidence"])
    reports = {}
    for term in terms:
        loss_fn, params = checks[term]
        reports[term] = grad_check(
            loss_fn, params, step=step, tolerance=tolerance, scale_floor=scale_floor
        )
        lg.info(f"Gradient check '{term}': {reports[term].max_rel_error:.3e}.")
    return reports
