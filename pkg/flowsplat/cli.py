"""Command-line interface."""

import argparse
import dataclasses
import logging as lg
import sys
from collections.abc import Sequence
from os import path

import pandas as pd
import torch

from flowsplat import errors, experiments, formats, synth, trainers, utils
from flowsplat.correspondence import FlowField2D
from flowsplat.deform import displacement_histogram
from flowsplat.metrics import evaluate
from flowsplat.rasterizer import render, render_flow
from flowsplat.viz import flow_panels

__all__ = ["main"]

CHECKPOINT_NAME = "checkpoint.fsck"
FLOWSPLAT_ERRORS = (
    errors.DomainError,
    errors.ConfigError,
    errors.FormatError,
    errors.StaleCandidatesError,
    errors.NonFiniteError,
    errors.NondeterminismError,
    errors.DivergenceError,
)


def _optional_float(text: str) -> float | None:
    if text.strip().lower() == "none":
        return None
    return float(text)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training configuration")
    for f in dataclasses.fields(trainers.TrainConfig):
        if f.name == "paradigm":
            continue
        flag = "--" + f.name.replace("_", "-")
        kwargs = {"dest": f.name, "default": None}
        if isinstance(f.default, bool):
            kwargs["action"] = argparse.BooleanOptionalAction
        elif f.name == "extent_sigmas":
            kwargs["type"] = _optional_float
        elif f.name in ("flow_loss", "dynamic_map"):
            kwargs["choices"] = (
                trainers.FLOW_LOSSES if f.name == "flow_loss" else trainers.DYNAMIC_MAPS
            )
        else:
            kwargs["type"] = type(f.default)
        group.add_argument(flag, **kwargs)


def _train_config(args: argparse.Namespace, paradigm: str) -> trainers.TrainConfig:
    overrides = {
        f.name: getattr(args, f.name)
        for f in dataclasses.fields(trainers.TrainConfig)
        if getattr(args, f.name, None) is not None
    }
    overrides["paradigm"] = paradigm
    if args.config is not None:
        return trainers.TrainConfig.from_file(args.config, **overrides)
    return trainers.TrainConfig(**overrides)


def _dataset_truth(dataset: synth.Dataset) -> tuple[list, torch.Tensor | None]:
    gt_means = [dataset.gt_means(t) for t in range(dataset.spec.n_frames)]
    labels = dataset.labels.sort_values("gaussian")
    gt_mask = torch.as_tensor(labels["dynamic"].to_numpy(dtype=bool))
    return gt_means, gt_mask if bool(gt_mask.any()) else None


########################################################################################
# commands
def _generate(args: argparse.Namespace) -> int:
    if args.spec is not None:
        spec = synth.SceneSpec.from_file(args.spec)
    else:
        spec = synth.PRESETS[args.preset]()
    gt = synth.generate(spec, args.seed)
    synth.write_dataset(gt, args.out)
    lg.info(f"Wrote {gt.n_frames} frames of {gt.n_views} view(s) to {args.out}.")
    return 0


def _train(args: argparse.Namespace, paradigm: str) -> int:
    config = _train_config(args, paradigm)
    dataset = synth.load_dataset(args.data)
    if args.init is not None:
        init = formats.load_cloud(args.init)
    else:
        init = synth.perturbed_cloud(dataset.cloud, config.seed)
    gt_means, gt_mask = _dataset_truth(dataset)
    frames = dataset.observations()
    checkpoint_filepath = path.join(args.out, CHECKPOINT_NAME)
    if paradigm == "iterative":
        result = trainers.train_iterative(
            frames, init, config, gt_means=gt_means, gt_mask=gt_mask
        )
        formats.save_checkpoint(
            checkpoint_filepath,
            result.states[-1],
            states=result.states,
            config=config.to_dict(),
        )
    else:
        result = trainers.train_deform(
            frames, init, config, gt_means=gt_means, gt_mask=gt_mask
        )
        formats.save_checkpoint(
            checkpoint_filepath,
            result.cloud,
            model=result.model,
            config=config.to_dict(),
        )
    result.report.to_dir(args.out)
    config.to_file(path.join(args.out, "train.cfg"))
    psnr = result.report.frame_metrics["psnr"].mean()
    lg.info(
        f"Trained the {paradigm} paradigm: mean PSNR {psnr:.2f} dB, "
        f"{result.report.gaussian_counts[-1]} Gaussians, checkpoint "
        f"{checkpoint_filepath}."
    )
    return 0


def _checkpoint_states(checkpoint: formats.Checkpoint, n_frames: int) -> list:
    if checkpoint.model is not None:
        with torch.no_grad():
            return [
                checkpoint.model.deform_cloud(
                    checkpoint.cloud, checkpoint.model.frame_time(t)
                ).detach()
                for t in range(checkpoint.model.n_frames)
            ]
    states = checkpoint.frame_states()
    if not states:
        states = [checkpoint.cloud] * n_frames
    return states


def _render(args: argparse.Namespace) -> int:
    checkpoint = formats.load_checkpoint(args.checkpoint)
    dataset = synth.load_dataset(args.data)
    frames = dataset.observations()
    states = _checkpoint_states(checkpoint, len(frames))
    if len(states) != len(frames):
        raise errors.DomainError(
            f"The checkpoint holds {len(states)} frames, the dataset {len(frames)}."
        )
    config = checkpoint.config or {}
    extent_sigmas = config.get("extent_sigmas", trainers.TrainConfig.extent_sigmas)
    trajectories = []
    with torch.no_grad():
        for t, (state, obs) in enumerate(zip(states, frames)):
            for v, cam in enumerate(obs.cameras):
                out = render(state, cam, obs.background, extent_sigmas=extent_sigmas)
                formats.write_png(
                    out.color, path.join(args.out, "frames", f"{t:04d}", f"{v:02d}.png")
                )
                if t > 0:
                    flow = render_flow(
                        states[t - 1],
                        frames[t - 1].cameras[v],
                        cam,
                        state.means,
                        extent_sigmas=extent_sigmas,
                    )
                    formats.write_flo(
                        FlowField2D(flow),
                        path.join(args.out, "flow", f"{t:04d}", f"{v:02d}.flo"),
                    )
            means = state.means.numpy()
            trajectories.append(
                pd.DataFrame(
                    {
                        "frame": t,
                        "gaussian": range(len(state)),
                        "x": means[:, 0],
                        "y": means[:, 1],
                        "z": means[:, 2],
                    }
                )
            )
    with utils.atomic_path(path.join(args.out, "trajectories.csv")) as tmp:
        pd.concat(trajectories, ignore_index=True).to_csv(tmp, index=False)
    lg.info(f"Rendered {len(frames)} frames to {args.out}.")
    return 0


def _eval(args: argparse.Namespace) -> int:
    report = evaluate(args.pred, args.gt)
    report.to_csv(args.out)
    if args.checkpoint is not None:
        checkpoint = formats.load_checkpoint(args.checkpoint)
        if checkpoint.model is None:
            lg.warning("The checkpoint has no deformation model, no histogram.")
        else:
            histogram = displacement_histogram(checkpoint.model, checkpoint.cloud)
            dst_filepath = path.join(
                path.dirname(path.abspath(args.out)), "displacement_histogram.csv"
            )
            with utils.atomic_path(dst_filepath) as tmp:
                histogram.to_csv(tmp, index=False)
    lg.info(
        f"Mean PSNR {report.mean_psnr:.2f} dB, mean SSIM {report.mean_ssim:.4f}."
    )
    return 0


def _flowviz(args: argparse.Namespace) -> int:
    flows = [formats.read_flo(src_filepath) for src_filepath in args.flow]
    flow_panels(flows, args.out, max_mag=args.max_mag)
    return 0


def _grad_check(args: argparse.Namespace) -> int:
    reports = experiments.gradient_suite(args.terms or None, seed=args.seed)
    tables = []
    for term, report in reports.items():
        print(f"[{term}]\n{report.to_string()}")
        tables.append(report.table.assign(term=term, passed=report.passed))
    if args.out is not None:
        with utils.atomic_path(args.out) as tmp:
            pd.concat(tables, ignore_index=True).to_csv(tmp, index=False)
    failed = [term for term, report in reports.items() if not report.passed]
    if failed:
        print(f"grad-check: failed for {failed}", file=sys.stderr)
        return 1
    return 0


def _experiment(args: argparse.Namespace) -> int:
    spec = synth.PRESETS[args.preset]() if args.preset is not None else None
    if args.name == "occluder":
        experiments.occluder_experiment(args.out, spec=spec, seed=args.seeds[0])
        return 0
    config = _train_config(args, args.paradigm)
    if args.name == "ablation":
        table = experiments.run_ablation(
            spec, config, seeds=args.seeds, variants=args.variants
        )
        summary = experiments.summarize_ablation(table)
        with utils.atomic_path(path.join(args.out, "ablation.csv")) as tmp:
            table.to_csv(tmp, index=False)
        with utils.atomic_path(
            path.join(args.out, "ablation_summary.csv")
        ) as tmp:
            summary.to_csv(tmp, index=False)
        print(summary.to_string(index=False))
    else:
        table = experiments.dynamic_map_experiment(spec, config, seed=args.seeds[0])
        with utils.atomic_path(path.join(args.out, "dynamic_map.csv")) as tmp:
            table.to_csv(tmp, index=False)
        print(table.to_string(index=False))
    return 0


########################################################################################
# parser
def build_parser() -> argparse.ArgumentParser:
    """Argument parser of the `flowsplat` command."""
    parser = argparse.ArgumentParser(
        prog="flowsplat",
        description="Flow-supervised dynamic Gaussian splatting on synthetic scenes.",
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    generate = subparsers.add_parser("generate", help="Generate a synthetic dataset.")
    source = generate.add_mutually_exclusive_group(required=True)
    source.add_argument("--spec", help="Scene file with [scene] and [blob.N].")
    source.add_argument("--preset", choices=sorted(synth.PRESETS))
    generate.add_argument("--seed", type=int, default=None)
    generate.add_argument("--out", required=True, help="Dataset directory.")

    for name, help_text in (
        ("train-iter", "Train the iterative paradigm."),
        ("train-deform", "Train the deformation paradigm."),
    ):
        train = subparsers.add_parser(name, help=help_text)
        train.add_argument("--data", required=True, help="Dataset directory.")
        train.add_argument("--out", required=True, help="Output directory.")
        train.add_argument("--config", help="Configuration file with [train].")
        train.add_argument("--init", help="Initial cloud as PLY.")
        _add_config_flags(train)

    render_parser = subparsers.add_parser("render", help="Render a checkpoint.")
    render_parser.add_argument("--checkpoint", required=True)
    render_parser.add_argument("--data", required=True, help="Dataset directory.")
    render_parser.add_argument("--out", required=True, help="Output directory.")

    eval_parser = subparsers.add_parser("eval", help="Evaluate renderings.")
    eval_parser.add_argument("--pred", required=True, help="Rendered directory.")
    eval_parser.add_argument("--gt", required=True, help="Dataset directory.")
    eval_parser.add_argument("--out", required=True, help="Metric report CSV.")
    eval_parser.add_argument(
        "--checkpoint", help="Deformation checkpoint for the displacement histogram."
    )

    flowviz = subparsers.add_parser("flowviz", help="Color-code .flo files.")
    flowviz.add_argument("flow", nargs="+", help="Flow files, one panel each.")
    flowviz.add_argument("--out", required=True, help="PNG file.")
    flowviz.add_argument("--max-mag", type=float, default=None)

    grad = subparsers.add_parser("grad-check", help="Finite-difference checks.")
    grad.add_argument("--terms", nargs="*", choices=experiments.GRADIENT_TERMS)
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--out", help="CSV of the per-segment errors.")

    experiment = subparsers.add_parser("experiment", help="Run an experiment.")
    experiment.add_argument("name", choices=["occluder", "ablation", "dynamic-map"])
    experiment.add_argument("--out", required=True, help="Output directory.")
    experiment.add_argument("--preset", choices=sorted(synth.PRESETS))
    experiment.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    experiment.add_argument(
        "--variants", nargs="+", choices=list(experiments.ABLATIONS)
    )
    experiment.add_argument(
        "--paradigm", choices=trainers.PARADIGMS, default="deform"
    )
    experiment.add_argument("--config", help="Configuration file with [train].")
    _add_config_flags(experiment)
    return parser


_COMMANDS = {
    "generate": _generate,
    "train-iter": lambda args: _train(args, "iterative"),
    "train-deform": lambda args: _train(args, "deform"),
    "render": _render,
    "eval": _eval,
    "flowviz": _flowviz,
    "grad-check": _grad_check,
    "experiment": _experiment,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Run the `flowsplat` command and return its exit code.

    Errors raised by flowsplat exit with 1 and a message naming the failing
    command; usage errors exit with 2.
    """
    args = build_parser().parse_args(argv)
    lg.basicConfig(
        level=getattr(lg, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except (*FLOWSPLAT_ERRORS, FileNotFoundError) as err:
        print(f"{args.command}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
