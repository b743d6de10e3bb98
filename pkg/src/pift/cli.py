"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error (unknown flag or
subcommand), 3 malformed config, 4 missing or unreadable dataset/checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fem import SolverError, label_sampleset
from .fields import DatasetError, Grid, SampleSet, load_sampleset, save_sampleset
from .operator import CheckpointError, load_checkpoint, save_checkpoint
from .residual import PdeTask
from .sources import gen_blob_set, gen_medium_set, gen_ood_testset
from .experiments import (CONFIGURATIONS, ExperimentSpec, SpecError, audit_residual, build_datasets,
                          metrics_from_predictions, pretrained_checkpoint, resolve_output, run_scaling)
from .training import LossMode, TrainConfig, TrainingDivergence, finetune

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _spec(args) -> ExperimentSpec:
    return ExperimentSpec.load(args.config) if args.config else ExperimentSpec()


def _out(args, spec: Optional[ExperimentSpec] = None) -> Path:
    out = resolve_output(args.out if args.out else (spec.output_dir if spec else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _task_for(args, ss: Optional[SampleSet] = None) -> PdeTask:
    if getattr(args, "task", None):
        return PdeTask.poisson() if args.task == "poisson" else PdeTask.helmholtz(args.omega) \
            if args.omega is not None else PdeTask.helmholtz()
    if ss is not None and "solver" in ss.generator_params:
        return PdeTask.from_json(ss.generator_params["solver"]["task"])
    if getattr(args, "config", None):
        return _spec(args).pde()
    return PdeTask.poisson() if ss is None or ss.channels == 1 else PdeTask.helmholtz()


def cmd_generate(args) -> int:
    grid = Grid(args.n)
    if args.task == "poisson":
        ss = gen_ood_testset(grid, args.count, args.seed) if args.ood else gen_blob_set(grid, args.count, args.seed)
    else:
        ss = gen_medium_set(grid, "WavyStripes" if args.ood else "GaussianComponents", args.count, args.seed)
    out = _out(args)
    if not args.unlabeled:
        ss = label_sampleset(_task_for(args), ss, log_path=out / "solver.log")
    save_sampleset(ss, out)
    print(f"{out} {ss.count} samples checksum {ss.checksum()}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    spec = _spec(args)
    if args.steps is not None:
        spec.pretrain_steps = args.steps
    out = _out(args, spec)
    ckpt = pretrained_checkpoint(spec, out)
    print(f"{out / 'pretrained.ckpt'} ({ckpt.vector.size} parameters)")
    return EXIT_OK


def cmd_finetune(args) -> int:
    spec = _spec(args)
    out = _out(args, spec)
    task = spec.pde()
    mode = LossMode(args.mode)
    if args.data:
        pool = load_sampleset(args.data)
        if args.samples > pool.count:
            raise DatasetError(f"{args.data} holds {pool.count} samples, {args.samples} requested")
        labeled = pool.subset(range(args.samples), drop_solutions=mode.kind == "physics") if args.samples else None
    else:
        data = build_datasets(spec, out)
        labeled = data.train(args.samples, drop_solutions=mode.kind == "physics") if args.samples else None
    unlabeled = load_sampleset(args.unlabeled) if args.unlabeled else None
    pre = None
    if not args.scratch:
        pre = load_checkpoint(args.pretrained) if args.pretrained else pretrained_checkpoint(spec, out)
    augment = tuple(args.augment) if args.augment else ()
    scratch = args.scratch
    tc = TrainConfig(mode, args.batch_size or spec.batch_size, args.steps if args.steps is not None else spec.steps,
                     spec.lr_scratch if scratch else spec.lr_backbone, spec.lr_scratch if scratch else spec.lr_embed,
                     augment=augment, seed=args.seed)
    ckpt, log = finetune(pre, task, labeled, tc, unlabeled, spec.operator_config(task.in_channels),
                         Grid(spec.grid_n))
    name = args.name or f"{'scratch' if scratch else 'ft'}_{mode.kind}_M{args.samples}"
    save_checkpoint(ckpt, out / f"{name}.ckpt")
    log.to_csv(out / f"{name}_log.csv")
    (out / f"{name}_meta.json").write_text(json.dumps(log.metadata, indent=2, sort_keys=True) + "\n")
    last = log.records[-1]["total_loss"] if log.records else float("nan")
    print(f"{out / (name + '.ckpt')} final loss {last:.6g}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ss = load_sampleset(args.data)
    task = _task_for(args, ss)
    preds = ckpt.to_model().predict(ss.inputs)
    sol, res, mab = metrics_from_predictions(task, preds, ss)
    if args.predictions:
        np.save(args.predictions, preds)
    print(f"median_rel_l1_solution={sol!r} median_rel_l1_residual={res!r} mean_abs_residual={mab!r}")
    return EXIT_OK


def cmd_scaling(args) -> int:
    spec = _spec(args)
    path, rows = run_scaling(spec, args.out or spec.output_dir)
    failed = sum(r.status != "ok" for r in rows)
    print(f"{path} ({len(rows)} rows, {failed} failed)")
    return EXIT_OK


def cmd_audit(args) -> int:
    ss = load_sampleset(args.data)
    task = _task_for(args, ss)
    rows = audit_residual(task, ss)
    out = Path(args.csv) if args.csv else None
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("index", "rel_l1_residual", "mean_abs_residual"))
        w.writerows((i, repr(r), repr(a)) for i, r, a in rows)
    finally:
        if out:
            fh.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pift", description="Physics-informed fine-tuning lab for neural PDE surrogates.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="ExperimentSpec JSON file (defaults to the built-in desk spec)")
        sp.add_argument("--out", help="output directory (relative paths resolve under $PIFT_OUTPUT_ROOT)")

    def task_flags(sp, required=False):
        sp.add_argument("--task", choices=("poisson", "helmholtz"), required=required, help="PDE family")
        sp.add_argument("--omega", type=float, help="Helmholtz frequency (default 5*pi/2)")

    g = sub.add_parser("generate", help="generate (and FEM-label) a dataset")
    task_flags(g, required=True)
    g.add_argument("--n", type=int, default=32, help="grid nodes per side (default 32)")
    g.add_argument("--count", type=int, default=16, help="number of samples (default 16)")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--ood", action="store_true", help="draw from the out-of-distribution family")
    g.add_argument("--unlabeled", action="store_true", help="skip FEM solutions")
    common(g, config=False)
    g.set_defaults(func=cmd_generate)

    pt = sub.add_parser("pretrain", help="train the surrogate backbone on the smoothing family")
    common(pt)
    pt.add_argument("--steps", type=int, help="override the config's pre-training steps")
    pt.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="fine-tune a pretrained model or train from scratch")
    common(f)
    f.add_argument("--mode", choices=("data", "physics", "hybrid"), required=True, help="loss mode")
    f.add_argument("--samples", type=int, default=0, help="labeled samples M (physics mode accepts 0)")
    f.add_argument("--data", help="labeled pool directory (default: build from the config)")
    f.add_argument("--unlabeled", help="extra unlabeled input set for the physics term")
    f.add_argument("--augment", nargs="*", help="on-the-fly augmentation families")
    f.add_argument("--pretrained", help="pretrained checkpoint (default: pretrain per the config)")
    f.add_argument("--scratch", action="store_true", help="train from random initialisation")
    f.add_argument("--steps", type=int, help="override the config's step count")
    f.add_argument("--batch-size", type=int, help="override the config's batch size")
    f.add_argument("--seed", type=int, default=0, help="training seed")
    f.add_argument("--name", help="basename for the checkpoint and log files")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("evaluate", help="median solution / residual errors of a checkpoint on a labeled set")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="labeled dataset directory")
    e.add_argument("--predictions", help="also save raw predictions to this .npy file")
    e.add_argument("--config", help="ExperimentSpec JSON (used for the PDE when the dataset does not record it)")
    task_flags(e)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("scaling", help=f"run the M-scaling sweep over {', '.join(CONFIGURATIONS)}")
    common(s)
    s.set_defaults(func=cmd_scaling)

    a = sub.add_parser("audit-residual", help="residual of the stored solutions of a labeled set")
    a.add_argument("--data", required=True, help="labeled dataset directory")
    a.add_argument("--csv", help="write the audit here instead of stdout")
    a.add_argument("--config", help="ExperimentSpec JSON (used for the PDE when the dataset does not record it)")
    task_flags(a)
    a.set_defaults(func=cmd_audit)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SpecError as exc:
        print(f"pift: malformed config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError) as exc:
        print(f"pift: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SolverError, TrainingDivergence, ValueError, OSError) as exc:
        print(f"pift: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
