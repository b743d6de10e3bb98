"""Dataset builds, M-scaling sweeps, evaluation and residual audits.

A sweep trains every (configuration, M) cell on the first M labeled samples
after the reserved test block, evaluates it on the in-distribution test block
("interp") and the out-of-distribution set ("extrap"), and writes one CSV row
per regime.  Rows are assembled in (configuration, M, regime) order so the
file does not depend on completion order.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .fem import POISSON_TOL, label_sampleset
from .fields import (DatasetError, Grid, SampleSet, ScalarField2D, load_sampleset, median_over_samples,
                     relative_l1_array, save_sampleset)
from .operator import Checkpoint, OperatorConfig, load_checkpoint, save_checkpoint
from .residual import PdeTask, enforce_boundary, residual_norms
from .sources import derive_seed, gen_blob_set, gen_medium_set, gen_ood_testset
from .training import (AUGMENT_FAMILIES, LossMode, PretrainConfig, TrainConfig, TrainingDivergence,
                       finetune, pretrain)

CONFIGURATIONS = ("ft_data", "ft_physics", "ft_hybrid", "scratch_data", "scratch_physics")
REGIMES = ("interp", "extrap")
SCALING_SCHEMA = "pift-scaling v1"
SCALING_HEADER = ("config", "M", "regime", "median_rel_l1_solution", "median_rel_l1_residual",
                  "mean_abs_residual", "wall_time_s", "status")
OUTPUT_ROOT_ENV = "PIFT_OUTPUT_ROOT"
# typical solution magnitudes: Poisson |u| ~ 1e-2 for |f| <= 2, Helmholtz |u| ~ b
DEFAULT_OUTPUT_SCALE = {"poisson": 0.01, "helmholtz": 1.0}


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    task: str = "poisson"
    grid_n: int = 32
    m_list: list[int] = field(default_factory=lambda: [1, 4, 16, 64, 256])
    configurations: list[str] = field(default_factory=lambda: list(CONFIGURATIONS))
    test_in_dist: int = 240
    test_ood: int = 50
    train_pool: Optional[int] = None          # defaults to max(m_list)
    seeds: dict[str, int] = field(default_factory=lambda: {"data": 0, "pretrain": 0, "train": 0})
    output_dir: str = "results"
    operator: dict[str, int] = field(default_factory=lambda: {"width": 16, "layers": 4, "modes": 8})
    omega: Optional[float] = None
    output_scale: Optional[float] = None      # defaults per task, see DEFAULT_OUTPUT_SCALE
    steps: int = 600
    batch_size: int = 8
    lr_backbone: float = 1e-3
    lr_embed: float = 1e-2
    lr_scratch: float = 3e-3
    pretrain_steps: int = 500
    pretrain_lr: float = 1e-3
    augment: Optional[list[str]] = None       # hybrid families; defaults to all of the task's
    record_wall_time: bool = False

    def __post_init__(self):
        if self.task not in ("poisson", "helmholtz"):
            raise SpecError(f"task must be poisson or helmholtz, got {self.task!r}")
        if not self.m_list or any(not isinstance(m, int) or m < 0 for m in self.m_list):
            raise SpecError("m_list must be a non-empty list of non-negative integers")
        if list(self.m_list) != sorted(self.m_list) or len(set(self.m_list)) != len(self.m_list):
            raise SpecError("m_list must be strictly ascending")
        bad = [c for c in self.configurations if c not in CONFIGURATIONS]
        if bad or not self.configurations or len(set(self.configurations)) != len(self.configurations):
            raise SpecError(f"configurations must be distinct names from {CONFIGURATIONS}, got {bad or self.configurations}")
        if self.test_in_dist < 1 or self.test_ood < 1:
            raise SpecError("test set sizes must be positive")
        if self.train_pool is None:
            self.train_pool = max(max(self.m_list), 1)
        if self.train_pool < max(self.m_list):
            raise SpecError(f"train_pool {self.train_pool} is smaller than the largest M")
        missing = {"data", "pretrain", "train"} - set(self.seeds)
        if missing:
            raise SpecError(f"seeds missing keys {sorted(missing)}")
        if self.steps < 0 or self.batch_size < 1 or self.pretrain_steps < 0:
            raise SpecError("steps, batch_size and pretrain_steps must be non-negative (batch_size >= 1)")
        try:
            self.operator_config(1).check_grid(self.grid_n)
            Grid(self.grid_n)
            if self.augment is not None:
                TrainConfig(LossMode.hybrid(), augment=tuple(self.augment))
        except (TypeError, ValueError) as exc:
            raise SpecError(str(exc)) from exc
        bad = [f for f in (self.augment or []) if f not in AUGMENT_FAMILIES[self.task]]
        if bad:
            raise SpecError(f"augmentation families {bad} not available for {self.task}")

    def pde(self) -> PdeTask:
        if self.task == "poisson":
            return PdeTask.poisson()
        return PdeTask.helmholtz() if self.omega is None else PdeTask.helmholtz(self.omega)

    def operator_config(self, in_channels: int) -> OperatorConfig:
        scale = self.output_scale if self.output_scale is not None else DEFAULT_OUTPUT_SCALE[self.task]
        return OperatorConfig(in_channels, **self.operator, output_scale=scale)

    def augment_families(self) -> tuple[str, ...]:
        return tuple(self.augment) if self.augment is not None else AUGMENT_FAMILIES[self.task]

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "ExperimentSpec":
        if not isinstance(d, dict):
            raise SpecError("spec must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown spec fields {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentSpec":
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise SpecError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise SpecError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_json(d)


@dataclass(frozen=True)
class ResultRow:
    config: str
    M: int
    regime: str
    median_rel_l1_solution: float
    median_rel_l1_residual: float
    mean_abs_residual: float
    wall_time_s: Optional[float]
    status: str = "ok"

    def cells(self) -> list[str]:
        def num(v):
            return "" if v is None else repr(float(v))
        return [self.config, str(self.M), self.regime, num(self.median_rel_l1_solution),
                num(self.median_rel_l1_residual), num(self.mean_abs_residual), num(self.wall_time_s),
                self.status]


def resolve_output(path: str | os.PathLike) -> Path:
    """Relative output paths hang off ``$PIFT_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


# datasets ------------------------------------------------------------------------------------

@dataclass
class Datasets:
    labeled: SampleSet      # reserved test block first, then the training pool
    ood: SampleSet
    test_count: int

    @property
    def test(self) -> SampleSet:
        return self.labeled.subset(range(self.test_count))

    def train(self, M: int, drop_solutions: bool = False) -> SampleSet:
        if self.test_count + M > self.labeled.count:
            raise ValueError(f"M = {M} exceeds the training pool")
        return self.labeled.subset(range(self.test_count, self.test_count + M), drop_solutions)


def _inputs(task: str, grid: Grid, count: int, seed: int, ood: bool) -> SampleSet:
    if task == "poisson":
        return gen_ood_testset(grid, count, seed) if ood else gen_blob_set(grid, count, seed)
    return gen_medium_set(grid, "WavyStripes" if ood else "GaussianComponents", count, seed)


def build_datasets(spec: ExperimentSpec, out_dir: Optional[Path] = None,
                   tol: float = POISSON_TOL) -> Datasets:
    """Generate and FEM-label the labeled pool and the OOD set.

    With ``out_dir`` the sets are written under ``out_dir/data`` and reused
    on later calls when their manifests match the config.
    """
    task, grid = spec.pde(), Grid(spec.grid_n)
    seed = spec.seeds["data"]
    want = {"labeled": (spec.test_in_dist + spec.train_pool, derive_seed(seed, 0), False),
            "ood": (spec.test_ood, derive_seed(seed, 1), True)}
    sets = {}
    for name, (count, s, ood) in want.items():
        path = None if out_dir is None else Path(out_dir) / "data" / name
        if path is not None and (path / "manifest.json").exists():
            ss = load_sampleset(path)
            if (ss.count, ss.seed, ss.grid.n, ss.has_solutions) == (count, s, grid.n, True) \
                    and ss.generator_params.get("solver", {}).get("task") == task.to_json():
                sets[name] = ss
                continue
        log = None
        if path is not None:
            path.mkdir(parents=True, exist_ok=True)
            log = path / "solver.log"
            log.write_text("")
        ss = label_sampleset(task, _inputs(spec.task, grid, count, s, ood), tol, log)
        if path is not None:
            save_sampleset(ss, path)
        sets[name] = ss
    return Datasets(sets["labeled"], sets["ood"], spec.test_in_dist)


# evaluation ----------------------------------------------------------------------------------

def metrics_from_predictions(task: PdeTask, preds: np.ndarray, test: SampleSet) -> tuple[float, float, float]:
    """Medians of solution and residual relative L1, plus the mean |r| over samples.

    ``preds`` are raw model outputs; the Dirichlet ring is imposed first.
    """
    if not test.has_solutions:
        raise DatasetError("evaluation needs a labeled test set")
    if preds.shape != (test.count, test.grid.n, test.grid.n):
        raise ValueError(f"prediction shape {preds.shape} does not match test set "
                         f"{(test.count, test.grid.n, test.grid.n)}")
    sol, res, mab = [], [], []
    for p, x, t in zip(preds, test.inputs, test.solutions):
        u = enforce_boundary(task, p, x)
        sol.append(relative_l1_array(u, t))
        r_rel, r_abs = residual_norms(task, ScalarField2D(test.grid, u), x)
        res.append(r_rel)
        mab.append(r_abs)
    return median_over_samples(sol), median_over_samples(res), float(np.mean(mab))


def evaluate(ckpt: Checkpoint, test: SampleSet, task: PdeTask) -> tuple[float, float, float]:
    if ckpt.config.in_channels != test.channels:
        raise ValueError(f"checkpoint expects {ckpt.config.in_channels} channel(s), test set has {test.channels}")
    ckpt.config.check_grid(test.grid.n)
    return metrics_from_predictions(task, ckpt.to_model().predict(test.inputs), test)


def audit_residual(task: PdeTask, ss: SampleSet) -> list[tuple[int, float, float]]:
    """Residual of the stored solutions themselves: ``(index, rel L1, mean |r|)``."""
    if not ss.has_solutions:
        raise DatasetError("residual audit needs a labeled set")
    return [(i, *residual_norms(task, ScalarField2D(ss.grid, u), x))
            for i, (u, x) in enumerate(zip(ss.solutions, ss.inputs))]


# sweeps --------------------------------------------------------------------------------------

def pretrained_checkpoint(spec: ExperimentSpec, out_dir: Optional[Path] = None) -> Checkpoint:
    # the smoothing family has O(1) targets, so pre-training runs unscaled
    cfg = PretrainConfig(spec.grid_n, OperatorConfig(1, **spec.operator), spec.pretrain_steps, spec.batch_size,
                         spec.pretrain_lr, seed=spec.seeds["pretrain"])
    path = None if out_dir is None else Path(out_dir) / "pretrained.ckpt"
    if path is not None and path.exists():
        ckpt = load_checkpoint(path)
        if ckpt.metadata.get("pretrain_config") == json.loads(json.dumps(cfg.to_json())):
            return ckpt
    ckpt, log = pretrain(cfg)
    ckpt.metadata["pretrain_config"] = json.loads(json.dumps(cfg.to_json()))
    if path is not None:
        save_checkpoint(ckpt, path)
        log.to_csv(Path(out_dir) / "logs" / "pretrain.csv")
    return ckpt


def cell_train_config(spec: ExperimentSpec, configuration: str, M: int) -> TrainConfig:
    kind = configuration.split("_", 1)[1]
    mode = {"data": LossMode.data(), "physics": LossMode.physics(), "hybrid": LossMode.hybrid()}[kind]
    if configuration.startswith("ft_"):
        lr_b, lr_e = spec.lr_backbone, spec.lr_embed
    else:
        lr_b = lr_e = spec.lr_scratch
    augment = spec.augment_families() if kind == "hybrid" else ()
    seed = derive_seed(spec.seeds["train"], CONFIGURATIONS.index(configuration), M)
    return TrainConfig(mode, max(1, min(spec.batch_size, M)), spec.steps, lr_b, lr_e, augment=augment, seed=seed)


def run_cell(spec: ExperimentSpec, data: Datasets, pretrained: Optional[Checkpoint], configuration: str,
             M: int, out_dir: Optional[Path] = None) -> tuple[list[ResultRow], dict[str, Any]]:
    task = spec.pde()
    tc = cell_train_config(spec, configuration, M)
    physics = tc.mode.kind == "physics"
    labeled = data.train(M, drop_solutions=physics) if M > 0 else None
    base = pretrained if configuration.startswith("ft_") else None
    t0 = time.perf_counter()
    try:
        if tc.mode.needs_solutions and M == 0:
            raise ValueError(f"{configuration} needs at least one labeled sample")
        ckpt, log = finetune(base, task, labeled, tc, operator=spec.operator_config(task.in_channels),
                             grid=Grid(spec.grid_n))
    except (TrainingDivergence, ValueError) as exc:
        wall = time.perf_counter() - t0
        status = "failed: " + " ".join(str(exc).split())
        rows = [ResultRow(configuration, M, r, float("nan"), float("nan"), float("nan"),
                          wall if spec.record_wall_time else None, status) for r in REGIMES]
        return rows, {"wall_time_s": wall, "used_indices": []}
    train_wall = time.perf_counter() - t0
    used = log.metadata["used_indices"]
    if any(i < data.test_count for i in used):
        raise AssertionError(f"{configuration} M={M} trained on reserved test indices")
    if out_dir is not None:
        log.to_csv(Path(out_dir) / "logs" / f"{configuration}_M{M}.csv")
    rows = []
    for regime, ss in (("interp", data.test), ("extrap", data.ood)):
        m = evaluate(ckpt, ss, task)
        rows.append(ResultRow(configuration, M, regime, *m, train_wall if spec.record_wall_time else None))
    return rows, {"wall_time_s": train_wall, "used_indices": used}


def write_scaling_csv(rows: Sequence[ResultRow], path: Path) -> Path:
    order = {c: i for i, c in enumerate(CONFIGURATIONS)}
    rows = sorted(rows, key=lambda r: (order[r.config], r.M, REGIMES.index(r.regime)))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SCALING_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCALING_HEADER)
        for r in rows:
            w.writerow(r.cells())
    return path


def read_scaling_csv(path: str | os.PathLike) -> list[dict[str, Any]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for rec in csv.DictReader(lines):
        rec["M"] = int(rec["M"])
        for k in SCALING_HEADER[3:7]:
            rec[k] = float(rec[k]) if rec[k] != "" else None
        out.append(rec)
    return out


def run_scaling(spec: ExperimentSpec, out_dir: Optional[str | os.PathLike] = None,
                data: Optional[Datasets] = None) -> tuple[Path, list[ResultRow]]:
    out = resolve_output(out_dir if out_dir is not None else spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n")
    data = data or build_datasets(spec, out)
    needs_ft = any(c.startswith("ft_") for c in spec.configurations)
    pre = pretrained_checkpoint(spec, out) if needs_ft else None
    rows, timings = [], []
    for configuration in spec.configurations:
        for M in spec.m_list:
            cell_rows, info = run_cell(spec, data, pre, configuration, M, out)
            rows.extend(cell_rows)
            timings.append((configuration, M, info["wall_time_s"]))
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("config", "M", "wall_time_s"))
        w.writerows((c, m, f"{t:.3f}") for c, m, t in timings)
    return write_scaling_csv(rows, out / "scaling.csv"), rows
