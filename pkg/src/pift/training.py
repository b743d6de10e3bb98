"""Pre-training, fine-tuning and from-scratch training loops.

Three objectives share one loop: data (mean relative L1 against FEM
solutions), physics (mean squared finite-difference residual) and hybrid
(weighted sum).  Backbone and embedding parameters get separate Adam
learning rates; a subset whose rate is zero is left out of the optimizer and
therefore stays bitwise frozen.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch

from .fields import Grid, SampleSet
from .operator import (BACKBONE, EMBED, Checkpoint, OperatorConfig, SpectralOperator, gradient,
                       transfer_init)
from .residual import PdeTask, enforce_boundary_t, physics_loss_t
from .sources import (EXTREME_KINDS, ExtremeKind, derive_seed, gen_extreme, gen_gaussian_blobs,
                      gen_helmholtz_medium)


class TrainingDivergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossMode:
    kind: str = "data"
    weight_data: float = 1.0
    weight_physics: float = 1.0

    def __post_init__(self):
        if self.kind not in ("data", "physics", "hybrid"):
            raise ValueError(f"unknown loss mode {self.kind!r}")
        if self.kind == "hybrid":
            if self.weight_data < 0 or self.weight_physics < 0:
                raise ValueError("hybrid weights must be non-negative")
            if self.weight_data == 0 and self.weight_physics == 0:
                raise ValueError("hybrid weights cannot both be zero")

    @classmethod
    def data(cls) -> "LossMode":
        return cls("data")

    @classmethod
    def physics(cls) -> "LossMode":
        return cls("physics")

    @classmethod
    def hybrid(cls, weight_data: float = 1.0, weight_physics: float = 1.0) -> "LossMode":
        return cls("hybrid", weight_data, weight_physics)

    @property
    def uses_data(self) -> bool:
        return self.kind == "data" or (self.kind == "hybrid" and self.weight_data > 0)

    @property
    def uses_physics(self) -> bool:
        return self.kind == "physics" or (self.kind == "hybrid" and self.weight_physics > 0)

    @property
    def needs_solutions(self) -> bool:
        return self.kind in ("data", "hybrid")


@dataclass
class TrainConfig:
    mode: LossMode = field(default_factory=LossMode)
    batch_size: int = 8
    steps: int = 500
    lr_backbone: float = 1e-4
    lr_embed: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    augment: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.lr_backbone < 0 or self.lr_embed < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size >= 1 and steps >= 0 required")
        if self.augment and self.mode.kind == "data":
            raise ValueError("on-the-fly augmentation is unlabeled and needs a physics term")
        self.augment = tuple(self.augment)
        self.betas = tuple(self.betas)

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["mode"] = asdict(self.mode)
        d["betas"] = list(self.betas)
        d["augment"] = list(self.augment)
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        d["mode"] = LossMode(**d.get("mode", {}))
        return cls(**d)


@dataclass
class Batch:
    inputs: torch.Tensor                       # (B, C, n, n), labeled / pool inputs
    solutions: Optional[torch.Tensor] = None   # (B, n, n)
    unlabeled: Optional[torch.Tensor] = None   # (A, C, n, n), physics term only


@dataclass
class TrainLog:
    records: list[dict[str, Any]] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    COLUMNS = ("step", "data_loss", "physics_loss", "total_loss", "grad_norm")

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow(["" if r[c] is None else (r[c] if c == "step" else repr(float(r[c])))
                            for c in self.COLUMNS])
        return path


# losses --------------------------------------------------------------------------------------

def data_loss_t(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Batch mean of per-sample relative L1 errors."""
    denom = truth.abs().sum(dim=(-2, -1))
    if torch.any(denom == 0):
        raise ValueError("data loss undefined: a truth sample has zero L1 norm")
    return ((pred - truth).abs().sum(dim=(-2, -1)) / denom).mean()


def data_loss(pred_batch: Sequence[np.ndarray], truth_batch: Sequence[np.ndarray]) -> float:
    p = torch.as_tensor(np.asarray(pred_batch, dtype=np.float64))
    t = torch.as_tensor(np.asarray(truth_batch, dtype=np.float64))
    return float(data_loss_t(p, t))


def loss_terms(mode: LossMode, task: PdeTask, model: SpectralOperator,
               batch: Batch) -> tuple[torch.Tensor, Optional[torch.Tensor], Optional[torch.Tensor]]:
    """``(total, data, physics)``; absent terms are ``None``."""
    if mode.needs_solutions and batch.solutions is None:
        raise ValueError(f"{mode.kind} loss needs labeled solutions")
    d_term = p_term = None
    n_lab = batch.inputs.shape[0]
    x = batch.inputs
    if mode.uses_physics and batch.unlabeled is not None and len(batch.unlabeled):
        x = torch.cat([batch.inputs, batch.unlabeled])
    raw = model(x) if len(x) else None
    if mode.uses_data:
        pred = enforce_boundary_t(task, raw[:n_lab], batch.inputs)
        d_term = data_loss_t(pred, batch.solutions)
    if mode.uses_physics:
        p_term = physics_loss_t(task, raw, x)
    if mode.kind == "data":
        total = d_term
    elif mode.kind == "physics":
        total = p_term
    else:
        total = 0.0
        if d_term is not None:
            total = total + mode.weight_data * d_term
        if p_term is not None:
            total = total + mode.weight_physics * p_term
    return total, d_term, p_term


def total_loss(mode: LossMode, task: PdeTask, model: SpectralOperator, batch: Batch) -> torch.Tensor:
    return loss_terms(mode, task, model, batch)[0]


# optimisation --------------------------------------------------------------------------------

def make_optimizer(model: SpectralOperator, config: TrainConfig) -> Optional[torch.optim.Adam]:
    groups = []
    for subset, lr in ((BACKBONE, config.lr_backbone), (EMBED, config.lr_embed)):
        params = [p for name, p in model.named_parameters() if model.subset_of(name) == subset]
        if lr > 0 and params:
            groups.append({"params": params, "lr": lr, "subset": subset})
    if not groups:
        return None
    return torch.optim.Adam(groups, betas=config.betas, eps=config.eps, foreach=False)


def train_step(model: SpectralOperator, optimizer: Optional[torch.optim.Adam], batch: Batch,
               task: PdeTask, mode: LossMode, step: int = 0) -> dict[str, Any]:
    model.zero_grad(set_to_none=True)
    total, d_term, p_term = loss_terms(mode, task, model, batch)
    if not torch.isfinite(total):
        raise TrainingDivergence(f"non-finite loss at step {step}: {float(total.detach())}")
    total.backward()
    sq = sum(float((p.grad.abs() ** 2).sum()) for p in model.parameters() if p.grad is not None)
    gnorm = math.sqrt(sq)
    if not math.isfinite(gnorm):
        raise TrainingDivergence(f"non-finite gradient at step {step}")
    if optimizer is not None:
        optimizer.step()
    return {"step": step, "data_loss": None if d_term is None else float(d_term.detach()),
            "physics_loss": None if p_term is None else float(p_term.detach()),
            "total_loss": float(total.detach()), "grad_norm": gnorm}


# on-the-fly inputs ---------------------------------------------------------------------------

AUGMENT_FAMILIES = {
    "poisson": tuple(k.value for k in EXTREME_KINDS) + ("GaussianBlobs",),
    "helmholtz": ("WavyStripes", "GaussianComponents"),
}


def augmentation_input(task: PdeTask, grid: Grid, family: str, seed: int) -> np.ndarray:
    """One unlabeled ``(C, n, n)`` input of the named family."""
    if task.kind == "poisson":
        if family == "GaussianBlobs":
            return gen_gaussian_blobs(grid, seed=seed).values[None]
        return gen_extreme(grid, ExtremeKind(family), seed).values[None]
    if family not in AUGMENT_FAMILIES["helmholtz"]:
        raise ValueError(f"unknown Helmholtz augmentation family {family!r}")
    a, b = gen_helmholtz_medium(grid, family, seed=seed)
    return np.stack([a.values, np.full_like(a.values, b)])


def _check_augment(task: PdeTask, families: Sequence[str]) -> None:
    allowed = AUGMENT_FAMILIES[task.kind]
    bad = [f for f in families if f not in allowed]
    if bad:
        raise ValueError(f"augmentation families {bad} not available for {task.kind}; choose from {allowed}")


def _pool_indices(ss: Optional[SampleSet]) -> list[int]:
    if ss is None:
        return []
    sub = ss.generator_params.get("subset_of")
    return list(sub["indices"]) if sub else list(range(ss.count))


# pre-training --------------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    grid_n: int = 64
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    smoothing_sigma: float = 0.05
    seed: int = 0

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "PretrainConfig":
        d = dict(d)
        d["operator"] = OperatorConfig(**d.get("operator", {}))
        return cls(**d)


def gaussian_smooth(values: np.ndarray, h: float, sigma: float) -> np.ndarray:
    """Periodic Gaussian smoothing of the last two axes, applied spectrally."""
    n = values.shape[-1]
    k = np.fft.fftfreq(n, d=h)
    kr = np.fft.rfftfreq(n, d=h)
    mult = np.exp(-2 * np.pi**2 * sigma**2 * (k[:, None] ** 2 + kr[None, :] ** 2))
    return np.fft.irfft2(np.fft.rfft2(values) * mult, s=values.shape[-2:])


def surrogate_batch(grid: Grid, count: int, seed: int, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-blob inputs and their smoothed counterparts: the pre-training family."""
    f = np.stack([gen_gaussian_blobs(grid, seed=derive_seed(seed, i)).values for i in range(count)])
    return f[:, None], gaussian_smooth(f, grid.h, sigma)


def pretrain(config: PretrainConfig) -> tuple[Checkpoint, TrainLog]:
    grid = Grid(config.grid_n)
    model = SpectralOperator(config.operator, seed=derive_seed(config.seed, 0))
    tc = TrainConfig(LossMode.data(), config.batch_size, config.steps, config.lr, config.lr, seed=config.seed)
    opt = make_optimizer(model, tc)
    log = TrainLog(metadata={"kind": "pretrain", "config": config.to_json()})
    for step in range(config.steps):
        x, y = surrogate_batch(grid, config.batch_size, derive_seed(config.seed, 1, step), config.smoothing_sigma)
        # the surrogate target is not a Dirichlet problem: compare raw outputs
        batch = Batch(torch.from_numpy(x), torch.from_numpy(y))
        model.zero_grad(set_to_none=True)
        loss = data_loss_t(model(batch.inputs), batch.solutions)
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"non-finite pre-training loss at step {step}")
        loss.backward()
        gnorm = math.sqrt(sum(float((p.grad.abs() ** 2).sum()) for p in model.parameters()))
        opt.step()
        log.records.append({"step": step, "data_loss": float(loss.detach()), "physics_loss": None,
                            "total_loss": float(loss.detach()), "grad_norm": gnorm})
    ckpt = Checkpoint.from_model(model, tag="pretrained", seed=config.seed, steps=config.steps,
                                 loss_mode="data", surrogate={"family": "gaussian_smoothing",
                                                              "sigma": config.smoothing_sigma},
                                 grid_n=config.grid_n,
                                 optimizer={"name": "adam", "lr": config.lr, "betas": [0.9, 0.999],
                                            "eps": 1e-8})
    return ckpt, log


def evaluate_surrogate(ckpt: Checkpoint, grid_n: int, count: int, seed: int, sigma: float) -> list[float]:
    grid = Grid(grid_n)
    x, y = surrogate_batch(grid, count, seed, sigma)
    pred = ckpt.to_model().predict(x)
    return [float(np.abs(p - t).sum() / np.abs(t).sum()) for p, t in zip(pred, y)]


# fine-tuning ---------------------------------------------------------------------------------

def finetune(pretrained: Optional[Checkpoint], task: PdeTask, labeled: Optional[SampleSet],
             config: TrainConfig, unlabeled: Optional[SampleSet] = None,
             operator: Optional[OperatorConfig] = None,
             grid: Optional[Grid] = None) -> tuple[Checkpoint, TrainLog]:
    """Fine-tune ``pretrained`` (or train from scratch when it is ``None``).

    Data/hybrid draw labeled batches from ``labeled``; physics mode treats
    ``labeled`` as inputs only (its solutions are never read) together with
    ``unlabeled``.  Augmentation families add freshly generated unlabeled
    inputs to every batch, scored by the physics term only.
    """
    mode = config.mode
    ref = labeled if labeled is not None else unlabeled
    if ref is None and not config.augment:
        raise ValueError("no training inputs: give a labeled set, an unlabeled set or augmentation")
    if ref is not None:
        grid = ref.grid
    elif grid is None:
        raise ValueError("augmentation-only runs need an explicit grid")
    M = 0 if labeled is None else labeled.count
    if mode.needs_solutions and (labeled is None or not labeled.has_solutions or M == 0):
        raise ValueError(f"{mode.kind} mode needs a non-empty labeled set with solutions")
    _check_augment(task, config.augment)

    if pretrained is not None:
        scale = operator.output_scale if operator is not None else pretrained.config.output_scale
        cfg = OperatorConfig(task.in_channels, pretrained.config.width, pretrained.config.layers,
                             pretrained.config.modes, scale)
        model = transfer_init(pretrained, cfg, derive_seed(config.seed, 0))
    else:
        base = operator or OperatorConfig()
        cfg = OperatorConfig(task.in_channels, base.width, base.layers, base.modes, base.output_scale)
        model = SpectralOperator(cfg, seed=derive_seed(config.seed, 0))
    for ss in (labeled, unlabeled):
        if ss is not None and ss.channels != task.in_channels:
            raise ValueError(f"{task.kind} needs {task.in_channels} input channel(s), got {ss.channels}")

    if mode.kind == "physics":
        parts = [s.inputs for s in (labeled, unlabeled) if s is not None and s.count]
        pool_in = np.concatenate(parts) if parts else np.zeros((0, task.in_channels, grid.n, grid.n))
        pool_sol = None
        pool_ids = _pool_indices(labeled) + [("u", i) for i in _pool_indices(unlabeled)]
        extra_in = None
    else:
        pool_in, pool_sol = labeled.inputs, labeled.solutions
        pool_ids = _pool_indices(labeled)
        extra_in = unlabeled.inputs if unlabeled is not None and unlabeled.count else None

    opt = make_optimizer(model, config)
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, 1)))
    log = TrainLog(metadata={"kind": "finetune" if pretrained is not None else "scratch",
                             "task": task.to_json(), "train_config": config.to_json(), "M": M,
                             "optimizer": {"name": "adam", "betas": list(config.betas), "eps": config.eps}})
    used: set = set()
    P = len(pool_in)
    for step in range(config.steps):
        if P:
            idx = rng.choice(P, config.batch_size, replace=False) if P >= config.batch_size \
                else rng.integers(0, P, config.batch_size)
            used.update(pool_ids[i] for i in idx.tolist())
            x = torch.from_numpy(pool_in[idx])
            y = None if pool_sol is None else torch.from_numpy(pool_sol[idx])
        else:
            x = torch.zeros((0, task.in_channels, grid.n, grid.n), dtype=torch.float64)
            y = None
        extras = []
        if extra_in is not None:
            eidx = rng.integers(0, len(extra_in), config.batch_size)
            extras.append(extra_in[eidx])
        if config.augment:
            extras.append(np.stack([augmentation_input(task, grid, fam, derive_seed(config.seed, 2, step, k))
                                    for k, fam in enumerate(config.augment)]))
        u = torch.from_numpy(np.concatenate(extras)) if extras else None
        rec = train_step(model, opt, Batch(x, y, u), task, mode, step)
        log.records.append(rec)

    log.metadata["used_indices"] = sorted((i for i in used if isinstance(i, int)))
    log.metadata["used_unlabeled_indices"] = sorted(i[1] for i in used if isinstance(i, tuple))
    ckpt = Checkpoint.from_model(model, tag=log.metadata["kind"], seed=config.seed, steps=config.steps,
                                 loss_mode=asdict(mode), task=task.to_json(), M=M,
                                 train_config=config.to_json(),
                                 source=None if pretrained is None else pretrained.metadata.get("tag"))
    return ckpt, log
