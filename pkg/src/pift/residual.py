"""Finite-difference PDE residuals with Dirichlet data imposed by padding.

Convention: a raw model output is an ``n x n`` array on the node grid.  Its
``(n-2) x (n-2)`` interior holds the unknowns; the boundary ring is
discarded and replaced by the task's boundary value (zero for Poisson, the
per-sample constant ``b`` for Helmholtz).  The 5-point stencil then yields a
residual on the interior nodes.  Field-valued results keep the full grid
shape with a zero ring so they stay on the same ``Grid``.

Numpy functions serve evaluation; the ``*_t`` torch variants are used in
training and are differentiable in the model output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

from .fields import DegenerateNormError, Grid, PadMode, ScalarField2D, pad_array

DEFAULT_OMEGA = 5 * math.pi / 2
NORM_EPS = 1e-12


@dataclass(frozen=True)
class PdeTask:
    kind: str = "poisson"
    omega: float = DEFAULT_OMEGA
    boundary: str = ""

    def __post_init__(self):
        if self.kind not in ("poisson", "helmholtz"):
            raise ValueError(f"unknown PDE kind {self.kind!r}")
        expected = "zero" if self.kind == "poisson" else "constant"
        if not self.boundary:
            object.__setattr__(self, "boundary", expected)
        elif self.boundary != expected:
            raise ValueError(f"{self.kind} pairs with {expected} Dirichlet data, not {self.boundary}")

    @classmethod
    def poisson(cls) -> "PdeTask":
        return cls("poisson")

    @classmethod
    def helmholtz(cls, omega: float = DEFAULT_OMEGA) -> "PdeTask":
        return cls("helmholtz", omega)

    @property
    def in_channels(self) -> int:
        return 1 if self.kind == "poisson" else 2

    def to_json(self) -> dict:
        return {"kind": self.kind, "omega": self.omega, "boundary": self.boundary}

    @classmethod
    def from_json(cls, d: dict) -> "PdeTask":
        return cls(d["kind"], d.get("omega", DEFAULT_OMEGA), d.get("boundary", ""))


InputLike = Union[np.ndarray, ScalarField2D]


def five_point(u, h: float):
    """Stencil on every node that has four neighbours; works for numpy and torch."""
    return (u[..., 2:, 1:-1] + u[..., :-2, 1:-1] + u[..., 1:-1, 2:] + u[..., 1:-1, :-2]
            - 4.0 * u[..., 1:-1, 1:-1]) / (h * h)


def _embed(grid: Grid, interior: np.ndarray) -> ScalarField2D:
    out = np.zeros((grid.n, grid.n))
    out[1:-1, 1:-1] = interior
    return ScalarField2D(grid, out)


def fd_laplacian(u: ScalarField2D, boundary: PadMode) -> ScalarField2D:
    """Discrete Laplacian at the interior nodes of ``u``.

    The interior of ``u`` is padded per ``boundary`` (the ring of ``u`` itself
    is ignored) and the 5-point stencil applied; the returned ring is zero.
    """
    full = pad_array(u.values[1:-1, 1:-1], boundary)
    return _embed(u.grid, five_point(full, u.grid.h))


def _as_channels(inputs: InputLike) -> np.ndarray:
    if isinstance(inputs, ScalarField2D):
        return inputs.values[None]
    arr = np.asarray(inputs, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


def boundary_value(task: PdeTask, inputs: InputLike) -> float:
    if task.kind == "poisson":
        return 0.0
    return float(_as_channels(inputs)[1, 0, 0])


def boundary_mode(task: PdeTask, inputs: InputLike) -> PadMode:
    if task.kind == "poisson":
        return PadMode.zero()
    return PadMode.constant(boundary_value(task, inputs))


def enforce_boundary(task: PdeTask, raw: np.ndarray, inputs: InputLike) -> np.ndarray:
    """Replace the ring of a raw ``n x n`` output with the Dirichlet value."""
    return pad_array(np.asarray(raw)[1:-1, 1:-1], boundary_mode(task, inputs))


def _residual_interior(task: PdeTask, u: ScalarField2D, inputs: InputLike) -> np.ndarray:
    ch = _as_channels(inputs)
    if ch.shape[1:] != (u.grid.n, u.grid.n):
        raise ValueError(f"input fields {ch.shape[1:]} do not match solution grid n={u.grid.n}")
    if ch.shape[0] != task.in_channels:
        raise ValueError(f"{task.kind} expects {task.in_channels} input channel(s), got {ch.shape[0]}")
    lap = fd_laplacian(u, boundary_mode(task, ch)).values[1:-1, 1:-1]
    if task.kind == "poisson":
        return -lap - ch[0, 1:-1, 1:-1]
    return -lap - task.omega**2 * ch[0, 1:-1, 1:-1] * u.values[1:-1, 1:-1]


def pde_residual(task: PdeTask, u: ScalarField2D, inputs: InputLike) -> ScalarField2D:
    """Residual ``-Lap_h u - f`` (Poisson) or ``-Lap_h u - w^2 a u`` (Helmholtz)."""
    return _embed(u.grid, _residual_interior(task, u, inputs))


def physics_loss(task: PdeTask, u_batch, input_batch) -> float:
    """Mean of squared residuals over the batch and all interior nodes."""
    if len(u_batch) == 0:
        raise ValueError("physics loss over an empty batch")
    total = 0.0
    count = 0
    for u, x in zip(u_batch, input_batch):
        if not isinstance(u, ScalarField2D):
            u = ScalarField2D(Grid(np.shape(u)[-1]), u)
        r = _residual_interior(task, u, x)
        total += float(np.sum(r * r))
        count += r.size
    return total / count


def residual_norms(task: PdeTask, u: ScalarField2D, inputs: InputLike) -> tuple[float, float]:
    """``(relative L1, mean absolute)`` residual over the interior nodes."""
    r = _residual_interior(task, u, inputs)
    ch = _as_channels(inputs)
    if task.kind == "poisson":
        norm = float(np.abs(ch[0, 1:-1, 1:-1]).sum())
        if norm < NORM_EPS:
            raise DegenerateNormError("residual normaliser ||f||_1 is below 1e-12")
    else:
        raw = float(np.abs(task.omega**2 * ch[0, 1:-1, 1:-1] * u.values[1:-1, 1:-1]).sum())
        if raw < NORM_EPS:
            raise DegenerateNormError("residual normaliser ||w^2 a u||_1 is below 1e-12")
        norm = raw + NORM_EPS
    return float(np.abs(r).sum()) / norm, float(np.abs(r).mean())


def residual_rel_l1(task: PdeTask, u: ScalarField2D, inputs: InputLike) -> float:
    return residual_norms(task, u, inputs)[0]


# torch ---------------------------------------------------------------------------------------

def enforce_boundary_t(task: PdeTask, raw: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable ring replacement: ``raw`` (B, n, n) -> (B, n, n)."""
    full = F.pad(raw[:, 1:-1, 1:-1], (1, 1, 1, 1))
    if task.kind == "poisson":
        return full
    ring = torch.ones_like(raw)
    ring[:, 1:-1, 1:-1] = 0.0
    return full + inputs[:, 1, :1, :1] * ring


def residual_t(task: PdeTask, raw: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
    """Residual at interior nodes, shape (B, n-2, n-2)."""
    n = raw.shape[-1]
    h = 1.0 / (n - 1)
    lap = five_point(enforce_boundary_t(task, raw, inputs), h)
    if task.kind == "poisson":
        return -lap - inputs[:, 0, 1:-1, 1:-1]
    return -lap - task.omega**2 * inputs[:, 0, 1:-1, 1:-1] * raw[:, 1:-1, 1:-1]


def physics_loss_t(task: PdeTask, raw: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
    r = residual_t(task, raw, inputs)
    return (r * r).mean()
