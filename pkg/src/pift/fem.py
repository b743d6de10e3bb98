"""Bilinear quadrilateral finite elements on the structured node grid.

Ground-truth solver for Poisson (zero Dirichlet) and Helmholtz (constant
Dirichlet ``b``).  Element integrals use 2x2 Gauss quadrature with nodal
data interpolated bilinearly to the Gauss points.  Dirichlet nodes are
eliminated; only the free interior block is solved.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import Grid, SampleSet, ScalarField2D
from .residual import DEFAULT_OMEGA, PdeTask
from .sources import gen_blob_set, gen_medium_set

log = logging.getLogger(__name__)

POISSON_TOL = 1e-10
MAX_CONDITION = 1e10


class SolverError(RuntimeError):
    """A linear solve did not produce an acceptable solution."""

    def __init__(self, msg: str, sample_index: Optional[int] = None):
        super().__init__(msg if sample_index is None else f"sample {sample_index}: {msg}")
        self.sample_index = sample_index


class NonConvergenceError(SolverError):
    pass


class NearSingularError(SolverError):
    pass


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    constrained: np.ndarray
    constrained_values: np.ndarray

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.matrix.shape[0], dtype=bool)
        mask[self.constrained] = False
        return np.flatnonzero(mask)


@dataclass
class SolveReport:
    iterations: int
    residual: float
    wall_time: float
    method: str = "cg"


# Reference square [-1, 1]^2, nodes counter-clockwise from (-1, -1).
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])
_G = 1.0 / np.sqrt(3.0)
_GAUSS = [(-_G, -_G), (_G, -_G), (_G, _G), (-_G, _G)]


def _shape(xi: float, eta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = 0.25 * (1 + _XI * xi) * (1 + _ETA * eta)
    dxi = 0.25 * _XI * (1 + _ETA * eta)
    deta = 0.25 * _ETA * (1 + _XI * xi)
    return n, dxi, deta


def element_matrices(h: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stiffness, mass and the per-Gauss-point ``N_i N_j`` tensor for an ``h x h`` cell.

    The third array has shape (4 gauss, 4, 4) and carries the quadrature
    weight and Jacobian, so a coefficient sampled at the Gauss points can be
    contracted against it.
    """
    det = (h / 2) ** 2
    ke = np.zeros((4, 4))
    nn = np.zeros((4, 4, 4))
    for g, (xi, eta) in enumerate(_GAUSS):
        n, dxi, deta = _shape(xi, eta)
        dx, dy = dxi * (2 / h), deta * (2 / h)
        ke += (np.outer(dx, dx) + np.outer(dy, dy)) * det
        nn[g] = np.outer(n, n) * det
    return ke, nn.sum(axis=0), nn


def _gauss_shape_values() -> np.ndarray:
    return np.array([_shape(xi, eta)[0] for xi, eta in _GAUSS])  # (gauss, node)


def _connectivity(n: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="ij")
    i, j = i.ravel(), j.ravel()
    base = i * n + j
    # node (i, j) is row i (y), column j (x); counter-clockwise in (x, y)
    return np.stack([base, base + 1, base + n + 1, base + n], axis=1)


def _boundary_nodes(n: int) -> np.ndarray:
    mask = np.zeros((n, n), dtype=bool)
    mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
    return np.flatnonzero(mask.ravel())


def _scatter(conn: np.ndarray, local: np.ndarray, size: int) -> sp.csr_matrix:
    """Assemble per-element 4x4 blocks ``local`` (E, 4, 4) into a CSR matrix."""
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    mat = sp.coo_matrix((local.reshape(-1), (rows, cols)), shape=(size, size)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def _stiffness(grid: Grid) -> sp.csr_matrix:
    ke, _, _ = element_matrices(grid.h)
    conn = _connectivity(grid.n)
    return _scatter(conn, np.broadcast_to(ke, (len(conn), 4, 4)), grid.n**2)


def _weighted_mass(grid: Grid, coeff: np.ndarray) -> sp.csr_matrix:
    """``int c phi_i phi_j`` with ``c`` bilinear from nodal values."""
    _, _, nn = element_matrices(grid.h)
    conn = _connectivity(grid.n)
    c_gp = coeff.ravel()[conn] @ _gauss_shape_values().T  # (E, gauss)
    return _scatter(conn, np.einsum("eg,gij->eij", c_gp, nn), grid.n**2)


def _load(grid: Grid, f: np.ndarray) -> np.ndarray:
    _, me, _ = element_matrices(grid.h)
    conn = _connectivity(grid.n)
    local = f.ravel()[conn] @ me.T  # (E, 4); me is exact for bilinear f
    out = np.zeros(grid.n**2)
    np.add.at(out, conn.ravel(), local.ravel())
    return out


def assemble_poisson(grid: Grid, f: ScalarField2D) -> SparseSystem:
    if f.grid != grid:
        raise ValueError("source field is not on the solver grid")
    bnd = _boundary_nodes(grid.n)
    return SparseSystem(_stiffness(grid), _load(grid, f.values), bnd, np.zeros(len(bnd)))


def assemble_helmholtz(grid: Grid, a: ScalarField2D, omega: float, b: float,
                       source: Optional[ScalarField2D] = None) -> SparseSystem:
    """``K - w^2 M_a`` with ``u = b`` on the boundary; ``source`` adds ``int phi_i g``."""
    mat = (_stiffness(grid) - omega**2 * _weighted_mass(grid, a.values)).tocsr()
    rhs = np.zeros(grid.n**2) if source is None else _load(grid, source.values)
    bnd = _boundary_nodes(grid.n)
    return SparseSystem(mat, rhs, bnd, np.full(len(bnd), float(b)))


def _reduce(system: SparseSystem) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
    free = system.free
    a = system.matrix
    a_ff = a[free][:, free].tocsr()
    rhs = system.rhs[free] - a[free][:, system.constrained] @ system.constrained_values
    return a_ff, rhs, free


def _expand(system: SparseSystem, free: np.ndarray, u_free: np.ndarray, grid: Grid) -> ScalarField2D:
    u = np.zeros(grid.n**2)
    u[free] = u_free
    u[system.constrained] = system.constrained_values
    return ScalarField2D(grid, u.reshape(grid.n, grid.n))


def _rel_residual(a: sp.csr_matrix, x: np.ndarray, rhs: np.ndarray) -> float:
    nb = float(np.linalg.norm(rhs))
    r = float(np.linalg.norm(rhs - a @ x))
    return r / nb if nb > 0 else r


def solve_poisson(grid: Grid, f: ScalarField2D, tol: float = POISSON_TOL,
                  max_iter: Optional[int] = None) -> tuple[ScalarField2D, SolveReport]:
    """Jacobi-preconditioned CG on the free block; relative residual <= ``tol``."""
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    t0 = time.perf_counter()
    system = assemble_poisson(grid, f)
    a_ff, rhs, free = _reduce(system)
    cap = max_iter if max_iter is not None else 10 * grid.n**2
    if not np.any(rhs):
        return _expand(system, free, np.zeros(len(free)), grid), SolveReport(0, 0.0, time.perf_counter() - t0)

    precond = sp.diags(1.0 / a_ff.diagonal())
    x = np.zeros(len(free))
    iters = 0
    res = np.inf
    # restart if the recursively updated residual drifted from the true one
    while iters < cap:
        count = [0]
        x, _ = spla.cg(a_ff, rhs, x0=x, rtol=0.5 * tol, atol=0.0, maxiter=cap - iters, M=precond,
                       callback=lambda _xk: count.__setitem__(0, count[0] + 1))
        iters += count[0]
        res = _rel_residual(a_ff, x, rhs)
        if res <= tol or count[0] == 0:
            break
    if res > tol:
        raise NonConvergenceError(f"CG stopped at relative residual {res:.3e} after {iters} iterations")
    return _expand(system, free, x, grid), SolveReport(iters, res, time.perf_counter() - t0, "cg")


def solve_helmholtz(grid: Grid, a: ScalarField2D, omega: float = DEFAULT_OMEGA, b: float = 0.0,
                    tol: float = POISSON_TOL, source: Optional[ScalarField2D] = None,
                    max_condition: float = MAX_CONDITION) -> tuple[ScalarField2D, SolveReport]:
    """Sparse LU on the (possibly indefinite) free block.

    ``source`` is only used for manufactured-solution checks.  A 1-norm
    condition estimate above ``max_condition`` is treated as near-singular.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    t0 = time.perf_counter()
    system = assemble_helmholtz(grid, a, omega, b, source)
    a_ff, rhs, free = _reduce(system)
    a_csc = a_ff.tocsc()
    try:
        lu = spla.splu(a_csc)
    except RuntimeError as exc:
        raise NearSingularError(f"factorisation failed: {exc}") from exc
    x = lu.solve(rhs)
    inv = spla.LinearOperator(a_ff.shape, matvec=lu.solve, rmatvec=lambda v: lu.solve(v, trans="T"),
                              dtype=np.float64)
    cond = spla.onenormest(inv) * spla.onenormest(a_csc)
    if not np.isfinite(cond) or cond > max_condition:
        raise NearSingularError(f"condition estimate {cond:.3e} exceeds {max_condition:.1e}")
    res = _rel_residual(a_ff, x, rhs)
    if not np.all(np.isfinite(x)) or res > tol:
        raise NonConvergenceError(f"direct solve left relative residual {res:.3e}")
    return _expand(system, free, x, grid), SolveReport(0, res, time.perf_counter() - t0, "lu")


def solve_sample(task: PdeTask, grid: Grid, inputs: np.ndarray,
                 tol: float = POISSON_TOL) -> tuple[ScalarField2D, SolveReport]:
    if task.kind == "poisson":
        return solve_poisson(grid, ScalarField2D(grid, inputs[0]), tol)
    return solve_helmholtz(grid, ScalarField2D(grid, inputs[0]), task.omega, float(inputs[1, 0, 0]), tol)


def label_sampleset(task: PdeTask, ss: SampleSet, tol: float = POISSON_TOL,
                    log_path: Optional[Path] = None) -> SampleSet:
    """Attach FEM solutions to every input of ``ss``.

    Failures abort with the failing sample index.  When ``log_path`` is given,
    one ``index iterations residual`` line per sample is appended.
    """
    sols = np.zeros((ss.count, ss.grid.n, ss.grid.n))
    lines = []
    for i in range(ss.count):
        try:
            u, rep = solve_sample(task, ss.grid, ss.inputs[i], tol)
        except SolverError as exc:
            raise type(exc)(str(exc), sample_index=i) from exc
        sols[i] = u.values
        lines.append(f"{i} {rep.iterations} {rep.residual:.6e}\n")
    if log_path is not None:
        with open(log_path, "a") as fh:
            fh.writelines(lines)
    params = dict(ss.generator_params)
    params["solver"] = {"task": task.to_json(), "tol": tol, "element": "Q1", "quadrature": "gauss2x2",
                        "method": "cg-jacobi" if task.kind == "poisson" else "sparse-lu"}
    return SampleSet(ss.grid, ss.inputs, sols, ss.generator, params, ss.seed)


def training_inputs(task: PdeTask, grid: Grid, count: int, seed: int) -> SampleSet:
    """Inputs from the task's training distribution (blobs or Gaussian media)."""
    if task.kind == "poisson":
        return gen_blob_set(grid, count, seed)
    return gen_medium_set(grid, "GaussianComponents", count, seed)


def generate_labeled_set(task: PdeTask, grid: Grid, count: int, seed: int, tol: float = POISSON_TOL,
                         log_path: Optional[Path] = None) -> SampleSet:
    if count < 1:
        raise ValueError("labeled set needs at least one sample")
    return label_sampleset(task, training_inputs(task, grid, count, seed), tol, log_path)
