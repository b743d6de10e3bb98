"""Uniform-grid scalar fields on the unit square, padding, error metrics and
the on-disk dataset format shared by the rest of the package."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


class DatasetError(Exception):
    """Base class for dataset persistence failures."""


class ChecksumMismatchError(DatasetError):
    pass


class PayloadSizeError(DatasetError):
    pass


class DegenerateNormError(ValueError):
    """Raised when a relative metric would divide by a (near) zero norm."""


@dataclass(frozen=True)
class Grid:
    """Node-centred grid with ``n`` nodes per side covering [0, 1]^2 inclusive."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 3:
            raise ValueError(f"grid needs n >= 3 nodes per side, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` meshes; node (i, j) sits at x = j*h, y = i*h."""
        t = np.arange(self.n) * self.h
        t[-1] = 1.0
        return np.meshgrid(t, t, indexing="xy")


@dataclass(frozen=True)
class ScalarField2D:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.shape != (self.grid.n, self.grid.n):
            raise ValueError(f"values shape {v.shape} does not match grid n={self.grid.n}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field contains non-finite values")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __add__(self, other: "ScalarField2D") -> "ScalarField2D":
        _same_grid(self, other)
        return ScalarField2D(self.grid, self.values + other.values)

    def scaled(self, alpha: float) -> "ScalarField2D":
        return ScalarField2D(self.grid, alpha * self.values)


@dataclass(frozen=True)
class PadMode:
    """Ghost-ring rule: ``zero``, ``constant`` (value ``c``) or ``wrap``."""

    kind: str = "zero"
    c: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "wrap"):
            raise ValueError(f"unknown pad mode {self.kind!r}")
        if not np.isfinite(self.c):
            raise ValueError("constant pad value must be finite")

    @classmethod
    def zero(cls) -> "PadMode":
        return cls("zero")

    @classmethod
    def constant(cls, c: float) -> "PadMode":
        return cls("constant", float(c))

    @classmethod
    def wrap(cls) -> "PadMode":
        return cls("wrap")


def _same_grid(a: ScalarField2D, b: ScalarField2D) -> None:
    if a.grid != b.grid:
        raise ValueError(f"grid mismatch: n={a.grid.n} vs n={b.grid.n}")


def pad_array(values: np.ndarray, mode: PadMode) -> np.ndarray:
    """Add a one-node ring around the last two axes of ``values``."""
    width = [(0, 0)] * (values.ndim - 2) + [(1, 1), (1, 1)]
    if mode.kind == "wrap":
        return np.pad(values, width, mode="wrap")
    c = 0.0 if mode.kind == "zero" else mode.c
    return np.pad(values, width, mode="constant", constant_values=c)


def pad(f: ScalarField2D, mode: PadMode) -> np.ndarray:
    """Pad a field to ``(n+2, n+2)``; the interior is the field itself.

    The result is returned as a plain array because the padded ring lies
    outside the unit square and so does not live on ``f.grid``.
    """
    return pad_array(f.values, mode)


def relative_l1(pred: ScalarField2D, truth: ScalarField2D) -> float:
    """``sum|pred - truth| / sum|truth|`` over all nodes."""
    _same_grid(pred, truth)
    return relative_l1_array(pred.values, truth.values)


def relative_l1_array(pred: np.ndarray, truth: np.ndarray) -> float:
    denom = float(np.abs(truth).sum())
    if denom == 0.0:
        raise DegenerateNormError("relative L1 undefined: truth has zero L1 norm")
    return float(np.abs(pred - truth).sum()) / denom


def median_over_samples(errors: Sequence[float]) -> float:
    """Median with the lower-middle convention for even counts."""
    vals = sorted(float(e) for e in errors)
    if not vals:
        raise ValueError("median of an empty list")
    if not all(np.isfinite(vals)):
        raise ValueError("median over non-finite errors")
    return vals[(len(vals) - 1) // 2]


@dataclass
class SampleSet:
    """A batch of input fields with optional paired solutions.

    ``inputs`` has shape ``(count, channels, n, n)``; ``solutions`` is
    ``(count, n, n)`` or ``None``.  ``generator_params`` is free-form JSON
    describing how the inputs (and solutions) were produced.
    """

    grid: Grid
    inputs: np.ndarray
    solutions: Optional[np.ndarray] = None
    generator: str = "unknown"
    generator_params: dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 4 or self.inputs.shape[2:] != (self.grid.n, self.grid.n):
            raise ValueError(f"inputs must be (count, channels, {self.grid.n}, {self.grid.n}), "
                             f"got {self.inputs.shape}")
        if self.solutions is not None:
            self.solutions = np.ascontiguousarray(self.solutions, dtype=np.float64)
            if self.solutions.shape != (self.count, self.grid.n, self.grid.n):
                raise ValueError(f"solutions shape {self.solutions.shape} does not pair with "
                                 f"{self.count} inputs")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def count(self) -> int:
        return self.inputs.shape[0]

    @property
    def channels(self) -> int:
        return self.inputs.shape[1]

    @property
    def has_solutions(self) -> bool:
        return self.solutions is not None

    def checksum(self) -> str:
        return _payload_checksum(_to_le_bytes(self.inputs),
                                 None if self.solutions is None else _to_le_bytes(self.solutions))

    def subset(self, indices: Sequence[int], drop_solutions: bool = False) -> "SampleSet":
        idx = np.asarray(list(indices), dtype=np.int64)
        params = dict(self.generator_params)
        params["subset_of"] = {"checksum": self.checksum(), "indices": idx.tolist()}
        sols = None if (drop_solutions or self.solutions is None) else self.solutions[idx]
        return SampleSet(self.grid, self.inputs[idx], sols, self.generator, params, self.seed)

    def manifest(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "grid_n": self.grid.n,
            "sample_count": self.count,
            "channels_per_input": self.channels,
            "has_solutions": self.has_solutions,
            "generator": self.generator,
            "generator_params": self.generator_params,
            "seed": int(self.seed),
            "checksum": self.checksum(),
        }


def _to_le_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype=_LE_F64).tobytes(order="C")


def _payload_checksum(inputs: bytes, solutions: Optional[bytes]) -> str:
    h = hashlib.sha256()
    h.update(inputs)
    if solutions is not None:
        h.update(solutions)
    return h.hexdigest()


def save_sampleset(ss: SampleSet, path: str | os.PathLike) -> Path:
    """Write ``manifest.json`` + ``inputs.bin`` (+ ``solutions.bin``) into ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "inputs.bin").write_bytes(_to_le_bytes(ss.inputs))
    sol_file = root / "solutions.bin"
    if ss.solutions is not None:
        sol_file.write_bytes(_to_le_bytes(ss.solutions))
    elif sol_file.exists():
        sol_file.unlink()
    (root / "manifest.json").write_text(json.dumps(ss.manifest(), indent=2, sort_keys=True) + "\n")
    return root


def load_sampleset(path: str | os.PathLike) -> SampleSet:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        raw_inputs = (root / "inputs.bin").read_bytes()
        raw_sols = (root / "solutions.bin").read_bytes() if manifest.get("has_solutions") else None
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read dataset at {root}: {exc}") from exc

    try:
        version = int(manifest["format_version"])
        n = int(manifest["grid_n"])
        count = int(manifest["sample_count"])
        channels = int(manifest["channels_per_input"])
        checksum = str(manifest["checksum"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed manifest in {root}: {exc}") from exc
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format_version {version}")

    expected = count * channels * n * n * 8
    if len(raw_inputs) != expected:
        raise PayloadSizeError(f"inputs.bin has {len(raw_inputs)} bytes, manifest implies {expected}")
    if raw_sols is not None and len(raw_sols) != count * n * n * 8:
        raise PayloadSizeError(f"solutions.bin has {len(raw_sols)} bytes, "
                               f"manifest implies {count * n * n * 8}")
    if _payload_checksum(raw_inputs, raw_sols) != checksum:
        raise ChecksumMismatchError(f"checksum mismatch for dataset at {root}")

    inputs = np.frombuffer(raw_inputs, dtype=_LE_F64).reshape(count, channels, n, n)
    sols = None
    if raw_sols is not None:
        sols = np.frombuffer(raw_sols, dtype=_LE_F64).reshape(count, n, n)
    return SampleSet(Grid(n), inputs.astype(np.float64), None if sols is None else sols.astype(np.float64),
                     manifest.get("generator", "unknown"), manifest.get("generator_params", {}),
                     int(manifest.get("seed", 0)))
