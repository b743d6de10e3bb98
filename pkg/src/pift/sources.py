"""Seeded generators for source terms and Helmholtz media.

Every generator is a pure function of ``(grid, params, seed)``.  Sampled
parameters are split from rendering so tests and callers can force any
family parameter through ``overrides``.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Any, Optional

import numpy as np

from .fields import Grid, SampleSet, ScalarField2D

AMPLITUDE_BOUND = 2.0
MEDIUM_BOUND = 1.0
B_RANGE = (0.25, 0.5)


def derive_seed(base: int, *keys: int) -> int:
    """Stable 64-bit child seed for ``(base, *keys)``."""
    ss = np.random.SeedSequence([int(base) % 2**64, *(int(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) % 2**64))


@dataclass(frozen=True)
class BlobParams:
    k_range: tuple[int, int] = (1, 6)
    amp_range: tuple[float, float] = (-1.0, 1.0)
    amp_min_abs: float = 0.05
    sigma_range: tuple[float, float] = (0.05, 0.15)
    center_range: tuple[float, float] = (0.1, 0.9)
    bound: float = AMPLITUDE_BOUND

    def __post_init__(self):
        lo, hi = self.k_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad blob count range {self.k_range}")
        for name in ("amp_range", "sigma_range", "center_range"):
            a, b = getattr(self, name)
            if b < a:
                raise ValueError(f"empty {name} {getattr(self, name)}")
        if self.sigma_range[0] <= 0:
            raise ValueError("blob widths must be strictly positive")
        if max(abs(self.amp_range[0]), abs(self.amp_range[1])) < self.amp_min_abs:
            raise ValueError("amplitude range lies entirely inside the excluded band")

    def to_json(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# Helmholtz training media: non-negative bumps, capped at MEDIUM_BOUND.
MEDIUM_BLOBS = BlobParams(k_range=(1, 6), amp_range=(0.25, 1.0), amp_min_abs=0.0,
                          sigma_range=(0.05, 0.2), center_range=(0.1, 0.9), bound=MEDIUM_BOUND)


@dataclass(frozen=True)
class Blob:
    amplitude: float
    cx: float
    cy: float
    sigma: float


def blob_field(grid: Grid, blobs: list[Blob]) -> np.ndarray:
    """Raw superposition of Gaussians, no amplitude cap."""
    X, Y = grid.coords()
    out = np.zeros((grid.n, grid.n))
    for b in blobs:
        out += b.amplitude * np.exp(-((X - b.cx) ** 2 + (Y - b.cy) ** 2) / (2.0 * b.sigma**2))
    return out


def sample_blobs(params: BlobParams, rng: np.random.Generator) -> list[Blob]:
    k = int(rng.integers(params.k_range[0], params.k_range[1] + 1))
    blobs = []
    for _ in range(k):
        a = rng.uniform(*params.amp_range)
        while abs(a) < params.amp_min_abs:
            a = rng.uniform(*params.amp_range)
        cx, cy = rng.uniform(*params.center_range, size=2)
        s = rng.uniform(*params.sigma_range)
        blobs.append(Blob(float(a), float(cx), float(cy), float(s)))
    return blobs


def _cap(values: np.ndarray, bound: float) -> np.ndarray:
    m = float(np.abs(values).max())
    return values * (bound / m) if m > bound else values


def gen_gaussian_blobs(grid: Grid, params: BlobParams = BlobParams(), seed: int = 0) -> ScalarField2D:
    blobs = sample_blobs(params, _rng(seed))
    return ScalarField2D(grid, _cap(blob_field(grid, blobs), params.bound))


class ExtremeKind(str, enum.Enum):
    SinusoidalWaves = "SinusoidalWaves"
    RadialPattern = "RadialPattern"
    AngularPattern = "AngularPattern"
    Checkerboard = "Checkerboard"
    RandomPolygons = "RandomPolygons"
    PerlinLikeNoise = "PerlinLikeNoise"
    StripePattern = "StripePattern"
    SpiralPattern = "SpiralPattern"
    RandomLines = "RandomLines"


EXTREME_KINDS = list(ExtremeKind)

# Parameter ranges per family; recorded verbatim in dataset manifests.
EXTREME_RANGES: dict[str, dict[str, Any]] = {
    "common": {"amplitude": [0.5, AMPLITUDE_BOUND], "bound": AMPLITUDE_BOUND},
    "SinusoidalWaves": {"wave_count": [1, 8]},
    "RadialPattern": {"ring_count": [1, 8], "center": [0.2, 0.8]},
    "AngularPattern": {"sector_count": [1, 8], "center": [0.2, 0.8]},
    "Checkerboard": {"cells": [2, 8]},
    "RandomPolygons": {"polygons": [1, 3], "vertices": [3, 8], "radius": [0.1, 0.35]},
    "PerlinLikeNoise": {"octaves": 2, "base_cells": [2, 6], "persistence": 0.5},
    "StripePattern": {"stripe_count": [2, 10]},
    "SpiralPattern": {"arms": [1, 4], "turns": [1.0, 4.0], "center": [0.3, 0.7]},
    "RandomLines": {"lines": [2, 6], "width": [0.01, 0.04]},
}


def _sample_extreme(kind: ExtremeKind, rng: np.random.Generator) -> dict[str, Any]:
    r = EXTREME_RANGES[kind.value]
    amp = float(rng.uniform(*EXTREME_RANGES["common"]["amplitude"]))
    phase = float(rng.uniform(0, 2 * np.pi))
    if kind is ExtremeKind.SinusoidalWaves:
        count = int(rng.integers(r["wave_count"][0], r["wave_count"][1] + 1))
        theta = float(rng.uniform(0, np.pi))
        return {"wavevector": [count * np.cos(theta), count * np.sin(theta)],
                "amplitude": amp, "phase": phase}
    if kind is ExtremeKind.RadialPattern:
        return {"rings": int(rng.integers(r["ring_count"][0], r["ring_count"][1] + 1)),
                "center": rng.uniform(*r["center"], size=2).tolist(), "amplitude": amp, "phase": phase}
    if kind is ExtremeKind.AngularPattern:
        return {"sectors": int(rng.integers(r["sector_count"][0], r["sector_count"][1] + 1)),
                "center": rng.uniform(*r["center"], size=2).tolist(), "amplitude": amp, "phase": phase}
    if kind is ExtremeKind.Checkerboard:
        lo, hi = r["cells"]
        return {"cells": [int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))],
                "amplitude": amp}
    if kind is ExtremeKind.RandomPolygons:
        polys = []
        for _ in range(int(rng.integers(r["polygons"][0], r["polygons"][1] + 1))):
            nv = int(rng.integers(r["vertices"][0], r["vertices"][1] + 1))
            c = rng.uniform(0.25, 0.75, size=2)
            ang = np.sort(rng.uniform(0, 2 * np.pi, size=nv))
            rad = rng.uniform(*r["radius"], size=nv)
            verts = np.stack([c[0] + rad * np.cos(ang), c[1] + rad * np.sin(ang)], axis=1)
            sign = 1.0 if rng.random() < 0.5 else -1.0
            polys.append({"vertices": verts.tolist(), "weight": sign * float(rng.uniform(0.5, 1.0))})
        return {"polygons": polys, "amplitude": amp}
    if kind is ExtremeKind.PerlinLikeNoise:
        cells = int(rng.integers(r["base_cells"][0], r["base_cells"][1] + 1))
        lattices = []
        for o in range(r["octaves"]):
            g = cells * 2**o
            lattices.append(rng.uniform(-1, 1, size=(g + 1, g + 1)).tolist())
        return {"lattices": lattices, "persistence": r["persistence"], "amplitude": amp}
    if kind is ExtremeKind.StripePattern:
        return {"stripes": int(rng.integers(r["stripe_count"][0], r["stripe_count"][1] + 1)),
                "orientation": float(rng.uniform(0, np.pi)), "amplitude": amp, "phase": phase}
    if kind is ExtremeKind.SpiralPattern:
        return {"arms": int(rng.integers(r["arms"][0], r["arms"][1] + 1)),
                "turns": float(rng.uniform(*r["turns"])),
                "center": rng.uniform(*r["center"], size=2).tolist(), "amplitude": amp, "phase": phase}
    if kind is ExtremeKind.RandomLines:
        lines = []
        for _ in range(int(rng.integers(r["lines"][0], r["lines"][1] + 1))):
            p0, p1 = rng.uniform(0.05, 0.95, size=(2, 2))
            sign = 1.0 if rng.random() < 0.5 else -1.0
            lines.append({"p0": p0.tolist(), "p1": p1.tolist(),
                          "width": float(rng.uniform(*r["width"])),
                          "weight": sign * float(rng.uniform(0.5, 1.0))})
        return {"lines": lines, "amplitude": amp}
    raise ValueError(f"unknown extreme kind {kind}")


def _inside_polygon(X: np.ndarray, Y: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd ray casting."""
    inside = np.zeros(X.shape, dtype=bool)
    x0, y0 = verts[:, 0], verts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for a, b, c, d in zip(x0, y0, x1, y1):
        crosses = (b > Y) != (d > Y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = a + (Y - b) * (c - a) / (d - b)
        inside ^= crosses & (X < xint)
    return inside


def _value_noise(X: np.ndarray, Y: np.ndarray, lattice: np.ndarray) -> np.ndarray:
    g = lattice.shape[0] - 1
    gx, gy = X * g, Y * g
    i = np.minimum(np.floor(gx).astype(int), g - 1)
    j = np.minimum(np.floor(gy).astype(int), g - 1)
    tx, ty = gx - i, gy - j
    sx = tx * tx * (3 - 2 * tx)
    sy = ty * ty * (3 - 2 * ty)
    v00 = lattice[j, i]
    v10 = lattice[j, i + 1]
    v01 = lattice[j + 1, i]
    v11 = lattice[j + 1, i + 1]
    top = v00 + sx * (v10 - v00)
    bot = v01 + sx * (v11 - v01)
    return top + sy * (bot - top)


def render_extreme(grid: Grid, kind: ExtremeKind, p: dict[str, Any]) -> np.ndarray:
    X, Y = grid.coords()
    amp = p["amplitude"]
    if kind is ExtremeKind.SinusoidalWaves:
        kx, ky = p["wavevector"]
        out = np.sin(2 * np.pi * (kx * X + ky * Y) + p["phase"])
    elif kind is ExtremeKind.RadialPattern:
        r = np.hypot(X - p["center"][0], Y - p["center"][1])
        out = np.cos(2 * np.pi * p["rings"] * r + p["phase"])
    elif kind is ExtremeKind.AngularPattern:
        th = np.arctan2(Y - p["center"][1], X - p["center"][0])
        out = np.cos(p["sectors"] * th + p["phase"])
    elif kind is ExtremeKind.Checkerboard:
        cx, cy = p["cells"]
        ix = np.minimum(np.floor(X * cx).astype(int), cx - 1)
        iy = np.minimum(np.floor(Y * cy).astype(int), cy - 1)
        out = np.where((ix + iy) % 2 == 0, 1.0, -1.0)
    elif kind is ExtremeKind.RandomPolygons:
        out = np.zeros_like(X)
        for poly in p["polygons"]:
            out += poly["weight"] * _inside_polygon(X, Y, np.asarray(poly["vertices"]))
    elif kind is ExtremeKind.PerlinLikeNoise:
        out = np.zeros_like(X)
        w = 1.0
        for lat in p["lattices"]:
            out += w * _value_noise(X, Y, np.asarray(lat))
            w *= p["persistence"]
        m = np.abs(out).max()
        out = out / m if m > 0 else out
    elif kind is ExtremeKind.StripePattern:
        s = X * np.cos(p["orientation"]) + Y * np.sin(p["orientation"])
        out = np.sign(np.sin(np.pi * p["stripes"] * s + p["phase"]))
    elif kind is ExtremeKind.SpiralPattern:
        dx, dy = X - p["center"][0], Y - p["center"][1]
        out = np.cos(p["arms"] * np.arctan2(dy, dx) + 2 * np.pi * p["turns"] * np.hypot(dx, dy)
                     + p["phase"])
    elif kind is ExtremeKind.RandomLines:
        out = np.zeros_like(X)
        for ln in p["lines"]:
            p0, p1 = np.asarray(ln["p0"]), np.asarray(ln["p1"])
            d = p1 - p0
            t = np.clip(((X - p0[0]) * d[0] + (Y - p0[1]) * d[1]) / max(float(d @ d), 1e-12), 0, 1)
            dist2 = (X - p0[0] - t * d[0]) ** 2 + (Y - p0[1] - t * d[1]) ** 2
            out += ln["weight"] * np.exp(-dist2 / (2 * ln["width"] ** 2))
    else:
        raise ValueError(f"unknown extreme kind {kind}")
    return np.clip(amp * out, -AMPLITUDE_BOUND, AMPLITUDE_BOUND)


def gen_extreme(grid: Grid, kind: ExtremeKind | str, seed: int = 0,
                overrides: Optional[dict[str, Any]] = None) -> ScalarField2D:
    """One out-of-distribution source of the given family.

    ``overrides`` replaces individual sampled parameters, e.g.
    ``{"wavevector": [1, 0], "amplitude": 1, "phase": 0}``.
    """
    kind = ExtremeKind(kind)
    p = _sample_extreme(kind, _rng(seed))
    if overrides:
        p.update(overrides)
    return ScalarField2D(grid, render_extreme(grid, kind, p))


def gen_ood_testset(grid: Grid, count: int, seed: int) -> SampleSet:
    """Round-robin over the nine extreme families, one derived seed per sample."""
    if count < 1:
        raise ValueError("OOD test set needs at least one sample")
    kinds = [EXTREME_KINDS[i % len(EXTREME_KINDS)] for i in range(count)]
    seeds = [derive_seed(seed, i) for i in range(count)]
    inputs = np.stack([gen_extreme(grid, k, s).values for k, s in zip(kinds, seeds)])[:, None]
    params = {"kinds": [k.value for k in kinds], "ranges": EXTREME_RANGES}
    return SampleSet(grid, inputs, None, "extreme_round_robin", params, seed)


def gen_blob_set(grid: Grid, count: int, seed: int, params: BlobParams = BlobParams()) -> SampleSet:
    inputs = np.stack([gen_gaussian_blobs(grid, params, derive_seed(seed, i)).values
                       for i in range(count)])[:, None] if count else np.zeros((0, 1, grid.n, grid.n))
    return SampleSet(grid, inputs, None, "gaussian_blobs", {"blob_params": params.to_json()}, seed)


# Helmholtz media ---------------------------------------------------------------------------

MEDIUM_FAMILIES = ("GaussianComponents", "WavyStripes")


@dataclass(frozen=True)
class StripeMediumParams:
    orientation_range: tuple[float, float] = (0.0, np.pi)
    stripe_range: tuple[int, int] = (2, 8)
    waviness_range: tuple[float, float] = (0.0, 0.1)
    wave_freq_range: tuple[int, int] = (1, 4)

    def __post_init__(self):
        if self.stripe_range[0] < 1 or self.stripe_range[1] < self.stripe_range[0]:
            raise ValueError(f"bad stripe count range {self.stripe_range}")
        for name in ("orientation_range", "waviness_range", "wave_freq_range"):
            a, b = getattr(self, name)
            if b < a:
                raise ValueError(f"empty {name}")

    def to_json(self) -> dict[str, Any]:
        return {k: list(v) for k, v in asdict(self).items()}


def wavy_stripes(grid: Grid, orientation: float, stripes: int, waviness: float,
                 wave_freq: int = 1, phase: float = 0.0) -> np.ndarray:
    """Medium in [0, MEDIUM_BOUND]: ``0.5 (1 + sin(...))`` along rotated, wavy stripes."""
    X, Y = grid.coords()
    c, s = np.cos(orientation), np.sin(orientation)
    u = X * c + Y * s
    v = -X * s + Y * c
    arg = 2 * np.pi * stripes * (u + waviness * np.sin(2 * np.pi * wave_freq * v)) + phase
    return MEDIUM_BOUND * 0.5 * (1.0 + np.sin(arg))


def gen_helmholtz_medium(grid: Grid, family: str = "GaussianComponents", params=None, seed: int = 0,
                         overrides: Optional[dict[str, Any]] = None) -> tuple[ScalarField2D, float]:
    """Draw ``(a, b)``: medium coefficient field and constant boundary value."""
    rng = _rng(seed)
    b = float(rng.uniform(*B_RANGE))
    if family == "GaussianComponents":
        params = params or MEDIUM_BLOBS
        a = _cap(blob_field(grid, sample_blobs(params, rng)), params.bound)
    elif family == "WavyStripes":
        params = params or StripeMediumParams()
        p = {
            "orientation": float(rng.uniform(*params.orientation_range)),
            "stripes": int(rng.integers(params.stripe_range[0], params.stripe_range[1] + 1)),
            "waviness": float(rng.uniform(*params.waviness_range)),
            "wave_freq": int(rng.integers(params.wave_freq_range[0], params.wave_freq_range[1] + 1)),
            "phase": float(rng.uniform(0, 2 * np.pi)),
        }
        p.update(overrides or {})
        a = wavy_stripes(grid, **p)
    else:
        raise ValueError(f"unknown medium family {family!r}")
    return ScalarField2D(grid, a), b


def gen_medium_set(grid: Grid, family: str, count: int, seed: int) -> SampleSet:
    """Two-channel Helmholtz inputs: ``a`` and ``b`` broadcast over the grid."""
    inputs = np.zeros((count, 2, grid.n, grid.n))
    for i in range(count):
        a, b = gen_helmholtz_medium(grid, family, seed=derive_seed(seed, i))
        inputs[i, 0] = a.values
        inputs[i, 1] = b
    params = {"family": family,
              "medium_params": (MEDIUM_BLOBS.to_json() if family == "GaussianComponents"
                                else StripeMediumParams().to_json()),
              "b_range": list(B_RANGE)}
    return SampleSet(grid, inputs, None, f"helmholtz_medium_{family}", params, seed)
