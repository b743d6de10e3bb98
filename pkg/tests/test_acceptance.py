"""Acceptance criteria, each checked at its stated tolerance.

The desk-scale sweep (n = 32, M in {1, 4, 16, 64, 256}, five configurations)
is run once per session and shared by the trend checks; the determinism check
runs it a second time in a fresh directory.  Expect roughly 40 minutes on a
single CPU.
"""

import time

import numpy as np
import pytest

from conftest import record
from oracles import MODES, dense_spectral_layer, fd_gradient_check, tiny_problem
from pift.experiments import ExperimentSpec, build_datasets, evaluate, read_scaling_csv, run_scaling
from pift.fem import solve_helmholtz, solve_poisson
from pift.fields import (ChecksumMismatchError, Grid, PadMode, PayloadSizeError, SampleSet, ScalarField2D,
                         load_sampleset, save_sampleset)
from pift.operator import Checkpoint, SpectralConv2d, load_checkpoint, transfer_init
from pift.residual import PdeTask, fd_laplacian, residual_rel_l1
from pift.sources import B_RANGE, derive_seed, gen_blob_set, gen_gaussian_blobs
from pift.training import LossMode, TrainConfig, finetune

import torch

SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep_a")
    spec = ExperimentSpec()
    path, _ = run_scaling(spec, out)
    return spec, out, path, read_scaling_csv(path)


def _lookup(rows, config, M, regime, key):
    (r,) = [r for r in rows if (r["config"], r["M"], r["regime"]) == (config, M, regime)]
    assert r["status"] == "ok", r["status"]
    return r[key]


@pytest.fixture(scope="session")
def seed_rows(sweep, tmp_path_factory):
    """Rows for the extra training seeds, restricted to the cells the trend checks read."""
    spec, out, _, rows = sweep
    data = build_datasets(spec, out)
    per_seed = {0: rows}
    for s in SEEDS[1:]:
        extra = []
        for configs, ms in ((["ft_hybrid", "scratch_data"], [1]), (["ft_data", "ft_physics"], [16, 64])):
            sub = ExperimentSpec(m_list=ms, configurations=configs,
                                 seeds={"data": spec.seeds["data"], "pretrain": spec.seeds["pretrain"], "train": s})
            d = tmp_path_factory.mktemp(f"seed{s}")
            # share datasets and the pretrained checkpoint with the main sweep
            (d / "pretrained.ckpt").write_bytes((out / "pretrained.ckpt").read_bytes())
            path, _ = run_scaling(sub, d, data=data)
            extra += read_scaling_csv(path)
        per_seed[s] = extra
    return per_seed


def test_c01_gradient_oracle():
    t0 = time.perf_counter()
    worst = {}
    for name, mode in MODES.items():
        model, task, batch = tiny_problem()
        worst[name], _ = fd_gradient_check(model, task, batch, mode)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    record(1, ok, "max rel err " + ", ".join(f"{k}={v:.2e}" for k, v in worst.items()) + f"; {elapsed:.0f}s")
    assert ok


def test_c02_spectral_layer_oracle():
    errs = []
    for n in (8, 16):
        for m in (2, n // 2):
            torch.manual_seed(n + m)
            layer = SpectralConv2d(3, m)
            with torch.no_grad():
                for p in (layer.w_pos, layer.w_neg):
                    p.copy_(torch.randn(p.shape, dtype=torch.complex128))
            x = np.random.default_rng(n * m).normal(size=(1, 3, n, n))
            got = layer(torch.from_numpy(x)).detach().numpy()[0]
            ref = dense_spectral_layer(x[0], layer.w_pos.detach().numpy(), layer.w_neg.detach().numpy(), m)
            errs.append(np.abs(got - ref).max())
    ok = max(errs) < 1e-10
    record(2, ok, f"max abs diff {max(errs):.2e} on 8x8 and 16x16")
    assert ok


def test_c03_fem_convergence():
    t0 = time.perf_counter()
    errs = []
    for n in (17, 33, 65):
        g = Grid(n)
        X, Y = g.coords()
        exact = np.sin(np.pi * X) * np.sin(np.pi * Y)
        u, _ = solve_poisson(g, ScalarField2D(g, 2 * np.pi**2 * exact))
        errs.append(np.abs(u.values - exact).max())
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    elapsed = time.perf_counter() - t0
    ok = bool(np.all((orders >= 1.8) & (orders <= 2.2))) and elapsed < 60
    record(3, ok, f"L-inf orders {orders.round(3).tolist()}; {elapsed:.1f}s")
    assert ok


def test_c04_stencil_exactness():
    errs = []
    for n in (3, 5, 17, 33, 65, 129):
        g = Grid(n)
        X, Y = g.coords()
        lap = fd_laplacian(ScalarField2D(g, X * (1 - X) * Y * (1 - Y)), PadMode.zero()).values
        c = (n - 1) // 2
        errs.append(abs(lap[c, c] + 1.0))
    ok = max(errs) < 1e-10
    record(4, ok, f"max |lap(center) + 1| = {max(errs):.1e} over n in 3..129")
    assert ok


def test_c05_ground_truth_residual_ratio():
    ratios = []
    for s in range(10):
        res = []
        for n in (33, 65):
            g = Grid(n)
            f = gen_gaussian_blobs(g, seed=derive_seed(2024, s))
            u, _ = solve_poisson(g, f)
            res.append(residual_rel_l1(PdeTask.poisson(), u, f))
        ratios.append(res[0] / res[1])
    ok = all(3.5 <= r <= 4.5 for r in ratios)
    record(5, ok, f"relative-L1 residual ratios 33->65 in [{min(ratios):.3f}, {max(ratios):.3f}]")
    assert ok


def test_c06_zero_label_physics_finetuning(sweep):
    spec, out, _, _ = sweep
    t0 = time.perf_counter()
    task, grid = PdeTask.poisson(), Grid(32)
    pre = load_checkpoint(out / "pretrained.ckpt")
    test = build_datasets(ExperimentSpec(test_in_dist=64, m_list=[1], seeds={"data": 5, "pretrain": 0, "train": 0})).test
    inputs = gen_blob_set(grid, 256, seed=77)
    cfg = spec.operator_config(1)
    tc = TrainConfig(LossMode.physics(), 8, 2000, spec.lr_backbone, spec.lr_embed, seed=0)
    before = evaluate(Checkpoint.from_model(transfer_init(pre, cfg, derive_seed(tc.seed, 0))), test, task)[0]
    ck, log = finetune(pre, task, None, tc, unlabeled=inputs, operator=cfg, grid=grid)
    after = evaluate(ck, test, task)[0]
    elapsed = time.perf_counter() - t0
    assert log.metadata["M"] == 0
    ok = after * 5 <= before and elapsed < 900
    record(6, ok, f"median rel-L1 {before:.3f} -> {after:.3f} ({before / after:.1f}x), 2000 steps, {elapsed:.0f}s")
    assert ok


def test_c07_data_scaling_trend(sweep):
    _, _, _, rows = sweep
    errs = [_lookup(rows, "scratch_data", M, "interp", "median_rel_l1_solution") for M in (1, 4, 16, 64, 256)]
    violations = sum(b > a for a, b in zip(errs, errs[1:]))
    ok = violations <= 1
    record(7, ok, f"scratch_data interp errors {[round(e, 4) for e in errs]}, {violations} violation(s)")
    assert ok


def test_c08_hybrid_ood_at_one_sample(seed_rows):
    wins = []
    for s, rows in seed_rows.items():
        h = _lookup(rows, "ft_hybrid", 1, "extrap", "median_rel_l1_solution")
        d = _lookup(rows, "scratch_data", 1, "extrap", "median_rel_l1_solution")
        wins.append((s, h, d))
    n_ok = sum(h < d for _, h, d in wins)
    ok = n_ok >= 2
    record(8, ok, f"{n_ok}/3 seeds: " + "; ".join(f"s{s} hybrid {h:.3f} vs scratch {d:.3f}" for s, h, d in wins))
    assert ok


def test_c09_physics_residual_trend(seed_rows):
    detail, ok = [], True
    for M in (16, 64):
        n_ok = 0
        for s, rows in seed_rows.items():
            p = _lookup(rows, "ft_physics", M, "interp", "median_rel_l1_residual")
            d = _lookup(rows, "ft_data", M, "interp", "median_rel_l1_residual")
            n_ok += p < d
        ok &= n_ok >= 2
        detail.append(f"M={M}: {n_ok}/3 seeds")
    record(9, ok, "ft_physics residual below ft_data, " + ", ".join(detail))
    assert ok


def test_c10_sweep_determinism(sweep, tmp_path_factory):
    spec, _, path, _ = sweep
    again, _ = run_scaling(spec, tmp_path_factory.mktemp("sweep_b"))
    ok = path.read_bytes() == again.read_bytes()
    record(10, ok, f"scaling.csv byte-identical across two full sweeps ({len(path.read_bytes())} bytes)")
    assert ok


def test_c11_dataset_integrity(tmp_path):
    rng = np.random.default_rng(11)
    exact = 0
    for k in range(50):
        n = int(rng.integers(3, 12))
        ss = SampleSet(Grid(n), rng.normal(size=(3, 2, n, n)), rng.normal(size=(3, n, n)) if k % 2 else None,
                       "random", {}, k)
        back = load_sampleset(save_sampleset(ss, tmp_path / str(k)))
        exact += back.inputs.tobytes() == ss.inputs.tobytes() and back.checksum() == ss.checksum() and (
            ss.solutions is None or back.solutions.tobytes() == ss.solutions.tobytes())
    d = tmp_path / "1"
    raw = (d / "inputs.bin").read_bytes()
    (d / "inputs.bin").write_bytes(raw[:-1])
    with pytest.raises(PayloadSizeError):
        load_sampleset(d)
    flipped = bytearray(raw)
    flipped[5] ^= 0x10
    (d / "inputs.bin").write_bytes(bytes(flipped))
    with pytest.raises(ChecksumMismatchError):
        load_sampleset(d)
    ok = exact == 50
    record(11, ok, f"{exact}/50 bit-exact round trips; truncation and bit flips rejected")
    assert ok


def test_c12_helmholtz_coverage(tmp_path):
    g = Grid(33)
    rng = np.random.default_rng(12)
    worst = 0.0
    for b in rng.uniform(*B_RANGE, size=20):
        u, rep = solve_helmholtz(g, ScalarField2D(g, np.zeros((33, 33))), b=float(b))
        worst = max(worst, float(np.abs(u.values - b).max()))
    spec = ExperimentSpec(task="helmholtz", m_list=[16], configurations=["ft_physics"])
    _, rows = run_scaling(spec, tmp_path)
    regimes = sorted(r.regime for r in rows if r.status == "ok" and np.isfinite(r.median_rel_l1_solution))
    ok = worst < 1e-10 and regimes == ["extrap", "interp"]
    record(12, ok, f"a=0 gives u=b to {worst:.1e}; Helmholtz physics fine-tuning rows {regimes} "
                   + ", ".join(f"{r.regime} sol {r.median_rel_l1_solution:.3f}" for r in rows))
    assert ok
