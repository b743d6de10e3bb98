import numpy as np
import pytest
import torch

from oracles import MODES, dense_spectral_layer, fd_gradient_check, tiny_problem
from pift.operator import (BACKBONE, EMBED, CheckpointError, OperatorConfig, ShapeMismatchError,
                           SpectralConv2d, SpectralOperator, load_checkpoint, save_checkpoint, transfer_init,
                           Checkpoint)


@pytest.mark.parametrize("n,m", [(8, 2), (8, 4), (16, 4), (16, 8), (9, 3)])
def test_spectral_layer_matches_dense_dft(n, m):
    torch.manual_seed(n * 10 + m)
    layer = SpectralConv2d(3, m)
    with torch.no_grad():
        for p in (layer.w_pos, layer.w_neg):
            p.copy_(torch.randn(p.shape, dtype=torch.complex128))
    x = np.random.default_rng(n + m).normal(size=(2, 3, n, n))
    got = layer(torch.from_numpy(x)).detach().numpy()
    for b in range(2):
        ref = dense_spectral_layer(x[b], layer.w_pos.detach().numpy(), layer.w_neg.detach().numpy(), m)
        np.testing.assert_allclose(got[b], ref, atol=1e-10, rtol=0)


def test_param_count_formula():
    for cfg in (OperatorConfig(1, 4, 2, 4), OperatorConfig(2, 16, 4, 8), OperatorConfig()):
        model = SpectralOperator(cfg)
        assert model.get_vector().size == cfg.param_count()
        w, m = cfg.width, cfg.modes
        assert cfg.param_count() == (cfg.in_channels + 2) * w + w + cfg.layers * (4 * w * w * m * m + w * w + w) + w + 1


def test_modes_bound():
    with pytest.raises(ValueError):
        SpectralOperator(OperatorConfig(1, 4, 1, 5))(torch.zeros(1, 1, 8, 8, dtype=torch.float64))


def test_forward_shape_and_determinism():
    cfg = OperatorConfig(2, 8, 2, 4)
    a, b = SpectralOperator(cfg, seed=3), SpectralOperator(cfg, seed=3)
    assert a.get_vector().tobytes() == b.get_vector().tobytes()
    x = torch.rand(2, 2, 12, 12, dtype=torch.float64)
    assert a(x).shape == (2, 12, 12)
    with pytest.raises(ValueError):
        a(torch.rand(2, 1, 12, 12, dtype=torch.float64))


def test_vector_roundtrip_and_subsets():
    model = SpectralOperator(OperatorConfig(1, 4, 2, 4), seed=1)
    v = np.random.default_rng(0).normal(size=model.config.param_count())
    model.set_vector(v)
    np.testing.assert_array_equal(model.get_vector(), v)
    bm, em = model.subset_mask(BACKBONE), model.subset_mask(EMBED)
    assert not np.any(bm & em) and np.all(bm | em)
    assert em.sum() == 3 * 4 + 4 + 4 + 1


def test_checkpoint_roundtrip_and_errors(tmp_path):
    model = SpectralOperator(OperatorConfig(1, 4, 2, 4), seed=2)
    ck = Checkpoint.from_model(model, tag="x")
    p = save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(p)
    assert back.vector.tobytes() == ck.vector.tobytes() and back.metadata == {"tag": "x"}
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    assert torch.equal(back.to_model()(x), model(x))
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(p, OperatorConfig(1, 8, 2, 4))
    raw = p.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_transfer_init_copies_backbone_only():
    src = SpectralOperator(OperatorConfig(1, 4, 2, 4), seed=5)
    ck = Checkpoint.from_model(src)
    new = transfer_init(ck, OperatorConfig(2, 4, 2, 4), seed=9)
    sb = src.get_vector()[src.subset_mask(BACKBONE)]
    np.testing.assert_array_equal(new.get_vector()[new.subset_mask(BACKBONE)], sb)
    same = transfer_init(ck, OperatorConfig(1, 4, 2, 4), seed=9)
    assert not np.array_equal(same.get_vector()[same.subset_mask(EMBED)], src.get_vector()[src.subset_mask(EMBED)])
    with pytest.raises(ShapeMismatchError):
        transfer_init(ck, OperatorConfig(1, 8, 2, 4), seed=0)


@pytest.mark.parametrize("mode", list(MODES))
def test_gradients_match_finite_differences(mode):
    model, task, batch = tiny_problem()
    rel, absolute = fd_gradient_check(model, task, batch, MODES[mode])
    assert rel < 1e-4, (rel, absolute)


def test_gradients_helmholtz_physics():
    model, task, batch = tiny_problem("helmholtz", n=12, batch=2)
    rng = np.random.default_rng(0)
    x = np.concatenate([batch.inputs.numpy().clip(0, 1), np.full((2, 1, 12, 12), 0.3)], axis=1)
    u = rng.uniform(size=(2, 2, 12, 12))
    u[:, 1] = 0.4
    from pift.training import Batch
    rel, _ = fd_gradient_check(model, task, Batch(torch.from_numpy(x), None, torch.from_numpy(u)),
                               MODES["physics"])
    assert rel < 1e-4
