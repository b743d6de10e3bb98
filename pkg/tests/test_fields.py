import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pift.fields import (ChecksumMismatchError, DatasetError, DegenerateNormError, Grid, PadMode,
                         PayloadSizeError, SampleSet, ScalarField2D, load_sampleset, median_over_samples,
                         pad, relative_l1, save_sampleset)


def field(values):
    values = np.asarray(values, dtype=float)
    return ScalarField2D(Grid(values.shape[0]), values)


def test_grid_spacing_and_coords():
    g = Grid(17)
    assert g.h * (g.n - 1) == 1.0
    X, Y = g.coords()
    assert X[0, 0] == 0.0 and X[0, -1] == 1.0 and Y[-1, 0] == 1.0
    assert X[3, 8] == 0.5 and Y[8, 3] == 0.5


@pytest.mark.parametrize("n", [0, 2, 2.5])
def test_grid_rejects_small(n):
    with pytest.raises(ValueError):
        Grid(n)


def test_field_validation():
    with pytest.raises(ValueError):
        ScalarField2D(Grid(3), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        ScalarField2D(Grid(3), np.array([[0, 0, 0], [0, np.nan, 0], [0, 0, 0]]))
    f = field(np.ones((3, 3)))
    assert not f.values.flags.writeable


def test_pad_zero_ones():
    p = pad(field(np.ones((3, 3))), PadMode.zero())
    assert p.shape == (5, 5)
    np.testing.assert_array_equal(p[1:-1, 1:-1], 1.0)
    ring = np.ones((5, 5), bool)
    ring[1:-1, 1:-1] = False
    assert np.all(p[ring] == 0.0)


def test_pad_constant_zero_equals_zero_mode():
    f = field(np.random.default_rng(0).normal(size=(6, 6)))
    np.testing.assert_array_equal(pad(f, PadMode.constant(0.0)), pad(f, PadMode.zero()))
    np.testing.assert_array_equal(pad(f, PadMode.constant(3.5))[0], 3.5)


def test_pad_wrap_matches_index_arithmetic():
    v = np.arange(9.0).reshape(3, 3)
    p = pad(field(v), PadMode.wrap())
    n = 3
    for i in range(n + 2):
        for j in range(n + 2):
            assert p[i, j] == v[(i - 1) % n, (j - 1) % n]


def test_padmode_rejects_nonfinite():
    with pytest.raises(ValueError):
        PadMode.constant(float("inf"))
    with pytest.raises(ValueError):
        PadMode("reflect")


def test_relative_l1_cases():
    rng = np.random.default_rng(1)
    t = field(rng.normal(size=(4, 4)))
    assert relative_l1(t, t) == 0.0
    assert relative_l1(t.scaled(2.0), t) == pytest.approx(1.0, abs=1e-15)
    p = field(rng.normal(size=(4, 4)))
    num = den = 0.0
    for i in range(4):
        for j in range(4):
            num += abs(p.values[i, j] - t.values[i, j])
            den += abs(t.values[i, j])
    assert relative_l1(p, t) == pytest.approx(num / den, rel=1e-14)


def test_relative_l1_errors():
    with pytest.raises(DegenerateNormError):
        relative_l1(field(np.ones((3, 3))), field(np.zeros((3, 3))))
    with pytest.raises(ValueError):
        relative_l1(field(np.ones((3, 3))), field(np.ones((4, 4))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.booleans())
def test_relative_l1_scale_invariant(seed, alpha, neg):
    rng = np.random.default_rng(seed)
    p, t = field(rng.normal(size=(5, 5))), field(rng.normal(size=(5, 5)))
    a = -alpha if neg else alpha
    assert relative_l1(p.scaled(a), t.scaled(a)) == pytest.approx(relative_l1(p, t), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_relative_l1_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(4, 4))
    p = t.copy()
    assert relative_l1(field(p), field(t)) == 0.0
    p[rng.integers(4), rng.integers(4)] += 1e-9
    assert relative_l1(field(p), field(t)) > 0.0


def test_median_convention():
    assert median_over_samples([0.1]) == 0.1
    assert median_over_samples([3, 1, 2]) == 2
    assert median_over_samples([4, 1, 3, 2]) == 2
    with pytest.raises(ValueError):
        median_over_samples([])
    with pytest.raises(ValueError):
        median_over_samples([1.0, float("nan")])


def _random_set(rng, labeled=True):
    n = int(rng.integers(3, 9))
    count = int(rng.integers(1, 5))
    ch = int(rng.integers(1, 3))
    inputs = rng.normal(size=(count, ch, n, n)) * 10.0 ** rng.integers(-5, 5)
    sols = rng.normal(size=(count, n, n)) if labeled else None
    return SampleSet(Grid(n), inputs, sols, "random", {"scale": 1}, int(rng.integers(0, 2**63)))


def test_roundtrip_bit_exact_many(tmp_path):
    rng = np.random.default_rng(7)
    for k in range(100):
        ss = _random_set(rng, labeled=bool(k % 2))
        d = save_sampleset(ss, tmp_path / f"s{k}")
        back = load_sampleset(d)
        assert back.inputs.tobytes() == ss.inputs.tobytes()
        if ss.solutions is None:
            assert back.solutions is None
        else:
            assert back.solutions.tobytes() == ss.solutions.tobytes()
        assert back.checksum() == ss.checksum()
        assert back.seed == ss.seed and back.generator_params == ss.generator_params


def test_manifest_fields(tmp_path):
    ss = _random_set(np.random.default_rng(3))
    save_sampleset(ss, tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert set(m) == {"format_version", "grid_n", "sample_count", "channels_per_input", "has_solutions",
                      "generator", "generator_params", "seed", "checksum"}
    assert (tmp_path / "inputs.bin").stat().st_size == ss.count * ss.channels * ss.grid.n ** 2 * 8


def test_truncated_payload_rejected(tmp_path):
    save_sampleset(_random_set(np.random.default_rng(4)), tmp_path)
    raw = (tmp_path / "inputs.bin").read_bytes()
    (tmp_path / "inputs.bin").write_bytes(raw[:-8])
    with pytest.raises(PayloadSizeError):
        load_sampleset(tmp_path)


def test_count_edit_rejected(tmp_path):
    save_sampleset(_random_set(np.random.default_rng(5)), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["sample_count"] += 1
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetError):
        load_sampleset(tmp_path)


def test_flipped_byte_rejected(tmp_path):
    save_sampleset(_random_set(np.random.default_rng(6)), tmp_path)
    raw = bytearray((tmp_path / "solutions.bin").read_bytes())
    raw[3] ^= 0x01
    (tmp_path / "solutions.bin").write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatchError):
        load_sampleset(tmp_path)


def test_missing_dataset(tmp_path):
    with pytest.raises(DatasetError):
        load_sampleset(tmp_path / "nope")


def test_sampleset_shape_checks():
    with pytest.raises(ValueError):
        SampleSet(Grid(4), np.zeros((2, 1, 4, 4)), np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        SampleSet(Grid(4), np.zeros((2, 4, 4)))
