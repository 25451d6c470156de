import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metagent.domain import (
    Dataset,
    DimensionError,
    GeometryBounds,
    InfeasibleGeometryError,
    count_csv_columns,
    denormalize,
    normalize,
    read_dataset_csv,
    split_indices,
    validate_geometry,
    write_dataset_csv,
)

B = GeometryBounds.default(14)


def test_bounds_reject_inverted_or_mismatched():
    with pytest.raises(ValueError):
        GeometryBounds(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    with pytest.raises((ValueError, DimensionError)):
        GeometryBounds(np.zeros(3), np.ones(2))


def test_lower_bound_is_feasible():
    assert validate_geometry(B.lower, B).feasible


def test_one_coordinate_above_upper_is_flagged():
    g = B.midpoint().copy()
    g[5] = B.upper[5] + 0.1
    rep = validate_geometry(g, B)
    assert not rep.feasible
    assert rep.violations == [5]
    assert rep.above[5] and not rep.below[5]


def test_midpoint_is_feasible():
    assert validate_geometry(B.midpoint(), B).feasible


def test_validate_dimension_mismatch():
    with pytest.raises(DimensionError):
        validate_geometry(np.zeros(13), B)


def test_normalize_endpoints():
    b = GeometryBounds(np.linspace(-3, 0, 14), np.linspace(1, 5, 14))
    assert np.all(normalize(b.lower, b) == -1.0)
    assert np.allclose(normalize(b.upper, b), 1.0, atol=1e-15)
    assert np.allclose(normalize(b.midpoint(), b), 0.0, atol=1e-15)


def test_normalize_rejects_infeasible():
    g = B.midpoint().copy()
    g[0] = 2.0
    with pytest.raises(InfeasibleGeometryError):
        normalize(g, B)


@st.composite
def box_and_point(draw):
    d = draw(st.integers(1, 20))
    lo = draw(arrays(np.float64, d, elements=st.floats(-1e3, 1e3)))
    width = draw(arrays(np.float64, d, elements=st.floats(1e-3, 1e3)))
    u = draw(arrays(np.float64, d, elements=st.floats(0, 1)))
    b = GeometryBounds(lo, lo + width)
    return b, np.clip(lo + u * width, b.lower, b.upper)


@given(box_and_point())
def test_round_trip_normalize_denormalize(case):
    b, g = case
    assert np.all(np.abs(denormalize(normalize(g, b), b) - g) <= 1e-12 * np.maximum(1, np.abs(g)) + 1e-12)


@given(box_and_point(), st.data())
def test_round_trip_denormalize_normalize(case, data):
    b, _ = case
    z = data.draw(arrays(np.float64, b.dim, elements=st.floats(-1, 1)))
    g = np.clip(denormalize(z, b), b.lower, b.upper)
    assert np.all(np.abs(normalize(g, b) - z) <= 1e-9)


@given(st.integers(0, 5000))
def test_split_partition_and_ratio(k):
    tr, va = split_indices(k)
    assert len(np.intersect1d(tr, va)) == 0
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(k))
    if k >= 11:
        assert len(va) == k // 11
    elif k > 0:
        assert len(va) == max(1, k // 11) == 1


def test_split_550_is_500_50():
    tr, va = split_indices(550)
    assert (len(tr), len(va)) == (500, 50)


@settings(max_examples=30)
@given(st.integers(11, 300), st.integers(0, 300))
def test_append_keeps_prefix_and_split(k, extra):
    r = np.random.default_rng(k)
    ds = Dataset(r.normal(size=(k, 3)), r.normal(size=(k, 4)))
    big = ds.append(r.normal(size=(extra, 3)), r.normal(size=(extra, 4)))
    assert np.array_equal(big.geometries[:k], ds.geometries)
    assert np.array_equal(big.spectra[:k], ds.spectra)
    # validation membership of old pairs never changes as the set grows
    assert set(ds.val_idx.tolist()) <= set(big.val_idx.tolist())


def test_dataset_arrays_are_read_only():
    ds = Dataset(np.zeros((12, 2)), np.zeros((12, 3)))
    with pytest.raises(ValueError):
        ds.geometries[0, 0] = 1.0


@pytest.mark.parametrize("header", [True, False])
def test_csv_round_trip_with_and_without_header(tmp_path, header):
    r = np.random.default_rng(0)
    ds = Dataset(r.normal(size=(15, 14)), r.uniform(size=(15, 7)))
    p = tmp_path / "d.csv"
    write_dataset_csv(ds, p, header=header)
    back = read_dataset_csv(p, dim=14, length=7)
    assert np.array_equal(back.geometries, ds.geometries)
    assert np.array_equal(back.spectra, ds.spectra)
    assert count_csv_columns(p) == 21


def test_csv_wrong_width_is_rejected(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,2,3\n4,5,6\n")
    with pytest.raises(DimensionError):
        read_dataset_csv(p, dim=2, length=3)
