import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metagent.domain import Dataset, DimensionError, write_dataset_csv
from metagent.oracle import (
    OracleCapacityError,
    OracleConfig,
    frequency_grid,
    grow_dataset,
    resimulate_error,
    simulate,
)

CFG = OracleConfig()
unit14 = arrays(np.float64, 14, elements=st.floats(-1, 1))

# s_0 at g = 0: 1 - 4 * 0.65 * 0.04**2 / (0.5**2 + 0.04**2), evaluated by hand once and frozen
S0_AT_ZERO = 0.983465818759936


def test_zero_geometry_saturates_at_center():
    s = simulate(np.zeros(14))
    assert s[100] == 0.0  # f = 0.5 with L = 201


def test_zero_geometry_first_point():
    assert simulate(np.zeros(14))[0] == pytest.approx(S0_AT_ZERO, abs=1e-12)


def test_frequency_grid():
    f = frequency_grid(201)
    assert f[0] == 0.0 and f[-1] == 1.0 and f[100] == 0.5


@given(unit14)
def test_spectrum_in_unit_interval(g):
    s = simulate(g)
    assert s.shape == (201,)
    assert np.all((s >= 0) & (s <= 1))


@given(unit14)
def test_simulate_is_pure(g):
    assert np.array_equal(simulate(g), simulate(g.copy()))


def test_batch_matches_single():
    G = np.random.default_rng(0).uniform(-1, 1, (5, 14))
    S = simulate(G)
    for g, s in zip(G, S):
        assert np.array_equal(simulate(g), s)


def test_simulate_rejects_bad_input():
    with pytest.raises(DimensionError):
        simulate(np.zeros(13))
    g = np.zeros(14)
    g[3] = np.nan
    with pytest.raises(ValueError):
        simulate(g)


def test_every_coordinate_matters():
    r = np.random.default_rng(7)
    for d in range(14):
        found = False
        for _ in range(50):
            g = r.uniform(-0.9, 0.9, 14)
            g2 = g.copy()
            g2[d] += 0.1
            if np.max(np.abs(simulate(g2) - simulate(g))) >= 1e-4:
                found = True
                break
        assert found, f"coordinate {d} has no effect"


def test_config_invariants():
    with pytest.raises(ValueError):
        OracleConfig(kind="file")
    with pytest.raises(ValueError):
        OracleConfig(dim=10)


def test_grow_from_empty_to_550():
    ds = grow_dataset(Dataset.empty(), 550, CFG)
    assert len(ds.train_idx) == 500 and len(ds.val_idx) == 50


def test_grow_to_same_size_is_identity(monkeypatch):
    ds = grow_dataset(Dataset.empty(), 550, CFG)
    import metagent.oracle as oracle

    monkeypatch.setattr(oracle, "simulate", lambda *a, **k: pytest.fail("simulated"))
    assert grow_dataset(ds, 550, CFG) is ds


def test_grow_is_deterministic():
    a = grow_dataset(grow_dataset(Dataset.empty(), 550, CFG), 1100, CFG)
    b = grow_dataset(grow_dataset(Dataset.empty(), 550, CFG), 1100, CFG)
    assert np.array_equal(a.geometries, b.geometries) and np.array_equal(a.spectra, b.spectra)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(1, 400), min_size=1, max_size=4))
def test_prefix_property_regardless_of_batching(steps):
    ks = np.cumsum(steps).tolist()
    ds = Dataset.empty()
    for k in ks:
        ds = grow_dataset(ds, k, CFG)
    once = grow_dataset(Dataset.empty(), ks[-1], CFG)
    assert np.array_equal(ds.geometries, once.geometries)
    assert np.array_equal(ds.spectra, once.spectra)


def test_grow_cannot_shrink():
    ds = grow_dataset(Dataset.empty(), 20, CFG)
    with pytest.raises(ValueError):
        grow_dataset(ds, 10, CFG)


def test_new_geometries_lie_in_bounds():
    b = OracleConfig(lower=tuple([0.0] * 14), upper=tuple([2.0] * 14))
    ds = grow_dataset(Dataset.empty(), 200, b)
    assert ds.geometries.min() >= 0 and ds.geometries.max() <= 2


def test_file_backed_sequential_and_capacity(tmp_path):
    pool = grow_dataset(Dataset.empty(), 30, CFG)
    p = tmp_path / "pool.csv"
    write_dataset_csv(pool, p)
    cfg = OracleConfig(kind="file", path=str(p))
    ds = grow_dataset(grow_dataset(Dataset.empty(), 12, cfg), 30, cfg)
    assert np.array_equal(ds.geometries, pool.geometries)
    with pytest.raises(OracleCapacityError) as e:
        grow_dataset(ds, 31, cfg)
    assert e.value.available == 30


def test_resim_self_consistency():
    g = np.random.default_rng(1).uniform(-1, 1, 14)
    assert resimulate_error(g, simulate(g), CFG) == 0.0


def test_resim_constant_offset():
    g = np.random.default_rng(2).uniform(-1, 1, 14)
    assert resimulate_error(g, simulate(g) + 0.01, CFG) == pytest.approx(1e-4, rel=1e-9)


def test_resim_matches_bruteforce_sum():
    r = np.random.default_rng(3)
    g, g2 = r.uniform(-1, 1, (2, 14))
    a, b = simulate(g).tolist(), simulate(g2).tolist()
    brute = sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)
    assert resimulate_error(g, np.array(b), CFG) == pytest.approx(brute, rel=1e-12)


def test_resim_dimension_mismatch():
    with pytest.raises(DimensionError):
        resimulate_error(np.zeros(14), np.zeros(200), CFG)
