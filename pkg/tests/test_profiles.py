import os
import sys

ROOT = os.path.dirname(os.path.dirname(__file__))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

import numpy as np
import pytest

from topodispatch.errors import ProfileError
from topodispatch.netmodel import load_network
from topodispatch.profiles import (
    ExogenousProfiles,
    ProfileSet,
    flat_price_profiles,
    load_profiles_csv,
    save_profiles_csv,
    synthetic_profiles,
)


def test_synthetic_profiles_deterministic_per_seed():
    topo = load_network("feeder34")
    a = synthetic_profiles(topo, 3, seed=7)
    b = synthetic_profiles(topo, 3, seed=7)
    c = synthetic_profiles(topo, 3, seed=8)
    assert len(a) == 3
    assert np.array_equal(a.day(1).price, b.day(1).price)
    assert not np.array_equal(a.day(1).price, c.day(1).price)
    day = a.day(0)
    assert day.horizon == 96
    assert day.demand_kw.shape == (96, 34)
    assert (day.price > 0).all()
    assert (day.demand_kw >= 0).all()


def test_day_index_wraps():
    topo = load_network("feeder34")
    days = synthetic_profiles(topo, 2, seed=0, horizon=8)
    assert days.day(2) is days.day(0)
    assert days.price_scale == pytest.approx(max(d.price.max() for d in days.days))


def test_flat_profiles_have_constant_price():
    topo = load_network("feeder34")
    day = flat_price_profiles(topo, price=0.2, horizon=12).day(0)
    assert np.all(day.price == 0.2)
    assert np.all(day.pv_kw == 0.0)
    assert np.allclose(day.demand_kw, day.demand_kw[0])


def test_shape_errors():
    with pytest.raises(ProfileError):
        ExogenousProfiles(price=np.ones(4), demand_kw=np.ones((3, 2)), pv_kw=np.zeros((3, 2)))
    with pytest.raises(ProfileError):
        ExogenousProfiles(price=np.ones(2), demand_kw=-np.ones((2, 2)), pv_kw=np.zeros((2, 2)))
    with pytest.raises(ProfileError):
        ProfileSet(days=()).day(0)


def test_check_against_topology():
    topo = load_network("feeder34")
    day = synthetic_profiles(topo, 1, seed=0, horizon=95).day(0)
    with pytest.raises(ProfileError):
        day.check_against(topo, 96)
    with pytest.raises(ProfileError):
        day.check_against(load_network("feeder69"))


def test_csv_roundtrip(tmp_path):
    topo = load_network("feeder34")
    days = synthetic_profiles(topo, 2, seed=3, horizon=6)
    path = save_profiles_csv(days, tmp_path / "profiles.csv")
    again = load_profiles_csv(path, topo)
    assert len(again) == 2
    for a, b in zip(days.days, again.days):
        assert np.allclose(a.price, b.price, rtol=1e-9)
        assert np.allclose(a.demand_kw, b.demand_kw, rtol=1e-9)
        assert np.allclose(a.reactive(), b.reactive(), rtol=1e-9)


def test_csv_missing_columns(tmp_path):
    topo = load_network("feeder34")
    path = tmp_path / "short.csv"
    path.write_text("step,price\n0,0.1\n")
    with pytest.raises(ProfileError):
        load_profiles_csv(path, topo)
