import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voltvar import scenario
from voltvar.feeder import Bus, FeederModel, LineSection, Load, PvPlant, Source
from voltvar.scenario import (
    ProfileSet,
    Scenario,
    attach_centers,
    compute_centers,
    partition_blocks,
    select_random,
    select_representatives,
)

from conftest import z3


def line_model(dists, pv_dists=()):
    """Chain with one single-phase load per bus at cumulative distances."""
    buses = [Bus("sub", "a", 7.2)]
    lines, loads, plants = [], [], []
    prev, acc = "sub", 0.0
    for k, d in enumerate(dists, 1):
        bid = f"b{k}"
        buses.append(Bus(bid, "a", 7.2))
        lines.append(LineSection(f"l{k}", prev, bid, "a", d - acc, z3(0.1 + 0.2j, phases="a")))
        loads.append(Load(f"ld{k}", bid, "a", 10.0, 3.0))
        if acc == 0.0:
            pass
        prev, acc = bid, d
    for j, d in enumerate(pv_dists, 1):
        # park plants at the bus whose distance matches
        for b, dist in zip(buses[1:], dists):
            if dist == d:
                plants.append(PvPlant(f"pv{j}", b.id, "a", 100.0))
                break
    return FeederModel("line", buses, lines, loads, plants, [], Source("sub", {"a": 1.0}))


def test_center_single_load():
    m = line_model([5.0])
    sc = Scenario(0, {"ld1": (12.0, 3.0)}, {})
    d_l, d_pv = compute_centers(sc, m)
    assert d_l == pytest.approx(5.0)
    assert d_pv is None


def test_center_two_loads_eq1():
    m = line_model([1.0, 3.0])
    sc = Scenario(0, {"ld1": (2.0, 0.5), "ld2": (2.0, 0.5)}, {})
    d_l, _ = compute_centers(sc, m)
    assert d_l == pytest.approx(2.0)


def test_center_pv_undefined_at_night():
    m = line_model([1.0, 3.0], pv_dists=[3.0])
    sc = Scenario(0, {"ld1": (2.0, 0.5)}, {"pv1": 0.0})
    d_l, d_pv = compute_centers(sc, m)
    assert d_pv is None


def test_center_zero_load_degenerate():
    m = line_model([1.0])
    sc = Scenario(0, {"ld1": (0.0, 0.0)}, {})
    with pytest.raises(ValueError):
        compute_centers(sc, m)


@given(st.floats(min_value=0.01, max_value=100.0))
@settings(max_examples=25, deadline=None)
def test_center_scale_invariant(scale):
    m = line_model([1.0, 3.0, 4.5])
    base = {"ld1": (2.0, 0.5), "ld2": (5.0, 1.0), "ld3": (1.0, 0.2)}
    sc1 = Scenario(0, base, {})
    sc2 = Scenario(0, {k: (kw * scale, kv * scale) for k, (kw, kv) in base.items()}, {})
    d1, _ = compute_centers(sc1, m)
    d2, _ = compute_centers(sc2, m)
    assert d1 == pytest.approx(d2, rel=1e-9)


def _sc(t, p_load, p_pv, d_l=1.0, d_pv=1.0):
    s = Scenario(t, {"ld": (p_load, 0.0)}, {"pv": p_pv})
    s.d_l, s.d_pv = d_l, d_pv
    return s


def test_partition_single_block():
    scs = [_sc(t, 10 + t, 5.0) for t in range(4)]
    grid = partition_blocks(scs, rows=1, cols=1)
    assert grid.blocks[(0, 0)] == [0, 1, 2, 3]


def test_partition_four_corners():
    scs = [_sc(0, 0.0, 0.0), _sc(1, 100.0, 0.0), _sc(2, 0.0, 50.0), _sc(3, 100.0, 50.0)]
    grid = partition_blocks(scs, rows=2, cols=2)
    assert grid.blocks[(0, 0)] == [0]
    assert grid.blocks[(0, 1)] == [1]
    assert grid.blocks[(1, 0)] == [2]
    assert grid.blocks[(1, 1)] == [3]


def test_partition_degenerate_range():
    scs = [_sc(t, 10.0, 5.0) for t in range(3)]
    grid = partition_blocks(scs, rows=3, cols=3)
    assert grid.blocks[(0, 0)] == [0, 1, 2]
    assert len(grid.non_empty) == 1
    empties = [rc for rc, idx in sorted(grid.blocks.items()) if not idx]
    assert len(empties) == 8


def test_select_single_scenario_block():
    scs = [_sc(0, 10.0, 5.0)]
    grid = partition_blocks(scs, 1, 1)
    out = select_representatives(grid, scs)
    assert len(out) == 1


def test_select_dl_extrema_sorted_oracle():
    # distinct d_pv so PV picks do not collide with the load picks
    scs = [_sc(t, 10.0, 5.0, d_l=v, d_pv=10 + t) for t, v in enumerate([4.0, 1.0, 3.0, 5.0, 2.0])]
    grid = partition_blocks(scs, 1, 1)
    out = select_representatives(grid, scs)
    dls = {s.d_l for s in out[:3]}
    assert dls == {1.0, 3.0, 5.0}  # min, lower median, max


def test_select_six_distinct():
    # load-center picks are t0/t4/t2, PV-center picks are t1/t5/t3
    d_l = [1, 2, 9, 6, 4, 7]
    d_pv = [2, 1, 6, 9, 7, 5]
    scs = [_sc(t, 10, 5, d_l=d_l[t], d_pv=d_pv[t]) for t in range(6)]
    grid = partition_blocks(scs, 1, 1)
    out = select_representatives(grid, scs)
    assert len(out) == 6
    assert [s.timestamp for s in out] == [0, 4, 2, 1, 5, 3]


def test_select_contains_block_extremes():
    rng = np.random.default_rng(3)
    scs = []
    for t in range(200):
        s = _sc(t, rng.uniform(0, 100), rng.uniform(0, 60), d_l=rng.uniform(1, 9),
                d_pv=rng.uniform(1, 9) if rng.random() > 0.2 else None)
        scs.append(s)
    grid = partition_blocks(scs, 5, 5)
    out = select_representatives(grid, scs)
    picked = {id(s) for s in out}
    for _, idx in grid.non_empty:
        with_dl = [i for i in idx if scs[i].d_l is not None]
        lo = min(with_dl, key=lambda i: (scs[i].d_l, scs[i].timestamp))
        hi = max(with_dl, key=lambda i: (scs[i].d_l, -scs[i].timestamp))
        assert id(scs[lo]) in picked and id(scs[hi]) in picked
    assert len(out) <= 6 * len(grid.non_empty)


def test_random_deterministic_and_bounded():
    rng = np.random.default_rng(5)
    scs = [_sc(t, rng.uniform(0, 100), rng.uniform(0, 60)) for t in range(1000)]
    grid = partition_blocks(scs, 5, 5)
    a = select_random(grid, scs, seed=42)
    b = select_random(grid, scs, seed=42)
    assert [s.timestamp for s in a] == [s.timestamp for s in b]
    assert len(a) <= 150
    small = [_sc(t, 10.0, 5.0) for t in range(4)]
    g2 = partition_blocks(small, 1, 1)
    assert len(select_random(g2, small, seed=0)) == 4


def test_profileset_roundtrip(tmp_path, test_feeder_model):
    from voltvar import synth

    m = test_feeder_model
    t, lkw, lkv, pkw, lids, pids = synth.make_profiles(m, days=1, seed=1)
    ps = ProfileSet(t, lkw, lkv, pkw, lids, pids)
    path = tmp_path / "p.csv"
    ps.save_csv(path)
    again = ProfileSet.from_csv(path, m)
    assert len(again) == len(ps)
    assert np.allclose(again.load_kw, np.round(ps.load_kw, 4))
    assert np.allclose(again.pv_kw, np.round(ps.pv_kw, 4))
    sc = again.scenario(720)
    assert sc.p_pvtot == pytest.approx(float(np.round(pkw, 4)[720].sum()))


def test_profileset_missing_column(tmp_path, test_feeder_model):
    from voltvar import synth

    m = test_feeder_model
    t, lkw, lkv, pkw, lids, pids = synth.make_profiles(m, days=1, seed=1)
    ps = ProfileSet(t, lkw, lkv, pkw, lids, pids)
    path = tmp_path / "p.csv"
    ps.save_csv(path)
    import pandas as pd

    df = pd.read_csv(path).drop(columns=[lids[0]])
    df.to_csv(path, index=False)
    with pytest.raises(ValueError, match=lids[0]):
        ProfileSet.from_csv(path, m)
