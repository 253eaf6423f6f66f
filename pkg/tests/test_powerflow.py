import math

import numpy as np
import pytest

from voltvar import feeder, powerflow
from voltvar.feeder import (
    Bus,
    FeederModel,
    LineSection,
    Load,
    NodeRef,
    PvPlant,
    Regulator,
    Source,
)
from voltvar.powerflow import InjectionState, InvalidStateError, solve

from conftest import chain_feeder, z3


def two_bus_analytic(v0_pu, r_pu, x_pu, p_pu, q_pu):
    """Receiving-end voltage of the 1-line constant-PQ case, from the
    quadratic in u = |V|^2 implied by V conj((V0 - V)/z) = S."""
    b = 2 * (r_pu * p_pu + x_pu * q_pu) - v0_pu**2
    c = (r_pu**2 + x_pu**2) * (p_pu**2 + q_pu**2)
    u = (-b + math.sqrt(b * b - 4 * c)) / 2
    return math.sqrt(u)


def make_two_bus(r_pu=0.01, x_pu=0.02, p_pu=0.5, q_pu=0.1, with_reg_tap=None):
    """Single-phase 2-bus feeder on a 1 kV / 1 MVA base so that pu == SI/1e6
    and 1 ohm == 1 pu."""
    buses = [Bus("sub", "a", 1.0), Bus("b1", "a", 1.0)]
    z = z3(complex(r_pu, x_pu), phases="a")
    lines = [LineSection("l1", "sub", "b1", "a", 1.0, z)]
    regs = []
    if with_reg_tap is not None:
        buses.append(Bus("b2", "a", 1.0))
        regs = [Regulator("vr", "a", "b1", "b2", initial_tap=with_reg_tap)]
        load_bus = "b2"
    else:
        load_bus = "b1"
    loads = [Load("ld", load_bus, "a", p_pu * 1e3, q_pu * 1e3)]
    return FeederModel("twobus", buses, lines, loads, [], regs, Source("sub", {"a": 1.0}))


def test_no_load_flat_profile():
    m = chain_feeder(n_bus=5, load_kw=0.0, load_kvar=0.0)
    sol = solve(m)
    assert np.allclose(sol.v_pu, 1.0, atol=1e-12)
    for p, (pl, ql) in sol.loss_kw.items():
        assert abs(pl) < 1e-9 and abs(ql) < 1e-9


def test_two_bus_matches_quadratic():
    m = make_two_bus()
    sol = solve(m, tol=1e-10)
    expected = two_bus_analytic(1.0, 0.01, 0.02, 0.5, 0.1)
    assert sol.node_v_pu(NodeRef("b1", "a")) == pytest.approx(expected, abs=1e-8)


def test_regulator_ratio_identity():
    m = make_two_bus(with_reg_tap=1)
    sol = solve(m, tol=1e-10)
    vp = sol.node_v_pu(NodeRef("b1", "a"))
    vs = sol.node_v_pu(NodeRef("b2", "a"))
    assert vs / vp == pytest.approx(1.00625, abs=1e-12)
    # analytic check: the line sees the same PQ (ideal regulator is lossless)
    expected_primary = two_bus_analytic(1.0, 0.01, 0.02, 0.5, 0.1)
    assert vp == pytest.approx(expected_primary, abs=1e-8)


def test_power_balance_per_phase(test_feeder_model):
    m = test_feeder_model
    state = InjectionState(pv={pv.id: (0.5 * pv.kva, 0.1 * pv.kva) for pv in m.pv_plants})
    sol = solve(m, state)
    load_net = {p: 0.0 + 0.0j for p in "abc"}
    for ld in m.loads:
        load_net[ld.phase] += complex(ld.kw, ld.kvar)
    for pv in m.pv_plants:
        p_kw, q_kvar = sol.pv_pq_kw[pv.id]
        share = complex(p_kw, q_kvar) / len(pv.phases)
        for p in pv.phases:
            load_net[p] -= share
    for p, (hp, hq) in sol.head_pq_kw.items():
        lp, lq = sol.loss_kw[p]
        resid = complex(hp - load_net[p].real - lp, hq - load_net[p].imag - lq)
        assert abs(resid) * 1e3 / powerflow.S_BASE_VA <= 1e-6


def test_monotone_voltage_drop_no_pv():
    m = chain_feeder(n_bus=8, load_kw=30.0, load_kvar=10.0)
    sol = solve(m)
    mags = [sol.node_v_pu(n) for n in m.nodes]
    assert all(b < a for a, b in zip(mags, mags[1:]))


def test_invariant_under_reordering(test_feeder_model, tmp_path):
    m = test_feeder_model
    doc = feeder.to_dict(m)
    rng = np.random.default_rng(7)
    for key in ("buses", "lines", "loads", "pv_plants", "regulators"):
        doc[key] = [doc[key][i] for i in rng.permutation(len(doc[key]))]
    import json

    path = tmp_path / "shuffled.json"
    path.write_text(json.dumps(doc))
    m2 = feeder.load_feeder(path)
    s1, s2 = solve(m), solve(m2)
    v1 = {n: s1.node_v_pu(n) for n in m.nodes}
    v2 = {n: s2.node_v_pu(n) for n in m2.nodes}
    assert set(v1) == set(v2)
    for n in v1:
        assert v1[n] == pytest.approx(v2[n], abs=1e-12)


def test_pv_raises_voltage(test_feeder_model):
    m = test_feeder_model
    base = solve(m)
    boosted = solve(
        m, InjectionState(pv={m.pv_plants[0].id: (0.0, 0.4 * m.pv_plants[0].kva)})
    )
    pv_bus = m.pv_plants[0].bus
    for p in m.pv_plants[0].phases:
        n = NodeRef(pv_bus, p)
        assert boosted.node_v_pu(n) > base.node_v_pu(n)


def test_invalid_tap_rejected(test_feeder_model):
    m = test_feeder_model
    rid = m.regulators[0].id
    with pytest.raises(InvalidStateError):
        solve(m, InjectionState(taps={rid: 99}))


def test_pv_capacity_enforced(test_feeder_model):
    m = test_feeder_model
    pv = m.pv_plants[0]
    with pytest.raises(InvalidStateError):
        solve(m, InjectionState(pv={pv.id: (pv.kva, 0.5 * pv.kva)}))


def test_nonconvergence_reports_worst_node():
    # absurd loading so the sweep cannot settle
    m = chain_feeder(n_bus=3, z_self=2.0 + 4.0j, load_kw=30000.0, load_kvar=10000.0)
    with pytest.raises(powerflow.ConvergenceError) as err:
        solve(m)
    assert err.value.worst_node in m.nodes


def test_measurement_vector_layout(test_feeder_model):
    m = test_feeder_model
    sol = solve(m)
    channels = powerflow.measurement_channels(m)
    vec = powerflow.measurement_vector(m, sol)
    assert len(channels) == len(vec)
    assert channels[0] == "head_p_a"
    assert sum(1 for c in channels if c.startswith("head_")) == 2 * len(
        m.bus_map[m.source.bus].phases
    )
