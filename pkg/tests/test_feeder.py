import json

import numpy as np
import pytest

from voltvar import feeder
from voltvar.feeder import (
    Bus,
    FeederModel,
    FeederParseError,
    FeederValidationError,
    LineSection,
    Load,
    NodeRef,
    PvPlant,
    Regulator,
    Source,
)

from conftest import chain_feeder, z3


def minimal_doc():
    return {
        "name": "mini",
        "source": {"bus": "sub", "voltage_pu": {"a": 1.0}},
        "buses": [
            {"id": "sub", "phases": "a", "base_kv_ln": 7.2},
            {"id": "b1", "phases": "a", "base_kv_ln": 7.2},
        ],
        "lines": [
            {
                "id": "l1",
                "from": "sub",
                "to": "b1",
                "phases": "a",
                "length_km": 1.0,
                "z_ohm": [[[0.1, 0.2], [0, 0], [0, 0]], [[0, 0]] * 3, [[0, 0]] * 3],
            }
        ],
        "loads": [{"id": "ld1", "bus": "b1", "phase": "a", "kw": 10, "kvar": 2}],
    }


def test_load_minimal_feeder(tmp_path):
    path = tmp_path / "mini.json"
    path.write_text(json.dumps(minimal_doc()))
    model = feeder.load_feeder(path)
    assert len(model.buses) == 2
    assert model.nodes == [NodeRef("sub", "a"), NodeRef("b1", "a")]


def test_loop_rejected(tmp_path):
    doc = minimal_doc()
    doc["buses"].append({"id": "b2", "phases": "a", "base_kv_ln": 7.2})
    z = doc["lines"][0]["z_ohm"]
    doc["lines"].append(dict(doc["lines"][0], id="l2", to="b2"))
    doc["lines"].append({"id": "l3", "from": "b1", "to": "b2", "phases": "a",
                         "length_km": 1.0, "z_ohm": z})
    path = tmp_path / "loop.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(FeederValidationError, match="non-radial"):
        feeder.load_feeder(path)


def test_dangling_load_named(tmp_path):
    doc = minimal_doc()
    doc["loads"].append({"id": "ldx", "bus": "nope", "phase": "a", "kw": 1, "kvar": 0})
    path = tmp_path / "dangle.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(FeederValidationError, match="ldx"):
        feeder.load_feeder(path)


def test_malformed_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(FeederParseError):
        feeder.load_feeder(path)


def test_electrical_distance_chain():
    # sub - A (1 km) - B (2 km), branch C off A (0.5 km)
    buses = [Bus("sub", "a", 7.2), Bus("A", "a", 7.2), Bus("B", "a", 7.2), Bus("C", "a", 7.2)]
    z = z3(0.1 + 0.2j, phases="a")
    lines = [
        LineSection("l1", "sub", "A", "a", 1.0, z),
        LineSection("l2", "A", "B", "a", 2.0, z),
        LineSection("l3", "A", "C", "a", 0.5, z),
    ]
    m = FeederModel("t", buses, lines, [], [], [], Source("sub", {"a": 1.0}))
    assert m.electrical_distance(NodeRef("sub", "a")) == 0.0
    assert m.electrical_distance(NodeRef("B", "a")) == pytest.approx(3.0)
    assert m.electrical_distance(NodeRef("C", "a")) == pytest.approx(1.5)
    # impedance-magnitude alternative: |0.1+0.2j| per km-section on the path
    zmag = abs(0.1 + 0.2j)
    assert m.electrical_distance(NodeRef("B", "a"), method="impedance") == pytest.approx(2 * zmag)


def test_distance_monotone_along_paths(test_feeder_model):
    m = test_feeder_model
    for node in m.nodes:
        d = m.electrical_distance(node)
        assert d >= 0.0
        parent = m.parent_bus(node.bus)
        if parent is not None:
            dp = m._dist_km[parent]
            assert d >= dp - 1e-12


def test_unknown_node_raises():
    m = chain_feeder()
    with pytest.raises(FeederValidationError):
        m.electrical_distance(NodeRef("ghost", "a"))
    with pytest.raises(FeederValidationError):
        m.upstream_regulator(NodeRef("b1", "c"))


def regulator_chain():
    """sub -l1- b1 =r1= b2 -l2- b3 =r2= b4 -l3- b5, single phase."""
    buses = [Bus(b, "a", 7.2) for b in ("sub", "b1", "b2", "b3", "b4", "b5")]
    z = z3(0.1 + 0.2j, phases="a")
    lines = [
        LineSection("l1", "sub", "b1", "a", 1.0, z),
        LineSection("l2", "b2", "b3", "a", 1.0, z),
        LineSection("l3", "b4", "b5", "a", 1.0, z),
    ]
    regs = [
        Regulator("r1", "a", "b1", "b2"),
        Regulator("r2", "a", "b3", "b4"),
    ]
    return FeederModel("rr", buses, lines, [], [], regs, Source("sub", {"a": 1.0}))


def test_upstream_regulator():
    m = regulator_chain()
    assert m.upstream_regulator(NodeRef("b1", "a")) is None
    assert m.upstream_regulator(NodeRef("b2", "a")) == "r1"  # secondary bus counts
    assert m.upstream_regulator(NodeRef("b3", "a")) == "r1"
    assert m.upstream_regulator(NodeRef("b5", "a")) == "r2"  # last of the cascade


def test_upstream_partitions_nodes(test_feeder_model):
    m = test_feeder_model
    zones = {}
    for node in m.nodes:
        zones.setdefault(m.upstream_regulator(node), []).append(node)
    assert sum(len(v) for v in zones.values()) == len(m.nodes)
    reg_ids = {r.id for r in m.regulators}
    assert set(zones) <= reg_ids | {None}


def test_roundtrip(tmp_path, test_feeder_model):
    path = tmp_path / "copy.json"
    feeder.save_feeder(test_feeder_model, path)
    again = feeder.load_feeder(path)
    assert again == test_feeder_model


def test_gang_validation():
    buses = [Bus(b, "ab", 7.2) for b in ("sub", "b1", "b2")]
    z = z3(0.1 + 0.2j, phases="ab")
    lines = [LineSection("l1", "sub", "b1", "ab", 1.0, z)]
    regs = [
        Regulator("r1a", "a", "b1", "b2", gang="r1"),
        Regulator("r1b", "b", "b1", "b2", gang="r1", initial_tap=2),
    ]
    with pytest.raises(FeederValidationError, match="gang"):
        FeederModel("g", buses, lines, [], [], regs, Source("sub", {"a": 1.0, "b": 1.0}))


def test_control_groups():
    buses = [Bus(b, "ab", 7.2) for b in ("sub", "b1", "b2")]
    z = z3(0.1 + 0.2j, phases="ab")
    lines = [LineSection("l1", "sub", "b1", "ab", 1.0, z)]
    regs = [
        Regulator("r1a", "a", "b1", "b2", gang="r1"),
        Regulator("r1b", "b", "b1", "b2", gang="r1"),
    ]
    m = FeederModel("g", buses, lines, [], [], regs, Source("sub", {"a": 1.0, "b": 1.0}))
    groups = m.control_groups()
    assert set(groups) == {"r1"}
    assert {r.id for r in groups["r1"]} == {"r1a", "r1b"}
