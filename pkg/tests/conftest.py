import numpy as np
import pytest

from voltvar import feeder


def z3(z_self, z_mut=0j, phases="abc"):
    """3x3 impedance matrix with common self/mutual terms on given phases."""
    z = np.zeros((3, 3), dtype=complex)
    idx = [feeder.PHASE_INDEX[p] for p in phases]
    for i in idx:
        for j in idx:
            z[i, j] = z_self if i == j else z_mut
    return z


def chain_feeder(n_bus=3, z_self=0.05 + 0.1j, length_km=1.0, load_kw=20.0, load_kvar=5.0):
    """Single-phase chain sub - b1 - b2 - ... with a load at every bus past the head."""
    buses = [feeder.Bus("sub", "a", 7.2)]
    lines = []
    loads = []
    for k in range(1, n_bus):
        buses.append(feeder.Bus(f"b{k}", "a", 7.2))
        lines.append(
            feeder.LineSection(
                f"l{k}", buses[k - 1].id, f"b{k}", "a", length_km, z3(z_self, phases="a")
            )
        )
        loads.append(feeder.Load(f"ld{k}", f"b{k}", "a", load_kw, load_kvar))
    return feeder.FeederModel(
        "chain",
        buses,
        lines,
        loads,
        [],
        [],
        feeder.Source("sub", {"a": 1.0}),
    )


@pytest.fixture
def tutorial_model():
    from voltvar import data

    return feeder.load_feeder(data.tutorial_feeder_path())


@pytest.fixture(scope="session")
def test_feeder_model():
    from voltvar import data

    return feeder.load_feeder(data.test_feeder_path())
