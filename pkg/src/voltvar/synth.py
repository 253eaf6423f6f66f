"""Synthetic desk-scale feeders and time-series profiles.

Builders here produced the feeder files shipped under voltvar/data/feeders
and generate the deterministic 7-day, 1-minute load/PV profiles used by the
demos and the acceptance suite. Everything is seeded; same arguments, same
output.
"""

from __future__ import annotations

import math

import numpy as np

from .feeder import (
    Bus,
    FeederModel,
    LineSection,
    Load,
    PvPlant,
    Regulator,
    Source,
)

# series impedance per km, ohms: overhead construction, coupled phases
_Z_SELF_3PH = 0.34 + 0.70j
_Z_MUT_3PH = 0.10 + 0.34j
_Z_SELF_LAT = 0.42 + 0.78j
_Z_MUT_LAT = 0.12 + 0.38j

_PH_IDX = {"a": 0, "b": 1, "c": 2}


def _zmat(phases, length_km, three_phase=True):
    zs = (_Z_SELF_3PH if three_phase else _Z_SELF_LAT) * length_km
    zm = (_Z_MUT_3PH if three_phase else _Z_MUT_LAT) * length_km
    z = np.zeros((3, 3), dtype=complex)
    idx = [_PH_IDX[p] for p in phases]
    for i in idx:
        for j in idx:
            z[i, j] = zs if i == j else zm
    return z


def build_tutorial_feeder() -> FeederModel:
    """6-bus walkthrough feeder: 3-phase trunk, a ganged regulator, one PV
    plant, and a single-phase tail."""
    buses = [
        Bus("sub", "abc", 7.2),
        Bus("b1", "abc", 7.2),
        Bus("b2", "abc", 7.2),
        Bus("b3", "abc", 7.2),
        Bus("b4", "ab", 7.2),
        Bus("b5", "a", 7.2),
    ]
    lines = [
        LineSection("l1", "sub", "b1", "abc", 1.2, _zmat("abc", 1.2)),
        LineSection("l2", "b2", "b3", "abc", 1.5, _zmat("abc", 1.5)),
        LineSection("l3", "b3", "b4", "ab", 1.0, _zmat("ab", 1.0, False)),
        LineSection("l4", "b4", "b5", "a", 0.8, _zmat("a", 0.8, False)),
    ]
    loads = [
        Load("ld2a", "b2", "a", 40.0, 13.0),
        Load("ld2b", "b2", "b", 35.0, 11.0),
        Load("ld2c", "b2", "c", 42.0, 14.0),
        Load("ld3a", "b3", "a", 30.0, 10.0),
        Load("ld3b", "b3", "b", 28.0, 9.0),
        Load("ld3c", "b3", "c", 25.0, 8.0),
        Load("ld4a", "b4", "a", 22.0, 7.0),
        Load("ld4b", "b4", "b", 18.0, 6.0),
        Load("ld5a", "b5", "a", 15.0, 5.0),
    ]
    plants = [PvPlant("pv1", "b3", "abc", 150.0)]
    regs = [
        Regulator("vr1a", "a", "b1", "b2", gang="vr1"),
        Regulator("vr1b", "b", "b1", "b2", gang="vr1"),
        Regulator("vr1c", "c", "b1", "b2", gang="vr1"),
    ]
    return FeederModel(
        "tutorial-6bus",
        buses,
        lines,
        loads,
        plants,
        regs,
        Source("sub", {"a": 1.0, "b": 1.0, "c": 1.0}),
    )


def build_test_feeder(seed: int = 11) -> FeederModel:
    """~150 single-phase-node radial test feeder: 3-phase trunk with a ganged
    regulator, mixed-phase laterals, a single-phase regulator on the longest
    lateral, and 3 PV plants sized to roughly 100% of peak load."""
    rng = np.random.default_rng(seed)
    buses = [Bus("sub", "abc", 7.2)]
    lines = []
    loads = []

    def add_bus(bid, phases):
        buses.append(Bus(bid, phases, 7.2))

    def add_line(frm, to, phases, length, three_phase):
        lines.append(
            LineSection(f"l_{to}", frm, to, phases, length, _zmat(phases, length, three_phase))
        )

    def add_loads(bid, phases, scale=1.0):
        for p in phases:
            kw = float(np.round(rng.uniform(8.0, 26.0) * scale, 1))
            pf = rng.uniform(0.90, 0.97)
            kvar = float(np.round(kw * math.tan(math.acos(pf)), 1))
            loads.append(Load(f"ld_{bid}{p}", bid, p, kw, kvar))

    # trunk sub - t01 .. t18; the ganged regulator feeds t04 so only a short
    # head section sits upstream of any tap control
    trunk = ["sub"] + [f"t{k:02d}" for k in range(1, 19)]
    for prev, cur in zip(trunk, trunk[1:]):
        add_bus(cur, "abc")
        if cur == "t04":
            continue  # fed through the vr1 regulator branch
        length = rng.uniform(0.45, 0.85)
        if cur in ("t01", "t02", "t03"):
            length = rng.uniform(0.25, 0.4)
        add_line(prev, cur, "abc", float(np.round(length, 2)), True)
    for cur in trunk[1:]:
        if cur not in ("t03", "t04"):
            add_loads(cur, "abc")

    def lateral(tag, root, phases, n, three_phase, load_scale=1.0):
        prev = root
        for k in range(1, n + 1):
            bid = f"{tag}{k}"
            add_bus(bid, phases)
            add_line(prev, bid, phases, float(np.round(rng.uniform(0.3, 0.65), 2)), three_phase)
            add_loads(bid, phases, load_scale)
            prev = bid

    lateral("la", "t06", "abc", 5, True)
    lateral("lb", "t12", "abc", 6, True)
    lateral("lc", "t07", "ab", 4, False)
    lateral("ld", "t10", "bc", 4, False)
    lateral("le", "t09", "a", 5, False)
    lateral("lf", "t14", "b", 6, False)
    # longest lateral, phase c, with its own regulator between lg3 and lg4
    prev = "t16"
    for k in range(1, 10):
        bid = f"lg{k}"
        add_bus(bid, "c")
        if k != 4:  # lg4 is fed through the vr2 regulator branch
            add_line(prev, bid, "c", float(np.round(rng.uniform(0.35, 0.7), 2)), False)
        if k != 3:
            add_loads(bid, "c", 1.2)
        prev = bid
    lateral("lh", "t18", "a", 4, False)
    lateral("li", "t05", "c", 5, False)
    lateral("lj", "t15", "abc", 5, True)

    # one larger commercial block near mid-feeder
    for p in "abc":
        loads.append(Load(f"ld_big{p}", "t11", p, 55.0, 18.0))

    total_kw = sum(d.kw for d in loads)
    # nominal peak ~= 1.12 x base shape; 3 plants at ~100% peak penetration
    plant_peak = total_kw * 1.12 / 3.0
    kva = float(np.round(plant_peak * 1.2, 0))
    plants = [
        PvPlant("pv1", "t10", "abc", kva),
        PvPlant("pv2", "t18", "abc", kva),
        PvPlant("pv3", "lb6", "abc", kva),
    ]
    regs = [
        Regulator("vr1a", "a", "t03", "t04", gang="vr1", initial_tap=5),
        Regulator("vr1b", "b", "t03", "t04", gang="vr1", initial_tap=5),
        Regulator("vr1c", "c", "t03", "t04", gang="vr1", initial_tap=5),
        Regulator("vr2", "c", "lg3", "lg4", initial_tap=3),
    ]
    return FeederModel(
        "synthetic-test-feeder",
        buses,
        lines,
        loads,
        plants,
        regs,
        Source("sub", {"a": 1.0, "b": 1.0, "c": 1.0}),
    )


# --------------------------------------------------------------------------- #
# profiles


def _daily_load_shape(minutes):
    """Unit daily shape: overnight valley, morning rise, evening peak."""
    h = minutes / 60.0
    base = 0.58
    morning = 0.22 * np.exp(-0.5 * ((h - 8.0) / 2.2) ** 2)
    midday = 0.10 * np.exp(-0.5 * ((h - 13.0) / 3.0) ** 2)
    evening = 0.42 * np.exp(-0.5 * ((h - 19.0) / 2.4) ** 2)
    return base + morning + midday + evening


def _clear_sky(minutes):
    h = minutes / 60.0
    out = np.zeros_like(h)
    day = (h > 6.0) & (h < 18.0)
    out[day] = np.sin(math.pi * (h[day] - 6.0) / 12.0) ** 2
    return out


def _smooth(x, width):
    if width <= 1:
        return x
    from scipy.ndimage import uniform_filter1d

    return uniform_filter1d(np.asarray(x, dtype=float), size=width, axis=0, mode="nearest")


def make_profiles(model: FeederModel, days: int = 7, seed: int = 202, stress_day: int | None = None):
    """Deterministic per-load and per-plant minute profiles.

    Returns (t, load_kw, load_kvar, pv_kw, load_ids, plant_ids) arrays.
    Load diversity comes from a per-day spatial tilt (shifts the load center
    head-ward or tail-ward) plus slow per-load wander. The stress day (last
    day by default) is a clear-sky, low-load day with fast afternoon cloud
    ramps, built to force overvoltage without control.
    """
    rng = np.random.default_rng(seed)
    if stress_day is None:
        stress_day = days - 1
    n = days * 1440
    minutes = np.arange(1440)
    shape = _daily_load_shape(minutes)
    sky = _clear_sky(minutes)

    load_ids = [d.id for d in model.loads]
    plant_ids = [p.id for p in model.pv_plants]
    base_kw = np.array([d.kw for d in model.loads])
    kvar_ratio = np.array([d.kvar / d.kw if d.kw else 0.0 for d in model.loads])
    dist = np.array([model.bus_distance_km(d.bus) for d in model.loads])
    dist_n = dist / max(dist.max(), 1e-9) - 0.5  # centered spatial coordinate

    load_kw = np.empty((n, len(load_ids)))
    for day in range(days):
        sl = slice(day * 1440, (day + 1) * 1440)
        day_scale = rng.uniform(0.9, 1.15)
        if day % 7 == 3:
            day_scale = 0.85  # guaranteed light-load day in the history
        if day == stress_day:
            day_scale = 0.62
        # spatial tilt: positive pushes load toward the feeder tail
        tilt0, tilt1 = rng.uniform(-0.55, 0.55, size=2)
        tilt = np.interp(minutes, [0, 1439], [tilt0, tilt1])
        per_load = rng.uniform(0.82, 1.18, size=len(load_ids))
        wander = _smooth(rng.normal(0.0, 1.0, size=(1440, len(load_ids))), 90)
        wander = 1.0 + 0.10 * wander / max(np.abs(wander).max(), 1e-9) * 3.0
        fast = 1.0 + 0.03 * rng.standard_normal((1440, len(load_ids)))
        spatial = 1.0 + np.outer(tilt, dist_n)
        prof = (
            base_kw[None, :]
            * shape[:, None]
            * day_scale
            * per_load[None, :]
            * spatial
            * wander
            * fast
        )
        load_kw[sl] = np.clip(prof, 0.05 * base_kw[None, :], None)
    load_kvar = load_kw * kvar_ratio[None, :]

    plant_peak = np.array([p.kva / 1.2 for p in model.pv_plants])
    pv_kw = np.empty((n, len(plant_ids)))
    for day in range(days):
        sl = slice(day * 1440, (day + 1) * 1440)
        clearness = rng.uniform(0.25, 1.0)
        if day % 7 == 1:
            clearness = 0.97  # guaranteed clear day in the history
        if day % 7 == 3:
            clearness = 0.92
        if day == stress_day:
            clearness = 1.0
        common = _smooth(rng.uniform(0.0, 1.0, size=1440), 45)
        common = 0.75 + 0.25 * common / max(common.max(), 1e-9)
        if day == stress_day:
            # afternoon cloud passages; ramps are paced so voltage moves
            # stay inside the 0.01 pu optimization margin per 5-min interval
            common = np.ones(1440)
            for start in (13 * 60, 14 * 60 + 40):
                width = 40
                common[start : start + width] *= 0.72
            common = _smooth(common, 15)
        for j in range(len(plant_ids)):
            local = _smooth(rng.uniform(0.0, 1.0, size=1440), 60)
            local = 0.9 + 0.1 * local / max(local.max(), 1e-9)
            pv_kw[sl, j] = plant_peak[j] * sky * clearness * common * local
    pv_kw = np.clip(pv_kw, 0.0, plant_peak[None, :])

    t = np.arange(n)
    return t, load_kw, load_kvar, pv_kw, load_ids, plant_ids


def save_profiles_csv(path, t, load_kw, load_kvar, pv_kw, load_ids, plant_ids):
    """Write the profile CSV consumed by the scenario module and the CLI."""
    import pandas as pd

    data = {"t": t}
    for j, lid in enumerate(load_ids):
        data[lid] = np.round(load_kw[:, j], 4)
        data[f"{lid}:kvar"] = np.round(load_kvar[:, j], 4)
    for j, pid in enumerate(plant_ids):
        data[pid] = np.round(pv_kw[:, j], 4)
    pd.DataFrame(data).to_csv(path, index=False)
