"""Operating scenarios and representative-scenario selection.

A scenario is one timestep of per-load and per-plant injections plus the
derived features used for selection: total feeder-head load, total PV
output, and the injection-weighted load/PV centers. Selection partitions
the (P_feeder, P_PVTOT) plane into blocks and keeps, per block, the
scenarios at the min/median/max load center and min/median/max PV center;
the random variant draws six per block instead and exists as the baseline
for the selection-method comparison experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .feeder import FeederModel, NodeRef


@dataclass
class Scenario:
    timestamp: int
    loads: dict  # load id -> (kw, kvar)
    pv: dict  # plant id -> kw
    p_feeder: float = field(init=False)
    p_pvtot: float = field(init=False)
    d_l: float | None = None
    d_pv: float | None = None

    def __post_init__(self):
        total_load = sum(kw for kw, _ in self.loads.values())
        self.p_pvtot = float(sum(self.pv.values()))
        # feeder-head proxy before any control: load minus PV at unity conversion
        self.p_feeder = float(total_load - self.p_pvtot)


@dataclass
class BlockGrid:
    rows: int  # P_PVTOT axis
    cols: int  # P_feeder axis
    p_feeder_range: tuple
    p_pvtot_range: tuple
    blocks: dict  # (row, col) -> list of scenario indices; empty lists kept

    @property
    def non_empty(self):
        return [(rc, idx) for rc, idx in sorted(self.blocks.items()) if idx]


class ProfileSet:
    """Time-indexed load/PV profiles; one scenario per row."""

    def __init__(self, t, load_kw, load_kvar, pv_kw, load_ids, plant_ids):
        self.t = np.asarray(t)
        self.load_kw = np.asarray(load_kw, dtype=float)
        self.load_kvar = np.asarray(load_kvar, dtype=float)
        self.pv_kw = np.asarray(pv_kw, dtype=float)
        self.load_ids = list(load_ids)
        self.plant_ids = list(plant_ids)

    def __len__(self):
        return len(self.t)

    @classmethod
    def from_csv(cls, path, model: FeederModel) -> "ProfileSet":
        """Read the profile CSV: column t, one kW column per load id (with
        optional '<id>:kvar' companion) and one kW column per plant id.
        Loads missing a kvar column fall back to the model's base power
        factor."""
        df = pd.read_csv(path)
        if "t" not in df.columns:
            raise ValueError(f"{path}: missing 't' column")
        load_ids = [d.id for d in model.loads]
        plant_ids = [p.id for p in model.pv_plants]
        missing = [c for c in load_ids + plant_ids if c not in df.columns]
        if missing:
            raise ValueError(f"{path}: missing profile columns for {missing}")
        load_kw = df[load_ids].to_numpy(dtype=float)
        kvar = np.empty_like(load_kw)
        for j, d in enumerate(model.loads):
            col = f"{d.id}:kvar"
            if col in df.columns:
                kvar[:, j] = df[col].to_numpy(dtype=float)
            else:
                ratio = d.kvar / d.kw if d.kw else 0.0
                kvar[:, j] = load_kw[:, j] * ratio
        pv_kw = df[plant_ids].to_numpy(dtype=float)
        return cls(df["t"].to_numpy(), load_kw, kvar, pv_kw, load_ids, plant_ids)

    def save_csv(self, path):
        from .synth import save_profiles_csv

        save_profiles_csv(
            path, self.t, self.load_kw, self.load_kvar, self.pv_kw, self.load_ids, self.plant_ids
        )

    def scenario(self, i: int) -> Scenario:
        loads = {
            lid: (float(self.load_kw[i, j]), float(self.load_kvar[i, j]))
            for j, lid in enumerate(self.load_ids)
        }
        pv = {pid: float(self.pv_kw[i, j]) for j, pid in enumerate(self.plant_ids)}
        return Scenario(int(self.t[i]), loads, pv)

    def window(self, start: int, stop: int) -> "ProfileSet":
        sl = slice(start, stop)
        return ProfileSet(
            self.t[sl],
            self.load_kw[sl],
            self.load_kvar[sl],
            self.pv_kw[sl],
            self.load_ids,
            self.plant_ids,
        )


def scenarios_from_profiles(profiles: ProfileSet, model: FeederModel, stride: int = 1):
    """Materialize scenarios every `stride` rows, with centers attached."""
    out = []
    for i in range(0, len(profiles), stride):
        sc = profiles.scenario(i)
        attach_centers(sc, model)
        out.append(sc)
    return out


def compute_centers(scenario: Scenario, model: FeederModel, method: str = "length"):
    """Injection-weighted mean electrical distance of load and of PV.

    Returns (d_l, d_pv). d_pv is None when total PV output is zero; zero
    total load is a degenerate scenario and raises ValueError.
    """
    num_l = 0.0
    tot_l = 0.0
    for d in model.loads:
        kw = scenario.loads.get(d.id, (0.0, 0.0))[0]
        dist = model.electrical_distance(NodeRef(d.bus, d.phase), method=method)
        num_l += dist * kw
        tot_l += kw
    if tot_l <= 0.0:
        raise ValueError(f"scenario at t={scenario.timestamp}: zero total load")
    d_l = num_l / tot_l

    num_p = 0.0
    tot_p = 0.0
    for p in model.pv_plants:
        kw = scenario.pv.get(p.id, 0.0)
        dist = model.bus_distance_km(p.bus) if method == "length" else (
            model.electrical_distance(NodeRef(p.bus, p.phases[0]), method=method)
        )
        num_p += dist * kw
        tot_p += kw
    d_pv = num_p / tot_p if tot_p > 0.0 else None
    return d_l, d_pv


def attach_centers(scenario: Scenario, model: FeederModel, method: str = "length") -> Scenario:
    try:
        scenario.d_l, scenario.d_pv = compute_centers(scenario, model, method)
    except ValueError:
        scenario.d_l = None
        scenario.d_pv = None
    return scenario


def partition_blocks(scenarios, rows: int = 5, cols: int = 5) -> BlockGrid:
    """Uniform grid over the observed (P_feeder, P_PVTOT) ranges. Scenarios
    on the max edge land in the last block; empty blocks are retained."""
    if not scenarios:
        raise ValueError("no scenarios to partition")
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    pf = np.array([s.p_feeder for s in scenarios])
    pp = np.array([s.p_pvtot for s in scenarios])
    f_lo, f_hi = float(pf.min()), float(pf.max())
    p_lo, p_hi = float(pp.min()), float(pp.max())

    def cell(v, lo, hi, n):
        if hi <= lo:
            return 0
        k = int((v - lo) / (hi - lo) * n)
        return min(k, n - 1)

    blocks = {(r, c): [] for r in range(rows) for c in range(cols)}
    for i, s in enumerate(scenarios):
        r = cell(s.p_pvtot, p_lo, p_hi, rows)
        c = cell(s.p_feeder, f_lo, f_hi, cols)
        blocks[(r, c)].append(i)
    return BlockGrid(rows, cols, (f_lo, f_hi), (p_lo, p_hi), blocks)


def _extrema_picks(indices, scenarios, key):
    """Min, lower-median, max scenario indices by key; ties to earliest
    timestamp. Scenarios whose key is None are excluded."""
    ranked = sorted(
        (i for i in indices if key(scenarios[i]) is not None),
        key=lambda i: (key(scenarios[i]), scenarios[i].timestamp),
    )
    if not ranked:
        return []
    k = len(ranked)
    return [ranked[0], ranked[(k - 1) // 2], ranked[-1]]


def select_representatives(grid: BlockGrid, scenarios) -> list:
    """Per non-empty block: the scenarios achieving min/median/max load
    center and min/median/max PV center, deduplicated (6 picks at most)."""
    chosen = []
    for _, indices in grid.non_empty:
        picks = _extrema_picks(indices, scenarios, lambda s: s.d_l)
        picks += _extrema_picks(indices, scenarios, lambda s: s.d_pv)
        seen = set()
        for i in picks:
            if i not in seen:
                seen.add(i)
                chosen.append(scenarios[i])
    return chosen


def select_random(grid: BlockGrid, scenarios, seed: int, per_block: int = 6) -> list:
    """Uniform draws without replacement per non-empty block (all if the
    block holds fewer); seeded and reproducible."""
    rng = np.random.default_rng(seed)
    chosen = []
    for _, indices in grid.non_empty:
        k = min(per_block, len(indices))
        picked = rng.choice(len(indices), size=k, replace=False)
        picked = sorted(indices[j] for j in picked)
        chosen.extend(scenarios[i] for i in picked)
    return chosen
