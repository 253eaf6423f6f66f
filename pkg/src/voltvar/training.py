"""Training-data generation: per-scenario PV reactive-power sweeps plus
one-shot regulator tap perturbations, and critical-node selection.

The sweep solves one plant at a time at reactive levels spaced over
(-100%, -80%, ..., +100%) of the plant's kVA rating, keeping only levels
inside the plant's excess capacity sqrt(S^2 - P^2) for that scenario's
active output. All sweep rows share the baseline tap vector; tap
sensitivities come from separate +1-tap solves on the first scenario only
and are stored as per-node columns, not as sweep rows.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import math

import numpy as np
import pandas as pd

from .feeder import FeederModel, NodeRef
from .powerflow import (
    ConvergenceError,
    InjectionState,
    measurement_channels,
    measurement_vector,
    solve,
)

DEFAULT_Q_LEVELS_PCT = tuple(range(-100, 101, 20))

DATASET_SCHEMA_VERSION = 1


class TrainingError(Exception):
    pass


@dataclass
class TrainingRow:
    scenario_id: int
    plant: str
    q_cmd_kvar: float
    measurements: np.ndarray  # per channel, kW/kvar
    v_pu: np.ndarray  # per node, canonical model order


@dataclass
class TapPerturbation:
    group: str
    tap_delta: int  # +1 normally; -1 if the group started at its top tap
    v_base: np.ndarray
    v_perturbed: np.ndarray

    @property
    def delta_v(self) -> np.ndarray:
        """Voltage change per single up-tap at every node."""
        return (self.v_perturbed - self.v_base) / self.tap_delta


@dataclass
class TrainingDataset:
    feeder_name: str
    channels: list
    nodes: list  # NodeRef, canonical order
    rows: list  # TrainingRow
    t0: dict  # regulator device id -> baseline tap
    q_levels_pct: tuple
    scenario_ids: list
    tap_perturbations: dict = field(default_factory=dict)  # group -> TapPerturbation

    def measurement_matrix(self) -> np.ndarray:
        return np.array([r.measurements for r in self.rows])

    def voltage_matrix(self) -> np.ndarray:
        return np.array([r.v_pu for r in self.rows])

    def head_q_total(self) -> np.ndarray:
        """Feeder-head reactive power (sum of phases) per row, kvar."""
        q_cols = [i for i, c in enumerate(self.channels) if c.startswith("head_q_")]
        m = self.measurement_matrix()
        return m[:, q_cols].sum(axis=1)

    # ------------------------------------------------------------------ #

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        node_names = [str(n) for n in self.nodes]
        data = {
            "scenario_id": [r.scenario_id for r in self.rows],
            "plant": [r.plant for r in self.rows],
            "q_cmd_kvar": [r.q_cmd_kvar for r in self.rows],
        }
        m = self.measurement_matrix()
        for j, ch in enumerate(self.channels):
            data[ch] = m[:, j]
        v = self.voltage_matrix()
        for j, name in enumerate(node_names):
            data[f"v_{name}"] = v[:, j]
        pd.DataFrame(data).to_csv(os.path.join(out_dir, "rows.csv"), index=False)

        taps = []
        for group, tp in self.tap_perturbations.items():
            for j, name in enumerate(node_names):
                taps.append(
                    {
                        "group": group,
                        "node": name,
                        "tap_delta": tp.tap_delta,
                        "v_base": tp.v_base[j],
                        "v_perturbed": tp.v_perturbed[j],
                    }
                )
        pd.DataFrame(taps).to_csv(os.path.join(out_dir, "tap_perturbations.csv"), index=False)

        manifest = {
            "schema_version": DATASET_SCHEMA_VERSION,
            "feeder_name": self.feeder_name,
            "channels": self.channels,
            "nodes": node_names,
            "t0": self.t0,
            "q_levels_pct": list(self.q_levels_pct),
            "scenario_ids": self.scenario_ids,
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1)

    @classmethod
    def load(cls, out_dir) -> "TrainingDataset":
        with open(os.path.join(out_dir, "manifest.json")) as fh:
            manifest = json.load(fh)
        if manifest.get("schema_version") != DATASET_SCHEMA_VERSION:
            raise TrainingError(f"unsupported dataset schema in {out_dir}")
        nodes = [NodeRef.parse(s) for s in manifest["nodes"]]
        channels = manifest["channels"]
        df = pd.read_csv(os.path.join(out_dir, "rows.csv"))
        m = df[channels].to_numpy()
        v = df[[f"v_{s}" for s in manifest["nodes"]]].to_numpy()
        rows = [
            TrainingRow(int(df["scenario_id"][i]), df["plant"][i], float(df["q_cmd_kvar"][i]), m[i], v[i])
            for i in range(len(df))
        ]
        taps = {}
        tp = pd.read_csv(os.path.join(out_dir, "tap_perturbations.csv"))
        if len(tp):
            order = {s: j for j, s in enumerate(manifest["nodes"])}
            for group, sub in tp.groupby("group", sort=True):
                sub = sub.iloc[np.argsort([order[s] for s in sub["node"]])]
                taps[group] = TapPerturbation(
                    group,
                    int(sub["tap_delta"].iloc[0]),
                    sub["v_base"].to_numpy(),
                    sub["v_perturbed"].to_numpy(),
                )
        return cls(
            manifest["feeder_name"],
            channels,
            nodes,
            rows,
            {k: int(t) for k, t in manifest["t0"].items()},
            tuple(manifest["q_levels_pct"]),
            manifest["scenario_ids"],
            taps,
        )


def _scenario_state(model: FeederModel, sc, pv_q=None, taps=None) -> InjectionState:
    pv_q = pv_q or {}
    pv = {p.id: (sc.pv.get(p.id, 0.0), pv_q.get(p.id, 0.0)) for p in model.pv_plants}
    return InjectionState(loads=dict(sc.loads), pv=pv, taps=dict(taps or {}))


def feasible_q_levels(plant_kva: float, p_kw: float, q_levels_pct) -> list:
    """Commanded kvar values inside the plant's excess capacity."""
    cap = math.sqrt(max(plant_kva**2 - p_kw**2, 0.0))
    out = []
    for pct in q_levels_pct:
        q = pct / 100.0 * plant_kva
        if abs(q) <= cap + 1e-9:
            out.append(q)
    return out


def generate_training_data(
    model: FeederModel,
    scenarios,
    q_levels_pct=DEFAULT_Q_LEVELS_PCT,
    tol: float = 1e-8,
) -> TrainingDataset:
    """Run the training sweep over the given representative scenarios.

    Tap perturbations are solved on the first scenario only (one +1 tap per
    control group, then reverted); every remaining solve perturbs a single
    plant's reactive power with all other plants at zero kvar and taps at
    their baseline.
    """
    if not scenarios:
        raise TrainingError("no scenarios to sweep")
    channels = measurement_channels(model)
    t0 = {r.id: r.initial_tap for r in model.regulators}
    groups = model.control_groups()

    tap_perturbations = {}
    sc0 = scenarios[0]
    try:
        base = solve(model, _scenario_state(model, sc0, taps=t0), tol=tol)
    except ConvergenceError as exc:
        raise TrainingError(f"baseline solve failed on scenario {sc0.timestamp}: {exc}")
    for gid in sorted(groups):
        devs = groups[gid]
        delta = 1 if all(t0[d.id] + 1 <= d.tap_max for d in devs) else -1
        taps = dict(t0)
        for d in devs:
            taps[d.id] = t0[d.id] + delta
        try:
            pert = solve(model, _scenario_state(model, sc0, taps=taps), tol=tol)
        except ConvergenceError as exc:
            raise TrainingError(f"tap perturbation failed for group {gid}: {exc}")
        tap_perturbations[gid] = TapPerturbation(gid, delta, base.v_pu.copy(), pert.v_pu.copy())

    rows = []
    for sc in scenarios:
        for plant in model.pv_plants:
            p_kw = sc.pv.get(plant.id, 0.0)
            for q in feasible_q_levels(plant.kva, p_kw, q_levels_pct):
                state = _scenario_state(model, sc, pv_q={plant.id: q}, taps=t0)
                try:
                    sol = solve(model, state, tol=tol)
                except ConvergenceError as exc:
                    raise TrainingError(
                        f"sweep solve failed at scenario {sc.timestamp}, "
                        f"plant {plant.id}, Q={q:.1f} kvar: {exc}"
                    )
                rows.append(
                    TrainingRow(
                        sc.timestamp,
                        plant.id,
                        q,
                        measurement_vector(model, sol),
                        sol.v_pu.copy(),
                    )
                )
    return TrainingDataset(
        model.name,
        channels,
        model.nodes,
        rows,
        t0,
        tuple(q_levels_pct),
        [sc.timestamp for sc in scenarios],
        tap_perturbations,
    )


@dataclass
class CriticalNodeSet:
    entries: list  # (NodeRef, provenance)

    @property
    def nodes(self) -> list:
        return [n for n, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    def __contains__(self, node):
        return any(n == node for n, _ in self.entries)


def select_critical_nodes(dataset: TrainingDataset, model: FeederModel) -> CriticalNodeSet:
    """Structural nodes (feeder head, regulator terminals, PV buses) plus,
    for every training solve, the nodes with the extreme voltages."""
    if not dataset.rows:
        raise TrainingError("empty training dataset")
    entries = []
    seen = set()

    def add(node, provenance):
        if node not in seen:
            seen.add(node)
            entries.append((node, provenance))

    src = model.bus_map[model.source.bus]
    for p in src.phases:
        add(NodeRef(src.id, p), "feeder-head")
    for r in model.regulators:
        add(NodeRef(r.primary, r.phase), "regulator-primary")
        add(NodeRef(r.secondary, r.phase), "regulator-secondary")
    for pv in model.pv_plants:
        for p in pv.phases:
            add(NodeRef(pv.bus, p), "pv-plant")

    nodes = dataset.nodes
    vectors = [r.v_pu for r in dataset.rows]
    for tp in dataset.tap_perturbations.values():
        vectors.append(tp.v_base)
        vectors.append(tp.v_perturbed)
    for v in vectors:
        add(nodes[int(np.argmax(v))], "observed-extreme")
        add(nodes[int(np.argmin(v))], "observed-extreme")
    return CriticalNodeSet(entries)
