"""Unbalanced radial power flow by backward/forward sweep.

Ground truth for training-data generation and for playing "reality" in the
time-series harness. Loads are constant-PQ, PV plants are negative PQ
injections split equally over their phases, and regulators are ideal
per-phase ratio branches. The solver works in volts internally; the per-unit
power base is 1 MVA system wide and voltage bases are per bus.

Every solve starts flat (zero-current forward sweep) so that voltage
differences between consecutive solves are reproducible, which the training
sweeps rely on.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np

from .feeder import PHASES, PHASE_INDEX, FeederModel, NodeRef

S_BASE_VA = 1.0e6  # system power base, 1 MVA

# phase reference angles: a at 0, b at -120, c at +120 degrees
_PHASE_ROT = np.array([1.0, cmath.exp(-2j * math.pi / 3), cmath.exp(2j * math.pi / 3)])


class PowerFlowError(Exception):
    pass


class InvalidStateError(PowerFlowError):
    """Injection state violates device limits."""


class ConvergenceError(PowerFlowError):
    def __init__(self, iterations, mismatch_pu, worst_node):
        self.iterations = iterations
        self.mismatch_pu = mismatch_pu
        self.worst_node = worst_node
        super().__init__(
            f"no convergence after {iterations} iterations; "
            f"worst mismatch {mismatch_pu:.3e} pu at node {worst_node}"
        )


@dataclass
class InjectionState:
    """One operating point to solve: absolute loads, PV injections, taps.

    loads: load id -> (kw, kvar); unlisted loads keep their model base values.
    pv: plant id -> (p_kw, q_kvar); unlisted plants are at zero output.
    taps: regulator device id -> tap; unlisted devices keep their initial tap.
    """

    loads: dict = field(default_factory=dict)
    pv: dict = field(default_factory=dict)
    taps: dict = field(default_factory=dict)

    def with_taps(self, taps: dict) -> "InjectionState":
        return InjectionState(dict(self.loads), dict(self.pv), dict(taps))

    def with_pv(self, pv: dict) -> "InjectionState":
        return InjectionState(dict(self.loads), dict(pv), dict(self.taps))


@dataclass
class VoltageSolution:
    nodes: list  # NodeRef, canonical model order
    v_volts: np.ndarray  # complex, per node
    v_pu: np.ndarray  # magnitude, per node
    head_pq_kw: dict  # phase -> (p_kw, q_kvar) injected at the feeder head
    pv_pq_kw: dict  # plant id -> (p_kw, q_kvar) as applied
    loss_kw: dict  # phase -> (p_kw, q_kvar) total series losses
    taps: dict  # regulator device id -> tap used
    iterations: int = 0
    max_mismatch_pu: float = 0.0
    _index: dict = field(default_factory=dict, repr=False)

    def node_v_pu(self, node: NodeRef) -> float:
        return float(self.v_pu[self._index[node]])

    def node_v(self, node: NodeRef) -> complex:
        return complex(self.v_volts[self._index[node]])


def _build_cache(model: FeederModel):
    bus_idx = {b.id: i for i, b in enumerate(model.buses)}
    n_bus = len(model.buses)

    branches = []
    for br in model.branches:
        mask = np.zeros(3, dtype=bool)
        for p in br.phases:
            mask[PHASE_INDEX[p]] = True
        entry = {
            "from": bus_idx[br.from_bus],
            "to": bus_idx[br.to_bus],
            "mask": mask,
            "z": br.line.z_ohm.copy() if br.line is not None else None,
            "regs": {PHASE_INDEX[p]: r for p, r in br.regulators.items()},
        }
        branches.append(entry)

    node_bus = np.array([bus_idx[n.bus] for n in model.nodes])
    node_ph = np.array([PHASE_INDEX[n.phase] for n in model.nodes])

    src = bus_idx[model.source.bus]
    v_src = np.zeros(3, dtype=complex)
    src_bus = model.bus_map[model.source.bus]
    for p in src_bus.phases:
        i = PHASE_INDEX[p]
        v_src[i] = model.source.voltage_pu[p] * src_bus.base_kv_ln * 1e3 * _PHASE_ROT[i]

    v_base = np.array([model.bus_map[n.bus].base_kv_ln * 1e3 for n in model.nodes])

    loads = [(bus_idx[d.bus], PHASE_INDEX[d.phase], d) for d in model.loads]
    plants = [
        (pv, bus_idx[pv.bus], [PHASE_INDEX[p] for p in pv.phases])
        for pv in model.pv_plants
    ]
    return {
        "bus_idx": bus_idx,
        "n_bus": n_bus,
        "branches": branches,
        "node_bus": node_bus,
        "node_ph": node_ph,
        "src": src,
        "v_src": v_src,
        "v_base": v_base,
        "loads": loads,
        "plants": plants,
        "index": {n: i for i, n in enumerate(model.nodes)},
    }


def _cache(model: FeederModel):
    cache = getattr(model, "_pf_cache", None)
    if cache is None:
        cache = _build_cache(model)
        model._pf_cache = cache
    return cache


def _device_taps(model: FeederModel, state: InjectionState) -> dict:
    taps = {r.id: r.initial_tap for r in model.regulators}
    for rid, tap in state.taps.items():
        model.regulator(rid)  # raises on unknown id
        taps[rid] = int(tap)
    for r in model.regulators:
        if not (r.tap_min <= taps[r.id] <= r.tap_max):
            raise InvalidStateError(f"tap {taps[r.id]} out of range for regulator {r.id!r}")
    for gid, devs in model.control_groups().items():
        vals = {taps[d.id] for d in devs}
        if len(vals) > 1:
            raise InvalidStateError(f"ganged regulators {gid!r} have unequal taps {vals}")
    return taps


def _check_pv(model: FeederModel, state: InjectionState):
    for pid, (p_kw, q_kvar) in state.pv.items():
        plant = model.plant(pid)
        if p_kw < -1e-9 or p_kw > plant.kva * (1 + 1e-9):
            raise InvalidStateError(f"pv plant {pid!r} active power {p_kw} exceeds rating")
        q_cap = math.sqrt(max(plant.kva**2 - p_kw**2, 0.0))
        if abs(q_kvar) > q_cap + 1e-6:
            raise InvalidStateError(
                f"pv plant {pid!r} reactive power {q_kvar} exceeds excess capacity {q_cap:.3f}"
            )


def solve(
    model: FeederModel,
    state: InjectionState | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> VoltageSolution:
    """Solve one operating point. tol is the per-node power mismatch in pu
    (1 MVA base). Raises ConvergenceError with the worst-mismatch node if the
    sweep does not settle within max_iter iterations."""
    if state is None:
        state = InjectionState()
    cache = _cache(model)
    taps = _device_taps(model, state)
    _check_pv(model, state)

    # net specified injection-as-load per (bus, phase), VA
    s_spec = np.zeros((cache["n_bus"], 3), dtype=complex)
    for bus_i, ph_i, load in cache["loads"]:
        kw, kvar = state.loads.get(load.id, (load.kw, load.kvar))
        s_spec[bus_i, ph_i] += complex(kw, kvar) * 1e3
    pv_applied = {}
    for plant, bus_i, ph_idxs in cache["plants"]:
        p_kw, q_kvar = state.pv.get(plant.id, (0.0, 0.0))
        pv_applied[plant.id] = (p_kw, q_kvar)
        share = complex(p_kw, q_kvar) * 1e3 / len(ph_idxs)
        for ph_i in ph_idxs:
            s_spec[bus_i, ph_i] -= share

    branches = cache["branches"]
    ratios = []
    for br in branches:
        if br["regs"]:
            r_vec = np.ones(3)
            for ph_i, reg in br["regs"].items():
                r_vec[ph_i] = reg.ratio(taps[reg.id])
            ratios.append(r_vec)
        else:
            ratios.append(None)

    # flat start: forward sweep with zero current
    v = np.zeros((cache["n_bus"], 3), dtype=complex)
    v[cache["src"]] = cache["v_src"]
    for br, r_vec in zip(branches, ratios):
        if r_vec is None:
            v[br["to"]] = v[br["from"]] * br["mask"]
        else:
            v[br["to"]] = v[br["from"]] * r_vec * br["mask"]

    live = np.abs(v) > 0.0  # nodes that exist (phase present and energized)
    i_node = np.zeros_like(v)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        # backward: node currents from constant-PQ, then accumulate to source
        np.divide(np.conj(s_spec), np.conj(v), out=i_node, where=live)
        i_node[~live] = 0.0
        i_acc = i_node.copy()
        for br, r_vec in zip(reversed(branches), reversed(ratios)):
            if r_vec is None:
                i_acc[br["from"]] += i_acc[br["to"]]
            else:
                i_acc[br["from"]] += i_acc[br["to"]] * r_vec

        # forward: push voltages out from the source
        i_branch = []
        for br, r_vec in zip(branches, ratios):
            ib = i_acc[br["to"]]
            if r_vec is None:
                v[br["to"]] = (v[br["from"]] - br["z"] @ ib) * br["mask"]
            else:
                v[br["to"]] = v[br["from"]] * r_vec * br["mask"]
            i_branch.append(ib)

        mism = np.abs(s_spec - v * np.conj(i_node)) / S_BASE_VA
        mism[~live] = 0.0
        worst = float(mism.max())
        if worst <= tol:
            converged = True
            break

    if not converged:
        flat = int(np.argmax(mism))
        bus_i, ph_i = divmod(flat, 3)
        worst_node = NodeRef(model.buses[bus_i].id, PHASES[ph_i])
        raise ConvergenceError(max_iter, worst, worst_node)

    # head injection and per-phase series losses
    head = v[cache["src"]] * np.conj(i_acc[cache["src"]])
    head_pq = {}
    for p, i in PHASE_INDEX.items():
        if p in model.bus_map[model.source.bus].phases:
            head_pq[p] = (head[i].real / 1e3, head[i].imag / 1e3)
    loss = np.zeros(3, dtype=complex)
    for br, r_vec, ib in zip(branches, ratios, i_branch):
        if r_vec is None:
            loss += (v[br["from"]] - v[br["to"]]) * np.conj(ib) * br["mask"]
        # ideal ratio branches are lossless: V1*conj(r*I2) == (r*V1)*conj(I2)
    loss_pq = {p: (loss[i].real / 1e3, loss[i].imag / 1e3) for p, i in PHASE_INDEX.items()}

    node_v = v[cache["node_bus"], cache["node_ph"]]
    v_pu = np.abs(node_v) / cache["v_base"]
    return VoltageSolution(
        nodes=model.nodes,
        v_volts=node_v,
        v_pu=v_pu,
        head_pq_kw=head_pq,
        pv_pq_kw=pv_applied,
        loss_kw=loss_pq,
        taps=taps,
        iterations=it,
        max_mismatch_pu=worst,
        _index=cache["index"],
    )


def head_channels(model: FeederModel) -> list:
    """Measurement channel names for the feeder head, in canonical order."""
    src_phases = model.bus_map[model.source.bus].phases
    out = []
    for p in PHASES:
        if p in src_phases:
            out += [f"head_p_{p}", f"head_q_{p}"]
    return out


def measurement_channels(model: FeederModel) -> list:
    """All measurement channels M: per-phase feeder-head P,Q then per-plant P,Q."""
    out = head_channels(model)
    for pv in model.pv_plants:
        out += [f"{pv.id}_p", f"{pv.id}_q"]
    return out


def measurement_vector(model: FeederModel, sol: VoltageSolution) -> np.ndarray:
    """Extract the measurement vector (kW/kvar) from a solved case."""
    vals = []
    src_phases = model.bus_map[model.source.bus].phases
    for p in PHASES:
        if p in src_phases:
            vals += list(sol.head_pq_kw[p])
    for pv in model.pv_plants:
        vals += list(sol.pv_pq_kw.get(pv.id, (0.0, 0.0)))
    return np.array(vals)


def head_q_total_kvar(sol: VoltageSolution) -> float:
    """Total feeder-head reactive power (sum of phases), kvar."""
    return float(sum(q for _, q in sol.head_pq_kw.values()))


def dump_solution_csv(sol: VoltageSolution, path) -> None:
    """Debug dump: node, phase, |V| pu, angle deg."""
    with open(path, "w") as fh:
        fh.write("bus,phase,v_pu,angle_deg\n")
        for n, vc, vm in zip(sol.nodes, sol.v_volts, sol.v_pu):
            ang = math.degrees(cmath.phase(vc))
            fh.write(f"{n.bus},{n.phase},{vm!r},{ang!r}\n")
