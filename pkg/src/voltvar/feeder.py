"""Static feeder model: buses, line sections, loads, PV plants, regulators.

The network is a radial graph rooted at the source bus. Branches are the
union of line sections and regulator bus pairs; regulators are ideal
per-phase ratio devices (ratio = 1 + tap * step) with no internal impedance,
so a regulator occupies its own zero-impedance branch between its primary
and secondary bus. A "node" everywhere in this package means a (bus, phase)
pair. The model is immutable after loading and safe to share across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

PHASES = "abc"
PHASE_INDEX = {"a": 0, "b": 1, "c": 2}


class FeederError(Exception):
    """Base class for feeder model problems."""


class FeederParseError(FeederError):
    """Malformed feeder file."""


class FeederValidationError(FeederError):
    """Structurally invalid feeder (non-radial, dangling references, ...)."""


@dataclass(frozen=True, order=True)
class NodeRef:
    """A single-phase node: one phase of one bus."""

    bus: str
    phase: str

    def __str__(self):
        return f"{self.bus}.{self.phase}"

    @classmethod
    def parse(cls, text: str) -> "NodeRef":
        bus, _, phase = text.rpartition(".")
        if not bus or phase not in PHASE_INDEX:
            raise FeederParseError(f"bad node reference {text!r}")
        return cls(bus, phase)


@dataclass
class Bus:
    id: str
    phases: str
    base_kv_ln: float  # line-to-neutral base, kV


@dataclass
class LineSection:
    id: str
    from_bus: str
    to_bus: str
    phases: str
    length_km: float
    z_ohm: np.ndarray  # 3x3 complex, total ohms for the section; absent phases zero

    def __eq__(self, other):
        if not isinstance(other, LineSection):
            return NotImplemented
        return (
            (self.id, self.from_bus, self.to_bus, self.phases, self.length_km)
            == (other.id, other.from_bus, other.to_bus, other.phases, other.length_km)
            and np.array_equal(self.z_ohm, other.z_ohm)
        )


@dataclass
class Load:
    id: str
    bus: str
    phase: str
    kw: float
    kvar: float


@dataclass
class PvPlant:
    id: str
    bus: str
    phases: str
    kva: float  # inverter rating S_k


@dataclass
class Regulator:
    """One per-phase tap device. Multi-phase regulators are several devices
    sharing a ``gang`` tag; ganged devices move their taps together."""

    id: str
    phase: str
    primary: str
    secondary: str
    tap_min: int = -16
    tap_max: int = 16
    step_pu: float = 0.00625
    initial_tap: int = 0
    gang: str | None = None

    @property
    def group(self) -> str:
        return self.gang if self.gang is not None else self.id

    def ratio(self, tap: int) -> float:
        return 1.0 + tap * self.step_pu


@dataclass
class Source:
    bus: str
    voltage_pu: dict  # phase -> pu magnitude


@dataclass
class _Branch:
    """Oriented edge of the radial graph (built during validation)."""

    from_bus: str
    to_bus: str
    phases: str
    line: LineSection | None  # None for a regulator branch
    regulators: dict = field(default_factory=dict)  # phase -> Regulator


class FeederModel:
    """Validated radial feeder. Construct via :func:`load_feeder` or
    :func:`from_dict`; do not mutate after construction."""

    def __init__(self, name, buses, lines, loads, pv_plants, regulators, source):
        self.name = name
        self.buses = list(buses)
        self.lines = list(lines)
        self.loads = list(loads)
        self.pv_plants = list(pv_plants)
        self.regulators = list(regulators)
        self.source = source
        self.bus_map = {b.id: b for b in self.buses}
        self._validate()
        self._build_topology()

    # ------------------------------------------------------------------ #
    # validation

    def _validate(self):
        if len(self.bus_map) != len(self.buses):
            seen = set()
            for b in self.buses:
                if b.id in seen:
                    raise FeederValidationError(f"duplicate bus id {b.id!r}")
                seen.add(b.id)
        for b in self.buses:
            if not b.phases or any(p not in PHASE_INDEX for p in b.phases):
                raise FeederValidationError(f"bus {b.id!r} has bad phases {b.phases!r}")
            if b.base_kv_ln <= 0:
                raise FeederValidationError(f"bus {b.id!r} has non-positive base kV")
        if self.source.bus not in self.bus_map:
            raise FeederValidationError(f"source bus {self.source.bus!r} not defined")
        src_bus = self.bus_map[self.source.bus]
        for p in src_bus.phases:
            if p not in self.source.voltage_pu:
                raise FeederValidationError(f"source voltage missing phase {p!r}")

        ids = {}
        for kind, elems in (("load", self.loads), ("pv plant", self.pv_plants)):
            for e in elems:
                if e.id in ids:
                    raise FeederValidationError(
                        f"{kind} {e.id!r} reuses id of {ids[e.id]} {e.id!r}"
                    )
                ids[e.id] = kind
                if e.bus not in self.bus_map:
                    raise FeederValidationError(f"{kind} {e.id!r} references absent bus {e.bus!r}")
        for ld in self.loads:
            if ld.phase not in self.bus_map[ld.bus].phases:
                raise FeederValidationError(
                    f"load {ld.id!r} on phase {ld.phase!r} absent at bus {ld.bus!r}"
                )
        for pv in self.pv_plants:
            if pv.kva <= 0:
                raise FeederValidationError(f"pv plant {pv.id!r} has non-positive kVA")
            for p in pv.phases:
                if p not in self.bus_map[pv.bus].phases:
                    raise FeederValidationError(
                        f"pv plant {pv.id!r} on phase {p!r} absent at bus {pv.bus!r}"
                    )

        seen_reg = set()
        for r in self.regulators:
            if r.id in seen_reg:
                raise FeederValidationError(f"duplicate regulator id {r.id!r}")
            seen_reg.add(r.id)
            for b in (r.primary, r.secondary):
                if b not in self.bus_map:
                    raise FeederValidationError(
                        f"regulator {r.id!r} references absent bus {b!r}"
                    )
            if r.phase not in self.bus_map[r.primary].phases or (
                r.phase not in self.bus_map[r.secondary].phases
            ):
                raise FeederValidationError(
                    f"regulator {r.id!r} phase {r.phase!r} absent at its buses"
                )
            if r.step_pu <= 0:
                raise FeederValidationError(f"regulator {r.id!r} has non-positive tap step")
            if not (r.tap_min <= 0 <= r.tap_max):
                raise FeederValidationError(f"regulator {r.id!r} tap range excludes 0")
            if not (r.tap_min <= r.initial_tap <= r.tap_max):
                raise FeederValidationError(f"regulator {r.id!r} initial tap out of range")
        for ln in self.lines:
            for b in (ln.from_bus, ln.to_bus):
                if b not in self.bus_map:
                    raise FeederValidationError(f"line {ln.id!r} references absent bus {b!r}")
            for p in ln.phases:
                if p not in self.bus_map[ln.from_bus].phases or (
                    p not in self.bus_map[ln.to_bus].phases
                ):
                    raise FeederValidationError(
                        f"line {ln.id!r} phase {p!r} absent at a terminal bus"
                    )
            if self.bus_map[ln.from_bus].base_kv_ln != self.bus_map[ln.to_bus].base_kv_ln:
                raise FeederValidationError(f"line {ln.id!r} spans different base kV")
            if ln.z_ohm.shape != (3, 3):
                raise FeederValidationError(f"line {ln.id!r} impedance is not 3x3")
            if ln.length_km < 0:
                raise FeederValidationError(f"line {ln.id!r} has negative length")

        # gang consistency: shared pair, identical tap parameters, distinct phases
        gangs = {}
        for r in self.regulators:
            if r.gang is not None:
                gangs.setdefault(r.gang, []).append(r)
        for tag, devs in gangs.items():
            pairs = {(d.primary, d.secondary) for d in devs}
            if len(pairs) > 1:
                raise FeederValidationError(f"gang {tag!r} spans multiple bus pairs")
            params = {(d.tap_min, d.tap_max, d.step_pu, d.initial_tap) for d in devs}
            if len(params) > 1:
                raise FeederValidationError(f"gang {tag!r} has inconsistent tap parameters")
            ph = [d.phase for d in devs]
            if len(set(ph)) != len(ph):
                raise FeederValidationError(f"gang {tag!r} repeats a phase")

    def _build_topology(self):
        # merge lines and regulator pairs into branches, one per bus pair
        by_pair = {}
        for ln in self.lines:
            key = frozenset((ln.from_bus, ln.to_bus))
            if key in by_pair:
                raise FeederValidationError(
                    f"line {ln.id!r} duplicates branch between {ln.from_bus!r} and {ln.to_bus!r}"
                )
            by_pair[key] = _Branch(ln.from_bus, ln.to_bus, ln.phases, ln)
        for r in self.regulators:
            key = frozenset((r.primary, r.secondary))
            br = by_pair.get(key)
            if br is not None and br.line is not None:
                raise FeederValidationError(
                    f"regulator {r.id!r} parallels line {br.line.id!r} (non-radial)"
                )
            if br is None:
                br = _Branch(r.primary, r.secondary, "", None)
                by_pair[key] = br
            if r.phase in br.regulators:
                raise FeederValidationError(
                    f"regulator {r.id!r} repeats phase {r.phase!r} on its branch"
                )
            br.regulators[r.phase] = r
            if r.phase not in br.phases:
                br.phases = "".join(p for p in PHASES if p in br.phases + r.phase)
        for br in by_pair.values():
            if br.line is None and br.regulators:
                # regulator branch orientation fixed by primary -> secondary
                any_reg = next(iter(br.regulators.values()))
                br.from_bus, br.to_bus = any_reg.primary, any_reg.secondary

        # BFS from the source; orient branches and detect loops / disconnection
        adj = {b.id: [] for b in self.buses}
        for br in by_pair.values():
            adj[br.from_bus].append(br)
            adj[br.to_bus].append(br)
        parent = {self.source.bus: None}
        order = [self.source.bus]
        branches = []
        queue = [self.source.bus]
        while queue:
            bus = queue.pop(0)
            for br in adj[bus]:
                other = br.to_bus if br.from_bus == bus else br.from_bus
                if other == parent[bus]:
                    continue
                if other in parent:
                    name = br.line.id if br.line else next(iter(br.regulators.values())).id
                    raise FeederValidationError(
                        f"non-radial: branch {name!r} closes a loop at bus {other!r}"
                    )
                if br.from_bus != bus:
                    if br.regulators:
                        raise FeederValidationError(
                            f"regulator branch into {br.to_bus!r} oriented against the feeder"
                        )
                    br.from_bus, br.to_bus = bus, other
                parent[other] = bus
                order.append(other)
                branches.append(br)
                queue.append(other)
        missing = [b.id for b in self.buses if b.id not in parent]
        if missing:
            raise FeederValidationError(f"buses not connected to the source: {missing}")

        # phase continuity: a bus can only carry phases its feeding branch carries
        for br in branches:
            down = self.bus_map[br.to_bus]
            for p in down.phases:
                if p not in br.phases:
                    raise FeederValidationError(
                        f"bus {down.id!r} carries phase {p!r} its feeding branch lacks"
                    )

        self._parent = parent
        self._bus_order = order  # source first, topological
        self._branches = branches  # oriented, topological order
        self._branch_into = {br.to_bus: br for br in branches}

        # canonical node list: buses in file order, phases in a,b,c order
        self._nodes = [
            NodeRef(b.id, p) for b in self.buses for p in PHASES if p in b.phases
        ]
        self._node_index = {n: i for i, n in enumerate(self._nodes)}

        # per-bus path metrics
        self._dist_km = {self.source.bus: 0.0}
        self._dist_ohm = {self.source.bus: np.zeros(3)}
        for br in branches:
            up_km = self._dist_km[br.from_bus]
            up_ohm = self._dist_ohm[br.from_bus]
            if br.line is not None:
                zd = np.abs(np.diagonal(br.line.z_ohm))
                self._dist_km[br.to_bus] = up_km + br.line.length_km
                self._dist_ohm[br.to_bus] = up_ohm + zd
            else:
                self._dist_km[br.to_bus] = up_km
                self._dist_ohm[br.to_bus] = up_ohm.copy()

        # per-node upstream regulator device (phase-matched)
        self._upstream = {}
        for node in self._nodes:
            reg = None
            bus = node.bus
            while bus is not None:
                br = self._branch_into.get(bus)
                if br is not None and node.phase in br.regulators:
                    reg = br.regulators[node.phase].id
                    break
                bus = self._parent[bus]
            self._upstream[node] = reg

        groups = {}
        for r in self.regulators:
            groups.setdefault(r.group, []).append(r)
        self._groups = groups

    # ------------------------------------------------------------------ #
    # queries

    @property
    def nodes(self) -> list:
        """All (bus, phase) nodes, canonical order."""
        return self._nodes

    def node_index(self, node: NodeRef) -> int:
        try:
            return self._node_index[node]
        except KeyError:
            raise FeederValidationError(f"unknown node {node}") from None

    @property
    def branches(self):
        """Oriented branches in topological (source-out) order."""
        return self._branches

    def parent_bus(self, bus: str):
        return self._parent[bus]

    def electrical_distance(self, node: NodeRef, method: str = "length") -> float:
        """Distance of a node from the feeder head.

        method="length": sum of section lengths on the path, km.
        method="impedance": sum of |z_self| on the node's phase, ohms.
        """
        self.node_index(node)
        if method == "length":
            return self._dist_km[node.bus]
        if method == "impedance":
            return float(self._dist_ohm[node.bus][PHASE_INDEX[node.phase]])
        raise ValueError(f"unknown distance method {method!r}")

    def bus_distance_km(self, bus: str) -> float:
        try:
            return self._dist_km[bus]
        except KeyError:
            raise FeederValidationError(f"unknown bus {bus!r}") from None

    def upstream_regulator(self, node: NodeRef):
        """Id of the last regulator device on the node's phase along the
        source-to-node path (its secondary bus is on the path), or None."""
        self.node_index(node)
        return self._upstream[node]

    def control_groups(self) -> dict:
        """Tap control groups: group id -> list of member Regulator devices.
        Ganged devices form one group and share a tap position."""
        return {g: list(devs) for g, devs in self._groups.items()}

    def regulator(self, reg_id: str) -> Regulator:
        for r in self.regulators:
            if r.id == reg_id:
                return r
        raise FeederValidationError(f"unknown regulator {reg_id!r}")

    def plant(self, plant_id: str) -> PvPlant:
        for pv in self.pv_plants:
            if pv.id == plant_id:
                return pv
        raise FeederValidationError(f"unknown pv plant {plant_id!r}")

    def secondary_node(self, reg_id: str) -> NodeRef:
        r = self.regulator(reg_id)
        return NodeRef(r.secondary, r.phase)

    def __eq__(self, other):
        if not isinstance(other, FeederModel):
            return NotImplemented
        return (
            self.name == other.name
            and self.buses == other.buses
            and self.lines == other.lines
            and self.loads == other.loads
            and self.pv_plants == other.pv_plants
            and self.regulators == other.regulators
            and self.source == other.source
        )


# ---------------------------------------------------------------------- #
# file I/O


def _z_from_json(entry, where):
    try:
        z = np.array(
            [[complex(cell[0], cell[1]) for cell in row] for row in entry],
            dtype=complex,
        )
    except (TypeError, IndexError, ValueError) as exc:
        raise FeederParseError(f"bad impedance matrix for {where}: {exc}") from None
    if z.shape != (3, 3):
        raise FeederParseError(f"impedance matrix for {where} is not 3x3")
    return z


def _z_to_json(z):
    return [[[cell.real, cell.imag] for cell in row] for row in z]


def from_dict(doc: dict, name: str = "feeder") -> FeederModel:
    """Build and validate a FeederModel from a parsed feeder document."""
    try:
        buses = [
            Bus(b["id"], b["phases"], float(b["base_kv_ln"])) for b in doc["buses"]
        ]
        lines = [
            LineSection(
                ln["id"],
                ln["from"],
                ln["to"],
                ln["phases"],
                float(ln.get("length_km", 0.0)),
                _z_from_json(ln["z_ohm"], f"line {ln.get('id')!r}"),
            )
            for ln in doc.get("lines", [])
        ]
        loads = [
            Load(d["id"], d["bus"], d["phase"], float(d["kw"]), float(d["kvar"]))
            for d in doc.get("loads", [])
        ]
        plants = [
            PvPlant(p["id"], p["bus"], p["phases"], float(p["kva"]))
            for p in doc.get("pv_plants", [])
        ]
        regs = [
            Regulator(
                r["id"],
                r["phase"],
                r["primary"],
                r["secondary"],
                int(r.get("tap_min", -16)),
                int(r.get("tap_max", 16)),
                float(r.get("step_pu", 0.00625)),
                int(r.get("initial_tap", 0)),
                r.get("gang"),
            )
            for r in doc.get("regulators", [])
        ]
        src = doc["source"]
        source = Source(src["bus"], {p: float(v) for p, v in src["voltage_pu"].items()})
    except KeyError as exc:
        raise FeederParseError(f"missing required field {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, FeederParseError):
            raise
        raise FeederParseError(str(exc)) from None
    return FeederModel(doc.get("name", name), buses, lines, loads, plants, regs, source)


def to_dict(model: FeederModel) -> dict:
    return {
        "name": model.name,
        "source": {"bus": model.source.bus, "voltage_pu": dict(model.source.voltage_pu)},
        "buses": [
            {"id": b.id, "phases": b.phases, "base_kv_ln": b.base_kv_ln}
            for b in model.buses
        ],
        "lines": [
            {
                "id": ln.id,
                "from": ln.from_bus,
                "to": ln.to_bus,
                "phases": ln.phases,
                "length_km": ln.length_km,
                "z_ohm": _z_to_json(ln.z_ohm),
            }
            for ln in model.lines
        ],
        "loads": [
            {"id": d.id, "bus": d.bus, "phase": d.phase, "kw": d.kw, "kvar": d.kvar}
            for d in model.loads
        ],
        "pv_plants": [
            {"id": p.id, "bus": p.bus, "phases": p.phases, "kva": p.kva}
            for p in model.pv_plants
        ],
        "regulators": [
            {
                "id": r.id,
                "phase": r.phase,
                "primary": r.primary,
                "secondary": r.secondary,
                "tap_min": r.tap_min,
                "tap_max": r.tap_max,
                "step_pu": r.step_pu,
                "initial_tap": r.initial_tap,
                **({"gang": r.gang} if r.gang is not None else {}),
            }
            for r in model.regulators
        ],
    }


def load_feeder(path) -> FeederModel:
    """Load and validate a feeder model file (JSON, schema in the README)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise FeederParseError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise FeederParseError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FeederParseError(f"{path}: top level must be an object")
    return from_dict(doc, name=str(path))


def save_feeder(model: FeederModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(model), fh, indent=1)
        fh.write("\n")
