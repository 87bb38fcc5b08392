"""Domain types for multi-phase distribution networks and solver state.

Networks are immutable once built. Admittance matrices are stored as nested
tuples of complex numbers (row-major over the element's phase subset) so that
two networks compare equal field by field.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

PHASES = ("A", "B", "C")
PHASE_SHIFT_DEG = {"A": 0.0, "B": -120.0, "C": 120.0}

Matrix = tuple  # tuple[tuple[complex, ...], ...]
NodePhase = tuple  # (bus_id, phase)


class Phase(str, Enum):
    A = "A"
    B = "B"
    C = "C"


class BusKind(str, Enum):
    PQ = "PQ"
    SWING = "SWING"


class Connection(str, Enum):
    WYE_WYE = "wye-g/wye-g"
    DELTA_WYE = "delta/wye-g"


class Formulation(str, Enum):
    I = "I"
    PQ = "PQ"
    GB = "GB"


# names of the two slack components per node-phase
SLACK_COMPONENTS = {
    Formulation.I: ("i_r", "i_i"),
    Formulation.PQ: ("p", "q"),
    Formulation.GB: ("g", "b"),
}


class ValidationError(ValueError):
    def __init__(self, diagnostics: Sequence[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


def canonical_phases(phases: str) -> str:
    """Return phases in A, B, C order, rejecting unknown or repeated labels."""
    phases = phases.upper()
    bad = [p for p in phases if p not in PHASES]
    if bad or len(set(phases)) != len(phases) or not phases:
        raise ValueError(f"invalid phase set {phases!r}")
    return "".join(p for p in PHASES if p in phases)


def as_matrix(values, size: int | None = None) -> Matrix:
    """Coerce an array-like (nested or flat row-major) into a complex tuple matrix."""
    arr = np.asarray(values, dtype=complex)
    if arr.ndim == 1:
        k = int(round(math.sqrt(arr.size)))
        if k * k != arr.size:
            raise ValueError(f"flat matrix of length {arr.size} is not square")
        arr = arr.reshape(k, k)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError("admittance matrix must be square")
    if size is not None and arr.shape[0] != size:
        raise ValueError(f"expected a {size}x{size} matrix, got {arr.shape}")
    return tuple(tuple(complex(v) for v in row) for row in arr)


def matrix_array(m: Matrix) -> np.ndarray:
    return np.array(m, dtype=complex)


@dataclass(frozen=True)
class Bus:
    id: str
    phases: str = "ABC"
    nominal_voltage: float = 1.0  # line-to-neutral
    kind: BusKind = BusKind.PQ
    v_base: Optional[float] = None  # volts; set by per-unit conversion, or to override the level table


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    phases: str
    series_admittance: Matrix
    shunt_admittance: Optional[Matrix] = None  # applied at each terminal
    id: str = ""


@dataclass(frozen=True)
class Transformer:
    from_bus: str
    to_bus: str
    connection: Connection = Connection.WYE_WYE
    turns_ratio: float = 1.0
    series_impedance: complex = 0.01j  # referred to the to side
    phases: str = "ABC"
    id: str = ""


@dataclass(frozen=True)
class Load:
    bus: str
    phase: str
    p: float
    q: float = 0.0


@dataclass(frozen=True)
class Capacitor:
    bus: str
    phase: str
    b: float


@dataclass(frozen=True)
class Source:
    bus: str
    voltage: float = 1.0
    angle_deg: float = 0.0

    def phasor(self, phase: str) -> complex:
        ang = math.radians(self.angle_deg + PHASE_SHIFT_DEG[phase])
        return self.voltage * complex(math.cos(ang), math.sin(ang))


@dataclass(frozen=True)
class TpiaDefaults:
    vmin: Optional[float] = None
    vmax: Optional[float] = None
    enabled: Optional[tuple] = None  # tuple of (bus, phase)
    capacitive_only: bool = False  # lower-cap reactive slack at 0


@dataclass(frozen=True)
class Network:
    buses: tuple
    branches: tuple = ()
    transformers: tuple = ()
    loads: tuple = ()
    capacitors: tuple = ()
    sources: tuple = ()
    units: str = "pu"
    s_base: float = 1.0  # VA per phase
    v_bases: tuple = ()  # ((nominal_volts, base_volts), ...)
    tpia_defaults: Optional[TpiaDefaults] = None
    # cumulative load multiplier; kept separate so repeated scaling composes exactly
    load_scale: float = 1.0

    def effective_loads(self) -> list:
        """Loads with ``load_scale`` applied."""
        if self.load_scale == 1.0:
            return list(self.loads)
        k = self.load_scale
        return [replace(ld, p=ld.p * k, q=ld.q * k) for ld in self.loads]

    def bus(self, bus_id: str) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    def bus_map(self) -> dict:
        return {b.id: b for b in self.buses}

    def node_phases(self) -> list:
        """All (bus, phase) pairs in document bus order, then A, B, C."""
        return [(b.id, p) for b in self.buses for p in b.phases]

    def swing_buses(self) -> list:
        return [b for b in self.buses if b.kind == BusKind.SWING]

    def source_for(self, bus_id: str) -> Source:
        for s in self.sources:
            if s.bus == bus_id:
                return s
        raise KeyError(bus_id)


@dataclass(frozen=True)
class PhasorState:
    """Rectangular node voltages, one (V_R, V_I) pair per node-phase."""

    index: tuple
    vr: np.ndarray
    vi: np.ndarray

    @property
    def complex(self) -> np.ndarray:
        return self.vr + 1j * self.vi

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.vr, self.vi)

    def angle_deg(self) -> np.ndarray:
        return np.degrees(np.arctan2(self.vi, self.vr))

    def as_dict(self) -> dict:
        return {k: complex(r, i) for k, r, i in zip(self.index, self.vr, self.vi)}


@dataclass(frozen=True)
class VoltageBounds:
    """Magnitude bounds in per-unit of bus nominal voltage."""

    lower: float = 0.9
    upper: float = 1.1
    overrides: Mapping = field(default_factory=dict)  # (bus, phase) -> (lo, hi)

    def __post_init__(self):
        for lo, hi in [(self.lower, self.upper), *self.overrides.values()]:
            if not (0.0 < lo < hi):
                raise ValueError(f"voltage bounds require 0 < lower < upper, got [{lo}, {hi}]")

    def for_node(self, bus: str, phase: str) -> tuple:
        return self.overrides.get((bus, phase), (self.lower, self.upper))


@dataclass(frozen=True)
class SlackRatingLimits:
    """Optional caps on slack quantities keyed by (bus, phase, component).

    Components are named per formulation: ``i_r``/``i_i``, ``p``/``q`` or ``g``/``b``.
    Either side of a (lower, upper) pair may be ``None``.
    """

    limits: Mapping = field(default_factory=dict)

    def __post_init__(self):
        for key, (lo, hi) in self.limits.items():
            if lo is not None and hi is not None and lo > hi:
                raise ValueError(f"slack rating lower > upper at {key}")


@dataclass
class SlackVariables:
    formulation: Formulation
    enabled: tuple
    values: np.ndarray  # shape (len(enabled), 2); component 0 is zero when reactive_only
    reactive_only: bool = False

    def __post_init__(self):
        if self.reactive_only and self.formulation == Formulation.I:
            raise ValueError(
                "reactive-only slack needs the PQ or GB formulation; "
                "slack currents cannot be restricted to reactive power"
            )
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.enabled), 2)
        if self.reactive_only and np.any(self.values[:, 0] != 0.0):
            raise ValueError("reactive-only slack must have zero real component")

    @classmethod
    def zeros(cls, formulation, enabled, reactive_only=False) -> "SlackVariables":
        return cls(formulation, tuple(enabled), np.zeros((len(enabled), 2)), reactive_only)


# ---------------------------------------------------------------------------
# validation


def _phase_graph(network: Network):
    """Adjacency over node-phases induced by branches and transformers."""
    adj = defaultdict(set)
    for br in network.branches:
        for p in br.phases:
            a, b = (br.from_bus, p), (br.to_bus, p)
            adj[a].add(b)
            adj[b].add(a)
    for tr in network.transformers:
        if tr.connection == Connection.DELTA_WYE:
            pairs = [((tr.from_bus, p), (tr.to_bus, q)) for p in PHASES for q in PHASES]
        else:
            pairs = [((tr.from_bus, p), (tr.to_bus, p)) for p in tr.phases]
        for a, b in pairs:
            adj[a].add(b)
            adj[b].add(a)
    return adj


def _components(nodes: Iterable, adj) -> list:
    seen = set()
    comps = []
    for start in nodes:
        if start in seen:
            continue
        stack, comp = [start], []
        seen.add(start)
        while stack:
            n = stack.pop()
            comp.append(n)
            for m in adj.get(n, ()):
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        comps.append(comp)
    return comps


def validate(network: Network) -> list:
    """Check structural invariants; returns a list of diagnostics (empty when valid)."""
    diags: list = []
    ids = [b.id for b in network.buses]
    counts = defaultdict(int)
    for i in ids:
        counts[i] += 1
    for i, c in counts.items():
        if c > 1:
            diags.append(f"bus {i}: duplicate bus id")
    buses = network.bus_map()

    for b in network.buses:
        try:
            if canonical_phases(b.phases) != b.phases:
                diags.append(f"bus {b.id}: phases {b.phases!r} not in canonical ABC order")
        except ValueError as exc:
            diags.append(f"bus {b.id}: {exc}")
        if not (b.nominal_voltage > 0):
            diags.append(f"bus {b.id}: nominal_voltage must be > 0")

    def check_bus(ref, what):
        if ref not in buses:
            diags.append(f"{what}: unknown bus {ref!r}")
            return False
        return True

    for k, br in enumerate(network.branches):
        name = f"branch {br.id or k}"
        ok = check_bus(br.from_bus, name) & check_bus(br.to_bus, name)
        if br.from_bus == br.to_bus:
            diags.append(f"{name}: from_bus equals to_bus")
        if ok:
            common = set(buses[br.from_bus].phases) & set(buses[br.to_bus].phases)
            if not set(br.phases) <= common:
                diags.append(f"{name}: phases {br.phases} not present on both terminals")
            if not math.isclose(buses[br.from_bus].nominal_voltage,
                                buses[br.to_bus].nominal_voltage, rel_tol=1e-9):
                diags.append(f"{name}: terminals have different nominal voltages")
        for label, m in (("series", br.series_admittance), ("shunt", br.shunt_admittance)):
            if m is None:
                continue
            arr = matrix_array(m)
            if arr.shape != (len(br.phases), len(br.phases)):
                diags.append(f"{name}: {label} admittance shape {arr.shape} does not match phases {br.phases}")
            elif not np.allclose(arr, arr.T, rtol=1e-12, atol=1e-14):
                diags.append(f"{name}: {label} admittance not symmetric")

    for k, tr in enumerate(network.transformers):
        name = f"transformer {tr.id or k}"
        ok = check_bus(tr.from_bus, name) & check_bus(tr.to_bus, name)
        if not (tr.turns_ratio > 0):
            diags.append(f"{name}: turns_ratio must be > 0")
        if tr.series_impedance == 0:
            diags.append(f"{name}: series_impedance must be nonzero")
        if ok:
            need = "ABC" if tr.connection == Connection.DELTA_WYE else tr.phases
            for end in (tr.from_bus, tr.to_bus):
                if not set(need) <= set(buses[end].phases):
                    diags.append(f"{name}: bus {end} lacks phases {need}")

    for ld in network.loads:
        if check_bus(ld.bus, "load") and ld.phase not in buses[ld.bus].phases:
            diags.append(f"load: phase {ld.phase} not present on bus {ld.bus}")
    for cap in network.capacitors:
        if check_bus(cap.bus, "capacitor") and cap.phase not in buses[cap.bus].phases:
            diags.append(f"capacitor: phase {cap.phase} not present on bus {cap.bus}")
        if cap.b < 0:
            diags.append(f"capacitor at bus {cap.bus}: susceptance must be >= 0")

    src_buses = defaultdict(int)
    for s in network.sources:
        if check_bus(s.bus, "source"):
            src_buses[s.bus] += 1
            if buses[s.bus].kind != BusKind.SWING:
                diags.append(f"source: bus {s.bus} is not a SWING bus")
    for b in network.swing_buses():
        if src_buses.get(b.id, 0) != 1:
            diags.append(f"bus {b.id}: SWING bus needs exactly one source record")

    if diags:
        return diags

    # islands over node-phases: each must contain exactly one swing bus
    adj = _phase_graph(network)
    swing_ids = {b.id for b in network.swing_buses()}
    for comp in _components(network.node_phases(), adj):
        swings = {bus for bus, _ in comp if bus in swing_ids}
        if not swings:
            bus, phase = sorted(comp)[0]
            diags.append(f"bus {bus}: node-phase {bus}.{phase} is in an island without a swing bus")
        elif len(swings) > 1:
            diags.append(f"bus {sorted(swings)[0]}: island has {len(swings)} swing buses ({', '.join(sorted(swings))})")
    return diags


def require_valid(network: Network) -> Network:
    diags = validate(network)
    if diags:
        raise ValidationError(diags)
    return network


# ---------------------------------------------------------------------------
# per-unit conversion


def _base_for(v_bases: Sequence, nominal: float) -> float:
    for nom, base in v_bases:
        if math.isclose(nom, nominal, rel_tol=1e-9):
            return base
    raise ValueError(f"no voltage base for voltage level {nominal!r} V")


def _convert(network: Network, s_base: float, v_bases: Sequence, to_pu: bool) -> Network:
    if s_base <= 0:
        raise ValueError("s_base must be positive")
    # per-bus voltage base: explicit on the bus, else looked up by nominal level
    vb = {}
    for b in network.buses:
        if b.v_base is not None:
            vb[b.id] = b.v_base
        elif to_pu:
            vb[b.id] = _base_for(v_bases, b.nominal_voltage)
        else:
            raise ValueError(f"bus {b.id} carries no voltage base")
        if not vb[b.id] > 0:
            raise ValueError(f"bus {b.id}: voltage base must be positive")

    def zb(bus_id):
        return vb[bus_id] ** 2 / s_base

    # per-unit value = physical / base, applied with a true division so that
    # quantities equal to their base map to exactly 1
    def down(v, base):
        return v / base if to_pu else v * base

    def up(v, base):
        return v * base if to_pu else v / base

    def scale_matrix(m, base):
        return None if m is None else tuple(tuple(up(v, base) for v in row) for row in m)

    buses = tuple(replace(b, nominal_voltage=down(b.nominal_voltage, vb[b.id]), v_base=vb[b.id] if to_pu else b.v_base)
                  for b in network.buses)
    branches = tuple(
        replace(
            br,
            series_admittance=scale_matrix(br.series_admittance, zb(br.from_bus)),
            shunt_admittance=scale_matrix(br.shunt_admittance, zb(br.from_bus)),
        )
        for br in network.branches
    )
    transformers = tuple(
        replace(
            tr,
            turns_ratio=up(tr.turns_ratio, vb[tr.to_bus] / vb[tr.from_bus]),
            series_impedance=down(tr.series_impedance, zb(tr.to_bus)),
        )
        for tr in network.transformers
    )
    loads = tuple(replace(ld, p=down(ld.p, s_base), q=down(ld.q, s_base)) for ld in network.loads)
    caps = tuple(replace(c, b=up(c.b, zb(c.bus))) for c in network.capacitors)
    sources = tuple(replace(s, voltage=down(s.voltage, vb[s.bus])) for s in network.sources)
    return replace(
        network,
        buses=buses,
        branches=branches,
        transformers=transformers,
        loads=loads,
        capacitors=caps,
        sources=sources,
        units="pu" if to_pu else "si",
        s_base=s_base,
        v_bases=tuple((float(n), float(b)) for n, b in v_bases),
    )


def to_per_unit(network: Network, s_base: float | None = None, v_bases: Sequence | None = None) -> Network:
    """Normalize a physical-unit network.

    ``s_base`` is the per-phase power base in VA; ``v_bases`` pairs each
    line-to-neutral nominal voltage level (volts) with its base voltage.
    Transformer impedances in physical units are ohms referred to the to side.
    """
    if network.units == "pu":
        return network
    s_base = network.s_base if s_base is None else s_base
    v_bases = network.v_bases if v_bases is None else tuple(v_bases)
    if isinstance(v_bases, Mapping):
        v_bases = tuple(v_bases.items())
    return _convert(network, s_base, v_bases, to_pu=True)


def from_per_unit(network: Network) -> Network:
    if network.units != "pu" or any(b.v_base is None for b in network.buses):
        raise ValueError("network carries no per-unit bases to invert")
    return _convert(network, network.s_base, network.v_bases, to_pu=False)
