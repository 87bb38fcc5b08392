"""Seeded synthetic feeders, load stressing, and the built-in desk cases."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .model import (
    Branch,
    Bus,
    BusKind,
    Capacitor,
    Connection,
    Load,
    Network,
    Source,
    TpiaDefaults,
    Transformer,
    as_matrix,
    require_valid,
)


@dataclass(frozen=True)
class GenSpec:
    n_buses: int = 10
    phasing: str = "mixed"  # "ABC": all three-phase; "mixed": laterals may drop phases
    r_range: tuple = (0.004, 0.012)  # self resistance per branch, p.u.
    x_range: tuple = (0.008, 0.03)  # self reactance per branch, p.u.
    mutual_ratio: float = 0.35  # mutual / self impedance
    load_density: float = 0.6  # probability that a node-phase carries a load
    p_range: tuple = (0.01, 0.05)
    power_factor: float = 0.9
    meshed_links: int = 0  # extra branches closing loops
    source_voltage: float = 1.0
    seed: int = 0


def _check_range(name, rng):
    lo, hi = rng
    if not (lo <= hi):
        raise ValueError(f"{name} is empty: {rng}")


def line_admittance(phases: str, z_self: complex, z_mutual: complex):
    """Series admittance block of a transposition-free line with uniform coupling."""
    k = len(phases)
    Z = np.full((k, k), z_mutual, dtype=complex)
    np.fill_diagonal(Z, z_self)
    Y = np.linalg.inv(Z)
    return as_matrix(0.5 * (Y + Y.T))


def generate(spec: GenSpec) -> Network:
    """Random radial feeder (plus optional loop-closing links) in per-unit."""
    if spec.n_buses < 2:
        raise ValueError("n_buses must be >= 2")
    for name in ("r_range", "x_range", "p_range"):
        _check_range(name, getattr(spec, name))
    if not 0 <= spec.load_density <= 1:
        raise ValueError("load_density must lie in [0, 1]")
    if spec.phasing not in ("ABC", "mixed"):
        raise ValueError(f"unknown phasing {spec.phasing!r}")
    rng = np.random.default_rng(spec.seed)
    tan_phi = math.tan(math.acos(spec.power_factor))

    ids = [str(i + 1) for i in range(spec.n_buses)]
    phases = {ids[0]: "ABC"}
    parents = {}
    for i in range(1, spec.n_buses):
        parent = ids[int(rng.integers(max(0, i - 3), i))]
        pp = phases[parent]
        ph = pp
        if spec.phasing == "mixed" and i > spec.n_buses // 3:
            u = rng.random()
            if u < 0.35:
                ph = pp[int(rng.integers(len(pp)))]
            elif u < 0.5 and len(pp) == 3:
                drop = int(rng.integers(3))
                ph = "".join(p for j, p in enumerate(pp) if j != drop)
        phases[ids[i]] = ph
        parents[ids[i]] = parent

    def draw_line(ph):
        z = complex(rng.uniform(*spec.r_range), rng.uniform(*spec.x_range))
        return line_admittance(ph, z, spec.mutual_ratio * z)

    buses = [Bus(ids[0], "ABC", 1.0, BusKind.SWING)]
    buses += [Bus(b, phases[b], 1.0, BusKind.PQ) for b in ids[1:]]
    branches = [Branch(parents[b], b, phases[b], draw_line(phases[b]), id=f"L{b}") for b in ids[1:]]
    for k in range(spec.meshed_links):
        a, b = sorted(rng.choice(spec.n_buses - 1, size=2, replace=False) + 1)
        common = "".join(p for p in "ABC" if p in phases[ids[a]] and p in phases[ids[b]])
        if common:
            branches.append(Branch(ids[a], ids[b], common, draw_line(common), id=f"M{k}"))
    loads = []
    for b in ids[1:]:
        for p in phases[b]:
            if rng.random() < spec.load_density:
                pl = float(rng.uniform(*spec.p_range))
                loads.append(Load(b, p, pl, pl * tan_phi))
    net = Network(
        buses=tuple(buses),
        branches=tuple(branches),
        loads=tuple(loads),
        sources=(Source(ids[0], spec.source_voltage, 0.0),),
    )
    return require_valid(net)


def scale_loads(network: Network, factor: float) -> Network:
    """Multiply every load's P and Q by ``factor``."""
    if not factor > 0:
        raise ValueError("load factor must be positive")
    if factor == 1.0:
        return network
    return replace(network, load_scale=network.load_scale * factor)


# ---------------------------------------------------------------------------
# desk cases


def two_bus(p_load: float = 4.0, x: float = 0.1, q_load: float = 0.0, phase: str = "A") -> Network:
    """Swing bus at 1.0 p.u. feeding one constant-power load over a lossless reactance.

    With V1 = 1 the receiving voltage solves V^4 - (1 - 2 Q X) V^2 + X^2 (P^2 + Q^2) = 0,
    so a unity-power-factor load is servable up to P_max = 1 / (2 X).
    """
    return Network(
        buses=(Bus("1", phase, 1.0, BusKind.SWING), Bus("2", phase, 1.0, BusKind.PQ)),
        branches=(Branch("1", "2", phase, ((1.0 / complex(0.0, x),),), id="L12"),),
        loads=(Load("2", phase, p_load, q_load),),
        sources=(Source("1", 1.0, 0.0),),
    )


def case2_overload() -> Network:
    return two_bus(p_load=6.0)


def case3_unbalanced() -> Network:
    """Three-phase line into a delta/wye-g service transformer, unbalanced loads."""
    z = complex(0.01, 0.03)
    return Network(
        buses=(
            Bus("src", "ABC", 1.0, BusKind.SWING),
            Bus("mid", "ABC", 1.0),
            Bus("lv", "ABC", 1.0),
        ),
        branches=(Branch("src", "mid", "ABC", line_admittance("ABC", z, 0.4 * z), id="L1"),),
        transformers=(
            Transformer("mid", "lv", Connection.DELTA_WYE, math.sqrt(3.0), complex(0.005, 0.02), "ABC", id="T1"),
        ),
        loads=(
            Load("mid", "A", 0.10, 0.04),
            Load("mid", "B", 0.05, 0.02),
            Load("lv", "A", 0.15, 0.06),
            Load("lv", "B", 0.08, 0.03),
            Load("lv", "C", 0.12, 0.07),
        ),
        sources=(Source("src", 1.0, 0.0),),
    )


# IEEE-13-like topology with synthetic impedances; (from, to, phases, length factor)
_CASE13_TOPOLOGY = (
    ("650", "632", "ABC", 2.0),
    ("632", "633", "ABC", 0.5),
    ("632", "645", "BC", 0.5),
    ("645", "646", "BC", 0.3),
    ("632", "671", "ABC", 2.0),
    ("671", "680", "ABC", 1.0),
    ("671", "684", "AC", 0.3),
    ("684", "611", "C", 0.3),
    ("684", "652", "A", 0.8),
    ("671", "692", "ABC", 0.05),
    ("692", "675", "ABC", 0.5),
)
_CASE13_PHASES = {
    "650": "ABC", "632": "ABC", "633": "ABC", "634": "ABC", "645": "BC", "646": "BC", "671": "ABC",
    "680": "ABC", "684": "AC", "611": "C", "652": "A", "692": "ABC", "675": "ABC",
}
_CASE13_LOADS = (
    ("634", "A", 0.053, 0.037), ("634", "B", 0.040, 0.030), ("634", "C", 0.040, 0.030),
    ("645", "B", 0.057, 0.042),
    ("646", "C", 0.077, 0.044),
    ("652", "A", 0.043, 0.029),
    ("671", "A", 0.128, 0.066), ("671", "B", 0.128, 0.066), ("671", "C", 0.128, 0.066),
    ("675", "A", 0.162, 0.090), ("675", "B", 0.068, 0.060), ("675", "C", 0.097, 0.071),
    ("692", "C", 0.057, 0.051),
    ("611", "C", 0.057, 0.040),
    ("632", "B", 0.022, 0.013),
)
CASE13_STRESS_FACTOR = 2.5


def case13_radial() -> Network:
    """13-bus three-phase feeder with mixed phasing and a wye-g/wye-g transformer."""
    z_unit = complex(0.008, 0.024)
    order = ("650", "632", "633", "634", "645", "646", "671", "680", "684", "611", "652", "692", "675")
    buses = tuple(
        Bus(b, _CASE13_PHASES[b], 1.0, BusKind.SWING if b == "650" else BusKind.PQ) for b in order
    )
    branches = tuple(
        Branch(f, t, ph, line_admittance(ph, z_unit * k, 0.4 * z_unit * k), id=f"L{f}-{t}")
        for f, t, ph, k in _CASE13_TOPOLOGY
    )
    return Network(
        buses=buses,
        branches=branches,
        transformers=(Transformer("633", "634", Connection.WYE_WYE, 1.0, complex(0.004, 0.02), "ABC", id="XFM1"),),
        loads=tuple(Load(b, p, pl, ql) for b, p, pl, ql in _CASE13_LOADS),
        capacitors=(Capacitor("675", "A", 0.02), Capacitor("675", "B", 0.02), Capacitor("675", "C", 0.02)),
        sources=(Source("650", 1.02, 0.0),),
        tpia_defaults=TpiaDefaults(0.9, 1.1, None),
    )


def case13_radial_stressed() -> Network:
    """case13_radial under a raised load factor: solvable, but under-voltage below 0.95 p.u.

    Mutual coupling makes the unconstrained reactive optimum partly inductive on
    the lightly loaded phases, so the defaults ask for capacitive slack only.
    """
    net = scale_loads(case13_radial(), CASE13_STRESS_FACTOR)
    return replace(net, tpia_defaults=TpiaDefaults(0.95, 1.05, None, capacitive_only=True))


BUILTIN_CASES = {
    "case2_overload": case2_overload,
    "case3_unbalanced": case3_unbalanced,
    "case13_radial": case13_radial,
    "case13_radial_stressed": case13_radial_stressed,
}
