"""Three-phase infeasibility analysis: problem construction and result handling.

A TPIA problem minimizes ``alpha * sum(g)`` over node voltages and slack
sources, subject to the KCL equations modified by the slack injections,
voltage magnitude bounds and optional slack ratings. The problem object
exposes the callbacks the interior-point solver needs (objective, gradient,
equality/inequality constraints with Jacobians, Lagrangian Hessian).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .model import (
    SLACK_COMPONENTS,
    BusKind,
    Capacitor,
    Formulation,
    Load,
    Network,
    PhasorState,
    SlackRatingLimits,
    SlackVariables,
    VoltageBounds,
    require_valid,
)
from .stamping import NetworkEquations, TpiaEquations

ZERO_SLACK_TOL = 1e-6


# stand-in limits when no operational bounds are requested; never active at a
# physically meaningful solution
GUARD_BOUNDS = VoltageBounds(0.05, 20.0)


def default_enabled(network: Network) -> tuple:
    """Every non-swing node-phase."""
    return tuple((b.id, p) for b in network.buses if b.kind != BusKind.SWING for p in b.phases)


class TpiaProblem:
    """Variables ``z = [V_R; V_I; s]``; equalities ``f - h``; inequalities ``c >= 0``.

    Inequality rows are ordered: voltage lower bounds, voltage upper bounds,
    slack rating lower caps, slack rating upper caps.
    """

    def __init__(self, network: Network, formulation: Formulation, bounds: Optional[VoltageBounds],
                 alpha: float, reactive_only: bool, enabled: Sequence, ratings: Optional[SlackRatingLimits],
                 relax: float = 0.0):
        self.network = network
        self.formulation = Formulation(formulation)
        self.bounds = bounds
        self.alpha = float(alpha)
        self.reactive_only = reactive_only
        self.enabled = tuple(enabled)
        self.ratings = ratings
        self.relax = relax
        self.net_eq = NetworkEquations(network, relax=relax)
        self.eqs = TpiaEquations(self.net_eq, self.formulation, self.enabled, reactive_only)
        n = self.net_eq.n
        self.n_nodes = n
        self.n_var = self.eqs.size
        self.n_eq = 2 * n

        # voltage bounds on every non-swing node-phase; without operational
        # bounds a far-off guard band keeps iterates away from voltage collapse
        bnodes, lo2, hi2 = [], [], []
        limits = bounds if bounds is not None else GUARD_BOUNDS
        if limits is not None:
            bus_nom = {b.id: b.nominal_voltage for b in network.buses}
            for i, (bus, ph) in enumerate(self.net_eq.nodes):
                if self.net_eq.swing[i]:
                    continue
                lo, hi = limits.for_node(bus, ph)
                bnodes.append(i)
                lo2.append((lo * bus_nom[bus]) ** 2)
                hi2.append((hi * bus_nom[bus]) ** 2)
        self.bound_nodes = np.array(bnodes, dtype=int)
        self.bound_lo2 = np.array(lo2)
        self.bound_hi2 = np.array(hi2)

        # rating caps: (column, value) for lower and upper
        rlo, rhi = [], []
        if ratings is not None:
            comps = SLACK_COMPONENTS[self.formulation]
            epos = {e: k for k, e in enumerate(self.enabled)}
            for (bus, ph, comp), (lo, hi) in sorted(ratings.limits.items()):
                if (bus, ph) not in epos:
                    raise ValueError(f"slack rating on {bus}.{ph}, which has no slack source")
                if comp not in comps:
                    raise ValueError(f"slack component {comp!r} not in formulation {self.formulation.value}")
                col = self.eqs.local_cols[epos[(bus, ph)], 2 + comps.index(comp)]
                if col < 0:
                    raise ValueError(f"slack component {comp!r} is removed by the reactive-only restriction")
                if lo is not None:
                    rlo.append((col, float(lo)))
                if hi is not None:
                    rhi.append((col, float(hi)))
        self.rating_lo = np.array(rlo, dtype=float).reshape(-1, 2)
        self.rating_hi = np.array(rhi, dtype=float).reshape(-1, 2)
        nb = len(self.bound_nodes)
        self.n_ineq = 2 * nb + len(self.rating_lo) + len(self.rating_hi)

        # KKT vector layout
        self.index_map = {
            "V_R": slice(0, n),
            "V_I": slice(n, 2 * n),
            "s": slice(2 * n, self.n_var),
            "lambda": slice(self.n_var, self.n_var + self.n_eq),
            "mu": slice(self.n_var + self.n_eq, self.n_var + self.n_eq + self.n_ineq),
        }

    # -- solver callbacks --------------------------------------------------

    def objective(self, z) -> float:
        return self.alpha * self.eqs.objective(z)

    def gradient(self, z) -> np.ndarray:
        return self.alpha * self.eqs.objective_gradient(z)

    def equality(self, z) -> np.ndarray:
        return self.eqs.residual(z)

    def equality_jacobian(self, z) -> sp.csr_matrix:
        return self.eqs.jacobian(z)

    def inequality(self, z) -> np.ndarray:
        n = self.n_nodes
        idx = self.bound_nodes
        m2 = z[idx] ** 2 + z[n + idx] ** 2
        parts = [m2 - self.bound_lo2, self.bound_hi2 - m2]
        if len(self.rating_lo):
            parts.append(z[self.rating_lo[:, 0].astype(int)] - self.rating_lo[:, 1])
        if len(self.rating_hi):
            parts.append(self.rating_hi[:, 1] - z[self.rating_hi[:, 0].astype(int)])
        return np.concatenate(parts) if parts else np.zeros(0)

    def inequality_jacobian(self, z) -> sp.csr_matrix:
        n = self.n_nodes
        idx = self.bound_nodes
        nb = len(idx)
        r = np.arange(nb)
        rows = [r, r, nb + r, nb + r]
        cols = [idx, n + idx, idx, n + idx]
        vals = [2 * z[idx], 2 * z[n + idx], -2 * z[idx], -2 * z[n + idx]]
        off = 2 * nb
        for caps, sign in ((self.rating_lo, 1.0), (self.rating_hi, -1.0)):
            k = len(caps)
            rows.append(off + np.arange(k))
            cols.append(caps[:, 0].astype(int))
            vals.append(np.full(k, sign))
            off += k
        return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.n_ineq, self.n_var)).tocsr()

    def lagrangian_hessian(self, z, lam, mu) -> sp.csr_matrix:
        """Hessian of ``alpha*sum(g) - lam.(f - h) - mu.c`` with respect to z."""
        H = self.eqs.hessian(z, lam, obj_weight=self.alpha)
        nb = len(self.bound_nodes)
        if nb:
            n = self.n_nodes
            w = -2.0 * (mu[:nb] - mu[nb:2 * nb])
            idx = self.bound_nodes
            D = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([idx, n + idx]),) * 2),
                              shape=(self.n_var, self.n_var))
            H = H + D
        return H.tocsr()

    def initial_point(self) -> np.ndarray:
        """Flat start with magnitudes pulled inside the bounds, slacks at zero."""
        n = self.n_nodes
        x = self.net_eq.flat_start()
        z = np.zeros(self.n_var)
        z[:2 * n] = x
        if len(self.bound_nodes):
            idx = self.bound_nodes
            m2 = x[idx] ** 2 + x[n + idx] ** 2
            lo2, hi2 = self.bound_lo2, self.bound_hi2
            out = (m2 <= lo2) | (m2 >= hi2)
            target = (0.5 * (np.sqrt(lo2) + np.sqrt(hi2))) / np.sqrt(m2)
            scale = np.where(out, target, 1.0)
            z[idx] *= scale
            z[n + idx] *= scale
        lo = {int(c): v for c, v in self.rating_lo}
        hi = {int(c): v for c, v in self.rating_hi}
        for col in sorted(set(lo) | set(hi)):
            a, b = lo.get(col), hi.get(col)
            if (a is None or a < 0.0) and (b is None or b > 0.0):
                continue
            if a is not None and b is not None:
                z[col] = 0.5 * (a + b) if b > a else a
            elif a is not None:
                z[col] = a + max(1.0, abs(a)) * 1e-2
            else:
                z[col] = b - max(1.0, abs(b)) * 1e-2
        return z

    def relaxed(self, relax: float) -> "TpiaProblem":
        return TpiaProblem(self.network, self.formulation, self.bounds, self.alpha, self.reactive_only,
                           self.enabled, self.ratings, relax=relax)

    # -- interpretation ----------------------------------------------------

    def state(self, z) -> PhasorState:
        return self.net_eq.state(z[:2 * self.n_nodes])

    def slack_variables(self, z) -> SlackVariables:
        return SlackVariables(self.formulation, self.enabled, self.eqs.slack_matrix(z), self.reactive_only)

    def injections(self, z) -> np.ndarray:
        return self.eqs.injections(z)

    def variable_count(self) -> dict:
        return {
            "voltages": 2 * self.n_nodes,
            "slack": self.eqs.n_slack,
            "equality_duals": self.n_eq,
            "inequality_duals": self.n_ineq,
        }


def build_problem(network: Network, formulation="PQ", bounds: Optional[VoltageBounds] = VoltageBounds(),
                  alpha: float = 1.0, reactive_only: bool = False, enabled: Optional[Sequence] = None,
                  ratings: Optional[SlackRatingLimits] = None) -> TpiaProblem:
    formulation = Formulation(formulation)
    if reactive_only and formulation == Formulation.I:
        raise ValueError("reactive-only slack needs the PQ or GB formulation; "
                         "slack currents cannot be limited to reactive power without extra constraints")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    require_valid(network)
    if network.units != "pu":
        raise ValueError("TPIA works on per-unit networks; convert with to_per_unit first")
    if enabled is None:
        enabled = default_enabled(network)
    known = set(network.node_phases())
    enabled = tuple(enabled)
    for e in enabled:
        if tuple(e) not in known:
            raise ValueError(f"enabled slack location {e} is not a node-phase of the network")
    if len(set(enabled)) != len(enabled):
        raise ValueError("enabled slack set has duplicates")
    return TpiaProblem(network, formulation, bounds, alpha, reactive_only, enabled, ratings)


def capacitive_ratings(enabled: Sequence, formulation="GB") -> SlackRatingLimits:
    """Lower caps of 0 on the reactive slack (``q`` or ``b``) at every enabled location."""
    formulation = Formulation(formulation)
    if formulation == Formulation.I:
        raise ValueError("capacitive-only limits need the PQ or GB formulation")
    comp = SLACK_COMPONENTS[formulation][1]
    return SlackRatingLimits({(bus, ph, comp): (0.0, None) for bus, ph in enabled})


def voltage_bound_residuals(vr, vi, lower, upper):
    """``(|V|^2 - lower^2, upper^2 - |V|^2)``; feasible iff both are >= 0."""
    m2 = np.asarray(vr) ** 2 + np.asarray(vi) ** 2
    return m2 - np.asarray(lower) ** 2, np.asarray(upper) ** 2 - m2


@dataclass
class SolveReport:
    status: str  # "feasible" | "infeasible" | "failed"
    formulation: Formulation
    reactive_only: bool
    iterations: int
    state: Optional[PhasorState]
    slack: Optional[SlackVariables]
    injections: np.ndarray  # complex power injected per enabled node-phase
    kkt_residual: float
    objective: float = float("nan")
    homotopy_used: bool = False
    homotopy_steps: int = 0
    message: str = ""
    trace: list = field(default_factory=list)
    final_eps: float = float("nan")

    @property
    def enabled(self) -> tuple:
        return self.slack.enabled if self.slack is not None else ()

    @property
    def total_p(self) -> float:
        return float(np.sum(np.abs(self.injections.real)))

    @property
    def total_q(self) -> float:
        return float(np.sum(np.abs(self.injections.imag)))

    @property
    def total_s(self) -> float:
        return self.total_p + self.total_q

    @property
    def v_min(self) -> float:
        return float(self.state.magnitude().min()) if self.state is not None else float("nan")

    @property
    def v_max(self) -> float:
        return float(self.state.magnitude().max()) if self.state is not None else float("nan")

    @property
    def label(self) -> str:
        if self.formulation == Formulation.PQ:
            return "Q" if self.reactive_only else "PQ"
        if self.formulation == Formulation.GB:
            return "B" if self.reactive_only else "GB"
        return "I"


def classify(total_s: float, tol: float = ZERO_SLACK_TOL) -> str:
    return "feasible" if total_s <= tol else "infeasible"


def localize(report: SolveReport, threshold_pu: float = ZERO_SLACK_TOL) -> list:
    """Slack locations with ``|S_f| >= threshold``, largest first."""
    out = []
    for k, ((bus, ph), s) in enumerate(zip(report.enabled, report.injections)):
        if abs(s) >= threshold_pu:
            out.append((-abs(s), k, (bus, ph, float(s.real), float(s.imag))))
    out.sort()
    return [row for _, _, row in out]


def apply_compensation(network: Network, report: SolveReport, tol: float = ZERO_SLACK_TOL) -> Network:
    """Install the reactive slack of a TPIA-B or TPIA-Q solution as fixed devices.

    TPIA-B susceptances become capacitors; TPIA-Q reactive injections become
    negative reactive loads.
    """
    if not report.reactive_only or report.formulation == Formulation.I:
        raise ValueError("compensation needs a reactive-only (TPIA-B or TPIA-Q) report")
    if report.slack is None:
        raise ValueError("report carries no slack solution")
    vals = report.slack.values
    caps, loads = [], []
    for (bus, ph), (_, v), s in zip(report.enabled, vals, report.injections):
        if report.formulation == Formulation.GB:
            if v > 0:
                caps.append(Capacitor(bus, ph, float(v)))
            elif abs(s) > tol:
                raise ValueError(f"inductive slack at {bus}.{ph} (B_s = {v:.3e}) cannot be a capacitor")
        elif v != 0:
            loads.append(Load(bus, ph, 0.0, -float(v) / network.load_scale))
    if not caps and not loads:
        return network
    return replace(network, capacitors=network.capacitors + tuple(caps), loads=network.loads + tuple(loads))
