"""Nodal admittance stamps, KCL current residuals and slack-source terms.

Variables are laid out as ``x = [V_R; V_I]`` over the network's node-phases
(document bus order, then A, B, C). Residual rows follow the same layout:
``[f_r; f_i]``. Swing node-phases keep their rows but the KCL equation is
replaced by ``V - V_set = 0``.

Every nonlinear term depends only on the four local quantities of one
node-phase ``u = (V_R, V_I, s1, s2)``, so first and second partials are
returned as dense per-node blocks and scattered into sparse matrices.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .model import (
    PHASE_SHIFT_DEG,
    BusKind,
    Connection,
    Formulation,
    Network,
    PhasorState,
    matrix_array,
)

# below this magnitude the rational load/slack currents are not evaluated
VOLTAGE_GUARD = 1e-4

_DELTA_INCIDENCE = np.array([[1, -1, 0], [0, 1, -1], [-1, 0, 1]], dtype=float)


class VoltageCollapse(ArithmeticError):
    def __init__(self, node, magnitude):
        self.node = node
        self.magnitude = magnitude
        super().__init__(f"voltage collapse at {node[0]}.{node[1]}: |V| = {magnitude:.3e} p.u.")


@dataclass(frozen=True)
class AdmittanceMatrix:
    nodes: tuple  # (bus, phase) per row/column
    G: sp.csr_matrix
    B: sp.csr_matrix

    @property
    def Y(self) -> sp.csr_matrix:
        return (self.G + 1j * self.B).tocsr()


def max_branch_admittance(network: Network) -> float:
    """Largest entry magnitude over branch series blocks and transformer admittances."""
    vals = [0.0]
    for br in network.branches:
        vals.append(float(np.abs(matrix_array(br.series_admittance)).max()))
    for tr in network.transformers:
        vals.append(abs(1.0 / tr.series_impedance))
    return max(vals)


def _transformer_blocks(tr):
    """Nodal blocks (Yff, Yft, Ytf, Ytt) and the phases they act on."""
    y = 1.0 / tr.series_impedance
    n = tr.turns_ratio
    if tr.connection == Connection.DELTA_WYE:
        C = _DELTA_INCIDENCE
        yff = (y / n**2) * (C.T @ C)
        yft = -(y / n) * C.T
        ytf = -(y / n) * C
        ytt = y * np.eye(3)
        return "ABC", "ABC", yff, yft, ytf, ytt
    k = len(tr.phases)
    eye = np.eye(k)
    return tr.phases, tr.phases, (y / n**2) * eye, -(y / n) * eye, -(y / n) * eye, y * eye


def assemble_admittance(network: Network, relax: float = 0.0) -> AdmittanceMatrix:
    """Stamp branches, transformers and capacitors into real G and B.

    ``relax`` is an extra conductance placed in parallel with every branch and
    transformer, phase by phase (the homotopy shorting admittance).
    """
    nodes = tuple(network.node_phases())
    pos = {n: i for i, n in enumerate(nodes)}
    rows, cols, vals = [], [], []

    def stamp(fb, fph, tb, tph, yff, yft, ytf, ytt):
        for blk, (ab, aph), (bb, bph) in (
            (yff, (fb, fph), (fb, fph)),
            (yft, (fb, fph), (tb, tph)),
            (ytf, (tb, tph), (fb, fph)),
            (ytt, (tb, tph), (tb, tph)),
        ):
            for a, pa in enumerate(aph):
                for b, pb in enumerate(bph):
                    if blk[a, b] != 0:
                        rows.append(pos[(ab, pa)])
                        cols.append(pos[(bb, pb)])
                        vals.append(blk[a, b])

    for br in network.branches:
        ys = matrix_array(br.series_admittance)
        ysh = matrix_array(br.shunt_admittance) if br.shunt_admittance is not None else 0.0
        stamp(br.from_bus, br.phases, br.to_bus, br.phases, ys + ysh, -ys, -ys, ys + ysh)
    for tr in network.transformers:
        fph, tph, yff, yft, ytf, ytt = _transformer_blocks(tr)
        stamp(tr.from_bus, fph, tr.to_bus, tph, yff, yft, ytf, ytt)
    if relax:
        eye_pairs = [(br.from_bus, br.to_bus, br.phases) for br in network.branches]
        eye_pairs += [(tr.from_bus, tr.to_bus, "ABC" if tr.connection == Connection.DELTA_WYE else tr.phases)
                      for tr in network.transformers]
        for fb, tb, ph in eye_pairs:
            e = relax * np.eye(len(ph))
            stamp(fb, ph, tb, ph, e, -e, -e, e)
    for cap in network.capacitors:
        i = pos[(cap.bus, cap.phase)]
        rows.append(i)
        cols.append(i)
        vals.append(1j * cap.b)

    n = len(nodes)
    Y = sp.coo_matrix((np.asarray(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()
    Y.sum_duplicates()
    return AdmittanceMatrix(nodes, Y.real.tocsr(), Y.imag.tocsr())


# ---------------------------------------------------------------------------
# local nonlinear terms


def load_current(vr, vi, p, q):
    """Current drawn by a constant-power load: the rectangular parts of conj(S / V)."""
    vr, vi = np.asarray(vr, dtype=float), np.asarray(vi, dtype=float)
    d = vr * vr + vi * vi
    if np.any(d < VOLTAGE_GUARD**2):
        raise VoltageCollapse(("?", "?"), float(np.sqrt(np.min(d))))
    return (p * vr + q * vi) / d, (p * vi - q * vr) / d


def _inv_conj(vr, vi):
    """phi = (V_R, V_I) / |V|^2 with gradient (n,2,2) and Hessian (n,2,2,2)."""
    d = vr * vr + vi * vi
    v = np.stack([vr, vi], axis=-1)
    phi = v / d[:, None]
    d2, d3 = d * d, d * d * d
    grad = np.empty(v.shape + (2,))
    grad[:, 0, 0] = (vi * vi - vr * vr) / d2
    grad[:, 0, 1] = -2 * vr * vi / d2
    grad[:, 1, 0] = -2 * vr * vi / d2
    grad[:, 1, 1] = (vr * vr - vi * vi) / d2
    eye = np.eye(2)
    hess = np.empty(v.shape + (2, 2))
    for j in range(2):
        for k in range(2):
            for l in range(2):
                hess[:, j, k, l] = (
                    -2 * (eye[k, j] * v[:, l] + eye[l, j] * v[:, k]) / d2
                    - 2 * v[:, j] * eye[k, l] / d2
                    + 8 * v[:, j] * v[:, k] * v[:, l] / d3
                )
    return phi, grad, hess


def _power_current(p, q, phi, grad, hess):
    """conj((p + jq) / V) as a function of V with p, q held fixed."""
    val = np.stack([p * phi[:, 0] + q * phi[:, 1], p * phi[:, 1] - q * phi[:, 0]], axis=-1)
    g = np.stack(
        [p[:, None] * grad[:, 0] + q[:, None] * grad[:, 1], p[:, None] * grad[:, 1] - q[:, None] * grad[:, 0]],
        axis=1,
    )
    h = np.stack(
        [
            p[:, None, None] * hess[:, 0] + q[:, None, None] * hess[:, 1],
            p[:, None, None] * hess[:, 1] - q[:, None, None] * hess[:, 0],
        ],
        axis=1,
    )
    return val, g, h


class SlackTerms(NamedTuple):
    """Slack injection h and objective term g with partials in u = (V_R, V_I, s1, s2)."""

    h: np.ndarray  # (n, 2): h_r, h_i
    h_grad: np.ndarray  # (n, 2, 4)
    h_hess: np.ndarray  # (n, 2, 4, 4)
    g: np.ndarray  # (n,)
    g_grad: np.ndarray  # (n, 4)
    g_hess: np.ndarray  # (n, 4, 4)


def analytic_derivatives(formulation: Formulation, s, vr, vi) -> SlackTerms:
    """Slack injection, objective term and their first/second partials per node-phase."""
    formulation = Formulation(formulation)
    s = np.atleast_2d(np.asarray(s, dtype=float))
    vr = np.atleast_1d(np.asarray(vr, dtype=float))
    vi = np.atleast_1d(np.asarray(vi, dtype=float))
    n = len(vr)
    s1, s2 = s[:, 0], s[:, 1]
    d = vr * vr + vi * vi
    h = np.zeros((n, 2))
    hg = np.zeros((n, 2, 4))
    hh = np.zeros((n, 2, 4, 4))
    gg = np.zeros((n, 4))
    gh = np.zeros((n, 4, 4))

    if formulation == Formulation.I:
        h[:] = s
        hg[:, 0, 2] = 1.0
        hg[:, 1, 3] = 1.0
        isq = s1 * s1 + s2 * s2
        g = isq * d
        gg[:, 0] = 2 * vr * isq
        gg[:, 1] = 2 * vi * isq
        gg[:, 2] = 2 * s1 * d
        gg[:, 3] = 2 * s2 * d
        gh[:, 0, 0] = gh[:, 1, 1] = 2 * isq
        gh[:, 2, 2] = gh[:, 3, 3] = 2 * d
        for a, va in ((0, vr), (1, vi)):
            for b, sb in ((2, s1), (3, s2)):
                gh[:, a, b] = gh[:, b, a] = 4 * va * sb
    elif formulation == Formulation.PQ:
        if np.any(d < VOLTAGE_GUARD**2):
            raise VoltageCollapse(("?", "?"), float(np.sqrt(np.min(d))))
        phi, pg, ph = _inv_conj(vr, vi)
        val, vg, vh = _power_current(s1, s2, phi, pg, ph)
        h[:] = val
        hg[:, :, :2] = vg
        hh[:, :, :2, :2] = vh
        # d h / d s1 = (phi_R, phi_I); d h / d s2 = (phi_I, -phi_R)
        hg[:, 0, 2], hg[:, 1, 2] = phi[:, 0], phi[:, 1]
        hg[:, 0, 3], hg[:, 1, 3] = phi[:, 1], -phi[:, 0]
        for comp, ds1, ds2 in ((0, pg[:, 0], pg[:, 1]), (1, pg[:, 1], -pg[:, 0])):
            hh[:, comp, :2, 2] = hh[:, comp, 2, :2] = ds1
            hh[:, comp, :2, 3] = hh[:, comp, 3, :2] = ds2
        g = s1 * s1 + s2 * s2
        gg[:, 2], gg[:, 3] = 2 * s1, 2 * s2
        gh[:, 2, 2] = gh[:, 3, 3] = 2.0
    else:
        h[:, 0] = -s1 * vr + s2 * vi
        h[:, 1] = -s1 * vi - s2 * vr
        hg[:, 0] = np.stack([-s1, s2, -vr, vi], axis=-1)
        hg[:, 1] = np.stack([-s2, -s1, -vi, -vr], axis=-1)
        hh[:, 0, 0, 2] = hh[:, 0, 2, 0] = -1.0
        hh[:, 0, 1, 3] = hh[:, 0, 3, 1] = 1.0
        hh[:, 1, 1, 2] = hh[:, 1, 2, 1] = -1.0
        hh[:, 1, 0, 3] = hh[:, 1, 3, 0] = -1.0
        ysq = s1 * s1 + s2 * s2
        g = ysq * d * d
        gg[:, 0] = 4 * ysq * d * vr
        gg[:, 1] = 4 * ysq * d * vi
        gg[:, 2] = 2 * s1 * d * d
        gg[:, 3] = 2 * s2 * d * d
        v = np.stack([vr, vi], axis=-1)
        for a in range(2):
            for b in range(2):
                gh[:, a, b] = 4 * ysq * (2 * v[:, a] * v[:, b] + d * (a == b))
            for b, sb in ((2, s1), (3, s2)):
                gh[:, a, b] = gh[:, b, a] = 8 * sb * d * v[:, a]
        gh[:, 2, 2] = gh[:, 3, 3] = 2 * d * d
    return SlackTerms(h, hg, hh, g, gg, gh)


def slack_injection(formulation, s, vr, vi):
    """Real and imaginary current injected by the slack sources."""
    t = analytic_derivatives(formulation, s, vr, vi)
    return t.h[:, 0], t.h[:, 1]


def objective_term(formulation, s, vr, vi) -> np.ndarray:
    """Squared complex power of each slack source."""
    return analytic_derivatives(formulation, s, vr, vi).g


def injected_power(formulation, s, vr, vi) -> np.ndarray:
    """Complex power each slack source injects into its node.

    PQ and GB forms are evaluated from their own variables so that a zero
    real component stays exactly zero.
    """
    formulation = Formulation(formulation)
    s = np.atleast_2d(np.asarray(s, dtype=float))
    vr = np.atleast_1d(np.asarray(vr, dtype=float))
    vi = np.atleast_1d(np.asarray(vi, dtype=float))
    if formulation == Formulation.PQ:
        p, q = s[:, 0], s[:, 1]
    elif formulation == Formulation.GB:
        d = vr * vr + vi * vi
        p, q = -s[:, 0] * d, s[:, 1] * d
    else:
        v = vr + 1j * vi
        sc = v * np.conj(s[:, 0] + 1j * s[:, 1])
        p, q = sc.real, sc.imag
    return (p + 0.0) + 1j * (q + 0.0)


# ---------------------------------------------------------------------------
# network equations


class NetworkEquations:
    """KCL residual and Jacobian of a network, optionally with homotopy relaxation."""

    def __init__(self, network: Network, relax: float = 0.0):
        self.network = network
        self.Y = assemble_admittance(network, relax=relax)
        self.nodes = self.Y.nodes
        self.n = len(self.nodes)
        self.pos = {nd: i for i, nd in enumerate(self.nodes)}
        self.p = np.zeros(self.n)
        self.q = np.zeros(self.n)
        for ld in network.effective_loads():
            i = self.pos[(ld.bus, ld.phase)]
            self.p[i] += ld.p
            self.q[i] += ld.q
        swing = np.zeros(self.n, dtype=bool)
        vset = np.zeros(self.n, dtype=complex)
        for b in network.buses:
            if b.kind == BusKind.SWING:
                src = network.source_for(b.id)
                for ph in b.phases:
                    i = self.pos[(b.id, ph)]
                    swing[i] = True
                    vset[i] = src.phasor(ph)
        self.swing = swing
        self.vset = vset
        self.loaded = np.flatnonzero(((self.p != 0) | (self.q != 0)) & ~swing)
        n = self.n
        G, B = self.Y.G, self.Y.B
        lin = sp.bmat([[G, -B], [B, G]], format="csr")
        keep = sp.diags(np.concatenate([~swing, ~swing]).astype(float))
        fix = sp.diags(np.concatenate([swing, swing]).astype(float))
        self.linear = (keep @ lin + fix).tocsr()
        self.offset = np.concatenate([-vset.real, -vset.imag]) * np.concatenate([swing, swing])

    def flat_start(self) -> np.ndarray:
        """Swing phasor replicated onto every bus with the phase's own rotation."""
        src = self.network.sources[0] if self.network.sources else None
        v = np.empty(self.n, dtype=complex)
        for i, (bus, ph) in enumerate(self.nodes):
            v[i] = src.phasor(ph) if src is not None else np.exp(1j * np.radians(PHASE_SHIFT_DEG[ph]))
        v[self.swing] = self.vset[self.swing]
        return np.concatenate([v.real, v.imag])

    def _check_guard(self, vr, vi, idx):
        d = vr[idx] ** 2 + vi[idx] ** 2
        if d.size and d.min() < VOLTAGE_GUARD**2:
            k = idx[int(np.argmin(d))]
            raise VoltageCollapse(self.nodes[k], float(np.sqrt(d.min())))

    def load_terms(self, vr, vi):
        idx = self.loaded
        self._check_guard(vr, vi, idx)
        phi, pg, ph = _inv_conj(vr[idx], vi[idx])
        return idx, _power_current(self.p[idx], self.q[idx], phi, pg, ph)

    def residual(self, x) -> np.ndarray:
        n = self.n
        f = self.linear @ x + self.offset
        idx, (val, _, _) = self.load_terms(x[:n], x[n:])
        f[idx] += val[:, 0]
        f[n + idx] += val[:, 1]
        return f

    def jacobian(self, x) -> sp.csr_matrix:
        n = self.n
        idx, (_, grad, _) = self.load_terms(x[:n], x[n:])
        rows = np.concatenate([idx, idx, n + idx, n + idx])
        cols = np.concatenate([idx, n + idx, idx, n + idx])
        vals = np.concatenate([grad[:, 0, 0], grad[:, 0, 1], grad[:, 1, 0], grad[:, 1, 1]])
        J = sp.coo_matrix((vals, (rows, cols)), shape=(2 * n, 2 * n))
        return (self.linear + J).tocsr()

    def state(self, x) -> PhasorState:
        vr, vi = np.array(x[: self.n]), np.array(x[self.n: 2 * self.n])
        # swing rows are linear; report the set point without solver round-off
        vr[self.swing] = self.vset.real[self.swing]
        vi[self.swing] = self.vset.imag[self.swing]
        return PhasorState(self.nodes, vr, vi)


def kcl_residual(network: Network, Y: AdmittanceMatrix | None, x) -> np.ndarray:
    """Stacked ``[f_r; f_i]`` over all node-phases, swing rows holding ``V - V_set``."""
    eq = NetworkEquations(network)
    if Y is not None:
        if Y.nodes != eq.nodes:
            raise ValueError("admittance matrix does not match network node order")
        eq.Y = Y
        G, B = Y.G, Y.B
        lin = sp.bmat([[G, -B], [B, G]], format="csr")
        sw = np.concatenate([eq.swing, eq.swing])
        eq.linear = (sp.diags((~sw).astype(float)) @ lin + sp.diags(sw.astype(float))).tocsr()
    return eq.residual(np.asarray(x, dtype=float))


class TpiaEquations:
    """Modified network constraints ``f(x) - h(s) = 0`` and the slack objective.

    Variable vector ``z = [V_R; V_I; s]`` where ``s`` lists, per enabled
    node-phase, the two slack components (only the second one when
    ``reactive_only``).
    """

    def __init__(self, net_eq: NetworkEquations, formulation: Formulation,
                 enabled: Sequence, reactive_only: bool = False):
        self.net = net_eq
        self.formulation = Formulation(formulation)
        if reactive_only and self.formulation == Formulation.I:
            raise ValueError("reactive-only slack needs the PQ or GB formulation")
        self.reactive_only = reactive_only
        self.enabled = tuple(enabled)
        self.slack_nodes = np.array([net_eq.pos[e] for e in self.enabled], dtype=int)
        n, m = net_eq.n, len(self.enabled)
        self.per_node = 1 if reactive_only else 2
        self.n_slack = self.per_node * m
        self.size = 2 * n + self.n_slack
        # global column of each local variable (vr, vi, s1, s2); -1 = absent
        cols = np.empty((m, 4), dtype=int)
        cols[:, 0] = self.slack_nodes
        cols[:, 1] = n + self.slack_nodes
        base = 2 * n + self.per_node * np.arange(m)
        if reactive_only:
            cols[:, 2] = -1
            cols[:, 3] = base
        else:
            cols[:, 2] = base
            cols[:, 3] = base + 1
        self.local_cols = cols
        # rows hit by the slack of each enabled node-phase (swing rows are not)
        active = ~net_eq.swing[self.slack_nodes]
        self.active = active

    def slack_matrix(self, z) -> np.ndarray:
        n = self.net.n
        s = np.zeros((len(self.enabled), 2))
        flat = z[2 * n:]
        if self.reactive_only:
            s[:, 1] = flat
        else:
            s[:] = flat.reshape(-1, 2)
        return s

    def _terms(self, z) -> SlackTerms:
        n = self.net.n
        idx = self.slack_nodes
        vr, vi = z[:n][idx], z[n:2 * n][idx]
        if self.formulation == Formulation.PQ and len(idx):
            d = vr * vr + vi * vi
            if d.min() < VOLTAGE_GUARD**2:
                k = idx[int(np.argmin(d))]
                raise VoltageCollapse(self.net.nodes[k], float(np.sqrt(d.min())))
        return analytic_derivatives(self.formulation, self.slack_matrix(z), vr, vi)

    def residual(self, z) -> np.ndarray:
        n = self.net.n
        c = self.net.residual(z[:2 * n])
        t = self._terms(z)
        idx = self.slack_nodes[self.active]
        c[idx] -= t.h[self.active, 0]
        c[n + idx] -= t.h[self.active, 1]
        return c

    def objective(self, z) -> float:
        return float(np.sum(self._terms(z).g))

    def objective_gradient(self, z) -> np.ndarray:
        t = self._terms(z)
        out = np.zeros(self.size)
        cols = self.local_cols
        for k in range(4):
            ok = cols[:, k] >= 0
            np.add.at(out, cols[ok, k], t.g_grad[ok, k])
        return out

    def jacobian(self, z) -> sp.csr_matrix:
        n = self.net.n
        Jn = self.net.jacobian(z[:2 * n])
        Jn = sp.csr_matrix((Jn.data, Jn.indices, Jn.indptr), shape=(2 * n, self.size))
        t = self._terms(z)
        rows, cols, vals = [], [], []
        act = np.flatnonzero(self.active)
        for comp in range(2):
            r = self.slack_nodes[act] + comp * n
            for k in range(4):
                c = self.local_cols[act, k]
                ok = c >= 0
                rows.append(r[ok])
                cols.append(c[ok])
                vals.append(-t.h_grad[act, comp, k][ok])
        J = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(2 * n, self.size))
        return (Jn + J).tocsr()

    def hessian(self, z, lam, obj_weight: float = 1.0) -> sp.csr_matrix:
        """Hessian of ``obj_weight * sum(g) - lam . (f - h)`` with respect to z."""
        n = self.net.n
        rows, cols, vals = [], [], []
        # load currents enter f with + sign
        idx, (_, _, lh) = self.net.load_terms(z[:n], z[n:2 * n])
        if idx.size:
            w = lam[idx][:, None, None] * lh[:, 0] + lam[n + idx][:, None, None] * lh[:, 1]
            lc = np.stack([idx, n + idx], axis=-1)
            for a in range(2):
                for b in range(2):
                    rows.append(lc[:, a])
                    cols.append(lc[:, b])
                    vals.append(-w[:, a, b])
        t = self._terms(z)
        if len(self.enabled):
            lam_r = np.where(self.active, lam[self.slack_nodes], 0.0)
            lam_i = np.where(self.active, lam[n + self.slack_nodes], 0.0)
            # -lam . (-h) = +lam . h
            w = obj_weight * t.g_hess + lam_r[:, None, None] * t.h_hess[:, 0] + lam_i[:, None, None] * t.h_hess[:, 1]
            lc = self.local_cols
            for a in range(4):
                for b in range(4):
                    ok = (lc[:, a] >= 0) & (lc[:, b] >= 0)
                    rows.append(lc[ok, a])
                    cols.append(lc[ok, b])
                    vals.append(w[ok, a, b])
        if not rows:
            return sp.csr_matrix((self.size, self.size))
        H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.size, self.size))
        return H.tocsr()

    def injections(self, z) -> np.ndarray:
        """Complex power injected by each enabled slack source."""
        n = self.net.n
        idx = self.slack_nodes
        return injected_power(self.formulation, self.slack_matrix(z), z[:n][idx], z[n:2 * n][idx])
