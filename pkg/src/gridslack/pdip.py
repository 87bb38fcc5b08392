"""Primal-dual interior point solver on the perturbed KKT conditions.

For ``min F(z)`` subject to ``c_E(z) = 0`` and ``c_I(z) >= 0`` the solver
drives

    grad F - J_E^T lam - J_I^T mu = 0
    c_E = 0
    mu * c_I - eps = 0

to zero with Newton steps on the full unsymmetric KKT system. Each step is
damped so that ``mu`` and ``c_I`` keep at least a ``1 - tau`` fraction of
their current values, and ``eps`` is cut geometrically once the residual
at the current ``eps`` falls below ``10 * eps``.

Any object with ``n_var``, ``n_eq``, ``n_ineq`` and the callbacks
``objective``, ``gradient``, ``equality``, ``equality_jacobian``,
``inequality``, ``inequality_jacobian``, ``lagrangian_hessian`` can be solved.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .linsys import LinearSolver, SingularityReport
from .powerflow import HomotopySchedule
from .stamping import VoltageCollapse
from .tpia import SolveReport, TpiaProblem, classify

log = logging.getLogger(__name__)

_MU_CLAMP = (1e-6, 1e3)


@dataclass(frozen=True)
class PdipOptions:
    tol_kkt: float = 1e-6
    eps0: float = 1e-2
    eps_factor: float = 0.2
    tau: float = 0.995
    max_iters: int = 300
    # barrier floor; termination also needs eps <= tol_kkt / 10. The barrier
    # pulls voltages toward mid-band, which cheap slack can follow, so a low
    # floor keeps feasible networks at numerically zero slack.
    eps_min: float = 1e-12
    # extra Newton steps at the final eps once converged; cheap (quadratic
    # convergence) and keeps summed slack noise well below the zero-slack tolerance
    polish_steps: int = 3
    polish_factor: float = 1e-4
    # backtrack on the KKT residual norm; without it undamped Newton wanders
    # on problems with no active inequalities
    line_search: bool = True
    min_step: float = 1e-10
    trace: Optional[Callable] = None  # called with (iteration, eps, kkt_inf, eta)

    def __post_init__(self):
        for name in ("tol_kkt", "eps0", "eps_factor", "max_iters", "eps_min", "min_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if not self.eps_factor < 1:
            raise ValueError("eps_factor must be < 1")


@dataclass
class KktIterate:
    z: np.ndarray  # primal: voltages and slack sources
    lam: np.ndarray  # equality duals
    mu: np.ndarray  # inequality duals, strictly positive
    eps: float  # barrier parameter

    def copy(self) -> "KktIterate":
        return KktIterate(self.z.copy(), self.lam.copy(), self.mu.copy(), self.eps)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.z, self.lam, self.mu])


@dataclass
class StepReport:
    eta: float
    kkt_inf: float
    eps: float


class Stall(RuntimeError):
    def __init__(self, message, iterate=None, iterations=0, kkt_inf=float("nan")):
        self.iterate = iterate
        self.iterations = iterations
        self.kkt_inf = kkt_inf
        super().__init__(message)


@dataclass
class PdipResult:
    iterate: KktIterate
    iterations: int
    kkt_inf: float
    history: list = field(default_factory=list)


class InteriorViolation(ValueError):
    pass


def kkt_residual(problem, it: KktIterate) -> np.ndarray:
    """Stacked [stationarity; primal feasibility; perturbed complementarity]."""
    z = it.z
    c = problem.inequality(z)
    if c.size and (np.any(c <= 0) or np.any(it.mu <= 0)):
        raise InteriorViolation("iterate is not strictly interior")
    rd = problem.gradient(z) - problem.equality_jacobian(z).T @ it.lam
    if c.size:
        rd = rd - problem.inequality_jacobian(z).T @ it.mu
    rp = problem.equality(z)
    rc = it.mu * c - it.eps
    return np.concatenate([rd, rp, rc])


def kkt_jacobian(problem, it: KktIterate) -> sp.csc_matrix:
    """Jacobian of ``kkt_residual`` with respect to (z, lam, mu)."""
    z = it.z
    H = problem.lagrangian_hessian(z, it.lam, it.mu)
    JE = problem.equality_jacobian(z)
    c = problem.inequality(z)
    JI = problem.inequality_jacobian(z)
    m, p = problem.n_eq, problem.n_ineq
    if not p:
        return sp.bmat([[H, -JE.T], [JE, sp.csr_matrix((m, m))]], format="csc")
    return sp.bmat(
        [
            [H, -JE.T, -JI.T],
            [JE, sp.csr_matrix((m, m)), None],
            [sp.diags(it.mu) @ JI, None, sp.diags(c)],
        ],
        format="csc",
    )


def initial_iterate(problem, z0, eps0: float) -> KktIterate:
    c = problem.inequality(z0)
    if c.size and np.any(c <= 0):
        raise InteriorViolation("initial point violates an inequality")
    eps = eps0 if problem.n_ineq else 0.0
    mu = np.clip(eps0 / c, *_MU_CLAMP) if c.size else np.zeros(0)
    return KktIterate(np.array(z0, dtype=float), np.zeros(problem.n_eq), mu, eps)


def _max_step(v, dv, tau):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


def pdip_step(problem, it: KktIterate, options: PdipOptions, solver: LinearSolver | None = None):
    """One damped Newton step on the KKT system; returns (new iterate, StepReport)."""
    solver = solver or LinearSolver()
    n, m = problem.n_var, problem.n_eq
    r = kkt_residual(problem, it)
    d = solver.solve(kkt_jacobian(problem, it), -r)
    dz, dlam, dmu = d[:n], d[n:n + m], d[n + m:]
    c = problem.inequality(it.z)
    eta = 1.0
    if c.size:
        dc = problem.inequality_jacobian(it.z) @ dz
        eta = min(_max_step(it.mu, dmu, options.tau), _max_step(c, dc, options.tau))
    # the inequalities are nonlinear: verify the bound on the actual constraint
    # values, then backtrack until the KKT residual norm decreases
    r_norm = float(np.linalg.norm(r))
    while True:
        if eta < options.min_step:
            raise Stall("step length underflow", it)
        z_new = it.z + eta * dz
        try:
            c_new = problem.inequality(z_new)
            ok = not c.size or np.all(c_new >= (1 - options.tau) * c)
            if ok:
                new = KktIterate(z_new, it.lam + eta * dlam, it.mu + eta * dmu, it.eps)
                r_new = kkt_residual(problem, new)
                ok = not options.line_search or \
                    float(np.linalg.norm(r_new)) <= (1 - 1e-4 * eta) * r_norm
        except (VoltageCollapse, InteriorViolation):
            ok = False
        if ok:
            break
        eta *= 0.5
    return new, StepReport(eta, float(np.abs(r_new).max(initial=0.0)), it.eps)


def _eps_floor(options: PdipOptions) -> float:
    return min(options.eps_min, options.tol_kkt / 10)


def _update_barrier(problem, it: KktIterate, kkt: float, options: PdipOptions) -> float:
    floor = _eps_floor(options)
    while it.eps > floor and kkt <= 10 * it.eps:
        it.eps *= options.eps_factor
        kkt = float(np.abs(kkt_residual(problem, it)).max(initial=0.0))
    return kkt


def minimize(problem, z0=None, options: PdipOptions | None = None, start: KktIterate | None = None,
             solver: LinearSolver | None = None) -> PdipResult:
    """Run interior-point iterations until the KKT residual is below ``tol_kkt``."""
    options = options or PdipOptions()
    solver = solver or LinearSolver()
    it = start.copy() if start is not None else initial_iterate(problem, z0, options.eps0)
    floor = _eps_floor(options)
    history = []
    kkt = float(np.abs(kkt_residual(problem, it)).max(initial=0.0))
    kkt = _update_barrier(problem, it, kkt, options)
    for k in range(1, options.max_iters + 1):
        if kkt <= options.tol_kkt and it.eps <= floor:
            return _polish(problem, it, kkt, k - 1, history, options, solver)
        try:
            it, rep = pdip_step(problem, it, options, solver)
        except (SingularityReport, InteriorViolation) as exc:
            raise Stall(f"{type(exc).__name__}: {exc}", it, k - 1, kkt) from None
        except Stall as exc:
            raise Stall(str(exc), it, k - 1, kkt) from None
        kkt = rep.kkt_inf
        if not np.isfinite(kkt) or kkt > 1e14:
            raise Stall("KKT residual diverged", it, k, kkt)
        history.append((k, it.eps, kkt, rep.eta))
        if options.trace is not None:
            options.trace(k, it.eps, kkt, rep.eta)
        kkt = _update_barrier(problem, it, kkt, options)
    if kkt <= options.tol_kkt and it.eps <= floor:
        return PdipResult(it, options.max_iters, kkt, history)
    raise Stall(f"no convergence in {options.max_iters} iterations (|KKT| = {kkt:.3e})", it,
                options.max_iters, kkt)


def _polish(problem, it, kkt, k, history, options, solver) -> PdipResult:
    target = options.tol_kkt * options.polish_factor
    for _ in range(options.polish_steps):
        if kkt <= target:
            break
        try:
            new, rep = pdip_step(problem, it, options, solver)
        except (Stall, SingularityReport, InteriorViolation):
            break
        if not rep.kkt_inf < kkt:
            break
        it, kkt, k = new, rep.kkt_inf, k + 1
        history.append((k, it.eps, kkt, rep.eta))
        if options.trace is not None:
            options.trace(k, it.eps, kkt, rep.eta)
    return PdipResult(it, k, kkt, history)


def _report(problem: TpiaProblem, res: PdipResult, iterations, homotopy_steps, history) -> SolveReport:
    z = res.iterate.z
    inj = problem.injections(z)
    total = float(np.sum(np.abs(inj.real)) + np.sum(np.abs(inj.imag)))
    return SolveReport(
        status=classify(total),
        formulation=problem.formulation,
        reactive_only=problem.reactive_only,
        iterations=iterations,
        state=problem.state(z),
        slack=problem.slack_variables(z),
        injections=inj,
        kkt_residual=res.kkt_inf,
        objective=problem.objective(z),
        homotopy_used=homotopy_steps > 0,
        homotopy_steps=homotopy_steps,
        trace=history,
        final_eps=res.iterate.eps,
    )


def _failed(problem: TpiaProblem, message: str, iterations: int, kkt: float, homotopy_steps=0) -> SolveReport:
    return SolveReport(
        status="failed",
        formulation=problem.formulation,
        reactive_only=problem.reactive_only,
        iterations=iterations,
        state=None,
        slack=None,
        injections=np.zeros(len(problem.enabled), dtype=complex),
        kkt_residual=kkt,
        homotopy_used=homotopy_steps > 0,
        homotopy_steps=homotopy_steps,
        message=message,
    )


def _homotopy(problem: TpiaProblem, options: PdipOptions, schedule: HomotopySchedule, spent: int):
    """Tx-stepping outer loop: solve relaxed problems with shrinking shorting conductance."""
    g_short = schedule.shorting_admittance(problem.network)
    total = spent
    history: list = []
    start = None
    solver = LinearSolver()
    res = None
    for gamma in schedule.gammas:
        prob = problem.relaxed(gamma * g_short) if gamma > 0 else problem
        if start is None:
            z0 = prob.initial_point()
            warm = None
        else:
            # warm start primal and equality duals; re-centre the inequality duals
            warm = initial_iterate(prob, start.z, options.eps0)
            warm.lam = start.lam.copy()
            z0 = None
        try:
            res = minimize(prob, z0, options, start=warm, solver=solver)
        except Stall as exc:
            raise Stall(f"homotopy step gamma={gamma:.3e}: {exc}", exc.iterate, total + exc.iterations,
                        exc.kkt_inf) from None
        total += res.iterations
        history.extend(res.history)
        start = res.iterate
    return res, total, history


def solve(problem: TpiaProblem, options: PdipOptions | None = None, homotopy: str = "auto",
          schedule: HomotopySchedule | None = None) -> SolveReport:
    """Solve a TPIA problem; ``homotopy`` is ``"off"``, ``"on"`` or ``"auto"`` (on stall)."""
    options = options or PdipOptions()
    schedule = schedule or HomotopySchedule()
    if homotopy not in ("auto", "on", "off"):
        raise ValueError(f"unknown homotopy mode {homotopy!r}")
    spent = 0
    message = ""
    if homotopy != "on":
        try:
            res = minimize(problem, problem.initial_point(), options)
            return _report(problem, res, res.iterations, 0, res.history)
        except Stall as exc:
            spent = exc.iterations
            message = str(exc)
            log.info("direct PDIP stalled (%s)", exc)
            if homotopy == "off":
                return _failed(problem, message, spent, exc.kkt_inf)
    try:
        res, total, history = _homotopy(problem, options, schedule, spent)
    except Stall as exc:
        msg = f"{message}; {exc}" if message else str(exc)
        return _failed(problem, msg, exc.iterations, exc.kkt_inf, len(schedule.gammas))
    return _report(problem, res, total, len(schedule.gammas), history)
