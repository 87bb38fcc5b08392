"""Three-phase power flow by Newton-Raphson on the current-injection equations."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linsys import LinearSolver, SingularityReport
from .model import Network, PhasorState
from .stamping import NetworkEquations, VoltageCollapse, max_branch_admittance


@dataclass(frozen=True)
class NewtonOptions:
    tol_residual: float = 1e-8
    max_iters: int = 100
    step_damping: float = 1.0
    flat_start: bool = True

    def __post_init__(self):
        if not self.tol_residual > 0:
            raise ValueError("tol_residual must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.step_damping <= 1:
            raise ValueError("step_damping must lie in (0, 1]")


def geometric_gammas(decay: float = 0.3, max_steps: int = 20) -> tuple:
    """1, decay, decay**2, ... ending with an exact 0 after ``max_steps`` entries."""
    return tuple(decay**k for k in range(max_steps - 1)) + (0.0,)


@dataclass(frozen=True)
class HomotopySchedule:
    gammas: tuple = field(default_factory=geometric_gammas)
    g_short: Optional[float] = None  # None: 1e3 x largest branch admittance

    def __post_init__(self):
        g = self.gammas
        if not g or g[-1] != 0.0:
            raise ValueError("homotopy schedule must end at exactly 0")
        if any(b >= a for a, b in zip(g, g[1:])):
            raise ValueError("homotopy schedule must be strictly decreasing")

    def shorting_admittance(self, network: Network) -> float:
        if self.g_short is not None:
            return self.g_short
        return 1e3 * max(max_branch_admittance(network), 1.0)


class NonConvergence(RuntimeError):
    def __init__(self, message, iterations=0, residual=float("nan"), gamma=None):
        self.iterations = iterations
        self.residual = residual
        self.gamma = gamma
        super().__init__(message)


@dataclass
class PowerFlowResult:
    state: PhasorState
    iterations: int
    residual: float
    residual_history: list
    homotopy_steps: int = 0


def newton(eqs: NetworkEquations, x0, options: NewtonOptions, solver: LinearSolver | None = None):
    """Iterate ``x <- x - damping * J^-1 f`` until ``|f|_inf <= tol``.

    Returns ``(x, iterations, history)``. Convergence is tested after each
    update, so iterations counts Newton updates and is at least 1.
    """
    solver = solver or LinearSolver()
    x = np.array(x0, dtype=float)
    history = []
    for it in range(options.max_iters + 1):
        try:
            f = eqs.residual(x)
        except VoltageCollapse as exc:
            raise NonConvergence(str(exc), it, float("inf")) from None
        err = float(np.abs(f).max(initial=0.0))
        history.append(err)
        if err <= options.tol_residual and it > 0:
            return x, it, history
        if it == options.max_iters or not np.isfinite(err) or err > 1e12:
            break
        try:
            dx = solver.solve(eqs.jacobian(x), -f)
        except SingularityReport as exc:
            raise NonConvergence(f"singular Jacobian at iteration {it}: {exc}", it, err) from exc
        x += options.step_damping * dx
    raise NonConvergence(f"no convergence after {it} iterations (|f| = {err:.3e})", it, err)


def solve_powerflow(network: Network, options: NewtonOptions | None = None, x0=None) -> PowerFlowResult:
    options = options or NewtonOptions()
    eqs = NetworkEquations(network)
    if x0 is None:
        x0 = eqs.flat_start()
    x, iters, hist = newton(eqs, x0, options)
    return PowerFlowResult(eqs.state(x), iters, hist[-1], hist)


def homotopy_solve(network: Network, schedule: HomotopySchedule | None = None,
                   options: NewtonOptions | None = None) -> PowerFlowResult:
    """Tx-stepping: solve with shorting conductances in parallel to every branch,
    then shrink them to zero, warm-starting each step from the previous one."""
    schedule = schedule or HomotopySchedule()
    options = options or NewtonOptions()
    g_short = schedule.shorting_admittance(network)
    x = NetworkEquations(network).flat_start()
    total = 0
    hist: list = []
    solver = LinearSolver()
    for gamma in schedule.gammas:
        eqs = NetworkEquations(network, relax=gamma * g_short)
        try:
            x, iters, h = newton(eqs, x, options, solver)
        except NonConvergence as exc:
            raise NonConvergence(f"homotopy step gamma={gamma:.3e}: {exc}", total + exc.iterations,
                                 exc.residual, gamma) from None
        total += iters
        hist.extend(h)
    return PowerFlowResult(eqs.state(x), total, hist[-1], hist, len(schedule.gammas))
