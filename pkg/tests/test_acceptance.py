"""Acceptance criteria. Each test carries a ``criterion`` marker; the session
summary prints one PASS/FAIL line per criterion with the measured values."""
import io
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from oracles import central_jacobian, two_bus_slack_grid, two_bus_voltage
from gridslack import cli
from gridslack.casegen import (
    GenSpec,
    case2_overload,
    case3_unbalanced,
    case13_radial,
    case13_radial_stressed,
    generate,
    scale_loads,
    two_bus,
)
from gridslack.model import Formulation, VoltageBounds
from gridslack.pdip import KktIterate, kkt_jacobian, kkt_residual, solve
from gridslack.powerflow import NonConvergence, solve_powerflow
from gridslack.stamping import analytic_derivatives, injected_power
from gridslack.tpia import apply_compensation, build_problem, capacitive_ratings, default_enabled, localize

MODES = (("I", False), ("PQ", False), ("PQ", True), ("GB", False), ("GB", True))
BOUNDS = VoltageBounds(0.9, 1.1)


def detail(record_property, text):
    record_property("detail", text)


def feasible_feeders():
    """Seeded light-load feeders: radial and meshed, mixed phasing."""
    return [generate(GenSpec(n_buses=12 + 4 * (s % 8), p_range=(0.005, 0.02), meshed_links=s % 3, seed=s))
            for s in range(20)]


def stressed_desk_cases():
    """Overloaded desk cases: the 2-bus nose case, the 13-bus feeder at two
    factors, and ten generated feeders at 16x their base load."""
    cases = [("case2_overload", case2_overload()),
             ("case13x3", scale_loads(case13_radial(), 3.0)),
             ("case13x4", scale_loads(case13_radial(), 4.0))]
    for k in range(10):
        net = generate(GenSpec(n_buses=14 + 2 * (k % 4), meshed_links=k % 2, seed=100 + k))
        cases.append((f"gen{100 + k}x16", scale_loads(net, 16.0)))
    return cases


@pytest.fixture(scope="module")
def stressed_runs():
    out = {}
    for name, net in stressed_desk_cases():
        for form, ro in MODES:
            out[(name, form, ro)] = solve(build_problem(net, form, BOUNDS, reactive_only=ro))
    return out


# ---------------------------------------------------------------------------


@pytest.mark.criterion(1, "zero-slack soundness on 20 feasible feeders")
def test_criterion_01_zero_slack_soundness(record_property):
    t0 = time.perf_counter()
    worst_s = worst_v = 0.0
    n = 0
    for net in feasible_feeders():
        pf = solve_powerflow(net)
        v_pf = pf.state.complex
        m = np.abs(v_pf)
        assert 0.9 < m.min() and m.max() < 1.1  # strictly inside the bounds
        for form, ro in MODES:
            rep = solve(build_problem(net, form, BOUNDS, reactive_only=ro))
            assert rep.status == "feasible", (form, ro, rep.total_s)
            worst_s = max(worst_s, rep.total_p + rep.total_q)
            worst_v = max(worst_v, float(np.abs(rep.state.complex - v_pf).max()))
            n += 1
    elapsed = time.perf_counter() - t0
    detail(record_property, f"{n} solves, max sum|S|={worst_s:.1e}, max dV={worst_v:.1e}, {elapsed:.1f}s")
    assert worst_s <= 1e-6
    assert worst_v <= 1e-5
    assert elapsed <= 60


@pytest.mark.criterion(2, "two-bus analytic loadability and slack localization")
def test_criterion_02_two_bus_loadability(record_property):
    res = solve_powerflow(two_bus(p_load=4.9))
    v2 = abs(res.state.as_dict()[("2", "A")])
    err = abs(v2 - two_bus_voltage(4.9))
    assert err <= 1e-6
    with pytest.raises(NonConvergence):
        solve_powerflow(two_bus(p_load=6.0))
    net = case2_overload()
    located = 0
    for bounds in (BOUNDS, None):
        for form, ro in MODES:
            rep = solve(build_problem(net, form, bounds, reactive_only=ro))
            assert rep.status == "infeasible"
            assert [(b, p) for b, p, *_ in localize(rep)] == [("2", "A")]
            located += 1
    # enabling a slack at the swing bus too: the optimum still sits at the load bus
    rep = solve(build_problem(net, "PQ", BOUNDS, enabled=[("1", "A"), ("2", "A")]))
    loc = localize(rep)
    assert loc[0][:2] == ("2", "A")
    assert all(abs(complex(p, q)) < 1e-6 for b, _, p, q in loc if b == "1")
    detail(record_property, f"|V2|(P=4.9)={v2:.12f} err={err:.1e}; P=6 NonConvergence; "
                            f"{located + 1}/{located + 1} runs localize to bus 2")


@pytest.mark.criterion(3, "TPIA-PQ optimum vs brute-force grid (2-bus, P=6)")
def test_criterion_03_grid_oracle(record_property):
    t0 = time.perf_counter()
    rep = solve(build_problem(case2_overload(), "PQ", BOUNDS))
    ps, qs = rep.slack.values[0]
    obj = ps * ps + qs * qs
    gp, gq, gobj = two_bus_slack_grid(6.0, 0.1, 0.9, 1.1, step=1e-3)
    # the objective is flat along the |V2| = 0.9 curve, so the 1e-3 grid pins the
    # objective but not the argmin; a 1e-5 brute-force pass around it pins both
    fp, fq, fobj = two_bus_slack_grid(6.0, 0.1, 0.9, 1.1, step=1e-5,
                                      span_p=(gp - 0.01, gp + 0.01), span_q=(gq - 0.01, gq + 0.01))
    elapsed = time.perf_counter() - t0
    detail(record_property,
           f"TPIA ({ps:.6f}, {qs:.6f}) obj {obj:.7f}; grid 1e-3 ({gp:.3f}, {gq:.3f}) obj {gobj:.7f}; "
           f"grid 1e-5 ({fp:.5f}, {fq:.5f}) obj {fobj:.7f}; {elapsed:.1f}s")
    assert abs(obj - gobj) <= 1e-4
    assert abs(obj - fobj) <= 1e-4
    assert max(abs(ps - fp), abs(qs - fq)) <= 2e-3
    assert elapsed <= 120


@pytest.mark.criterion(4, "voltage bounds hold at every converged stressed solution")
def test_criterion_04_bounds(record_property, stressed_runs):
    converged = [r for r in stressed_runs.values() if r.status != "failed"]
    lo = min(r.v_min for r in converged)
    hi = max(r.v_max for r in converged)
    detail(record_property, f"{len(converged)}/{len(stressed_runs)} converged, |V| in [{lo:.10f}, {hi:.10f}]")
    assert len(converged) == len(stressed_runs)
    assert lo >= 0.9 - 1e-8 and hi <= 1.1 + 1e-8
    # the same property on the shipped stressed case with its own tighter bounds
    for form, ro in MODES:
        rep = solve(build_problem(case13_radial_stressed(), form, VoltageBounds(0.95, 1.05), reactive_only=ro))
        assert rep.status != "failed"
        assert rep.v_min >= 0.95 - 1e-8 and rep.v_max <= 1.05 + 1e-8


@pytest.mark.criterion(5, "reactive-only structure (Q: P_f = 0, B: G_s = 0)")
def test_criterion_05_reactive_only(record_property, stressed_runs):
    checked = 0
    for (name, form, ro), rep in stressed_runs.items():
        if not ro:
            continue
        assert np.all(rep.slack.values[:, 0] == 0.0)
        assert np.all(rep.injections.real == 0.0)
        checked += 1
    detail(record_property, f"{checked} reactive-only solutions, all real components exactly 0")
    assert checked > 0


@pytest.mark.criterion(6, "capacitor round-trip on the stressed 13-bus case")
def test_criterion_06_capacitor_round_trip(record_property):
    net = case13_radial_stressed()
    tight = VoltageBounds(0.95, 1.05)
    rep = solve(build_problem(net, "GB", tight, reactive_only=True,
                              ratings=capacitive_ratings(default_enabled(net), "GB")))
    assert rep.status == "infeasible"
    comp = apply_compensation(net, rep)
    again = solve(build_problem(comp, "GB", None, reactive_only=True))
    detail(record_property, f"{len(comp.capacitors) - len(net.capacitors)} capacitors, "
                            f"sum|Q_f|={rep.total_q:.4f}; re-run sum|S|={again.total_s:.1e}, "
                            f"|V| in [{again.v_min:.9f}, {again.v_max:.9f}]")
    assert again.status == "feasible" and again.total_s <= 1e-6
    assert again.v_min >= 0.95 - 1e-8 and again.v_max <= 1.05 + 1e-8


def _random_interior(prob, rng):
    z = prob.initial_point()
    n = prob.n_nodes
    ok = False
    while not ok:
        w = z.copy()
        scale = rng.uniform(0.92, 1.08, n)
        rot = np.exp(1j * rng.uniform(-0.2, 0.2, n))
        v = (w[:n] + 1j * w[n:2 * n]) * scale * rot
        w[:n], w[n:2 * n] = v.real, v.imag
        w[2 * n:] = rng.normal(0.0, 0.3, prob.n_var - 2 * n)
        if len(prob.rating_lo):
            cols = prob.rating_lo[:, 0].astype(int)
            w[cols] = np.abs(w[cols]) + 1e-3
        ok = bool(np.all(prob.inequality(w) > 0))
    return KktIterate(w, rng.standard_normal(prob.n_eq), rng.uniform(1e-3, 2.0, prob.n_ineq),
                      float(rng.uniform(1e-6, 1e-2)))


@pytest.mark.criterion(7, "analytic KKT Jacobian vs central differences")
def test_criterion_07_kkt_derivatives(record_property):
    net = case3_unbalanced()
    rng = np.random.default_rng(2024)
    worst = {}
    for form, ro in MODES:
        ratings = None if form == "I" else capacitive_ratings(default_enabled(net), form)
        prob = build_problem(net, form, BOUNDS, reactive_only=ro, ratings=ratings)
        n, m = prob.n_var, prob.n_eq
        w = 0.0
        for _ in range(100):
            it = _random_interior(prob, rng)
            J = kkt_jacobian(prob, it).toarray()

            def r(x):
                return kkt_residual(prob, KktIterate(x[:n], x[n:n + m], x[n + m:], it.eps))

            Jfd = central_jacobian(r, it.stacked())
            w = max(w, float(np.abs(J - Jfd).max() / np.abs(J).max()))
        worst[(form, ro)] = w
    label = {("I", False): "I", ("PQ", False): "PQ", ("PQ", True): "Q", ("GB", False): "GB", ("GB", True): "B"}
    detail(record_property, "100 points each, max rel err " +
           ", ".join(f"{label[k]} {v:.1e}" for k, v in worst.items()))
    assert max(worst.values()) <= 1e-5


@pytest.mark.criterion(8, "cross-formulation consistency")
def test_criterion_08_cross_formulation(record_property):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(2000):
        v = complex(rng.uniform(0.2, 1.4), rng.uniform(-1.0, 1.0))
        i = complex(*rng.standard_normal(2))
        s = v * np.conj(i)
        d = abs(v) ** 2
        slacks = {Formulation.I: [[i.real, i.imag]], Formulation.PQ: [[s.real, s.imag]],
                  Formulation.GB: [[-s.real / d, s.imag / d]]}
        ref = None
        for form, sv in slacks.items():
            t = analytic_derivatives(form, np.array(sv), v.real, v.imag)
            sp = injected_power(form, np.array(sv), v.real, v.imag)[0]
            vals = np.array([t.h[0, 0], t.h[0, 1], t.g[0], sp.real, sp.imag])
            if ref is None:
                ref = vals
            else:
                worst = max(worst, float(np.abs(vals - ref).max() / np.abs(ref).max()))
    totals = {}
    spread = {}
    for bounds, tag in ((BOUNDS, "bounds"), (None, "no bounds")):
        t = {f: solve(build_problem(case2_overload(), f, bounds)).total_s for f in ("I", "PQ", "GB")}
        totals[tag] = t
        spread[tag] = max(t.values()) - min(t.values())
    detail(record_property, f"pointwise max rel err {worst:.1e}; total |S| spread " +
           ", ".join(f"{k} {v:.1e} (I {totals[k]['I']:.6f})" for k, v in spread.items()))
    assert worst <= 1e-12
    assert max(spread.values()) <= 1e-4


def directional_harness():
    """Per stressed desk case: TPIA-I, -PQ and -GB totals and whether PQ/GB <= I."""
    rows = []
    for name, net in stressed_desk_cases():
        t = {f: solve(build_problem(net, f, BOUNDS)).total_s for f in ("I", "PQ", "GB")}
        rows.append((name, t["I"], t["PQ"], t["GB"], t["PQ"] <= t["I"] + 1e-6, t["GB"] <= t["I"] + 1e-6))
    return rows


@pytest.mark.criterion(9, "directional check: PQ and GB totals vs I (recorded)")
def test_criterion_09_directional(record_property, stressed_runs):
    a = directional_harness()
    b = directional_harness()
    assert a == b  # the comparison itself is deterministic
    assert len(a) >= 10
    frac_pq = sum(r[4] for r in a) / len(a)
    frac_gb = sum(r[5] for r in a) / len(a)
    strict = sum(r[2] < r[1] - 1e-6 or r[3] < r[1] - 1e-6 for r in a)
    max_gap = max(max(abs(r[2] - r[1]), abs(r[3] - r[1])) for r in a)
    # context: the reactive-only variants minimize over a smaller set but are
    # judged by the same summed |P| + |Q| totals
    names = [r[0] for r in a]
    q_lt = sum(stressed_runs[(n, "PQ", True)].total_s < stressed_runs[(n, "I", False)].total_s - 1e-6 for n in names)
    b_lt = sum(stressed_runs[(n, "GB", True)].total_s < stressed_runs[(n, "I", False)].total_s - 1e-6 for n in names)
    detail(record_property, f"{len(a)} cases: PQ<=I in {frac_pq:.0%}, GB<=I in {frac_gb:.0%} "
                            f"(tol 1e-6); strictly smaller in {strict}; max |total - I| {max_gap:.1e}; "
                            f"Q<I in {q_lt}, B<I in {b_lt}")
    print("\ncase, I, PQ, GB")
    for r in a:
        print(f"{r[0]}, {r[1]:.6f}, {r[2]:.6f}, {r[3]:.6f}")


def _commands(tmp):
    gen_path = os.path.join(tmp, "gen.toml")
    comp_path = os.path.join(tmp, "comp.toml")
    return [
        ["powerflow", "case13_radial"],
        ["powerflow", "case13_radial", "--out", "csv", "--trace"],
        ["powerflow", "case2_overload"],
        ["powerflow", "case2_overload", "--homotopy", "on"],
        *[["tpia", "-f", f, "case13_radial_stressed", "--out", "csv"] for f in ("i", "pq", "q", "gb", "b")],
        ["tpia", "-f", "pq", "case2_overload", "--trace"],
        ["tpia", "-f", "pq", "case2_overload", "--homotopy", "on", "--no-bounds"],
        ["tpia", "-f", "b", "case13_radial_stressed", "--write-compensated", comp_path],
        ["sweep", "case2_overload", "--factors", "0.5:1.2:0.1", "--formulations", "i,pq,q,gb,b"],
        ["gen", "--n", "40", "--seed", "3", "--meshed", "2"],
        ["gen", "--n", "25", "--seed", "9", "-o", gen_path],
        ["validate", gen_path],
        ["validate", "case13_radial"],
    ]


def _snapshot(argv, tmp):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(argv, out, err)
    files = {}
    for name in ("gen.toml", "comp.toml"):
        p = os.path.join(tmp, name)
        if os.path.exists(p):
            with open(p, "rb") as fh:
                files[name] = fh.read()
    return code, out.getvalue(), err.getvalue(), files


@pytest.mark.criterion(10, "byte-identical output across repeated runs")
def test_criterion_10_determinism(record_property, tmp_path):
    tmp = str(tmp_path)
    cmds = _commands(tmp)

    def one_pass():
        for name in ("gen.toml", "comp.toml"):
            if os.path.exists(os.path.join(tmp, name)):
                os.remove(os.path.join(tmp, name))
        return [_snapshot(c, tmp) for c in cmds]

    first = one_pass()
    second = one_pass()
    for c, a, b in zip(cmds, first, second):
        assert a == b, c
    # separate interpreter processes with different hash seeds
    env = dict(os.environ)
    outputs = []
    for seed in ("1", "2"):
        env["PYTHONHASHSEED"] = seed
        env["GRIDSLACK_THREADS"] = seed
        run = []
        for c in (cmds[4], cmds[8], cmds[11], cmds[12]):
            p = subprocess.run([sys.executable, "-m", "gridslack.cli", *c], capture_output=True, env=env)
            run.append((p.returncode, p.stdout, p.stderr))
        outputs.append(run)
    assert outputs[0] == outputs[1]
    codes = sorted({a[0] for a in first})
    detail(record_property, f"{len(cmds)} command lines x2 in-process + 4 x2 subprocesses identical; "
                            f"exit codes seen {codes}")
