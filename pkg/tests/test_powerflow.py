import numpy as np
import pytest

from oracles import two_bus_v2_roots, two_bus_voltage
from gridslack.casegen import GenSpec, case3_unbalanced, case13_radial, generate, two_bus
from gridslack.model import Network
from gridslack.powerflow import (
    HomotopySchedule,
    NewtonOptions,
    NonConvergence,
    geometric_gammas,
    homotopy_solve,
    solve_powerflow,
)
from gridslack.stamping import NetworkEquations, assemble_admittance


def test_zero_load_converges_in_one_iteration_to_flat_profile():
    net = case13_radial()
    net = Network(buses=net.buses, branches=net.branches, transformers=net.transformers, sources=net.sources)
    res = solve_powerflow(net)
    assert res.iterations == 1
    eq = NetworkEquations(net)
    flat = eq.flat_start()
    x = np.concatenate([res.state.vr, res.state.vi])
    # transformers shift and scale voltages, so compare against the linear solve
    assert np.abs(eq.residual(x)).max() <= 1e-12
    assert np.abs(x - flat).max() < 0.2


def test_zero_load_line_network_is_exactly_flat():
    net = generate(GenSpec(n_buses=20, load_density=0.0, seed=4))
    res = solve_powerflow(net)
    assert res.iterations == 1
    np.testing.assert_allclose(res.state.magnitude(), 1.0, atol=1e-12)


def test_two_bus_unity_power_factor():
    res = solve_powerflow(two_bus(p_load=1.0))
    v2 = res.state.as_dict()[("2", "A")]
    assert abs(v2) == pytest.approx(two_bus_voltage(1.0), abs=1e-9)
    assert abs(v2) == pytest.approx(0.9949361530, abs=1e-9)
    # 0.98987 is the larger root of the quadratic in V^2
    assert two_bus_v2_roots(1.0)[0] == pytest.approx(0.98987, abs=5e-5)


def test_two_bus_near_the_nose():
    res = solve_powerflow(two_bus(p_load=4.9))
    assert abs(res.state.as_dict()[("2", "A")]) == pytest.approx(0.774273042092169, abs=1e-9)


def test_two_bus_beyond_loadability_fails():
    assert np.isnan(two_bus_v2_roots(6.0)[0])
    with pytest.raises(NonConvergence) as exc:
        solve_powerflow(two_bus(p_load=6.0))
    assert exc.value.iterations >= 1


def test_residual_tolerance_met():
    for net in (case3_unbalanced(), case13_radial()):
        res = solve_powerflow(net)
        assert res.residual <= NewtonOptions().tol_residual


def test_quadratic_convergence():
    res = solve_powerflow(two_bus(p_load=4.9))
    h = res.residual_history
    ratios = [b / a**2 for a, b in zip(h, h[1:]) if a < 1e-3 and b > 1e-14]
    assert ratios and max(ratios) <= 10
    res = solve_powerflow(case13_radial())
    h = res.residual_history
    ratios = [b / a**2 for a, b in zip(h, h[1:]) if a < 1e-3 and b > 1e-14]
    assert max(ratios, default=0.0) <= 10


def test_power_balance():
    for net in (case3_unbalanced(), case13_radial(), generate(GenSpec(n_buses=25, seed=2))):
        st = solve_powerflow(net).state
        swing_id = net.swing_buses()[0].id
        Y = assemble_admittance(net).Y.tocsr()
        v = st.vr + 1j * st.vi
        s_out = v * np.conj(Y @ v)  # injection into the network at each node
        swing = np.array([b == swing_id for b, _ in st.index])
        generation = s_out[swing].sum()
        absorbed = -s_out[~swing].sum()  # delivered to loads at non-swing nodes
        losses = s_out.sum()  # I^2 R + j I^2 X over series and shunt elements
        loads = sum(complex(ld.p, ld.q) * net.load_scale for ld in net.loads)
        assert abs(absorbed - loads) <= 1e-6
        assert abs(generation - (loads + losses)) <= 1e-6


def test_schedule_validation():
    with pytest.raises(ValueError):
        HomotopySchedule((1.0, 0.5))
    with pytest.raises(ValueError):
        HomotopySchedule((1.0, 1.0, 0.0))
    g = geometric_gammas(0.3, 20)
    assert len(g) == 20 and g[0] == 1.0 and g[-1] == 0.0
    with pytest.raises(ValueError):
        NewtonOptions(tol_residual=0)
    with pytest.raises(ValueError):
        NewtonOptions(step_damping=1.5)


def test_homotopy_zero_schedule_equals_newton():
    net = case13_radial()
    a = solve_powerflow(net)
    b = homotopy_solve(net, HomotopySchedule((0.0,)))
    assert a.iterations == b.iterations
    np.testing.assert_array_equal(a.state.vr, b.state.vr)


def test_relaxed_network_is_near_shorted():
    for net in (case3_unbalanced(), case13_radial()):
        sched = HomotopySchedule()
        g = sched.shorting_admittance(net)
        res = solve_powerflow_relaxed(net, g)
        v = res.vr + 1j * res.vi
        eq = NetworkEquations(net)
        flat = eq.flat_start()
        vs = flat[: eq.n] + 1j * flat[eq.n:]
        # transformers are paralleled too, so the relaxed profile tracks the ideal-ratio flat start
        assert np.abs(v - vs).max() <= 1e-3


def solve_powerflow_relaxed(net, relax):
    from gridslack.powerflow import newton

    eq = NetworkEquations(net, relax=relax)
    x, _, _ = newton(eq, eq.flat_start(), NewtonOptions())
    return eq.state(x)


def test_homotopy_matches_direct_newton():
    for net in (case3_unbalanced(), case13_radial(), two_bus(p_load=3.5)):
        a = solve_powerflow(net)
        b = homotopy_solve(net)
        assert b.homotopy_steps == len(HomotopySchedule().gammas)
        assert np.abs(a.state.vr - b.state.vr).max() <= 1e-8
        assert np.abs(a.state.vi - b.state.vi).max() <= 1e-8


def test_homotopy_reports_failing_gamma():
    with pytest.raises(NonConvergence) as exc:
        homotopy_solve(two_bus(p_load=6.0))
    assert exc.value.gamma is not None


def test_conductance_stepping_dips_below_lossless_loadability():
    # a conductance g in parallel with the 10 p.u. susceptance serves at most
    # |y|^2 / (2 (|y| + g)) at unity power factor, which bottoms out at 3.849 p.u.
    g = np.linspace(0.0, 50.0, 50001)
    y = np.abs(g - 10j)
    assert (y**2 / (2 * (y + g))).min() == pytest.approx(20 / (3 * np.sqrt(3)), rel=1e-6)
    solve_powerflow(two_bus(p_load=4.0))
    with pytest.raises(NonConvergence):
        homotopy_solve(two_bus(p_load=4.0))
