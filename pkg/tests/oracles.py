"""Reference computations that do not share code with the package."""
import numpy as np


def two_bus_v2_roots(p, q=0.0, x=0.1, v1=1.0):
    """Both roots V^2 of V^4 - (V1^2 - 2QX) V^2 + X^2 (P^2 + Q^2) = 0 (NaN when complex)."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    b = v1 * v1 - 2.0 * q * x
    disc = b * b - 4.0 * x * x * (p * p + q * q)
    with np.errstate(invalid="ignore"):
        r = np.sqrt(disc)
    return (b + r) / 2.0, (b - r) / 2.0


def two_bus_voltage(p, q=0.0, x=0.1, v1=1.0):
    """High-voltage (operable) magnitude at the load bus."""
    hi, _ = two_bus_v2_roots(p, q, x, v1)
    return float(np.sqrt(hi))


def two_bus_slack_grid(p_load, x=0.1, vmin=0.9, vmax=1.1, step=1e-3, span_p=(0.0, 2.0), span_q=None):
    """Brute-force minimum of P_s^2 + Q_s^2 over a grid of slack injections.

    A grid point is admissible when the 2-bus network with net load
    (p_load - P_s) + j(0 - Q_s) has a voltage solution inside [vmin, vmax].
    Returns (P_s, Q_s, objective).
    """
    span_q = span_p if span_q is None else span_q
    ap = np.arange(span_p[0], span_p[1] + step / 2, step)
    aq = np.arange(span_q[0], span_q[1] + step / 2, step)
    ps, qs = np.meshgrid(ap, aq, indexing="ij")
    hi, lo = two_bus_v2_roots(p_load - ps, -qs, x)
    ok = np.zeros(ps.shape, dtype=bool)
    for root in (hi, lo):
        with np.errstate(invalid="ignore"):
            ok |= (root >= vmin**2) & (root <= vmax**2)
    obj = np.where(ok, ps * ps + qs * qs, np.inf)
    k = np.unravel_index(np.argmin(obj), obj.shape)
    return float(ps[k]), float(qs[k]), float(obj[k])


def dense_kcl(nodes, Y, v, loads):
    """Dense current-injection mismatch Y V + conj(S / V) for every node."""
    idx = {n: k for k, n in enumerate(nodes)}
    i = Y @ v
    for (node, s) in loads.items():
        k = idx[node]
        i[k] += np.conj(s / v[k])
    return i


def central_jacobian(fun, x, h=1e-6):
    """Central finite-difference Jacobian of a vector function."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x))
    J = np.empty((f0.size, x.size))
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        J[:, k] = (np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * h)
    return J
