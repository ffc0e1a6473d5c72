"""Independent reference computations shared by the unit and acceptance tests."""
import numpy as np

from voltchain.grid import OperatingPoint, solve_voltage


def bump(op, bus, dp=0.0, dq=0.0):
    p, q = dict(op.inj_p), dict(op.inj_q)
    p[bus] += dp
    q[bus] += dq
    return OperatingPoint(p, q)


def fd_columns(net, j, h=1e-4):
    """Central differences of every bus voltage w.r.t. P and Q injected at ``j``."""
    op = OperatingPoint.from_network(net)
    vp = solve_voltage(net, bump(op, j, dp=h)).v
    vm = solve_voltage(net, bump(op, j, dp=-h)).v
    wp = solve_voltage(net, bump(op, j, dq=h)).v
    wm = solve_voltage(net, bump(op, j, dq=-h)).v
    return ({i: (vp[i] - vm[i]) / (2 * h) for i in vp},
            {i: (wp[i] - wm[i]) / (2 * h) for i in wp})


def max_fd_error(net, sens, h=1e-4):
    worst = 0.0
    for j in net.bus_ids:
        fp, fq = fd_columns(net, j, h)
        for i in net.bus_ids:
            worst = max(worst, abs(fp[i] - sens.p(i, j)), abs(fq[i] - sens.q(i, j)))
    return worst


def brute_force_dispatch(sp, sq, dv, dev, pr_q, pr_p, alpha, dt, n=40001):
    """Grid search along the constraint line, parametrised by whichever variable is free.

    Returns the best grid cost and the largest amount by which it can exceed the
    true optimum (cost slope along the line times the grid spacing), or None.
    """
    plo, phi = dev.p_bounds
    if sq > 1e-15:
        dp = np.linspace(plo - dev.p_set, phi - dev.p_set, n)
        dq = (dv - sp * dp) / sq
        slope = (pr_q * sp / sq + alpha * pr_p) * dt
    else:
        if sp <= 1e-15:
            return None
        dq = np.linspace(-dev.q_max - dev.q_set, dev.q_max - dev.q_set, n)
        dp = np.full(n, dv / sp)
        slope = pr_q * dt
    p, q = dev.p_set + dp, dev.q_set + dq
    ok = (p >= plo) & (p <= phi) & (np.abs(q) <= dev.q_max) & (np.hypot(p, q) <= dev.s_max)
    if not ok.any():
        return None
    cost = pr_q * np.abs(dq) * dt + alpha * pr_p * np.maximum(-dp, 0.0) * dt
    cost = np.where(ok, cost, np.inf)
    h = abs(dp[1] - dp[0]) if sq > 1e-15 else abs(dq[1] - dq[0])
    return float(cost.min()), slope * h
