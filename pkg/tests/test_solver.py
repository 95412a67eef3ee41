import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linkforge.mechanism import Mechanism, pad_batch
from linkforge.solver import (
    InfeasibleState, Singular, orientation, path_to_svg, simulate, solve_batch, solve_joint,
    trace_gradient, trace_to_csv,
)

from conftest import four_bar, random_mechanisms
from oracles import circle_intersections, side, trace_oracle


def test_identity_timestep():
    out = solve_joint((0, 1), (0, 0), (1, 0), (0, 0), (1, 0))
    np.testing.assert_allclose(out, (0, 1), atol=1e-15)


def test_equilateral_matches_circle_oracle():
    xi0 = np.array([0.5, math.sqrt(3) / 2])
    xj, xk = np.zeros(2), np.array([1.0, 0.0])
    out = solve_joint(xi0, xj, xk, xj, xk)
    hits = circle_intersections(xj, 1.0, xk, 1.0)
    want = next(h for h in hits if side(h, xj, xk) > 0)
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_singular_when_stretched():
    with pytest.raises(Singular):
        solve_joint((0, 1), (0, 0), (1, 1), (0, 0), (2.5, 0))


def test_four_bar_closed_trace(fourbar):
    tb = solve_batch(pad_batch([fourbar]), 360)
    assert tb.feasible[0]
    path = tb.positions[0, 2]
    # one crank turn brings the coupler back to the start
    step = np.hypot(*np.diff(path, axis=0).T).max()
    assert np.hypot(*(path[-1] - path[0])) <= step + 1e-12
    oracle = trace_oracle(fourbar, 360)
    np.testing.assert_allclose(path, oracle[2], atol=1e-12)


def test_four_bar_first_and_last_coincide(fourbar):
    # sampling at theta = 2 pi t / T, the point after the last is the first again
    thetas = 2 * np.pi * np.arange(361) / 360
    b = pad_batch([fourbar])
    P, feas, _ = simulate(b.positions, b.plan, b.fixed_mask, b.node_count, thetas)
    assert feas[0]
    np.testing.assert_allclose(P[0, 2, -1], P[0, 2, 0], atol=1e-6)


def test_t0_reproduces_initial(mechs):
    b = pad_batch(mechs)
    tb = solve_batch(b, 16)
    np.testing.assert_allclose(tb.positions[:, :, 0], b.positions, atol=1e-12)


def test_non_grashof_locks():
    # with the crank pointing away from pivot 3 the gap is 0.5, more than
    # coupler plus rocker (about 0.19), so the crank cannot complete the turn
    m = Mechanism.build(
        [(0, 0), (0.2, 0), (0.25, 0.08), (0.3, 0.0)],
        [True, False, False, True],
        [(0, 1), (1, 2), (2, 3)],
    ).with_order()
    assert trace_oracle(m, 360) is None
    assert not solve_batch(pad_batch([m]), 360).feasible[0]


def test_oracle_agreement_random(mechs):
    b = pad_batch(mechs)
    tb = solve_batch(b, 64)
    for n, m in enumerate(mechs):
        np.testing.assert_allclose(tb.positions[n, : m.n], trace_oracle(m, 64), atol=1e-9, rtol=0)


def test_rigid_and_orientation_invariants(mechs):
    b = pad_batch(mechs)
    P = solve_batch(b, 90).positions
    for n, m in enumerate(mechs):
        x0 = m.positions
        for a, c in m.linkages:
            L0 = np.hypot(*(x0[a] - x0[c]))
            L = np.hypot(*(P[n, a] - P[n, c]).T)
            assert np.abs(L - L0).max() <= 1e-6 * L0
        for i, j, k in m.solve_plan():
            s0 = np.sign(orientation(x0[i], x0[j], x0[k]))
            s = np.sign(orientation(P[n, i], P[n, j], P[n, k]))
            assert (s == s0).all()


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(-1, 1), st.floats(-1, 1), st.integers(0, 19))
def test_rigid_motion_equivariance(angle, tx, ty, which):
    m = random_mechanisms(20, seed=11)[which]
    R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    moved = m.with_positions(m.positions @ R.T + [tx, ty])
    P = solve_batch(pad_batch([m]), 32).positions[0]
    Q = solve_batch(pad_batch([moved]), 32).positions[0]
    np.testing.assert_allclose(Q, P @ R.T + [tx, ty], atol=1e-9)


def test_singleton_equals_scalar_recursion(fourbar):
    T = 24
    P = solve_batch(pad_batch([fourbar]), T).positions[0]
    x0 = fourbar.positions
    for t in range(T):
        th = 2 * math.pi * t / T
        x1 = x0[0] + 0.05 * np.array([math.cos(th), math.sin(th)])
        x2 = solve_joint(x0[2], x0[1], x0[3], x1, x0[3])
        np.testing.assert_allclose(P[1, t], x1, atol=1e-15)
        np.testing.assert_allclose(P[2, t], x2, atol=1e-12)


def _fd_jacobian_check(m, T=16, h=1e-6, seed=0):
    b = pad_batch([m])
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(1, b.n_max, T, 2))
    g = trace_gradient(b, T, G)[0]
    num = np.zeros_like(g)
    for a in range(m.n):
        for c in range(2):
            xp, xm = b.positions.copy(), b.positions.copy()
            xp[0, a, c] += h
            xm[0, a, c] -= h
            fp = (solve_batch(b, T, xp).positions * G).sum()
            fm = (solve_batch(b, T, xm).positions * G).sum()
            num[a, c] = (fp - fm) / (2 * h)
    scale = np.abs(num).max()
    return np.abs(g - num).max() / scale


def test_gradient_matches_finite_differences(mechs):
    for m in mechs[:8]:
        assert _fd_jacobian_check(m) < 1e-5


def test_gradient_fixed_joint_identity(fourbar):
    T = 8
    b = pad_batch([fourbar])
    G = np.zeros((1, 4, T, 2))
    G[0, 0, :, 0] = 1.0 / T  # mean x of joint 0 over time
    g = trace_gradient(b, T, G)[0]
    assert g[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_padding_gets_zero_gradient(fourbar):
    six = [m for m in random_mechanisms(30, seed=2, n_max=6) if m.n == 6][0]
    b = pad_batch([fourbar, six])
    G = np.random.default_rng(0).normal(size=(2, 6, 8, 2))
    g = trace_gradient(b, 8, G)
    np.testing.assert_array_equal(g[0, 4:], 0.0)


def test_gradient_on_infeasible_raises():
    m = Mechanism.build([(0, 0), (0.2, 0), (0.25, 0.08), (0.3, 0.0)], [True, False, False, True],
                        [(0, 1), (1, 2), (2, 3)]).with_order()
    with pytest.raises(InfeasibleState):
        trace_gradient(pad_batch([m]), 64, np.zeros((1, 4, 64, 2)))


def test_exports(fourbar):
    P = solve_batch(pad_batch([fourbar]), 4).positions[0]
    text = trace_to_csv(P)
    lines = text.strip().split("\n")
    assert lines[0] == "t,joint,x,y" and len(lines) == 1 + 4 * 4
    t, j, x, y = lines[1 + 4 * 1 + 2].split(",")
    assert (int(t), int(j)) == (1, 2) and float(x) == P[2, 1, 0] and float(y) == P[2, 1, 1]
    svg = path_to_svg(P[2])
    assert svg.startswith("<svg") and "polygon" in svg
