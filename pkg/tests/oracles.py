"""Independent reference implementations used as test oracles."""
import itertools
import math

import numpy as np


def circle_intersections(c1, r1, c2, r2):
    """Both intersection points of two circles, or None when they miss."""
    c1, c2 = np.asarray(c1, float), np.asarray(c2, float)
    d = math.dist(c1, c2)
    if d == 0 or d > r1 + r2 or d < abs(r1 - r2):
        return None
    a = (r1 * r1 - r2 * r2 + d * d) / (2 * d)
    h = math.sqrt(max(r1 * r1 - a * a, 0.0))
    m = c1 + a * (c2 - c1) / d
    perp = np.array([-(c2 - c1)[1], (c2 - c1)[0]]) / d
    return m + h * perp, m - h * perp


def side(p, a, b):
    return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])


def trace_oracle(mechanism, T):
    """Joint positions over a crank turn, one joint and timestep at a time."""
    x0 = mechanism.positions
    n = mechanism.n
    P = np.full((n, T, 2), np.nan)
    for t in range(T):
        th = 2 * math.pi * t / T
        arm = x0[1] - x0[0]
        P[:, t] = x0
        P[1, t] = x0[0] + [math.cos(th) * arm[0] - math.sin(th) * arm[1],
                           math.sin(th) * arm[0] + math.cos(th) * arm[1]]
        for i, j, k in mechanism.solve_plan():
            hits = circle_intersections(P[j, t], math.dist(x0[i], x0[j]),
                                        P[k, t], math.dist(x0[i], x0[k]))
            if hits is None:
                return None
            want = np.sign(side(x0[i], x0[j], x0[k]))
            P[i, t] = next(h for h in hits if np.sign(side(h, P[j, t], P[k, t])) == want)
    return P


def chamfer_oracle(A, B):
    da = [min(math.dist(a, b) for b in B) for a in A]
    db = [min(math.dist(a, b) for a in A) for b in B]
    return sum(da) / len(A) + sum(db) / len(B)


def ordered_oracle(A, B):
    """Exhaustive scan over all 2N orderings; returns (value, shift, direction)."""
    n = len(A)
    best = None
    for shift, direction in itertools.product(range(n), (1, -1)):
        idx = [(shift + direction * i) % n for i in range(n)]
        v = 2 * math.pi / n * sum(math.dist(A[idx[i]], B[i]) ** 2 for i in range(n))
        if best is None or v < best[0]:
            best = (v, shift, direction)
    return best


def layers_valid(A, C, O, grounded, z):
    """Every layer constraint of a complete assignment, checked from scratch."""
    for i, oi in enumerate(O):
        for k in oi:
            if z[i] == z[k]:
                return False
    for j, att in enumerate(A):
        if not att or j in grounded:
            continue
        u = min(z[i] for i in att)
        v = max(z[i] for i in att)
        for c in C[j]:
            if not (z[c] >= v + 1 or z[c] <= u - 1):
                return False
    return True


def layers_brute_force(A, C, O, grounded):
    """Smallest max layer over all |L|^|L| assignments, or None."""
    L = len(O)
    best = None
    for z in itertools.product(range(L), repeat=L):
        if layers_valid(A, C, O, grounded, z):
            m = max(z)
            best = m if best is None else min(best, m)
    return best


def random_layer_instance(rng, n_links):
    """Random consistent collision sets: links join random joint pairs."""
    n_joints = int(rng.integers(2, n_links + 3))
    A = [set() for _ in range(n_joints)]
    for i in range(n_links):
        a, b = rng.choice(n_joints, 2, replace=False)
        A[a].add(i)
        A[b].add(i)
    p_c = rng.uniform(0.0, 0.4)
    C = [{i for i in range(n_links) if i not in A[j] and rng.random() < p_c} for j in range(n_joints)]
    p_o = rng.uniform(0.0, 0.7)
    pairs = [(i, k) for i, k in itertools.combinations(range(n_links), 2) if rng.random() < p_o]
    grounded = {j for j in range(n_joints) if rng.random() < 0.3}
    return n_joints, A, C, pairs, grounded
