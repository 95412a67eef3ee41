"""Swept-collision detection and minimum-height layer assignment.

Links are capsules of half-width ``w`` and joints are disks of radius ``r``.
Collisions are checked at every sampled timestep of a trace. The layer
program is solved exactly with a small branch-and-bound; ``export_lp`` writes
the same program as a mixed-integer LP for external solvers.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .mechanism import Mechanism


class InfeasibleTrace(ValueError):
    pass


@dataclass(frozen=True)
class CollisionGeometry:
    half_width: float = 0.01
    joint_radius: float = 0.015
    clearance: float = 0.0


@dataclass(frozen=True)
class CollisionSets:
    """A[j]: links attached to joint j; C[j]: other links sweeping over joint j;
    O[i]: links hitting link i. Links are numbered in sorted order."""

    A: tuple[frozenset, ...]
    C: tuple[frozenset, ...]
    O: tuple[frozenset, ...]
    grounded: frozenset
    links: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        for a, c in zip(self.A, self.C):
            if a & c:
                raise ValueError("a joint cannot collide with its own linkage")
        for i, oi in enumerate(self.O):
            if i in oi:
                raise ValueError(f"linkage {i} listed as colliding with itself")
            for k in oi:
                if i not in self.O[k]:
                    raise ValueError(f"collision ({i}, {k}) is not symmetric")

    @property
    def n_links(self) -> int:
        return len(self.O)

    @property
    def n_joints(self) -> int:
        return len(self.A)

    def with_collision(self, i: int, k: int) -> CollisionSets:
        O = list(self.O)
        O[i] = O[i] | {k}
        O[k] = O[k] | {i}
        return CollisionSets(self.A, self.C, tuple(O), self.grounded, self.links)

    @classmethod
    def from_lists(cls, n_links, attached, colliding, overlaps, grounded=()) -> CollisionSets:
        """Build from plain lists; ``overlaps`` is a list of link pairs."""
        O = [set() for _ in range(n_links)]
        for i, k in overlaps:
            O[i].add(k)
            O[k].add(i)
        return cls(
            tuple(frozenset(a) for a in attached),
            tuple(frozenset(c) for c in colliding),
            tuple(frozenset(o) for o in O),
            frozenset(grounded),
        )


@dataclass
class LayerAssignment:
    z: list[int]
    u: dict[int, int]
    v: dict[int, int]
    M: int
    feasible: bool
    nodes: int = field(default=0, compare=False)

    def to_json(self) -> str:
        return json.dumps({"z": self.z, "M": self.M, "feasible": self.feasible})

    @classmethod
    def from_json(cls, text: str) -> LayerAssignment:
        d = json.loads(text)
        return cls(list(d["z"]), {}, {}, int(d["M"]), bool(d["feasible"]))


# -- geometry ---------------------------------------------------------------


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points p to segments ab, all (..., 2)."""
    ab = b - a
    denom = (ab * ab).sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(denom > 0, ((p - a) * ab).sum(axis=-1) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    d = p - (a + t[..., None] * ab)
    return np.hypot(d[..., 0], d[..., 1])


def _cross(o, a, b):
    return (a[..., 0] - o[..., 0]) * (b[..., 1] - o[..., 1]) - (a[..., 1] - o[..., 1]) * (b[..., 0] - o[..., 0])


def segment_distance(p1, p2, q1, q2) -> np.ndarray:
    """Minimum distance between segments p1p2 and q1q2, vectorized over leading axes."""
    d1, d2 = _cross(q1, q2, p1), _cross(q1, q2, p2)
    d3, d4 = _cross(p1, p2, q1), _cross(p1, p2, q2)
    crossing = (d1 * d2 < 0) & (d3 * d4 < 0)
    d = np.minimum.reduce([
        point_segment_distance(p1, q1, q2),
        point_segment_distance(p2, q1, q2),
        point_segment_distance(q1, p1, p2),
        point_segment_distance(q2, p1, p2),
    ])
    return np.where(crossing, 0.0, d)


def _trim(shared: np.ndarray, other: np.ndarray, r: float):
    """Part of segment shared->other lying outside the disk of radius r at ``shared``."""
    e = other - shared
    length = np.hypot(e[..., 0], e[..., 1])
    if np.any(length <= r):
        return None
    return shared + (r / length)[..., None] * e, other


def detect_collisions(mechanism: Mechanism, trace: np.ndarray,
                      geom: CollisionGeometry = CollisionGeometry()) -> CollisionSets:
    """Collision sets from an (N, T, 2) trace of ``mechanism``."""
    P = np.asarray(trace, dtype=float)
    n = mechanism.n
    if P.ndim != 3 or P.shape[0] < n or not np.all(np.isfinite(P[:n])):
        raise InfeasibleTrace("collision detection needs a finite (N, T, 2) trace")
    links = tuple(mechanism.sorted_linkages())
    L = len(links)
    fixed = mechanism.fixed
    gap = 2 * geom.half_width + geom.clearance
    r = geom.joint_radius
    A = [set() for _ in range(n)]
    for i, (a, b) in enumerate(links):
        A[a].add(i)
        A[b].add(i)
    O = [set() for _ in range(L)]
    for i, k in itertools.combinations(range(L), 2):
        a, b = links[i]
        c, d = links[k]
        shared = {a, b} & {c, d}
        if len(shared) == 2:
            continue
        if shared:
            s = shared.pop()
            oi = b if a == s else a
            ok = d if c == s else c
            # contact strictly inside the shared joint's disk does not count
            si = _trim(P[s], P[oi], r)
            sk = _trim(P[s], P[ok], r)
            if si is None or sk is None:
                continue
            dist = segment_distance(si[0], si[1], sk[0], sk[1])
        else:
            dist = segment_distance(P[a], P[b], P[c], P[d])
        if np.any(dist < gap):
            O[i].add(k)
            O[k].add(i)
    C = [set() for _ in range(n)]
    for j in range(n):
        if fixed[j]:
            continue
        for i, (a, b) in enumerate(links):
            if i in A[j]:
                continue
            if np.any(point_segment_distance(P[j], P[a], P[b]) < r + geom.clearance):
                C[j].add(i)
    return CollisionSets(
        tuple(frozenset(s) for s in A),
        tuple(frozenset(s) for s in C),
        tuple(frozenset(s) for s in O),
        frozenset(int(j) for j in np.nonzero(fixed)[0]),
        links,
    )


# -- layer program ------------------------------------------------------------


def _joint_terms(sets: CollisionSets):
    """(attached, colliding) pairs for the non-grounded joints that constrain anything."""
    out = []
    for j in range(sets.n_joints):
        if j in sets.grounded or not sets.A[j] or not sets.C[j]:
            continue
        out.append((j, tuple(sorted(sets.A[j])), tuple(sorted(sets.C[j]))))
    return out


def check_assignment(sets: CollisionSets, z) -> bool:
    """Direct check of a complete assignment with tight u_j/v_j."""
    for i, oi in enumerate(sets.O):
        if any(z[i] == z[k] for k in oi):
            return False
    for _, att, col in _joint_terms(sets):
        lo = min(z[i] for i in att)
        hi = max(z[i] for i in att)
        if any(lo <= z[c] <= hi for c in col):
            return False
    return True


def replay_constraints(sets: CollisionSets, a: LayerAssignment, big: int | None = None) -> list[str]:
    """Rebuild every binary from ``a`` and evaluate the linear program's rows.

    Returns the names of violated rows (empty when the assignment is valid).
    """
    L = sets.n_links
    N = 2 * L if big is None else big
    z = a.z
    bad = []
    for i in range(L):
        if not 0 <= z[i] <= L - 1:
            bad.append(f"bound_z_{i}")
        if a.M < z[i]:
            bad.append(f"m_{i}")
        for k in sets.O[i]:
            x = 1 if z[i] < z[k] else 0
            if z[i] - z[k] + N * x < 1:
                bad.append(f"oa_{i}_{k}")
            if z[k] - z[i] + N * (1 - x) < 1:
                bad.append(f"ob_{i}_{k}")
    for j in range(sets.n_joints):
        if not sets.A[j]:
            continue
        u, v = a.u[j], a.v[j]
        for i in sets.A[j]:
            if u > z[i]:
                bad.append(f"au_{j}_{i}")
            if v < z[i]:
                bad.append(f"av_{j}_{i}")
        if j in sets.grounded:
            continue
        for i in sets.C[j]:
            y = 0 if z[i] >= v + 1 else 1
            if z[i] < v + 1 - N * y:
                bad.append(f"ca_{j}_{i}")
            if z[i] > u - 1 + N * (1 - y):
                bad.append(f"cb_{j}_{i}")
    return bad


def _finish(sets: CollisionSets, z: list[int], feasible: bool, nodes: int) -> LayerAssignment:
    u = {j: min(z[i] for i in sets.A[j]) for j in range(sets.n_joints) if sets.A[j]}
    v = {j: max(z[i] for i in sets.A[j]) for j in range(sets.n_joints) if sets.A[j]}
    return LayerAssignment(z, u, v, max(z) if z else 0, feasible, nodes)


def assign_layers(sets: CollisionSets, n_links: int | None = None,
                  node_limit: int = 2_000_000) -> LayerAssignment:
    """Smallest top layer M, found by trying M = 0, 1, ... with a complete search.

    Variables are chosen by smallest remaining domain (ties: most constraints,
    then lowest index) and values tried in increasing order, so the returned
    assignment is deterministic.
    """
    L = sets.n_links if n_links is None else n_links
    if L != sets.n_links:
        raise ValueError(f"collision sets describe {sets.n_links} linkages, not {L}")
    if L == 0:
        return LayerAssignment([], {}, {}, 0, True)
    terms = _joint_terms(sets)
    # per link: joints where it is attached / where it is a colliding link
    as_att = [[] for _ in range(L)]
    as_col = [[] for _ in range(L)]
    for t, (_, att, col) in enumerate(terms):
        for i in att:
            as_att[i].append(t)
        for c in col:
            as_col[c].append(t)
    related = []
    for i in range(L):
        rel = set(sets.O[i])
        for t in as_att[i] + as_col[i]:
            rel.update(terms[t][1])
            rel.update(terms[t][2])
        rel.discard(i)
        related.append(sorted(rel))
    degree = [len(r) for r in related]
    z = [-1] * L
    nodes = 0

    def consistent(x: int, val: int) -> bool:
        for k in sets.O[x]:
            if z[k] == val:
                return False
        for t in as_att[x]:
            _, att, col = terms[t]
            vals = [z[i] for i in att if z[i] >= 0] + [val]
            lo, hi = min(vals), max(vals)
            if any(z[c] >= 0 and lo <= z[c] <= hi for c in col):
                return False
        for t in as_col[x]:
            att = terms[t][1]
            vals = [z[i] for i in att if z[i] >= 0]
            if vals and min(vals) <= val <= max(vals):
                return False
        return True

    def search(domains: dict) -> bool:
        nonlocal nodes
        if not domains:
            return True
        nodes += 1
        if nodes > node_limit:
            raise RuntimeError("layer search exceeded its node budget")
        x = min(domains, key=lambda i: (len(domains[i]), -degree[i], i))
        rest = {i: d for i, d in domains.items() if i != x}
        for val in domains[x]:
            z[x] = val
            nxt = dict(rest)
            dead = False
            for y in related[x]:
                if y in nxt:
                    d = [w for w in nxt[y] if consistent(y, w)]
                    if not d:
                        dead = True
                        break
                    nxt[y] = d
            if not dead and search(nxt):
                return True
            z[x] = -1
        return False

    lower = _clique_bound(sets.O) - 1
    total = 0
    for M in range(lower, L):
        z[:] = [-1] * L
        nodes = 0
        if search({i: list(range(M + 1)) for i in range(L)}):
            return _finish(sets, list(z), True, total + nodes)
        total += nodes
    return LayerAssignment([0] * L, {}, {}, L - 1, False, total)


def _clique_bound(O) -> int:
    """Size of a greedily grown clique in the link-collision graph (a lower bound on layers)."""
    best = 1
    for seed in range(len(O)):
        clique = [seed]
        for k in sorted(O[seed], key=lambda v: (-len(O[v]), v)):
            if all(k in O[c] for c in clique):
                clique.append(k)
        best = max(best, len(clique))
    return best


def brute_force_layers(sets: CollisionSets) -> int | None:
    """Optimal M by enumerating all |L|^|L| assignments; None when infeasible."""
    L = sets.n_links
    best = None
    for z in itertools.product(range(L), repeat=L):
        m = max(z) if z else 0
        if best is not None and m >= best:
            continue
        if check_assignment(sets, z):
            best = m
    return best


def export_lp(sets: CollisionSets, n_links: int | None = None) -> str:
    """The layer program as CPLEX-format LP text with big constant N = 2|L|."""
    L = sets.n_links if n_links is None else n_links
    N = 2 * max(L, 1)
    rows = []
    for i in range(L):
        for k in sorted(sets.O[i]):
            rows.append(f" oa_{i}_{k}: z_{i} - z_{k} + {N} x_{i}_{k} >= 1")
            rows.append(f" ob_{i}_{k}: z_{k} - z_{i} - {N} x_{i}_{k} >= {1 - N}")
    joints = [j for j in range(sets.n_joints) if sets.A[j]]
    ys = []
    for j in joints:
        for i in sorted(sets.A[j]):
            rows.append(f" au_{j}_{i}: u_{j} - z_{i} <= 0")
            rows.append(f" av_{j}_{i}: v_{j} - z_{i} >= 0")
        if j in sets.grounded:
            continue
        for i in sorted(sets.C[j]):
            ys.append(f"y_{j}_{i}")
            rows.append(f" ca_{j}_{i}: z_{i} - v_{j} + {N} y_{j}_{i} >= 1")
            rows.append(f" cb_{j}_{i}: z_{i} - u_{j} + {N} y_{j}_{i} <= {N - 1}")
    for i in range(L):
        rows.append(f" m_{i}: M - z_{i} >= 0")
    xs = [f"x_{i}_{k}" for i in range(L) for k in sorted(sets.O[i])]
    out = ["\\ layer assignment", "Minimize", " obj: M", "Subject To", *rows, "Bounds"]
    out += [f" 0 <= z_{i} <= {L - 1}" for i in range(L)]
    out += [f" -inf <= u_{j} <= +inf" for j in joints]
    out += [f" -inf <= v_{j} <= +inf" for j in joints]
    out += [" 0 <= M <= +inf"]
    ints = [f"z_{i}" for i in range(L)] + [f"u_{j}" for j in joints] + [f"v_{j}" for j in joints]
    out += ["General", *_wrap(ints + ["M"])]
    if xs or ys:
        out += ["Binary", *_wrap(xs + ys)]
    out.append("End")
    return "\n".join(out) + "\n"


def _wrap(names: list[str], per_line: int = 12) -> list[str]:
    return [" " + " ".join(names[i : i + per_line]) for i in range(0, len(names), per_line)]


def solve_lp_external(text: str) -> float | None:
    """Optimal objective of an LP file via HiGHS, or None when it is not installed."""
    try:
        import highspy
    except ImportError:
        return None
    import os
    import tempfile

    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    fd, path = tempfile.mkstemp(suffix=".lp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        h.readModel(path)
    finally:
        os.unlink(path)
    h.run()
    if h.getModelStatus() != highspy.HighsModelStatus.kOptimal:
        return float("inf")
    return float(h.getInfo().objective_function_value)
