"""Generated mechanism datasets: creation, NDJSON storage, and traced curves."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .mechanism import GeneratorConfig, Mechanism, generate_random, normalize_mechanism, pad_batch
from .metrics import equidistant_forward, normalize_forward
from .solver import simulate, thetas_for

CURVE_POINTS = 200
DATASET_TIMESTEPS = 360


def item_rng(seed: int, item_id: int) -> np.random.Generator:
    """Independent stream per item, so any slice of a dataset can be regenerated alone."""
    return np.random.default_rng([seed, item_id])


def generate_dataset(count: int, max_joints: int = 10, seed: int = 0, start: int = 0,
                     config: GeneratorConfig | None = None) -> tuple[list[int], list[Mechanism]]:
    # five joints is the smallest mechanism whose target follows a coupler path
    cfg = config or GeneratorConfig(n_joints_max=max_joints, n_joints_min=min(5, max_joints))
    ids = list(range(start, start + count))
    mechs = [normalize_mechanism(generate_random(cfg, item_rng(seed, i))).with_order() for i in ids]
    return ids, mechs


def save_dataset(path, ids, mechanisms) -> None:
    with open(path, "w") as f:
        for i, m in zip(ids, mechanisms):
            f.write(json.dumps({"id": int(i), "mechanism": m.to_dict()}, sort_keys=True) + "\n")


def load_dataset(path) -> tuple[list[int], list[Mechanism]]:
    ids, mechs = [], []
    seen = set()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            i = int(rec["id"])
            if i in seen:
                raise ValueError(f"{path}:{lineno}: duplicate id {i}")
            seen.add(i)
            ids.append(i)
            mechs.append(Mechanism.from_dict(rec["mechanism"]).with_order())
    return ids, mechs


def traced_paths(mechanisms, timesteps: int = DATASET_TIMESTEPS, chunk: int = 2048):
    """Target-joint paths (M, T, 2) and per-mechanism feasibility over a full turn."""
    thetas = thetas_for(timesteps)
    paths = np.empty((len(mechanisms), timesteps, 2))
    feasible = np.empty(len(mechanisms), dtype=bool)
    for lo in range(0, len(mechanisms), chunk):
        b = pad_batch(mechanisms[lo : lo + chunk])
        P, feas, _ = simulate(b.positions, b.plan, b.fixed_mask, b.node_count, thetas)
        paths[lo : lo + b.size] = P[np.arange(b.size), b.target]
        feasible[lo : lo + b.size] = feas
    return paths, feasible


def compute_curves(mechanisms, n_points: int = CURVE_POINTS, timesteps: int = DATASET_TIMESTEPS,
                   chunk: int = 2048) -> np.ndarray:
    """Equidistant, normalized (M, n_points, 2) target curves."""
    paths, feasible = traced_paths(mechanisms, timesteps, chunk)
    if not feasible.all():
        bad = np.nonzero(~feasible)[0][:10].tolist()
        raise ValueError(f"mechanisms lock during the turn: rows {bad}")
    out = np.empty((len(mechanisms), n_points, 2))
    for lo in range(0, len(mechanisms), chunk):
        q, _ = equidistant_forward(paths[lo : lo + chunk], n_points)
        out[lo : lo + chunk], _ = normalize_forward(q)
    return out


def curves_path(dataset_path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.name + ".curves.npy")


def load_or_compute_curves(dataset_path, mechanisms) -> np.ndarray:
    """Curves cached beside the dataset file; recomputed when missing or stale."""
    cp = curves_path(dataset_path)
    if cp.exists():
        c = np.load(cp)
        if c.shape == (len(mechanisms), CURVE_POINTS, 2):
            return c
    c = compute_curves(mechanisms)
    np.save(cp, c)
    return c
