"""Command-line interface: ``linkforge <command> ...``.

Exit codes: 0 success, 2 infeasible or empty results, 1 input/output errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


EXIT_OK, EXIT_IO, EXIT_EMPTY = 0, 1, 2

log = logging.getLogger("linkforge")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _read_mechanism(path):
    from .mechanism import Mechanism

    try:
        return Mechanism.from_json(Path(path).read_text()).with_order()
    except OSError as e:
        raise CliError(f"cannot read {path}: {e}", EXIT_IO) from None


def cmd_gen(a) -> int:
    from .dataset import generate_dataset, save_dataset

    ids, mechs = generate_dataset(a.count, a.max_joints, a.seed, a.start)
    save_dataset(a.out, ids, mechs)
    log.info("wrote %d mechanisms to %s", len(ids), a.out)
    return EXIT_OK


def _load_data(path):
    from .dataset import load_dataset

    try:
        return load_dataset(path)
    except OSError as e:
        raise CliError(f"cannot read dataset {path}: {e}", EXIT_IO) from None


def _load_ckpt(path):
    from .training import load_checkpoint

    try:
        return load_checkpoint(path)
    except OSError as e:
        raise CliError(f"cannot read checkpoint {path}: {e}", EXIT_IO) from None


def cmd_train(a) -> int:
    from .dataset import load_or_compute_curves
    from .training import TrainConfig, save_checkpoint, train

    ids, mechs = _load_data(a.data)
    cfg = TrainConfig()
    if a.config:
        try:
            cfg = TrainConfig.from_dict(json.loads(Path(a.config).read_text()))
        except OSError as e:
            raise CliError(f"cannot read config {a.config}: {e}", EXIT_IO) from None
    if a.epochs is not None:
        cfg.contrastive.epochs = a.epochs
    curves = load_or_compute_curves(a.data, mechs)
    records = []

    def on_epoch(rec):
        records.append(rec)
        print(json.dumps(rec), flush=True)

    res = train(mechs, curves, cfg, on_epoch)
    fp = save_checkpoint(a.checkpoint_out, res.model, cfg)
    if a.log:
        Path(a.log).write_text("".join(json.dumps(r) + "\n" for r in records))
    print(json.dumps({"checkpoint": str(a.checkpoint_out), "fingerprint": fp}))
    return EXIT_OK


def cmd_index(a) -> int:
    from .index import build_index

    ids, mechs = _load_data(a.data)
    idx = build_index(ids, mechs, _load_ckpt(a.checkpoint))
    idx.save(a.out)
    log.info("indexed %d mechanisms (D=%d)", idx.size, idx.dim)
    return EXIT_OK


def _lookup(ids, mechs):
    table = dict(zip(ids, mechs))
    return lambda i: table[i]


def _pipeline_config(a):
    from .pipeline import PipelineConfig

    kw = {}
    if getattr(a, "max_joints", None) is not None:
        kw["max_joints"] = a.max_joints
    if getattr(a, "n_retrieve", None) is not None:
        kw["n_retrieve"] = a.n_retrieve
    if getattr(a, "manufacturable", False):
        kw["manufacturable"] = True
    return PipelineConfig(index_path=str(a.index), checkpoint_path=str(a.checkpoint), **kw)


def cmd_synth(a) -> int:
    from .curves import load_curve
    from .index import EmbeddingIndex, EmptyIndex
    from .pipeline import EmptyRetrieval, synthesize
    from .solver import path_to_svg

    try:
        target = load_curve(a.target, closed=False if a.open else None)
        index = EmbeddingIndex.load(a.index)
    except OSError as e:
        raise CliError(str(e), EXIT_IO) from None
    ckpt = _load_ckpt(a.checkpoint)
    ids, mechs = _load_data(a.data)
    try:
        sol = synthesize(target, index, ckpt, _lookup(ids, mechs), _pipeline_config(a))
    except (EmptyIndex, EmptyRetrieval) as e:
        raise CliError(str(e), EXIT_EMPTY) from None
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "solutions.json").write_text(sol.to_json())
    if len(sol) == 0:
        print(json.dumps({"solutions": 0, "timings": sol.timings}))
        return EXIT_EMPTY
    best = sol.best
    (out / "best_mechanism.json").write_text(best.mechanism.to_json())
    if best.layers is not None:
        (out / "best_layers.json").write_text(best.layers.to_json())
    if a.svg:
        (out / "best.svg").write_text(path_to_svg(target.points, extra=[best.curve]))
    print(json.dumps({"solutions": len(sol), "best_ordered_distance": best.ordered,
                      "best_chamfer": best.chamfer, "timings": sol.timings}))
    return EXIT_OK


def cmd_bench(a) -> int:
    from .index import EmbeddingIndex
    from .pipeline import benchmark_csv, evaluate_benchmark

    try:
        index = EmbeddingIndex.load(a.index)
    except OSError as e:
        raise CliError(str(e), EXIT_IO) from None
    ckpt = _load_ckpt(a.checkpoint)
    ids, mechs = _load_data(a.data)
    if not Path(a.curves).is_dir():
        raise CliError(f"{a.curves} is not a directory", EXIT_IO)
    try:
        report = evaluate_benchmark(a.curves, index, ckpt, _lookup(ids, mechs), _pipeline_config(a))
    except FileNotFoundError as e:
        raise CliError(str(e), EXIT_EMPTY) from None
    Path(a.report).write_text(json.dumps(report, indent=2))
    Path(a.report).with_suffix(".csv").write_text(benchmark_csv(report))
    print(json.dumps(report["summary"]))
    return EXIT_OK


def cmd_simulate(a) -> int:
    from .mechanism import pad_batch
    from .solver import path_to_svg, solve_batch, trace_to_csv

    m = _read_mechanism(a.mechanism)
    tb = solve_batch(pad_batch([m]), a.timesteps)
    if not tb.feasible[0]:
        print("mechanism locks before completing a full turn", file=sys.stderr)
        return EXIT_EMPTY
    P = tb.positions[0, : m.n]
    text = trace_to_csv(P)
    if a.csv:
        Path(a.csv).write_text(text)
    if a.svg:
        Path(a.svg).write_text(path_to_svg(P[m.target_joint]))
    if not a.csv and not a.svg:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_layers(a) -> int:
    from .layers import CollisionGeometry, InfeasibleTrace, assign_layers, detect_collisions, export_lp
    from .mechanism import normalize_mechanism, pad_batch
    from .solver import solve_batch

    m = normalize_mechanism(_read_mechanism(a.mechanism))
    tb = solve_batch(pad_batch([m]), a.timesteps)
    try:
        sets = detect_collisions(m, tb.positions[0], CollisionGeometry(a.half_width, a.joint_radius))
    except InfeasibleTrace as e:
        print(str(e), file=sys.stderr)
        return EXIT_EMPTY
    if a.lp_out:
        Path(a.lp_out).write_text(export_lp(sets))
    res = assign_layers(sets)
    print(res.to_json())
    return EXIT_OK if res.feasible else EXIT_EMPTY


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="linkforge", description="Planar linkage path synthesis.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a random mechanism dataset (NDJSON)")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--max-joints", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--start", type=int, default=0, help="first item id")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train the contrastive encoders")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--config", help="JSON training config")
    t.add_argument("--checkpoint-out", required=True)
    t.add_argument("--log", help="write per-epoch records as NDJSON")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("index", help="embed a dataset into a retrieval index")
    i.add_argument("--data", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_index)

    s = sub.add_parser("synth", help="synthesize mechanisms for a target curve")
    s.add_argument("--target", required=True, help="curve CSV (x,y) or JSON")
    s.add_argument("--index", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="dataset the index was built from")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--max-joints", type=int)
    s.add_argument("--n-retrieve", type=int)
    s.add_argument("--open", action="store_true", help="treat the target as an open curve")
    s.add_argument("--manufacturable", action="store_true")
    s.add_argument("--svg", action="store_true")
    s.set_defaults(fn=cmd_synth)

    b = sub.add_parser("bench", help="run synthesis over a directory of curves")
    b.add_argument("--curves", required=True)
    b.add_argument("--report", required=True)
    b.add_argument("--index", required=True)
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--max-joints", type=int)
    b.add_argument("--n-retrieve", type=int)
    b.set_defaults(fn=cmd_bench)

    m = sub.add_parser("simulate", help="trace a mechanism over one crank turn")
    m.add_argument("--mechanism", required=True)
    m.add_argument("--timesteps", type=int, default=360)
    m.add_argument("--csv")
    m.add_argument("--svg")
    m.set_defaults(fn=cmd_simulate)

    la = sub.add_parser("layers", help="collision check and layer assignment")
    la.add_argument("--mechanism", required=True)
    la.add_argument("--timesteps", type=int, default=360)
    la.add_argument("--half-width", type=float, default=0.01)
    la.add_argument("--joint-radius", type=float, default=0.015)
    la.add_argument("--lp-out")
    la.set_defaults(fn=cmd_layers)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("train", "index", "synth", "bench"):
        from .training import configure_threads

        configure_threads()
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
