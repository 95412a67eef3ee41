import json

import numpy as np
import pytest

from linkforge.cli import EXIT_EMPTY, EXIT_IO, EXIT_OK, main
from linkforge.curves import Curve, save_curve
from linkforge.dataset import compute_curves, load_dataset
from linkforge.ghop import ContrastiveConfig, ModelConfig
from linkforge.index import EmbeddingIndex
from linkforge.training import TrainConfig, load_checkpoint

from conftest import SMALL_MODEL, four_bar


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """gen -> train -> index, once for the module."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--count", "30", "--max-joints", "8", "--seed", "4", "--out", str(d / "data.ndjson")]) == 0
    cfg = TrainConfig(ContrastiveConfig(batch_size=16, epochs=1), ModelConfig(**SMALL_MODEL), seed=2)
    (d / "train.json").write_text(json.dumps(cfg.to_dict()))
    assert main(["train", "--data", str(d / "data.ndjson"), "--config", str(d / "train.json"),
                 "--checkpoint-out", str(d / "model.lfc"), "--log", str(d / "log.ndjson")]) == 0
    assert main(["index", "--data", str(d / "data.ndjson"), "--checkpoint", str(d / "model.lfc"),
                 "--out", str(d / "index.lfi")]) == 0
    ids, mechs = load_dataset(d / "data.ndjson")
    save_curve(Curve(compute_curves(mechs[:1])[0] * 2 + 1), d / "target.csv")
    return d


def common(d):
    return ["--index", str(d / "index.lfi"), "--checkpoint", str(d / "model.lfc"), "--data", str(d / "data.ndjson")]


def test_gen_train_index_outputs(workdir, capsys):
    ids, mechs = load_dataset(workdir / "data.ndjson")
    assert ids == list(range(30))
    assert (workdir / "data.ndjson.curves.npy").exists()
    log = [json.loads(l) for l in (workdir / "log.ndjson").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0, 1]
    ck = load_checkpoint(workdir / "model.lfc")
    assert ck.header["seed"] == 2
    idx = EmbeddingIndex.load(workdir / "index.lfi")
    assert idx.size == 30 and idx.fingerprint == ck.fingerprint


def test_gen_is_reproducible(tmp_path, workdir):
    assert main(["gen", "--count", "30", "--max-joints", "8", "--seed", "4", "--out", str(tmp_path / "a.ndjson")]) == 0
    assert (tmp_path / "a.ndjson").read_bytes() == (workdir / "data.ndjson").read_bytes()


def test_gen_start_offset(tmp_path, workdir):
    main(["gen", "--count", "5", "--max-joints", "8", "--seed", "4", "--start", "25", "--out", str(tmp_path / "t.ndjson")])
    tail = (workdir / "data.ndjson").read_text().splitlines()[25:]
    assert (tmp_path / "t.ndjson").read_text().splitlines() == tail


def test_synth_writes_outputs(workdir, tmp_path, capsys):
    out = tmp_path / "synth"
    code = main(["synth", "--target", str(workdir / "target.csv"), *common(workdir), "--out", str(out),
                 "--n-retrieve", "10", "--svg"])
    assert code == EXIT_OK
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["solutions"] > 0
    sol = json.loads((out / "solutions.json").read_text())
    assert sol["solutions"][0]["ordered_distance"] == summary["best_ordered_distance"]
    assert (out / "best_mechanism.json").exists() and (out / "best.svg").read_text().startswith("<svg")


def test_synth_empty_filter_exit_code(workdir, tmp_path):
    code = main(["synth", "--target", str(workdir / "target.csv"), *common(workdir), "--out", str(tmp_path),
                 "--max-joints", "2"])
    assert code == EXIT_EMPTY


def test_synth_missing_target_exit_code(workdir, tmp_path):
    code = main(["synth", "--target", str(tmp_path / "nope.csv"), *common(workdir), "--out", str(tmp_path)])
    assert code == EXIT_IO


def test_bench(workdir, tmp_path, capsys):
    curves = tmp_path / "curves"
    curves.mkdir()
    (curves / "t.csv").write_text((workdir / "target.csv").read_text())
    code = main(["bench", "--curves", str(curves), "--report", str(tmp_path / "rep.json"), *common(workdir),
                 "--n-retrieve", "10"])
    assert code == EXIT_OK
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert set(rep) == {"rows", "summary", "skipped"} and len(rep["rows"]) == 1
    assert (tmp_path / "rep.csv").read_text().startswith("curve,")


def test_bench_empty_and_missing_directory(workdir, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    args = ["--report", str(tmp_path / "r.json"), *common(workdir)]
    assert main(["bench", "--curves", str(empty), *args]) == EXIT_EMPTY
    assert main(["bench", "--curves", str(tmp_path / "missing"), *args]) == EXIT_IO


def test_simulate(tmp_path, capsys):
    m = tmp_path / "m.json"
    m.write_text(four_bar().to_json())
    assert main(["simulate", "--mechanism", str(m), "--timesteps", "12"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "t,joint,x,y" and len(lines) == 1 + 12 * 4
    assert main(["simulate", "--mechanism", str(m), "--timesteps", "12", "--csv", str(tmp_path / "t.csv"),
                 "--svg", str(tmp_path / "t.svg")]) == EXIT_OK
    assert (tmp_path / "t.csv").exists() and (tmp_path / "t.svg").exists()


def test_simulate_locking_mechanism_exit_code(tmp_path):
    from linkforge.mechanism import Mechanism

    locked = Mechanism.build([(0, 0), (0.2, 0), (0.25, 0.08), (0.3, 0)], [True, False, False, True],
                             [(0, 1), (1, 2), (2, 3)], target=2)
    (tmp_path / "m.json").write_text(locked.to_json())
    assert main(["simulate", "--mechanism", str(tmp_path / "m.json")]) == EXIT_EMPTY


def test_simulate_missing_and_malformed(tmp_path):
    assert main(["simulate", "--mechanism", str(tmp_path / "none.json")]) == EXIT_IO
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["simulate", "--mechanism", str(tmp_path / "bad.json")]) == EXIT_IO


def test_layers(tmp_path, capsys):
    m = tmp_path / "m.json"
    m.write_text(four_bar().to_json())
    assert main(["layers", "--mechanism", str(m), "--lp-out", str(tmp_path / "m.lp")]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["feasible"] and len(res["z"]) == 3 and res["M"] == max(res["z"])
    assert (tmp_path / "m.lp").read_text().startswith("\\ layer assignment")


def test_corrupt_checkpoint_exit_code(workdir, tmp_path):
    bad = tmp_path / "bad.lfc"
    bad.write_bytes(b"garbage")
    code = main(["index", "--data", str(workdir / "data.ndjson"), "--checkpoint", str(bad),
                 "--out", str(tmp_path / "i.lfi")])
    assert code == EXIT_IO
