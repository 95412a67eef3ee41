import numpy as np
import pytest

from linkforge.curves import Curve, rotate_curve
from linkforge.dataset import compute_curves
from linkforge.index import (
    EmbeddingIndex,
    EmptyIndex,
    brute_force_search,
    build_index,
    embed_query,
    ordered_distances,
    query,
    rank,
    timing_report,
)
from linkforge.metrics import ordered_distance
from linkforge.training import CheckpointMismatch


@pytest.fixture(scope="module")
def index(small_data, small_checkpoint):
    ids, mechs, _ = small_data
    return build_index(ids, mechs, small_checkpoint)


def test_index_rows_are_unit_and_tagged(index, small_data, small_checkpoint):
    ids, mechs, _ = small_data
    assert index.size == len(ids) and index.dim == small_checkpoint.emb_dim
    np.testing.assert_allclose(np.linalg.norm(index.matrix, axis=1), 1.0, atol=1e-6)
    assert index.fingerprint == small_checkpoint.fingerprint
    assert index.joint_counts.tolist() == [m.n for m in mechs]


def test_rebuild_is_bit_identical(index, small_data, small_checkpoint):
    ids, mechs, _ = small_data
    again = build_index(ids, mechs, small_checkpoint)
    assert again.to_bytes() == index.to_bytes()


def test_batch_size_does_not_change_rows(index, small_data, small_checkpoint):
    ids, mechs, _ = small_data
    small = build_index(ids, mechs, small_checkpoint, batch_size=5)
    np.testing.assert_allclose(small.matrix, index.matrix, atol=1e-6)


def test_file_roundtrip_is_bit_exact(index, tmp_path):
    path = tmp_path / "x.lfi"
    index.save(path)
    back = EmbeddingIndex.load(path)
    assert back.to_bytes() == index.to_bytes() == path.read_bytes()
    assert np.array_equal(back.ids, index.ids) and np.array_equal(back.matrix, index.matrix)


def test_corrupt_index_rejected(index):
    blob = index.to_bytes()
    with pytest.raises(ValueError):
        EmbeddingIndex.from_bytes(blob[:-1])
    with pytest.raises(ValueError):
        EmbeddingIndex.from_bytes(b"X" + blob[1:])


def test_full_k_returns_everything_sorted(index, small_data, small_checkpoint):
    _, _, curves = small_data
    res = query(index, Curve(curves[3]), small_checkpoint, k=index.size)
    assert sorted(i for i, _ in res) == sorted(index.ids.tolist())
    sims = [s for _, s in res]
    assert sims == sorted(sims, reverse=True)


def test_ranking_is_stable_prefix(index, small_data, small_checkpoint):
    _, _, curves = small_data
    c = Curve(curves[5])
    top3 = query(index, c, small_checkpoint, k=3)
    top10 = query(index, c, small_checkpoint, k=10)
    assert top10[:3] == top3


def test_ties_broken_by_id():
    mat = np.tile(np.array([[1.0, 0.0]], np.float32), (4, 1))
    idx = EmbeddingIndex(np.array([9, 2, 7, 4]), mat, "f", np.array([5, 5, 5, 5], np.int32))
    assert [i for i, _ in rank(idx, np.array([1.0, 0.0]), 4)] == [2, 4, 7, 9]


def test_joint_filter(index, small_data, small_checkpoint):
    ids, mechs, curves = small_data
    limit = int(np.median([m.n for m in mechs]))
    res = query(index, Curve(curves[0]), small_checkpoint, k=index.size, max_joints=limit)
    allowed = {i for i, m in zip(ids, mechs) if m.n <= limit}
    assert {i for i, _ in res} == allowed
    with pytest.raises(EmptyIndex):
        query(index, Curve(curves[0]), small_checkpoint, k=1, max_joints=min(m.n for m in mechs) - 1)


def test_empty_index_and_bad_k(small_checkpoint):
    empty = EmbeddingIndex(np.zeros(0, np.int64), np.zeros((0, 8), np.float32), "f", np.zeros(0, np.int32))
    with pytest.raises(EmptyIndex):
        rank(empty, np.ones(8), 1)
    with pytest.raises(ValueError):
        rank(empty, np.ones(8), 0)


def test_fingerprint_mismatch(index, small_data, small_checkpoint):
    _, _, curves = small_data
    other = EmbeddingIndex(index.ids, index.matrix, "0" * 64, index.joint_counts)
    with pytest.raises(CheckpointMismatch):
        query(other, Curve(curves[0]), small_checkpoint, k=1)


def test_query_invariant_to_translation_and_scale(small_data, small_checkpoint):
    _, _, curves = small_data
    c = curves[7]
    e0 = embed_query(Curve(c), small_checkpoint)
    e1 = embed_query(Curve(3.5 * c + np.array([2.0, -1.0])), small_checkpoint)
    np.testing.assert_allclose(e1, e0, atol=1e-6)


def test_open_query_uses_partial_encoder(small_data, small_checkpoint):
    _, _, curves = small_data
    pts = curves[2][:120]
    closed = embed_query(Curve(pts, closed=True), small_checkpoint)
    opened = embed_query(Curve(pts, closed=False), small_checkpoint)
    assert not np.allclose(closed, opened)


# -- brute force baseline ---------------------------------------------------------------


def test_ordered_distances_match_scalar_metric(small_data):
    _, _, curves = small_data
    rng = np.random.default_rng(0)
    target = rotate_curve(Curve(curves[1]), 0.4).points[::-1]
    got = ordered_distances(curves[:12], target)
    for g, c in zip(got, curves[:12]):
        assert g == pytest.approx(ordered_distance(c, target)[0], rel=1e-12, abs=1e-15)


def test_brute_force_finds_stored_trace(small_data):
    ids, _, curves = small_data
    for row in (0, 17, 40):
        res = brute_force_search(ids, curves, curves[row], k=len(ids))
        assert res[0][0] == ids[row] and res[0][1] == pytest.approx(0.0, abs=1e-20)
        assert sorted(i for i, _ in res) == sorted(ids)
        d = [v for _, v in res]
        assert d == sorted(d)


def test_brute_force_accepts_curves(small_data):
    ids, _, curves = small_data
    res = brute_force_search(ids, curves, Curve(curves[9] * 2.0 + 1.0), k=1)
    assert res[0][0] == ids[9]


def test_timing_report_fields(index, small_data, small_checkpoint):
    _, _, curves = small_data
    rep = timing_report(index, small_checkpoint, curves, Curve(curves[0]), k=5, repeats=1)
    d = rep.to_dict()
    assert d["index_size"] == index.size
    assert d["contrastive_seconds"] > 0 and d["brute_force_seconds"] > 0
    assert d["speedup"] == pytest.approx(d["brute_force_seconds"] / d["contrastive_seconds"])


def test_curves_are_recomputable(small_data):
    _, mechs, curves = small_data
    assert np.array_equal(compute_curves(mechs[:5]), curves[:5])
