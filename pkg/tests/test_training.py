import hashlib
import math

import numpy as np
import pytest
import torch

from linkforge.curves import Curve, partial_arc
from linkforge.ghop import ContrastiveConfig, LinkageModel, ModelConfig
from linkforge.training import (
    MAGIC,
    CheckpointMismatch,
    Divergence,
    TrainConfig,
    augment,
    draw_partials,
    load_checkpoint,
    read_checkpoint_bytes,
    save_checkpoint,
    train,
)

from conftest import SMALL_MODEL


def config(epochs=2, seed=1):
    return TrainConfig(ContrastiveConfig(batch_size=16, epochs=epochs), ModelConfig(**SMALL_MODEL), seed=seed)


def test_log_has_untrained_epoch_and_one_record_per_epoch(small_data):
    _, mechs, curves = small_data
    res = train(mechs, curves, config(epochs=3))
    assert [r["epoch"] for r in res.log] == [0, 1, 2, 3]
    assert math.isnan(res.log[0]["train_loss"])
    for r in res.log:
        assert math.isfinite(r["val_loss"]) and math.isfinite(r["val_clip1"]) and r["tau"] > 0
    assert all(math.isfinite(r["train_loss"]) for r in res.log[1:])


def test_training_is_deterministic(small_data):
    _, mechs, curves = small_data
    a = train(mechs, curves, config())
    b = train(mechs, curves, config())
    for ra, rb in zip(a.log, b.log):
        for key in ("train_loss", "val_loss", "val_clip1", "tau"):
            assert ra[key] == rb[key] or (math.isnan(ra[key]) and math.isnan(rb[key]))
    for k, v in a.model.state_dict().items():
        assert torch.equal(v, b.model.state_dict()[k])


def test_different_seed_changes_result(small_data):
    _, mechs, curves = small_data
    a = train(mechs, curves, config(seed=1))
    b = train(mechs, curves, config(seed=2))
    assert a.log[-1]["train_loss"] != b.log[-1]["train_loss"]


def test_training_lowers_train_loss_on_a_small_set(small_data):
    _, mechs, curves = small_data
    res = train(mechs, curves, config(epochs=8))
    assert res.log[-1]["train_loss"] < res.log[1]["train_loss"]


def test_divergence_keeps_last_finite_state(small_data):
    _, mechs, curves = small_data
    bad = curves.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(Divergence) as err:
        train(mechs, bad, TrainConfig(ContrastiveConfig(batch_size=64, epochs=2),
                                      ModelConfig(**SMALL_MODEL), val_fraction=0.0))
    assert err.value.epoch == 1
    assert err.value.last_state is not None
    assert all(torch.isfinite(v).all() for v in err.value.last_state.values())


def test_too_few_items_rejected(small_data):
    _, mechs, curves = small_data
    with pytest.raises(ValueError):
        train(mechs[:3], curves[:3], config())


def test_augment_rotates_and_reverses():
    rng = np.random.default_rng(0)
    c = rng.normal(size=(5, 20, 2))
    out = augment(c, np.random.default_rng(1), reverse=False)
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(c, axis=-1), atol=1e-12)
    rev = augment(c, np.random.default_rng(1), reverse=True)
    np.testing.assert_allclose(np.sort(np.linalg.norm(rev, axis=-1), axis=1),
                               np.sort(np.linalg.norm(c, axis=-1), axis=1), atol=1e-12)


def test_partials_match_scalar_arcs(small_data):
    _, _, curves = small_data
    parts = draw_partials(curves[:10], np.random.default_rng(2), 0.2, 0.6)
    rng = np.random.default_rng(2)
    fracs = np.minimum(rng.uniform(0.2, 0.6, 10), 0.999)
    starts = rng.uniform(0.0, 1.0, 10)
    for c, p, f, s0 in zip(curves[:10], parts, fracs, starts):
        ref = partial_arc(Curve(c, closed=True), f, s0).points
        np.testing.assert_allclose(p, ref, atol=1e-9)


def test_train_config_dict_roundtrip():
    cfg = config()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    torch.manual_seed(0)
    model = LinkageModel(ModelConfig(**SMALL_MODEL))
    p1 = tmp_path / "a.lfc"
    fp = save_checkpoint(p1, model, config())
    assert fp == hashlib.sha256(p1.read_bytes()).hexdigest()
    ck = load_checkpoint(p1)
    assert ck.fingerprint == fp and ck.emb_dim == SMALL_MODEL["emb_dim"]
    for k, v in model.state_dict().items():
        assert torch.equal(v, ck.model.state_dict()[k])
    p2 = tmp_path / "b.lfc"
    assert save_checkpoint(p2, ck.model, config()) == fp
    assert p1.read_bytes() == p2.read_bytes()
    assert TrainConfig.from_dict(ck.header["train_config"]) == config()


def test_checkpoint_header_records_architecture(tmp_path):
    model = LinkageModel(ModelConfig(**SMALL_MODEL))
    save_checkpoint(tmp_path / "m.lfc", model, config(seed=7))
    h = load_checkpoint(tmp_path / "m.lfc").header
    assert h["seed"] == 7 and h["emb_dim"] == 8
    assert ModelConfig.from_dict(h["model_config"]) == model.cfg


@pytest.mark.parametrize("damage", ["payload", "magic", "truncate", "header", "trailing"])
def test_corrupt_checkpoint_rejected(tmp_path, damage):
    model = LinkageModel(ModelConfig(**SMALL_MODEL))
    path = tmp_path / "m.lfc"
    save_checkpoint(path, model)
    blob = bytearray(path.read_bytes())
    if damage == "payload":
        blob[-5] ^= 0xFF
    elif damage == "magic":
        blob[0] ^= 0xFF
    elif damage == "truncate":
        blob = blob[:-4]
    elif damage == "header":
        blob[len(MAGIC) + 10] = 0xFF
    else:
        blob += b"\x00\x00\x00\x00"
    with pytest.raises(CheckpointMismatch):
        read_checkpoint_bytes(bytes(blob))
