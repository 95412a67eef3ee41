import numpy as np
import pytest

from linkforge.mechanism import GeneratorConfig, Mechanism, generate_random


def four_bar() -> Mechanism:
    """Crank-rocker: ground pivots 0 and 3, crank 0-1, coupler 1-2, rocker 2-3."""
    return Mechanism.build(
        [(0.0, 0.0), (0.05, 0.0), (0.2, 0.15), (0.25, 0.0)],
        [True, False, False, True],
        [(0, 1), (1, 2), (2, 3)],
        target=2,
    ).with_order()


def random_mechanisms(count: int, seed: int = 0, n_max: int = 10) -> list[Mechanism]:
    cfg = GeneratorConfig(n_joints_max=n_max)
    return [generate_random(cfg, np.random.default_rng([seed, i])) for i in range(count)]


@pytest.fixture
def fourbar() -> Mechanism:
    return four_bar()


@pytest.fixture(scope="session")
def mechs() -> list[Mechanism]:
    return random_mechanisms(20, seed=11)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


SMALL_MODEL = dict(layers=2, hidden=16, emb_dim=8, gat_heads=2, hop_heads=2,
                   curve_channels=(8, 16), curve_hidden=16)


@pytest.fixture(scope="session")
def small_data():
    """(ids, mechanisms, curves) of a 48-item generated dataset."""
    from linkforge.dataset import compute_curves, generate_dataset

    ids, mechs = generate_dataset(48, max_joints=8, seed=3)
    return ids, mechs, compute_curves(mechs)


@pytest.fixture(scope="session")
def small_checkpoint(small_data, tmp_path_factory):
    """A two-epoch checkpoint of a narrow model trained on ``small_data``."""
    from linkforge.ghop import ContrastiveConfig, ModelConfig
    from linkforge.training import TrainConfig, load_checkpoint, save_checkpoint, train

    _, mechs, curves = small_data
    cfg = TrainConfig(ContrastiveConfig(batch_size=16, epochs=2), ModelConfig(**SMALL_MODEL), seed=1)
    res = train(mechs, curves, cfg)
    path = tmp_path_factory.mktemp("ckpt") / "model.lfc"
    save_checkpoint(path, res.model, cfg)
    return load_checkpoint(path)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
