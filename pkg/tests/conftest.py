import pytest

from lesionlab.data import gen_dataset, select
from lesionlab.instrument import collect_profiles
from lesionlab.metrics import AlignmentScorer, train_scorer
from lesionlab.model import ModelConfig, ToyLVLM, train

# fixture recipe; pinned measurements in the tests assume exactly these values
FIXTURE_N = 30
FIXTURE_SEED = 0
FIXTURE_TRAIN = dict(epochs=24, lr=1e-3, batch_size=8, seed=0)
TINY_CONFIG = dict(vision_layers=1, vision_dim=8, vision_mlp_dim=8, projector_dim=8, lm_layers=1,
                   lm_dim=8, ffn_dim=12, lm_heads=2, vision_heads=2)
TINY_TRAIN = dict(epochs=60, lr=3e-3, batch_size=8, seed=0)

ACCEPTANCE = {}


@pytest.fixture(scope="session")
def dataset():
    return gen_dataset(FIXTURE_N, seed=FIXTURE_SEED)


@pytest.fixture(scope="session")
def trained(dataset):
    """(model, loss curve) for the default-config fixture."""
    t = FIXTURE_TRAIN
    return train(ToyLVLM(ModelConfig()), select(dataset, "train"), t["epochs"], t["lr"], t["batch_size"], t["seed"])


@pytest.fixture(scope="session")
def fixture_model(trained):
    return trained[0]


@pytest.fixture(scope="session")
def scorer(dataset):
    return train_scorer(select(dataset, "train"), steps=300, seed=0)[0]


@pytest.fixture(scope="session")
def tiny_model(dataset):
    t = TINY_TRAIN
    return train(ToyLVLM(ModelConfig(**TINY_CONFIG)), select(dataset, "train"), t["epochs"], t["lr"],
                 t["batch_size"], t["seed"])[0]


@pytest.fixture(scope="session")
def fixture_profiles(fixture_model, dataset):
    return collect_profiles(fixture_model, select(dataset, "rank"))


@pytest.fixture(scope="session")
def untrained_small():
    cfg = ModelConfig(vision_layers=1, vision_dim=8, vision_mlp_dim=8, projector_dim=8, lm_layers=2,
                      lm_dim=8, ffn_dim=12, lm_heads=2, vision_heads=2, seed=3)
    return ToyLVLM(cfg)


def one_per_category(samples):
    seen, out = set(), []
    for s in samples:
        if s.category not in seen:
            seen.add(s.category)
            out.append(s)
    return out


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
