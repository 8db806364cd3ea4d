import pytest
import torch

from kreplay.corpus import build_vocab
from kreplay.model import ModelConfig, init_model
from kreplay.synthworld import WorldConfig, generate_world

torch.set_num_threads(1)

SMALL_WORLD = dict(num_entities=6, num_objects=12, images_per_entity=8, generic_images=40,
                   pretrain_plain_images=20, caption_images_per_entity=3, val_images_per_entity=1,
                   eval_images_per_entity=2, noise_rate=0.2, feature_dim=8, seed=3)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(WorldConfig(**SMALL_WORLD))


@pytest.fixture(scope="session")
def small_vocab(small_world):
    return build_vocab(small_world.training_texts())


@pytest.fixture
def tiny_model(small_vocab):
    return init_model(ModelConfig(vocab_size=len(small_vocab), feature_dim=8, d_model=16,
                                  num_layers=2, num_heads=2, max_len=16, dropout=0.1, seed=5))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
