import pytest

from pivotlab import corpus, model


@pytest.fixture(scope="session")
def languages():
    return corpus.default_languages()


@pytest.fixture(scope="session")
def vocab(languages):
    return corpus.build_vocab(languages)


@pytest.fixture(scope="session")
def tiny_config(vocab):
    return model.ModelConfig(vocab_size=len(vocab), d_model=8, n_layers=2, n_heads=2,
                             d_ff=16, max_context=128, rng_seed=3, dtype="float64")


@pytest.fixture()
def tiny_ckpt(tiny_config):
    return model.init(tiny_config)
