import numpy as np
import pytest

from tinydeploy import target, zoo


@pytest.fixture(scope="session")
def siracusa():
    return target.load_preset("siracusa-like")


@pytest.fixture(scope="session")
def minimal():
    return target.load_preset("minimal")


@pytest.fixture(scope="session")
def llama1():
    return zoo.build_llama(zoo.LlamaConfig(n_layers=1, s=4, vocab=64, context=32))


@pytest.fixture(scope="session")
def llama2():
    return zoo.build_llama(zoo.LlamaConfig(n_layers=2, s=8, vocab=128, context=64))


def rng(seed=0):
    return np.random.default_rng(seed)
