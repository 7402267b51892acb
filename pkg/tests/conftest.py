import pytest
import torch

from concept_rrg.concept_bank import build_bank, load_descriptions
from concept_rrg.corpus import default_grammar, load_corpus, write_corpus

DEFAULT_N = 2000
DEFAULT_SEED = 7


@pytest.fixture(scope="session")
def default_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus2000")
    write_corpus(default_grammar(), DEFAULT_N, DEFAULT_SEED, root)
    return load_corpus(root)


@pytest.fixture(scope="session")
def default_bank(default_corpus):
    return build_bank(default_corpus, load_descriptions())


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus60")
    write_corpus(default_grammar(), 60, 1, root)
    return load_corpus(root)


@pytest.fixture(scope="session")
def small_bank(small_corpus):
    return build_bank(small_corpus, load_descriptions())


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)
