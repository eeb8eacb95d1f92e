"""Shared fixtures. The tiny models keep unit tests fast; the acceptance
suite builds its own full-size models in test_acceptance.py."""

import pytest

from textpgd import models, textcore


@pytest.fixture(scope="session")
def corpus():
    return textcore.make_corpus(seed=42, size=2000)


@pytest.fixture(scope="session")
def vocab(corpus):
    train, _ = corpus
    return textcore.build_vocab([ex.text for ex in train])


@pytest.fixture(scope="session")
def tiny_corpus():
    return textcore.make_corpus(seed=7, size=400)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    train, _ = tiny_corpus
    return textcore.build_vocab([ex.text for ex in train])


TINY_HYPER = dict(epochs=8, dim=16, n_layers=1, lr=1e-2)


@pytest.fixture(scope="session")
def tiny_victim(tiny_corpus, tiny_vocab):
    train, _ = tiny_corpus
    params, _ = models.train_classifier(
        train, tiny_vocab, models.TrainHyper(seed=5, **TINY_HYPER))
    return params


@pytest.fixture(scope="session")
def tiny_mlm(tiny_corpus, tiny_vocab):
    train, _ = tiny_corpus
    return models.train_mlm(
        train, tiny_vocab, models.TrainHyper(seed=6, **TINY_HYPER))


@pytest.fixture(scope="session")
def tiny_mlp(tiny_corpus, tiny_vocab):
    train, _ = tiny_corpus
    params, _ = models.train_classifier(
        train, tiny_vocab, models.TrainHyper(seed=8, arch="avg_mlp", **TINY_HYPER))
    return params
