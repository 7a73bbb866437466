__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

import hypothesis
import numpy as np
import pytest

from cofars import evalbench, matcher, retrieval
from cofars.config import GeneratorConfig, TrainConfig
from cofars.synthlog import generate, schema_from_config

hypothesis.settings.register_profile("cofars", deadline=None, max_examples=50)
hypothesis.settings.load_profile("cofars")

TINY_FEATURES = {"meal": ["breakfast", "lunch", "dinner", "night"], "loc": ["home", "office"]}


@pytest.fixture(scope="session")
def tiny_generator():
    return GeneratorConfig(
        users=4,
        contexts_per_user=4,
        groups=2,
        sequence_length=200,
        negatives_per_click=1,
        category=3,
        price=2,
        quality=2,
        delivery=2,
        context_features=TINY_FEATURES,
    )


@pytest.fixture(scope="session")
def tiny_train():
    return TrainConfig(
        dim=8,
        prototypes=3,
        layers=1,
        epochs=2,
        batch_size=16,
        window=10,
        head_epochs=1,
        cap=20,
        recent_k=10,
        eval_samples=20,
        min_support=1,
    )


@pytest.fixture(scope="session")
def generated(tiny_generator):
    return generate(tiny_generator, 0)


@pytest.fixture(scope="session")
def schema(tiny_generator):
    return schema_from_config(tiny_generator)


@pytest.fixture(scope="session")
def dataset(generated, schema, tiny_train):
    records, truth = generated
    return evalbench.prepare(records, schema, 0.2, tiny_train, truth)


@pytest.fixture(scope="session")
def trained(dataset, tiny_train):
    return matcher.train(dataset.logs, dataset.schema, dataset.vocabulary, tiny_train, seed=0)


@pytest.fixture(scope="session")
def model(trained):
    return trained[0]


@pytest.fixture(scope="session")
def caches(model, dataset):
    return retrieval.build_cache(model, dataset.logs)


@pytest.fixture(scope="session")
def head(model, caches):
    return retrieval.train_head(model, caches, "cofars", seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# Larger planted data for the slow acceptance runs


@pytest.fixture(scope="session")
def planted_train():
    return TrainConfig(
        prototypes=10,
        batch_size=64,
        window=20,
        head_epochs=5,
        cap=100,
        recent_k=20,
        eval_samples=100,
    )


@pytest.fixture(scope="session")
def planted(planted_train):
    config = GeneratorConfig(
        users=24,
        contexts_per_user=8,
        groups=3,
        sequence_length=1500,
        noise=0.0,
        category=6,
        price=4,
        quality=3,
        delivery=3,
        context_features=TINY_FEATURES,
    )
    records, truth = generate(config, 0)
    return evalbench.prepare(records, schema_from_config(config), 0.2, planted_train, truth)
