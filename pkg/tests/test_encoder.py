__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

import logging

import numpy as np
import pytest

from cofars.diffcore import check_gradients
from cofars.empdist import DivergenceMatrix
from cofars.encoder import PROBABILITY_FLOOR, ProbabilityEncoder, UnknownIdError
from cofars.synthlog import AttributeSchema, make_context

SCHEMA = AttributeSchema((("category", 3), ("price", 2)))


@pytest.fixture
def encoder(rng):
    return ProbabilityEncoder(SCHEMA, 2, 4, 3, SCHEMA.n_pois, 8, rng)


def test_decoded_fields_are_distributions(encoder):
    decoded = encoder.decode(encoder.personalize(0, np.arange(4), "context")).data
    assert decoded.shape == (4, SCHEMA.total_dim)
    for start, stop in SCHEMA.bounds():
        assert np.allclose(decoded[:, start:stop].sum(axis=1), 1.0)
    assert np.all(decoded >= PROBABILITY_FLOOR)


def test_personalize_adds_the_user_row(encoder):
    rows = encoder.personalize(1, [2, 0], "context").data
    tables = encoder.tables
    assert np.array_equal(rows, tables.context.data[[2, 0]] + tables.user.data[[1]])
    prototypes = encoder.prototypes(1).data
    assert np.array_equal(prototypes, tables.prototype.data + tables.user.data[[1]])
    with pytest.raises(ValueError):
        encoder.personalize(0, [0], "poi")


def test_unknown_ids(encoder):
    with pytest.raises(UnknownIdError):
        encoder.personalize(5, [0], "context")
    with pytest.raises(UnknownIdError):
        encoder.personalize(0, [4], "context")


def test_pairwise_divergence_laws(encoder):
    reps = encoder.personalize(0, np.arange(4), "context")
    js = encoder.pairwise_js(reps).data
    assert np.all(np.diag(js) == 0.0)
    assert np.array_equal(js, js.T)
    assert np.all(js >= 0)
    cross = encoder.pairwise_js(reps, reps).data
    assert np.allclose(cross[~np.eye(4, dtype=bool)], js[~np.eye(4, dtype=bool)])
    similarity = encoder.similarity(reps).data
    assert np.allclose(similarity, 1.0 - js)


def test_inner_product_similarity(rng):
    encoder = ProbabilityEncoder(SCHEMA, 1, 2, 2, SCHEMA.n_pois, 8, rng, similarity="ip")
    a = encoder.prototypes(0)
    b = encoder.personalize(0, [0, 1], "context")
    assert np.allclose(encoder.similarity(a, b).data, a.data @ b.data.T)


def test_alignment_loss(encoder):
    contexts = tuple(make_context(meal=m) for m in ("a", "b", "c"))
    divergence = DivergenceMatrix(contexts, np.array([[0, 0.3, 0.1], [0.3, 0, 0.2], [0.1, 0.2, 0]]))
    index = np.arange(3)
    loss = encoder.mse_loss(0, index, divergence)
    estimate = encoder.pairwise_js(encoder.personalize(0, index, "context")).data
    assert loss.item() == pytest.approx(np.mean((estimate - divergence.values) ** 2))
    assert check_gradients(lambda: encoder.mse_loss(0, index, divergence), encoder.parameters()) < 1e-4


def test_single_context_alignment_is_zero(encoder, caplog):
    divergence = DivergenceMatrix((make_context(meal="a"),), np.zeros((1, 1)))
    with caplog.at_level(logging.WARNING, logger="cofars"):
        loss = encoder.mse_loss(0, np.arange(1), divergence)
    assert loss.item() == 0.0
    assert "single context" in caplog.text


def test_independence_loss_rewards_spread(encoder):
    loss = encoder.independence_loss(0)
    js = encoder.pairwise_js(encoder.prototypes(0)).data
    assert loss.item() == pytest.approx(-js.mean())
    assert loss.item() <= 0
