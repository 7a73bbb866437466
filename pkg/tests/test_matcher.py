__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

from dataclasses import replace
import logging

import numpy as np
import pandas as pd
import pytest

from cofars import matcher
from cofars.config import ConfigError, TrainConfig
from cofars.diffcore import GRUCell, Parameter, Tensor


def test_vocabulary_and_logs(dataset):
    vocabulary = dataset.vocabulary
    assert list(vocabulary.users) == sorted(dataset.logs)
    assert vocabulary.n_pois == max(r.poi_id for r in dataset.train + dataset.test) + 1
    assert matcher.Vocabulary.from_dict(vocabulary.to_dict()).contexts == vocabulary.contexts
    for user, log in dataset.logs.items():
        assert all(r.click for r in log.clicks)
        assert log.contexts == tuple(sorted({r.context for r in log.clicks}))
        assert log.divergence.contexts == log.contexts
        assert {r.context for r in log.samples} <= set(log.contexts)
        assert [vocabulary.contexts[i] for i in log.context_ids] == list(log.contexts)


def test_short_term_uses_the_last_window(rng, caplog):
    cell = GRUCell("gru", 4, 4, rng)
    embeddings = rng.uniform(0, 1, (6, 4))
    full = matcher.short_term(Tensor(embeddings), 3, cell).data
    changed = embeddings.copy()
    changed[:3] = 0
    assert np.array_equal(matcher.short_term(Tensor(changed), 3, cell).data, full)
    with caplog.at_level(logging.WARNING, logger="cofars"):
        empty = matcher.short_term(None, 3, cell)
    assert np.all(empty.data == 0)
    assert "empty short-term history" in caplog.text


def test_gate_fallback_opens_one_prototype(rng):
    prototypes = Tensor(rng.uniform(0, 1, (3, 4)))
    recent = Tensor(rng.uniform(0, 1, (1, 4)))

    def closed(a, b):
        return Tensor(np.zeros((3, 2)))

    gates = matcher.gate_prototypes(prototypes, None, recent, 1.0, closed, fallback=False)
    assert gates.hard.sum() == 0
    gates = matcher.gate_prototypes(prototypes, None, recent, 1.0, closed, fallback=True)
    assert gates.hard.sum(axis=0).tolist() == [1.0, 1.0]
    assert np.all((gates.beta.data > 0) & (gates.beta.data < 1))
    assert len(gates) == 3


def test_recommendation_loss():
    prototypes = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    candidates = Tensor(np.array([[2.0, 0.0], [0.0, -2.0]]))
    gates = Tensor(np.array([[1.0, 0.0], [1.0, 1.0]]))
    loss = matcher.rec_loss(prototypes, gates, candidates, [1, 0]).item()
    lo, hi = matcher.SCORE_BOUNDS
    scores = lo + (hi - lo) * gates.data / (1 + np.exp(-(prototypes.data @ candidates.data.T)))
    labels = np.array([[1.0, 0.0]])
    expected = -(labels * np.log(scores) + (1 - labels) * np.log(1 - scores)).sum() / 2
    assert loss == pytest.approx(expected)

    # closed gates sit on the score floor
    closed = matcher.rec_loss(prototypes, Tensor(np.zeros((2, 2))), candidates, [1, 0]).item()
    assert closed == pytest.approx((-2 * np.log(lo) - 2 * np.log(1 - lo)) / 2)


def test_closed_gates_keep_their_gradient(rng):
    prototypes = Tensor(rng.uniform(0, 1, (3, 4)))
    recent = Parameter(rng.uniform(0, 1, (1, 4)), "recent")
    candidates = Tensor(rng.uniform(0, 1, (2, 4)))

    def distant(a, b):
        return Tensor(np.full((3, 2), 0.05))

    gates = matcher.gate_prototypes(prototypes, None, recent, 0.5, distant, fallback=False)
    assert gates.hard.sum() == 0
    matcher.rec_loss(prototypes, gates.soft, candidates, [1, 1]).backward()
    assert np.all(np.isfinite(recent.grad))
    assert np.abs(recent.grad).sum() > 0


def test_draw_batch_is_a_chronological_run(dataset, tiny_train, rng):
    for user in sorted(dataset.logs):
        log = dataset.logs[user]
        batch = matcher.draw_batch(log, tiny_train, rng)
        assert len(batch) == min(tiny_train.batch_size, len(log.samples))
        start = log.samples.index(batch[0])
        assert batch == log.samples[start : start + len(batch)]
        assert batch[0].timestamp > log.clicks[0].timestamp
        history = matcher.history_before(log, batch)
        assert history and all(r.click for r in history)
        assert max(r.timestamp for r in history) < batch[0].timestamp


def test_step_loss_window_predates_the_batch(model, dataset, monkeypatch):
    seen = []
    recent = model.recent

    def recording(clicks):
        seen.append([r.timestamp for r in clicks])
        return recent(clicks)

    monkeypatch.setattr(model, "recent", recording)
    rng = np.random.default_rng(5)
    for user in sorted(dataset.logs):
        log = dataset.logs[user]
        batch = matcher.draw_batch(log, model.config, rng)
        seen.clear()
        matcher.step_loss(model, log, batch, 1.0, rng)
        assert len(seen) == 1
        assert seen[0] and max(seen[0]) < min(r.timestamp for r in batch)


def _fixed_cell():
    cell = GRUCell("gru", 2, 2, np.random.default_rng(0))
    for k, layer in enumerate(cell.parameters()):
        layer.data = np.linspace(-0.5, 0.5, layer.data.size).reshape(layer.data.shape) * (k % 3 + 1)
    return cell


def _recurrence(steps, weights):
    def sigmoid(x):
        return 1 / (1 + np.exp(-x))

    (wiz, biz), (wir, bir), (wig, big), (whz, bhz), (whr, bhr), (whg, bhg) = weights
    h = np.zeros((1, 2))
    for x in steps:
        z = sigmoid(x @ wiz + biz + h @ whz + bhz)
        r = sigmoid(x @ wir + bir + h @ whr + bhr)
        g = np.tanh(x @ wig + big + r * (h @ whg + bhg))
        h = (1 - z) * g + z * h
    return h


def test_short_term_matches_a_hand_recurrence():
    cell = _fixed_cell()
    params = [p.data for p in cell.parameters()]
    weights = [tuple(params[i : i + 2]) for i in range(0, len(params), 2)]
    steps = np.array([[0.3, -0.2], [0.1, 0.4]])
    state = matcher.short_term(Tensor(steps), 5, cell).data
    assert np.allclose(state, _recurrence(steps, weights), atol=1e-12)

    for param in cell.parameters():
        param.data = np.zeros_like(param.data)
    assert np.all(matcher.short_term(Tensor(steps[:1]), 5, cell).data == 0)


@pytest.mark.parametrize("similarity", [0.2, 0.5, 0.8])
def test_gate_open_rate_follows_beta(similarity):
    draws = 10000
    prototypes = Tensor(np.array([[1.0, 0.0]]))
    recent = Tensor(np.array([[1.0, 0.0]]))

    def constant(a, b):
        return Tensor(np.full((1, draws), similarity))

    gates = matcher.gate_prototypes(
        prototypes,
        None,
        recent,
        0.1,
        constant,
        training=True,
        rng=np.random.default_rng(11),
        fallback=False,
        squash=False,
    )
    beta = gates.beta.data[0, 0]
    assert beta == pytest.approx(similarity, abs=1e-3)
    assert abs(gates.hard.mean() - beta) < 0.03


def test_training(trained, tiny_train, tmp_path):
    model, history = trained
    assert [row["epoch"] for row in history] == list(range(tiny_train.epochs))
    assert all(np.isfinite(row["loss"]) for row in history)
    assert history[1]["tau"] == pytest.approx(tiny_train.tau_at(1))
    path = str(tmp_path / "losses.csv")
    matcher.write_losses(history, path)
    assert list(pd.read_csv(path).columns) == ["epoch", "tau", "loss", "rec", "mse", "ind"]


def test_training_is_deterministic(dataset, tiny_train):
    config = replace(tiny_train, epochs=1)
    first, _ = matcher.train(dataset.logs, dataset.schema, dataset.vocabulary, config, seed=3)
    second, _ = matcher.train(dataset.logs, dataset.schema, dataset.vocabulary, config, seed=3)
    for a, b in zip(first.parameters(), second.parameters()):
        assert a.name == b.name
        assert np.array_equal(a.data, b.data)


def test_training_rejects_empty_logs(dataset, tiny_train):
    with pytest.raises(ValueError):
        matcher.train({}, dataset.schema, dataset.vocabulary, tiny_train)


def test_save_and_load(model, dataset, tmp_path):
    directory = str(tmp_path / "model")
    model.save(directory)
    loaded = matcher.CofarsModel.load(directory)
    assert loaded.config == model.config
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert np.array_equal(a.data, b.data)
    log = dataset.logs[sorted(dataset.logs)[0]]
    assert np.array_equal(model.user_state(log).contexts.data, loaded.user_state(log).contexts.data)


def test_soft_step_loss_matches_hard_shape(model, dataset):
    log = dataset.logs[sorted(dataset.logs)[0]]
    batch = matcher.draw_batch(log, model.config, np.random.default_rng(1))
    loss, parts = matcher.step_loss(model, log, batch, 1.0, np.random.default_rng(2), soft=True)
    assert loss.shape == (1, 1)
    assert set(parts) == {"rec", "mse", "ind"}
    assert parts["ind"] <= 0


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(dim=12)
    with pytest.raises(ConfigError):
        TrainConfig(tau=0.05, tau_min=0.1)
    assert TrainConfig().ablate("no-mse").gamma == 0
    assert TrainConfig().ablate("no-ind").lam == 0
    assert TrainConfig().ablate("ip").similarity == "ip"
    assert TrainConfig().ablate("no-gta").aggregate is False
    with pytest.raises(ConfigError):
        TrainConfig().ablate("no-such")


def test_no_aggregation_keeps_the_graph_features(model, dataset):
    log = dataset.logs[sorted(dataset.logs)[0]]
    bypass = matcher.CofarsModel(model.schema, model.vocabulary, model.config.ablate("no-gta"), 0)
    state = bypass.user_state(log)
    n = state.graph.n_prototypes
    assert np.array_equal(state.prototypes.data, state.graph.features.data[:n])
    assert np.array_equal(state.contexts.data, state.graph.features.data[n:])


@pytest.mark.slow
def test_loss_falls_over_thirty_epochs(planted, planted_train):
    _, history = matcher.train(
        planted.logs, planted.schema, planted.vocabulary, planted_train, seed=0
    )
    losses = [row["loss"] for row in history]
    assert len(losses) == 30
    assert np.mean(losses[-3:]) < np.mean(losses[:3])
