__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

import numpy as np
import pytest

from cofars import retrieval
from cofars.synthlog import InteractionRecord, make_context

A, B, C = (make_context(meal=m) for m in ("a", "b", "c"))


def _history(contexts):
    return [InteractionRecord(0, i, i, context, (0,), True) for i, context in enumerate(contexts)]


def test_context_index_keeps_the_most_recent():
    history = _history([A, B, A, C, B, A, B])
    index = retrieval.ContextIndex(history)
    counter = retrieval.OpCounter()
    assert index.select([A, B], 3, counter) == [4, 5, 6]
    assert counter.select == 3
    assert index.select([C], 5) == [3]
    assert index.select([make_context(meal="z")], 5) == []


def test_selection_follows_open_prototypes_and_degrades():
    history = _history([A, B, A, C, B, A, B])
    assignments = {0: {B}, 1: {C}}
    selected = retrieval.select_subsequence(history, [1, 0], assignments, 10, 2, target=A)
    assert selected.contexts == [B, B, B]
    assert not selected.degraded
    assert selected.poi_ids.tolist() == [1, 4, 6]

    widened = retrieval.select_subsequence(
        history, [1, 0], assignments, 10, 2, target=A, include_target=True
    )
    assert widened.contexts == [A, B, A, B, A, B]
    assert widened.poi_ids.tolist() == [0, 1, 2, 4, 5, 6]

    missing = make_context(meal="z")
    empty = retrieval.select_subsequence(history, [0, 0], assignments, 10, 2, target=missing)
    assert empty.degraded
    assert [t for _, _, t in empty.entries] == [5, 6]


def test_hard_context_is_a_single_open_prototype(model, caches):
    user = sorted(caches)[0]
    cache = caches[user]
    target = cache.contexts[0]
    config = model.config
    baseline = retrieval.behaviors("hard-context", model, cache, cache.history, target, cache.index)
    single = retrieval.select_subsequence(
        cache.history, np.ones(1), {0: {target}}, config.cap, config.window, target
    )
    assert baseline == single
    assert set(baseline.contexts) == {target}
    assert len(baseline) == min(config.cap, sum(r.context == target for r in cache.history))


def test_strategies(model, caches):
    cache = caches[sorted(caches)[0]]
    target = cache.contexts[0]
    config = model.config
    recent = retrieval.behaviors("recent-k", model, cache, cache.history, target)
    assert len(recent) == min(config.recent_k, len(cache.history))
    pooled = retrieval.behaviors("avg-pooling", model, cache, cache.history, target)
    assert len(pooled) == min(config.cap, len(cache.history))
    nearest = retrieval.behaviors("topk-context", model, cache, cache.history, target)
    assert target in nearest.contexts
    assert len(set(nearest.contexts)) <= config.topk_contexts + 1
    with pytest.raises(ValueError):
        retrieval.behaviors("no-such", model, cache, cache.history, target)


def test_cache_matches_a_fresh_state(model, dataset, caches):
    user = sorted(caches)[0]
    state = model.user_state(dataset.logs[user])
    cache = caches[user]
    assert np.array_equal(cache.prototypes, state.prototypes.data)
    assert cache.contexts == state.graph.contexts
    assert set().union(*cache.assignments.values()) == set(cache.contexts)


def test_serving_is_bit_identical_to_recomputation(model, dataset, caches, head):
    user = sorted(caches)[0]
    candidates = [0, 5, 7, 11, 3]
    for target in caches[user].contexts:
        cached = retrieval.serve(user, target, candidates, model, caches, head)
        fresh = retrieval.build_cache(model, {user: dataset.logs[user]})
        assert cached == retrieval.serve(user, target, candidates, model, fresh, head)
        scores = [score for _, score in cached]
        assert scores == sorted(scores, reverse=True)
        assert sorted(poi for poi, _ in cached) == sorted(candidates)


def test_cold_start_ranks_every_candidate(model, caches, head):
    user = sorted(caches)[0]
    unseen = make_context(meal="brunch", loc="roof")
    ranking = retrieval.serve(user, unseen, [1, 2, 3], model, caches, head, cold_start=True)
    assert sorted(poi for poi, _ in ranking) == [1, 2, 3]
    assert all(0 < score < 1 for _, score in ranking)


def test_serving_errors(model, caches, head):
    user = sorted(caches)[0]
    with pytest.raises(retrieval.UnknownUserError):
        retrieval.serve(-1, caches[user].contexts[0], [1], model, caches, head)
    assert retrieval.serve(user, caches[user].contexts[0], [], model, caches, head) == []
    with pytest.raises(LookupError):
        retrieval.serve(user, caches[user].contexts[0], [10 ** 6], model, caches, head)


def test_selection_cost_does_not_depend_on_candidates(model, caches, head, rng):
    user = sorted(caches)[0]
    target = caches[user].contexts[0]
    counts = []
    for n in (1, 10, 30):
        candidates = rng.integers(0, model.vocabulary.n_pois, n).tolist()
        counter = retrieval.OpCounter()
        ranking = retrieval.serve(user, target, candidates, model, caches, head, counter=counter)
        assert len(ranking) == n
        counts.append((counter.gsu_calls, counter.gsu, counter.selected))
    assert len(set(counts)) == 1
    assert counts[0][0] == 1


def test_head_scores(model, caches, head, dataset):
    scores, labels = retrieval.evaluate_head(model, caches, head, dataset.test, "cofars")
    assert len(scores) == len(labels) > 0
    assert np.all((scores > 0) & (scores < 1))
    assert set(labels.tolist()) <= {0, 1}


def test_head_checkpoint(model, head, tmp_path):
    path = str(tmp_path / "head.bin")
    retrieval.save_head(head, path)
    loaded = retrieval.load_head(model, path)
    for a, b in zip(head.parameters(), loaded.parameters()):
        assert np.array_equal(a.data, b.data)


def test_mean_pooling_head(rng):
    head = retrieval.TargetAttentionHead(6, 4, rng, pooling="mean")
    probabilities = head([1, 2], [0, 3, 3])
    assert probabilities.shape == (2, 1)
    weights = retrieval.TargetAttentionHead(6, 4, rng).attention_weights(
        np.array([1, 2]), np.array([0, 3, 4])
    )
    assert np.allclose(weights.data.sum(axis=1), 1.0)


def test_selected_contexts_belong_to_open_prototypes(model, caches):
    config = model.config
    assert config.include_target is False
    checked = 0
    for user in sorted(caches):
        cache = caches[user]
        for target in cache.contexts:
            gates = retrieval.context_gates(model, cache, cache.history, target)
            allowed = set()
            for prototype in np.flatnonzero(gates > 0.5):
                allowed |= cache.assignments.get(int(prototype), set())
            selected = retrieval.behaviors("cofars", model, cache, cache.history, target, cache.index)
            if selected.degraded:
                continue
            assert set(selected.contexts) <= allowed
            checked += 1
    assert checked > 0


def test_single_behavior_gets_all_the_attention(rng):
    head = retrieval.TargetAttentionHead(6, 4, rng)
    weights = head.attention_weights(np.array([1, 2]), np.array([4]))
    assert weights.data.tolist() == [[1.0], [1.0]]
    single = retrieval.SubSequence(((4, A, 0),))
    value = retrieval.score([1], single, head)
    assert value.shape == (1,)
    assert 0 < value[0] < 1
    assert retrieval.score([], single, head).shape == (0,)


def test_duplicated_behaviors_score_the_same(rng):
    head = retrieval.TargetAttentionHead(8, 4, rng)
    entries = ((3, A, 0), (5, B, 1), (7, A, 2))
    once = retrieval.SubSequence(entries)
    twice = retrieval.SubSequence(tuple(e for e in entries for _ in range(2)))
    candidates = [0, 2, 6]
    assert np.allclose(retrieval.score(candidates, once, head), retrieval.score(candidates, twice, head))


def test_head_training_only_sees_earlier_clicks(model, caches, monkeypatch):
    draws, windows = [], []
    draw_batch, behaviors = retrieval.draw_batch, retrieval.behaviors

    def drawing(log, config, rng):
        batch = draw_batch(log, config, rng)
        draws.append(batch)
        return batch

    def recording(strategy, model_, cache, history, target, *args, **kwargs):
        batch = draws[-1]
        windows.append((min(r.timestamp for r in batch), [r.timestamp for r in history]))
        return behaviors(strategy, model_, cache, history, target, *args, **kwargs)

    monkeypatch.setattr(retrieval, "draw_batch", drawing)
    monkeypatch.setattr(retrieval, "behaviors", recording)
    retrieval.train_head(model, caches, "cofars", seed=0, epochs=1)
    assert windows
    for start, stamps in windows:
        assert stamps and max(stamps) < start
