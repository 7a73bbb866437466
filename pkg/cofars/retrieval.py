"""Second stage: context-matched sub-sequences and target attention scoring.

The sub-sequence (GSU) depends on the user and the target context only, so a
request selects it once and scores every candidate against it (ESU).
"""

__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

from collections import defaultdict
from dataclasses import dataclass, field
import heapq
from itertools import islice

import numpy as np
from tqdm import tqdm

from cofars.diffcore import (
    MLP,
    Adam,
    CheckpointError,
    Parameter,
    Tensor,
    clamp,
    concat,
    load_checkpoint,
    log,
    save_checkpoint,
    softmax,
    take_rows,
)
from cofars.encoder import UnknownIdError
from cofars.logger import get_logger
from cofars.matcher import SCORE_BOUNDS, draw_batch, gate_prototypes, history_before

logger = get_logger(__name__)

STRATEGIES = ("cofars", "hard-context", "recent-k", "avg-pooling", "topk-context")


class UnknownUserError(LookupError):
    pass


@dataclass
class OpCounter:
    """Instrumented operation counts of the retrieval stage"""

    gsu_calls: int = 0
    encode: int = 0
    gate: int = 0
    select: int = 0
    scan: int = 0
    # length of the most recent sub-sequence served
    selected: int = 0

    @property
    def gsu(self):
        return self.encode + self.gate + self.select


@dataclass(frozen=True)
class SubSequence:
    entries: tuple
    degraded: bool = False

    def __len__(self):
        return len(self.entries)

    @property
    def poi_ids(self):
        return np.array([poi for poi, _, _ in self.entries], dtype=int)

    @property
    def contexts(self):
        return [context for _, context, _ in self.entries]

    @classmethod
    def from_records(cls, records, degraded=False):
        return cls(tuple((r.poi_id, r.context, r.timestamp) for r in records), degraded)


class ContextIndex:
    """Chronological positions of each context inside one history"""

    def __init__(self, history):
        self.history = history
        self.positions = defaultdict(list)
        for position, record in enumerate(history):
            self.positions[record.context].append(position)

    def select(self, contexts, cap, counter=None):
        """Most recent cap positions over the given contexts, oldest first"""
        tails = [reversed(self.positions[c][-cap:]) for c in contexts if c in self.positions]
        chosen = list(islice(heapq.merge(*tails, reverse=True), cap))
        if counter is not None:
            counter.select += len(chosen)
        return chosen[::-1]


def select_subsequence(
    history,
    gates,
    assignments,
    cap,
    window,
    target=None,
    index=None,
    counter=None,
    include_target=False,
):
    """History entries whose context belongs to an open prototype's set.

    include_target also allows the target context itself. An empty selection
    degrades to the window most recent behaviors.
    """
    allowed = set()
    for prototype in np.flatnonzero(np.asarray(gates).reshape(-1) > 0.5):
        allowed |= set(assignments.get(int(prototype), ()))
    if include_target and target is not None:
        allowed.add(target)
    index = index or ContextIndex(history)
    positions = index.select(sorted(allowed), cap, counter)
    if not positions:
        logger.debug("no history in %d selected contexts, using recent behaviors" % len(allowed))
        return SubSequence.from_records(history[-window:], degraded=True)
    return SubSequence.from_records([history[p] for p in positions])


def _assign(similarity, contexts):
    assignments = defaultdict(set)
    for j, context in enumerate(contexts):
        assignments[int(np.argmax(similarity[:, j]))].add(context)
    return dict(assignments)


def assign_contexts(model, log):
    """Map each prototype to the contexts whose aggregated row it is most similar to"""
    state = model.user_state(log)
    similarity = model.similarity(state.prototypes, state.contexts).data
    return _assign(similarity, state.graph.contexts)


@dataclass(eq=False)
class SimilarityCache:
    """Offline per-user state: aggregated rows, similarities and assignments"""

    log: object
    prototypes: np.ndarray
    contexts: tuple
    context_rows: np.ndarray
    similarity: np.ndarray
    assignments: dict
    index: ContextIndex = field(repr=False)

    @property
    def history(self):
        return self.log.clicks


def build_cache(model, logs):
    caches = {}
    for user, log in logs.items():
        state = model.user_state(log)
        similarity = model.similarity(state.prototypes, state.contexts).data
        caches[user] = SimilarityCache(
            log=log,
            prototypes=state.prototypes.data,
            contexts=state.graph.contexts,
            context_rows=state.contexts.data,
            similarity=similarity,
            assignments=_assign(similarity, state.graph.contexts),
            index=ContextIndex(log.clicks),
        )
    return caches


def context_gates(model, cache, history, target, cold_start=False, counter=None):
    """Hard gate per prototype for one target context.

    Seen contexts read their similarity column from the cache; unseen ones (or
    cold_start) attach a new context node and aggregate on the fly.
    """
    config = model.config
    recent = model.recent(history)
    if counter is not None:
        counter.encode += min(len(history), config.window)
        counter.gate += len(cache.prototypes)
    if target in cache.contexts and not cold_start:
        column = cache.similarity[:, [cache.contexts.index(target)]]
        prototypes = Tensor(cache.prototypes)
    else:
        state = model.user_state(cache.log, extra_context=target)
        prototypes = state.prototypes
        column = model.similarity(prototypes, state.contexts[-1]).data
    gates = gate_prototypes(
        prototypes,
        None,
        recent,
        config.tau_min,
        lambda a, b: Tensor(column),
        fallback=config.fallback,
        squash=config.gate_squash,
    )
    return gates.hard[:, 0]


def _nearest_contexts(log, target, k):
    if target not in log.contexts:
        return set()
    row = log.divergence.values[log.position(target)]
    order = [j for j in np.argsort(row, kind="stable") if log.contexts[j] != target]
    return {log.contexts[j] for j in order[:k]}


def behaviors(strategy, model, cache, history, target, index=None, counter=None, cold_start=False):
    """Sub-sequence a strategy feeds to the target attention head"""
    config = model.config
    if strategy == "cofars":
        gates = context_gates(model, cache, history, target, cold_start, counter)
        return select_subsequence(
            history,
            gates,
            cache.assignments,
            config.cap,
            config.window,
            target,
            index,
            counter,
            include_target=config.include_target,
        )
    if strategy == "hard-context":
        return select_subsequence(
            history, np.ones(1), {0: {target}}, config.cap, config.window, target, index
        )
    if strategy == "topk-context":
        nearest = _nearest_contexts(cache.log, target, config.topk_contexts)
        return select_subsequence(
            history, np.ones(1), {0: nearest | {target}}, config.cap, config.window, target, index
        )
    if strategy == "recent-k":
        return SubSequence.from_records(history[-config.recent_k :])
    if strategy == "avg-pooling":
        return SubSequence.from_records(history[-config.cap :])
    raise ValueError("unknown strategy %s, choose from %s" % (strategy, ", ".join(STRATEGIES)))


class TargetAttentionHead:
    """DIN style head: attention over the sub-sequence keyed by the candidate.

    Behavior features are [candidate, behavior, candidate * behavior,
    candidate - behavior]; the output MLP reads [pooled interest, candidate].
    pooling="mean" averages the behaviors instead.
    """

    def __init__(self, n_pois, dim, rng, pooling="attention", poi_table=None, units=(36, 32)):
        table = rng.uniform(0, 1, (n_pois, dim)) if poi_table is None else np.array(poi_table)
        self.poi = Parameter(table, "head.poi")
        self.pooling = pooling
        self.attention = MLP("head.attention", [4 * dim, units[0], 1], rng, "relu")
        self.output = MLP("head.output", [2 * dim, units[1], 1], rng, "relu", "sigmoid")

    def parameters(self):
        return [self.poi] + self.attention.parameters() + self.output.parameters()

    def _rows(self, poi_ids):
        poi_ids = np.asarray(poi_ids, dtype=int).reshape(-1)
        if poi_ids.size and (poi_ids.min() < 0 or poi_ids.max() >= self.poi.shape[0]):
            raise UnknownIdError("PoI id out of range [0, %d)" % self.poi.shape[0])
        return take_rows(self.poi, poi_ids)

    def attention_weights(self, candidates, behaviors):
        n, length = len(candidates), len(behaviors)
        candidate = self._rows(np.repeat(candidates, length))
        behavior = self._rows(np.tile(behaviors, n))
        features = concat(
            [candidate, behavior, candidate * behavior, candidate - behavior], axis=1
        )
        return softmax(self.attention(features).reshape(n, length))

    def __call__(self, candidates, behaviors):
        """Click probabilities (candidates x 1)"""
        candidates = np.asarray(candidates, dtype=int).reshape(-1)
        behaviors = np.asarray(behaviors, dtype=int).reshape(-1)
        history = self._rows(behaviors)
        if self.pooling == "mean":
            pooled = Tensor(np.ones((len(candidates), 1))) @ history.mean(axis=0)
        else:
            pooled = self.attention_weights(candidates, behaviors) @ history
        return self.output(concat([pooled, self._rows(candidates)], axis=1))


def save_head(head, path):
    save_checkpoint(path, head.parameters())


def load_head(model, path, pooling="attention"):
    """Rebuild a saved head for a model; shapes come from the model"""
    head = TargetAttentionHead(
        model.vocabulary.n_pois, model.config.dim, np.random.default_rng(model.seed), pooling
    )
    arrays = load_checkpoint(path)
    for param in head.parameters():
        if param.name not in arrays or arrays[param.name].shape != param.shape:
            raise CheckpointError("%s is missing or has the wrong shape in %s" % (param.name, path))
        param.data = arrays[param.name].astype(float)
    return head


def score(candidates, subsequence, head):
    """Click probability of each candidate over one shared sub-sequence"""
    candidates = np.asarray(candidates, dtype=int).reshape(-1)
    if candidates.size == 0:
        return np.zeros(0)
    return head(candidates, subsequence.poi_ids).data[:, 0]


def bce(probabilities, labels):
    labels = Tensor(np.asarray(labels, dtype=float).reshape(-1, 1))
    p = clamp(probabilities, *SCORE_BOUNDS)
    return -(labels * log(p) + (1.0 - labels) * log(1.0 - p)).sum()


def _by_context(records):
    groups = defaultdict(list)
    for record in records:
        groups[record.context].append(record)
    return sorted(groups.items())


def train_head(model, caches, strategy="cofars", seed=0, epochs=None, progress=False):
    """Fit a target attention head on sub-sequences from a frozen first stage"""
    config = model.config
    rng = np.random.default_rng([seed, 2])
    head = TargetAttentionHead(
        model.vocabulary.n_pois,
        config.dim,
        rng,
        pooling="mean" if strategy == "avg-pooling" else "attention",
        poi_table=model.encoder.tables.poi.data,
    )
    optimizer = Adam(head.parameters(), lr=config.head_lr)
    users = sorted(caches)
    epochs = config.head_epochs if epochs is None else epochs
    for epoch in tqdm(range(epochs), desc=strategy, disable=not progress):
        for position in rng.permutation(len(users)):
            cache = caches[users[position]]
            batch = draw_batch(cache.log, config, rng)
            if not batch:
                continue
            history = history_before(cache.log, batch)
            if not history:
                continue
            index = ContextIndex(history)
            optimizer.zero_grad()
            total = None
            for context, records in _by_context(batch):
                subsequence = behaviors(strategy, model, cache, history, context, index)
                probabilities = head([r.poi_id for r in records], subsequence.poi_ids)
                loss = bce(probabilities, [r.click for r in records])
                total = loss if total is None else total + loss
            total = total * (1.0 / len(batch))
            total.backward()
            optimizer.step()
        logger.debug("head %s epoch %d done" % (strategy, epoch))
    return head


def evaluate_head(model, caches, head, test, strategy="cofars"):
    """Scores and labels of the test records of every cached user"""
    config = model.config
    scores, labels = [], []
    per_user = defaultdict(list)
    for record in test:
        per_user[record.user_id].append(record)
    for user in sorted(per_user):
        if user not in caches:
            continue
        cache = caches[user]
        records = sorted(per_user[user], key=lambda r: r.timestamp)[: config.eval_samples]
        for context, group in _by_context(records):
            subsequence = behaviors(strategy, model, cache, cache.history, context, cache.index)
            scores.extend(score([r.poi_id for r in group], subsequence, head))
            labels.extend(int(r.click) for r in group)
    return np.array(scores), np.array(labels)


def serve(user, target, candidates, model, caches, head, cold_start=False, counter=None):
    """Rank candidates for one request; the sub-sequence is selected once"""
    if user not in caches:
        raise UnknownUserError("user %s has no cached state" % user)
    if len(candidates) == 0:
        return []
    cache = caches[user]
    counter = counter if counter is not None else OpCounter()
    counter.gsu_calls += 1
    subsequence = behaviors(
        "cofars", model, cache, cache.history, target, cache.index, counter, cold_start
    )
    counter.selected = len(subsequence)
    values = score(candidates, subsequence, head)
    order = sorted(range(len(candidates)), key=lambda i: (-values[i], i))
    return [(int(candidates[i]), float(values[i])) for i in order]
