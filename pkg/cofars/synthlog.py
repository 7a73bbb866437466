"""Interaction log data model, JSONL ingestion and the synthetic generator.

The generator plants K preference groups over contexts: a context's clicks
draw their attribute values from its group's distribution, so the planted
truth is the oracle for every downstream check.
"""

__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

from collections import defaultdict
from dataclasses import dataclass
import hashlib
import itertools
import json

import numpy as np
import pandas as pd

from cofars.config import GeneratorConfig
from cofars.empdist import AttributeDistribution
from cofars.logger import get_logger

logger = get_logger(__name__)

# Mixed into every planted distribution so no value is (numerically) impossible
PLANTED_FLOOR = 1e-2


class SchemaError(ValueError):
    pass


class RecordError(ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = "line %d: %s" % (line, message)
        super().__init__(message)
        self.line = line


class GeneratorError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSchema:
    fields: tuple

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple((str(n), int(c)) for n, c in self.fields))
        if not self.fields:
            raise SchemaError("an attribute schema needs at least one field")
        for name, cardinality in self.fields:
            if cardinality < 2:
                raise SchemaError("field %s has cardinality %d, need >= 2" % (name, cardinality))

    @property
    def names(self):
        return tuple(name for name, _ in self.fields)

    @property
    def cardinalities(self):
        return tuple(card for _, card in self.fields)

    @property
    def total_dim(self):
        return sum(self.cardinalities)

    @property
    def n_pois(self):
        return int(np.prod(self.cardinalities))

    def bounds(self):
        """Column range of each field inside a concatenated probability vector"""
        stops = np.cumsum(self.cardinalities)
        return [(int(stop - card), int(stop)) for stop, card in zip(stops, self.cardinalities)]

    def encode(self, attrs):
        """PoI id for an attribute combination (mixed radix)"""
        return int(np.ravel_multi_index(tuple(attrs), self.cardinalities))

    def decode(self, poi_id):
        return tuple(int(v) for v in np.unravel_index(poi_id, self.cardinalities))

    def validate(self, attrs, line=None):
        if len(attrs) != len(self.fields):
            raise RecordError("expected %d attributes, got %d" % (len(self.fields), len(attrs)), line)
        for (name, card), value in zip(self.fields, attrs):
            if not 0 <= value < card:
                raise RecordError("attribute %s=%s outside [0, %d)" % (name, value, card), line)


DEFAULT_SCHEMA = AttributeSchema(GeneratorConfig().cardinalities)


def schema_from_config(config):
    return AttributeSchema(config.cardinalities)


def make_context(**features):
    """ContextKey from keyword features, keeping the given order"""
    return tuple(features.items())


def context_label(context):
    return "|".join("%s=%s" % (name, value) for name, value in context)


def context_pool(features):
    """Every combination of context feature values, sorted"""
    names = list(features)
    combos = itertools.product(*[features[name] for name in names])
    return sorted(tuple(zip(names, combo)) for combo in combos)


@dataclass(frozen=True, slots=True)
class InteractionRecord:
    user_id: int
    poi_id: int
    timestamp: int
    context: tuple
    attrs: tuple
    click: bool
    exposed: bool = True


@dataclass(frozen=True, eq=False)
class PlantedTruth:
    group_of_context: dict
    group_dists: tuple

    @property
    def groups(self):
        return len(self.group_dists)

    def group(self, context):
        return self.group_of_context[context]

    def to_dict(self):
        return {
            "group_of_context": [
                [[list(pair) for pair in context], group]
                for context, group in sorted(self.group_of_context.items())
            ],
            "group_dists": [d.to_dict() for d in self.group_dists],
        }

    @classmethod
    def from_dict(cls, values, schema):
        groups = {
            tuple(tuple(pair) for pair in context): group
            for context, group in values["group_of_context"]
        }
        dists = tuple(AttributeDistribution.from_dict(schema, d) for d in values["group_dists"])
        return cls(groups, dists)


def _planted(rng, schema, concentration):
    probs = []
    for _, card in schema.fields:
        p = rng.dirichlet([concentration] * card)
        probs.append((1 - PLANTED_FLOOR) * p + PLANTED_FLOOR / card)
    return AttributeDistribution(schema, tuple(probs), 0)


def _context_sequence(rng, n_contexts, clicks, skew, stickiness):
    weights = 1.0 / np.arange(1, n_contexts + 1) ** skew
    fresh = rng.choice(n_contexts, size=clicks, p=weights / weights.sum())
    stay = rng.random(clicks) < stickiness
    stay[0] = False
    last = np.maximum.accumulate(np.where(stay, 0, np.arange(clicks)))
    return fresh[last]


def _generate_user(user, config, schema, pool, truth, rng):
    per_click = 1 + config.negatives_per_click
    clicks = max(1, config.sequence_length // per_click)
    chosen = rng.choice(len(pool), size=config.contexts_per_user, replace=False)
    contexts = [pool[i] for i in chosen]
    sequence = _context_sequence(
        rng, len(contexts), clicks, config.context_skew, config.context_stickiness
    )
    groups = np.array([truth.group(c) for c in contexts])[sequence]
    noisy = rng.random(clicks) < config.noise

    attrs = np.zeros((clicks, len(schema.fields)), dtype=int)
    negatives = np.zeros((clicks, config.negatives_per_click, len(schema.fields)), dtype=int)
    for f, (_, card) in enumerate(schema.fields):
        for g, dist in enumerate(truth.group_dists):
            rows = np.flatnonzero((groups == g) & ~noisy)
            attrs[rows, f] = rng.choice(card, size=rows.size, p=dist.probs[f])

            # exposed but not clicked: inversely proportional to group affinity
            inverse = 1.0 / dist.probs[f]
            rows = np.flatnonzero(groups == g)
            negatives[rows, :, f] = rng.choice(
                card, size=(rows.size, config.negatives_per_click), p=inverse / inverse.sum()
            )
        rows = np.flatnonzero(noisy)
        attrs[rows, f] = rng.integers(0, card, size=rows.size)

    records = []
    for k in range(clicks):
        context = contexts[sequence[k]]
        click_attrs = tuple(int(v) for v in attrs[k])
        ts = k * per_click
        records.append(
            InteractionRecord(user, schema.encode(click_attrs), ts, context, click_attrs, True)
        )
        for j in range(config.negatives_per_click):
            shown = tuple(int(v) for v in negatives[k, j])
            records.append(
                InteractionRecord(user, schema.encode(shown), ts + 1 + j, context, shown, False)
            )
    return records


def generate(config, seed):
    """Generate synthetic logs and the planted truth they were drawn from"""
    schema = schema_from_config(config)
    pool = context_pool(config.context_features)
    if config.groups > len(pool):
        raise GeneratorError("%d groups requested but only %d contexts" % (config.groups, len(pool)))
    if config.contexts_per_user > len(pool):
        raise GeneratorError(
            "%d contexts per user requested but only %d exist" % (config.contexts_per_user, len(pool))
        )
    if not 0 <= config.noise < 1:
        raise GeneratorError("noise must lie in [0, 1), got %s" % config.noise)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    group_of_context = {pool[i]: rank % config.groups for rank, i in enumerate(order)}
    dists = tuple(_planted(rng, schema, config.concentration) for _ in range(config.groups))
    truth = PlantedTruth(group_of_context, dists)

    records = []
    for user in range(config.users):
        # independent per-user streams so users can be generated in any order
        user_rng = np.random.default_rng([seed, user])
        records.extend(_generate_user(user, config, schema, pool, truth, user_rng))
    logger.info("generated %d records for %d users" % (len(records), config.users))
    return records, truth


def record_to_dict(record, schema):
    return {
        "user": record.user_id,
        "poi": record.poi_id,
        "ts": record.timestamp,
        "ctx": dict(record.context),
        "attrs": dict(zip(schema.names, record.attrs)),
        "click": int(record.click),
    }


def write_records(records, path, schema=DEFAULT_SCHEMA):
    with open(path, "w") as fd:
        for record in records:
            fd.write(json.dumps(record_to_dict(record, schema)) + "\n")


def bucketize(values, n_buckets=10):
    """Quantile buckets for a continuous attribute"""
    return pd.qcut(pd.Series(values), q=n_buckets, labels=False, duplicates="drop").astype(int).tolist()


def _parse(line, number, schema):
    try:
        entry = json.loads(line)
        user, poi, ts = int(entry["user"]), int(entry["poi"]), int(entry["ts"])
        context = tuple((str(k), v) for k, v in entry["ctx"].items())
        raw = [entry["attrs"][name] for name in schema.names]
        click = bool(entry["click"])
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise RecordError("malformed record (%s)" % exc, number)
    return user, poi, ts, context, raw, click


def ingest(path, schema=DEFAULT_SCHEMA):
    """Read and validate a JSONL log, sorted per user by timestamp.

    Raw float prices are quantile bucketed over the whole file before the
    attributes are checked against the schema.
    """
    parsed = []
    with open(path, "r") as fd:
        for number, line in enumerate(fd, start=1):
            if line.strip():
                parsed.append((number, _parse(line, number, schema)))

    if "price" in schema.names:
        f = schema.names.index("price")
        prices = [entry[4][f] for _, entry in parsed]
        if any(isinstance(p, float) and not float(p).is_integer() for p in prices):
            logger.info("bucketing raw prices into %d quantile buckets" % schema.cardinalities[f])
            for (_, entry), bucket in zip(parsed, bucketize(prices, schema.cardinalities[f])):
                entry[4][f] = bucket

    records = []
    for number, (user, poi, ts, context, raw, click) in parsed:
        if any(isinstance(v, float) and not float(v).is_integer() for v in raw):
            raise RecordError("attributes must be integer value indices", number)
        try:
            attrs = tuple(int(v) for v in raw)
        except (TypeError, ValueError) as exc:
            raise RecordError("attributes must be integer value indices (%s)" % exc, number)
        schema.validate(attrs, number)
        records.append(InteractionRecord(user, poi, ts, context, attrs, click))
    records.sort(key=lambda r: (r.user_id, r.timestamp))
    return records


@dataclass(frozen=True)
class ServeRequest:
    user_id: int
    context: tuple
    candidates: tuple


def request_to_dict(request):
    return {
        "user": request.user_id,
        "context": dict(request.context),
        "candidates": list(request.candidates),
    }


def write_requests(requests, path):
    with open(path, "w") as fd:
        for request in requests:
            fd.write(json.dumps(request_to_dict(request)) + "\n")


def read_requests(path):
    """Serving requests, one {user, context, candidates} object per line"""
    requests = []
    with open(path, "r") as fd:
        for number, line in enumerate(fd, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                context = entry["context"] if "context" in entry else entry["ctx"]
                requests.append(
                    ServeRequest(
                        int(entry["user"]),
                        tuple((str(k), v) for k, v in context.items()),
                        tuple(int(poi) for poi in entry["candidates"]),
                    )
                )
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise RecordError("malformed request (%s)" % exc, number)
    return requests


def by_user(records):
    """Group records per user, keeping timestamp order"""
    users = defaultdict(list)
    for record in records:
        users[record.user_id].append(record)
    for history in users.values():
        history.sort(key=lambda r: r.timestamp)
    return dict(sorted(users.items()))


def split(records, holdout_fraction):
    """Temporal split: the last fraction of each user's records is the test set"""
    if not 0 < holdout_fraction < 1:
        raise ValueError("holdout fraction must lie in (0, 1), got %s" % holdout_fraction)
    train, test = [], []
    for user, history in by_user(records).items():
        if len(history) < 2:
            train.extend(history)
            continue
        n_test = int(np.floor(round(len(history) * holdout_fraction, 9)))
        cut = len(history) - n_test
        train.extend(history[:cut])
        test.extend(history[cut:])
    return train, test


def dataset_fingerprint(records, schema=DEFAULT_SCHEMA):
    digest = hashlib.sha256()
    for record in records:
        digest.update(json.dumps(record_to_dict(record, schema)).encode("utf-8"))
    return digest.hexdigest()
