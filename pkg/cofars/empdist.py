"""Empirical per-context attribute distributions and their divergences.

Distributions are factorized: one smoothed probability vector per attribute
field, and divergences are the mean of the per-field divergences so the
ground truth lives in the same space as the decoded encoder output.
"""

__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

from dataclasses import dataclass
import hashlib
import json
import os
import struct

import numpy as np
import pandas as pd

from cofars.logger import get_logger

logger = get_logger(__name__)

MATRIX_MAGIC = b"CFDM"
MATRIX_VERSION = 1


class SchemaMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AttributeDistribution:
    schema: object
    probs: tuple
    support_count: int = 0

    def flat(self):
        return np.concatenate(self.probs)

    def to_dict(self):
        return {
            "support_count": self.support_count,
            "probs": {name: p.tolist() for (name, _), p in zip(self.schema.fields, self.probs)},
        }

    @classmethod
    def from_dict(cls, schema, values):
        probs = tuple(np.asarray(values["probs"][name], dtype=float) for name, _ in schema.fields)
        return cls(schema, probs, values.get("support_count", 0))


@dataclass(frozen=True, eq=False)
class DivergenceMatrix:
    contexts: tuple
    values: np.ndarray

    def __len__(self):
        return len(self.contexts)

    def to_frame(self, label=str):
        labels = [label(c) for c in self.contexts]
        return pd.DataFrame(self.values, index=labels, columns=labels)


def _check_alpha(alpha):
    if alpha <= 0:
        raise ValueError("smoothing alpha must be positive, got %s" % alpha)


def _smooth(counts, total, alpha):
    return (counts + alpha) / (total + alpha * counts.shape[0])


def _count(records, schema, clicks_only):
    counts, support = {}, {}
    for record in records:
        if clicks_only and not record.click:
            continue
        vectors = counts.get(record.context)
        if vectors is None:
            vectors = counts[record.context] = [np.zeros(card) for _, card in schema.fields]
            support[record.context] = 0
        support[record.context] += 1
        for f, value in enumerate(record.attrs):
            vectors[f][value] += 1
    return counts, support


def pooled(records, schema, alpha=1e-6, clicks_only=True):
    """Single distribution over every record, the backoff pool for sparse contexts"""
    _check_alpha(alpha)
    totals = [np.zeros(card) for _, card in schema.fields]
    n = 0
    for record in records:
        if clicks_only and not record.click:
            continue
        n += 1
        for f, value in enumerate(record.attrs):
            totals[f][value] += 1
    return AttributeDistribution(schema, tuple(_smooth(t, n, alpha) for t in totals), n)


def estimate(records, schema, alpha=1e-6, backoff=None, min_support=5, clicks_only=True):
    """Estimate one smoothed distribution per context for a single user.

    Contexts with fewer than min_support records are blended with the backoff
    pool, weighting the own estimate by support / (support + min_support).
    """
    _check_alpha(alpha)
    counts, support = _count(records, schema, clicks_only)
    estimates = {}
    for context in sorted(counts):
        n = support[context]
        probs = tuple(_smooth(c, n, alpha) for c in counts[context])
        if backoff is not None and n < min_support:
            weight = n / (n + min_support)
            probs = tuple(weight * p + (1 - weight) * b for p, b in zip(probs, backoff.probs))
            logger.debug("context %s has support %d, blending with pool" % (context, n))
        estimates[context] = AttributeDistribution(schema, probs, n)
    return estimates


def _check_schema(p, q):
    if tuple(p.schema.fields) != tuple(q.schema.fields) or len(p.probs) != len(q.probs):
        raise SchemaMismatchError(
            "distributions over different schemas: %s vs %s" % (p.schema.fields, q.schema.fields)
        )


def _field_kl(p, q):
    return float(np.sum(p * np.log(p / q)))


def kl(p, q):
    """Mean over fields of the per-field Kullback-Leibler divergence (natural log)"""
    _check_schema(p, q)
    return float(np.mean([_field_kl(pf, qf) for pf, qf in zip(p.probs, q.probs)]))


def js(p, q, midpoint=False):
    """Symmetrized divergence between two context distributions.

    The default is the mean of both KL directions. With midpoint=True the
    standard Jensen-Shannon divergence against the mixture is returned.
    """
    if not midpoint:
        return 0.5 * (kl(p, q) + kl(q, p))
    _check_schema(p, q)
    values = []
    for pf, qf in zip(p.probs, q.probs):
        m = 0.5 * (pf + qf)
        values.append(0.5 * _field_kl(pf, m) + 0.5 * _field_kl(qf, m))
    return float(np.mean(values))


def divergence_matrix(distributions, midpoint=False):
    """All-pairs divergence over a mapping of context to distribution"""
    if not distributions:
        raise ValueError("divergence_matrix needs at least one context")
    contexts = tuple(sorted(distributions))
    n = len(contexts)
    values = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            values[i, j] = values[j, i] = js(
                distributions[contexts[i]], distributions[contexts[j]], midpoint=midpoint
            )
    return DivergenceMatrix(contexts, values)


# Joint mode, only to measure how much the factorization loses


def estimate_joint(records, schema, alpha=1e-6, clicks_only=True):
    """Smoothed joint distribution over the product of at most two fields"""
    _check_alpha(alpha)
    if len(schema.fields) > 2:
        raise ValueError("joint mode supports at most 2 fields, got %d" % len(schema.fields))
    shape = tuple(card for _, card in schema.fields)
    counts = {}
    for record in records:
        if clicks_only and not record.click:
            continue
        table = counts.setdefault(record.context, np.zeros(shape))
        table[tuple(record.attrs)] += 1
    return {
        context: (table + alpha) / (table.sum() + alpha * table.size)
        for context, table in sorted(counts.items())
    }


def joint_from_marginals(distribution):
    if len(distribution.probs) > 2:
        raise ValueError("joint mode supports at most 2 fields")
    joint = distribution.probs[0]
    for p in distribution.probs[1:]:
        joint = np.multiply.outer(joint, p)
    return joint


def joint_js(p, q):
    if p.shape != q.shape:
        raise SchemaMismatchError("joint tables differ in shape: %s vs %s" % (p.shape, q.shape))
    return 0.5 * (float(np.sum(p * np.log(p / q))) + float(np.sum(q * np.log(q / p))))


# Binary cache of divergence matrices


def schema_hash(schema):
    payload = json.dumps([list(f) for f in schema.fields])
    return hashlib.sha256(payload.encode("utf-8")).digest()


def write_matrix(path, matrix, user, schema):
    contexts = json.dumps([[list(pair) for pair in context] for context in matrix.contexts])
    contexts = contexts.encode("utf-8")
    n = len(matrix.contexts)
    with open(path, "wb") as fd:
        fd.write(MATRIX_MAGIC)
        fd.write(struct.pack("<Iq", MATRIX_VERSION, user))
        fd.write(schema_hash(schema))
        fd.write(struct.pack("<I", len(contexts)))
        fd.write(contexts)
        fd.write(struct.pack("<I", n))
        fd.write(np.ascontiguousarray(matrix.values, dtype="<f8").tobytes())


def read_matrix(path, schema=None):
    """Read a cached matrix, returning (user, DivergenceMatrix)"""
    with open(path, "rb") as fd:
        if fd.read(4) != MATRIX_MAGIC:
            raise ValueError("%s is not a divergence matrix file" % path)
        version, user = struct.unpack("<Iq", fd.read(12))
        if version != MATRIX_VERSION:
            raise ValueError("%s has unsupported version %d" % (path, version))
        digest = fd.read(32)
        if schema is not None and digest != schema_hash(schema):
            raise SchemaMismatchError("%s was computed for another schema" % path)
        (size,) = struct.unpack("<I", fd.read(4))
        contexts = tuple(
            tuple(tuple(pair) for pair in context) for context in json.loads(fd.read(size))
        )
        (n,) = struct.unpack("<I", fd.read(4))
        values = np.frombuffer(fd.read(8 * n * n), dtype="<f8").reshape(n, n).astype(float)
    return user, DivergenceMatrix(contexts, values)


class DivergenceCache:
    """Divergence matrices on disk keyed by user and dataset hash"""

    def __init__(self, directory):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)

    def path(self, user, dataset_hash):
        return os.path.join(self.directory, "user-%s-%s.bin" % (user, dataset_hash[:16]))

    def load_or_compute(self, user, dataset_hash, schema, compute):
        path = self.path(user, dataset_hash)
        if os.path.exists(path):
            try:
                return read_matrix(path, schema)[1]
            except (ValueError, struct.error) as exc:
                logger.warning("ignoring cached matrix %s: %s" % (path, exc))
        matrix = compute()
        write_matrix(path, matrix, user, schema)
        return matrix
