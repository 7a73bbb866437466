__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

import numpy as np

from cofars.diffcore import MLP, Parameter, Tensor, concat, log, take_rows
from cofars.logger import get_logger

logger = get_logger(__name__)

# Lowest probability a decoded field may carry
PROBABILITY_FLOOR = 1e-9

KINDS = ("context", "prototype")


class UnknownIdError(LookupError):
    pass


class EmbeddingTables:
    """User, global context, global prototype and PoI embeddings, uniform(0, 1)"""

    def __init__(self, n_users, n_contexts, n_prototypes, n_pois, dim, rng):
        self.dim = dim
        self.user = Parameter(rng.uniform(0, 1, (n_users, dim)), "embedding.user")
        self.context = Parameter(rng.uniform(0, 1, (n_contexts, dim)), "embedding.context")
        self.prototype = Parameter(rng.uniform(0, 1, (n_prototypes, dim)), "embedding.prototype")
        self.poi = Parameter(rng.uniform(0, 1, (n_pois, dim)), "embedding.poi")

    def table(self, kind):
        if kind not in KINDS + ("user", "poi"):
            raise ValueError("unknown embedding kind %s" % kind)
        return getattr(self, kind)

    def lookup(self, kind, index):
        table = self.table(kind)
        index = np.atleast_1d(np.asarray(index, dtype=int))
        if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
            raise UnknownIdError("%s id out of range [0, %d): %s" % (kind, table.shape[0], index))
        return take_rows(table, index)

    def parameters(self):
        return [self.user, self.context, self.prototype, self.poi]


class ProbabilityDecoder:
    """MLP from a representation to one probability vector per attribute field.

    Two relu hidden layers of width 4 * total_dim and a sigmoid output; each
    field block is then normalized and floored so it is a distribution. With
    normalize=False the raw sigmoid outputs are returned.
    """

    def __init__(self, schema, dim, rng, normalize=True):
        width = 4 * schema.total_dim
        self.bounds = schema.bounds()
        self.normalize = normalize
        self.mlp = MLP("decoder", [dim, width, width, schema.total_dim], rng, "relu", "sigmoid")

    def __call__(self, reps):
        probs = self.mlp(reps)
        if not self.normalize:
            return probs
        blocks = []
        for start, stop in self.bounds:
            block = probs[:, start:stop]
            block = block / block.sum(axis=1)
            blocks.append(block * (1.0 - (stop - start) * PROBABILITY_FLOOR) + PROBABILITY_FLOOR)
        return concat(blocks, axis=1)

    def parameters(self):
        return self.mlp.parameters()


def pairwise_js(p, q, n_fields, self_pairs=False):
    """Symmetrized per-field-mean KL between every row of p and every row of q.

    With self_pairs the diagonal is the divergence of a row with itself and is
    set to exactly zero.
    """
    log_p, log_q = log(p), log(q)
    kl_pq = ((p * log_p).sum(axis=1) - p @ log_q.T) * (1.0 / n_fields)
    kl_qp = ((q * log_q).sum(axis=1) - q @ log_p.T) * (1.0 / n_fields)
    js = (kl_pq + kl_qp.T) * 0.5
    if self_pairs:
        js = js * (1.0 - np.eye(js.shape[0]))
    return js


class ProbabilityEncoder:
    def __init__(
        self,
        schema,
        n_users,
        n_contexts,
        n_prototypes,
        n_pois,
        dim,
        rng,
        similarity="js",
        normalize=True,
    ):
        self.schema = schema
        self.n_fields = len(schema.fields)
        self.similarity_mode = similarity
        self.tables = EmbeddingTables(n_users, n_contexts, n_prototypes, n_pois, dim, rng)
        self.decoder = ProbabilityDecoder(schema, dim, rng, normalize=normalize)

    @property
    def n_prototypes(self):
        return self.tables.prototype.shape[0]

    def parameters(self):
        return self.tables.parameters() + self.decoder.parameters()

    def personalize(self, user, index, kind):
        """User row plus global rows: c = u + c_hat, o = o_hat + u"""
        if kind not in KINDS:
            raise ValueError("personalize kind must be context or prototype, got %s" % kind)
        return self.tables.lookup(kind, index) + self.tables.lookup("user", user)

    def prototypes(self, user):
        return self.personalize(user, np.arange(self.n_prototypes), "prototype")

    def cold_start_row(self, user, known):
        """Personalized row for a context the user never visited"""
        known = np.asarray(known, dtype=int)
        if known.size == 0:
            return self.tables.lookup("user", user)
        return self.tables.lookup("context", known).mean(axis=0) + self.tables.lookup("user", user)

    def decode(self, reps):
        return self.decoder(reps)

    def pairwise_js(self, a, b=None):
        if b is None:
            decoded = self.decode(a)
            return pairwise_js(decoded, decoded, self.n_fields, self_pairs=True)
        return pairwise_js(self.decode(a), self.decode(b), self.n_fields)

    def estimated_js(self, rep_i, rep_j):
        return pairwise_js(self.decode(rep_i), self.decode(rep_j), self.n_fields)

    def similarity(self, a, b=None):
        """Learned similarity 1 - JS between rows, or inner products in ip mode"""
        if self.similarity_mode == "ip":
            return a @ (a if b is None else b).T
        return 1.0 - self.pairwise_js(a, b)

    def mse_loss(self, user, context_index, divergence):
        """Mean squared gap between estimated and ground-truth divergences,
        over every ordered pair including the diagonal
        """
        if len(context_index) < 2:
            logger.warning("user %s has a single context, alignment loss is 0" % user)
            return Tensor(0.0)
        estimate = self.pairwise_js(self.personalize(user, context_index, "context"))
        gap = estimate - Tensor(divergence.values)
        return (gap * gap).mean()

    def independence_loss(self, user):
        return -self.pairwise_js(self.prototypes(user)).mean()
