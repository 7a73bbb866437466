"""Per-user temporal context graph with gated prototype nodes.

Node order is prototypes first, then contexts. Context nodes are linked
earlier to later wherever two distinct contexts follow each other in the
user's sequence; prototype and context nodes are linked both ways when their
Gumbel gate is open; every node keeps a self-loop.
"""

__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

from dataclasses import dataclass
import math

import numpy as np

from cofars.diffcore import (
    Parameter,
    Tensor,
    clamp,
    concat,
    exp,
    gumbel_gate,
    leaky_relu,
    relu,
    smooth_clamp,
)
from cofars.logger import get_logger

logger = get_logger(__name__)


@dataclass(eq=False)
class TemporalGraph:
    n_prototypes: int
    contexts: tuple
    temporal_edges: tuple
    gates: Tensor
    features: Tensor

    @property
    def n_nodes(self):
        return self.n_prototypes + len(self.contexts)

    @property
    def gate_values(self):
        return self.gates.data

    def temporal_matrix(self):
        """Constant incoming adjacency among context nodes, self-loops included"""
        n = len(self.contexts)
        matrix = np.eye(n)
        for src, dst in self.temporal_edges:
            matrix[dst - self.n_prototypes, src - self.n_prototypes] = 1.0
        return matrix

    def adjacency(self):
        """Incoming edge weights: entry (i, j) weighs the edge j -> i.

        Gate entries carry the straight-through gradient of their gate.
        """
        top = concat([Tensor(np.eye(self.n_prototypes)), self.gates], axis=1)
        bottom = concat([self.gates.T, Tensor(self.temporal_matrix())], axis=1)
        return concat([top, bottom], axis=0)

    def edges(self):
        """Edge list rows (src, dst, kind, gate)"""
        rows = [(i, i, "self", 1.0) for i in range(self.n_nodes)]
        rows += [(src, dst, "temporal", 1.0) for src, dst in self.temporal_edges]
        for i, j in zip(*np.nonzero(self.gate_values)):
            node = self.n_prototypes + int(j)
            gate = float(self.gate_values[i, j])
            rows.append((int(i), node, "prototype", gate))
            rows.append((node, int(i), "prototype", gate))
        return sorted(rows, key=lambda row: (row[1], row[0], row[2]))


def transitions(sequence, position, offset=0):
    edges = set()
    for previous, current in zip(sequence, sequence[1:]):
        if previous != current:
            edges.add((offset + position[previous], offset + position[current]))
    return tuple(sorted(edges))


def build(
    sequence,
    user,
    encoder,
    vocabulary,
    tau,
    training=False,
    rng=None,
    hard=True,
    extra_context=None,
):
    """Build a user's graph from their context sequence.

    extra_context attaches one more context node, without temporal edges,
    whose row is the mean of the user's known context rows (cold start).
    """
    if not sequence:
        raise ValueError("cannot build a graph from an empty context sequence")
    contexts = sorted(set(sequence))
    position = {context: j for j, context in enumerate(contexts)}
    n_prototypes = encoder.n_prototypes
    edges = transitions(sequence, position, n_prototypes)

    index = [vocabulary.context_index[c] for c in contexts]
    rows = encoder.personalize(user, index, "context")
    if extra_context is not None:
        rows = concat([rows, encoder.cold_start_row(user, index)], axis=0)
        contexts.append(extra_context)

    prototypes = encoder.prototypes(user)
    beta = smooth_clamp(encoder.similarity(prototypes, rows))
    gates = gumbel_gate(beta, tau, hard=hard, rng=rng if training else None)
    return TemporalGraph(
        n_prototypes, tuple(contexts), edges, gates, concat([prototypes, rows], axis=0)
    )


def gated_softmax(scores, weights):
    """Softmax over each row's incoming edges, weighted by the edge weights"""
    present = weights.data > 0
    shift = np.where(present, scores.data, -np.inf).max(axis=1, keepdims=True)
    numerator = weights * exp(clamp(scores - Tensor(shift), hi=0.0))
    return numerator / numerator.sum(axis=1)


class TemporalAggregator:
    """Stacked single-head graph attention layers sharing the encoder similarity"""

    def __init__(self, dim, n_layers, rng, slope=0.2, attention="js"):
        if n_layers < 1:
            raise ValueError("need at least one attention layer")
        bound = 1.0 / math.sqrt(dim)
        self.weights = [
            Parameter(rng.uniform(-bound, bound, (dim, dim)), "gat.%d.weight" % layer)
            for layer in range(n_layers)
        ]
        self.slope = slope
        self.attention = attention

    def parameters(self):
        return list(self.weights)

    def scores(self, transformed, similarity):
        if self.attention == "dot":
            return transformed @ transformed.T
        return similarity(transformed)

    def __call__(self, graph, features, similarity, bypass=False):
        """Return (aggregated prototype rows, aggregated context rows)"""
        n = graph.n_prototypes
        if bypass:
            return features[:n], features[n:]
        adjacency = graph.adjacency()
        hidden = features
        for weight in self.weights:
            transformed = hidden @ weight
            scores = leaky_relu(self.scores(transformed, similarity), self.slope)
            hidden = relu(gated_softmax(scores, adjacency) @ transformed)
        return hidden[:n], hidden[n:]


def aggregate(graph, features, aggregator, similarity, bypass=False):
    return aggregator(graph, features, similarity, bypass=bypass)
