"""First stage: short-term encoding, prototype gating and end-to-end training.

Each optimization step serves one user: their temporal graph is built and
aggregated once, then every sample of the user's batch is gated against its
target context and scored by the gated prototypes.
"""

__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

from dataclasses import asdict, dataclass, field
import os

import numpy as np
import pandas as pd
from tqdm import tqdm

from caliper.utils.file import read_json, write_json

from cofars import empdist, tempograph
from cofars.config import TrainConfig
from cofars.diffcore import (
    Adam,
    GRUCell,
    Tensor,
    gumbel_soft,
    load_checkpoint,
    log,
    save_checkpoint,
    sigmoid,
    smooth_clamp,
    take_rows,
)
from cofars.encoder import ProbabilityEncoder
from cofars.logger import get_logger
from cofars.synthlog import AttributeSchema, by_user

logger = get_logger(__name__)

SCORE_BOUNDS = (1e-7, 1 - 1e-7)


class TrainingDivergedError(ArithmeticError):
    pass


@dataclass
class Vocabulary:
    users: tuple
    contexts: tuple
    n_pois: int
    user_index: dict = field(init=False, repr=False)
    context_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.users = tuple(self.users)
        self.contexts = tuple(self.contexts)
        self.user_index = {u: i for i, u in enumerate(self.users)}
        self.context_index = {c: i for i, c in enumerate(self.contexts)}

    def to_dict(self):
        return {
            "users": list(self.users),
            "contexts": [[list(pair) for pair in c] for c in self.contexts],
            "n_pois": self.n_pois,
        }

    @classmethod
    def from_dict(cls, values):
        contexts = [tuple(tuple(pair) for pair in c) for c in values["contexts"]]
        return cls(values["users"], contexts, values["n_pois"])


@dataclass(eq=False)
class UserLog:
    """A user's training view: clicks, samples, contexts and divergences"""

    user: int
    index: int
    clicks: list
    samples: list
    contexts: tuple
    context_ids: np.ndarray
    divergence: object

    @property
    def sequence(self):
        return [record.context for record in self.clicks]

    def position(self, context):
        return self.contexts.index(context)


def build_vocabulary(train, records=None):
    records = train if records is None else records
    users = sorted({r.user_id for r in train if r.click})
    contexts = sorted({r.context for r in train if r.click})
    n_pois = max(r.poi_id for r in records) + 1
    return Vocabulary(users, contexts, n_pois)


def build_user_logs(train, schema, vocabulary, config, cache=None, dataset_hash=None):
    """Per-user training views with ground-truth divergence matrices.

    When a DivergenceCache and dataset hash are given, matrices are read from
    and written to it.
    """
    pool = empdist.pooled(train, schema, config.smoothing)
    logs = {}
    for user, history in by_user(train).items():
        if user not in vocabulary.user_index:
            continue
        clicks = [r for r in history if r.click]
        contexts = tuple(sorted({r.context for r in clicks}))
        known = set(contexts)

        def compute(clicks=clicks):
            estimates = empdist.estimate(
                clicks, schema, config.smoothing, pool, config.min_support
            )
            return empdist.divergence_matrix(estimates, midpoint=config.midpoint)

        if cache is not None and dataset_hash is not None:
            divergence = cache.load_or_compute(user, dataset_hash, schema, compute)
        else:
            divergence = compute()
        logs[user] = UserLog(
            user=user,
            index=vocabulary.user_index[user],
            clicks=clicks,
            samples=[r for r in history if r.context in known],
            contexts=contexts,
            context_ids=np.array([vocabulary.context_index[c] for c in contexts]),
            divergence=divergence,
        )
    return logs


@dataclass(eq=False)
class GateVector:
    """Hard gates (prototypes x targets) with the soft surrogate for gradients"""

    hard: np.ndarray
    soft: Tensor
    beta: Tensor

    def __len__(self):
        return self.hard.shape[0]


@dataclass(eq=False)
class UserState:
    graph: object
    prototypes: Tensor
    contexts: Tensor


def short_term(embeddings, window, cell):
    """Final GRU hidden state over the most recent window of behaviors"""
    hidden = Tensor(np.zeros((1, cell.hidden_size)))
    if embeddings is None or embeddings.shape[0] == 0:
        logger.warning("empty short-term history, using a zero vector")
        return hidden
    recent = embeddings[-window:] if embeddings.shape[0] > window else embeddings
    for step in range(recent.shape[0]):
        hidden = cell(recent[step], hidden)
    return hidden


def gate_prototypes(
    prototypes,
    targets,
    recent,
    tau,
    similarity,
    training=False,
    rng=None,
    fallback=True,
    squash=True,
    soft_only=False,
):
    """Gate every prototype against every target context row.

    beta = sim(o, c_t) * sigmoid(o . l), smoothly clamped into (0, 1). Columns
    where no gate opens get their largest-beta prototype forced open.
    """
    relevance = prototypes @ recent.T
    weight = sigmoid(relevance) if squash else relevance
    beta = smooth_clamp(similarity(prototypes, targets) * weight)
    noisy = training and rng is not None
    soft = gumbel_soft(beta, tau, rng if noisy else None)
    hard = (soft.data > 0.5) if noisy else (beta.data > 0.5)
    hard = hard.astype(float)
    if fallback:
        closed = np.flatnonzero(hard.sum(axis=0) == 0)
        hard[np.argmax(beta.data[:, closed], axis=0), closed] = 1.0
    if soft_only:
        hard = soft.data.copy()
    return GateVector(hard, soft, beta)


def rec_loss(prototypes, gates, candidates, labels):
    """Summed BCE over prototypes of s = gate * sigmoid(o . v), mean over the batch.

    s is squeezed affinely into SCORE_BOUNDS so a closed gate sits on the floor
    and still passes gradient back to its soft value.
    """
    lo, hi = SCORE_BOUNDS
    labels = Tensor(np.asarray(labels, dtype=float).reshape(1, -1))
    scores = gates * sigmoid(prototypes @ candidates.T) * (hi - lo) + lo
    bce = -(labels * log(scores) + (1.0 - labels) * log(1.0 - scores))
    return bce.sum() * (1.0 / labels.shape[1])


class CofarsModel:
    """Every first-stage parameter plus the vocabulary they index"""

    def __init__(self, schema, vocabulary, config=None, seed=0):
        self.schema = schema
        self.vocabulary = vocabulary
        self.config = config or TrainConfig()
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder = ProbabilityEncoder(
            schema,
            len(vocabulary.users),
            len(vocabulary.contexts),
            self.config.prototypes,
            vocabulary.n_pois,
            self.config.dim,
            rng,
            similarity=self.config.similarity,
            normalize=self.config.normalize,
        )
        self.aggregator = tempograph.TemporalAggregator(
            self.config.dim, self.config.layers, rng, self.config.slope, self.config.attention
        )
        self.gru = GRUCell("gru", self.config.dim, self.config.dim, rng)

    def parameters(self):
        return self.encoder.parameters() + self.aggregator.parameters() + self.gru.parameters()

    def similarity(self, a, b=None):
        return self.encoder.similarity(a, b)

    def poi_rows(self, poi_ids):
        return take_rows(self.encoder.tables.poi, poi_ids)

    def recent(self, clicks):
        window = clicks[-self.config.window :]
        if not window:
            return short_term(None, self.config.window, self.gru)
        return short_term(self.poi_rows([r.poi_id for r in window]), self.config.window, self.gru)

    def user_state(self, log, tau=None, training=False, rng=None, hard=True, extra_context=None):
        """Build and aggregate a user's graph"""
        graph = tempograph.build(
            log.sequence,
            log.index,
            self.encoder,
            self.vocabulary,
            self.config.tau_min if tau is None else tau,
            training=training,
            rng=rng,
            hard=hard,
            extra_context=extra_context,
        )
        prototypes, contexts = self.aggregator(
            graph, graph.features, self.similarity, bypass=not self.config.aggregate
        )
        return UserState(graph, prototypes, contexts)

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        save_checkpoint(os.path.join(directory, "checkpoint.bin"), self.parameters())
        write_json(
            {
                "schema": [list(f) for f in self.schema.fields],
                "vocabulary": self.vocabulary.to_dict(),
                "config": asdict(self.config),
                "seed": self.seed,
            },
            os.path.join(directory, "model.json"),
        )

    @classmethod
    def load(cls, directory):
        meta = read_json(os.path.join(directory, "model.json"))
        model = cls(
            AttributeSchema(tuple(tuple(f) for f in meta["schema"])),
            Vocabulary.from_dict(meta["vocabulary"]),
            TrainConfig(**meta["config"]),
            meta["seed"],
        )
        arrays = load_checkpoint(os.path.join(directory, "checkpoint.bin"))
        for param in model.parameters():
            param.data = arrays[param.name].astype(float)
        return model


def draw_batch(log, config, rng):
    """A contiguous chronological run of a user's samples.

    The run starts after the user's first click whenever possible, so there is
    always some earlier behavior to encode.
    """
    size = min(config.batch_size, len(log.samples))
    if size == 0:
        return []
    earliest = 0
    if log.clicks:
        first = log.clicks[0].timestamp
        earliest = min(sum(1 for r in log.samples if r.timestamp <= first), len(log.samples) - size)
    start = int(rng.integers(earliest, len(log.samples) - size + 1))
    return log.samples[start : start + size]


def history_before(log, batch):
    """Clicks strictly earlier than every sample of the batch"""
    if not batch:
        return list(log.clicks)
    start = min(r.timestamp for r in batch)
    return [r for r in log.clicks if r.timestamp < start]


def step_loss(model, log, batch, tau, rng, soft=False):
    """Total loss of one user's batch, with its components.

    soft=True keeps every gate on its relaxed value (finite difference checks).
    """
    config = model.config
    history = history_before(log, batch)

    state = model.user_state(log, tau, training=True, rng=rng, hard=not soft)
    columns = [log.position(r.context) for r in batch]
    gates = gate_prototypes(
        state.prototypes,
        state.contexts[columns],
        model.recent(history),
        tau,
        model.similarity,
        training=True,
        rng=rng,
        fallback=config.fallback,
        squash=config.gate_squash,
        soft_only=soft,
    )
    candidates = model.poi_rows([r.poi_id for r in batch])
    rec = rec_loss(state.prototypes, gates.soft, candidates, [r.click for r in batch])

    total = rec
    mse = ind = Tensor(0.0)
    if config.gamma > 0:
        mse = model.encoder.mse_loss(log.index, log.context_ids, log.divergence)
        total = total + mse * config.gamma
    if config.lam > 0:
        ind = model.encoder.independence_loss(log.index)
        total = total + ind * config.lam
    return total, {"rec": rec.item(), "mse": mse.item(), "ind": ind.item()}


def train(logs, schema, vocabulary, config=None, seed=0, progress=False):
    """Train the first stage; returns (model, per-epoch loss rows)"""
    config = config or TrainConfig()
    if not logs:
        raise ValueError("cannot train on an empty training split")
    model = CofarsModel(schema, vocabulary, config, seed)
    optimizer = Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng([seed, 1])
    users = sorted(logs)

    history = []
    for epoch in tqdm(range(config.epochs), desc="train", disable=not progress):
        tau = config.tau_at(epoch)
        totals = {"loss": 0.0, "rec": 0.0, "mse": 0.0, "ind": 0.0}
        order = rng.permutation(len(users))
        for position in order:
            log = logs[users[position]]
            batch = draw_batch(log, config, rng)
            if not batch:
                continue
            optimizer.zero_grad()
            loss, parts = step_loss(model, log, batch, tau, rng)
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(
                    "non-finite loss at epoch %d, user %s, batch of %d samples"
                    % (epoch, log.user, len(batch))
                )
            loss.backward()
            optimizer.step()
            totals["loss"] += loss.item()
            for key, value in parts.items():
                totals[key] += value
        row = {"epoch": epoch, "tau": tau}
        row.update({key: value / len(users) for key, value in totals.items()})
        history.append(row)
        logger.info("epoch %d tau %.3f loss %.5f" % (epoch, tau, row["loss"]))
    return model, history


def write_losses(history, path):
    """Per-epoch loss rows as CSV"""
    pd.DataFrame(history, columns=["epoch", "tau", "loss", "rec", "mse", "ind"]).to_csv(
        path, index=False
    )
    print("Saving %s" % path)

