"""Metrics, comparison runs, acceptance checks and the retrieval benchmark.

Every comparison shares one split, one metric and the same seeds. Reports
are pandas frames; the CSVs they write leave out wall clock columns so a
rerun with the same configuration writes identical files.
"""

__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
import os
import time

from jinja2 import Template
import numpy as np
import pandas as pd
from scipy.stats import rankdata, spearmanr
from sklearn.metrics import adjusted_rand_score

from cofars import empdist, matcher, retrieval, tempograph
from cofars.config import ABLATIONS, GeneratorConfig, TrainConfig, fingerprint
from cofars.diffcore import (
    GRUCell,
    MLP,
    Parameter,
    Tensor,
    check_gradients,
    clamp,
    concat,
    dot,
    exp,
    gumbel_soft,
    leaky_relu,
    log,
    relu,
    sigmoid,
    smooth_clamp,
    softmax,
    softplus,
    take_rows,
    tanh,
)
from cofars.encoder import ProbabilityEncoder
from cofars.logger import get_logger
from cofars.synthlog import (
    AttributeSchema,
    context_label,
    dataset_fingerprint,
    generate,
    make_context,
    schema_from_config,
    split,
)

logger = get_logger(__name__)

BASELINES = ("cofars", "hard-context", "avg-pooling", "recent-k", "topk-context")

SWEEP_GRIDS = {
    "prototypes": (1, 10, 20, 30, 40, 60, 80),
    "tau": (1e-3, 1e-2, 0.1, 1.0, 2.0),
    "dim": (8, 16, 32),
}

BENCH_GRID = ((1000, 1), (1000, 10), (1000, 100), (4000, 1), (4000, 10), (4000, 100))

GRADIENT_TOLERANCE = 1e-4

SUMMARY_TEMPLATE = Template(
    """{{ title }}
{{ "=" * title|length }}
{% if fingerprint %}fingerprint: {{ fingerprint }}
{% endif %}
{{ table }}
{% if checks %}
{% for check in checks %}[{{ "PASS" if check.passed else "FAIL" }}] {{ check.name }}: {{ check.detail }}
{% endfor %}{% endif %}"""
)


def auc(scores, labels):
    """Rank based area under the ROC curve, ties get midranks"""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("auc needs one label per score, got %d and %d" % (len(scores), len(labels)))
    positives = int(labels.sum())
    negatives = len(labels) - positives
    if positives == 0 or negatives == 0:
        raise ValueError("auc needs at least one positive and one negative label")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - positives * (positives + 1) / 2) / (positives * negatives))


def log_loss(scores, labels, eps=1e-7):
    p = np.clip(np.asarray(scores, dtype=float), eps, 1 - eps)
    y = np.asarray(labels, dtype=float)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def render_summary(title, frame, checks=(), fingerprint=None):
    table = frame.to_string(index=False) if frame is not None and len(frame) else "(no rows)"
    return SUMMARY_TEMPLATE.render(title=title, table=table, checks=checks, fingerprint=fingerprint)


# Reports


class EvalReport:
    """One row per (model, variant, seed); runtime stays out of written files"""

    columns = ["model", "variant", "seed", "auc", "log_loss", "samples", "fingerprint"]

    def __init__(self, rows=None):
        self.rows = list(rows or [])

    def __len__(self):
        return len(self.rows)

    def extend(self, rows):
        self.rows.extend(rows)

    def to_frame(self, runtime=False):
        columns = self.columns + (["runtime"] if runtime else [])
        frame = pd.DataFrame(self.rows, columns=self.columns + ["runtime"])
        return frame[columns]

    def summary(self):
        """Median, min and max AUC per model and variant over seeds"""
        frame = self.to_frame()
        if frame.empty:
            return pd.DataFrame(columns=["model", "variant", "median", "min", "max", "seeds"])
        grouped = frame.groupby(["model", "variant"], sort=False)["auc"]
        summary = grouped.agg(["median", "min", "max"]).reset_index()
        summary["seeds"] = grouped.size().values
        return summary

    def median(self, model="cofars", variant="full"):
        frame = self.to_frame()
        values = frame[(frame.model == model) & (frame.variant == variant)]["auc"]
        if values.empty:
            raise KeyError("no rows for model %s variant %s" % (model, variant))
        return float(values.median())

    def write(self, path):
        self.to_frame().to_csv(path, index=False)
        print("Saving %s" % path)


class BenchReport:
    """Operation counts and timings per (n, B); timings are printed, not written"""

    columns = ["n", "B", "cofars_ops", "scan_ops", "ratio"]

    def __init__(self, rows=None):
        self.rows = list(rows or [])

    def to_frame(self, timings=False):
        columns = self.columns + (["cofars_seconds", "scan_seconds"] if timings else [])
        frame = pd.DataFrame(self.rows, columns=self.columns + ["cofars_seconds", "scan_seconds"])
        return frame[columns]

    def write(self, path):
        self.to_frame().to_csv(path, index=False)
        print("Saving %s" % path)


# Comparison runs


@dataclass(eq=False)
class Dataset:
    """A fixed temporal split with everything the first stage trains on"""

    schema: AttributeSchema
    train: list
    test: list
    vocabulary: matcher.Vocabulary
    logs: dict
    truth: object = None

    @property
    def fingerprint(self):
        return dataset_fingerprint(self.train, self.schema)[:16]


def prepare(records, schema, holdout, config=None, truth=None, cache=None):
    """Split records and build the per-user training views once per dataset"""
    config = config or TrainConfig()
    train, test = split(records, holdout)
    vocabulary = matcher.build_vocabulary(train, records)
    dataset_hash = dataset_fingerprint(train, schema) if cache is not None else None
    logs = matcher.build_user_logs(train, schema, vocabulary, config, cache, dataset_hash)
    logger.info(
        "prepared %d users, %d train and %d test records" % (len(logs), len(train), len(test))
    )
    return Dataset(schema, train, test, vocabulary, logs, truth)


def run_cell(dataset, config, seed, strategies=("cofars",), variant="full"):
    """Train one first stage and one head per strategy, then score the test split"""
    start = time.perf_counter()
    model, _ = matcher.train(dataset.logs, dataset.schema, dataset.vocabulary, config, seed)
    caches = retrieval.build_cache(model, dataset.logs)
    key = fingerprint(asdict(config), seed)
    rows = []
    for strategy in strategies:
        head = retrieval.train_head(model, caches, strategy, seed)
        scores, labels = retrieval.evaluate_head(model, caches, head, dataset.test, strategy)
        rows.append(
            {
                "model": strategy,
                "variant": variant,
                "seed": seed,
                "auc": auc(scores, labels),
                "log_loss": log_loss(scores, labels),
                "samples": len(labels),
                "fingerprint": key,
                "runtime": time.perf_counter() - start,
            }
        )
    logger.info("cell %s seed %d done in %.1fs" % (variant, seed, time.perf_counter() - start))
    return rows


def resolve_workers(workers):
    """Worker processes to use, 0 meaning every available core"""
    if not workers:
        return os.cpu_count() or 1
    return workers


def run_cells(dataset, cells, workers=1):
    """Run (config, seed, strategies, variant) cells, rows kept in cell order"""
    workers = resolve_workers(workers)
    report = EvalReport()
    if workers == 1 or len(cells) == 1:
        for config, seed, strategies, variant in cells:
            report.extend(run_cell(dataset, config, seed, strategies, variant))
        return report
    with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as executor:
        futures = [
            executor.submit(run_cell, dataset, config, seed, strategies, variant)
            for config, seed, strategies, variant in cells
        ]
        for future in futures:
            report.extend(future.result())
    return report


def baselines(dataset, config, seeds=(0, 1, 2), strategies=BASELINES, workers=1):
    """CoFARS against the baseline sub-sequence strategies on one split"""
    cells = [(config, seed, tuple(strategies), "full") for seed in seeds]
    return run_cells(dataset, cells, workers)


def ablate(dataset, config, variants=ABLATIONS, seeds=(0, 1, 2), workers=1):
    """The full model and one trained model per ablation variant"""
    cells = []
    for variant in ("full",) + tuple(variants):
        cells.extend((config.ablate(variant), seed, ("cofars",), variant) for seed in seeds)
    return run_cells(dataset, cells, workers)


def sweep_label(param, value):
    return "%s=%s" % (param, value)


def sweep(dataset, config, param, values=None, seeds=(0, 1, 2), workers=1):
    """AUC of CoFARS while one training parameter varies"""
    if param not in SWEEP_GRIDS:
        raise ValueError("cannot sweep %s, choose from %s" % (param, ", ".join(SWEEP_GRIDS)))
    values = SWEEP_GRIDS[param] if values is None else values
    cells = []
    for value in values:
        changes = {param: value}
        if param == "tau":
            changes["tau_min"] = min(config.tau_min, value)
        swept = replace(config, **changes)
        cells.extend((swept, seed, ("cofars",), sweep_label(param, value)) for seed in seeds)
    return run_cells(dataset, cells, workers)


def sweep_prototypes(dataset, config, values=None, seeds=(0, 1, 2), workers=1):
    return sweep(dataset, config, "prototypes", values, seeds, workers)


# Acceptance checks


def check_baselines(report, margin=0.01):
    results = []
    cofars = report.median("cofars")
    for baseline in ("hard-context", "avg-pooling"):
        gap = cofars - report.median(baseline)
        results.append(
            CheckResult(
                "cofars beats %s" % baseline,
                gap >= margin,
                "median AUC gap %.4f, need >= %.2f" % (gap, margin),
            )
        )
    return results


def check_ablation(report, slack=0.005):
    results = []
    full = report.median("cofars", "full")
    variants = [v for v in ABLATIONS if v in set(report.to_frame().variant)]
    for variant in variants:
        other = report.median("cofars", variant)
        passed = full >= other - slack
        if variant == "no-mse":
            passed = passed and full > other
        results.append(
            CheckResult(
                "full vs %s" % variant,
                passed,
                "full %.4f, %s %.4f" % (full, variant, other),
            )
        )
    return results


def check_sweep(report, values, param="prototypes", plateau=0.01):
    medians = {v: report.median("cofars", sweep_label(param, v)) for v in values}
    results = []
    if param == "prototypes" and 1 in medians and len(medians) > 1:
        rest = max(m for v, m in medians.items() if v != 1)
        worst = all(medians[1] < m for v, m in medians.items() if v != 1)
        results.append(
            CheckResult(
                "single prototype is worst",
                worst,
                "AUC(1) %.4f, best other %.4f" % (medians[1], rest),
            )
        )
    if param == "prototypes" and 40 in medians and 80 in medians:
        gap = abs(medians[40] - medians[80])
        results.append(
            CheckResult("plateau 40 to 80", gap < plateau, "|AUC(40) - AUC(80)| = %.4f" % gap)
        )
    return results


def estimated_divergences(model, log):
    """Learned pairwise divergence between a user's context rows"""
    reps = model.encoder.personalize(log.index, log.context_ids, "context")
    return model.encoder.pairwise_js(reps).data


def check_alignment(model, logs, threshold=0.9):
    """Spearman correlation of learned against empirical pairwise divergences"""
    estimated, truth = [], []
    for user in sorted(logs):
        log_ = logs[user]
        if len(log_.contexts) < 2:
            continue
        upper = np.triu_indices(len(log_.contexts), k=1)
        estimated.extend(estimated_divergences(model, log_)[upper])
        truth.extend(log_.divergence.values[upper])
    if len(truth) < 2:
        return CheckResult("alignment", False, "fewer than two context pairs")
    rho = float(spearmanr(estimated, truth).correlation)
    return CheckResult("alignment", rho > threshold, "spearman %.4f over %d pairs" % (rho, len(truth)))


def cluster_recovery(caches, truth):
    """Mean adjusted Rand index between argmax prototype and planted group"""
    scores = []
    for user in sorted(caches):
        cache = caches[user]
        if len(cache.contexts) < 2:
            continue
        planted = [truth.group(c) for c in cache.contexts]
        assigned = np.argmax(cache.similarity, axis=0)
        scores.append(adjusted_rand_score(planted, assigned))
    return float(np.mean(scores)) if scores else float("nan")


def check_cluster_recovery(caches, truth, threshold=0.8):
    score = cluster_recovery(caches, truth)
    return CheckResult("cluster recovery", score > threshold, "mean ARI %.4f" % score)


def subsequence_purity(model, caches, truth):
    """Share of selected behaviors whose context is in the target's planted group"""
    shares = []
    for user in sorted(caches):
        cache = caches[user]
        for target in cache.contexts:
            selected = retrieval.behaviors("cofars", model, cache, cache.history, target, cache.index)
            if len(selected):
                group = truth.group(target)
                shares.append(np.mean([truth.group(c) == group for c in selected.contexts]))
    return float(np.mean(shares)) if shares else float("nan")


# Similarity heatmap


def heatmap(model, log):
    """Min-max normalized 1 - JS between a user's contexts, labeled"""
    if len(log.contexts) < 2:
        raise ValueError("user %s has a single context, nothing to compare" % log.user)
    divergence = estimated_divergences(model, log)
    largest = divergence.max()
    similarity = 1.0 - (divergence / largest if largest > 0 else divergence)
    low, high = similarity.min(), similarity.max()
    normalized = (similarity - low) / (high - low) if high > low else np.ones_like(similarity)
    labels = [context_label(c) for c in log.contexts]
    return pd.DataFrame(normalized, index=labels, columns=labels)


def group_contrast(frame, contexts, truth):
    """Mean off-diagonal similarity within and across planted groups"""
    groups = np.array([truth.group(c) for c in contexts])
    same = groups[:, None] == groups[None, :]
    off = ~np.eye(len(contexts), dtype=bool)
    values = frame.values
    within = values[same & off]
    across = values[~same]
    return (
        float(within.mean()) if within.size else float("nan"),
        float(across.mean()) if across.size else float("nan"),
    )


# Retrieval cost benchmark


def pad_history(history, n):
    """Cycle a history to exactly n records with fresh increasing timestamps"""
    if not history:
        raise ValueError("cannot pad an empty history")
    return [
        replace(history[i % len(history)], timestamp=i) for i in range(n)
    ]


def scan_subsequence(behavior_rows, candidate_row, cap, counter):
    """Per-candidate retrieval: score every behavior against the candidate"""
    relevance = behavior_rows @ candidate_row
    counter.scan += len(behavior_rows)
    keep = min(cap, len(relevance))
    return np.sort(np.argpartition(-relevance, keep - 1)[:keep])


def _median_seconds(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def bench(model, caches, grid=BENCH_GRID, repeats=5, seed=0):
    """Candidate agnostic selection against a per-candidate scan over (n, B)"""
    if repeats < 5:
        raise ValueError("bench needs at least 5 repeats, got %d" % repeats)
    user = max(sorted(caches), key=lambda u: len(caches[u].history))
    cache = caches[user]
    target = Counter(r.context for r in cache.history).most_common(1)[0][0]
    table = model.encoder.tables.poi.data
    cap = model.config.cap
    rng = np.random.default_rng(seed)

    rows = []
    for n, batch in grid:
        history = pad_history(cache.history, n)
        index = retrieval.ContextIndex(history)
        behavior_rows = table[[r.poi_id for r in history]]
        candidates = rng.integers(0, table.shape[0], size=batch)

        def online(counter=None):
            return retrieval.behaviors("cofars", model, cache, history, target, index, counter)

        def scan(counter):
            for candidate in candidates:
                scan_subsequence(behavior_rows, table[candidate], cap, counter)

        gsu = retrieval.OpCounter()
        online(gsu)
        scanned = retrieval.OpCounter()
        scan(scanned)
        rows.append(
            {
                "n": n,
                "B": batch,
                "cofars_ops": gsu.gsu,
                "scan_ops": scanned.scan,
                "ratio": scanned.scan / gsu.gsu,
                "cofars_seconds": _median_seconds(online, repeats),
                "scan_seconds": _median_seconds(lambda: scan(retrieval.OpCounter()), repeats),
            }
        )
        logger.debug("bench n=%d B=%d done" % (n, batch))
    return BenchReport(rows)


def check_bench(report, linear_tolerance=0.05, min_ratio=100.0):
    frame = report.to_frame()
    results = []
    for n, group in frame.groupby("n"):
        per_candidate = group.scan_ops / group.B
        spread = per_candidate.max() / per_candidate.min() - 1.0
        results.append(
            CheckResult(
                "scan linear in B at n=%d" % n,
                spread <= linear_tolerance,
                "per candidate ops vary by %.3f" % spread,
            )
        )
        results.append(
            CheckResult(
                "cofars constant in B at n=%d" % n,
                group.cofars_ops.nunique() == 1,
                "ops %s" % sorted(set(group.cofars_ops)),
            )
        )
    largest = frame[(frame.n == 4000) & (frame.B == 100)]
    if not largest.empty:
        ratio = float(largest.ratio.iloc[0])
        results.append(
            CheckResult("scan over cofars at n=4000 B=100", ratio >= min_ratio, "ratio %.1f" % ratio)
        )
    return results


# Self test


def _weighted_sum(out):
    weights = np.random.default_rng(7).standard_normal(out.shape)
    return (out * Tensor(weights)).sum()


def _op_cases():
    """Named (function of x, y) cases for single op gradient checks"""
    return [
        ("add", lambda x, y: x + y),
        ("sub", lambda x, y: x - y),
        ("mul", lambda x, y: x * y),
        ("div", lambda x, y: x / (y * y + 0.5)),
        ("matmul", lambda x, y: x @ y.T),
        ("transpose", lambda x, y: x.T),
        ("reshape", lambda x, y: x.reshape(4, 3)),
        ("sum", lambda x, y: x.sum(axis=0) + x.sum(axis=1).sum()),
        ("mean", lambda x, y: x.mean(axis=1)),
        ("index", lambda x, y: x[[0, 2]]),
        ("take_rows", lambda x, y: take_rows(x, [0, 2, 2])),
        ("concat", lambda x, y: concat([x, y], axis=1)),
        ("sigmoid", lambda x, y: sigmoid(x)),
        ("tanh", lambda x, y: tanh(x)),
        ("relu", lambda x, y: relu(x)),
        ("leaky_relu", lambda x, y: leaky_relu(x, 0.2)),
        ("softmax", lambda x, y: softmax(x)),
        ("log", lambda x, y: log(x * x + 0.5)),
        ("exp", lambda x, y: exp(x)),
        ("softplus", lambda x, y: softplus(x)),
        ("clamp", lambda x, y: clamp(x, -0.55, 0.55)),
        ("smooth_clamp", lambda x, y: smooth_clamp(x * 0.3 + 0.5)),
        ("dot", lambda x, y: dot(x, y)),
    ]


def _gradient_result(name, loss_fn, params):
    error = check_gradients(loss_fn, params)
    return CheckResult("gradient %s" % name, error < GRADIENT_TOLERANCE, "relative error %.2e" % error)


def _miniature_encoder(rng):
    schema = AttributeSchema((("category", 3), ("price", 2)))
    contexts = tuple(make_context(meal=m) for m in ("breakfast", "dinner", "lunch"))
    vocabulary = matcher.Vocabulary((0,), contexts, schema.n_pois)
    encoder = ProbabilityEncoder(schema, 1, len(contexts), 2, schema.n_pois, 4, rng)
    return schema, contexts, vocabulary, encoder


def _miniature_model(seed):
    generator = GeneratorConfig(
        users=1,
        contexts_per_user=3,
        groups=2,
        sequence_length=40,
        negatives_per_click=1,
        category=3,
        price=2,
        quality=2,
        delivery=2,
        context_features={"meal": ["breakfast", "lunch", "dinner"]},
    )
    records, _ = generate(generator, seed)
    schema = schema_from_config(generator)
    config = TrainConfig(dim=8, prototypes=2, layers=1, batch_size=6, window=4, min_support=1)
    train, _ = split(records, 0.2)
    vocabulary = matcher.build_vocabulary(train, records)
    logs = matcher.build_user_logs(train, schema, vocabulary, config)
    model = matcher.CofarsModel(schema, vocabulary, config, seed)
    return model, logs[0]


def gradient_suite(seed=0):
    """Finite difference checks of every op, layer and loss at miniature shapes"""
    rng = np.random.default_rng(seed)
    results = []

    magnitude = rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    x = Parameter(magnitude, "x")
    y = Parameter(rng.uniform(-1.0, 1.0, (3, 4)), "y")
    for name, fn in _op_cases():
        results.append(_gradient_result(name, lambda fn=fn: _weighted_sum(fn(x, y)), [x, y]))

    inputs = Tensor(rng.uniform(-1, 1, (3, 4)))
    mlp = MLP("check.mlp", [4, 6, 2], rng, "relu", "sigmoid")
    results.append(_gradient_result("mlp", lambda: _weighted_sum(mlp(inputs)), mlp.parameters()))

    cell = GRUCell("check.gru", 4, 4, rng)
    steps = Tensor(rng.uniform(0, 1, (5, 4)))
    results.append(
        _gradient_result(
            "gru", lambda: _weighted_sum(matcher.short_term(steps, 5, cell)), cell.parameters()
        )
    )

    logits = Parameter(rng.uniform(-2, 2, (2, 3)), "gate")
    results.append(
        _gradient_result(
            "gumbel soft",
            lambda: _weighted_sum(gumbel_soft(sigmoid(logits), 0.5, np.random.default_rng(seed))),
            [logits],
        )
    )

    schema, contexts, vocabulary, encoder = _miniature_encoder(rng)
    divergence = empdist.DivergenceMatrix(contexts, np.array([[0, 0.2, 0.5], [0.2, 0, 0.1], [0.5, 0.1, 0]]))
    ids = np.arange(len(contexts))
    results.append(
        _gradient_result(
            "alignment loss", lambda: encoder.mse_loss(0, ids, divergence), encoder.parameters()
        )
    )
    results.append(
        _gradient_result(
            "independence loss", lambda: encoder.independence_loss(0), encoder.parameters()
        )
    )

    candidates = Tensor(rng.uniform(0, 1, (4, 4)))
    labels = [1, 0, 0, 1]

    def recommendation():
        prototypes = encoder.prototypes(0)
        gates = gumbel_soft(smooth_clamp(sigmoid(prototypes @ candidates.T)), 1.0)
        return matcher.rec_loss(prototypes, gates, candidates, labels)

    results.append(_gradient_result("recommendation loss", recommendation, encoder.parameters()))

    aggregator = tempograph.TemporalAggregator(4, 2, rng)
    sequence = [contexts[0], contexts[1], contexts[2], contexts[0]]

    def graph_attention():
        graph = tempograph.build(
            sequence, 0, encoder, vocabulary, 1.0, True, np.random.default_rng(seed), hard=False
        )
        prototypes, rows = aggregator(graph, graph.features, encoder.similarity)
        return _weighted_sum(concat([prototypes, rows], axis=0))

    results.append(
        _gradient_result(
            "graph attention", graph_attention, aggregator.parameters() + encoder.parameters()
        )
    )

    head = retrieval.TargetAttentionHead(schema.n_pois, 4, rng)
    results.append(
        _gradient_result(
            "target attention",
            lambda: retrieval.bce(head([1, 2], [0, 3, 4]), [1, 0]),
            head.parameters(),
        )
    )

    model, log_ = _miniature_model(seed)
    batch = matcher.draw_batch(log_, model.config, np.random.default_rng(seed))

    def composite():
        loss, _ = matcher.step_loss(model, log_, batch, 1.0, np.random.default_rng([seed, 3]), soft=True)
        return loss

    results.append(_gradient_result("composite loss", composite, model.parameters()))
    return results


def divergence_suite(pairs=10000, seed=0):
    """Non-negativity, identity and exact symmetry over random smoothed pairs"""
    rng = np.random.default_rng(seed)
    schema = AttributeSchema((("category", 5), ("price", 3)))

    def draw():
        probs = tuple(
            (rng.dirichlet(np.ones(card)) + 1e-6) / (1 + card * 1e-6)
            for _, card in schema.fields
        )
        return empdist.AttributeDistribution(schema, probs)

    negative = asymmetric = nonzero = 0
    for _ in range(pairs):
        p, q = draw(), draw()
        value = empdist.js(p, q)
        negative += value < 0
        asymmetric += value != empdist.js(q, p)
        nonzero += empdist.js(p, p) != 0.0
    results = [
        CheckResult("divergence non-negative", negative == 0, "%d of %d negative" % (negative, pairs)),
        CheckResult("divergence symmetric", asymmetric == 0, "%d asymmetric pairs" % asymmetric),
        CheckResult("divergence identity", nonzero == 0, "%d nonzero self divergences" % nonzero),
    ]

    binary = AttributeSchema((("x", 2),))
    p = empdist.AttributeDistribution(binary, (np.array([0.75, 0.25]),))
    q = empdist.AttributeDistribution(binary, (np.array([0.25, 0.75]),))
    gap = abs(empdist.js(p, q) - 0.5 * np.log(3))
    results.append(CheckResult("divergence hand case", gap < 1e-9, "error %.2e" % gap))
    return results


def gumbel_suite(samples=20000, beta=0.3, seed=0):
    """Noisy hard gates open with probability beta at any temperature"""
    rng = np.random.default_rng(seed)
    results = []
    for tau in (0.1, 1.0):
        soft = gumbel_soft(np.full((samples, 1), beta), tau, rng)
        rate = float((soft.data > 0.5).mean())
        results.append(
            CheckResult(
                "gumbel open rate tau=%s" % tau,
                abs(rate - beta) < 0.02,
                "rate %.4f for beta %.2f" % (rate, beta),
            )
        )
    return results


def run_selftest(seed=0):
    """Divergence laws, gate sampling and gradient checks"""
    results = divergence_suite(seed=seed) + gumbel_suite(seed=seed) + gradient_suite(seed=seed)
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning("selftest failures: %s" % ", ".join(failed))
    return results
