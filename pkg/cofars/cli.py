#!/usr/bin/env python3

__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

import argparse
from dataclasses import fields
import glob
import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pandas as pd

from caliper.utils.file import read_json, write_json

from cofars import empdist, evalbench, matcher, retrieval
from cofars.config import ABLATIONS, ConfigError, TrainConfig, load_config, resolve_config
from cofars.logger import get_logger, setup_logging
from cofars.synthlog import (
    PlantedTruth,
    ServeRequest,
    context_label,
    generate,
    ingest,
    read_requests,
    schema_from_config,
    split,
    write_records,
    write_requests,
)

logger = get_logger(__name__)

GENERATOR_FLAGS = (("--users", int), ("--noise", float), ("--groups", int), ("--sequence-length", int))

# flag destination -> config key, every training setting included
OVERRIDES = {
    "seed": "seed",
    "workers": "workers",
    "data": "data",
    "out": "output",
    "users": "users",
    "noise": "noise",
    "groups": "groups",
    "sequence_length": "sequence_length",
    "ablate": "ablate",
}
OVERRIDES.update({item.name: item.name for item in fields(TrainConfig)})


def boolean(value):
    if value.lower() in ("true", "yes", "1"):
        return True
    if value.lower() in ("false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError("expected true or false, got %s" % value)


def get_parser():
    parser = argparse.ArgumentParser(
        prog="cofars",
        description="Context based fast recommendation: train, evaluate and benchmark",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", dest="config", help="flat key value yaml config")
    common.add_argument("--seed", type=int, help="seed for every random stream")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="JSONL interaction log (generated when absent)")
    common.add_argument("--truth", help="planted truth json written by generate")
    common.add_argument("--model", help="model directory written by train")
    common.add_argument("--user", type=int, help="user id for per-user outputs")
    common.add_argument("--workers", type=int, help="evaluation processes, 0 for all cores")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("--quiet", action="store_true", help="no progress bars or info logs")
    for flag, kind in GENERATOR_FLAGS:
        common.add_argument(flag, type=kind, help="override the %s config key" % flag[2:])
    defaults = TrainConfig()
    for item in fields(TrainConfig):
        kind = type(getattr(defaults, item.name))
        common.add_argument(
            "--%s" % item.name.replace("_", "-"),
            dest=item.name,
            type=boolean if kind is bool else kind,
            help="override the %s config key" % item.name,
        )

    subparsers = parser.add_subparsers(dest="command", title="commands")
    subparsers.add_parser("generate", parents=[common], help="write a synthetic log and its truth")
    subparsers.add_parser("stats", parents=[common], help="per-user log statistics")
    train = subparsers.add_parser("train", parents=[common], help="train and save a model")
    train.add_argument(
        "--check", action="store_true", help="fail when alignment or cluster recovery fail"
    )
    train.add_argument("--ablate", choices=ABLATIONS, help="train one ablation variant")
    for name, text in (
        ("evaluate", "compare against the baseline strategies"),
        ("ablate", "compare ablation variants"),
        ("sweep", "sweep one training parameter"),
    ):
        command = subparsers.add_parser(name, parents=[common], help=text)
        command.add_argument("--seeds", type=int, default=3, help="number of seeds per cell")
    subparsers.choices["ablate"].add_argument(
        "--ablate",
        dest="ablations",
        action="append",
        choices=ABLATIONS,
        help="variant to run, repeat for several (default all)",
    )
    sweep = subparsers.choices["sweep"]
    sweep.add_argument("--param", default="prototypes", choices=sorted(evalbench.SWEEP_GRIDS))
    sweep.add_argument("--values", help="comma separated values (default the full grid)")
    subparsers.add_parser("heatmap", parents=[common], help="context similarity matrix")
    bench = subparsers.add_parser("bench", parents=[common], help="retrieval cost benchmark")
    bench.add_argument("--repeats", type=int, default=5, help="timing repeats (>= 5)")
    serve = subparsers.add_parser("serve-sim", parents=[common], help="simulate serving requests")
    serve.add_argument("--requests", help="JSONL requests: user, context and candidates per line")
    serve.add_argument(
        "--n-requests",
        type=int,
        default=100,
        help="requests sampled from held out records when no file is given",
    )
    serve.add_argument("--candidates", type=int, default=20, help="candidates per sampled request")
    serve.add_argument(
        "--cold-start", action="store_true", help="serve every request through the unseen context path"
    )
    subparsers.add_parser("dump-encoder", parents=[common], help="decoded context distributions")
    subparsers.add_parser("dump-graph", parents=[common], help="a user's temporal graph edges")
    subparsers.add_parser("selftest", parents=[common], help="gradient and divergence checks")
    return parser


def source_fingerprint():
    """git HEAD of the checkout, else a hash over the package sources"""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        head = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=here, capture_output=True, text=True, check=True
        )
        return "git:%s" % head.stdout.strip()
    except (OSError, subprocess.CalledProcessError):
        digest = hashlib.sha256()
        for path in sorted(glob.glob(os.path.join(here, "*.py"))):
            with open(path, "rb") as fd:
                digest.update(fd.read())
        return "sha256:%s" % digest.hexdigest()


def write_run_config(config, command, directory):
    path = os.path.join(directory, "run-config.json")
    write_json(
        {
            "command": command,
            "config": config.to_dict(),
            "fingerprint": config.fingerprint(),
            "source": source_fingerprint(),
        },
        path,
    )
    print("Saving %s" % path)


def resolve(args):
    overrides = {key: getattr(args, flag, None) for flag, key in OVERRIDES.items()}
    if getattr(args, "ablations", None):
        overrides["ablations"] = tuple(args.ablations)
    return resolve_config(load_config(args.config), overrides)


def load_records(config, args):
    """(records, schema, truth) from --data, or freshly generated"""
    schema = schema_from_config(config.generator)
    truth = None
    if config.data:
        records = ingest(config.data, schema)
        if args.truth:
            truth = PlantedTruth.from_dict(read_json(args.truth), schema)
    else:
        records, truth = generate(config.generator, config.seed)
    return records, schema, truth


def prepare(config, args):
    records, schema, truth = load_records(config, args)
    cache = empdist.DivergenceCache(os.path.join(config.output, "cache"))
    return evalbench.prepare(records, schema, config.holdout, config.train, truth, cache)


def load_model(config, args, progress):
    """(model, dataset, head) from --model, or trained here"""
    if args.model:
        model = matcher.CofarsModel.load(args.model)
        records, _, truth = load_records(config, args)
        train, test = split(records, config.holdout)
        logs = matcher.build_user_logs(train, model.schema, model.vocabulary, model.config)
        dataset = evalbench.Dataset(model.schema, train, test, model.vocabulary, logs, truth)
        head_path = os.path.join(args.model, "head.bin")
        head = retrieval.load_head(model, head_path) if os.path.exists(head_path) else None
        return model, dataset, head
    dataset = prepare(config, args)
    model, _ = matcher.train(
        dataset.logs, dataset.schema, dataset.vocabulary, config.train, config.seed, progress
    )
    return model, dataset, None


def pick_user(args, logs):
    if args.user is None:
        return logs[sorted(logs)[0]]
    if args.user not in logs:
        raise retrieval.UnknownUserError("user %s has no training history" % args.user)
    return logs[args.user]


def finish(title, frame, checks, config):
    print(evalbench.render_summary(title, frame, checks, config.fingerprint()))
    return 0 if all(check.passed for check in checks) else 1


def save(frame, directory, name, index=False):
    path = os.path.join(directory, name)
    frame.to_csv(path, index=index)
    print("Saving %s" % path)
    return path


# Commands


def run_generate(config, args, progress):
    records, truth = generate(config.generator, config.seed)
    schema = schema_from_config(config.generator)
    path = os.path.join(config.output, "records.jsonl")
    write_records(records, path, schema)
    print("Saving %s" % path)
    truth_path = os.path.join(config.output, "truth.json")
    write_json(truth.to_dict(), truth_path)
    print("Saving %s" % truth_path)
    return 0


def run_stats(config, args, progress):
    dataset = prepare(config, args)
    rows = []
    for user, log in dataset.logs.items():
        upper = np.triu_indices(len(log.contexts), k=1)
        rows.append(
            {
                "user": user,
                "samples": len(log.samples),
                "clicks": len(log.clicks),
                "contexts": len(log.contexts),
                "mean_divergence": float(log.divergence.values[upper].mean()) if upper[0].size else 0.0,
            }
        )
    frame = pd.DataFrame(rows)
    save(frame, config.output, "stats.csv")
    print(evalbench.render_summary("log statistics", frame.describe().reset_index()))
    return 0


def run_train(config, args, progress):
    dataset = prepare(config, args)
    model, history = matcher.train(
        dataset.logs, dataset.schema, dataset.vocabulary, config.train, config.seed, progress
    )
    directory = os.path.join(config.output, "model")
    model.save(directory)
    print("Saving %s" % directory)
    matcher.write_losses(history, os.path.join(config.output, "losses.csv"))

    caches = retrieval.build_cache(model, dataset.logs)
    head = retrieval.train_head(model, caches, "cofars", config.seed, progress=progress)
    retrieval.save_head(head, os.path.join(directory, "head.bin"))
    print("Saving %s" % os.path.join(directory, "head.bin"))

    checks = [evalbench.check_alignment(model, dataset.logs)]
    if dataset.truth is not None:
        checks.append(evalbench.check_cluster_recovery(caches, dataset.truth))
        purity = evalbench.subsequence_purity(model, caches, dataset.truth)
        checks.append(evalbench.CheckResult("sub-sequence purity", True, "%.4f" % purity))
    code = finish("training", pd.DataFrame(history).tail(5), checks, config)
    return code if args.check else 0


def _seeds(config, args):
    return [config.seed + offset for offset in range(args.seeds)]


def run_evaluate(config, args, progress):
    dataset = prepare(config, args)
    report = evalbench.baselines(dataset, config.train, _seeds(config, args), workers=config.workers)
    report.write(os.path.join(config.output, "evaluate.csv"))
    return finish("baselines", report.summary(), evalbench.check_baselines(report), config)


def run_ablate(config, args, progress):
    variants = config.ablations or ABLATIONS
    dataset = prepare(config, args)
    report = evalbench.ablate(
        dataset, config.train, variants, _seeds(config, args), workers=config.workers
    )
    report.write(os.path.join(config.output, "ablate.csv"))
    return finish("ablation", report.summary(), evalbench.check_ablation(report), config)


def run_sweep(config, args, progress):
    kind = float if args.param == "tau" else int
    values = evalbench.SWEEP_GRIDS[args.param]
    if args.values:
        values = tuple(kind(v) for v in args.values.split(","))
    dataset = prepare(config, args)
    report = evalbench.sweep(
        dataset, config.train, args.param, values, _seeds(config, args), workers=config.workers
    )
    report.write(os.path.join(config.output, "sweep-%s.csv" % args.param))
    checks = evalbench.check_sweep(report, values, args.param)
    return finish("sweep %s" % args.param, report.summary(), checks, config)


def run_heatmap(config, args, progress):
    model, dataset, _ = load_model(config, args, progress)
    log = pick_user(args, dataset.logs)
    frame = evalbench.heatmap(model, log)
    save(frame, config.output, "heatmap-%s.csv" % log.user, index=True)
    print("min-max normalized 1 - JS similarity, user %s" % log.user)
    checks = []
    if dataset.truth is not None:
        within, across = evalbench.group_contrast(frame, log.contexts, dataset.truth)
        checks.append(
            evalbench.CheckResult(
                "within group above cross group",
                within > across,
                "within %.3f, across %.3f" % (within, across),
            )
        )
    return finish("heatmap", frame.reset_index(), checks, config)


def run_bench(config, args, progress):
    model, dataset, _ = load_model(config, args, progress)
    caches = retrieval.build_cache(model, dataset.logs)
    report = evalbench.bench(model, caches, repeats=args.repeats, seed=config.seed)
    report.write(os.path.join(config.output, "bench.csv"))
    print(report.to_frame(timings=True).to_string(index=False))
    return finish("benchmark", report.to_frame(), evalbench.check_bench(report), config)


def sample_requests(dataset, caches, n_pois, count, size, seed):
    """Requests built from held out records of users with cached state"""
    pool = [r for r in dataset.test if r.user_id in caches]
    if not pool:
        raise ValueError("no test records belong to users with training history")
    rng = np.random.default_rng([seed, 4])
    requests = []
    for _ in range(count):
        record = pool[rng.integers(len(pool))]
        candidates = [record.poi_id] + rng.integers(0, n_pois, size - 1).tolist()
        requests.append(ServeRequest(record.user_id, record.context, tuple(candidates)))
    return requests


def run_serve(config, args, progress):
    model, dataset, head = load_model(config, args, progress)
    caches = retrieval.build_cache(model, dataset.logs)
    if head is None:
        head = retrieval.train_head(model, caches, "cofars", config.seed, progress=progress)
    if args.requests:
        requests = read_requests(args.requests)
    else:
        requests = sample_requests(
            dataset, caches, model.vocabulary.n_pois, args.n_requests, args.candidates, config.seed
        )
        path = os.path.join(config.output, "requests.jsonl")
        write_requests(requests, path)
        print("Saving %s" % path)

    path = os.path.join(config.output, "serve.jsonl")
    rows, identical, valid = [], True, True
    with open(path, "w") as fd:
        for number, request in enumerate(requests):
            candidates = list(request.candidates)
            counter = retrieval.OpCounter()
            ranking = retrieval.serve(
                request.user_id,
                request.context,
                candidates,
                model,
                caches,
                head,
                cold_start=args.cold_start,
                counter=counter,
            )
            valid &= sorted(poi for poi, _ in ranking) == sorted(candidates)
            if not args.cold_start and request.context in caches[request.user_id].contexts:
                fresh = retrieval.build_cache(model, {request.user_id: dataset.logs[request.user_id]})
                identical &= ranking == retrieval.serve(
                    request.user_id, request.context, candidates, model, fresh, head
                )
            result = {
                "request": number,
                "user": request.user_id,
                "context": dict(request.context),
                "ranking": [[poi, value] for poi, value in ranking],
                "subsequence": counter.selected,
            }
            fd.write(json.dumps(result) + "\n")
            rows.append(
                {
                    "request": number,
                    "candidates": len(candidates),
                    "subsequence": counter.selected,
                    "gsu_ops": counter.gsu,
                }
            )
    print("Saving %s" % path)
    checks = [evalbench.CheckResult("ranking covers the candidates", valid, "%d requests" % len(rows))]
    if not args.cold_start:
        checks.append(
            evalbench.CheckResult("cached equals recomputed", identical, "%d requests" % len(rows))
        )
    frame = pd.DataFrame(rows, columns=["request", "candidates", "subsequence", "gsu_ops"])
    return finish("serving", frame.describe().reset_index(), checks, config)


def run_dump_encoder(config, args, progress):
    model, dataset, _ = load_model(config, args, progress)
    log = pick_user(args, dataset.logs)
    reps = model.encoder.personalize(log.index, log.context_ids, "context")
    decoded = model.encoder.decode(reps).data
    columns = ["%s=%d" % (name, value) for name, card in model.schema.fields for value in range(card)]
    labels = [context_label(c) for c in log.contexts]
    frame = pd.DataFrame(decoded, index=labels, columns=columns)
    save(frame, config.output, "encoder-%s.csv" % log.user, index=True)

    estimated = evalbench.estimated_divergences(model, log)
    rows = []
    for i, j in zip(*np.triu_indices(len(log.contexts), k=1)):
        rows.append(
            {
                "a": labels[i],
                "b": labels[j],
                "estimated": estimated[i, j],
                "empirical": log.divergence.values[i, j],
            }
        )
    frame = pd.DataFrame(rows, columns=["a", "b", "estimated", "empirical"])
    save(frame, config.output, "divergence-%s.csv" % log.user)
    return 0


def run_dump_graph(config, args, progress):
    model, dataset, _ = load_model(config, args, progress)
    log = pick_user(args, dataset.logs)
    graph = model.user_state(log).graph
    names = ["prototype-%d" % i for i in range(graph.n_prototypes)]
    names += [context_label(c) for c in graph.contexts]
    frame = pd.DataFrame(graph.edges(), columns=["src", "dst", "kind", "gate"])
    frame["src_name"] = [names[i] for i in frame.src]
    frame["dst_name"] = [names[i] for i in frame.dst]
    save(frame, config.output, "graph-%s.csv" % log.user)
    return 0


def run_selftest(config, args, progress):
    results = evalbench.run_selftest(config.seed)
    frame = pd.DataFrame([{"check": r.name, "passed": r.passed} for r in results])
    failed = [r for r in results if not r.passed]
    title = "selftest: %d of %d passed" % (len(results) - len(failed), len(results))
    return finish(title, frame, failed, config)


RUNNERS = {
    "generate": run_generate,
    "stats": run_stats,
    "train": run_train,
    "evaluate": run_evaluate,
    "ablate": run_ablate,
    "sweep": run_sweep,
    "heatmap": run_heatmap,
    "bench": run_bench,
    "serve-sim": run_serve,
    "dump-encoder": run_dump_encoder,
    "dump-graph": run_dump_graph,
    "selftest": run_selftest,
}


def main(argv=None):
    """main entrypoint for cofars, returns the exit code"""
    parser = get_parser()

    # If an error occurs while parsing the arguments, the interpreter will exit with value 2
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage()
        return 2

    setup_logging("DEBUG" if args.verbose else "WARNING" if args.quiet else "INFO")
    progress = not args.quiet and sys.stderr.isatty()
    try:
        config = resolve(args)
        os.makedirs(config.output, exist_ok=True)
        write_run_config(config, args.command, config.output)
        return RUNNERS[args.command](config, args, progress)
    except (ConfigError, ValueError, LookupError, ArithmeticError, OSError) as exc:
        logger.error("%s failed: %s" % (args.command, exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
