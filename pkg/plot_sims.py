#!/usr/bin/env python3

__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2021, Vanessa Sochat"
__license__ = "MPL 2.0"

import argparse
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas


def get_parser():
    parser = argparse.ArgumentParser(description="Plot cofars heatmap and sweep results")
    parser.add_argument(
        "--filename",
        dest="filename",
        help="heatmap-<user>.csv or sweep-<param>.csv written by cofars",
    )
    parser.add_argument(
        "--dim",
        dest="dim",
        type=int,
        help="dimension for the figure (defaults to 10)",
        default=10,
    )
    parser.add_argument(
        "--outdir", dest="outdir", help="path to output directory.", default="results"
    )
    return parser


def plot_heatmap(df, title, dim=10):
    """matshow of a square context similarity frame, values in [0, 1]"""
    labels = list(df.index)
    fig, ax = plt.subplots(figsize=(dim, dim))
    cax = ax.matshow(df.to_numpy(dtype=float), interpolation="nearest", vmin=0, vmax=1)
    ax.grid(True)
    plt.title(title)
    plt.xticks(range(len(labels)), labels, rotation=90)
    plt.yticks(range(len(labels)), labels)
    fig.colorbar(cax, ticks=[0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1])
    return fig


def plot_sweep(df, title, dim=10):
    """median AUC per swept value with a min to max band"""
    param = df.variant.iloc[0].split("=")[0]
    df = df.assign(value=[float(v.split("=")[1]) for v in df.variant])
    stats = df.groupby("value").auc.agg(["median", "min", "max"]).sort_index()
    fig, ax = plt.subplots(figsize=(dim, dim * 0.6))
    ax.plot(stats.index, stats["median"], marker="o")
    ax.fill_between(stats.index, stats["min"], stats["max"], alpha=0.2)
    if param == "tau":
        ax.set_xscale("log")
    ax.set_xlabel(param)
    ax.set_ylabel("AUC")
    plt.title(title)
    return fig


def save_figure(fig, outdir, name):
    paths = []
    for extension in ["png", "svg"]:
        outfile = os.path.join(outdir, "%s-plot.%s" % (name, extension))
        print("Saving %s" % outfile)
        fig.savefig(outfile, dpi=300)
        paths.append(outfile)
    plt.close(fig)
    return paths


def main(argv=None):
    """main entrypoint for plotting cofars results"""
    parser = get_parser()

    # If an error occurs while parsing the arguments, the interpreter will exit with value 2
    args, extra = parser.parse_known_args(argv)

    filename = os.path.abspath(args.filename) if args.filename else None
    if not filename or not os.path.exists(filename):
        sys.exit("A --filename with a heatmap or sweep csv is required.")

    outdir = os.path.join(args.outdir, "plots")
    os.makedirs(outdir, exist_ok=True)
    name = os.path.splitext(os.path.basename(filename))[0]

    if name.startswith("heatmap"):
        df = pandas.read_csv(filename, index_col=0)
        fig = plot_heatmap(df, "Context Similarity: user %s" % name.split("-", 1)[1], args.dim)
    elif name.startswith("sweep"):
        df = pandas.read_csv(filename)
        fig = plot_sweep(df, "AUC by %s" % name.split("-", 1)[1], args.dim)
    else:
        sys.exit("%s is neither a heatmap nor a sweep result." % filename)
    return save_figure(fig, outdir, name)


if __name__ == "__main__":
    main()
