"""Aggregate finished runs into comparison tables and plots.

Plots are static PNG files rendered with the Agg backend. Plotting imports
are deferred so the table path works without matplotlib or scikit-learn.
"""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from .errors import InputError
from .evaluation import read_embeddings
from .runner import SUMMARY, write_table

log = logging.getLogger(__name__)


def collect_rows(run_dirs):
    """Summary rows from run directories or ablation output directories.

    A directory holding ``results.json`` contributes all of its rows; one
    holding ``summary.json`` contributes a single row.
    """
    rows = []
    for d in map(Path, run_dirs):
        if (d / "results.json").is_file():
            for row in json.loads((d / "results.json").read_text()):
                rows.append({**row, "run_dir": str(d / str(row["id"]))})
        elif (d / SUMMARY).is_file():
            rows.append({**json.loads((d / SUMMARY).read_text()), "run_dir": str(d)})
        else:
            raise InputError(f"{d}: no {SUMMARY} or results.json")
    return rows


def read_per_class(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        return [(row["name"] or row["label"], float(row["top1"])) for row in reader]


def plot_per_class(rows, out_path):
    """Grouped bars of per-class top-1 retrieval, one group per class."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = []
    for row in rows:
        p = Path(row["run_dir"]) / "retrieval_per_class.tsv"
        if p.is_file():
            series.append((str(row["id"]), read_per_class(p)))
    if not series:
        return None
    names = [n for n, _ in series[0][1]]
    width = 0.8 / len(series)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(6.0, 0.6 * len(names) * len(series)), 4.0))
    for i, (rid, values) in enumerate(series):
        lookup = dict(values)
        ax.bar(x + i * width, [lookup.get(n, 0.0) for n in names], width, label=rid)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("top-1 retrieval")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def select_first_classes(label_names: dict, n=10):
    """Labels of the first ``n`` class names in alphabetical order."""
    ordered = sorted(label_names.items(), key=lambda kv: kv[1])
    return {label for label, _ in ordered[:n]}


def plot_tsne(embedding_file, out_path, first_ten=False, seed=0):
    """2-D t-SNE scatter of exported embeddings, one colour per label."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from sklearn.manifold import TSNE

    feats, names = read_embeddings(embedding_file)
    if first_ten:
        keep = select_first_classes(names)
        feats = [f for f in feats if f.label in keep]
    if len(feats) < 3:
        raise InputError(f"{embedding_file}: need at least three embeddings for t-SNE")
    x = np.stack([f.vector for f in feats]).astype(np.float64)
    y = np.array([-1 if f.label is None else f.label for f in feats])
    perplexity = min(30.0, (len(feats) - 1) / 3.0)
    xy = TSNE(n_components=2, perplexity=perplexity, init="pca",
              random_state=seed).fit_transform(x)
    fig, ax = plt.subplots(figsize=(5.5, 5.0))
    cmap = plt.get_cmap("tab10" if len(set(y)) <= 10 else "tab20")
    for i, label in enumerate(sorted(set(y))):
        m = y == label
        ax.scatter(xy[m, 0], xy[m, 1], s=12, color=cmap(i % cmap.N),
                   label=names.get(int(label), str(label)))
    ax.set_xticks([])
    ax.set_yticks([])
    ax.legend(fontsize=7, markerscale=1.5, loc="best")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def build_report(run_dirs, out_dir, first_ten=False, plots=True):
    """Write ``comparison.tsv`` and, when requested, the plots. Returns the rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = collect_rows(run_dirs)
    write_table(rows, out / "comparison.tsv")
    if plots:
        plot_per_class(rows, out / "per_class_top1.png")
        for row in rows:
            emb = Path(row["run_dir"]) / "embeddings_test.tsv"
            if emb.is_file():
                plot_tsne(emb, out / f"tsne_{row['id']}.png", first_ten=first_ten)
            else:
                log.warning("%s: no embeddings export, skipping t-SNE", row["run_dir"])
    return rows
