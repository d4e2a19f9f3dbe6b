"""End-to-end experiment runs used by the CLI: pretrain, evaluate, summarise."""
from __future__ import annotations

import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import torch

from .config import Experiment, deep_merge, dump_yaml, load_yaml, resolve, set_dotted
from .errors import ConfigError
from .evaluation import (export_embeddings, extract_video_features, finetune_recognize,
                         knn_retrieval)
from .training import load_checkpoint, train

log = logging.getLogger(__name__)

SUMMARY = "summary.json"


def freeze_experiment(exp: Experiment, run_dir, source=None):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_yaml(exp.to_dict(), run_dir / "resolved_config.yaml")
    manifest = {"config_file": str(source) if source else None, "run_dir": str(run_dir),
                "seed": exp.train.seed, "schema_version": exp.schema_version}
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def pretrain(exp: Experiment, run_dir, dataset=None, source=None):
    dataset = dataset if dataset is not None else exp.load_dataset()
    freeze_experiment(exp, run_dir, source)
    return train(exp.train, dataset, run_dir)


def load_best(run_dir_or_ckpt, device=None):
    p = Path(run_dir_or_ckpt)
    if p.is_dir():
        p = p / "best.pt"
    _, state = load_checkpoint(p, device)
    return state


def retrieve(state, dataset, exp: Experiment, out_dir, export=True):
    """Gallery = train split, queries = test split."""
    cfg = state.config
    skipped = []
    kw = dict(clips_per_video=exp.eval.clips_per_video, use_projection=exp.eval.use_projection,
              batch_size=exp.eval.batch_size, skipped=skipped)
    gallery = extract_video_features(state.model, dataset, dataset.split("train"), cfg, **kw)
    queries = extract_video_features(state.model, dataset, dataset.split("test"), cfg, **kw)
    report = knn_retrieval(queries, gallery, exp.eval.ks, class_names=dataset.class_names)
    out = Path(out_dir)
    report.write(out)
    if export:
        export_embeddings(queries, out / "embeddings_test.tsv", dataset.class_names)
        export_embeddings(gallery, out / "embeddings_train.tsv", dataset.class_names)
    if skipped:
        (out / "skipped.tsv").write_text("".join(f"{v}\t{why}\n" for v, why in skipped))
    return report


def finetune(state, dataset, exp: Experiment, out_dir, linear_probe=None):
    ft = exp.finetune
    if linear_probe is not None:
        from dataclasses import replace
        ft = replace(ft, linear_probe=linear_probe)
    model = None if state is None else state.model
    cfg = exp.train if state is None else state.config
    res = finetune_recognize(model, dataset, cfg, ft, exp.eval.clips_per_video)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "finetune.json").write_text(json.dumps(
        {"test_accuracy": res.test_accuracy, "best_val_accuracy": res.best_val_accuracy,
         "best_epoch": res.best_epoch, "linear_probe": ft.linear_probe,
         "history": res.history}, indent=2) + "\n")
    return res


def summary_row(exp: Experiment, cell_id, state, report, recog=None, wall=None) -> dict:
    t = exp.train
    row = {
        "id": cell_id,
        "task": t.task,
        "contrastive": t.use_contrastive,
        "residual": t.use_residual,
        "augment": t.use_augment,
        "alpha": t.alpha,
        "family": t.encoder.family,
        "seed": t.seed,
        "epochs": t.epochs,
        "best_epoch": state.best_epoch,
        "val_metric": state.best_metric,
    }
    for k in exp.eval.ks:
        row[f"top{k}"] = report.topk_accuracy.get(k) if report else None
    row["recognition"] = recog
    row["wall_time"] = wall
    return row


def run_cell(exp: Experiment, run_dir, cell_id, do_retrieval=True, do_finetune=False):
    t0 = time.time()
    run_dir = Path(run_dir)
    dataset = exp.load_dataset()
    pretrain(exp, run_dir, dataset)
    best = load_best(run_dir)
    report = retrieve(best, dataset, exp, run_dir) if do_retrieval else None
    recog = finetune(best, dataset, exp, run_dir).test_accuracy if do_finetune else None
    row = summary_row(exp, cell_id, best, report, recog, round(time.time() - t0, 2))
    (run_dir / SUMMARY).write_text(json.dumps(row, indent=2) + "\n")
    return row


# ------------------------------------------------------------------ ablation


def expand_matrix(matrix: dict):
    """Yield ``(cell_id, overrides)`` for a matrix file.

    A matrix has either ``cells`` (a list of ``{id, set}`` entries with dotted
    keys) or ``grid`` (dotted key -> list of values, expanded as a product).
    """
    cells = matrix.get("cells")
    grid = matrix.get("grid")
    if (cells is None) == (grid is None):
        raise ConfigError("matrix", "provide exactly one of 'cells' or 'grid'")
    if cells is not None:
        seen = set()
        for i, cell in enumerate(cells):
            if not isinstance(cell, dict) or "id" not in cell:
                raise ConfigError(f"cells[{i}]", "each cell needs an 'id'")
            unknown = set(cell) - {"id", "set"}
            if unknown:
                raise ConfigError(f"cells[{i}].{sorted(unknown)[0]}", "unknown key")
            if cell["id"] in seen:
                raise ConfigError(f"cells[{i}].id", f"duplicate id {cell['id']!r}")
            seen.add(cell["id"])
            yield str(cell["id"]), dict(cell.get("set") or {})
        return
    keys = list(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, values))
        cid = "_".join(f"{k.split('.')[-1]}={v}" for k, v in overrides.items())
        yield cid, overrides


def matrix_experiments(matrix: dict, preset="desk", seed=None, extra=None):
    allowed = {"schema_version", "name", "base", "cells", "grid", "evaluate"}
    for key in matrix:
        if key not in allowed:
            raise ConfigError(key, "unknown key")
    base = matrix.get("base") or {}
    out = []
    for cid, overrides in expand_matrix(matrix):
        raw = deep_merge(base, {})
        for k, v in {**overrides, **(extra or {})}.items():
            set_dotted(raw, k, v)
        try:
            exp = resolve(raw, preset, seed)
        except ConfigError as exc:
            raise ConfigError(f"{cid}:{exc.path}", str(exc).split(": ", 1)[-1]) from None
        out.append((cid, exp))
    return out


def _run_cell_job(args):
    exp, run_dir, cid, do_ret, do_ft = args
    torch.set_num_threads(1)
    return run_cell(exp, run_dir, cid, do_ret, do_ft)


RESULT_COLUMNS = ("id", "task", "contrastive", "residual", "augment", "alpha", "family", "seed",
                  "epochs", "best_epoch", "val_metric", "top1", "top5", "top10", "top20",
                  "top50", "recognition", "wall_time")


def write_table(rows, path):
    cols = list(RESULT_COLUMNS) + sorted({k for r in rows for k in r} - set(RESULT_COLUMNS))
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for r in rows:
            fh.write("\t".join(_fmt(r.get(c)) for c in cols) + "\n")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def ablate(matrix_path, out_dir, preset="desk", seed=None, workers=1, extra=None):
    matrix = load_yaml(matrix_path)
    evaluate = matrix.get("evaluate") or {}
    do_ret = bool(evaluate.get("retrieval", True))
    do_ft = bool(evaluate.get("finetune", False))
    cells = matrix_experiments(matrix, preset, seed, extra)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(exp, out / cid, cid, do_ret, do_ft) for cid, exp in cells]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_cell_job, jobs))
    else:
        rows = [run_cell(*job) for job in jobs]
    write_table(rows, out / "results.tsv")
    (out / "results.json").write_text(json.dumps(rows, indent=2) + "\n")
    return rows
