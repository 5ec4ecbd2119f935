"""PCA dimension sweep over pooled global descriptors."""

import csv

import numpy as np

from . import encoding, retrieval
from .errors import DimensionTooLarge

DEFAULT_DIMS = (32, 64, 128, 256)
SWEEP_FIELDS = ("dimension", "top1", "hard2", "hard3", "map", "status")


def pca_dimension_sweep(pooled, dims=DEFAULT_DIMS, rerank_k=None, fit_on=None, whiten=True):
    """Evaluate retrieval for each PCA dimension.

    ``pooled`` are power-normalized globals to rank; PCA is fitted on
    ``fit_on`` (defaults to ``pooled``). Dimensions the data cannot support
    produce a row with empty metrics and a ``skipped`` status.
    """
    fit_on = pooled if fit_on is None else fit_on
    train = np.stack([g.vector for g in fit_on])
    # one decomposition at the largest feasible dimension; smaller ones are its leading rows
    full, rank, top = None, None, max(dims)
    while full is None:
        try:
            full = encoding.pca_fit(train, top, whiten=whiten)
        except DimensionTooLarge as exc:
            rank = exc.rank
            feasible = [d for d in dims if d <= min(rank, top - 1)]
            if not feasible:
                break
            top = max(feasible)
    rows = []
    for dim in dims:
        if full is None or dim > full.dimension:
            rows.append({"dimension": dim, "top1": "", "hard2": "", "hard3": "", "map": "",
                         "status": f"skipped: dimension {dim} exceeds attainable rank {rank}"})
            continue
        model = encoding.PcaModel(full.mean, full.components[:dim], full.scales[:dim])
        gallery = retrieval.Gallery([encoding.pca_transform(model, g) for g in pooled])
        lists = retrieval.rerank(gallery, rerank_k) if rerank_k else retrieval.rank_all(gallery)
        rep = retrieval.evaluate(lists, gallery.writers)
        rows.append({"dimension": dim, "top1": f"{rep.top1:.6f}", "hard2": f"{rep.hard2:.6f}",
                     "hard3": f"{rep.hard3:.6f}", "map": f"{rep.map:.6f}", "status": "ok"})
    return rows


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
