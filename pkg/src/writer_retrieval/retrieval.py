"""Leave-one-out ranking, reciprocal-neighbour query expansion and metrics.

Every document is used once as the query against all others. Ties in
distance are broken by lexicographic doc id everywhere.
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DimMismatch, EmptyGallery, KOutOfRange, ZeroVector

NORM_GUARD = 1e-12


@dataclass
class RankedList:
    query: str
    doc_ids: list
    distances: np.ndarray

    def __len__(self):
        return len(self.doc_ids)


@dataclass
class EvalReport:
    top1: float
    hard2: float
    hard3: float
    map: float
    average_precision: dict = field(default_factory=dict)
    n_queries: int = 0
    n_without_relevant: int = 0


class Gallery:
    """Global descriptors keyed by unique doc id, with writer labels."""

    def __init__(self, descriptors):
        descriptors = list(descriptors)
        if len(descriptors) < 2:
            raise EmptyGallery(f"gallery needs >= 2 documents, got {len(descriptors)}")
        self.doc_ids = [g.doc_id for g in descriptors]
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValueError("duplicate doc ids in gallery")
        lengths = {np.asarray(g.vector).size for g in descriptors}
        if len(lengths) != 1:
            raise DimMismatch(f"gallery vectors differ in length: {sorted(lengths)}")
        self.writers = {g.doc_id: g.writer_id for g in descriptors}
        self.vectors = np.stack([np.asarray(g.vector, dtype=np.float64) for g in descriptors])
        self.index = {d: i for i, d in enumerate(self.doc_ids)}

    def __len__(self):
        return len(self.doc_ids)


def cosine_distance(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimMismatch(f"vector shapes differ: {p.shape} vs {q.shape}")
    np_, nq = np.linalg.norm(p), np.linalg.norm(q)
    if np_ < NORM_GUARD or nq < NORM_GUARD:
        raise ZeroVector("cosine distance undefined for a zero vector")
    return float(np.clip(1.0 - (p @ q) / (np_ * nq), 0.0, 2.0))


def _unit_rows(vectors):
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms < NORM_GUARD):
        raise ZeroVector("gallery contains a zero vector")
    return vectors / norms[:, None]


def _id_ranks(doc_ids):
    order = sorted(range(len(doc_ids)), key=lambda i: doc_ids[i])
    ranks = np.empty(len(doc_ids), dtype=np.int64)
    ranks[order] = np.arange(len(doc_ids))
    return ranks


def _ranked(gallery, qi, dist_row, id_ranks):
    others = np.array([j for j in range(len(gallery)) if j != qi], dtype=np.int64)
    d = dist_row[others]
    order = np.lexsort((id_ranks[others], d))
    return RankedList(gallery.doc_ids[qi], [gallery.doc_ids[j] for j in others[order]], d[order])


def distance_matrix(gallery):
    unit = _unit_rows(gallery.vectors)
    return np.clip(1.0 - unit @ unit.T, 0.0, 2.0)


def rank_all(gallery):
    """One ranked list per gallery document, queries in gallery order."""
    dist = distance_matrix(gallery)
    ranks = _id_ranks(gallery.doc_ids)
    return [_ranked(gallery, i, dist[i], ranks) for i in range(len(gallery))]


def knn(ranked, k):
    if not 1 <= k <= len(ranked):
        raise KOutOfRange(f"k={k} outside 1..{len(ranked)}")
    return list(ranked.doc_ids[:k])


def krnn(lists, query, k):
    """Documents in the query's top-k whose own top-k contains the query.

    ``lists`` maps query doc id to its RankedList (a sequence is accepted too).
    """
    if not isinstance(lists, dict):
        lists = {r.query: r for r in lists}
    return {p for p in knn(lists[query], k) if query in knn(lists[p], k)}


def expand_query(q, neighbors):
    """Mean of the query vector and its neighbour vectors."""
    q = np.asarray(q, dtype=np.float64)
    vecs = [np.asarray(r, dtype=np.float64) for r in neighbors]
    for r in vecs:
        if r.shape != q.shape:
            raise DimMismatch(f"neighbour shape {r.shape} differs from query {q.shape}")
    if not vecs:
        return q.copy()
    return (q + np.sum(vecs, axis=0)) / (len(vecs) + 1)


def rerank(gallery, k=2, initial=None):
    """Single-pass query expansion over k-reciprocal neighbours.

    Each query is replaced by the mean of itself and its reciprocal neighbours
    from the initial ranking, then re-ranked against the original vectors.
    """
    initial = initial or rank_all(gallery)
    by_query = {r.query: r for r in initial}
    unit = _unit_rows(gallery.vectors)
    ranks = _id_ranks(gallery.doc_ids)
    out = []
    for qi, doc in enumerate(gallery.doc_ids):
        neighbours = sorted(krnn(by_query, doc, k))
        if not neighbours:
            out.append(by_query[doc])
            continue
        q_new = expand_query(gallery.vectors[qi], [gallery.vectors[gallery.index[n]] for n in neighbours])
        norm = np.linalg.norm(q_new)
        if norm < NORM_GUARD:
            raise ZeroVector(f"expanded query for {doc} vanished")
        dist = np.clip(1.0 - unit @ (q_new / norm), 0.0, 2.0)
        out.append(_ranked(gallery, qi, dist, ranks))
    return out


def average_precision(relevance, n_relevant):
    """Sum of precision at each relevant rank, divided by ``n_relevant``.

    Accumulated in exact rationals so the result is correctly rounded.
    """
    if n_relevant == 0:
        return 0.0
    ranks = np.flatnonzero(np.asarray(relevance, dtype=bool)) + 1
    total = sum(Fraction(hit, int(rank)) for hit, rank in enumerate(ranks, start=1))
    return float(total / n_relevant)


def evaluate(lists, writers):
    """Top-1, hard Top-2/3 and mAP over leave-one-out ranked lists.

    ``writers`` maps doc id to writer id. Queries without any same-writer
    document are left out of mAP and counted in ``n_without_relevant``.
    """
    lists = list(lists)
    if not lists:
        raise EmptyGallery("no ranked lists to evaluate")
    top1 = hard2 = hard3 = 0
    ap = {}
    missing = 0
    for r in lists:
        w = writers[r.query]
        rel = np.array([writers[d] == w for d in r.doc_ids], dtype=bool)
        top1 += bool(rel[:1].all()) and rel.size >= 1
        hard2 += bool(rel[:2].all()) and rel.size >= 2
        hard3 += bool(rel[:3].all()) and rel.size >= 3
        n_rel = int(rel.sum())
        if n_rel == 0:
            missing += 1
            continue
        ap[r.query] = average_precision(rel, n_rel)
    n = len(lists)
    mean_ap = float(np.mean(list(ap.values()))) if ap else 0.0
    return EvalReport(top1 / n, hard2 / n, hard3 / n, mean_ap, ap, n, missing)


def write_ranked_tsv(path, lists):
    with open(path, "w") as fh:
        for r in lists:
            for rank, (doc, dist) in enumerate(zip(r.doc_ids, r.distances), start=1):
                fh.write(f"{r.query}\t{rank}\t{doc}\t{float(dist):.9g}\n")


REPORT_FIELDS = ("top1", "hard2", "hard3", "map", "n_queries", "n_without_relevant")


def report_line(report):
    """Tab-separated values in ``REPORT_FIELDS`` order."""
    vals = [f"{report.top1:.6f}", f"{report.hard2:.6f}", f"{report.hard3:.6f}", f"{report.map:.6f}",
            str(report.n_queries), str(report.n_without_relevant)]
    return "\t".join(vals) + "\n"


def summary(report):
    return (f"queries: {report.n_queries}\n"
            f"Top-1:  {100 * report.top1:6.2f}\n"
            f"Hard-2: {100 * report.hard2:6.2f}\n"
            f"Hard-3: {100 * report.hard3:6.2f}\n"
            f"mAP:    {100 * report.map:6.2f}\n")
