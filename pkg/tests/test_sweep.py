import numpy as np

from writer_retrieval import encoding, netvlad, retrieval
from writer_retrieval.numerics import make_rng
from writer_retrieval.sweep import pca_dimension_sweep, write_sweep_csv
from writer_retrieval.synth import synth_corpus


def pooled_corpus():
    sets = synth_corpus(writers=6, docs=3, descriptors=15, dim=8, seed=4)
    params = netvlad.init_params(np.concatenate([s.descriptors for s in sets]), 4, rng=make_rng(4))
    return encoding.encode_corpus(sets, params)


def test_sweep_matches_separate_fits():
    pooled = pooled_corpus()
    rows = pca_dimension_sweep(pooled, (2, 5, 9))
    for row in rows:
        model = encoding.pca_fit(np.stack([g.vector for g in pooled]), row["dimension"])
        gallery = retrieval.Gallery([encoding.pca_transform(model, g) for g in pooled])
        rep = retrieval.evaluate(retrieval.rank_all(gallery), gallery.writers)
        assert row["status"] == "ok" and row["map"] == f"{rep.map:.6f}"


def test_sweep_skips_infeasible(tmp_path):
    pooled = pooled_corpus()
    rows = pca_dimension_sweep(pooled, (4, 17, 40))
    assert [r["status"] for r in rows][0] == "ok"
    assert rows[1]["status"] == "ok"
    assert rows[2]["status"].startswith("skipped") and "17" in rows[2]["status"]
    write_sweep_csv(tmp_path / "s.csv", rows)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "dimension,top1,hard2,hard3,map,status"


def test_sweep_with_rerank_and_external_fit():
    pooled = pooled_corpus()
    rows = pca_dimension_sweep(pooled[:12], (3,), rerank_k=2, fit_on=pooled)
    assert rows[0]["status"] == "ok"
