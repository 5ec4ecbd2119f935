import hashlib
import json

import numpy as np
import pytest

from pages import write_page_corpus
from writer_retrieval import cli, descriptors, encoding, netvlad, page_ingest
from writer_retrieval.numerics import make_rng
from writer_retrieval.page_ingest import GrayImage, write_pgm


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert run("synth", "--writers", 6, "--docs", 3, "--descriptors", 20, "--dim", 8,
               "--seed", 1, "--out", root / "desc") == 0
    assert run("train", "--desc", root / "desc", "--k", 4, "--epochs", 1, "--seed", 1,
               "--out", root / "params.nvld") == 0
    return root


def digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir()) if p.is_file()}


def test_synth_outputs(corpus):
    files = sorted((corpus / "desc").glob("*.desc"))
    assert len(files) == 18
    d = descriptors.read_desc(files[0])
    assert (d.doc_id, d.writer_id, len(d), d.dim) == ("w000_d0", "w000", 20, 8)
    manifest = json.loads((corpus / "desc" / "manifest.json").read_text())
    assert manifest["subcommand"] == "synth" and manifest["flags"]["seed"] == 1


def test_train_outputs(corpus):
    params = netvlad.read_params(corpus / "params.nvld")
    assert (params.n_clusters, params.dim) == (4, 8)
    lines = (corpus / "params.nvld.loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,loss" and len(lines) > 1
    manifest = json.loads((corpus / "params.nvld.manifest.json").read_text())
    assert len(manifest["inputs"]) == 18


def test_zero_epochs_keeps_initialization(corpus, tmp_path):
    assert run("train", "--desc", corpus / "desc", "--k", 4, "--epochs", 0, "--seed", 5,
               "--out", tmp_path / "p.nvld") == 0
    sets = [descriptors.read_desc(f) for f in sorted((corpus / "desc").glob("*.desc"))]
    sample = np.concatenate([s.descriptors for s in sets])
    init = netvlad.init_params(sample, 4, 25.0, "kmeans", make_rng(5))
    got = netvlad.read_params(tmp_path / "p.nvld")
    np.testing.assert_array_equal(got.centers, init.centers.astype(np.float32))
    np.testing.assert_array_equal(got.weights, init.weights.astype(np.float32))
    assert (tmp_path / "p.nvld.loss.csv").read_text() == "epoch,step,loss\n"


def test_train_usage_and_writer_errors(corpus, tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        run("train", "--desc", corpus / "desc", "--patches", tmp_path, "--out", tmp_path / "p")
    assert err.value.code == 64
    one = tmp_path / "one"
    one.mkdir()
    for f in sorted((corpus / "desc").glob("w000_*.desc")):
        (one / f.name).write_bytes(f.read_bytes())
    assert run("train", "--desc", one, "--k", 2, "--out", tmp_path / "p") == 3


def test_encode_and_evaluate(corpus, tmp_path, capsys):
    assert run("encode", "--desc", corpus / "desc", "--params", corpus / "params.nvld",
               "--pca-fit", "--dimension", 8, "--out", tmp_path / "g") == 0
    gs = encoding.read_globals(tmp_path / "g" / "w000_d0.gdsc")
    assert len(gs) == 1 and gs[0].vector.shape == (8,)
    assert abs(np.linalg.norm(gs[0].vector) - 1) < 1e-6
    assert (tmp_path / "g" / "pca.pca1").exists()
    assert run("evaluate", "--globals", tmp_path / "g", "--rerank", "none", "--out", tmp_path / "r") == 0
    out = capsys.readouterr().out
    assert "Top-1" in out and "mAP" in out
    report = (tmp_path / "r" / "report.tsv").read_text().split("\t")
    assert len(report) == 6 and report[4] == "18"
    ranked = (tmp_path / "r" / "ranked.tsv").read_text().splitlines()
    assert len(ranked) == 18 * 17
    # re-applying the saved model reproduces the fitted outputs
    assert run("encode", "--desc", corpus / "desc", "--params", corpus / "params.nvld",
               "--pca-model", tmp_path / "g" / "pca.pca1", "--out", tmp_path / "g2") == 0
    a = encoding.read_globals(tmp_path / "g2" / "w000_d0.gdsc")[0].vector
    assert np.allclose(a, gs[0].vector, atol=1e-5)


def test_encode_sum_single_descriptor(tmp_path):
    rng = make_rng(0)
    (tmp_path / "d").mkdir()
    xs = rng.standard_normal((2, 8))
    for i, x in enumerate(xs):
        descriptors.write_desc(tmp_path / "d" / f"doc{i}.desc", descriptors.DescriptorSet(f"doc{i}", "w", x[None]))
    params = netvlad.coupled_params(rng.standard_normal((3, 8)), 1.0)
    netvlad.write_params(tmp_path / "p.nvld", params)
    stored = netvlad.read_params(tmp_path / "p.nvld")
    assert run("encode", "--desc", tmp_path / "d", "--params", tmp_path / "p.nvld", "--pooling", "sum",
               "--out", tmp_path / "g") == 0
    for i in range(2):
        got = encoding.read_globals(tmp_path / "g" / f"doc{i}.gdsc")[0].vector
        x = xs[i].astype(np.float32).astype(np.float64)
        expected = encoding.power_norm(netvlad.embed(stored, x))
        np.testing.assert_allclose(got, expected, atol=1e-6)


def test_encode_dimension_too_large(corpus, tmp_path, capsys):
    code = run("encode", "--desc", corpus / "desc", "--params", corpus / "params.nvld",
               "--pca-fit", "--out", tmp_path / "g")
    assert code == 4
    assert "rank 17" in capsys.readouterr().err


def test_evaluate_gallery_of_one(tmp_path):
    (tmp_path / "g").mkdir()
    encoding.write_globals(tmp_path / "g" / "a.gdsc", [encoding.GlobalDescriptor("a", "w", np.ones(3))])
    assert run("evaluate", "--globals", tmp_path / "g", "--out", tmp_path / "r") == 5


def test_bad_rerank_value(tmp_path):
    with pytest.raises(SystemExit) as err:
        run("evaluate", "--globals", tmp_path, "--rerank", "zero", "--out", tmp_path)
    assert err.value.code == 64


def test_patches_empty_dir(tmp_path, capsys):
    (tmp_path / "in").mkdir()
    (tmp_path / "labels.tsv").write_text("")
    assert run("patches", "--input", tmp_path / "in", "--labels", tmp_path / "labels.tsv",
               "--out", tmp_path / "out") == 2
    assert "no input pages" in capsys.readouterr().err


def test_patches_bad_magic(tmp_path):
    (tmp_path / "in").mkdir()
    (tmp_path / "in" / "a.pgm").write_bytes(b"P6 1 1 255 xyz")
    (tmp_path / "labels.tsv").write_text("a.pgm\tw\n")
    assert run("patches", "--input", tmp_path / "in", "--labels", tmp_path / "labels.tsv",
               "--out", tmp_path / "out") == 2


def test_patches_count_matches_enumeration(tmp_path):
    labels = write_page_corpus(tmp_path / "pages", writers=1, pages=1)
    assert run("patches", "--input", tmp_path / "pages", "--labels", labels, "--stride", 1,
               "--max-patches", 0, "--out", tmp_path / "out") == 0
    img = page_ingest.read_pgm_file(tmp_path / "pages" / "w0_p0.pgm")
    t = page_ingest.otsu_threshold(img)
    inside = [(x, y) for x, y in page_ingest.contour_pixels(img, t)
              if 16 <= x <= img.width - 16 and 16 <= y <= img.height - 16]
    patches = page_ingest.read_ptch(tmp_path / "out" / "w0_p0.ptch")
    assert patches.shape == (len(inside), 32, 32)
    assert (tmp_path / "out" / "labels.tsv").read_text() == "w0_p0.ptch\tw0\n"


def test_page_pipeline_runs(tmp_path):
    labels = write_page_corpus(tmp_path / "pages", writers=3, pages=2)
    assert run("patches", "--input", tmp_path / "pages", "--labels", labels, "--max-patches", 40,
               "--seed", 3, "--out", tmp_path / "ptch") == 0
    assert run("describe", "--patches", tmp_path / "ptch", "--dim", 16, "--out", tmp_path / "desc") == 0
    assert len(list((tmp_path / "desc").glob("*.desc"))) == 6
    assert run("train", "--patches", tmp_path / "ptch", "--dim", 16, "--k", 3, "--epochs", 1,
               "--batch-writers", 3, "--batch-patches", 4, "--out", tmp_path / "p.nvld") == 0
    assert netvlad.read_params(tmp_path / "p.nvld").dim == 16


def test_patches_small_image(tmp_path):
    (tmp_path / "in").mkdir()
    (tmp_path / "in" / "a.pgm").write_bytes(write_pgm(GrayImage(20, 20, np.zeros((20, 20), np.uint8))))
    (tmp_path / "labels.tsv").write_text("a.pgm\tw\n")
    assert run("patches", "--input", tmp_path / "in", "--labels", tmp_path / "labels.tsv",
               "--out", tmp_path / "out") == 2


def test_pca_sweep_marks_infeasible(corpus, tmp_path):
    assert run("pca-sweep", "--desc", corpus / "desc", "--params", corpus / "params.nvld",
               "--dims", "4,8,64", "--out", tmp_path / "sweep.csv") == 0
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert rows[0] == "dimension,top1,hard2,hard3,map,status"
    assert rows[1].endswith(",ok") and rows[2].endswith(",ok")
    assert rows[3].startswith("64,") and "skipped" in rows[3]


def test_replay_reproduces(corpus, tmp_path):
    argv = ["encode", "--desc", corpus / "desc", "--params", corpus / "params.nvld", "--pooling", "sum",
            "--threads", 2, "--out", tmp_path / "g"]
    assert run(*argv) == 0
    before = digest(tmp_path / "g")
    for f in (tmp_path / "g").iterdir():
        if f.name != "manifest.json":
            f.unlink()
    assert run("replay", tmp_path / "g" / "manifest.json") == 0
    assert digest(tmp_path / "g") == before


def test_manifest_ignores_threads(corpus, tmp_path):
    for threads in (1, 3):
        assert run("encode", "--desc", corpus / "desc", "--params", corpus / "params.nvld",
                   "--threads", threads, "--out", tmp_path / "g") == 0
        d = digest(tmp_path / "g")
        if threads == 1:
            first = d
    assert d == first
    manifest = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert "--threads" not in manifest["argv"] and "threads" not in manifest["flags"]
