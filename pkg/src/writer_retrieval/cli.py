"""Command-line front-end.

Every subcommand writes a ``manifest.json`` next to its outputs recording the
subcommand, flags, seeds and SHA-256 of every input; ``replay`` re-runs one.
Exit codes: 2 input, 3 data, 4 shape, 5 gallery, 64 usage.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, descriptors, encoding, netvlad, page_ingest, retrieval, sweep, synth, training
from .errors import DimMismatch, EmptyGallery, FormatError, InsufficientWriters, PipelineError
from .numerics import derive_rng, make_rng

logger = logging.getLogger("writer_retrieval")

EXIT_INPUT, EXIT_USAGE = 2, 64
MANIFEST = "manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads(value):
    return value if value and value > 0 else (os.cpu_count() or 1)


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _strip_threads(argv):
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok == "--threads":
            skip = True
            continue
        if tok.startswith("--threads="):
            continue
        out.append(tok)
    return out


def _write_manifest(path, args, argv, inputs):
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "threads")}
    manifest = {
        "tool": "writer-retrieval",
        "version": __version__,
        "subcommand": args.command,
        "argv": _strip_threads(argv),
        "flags": flags,
        "inputs": {str(p): _sha256(p) for p in sorted(inputs, key=str)},
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_labels(path):
    labels = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise FormatError(f"{path}:{lineno}: expected 'filename<TAB>writer'")
            labels[parts[0]] = parts[1]
    return labels


def _write_labels(path, labels):
    with open(path, "w") as fh:
        for name in sorted(labels):
            fh.write(f"{name}\t{labels[name]}\n")


def _desc_files(directory):
    files = sorted(Path(directory).glob("*.desc"))
    if not files:
        raise FormatError(f"no .desc files in {directory}")
    return files


def _load_desc_dir(directory):
    files = _desc_files(directory)
    sets = [descriptors.read_desc(f) for f in files]
    descriptors.check_common_dim(sets)
    return sets, files


def _load_patch_dir(directory, proj_seed, dim, threads):
    directory = Path(directory)
    labels = _read_labels(directory / "labels.tsv")
    files = sorted(directory.glob("*.ptch"))
    if not files:
        raise FormatError(f"no .ptch files in {directory}")

    def work(path):
        if path.name not in labels:
            raise FormatError(f"{path.name} missing from labels.tsv")
        ps = page_ingest.PatchSet(path.stem, labels[path.name], page_ingest.read_ptch(path))
        return descriptors.project_patches(ps, proj_seed, dim)

    return _map(work, files, threads), files + [directory / "labels.tsv"]


def cmd_synth(args, argv):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sets = synth.synth_corpus(args.writers, args.docs, args.descriptors, args.dim,
                              args.separation, args.sigma, args.seed)
    for s in sets:
        descriptors.write_desc(out / f"{s.doc_id}.desc", s)
    _write_manifest(out / MANIFEST, args, argv, [])
    print(f"wrote {len(sets)} documents to {out}")


def cmd_patches(args, argv):
    in_dir = Path(args.input)
    pages = sorted(in_dir.glob("*.pgm")) if in_dir.is_dir() else []
    if not pages:
        print("no input pages", file=sys.stderr)
        return EXIT_INPUT
    labels = _read_labels(args.labels)
    missing = [p.name for p in pages if p.name not in labels]
    if missing:
        raise FormatError(f"pages without a writer label: {', '.join(missing)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def work(item):
        index, page = item
        img = page_ingest.read_pgm_file(page)
        return page_ingest.extract_patches(img, args.stride, args.max_patches or None,
                                           derive_rng(args.seed, index), page.stem,
                                           labels[page.name], invert=args.invert)

    results = _map(work, list(enumerate(pages)), _threads(args.threads))
    out_labels = {}
    for ps in results:
        page_ingest.write_ptch(out / f"{ps.doc_id}.ptch", ps.patches)
        out_labels[f"{ps.doc_id}.ptch"] = ps.writer_id
    _write_labels(out / "labels.tsv", out_labels)
    _write_manifest(out / MANIFEST, args, argv, pages + [Path(args.labels)])
    print(f"wrote patches for {len(results)} pages to {out}")


def cmd_describe(args, argv):
    sets, inputs = _load_patch_dir(args.patches, args.proj_seed, args.dim, _threads(args.threads))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in sets:
        descriptors.write_desc(out / f"{s.doc_id}.desc", s)
    _write_manifest(out / MANIFEST, args, argv, inputs)
    print(f"wrote descriptors for {len(sets)} documents to {out}")


def cmd_train(args, argv):
    if args.desc:
        sets, inputs = _load_desc_dir(args.desc)
    else:
        sets, inputs = _load_patch_dir(args.patches, args.proj_seed, args.dim, _threads(args.threads))
    groups = synth.group_by_writer(sets)
    if len(groups) < 2:
        raise InsufficientWriters(f"need >= 2 writers, found {len(groups)}")
    sample = np.concatenate([s.descriptors for s in sets])
    rng = make_rng(args.seed)
    if args.init_sample and sample.shape[0] > args.init_sample:
        sample = sample[np.sort(rng.choice(sample.shape[0], args.init_sample, replace=False))]
    params = netvlad.init_params(sample, args.k, args.alpha, args.init, rng)
    config = training.TrainConfig(margin=args.margin, lr=args.lr, beta1=args.beta1, beta2=args.beta2,
                                  batch_writers=args.batch_writers, batch_patches=args.batch_patches,
                                  epochs=args.epochs, seed=args.seed, val_fraction=args.val_fraction,
                                  early_stop_delta=args.early_stop)
    result = training.train(groups, params, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    netvlad.write_params(out, result.params)
    training.write_loss_csv(out.with_name(out.name + ".loss.csv"), result.history)
    _write_manifest(out.with_name(out.name + ".manifest.json"), args, argv, inputs)
    if result.epoch_losses:
        print("epoch losses: " + " ".join(f"{v:.6f}" for v in result.epoch_losses))
    print(f"wrote parameters to {out}")


def cmd_encode(args, argv):
    sets, inputs = _load_desc_dir(args.desc)
    params = netvlad.read_params(args.params)
    inputs.append(Path(args.params))
    if sets[0].dim != params.dim:
        raise DimMismatch(f"descriptors have width {sets[0].dim}, params expect {params.dim}")
    pooled = encoding.encode_corpus(sets, params, args.pooling, args.lam, args.p, _threads(args.threads))
    out = Path(args.out)
    model = None
    if args.pca_fit:
        model = encoding.pca_fit(np.stack([g.vector for g in pooled]), args.dimension, whiten=args.whiten)
    elif args.pca_model:
        model = encoding.read_pca(args.pca_model)
        inputs.append(Path(args.pca_model))
    final = [encoding.pca_transform(model, g) for g in pooled] if model is not None else pooled
    out.mkdir(parents=True, exist_ok=True)
    if args.pca_fit:
        encoding.write_pca(out / "pca.pca1", model)
    for g in final:
        encoding.write_globals(out / f"{g.doc_id}.gdsc", [g])
    _write_manifest(out / MANIFEST, args, argv, inputs)
    print(f"wrote {len(final)} global descriptors to {out}")


def _load_globals(directory):
    files = sorted(Path(directory).glob("*.gdsc"))
    items = []
    for f in files:
        items.extend(encoding.read_globals(f))
    return items, files


def cmd_evaluate(args, argv):
    items, files = _load_globals(args.globals)
    if len(items) < 2:
        raise EmptyGallery(f"gallery needs >= 2 documents, found {len(items)}")
    gallery = retrieval.Gallery(items)
    lists = retrieval.rank_all(gallery)
    if args.rerank != "none":
        lists = retrieval.rerank(gallery, int(args.rerank), initial=lists)
    report = retrieval.evaluate(lists, gallery.writers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    retrieval.write_ranked_tsv(out / "ranked.tsv", lists)
    with open(out / "report.tsv", "w") as fh:
        fh.write(retrieval.report_line(report))
    with open(out / "summary.txt", "w") as fh:
        fh.write(retrieval.summary(report))
    _write_manifest(out / MANIFEST, args, argv, files)
    sys.stdout.write(retrieval.summary(report))


def cmd_pca_sweep(args, argv):
    sets, inputs = _load_desc_dir(args.desc)
    params = netvlad.read_params(args.params)
    inputs.append(Path(args.params))
    pooled = encoding.encode_corpus(sets, params, args.pooling, args.lam, args.p, _threads(args.threads))
    fit_on = None
    if args.fit_desc:
        fit_sets, fit_inputs = _load_desc_dir(args.fit_desc)
        inputs.extend(fit_inputs)
        fit_on = encoding.encode_corpus(fit_sets, params, args.pooling, args.lam, args.p, _threads(args.threads))
    dims = [int(d) for d in args.dims.split(",") if d]
    rerank_k = None if args.rerank == "none" else int(args.rerank)
    rows = sweep.pca_dimension_sweep(pooled, dims, rerank_k, fit_on, whiten=args.whiten)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sweep.write_sweep_csv(out, rows)
    _write_manifest(out.with_name(out.name + ".manifest.json"), args, argv, inputs)
    for row in rows:
        print(f"dimension {row['dimension']}: mAP {row['map'] or '-'} ({row['status']})")


def cmd_replay(args, argv):
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    replay_argv = list(manifest["argv"])
    if args.threads:
        replay_argv += ["--threads", str(args.threads)]
    return main(replay_argv)


def _rerank_arg(value):
    if value == "none":
        return value
    try:
        k = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a positive integer or 'none'") from None
    if k < 1:
        raise argparse.ArgumentTypeError("k must be >= 1")
    return str(k)


def build_parser():
    parser = _Parser(prog="writer-retrieval", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def threads(p):
        p.add_argument("--threads", type=int, default=0, help="worker threads (default: all cores)")

    p = sub.add_parser("synth", help="generate a synthetic descriptor corpus")
    p.add_argument("--writers", type=int, default=20)
    p.add_argument("--docs", type=int, default=4)
    p.add_argument("--descriptors", type=int, default=50)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--separation", type=float, default=5.0, help="writer-mean distance in units of sigma")
    p.add_argument("--sigma", type=float, default=None, help="noise std (default 1/sqrt(dim))")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    threads(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("patches", help="extract contour-centred patches from PGM pages")
    p.add_argument("--input", required=True, help="directory of .pgm pages")
    p.add_argument("--labels", required=True, help="TSV: filename<TAB>writer")
    p.add_argument("--stride", type=int, default=3)
    p.add_argument("--max-patches", type=int, default=5000, help="0 keeps every patch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--invert", action="store_true", help="light ink on dark paper")
    p.add_argument("--out", required=True)
    threads(p)
    p.set_defaults(func=cmd_patches)

    p = sub.add_parser("describe", help="project patches to local descriptors")
    p.add_argument("--patches", required=True)
    p.add_argument("--proj-seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=descriptors.DEFAULT_DIM)
    p.add_argument("--out", required=True)
    threads(p)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("train", help="train NetVLAD parameters with semi-hard triplets")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--desc", help="directory of .desc files")
    src.add_argument("--patches", help="directory of .ptch files with labels.tsv")
    p.add_argument("--proj-seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=descriptors.DEFAULT_DIM)
    p.add_argument("--k", type=int, default=netvlad.DEFAULT_K)
    p.add_argument("--alpha", type=float, default=netvlad.DEFAULT_ALPHA)
    p.add_argument("--init", choices=("kmeans", "random"), default="kmeans")
    p.add_argument("--init-sample", type=int, default=20000, help="descriptors used for initialization")
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=training.TrainConfig.lr)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.99)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-writers", type=int, default=8)
    p.add_argument("--batch-patches", type=int, default=8)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--early-stop", type=float, default=None, help="stop when epoch loss improves less")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="NVLD1 parameter file")
    threads(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="aggregate documents into global descriptors")
    p.add_argument("--desc", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--pooling", choices=("gmp", "sum"), default="gmp")
    p.add_argument("--lambda", dest="lam", type=float, default=encoding.DEFAULT_LAMBDA)
    p.add_argument("--p", type=float, default=encoding.DEFAULT_POWER)
    pca = p.add_mutually_exclusive_group()
    pca.add_argument("--pca-fit", action="store_true", help="fit PCA on this corpus and write pca.pca1")
    pca.add_argument("--pca-model", help="apply an existing PCA1 model")
    p.add_argument("--dimension", type=int, default=encoding.DEFAULT_DIMENSION)
    p.add_argument("--no-whiten", dest="whiten", action="store_false")
    p.add_argument("--out", required=True)
    threads(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("evaluate", help="leave-one-out ranking and metrics")
    p.add_argument("--globals", required=True, help="directory of .gdsc files")
    p.add_argument("--rerank", type=_rerank_arg, default="2", help="k for krNN query expansion, or 'none'")
    p.add_argument("--out", required=True)
    threads(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pca-sweep", help="retrieval metrics across PCA dimensions")
    p.add_argument("--desc", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--fit-desc", help="corpus to fit PCA on (default: --desc)")
    p.add_argument("--dims", default=",".join(str(d) for d in sweep.DEFAULT_DIMS))
    p.add_argument("--pooling", choices=("gmp", "sum"), default="gmp")
    p.add_argument("--lambda", dest="lam", type=float, default=encoding.DEFAULT_LAMBDA)
    p.add_argument("--p", type=float, default=encoding.DEFAULT_POWER)
    p.add_argument("--rerank", type=_rerank_arg, default="none")
    p.add_argument("--no-whiten", dest="whiten", action="store_false")
    p.add_argument("--out", required=True, help="CSV path")
    threads(p)
    p.set_defaults(func=cmd_pca_sweep)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    threads(p)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv) or 0
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
