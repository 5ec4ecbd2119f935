"""Document-level aggregation and post-processing.

A document's patch embeddings are pooled (sum or generalized max-pooling),
power-normalized, l2-normalized and optionally PCA-whitened and
l2-normalized again. That stage order is fixed.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import netvlad
from .errors import BadMagic, DimensionTooLarge, DimMismatch, NonFinite, Truncated
from .numerics import ridge_solve, sym_eig

NORM_GUARD = 1e-12
WHITEN_EPS = 1e-12
RANK_TOL = 1e-10
DEFAULT_LAMBDA = 1000.0
DEFAULT_POWER = 0.5
DEFAULT_DIMENSION = 128
GDSC_MAGIC = b"GDSC1\n"
PCA_MAGIC = b"PCA1\n"


@dataclass
class GlobalDescriptor:
    doc_id: str
    writer_id: str
    vector: np.ndarray


@dataclass
class PcaModel:
    mean: np.ndarray        # (E,)
    components: np.ndarray  # (dimension, E), orthonormal rows
    scales: np.ndarray      # (dimension,)

    @property
    def dimension(self):
        return self.components.shape[0]

    @property
    def input_dim(self):
        return self.components.shape[1]


def l2_normalize(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    return v.copy() if n < NORM_GUARD else v / n


def sum_pool(emb):
    emb = np.atleast_2d(np.asarray(emb, dtype=np.float64))
    if emb.shape[0] < 1:
        raise ValueError("cannot pool an empty set")
    return emb.sum(axis=0)


def gmp_pool(emb, lam=DEFAULT_LAMBDA):
    """Generalized max-pooling.

    Minimizes ``||emb @ xi - 1||^2 + lam ||xi||^2`` through the N x N dual:
    ``(emb emb^T + lam I) a = 1`` and ``xi = emb^T a``.
    """
    emb = np.atleast_2d(np.asarray(emb, dtype=np.float64))
    if emb.shape[0] < 1:
        raise ValueError("cannot pool an empty set")
    if not np.all(np.isfinite(emb)):
        raise NonFinite("embeddings contain NaN or Inf")
    a = ridge_solve(emb @ emb.T, np.ones(emb.shape[0]), lam)
    return emb.T @ a


def gmp_residual(emb, xi, lam):
    """Relative residual of the primal normal equations for ``xi``."""
    emb = np.atleast_2d(np.asarray(emb, dtype=np.float64))
    rhs = emb.T @ np.ones(emb.shape[0])
    lhs = emb.T @ (emb @ xi) + lam * xi
    return float(np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), 1e-300))


def power_norm(v, p=DEFAULT_POWER):
    """``sign(v)|v|^p`` elementwise, then l2-normalized."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFinite("vector contains NaN or Inf")
    return l2_normalize(np.sign(v) * np.abs(v) ** p)


def pca_fit(data, dimension=DEFAULT_DIMENSION, whiten=True):
    """Principal components of row-vector data.

    When there are fewer samples than features the eigenproblem is solved on
    the M x M Gram matrix and mapped back.
    """
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    m, e = x.shape
    if m < 2:
        raise ValueError("PCA needs at least two samples")
    if dimension < 1 or dimension > min(m - 1, e):
        bound = min(m - 1, e)
        raise DimensionTooLarge(f"dimension {dimension} exceeds attainable rank {bound} "
                                f"({m} samples, {e} features)", rank=bound)
    mean = x.mean(axis=0)
    xc = x - mean
    if m < e:
        vals, vecs = sym_eig(xc @ xc.T / (m - 1))
    else:
        vals, vecs = sym_eig(xc.T @ xc / (m - 1))
    top = vals[0] if vals.size and vals[0] > 0 else 0.0
    rank = int(np.sum(vals > RANK_TOL * top)) if top > 0 else 0
    if dimension > rank:
        raise DimensionTooLarge(f"dimension {dimension} exceeds data rank {rank}", rank=rank)
    vals = vals[:dimension]
    if m < e:
        comps = (xc.T @ vecs[:, :dimension]) / np.sqrt(vals * (m - 1))
        comps = comps.T
    else:
        comps = vecs[:, :dimension].T.copy()
    scales = 1.0 / np.sqrt(vals + WHITEN_EPS) if whiten else np.ones(dimension)
    return PcaModel(mean, comps, scales)


def pca_project(model, data):
    """Centre, project and (if fitted with whitening) rescale; no normalization."""
    x = np.asarray(data, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise DimMismatch(f"vector length {x.shape[-1]} does not match PCA input {model.input_dim}")
    return ((x - model.mean) @ model.components.T) * model.scales


def pca_transform(model, g):
    return GlobalDescriptor(g.doc_id, g.writer_id, l2_normalize(pca_project(model, g.vector)))


def pool_document(dset, params, pooling="gmp", lam=DEFAULT_LAMBDA, p=DEFAULT_POWER):
    """Embedding, pooling and power normalization for one document."""
    emb = netvlad.embed_batch(params, dset.descriptors)
    if pooling == "gmp":
        pooled = gmp_pool(emb, lam)
    elif pooling == "sum":
        pooled = sum_pool(emb)
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    return GlobalDescriptor(dset.doc_id, dset.writer_id, power_norm(pooled, p))


def encode_document(dset, params, pooling="gmp", pca=None, lam=DEFAULT_LAMBDA, p=DEFAULT_POWER):
    g = pool_document(dset, params, pooling, lam, p)
    return pca_transform(pca, g) if pca is not None else g


def encode_corpus(sets, params, pooling="gmp", lam=DEFAULT_LAMBDA, p=DEFAULT_POWER, threads=1):
    """Pooled, power-normalized globals for many documents, in input order."""
    def work(dset):
        return pool_document(dset, params, pooling, lam, p)
    if threads <= 1:
        return [work(s) for s in sets]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, sets))


def write_globals(path, globals_):
    """GDSC1 records, concatenated; one record per document."""
    with open(path, "wb") as fh:
        for g in globals_:
            vec = np.asarray(g.vector, dtype="<f4")
            fh.write(GDSC_MAGIC)
            fh.write(f"{g.doc_id} {g.writer_id} {vec.size}\n".encode("ascii"))
            fh.write(vec.tobytes())


def read_globals(path):
    with open(path, "rb") as fh:
        data = fh.read()
    out = []
    pos = 0
    while pos < len(data):
        if not data.startswith(GDSC_MAGIC, pos):
            raise BadMagic(f"{path}: record at byte {pos} is not GDSC1")
        pos += len(GDSC_MAGIC)
        end = data.find(b"\n", pos)
        if end < 0:
            raise Truncated(f"{path}: missing record header")
        fields = data[pos:end].decode("ascii").split()
        if len(fields) != 3:
            raise Truncated(f"{path}: malformed record header {fields!r}")
        size = int(fields[2])
        pos = end + 1
        raw = data[pos:pos + 4 * size]
        if len(raw) < 4 * size:
            raise Truncated(f"{path}: record {fields[0]} truncated")
        out.append(GlobalDescriptor(fields[0], fields[1], np.frombuffer(raw, dtype="<f4").astype(np.float64)))
        pos += 4 * size
    return out


def write_pca(path, model):
    """PCA1: magic, ``dimension E`` line, then mean, components, scales as float32 LE."""
    with open(path, "wb") as fh:
        fh.write(PCA_MAGIC)
        fh.write(f"{model.dimension} {model.input_dim}\n".encode("ascii"))
        for arr in (model.mean, model.components, model.scales):
            fh.write(np.asarray(arr, dtype="<f4").tobytes())


def read_pca(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(PCA_MAGIC):
        raise BadMagic(f"{path}: not a PCA1 file")
    end = data.find(b"\n", len(PCA_MAGIC))
    if end < 0:
        raise Truncated(f"{path}: missing header line")
    dim, e = (int(t) for t in data[len(PCA_MAGIC):end].split())
    need = (e + dim * e + dim) * 4
    payload = data[end + 1:]
    if len(payload) < need:
        raise Truncated(f"{path}: expected {need} payload bytes, found {len(payload)}")
    flat = np.frombuffer(payload[:need], dtype="<f4").astype(np.float64)
    return PcaModel(flat[:e], flat[e:e + dim * e].reshape(dim, e), flat[e + dim * e:])
