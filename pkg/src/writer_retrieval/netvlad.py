"""NetVLAD embedding of single local descriptors.

Each descriptor ``x`` is mapped to K residual blocks ``a_k(x) * (x - c_k)``
where ``a`` is a softmax over ``w_k . x + b_k``, then the whole K*D vector is
l2-normalized. Blocks are laid out cluster-major: entries ``k*D .. k*D+D-1``
hold the residual for cluster ``k``. Centres, weights and biases are
independent parameters; ``coupled_params`` recovers the distance-based form.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import BadMagic, NonFinite, TooFewSamples, Truncated

NORM_GUARD = 1e-12
DEFAULT_K = 100
DEFAULT_ALPHA = 25.0
KMEANS_ITERATIONS = 20
NVLD_MAGIC = b"NVLD1\n"


@dataclass
class NetVladParams:
    centers: np.ndarray  # (K, D)
    weights: np.ndarray  # (K, D)
    biases: np.ndarray   # (K,)

    def __post_init__(self):
        self.centers = np.array(self.centers, dtype=np.float64)
        self.weights = np.array(self.weights, dtype=np.float64)
        self.biases = np.array(self.biases, dtype=np.float64).reshape(-1)
        k, d = self.centers.shape
        if self.weights.shape != (k, d) or self.biases.shape != (k,):
            raise ValueError("centers, weights and biases disagree on K or D")
        if k < 2:
            raise ValueError("NetVLAD needs at least two clusters")

    @property
    def n_clusters(self):
        return self.centers.shape[0]

    @property
    def dim(self):
        return self.centers.shape[1]

    @property
    def embedding_dim(self):
        return self.centers.size

    def copy(self):
        return NetVladParams(self.centers.copy(), self.weights.copy(), self.biases.copy())


def _finite(*arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NonFinite("input contains NaN or Inf")


def soft_assign(params, x):
    """Softmax of ``w_k . x + b_k`` over clusters, shifted by the max logit."""
    x = np.asarray(x, dtype=np.float64)
    _finite(x)
    logits = np.atleast_2d(x) @ params.weights.T + params.biases
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    out = e / e.sum(axis=1, keepdims=True)
    return out[0] if x.ndim == 1 else out


def coupled_params(centers, alpha):
    """Parameters for which soft assignment equals ``softmax(-alpha * ||x - c_k||^2)``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    centers = np.asarray(centers, dtype=np.float64)
    return NetVladParams(centers.copy(), 2.0 * alpha * centers, -alpha * np.sum(centers ** 2, axis=1))


def embed_batch(params, x):
    """Normalized embeddings for each row of ``x``; shape (n, K*D)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _finite(x)
    emb, _, _ = kernels.netvlad_forward(params.centers, params.weights, params.biases, x)
    return emb


def embed(params, x):
    return embed_batch(params, np.asarray(x, dtype=np.float64)[None, :])[0]


def embed_raw(params, x):
    """Un-normalized residual blocks, flattened cluster-major."""
    x = np.asarray(x, dtype=np.float64)
    a = soft_assign(params, x)
    return (a[:, None] * (x[None, :] - params.centers)).reshape(-1)


def vlad_hard(centers, x):
    """Classical VLAD of one descriptor: residual to the nearest centre only.

    Ties go to the lowest cluster index. No normalization is applied.
    """
    centers = np.asarray(centers, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _finite(centers, x)
    k = int(np.argmin(np.sum((x[None, :] - centers) ** 2, axis=1)))
    out = np.zeros_like(centers)
    out[k] = x - centers[k]
    return out.reshape(-1)


def forward(params, x):
    """Embeddings plus the intermediates ``backward`` needs."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _finite(x)
    emb, assign, norms = kernels.netvlad_forward(params.centers, params.weights, params.biases, x)
    return emb, (x, assign, emb, norms)


def backward(params, cache, upstream):
    """Gradients of ``sum_n upstream[n] . emb[n]``.

    Returns (grad_x per row, grad_centers, grad_weights, grad_biases) with the
    parameter gradients summed over rows. Rows whose raw norm fell under the
    guard pass gradients through unscaled.
    """
    x, assign, emb, norms = cache
    upstream = np.asarray(upstream, dtype=np.float64).reshape(emb.shape)
    _finite(upstream)
    return kernels.netvlad_backward(params.centers, params.weights, params.biases,
                                    x, assign, emb, norms, upstream)


def embed_backward(params, x, upstream_grad):
    """Analytic gradients of the normalized embedding of one descriptor."""
    x = np.asarray(x, dtype=np.float64)
    _finite(x, params.centers, params.weights, params.biases)
    _, cache = forward(params, x[None, :])
    gx, gc, gw, gb = backward(params, cache, np.asarray(upstream_grad)[None, :])
    return gx[0], gc, gw, gb


def kmeans(sample, n_clusters, rng, iterations=KMEANS_ITERATIONS):
    """Lloyd's algorithm with k-means++ seeding.

    Returns the centres and the objective (sum of squared distances to the
    assigned centre) measured at each iteration's assignment step. Empty
    clusters keep their previous centre; assignment ties go to the lowest index.
    """
    x = np.asarray(sample, dtype=np.float64)
    m = x.shape[0]
    if m < n_clusters:
        raise TooFewSamples(f"k-means needs at least {n_clusters} samples, got {m}")
    chosen = [int(rng.integers(m))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, n_clusters):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(m, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(m), chosen)
            idx = int(rest[rng.integers(rest.size)])
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    centers = x[chosen].copy()
    history = []
    sq = np.sum(x * x, axis=1)
    for _ in range(iterations):
        dist = sq[:, None] - 2.0 * x @ centers.T + np.sum(centers ** 2, axis=1)[None, :]
        labels = np.argmin(dist, axis=1)
        history.append(float(np.sum((x - centers[labels]) ** 2)))
        counts = np.bincount(labels, minlength=n_clusters)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled, None]
    return centers, history


def init_params(descriptors, n_clusters=DEFAULT_K, alpha_init=DEFAULT_ALPHA, mode="kmeans", rng=None):
    """Initial NetVLAD parameters from a descriptor sample.

    ``kmeans``: k-means centres with the coupled weights/biases for ``alpha_init``.
    ``random``: centres and weights uniform with variance 2/(D+K), zero biases.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    _finite(x)
    if rng is None:
        raise ValueError("rng required")
    dim = x.shape[1]
    if mode == "kmeans":
        centers, _ = kmeans(x, n_clusters, rng)
        return coupled_params(centers, alpha_init)
    if mode == "random":
        bound = np.sqrt(6.0 / (dim + n_clusters))
        centers = rng.uniform(-bound, bound, size=(n_clusters, dim))
        weights = rng.uniform(-bound, bound, size=(n_clusters, dim))
        return NetVladParams(centers, weights, np.zeros(n_clusters))
    raise ValueError(f"unknown init mode {mode!r}")


def write_params(path, params):
    """NVLD1: magic, ``K D`` line, then centres, weights, biases as float32 LE."""
    with open(path, "wb") as fh:
        fh.write(NVLD_MAGIC)
        fh.write(f"{params.n_clusters} {params.dim}\n".encode("ascii"))
        for arr in (params.centers, params.weights, params.biases):
            fh.write(np.asarray(arr, dtype="<f4").tobytes())


def read_params(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(NVLD_MAGIC):
        raise BadMagic(f"{path}: not an NVLD1 file")
    end = data.find(b"\n", len(NVLD_MAGIC))
    if end < 0:
        raise Truncated(f"{path}: missing header line")
    k, d = (int(t) for t in data[len(NVLD_MAGIC):end].split())
    need = (2 * k * d + k) * 4
    payload = data[end + 1:]
    if len(payload) < need:
        raise Truncated(f"{path}: expected {need} payload bytes, found {len(payload)}")
    flat = np.frombuffer(payload[:need], dtype="<f4").astype(np.float64)
    return NetVladParams(flat[:k * d].reshape(k, d), flat[k * d:2 * k * d].reshape(k, d), flat[2 * k * d:])
