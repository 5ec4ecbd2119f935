"""Semi-hard triplet training of NetVLAD parameters with Adamax.

Distances between embeddings are squared Euclidean. Batches hold P writers
with Q patches each so every anchor has in-batch positives.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels, netvlad
from .errors import InsufficientWriters, NonFinite, NoValidTriplets
from .numerics import make_rng

logger = logging.getLogger(__name__)

ADAMAX_EPS = 1e-8
PARAM_NAMES = ("centers", "weights", "biases")


@dataclass
class TrainConfig:
    margin: float = 0.1
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.99
    batch_writers: int = 8
    batch_patches: int = 8
    epochs: int = 5
    seed: int = 0
    val_fraction: float = 0.1
    early_stop_delta: float | None = None


@dataclass
class AdamaxState:
    m: dict
    u: dict
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99

    @classmethod
    def zeros_like(cls, params, lr=1e-3, beta1=0.9, beta2=0.99):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0, lr, beta1, beta2)


@dataclass
class TrainResult:
    params: netvlad.NetVladParams
    history: list = field(default_factory=list)  # (epoch, step, loss) per step
    epoch_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)


def pairwise_sq_dist(emb):
    """Squared Euclidean distances between rows; symmetric, zero diagonal, >= 0."""
    emb = np.asarray(emb, dtype=np.float64)
    if not np.all(np.isfinite(emb)):
        raise NonFinite("embeddings contain NaN or Inf")
    sq = np.sum(emb * emb, axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * emb @ emb.T
    dist = 0.5 * (dist + dist.T)
    np.maximum(dist, 0.0, out=dist)
    np.fill_diagonal(dist, 0.0)
    return dist


def _label_codes(labels):
    _, codes = np.unique(np.asarray(labels), return_inverse=True)
    return codes.astype(np.int64).reshape(-1)


def mine_semi_hard(dist, labels, margin):
    """(anchor, positive, negative) index triples for one batch.

    For each ordered same-writer pair the negative is the closest one inside
    ``d_ap < d_an < d_ap + margin``. When that band is empty the closest
    negative that still yields positive loss (``d_an < d_ap + margin``) is
    used; pairs with neither are skipped. Ties go to the lowest index.
    """
    triplets = kernels.mine_triplets(np.asarray(dist, dtype=np.float64), _label_codes(labels), float(margin))
    if len(triplets) == 0:
        raise NoValidTriplets("no anchor-positive pair has a negative with positive loss")
    return triplets


def triplet_loss(d_ap, d_an, margin):
    return np.maximum(np.asarray(d_ap) - np.asarray(d_an) + margin, 0.0)


def batch_loss_and_grad(emb, labels, margin):
    """Mean hinge loss over mined triplets and its gradient w.r.t. ``emb``.

    Raises NoValidTriplets when nothing is mined.
    """
    dist = pairwise_sq_dist(emb)
    trip = mine_semi_hard(dist, labels, margin)
    a, p, n = trip[:, 0], trip[:, 1], trip[:, 2]
    losses = triplet_loss(dist[a, p], dist[a, n], margin)
    # loss = sum_ij coef_ij * d_ij over active triplets, so
    # grad = 2 (diag(S 1) - S) emb with S = coef + coef^T
    active = losses > 0
    coef = np.zeros_like(dist)
    np.add.at(coef, (a[active], p[active]), 1.0 / len(trip))
    np.add.at(coef, (a[active], n[active]), -1.0 / len(trip))
    sym = coef + coef.T
    grad = 2.0 * (sym.sum(axis=1)[:, None] * emb - sym @ emb)
    return float(losses.mean()), grad, trip


def adamax_step(state, params, grads):
    """One Adamax update on dicts of arrays; returns new params and new state.

    ``m <- b1 m + (1-b1) g``, ``u <- max(b2 u, |g|)``,
    ``theta <- theta - lr/(1-b1^t) * m/(u+1e-8)``.
    """
    t = state.t + 1
    new_m, new_u, new_params = {}, {}, {}
    step = state.lr / (1.0 - state.beta1 ** t)
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(theta):
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {np.shape(theta)}")
        if not np.all(np.isfinite(g)):
            raise NonFinite(f"gradient for {name} is not finite")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        u = np.maximum(state.beta2 * state.u[name], np.abs(g))
        new_m[name] = m
        new_u[name] = u
        new_params[name] = theta - step * m / (u + ADAMAX_EPS)
    return new_params, AdamaxState(new_m, new_u, t, state.lr, state.beta1, state.beta2)


def _as_dict(params):
    return {name: getattr(params, name) for name in PARAM_NAMES}


def _from_dict(d):
    return netvlad.NetVladParams(d["centers"], d["weights"], d["biases"])


def param_gradients(params, x, labels, margin):
    """Loss and parameter gradients for one batch of descriptors."""
    emb, cache = netvlad.forward(params, x)
    loss, gemb, trip = batch_loss_and_grad(emb, labels, margin)
    _, gc, gw, gb = netvlad.backward(params, cache, gemb)
    return loss, {"centers": gc, "weights": gw, "biases": gb}, trip


def _split(groups, val_fraction, rng):
    train, val = {}, {}
    for writer in sorted(groups):
        x = np.asarray(groups[writer], dtype=np.float64)
        order = rng.permutation(x.shape[0])
        n_val = min(int(x.shape[0] * val_fraction), max(x.shape[0] - 2, 0))
        val[writer] = x[order[:n_val]]
        train[writer] = x[order[n_val:]]
    return train, val


def _draw_batch(pool, writers, n_writers, n_patches, rng):
    chosen = rng.choice(len(writers), size=min(n_writers, len(writers)), replace=False)
    xs, labels = [], []
    for wi in np.sort(chosen):
        writer = writers[wi]
        x = pool[writer]
        idx = rng.choice(x.shape[0], size=n_patches, replace=x.shape[0] < n_patches)
        xs.append(x[idx])
        labels.extend([wi] * n_patches)
    return np.concatenate(xs), np.array(labels)


def _safe_loss(params, x, labels, margin):
    try:
        return param_gradients(params, x, labels, margin)[0]
    except NoValidTriplets:
        return 0.0


def train(groups, params, config=None):
    """Train NetVLAD parameters on descriptors grouped by writer.

    ``groups`` maps writer id to an (n, D) descriptor array. Patches are split
    per writer into disjoint train/validation parts. Each epoch runs
    ``total_train_patches // (P*Q)`` steps (at least one).
    """
    config = config or TrainConfig()
    rng = make_rng(config.seed)
    train_pool, val_pool = _split(groups, config.val_fraction, rng)
    writers = [w for w in sorted(train_pool) if train_pool[w].shape[0] >= 2]
    if len(writers) < 2:
        raise InsufficientWriters(f"need >= 2 writers with >= 2 patches, have {len(writers)}")
    val_writers = [w for w in sorted(val_pool) if val_pool[w].shape[0] >= 2]
    val_batch = None
    if len(val_writers) >= 2:
        val_batch = _draw_batch(val_pool, val_writers, config.batch_writers, config.batch_patches,
                                make_rng(config.seed + 1))

    result = TrainResult(params.copy())
    current = _as_dict(result.params)
    state = AdamaxState.zeros_like(current, config.lr, config.beta1, config.beta2)
    total = sum(train_pool[w].shape[0] for w in writers)
    per_step = min(config.batch_writers, len(writers)) * config.batch_patches
    steps = max(1, total // per_step)
    step_index = 0
    for epoch in range(config.epochs):
        losses = []
        for _ in range(steps):
            x, labels = _draw_batch(train_pool, writers, config.batch_writers, config.batch_patches, rng)
            try:
                loss, grads, _ = param_gradients(_from_dict(current), x, labels, config.margin)
            except NoValidTriplets:
                loss, grads = 0.0, None
            if grads is not None:
                current, state = adamax_step(state, current, grads)
            result.history.append((epoch, step_index, loss))
            losses.append(loss)
            step_index += 1
        mean = float(np.mean(losses))
        result.epoch_losses.append(mean)
        if val_batch is not None:
            result.val_losses.append(_safe_loss(_from_dict(current), *val_batch, config.margin))
        logger.info("epoch %d: mean loss %.6f", epoch, mean)
        if (config.early_stop_delta is not None and epoch > 0
                and result.epoch_losses[-2] - mean < config.early_stop_delta):
            logger.info("early stop after epoch %d", epoch)
            break
    result.params = _from_dict(current)
    return result


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "step", "loss"])
        for epoch, step, loss in history:
            writer.writerow([epoch, step, repr(float(loss))])
