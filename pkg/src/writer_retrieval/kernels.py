"""Backend selection for the hot kernels.

The compiled extension is preferred when it imports; otherwise the numpy
fallback is used. Setting ``WRITER_RETRIEVAL_KERNELS=python`` forces the
fallback at import; ``use_backend`` switches explicitly (tests, benchmarks).
"""

import logging
import os

from . import _pykernels

logger = logging.getLogger(__name__)

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _pykernels}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_active = _compiled if _compiled is not None else _pykernels
if os.environ.get("WRITER_RETRIEVAL_KERNELS") == "python":
    _active = _pykernels


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return "compiled" if _active is _compiled and _compiled is not None else "python"


def use_backend(name):
    """Select ``"compiled"`` or ``"python"``; returns the previous name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}")
    previous = backend_name()
    _active = _BACKENDS[name]
    logger.debug("kernel backend set to %s", name)
    return previous


def contour_mask(pixels, threshold):
    return _active.contour_mask(pixels, threshold)


def jacobi_eigh(a, schedule, max_sweeps):
    return _active.jacobi_eigh(a, schedule, max_sweeps)


def cholesky_solve(a, b):
    return _active.cholesky_solve(a, b)


def netvlad_forward(centers, weights, biases, x):
    return _active.netvlad_forward(centers, weights, biases, x)


def netvlad_backward(centers, weights, biases, x, assign, emb, norms, upstream):
    return _active.netvlad_backward(centers, weights, biases, x, assign, emb, norms, upstream)


def mine_triplets(dist, labels, margin):
    return _active.mine_triplets(dist, labels, margin)
