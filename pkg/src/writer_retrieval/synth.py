"""Seeded synthetic writer corpora of Gaussian descriptor clusters.

Writer means are drawn from an isotropic Gaussian scaled so the expected
distance between two writer means is ``separation * sigma``; each descriptor
is its writer mean plus isotropic noise of standard deviation ``sigma``.
``sigma`` defaults to ``1/sqrt(dim)`` so the noise vector has unit expected
squared norm, the scale the default NetVLAD sharpness is tuned for.
"""

import numpy as np

from .descriptors import DescriptorSet
from .numerics import make_rng


def synth_corpus(writers=20, docs=4, descriptors=50, dim=64, separation=5.0, sigma=None, seed=42):
    rng = make_rng(seed)
    if sigma is None:
        sigma = 1.0 / np.sqrt(dim)
    spread = separation * sigma / np.sqrt(2.0 * dim)
    means = rng.standard_normal((writers, dim)) * spread
    out = []
    for w in range(writers):
        for d in range(docs):
            x = means[w] + sigma * rng.standard_normal((descriptors, dim))
            out.append(DescriptorSet(f"w{w:03d}_d{d}", f"w{w:03d}", x))
    return out


def group_by_writer(sets):
    """Concatenate descriptors of every document per writer."""
    groups = {}
    for s in sets:
        groups.setdefault(s.writer_id, []).append(s.descriptors)
    return {w: np.concatenate(v) for w, v in sorted(groups.items())}
