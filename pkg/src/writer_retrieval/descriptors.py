"""Local descriptors per patch and the DESC1 file format.

The stand-in extractor flattens each 32x32 patch, removes its mean and applies
a seeded orthonormal projection to ``dim`` components. Descriptors produced by
any other model can be supplied as DESC1 files instead.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import BadMagic, DimMismatch, Truncated
from .numerics import make_rng

DEFAULT_DIM = 64
DESC_MAGIC = b"DESC1\n"


@dataclass
class DescriptorSet:
    doc_id: str
    writer_id: str
    descriptors: np.ndarray  # float64, shape (n, dim)

    @property
    def dim(self):
        return self.descriptors.shape[1]

    def __len__(self):
        return self.descriptors.shape[0]


def projection_matrix(in_dim, out_dim, seed):
    """Rows of a seeded Gaussian matrix, orthonormalized by modified Gram-Schmidt.

    Each row is orthogonalized twice against its predecessors, which keeps
    ``P @ P.T`` at identity to ~1e-15.
    """
    if out_dim > in_dim:
        raise ValueError(f"cannot project {in_dim} dims onto {out_dim} orthonormal rows")
    rows = make_rng(seed).standard_normal((out_dim, in_dim))
    for i in range(out_dim):
        v = rows[i]
        for _ in range(2):
            for j in range(i):
                v = v - (rows[j] @ v) * rows[j]
        rows[i] = v / np.linalg.norm(v)
    return rows


@lru_cache(maxsize=8)
def _cached_projection(in_dim, out_dim, seed):
    proj = projection_matrix(in_dim, out_dim, seed)
    proj.setflags(write=False)
    return proj


def project_patches(patches, proj_seed=0, dim=DEFAULT_DIM):
    """Turn a PatchSet into a DescriptorSet with the seeded projection."""
    flat = np.asarray(patches.patches, dtype=np.float64).reshape(len(patches.patches), -1)
    if flat.shape[0] == 0:
        raise ValueError("empty patch set")
    flat = flat - flat.mean(axis=1, keepdims=True)
    proj = _cached_projection(flat.shape[1], dim, proj_seed)
    return DescriptorSet(patches.doc_id, patches.writer_id, flat @ proj.T)


def check_common_dim(sets):
    """Every set in a corpus must share one descriptor width."""
    dims = {s.dim for s in sets}
    if len(dims) > 1:
        raise DimMismatch(f"descriptor widths differ across corpus: {sorted(dims)}")
    return dims.pop() if dims else None


def write_desc(path, dset):
    for ident in (dset.doc_id, dset.writer_id):
        if not ident or any(ch.isspace() for ch in ident):
            raise ValueError(f"identifier {ident!r} must be non-empty without whitespace")
    arr = np.asarray(dset.descriptors, dtype="<f4")
    n, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(DESC_MAGIC)
        fh.write(f"{dset.doc_id} {dset.writer_id} {n} {d}\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_desc(path, expected_dim=None):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(DESC_MAGIC):
        raise BadMagic(f"{path}: not a DESC1 file")
    end = data.find(b"\n", len(DESC_MAGIC))
    if end < 0:
        raise Truncated(f"{path}: missing header line")
    fields = data[len(DESC_MAGIC):end].decode("ascii").split()
    if len(fields) != 4:
        raise Truncated(f"{path}: malformed header {fields!r}")
    doc_id, writer_id = fields[0], fields[1]
    n, d = int(fields[2]), int(fields[3])
    if expected_dim is not None and d != expected_dim:
        raise DimMismatch(f"{path}: descriptor width {d}, expected {expected_dim}")
    payload = data[end + 1:]
    need = n * d * 4
    if len(payload) < need:
        raise Truncated(f"{path}: header declares {n}x{d} but payload holds {len(payload) // 4} floats")
    if len(payload) > need:
        raise DimMismatch(f"{path}: payload larger than declared {n}x{d}")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n, d)
    return DescriptorSet(doc_id, writer_id, arr)
