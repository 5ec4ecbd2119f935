"""Page images to contour-centred patches.

Pages are read from PGM (P2/P5), binarized with Otsu's threshold, and 32x32
windows are cut around ink pixels that touch the background.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import BadMagic, ImageTooSmall, MaxvalUnsupported, NoContour, Truncated

PATCH_SIZE = 32
_HALF = PATCH_SIZE // 2
PTCH_MAGIC = b"PTCH1\n"


@dataclass
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray  # uint8, shape (height, width)

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width):
            raise ValueError(f"pixel array {self.pixels.shape} != ({self.height}, {self.width})")


@dataclass
class PatchSet:
    doc_id: str
    writer_id: str
    patches: np.ndarray  # float64, shape (n, 32, 32), values in [0, 1]
    centers: list = field(default_factory=list)


def _header_tokens(data, count, pos):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise Truncated("PGM header ended early")
        if data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos


def load_pgm(data):
    """Decode a P2 or P5 PGM from bytes."""
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise BadMagic(f"expected P2 or P5, got {magic!r}")
    (w_tok, h_tok, max_tok), pos = _header_tokens(data, 3, 2)
    try:
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError as exc:
        raise Truncated(f"malformed PGM header: {exc}") from None
    if maxval > 255 or maxval < 1:
        raise MaxvalUnsupported(f"maxval {maxval} not in 1..255")
    count = width * height
    if magic == b"P5":
        pos += 1  # single whitespace byte before the raster
        raster = data[pos:pos + count]
        if len(raster) < count:
            raise Truncated(f"expected {count} pixels, found {len(raster)}")
        pixels = np.frombuffer(raster, dtype=np.uint8)
    else:
        values, _ = _header_tokens(data, count, pos) if count else ([], pos)
        pixels = np.array([int(v) for v in values], dtype=np.int64)
        if np.any(pixels > maxval) or np.any(pixels < 0):
            raise MaxvalUnsupported("pixel value outside 0..maxval")
        pixels = pixels.astype(np.uint8)
    return GrayImage(width, height, pixels.reshape(height, width).copy())


def write_pgm(img):
    """Encode as binary P5 with maxval 255."""
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def read_pgm_file(path):
    with open(path, "rb") as fh:
        return load_pgm(fh.read())


def otsu_threshold(img):
    """Otsu's threshold: ink is ``pixel < t``; ties resolve to the lowest ``t``.

    Between-class variance is compared exactly in integer arithmetic, using
    ``(S0*N - S*n0)**2 / (n0*n1)`` which is proportional to it.
    """
    total = int(img.pixels.size)
    if total == 0:
        raise ValueError("empty image")
    hist = np.bincount(img.pixels.ravel(), minlength=256).tolist()
    grand = sum(v * c for v, c in enumerate(hist))
    best_t, best_num, best_den = 0, 0, 1
    n0 = 0
    s0 = 0
    for t in range(256):
        # class 0 holds pixels strictly below t
        if t > 0:
            n0 += hist[t - 1]
            s0 += (t - 1) * hist[t - 1]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (s0 * total - grand * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def contour_pixels(img, threshold):
    """Ink pixels with at least one background 8-neighbour, sorted row-major.

    Pixels outside the image count as background. Returns (x, y) tuples.
    """
    mask = kernels.contour_mask(img.pixels, int(threshold))
    ys, xs = np.nonzero(mask)
    return [(int(x), int(y)) for y, x in zip(ys, xs)]


def _window_fits(x, y, width, height):
    return x - _HALF >= 0 and y - _HALF >= 0 and x + _HALF <= width and y + _HALF <= height


def extract_patches(img, stride=3, max_patches=None, rng=None, doc_id="", writer_id="",
                    threshold=None, invert=False):
    """Cut 32x32 windows centred on every ``stride``-th contour pixel.

    The window around (x, y) spans columns x-16..x+15 and rows y-16..y+15.
    Centres whose window leaves the image are dropped; if more than
    ``max_patches`` remain they are subsampled without replacement with ``rng``
    (kept in row-major order).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if img.width < PATCH_SIZE or img.height < PATCH_SIZE:
        raise ImageTooSmall(f"image {img.width}x{img.height} smaller than {PATCH_SIZE}x{PATCH_SIZE}")
    # light-on-dark pages are inverted for detection only
    probe = GrayImage(img.width, img.height, 255 - img.pixels) if invert else img
    if threshold is None:
        threshold = otsu_threshold(probe)
    contour = contour_pixels(probe, threshold)
    if not contour:
        raise NoContour(f"no contour pixels in {doc_id or 'image'}")
    centers = [c for c in contour[::stride] if _window_fits(c[0], c[1], img.width, img.height)]
    if max_patches and len(centers) > max_patches:
        if rng is None:
            raise ValueError("rng required for subsampling")
        keep = np.sort(rng.choice(len(centers), size=max_patches, replace=False))
        centers = [centers[i] for i in keep]
    scaled = img.pixels.astype(np.float64) / 255.0
    patches = np.empty((len(centers), PATCH_SIZE, PATCH_SIZE))
    for i, (x, y) in enumerate(centers):
        patches[i] = scaled[y - _HALF:y + _HALF, x - _HALF:x + _HALF]
    return PatchSet(doc_id, writer_id, patches, centers)


def write_ptch(path, patches):
    """PTCH1: magic, ``count width height`` line, then little-endian float32 pixels."""
    arr = np.asarray(patches, dtype="<f4")
    count = arr.shape[0]
    height, width = (arr.shape[1], arr.shape[2]) if arr.ndim == 3 else (PATCH_SIZE, PATCH_SIZE)
    with open(path, "wb") as fh:
        fh.write(PTCH_MAGIC)
        fh.write(f"{count} {width} {height}\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ptch(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(PTCH_MAGIC):
        raise BadMagic(f"{path}: not a PTCH1 file")
    end = data.find(b"\n", len(PTCH_MAGIC))
    if end < 0:
        raise Truncated(f"{path}: missing header line")
    try:
        count, width, height = (int(t) for t in data[len(PTCH_MAGIC):end].split())
    except ValueError:
        raise Truncated(f"{path}: malformed header") from None
    payload = data[end + 1:]
    need = count * width * height * 4
    if len(payload) < need:
        raise Truncated(f"{path}: expected {need} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload[:need], dtype="<f4").astype(np.float64)
    return arr.reshape(count, height, width)
