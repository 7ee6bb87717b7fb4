"""Image containers, synthetic scenes, grayscale I/O and quality metrics.

Images are stored as float64 arrays of shape (height, width) with intensities
nominally in [0, 1] and an isotropic pixel spacing.  Array indexing is
``values[iy, ix]`` while coordinates in formulas are (x, y) with x along
columns; the flat index used by sparse operators elsewhere in the package is
``iy * width + ix``.

File formats: binary PGM (P5, 8 or 16 bit) for both reading and writing, and
grayscale PNG for reading.  Writing always produces 16-bit PGM so that
round-tripping a synthetic scene loses at most half a quantization step;
images whose values leave [0, 1] (high-contrast scenes, unclamped noise) get
a ``# range lo hi`` header comment instead of being clipped, and the loader
undoes that mapping.
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple

import numpy as np
from scipy import ndimage


class PixelIndex(NamedTuple):
    """Grid position: ix is the column, iy the row."""

    ix: int
    iy: int


class Offset(NamedTuple):
    """Signed pixel displacement (dx, dy)."""

    dx: int
    dy: int


class ImageIOError(Exception):
    """Raised when an image file cannot be read or has an unsupported format."""


class ImageGrid:
    """A grayscale image on a regular grid with isotropic pixel spacing."""

    def __init__(self, values: np.ndarray, spacing: float = 1.0):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise ValueError("values must be a non-empty 2-d array, got shape %s"
                             % (values.shape,))
        if not np.all(np.isfinite(values)):
            raise ValueError("image values must be finite")
        if not (spacing > 0):
            raise ValueError("spacing must be positive, got %r" % (spacing,))
        self.values = values
        self.spacing = float(spacing)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def copy(self) -> "ImageGrid":
        return ImageGrid(self.values.copy(), self.spacing)

    def __repr__(self):
        return "ImageGrid(%dx%d, spacing=%g)" % (self.width, self.height,
                                                 self.spacing)


def _tokenize_pgm_header(data: bytes, path: str):
    """Return (tokens, raster_offset, comments) for a binary PGM header.

    Tokens are separated by whitespace; '#' starts a comment running to the
    end of the line.  Comment bodies are collected so callers can recognise
    the ``# range lo hi`` annotation written by :func:`save_image`.  Exactly
    one whitespace byte follows the maxval token before the raster begins.
    """
    tokens = []
    comments = []
    i = 0
    n = len(data)
    while len(tokens) < 4:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            start = i + 1
            while i < n and data[i:i + 1] != b"\n":
                i += 1
            comments.append(data[start:i])
            continue
        if i >= n:
            raise ImageIOError("%s: unexpected end of file in header" % path)
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        tokens.append(data[start:i])
    if i >= n:
        raise ImageIOError("%s: unexpected end of file after header" % path)
    i += 1  # single whitespace byte separating maxval from the raster
    return tokens, i, comments


def _parse_range_comment(comments, path: str):
    """Extract (lo, hi) from a ``range lo hi`` PGM comment, or (0, 1)."""
    lo, hi = 0.0, 1.0
    for raw in comments:
        parts = raw.split()
        if len(parts) != 3 or parts[0] != b"range":
            continue
        try:
            lo, hi = float(parts[1]), float(parts[2])
        except ValueError:
            raise ImageIOError("%s: malformed range comment %r"
                               % (path, raw.decode("ascii", "replace")))
        if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
            raise ImageIOError("%s: invalid range comment %r"
                               % (path, raw.decode("ascii", "replace")))
    return lo, hi


def _load_pgm(path: str) -> ImageGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"P2":
        raise ImageIOError("%s: ASCII PGM (P2) is not supported, use binary P5"
                           % path)
    if data[:2] != b"P5":
        raise ImageIOError("%s: not a binary PGM file (missing P5 magic)" % path)
    tokens, offset, comments = _tokenize_pgm_header(data, path)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageIOError("%s: malformed PGM header %r" % (path, tokens))
    if width <= 0 or height <= 0:
        raise ImageIOError("%s: invalid PGM dimensions %dx%d" % (path, width,
                                                                 height))
    if not 0 < maxval < 65536:
        raise ImageIOError("%s: invalid PGM maxval %d" % (path, maxval))
    lo, hi = _parse_range_comment(comments, path)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    raster = data[offset:offset + count * dtype.itemsize]
    if len(raster) < count * dtype.itemsize:
        raise ImageIOError("%s: unexpected end of file in raster" % path)
    values = np.frombuffer(raster, dtype=dtype).astype(np.float64)
    return ImageGrid(lo + values.reshape(height, width) * ((hi - lo) / maxval))


def _load_png(path: str) -> ImageGrid:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except Exception as exc:
        raise ImageIOError("%s: cannot read PNG (%s)" % (path, exc))
    if mode == "L":
        maxval = 255.0
    elif mode in ("I", "I;16"):
        # Pillow reports 16-bit grayscale PNG as mode I or I;16.
        maxval = 65535.0
    else:
        raise ImageIOError("%s: unsupported PNG mode %r, expected grayscale"
                           % (path, mode))
    return ImageGrid(arr.astype(np.float64) / maxval)


def load_image(path: str) -> ImageGrid:
    """Load a grayscale image (binary PGM or grayscale PNG).

    Plain files map to [0, 1]; PGMs carrying a ``# range lo hi`` comment
    (written by :func:`save_image` for out-of-range data) map to [lo, hi].
    """
    name = str(path).lower()
    if name.endswith(".png"):
        return _load_png(str(path))
    return _load_pgm(str(path))


def save_image(img: ImageGrid, path: str) -> None:
    """Write a 16-bit binary PGM without losing out-of-range intensities.

    Values inside [0, 1] are stored conventionally (0 -> 0, 1 -> 65535).
    When the image has values outside [0, 1] the quantisation window is
    widened to cover them and recorded in a ``# range lo hi`` header comment
    that :func:`load_image` reads back, so synthetic scenes and noisy data
    with arbitrary intensity ranges round-trip up to 16-bit quantisation
    instead of being clipped.
    """
    vals = img.values
    lo = min(0.0, float(vals.min()))
    hi = max(1.0, float(vals.max()))
    if (lo, hi) == (0.0, 1.0):
        header = b"P5\n%d %d\n65535\n" % (img.width, img.height)
    else:
        header = b"P5\n# range %.17g %.17g\n%d %d\n65535\n" % (
            lo, hi, img.width, img.height)
    quant = np.rint((vals - lo) * (65535.0 / (hi - lo))).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quant.tobytes())


@dataclasses.dataclass
class NoiseSpec:
    """Additive Gaussian noise: standard deviation and RNG seed."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative, got %r" % (self.sigma,))


def add_gaussian_noise(img: ImageGrid, spec: NoiseSpec) -> ImageGrid:
    """Add seeded i.i.d. Gaussian noise.  Values are not clamped afterwards."""
    if spec.sigma == 0:
        return img.copy()
    rng = np.random.default_rng(spec.seed)
    noisy = img.values + rng.normal(0.0, spec.sigma, size=img.values.shape)
    return ImageGrid(noisy, img.spacing)


def make_disc_slope(n: int, radius: float, base: float, slope: float,
                    jump: float, spacing: float = 1.0) -> ImageGrid:
    """Disc on a flat background, with a linear ramp along +x inside the disc.

    Outside the disc the value is ``base``; inside it is
    ``base + jump + slope * (x - n/2)``.  The membership test is strict
    (distance to center < radius) so the boundary is a clean 1-pixel jump.
    """
    if n < 8:
        raise ValueError("n must be at least 8, got %d" % n)
    if not 0 < radius < n / 2:
        raise ValueError("radius must lie in (0, n/2), got %r" % (radius,))
    ix, iy = np.meshgrid(np.arange(n), np.arange(n))
    inside = (ix - n / 2) ** 2 + (iy - n / 2) ** 2 < radius ** 2
    values = np.full((n, n), base, dtype=np.float64)
    values[inside] = base + jump + slope * (ix[inside] - n / 2)
    return ImageGrid(values, spacing)


def make_opposing_slopes(n: int, spacing: float = 1.0) -> ImageGrid:
    """Two linear ramps of slope 1/n rising toward a ridge at mid-width.

    Column x carries value x/n on the left half and (n-1-x)/n on the right,
    constant along y.  The second x-difference is zero everywhere except the
    two columns where the ramps meet.
    """
    if n < 8:
        raise ValueError("n must be at least 8, got %d" % n)
    ix = np.arange(n, dtype=np.float64)
    row = np.where(ix < n / 2, ix / n, (n - 1 - ix) / n)
    return ImageGrid(np.tile(row, (n, 1)), spacing)


def central_gradient(img: ImageGrid) -> np.ndarray:
    """Central-difference gradient, one-sided at the border.

    Returns an array of shape (height, width, 2) with components (du/dx,
    du/dy).  Exact for affine images including the border rows and columns.
    """
    if img.width < 3 or img.height < 3:
        raise ValueError("gradient needs at least a 3x3 image, got %dx%d"
                         % (img.width, img.height))
    gy, gx = np.gradient(img.values, img.spacing)
    return np.stack([gx, gy], axis=-1)


def _check_same_shape(a: ImageGrid, b: ImageGrid) -> None:
    if a.values.shape != b.values.shape:
        raise ValueError("image dimensions differ: %s vs %s"
                         % (a.values.shape, b.values.shape))


def psnr(a: ImageGrid, b: ImageGrid, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; inf for identical images."""
    _check_same_shape(a, b)
    mse = float(np.mean((a.values - b.values) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(data_range ** 2 / mse)


def _ssim_window() -> np.ndarray:
    # 11x11 Gaussian, sigma 1.5, normalized to unit sum.
    offsets = np.arange(11) - 5
    g = np.exp(-offsets ** 2 / (2.0 * 1.5 ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: ImageGrid, b: ImageGrid, data_range: float = 1.0) -> float:
    """Mean structural similarity with the standard 11x11 Gaussian window.

    Windowed moments are computed with reflect-padded correlation and the
    mean is taken over the interior where the window fits entirely, so border
    padding never influences the score.
    """
    _check_same_shape(a, b)
    if a.width < 11 or a.height < 11:
        raise ValueError("ssim needs at least 11x11 images, got %dx%d"
                         % (a.width, a.height))
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = _ssim_window()

    def windowed(x):
        return ndimage.correlate(x, win, mode="reflect")

    x, y = a.values, b.values
    mu_x = windowed(x)
    mu_y = windowed(y)
    var_x = windowed(x * x) - mu_x ** 2
    var_y = windowed(y * y) - mu_y ** 2
    cov = windowed(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    ssim_map = num / den
    return float(np.mean(ssim_map[5:-5, 5:-5]))
