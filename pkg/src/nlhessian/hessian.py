"""Explicit and implicit non-local Hessian operators.

Explicit form (dimension N=2 throughout, prefactor N(N+2)/2 = 4):

    H u(x) = 4 * integral of  [u(x+h) - 2u(x) + u(x-h)] / |h|^2
             * (h (x) h - |h|^2/4 I) / |h|^2 * rho(h) dh,

discretized by midpoint quadrature on the offset lattice with the h=0 cell
excluded.  The matching second-order divergence contracts a symmetric matrix
field with the same kernel, so the discrete integration-by-parts identity
<H u, phi> = <u, D2 phi> holds exactly (up to rounding) for compactly
supported fields.

Implicit form: around each pixel, the weighted least-squares fit of a
quadratic model to the differences u(x+z) - u(x) over its neighborhood.  The
fit is linear in u, so it assembles into one sparse operator mapping u to
the stacked Hessian components.  On circles the fit has a closed form (a
weighted second-difference integral with the sphere constants below), which
is checked numerically elsewhere.

Sphere constants: C_ij = integral over S^{N-1} of nu_i^2 nu_j^2, equal to
|S^{N-1}| / (N(N+2)) off the diagonal and three times that on it.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import ndimage, signal, sparse

from .grid import ImageGrid
from .eikonal import NeighborhoodWeights

_CONDITION_LIMIT = 1e8

# ---------------------------------------------------------------------------
# mollifiers


def _disc_coverage(hx, hy, r):
    """Fraction of each unit cell centered at (hx, hy) inside the disc |p|<=r.

    Cells crossing the disc boundary are resolved by 32x32 midpoint
    subsampling; the subsample grid is symmetric under negation, so the
    coverage inherits the radial profile's evenness exactly.
    """
    d = np.hypot(hx, hy)
    half_diag = math.sqrt(0.5)
    frac = np.where(d <= r - half_diag, 1.0, 0.0)
    boundary = (d > r - half_diag) & (d < r + half_diag)
    if np.any(boundary):
        sub = (np.arange(32) + 0.5) / 32 - 0.5
        sx, sy = np.meshgrid(sub, sub)
        px = hx[boundary][:, None] + sx.ravel()[None, :]
        py = hy[boundary][:, None] + sy.ravel()[None, :]
        frac[boundary] = np.mean(px * px + py * py <= r * r, axis=1)
    return frac


@dataclasses.dataclass(frozen=True)
class MollifierFamily:
    """Radial weight rho_delta: ball, (truncated) gaussian, or annulus.

    delta is the scale in physical length units.  Discretization happens
    against a pixel spacing: cell values are normalized so the discrete mass
    sum(rho) * spacing^2 equals 1 exactly, with the h=0 cell included in the
    normalization (operators skip it; the integrand is bounded there, so the
    omission is O(spacing^2)).
    """

    kind: str
    delta: float

    def __post_init__(self):
        if self.kind not in ("ball", "gaussian", "annulus"):
            raise ValueError("unknown mollifier kind %r" % (self.kind,))
        if not self.delta > 0:
            raise ValueError("delta must be positive, got %r" % (self.delta,))

    def weights(self, spacing: float = 1.0):
        """Discrete cell weights: (offsets (K,2) ints, rho (K,), rho0).

        offsets are lattice offsets (hx, hy) in cells, excluding the origin;
        rho0 is the origin cell's value.  Ball and annulus profiles use the
        per-cell area fraction (anything else aliases the sharp edge at
        coarse delta); the smooth gaussian is point-sampled and truncated at
        4 delta.
        """
        if self.delta < spacing:
            raise ValueError("mollifier under-resolved: delta %g below pixel "
                             "spacing %g" % (self.delta, spacing))
        r = self.delta / spacing
        reach = int(math.ceil(4 * r if self.kind == "gaussian" else r + 0.8))
        hx, hy = np.meshgrid(np.arange(-reach, reach + 1),
                             np.arange(-reach, reach + 1))
        hx = hx.ravel().astype(np.float64)
        hy = hy.ravel().astype(np.float64)
        if self.kind == "gaussian":
            d2 = hx * hx + hy * hy
            w = np.where(d2 <= (4 * r) ** 2, np.exp(-d2 / (2 * r * r)), 0.0)
        elif self.kind == "ball":
            w = _disc_coverage(hx, hy, r)
        else:
            w = _disc_coverage(hx, hy, r) - _disc_coverage(hx, hy, r / 2)
        w /= w.sum() * spacing * spacing
        origin = (hx == 0) & (hy == 0)
        keep = (w > 0) & ~origin
        offsets = np.stack([hx[keep], hy[keep]], axis=1).astype(np.int64)
        return offsets, w[keep], float(w[origin][0])

    def mass_outside(self, radius: float, spacing: float = 1.0) -> float:
        """Discrete mass beyond the given physical radius."""
        offsets, rho, _ = self.weights(spacing)
        d = np.hypot(offsets[:, 0], offsets[:, 1]) * spacing
        return float(np.sum(rho[d > radius]) * spacing * spacing)


_FFT_TAPS = 512  # antipodal pairs above which dense FFT convolution wins


def _kernel_coefficients(offsets, rho):
    """Per-offset scalar weights for (hxx, hxy, hyy), antipodally folded.

    Returns (half_offsets, (cxx, cxy, cyy)) such that for any image,
    component_ij(x) = sum over half offsets of c_ij * [u(x+h)-2u(x)+u(x-h)].
    The pixel spacing cancels: rho carries 1/spacing^2 from normalization
    and the kernel (h_i h_j - |h|^2/4 delta_ij)/|h|^4 carries the rest.
    """
    hx = offsets[:, 0].astype(np.float64)
    hy = offsets[:, 1].astype(np.float64)
    half = (hy > 0) | ((hy == 0) & (hx > 0))
    hx, hy, w = hx[half], hy[half], rho[half]
    q = hx * hx + hy * hy
    base = 4.0 * (2.0 * w) / (q * q)  # factor 2: antipodal partner folded in
    cxx = base * (hx * hx - 0.25 * q)
    cxy = base * (hx * hy)
    cyy = base * (hy * hy - 0.25 * q)
    return offsets[half], (cxx, cxy, cyy)


def _component_kernels(offsets, rho):
    """Dense even convolution kernels for (hxx, hxy, hyy), plus their reach.

    The tap at offset h is 8 rho(h) (h_i h_j - |h|^2/4 delta_ij)/|h|^4 (the
    paired second difference touches u(x+h) through both its h and -h terms),
    and the origin tap is minus the sum of the rest, so every kernel
    annihilates constants and is symmetric under h -> -h.
    """
    reach = int(np.max(np.abs(offsets)))
    size = 2 * reach + 1
    kernels = np.zeros((3, size, size))
    hx = offsets[:, 0].astype(np.float64)
    hy = offsets[:, 1].astype(np.float64)
    q = hx * hx + hy * hy
    base = 8.0 * rho / (q * q)
    rows = reach + offsets[:, 1]
    cols = reach + offsets[:, 0]
    kernels[0, rows, cols] = base * (hx * hx - 0.25 * q)
    kernels[1, rows, cols] = base * (hx * hy)
    kernels[2, rows, cols] = base * (hy * hy - 0.25 * q)
    kernels[:, reach, reach] = -kernels.reshape(3, -1).sum(axis=1)
    return kernels, reach


def explicit_nl_hessian(u: ImageGrid, rho: MollifierFamily) -> np.ndarray:
    """Mollifier-weighted second-difference Hessian field, shape (H, W, 3).

    u is extended by even reflection so all offsets stay defined; the
    component order is (hxx, hxy, hyy).  Small mollifier footprints are summed
    directly as paired second differences (exact zeros on constants); large
    ones go through FFT convolution, which agrees to rounding rather than
    exactly.
    """
    offsets, weights, _ = rho.weights(u.spacing)
    half, coefs = _kernel_coefficients(offsets, weights)
    height, width = u.values.shape
    out = np.zeros((height, width, 3))
    if half.shape[0] > _FFT_TAPS:
        kernels, reach = _component_kernels(offsets, weights)
        padded = np.pad(u.values, reach, mode="symmetric")
        for c in range(3):
            out[:, :, c] = signal.fftconvolve(padded, kernels[c], mode="valid")
        return out
    reach = int(np.max(np.abs(half)))
    padded = np.pad(u.values, reach, mode="symmetric")
    base = u.values
    for k in range(half.shape[0]):
        dx, dy = int(half[k, 0]), int(half[k, 1])
        plus = padded[reach + dy:reach + dy + height,
                      reach + dx:reach + dx + width]
        minus = padded[reach - dy:reach - dy + height,
                       reach - dx:reach - dx + width]
        sd2 = plus + minus - 2.0 * base
        for c in range(3):
            out[:, :, c] += coefs[c][k] * sd2
    return out


def nl_divergence2(phi: np.ndarray, rho: MollifierFamily,
                   spacing: float = 1.0) -> ImageGrid:
    """Second-order non-local divergence of a symmetric matrix field.

    phi has shape (H, W, 3) in (xx, xy, yy) order; the contraction counts
    the off-diagonal component twice, making this operator the exact
    discrete adjoint of explicit_nl_hessian for fields supported away from
    the border (it uses the same direct/FFT split, so the two sides of the
    pairing always go through matching arithmetic).
    """
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 3 or phi.shape[2] != 3:
        raise ValueError("phi must have shape (H, W, 3), got %s" % (phi.shape,))
    offsets, weights, _ = rho.weights(spacing)
    half, (cxx, cxy, cyy) = _kernel_coefficients(offsets, weights)
    height, width = phi.shape[:2]
    if half.shape[0] > _FFT_TAPS:
        kernels, reach = _component_kernels(offsets, weights)
        out = np.zeros((height, width))
        for c, mult in enumerate((1.0, 2.0, 1.0)):
            padded = np.pad(phi[:, :, c], reach, mode="symmetric")
            out += mult * signal.fftconvolve(padded, kernels[c], mode="valid")
        return ImageGrid(out, spacing)
    reach = int(np.max(np.abs(half)))
    out = np.zeros((height, width))
    for k in range(half.shape[0]):
        dx, dy = int(half[k, 0]), int(half[k, 1])
        contracted = (cxx[k] * phi[:, :, 0] + 2.0 * cxy[k] * phi[:, :, 1]
                      + cyy[k] * phi[:, :, 2])
        padded = np.pad(contracted, reach, mode="symmetric")
        plus = padded[reach + dy:reach + dy + height,
                      reach + dx:reach + dx + width]
        minus = padded[reach - dy:reach - dy + height,
                       reach - dx:reach - dx + width]
        out += plus + minus - 2.0 * contracted
    return ImageGrid(out, spacing)


# ---------------------------------------------------------------------------
# sphere constants and the circle closed form


@dataclasses.dataclass(frozen=True)
class SphereConstants:
    """Fourth moments of coordinates over the unit sphere S^{N-1}."""

    N: int
    C_offdiag: float
    C_diag: float

    def __str__(self):
        return ("SphereConstants(N=%d, C_offdiag=%.15g, C_diag=%.15g)"
                % (self.N, self.C_offdiag, self.C_diag))


_SPHERE_AREA = {1: 2.0, 2: 2.0 * math.pi, 3: 4.0 * math.pi}


def sphere_constants(n: int) -> SphereConstants:
    """Closed-form C_offdiag = |S^{N-1}|/(N(N+2)) and C_diag = 3 C_offdiag."""
    if n not in _SPHERE_AREA:
        raise ValueError("unsupported dimension %r, expected 1, 2 or 3" % (n,))
    c12 = _SPHERE_AREA[n] / (n * (n + 2))
    return SphereConstants(N=n, C_offdiag=c12, C_diag=3.0 * c12)


def implicit_on_circle(u, x, h: float, samples: int) -> np.ndarray:
    """Closed-form non-local Hessian of the circle-restricted fit.

    Evaluates  (1 / (2 C12)) * h^{-1} * integral over the circle of radius h
    of [u(x+z) - 2u(x) + u(x-z)]/|z|^2 * (z z^T/|z|^2 - I/4) dH^1  by
    trapezoidal quadrature with uniformly spaced samples.  u may be an
    ImageGrid (bilinear interpolation off lattice, x a pixel index) or a
    callable u(xs, ys) evaluated exactly (x then holds coordinates).
    Returns the symmetric 2x2 matrix.
    """
    if samples < 8:
        raise ValueError("need at least 8 circle samples, got %d" % (samples,))
    if not h > 0:
        raise ValueError("circle radius must be positive, got %r" % (h,))
    theta = 2.0 * math.pi * np.arange(samples) / samples
    nx, ny = np.cos(theta), np.sin(theta)
    if isinstance(u, ImageGrid):
        ix, iy = x
        cx, cy = ix * u.spacing, iy * u.spacing
        px, py = cx + h * nx, cy + h * ny
        qx, qy = cx - h * nx, cy - h * ny
        cols = np.concatenate([px, qx]) / u.spacing
        rows = np.concatenate([py, qy]) / u.spacing
        if (cols.min() < 0 or cols.max() > u.width - 1
                or rows.min() < 0 or rows.max() > u.height - 1):
            raise ValueError("circle of radius %g at pixel (%d, %d) exits "
                             "the grid" % (h, ix, iy))
        vals = ndimage.map_coordinates(u.values, [rows, cols], order=1)
        v_plus, v_minus = vals[:samples], vals[samples:]
        u0 = u.values[iy, ix]
    else:
        cx, cy = x
        v_plus = np.asarray(u(cx + h * nx, cy + h * ny), dtype=np.float64)
        v_minus = np.asarray(u(cx - h * nx, cy - h * ny), dtype=np.float64)
        u0 = float(u(np.array([cx]), np.array([cy]))[0])
    sd2 = v_plus + v_minus - 2.0 * u0
    c12 = sphere_constants(2).C_offdiag
    # 0.5/C12 * (2 pi h / samples) / h^3, the h powers from h^{-1} sd2/|z|^2
    pref = 0.5 / c12 * 2.0 * math.pi / (samples * h * h)
    hxx = pref * np.sum(sd2 * (nx * nx - 0.25))
    hxy = pref * np.sum(sd2 * (nx * ny))
    hyy = pref * np.sum(sd2 * (ny * ny - 0.25))
    return np.array([[hxx, hxy], [hxy, hyy]])


# ---------------------------------------------------------------------------
# implicit fits and operator assembly


@dataclasses.dataclass
class QuadraticFit:
    """Weighted least-squares quadratic model around one pixel.

    G is the non-local gradient (2,), H the non-local Hessian stored as
    (hxx, hxy, hyy); residual is the half-squared data misfit; condition
    estimates the (pre-ridge) normal matrix conditioning.
    """

    G: np.ndarray
    H: np.ndarray
    residual: float
    condition: float


def _neighbor_geometry(nbhd: NeighborhoodWeights, pixels: np.ndarray):
    """Physical offsets z (B,K,2), weights sigma (B,K), validity (B,K)."""
    width = nbhd.shape[1]
    idx = nbhd.nbr_idx[pixels]
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    ny, nx = np.divmod(safe, width)
    cy, cx = np.divmod(pixels[:, None], width)
    z = np.stack([(nx - cx) * nbhd.spacing, (ny - cy) * nbhd.spacing], axis=-1)
    z = np.where(valid[..., None], z, 1.0)  # dummy geometry, weight zeroed
    sigma = np.where(valid, nbhd.nbr_weight[pixels], 0.0)
    return z, sigma, valid


def _fit_projectors(z, sigma, ridge):
    """Solve the weighted normal equations for a batch of neighborhoods.

    Returns (P, cond, ridged): P has shape (B, 5, K) and maps differences d
    to coefficients (g1, g2, hxx, hxy, hyy); ridge * identity is added to the
    normal matrix only where its condition estimate exceeds 1e8 (with the
    trace-scaled default when ridge is None).
    """
    z1, z2 = z[..., 0], z[..., 1]
    design = np.stack([z1, z2, 0.5 * z1 * z1, z1 * z2, 0.5 * z2 * z2], axis=-1)
    weighted = design * sigma[..., None]
    at_sigma = weighted.transpose(0, 2, 1)  # (B, 5, K)
    normal = at_sigma @ design
    cond = np.linalg.cond(normal)
    ridged = ~(cond <= _CONDITION_LIMIT)  # catches inf and nan
    if np.any(ridged):
        if ridge is None:
            lam = 1e-8 * np.trace(normal, axis1=1, axis2=2) / 5.0
        else:
            lam = np.full(normal.shape[0], float(ridge))
        bump = np.where(ridged, lam, 0.0)
        normal = normal + bump[:, None, None] * np.eye(5)
    p = np.linalg.solve(normal, at_sigma)
    return design, p, cond, ridged


def fit_quadratic(u: ImageGrid, x, nbhd: NeighborhoodWeights,
                  ridge: float | None = None) -> QuadraticFit:
    """Fit the quadratic model to u around pixel x over its neighborhood."""
    if u.values.shape != tuple(nbhd.shape):
        raise ValueError("image shape %s does not match neighborhoods %s"
                         % (u.values.shape, tuple(nbhd.shape)))
    ix, iy = x
    pixel = np.array([iy * u.width + ix])
    z, sigma, valid = _neighbor_geometry(nbhd, pixel)
    if not np.any(sigma > 0):
        raise ValueError("empty neighborhood at pixel (%d, %d)" % (ix, iy))
    flat = u.values.ravel()
    d = np.where(valid, flat[np.where(valid, nbhd.nbr_idx[pixel], 0)]
                 - flat[pixel][:, None], 0.0)
    design, p, cond, _ = _fit_projectors(z, sigma, ridge)
    coef = (p @ d[..., None])[0, :, 0]
    misfit = d[0] - design[0] @ coef
    residual = 0.5 * float(np.sum(sigma[0] * misfit * misfit))
    return QuadraticFit(G=coef[:2], H=coef[2:], residual=residual,
                        condition=float(cond[0]))


@dataclasses.dataclass
class NlHessianOperator:
    """Sparse pre-solved non-local Hessian H'_u = W u.

    rows maps a flat image (length N) to interleaved Hessian components
    (hxx, hxy, hyy per pixel, length 3N); gradient_rows likewise to (gx, gy)
    (length 2N, assembled for free by the same fit, not used by the energy).
    omega holds the local weights baked into the Hessian rows, if any.
    """

    rows: sparse.csr_matrix
    gradient_rows: sparse.csr_matrix
    omega: np.ndarray | None
    shape: tuple
    m: int

    @property
    def n_pix(self) -> int:
        return self.shape[0] * self.shape[1]

    def hessian(self, u) -> np.ndarray:
        """Apply to an ImageGrid or flat/2-d array; returns (N, 3)."""
        values = u.values if isinstance(u, ImageGrid) else np.asarray(u)
        return (self.rows @ values.ravel()).reshape(-1, 3)

    def gradient(self, u) -> np.ndarray:
        values = u.values if isinstance(u, ImageGrid) else np.asarray(u)
        return (self.gradient_rows @ values.ravel()).reshape(-1, 2)

    def dump_coo(self, fileobj) -> None:
        """Write the Hessian rows as text triplets "row col value"."""
        coo = self.rows.tocoo()
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fileobj.write("%d %d %.17g\n" % (r, c, v))


def assemble_operator(g_weights: NeighborhoodWeights,
                      omega: np.ndarray | None = None,
                      ridge: float | None = None) -> NlHessianOperator:
    """Pre-solve every pixel's fit into one sparse operator.

    Each pixel contributes three Hessian rows (and two gradient rows) whose
    neighbor coefficients come from the fit projector; the center coefficient
    is minus their sum, so rows annihilate constants by construction.  omega,
    when given, scales each pixel's Hessian rows.
    """
    height, width = g_weights.shape
    n_pix = height * width
    pixels = np.arange(n_pix)
    z, sigma, valid = _neighbor_geometry(g_weights, pixels)
    covered = np.any(sigma > 0, axis=1)
    if not np.all(covered):
        bad = int(np.argmin(covered))
        raise ValueError("empty neighborhood at pixel (%d, %d)"
                         % (bad % width, bad // width))
    _, p, _, _ = _fit_projectors(z, sigma, ridge)

    k = g_weights.m
    cols = np.concatenate([np.where(valid, g_weights.nbr_idx, 0),
                           pixels[:, None]], axis=1)  # (N, K+1)
    keep = np.concatenate([valid, np.ones((n_pix, 1), dtype=bool)], axis=1)

    def rows_for(components, scale):
        n_comp = len(components)
        data = np.empty((n_pix, n_comp, k + 1))
        for j, comp in enumerate(components):
            coeff = p[:, comp, :]
            data[:, j, :k] = coeff
            data[:, j, k] = -coeff.sum(axis=1)
        if scale is not None:
            data *= np.asarray(scale)[:, None, None]
        row_idx = (n_comp * pixels[:, None, None]
                   + np.arange(n_comp)[None, :, None])
        row_idx = np.broadcast_to(row_idx, data.shape)
        col_idx = np.broadcast_to(cols[:, None, :], data.shape)
        mask = np.broadcast_to(keep[:, None, :], data.shape)
        mat = sparse.coo_matrix(
            (data[mask], (row_idx[mask], col_idx[mask])),
            shape=(n_comp * n_pix, n_pix))
        return mat.tocsr()

    hess = rows_for((2, 3, 4), omega)
    grad = rows_for((0, 1), None)
    return NlHessianOperator(rows=hess, gradient_rows=grad,
                             omega=None if omega is None else np.asarray(omega),
                             shape=(height, width), m=g_weights.m)
