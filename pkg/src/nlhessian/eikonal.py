"""Geodesic distances and neighborhood weights via fast marching.

The image induces a Riemannian metric through the slowness field

    phi(x) = |grad g(x)|^2 + gamma,      gamma > 0,

so paths crossing strong edges are expensive and geodesic balls hug the
structures of g.  Distances c solve the eikonal equation |grad c| = phi with
c(source) = 0, discretized with the standard first-order upwind scheme on the
4-connected grid and marched with a binary heap (lazy deletion).  The
geodesic distance from x to y is c(y).  Ties on the heap are broken by flat
pixel index, so acceptance order is deterministic.

For every pixel x the M geodesically nearest other pixels form its
neighborhood.  A pixel referenced by few neighborhoods is suspicious (e.g. an
isolated outlier), which the local weight

    omega(x) = M / #{y : x in {y} union N(y)}

turns into a larger penalty on its own Hessian fit.
"""

from __future__ import annotations

import dataclasses
import heapq
import math

import numpy as np

from .grid import ImageGrid, central_gradient


@dataclasses.dataclass
class MetricField:
    """Slowness field of the image-induced metric, |grad g|^2 + gamma."""

    slowness: np.ndarray
    gamma: float
    spacing: float = 1.0

    def __post_init__(self):
        self.slowness = np.asarray(self.slowness, dtype=np.float64)
        if self.slowness.ndim != 2:
            raise ValueError("slowness must be 2-d, got shape %s"
                             % (self.slowness.shape,))
        if not self.gamma > 0:
            raise ValueError("gamma must be positive, got %r" % (self.gamma,))
        if not np.all(np.isfinite(self.slowness)) \
                or np.any(self.slowness < self.gamma):
            raise ValueError("slowness must be finite and >= gamma everywhere")

    @property
    def shape(self) -> tuple:
        return self.slowness.shape


def build_metric(g: ImageGrid, gamma: float) -> MetricField:
    """Slowness field |grad g|^2 + gamma from central differences."""
    if not gamma > 0:
        raise ValueError("gamma must be positive, got %r" % (gamma,))
    grad = central_gradient(g)
    slowness = grad[..., 0] ** 2 + grad[..., 1] ** 2 + gamma
    return MetricField(slowness, gamma, g.spacing)


class _MarchWorkspace:
    """Reusable distance/state buffers, invalidated by a version stamp.

    Building neighborhoods runs one short march per pixel; re-zeroing full
    arrays every run would dominate the cost, so stale entries are detected
    by comparing their stamp against the current run id instead.
    """

    def __init__(self, n_pix: int):
        self.dist = np.empty(n_pix, dtype=np.float64)
        self.accepted = np.empty(n_pix, dtype=bool)
        self.stamp = np.zeros(n_pix, dtype=np.int64)
        self.run = 0

    def begin(self):
        self.run += 1
        return self.run


def _march(slowness_flat, height, width, spacing, source_idx, stop_count,
           ws: _MarchWorkspace):
    """Upwind fast marching from one source; returns accepted flat indices.

    Distances of accepted pixels are left in ws.dist (valid where
    ws.stamp == run).  stop_count limits the number of acceptances,
    the source itself included.
    """
    run = ws.begin()
    dist, accepted, stamp = ws.dist, ws.accepted, ws.stamp
    dist[source_idx] = 0.0
    accepted[source_idx] = False
    stamp[source_idx] = run
    heap = [(0.0, source_idx)]
    order = []
    n_pix = height * width
    limit = n_pix if stop_count is None else min(stop_count, n_pix)

    def relax(nidx, niy, nix):
        # smallest accepted value per axis around the pixel being updated
        a = math.inf
        if nix > 0 and stamp[nidx - 1] == run and accepted[nidx - 1]:
            a = dist[nidx - 1]
        if nix < width - 1 and stamp[nidx + 1] == run and accepted[nidx + 1]:
            a = min(a, dist[nidx + 1])
        b = math.inf
        if niy > 0 and stamp[nidx - width] == run and accepted[nidx - width]:
            b = dist[nidx - width]
        if niy < height - 1 and stamp[nidx + width] == run \
                and accepted[nidx + width]:
            b = min(b, dist[nidx + width])
        fh = slowness_flat[nidx] * spacing
        if a > b:
            a, b = b, a
        # two-sided quadratic only when it exceeds both one-sided values
        if b - a >= fh or b == math.inf:
            cand = a + fh
        else:
            cand = 0.5 * (a + b + math.sqrt(2.0 * fh * fh - (a - b) ** 2))
        if stamp[nidx] != run or cand < dist[nidx]:
            dist[nidx] = cand
            accepted[nidx] = False
            stamp[nidx] = run
            heapq.heappush(heap, (cand, nidx))

    while heap and len(order) < limit:
        c, idx = heapq.heappop(heap)
        if accepted[idx] or c > dist[idx]:
            continue  # stale heap entry
        accepted[idx] = True
        order.append(idx)
        iy, ix = divmod(idx, width)
        if ix > 0 and (stamp[idx - 1] != run or not accepted[idx - 1]):
            relax(idx - 1, iy, ix - 1)
        if ix < width - 1 and (stamp[idx + 1] != run or not accepted[idx + 1]):
            relax(idx + 1, iy, ix + 1)
        if iy > 0 and (stamp[idx - width] != run or not accepted[idx - width]):
            relax(idx - width, iy - 1, ix)
        if iy < height - 1 and (stamp[idx + width] != run
                                or not accepted[idx + width]):
            relax(idx + width, iy + 1, ix)
    return order


def _as_slowness(metric, spacing):
    if isinstance(metric, MetricField):
        return metric.slowness, metric.spacing
    slowness = np.asarray(metric, dtype=np.float64)
    if slowness.ndim != 2:
        raise ValueError("slowness must be 2-d, got shape %s" % (slowness.shape,))
    if not np.all(np.isfinite(slowness)) or np.any(slowness <= 0):
        raise ValueError("slowness must be positive and finite everywhere")
    return slowness, (1.0 if spacing is None else float(spacing))


def fast_march_from(x, metric, stop_count: int | None = None,
                    spacing: float | None = None):
    """Geodesic distances from the source pixel x = (ix, iy).

    metric is a MetricField (or a bare positive slowness array, in which case
    spacing may be passed separately).  Returns (dist, order): dist is
    (height, width) with inf at pixels never accepted; order lists accepted
    flat indices (iy * width + ix) in acceptance order, source first, with
    non-decreasing distances.
    """
    slowness, spacing = _as_slowness(metric, spacing)
    height, width = slowness.shape
    ix, iy = x
    if not (0 <= ix < width and 0 <= iy < height):
        raise ValueError("source %r outside a %dx%d grid" % ((ix, iy), width,
                                                             height))
    if stop_count is not None and stop_count < 1:
        raise ValueError("stop_count must be at least 1, got %r" % (stop_count,))
    ws = _MarchWorkspace(height * width)
    order = _march(slowness.ravel(), height, width, spacing,
                   iy * width + ix, stop_count, ws)
    dist = np.full(height * width, np.inf)
    order = np.asarray(order, dtype=np.int64)
    dist[order] = ws.dist[order]
    return dist.reshape(height, width), order


@dataclasses.dataclass
class NeighborhoodWeights:
    """Per-pixel geodesic neighborhoods with binary membership weights.

    Row x of nbr_idx lists the flat indices of the m pixels geodesically
    nearest to x (excluding x itself) in acceptance order, which is
    non-decreasing distance order.  nbr_dist holds the matching distances
    and nbr_weight the membership weights (binary here, kept explicit so a
    decaying-weight variant stays a drop-in).  Entries of -1 in nbr_idx mark
    absent neighbors; the builder never produces them, but synthetic
    instances may.
    """

    m: int
    shape: tuple
    spacing: float
    nbr_idx: np.ndarray
    nbr_dist: np.ndarray
    nbr_weight: np.ndarray

    @property
    def n_pix(self) -> int:
        return self.shape[0] * self.shape[1]

    def dump_text(self, fileobj) -> None:
        """Write one line "x_ix,x_iy,dx,dy,distance" per neighborhood entry."""
        width = self.shape[1]
        for idx in range(self.n_pix):
            iy, ix = divmod(idx, width)
            for k in range(self.m):
                nidx = self.nbr_idx[idx, k]
                if nidx < 0:
                    continue
                niy, nix = divmod(int(nidx), width)
                fileobj.write("%d,%d,%d,%d,%.17g\n"
                              % (ix, iy, nix - ix, niy - iy,
                                 self.nbr_dist[idx, k]))


def _neighborhoods_from_metric(metric: MetricField, m: int) -> NeighborhoodWeights:
    slowness = metric.slowness
    height, width = slowness.shape
    n_pix = height * width
    if m < 1:
        raise ValueError("M must be at least 1, got %d" % m)
    if n_pix <= m:
        raise ValueError("grid with %d pixels cannot supply %d neighbors"
                         % (n_pix, m))
    flat = slowness.ravel()
    ws = _MarchWorkspace(n_pix)
    nbr_idx = np.empty((n_pix, m), dtype=np.int64)
    nbr_dist = np.empty((n_pix, m), dtype=np.float64)
    for idx in range(n_pix):
        order = _march(flat, height, width, metric.spacing, idx, m + 1, ws)
        nbr_idx[idx] = order[1:]
        nbr_dist[idx] = ws.dist[order[1:]]
    return NeighborhoodWeights(m=m, shape=(height, width),
                               spacing=metric.spacing, nbr_idx=nbr_idx,
                               nbr_dist=nbr_dist,
                               nbr_weight=np.ones((n_pix, m)))


def build_neighborhoods(g: ImageGrid, gamma: float, m: int) -> NeighborhoodWeights:
    """Each pixel's m geodesically nearest pixels by early-stopped marching."""
    return _neighborhoods_from_metric(build_metric(g, gamma), m)


def build_local_weights(nbhd: NeighborhoodWeights, m: int | None = None) -> np.ndarray:
    """omega(x) = m / (number of stencils involving x, own stencil included)."""
    if m is None:
        m = nbhd.m
    valid = nbhd.nbr_idx[nbhd.nbr_idx >= 0]
    referenced = np.bincount(valid, minlength=nbhd.n_pix)
    return m / (1.0 + referenced)
