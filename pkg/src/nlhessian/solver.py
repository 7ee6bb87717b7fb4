"""Primal-dual solvers for second-order regularized denoising.

All models share the saddle-point form  min_x max_q <K x, q> + G(x) - F*(q)
solved by the Chambolle-Pock iteration with diagonal (per-coordinate) step
preconditioning from the absolute row and column sums of K, and
over-relaxation theta:

    q   <- prox_{sigma F*}(q + sigma K xbar)
    x   <- prox_{tau G}(x - tau K^T q)
    xbar <- x + theta (x_new - x_old)

The energy is  sum_x |u(x)-g(x)|^p + (regularizer), with the regularizer one
of: alpha * sum omega |H'_u| (pre-assembled non-local Hessian rows, Frobenius
norm with the mixed component counted twice), alpha * TV, alpha * TV2, or the
TGV2 cascade  alpha1 sum |grad u - w| + alpha0 sum |sym grad w|  over an
auxiliary vector field w.  The data term enters G with a closed-form
proximal step on the image part of the primal: averaging toward the data
for p = 2, soft-shrinkage toward the data for p = 1.

Difference stencils are plain (unit-spacing) forward differences with zeroed
rows where the offset leaves the grid; second differences zero the two
border rows.  The TGV2 gradient alone repeats its last interior difference
at the far edge so that affine images have constant discrete gradient and
the cascade can vanish on them exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time

import numpy as np
from scipy import sparse

from .grid import ImageGrid
from .hessian import NlHessianOperator

_REGULARIZERS = ("nl_hessian", "tv", "tv2", "tgv2")
_SQRT2 = math.sqrt(2.0)


class NumericalError(RuntimeError):
    """The iteration produced non-finite values or an estimate failed."""


@dataclasses.dataclass
class EnergySpec:
    """What to minimize: data power, weight, and regularizer choice.

    alpha scales the nl_hessian/tv/tv2 regularizers (alpha = 0 is allowed
    and makes the problem degenerate-but-valid: the data term alone).  tgv2
    ignores alpha and uses the pair (alpha1, alpha0) of cascade weights.
    clamp_input clips the data image to [0, 1] before solving.
    """

    data_p: int
    alpha: float
    regularizer: str
    operator: NlHessianOperator | None = None
    alpha0: float = 0.0
    alpha1: float = 0.0
    clamp_input: bool = False

    def __post_init__(self):
        if self.data_p not in (1, 2):
            raise ValueError("data_p must be 1 or 2, got %r" % (self.data_p,))
        if self.regularizer not in _REGULARIZERS:
            raise ValueError("unknown regularizer %r, expected one of %s"
                             % (self.regularizer, ", ".join(_REGULARIZERS)))
        if not self.alpha >= 0:
            raise ValueError("alpha must be nonnegative, got %r"
                             % (self.alpha,))
        if self.regularizer == "nl_hessian" and self.operator is None:
            raise ValueError("nl_hessian regularizer needs an assembled "
                             "operator")
        if self.regularizer == "tgv2" and not (self.alpha0 > 0
                                               and self.alpha1 > 0):
            raise ValueError("tgv2 needs alpha0 > 0 and alpha1 > 0, got "
                             "alpha0=%r alpha1=%r"
                             % (self.alpha0, self.alpha1))


@dataclasses.dataclass
class SolverConfig:
    """Iteration budget and stopping rule.

    Convergence is declared when, between two consecutive checkpoints, both
    the relative energy change and the sup-norm change of the image fall
    below tol.  Checkpoints happen every min(100, max(1, max_iters // 256))
    iterations, so for budgets of 25600 and up the checkpoint grid is a
    fixed 100 iterations: where the solver stops is then a property of the
    trajectory alone, and raising max_iters on a converged run reproduces
    the same result instead of a slightly different one.

    The default tol is chosen for the L1 models, whose primal iterate keeps
    rattling at a few-parts-per-million amplitude per checkpoint window no
    matter how long the solver runs (the energy landscape is polyhedral, so
    the iterate slides along facets instead of settling); tolerances much
    below 1e-5 then never fire and the run only ends at the iteration cap.
    Smooth p=2 problems settle properly and support tighter tolerances.
    """

    max_iters: int = 400000
    tol: float = 1e-5
    theta: float = 1.0
    norm_power_iters: int = 100

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1, got %r"
                             % (self.max_iters,))
        if not self.tol > 0:
            raise ValueError("tol must be positive, got %r" % (self.tol,))
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1], got %r"
                             % (self.theta,))
        if self.norm_power_iters < 1:
            raise ValueError("norm_power_iters must be at least 1, got %r"
                             % (self.norm_power_iters,))


@dataclasses.dataclass
class SolveReport:
    iterations_run: int
    final_energy: float
    energy_trace: list
    converged: bool
    wall_time: float
    aux: np.ndarray | None = None

    def trace_csv(self, fileobj) -> None:
        fileobj.write("iter,energy\n")
        for it, e in self.energy_trace:
            fileobj.write("%d,%.17g\n" % (it, e))

    def to_json(self) -> str:
        return json.dumps({
            "iterations_run": self.iterations_run,
            "final_energy": self.final_energy,
            "converged": self.converged,
            "wall_time": self.wall_time,
            "energy_trace": [[int(i), float(e)] for i, e in
                             self.energy_trace],
        })


# ---------------------------------------------------------------------------
# difference stencils


def _forward_diff(n: int) -> sparse.csr_matrix:
    """Forward difference with a zeroed last row."""
    rows = np.repeat(np.arange(n - 1), 2)
    cols = np.empty(2 * (n - 1), dtype=np.int64)
    cols[0::2] = np.arange(n - 1)
    cols[1::2] = np.arange(1, n)
    data = np.tile([-1.0, 1.0], n - 1)
    return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


def _forward_diff_closed(n: int) -> sparse.csr_matrix:
    """Forward difference whose last row repeats the final interior one.

    Affine sequences then map to exactly constant differences, which is what
    lets the TGV2 cascade vanish on affine images.
    """
    mat = _forward_diff(n).tolil()
    mat[n - 1, n - 2] = -1.0
    mat[n - 1, n - 1] = 1.0
    return mat.tocsr()


def _second_diff(n: int) -> sparse.csr_matrix:
    """Three-point second difference, zeroed on both border rows."""
    rows = np.repeat(np.arange(1, n - 1), 3)
    cols = (np.arange(1, n - 1)[:, None] + np.array([-1, 0, 1])).ravel()
    data = np.tile([1.0, -2.0, 1.0], n - 2)
    return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


def _grad_pair(shape, closed=False):
    height, width = shape
    d1 = _forward_diff_closed if closed else _forward_diff
    dx = sparse.kron(sparse.eye(height), d1(width), format="csr")
    dy = sparse.kron(d1(height), sparse.eye(width), format="csr")
    return dx, dy


@dataclasses.dataclass(frozen=True)
class _DualBlock:
    """One slice of the dual vector and the prox/energy rule on it."""

    sl: slice
    kind: str          # "group" or "data_l1"
    k: int = 0         # components per group
    ngroups: int = 0
    interleaved: bool = False  # groups as (ngroups, k) rows vs k stacked runs

    def groups(self, v: np.ndarray) -> np.ndarray:
        part = v[self.sl]
        if self.interleaved:
            return part.reshape(self.ngroups, self.k)
        return part.reshape(self.k, self.ngroups)

    def project_unit(self, q: np.ndarray) -> None:
        part = self.groups(q)
        axis = 1 if self.interleaved else 0
        norms = np.sqrt(np.sum(part * part, axis=axis, keepdims=True))
        part /= np.maximum(1.0, norms)

    def group_sum(self, v: np.ndarray) -> float:
        part = self.groups(v)
        axis = 1 if self.interleaved else 0
        return float(np.sum(np.sqrt(np.sum(part * part, axis=axis))))


def _regularizer_rows(spec: EnergySpec, shape):
    """K rows and dual blocks for the regularizer; primal is [u] or [u;w]."""
    height, width = shape
    n_pix = height * width
    if spec.regularizer == "nl_hessian":
        op = spec.operator
        if tuple(op.shape) != (height, width):
            raise ValueError("operator shape %s does not match image %s"
                             % (tuple(op.shape), (height, width)))
        scale = np.ones(3 * n_pix)
        scale[1::3] = _SQRT2  # Frobenius norm counts the mixed entry twice
        k_reg = sparse.diags(spec.alpha * scale) @ op.rows
        blocks = [_DualBlock(slice(0, 3 * n_pix), "group", 3, n_pix,
                             interleaved=True)]
        return k_reg.tocsr(), blocks, n_pix
    if spec.regularizer == "tv":
        dx, dy = _grad_pair(shape)
        k_reg = spec.alpha * sparse.vstack([dx, dy], format="csr")
        return k_reg, [_DualBlock(slice(0, 2 * n_pix), "group", 2,
                                  n_pix)], n_pix
    if spec.regularizer == "tv2":
        dx, dy = _grad_pair(shape)
        dxx = sparse.kron(sparse.eye(height), _second_diff(width),
                          format="csr")
        dyy = sparse.kron(_second_diff(height), sparse.eye(width),
                          format="csr")
        dxy = (dy @ dx).tocsr()
        k_reg = spec.alpha * sparse.vstack([dxx, _SQRT2 * dxy, dyy],
                                           format="csr")
        return k_reg, [_DualBlock(slice(0, 3 * n_pix), "group", 3,
                                  n_pix)], n_pix
    # tgv2: primal [u; w1; w2]
    dx_c, dy_c = _grad_pair(shape, closed=True)
    dx, dy = _grad_pair(shape)
    eye = sparse.eye(n_pix, format="csr")
    zero = sparse.csr_matrix((n_pix, n_pix))
    first = spec.alpha1 * sparse.bmat([[dx_c, -eye, zero],
                                       [dy_c, zero, -eye]], format="csr")
    half = 1.0 / _SQRT2  # sqrt(2) * (1/2) (dy w1 + dx w2)
    second = spec.alpha0 * sparse.bmat(
        [[zero, dx, zero],
         [zero, half * dy, half * dx],
         [zero, zero, dy]], format="csr")
    k_reg = sparse.vstack([first, second], format="csr")
    blocks = [_DualBlock(slice(0, 2 * n_pix), "group", 2, n_pix),
              _DualBlock(slice(2 * n_pix, 5 * n_pix), "group", 3, n_pix)]
    return k_reg, blocks, 3 * n_pix


def estimate_operator_norm(k_mat: sparse.spmatrix, iters: int = 100,
                           seed: int = 0):
    """Power iteration on K^T K: returns (norm estimate, principal vector).

    The estimate is |K v| for the returned unit vector v, so applying K to v
    reproduces the estimate by construction; it approaches the true norm
    from below.
    """
    k_mat = k_mat.tocsr()
    kt = k_mat.T.tocsr()
    rng = np.random.default_rng(seed)
    v = rng.normal(size=k_mat.shape[1])
    v /= np.linalg.norm(v)
    prev = math.inf
    for it in range(1, 4 * iters + 1):
        w = k_mat @ v
        est = float(np.linalg.norm(w))
        if not math.isfinite(est):
            raise NumericalError("non-finite values encountered during "
                                 "operator norm estimation at iteration %d"
                                 % it)
        if est == 0.0:
            return 0.0, v
        back = kt @ w
        nrm = float(np.linalg.norm(back))
        if nrm == 0.0:
            return est, v
        v = back / nrm
        if it >= iters and abs(est - prev) <= 1e-3 * max(est, 1e-30):
            return float(np.linalg.norm(k_mat @ v)), v
        prev = est
    raise NumericalError("operator norm estimate failed to converge after "
                         "%d iterations" % (4 * iters,))


# ---------------------------------------------------------------------------
# energies


def _diagonal_steps(k_mat: sparse.csr_matrix, blocks):
    """Per-coordinate primal/dual steps from absolute row and column sums.

    With tau_j = c / sum_i |K_ij| and sigma_i = c / sum_j |K_ij| (c < 1) the
    preconditioned iteration satisfies |diag(sigma)^1/2 K diag(tau)^1/2| <= c
    and converges without a global norm estimate, while equalizing progress
    between heavy rows (corner pixels, rebalanced fits) and light ones.  The
    dual step is made constant within each per-pixel group by taking the
    largest row sum of the group, so the group ball projection stays the
    plain Euclidean one.  Coordinates that no row touches get unit steps.
    """
    abs_k = sparse.csr_matrix(
        (np.abs(k_mat.data), k_mat.indices, k_mat.indptr), shape=k_mat.shape)
    col = np.asarray(abs_k.sum(axis=0)).ravel()
    row = np.asarray(abs_k.sum(axis=1)).ravel()
    tau = np.where(col > 0.0, 0.995 / np.maximum(col, 1e-300), 1.0)
    sigma = np.ones_like(row)
    for blk in blocks:
        part = row[blk.sl]
        if blk.interleaved:
            worst = part.reshape(blk.ngroups, blk.k).max(axis=1)
            part[:] = np.repeat(worst, blk.k)
        else:
            worst = part.reshape(blk.k, blk.ngroups).max(axis=0)
            part[:] = np.tile(worst, blk.k)
        sigma[blk.sl] = np.where(part > 0.0,
                                 0.995 / np.maximum(part, 1e-300), 1.0)
    return tau, sigma


def _data_term(u_flat: np.ndarray, g_flat: np.ndarray, p: int) -> float:
    diff = u_flat - g_flat
    if p == 1:
        return float(np.sum(np.abs(diff)))
    return float(np.sum(diff * diff))


def energy(u: ImageGrid, g: ImageGrid, spec: EnergySpec,
           aux: np.ndarray | None = None) -> float:
    """Exact discrete energy of u against data g under spec.

    The tgv2 energy needs the auxiliary vector field (n_pix, 2) from the
    solve report; every other regularizer is a function of u alone.
    """
    if u.values.shape != g.values.shape:
        raise ValueError("image dimensions differ: %s vs %s"
                         % (u.values.shape, g.values.shape))
    k_reg, blocks, n_primal = _regularizer_rows(spec, u.values.shape)
    n_pix = u.values.size
    if spec.regularizer == "tgv2":
        if aux is None:
            raise ValueError("tgv2 energy requires the auxiliary field w")
        w = np.asarray(aux, dtype=np.float64)
        if w.shape != (n_pix, 2):
            raise ValueError("auxiliary field must have shape (%d, 2), got "
                             "%s" % (n_pix, w.shape))
        x = np.concatenate([u.values.ravel(), w[:, 0], w[:, 1]])
    else:
        x = u.values.ravel()
    v = k_reg @ x
    reg = sum(blk.group_sum(v) for blk in blocks)
    return _data_term(x[:n_pix], g.values.ravel(), spec.data_p) + reg


# ---------------------------------------------------------------------------
# the saddle-point engine


def _run_saddle(g: ImageGrid, spec: EnergySpec, cfg: SolverConfig,
                u0: ImageGrid | None):
    start = time.monotonic()
    g_used = g
    if spec.clamp_input:
        g_used = ImageGrid(np.clip(g.values, 0.0, 1.0), g.spacing)
    shape = g_used.values.shape
    n_pix = g_used.values.size
    g_flat = g_used.values.ravel()

    k_reg, blocks, n_primal = _regularizer_rows(spec, shape)
    k_mat = k_reg.tocsr()
    kt = k_mat.T.tocsr()

    tau, sigma = _diagonal_steps(k_mat, blocks)
    tau_u = tau[:n_pix]

    x = np.zeros(n_primal)
    x[:n_pix] = g_flat if u0 is None else u0.values.ravel()
    q = np.zeros(k_mat.shape[0])
    xbar = x.copy()

    def current_energy(xv):
        v = k_reg @ xv
        reg = sum(blk.group_sum(v) for blk in blocks)
        return _data_term(xv[:n_pix], g_flat, spec.data_p) + reg

    check_every = min(100, max(1, cfg.max_iters // 256))
    trace = []
    prev_e = None
    prev_u = x[:n_pix].copy()
    converged = False
    iterations = 0
    for it in range(1, cfg.max_iters + 1):
        iterations = it
        q += sigma * (k_mat @ xbar)
        for blk in blocks:
            blk.project_unit(q)
        x_new = x - tau * (kt @ q)
        if spec.data_p == 2:
            x_new[:n_pix] = (x_new[:n_pix] + 2 * tau_u * g_flat) \
                / (1 + 2 * tau_u)
        else:
            r = x_new[:n_pix] - g_flat
            x_new[:n_pix] = g_flat + np.sign(r) * np.maximum(
                np.abs(r) - tau_u, 0.0)
        xbar = x_new + cfg.theta * (x_new - x)
        x = x_new
        if it % check_every == 0 or it == cfg.max_iters:
            e = current_energy(x)
            if not (math.isfinite(e) and np.all(np.isfinite(x))):
                raise NumericalError("non-finite values encountered at "
                                     "iteration %d" % it)
            trace.append((it, e))
            u_now = x[:n_pix]
            rel_u = float(np.max(np.abs(u_now - prev_u))
                          / max(1.0, np.max(np.abs(u_now))))
            if prev_e is not None:
                rel_e = abs(e - prev_e) / max(abs(e), 1e-30)
                if rel_u < cfg.tol and rel_e < cfg.tol:
                    converged = True
                    break
            prev_e = e
            prev_u = u_now.copy()

    out = ImageGrid(x[:n_pix].reshape(shape), g_used.spacing)
    aux = None
    if spec.regularizer == "tgv2":
        aux = np.stack([x[n_pix:2 * n_pix], x[2 * n_pix:]], axis=1)
    final = energy(out, g_used, spec, aux=aux)
    report = SolveReport(iterations_run=iterations, final_energy=final,
                         energy_trace=trace, converged=converged,
                         wall_time=time.monotonic() - start, aux=aux)
    return out, report


def solve_primal_dual(g: ImageGrid, spec: EnergySpec,
                      cfg: SolverConfig | None = None,
                      u0: ImageGrid | None = None):
    """Solve the non-local Hessian model; returns (ImageGrid, SolveReport)."""
    if spec.regularizer != "nl_hessian":
        raise ValueError("solve_primal_dual handles the nl_hessian "
                         "regularizer; use solve_baseline for %r"
                         % (spec.regularizer,))
    return _run_saddle(g, spec, cfg or SolverConfig(), u0)


def solve_baseline(g: ImageGrid, spec: EnergySpec,
                   cfg: SolverConfig | None = None,
                   u0: ImageGrid | None = None):
    """Solve a tv / tv2 / tgv2 baseline; returns (ImageGrid, SolveReport)."""
    if spec.regularizer == "nl_hessian":
        raise ValueError("solve_baseline handles tv, tv2 and tgv2; use "
                         "solve_primal_dual for nl_hessian")
    return _run_saddle(g, spec, cfg or SolverConfig(), u0)
