"""Acceptance gates: one scorecard line per check, printed live.

The nine tests below are the package's end-to-end quality gates: exact
values of the sphere-moment constants, exact recovery of quadratic fields
by the neighborhood fits, agreement of the closed-form circle operator with
the least-squares fits, discrete self-adjointness, the mollifier
localization rate, restoration quality and peak preservation on the
canonical disc-slope scene against the local baselines, independence of the
solver result from the iteration cap and the initialization, and agreement
of the fast marcher with an exhaustive label-setting solver.  Each test
prints a single "[acceptance N] PASS/FAIL" line (bypassing capture) so a
full run reads as a nine-line scorecard; the assertions carry the same
numbers.
"""

import time

import numpy as np
import pytest

from test_eikonal import upwind_reference

from nlhessian.eikonal import (build_local_weights, build_neighborhoods,
                               fast_march_from)
from nlhessian.grid import ImageGrid, NoiseSpec, add_gaussian_noise, \
    make_disc_slope, psnr
from nlhessian.hessian import assemble_operator
from nlhessian.solver import (EnergySpec, SolverConfig, solve_baseline,
                              solve_primal_dual)
from nlhessian.verify import (check_adjointness, check_constants,
                              check_implicit_explicit, check_localization)

# The canonical restoration scene: 64x64 disc on a flat background with a
# linear ramp inside, contrast 2.0, noise sigma 0.25, seed 1.
SCENE_N = 64
SCENE_SIGMA = 0.25
SCENE_SEED = 1

# Declared parameter search grids for the restoration comparison.  Winners
# are picked by PSNR after a short selection budget, then re-solved to
# convergence under the default solver configuration.
NLH_GAMMAS = (0.005, 0.01, 0.02, 0.05, 0.1)
NLH_ALPHAS = (4.0, 8.0, 16.0, 32.0, 64.0)
TV_ALPHAS = tuple(np.geomspace(0.25, 4.0, 25))
TV2_ALPHAS = tuple(np.geomspace(0.15, 2.4, 25))
TGV2_ALPHA0S = (1.0, 1.5, 2.0, 3.0, 4.5)
TGV2_ALPHA1S = (0.4, 0.6, 0.9, 1.35, 2.0)
SELECTION_BUDGET = SolverConfig(max_iters=3000)
# The two-initialization agreement check runs the smooth p=2 model, which
# (unlike the rattling L1 iterates) supports a tolerance well below the
# default; both runs then land on the same stationary point.
P2_ALPHA = 8.0
P2_CFG = SolverConfig(max_iters=400000, tol=1e-7)


def scorecard(capsys, idx, passed, detail):
    with capsys.disabled():
        print("[acceptance %d] %s — %s"
              % (idx, "PASS" if passed else "FAIL", detail), flush=True)


def worst(results):
    """(all_passed, summary of the check using most of its tolerance)."""
    def consumed(r):
        if r.mode == "at_least":
            gap = r.expected - r.measured
        else:
            scale = abs(r.expected) if r.mode == "rel" else 1.0
            gap = abs(r.measured - r.expected) / max(scale, 1e-300)
        if r.tolerance == 0.0:
            return -np.inf if gap == 0.0 else np.inf
        return gap / r.tolerance

    bad = [r for r in results if not r.passed]
    show = bad[0] if bad else max(results, key=consumed)
    return (not bad), "%s: %.3g (expected %.3g, tol %.2g, %s)" % (
        show.name, show.measured, show.expected, show.tolerance, show.mode)


@pytest.fixture(scope="module")
def scene():
    clean = make_disc_slope(SCENE_N, SCENE_N / 4, base=0.1, slope=0.01,
                            jump=2.0)
    noisy = add_gaussian_noise(clean, NoiseSpec(SCENE_SIGMA, SCENE_SEED))
    iy, ix = np.mgrid[0:SCENE_N, 0:SCENE_N]
    r = np.hypot(ix - SCENE_N / 2, iy - SCENE_N / 2)
    return {
        "clean": clean,
        "noisy": noisy,
        # the jump's own pixels plus one pixel on each side
        "band": np.abs(r - SCENE_N / 4) <= 1.5,
        "inside": r < SCENE_N / 4,
    }


@pytest.fixture(scope="module")
def restoration(scene):
    """Grid-searched restorations of the canonical scene, timed."""
    clean, noisy = scene["clean"], scene["noisy"]
    t0 = time.monotonic()

    ops = {}
    for gamma in NLH_GAMMAS:
        nb = build_neighborhoods(noisy, gamma, 12)
        ops[gamma] = assemble_operator(nb, omega=build_local_weights(nb))
    nlh_cells = []
    for gamma in NLH_GAMMAS:
        for alpha in NLH_ALPHAS:
            spec = EnergySpec(1, alpha, "nl_hessian", ops[gamma])
            u, _ = solve_primal_dual(noisy, spec, SELECTION_BUDGET)
            nlh_cells.append((psnr(clean, u), gamma, alpha))
    _, gamma_w, alpha_w = max(nlh_cells)
    spec_nlh = EnergySpec(1, alpha_w, "nl_hessian", ops[gamma_w])
    u_nlh, rep_nlh = solve_primal_dual(noisy, spec_nlh)

    def best_alpha(reg, alphas):
        cells = []
        for alpha in alphas:
            u, _ = solve_baseline(noisy, EnergySpec(1, float(alpha), reg),
                                  SELECTION_BUDGET)
            cells.append((psnr(clean, u), float(alpha)))
        return max(cells)[1]

    a_tv = best_alpha("tv", TV_ALPHAS)
    spec_tv = EnergySpec(1, a_tv, "tv")
    u_tv, rep_tv = solve_baseline(noisy, spec_tv)

    a_tv2 = best_alpha("tv2", TV2_ALPHAS)
    spec_tv2 = EnergySpec(1, a_tv2, "tv2")
    u_tv2, rep_tv2 = solve_baseline(noisy, spec_tv2)

    tgv_cells = []
    for a0 in TGV2_ALPHA0S:
        for a1 in TGV2_ALPHA1S:
            spec = EnergySpec(1, 0.0, "tgv2", None, a0, a1)
            u, _ = solve_baseline(noisy, spec, SELECTION_BUDGET)
            tgv_cells.append((psnr(clean, u), a0, a1))
    _, a0_w, a1_w = max(tgv_cells)
    spec_tgv = EnergySpec(1, 0.0, "tgv2", None, a0_w, a1_w)
    u_tgv, rep_tgv = solve_baseline(noisy, spec_tgv)

    return {
        "elapsed": time.monotonic() - t0,
        "op": ops[gamma_w],
        "winners": {"nlh": (gamma_w, alpha_w), "tv": a_tv, "tv2": a_tv2,
                    "tgv2": (a0_w, a1_w)},
        "specs": {"nlh": spec_nlh, "tv": spec_tv, "tv2": spec_tv2,
                  "tgv2": spec_tgv},
        "images": {"nlh": u_nlh, "tv": u_tv, "tv2": u_tv2, "tgv2": u_tgv},
        "reports": {"nlh": rep_nlh, "tv": rep_tv, "tv2": rep_tv2,
                    "tgv2": rep_tgv},
    }


def test_sphere_moment_constants(capsys):
    t0 = time.monotonic()
    results = check_constants()
    dt = time.monotonic() - t0
    ok, detail = worst(results)
    ok = ok and dt < 10.0
    scorecard(capsys, 1, ok, "N=2 off-diagonal pi/4, ratio 3, N=1 exactly 2;"
              " tightest %s; %.1fs (cap 10)" % (detail, dt))
    assert ok, detail


def test_quadratic_fields_recovered_exactly(capsys):
    t0 = time.monotonic()
    n = 32
    rng = np.random.default_rng(20260819)
    from scipy.ndimage import gaussian_filter
    backdrop = ImageGrid(gaussian_filter(rng.uniform(0, 1, (n, n)), 3.0))
    nb = build_neighborhoods(backdrop, 0.1, 12)
    op = assemble_operator(nb)  # raw fits, no local-weight scaling
    iy, ix = np.mgrid[0:n, 0:n].astype(np.float64)
    worst_err = 0.0
    for _ in range(100):
        b1, b2 = rng.uniform(-0.1, 0.1, 2)
        hxx, hxy, hyy = rng.uniform(-0.02, 0.02, 3)
        u = (b1 * ix + b2 * iy + 0.5 * hxx * ix * ix + hxy * ix * iy
             + 0.5 * hyy * iy * iy + rng.uniform(-1, 1))
        fits = op.hessian(u)
        pixels = rng.choice(n * n, size=100, replace=False)
        err = np.abs(fits[pixels] - np.array([hxx, hxy, hyy]))
        worst_err = max(worst_err, float(err.max()))
    dt = time.monotonic() - t0
    ok = worst_err <= 1e-9 and dt < 5.0
    scorecard(capsys, 2, ok, "100 random quadratics x 100 pixels, geodesic "
              "M=12: max |fit - true| = %.2e (tol 1e-9); %.1fs (cap 5)"
              % (worst_err, dt))
    assert ok, worst_err


def test_circle_formula_matches_least_squares_fit(capsys):
    t0 = time.monotonic()
    results = check_implicit_explicit()
    dt = time.monotonic() - t0
    ok, detail = worst(results)
    ok = ok and dt < 10.0
    scorecard(capsys, 3, ok, "closed-form circle vs least-squares fits and "
              "shell-average identity; tightest %s; %.1fs (cap 10)"
              % (detail, dt))
    assert ok, detail


def test_second_difference_operator_is_self_adjoint(capsys):
    t0 = time.monotonic()
    results = check_adjointness()
    dt = time.monotonic() - t0
    ok, detail = worst(results)
    ok = ok and dt < 10.0
    scorecard(capsys, 4, ok, "10 seeded compact pairs, relative mismatch "
              "<= 1e-10; tightest %s; %.1fs (cap 10)" % (detail, dt))
    assert ok, detail


def test_mollifier_localization_rate(capsys):
    t0 = time.monotonic()
    results = check_localization()
    dt = time.monotonic() - t0
    ok, detail = worst(results)
    ok = ok and dt < 60.0
    scorecard(capsys, 5, ok, "errors strictly decrease over delta 16/8/4/2, "
              "first two halving ratios >= 3; tightest %s; %.1fs (cap 60)"
              % (detail, dt))
    assert ok, detail


def test_disc_slope_restoration_outperforms_local_models(capsys, scene,
                                                         restoration):
    clean, band = scene["clean"], scene["band"]
    p = {k: psnr(clean, im) for k, im in restoration["images"].items()}
    err = np.abs(restoration["images"]["nlh"].values - clean.values)
    sup_out = float(err[~band].max())
    dt = restoration["elapsed"]
    ok = (p["nlh"] >= p["tv"] + 2.0 and p["nlh"] >= p["tv2"] + 1.0
          and sup_out <= 0.02 and dt < 300.0)
    scorecard(capsys, 6, ok, "PSNR nlh %.2f vs tv %.2f (need +2) and tv2 "
              "%.2f (need +1); sup-error off the edge band %.4f (cap 0.02); "
              "%.0fs (cap 300); winners %r"
              % (p["nlh"], p["tv"], p["tv2"], sup_out, dt,
                 restoration["winners"]))
    assert ok, (p, sup_out, dt)


def test_disc_peak_preserved_where_tgv_flattens(capsys, scene, restoration):
    clean, inside = scene["clean"], scene["inside"]
    cmax = float(clean.values[inside].max())
    dev_nlh = float(restoration["images"]["nlh"].values[inside].max() - cmax)
    dev_tgv = float(restoration["images"]["tgv2"].values[inside].max() - cmax)
    gap = dev_nlh - dev_tgv
    ok = gap > 0.0
    scorecard(capsys, 7, ok, "peak deviation inside the disc: nlh %+.4f, "
              "tgv2 %+.4f; the nlh maximum stands %+.4f above the tgv2 one "
              "(must be positive)" % (dev_nlh, dev_tgv, gap))
    assert ok, (dev_nlh, dev_tgv)


def test_result_independent_of_iteration_cap_and_init(capsys, scene,
                                                      restoration):
    noisy = scene["noisy"]
    default_cap = SolverConfig().max_iters
    doubled = SolverConfig(max_iters=2 * default_cap)
    worst_rel = 0.0
    for name, spec in restoration["specs"].items():
        solve = solve_primal_dual if name == "nlh" else solve_baseline
        _, rep2 = solve(noisy, spec, doubled)
        e1 = restoration["reports"][name].final_energy
        worst_rel = max(worst_rel, abs(rep2.final_energy - e1) / abs(e1))

    spec_p2 = EnergySpec(2, P2_ALPHA, "nl_hessian", restoration["op"])
    ua, _ = solve_primal_dual(noisy, spec_p2, P2_CFG)
    ub, _ = solve_primal_dual(noisy, spec_p2, P2_CFG,
                              u0=ImageGrid(np.zeros(noisy.shape)))
    init_gap = float(np.abs(ua.values - ub.values).max())
    ok = worst_rel < 1e-6 and init_gap <= 1e-6
    scorecard(capsys, 8, ok, "doubling the cap moves final energies by "
              "<= %.2e relative (tol 1e-6); p=2 from two inits differs by "
              "%.2e sup (tol 1e-6)" % (worst_rel, init_gap))
    assert ok, (worst_rel, init_gap)


def test_fast_march_agrees_with_exhaustive_label_setting(capsys):
    t0 = time.monotonic()
    rng = np.random.default_rng(911)
    worst_err = 0.0
    for _ in range(20):
        slowness = rng.uniform(0.3, 3.0, size=(32, 32))
        src = (int(rng.integers(32)), int(rng.integers(32)))
        dist, _ = fast_march_from(src, slowness)
        ref = upwind_reference(slowness, src)
        worst_err = max(worst_err, float(np.max(np.abs(dist - ref))))
    dt = time.monotonic() - t0
    ok = worst_err <= 1e-12
    scorecard(capsys, 9, ok, "20 seeded random 32x32 metrics: max distance "
              "mismatch %.2e (tol 1e-12); %.1fs" % (worst_err, dt))
    assert ok, worst_err
