"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are repeated in the terminal summary under "acceptance criteria".
Runtime is dominated by criteria 2 and 3 (tens of minutes on one core).
"""

import math

import numpy as np
import pytest

from geoflow.densities import AREA, BUILTIN, MEAN_CURVATURE_INTEGRAL, QUARTIC, WILLMORE
from geoflow.diagnostics import convergence_study, mesh_quality
from geoflow.discrete_ops import (
    face_frames,
    initial_curvature,
    surface_gradient_scalar,
    surface_gradient_vector,
    vertex_normals,
    weingarten,
)
from geoflow.mesh import enclosed_volume, make_ellipsoid, make_icosphere, make_octahedron, make_torus, mesh_size
from geoflow.solver import NewtonIterate, StepConfig, StepGeometry, initial_state, jacobian, residual, run

pytestmark = pytest.mark.slow

SQ2 = math.sqrt(2.0)

# paper time steps per density for the two curvature-dependent setups
SETUPS = {
    "ellipsoid(2,2)": (lambda: make_ellipsoid(2, 2, 3), {"area": 4e-4, "mean-curvature-integral": 4e-4,
                                                         "willmore": 2e-4, "quartic": 2e-4}),
    "torus(sqrt3,sqrt2/2)": (lambda: make_torus(math.sqrt(3), SQ2 / 2, 34, 17), {"area": 2e-4,
                                                                               "mean-curvature-integral": 2e-4,
                                                                               "willmore": 1e-4, "quartic": 1e-4}),
}
DISSIPATION_STEPS = 100


def _volume_recorder():
    vols = []

    def hook(state, stats):
        vols.append(enclosed_volume(state.mesh) if stats is None else stats.volume)

    return vols, hook


@pytest.fixture(scope="module")
def dissipation_runs():
    out = {}
    for surface, (make, taus) in SETUPS.items():
        mesh = make()
        for name, tau in taus.items():
            config = StepConfig(tau=tau, density=BUILTIN[name])
            vols, hook = _volume_recorder()
            res = run(initial_state(mesh, config), config, DISSIPATION_STEPS * tau, [hook])
            out[surface, name] = (mesh_size(mesh), res.energies, np.array(vols))
    return out


def test_criterion_1_energy_dissipation(dissipation_runs, verdict):
    worst, ok, h = -math.inf, True, {}
    for (surface, name), (hs, e, _) in dissipation_runs.items():
        h[surface] = hs
        rise = np.diff(e) / np.abs(e[:-1])
        worst = max(worst, rise.max())
        ok &= len(e) == DISSIPATION_STEPS + 1 and bool(np.all(np.diff(e) <= 1e-9 * np.abs(e[:-1])))
    detail = (
        f"8 runs x {DISSIPATION_STEPS} steps, h={h['ellipsoid(2,2)']:.3f}/{h['torus(sqrt3,sqrt2/2)']:.3f}, "
        f"max relative rise {worst:.2e} (limit 1e-9)"
    )
    assert verdict(1, ok, detail), detail


def _willmore_run(mesh, tau, t_end):
    config = StepConfig(tau=tau, density=WILLMORE)
    return run(initial_state(mesh, config), config, t_end)


def test_criterion_2_willmore_steady_states(verdict):
    ell = _willmore_run(make_ellipsoid(2, 1, 2), 1e-3, 2.0)
    tor_mesh = make_torus(SQ2, SQ2 / 2, 36, 36)
    tor = _willmore_run(tor_mesh, 1e-4, 0.4)
    e_ell, e_tor = ell.energies[-1], tor.energies[-1]
    d_ell, d_tor = e_ell / (8 * math.pi) - 1, e_tor / (4 * math.pi**2) - 1
    ok = abs(d_ell) <= 0.02 and abs(d_tor) <= 0.02
    detail = (
        f"ellipsoid W={e_ell:.4f} ({d_ell:+.2%} vs 8pi), "
        f"torus h={mesh_size(tor_mesh):.3f} W={e_tor:.4f} ({d_tor:+.2%} vs 4pi^2, "
        f"final min angle {mesh_quality(tor.final.mesh).min_angle:.1f} deg), tol 2%"
    )
    assert verdict(2, ok, detail), detail


def test_criterion_3_convergence_order(verdict):
    table = convergence_study(lambda lv: make_ellipsoid(2, 1, lv), WILLMORE, [1, 2, 3], [0.01, 0.02], 4)
    orders = {t: table.fitted_order(t) for t in table.times()}
    ok = len(orders) == 2 and all(1.5 <= p <= 2.5 for p in orders.values())
    errs = "; ".join(
        f"t={t:g}: " + ", ".join(f"{r.error:.2e}" for r in table.at(t)) + f" -> order {p:.2f}" for t, p in orders.items()
    )
    detail = f"ellipsoid(2,1) levels 1-3 vs level 4, {errs}"
    assert verdict(3, ok, detail), detail


def test_criterion_4_newton_iterations(verdict):
    config = StepConfig(tau=5e-4, density=WILLMORE, newton_tol=1e-10)
    res = run(initial_state(make_ellipsoid(2, 1, 3), config), config, 0.2)
    its = np.array([s.newton_iters for s in res.stats])
    med = float(np.median(its))
    detail = f"{len(its)} steps, median {med:g}, max {its.max()}"
    assert verdict(4, med <= 3, detail), detail


def _radius_errors(R0, exact, density, level, tau, t_end):
    config = StepConfig(tau=tau, density=density)
    mean_err, vertex_err = [], []

    def hook(state, stats):
        r = np.linalg.norm(state.mesh.vertices, axis=1)
        R = exact(state.time)
        mean_err.append(abs(r.mean() / R - 1))
        vertex_err.append(np.abs(r / R - 1).max())

    run(initial_state(make_icosphere(level, R0), config), config, t_end, [hook])
    return max(mean_err), max(vertex_err), len(mean_err) - 1


def test_criterion_5_sphere_oracles(verdict):
    mcf, mcf_v, n_mcf = _radius_errors(1.0, lambda t: math.sqrt(1 - 4 * t), AREA, 4, 0.1875 / 188, 0.1875)
    gauss, gauss_v, n_g = _radius_errors(1.5, lambda t: (1.5**3 - 6 * t) ** (1 / 3), MEAN_CURVATURE_INTEGRAL, 3, 1e-3, 0.45)
    config = StepConfig(tau=1e-3, density=WILLMORE)
    drift = []

    def hook(state, stats):
        drift.append(np.abs(np.linalg.norm(state.mesh.vertices, axis=1) - 1.0).max())

    run(initial_state(make_icosphere(3, 1.0), config), config, 0.5, [hook])
    ok = mcf < 0.01 and gauss < 0.02 and max(drift) < 0.01 and len(drift) == 501
    detail = (
        f"MCF to R=0.5 ({n_mcf} steps) {mcf:.3%} (worst vertex {mcf_v:.3%}); "
        f"Gauss to t=0.45 {gauss:.3%} (worst vertex {gauss_v:.3%}); "
        f"Willmore 500 steps max drift {max(drift):.3%}"
    )
    assert verdict(5, ok, detail), detail


def _fd(f, u, eps=1e-6):
    cols = []
    for i in range(len(u)):
        d = np.zeros(len(u))
        d[i] = eps
        cols.append((f(u + d) - f(u - d)) / (2 * eps))
    return np.column_stack(cols)


def test_criterion_6_jacobian(verdict):
    m = make_octahedron()
    K = m.n_vertices
    rng = np.random.default_rng(11)
    errs = {}
    for density in (WILLMORE, QUARTIC):
        config = StepConfig(tau=1e-2, density=density, alpha0=3.0)
        s = initial_state(m, config)
        geom = StepGeometry.build(m)
        worst = 0.0
        # initial guess plus two perturbed iterates
        iterates = [NewtonIterate(m.vertices, np.zeros(K), np.zeros(K), np.zeros(K), s.curvature)]
        for _ in range(2):
            iterates.append(
                NewtonIterate(
                    m.vertices + 0.05 * rng.standard_normal((K, 3)),
                    rng.standard_normal(K), rng.standard_normal(K), rng.standard_normal(K),
                    s.curvature + 0.3 * rng.standard_normal(K),
                )
            )
        for it in iterates:
            u = it.stack()
            assert u.shape == (42,)
            Jm = jacobian(s, geom, it, config).toarray()
            Jfd = _fd(lambda v: residual(s, geom, NewtonIterate.unstack(v, K), config), u)
            worst = max(worst, np.abs(Jm - Jfd).max() / np.abs(Jfd).max())
        errs[density.name] = worst
    ok = all(e < 1e-5 for e in errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + " (limit 1e-5, 42 unknowns)"
    assert verdict(6, ok, detail), detail


def test_criterion_7_operator_suite(verdict):
    m = make_icosphere(4, 1.0)
    fr = face_frames(m)
    P = np.eye(3) - np.einsum("ja,jb->jab", fr.normal, fr.normal)
    proj = np.abs(surface_gradient_vector(m, fr, m.vertices) - P).max()
    rng = np.random.default_rng(3)
    g = surface_gradient_scalar(m, fr, rng.standard_normal(m.n_vertices))
    G = surface_gradient_vector(m, fr, rng.standard_normal((m.n_vertices, 3)))
    scale = max(np.abs(g).max(), np.abs(G).max())
    tang = max(
        np.abs(np.einsum("jd,jd->j", g, fr.normal)).max(), np.abs(np.einsum("jad,jd->ja", G, fr.normal)).max()
    ) / scale
    A = weingarten(m, fr, vertex_normals(m, fr))
    trace = abs(np.trace(A, axis1=1, axis2=2).mean() / 2.0 - 1)
    # every vertex with angle-weighted normals; the area-weighted mean alongside
    H_angle = initial_curvature(m, fr, weingarten(m, fr, vertex_normals(m, fr, "angle")))
    h0 = np.abs(H_angle / 2.0 - 1).max()
    h0_area = abs(initial_curvature(m, fr, A).mean() / 2.0 - 1)
    sums = []
    for mesh in (m, make_torus(SQ2, 1.0, 32, 16), make_ellipsoid(2, 1, 3)):
        f = face_frames(mesh)
        sums.append(np.abs((f.area[:, None] * f.normal).sum(axis=0)).max() / f.area.sum())
    ok = proj <= 1e-12 and tang <= 1e-12 and trace < 0.05 and h0 < 0.05 and h0_area < 0.05 and max(sums) <= 1e-10
    detail = (
        f"projector {proj:.1e}, tangency {tang:.1e}, trace(A) {trace:.2%}, "
        f"H0 worst vertex {h0:.2%} (angle normals), H0 mean {h0_area:.2%} (area normals), "
        f"area-vector sum {max(sums):.1e}"
    )
    assert verdict(7, ok, detail), detail


def test_criterion_8_volume_trends(dissipation_runs, verdict):
    checks = {
        ("ellipsoid(2,2)", "area"): -1,
        ("ellipsoid(2,2)", "mean-curvature-integral"): -1,
        ("ellipsoid(2,2)", "quartic"): +1,
        ("torus(sqrt3,sqrt2/2)", "area"): -1,
        ("torus(sqrt3,sqrt2/2)", "quartic"): +1,
    }
    ok, parts = True, []
    for key, sign in checks.items():
        v = dissipation_runs[key][2][:51]
        dv = np.diff(v)
        good = len(v) == 51 and bool(np.all(sign * dv > 0))
        ok &= good
        parts.append(f"{key[0].split('(')[0]} {key[1]} {v[-1] / v[0] - 1:+.2%}{'' if good else ' (not monotone)'}")
    detail = "50 steps: " + ", ".join(parts)
    assert verdict(8, ok, detail), detail
