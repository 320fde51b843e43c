"""Tests for the space-time error indicators.

The weight operators are checked by polynomial reproduction with seeded
random cases, the gradient-jump indicator against a hand value and an
independent dense quadrature, and the transport indicators for their
affine dependence on the dual and for the roll-up identities.
"""

import types
import warnings

import numpy as np
import pytest
from numpy.polynomial.polynomial import polyval2d

from stadapt import error_estimation as ee
from stadapt import fem_core as fc
from stadapt import scenarios_cli as sc
from stadapt import slab_manager as sm
from stadapt import stokes_solver as ss
from stadapt import transport_solver as ts
from stadapt.mesh2d import Mesh, RootGrid
from stadapt.slab_manager import Slab


def unit_square(levels):
    mesh = Mesh(RootGrid.box(0.0, 0.0, 1.0, 1.0))
    for _ in range(levels):
        mesh = mesh.refine_all()
    return mesh


def hanging_square():
    # level-2 mesh with one whole patch refined: keeps the patch
    # structure and creates hanging faces
    mesh = unit_square(2)
    patch = [c for c in range(4)]
    return mesh.refine_cells([mesh.cell_ids[c] for c in patch])


def test_time_reconstruction_anchor():
    # two piecewise-constant values 0.8 and 1.5 on unit slabs give 1.15
    # halfway through the second slab
    assert ee.reconstruct_time(1.0, 0.8, 2.0, 1.5, 1.5) == pytest.approx(
        1.15, abs=1e-14)


def test_time_reconstruction_reproduces_linears():
    rng = np.random.default_rng(7)
    for _ in range(150):
        a, b = rng.normal(size=2)
        t0, dt = rng.uniform(-2, 2), rng.uniform(0.1, 3)
        t1 = t0 + dt
        t = rng.uniform(t0, t1)
        exact = a + b * t
        got = ee.reconstruct_time(t0, a + b * t0, t1, a + b * t1, t)
        assert abs(got - exact) < 1e-12


@pytest.mark.parametrize("degree", [1, 2])
def test_patch_interpolant_reproduces_double_degree(degree):
    # the two-level interpolant must reproduce polynomials of twice the
    # space degree exactly
    meshes = [unit_square(2), hanging_square()]
    rng = np.random.default_rng(11)
    for case in range(100):
        mesh = meshes[case % 2]
        cf = rng.normal(size=(2 * degree + 1, 2 * degree + 1))
        xy = fc.dof_map(mesh, degree).xy
        nodal = polyval2d(xy[:, 0], xy[:, 1], cf)
        interp = ee.interpolate_patch_2h(mesh, degree, nodal)
        pts = rng.uniform(0.01, 0.99, size=(5, 2))
        got = interp.eval(pts)
        want = polyval2d(pts[:, 0], pts[:, 1], cf)
        assert np.max(np.abs(got - want)) < 1e-12 * max(
            1.0, np.max(np.abs(want)))


def test_restriction_round_trip():
    rng = np.random.default_rng(13)
    meshes = [unit_square(1), hanging_square()]
    for case in range(100):
        mesh = meshes[case % 2]
        # hanging values must be consistent for the field to be a function
        z1 = fc.distribute_matrix(mesh, 1) @ rng.normal(
            size=fc.dof_map(mesh, 1).n_dofs)
        back = ee.restrict_space(mesh, fc.embed_q1_q2(mesh, z1))
        assert np.max(np.abs(back - z1)) < 1e-14

    # and the deficiency of an embedded bilinear field vanishes
    mesh = meshes[1]
    z1 = fc.distribute_matrix(mesh, 1) @ rng.normal(
        size=fc.dof_map(mesh, 1).n_dofs)
    w = ee.restriction_deficiency(mesh, fc.embed_q1_q2(mesh, z1))
    assert np.max(np.abs(w)) < 1e-13


def test_kelly_zero_on_global_linear():
    mesh = hanging_square()
    xy = fc.dof_map(mesh, 2).xy
    rng = np.random.default_rng(17)
    for _ in range(100):
        c = rng.normal(size=(2, 3))
        v = np.stack([c[k, 0] + c[k, 1] * xy[:, 0] + c[k, 2] * xy[:, 1]
                      for k in range(2)], axis=1)
        eta2 = ee.kelly_cell_indicators(mesh, v)
        assert np.max(eta2) < 1e-12


def test_kelly_hand_value():
    # two unit cells side by side; a bubble attached to the midpoint node
    # of the right cell jumps in the normal derivative by 16 y (1-y)
    # across the shared face, so the face integral is 256/30 and each
    # cell receives (1/24) * (1/2) * 256/30
    grid = RootGrid([0.0, 1.0, 2.0], [0.0, 1.0], [(0, 0), (1, 0)])
    mesh = Mesh(grid)
    dm = fc.dof_map(mesh, 2)
    v = np.zeros((dm.n_dofs, 2))
    center = np.where((np.abs(dm.xy[:, 0] - 1.5) < 1e-12)
                      & (np.abs(dm.xy[:, 1] - 0.5) < 1e-12))[0]
    assert center.size == 1
    v[center[0], 0] = 1.0
    eta2 = ee.kelly_cell_indicators(mesh, v)
    want = (1.0 / 24.0) * 0.5 * 256.0 / 30.0
    assert eta2 == pytest.approx([want, want], rel=1e-12)


def test_kelly_matches_dense_quadrature():
    # independent check: trapezoid quadrature over every shared face,
    # traversed through the neighbors API instead of shift/resolve
    mesh = hanging_square()
    rng = np.random.default_rng(19)
    v = rng.normal(size=(fc.dof_map(mesh, 2).n_dofs, 2))
    eta2 = ee.kelly_cell_indicators(mesh, v)

    npts = 2001
    s = np.linspace(0.0, 1.0, npts)
    wt = np.full(npts, 1.0 / (npts - 1))
    wt[0] *= 0.5
    wt[-1] *= 0.5
    ref = np.zeros(mesh.n_cells)
    for c in range(mesh.n_cells):
        cid = mesh.cell_ids[c]
        x0, y0, x1, y1 = mesh.bounds[c]
        for side, axis in ((0, 0), (1, 0), (2, 1), (3, 1)):
            for nid in mesh.neighbors(cid, side):
                nb = mesh.cell_index[nid]
                nx0, ny0, nx1, ny1 = mesh.bounds[nb]
                if axis == 0:
                    x = x0 if side == 0 else x1
                    lo, hi = max(y0, ny0), min(y1, ny1)
                    pts = np.column_stack([np.full(npts, x),
                                           lo + s * (hi - lo)])
                else:
                    y = y0 if side == 2 else y1
                    lo, hi = max(x0, nx0), min(x1, nx1)
                    pts = np.column_stack([lo + s * (hi - lo),
                                           np.full(npts, y)])
                hf = hi - lo
                _, gm = fc.evaluate_field(mesh, 2, v, pts, grad=True,
                                          cells=np.full(npts, c))
                _, gn = fc.evaluate_field(mesh, 2, v, pts, grad=True,
                                          cells=np.full(npts, nb))
                jump = gm[:, axis, :] - gn[:, axis, :]
                face = hf * np.dot(wt, np.sum(jump * jump, axis=1))
                ref[c] += (hf / 24.0) * 0.5 * face
    assert eta2 == pytest.approx(ref, rel=1e-5)


def _ex1_spec():
    return types.SimpleNamespace(
        nu=sc.NU_1, eps=sc.EPS_1, alpha=sc.ALPHA_1, delta0=0.0,
        flow_forcing=sc.forcing_flow_ex1,
        flow_fixed=None, flow_data=None, flow_initial=None,
        transport_forcing=sc.forcing_transport_ex1,
        transport_fixed=None,
        transport_data=lambda xy, t: sc.exact_transport_ex1(
            xy[:, 0], xy[:, 1], t),
        transport_initial=lambda xy: sc.exact_transport_ex1(
            xy[:, 0], xy[:, 1], 0.0),
    )


def _solved_lists(n_flow=2, n_transport=6, flow_levels=1,
                  transport_levels=2):
    spec = _ex1_spec()
    fl, tl = sm.init_slab_lists(1.0, n_flow, n_transport,
                                unit_square(flow_levels),
                                unit_square(transport_levels))
    ss.solve_flow_forward(fl, spec)
    ts.solve_primal_forward(tl, fl, spec)
    goal = ts.make_final_time_goal(sc.exact_transport_ex1, 1.0)
    ts.solve_dual_backward(tl, fl, spec, goal)
    return fl, tl, spec, goal


def test_indicators_affine_in_dual():
    # all dual-weighted terms are linear in z, the remaining terms do
    # not involve z, so eta(c z) - eta(0) = c (eta(z) - eta(0))
    fl, tl, spec, goal = _solved_lists()
    z0 = [slab.store["z"].copy() for slab in tl]

    def run(scale):
        for slab, z in zip(tl, z0):
            slab.store["z"] = scale * z
        return ee.compute_transport_indicators(tl, fl, spec, goal)

    base = run(0.0)
    one = run(1.0)
    two = run(2.0)
    for key in ("eta_tau_slabs", "eta_h_slabs"):
        lhs = two[key] - base[key]
        rhs = 2.0 * (one[key] - base[key])
        scale = max(1e-30, np.max(np.abs(rhs)))
        assert np.max(np.abs(lhs - rhs)) < 1e-12 * scale
    for slab, z in zip(tl, z0):
        slab.store["z"] = z


def test_rollup_identities():
    fl, tl, spec, goal = _solved_lists()
    ind = ee.compute_transport_indicators(tl, fl, spec, goal)
    for n in range(len(tl)):
        assert ind["eta_tau_slabs"][n] == np.sum(ind["eta_tau_cells"][n])
        assert ind["eta_h_slabs"][n] == np.sum(ind["eta_h_cells"][n])
    assert ind["eta_tau"] == pytest.approx(np.sum(ind["eta_tau_slabs"]),
                                           rel=1e-15, abs=0)
    assert ind["eta_h"] == pytest.approx(np.sum(ind["eta_h_slabs"]),
                                         rel=1e-15, abs=0)


def test_effectivity_values_and_zero_warning():
    assert ee.effectivity_index(0.04, -0.001, 0.02) == pytest.approx(1.95)
    assert ee.effectivity_index(-0.03, 0.0, 0.02) == pytest.approx(1.5)
    with pytest.warns(UserWarning):
        assert ee.effectivity_index(1.0, 0.0, 0.0) == np.inf


def test_flow_temporal_indicator_hand_values():
    mesh = unit_square(1)
    n2 = fc.dof_map(mesh, 2).n_dofs

    def slab_with(t0, t1, vx_val):
        s = Slab(t0, t1, mesh)
        s.store["vx"] = np.full(n2, vx_val)
        s.store["vy"] = np.zeros(n2)
        return s

    slabs = [slab_with(0.0, 0.5, 0.7), slab_with(0.5, 1.0, 0.7)]
    norms, total = ee.flow_temporal_indicator(slabs)
    # first jump is against the zero initial state on the unit square
    assert norms[0] == pytest.approx(0.7, rel=1e-12)
    assert norms[1] == pytest.approx(0.0, abs=1e-13)
    assert total == pytest.approx(np.sqrt(0.5 * 0.49), rel=1e-12)

    # matching initial data removes the first jump
    norms2, _ = ee.flow_temporal_indicator(
        slabs, flow_initial=lambda xy: np.stack(
            [np.full(len(xy), 0.7), np.zeros(len(xy))], axis=1))
    assert np.max(norms2) < 1e-13


def test_kelly_flow_rollup():
    fl, tl, spec, goal = _solved_lists()
    cells, svals, total = ee.compute_kelly_flow(fl)
    assert len(cells) == len(fl)
    for n, slab in enumerate(fl):
        assert svals[n] == pytest.approx(
            np.sqrt(np.sum(cells[n] ** 2)), rel=1e-12)
    want = np.sqrt(sum(s.tau * v * v for s, v in zip(fl, svals)))
    assert total == pytest.approx(want, rel=1e-12)
    assert total > 0.0


def test_manufactured_loop_effectivity():
    # coarse startup discretization of the rotating-hump benchmark:
    # the signed estimate must land within a factor four of the true
    # goal error, with the temporal part dominant and positive
    fl, tl, spec, goal = _solved_lists(2, 10, 1, 2)
    jerr = ts.goal_error(tl, goal, None)
    ind = ee.compute_transport_indicators(tl, fl, spec, goal)
    ieff = ee.effectivity_index(ind["eta_tau"], ind["eta_h"], jerr)
    assert 0.25 <= ieff <= 2.5
    assert ind["eta_tau"] > 0
    assert abs(ind["eta_h"]) < abs(ind["eta_tau"])
    assert 1e-2 < jerr < 6e-2
