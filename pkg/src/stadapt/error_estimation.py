"""Goal-oriented space-time error indicators.

The transport indicators are one-sided residual representations, one
per discretization level. The temporal part weighs the adjoint residual
with the gap between the piecewise constant primal and its continuous
linear-in-time reconstruction, which the enriched dual solution sees in
full. The spatial part weighs the primal residual with the gap between
the biquadratic dual and its bilinear restriction; the mirrored bracket
would pair a weight that lies inside the dual test space and vanishes
by Galerkin orthogonality, so it is not assembled. Both parts carry the
velocity-deficiency coupling terms of the multirate splitting. Cell
values are signed; slab values are their plain sums and the totals are
the sums over slabs, so every roll-up is exact by construction.

The flow side uses cheaper surrogates: jump-based gradient indicators
in space (Kelly style) and the size of the solution jumps between slabs
in time.
"""

import warnings

import numpy as np

from . import fem_core as fc
from .mesh2d import E, N, S, W
from .slab_manager import find_flow_slab, transfer_between_meshes

NQ = 4
NT = 3


def reconstruct_time(t_left, v_left, t_right, v_right, t):
    """Linear-in-time reconstruction through the two slab anchor values."""
    lam = (t - t_left) / (t_right - t_left)
    return v_left + lam * (np.asarray(v_right) - v_left)


class PatchInterpolant:
    """Two-level patch interpolant I_2h of a nodal field."""

    def __init__(self, mesh, degree, coeffs):
        self.degree = degree
        self.parent, _, self.patches = fc.patchwise_coefficients(
            mesh, degree, coeffs)

    def eval(self, points, grad=False, cells=None):
        return fc.patch_eval(self.parent, self.patches, 2 * self.degree,
                             points, grad=grad, cells=cells)


def interpolate_patch_2h(mesh, degree, coeffs):
    """Patch interpolant of a field on a patch-structured mesh."""
    return PatchInterpolant(mesh, degree, coeffs)


def restrict_space(mesh, z2):
    """Restriction of a biquadratic field to the bilinear subspace."""
    return fc.restrict_q2_q1(mesh, z2)


def restriction_deficiency(mesh, z2):
    """z - embedded restriction of z, as biquadratic coefficients."""
    return z2 - fc.embed_q1_q2(mesh, restrict_space(mesh, z2))


def effectivity_index(eta_tau, eta_h, true_error):
    """|estimate / true error| with signed estimator parts."""
    if true_error == 0.0:
        warnings.warn("true goal error is zero, effectivity undefined")
        return np.inf
    return abs((eta_tau + eta_h) / true_error)


def _values(tabs, coeffs, cd):
    return np.einsum("qi,ci->cq", tabs["val"], coeffs[cd])


def _gradients(geom, degree, coeffs, cd):
    gx, gy = fc.grad_tables(geom, degree)
    return np.stack([np.einsum("cqi,ci->cq", gx, coeffs[cd]),
                     np.einsum("cqi,ci->cq", gy, coeffs[cd])], axis=2)


def _a_form(jxw, eps, alpha, v_q, u_q, du_q, w_q, dw_q):
    """Cellwise a(u; v)(w) = eps (grad u, grad w) + (v.grad u, w)
    + alpha (u, w)."""
    diff = eps * np.einsum("cq,cqk,cqk->c", jxw, du_q, dw_q)
    conv = np.einsum("cq,cq,cq->c", jxw,
                     np.einsum("cqk,cqk->cq", v_q, du_q), w_q)
    reac = alpha * np.einsum("cq,cq,cq->c", jxw, u_q, w_q)
    return diff + conv + reac


def compute_transport_indicators(transport_list, flow_list, spec, goal,
                                 primal_degree=1, dual_degree=2):
    """Signed temporal and spatial cell indicators for every slab.

    Requires the primal and dual sweeps to have stored u, u_minus, vhat,
    vhat_prev and z on each slab. Returns a dict with per-slab cell
    arrays, per-slab sums, the two totals and a component breakdown
    under "parts".
    """
    eps = float(spec.eps)
    alpha = float(spec.alpha)
    delta0 = float(getattr(spec, "delta0", 0.0))
    forcing = getattr(spec, "transport_forcing", None)
    mean_goal = goal["kind"] == "mean"
    if mean_goal:
        jscale = 1.0 / (goal["T"] * goal["area"])
    gt, gw = fc.gauss_points(NT)

    eta_tau_cells = []
    eta_h_cells = []
    parts = {"tau_adjoint": 0.0, "tau_couple": 0.0,
             "h_residual": 0.0, "h_stab": 0.0}
    for slab in transport_list:
        mesh = slab.mesh
        tau = slab.tau
        geom = fc.cell_geometry(mesh, NQ)
        jxw = geom.jxw
        qp = geom.qp.reshape(-1, 2)
        tab1 = fc.ref_tables(primal_degree, NQ)
        tab2 = fc.ref_tables(dual_degree, NQ)
        cd1 = fc.dof_map(mesh, primal_degree).cell_dofs
        cd2 = fc.dof_map(mesh, dual_degree).cell_dofs

        u = slab.store["u"]
        u_minus = slab.store["u_minus"]
        z = slab.store["z"]
        vhat = slab.store["vhat"]
        vhat_prev = slab.store["vhat_prev"]

        u_q = _values(tab1, u, cd1)
        du_q = _gradients(geom, primal_degree, u, cd1)
        um_q = _values(tab1, u_minus, cd1)
        jn_q = u_q - um_q
        z_q = _values(tab2, z, cd2)
        dz_q = _gradients(geom, dual_degree, z, cd2)

        cdv = fc.dof_map(mesh, 2).cell_dofs
        tabv = fc.ref_tables(2, NQ)
        v_q = np.einsum("qi,cik->cqk", tabv["val"], vhat[cdv])
        dv_q = np.einsum("qi,cik->cqk", tabv["val"],
                         (vhat_prev - vhat)[cdv])

        # spatial dual weight: gap of z to its bilinear restriction
        wz = restriction_deficiency(mesh, z)
        wz_q = _values(tab2, wz, cd2)
        dwz_q = _gradients(geom, dual_degree, wz, cd2)
        wv = fc.TwoLevelDeficiency(mesh, 2, vhat)
        wv_q = wv.eval(qp).reshape(v_q.shape)

        # -- temporal indicator -----------------------------------------
        # adjoint residual with the reconstruction gap of the primal as
        # weight, uhat - u = -(1 - (t - t0)/tau) J_n; the decaying ramp
        # integrates to tau/2
        djn_q = _gradients(geom, primal_degree, u - u_minus, cd1)
        a_du_z = _a_form(jxw, eps, alpha, v_q, -jn_q, -djn_q, z_q, dz_q)
        if mean_goal:
            jprime_tau = 0.5 * tau * jscale * np.einsum(
                "cq,cq->c", jxw, -jn_q)
        else:
            jprime_tau = np.zeros(mesh.n_cells)
        adjoint_part = jprime_tau - 0.5 * tau * a_du_z

        if flow_list is not None:
            k = find_flow_slab(flow_list, slab.midpoint)
            fs = flow_list[k]
            mu_bar = (fs.t1 - slab.midpoint) / fs.tau
        else:
            mu_bar = 0.0
        couple = tau * mu_bar * np.einsum(
            "cq,cq,cq->c", jxw, np.einsum("cqk,cqk->cq", dv_q, du_q), z_q)

        eta_tau = adjoint_part - couple
        eta_tau_cells.append(eta_tau)
        parts["tau_adjoint"] += float(np.sum(adjoint_part))
        parts["tau_couple"] += float(np.sum(couple))

        # -- spatial indicator ------------------------------------------
        g_wz = np.zeros(mesh.n_cells)
        if forcing is not None:
            for a_t, w_t in zip(gt, gw):
                t = slab.t0 + tau * a_t
                g_q = np.asarray(forcing(qp[:, 0], qp[:, 1], t)
                                 ).reshape(u_q.shape)
                g_wz += tau * w_t * np.einsum("cq,cq,cq->c", jxw, g_q, wz_q)
        a_u_wz = _a_form(jxw, eps, alpha, v_q, u_q, du_q, wz_q, dwz_q)
        jn_wz = np.einsum("cq,cq,cq->c", jxw, jn_q, wz_q)
        residual_part = g_wz - tau * a_u_wz - jn_wz

        vdz_q = np.einsum("cqk,cqk->cq", v_q, dz_q)
        if forcing is not None:
            g_mid = np.asarray(forcing(qp[:, 0], qp[:, 1], slab.midpoint)
                               ).reshape(u_q.shape)
        else:
            g_mid = np.zeros_like(u_q)
        strong = jn_q / tau + np.einsum("cqk,cqk->cq", v_q, du_q) \
            + alpha * u_q - g_mid
        if delta0 > 0.0:
            delta = delta0 * mesh.diameters()
            supg_part = delta * tau * np.einsum(
                "cq,cq,cq->c", jxw, strong, vdz_q)
        else:
            supg_part = np.zeros(mesh.n_cells)
        wv_du_z = np.einsum(
            "cq,cq,cq->c", jxw,
            np.einsum("cqk,cqk->cq", wv_q, du_q), z_q)
        d_h = supg_part - tau * wv_du_z

        eta_h = residual_part + d_h
        eta_h_cells.append(eta_h)
        parts["h_residual"] += float(np.sum(residual_part))
        parts["h_stab"] += float(np.sum(d_h))

    eta_tau_slabs = np.array([float(np.sum(c)) for c in eta_tau_cells])
    eta_h_slabs = np.array([float(np.sum(c)) for c in eta_h_cells])
    return {
        "eta_tau_cells": eta_tau_cells,
        "eta_h_cells": eta_h_cells,
        "eta_tau_slabs": eta_tau_slabs,
        "eta_h_slabs": eta_h_slabs,
        "eta_tau": float(np.sum(eta_tau_slabs)),
        "eta_h": float(np.sum(eta_h_slabs)),
        "parts": parts,
    }


# -- flow surrogates -------------------------------------------------------

_SIDE_AXIS = {W: 0, E: 0, S: 1, N: 1}


def kelly_cell_indicators(mesh, v):
    """Squared gradient-jump indicators of a velocity field, per cell.

    eta_K^2 = sum over faces of (h_F / 24) * 1/2 * int_F sum_k
    [dv_k/dn]^2, integrated from the finer side of each face with a
    three-point Gauss rule; both neighbors receive the face value.
    """
    gs, gw = fc.gauss_points(3)
    pts_all = []
    mine_all = []
    nb_all = []
    axis_all = []
    hf_all = []
    for c in range(mesh.n_cells):
        cid = mesh.cell_ids[c]
        x0, y0, x1, y1 = mesh.bounds[c]
        hx, hy = x1 - x0, y1 - y0
        for side in (W, E, S, N):
            loc = mesh.shift(cid, side)
            if loc is None:
                continue
            kind, nid = mesh.resolve(loc)
            if kind == "finer":
                continue
            if kind == "active" and side in (W, S):
                continue
            nb = mesh.cell_index[nid]
            if side in (W, E):
                x = x0 if side == W else x1
                pts = np.column_stack([np.full(3, x), y0 + gs * hy])
                hf = hy
            else:
                y = y0 if side == S else y1
                pts = np.column_stack([x0 + gs * hx, np.full(3, y)])
                hf = hx
            pts_all.append(pts)
            mine_all.append(c)
            nb_all.append(nb)
            axis_all.append(_SIDE_AXIS[side])
            hf_all.append(hf)

    eta2 = np.zeros(mesh.n_cells)
    if not pts_all:
        return eta2
    pts = np.concatenate(pts_all)
    nf = len(mine_all)
    cmine = np.repeat(np.asarray(mine_all, dtype=np.int64), 3)
    cnb = np.repeat(np.asarray(nb_all, dtype=np.int64), 3)
    _, gm = fc.evaluate_field(mesh, 2, v, pts, grad=True, cells=cmine)
    _, gn = fc.evaluate_field(mesh, 2, v, pts, grad=True, cells=cnb)
    jump = (gm - gn).reshape(nf, 3, 2, 2)
    axis = np.asarray(axis_all)
    hf = np.asarray(hf_all)
    jn = jump[np.arange(nf)[:, None], np.arange(3)[None, :], axis[:, None], :]
    face_int = hf * np.einsum("fq,q->f", np.einsum("fqk->fq", jn * jn), gw)
    contrib = (hf / 24.0) * 0.5 * face_int
    np.add.at(eta2, np.asarray(mine_all), contrib)
    np.add.at(eta2, np.asarray(nb_all), contrib)
    return eta2


def compute_kelly_flow(flow_list):
    """Per-slab cell indicators and the flow spatial roll-up.

    Returns (cells, slab_values, total): cells is a list of per-cell
    eta_K arrays, slab_values the square roots of the cell sums, and
    total = sqrt(sum_n sigma_n sum_K eta_K^2).
    """
    cells = []
    slab_vals = np.empty(len(flow_list))
    total2 = 0.0
    for n, slab in enumerate(flow_list):
        v = np.stack([slab.store["vx"], slab.store["vy"]], axis=1)
        eta2 = kelly_cell_indicators(slab.mesh, v)
        cells.append(np.sqrt(eta2))
        s2 = float(np.sum(eta2))
        slab_vals[n] = np.sqrt(s2)
        total2 += slab.tau * s2
    return cells, slab_vals, float(np.sqrt(total2))


def flow_temporal_indicator(flow_list, flow_initial=None):
    """Per-slab L2 norms of the velocity jumps at the slab starts.

    Returns (slab_norms, total) with total = sqrt(sum sigma_n norm^2).
    The first slab jumps against the initial velocity (zero by default).
    """
    norms = np.empty(len(flow_list))
    prev_mesh = None
    prev_v = None
    for n, slab in enumerate(flow_list):
        mesh = slab.mesh
        v = np.stack([slab.store["vx"], slab.store["vy"]], axis=1)
        if n == 0:
            dm2 = fc.dof_map(mesh, 2)
            if flow_initial is None:
                vp = np.zeros((dm2.n_dofs, 2))
            else:
                vp = fc.distribute_matrix(mesh, 2) @ np.asarray(
                    flow_initial(dm2.xy), dtype=float)
        elif mesh is prev_mesh:
            vp = prev_v
        else:
            vp = fc.distribute_matrix(mesh, 2) @ transfer_between_meshes(
                prev_mesh, prev_v, mesh, 2)
        jump = v - vp
        geom = fc.cell_geometry(mesh, 3)
        tab = fc.ref_tables(2, 3)
        cd = fc.dof_map(mesh, 2).cell_dofs
        j_q = np.einsum("qi,cik->cqk", tab["val"], jump[cd])
        norms[n] = np.sqrt(float(np.einsum("cq,cqk,cqk->", geom.jxw,
                                           j_q, j_q)))
        prev_mesh = mesh
        prev_v = v
    total = float(np.sqrt(np.sum([s.tau * nn * nn
                                  for s, nn in zip(flow_list, norms)])))
    return norms, total
