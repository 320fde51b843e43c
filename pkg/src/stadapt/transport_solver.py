"""Primal and dual solvers for the convected scalar.

One piecewise-constant unknown in time per slab; the spatial space is a
continuous tensor Lagrange space whose degree is a parameter (the dual
runs one degree higher than the primal so that estimator weights do not
collapse). Streamline diffusion stabilization weights the full step
residual with the streamline derivative of the test function; its
strength per cell is delta0 times the cell diameter.

The dual sweep reuses each slab's factorization transposed, so with
matching degrees it is the exact discrete adjoint of the primal chain.

Scenario attribute protocol consumed here:

    eps, alpha, delta0      diffusion, reaction, stabilization strength
    transport_forcing       g(x, y, t) -> (npts,), or None
    transport_fixed         predicate(x, y, side) for essential boundary,
                            or None for the whole boundary
    transport_data          g(xy, t) -> (k,) essential values, or None
    transport_initial       u0(xy) -> (n,), or None for zero
"""

import numpy as np

from . import fem_core as fc
from .linalg import ConstrainedOperator
from .slab_manager import find_flow_slab, transfer_between_meshes

NQ = 4


class TransportSystem:
    """One assembled slab step with its constraint reduction."""

    def __init__(self, mesh, tau, degree):
        self.mesh = mesh
        self.tau = tau
        self.degree = degree
        self.dm = fc.dof_map(mesh, degree)
        self.n = self.dm.n_dofs
        self.fixed = None
        self.fixed_values = None


def velocity_at_quadrature(mesh, v_hat, nq=NQ):
    """Flow samples at the transport quadrature points: (ncells, nq*nq, 2)."""
    geom = fc.cell_geometry(mesh, nq)
    t2 = fc.ref_tables(2, nq)
    cd2 = fc.dof_map(mesh, 2).cell_dofs
    return np.einsum("qi,cik->cqk", t2["val"], v_hat[cd2])


def _assemble_operator(slab, v_hat, spec, degree):
    """Slab operator, carry-over operator and constraint data."""
    mesh = slab.mesh
    tau = slab.tau
    eps = float(spec.eps)
    alpha = float(spec.alpha)
    delta0 = float(getattr(spec, "delta0", 0.0))
    sys_ = TransportSystem(mesh, tau, degree)
    cd = sys_.dm.cell_dofs

    geom = fc.cell_geometry(mesh, NQ)
    v_q = velocity_at_quadrature(mesh, v_hat, NQ)
    mass = fc.local_mass(geom, degree)
    stiff = fc.local_stiffness(geom, degree)
    conv = fc.local_convection(geom, degree, v_q)
    a_loc = mass + tau * (eps * stiff + conv + alpha * mass)
    cpl_loc = mass.copy()
    if delta0 > 0.0:
        delta = delta0 * mesh.diameters()
        s0, s1, vg = fc.local_supg(geom, degree, v_q, delta, eps, alpha)
        a_loc = a_loc + s0 + tau * s1
        cpl_loc = cpl_loc + s0
    else:
        delta = None
        vg = None

    mat = fc.PatternMatrix(sys_.n, [(cd, cd)])
    mat.add_blocks(cd, cd, a_loc)
    cplmat = fc.PatternMatrix(sys_.n, [(cd, cd)])
    cplmat.add_blocks(cd, cd, cpl_loc)
    sys_.A_raw = mat.tocsr()
    sys_.coupling_raw = cplmat.tocsr()
    sys_.D = fc.distribute_matrix(mesh, degree)
    sys_.slaves = fc.slave_dofs(mesh, degree)
    sys_.geom = geom
    sys_.delta = delta
    sys_.vg = vg
    return sys_


def assemble_primal_step(slab, u_minus, v_hat, spec, degree=1):
    """Build one slab step of the scalar scheme.

    u_minus: conforming coefficients on slab.mesh for the value carried
    over from the previous slab. v_hat: biquadratic flow coefficients
    (n2, 2) on slab.mesh. The system keeps the raw operator, the part of
    the right-hand side independent of u_minus, and the carry-over
    operator (mass plus streamline mass) needed by the dual sweep.
    """
    sys_ = _assemble_operator(slab, v_hat, spec, degree)
    mesh, tau, cd = sys_.mesh, sys_.tau, sys_.dm.cell_dofs
    b_ext = np.zeros(sys_.n)
    forcing = getattr(spec, "transport_forcing", None)
    if forcing is not None:
        geom = sys_.geom
        qp = geom.qp.reshape(-1, 2)
        g_q = np.asarray(forcing(qp[:, 0], qp[:, 1], slab.midpoint))
        g_q = g_q.reshape(mesh.n_cells, -1)
        fc.scatter_vector(b_ext, cd, tau * fc.local_source(geom, degree, g_q))
        if sys_.delta is not None:
            w = geom.jxw * (tau * sys_.delta)[:, None]
            fc.scatter_vector(b_ext, cd,
                              np.einsum("cq,cq,cqi->ci", w, g_q, sys_.vg))
    sys_.b_ext = b_ext
    sys_.rhs = sys_.coupling_raw @ u_minus + b_ext
    return sys_


def assemble_dual_step(slab, v_hat, spec, degree=2):
    """Slab operator for the backward sweep (no source terms).

    The returned system carries the primal-form operator in the dual's
    space; the sweep applies it transposed.
    """
    return _assemble_operator(slab, v_hat, spec, degree)


def apply_transport_bc(system, spec, t):
    """Attach essential data at time t to an assembled scalar system."""
    pred = getattr(spec, "transport_fixed", None)
    bnodes = system.dm.boundary_nodes(pred)
    data = getattr(spec, "transport_data", None)
    if data is None:
        vals = np.zeros(bnodes.size)
    else:
        vals = np.asarray(data(system.dm.xy[bnodes], t), dtype=float)
    system.fixed = bnodes
    system.fixed_values = vals
    return bnodes, vals


def flow_on_transport_slab(flow_list, transport_slab, flow_initial=None,
                           exact_velocity=None):
    """Flow velocity of the containing slab, and of the slab before it,
    both as conforming biquadratic coefficients on the transport mesh.

    The slab before the first one falls back to the initial flow field
    (zero when absent). Passing flow_list=None with an exact_velocity
    callable interpolates that field at the slab midpoint instead, with
    no distinction between the slab and its predecessor.
    """
    if flow_list is None:
        mesh = transport_slab.mesh
        dm2 = fc.dof_map(mesh, 2)
        d2 = fc.distribute_matrix(mesh, 2)
        v = d2 @ np.asarray(
            exact_velocity(dm2.xy, transport_slab.midpoint), dtype=float)
        return v, v
    k = find_flow_slab(flow_list, transport_slab.midpoint)
    fslab = flow_list[k]
    if not (fslab.t0 <= transport_slab.t0 and transport_slab.t1 <= fslab.t1):
        raise AssertionError("transport slab crosses a flow slab boundary")
    mesh = transport_slab.mesh
    d2 = fc.distribute_matrix(mesh, 2)

    def carry(slab_field_mesh, field):
        return d2 @ transfer_between_meshes(slab_field_mesh, field, mesh, 2)

    v_n = carry(fslab.mesh, np.stack(
        [fslab.store["vx"], fslab.store["vy"]], axis=1))
    if k == 0:
        dmf = fc.dof_map(flow_list[0].mesh, 2)
        if flow_initial is None:
            v0 = np.zeros((dmf.n_dofs, 2))
        else:
            v0 = np.asarray(flow_initial(dmf.xy), dtype=float)
        v_p = carry(flow_list[0].mesh, v0)
    else:
        prev = flow_list[k - 1]
        v_p = carry(prev.mesh, np.stack(
            [prev.store["vx"], prev.store["vy"]], axis=1))
    return v_n, v_p


def solve_primal_forward(transport_list, flow_list, spec, degree=1):
    """Sweep the scalar forward, storing per-slab state.

    Each slab.store receives: u, u_minus (conforming carried value),
    vhat, vhat_prev (flow of the containing and the preceding flow
    slab on this mesh) and the orthogonality audit.
    """
    prev_mesh = None
    u_prev = None
    worst = 0.0
    for k, slab in enumerate(transport_list):
        mesh = slab.mesh
        dm = fc.dof_map(mesh, degree)
        D = fc.distribute_matrix(mesh, degree)
        if k == 0:
            init = getattr(spec, "transport_initial", None)
            raw = np.zeros(dm.n_dofs) if init is None \
                else np.asarray(init(dm.xy), dtype=float)
            u_minus = D @ raw
        elif mesh is prev_mesh:
            u_minus = u_prev
        else:
            u_minus = D @ transfer_between_meshes(
                prev_mesh, u_prev, mesh, degree)
        v_hat, v_prev = flow_on_transport_slab(
            flow_list, slab, getattr(spec, "flow_initial", None),
            getattr(spec, "exact_velocity", None))
        system = assemble_primal_step(slab, u_minus, v_hat, spec, degree)
        apply_transport_bc(system, spec, slab.midpoint)
        op = ConstrainedOperator(system.A_raw, system.D, system.slaves,
                                 system.fixed)
        u = op.solve(system.rhs, system.fixed_values)

        bfree = system.D.T @ system.rhs
        bfree[op.locked] = 0.0
        nb = np.linalg.norm(bfree)
        orth = op.residual_free_norm(u, system.rhs) / max(nb, 1e-300)
        worst = max(worst, orth)

        slab.store.update(u=u, u_minus=u_minus, vhat=v_hat, vhat_prev=v_prev,
                          audit_orth=orth)
        u_prev = u
        prev_mesh = mesh
    return worst


# -- goal functionals ------------------------------------------------------


def make_final_time_goal(exact, T):
    """Normalized final-time pairing: J(u) = (u(T), e)/|e| with
    e = exact(T) - u_h(T-)."""
    return {"kind": "final_time", "exact": exact, "T": T}


def make_mean_goal(T, area):
    """Space-time mean: J(u) = 1/(T |Omega|) int int u."""
    return {"kind": "mean", "T": T, "area": area}


def final_time_weight(transport_list, goal, degree=1):
    """Quadrature samples of the normalized final-time error weight.

    Returns (w_q, enorm) on the last slab's mesh; w_q has unit L2 norm.
    """
    slab = transport_list[-1]
    mesh = slab.mesh
    geom = fc.cell_geometry(mesh, NQ)
    tabs = fc.ref_tables(degree, NQ)
    cd = fc.dof_map(mesh, degree).cell_dofs
    u_q = np.einsum("qi,ci->cq", tabs["val"], slab.store["u"][cd])
    qp = geom.qp.reshape(-1, 2)
    e_q = goal["exact"](qp[:, 0], qp[:, 1], goal["T"]).reshape(u_q.shape) \
        - u_q
    enorm = np.sqrt(float(np.sum(geom.jxw * e_q * e_q)))
    if enorm == 0.0:
        return np.zeros_like(e_q), 0.0
    return e_q / enorm, enorm


def eval_goal(transport_list, goal, degree=1):
    """Value of the goal functional on the stored primal solution."""
    if goal["kind"] == "mean":
        total = 0.0
        for slab in transport_list:
            geom = fc.cell_geometry(slab.mesh, NQ)
            tabs = fc.ref_tables(degree, NQ)
            cd = fc.dof_map(slab.mesh, degree).cell_dofs
            u_q = np.einsum("qi,ci->cq", tabs["val"], slab.store["u"][cd])
            total += slab.tau * float(np.sum(geom.jxw * u_q))
        return total / (goal["T"] * goal["area"])
    if goal["kind"] == "final_time":
        w_q, _ = final_time_weight(transport_list, goal, degree)
        slab = transport_list[-1]
        geom = fc.cell_geometry(slab.mesh, NQ)
        tabs = fc.ref_tables(degree, NQ)
        cd = fc.dof_map(slab.mesh, degree).cell_dofs
        u_q = np.einsum("qi,ci->cq", tabs["val"], slab.store["u"][cd])
        return float(np.sum(geom.jxw * w_q * u_q))
    raise ValueError(f"unknown goal kind {goal['kind']!r}")


def goal_error(transport_list, goal, exact, degree=1):
    """J(u) - J(u_h) against a known exact solution.

    For the normalized final-time goal this is the final-time L2 error
    itself; for the mean goal the exact field is integrated with a
    three-point Gauss rule per slab.
    """
    if goal["kind"] == "final_time":
        _, enorm = final_time_weight(transport_list, goal, degree)
        return enorm
    gt, gw = fc.gauss_points(3)
    total = 0.0
    for slab in transport_list:
        geom = fc.cell_geometry(slab.mesh, NQ)
        tabs = fc.ref_tables(degree, NQ)
        cd = fc.dof_map(slab.mesh, degree).cell_dofs
        u_q = np.einsum("qi,ci->cq", tabs["val"], slab.store["u"][cd])
        qp = geom.qp.reshape(-1, 2)
        for a, w in zip(gt, gw):
            t = slab.t0 + slab.tau * a
            e_q = exact(qp[:, 0], qp[:, 1], t).reshape(u_q.shape) - u_q
            total += slab.tau * w * float(np.sum(geom.jxw * e_q))
    return total / (goal["T"] * goal["area"])


def goal_vector(slab, goal, idx, nslabs, degree):
    """Raw goal load vector for one slab of the dual sweep."""
    mesh = slab.mesh
    geom = fc.cell_geometry(mesh, NQ)
    tabs = fc.ref_tables(degree, NQ)
    cd = fc.dof_map(mesh, degree).cell_dofs
    j = np.zeros(fc.dof_map(mesh, degree).n_dofs)
    if goal["kind"] == "mean":
        loc = np.einsum("cq,qi->ci", geom.jxw, tabs["val"])
        fc.scatter_vector(j, cd, slab.tau / (goal["T"] * goal["area"]) * loc)
    elif goal["kind"] == "final_time":
        if idx == nslabs - 1:
            w_q = goal["_w_q"]
            loc = np.einsum("cq,cq,qi->ci", geom.jxw, w_q, tabs["val"])
            fc.scatter_vector(j, cd, loc)
    else:
        raise ValueError(f"unknown goal kind {goal['kind']!r}")
    return j


def solve_dual_backward(transport_list, flow_list, spec, goal,
                        degree=2, primal_degree=1):
    """Sweep the dual backward, storing z per slab.

    The operator on each slab is the primal form assembled in the dual's
    own space; the factorization is applied transposed, and carry-over
    between slabs uses the transposed mass-plus-streamline operator and
    the transposed mesh transfer. Essential dual data is homogeneous on
    the primal's essential boundary.
    """
    if goal["kind"] == "final_time":
        w_q, enorm = final_time_weight(transport_list, goal, primal_degree)
        goal["_w_q"] = w_q
    n = len(transport_list)
    carry = None
    carry_mesh = None
    for idx in range(n - 1, -1, -1):
        slab = transport_list[idx]
        mesh = slab.mesh
        v_hat, _ = flow_on_transport_slab(
            flow_list, slab, getattr(spec, "flow_initial", None),
            getattr(spec, "exact_velocity", None))
        system = assemble_dual_step(slab, v_hat, spec, degree)
        apply_transport_bc(system, spec, slab.midpoint)
        b_raw = goal_vector(slab, goal, idx, n, degree)
        if carry is not None:
            if carry_mesh is mesh:
                b_raw = b_raw + carry
            else:
                T = fc.transfer_matrix(mesh, carry_mesh, degree)
                b_raw = b_raw + T.T @ carry
        op = ConstrainedOperator(system.A_raw, system.D, system.slaves,
                                 system.fixed)
        z = op.solve_transposed(b_raw)
        slab.store["z"] = z
        carry = system.D.T @ (system.coupling_raw.T @ z)
        carry_mesh = mesh
    return transport_list
