"""Slabwise solver for the viscous flow subproblem.

Velocity is biquadratic, pressure bilinear (an inf-sup stable pair), and
time is discretized with one piecewise-constant unknown per slab. With
data sampled at the slab Gauss point this coincides with the implicit
Euler scheme. Layout of the monolithic slab system is

    [ vx | vy | p | (lam) ]

where lam is the mean-pressure multiplier, present only when the whole
boundary carries essential velocity data.

Scenario objects supply coefficients and boundary data through a small
attribute protocol:

    nu                  viscosity (> 0)
    flow_forcing        f(x, y, t) -> (npts, 2) body force, or None
    flow_fixed          predicate(x, y, side) -> bool marking essential
                        boundary, or None for the whole boundary
    flow_data           g(xy, t) -> (k, 2) essential values, or None
    flow_initial        v0(xy) -> (n, 2) initial velocity, or None
"""

import numpy as np
import scipy.sparse as sp

from . import fem_core as fc
from .linalg import ConstrainedOperator
from .slab_manager import transfer_between_meshes

V_DEG = 2
P_DEG = 1
# 3x3 Gauss integrates every matrix entry exactly; the source gets one
# extra point since manufactured forcings are not polynomial
NQ_MAT = 3
NQ_SRC = 4


class FlowSystem:
    """Assembled one-slab saddle system plus its dof layout."""

    def __init__(self, mesh, sigma, nu, all_dirichlet):
        self.mesh = mesh
        self.sigma = sigma
        self.nu = nu
        self.dm2 = fc.dof_map(mesh, V_DEG)
        self.dm1 = fc.dof_map(mesh, P_DEG)
        self.n2 = self.dm2.n_dofs
        self.n1 = self.dm1.n_dofs
        self.all_dirichlet = all_dirichlet
        self.n = 2 * self.n2 + self.n1 + (1 if all_dirichlet else 0)
        self.fixed = None
        self.fixed_values = None

    def offsets(self):
        return 0, self.n2, 2 * self.n2


def _block_diag_distribute(mesh, n_total, all_dirichlet):
    d2 = fc.distribute_matrix(mesh, V_DEG)
    d1 = fc.distribute_matrix(mesh, P_DEG)
    parts = [d2, d2, d1]
    if all_dirichlet:
        parts.append(sp.identity(1, format="csr"))
    D = sp.block_diag(parts, format="csr")
    assert D.shape == (n_total, n_total)
    s2 = fc.slave_dofs(mesh, V_DEG)
    s1 = fc.slave_dofs(mesh, P_DEG)
    n2 = d2.shape[0]
    slaves = np.concatenate([s2, s2 + n2, s1 + 2 * n2]).astype(np.int64)
    return D, slaves


def assemble_flow_step(slab, v_minus, forcing, spec):
    """Build the one-slab flow system.

    v_minus holds conforming velocity coefficients (n2, 2) at the left
    slab end on slab.mesh. forcing is a callable (x, y, t) -> (npts, 2)
    or None for zero body force. Boundary data is applied separately.
    """
    nu = float(spec.nu)
    if not nu > 0.0:
        raise ValueError("viscosity must be positive")
    mesh = slab.mesh
    sigma = slab.tau
    all_dirichlet = getattr(spec, "flow_fixed", None) is None
    sys_ = FlowSystem(mesh, sigma, nu, all_dirichlet)
    ox, oy, op_ = sys_.offsets()

    geom = fc.cell_geometry(mesh, NQ_MAT)
    cd2 = sys_.dm2.cell_dofs
    cd1 = sys_.dm1.cell_dofs
    cdx = cd2 + ox
    cdy = cd2 + oy
    cdp = cd1 + op_

    mass2 = fc.local_mass(geom, V_DEG)
    stiff2 = fc.local_stiffness(geom, V_DEG)
    avv = mass2 + sigma * nu * stiff2
    bx, by = fc.local_divergence(geom, P_DEG, V_DEG)

    pairs = [(cdx, cdx), (cdy, cdy), (cdx, cdp), (cdy, cdp),
             (cdp, cdx), (cdp, cdy)]
    ints = None
    if all_dirichlet:
        # one multiplier pins the pressure mean; its column enters the
        # continuity rows so the saddle system stays square
        t1 = fc.ref_tables(P_DEG, NQ_MAT)
        ints = np.einsum("cq,qi->ci", geom.jxw, t1["val"])
        lam = np.full((mesh.n_cells, 1), sys_.n - 1, dtype=np.int64)
        pairs += [(cdp, lam), (lam, cdp)]

    mat = fc.PatternMatrix(sys_.n, pairs)
    mat.add_blocks(cdx, cdx, avv)
    mat.add_blocks(cdy, cdy, avv)
    mat.add_blocks(cdx, cdp, -sigma * np.swapaxes(bx, 1, 2))
    mat.add_blocks(cdy, cdp, -sigma * np.swapaxes(by, 1, 2))
    mat.add_blocks(cdp, cdx, sigma * bx)
    mat.add_blocks(cdp, cdy, sigma * by)
    if all_dirichlet:
        mat.add_blocks(cdp, lam, sigma * ints[:, :, None])
        mat.add_blocks(lam, cdp, ints[:, None, :])

    sys_.mat = mat
    sys_.A_raw = mat.tocsr()
    sys_.D, sys_.slaves = _block_diag_distribute(mesh, sys_.n, all_dirichlet)
    sys_.bx, sys_.by, sys_.ints = bx, by, ints
    sys_.mass2 = mass2
    flow_rhs(sys_, slab, v_minus, forcing)
    return sys_


def flow_rhs(system, slab, v_minus, forcing):
    """Rebuild the load vector of an assembled slab system in place.

    The matrix depends only on (mesh, step, nu), so marching a new slab
    with the same mesh and step reuses it together with its factorization
    and only this vector changes.
    """
    mesh = system.mesh
    sigma = slab.tau
    cd2 = system.dm2.cell_dofs
    ox, oy, _ = system.offsets()
    n2 = system.n2
    rhs = np.zeros(system.n)
    vloc = v_minus[cd2]
    fc.scatter_vector(rhs[ox:ox + n2], cd2,
                      np.einsum("cij,cj->ci", system.mass2, vloc[:, :, 0]))
    fc.scatter_vector(rhs[oy:oy + n2], cd2,
                      np.einsum("cij,cj->ci", system.mass2, vloc[:, :, 1]))
    if forcing is not None:
        gsrc = fc.cell_geometry(mesh, NQ_SRC)
        qp = gsrc.qp.reshape(-1, 2)
        fq = np.asarray(forcing(qp[:, 0], qp[:, 1], slab.midpoint))
        fq = fq.reshape(mesh.n_cells, -1, 2)
        fc.scatter_vector(rhs[ox:ox + n2], cd2,
                          sigma * fc.local_source(gsrc, V_DEG, fq[:, :, 0]))
        fc.scatter_vector(rhs[oy:oy + n2], cd2,
                          sigma * fc.local_source(gsrc, V_DEG, fq[:, :, 1]))
    system.rhs = rhs
    return rhs


def apply_flow_bc(system, spec, t):
    """Attach essential velocity data at time t to an assembled system."""
    pred = getattr(spec, "flow_fixed", None)
    bnodes = system.dm2.boundary_nodes(pred)
    data = getattr(spec, "flow_data", None)
    if data is None:
        vals = np.zeros((bnodes.size, 2))
    else:
        vals = np.asarray(data(system.dm2.xy[bnodes], t), dtype=float)
    system.fixed = np.concatenate([bnodes, bnodes + system.n2])
    system.fixed_values = np.concatenate([vals[:, 0], vals[:, 1]])
    return system.fixed, system.fixed_values


def divergence_residual(system, vx, vy, lam):
    """Reduced continuity residual, reassembled independently.

    Returns the norm of D1^T (Bx vx + By vy + lam * ints) over the
    unconstrained pressure dofs; a multiplier contribution appears only
    on an all-Dirichlet boundary.
    """
    mesh = system.mesh
    cd2 = system.dm2.cell_dofs
    cd1 = system.dm1.cell_dofs
    r = np.zeros(system.n1)
    loc = (np.einsum("cij,cj->ci", system.bx, vx[cd2])
           + np.einsum("cij,cj->ci", system.by, vy[cd2]))
    if system.ints is not None:
        loc = loc + lam * system.ints
    fc.scatter_vector(r, cd1, loc)
    d1 = fc.distribute_matrix(mesh, P_DEG)
    rc = d1.T @ r
    free = np.ones(system.n1, dtype=bool)
    free[fc.slave_dofs(mesh, P_DEG)] = False
    return float(np.linalg.norm(rc[free]))


def solve_flow_step(system, op=None):
    """Factor and solve one assembled slab system.

    A prebuilt constrained operator may be passed to reuse its
    factorization; it must have been built from this system's matrix and
    fixed set. Returns a dict with the velocity components, pressure,
    multiplier value and the two audit numbers (relative divergence
    residual and relative reduced residual at the free dofs).
    """
    if op is None:
        op = ConstrainedOperator(system.A_raw, system.D, system.slaves,
                                 system.fixed)
    x = op.solve(system.rhs, system.fixed_values)
    n2, n1 = system.n2, system.n1
    vx = x[:n2]
    vy = x[n2:2 * n2]
    p = x[2 * n2:2 * n2 + n1]
    lam = float(x[-1]) if system.all_dirichlet else 0.0

    vnorm = float(np.hypot(np.linalg.norm(vx), np.linalg.norm(vy)))
    div = divergence_residual(system, vx, vy, lam)
    div_rel = div / max(vnorm, 1e-300) if vnorm > 0 else div

    bfree = system.D.T @ system.rhs
    bfree[op.locked] = 0.0
    nb = np.linalg.norm(bfree)
    orth_rel = op.residual_free_norm(x, system.rhs) / max(nb, 1e-300)

    return {"vx": vx, "vy": vy, "p": p, "lam": lam,
            "audit_div": div_rel, "audit_orth": orth_rel}


def solve_flow_forward(flow_list, spec):
    """Sweep every flow slab forward in time.

    Stores vx, vy, p, lam and the audit numbers in each slab.store and
    returns the worst audit values over the sweep. A slab whose mesh
    object and step match its predecessor's reuses the factorized slab
    operator; only the load vector and boundary values are rebuilt.
    Steps within relative 1e-12 count as equal, which perturbs the
    reused matrix at roundoff level only.
    """
    prev_mesh = None
    v_prev = None
    held = None
    forcing = getattr(spec, "flow_forcing", None)
    worst = {"div": 0.0, "orth": 0.0}
    for k, slab in enumerate(flow_list):
        mesh = slab.mesh
        dm2 = fc.dof_map(mesh, V_DEG)
        d2 = fc.distribute_matrix(mesh, V_DEG)
        if k == 0:
            init = getattr(spec, "flow_initial", None)
            if init is None:
                v_minus = np.zeros((dm2.n_dofs, 2))
            else:
                v_minus = d2 @ np.asarray(init(dm2.xy), dtype=float)
        elif mesh is prev_mesh:
            v_minus = v_prev
        else:
            v_minus = d2 @ transfer_between_meshes(
                prev_mesh, v_prev, mesh, V_DEG)
        if (held is not None and mesh is held["mesh"]
                and abs(slab.tau - held["tau"]) <= 1e-12 * held["tau"]):
            system, op = held["system"], held["op"]
            flow_rhs(system, slab, v_minus, forcing)
            fixed_before = system.fixed
            apply_flow_bc(system, spec, slab.midpoint)
            if not np.array_equal(system.fixed, fixed_before):
                op = ConstrainedOperator(system.A_raw, system.D,
                                         system.slaves, system.fixed)
        else:
            system = assemble_flow_step(slab, v_minus, forcing, spec)
            apply_flow_bc(system, spec, slab.midpoint)
            op = ConstrainedOperator(system.A_raw, system.D,
                                     system.slaves, system.fixed)
        held = {"mesh": mesh, "tau": slab.tau, "system": system, "op": op}
        out = solve_flow_step(system, op)
        slab.store.update(out)
        worst["div"] = max(worst["div"], out["audit_div"])
        worst["orth"] = max(worst["orth"], out["audit_orth"])
        v_prev = np.stack([out["vx"], out["vy"]], axis=1)
        prev_mesh = mesh
    return worst
