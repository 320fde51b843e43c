"""Space-time slab lists for the two subproblems.

Each slab carries exactly one time cell (temporal refinement is slab
splitting), one spatial mesh shared by all its time DoFs, and a store for
solver coefficients. Multirate alignment means every flow breakpoint is
also a transport breakpoint; splits always cut at 0.5*(t0+t1) or at a
verbatim copy of the other list's breakpoint, so alignment is exact float
set inclusion, not tolerance matching.
"""

import csv

import numpy as np

from . import fem_core


def compute_characteristic_times(eps, alpha, L=1.0, V=1.0):
    """(t_flow, t_transport) of the dimensionless problem."""
    if min(eps, alpha, L, V) <= 0.0:
        raise ValueError("characteristic times need positive eps, alpha, L, V")
    t_flow = L / V
    t_transport = min(L * L / eps, L / V, 1.0 / alpha)
    return t_flow, t_transport


class Slab:
    """One space-time patch: interval (t0, t1], spatial mesh, solution store."""

    __slots__ = ("t0", "t1", "mesh", "store")

    def __init__(self, t0, t1, mesh):
        if not t1 > t0:
            raise ValueError("slab interval must have positive length")
        self.t0 = t0
        self.t1 = t1
        self.mesh = mesh
        self.store = {}

    @property
    def tau(self):
        return self.t1 - self.t0

    @property
    def midpoint(self):
        return 0.5 * (self.t0 + self.t1)


class SlabList:
    """Ordered slabs covering (0, T] for one subproblem."""

    def __init__(self, tag, slabs):
        self.tag = tag
        self.slabs = list(slabs)
        self.audit_partition()

    def __len__(self):
        return len(self.slabs)

    def __iter__(self):
        return iter(self.slabs)

    def __getitem__(self, i):
        return self.slabs[i]

    @property
    def T(self):
        return self.slabs[-1].t1

    def breakpoints(self):
        return np.array([s.t0 for s in self.slabs] + [self.slabs[-1].t1])

    def taus(self):
        return np.array([s.tau for s in self.slabs])

    def audit_partition(self):
        if not self.slabs:
            raise ValueError("empty slab list")
        for a, b in zip(self.slabs, self.slabs[1:]):
            if a.t1 != b.t0:
                raise ValueError(
                    f"{self.tag} slabs do not abut at t={a.t1!r}/{b.t0!r}")
        if any(s.tau <= 0 for s in self.slabs):
            raise ValueError("nonpositive slab length")

    def split(self, marks):
        """New list with every marked slab bisected at its midpoint."""
        marked = set(int(m) for m in marks)
        out = []
        for i, s in enumerate(self.slabs):
            if i in marked:
                m = s.midpoint
                out.append(Slab(s.t0, m, s.mesh))
                out.append(Slab(m, s.t1, s.mesh))
            else:
                out.append(Slab(s.t0, s.t1, s.mesh))
        return SlabList(self.tag, out)

    def split_at_times(self, times, snap=1e-12):
        """New list with the given breakpoints inserted (alignment repair).

        An existing breakpoint within snap * T of an incoming time is
        moved onto it exactly: the two lattices reach the same instant
        through different float arithmetic (repeated averaging of a
        non-dyadic step walks a few ulp off the dyadic value), and a
        verbatim cut there would leave an ulp-wide sliver slab. Each
        genuinely new time must fall strictly inside some slab, which
        is cut there; values are copied verbatim either way so later
        set inclusion is exact.
        """
        out = list(self.slabs)
        tol = snap * (out[-1].t1 - out[0].t0)
        for t in times:
            t = float(t)
            for i, s in enumerate(out):
                if abs(s.t0 - t) <= tol:
                    if s.t0 != t:
                        out[i] = Slab(t, s.t1, s.mesh)
                        if i > 0:
                            p = out[i - 1]
                            out[i - 1] = Slab(p.t0, t, p.mesh)
                    break
                if abs(s.t1 - t) <= tol:
                    if s.t1 != t:
                        out[i] = Slab(s.t0, t, s.mesh)
                        if i + 1 < len(out):
                            nx = out[i + 1]
                            out[i + 1] = Slab(t, nx.t1, nx.mesh)
                    break
                if s.t0 < t < s.t1:
                    out[i:i + 1] = [Slab(s.t0, t, s.mesh),
                                    Slab(t, s.t1, s.mesh)]
                    break
            else:
                raise ValueError(f"breakpoint {t!r} outside (0, T)")
        return SlabList(self.tag, out)

    def replace_meshes(self, meshes):
        """New list with the same intervals and the given per-slab meshes."""
        if len(meshes) != len(self.slabs):
            raise ValueError("one mesh per slab required")
        return SlabList(self.tag, [Slab(s.t0, s.t1, m)
                                   for s, m in zip(self.slabs, meshes)])


def init_slab_lists(T, n_flow, n_transport, flow_mesh, transport_mesh):
    """Equidistant startup lists, one time cell per slab.

    Transport breakpoints are built per flow slab so the flow endpoints are
    shared floats, not near-equal values.
    """
    if n_flow > n_transport:
        raise ValueError("flow list may not be finer than transport")
    if n_transport % n_flow != 0:
        raise ValueError("misaligned endpoint sets: n_transport must be a "
                         "multiple of n_flow")
    fb = np.linspace(0.0, T, n_flow + 1)
    flow = SlabList("flow", [Slab(fb[i], fb[i + 1], flow_mesh)
                             for i in range(n_flow)])
    m = n_transport // n_flow
    tslabs = []
    for i in range(n_flow):
        sub = np.linspace(fb[i], fb[i + 1], m + 1)
        sub[0] = fb[i]
        sub[-1] = fb[i + 1]
        for j in range(m):
            tslabs.append(Slab(sub[j], sub[j + 1], transport_mesh))
    transport = SlabList("transport", tslabs)
    audit_alignment(flow, transport)
    return flow, transport


def find_flow_slab(flow_list, t):
    """Index of the flow slab with t in (t0, t1] (left-open convention)."""
    bp = flow_list.breakpoints()
    if not (bp[0] < t <= bp[-1]):
        raise ValueError(f"time {t} outside (0, {bp[-1]}]")
    return int(np.searchsorted(bp, t, side="left")) - 1


def audit_alignment(flow_list, transport_list):
    """Flow breakpoints must be a subset of transport breakpoints (exact)."""
    fb = flow_list.breakpoints()
    tb = transport_list.breakpoints()
    tset = set(tb.tolist())
    T = fb[-1]
    for t in fb:
        if t in tset:
            continue
        near = tb[np.argmin(np.abs(tb - t))]
        if abs(near - t) <= 1e-12 * T:
            raise AssertionError(
                f"alignment drift: flow breakpoint {t!r} vs transport {near!r}")
        raise AssertionError(f"flow breakpoint {t!r} missing from transport")
    if len(flow_list) > len(transport_list):
        raise AssertionError("flow temporal mesh finer than transport")
    for lst in (flow_list, transport_list):
        for s in lst:
            if s.tau <= 1e-10 * T:
                raise AssertionError(
                    f"degenerate slab [{s.t0!r}, {s.t1!r}] in {lst.tag}")


def transfer_between_meshes(src_mesh, field, dst_mesh, degree):
    """Nodal interpolation of a source field onto a target mesh.

    Each target DoF takes the value of the source FE function at the
    target node's location; exact when the target refines the source.
    Trailing component axes pass through.
    """
    T = fem_core.transfer_matrix(src_mesh, dst_mesh, degree)
    if field.ndim == 1:
        return T @ field
    out = np.empty((T.shape[0],) + field.shape[1:])
    for c in range(field.shape[1]):
        out[:, c] = T @ field[:, c]
    return out


def write_slabs_csv(path, flow_list, transport_list):
    """Per-slab summary: (subproblem, n, t_left, t_right, cells, dofs)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["subproblem", "n", "t_left", "t_right", "cells", "dofs"])
        for n, s in enumerate(flow_list, start=1):
            nv = fem_core.dof_map(s.mesh, 2).n_dofs
            npr = fem_core.dof_map(s.mesh, 1).n_dofs
            wr.writerow(["flow", n, repr(s.t0), repr(s.t1),
                         s.mesh.n_cells, 2 * nv + npr])
        for n, s in enumerate(transport_list, start=1):
            nd = fem_core.dof_map(s.mesh, 1).n_dofs
            wr.writerow(["transport", n, repr(s.t0), repr(s.t1),
                         s.mesh.n_cells, nd])


def l2l2_error(slab_list, exact, field_of, degree, nq=4, nt=3):
    """Space-time L2 distance between a slabwise field and a function.

    field_of(slab) returns coefficients on slab.mesh ((n,) scalar or
    (n, k) components), held constant in time over the slab. exact is a
    callable (x, y, t) with matching component shape. Time integration
    uses an nt-point Gauss rule per slab.
    """
    gt, gw = fem_core.gauss_points(nt)
    total = 0.0
    for slab in slab_list:
        mesh = slab.mesh
        coeffs = np.asarray(field_of(slab), dtype=float)
        geom = fem_core.cell_geometry(mesh, nq)
        tabs = fem_core.ref_tables(degree, nq)
        cd = fem_core.dof_map(mesh, degree).cell_dofs
        if coeffs.ndim == 1:
            vals = np.einsum("qi,ci->cq", tabs["val"], coeffs[cd])
        else:
            vals = np.einsum("qi,cik->cqk", tabs["val"], coeffs[cd])
        qp = geom.qp.reshape(-1, 2)
        for a, w in zip(gt, gw):
            t = slab.t0 + slab.tau * a
            ex = np.asarray(exact(qp[:, 0], qp[:, 1], t))
            diff = ex.reshape(vals.shape) - vals
            if diff.ndim == 3:
                sq = np.einsum("cqk,cqk->cq", diff, diff)
            else:
                sq = diff * diff
            total += slab.tau * w * float(np.sum(geom.jxw * sq))
    return np.sqrt(total)


def l2l2_error_reconstructed(slab_list, exact, field_of, degree,
                             initial=None, nq=4, nt=3):
    """Space-time L2 distance using the linear-in-time reconstruction.

    The slab field is anchored at the slab endpoints: the left value is
    the previous slab's field carried to the current mesh (the initial
    state on the first slab, zero by default), the right value the
    slab's own. This matches how downstream consumers lift the
    piecewise-constant trajectory.
    """
    gt, gw = fem_core.gauss_points(nt)
    total = 0.0
    prev_mesh = None
    prev = None
    for slab in slab_list:
        mesh = slab.mesh
        right = np.asarray(field_of(slab), dtype=float)
        if prev is None:
            if initial is None:
                left = np.zeros_like(right)
            else:
                xy = fem_core.dof_map(mesh, degree).xy
                left = fem_core.distribute_matrix(mesh, degree) @ \
                    np.asarray(initial(xy), dtype=float)
        elif prev_mesh is mesh:
            left = prev
        else:
            left = fem_core.distribute_matrix(mesh, degree) @ \
                transfer_between_meshes(prev_mesh, prev, mesh, degree)
        geom = fem_core.cell_geometry(mesh, nq)
        tabs = fem_core.ref_tables(degree, nq)
        cd = fem_core.dof_map(mesh, degree).cell_dofs
        qp = geom.qp.reshape(-1, 2)
        for a, w in zip(gt, gw):
            t = slab.t0 + slab.tau * a
            coeffs = left + a * (right - left)
            if coeffs.ndim == 1:
                vals = np.einsum("qi,ci->cq", tabs["val"], coeffs[cd])
            else:
                vals = np.einsum("qi,cik->cqk", tabs["val"], coeffs[cd])
            ex = np.asarray(exact(qp[:, 0], qp[:, 1], t))
            diff = ex.reshape(vals.shape) - vals
            if diff.ndim == 3:
                sq = np.einsum("cqk,cqk->cq", diff, diff)
            else:
                sq = diff * diff
            total += slab.tau * w * float(np.sum(geom.jxw * sq))
        prev_mesh = mesh
        prev = right
    return np.sqrt(total)
