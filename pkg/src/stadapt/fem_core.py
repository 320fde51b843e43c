"""Finite element core: reference elements, DoF maps, assembly.

1D Lagrange bases on uniform lattices of [0,1] and their tensor products
on the unit square; Gauss and Gauss-Lobatto rules; dG(r) temporal bases;
global DoF enumeration with hanging-node constraints on one-irregular
quadtree meshes; mesh-to-mesh nodal transfer; patchwise two-level
interpolation; cellwise block assembly into fixed-pattern CSR storage.

DoF identity is by quantized node coordinates, so coinciding nodes of
neighboring cells (and of different meshes over the same root grid) share
ids exactly. All cells are axis-aligned rectangles, so element integrals
reduce to reference-cell tensor Gauss sums with per-cell scale factors.
"""

import numpy as np
import scipy.sparse as sp

from .kernels import csr_block_scatter
from .mesh2d import W, E, S, N, SIDES

_P = np.polynomial.polynomial


# ---------------------------------------------------------------------
# reference elements and quadrature
# ---------------------------------------------------------------------

def gauss_points(n):
    """Gauss-Legendre rule with `n` points, mapped to [0,1].

    Parameters
    ----------
    n : int
        Number of points, n >= 1.

    Returns
    -------
    points, weights : ndarray
        Both of shape (n,). Exact for polynomials of degree 2n-1;
        weights sum to 1.
    """
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


# Gauss-Lobatto nodes/weights on [0,1], endpoints included.
_SQ5 = np.sqrt(5.0)
_SQ37 = np.sqrt(3.0 / 7.0)
_LOBATTO = {
    2: ([0.0, 1.0], [0.5, 0.5]),
    3: ([0.0, 0.5, 1.0], [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]),
    4: ([0.0, 0.5 * (1.0 - 1.0 / _SQ5), 0.5 * (1.0 + 1.0 / _SQ5), 1.0],
        [1.0 / 12.0, 5.0 / 12.0, 5.0 / 12.0, 1.0 / 12.0]),
    5: ([0.0, 0.5 * (1.0 - _SQ37), 0.5, 0.5 * (1.0 + _SQ37), 1.0],
        [1.0 / 20.0, 49.0 / 180.0, 16.0 / 45.0, 49.0 / 180.0, 1.0 / 20.0]),
}


def gauss_lobatto_points(n):
    """Gauss-Lobatto rule with `n` points on [0,1] (endpoints included).

    Supported n: 2..5. Exact for polynomials of degree 2n-3.
    """
    if n not in _LOBATTO:
        raise ValueError(f"gauss_lobatto_points supports n in 2..5, got {n}")
    pts, wts = _LOBATTO[n]
    return np.asarray(pts, dtype=float), np.asarray(wts, dtype=float)


def lagrange_coefficients(degree):
    """Monomial coefficients of the 1D Lagrange basis on {i/degree}.

    Returns an array of shape (degree+1, degree+1); row i holds the
    low-to-high coefficients of the basis function that is 1 at i/degree.
    """
    nodes = np.linspace(0.0, 1.0, degree + 1)
    coefs = np.zeros((degree + 1, degree + 1))
    for i in range(degree + 1):
        c = _P.polyfromroots(np.delete(nodes, i))
        coefs[i, : c.size] = c / _P.polyval(nodes[i], c)
    return coefs


def lagrange_tables_1d(degree, t):
    """Values and first/second derivatives of the 1D basis at points `t`.

    Returns (v, d1, d2), each of shape (len(t), degree+1).
    """
    t = np.asarray(t, dtype=float)
    coefs = lagrange_coefficients(degree)
    v = np.stack([_P.polyval(t, c) for c in coefs], axis=1)
    d1 = np.stack([_P.polyval(t, _P.polyder(c)) for c in coefs], axis=1)
    d2 = np.stack([_P.polyval(t, _P.polyder(c, 2)) for c in coefs], axis=1)
    return v, d1, d2


def lattice_points(degree):
    """Nodal lattice of the tensor element, shape ((degree+1)**2, 2).

    Local index convention everywhere: node (i, j) -> i + (degree+1)*j,
    x index running fastest.
    """
    s = np.linspace(0.0, 1.0, degree + 1)
    X, Y = np.meshgrid(s, s, indexing="xy")
    return np.column_stack([X.ravel(), Y.ravel()])


def shape_tables(degree, points):
    """Tensor-product shape data at reference points.

    Parameters
    ----------
    degree : int
        Polynomial degree per coordinate direction.
    points : ndarray (npts, 2)
        Evaluation points in the reference square [0,1]^2.

    Returns
    -------
    dict with arrays of shape (npts, (degree+1)**2):
    'val', 'dx', 'dy' (reference derivatives) and 'dxx', 'dyy'
    (reference second derivatives, needed for strong residuals).
    """
    points = np.asarray(points, dtype=float)
    vx, dx1, dx2 = lagrange_tables_1d(degree, points[:, 0])
    vy, dy1, dy2 = lagrange_tables_1d(degree, points[:, 1])

    def tensor(ax, ay):
        # (npts, i) x (npts, j) -> (npts, i + (p+1) j)
        n = degree + 1
        out = ax[:, :, None] * ay[:, None, :]
        return out.transpose(0, 2, 1).reshape(points.shape[0], n * n)

    return {
        "val": tensor(vx, vy),
        "dx": tensor(dx1, vy),
        "dy": tensor(vx, dy1),
        "dxx": tensor(dx2, vy),
        "dyy": tensor(vx, dy2),
    }


def tensor_rule(n):
    """Tensor Gauss rule on the unit square: (points (n*n,2), weights (n*n,))."""
    t, w = gauss_points(n)
    X, Y = np.meshgrid(t, t, indexing="xy")
    W = np.outer(w, w)  # W[j, i] pairs y-weight j with x-weight i
    return np.column_stack([X.ravel(), Y.ravel()]), W.ravel()


# ---------------------------------------------------------------------
# global spaces: DoF maps, constraints, transfer, two-level operators
# ---------------------------------------------------------------------

# 2**33; coordinates are multiples of 2**-k for moderate k away from the
# root grid lines, so rounding at this scale is collision free at desk scale
KEY_SCALE = 8589934592.0


def node_key(x, y):
    return (int(round(x * KEY_SCALE)), int(round(y * KEY_SCALE)))


def _coord(a, b, i, p):
    # endpoint and midpoint exact so shared nodes get identical floats
    if i == 0:
        return a
    if i == p:
        return b
    if 2 * i == p:
        return 0.5 * (a + b)
    return a + (b - a) * (i / p)


def edge_locals(side, degree):
    """Local indices along a cell side, ordered by the edge parameter."""
    n = degree + 1
    if side == W:
        return [n * j for j in range(n)]
    if side == E:
        return [degree + n * j for j in range(n)]
    if side == S:
        return list(range(n))
    return [n * degree + i for i in range(n)]


class DofMap:
    """Global numbering of the (p+1)^2 tensor Lagrange nodes per cell."""

    def __init__(self, mesh, degree):
        self.mesh = mesh
        self.degree = degree
        p = degree
        nloc = (p + 1) ** 2
        key2id = {}
        coords = []
        cd = np.empty((mesh.n_cells, nloc), dtype=np.int64)
        for c in range(mesh.n_cells):
            x0, y0, x1, y1 = mesh.bounds[c]
            for j in range(p + 1):
                y = _coord(y0, y1, j, p)
                for i in range(p + 1):
                    x = _coord(x0, x1, i, p)
                    k = node_key(x, y)
                    gid = key2id.get(k)
                    if gid is None:
                        gid = len(coords)
                        key2id[k] = gid
                        coords.append((x, y))
                    cd[c, i + (p + 1) * j] = gid
        self.cell_dofs = cd
        self.xy = np.array(coords)
        self.n_dofs = len(coords)
        self.key2id = key2id

    def boundary_nodes(self, predicate=None):
        """Dof ids on the domain boundary.

        predicate(x, y, side), if given, receives the node coordinates and
        the boundary side code and keeps the nodes where it returns True.
        """
        keep = set()
        locs = {s: edge_locals(s, self.degree) for s in SIDES}
        for ci, side in self.mesh.boundary_sides():
            for gid in self.cell_dofs[ci, locs[side]]:
                if predicate is None:
                    keep.add(int(gid))
                else:
                    x, y = self.xy[gid]
                    if predicate(x, y, side):
                        keep.add(int(gid))
        return np.array(sorted(keep), dtype=np.int64)


def dof_map(mesh, degree):
    key = ("dofmap", degree)
    if key not in mesh.cache:
        mesh.cache[key] = DofMap(mesh, degree)
    return mesh.cache[key]


# 1D quadratic trace weights at edge parameters 1/4 and 3/4, Lagrange
# nodes {0, 1/2, 1}
_Q2_TRACE_LO = (0.375, 0.75, -0.125)
_Q2_TRACE_HI = (-0.125, 0.75, 0.375)

_OPPOSITE = {W: E, E: W, S: N, N: S}


def hanging_constraints(mesh, degree):
    """slave dof -> [(master dof, weight)], closed under substitution."""
    key = ("constraints", degree)
    if key in mesh.cache:
        return mesh.cache[key]
    dm = dof_map(mesh, degree)
    raw = {}
    for cid in mesh.cell_ids:
        ci = mesh.cell_index[cid]
        for side in SIDES:
            loc = mesh.shift(cid, side)
            if loc is None:
                continue
            kind, node = mesh.resolve(loc)
            if kind != "finer":
                continue
            # cid is the coarse side of a hanging edge; the two half-edge
            # cells are node's children facing us, low parameter first
            kids = mesh._EDGE_CHILDREN[side]
            fine = [(node[0], node[1] + (d,)) for d in kids]
            fidx = []
            for f in fine:
                if f not in mesh.cell_index:
                    raise ValueError("mesh is not one-irregular")
                fidx.append(mesh.cell_index[f])
            masters = dm.cell_dofs[ci, edge_locals(side, degree)]
            lo = dm.cell_dofs[fidx[0], edge_locals(_OPPOSITE[side], degree)]
            hi = dm.cell_dofs[fidx[1], edge_locals(_OPPOSITE[side], degree)]
            if degree == 1:
                raw[int(lo[1])] = [(int(masters[0]), 0.5),
                                   (int(masters[1]), 0.5)]
            else:
                raw[int(lo[1])] = [(int(m), w) for m, w
                                   in zip(masters, _Q2_TRACE_LO)]
                raw[int(hi[1])] = [(int(m), w) for m, w
                                   in zip(masters, _Q2_TRACE_HI)]
    # masters may hang on a still coarser edge; substitute until clean
    changed = True
    while changed:
        changed = False
        for s, terms in list(raw.items()):
            if not any(m in raw for m, _ in terms):
                continue
            acc = {}
            for m, w in terms:
                if m in raw:
                    for mm, ww in raw[m]:
                        acc[mm] = acc.get(mm, 0.0) + w * ww
                else:
                    acc[m] = acc.get(m, 0.0) + w
            raw[s] = sorted(acc.items())
            changed = True
    mesh.cache[key] = raw
    return raw


def distribute_matrix(mesh, degree):
    """Square matrix D with identity at free dofs and constraint weights
    in slave rows (slave columns are zero)."""
    key = ("distribute", degree)
    if key in mesh.cache:
        return mesh.cache[key]
    dm = dof_map(mesh, degree)
    cons = hanging_constraints(mesh, degree)
    n = dm.n_dofs
    rows, cols, vals = [], [], []
    for i in range(n):
        if i not in cons:
            rows.append(i)
            cols.append(i)
            vals.append(1.0)
    for s, terms in cons.items():
        for m, w in terms:
            rows.append(s)
            cols.append(m)
            vals.append(w)
    D = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    D.sort_indices()
    mesh.cache[key] = D
    return D


def slave_dofs(mesh, degree):
    return np.array(sorted(hanging_constraints(mesh, degree)), dtype=np.int64)


# -- point evaluation -----------------------------------------------------


def _ref_coords(mesh, cells, points):
    b = mesh.bounds[cells]
    xi = (points[:, 0] - b[:, 0]) / mesh.hx[cells]
    eta = (points[:, 1] - b[:, 1]) / mesh.hy[cells]
    return np.clip(xi, 0.0, 1.0), np.clip(eta, 0.0, 1.0)


def evaluate_field(mesh, degree, coeffs, points, grad=False, cells=None):
    """Point values (and optionally gradients) of a nodal field.

    coeffs may carry trailing component axes. Returns vals with shape
    (npts, *comp); with grad=True returns (vals, grads) where grads has
    shape (npts, 2, *comp).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if cells is None:
        cells = mesh.locate(pts)
    dm = dof_map(mesh, degree)
    xi, eta = _ref_coords(mesh, cells, pts)
    tabs = shape_tables(degree, np.column_stack([xi, eta]))
    local = coeffs[dm.cell_dofs[cells]]  # (npts, nloc, *comp)
    vals = np.einsum("pl,pl...->p...", tabs["val"], local)
    if not grad:
        return vals
    gx = np.einsum("pl,pl...->p...", tabs["dx"], local)
    gy = np.einsum("pl,pl...->p...", tabs["dy"], local)
    sx = (1.0 / mesh.hx[cells]).reshape((-1,) + (1,) * (local.ndim - 2))
    sy = (1.0 / mesh.hy[cells]).reshape((-1,) + (1,) * (local.ndim - 2))
    grads = np.stack([gx * sx, gy * sy], axis=1)
    return vals, grads


def transfer_matrix(src_mesh, dst_mesh, degree):
    """Rows evaluate the source basis at every destination node.

    Conforming use multiplies by the destination distribute matrix. The
    transpose is reused by the backward-in-time dual sweep.
    """
    # the cached entry pins src_mesh: its id must stay unrecycled for as
    # long as the destination cache can serve this key
    key = ("transfer", id(src_mesh), degree)
    if key in dst_mesh.cache:
        return dst_mesh.cache[key][1]
    sdm = dof_map(src_mesh, degree)
    ddm = dof_map(dst_mesh, degree)
    cells = src_mesh.locate(ddm.xy)
    xi, eta = _ref_coords(src_mesh, cells, ddm.xy)
    tabs = shape_tables(degree, np.column_stack([xi, eta]))["val"]
    nloc = tabs.shape[1]
    rows = np.repeat(np.arange(ddm.n_dofs), nloc)
    cols = sdm.cell_dofs[cells].ravel()
    T = sp.csr_matrix((tabs.ravel(), (rows, cols)),
                      shape=(ddm.n_dofs, sdm.n_dofs))
    T.sort_indices()
    dst_mesh.cache[key] = (src_mesh, T)
    return T


# -- same-mesh degree exchange -------------------------------------------


def q2_at_q1_indices(mesh):
    """For each Q1 dof, the Q2 dof at the same node."""
    key = ("q2@q1",)
    if key not in mesh.cache:
        d1 = dof_map(mesh, 1)
        d2 = dof_map(mesh, 2)
        idx = np.empty(d1.n_dofs, dtype=np.int64)
        for gid in range(d1.n_dofs):
            idx[gid] = d2.key2id[node_key(*d1.xy[gid])]
        mesh.cache[key] = idx
    return mesh.cache[key]


def embed_q1_q2(mesh, u1):
    """Q2 coefficients of a conforming Q1 field (exact embedding)."""
    key = ("embed12",)
    if key not in mesh.cache:
        tab = shape_tables(1, lattice_points(2))["val"]
        mesh.cache[key] = tab  # (9, 4)
    tab = mesh.cache[key]
    d1 = dof_map(mesh, 1)
    d2 = dof_map(mesh, 2)
    u2 = np.zeros(d2.n_dofs if u1.ndim == 1 else (d2.n_dofs,) + u1.shape[1:])
    vals = np.einsum("ql,cl...->cq...", tab, u1[d1.cell_dofs])
    u2[d2.cell_dofs] = vals
    return u2


def restrict_q2_q1(mesh, z2):
    """Q1 coefficients: gather Q2 values at the vertices, then distribute."""
    z1 = z2[q2_at_q1_indices(mesh)]
    return distribute_matrix(mesh, 1) @ z1


# -- two-level patch interpolation ---------------------------------------


def patchwise_coefficients(mesh, degree, coeffs):
    """Gather nodal values onto the (2p+1)^2 lattice of each parent patch.

    Requires a patch-structured mesh. Returns (parent_mesh, children,
    patches) where patches[q] are the degree-2p tensor Lagrange
    coefficients of the interpolant on parent cell q.
    """
    parent, children = mesh.patch_parent()
    dm = dof_map(mesh, degree)
    p = degree
    n = 2 * p + 1
    shape = (parent.n_cells, n * n) + coeffs.shape[1:]
    patches = np.empty(shape)
    for d in range(4):
        cx, cy = d & 1, d >> 1
        lat = np.array([(cx * p + a) + n * (cy * p + b)
                        for b in range(p + 1) for a in range(p + 1)])
        patches[:, lat] = coeffs[dm.cell_dofs[children[:, d]]]
    return parent, children, patches


def patch_eval(parent_mesh, patches, degree2p, points, grad=False,
               cells=None):
    """Evaluate the per-patch degree-2p polynomials at arbitrary points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if cells is None:
        cells = parent_mesh.locate(pts)
    xi, eta = _ref_coords(parent_mesh, cells, pts)
    tabs = shape_tables(degree2p, np.column_stack([xi, eta]))
    local = patches[cells]
    vals = np.einsum("pl,pl...->p...", tabs["val"], local)
    if not grad:
        return vals
    gx = np.einsum("pl,pl...->p...", tabs["dx"], local)
    gy = np.einsum("pl,pl...->p...", tabs["dy"], local)
    sx = (1.0 / parent_mesh.hx[cells]).reshape((-1,) + (1,) * (local.ndim - 2))
    sy = (1.0 / parent_mesh.hy[cells]).reshape((-1,) + (1,) * (local.ndim - 2))
    return vals, np.stack([gx * sx, gy * sy], axis=1)


class TwoLevelDeficiency:
    """w = I_2h f - f for a nodal field on a patch-structured mesh.

    I_2h interpolates the field on the 2h patch lattice by one degree-2p
    polynomial per parent cell. The deficiency is kept in evaluated form
    (patch data plus the original field), which stays single valued even
    across hanging patch boundaries.
    """

    def __init__(self, mesh, degree, coeffs):
        self.mesh = mesh
        self.degree = degree
        self.coeffs = coeffs
        self.parent, _, self.patches = patchwise_coefficients(
            mesh, degree, coeffs)

    def eval(self, points, grad=False):
        hi = patch_eval(self.parent, self.patches, 2 * self.degree,
                        points, grad=grad)
        lo = evaluate_field(self.mesh, self.degree, self.coeffs,
                            points, grad=grad)
        if grad:
            return hi[0] - lo[0], hi[1] - lo[1]
        return hi - lo


# ---------------------------------------------------------------------
# cellwise assembly
# ---------------------------------------------------------------------

_REF_CACHE = {}


def ref_tables(degree, nq):
    """Reference basis tables of one degree at the nq x nq Gauss rule."""
    key = (degree, nq)
    if key not in _REF_CACHE:
        pts, wts = tensor_rule(nq)
        tabs = shape_tables(degree, pts)
        tabs = dict(tabs)
        tabs["pts"] = pts
        tabs["wts"] = wts
        _REF_CACHE[key] = tabs
    return _REF_CACHE[key]


class CellGeometry:
    """Physical quadrature points and weights for every cell of a mesh."""

    def __init__(self, mesh, nq):
        self.mesh = mesh
        self.nq = nq
        pts, wts = tensor_rule(nq)
        b = mesh.bounds
        self.qp = np.empty((mesh.n_cells, pts.shape[0], 2))
        self.qp[:, :, 0] = b[:, None, 0] + pts[None, :, 0] * mesh.hx[:, None]
        self.qp[:, :, 1] = b[:, None, 1] + pts[None, :, 1] * mesh.hy[:, None]
        self.area = mesh.hx * mesh.hy
        self.jxw = wts[None, :] * self.area[:, None]
        self.wts = wts


def cell_geometry(mesh, nq):
    key = ("geom", nq)
    if key not in mesh.cache:
        mesh.cache[key] = CellGeometry(mesh, nq)
    return mesh.cache[key]


# -- local blocks ---------------------------------------------------------
# Conventions: trial index j, test index i; blocks are (ncells, ntest,
# ntrial). Velocity samples v_q have shape (ncells, nq*nq, 2).


def local_mass(geom, degree):
    t = ref_tables(degree, geom.nq)
    mref = np.einsum("q,qi,qj->ij", t["wts"], t["val"], t["val"])
    return geom.area[:, None, None] * mref


def local_stiffness(geom, degree):
    t = ref_tables(degree, geom.nq)
    kx = np.einsum("q,qi,qj->ij", t["wts"], t["dx"], t["dx"])
    ky = np.einsum("q,qi,qj->ij", t["wts"], t["dy"], t["dy"])
    m = geom.mesh
    return ((m.hy / m.hx)[:, None, None] * kx
            + (m.hx / m.hy)[:, None, None] * ky)


def grad_tables(geom, degree):
    """Physical-space gradient tables per cell: (ncells, nq*nq, nloc, 2)."""
    t = ref_tables(degree, geom.nq)
    m = geom.mesh
    gx = t["dx"][None, :, :] / m.hx[:, None, None]
    gy = t["dy"][None, :, :] / m.hy[:, None, None]
    return gx, gy


def conv_test_tables(geom, degree, v_q):
    """(v . grad phi_i) at the quadrature points: (ncells, nq*nq, nloc)."""
    gx, gy = grad_tables(geom, degree)
    return v_q[:, :, 0, None] * gx + v_q[:, :, 1, None] * gy


def local_convection(geom, degree, v_q):
    """(v . grad u, phi) blocks."""
    t = ref_tables(degree, geom.nq)
    vg = conv_test_tables(geom, degree, v_q)
    return np.einsum("q,qi,cqj,c->cij", t["wts"], t["val"], vg, geom.area)


def local_weighted_mass(geom, degree, w_q):
    """(w u, phi) blocks for a scalar quadrature-point weight w_q."""
    t = ref_tables(degree, geom.nq)
    return np.einsum("cq,q,qi,qj,c->cij", w_q, t["wts"], t["val"], t["val"],
                     geom.area)


def local_laplacian_values(geom, degree):
    """Laplacian of the basis at quadrature points: (ncells, nq*nq, nloc)."""
    t = ref_tables(degree, geom.nq)
    m = geom.mesh
    return (t["dxx"][None] / (m.hx ** 2)[:, None, None]
            + t["dyy"][None] / (m.hy ** 2)[:, None, None])


def local_supg(geom, degree, v_q, delta, eps, alpha):
    """Streamline blocks delta_K (u_t-less residual, v . grad phi).

    Returns (lhs_blocks, test_tables): lhs carries
    delta_K (u + tau(-eps lap u + v . grad u + alpha u), v . grad phi)
    split by the caller into the tau-free and tau parts; here we return
    the pieces so the caller composes with its own tau:
      S0 = (u, v.grad phi), S1 = (-eps lap u + v.grad u + alpha u, v.grad phi)
    both scaled by delta_K.
    """
    t = ref_tables(degree, geom.nq)
    vg = conv_test_tables(geom, degree, v_q)
    w = t["wts"][None, :] * (delta * geom.area)[:, None]
    s0 = np.einsum("cq,qj,cqi->cij", w, t["val"], vg)
    res = -eps * local_laplacian_values(geom, degree) + vg \
        + alpha * t["val"][None]
    s1 = np.einsum("cq,cqj,cqi->cij", w, res, vg)
    return s0, s1, vg


def local_divergence(geom, p_degree, v_degree):
    """(chi_i, d phi_j / dx) and (chi_i, d phi_j / dy) mixed blocks."""
    tp = ref_tables(p_degree, geom.nq)
    tv = ref_tables(v_degree, geom.nq)
    bx = np.einsum("q,qi,qj->ij", tp["wts"], tp["val"], tv["dx"])
    by = np.einsum("q,qi,qj->ij", tp["wts"], tp["val"], tv["dy"])
    m = geom.mesh
    return m.hy[:, None, None] * bx, m.hx[:, None, None] * by


def local_source(geom, degree, f_q):
    """(f, phi) vectors from quadrature-point samples: (ncells, nloc)."""
    t = ref_tables(degree, geom.nq)
    return np.einsum("cq,q,qi,c->ci", f_q, t["wts"], t["val"], geom.area)


def scatter_vector(vec, cell_dofs, local):
    np.add.at(vec, cell_dofs.ravel(), local.ravel())


# -- fixed-pattern matrix -------------------------------------------------


class PatternMatrix:
    """CSR matrix with a frozen sparsity pattern and block-add assembly."""

    def __init__(self, n, block_index_pairs):
        rows_all = []
        cols_all = []
        for rows, cols in block_index_pairs:
            r = np.broadcast_to(rows[:, :, None],
                                (rows.shape[0], rows.shape[1], cols.shape[1]))
            c = np.broadcast_to(cols[:, None, :],
                                (cols.shape[0], rows.shape[1], cols.shape[1]))
            rows_all.append(r.ravel())
            cols_all.append(c.ravel())
        r = np.concatenate(rows_all)
        c = np.concatenate(cols_all)
        pat = sp.csr_matrix((np.ones(r.size), (r, c)), shape=(n, n))
        pat.sort_indices()
        self.n = n
        self.indptr = pat.indptr.astype(np.int64)
        self.indices = pat.indices.astype(np.int64)
        self.data = np.zeros(self.indices.size)

    def zero(self):
        self.data[:] = 0.0

    def add_blocks(self, rows, cols, blocks):
        csr_block_scatter(self.indptr, self.indices, self.data,
                          np.ascontiguousarray(rows, dtype=np.int64),
                          np.ascontiguousarray(cols, dtype=np.int64),
                          np.ascontiguousarray(blocks, dtype=float),
                          self.n)

    def add_diagonal(self, idx, val):
        one = np.asarray(idx, dtype=np.int64).reshape(-1, 1)
        vals = np.full((one.shape[0], 1, 1), float(val))
        self.add_blocks(one, one, vals)

    def tocsr(self):
        return sp.csr_matrix((self.data, self.indices, self.indptr),
                             shape=(self.n, self.n))


# ---------------------------------------------------------------------
# dG(r) temporal bases
# ---------------------------------------------------------------------


class TimeBasis:
    """Lagrange basis of degree r on a time cell (t_a, t_b].

    Nodes sit at the r+1 Gauss points of the cell, so dG(r) coefficient
    vectors are point values at those times. Reproduces every polynomial
    of degree <= r exactly.
    """

    def __init__(self, r, t_a, t_b):
        if not (0 <= r <= 2):
            raise ValueError("temporal degree r must be 0, 1 or 2")
        self.r = r
        self.t_a = float(t_a)
        self.t_b = float(t_b)
        pts, wts = gauss_points(r + 1)
        self.nodes = t_a + (t_b - t_a) * pts
        self.weights = (t_b - t_a) * wts
        nodes_ref = pts
        coefs = np.zeros((r + 1, r + 1))
        for i in range(r + 1):
            c = _P.polyfromroots(np.delete(nodes_ref, i))
            coefs[i, : c.size] = c / _P.polyval(nodes_ref[i], c)
        self._coefs = coefs

    def eval(self, t):
        """Basis values at times t, shape (len(t), r+1)."""
        s = (np.asarray(t, dtype=float) - self.t_a) / (self.t_b - self.t_a)
        return np.stack([_P.polyval(s, c) for c in self._coefs], axis=-1)
