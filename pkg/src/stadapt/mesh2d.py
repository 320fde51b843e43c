"""Quadtree-forest meshes over axis-aligned rectangular root grids.

A cell is identified by (root, path): the root cell's index in the shared
grid plus the tuple of child digits descending from it (digit bit 0 = east
half, bit 1 = north half). Meshes are immutable; refinement and coarsening
return new meshes over the same grid, so cell ids keep their meaning across
slabs and adaptation loops and geometry stays bitwise reproducible (child
bounds come from exact midpoint halving of the parent bounds).
"""

import numpy as np

# side codes
W, E, S, N = 0, 1, 2, 3
SIDES = (W, E, S, N)


class RootGrid:
    """Occupied subset of an nx-by-ny grid of equal rectangles.

    Parameters
    ----------
    xs, ys : array_like
        Grid line coordinates, ascending, lengths nx+1 and ny+1.
    occupied : iterable of (i, j)
        Grid positions that carry a root cell.
    """

    def __init__(self, xs, ys, occupied):
        self.xs = np.asarray(xs, dtype=float)
        self.ys = np.asarray(ys, dtype=float)
        self.nx = self.xs.size - 1
        self.ny = self.ys.size - 1
        cells = sorted(set(occupied))
        for i, j in cells:
            if not (0 <= i < self.nx and 0 <= j < self.ny):
                raise ValueError(f"root position {(i, j)} outside grid")
        self.cells = cells
        self.index = {c: k for k, c in enumerate(cells)}

    @classmethod
    def box(cls, x0, y0, x1, y1, nx=1, ny=1):
        xs = np.linspace(x0, x1, nx + 1)
        ys = np.linspace(y0, y1, ny + 1)
        occ = [(i, j) for j in range(ny) for i in range(nx)]
        return cls(xs, ys, occ)

    @classmethod
    def union_of_boxes(cls, boxes, edge):
        """Square root cells of side `edge` tiling a union of rectangles.

        Rectangle corners must sit on the common `edge` lattice.
        """
        x0 = min(b[0] for b in boxes)
        y0 = min(b[1] for b in boxes)
        x1 = max(b[2] for b in boxes)
        y1 = max(b[3] for b in boxes)
        nx = int(round((x1 - x0) / edge))
        ny = int(round((y1 - y0) / edge))
        xs = np.linspace(x0, x1, nx + 1)
        ys = np.linspace(y0, y1, ny + 1)
        for b in boxes:
            for v, origin in ((b[0], x0), (b[2], x0), (b[1], y0), (b[3], y0)):
                k = (v - origin) / edge
                if abs(k - round(k)) > 1e-9:
                    raise ValueError("rectangle corner off the edge lattice")
        occ = []
        for j in range(ny):
            for i in range(nx):
                cx = x0 + (i + 0.5) * edge
                cy = y0 + (j + 0.5) * edge
                if any(b[0] < cx < b[2] and b[1] < cy < b[3] for b in boxes):
                    occ.append((i, j))
        return cls(xs, ys, occ)

    def root_bounds(self, k):
        i, j = self.cells[k]
        return (self.xs[i], self.ys[j], self.xs[i + 1], self.ys[j + 1])

    def neighbor_root(self, k, side):
        """Adjacent root index on `side`, or None at the domain boundary."""
        i, j = self.cells[k]
        if side == W:
            i -= 1
        elif side == E:
            i += 1
        elif side == S:
            j -= 1
        else:
            j += 1
        return self.index.get((i, j))


def _child_bounds(bounds, digit):
    x0, y0, x1, y1 = bounds
    xm = 0.5 * (x0 + x1)
    ym = 0.5 * (y0 + y1)
    if digit & 1:
        x0 = xm
    else:
        x1 = xm
    if digit & 2:
        y0 = ym
    else:
        y1 = ym
    return (x0, y0, x1, y1)


class Mesh:
    """One refinement state of the forest over a RootGrid. Immutable.

    Active cells are the leaves, enumerated depth-first per root with
    children visited in digit order (SW, SE, NW, NE). Derived data (DoF
    maps, constraints, transfer operators) is cached on the instance by
    the spaces module, keyed by degree.
    """

    def __init__(self, grid, subdivided=()):
        self.grid = grid
        self.subdivided = frozenset(subdivided)
        cells = []
        for k in range(len(grid.cells)):
            stack = [(k, ())]
            while stack:
                cid = stack.pop()
                if cid in self.subdivided:
                    root, path = cid
                    for d in (3, 2, 1, 0):
                        stack.append((root, path + (d,)))
                else:
                    cells.append(cid)
        self.cell_ids = cells
        self.cell_index = {c: i for i, c in enumerate(cells)}
        self.n_cells = len(cells)
        b = np.empty((self.n_cells, 4))
        for i, cid in enumerate(cells):
            b[i] = self.cell_bounds(cid)
        self.bounds = b
        self.hx = b[:, 2] - b[:, 0]
        self.hy = b[:, 3] - b[:, 1]
        self.level = np.array([len(p) for _, p in cells], dtype=np.int64)
        self.cache = {}

    # -- geometry ---------------------------------------------------------

    def cell_bounds(self, cid):
        root, path = cid
        bounds = self.grid.root_bounds(root)
        for d in path:
            bounds = _child_bounds(bounds, d)
        return bounds

    def diameters(self):
        return np.hypot(self.hx, self.hy)

    def area(self):
        return float(np.sum(self.hx * self.hy))

    # -- topology ---------------------------------------------------------

    def shift(self, cid, side):
        """Same-level location adjacent on `side`, or None past the boundary."""
        root, path = cid
        digits = list(path)
        bit = 1 if side in (W, E) else 2
        forward = side in (E, N)
        i = len(digits) - 1
        while i >= 0:
            d = digits[i]
            digits[i] = d ^ bit
            has = bool(d & bit)
            if has != forward:
                return (root, tuple(digits))
            i -= 1
        nroot = self.grid.neighbor_root(root, side)
        if nroot is None:
            return None
        return (nroot, tuple(digits))

    def resolve(self, loc):
        """Classify a same-size location against the forest.

        Returns ('active', id), ('finer', id) for a subdivided node, or
        ('coarser', id) for the active ancestor covering the location.
        """
        root, path = loc
        node = (root, ())
        for k in range(len(path)):
            if node not in self.subdivided:
                return ("coarser", node)
            node = (root, path[: k + 1])
        if node in self.subdivided:
            return ("finer", node)
        return ("active", node)

    # children of a subdivided node that touch the edge shared with a cell
    # whose `side` points at the node
    _EDGE_CHILDREN = {E: (0, 2), W: (1, 3), N: (0, 1), S: (2, 3)}

    def _collect_edge_leaves(self, node, side, out):
        root, path = node
        for d in self._EDGE_CHILDREN[side]:
            child = (root, path + (d,))
            if child in self.subdivided:
                self._collect_edge_leaves(child, side, out)
            else:
                out.append(child)

    def neighbors(self, cid, side):
        """Active cells adjacent to `cid` across `side` (empty at boundary)."""
        loc = self.shift(cid, side)
        if loc is None:
            return []
        kind, node = self.resolve(loc)
        if kind in ("active", "coarser"):
            return [node]
        out = []
        self._collect_edge_leaves(node, side, out)
        return out

    def boundary_sides(self):
        """(cell index, side) pairs lying on the domain boundary."""
        out = []
        for i, cid in enumerate(self.cell_ids):
            for side in SIDES:
                if self.shift(cid, side) is None:
                    out.append((i, side))
        return out

    def audit_one_irregular(self):
        """Largest level gap across any interior edge (must be <= 1)."""
        worst = 0
        for cid in self.cell_ids:
            lvl = len(cid[1])
            for side in (E, N):
                for nb in self.neighbors(cid, side):
                    worst = max(worst, abs(len(nb[1]) - lvl))
        return worst

    # -- adaptation -------------------------------------------------------

    def _as_ids(self, marks):
        ids = set()
        for m in marks:
            cid = self.cell_ids[m] if isinstance(m, (int, np.integer)) else m
            if cid not in self.cell_index:
                raise ValueError(f"unknown active cell {m!r}")
            ids.add(cid)
        return ids

    def _quartet(self, cid):
        root, path = cid
        if not path:
            return {cid}
        return {(root, path[:-1] + (d,)) for d in range(4)}

    def refine_cells(self, marks, patchwise=False):
        """Split every marked cell in four, cascading to keep one-irregularity.

        With patchwise=True, marks (including cascade marks) are promoted to
        full sibling quartets, preserving the patch structure needed by the
        two-level interpolation operator.
        """
        seed = self._as_ids(marks)
        if not seed:
            return self
        refine = set()
        queue = list(seed)
        while queue:
            cid = queue.pop()
            if patchwise:
                group = [c for c in self._quartet(cid) if c in self.cell_index]
            else:
                group = [cid]
            for c in group:
                if c in refine:
                    continue
                refine.add(c)
                lvl = len(c[1])
                for side in SIDES:
                    for nb in self.neighbors(c, side):
                        if len(nb[1]) < lvl and nb not in refine:
                            queue.append(nb)
        return Mesh(self.grid, self.subdivided | refine)

    def coarsen_cells(self, marks):
        """Merge sibling quartets whose four members are all marked.

        Best-effort semantics: a merge that would break one-irregularity is
        dropped silently. Never coarsens past the root cells.
        """
        ids = self._as_ids(marks)
        groups = {}
        for cid in ids:
            root, path = cid
            if not path:
                continue
            groups.setdefault((root, path[:-1]), set()).add(path[-1])
        merges = {p for p, kids in groups.items()
                  if len(kids) == 4 and all((p[0], p[1] + (d,)) in self.cell_index
                                            for d in range(4))}
        while merges:
            trial = Mesh(self.grid, self.subdivided - merges)
            bad = set()
            for p in merges:
                lvl = len(p[1])
                for side in SIDES:
                    if any(len(nb[1]) - lvl > 1 for nb in trial.neighbors(p, side)):
                        bad.add(p)
                        break
            if not bad:
                return trial
            merges -= bad
        return self

    def refine_all(self):
        return self.refine_cells(list(self.cell_ids))

    # -- patch structure --------------------------------------------------

    def patch_parent(self):
        """Parent mesh of a patch-structured mesh plus the child map.

        Returns (parent_mesh, children) where children[q, d] is the active
        cell index (in self) of child digit d of parent cell q.
        """
        groups = {}
        for cid in self.cell_ids:
            root, path = cid
            if not path:
                raise ValueError("mesh not patch-structured: level-0 active cell")
            groups.setdefault((root, path[:-1]), []).append(cid)
        for p, kids in groups.items():
            if len(kids) != 4:
                raise ValueError("mesh not patch-structured: broken quartet")
        parent = Mesh(self.grid, self.subdivided - set(groups))
        children = np.empty((parent.n_cells, 4), dtype=np.int64)
        for q, pid in enumerate(parent.cell_ids):
            root, path = pid
            for d in range(4):
                children[q, d] = self.cell_index[(root, path + (d,))]
        return parent, children

    # -- flat arrays for point location ----------------------------------

    def flat_forest(self):
        """Array form of the forest for the locate kernels.

        Returns dict with 'first_child', 'active_index', 'xmid', 'ymid'
        per forest node (BFS order, children consecutive), plus the root
        lookup table over the grid.
        """
        if "flat" in self.cache:
            return self.cache["flat"]
        nodes = []
        node_index = {}
        for k in range(len(self.grid.cells)):
            cid = (k, ())
            node_index[cid] = len(nodes)
            nodes.append(cid)
        i = 0
        while i < len(nodes):
            cid = nodes[i]
            if cid in self.subdivided:
                root, path = cid
                for d in range(4):
                    child = (root, path + (d,))
                    node_index[child] = len(nodes)
                    nodes.append(child)
            i += 1
        nn = len(nodes)
        first_child = np.full(nn, -1, dtype=np.int64)
        active_index = np.full(nn, -1, dtype=np.int64)
        xmid = np.empty(nn)
        ymid = np.empty(nn)
        for idx, cid in enumerate(nodes):
            if cid in self.subdivided:
                first_child[idx] = node_index[(cid[0], cid[1] + (0,))]
            else:
                active_index[idx] = self.cell_index[cid]
            x0, y0, x1, y1 = self.cell_bounds(cid)
            xmid[idx] = 0.5 * (x0 + x1)
            ymid[idx] = 0.5 * (y0 + y1)
        g = self.grid
        root_lookup = np.full(g.nx * g.ny, -1, dtype=np.int64)
        for k, (ci, cj) in enumerate(g.cells):
            root_lookup[cj * g.nx + ci] = k
        flat = {
            "first_child": first_child,
            "active_index": active_index,
            "xmid": xmid,
            "ymid": ymid,
            "root_lookup": root_lookup,
            "xs": g.xs,
            "ys": g.ys,
        }
        self.cache["flat"] = flat
        return flat

    def locate(self, points):
        """Active cell index containing each point (ties go east/north)."""
        from .kernels import locate_points

        flat = self.flat_forest()
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return locate_points(
            pts[:, 0].copy(), pts[:, 1].copy(),
            flat["xs"], flat["ys"], flat["root_lookup"],
            flat["first_child"], flat["active_index"],
            flat["xmid"], flat["ymid"],
        )


# -- VTK legacy export ----------------------------------------------------


def vtk_vertices(mesh):
    """Corner vertex list and per-cell quad connectivity (CCW order)."""
    key2id = {}
    pts = []
    quads = np.empty((mesh.n_cells, 4), dtype=np.int64)
    # CCW corner order expected by VTK_QUAD: SW, SE, NE, NW
    corners = ((0, 1), (2, 1), (2, 3), (0, 3))
    for c in range(mesh.n_cells):
        b = mesh.bounds[c]
        for k, (ix, iy) in enumerate(corners):
            key = (int(round(b[ix] * 8589934592.0)),
                   int(round(b[iy] * 8589934592.0)))
            gid = key2id.get(key)
            if gid is None:
                gid = len(pts)
                key2id[key] = gid
                pts.append((b[ix], b[iy]))
            quads[c, k] = gid
    return np.array(pts), quads


def write_vtk(path, mesh, point_data=None, title="snapshot"):
    """Legacy ASCII VTK export (DATASET UNSTRUCTURED_GRID, cell type 9).

    point_data maps names to arrays aligned with vtk_vertices(mesh):
    shape (n,) writes a scalar field, (n, 2) a vector field (z = 0).
    """
    pts, quads = vtk_vertices(mesh)
    n = pts.shape[0]
    lines = ["# vtk DataFile Version 3.0", title, "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {n} double"]
    for x, y in pts:
        lines.append(f"{x:.16g} {y:.16g} 0")
    lines.append(f"CELLS {mesh.n_cells} {5 * mesh.n_cells}")
    for q in quads:
        lines.append("4 " + " ".join(str(int(i)) for i in q))
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines.extend(["9"] * mesh.n_cells)
    if point_data:
        lines.append(f"POINT_DATA {n}")
        for name, arr in point_data.items():
            arr = np.asarray(arr)
            if arr.ndim == 1:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(f"{v:.16g}" for v in arr)
            else:
                lines.append(f"VECTORS {name} double")
                lines.extend(f"{v[0]:.16g} {v[1]:.16g} 0" for v in arr)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
