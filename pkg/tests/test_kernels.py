import numpy as np
import pytest

from stadapt import fem_core as fc
from stadapt import kernels
from stadapt.kernels import _py_kernels as pyk
from stadapt.mesh2d import Mesh, RootGrid

try:
    from stadapt.kernels import _cy_kernels as cyk
except ImportError:
    cyk = None

needs_cy = pytest.mark.skipif(cyk is None, reason="compiled kernels absent")


def random_mesh(rng):
    grid = RootGrid.box(0.0, 0.0, 1.0, 1.0, nx=2, ny=2)
    mesh = Mesh(grid)
    for _ in range(4):
        k = rng.integers(0, mesh.n_cells, 3)
        mesh = mesh.refine_cells(np.unique(k))
    return mesh


@needs_cy
def test_locate_backends_agree():
    rng = np.random.default_rng(3)
    for _ in range(10):
        mesh = random_mesh(rng)
        f = mesh.flat_forest()
        args = (f["xs"], f["ys"], f["root_lookup"], f["first_child"],
                f["active_index"], f["xmid"], f["ymid"])
        pts = rng.random((200, 2))
        a = pyk.locate_points(pts[:, 0].copy(), pts[:, 1].copy(), *args)
        b = cyk.locate_points(pts[:, 0].copy(), pts[:, 1].copy(), *args)
        assert np.array_equal(a, b)


@needs_cy
def test_scatter_backends_agree():
    rng = np.random.default_rng(4)
    for _ in range(10):
        mesh = random_mesh(rng)
        dm = fc.dof_map(mesh, 1)
        mat_a = fc.PatternMatrix(dm.n_dofs, [(dm.cell_dofs, dm.cell_dofs)])
        rows = dm.cell_dofs
        blocks = rng.standard_normal((mesh.n_cells, 4, 4))
        da = np.zeros_like(mat_a.data)
        db = np.zeros_like(mat_a.data)
        pyk.csr_block_scatter(mat_a.indptr, mat_a.indices, da,
                              rows, rows, blocks, dm.n_dofs)
        cyk.csr_block_scatter(mat_a.indptr, mat_a.indices, db,
                              rows, rows, blocks, dm.n_dofs)
        assert np.allclose(da, db, atol=1e-14)
        assert np.any(da != 0.0)


def test_backend_reported():
    assert kernels.BACKEND in ("py", "cy")
