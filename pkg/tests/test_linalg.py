import numpy as np
import pytest
import scipy.sparse as sp

from stadapt import fem_core as fc
from stadapt import linalg
from stadapt.mesh2d import Mesh, RootGrid


def hanging_mesh():
    m = Mesh(RootGrid.box(0.0, 0.0, 1.0, 1.0)).refine_cells([0])
    return m.refine_cells([m.cell_index[(0, (0,))]])


def test_lu_solve_identity_and_hand_case():
    A = sp.eye(4, format="csr")
    b = np.array([1.0, 2.0, 3.0, 4.0])
    assert np.allclose(linalg.lu_solve(A, b), b)
    A = sp.csr_matrix(np.array([[2.0, 1.0], [1.0, 3.0]]))
    x = linalg.lu_solve(A, np.array([3.0, 4.0]))
    assert np.allclose(x, [1.0, 1.0], atol=1e-13)


def test_lu_solve_saddle_point():
    # tiny symmetric saddle system [[A, B^T], [B, 0]]
    A = np.array([[4.0, 1.0], [1.0, 3.0]])
    B = np.array([[1.0, 1.0]])
    S = np.zeros((3, 3))
    S[:2, :2] = A
    S[:2, 2] = B[0]
    S[2, :2] = B[0]
    b = np.array([1.0, -2.0, 0.0])
    x = linalg.lu_solve(sp.csr_matrix(S), b)
    assert np.linalg.norm(S @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_assemble_add_plain_scatter():
    dm_n = 4
    A = fc.PatternMatrix(dm_n, [(np.arange(4).reshape(1, -1),
                                 np.arange(4).reshape(1, -1))])
    block = np.arange(16, dtype=float).reshape(4, 4)
    linalg.assemble_add(A, block, np.arange(4), constraints=None)
    assert np.allclose(A.tocsr().toarray(), block)
    linalg.assemble_add(A, np.zeros((4, 4)), np.arange(4))
    assert np.allclose(A.tocsr().toarray(), block)


def test_assemble_add_distributes_hanging_block():
    # Q1 hanging node: the slave's row/column spread over its two masters
    # with weight 0.5; oracle is the dense congruence E^T B E
    m = hanging_mesh()
    dm = fc.dof_map(m, 1)
    cons = fc.hanging_constraints(m, 1)
    slave = next(iter(cons))
    cell = next(c for c in range(m.n_cells) if slave in dm.cell_dofs[c])
    gids = dm.cell_dofs[cell]
    rng = np.random.default_rng(0)
    B = rng.standard_normal((4, 4))

    n = dm.n_dofs
    E = np.zeros((4, n))
    for i, g in enumerate(gids):
        for mgid, w in cons.get(int(g), [(int(g), 1.0)]):
            E[i, mgid] += w
    want = E.T @ B @ E
    want[slave, slave] += 1.0  # invertibility placeholder

    pairs = [(np.arange(n).reshape(1, -1), np.arange(n).reshape(1, -1))]
    A = fc.PatternMatrix(n, pairs)
    linalg.assemble_add(A, B, gids, cons)
    assert np.allclose(A.tocsr().toarray(), want, atol=1e-13)
    touched = set(np.nonzero(np.abs(A.tocsr().toarray()).sum(axis=0))[0])
    # 3 regular vertices + 2 masters (one of them a cell vertex) + the
    # slave's placeholder diagonal
    assert len(touched) == 5
    assert slave in touched


def test_constrained_operator_reproduces_linears():
    # Laplace with Dirichlet data from a linear function: the discrete
    # solution is that linear's interpolant, hanging nodes included
    m = hanging_mesh().refine_cells([3])
    dm = fc.dof_map(m, 1)
    geom = fc.cell_geometry(m, 2)
    A = fc.PatternMatrix(dm.n_dofs, [(dm.cell_dofs, dm.cell_dofs)])
    A.add_blocks(dm.cell_dofs, dm.cell_dofs, fc.local_stiffness(geom, 1))
    D = fc.distribute_matrix(m, 1)
    fixed = dm.boundary_nodes()
    op = linalg.ConstrainedOperator(A.tocsr(), D, fc.slave_dofs(m, 1), fixed)
    g = 2.0 + 3.0 * dm.xy[:, 0] - dm.xy[:, 1]
    x = op.solve(np.zeros(dm.n_dofs), fixed_values=g[fixed])
    assert np.allclose(x, g, atol=1e-11)
    assert op.residual_free_norm(x, np.zeros(dm.n_dofs)) < 1e-11


def test_constrained_operator_transpose_adjoint():
    rng = np.random.default_rng(4)
    m = hanging_mesh()
    dm = fc.dof_map(m, 1)
    geom = fc.cell_geometry(m, 2)
    A = fc.PatternMatrix(dm.n_dofs, [(dm.cell_dofs, dm.cell_dofs)])
    A.add_blocks(dm.cell_dofs, dm.cell_dofs,
                 fc.local_stiffness(geom, 1) + fc.local_mass(geom, 1))
    # make it nonsymmetric
    A.add_blocks(dm.cell_dofs[:1], dm.cell_dofs[:1],
                 rng.standard_normal((1, 4, 4)))
    D = fc.distribute_matrix(m, 1)
    op = linalg.ConstrainedOperator(A.tocsr(), D, fc.slave_dofs(m, 1),
                                    dm.boundary_nodes())
    b = rng.standard_normal(dm.n_dofs)
    c = rng.standard_normal(dm.n_dofs)
    x = op.solve(b)
    z = op.solve_transposed(c)
    # <c, A^{-1} b> = <A^{-T} c, b> in the reduced space
    assert np.dot(c, x) == pytest.approx(np.dot(z, b), rel=1e-11)


def test_distribution_matches_global_reduction():
    # cellwise assemble_add with constraints equals D^T A_raw D plus the
    # slave diagonal placeholders
    m = hanging_mesh()
    dm = fc.dof_map(m, 1)
    cons = fc.hanging_constraints(m, 1)
    geom = fc.cell_geometry(m, 2)
    blocks = fc.local_stiffness(geom, 1)
    n = dm.n_dofs

    raw = fc.PatternMatrix(n, [(dm.cell_dofs, dm.cell_dofs)])
    raw.add_blocks(dm.cell_dofs, dm.cell_dofs, blocks)
    D = fc.distribute_matrix(m, 1)
    want = (D.T @ raw.tocsr() @ D).toarray()
    for s in cons:
        want[s, s] += 1.0

    pairs = [(np.arange(n).reshape(1, -1), np.arange(n).reshape(1, -1))]
    via_op = fc.PatternMatrix(n, pairs)
    for c in range(m.n_cells):
        linalg.assemble_add(via_op, blocks[c], dm.cell_dofs[c], cons)
    assert np.allclose(via_op.tocsr().toarray(), want, atol=1e-12)
