"""Constrained sparse solves.

Hanging-node constraints and Dirichlet data are eliminated algebraically:
with distribute matrix D, lifted boundary field x0 and locked index set L
(slaves plus Dirichlet dofs), the reduced operator is

    A_c = Z D^T A D Z + I_L,   Z = diag(1 off L)

and the solution is x = x0 + D y with A_c y = Z D^T (b - A x0). The same
factorization solves the transposed system, which keeps the discrete dual
sweep an exact adjoint.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


def assemble_add(matrix, block, gids, constraints=None):
    """Scatter one local block, distributing constrained rows and columns.

    Rows and columns of constrained dofs are redistributed to their
    masters with the interpolation weights. The first time a constrained
    dof passes through a given matrix, its diagonal receives a positive
    placeholder so the reduced system stays invertible. The sparsity
    pattern must cover the distributed targets.
    """
    block = np.asarray(block, dtype=float)
    targets = [constraints.get(int(g), [(int(g), 1.0)]) if constraints
               else [(int(g), 1.0)] for g in gids]
    rows, cols, vals = [], [], []
    for i, ti in enumerate(targets):
        for gi, wi in ti:
            for j, tj in enumerate(targets):
                for gj, wj in tj:
                    rows.append(gi)
                    cols.append(gj)
                    vals.append(wi * wj * block[i, j])
    r = np.asarray(rows, dtype=np.int64).reshape(-1, 1)
    c = np.asarray(cols, dtype=np.int64).reshape(-1, 1)
    v = np.asarray(vals).reshape(-1, 1, 1)
    matrix.add_blocks(r, c, v)
    if constraints:
        seen = getattr(matrix, "_slave_diag", None)
        if seen is None:
            seen = set()
            matrix._slave_diag = seen
        fresh = [int(g) for g in gids
                 if int(g) in constraints and int(g) not in seen]
        if fresh:
            matrix.add_diagonal(fresh, 1.0)
            seen.update(fresh)


def lu_solve(A, b):
    """Direct sparse solve with a residual check.

    Raises if the relative residual exceeds 1e-10 (singular or badly
    scaled system), naming the worst row.
    """
    A = sp.csc_matrix(A)
    x = spla.splu(A).solve(np.asarray(b, dtype=float))
    r = A @ x - b
    nb = np.linalg.norm(b)
    if nb > 0 and np.linalg.norm(r) > 1e-10 * nb:
        worst = int(np.argmax(np.abs(r)))
        raise RuntimeError(f"lu_solve residual too large (worst row {worst})")
    return x


class ConstrainedOperator:
    """One raw operator plus its constraint-reduced factorization."""

    def __init__(self, A_raw, D, slaves, fixed):
        self.A_raw = A_raw.tocsr()
        self.D = D
        self.n = A_raw.shape[0]
        locked = np.union1d(np.asarray(slaves, dtype=np.int64),
                            np.asarray(fixed, dtype=np.int64))
        self.locked = locked
        self.fixed = np.asarray(fixed, dtype=np.int64)
        zd = np.ones(self.n)
        zd[locked] = 0.0
        Z = sp.diags(zd)
        self.free_mask = zd
        Ac = Z @ (D.T @ (self.A_raw @ D)) @ Z
        Ac = Ac + sp.diags(1.0 - zd)
        self.Ac = Ac.tocsc()
        self._lu = None

    @property
    def lu(self):
        if self._lu is None:
            self._lu = spla.splu(self.Ac)
        return self._lu

    def lift(self, fixed_values):
        """Conforming extension of Dirichlet data by zero."""
        x0 = np.zeros(self.n)
        x0[self.fixed] = fixed_values
        return self.D @ x0

    def solve(self, b_raw, fixed_values=None):
        x0 = self.lift(fixed_values) if fixed_values is not None \
            else np.zeros(self.n)
        r = self.D.T @ (b_raw - self.A_raw @ x0)
        r[self.locked] = 0.0
        y = self.lu.solve(r)
        return x0 + self.D @ y

    def solve_transposed(self, b_raw):
        """Solve A_c^T y = Z D^T b, return the conforming field D y.

        Homogeneous essential data; the factorization of A_c is reused
        with trans='T', so the adjoint identity holds to rounding.
        """
        r = self.D.T @ b_raw
        r[self.locked] = 0.0
        y = self.lu.solve(r, trans="T")
        y[self.locked] = 0.0
        return self.D @ y

    def residual_free_norm(self, x, b_raw):
        """Norm of the reduced residual at the free dofs (orthogonality)."""
        r = self.D.T @ (b_raw - self.A_raw @ x)
        r = r * self.free_mask
        return float(np.linalg.norm(r))
