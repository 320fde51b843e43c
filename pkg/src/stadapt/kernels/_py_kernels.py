"""Numpy reference implementations of the hot kernels."""

import numpy as np


def locate_points(x, y, xs, ys, root_lookup, first_child, active_index,
                  xmid, ymid):
    """Active cell index per point. Ties on shared edges go east/north."""
    nx = xs.size - 1
    ny = ys.size - 1
    i = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, nx - 1)
    j = np.clip(np.searchsorted(ys, y, side="right") - 1, 0, ny - 1)
    node = root_lookup[j * nx + i]
    if np.any(node < 0):
        raise ValueError("point outside the occupied root grid")
    while True:
        fc = first_child[node]
        todo = fc >= 0
        if not todo.any():
            break
        sub = node[todo]
        digit = (x[todo] >= xmid[sub]).astype(np.int64)
        digit += 2 * (y[todo] >= ymid[sub]).astype(np.int64)
        node[todo] = fc[todo] + digit
    return active_index[node]


def csr_block_scatter(indptr, indices, data, rows, cols, blocks, ncols):
    """Add dense blocks into a CSR matrix with a fixed sparsity pattern.

    rows (B, m) and cols (B, k) give the global row/column ids of each
    (m, k) block. Every target entry must exist in the pattern. Column
    indices must be sorted within each row, which makes the global key
    row*ncols+col ascending over the CSR data array.
    """
    entry_row = np.repeat(np.arange(indptr.size - 1), np.diff(indptr))
    keys = entry_row * ncols + indices
    want = (rows[:, :, None] * ncols + cols[:, None, :]).ravel()
    pos = np.searchsorted(keys, want)
    if pos.size and (np.any(pos >= keys.size) or np.any(keys[pos] != want)):
        raise ValueError("block entry outside the CSR pattern")
    np.add.at(data, pos, np.ascontiguousarray(blocks).ravel())
