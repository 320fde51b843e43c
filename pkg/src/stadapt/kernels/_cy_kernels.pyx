# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the numpy kernels. Same contracts as _py_kernels."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def locate_points(double[::1] x, double[::1] y,
                  double[::1] xs, double[::1] ys,
                  long long[::1] root_lookup,
                  long long[::1] first_child,
                  long long[::1] active_index,
                  double[::1] xmid, double[::1] ymid):
    cdef Py_ssize_t npts = x.shape[0]
    cdef Py_ssize_t nx = xs.shape[0] - 1
    cdef Py_ssize_t ny = ys.shape[0] - 1
    out_arr = np.empty(npts, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef Py_ssize_t k, lo, hi, mid
    cdef long long node, fc, digit
    cdef double px, py
    for k in range(npts):
        px = x[k]
        py = y[k]
        # rightmost interval start <= p, clamped into the grid
        lo = 0
        hi = nx + 1
        while lo < hi:
            mid = (lo + hi) // 2
            if xs[mid] <= px:
                lo = mid + 1
            else:
                hi = mid
        lo -= 1
        if lo < 0:
            lo = 0
        if lo > nx - 1:
            lo = nx - 1
        hi = 0
        mid = ny + 1
        while hi < mid:
            node = (hi + mid) // 2
            if ys[node] <= py:
                hi = <Py_ssize_t> node + 1
            else:
                mid = <Py_ssize_t> node
        hi -= 1
        if hi < 0:
            hi = 0
        if hi > ny - 1:
            hi = ny - 1
        node = root_lookup[hi * nx + lo]
        if node < 0:
            raise ValueError("point outside the occupied root grid")
        fc = first_child[node]
        while fc >= 0:
            digit = 0
            if px >= xmid[node]:
                digit += 1
            if py >= ymid[node]:
                digit += 2
            node = fc + digit
            fc = first_child[node]
        out[k] = active_index[node]
    return out_arr


def csr_block_scatter(long long[::1] indptr, long long[::1] indices,
                      double[::1] data,
                      long long[:, ::1] rows, long long[:, ::1] cols,
                      double[:, :, ::1] blocks, long long ncols):
    cdef Py_ssize_t nb = rows.shape[0]
    cdef Py_ssize_t m = rows.shape[1]
    cdef Py_ssize_t kk = cols.shape[1]
    cdef Py_ssize_t b, a, c, lo, hi, mid
    cdef long long r, col
    for b in range(nb):
        for a in range(m):
            r = rows[b, a]
            for c in range(kk):
                col = cols[b, c]
                lo = indptr[r]
                hi = indptr[r + 1]
                while lo < hi:
                    mid = (lo + hi) // 2
                    if indices[mid] < col:
                        lo = mid + 1
                    else:
                        hi = mid
                if lo >= indptr[r + 1] or indices[lo] != col:
                    raise ValueError("block entry outside the CSR pattern")
                data[lo] += blocks[b, a, c]
