# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled KD-tree nearest-neighbour query.

Mirrors ``resflow._kdtree_py.query`` exactly: same traversal order, same
squared-distance arithmetic (``dx*dx + dy*dy + dz*dz`` evaluated left to
right), same tie-break on the smallest original index.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()

DEF MAX_STACK = 256


def query(const double[:, ::1] pts,
          const cnp.int64_t[::1] perm,
          const cnp.int64_t[::1] lo,
          const cnp.int64_t[::1] hi,
          const cnp.int64_t[::1] left,
          const cnp.int64_t[::1] right,
          const cnp.int64_t[::1] dim,
          const double[::1] split,
          const double[:, ::1] queries):
    cdef Py_ssize_t nq = queries.shape[0]
    out_idx = np.empty(nq, dtype=np.int64)
    out_d2 = np.empty(nq, dtype=np.float64)
    cdef cnp.int64_t[::1] oi = out_idx
    cdef double[::1] od = out_d2
    cdef cnp.int64_t stack_node[MAX_STACK]
    cdef double stack_bound[MAX_STACK]
    cdef Py_ssize_t qi, sp, k
    cdef cnp.int64_t node, near, far, best_idx, cand
    cdef double qx, qy, qz, dx, dy, dz, d2, best, diff, bound
    with nogil:
        for qi in range(nq):
            qx = queries[qi, 0]
            qy = queries[qi, 1]
            qz = queries[qi, 2]
            best = INFINITY
            best_idx = -1
            sp = 0
            stack_node[0] = 0
            stack_bound[0] = 0.0
            sp = 1
            while sp > 0:
                sp -= 1
                node = stack_node[sp]
                bound = stack_bound[sp]
                if bound > best:
                    continue
                while left[node] >= 0:
                    if dim[node] == 0:
                        diff = qx - split[node]
                    elif dim[node] == 1:
                        diff = qy - split[node]
                    else:
                        diff = qz - split[node]
                    if diff < 0:
                        near = left[node]
                        far = right[node]
                    else:
                        near = right[node]
                        far = left[node]
                    if diff * diff <= best:
                        stack_node[sp] = far
                        stack_bound[sp] = diff * diff
                        sp += 1
                    node = near
                for k in range(lo[node], hi[node]):
                    dx = pts[k, 0] - qx
                    dy = pts[k, 1] - qy
                    dz = pts[k, 2] - qz
                    d2 = dx * dx + dy * dy + dz * dz
                    cand = perm[k]
                    if d2 < best or (d2 == best and cand < best_idx):
                        best = d2
                        best_idx = cand
            oi[qi] = best_idx
            od[qi] = best
    return out_idx, out_d2
