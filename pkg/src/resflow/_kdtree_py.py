"""Pure-Python KD-tree query; the fallback for ``_kdtree_ext.query``."""

import numpy as np


def query(pts, perm, lo, hi, left, right, dim, split, queries):
    nq = queries.shape[0]
    out_idx = np.empty(nq, dtype=np.int64)
    out_d2 = np.empty(nq, dtype=np.float64)
    left_l = left.tolist()
    right_l = right.tolist()
    dim_l = dim.tolist()
    split_l = split.tolist()
    lo_l = lo.tolist()
    hi_l = hi.tolist()
    for qi in range(nq):
        q = queries[qi]
        qc = (float(q[0]), float(q[1]), float(q[2]))
        best = np.inf
        best_idx = -1
        stack = [(0, 0.0)]
        while stack:
            node, bound = stack.pop()
            if bound > best:
                continue
            while left_l[node] >= 0:
                diff = qc[dim_l[node]] - split_l[node]
                if diff < 0:
                    near, far = left_l[node], right_l[node]
                else:
                    near, far = right_l[node], left_l[node]
                if diff * diff <= best:
                    stack.append((far, diff * diff))
                node = near
            a, b = lo_l[node], hi_l[node]
            d2 = ((pts[a:b] - q) ** 2).sum(axis=1)
            k = int(np.argmin(d2))
            dmin = d2[k]
            if dmin <= best:
                ties = np.flatnonzero(d2 == dmin)
                cand = int(perm[a:b][ties].min())
                if dmin < best or cand < best_idx:
                    best = float(dmin)
                    best_idx = cand
        out_idx[qi] = best_idx
        out_d2[qi] = best
    return out_idx, out_d2
