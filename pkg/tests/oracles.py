"""Independent brute-force reference implementations used by the tests.

Everything here is written as plain loops over definitions, deliberately
sharing no code with the package, so oracle agreement is meaningful.
"""

import numpy as np


def conv3d_loops(x, w, bias, stride, pad):
    """Direct six-nested-loop summation of a strided zero-padded convolution."""
    B, C, D, H, W = x.shape
    O, _, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pd, ph, pw = pad
    Do = (D + 2 * pd - kd) // sd + 1
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((B, O, Do, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for z in range(Do):
                for y in range(Ho):
                    for xx in range(Wo):
                        acc = 0.0 if bias is None else float(bias[o])
                        for c in range(C):
                            for i in range(kd):
                                for j in range(kh):
                                    for k in range(kw):
                                        zz = z * sd + i - pd
                                        yy = y * sh + j - ph
                                        ww = xx * sw + k - pw
                                        if 0 <= zz < D and 0 <= yy < H and 0 <= ww < W:
                                            acc += x[b, c, zz, yy, ww] * w[o, c, i, j, k]
                        out[b, o, z, y, xx] = acc
    return out


def linear_loops(x, w, bias):
    n, cin = x.shape
    cout = w.shape[0]
    out = np.zeros((n, cout))
    for i in range(n):
        for o in range(cout):
            acc = float(bias[o])
            for c in range(cin):
                acc += x[i, c] * w[o, c]
            out[i, o] = acc
    return out


def knn_bruteforce(features, k):
    """All-pairs distances, sorted with (distance, index) lexicographic order."""
    n = features.shape[0]
    result = np.zeros((n, k), dtype=np.int64)
    for i in range(n):
        cand = []
        for j in range(n):
            if j == i:
                continue
            dist = float(((features[i] - features[j]) ** 2).sum())
            cand.append((dist, j))
        cand.sort()
        result[i] = sorted(j for _, j in cand[:k])
    return result


def max_relative_loops(features, edges):
    n, c = features.shape
    out = np.zeros((n, 2 * c))
    for i in range(n):
        out[i, :c] = features[i]
        for ch in range(c):
            out[i, c + ch] = max(features[j, ch] - features[i, ch] for j in edges[i])
    return out


def assd_allpairs(a_pts, b_pts, spacing):
    a = np.asarray(a_pts, dtype=np.float64) * spacing
    b = np.asarray(b_pts, dtype=np.float64) * spacing
    d_ab = [min(np.linalg.norm(p - q) for q in b) for p in a]
    d_ba = [min(np.linalg.norm(q - p) for p in a) for q in b]
    return (sum(d_ab) + sum(d_ba)) / (len(a) + len(b))


def nn_distances_allpairs(a_pts, b_pts, spacing):
    a = np.asarray(a_pts, dtype=np.float64) * spacing
    b = np.asarray(b_pts, dtype=np.float64) * spacing
    d_ab = np.array([min(np.linalg.norm(p - q) for q in b) for p in a])
    d_ba = np.array([min(np.linalg.norm(q - p) for p in a) for q in b])
    return d_ab, d_ba


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def connected_components_unionfind(mask, connectivity):
    """Component count and sorted sizes via union-find over foreground voxels."""
    mask = np.asarray(mask, dtype=bool)
    idx = -np.ones(mask.shape, dtype=np.int64)
    coords = np.argwhere(mask)
    for n, c in enumerate(coords):
        idx[tuple(c)] = n
    uf = UnionFind(len(coords))
    if connectivity == 6:
        offsets = [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
    else:
        offsets = [
            (i, j, k)
            for i in (-1, 0, 1)
            for j in (-1, 0, 1)
            for k in (-1, 0, 1)
            if (i, j, k) > (0, 0, 0)
        ]
    dims = mask.shape
    for n, (z, y, x) in enumerate(coords):
        for dz, dy, dx in offsets:
            zz, yy, xx = z + dz, y + dy, x + dx
            if 0 <= zz < dims[0] and 0 <= yy < dims[1] and 0 <= xx < dims[2] and mask[zz, yy, xx]:
                uf.union(n, idx[zz, yy, xx])
    sizes = {}
    for n in range(len(coords)):
        root = uf.find(n)
        sizes[root] = sizes.get(root, 0) + 1
    return len(sizes), sorted(sizes.values(), reverse=True)


def confusion_loops(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif not p and g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn
