"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``.

Same algorithms, same tie-breaking, same results; only slower.
"""
import numpy as np

LEAF_SIZE = 12


class KDTree:
    """Static kd-tree over an (n, 3) float64 array."""

    def __init__(self, points):
        arr = np.ascontiguousarray(points, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError("points must have shape (n, 3)")
        if arr.shape[0] == 0:
            raise ValueError("cannot index an empty cloud")
        arr.setflags(write=False)
        self.data = arr
        self.n = arr.shape[0]
        self._pts = [tuple(map(float, p)) for p in arr]
        perm = list(range(self.n))
        # node = (lo, hi, dim, split, left, right); leaves have left = -1
        self._nodes = []
        self._perm = perm
        self._build(0, self.n)

    def _build(self, lo, hi):
        node = len(self._nodes)
        self._nodes.append(None)
        if hi - lo <= LEAF_SIZE:
            self._nodes[node] = (lo, hi, 0, 0.0, -1, -1)
            return node
        idx = np.asarray(self._perm[lo:hi])
        sub = self.data[idx]
        spread = sub.max(axis=0) - sub.min(axis=0)
        dim = int(np.argmax(spread))
        mid = (hi - lo) // 2
        order = np.argpartition(sub[:, dim], mid, kind="introselect")
        self._perm[lo:hi] = idx[order].tolist()
        split = float(self.data[self._perm[lo + mid], dim])
        left = self._build(lo, lo + mid)
        right = self._build(lo + mid, hi)
        self._nodes[node] = (lo, hi, dim, split, left, right)
        return node

    def _nn(self, q):
        best_i, best_d = -1, np.inf
        pts, perm, nodes = self._pts, self._perm, self._nodes
        q0, q1, q2 = q
        stack = [0]
        while stack:
            node = stack.pop()
            if isinstance(node, tuple):
                # deferred far child with its plane distance bound
                bound, node = node
                if bound > best_d:
                    continue
            lo, hi, dim, split, left, right = nodes[node]
            if left < 0:
                for j in range(lo, hi):
                    i = perm[j]
                    p = pts[i]
                    dx = q0 - p[0]
                    dy = q1 - p[1]
                    dz = q2 - p[2]
                    d = dx * dx + dy * dy + dz * dz
                    if d < best_d or (d == best_d and i < best_i):
                        best_d, best_i = d, i
                continue
            diff = q[dim] - split
            near, far = (left, right) if diff < 0 else (right, left)
            stack.append((diff * diff, far))
            stack.append(near)
        return best_i, best_d

    def _knn(self, q, k):
        found = []  # sorted list of (d, i)
        pts, perm, nodes = self._pts, self._perm, self._nodes
        q0, q1, q2 = q
        stack = [0]
        while stack:
            node = stack.pop()
            if isinstance(node, tuple):
                bound, node = node
                if len(found) == k and bound > found[-1][0]:
                    continue
            lo, hi, dim, split, left, right = nodes[node]
            if left < 0:
                for j in range(lo, hi):
                    i = perm[j]
                    p = pts[i]
                    dx = q0 - p[0]
                    dy = q1 - p[1]
                    dz = q2 - p[2]
                    item = (dx * dx + dy * dy + dz * dz, i)
                    if len(found) < k:
                        found.append(item)
                        found.sort()
                    elif item < found[-1]:
                        found[-1] = item
                        found.sort()
                continue
            diff = q[dim] - split
            near, far = (left, right) if diff < 0 else (right, left)
            stack.append((diff * diff, far))
            stack.append(near)
        return found

    def query(self, queries):
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        idx = np.empty(len(q), dtype=np.intp)
        dist = np.empty(len(q), dtype=np.float64)
        for t, row in enumerate(q.tolist()):
            idx[t], dist[t] = self._nn(row)
        return idx, dist

    def query_knn(self, queries, k):
        if k < 1 or k > self.n:
            raise ValueError("k must be in [1, n]")
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        idx = np.empty((len(q), k), dtype=np.intp)
        dist = np.empty((len(q), k), dtype=np.float64)
        for t, row in enumerate(q.tolist()):
            found = self._knn(row, k)
            dist[t] = [d for d, _ in found]
            idx[t] = [i for _, i in found]
        return idx, dist


def linear_assignment(cost):
    """Minimum-cost perfect matching on a square cost matrix (row i -> col[i])."""
    a = np.ascontiguousarray(cost, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("cost matrix must be square")
    n = a.shape[0]
    col = np.empty(n, dtype=np.intp)
    if n == 0:
        return col
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col[p[1:] - 1] = np.arange(n)
    return col
