# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: kd-tree nearest-neighbour search and dense linear assignment.

The pure-Python twin lives in ``_kernels_py``; both expose the same names and
must return identical results (ties broken by smallest point index).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

DEF LEAF_SIZE = 12


cdef inline double _sqdist(const double[:, ::1] pts, Py_ssize_t i,
                           double q0, double q1, double q2) noexcept nogil:
    cdef double dx = q0 - pts[i, 0]
    cdef double dy = q1 - pts[i, 1]
    cdef double dz = q2 - pts[i, 2]
    return dx * dx + dy * dy + dz * dz


cdef class KDTree:
    """Static kd-tree over an (n, 3) float64 array."""

    cdef readonly object data
    cdef const double[:, ::1] pts
    cdef Py_ssize_t[::1] perm
    cdef Py_ssize_t[::1] lo
    cdef Py_ssize_t[::1] hi
    cdef Py_ssize_t[::1] left
    cdef Py_ssize_t[::1] right
    cdef int[::1] dim
    cdef double[::1] split
    cdef Py_ssize_t n_nodes
    cdef readonly Py_ssize_t n

    def __init__(self, points):
        arr = np.ascontiguousarray(points, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError("points must have shape (n, 3)")
        if arr.shape[0] == 0:
            raise ValueError("cannot index an empty cloud")
        arr.setflags(write=False)
        self.data = arr
        self.pts = arr
        self.n = arr.shape[0]
        cdef Py_ssize_t cap = 2 * self.n + 1
        self.perm = np.arange(self.n, dtype=np.intp)
        self.lo = np.empty(cap, dtype=np.intp)
        self.hi = np.empty(cap, dtype=np.intp)
        self.left = np.empty(cap, dtype=np.intp)
        self.right = np.empty(cap, dtype=np.intp)
        self.dim = np.empty(cap, dtype=np.intc)
        self.split = np.empty(cap, dtype=np.float64)
        self.n_nodes = 0
        with nogil:
            self._build(0, self.n)

    cdef Py_ssize_t _build(self, Py_ssize_t lo, Py_ssize_t hi) noexcept nogil:
        cdef Py_ssize_t node = self.n_nodes
        self.n_nodes += 1
        self.lo[node] = lo
        self.hi[node] = hi
        self.left[node] = -1
        self.right[node] = -1
        if hi - lo <= LEAF_SIZE:
            return node
        cdef int d, best_d = 0
        cdef double mn, mx, v, spread, best_spread = -1.0
        cdef Py_ssize_t j
        for d in range(3):
            mn = INFINITY
            mx = -INFINITY
            for j in range(lo, hi):
                v = self.pts[self.perm[j], d]
                if v < mn:
                    mn = v
                if v > mx:
                    mx = v
            spread = mx - mn
            if spread > best_spread:
                best_spread = spread
                best_d = d
        cdef Py_ssize_t mid = lo + (hi - lo) // 2
        self._select(lo, hi, mid, best_d)
        self.dim[node] = best_d
        self.split[node] = self.pts[self.perm[mid], best_d]
        cdef Py_ssize_t l = self._build(lo, mid)
        cdef Py_ssize_t r = self._build(mid, hi)
        self.left[node] = l
        self.right[node] = r
        return node

    cdef void _select(self, Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t k, int d) noexcept nogil:
        # quickselect on perm[lo:hi] by coordinate d so that perm[k] is the k-th smallest
        cdef Py_ssize_t a = lo, b = hi - 1, i, j, t
        cdef double pivot
        while a < b:
            pivot = self.pts[self.perm[(a + b) // 2], d]
            i = a
            j = b
            while i <= j:
                while self.pts[self.perm[i], d] < pivot:
                    i += 1
                while self.pts[self.perm[j], d] > pivot:
                    j -= 1
                if i <= j:
                    t = self.perm[i]
                    self.perm[i] = self.perm[j]
                    self.perm[j] = t
                    i += 1
                    j -= 1
            if k <= j:
                b = j
            elif k >= i:
                a = i
            else:
                break

    cdef void _nn(self, Py_ssize_t node, double q0, double q1, double q2,
                  Py_ssize_t* best_i, double* best_d) noexcept nogil:
        cdef Py_ssize_t j, i, near, far
        cdef double d, diff, qd
        if self.left[node] < 0:
            for j in range(self.lo[node], self.hi[node]):
                i = self.perm[j]
                d = _sqdist(self.pts, i, q0, q1, q2)
                if d < best_d[0] or (d == best_d[0] and i < best_i[0]):
                    best_d[0] = d
                    best_i[0] = i
            return
        if self.dim[node] == 0:
            qd = q0
        elif self.dim[node] == 1:
            qd = q1
        else:
            qd = q2
        diff = qd - self.split[node]
        if diff < 0:
            near = self.left[node]
            far = self.right[node]
        else:
            near = self.right[node]
            far = self.left[node]
        self._nn(near, q0, q1, q2, best_i, best_d)
        if diff * diff <= best_d[0]:
            self._nn(far, q0, q1, q2, best_i, best_d)

    cdef void _knn(self, Py_ssize_t node, double q0, double q1, double q2, Py_ssize_t k,
                   Py_ssize_t* out_i, double* out_d, Py_ssize_t* count) noexcept nogil:
        cdef Py_ssize_t j, i, near, far, pos
        cdef double d, diff, qd
        if self.left[node] < 0:
            for j in range(self.lo[node], self.hi[node]):
                i = self.perm[j]
                d = _sqdist(self.pts, i, q0, q1, q2)
                if count[0] == k:
                    if d > out_d[k - 1] or (d == out_d[k - 1] and i > out_i[k - 1]):
                        continue
                    pos = k - 1
                else:
                    pos = count[0]
                    count[0] += 1
                # insertion into the sorted (distance, index) list
                while pos > 0 and (out_d[pos - 1] > d or (out_d[pos - 1] == d and out_i[pos - 1] > i)):
                    out_d[pos] = out_d[pos - 1]
                    out_i[pos] = out_i[pos - 1]
                    pos -= 1
                out_d[pos] = d
                out_i[pos] = i
            return
        if self.dim[node] == 0:
            qd = q0
        elif self.dim[node] == 1:
            qd = q1
        else:
            qd = q2
        diff = qd - self.split[node]
        if diff < 0:
            near = self.left[node]
            far = self.right[node]
        else:
            near = self.right[node]
            far = self.left[node]
        self._knn(near, q0, q1, q2, k, out_i, out_d, count)
        if count[0] < k or diff * diff <= out_d[k - 1]:
            self._knn(far, q0, q1, q2, k, out_i, out_d, count)

    def query(self, queries):
        """Nearest neighbour of each row of ``queries``: (indices, squared distances)."""
        q = np.ascontiguousarray(queries, dtype=np.float64)
        if q.ndim == 1:
            q = q.reshape(1, 3)
        cdef const double[:, ::1] qv = q
        cdef Py_ssize_t m = q.shape[0], t
        idx = np.empty(m, dtype=np.intp)
        dist = np.empty(m, dtype=np.float64)
        cdef Py_ssize_t[::1] iv = idx
        cdef double[::1] dv = dist
        cdef Py_ssize_t bi
        cdef double bd
        with nogil:
            for t in range(m):
                bi = -1
                bd = INFINITY
                self._nn(0, qv[t, 0], qv[t, 1], qv[t, 2], &bi, &bd)
                iv[t] = bi
                dv[t] = bd
        return idx, dist

    def query_knn(self, queries, Py_ssize_t k):
        """The ``k`` nearest neighbours of each query, sorted by (distance, index)."""
        if k < 1 or k > self.n:
            raise ValueError("k must be in [1, n]")
        q = np.ascontiguousarray(queries, dtype=np.float64)
        if q.ndim == 1:
            q = q.reshape(1, 3)
        cdef const double[:, ::1] qv = q
        cdef Py_ssize_t m = q.shape[0], t, count
        idx = np.empty((m, k), dtype=np.intp)
        dist = np.empty((m, k), dtype=np.float64)
        cdef Py_ssize_t[:, ::1] iv = idx
        cdef double[:, ::1] dv = dist
        with nogil:
            for t in range(m):
                count = 0
                self._knn(0, qv[t, 0], qv[t, 1], qv[t, 2], k, &iv[t, 0], &dv[t, 0], &count)
        return idx, dist


def linear_assignment(cost):
    """Minimum-cost perfect matching on a square cost matrix.

    Returns ``col`` with row ``i`` assigned to column ``col[i]``.
    """
    c = np.ascontiguousarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError("cost matrix must be square")
    cdef Py_ssize_t n = c.shape[0]
    col = np.empty(n, dtype=np.intp)
    if n == 0:
        return col
    cdef const double[:, ::1] a = c
    u_arr = np.zeros(n + 1)
    v_arr = np.zeros(n + 1)
    p_arr = np.zeros(n + 1, dtype=np.intp)
    way_arr = np.zeros(n + 1, dtype=np.intp)
    minv_arr = np.empty(n + 1)
    used_arr = np.empty(n + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef Py_ssize_t[::1] p = p_arr
    cdef Py_ssize_t[::1] way = way_arr
    cdef double[::1] minv = minv_arr
    cdef unsigned char[::1] used = used_arr
    cdef Py_ssize_t[::1] colv = col
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur
    with nogil:
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            for j in range(n + 1):
                minv[j] = INFINITY
                used[j] = 0
            while True:
                used[j0] = 1
                i0 = p[j0]
                delta = INFINITY
                j1 = 0
                for j in range(1, n + 1):
                    if not used[j]:
                        cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                        if cur < minv[j]:
                            minv[j] = cur
                            way[j] = j0
                        if minv[j] < delta:
                            delta = minv[j]
                            j1 = j
                for j in range(n + 1):
                    if used[j]:
                        u[p[j]] += delta
                        v[j] -= delta
                    else:
                        minv[j] -= delta
                j0 = j1
                if p[j0] == 0:
                    break
            while True:
                j1 = way[j0]
                p[j0] = p[j1]
                j0 = j1
                if j0 == 0:
                    break
        for j in range(1, n + 1):
            colv[p[j] - 1] = j - 1
    return col
