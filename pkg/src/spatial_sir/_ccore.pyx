# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Gillespie engine.

Event semantics match ``_pycore.Engine`` exactly: the same uniforms are
consumed in the same order, the same swap-remove lists pick recoveries and
the same rebuild rule refreshes the running sums.  Infections are selected
through a Fenwick tree over the susceptible pressures.
"""
import math

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, log1p, log2, INFINITY, isfinite

cnp.import_array()

cdef enum:
    K_CONST = 0
    K_GAUSS = 1
    K_BUMP = 2

cdef inline double _tau(int code, double pref, double shape, double cutoff2, double d2) noexcept nogil:
    cdef double s2
    if d2 > cutoff2:
        return 0.0
    if code == K_CONST:
        return pref
    if code == K_GAUSS:
        return pref * exp(-d2 * shape)
    s2 = d2 * shape
    if s2 >= 1.0:
        return 0.0
    return pref * exp(-1.0 / (1.0 - s2))


cdef class Engine:
    cdef public Py_ssize_t N, nS, nI, nR, n_events, m
    cdef public double t, t_next, t_obs
    cdef double p, q, pref, shape, cutoff2, log2n
    cdef int code, cell_n
    cdef bint dense, const_path
    cdef double[:, ::1] pos
    cdef signed char[::1] st
    cdef double[::1] lam, tree
    cdef int[::1] nb
    cdef Py_ssize_t[::1] inf_list, inf_pos, sus_list, sus_pos
    cdef int[::1] cell_of, cell_start, cell_items
    cdef Py_ssize_t tree_top, since_rebuild, rebuild_every
    cdef Py_ssize_t[::1] touched_k
    cdef double[::1] touched_d
    cdef object rng, _ubuf_obj
    cdef double[::1] ubuf
    cdef Py_ssize_t upos, buffer_size
    cdef double[:, ::1] oa, ob
    cdef double[::1] oV, oC, oQ, SA1, SA2, SB1, SB2, dscr, qscr
    cdef list _log_t, _log_k, _log_i, _log_obs

    def __init__(self, positions, states, double p, double q, int code, double pref, double shape,
                 double cutoff2, cell_n=1, cell_of=None, cell_start=None, cell_items=None,
                 rng=None, obs_a=None, obs_b=None, tau_fn=None, Py_ssize_t buffer_size=4096):
        cdef Py_ssize_t i, j, N
        cdef signed char s
        if code < 0:
            raise ValueError("the compiled core only handles closed-form kernels")
        self.pos = np.ascontiguousarray(positions, dtype=np.float64)
        self.st = np.array(states, dtype=np.int8)
        N = self.N = self.st.shape[0]
        self.p, self.q = p, q
        self.code, self.pref, self.shape, self.cutoff2 = code, pref, shape, cutoff2
        self.dense = not math.isfinite(cutoff2)
        self.const_path = code == K_CONST and self.dense
        self.cell_n = int(cell_n)
        if not self.dense:
            self.cell_of = np.ascontiguousarray(cell_of, dtype=np.int32)
            self.cell_start = np.ascontiguousarray(cell_start, dtype=np.int32)
            self.cell_items = np.ascontiguousarray(cell_items, dtype=np.int32)
        self.log2n = log2(<double>max(N, 2))
        self.rebuild_every = max(N, 1024)

        self.lam = np.zeros(N)
        self.tree = np.zeros(N + 1)
        self.nb = np.zeros(N, dtype=np.int32)
        self.touched_k = np.zeros(max(N, 1), dtype=np.intp)
        self.touched_d = np.zeros(max(N, 1))
        self.tree_top = 1
        while self.tree_top * 2 <= N:
            self.tree_top *= 2
        self.inf_list = np.zeros(N, dtype=np.intp)
        self.inf_pos = np.full(N, -1, dtype=np.intp)
        self.sus_list = np.zeros(N, dtype=np.intp)
        self.sus_pos = np.full(N, -1, dtype=np.intp)
        self.nS = self.nI = self.nR = 0
        for i in range(N):
            s = self.st[i]
            if s == 0:
                self.sus_list[self.nS] = i
                self.sus_pos[i] = self.nS
                self.nS += 1
            elif s == 1:
                self.inf_list[self.nI] = i
                self.inf_pos[i] = self.nI
                self.nI += 1
            elif s == 2:
                self.nR += 1
            else:
                raise ValueError(f"invalid state {s} at index {i}")

        self.m = 0
        if obs_a is not None:
            a = np.ascontiguousarray(np.atleast_2d(obs_a), dtype=np.float64)
            b = np.ascontiguousarray(np.atleast_2d(obs_b), dtype=np.float64)
            if a.shape[1] != N or b.shape != a.shape:
                raise ValueError("observable arrays must have shape (m, N)")
            self.m = a.shape[0]
            self.oa, self.ob = a, b
        else:
            self.oa = np.zeros((0, 1))
            self.ob = np.zeros((0, 1))
        self.oV = np.zeros(self.m)
        self.oC = np.zeros(self.m)
        self.oQ = np.zeros(self.m)
        self.SA1 = np.zeros(self.m)
        self.SA2 = np.zeros(self.m)
        self.SB1 = np.zeros(self.m)
        self.SB2 = np.zeros(self.m)
        self.dscr = np.zeros(self.m)
        self.qscr = np.zeros(self.m)

        if not self.const_path:
            for j in range(N):
                if self.st[j] == 1:
                    self._neighbours(j, 1, False)
        self.t = 0.0
        self.t_obs = 0.0
        self._rebuild()
        if self.m:
            st = np.asarray(self.st)
            self.oV = (np.asarray(self.oa) * (st >= 1)).sum(axis=1) + (np.asarray(self.ob) * (st == 2)).sum(axis=1)
        self.since_rebuild = 0

        self.rng = rng
        self.buffer_size = buffer_size
        self._ubuf_obj = np.empty(0)
        self.ubuf = self._ubuf_obj
        self.upos = 0
        self.n_events = 0
        self._log_t, self._log_k, self._log_i, self._log_obs = [], [], [], []
        self.t_next = INFINITY
        if rng is not None:
            self._draw_next()

    # -- Fenwick tree -----------------------------------------------------------
    cdef void _tree_add(self, Py_ssize_t i, double delta) noexcept:
        i += 1
        while i <= self.N:
            self.tree[i] += delta
            i += i & (-i)

    cdef double _tree_total(self) noexcept:
        cdef Py_ssize_t i = self.N
        cdef double s = 0.0
        while i > 0:
            s += self.tree[i]
            i -= i & (-i)
        return s

    cdef Py_ssize_t _tree_search(self, double y) noexcept:
        cdef Py_ssize_t pos = 0, step = self.tree_top, nxt
        while step > 0:
            nxt = pos + step
            if nxt <= self.N and self.tree[nxt] <= y:
                pos = nxt
                y -= self.tree[nxt]
            step >>= 1
        return pos

    cdef void _rebuild(self):
        cdef Py_ssize_t i, j, r, N = self.N
        cdef double w
        if not self.const_path:
            for i in range(1, N + 1):
                self.tree[i] = self.lam[i - 1]
            for i in range(1, N + 1):
                j = i + (i & (-i))
                if j <= N:
                    self.tree[j] += self.tree[i]
        for r in range(self.m):
            self.SA1[r] = 0.0
            self.SA2[r] = 0.0
            self.SB1[r] = 0.0
            self.SB2[r] = 0.0
        if self.m == 0:
            return
        for i in range(N):
            if self.st[i] == 1:
                for r in range(self.m):
                    w = self.ob[r, i]
                    self.SB1[r] += w
                    self.SB2[r] += w * w
            elif self.st[i] == 0:
                for r in range(self.m):
                    w = self.oa[r, i]
                    if self.const_path:
                        self.SA1[r] += w
                        self.SA2[r] += w * w
                    else:
                        self.SA1[r] += self.lam[i] * w
                        self.SA2[r] += self.lam[i] * w * w

    # -- rates --------------------------------------------------------------------
    cdef double _infection_total(self) noexcept:
        if self.nI == 0:
            return 0.0
        if self.const_path:
            return self.pref * self.nI * self.nS
        return self._tree_total()

    def total_rate(self):
        return self.p * self.nI + self._infection_total()

    def lam_array(self):
        if self.const_path:
            return np.where(np.asarray(self.st) == 0, self.pref * self.nI, 0.0)
        return np.array(self.lam, copy=True)

    def states_array(self):
        return np.array(self.st, copy=True)

    # -- observables ---------------------------------------------------------------
    cdef void _drift_into(self, double[::1] d, double[::1] qv) noexcept:
        cdef Py_ssize_t r
        cdef double lam = self.pref * self.nI, N = <double>self.N
        for r in range(self.m):
            if self.const_path:
                d[r] = (self.p * self.SB1[r] + lam * self.SA1[r]) / N
                qv[r] = (self.p * self.SB2[r] + lam * self.SA2[r]) / (N * N)
            else:
                d[r] = (self.p * self.SB1[r] + self.SA1[r]) / N
                qv[r] = (self.p * self.SB2[r] + self.SA2[r]) / (N * N)

    cdef void _integrate_to(self, double t):
        cdef Py_ssize_t r
        cdef double dt
        if self.m and t > self.t_obs:
            self._drift_into(self.dscr, self.qscr)
            dt = t - self.t_obs
            for r in range(self.m):
                self.oC[r] += self.dscr[r] * dt
                self.oQ[r] += self.qscr[r] * dt
        if t > self.t_obs:
            self.t_obs = t

    def observe(self, double t):
        """``(sum_k phi^{A_k}, compensator, quadratic-variation integral)`` at time ``t``."""
        if t < self.t_obs:
            raise ValueError("cannot observe before the last event")
        d = np.empty(self.m)
        qv = np.empty(self.m)
        self._drift_into(d, qv)
        dt = t - self.t_obs
        return np.array(self.oV), np.asarray(self.oC) + d * dt, np.asarray(self.oQ) + qv * dt

    # -- state changes -------------------------------------------------------------
    cdef Py_ssize_t _neighbours(self, Py_ssize_t j, int sign, bint track):
        cdef Py_ssize_t n = 0, k, a, lo, hi, ix, iy, cx, cy, c, r
        cdef double xj = self.pos[j, 0], yj = self.pos[j, 1], dx, dy, tau, old, new
        cdef Py_ssize_t ncell = self.cell_n
        if self.dense:
            for k in range(self.N):
                if self.st[k] != 0:
                    continue
                dx = self.pos[k, 0] - xj
                dy = self.pos[k, 1] - yj
                tau = _tau(self.code, self.pref, self.shape, self.cutoff2, dx * dx + dy * dy)
                if tau > 0.0:
                    n = self._touch(k, tau, sign, n, track)
            return n
        c = self.cell_of[j]
        ix = c // ncell
        iy = c % ncell
        for cx in range(ix - 1 if ix > 0 else 0, ix + 2 if ix + 2 < ncell else ncell):
            for cy in range(iy - 1 if iy > 0 else 0, iy + 2 if iy + 2 < ncell else ncell):
                c = cx * ncell + cy
                lo = self.cell_start[c]
                hi = self.cell_start[c + 1]
                for a in range(lo, hi):
                    k = self.cell_items[a]
                    if self.st[k] != 0:
                        continue
                    dx = self.pos[k, 0] - xj
                    dy = self.pos[k, 1] - yj
                    tau = _tau(self.code, self.pref, self.shape, self.cutoff2, dx * dx + dy * dy)
                    if tau > 0.0:
                        n = self._touch(k, tau, sign, n, track)
        return n

    cdef inline Py_ssize_t _touch(self, Py_ssize_t k, double tau, int sign, Py_ssize_t n, bint track) noexcept:
        cdef double old = self.lam[k], new, delta, w
        cdef Py_ssize_t r
        if sign > 0:
            self.nb[k] += 1
            new = old + tau
        else:
            self.nb[k] -= 1
            if self.nb[k] == 0:
                new = 0.0
            else:
                new = old - tau
                if new < 0.0:
                    new = 0.0
        self.lam[k] = new
        if track:
            delta = new - old
            self.touched_k[n] = k
            self.touched_d[n] = delta
            for r in range(self.m):
                w = self.oa[r, k]
                self.SA1[r] += delta * w
                self.SA2[r] += delta * w * w
        return n + 1

    cdef void _remove(self, Py_ssize_t[::1] lst, Py_ssize_t[::1] pos, Py_ssize_t n, Py_ssize_t i) noexcept:
        cdef Py_ssize_t k = pos[i], last = lst[n - 1]
        lst[k] = last
        pos[last] = k
        pos[i] = -1

    cdef Py_ssize_t _infect(self, Py_ssize_t i) except -1:
        cdef Py_ssize_t r
        cdef double w, lam_i = self.lam[i]
        if self.st[i] != 0:
            raise ValueError(f"infection of non-susceptible individual {i}")
        for r in range(self.m):
            w = self.oa[r, i]
            self.oV[r] += w
            if self.const_path:
                self.SA1[r] -= w
                self.SA2[r] -= w * w
            else:
                self.SA1[r] -= lam_i * w
                self.SA2[r] -= lam_i * w * w
            w = self.ob[r, i]
            self.SB1[r] += w
            self.SB2[r] += w * w
        if lam_i != 0.0:
            self._tree_add(i, -lam_i)
        self.lam[i] = 0.0
        self.nb[i] = 0
        self.st[i] = 1
        self._remove(self.sus_list, self.sus_pos, self.nS, i)
        self.nS -= 1
        self.inf_list[self.nI] = i
        self.inf_pos[i] = self.nI
        self.nI += 1
        if self.const_path:
            return 0
        return self._neighbours(i, 1, True)

    cdef Py_ssize_t _recover(self, Py_ssize_t i) except -1:
        cdef Py_ssize_t r
        cdef double w
        if self.st[i] != 1:
            raise ValueError(f"recovery of non-infected individual {i}")
        for r in range(self.m):
            w = self.ob[r, i]
            self.oV[r] += w
            self.SB1[r] -= w
            self.SB2[r] -= w * w
        self.st[i] = 2
        self._remove(self.inf_list, self.inf_pos, self.nI, i)
        self.nI -= 1
        self.nR += 1
        if self.const_path:
            return 0
        return self._neighbours(i, -1, True)

    cdef void _apply(self, double t, int kind, Py_ssize_t i) except *:
        cdef Py_ssize_t touched, a
        self._integrate_to(t)
        self.t = t
        if kind == 1:
            touched = self._infect(i)
        elif kind == 2:
            touched = self._recover(i)
        else:
            raise ValueError(f"unknown event kind {kind}")
        self.since_rebuild += 1
        if touched * self.log2n > self.N or self.since_rebuild >= self.rebuild_every:
            self._rebuild()
            self.since_rebuild = 0
        else:
            for a in range(touched):
                self._tree_add(self.touched_k[a], self.touched_d[a])
        self.n_events += 1
        self._log_t.append(t)
        self._log_k.append(kind)
        self._log_i.append(i)
        if self.m:
            self._log_obs.append(np.stack([np.array(self.oV), np.array(self.oC), np.array(self.oQ)]))

    # -- sampling ------------------------------------------------------------------
    cdef double _uniform(self) except? -1.0:
        cdef double u
        if self.upos >= self.ubuf.shape[0]:
            self._ubuf_obj = self.rng.random(self.buffer_size)
            self.ubuf = self._ubuf_obj
            self.upos = 0
        u = self.ubuf[self.upos]
        self.upos += 1
        return u

    cdef void _draw_next(self) except *:
        cdef double rate = self.p * self.nI + self._infection_total()
        if rate <= 0.0:
            self.t_next = INFINITY
        else:
            self.t_next = self.t - log1p(-self._uniform()) / rate

    cdef Py_ssize_t _select(self, int* kind) except -1:
        cdef double rec = self.p * self.nI, x, y
        cdef Py_ssize_t k, i
        x = self._uniform() * (rec + self._infection_total())
        if x < rec:
            k = <Py_ssize_t>(x / self.p)
            if k > self.nI - 1:
                k = self.nI - 1
            kind[0] = 2
            return self.inf_list[k]
        y = x - rec
        kind[0] = 1
        if self.const_path:
            k = <Py_ssize_t>(y / (self.pref * self.nI))
            if k > self.nS - 1:
                k = self.nS - 1
            return self.sus_list[k]
        i = self._tree_search(y)
        if i >= self.N or self.st[i] != 0 or self.lam[i] <= 0.0:
            self._rebuild()
            self.since_rebuild = 0
            i = self._tree_search(y)
            if i >= self.N or self.st[i] != 0 or self.lam[i] <= 0.0:
                i = self.N - 1
                while i >= 0 and not (self.st[i] == 0 and self.lam[i] > 0.0):
                    i -= 1
                if i < 0:
                    raise RuntimeError("no susceptible with positive pressure")
        return i

    def step(self):
        """Fire the pending event; ``None`` once the chain is absorbed."""
        cdef int kind = 0
        cdef Py_ssize_t i
        cdef double t
        if self.rng is None:
            raise RuntimeError("replay-only engine has no random source")
        if not isfinite(self.t_next):
            return None
        t = self.t_next
        i = self._select(&kind)
        self._apply(t, kind, i)
        self._draw_next()
        return t, kind, i

    def advance(self, double t_stop):
        """Fire every event with time <= ``t_stop``; returns how many fired."""
        cdef Py_ssize_t n = 0, i
        cdef int kind = 0
        cdef double t
        if self.rng is None and isfinite(self.t_next):
            raise RuntimeError("replay-only engine has no random source")
        while self.t_next <= t_stop:
            t = self.t_next
            i = self._select(&kind)
            self._apply(t, kind, i)
            self._draw_next()
            n += 1
        return n

    def apply_event(self, double t, int kind, Py_ssize_t i):
        if t < self.t:
            raise ValueError("events must be applied in time order")
        if i < 0 or i >= self.N:
            raise IndexError(f"individual {i} out of range")
        self._apply(t, kind, i)

    def replay(self, times, kinds, idx):
        cdef double[::1] tt = np.ascontiguousarray(times, dtype=np.float64)
        cdef long long[::1] kk = np.ascontiguousarray(kinds, dtype=np.int64)
        cdef long long[::1] ii = np.ascontiguousarray(idx, dtype=np.int64)
        cdef Py_ssize_t e
        for e in range(tt.shape[0]):
            self.apply_event(tt[e], <int>kk[e], <Py_ssize_t>ii[e])

    def take_log(self):
        out = {
            "times": np.asarray(self._log_t, dtype=float),
            "kinds": np.asarray(self._log_k, dtype=np.int8),
            "idx": np.asarray(self._log_i, dtype=np.int64),
        }
        if self.m:
            out["obs"] = np.asarray(self._log_obs).reshape(-1, 3, self.m)
        self._log_t, self._log_k, self._log_i, self._log_obs = [], [], [], []
        return out


def kernel_sum(query, atoms, weights, int code, double pref, double shape, double cutoff2,
               cell_n=1, cell_start=None, cell_items=None):
    """``out[q, c] = sum_j tau(|query_q - atom_j|^2) * weights[j, c]``."""
    cdef double[:, ::1] Q = np.ascontiguousarray(query, dtype=np.float64)
    cdef double[:, ::1] A = np.ascontiguousarray(atoms, dtype=np.float64)
    cdef double[:, ::1] W = np.ascontiguousarray(weights, dtype=np.float64)
    out_arr = np.zeros((Q.shape[0], W.shape[1]))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t nq = Q.shape[0], na = A.shape[0], nc = W.shape[1]
    cdef Py_ssize_t qi, j, a, c, ix, iy, cx, cy, cc, lo, hi, n = int(cell_n)
    cdef double dx, dy, tau
    cdef int[::1] start, items
    if na == 0 or nq == 0:
        return out_arr
    if not math.isfinite(cutoff2):
        for qi in range(nq):
            for j in range(na):
                dx = Q[qi, 0] - A[j, 0]
                dy = Q[qi, 1] - A[j, 1]
                tau = _tau(code, pref, shape, cutoff2, dx * dx + dy * dy)
                if tau != 0.0:
                    for c in range(nc):
                        out[qi, c] += tau * W[j, c]
        return out_arr
    start = np.ascontiguousarray(cell_start, dtype=np.int32)
    items = np.ascontiguousarray(cell_items, dtype=np.int32)
    for qi in range(nq):
        ix = <Py_ssize_t>floor(Q[qi, 0] * n)
        iy = <Py_ssize_t>floor(Q[qi, 1] * n)
        for cx in range(max(ix - 1, 0), min(ix + 2, n)):
            for cy in range(max(iy - 1, 0), min(iy + 2, n)):
                cc = cx * n + cy
                lo = start[cc]
                hi = start[cc + 1]
                for a in range(lo, hi):
                    j = items[a]
                    dx = Q[qi, 0] - A[j, 0]
                    dy = Q[qi, 1] - A[j, 1]
                    tau = _tau(code, pref, shape, cutoff2, dx * dx + dy * dy)
                    if tau != 0.0:
                        for c in range(nc):
                            out[qi, c] += tau * W[j, c]
    return out_arr
