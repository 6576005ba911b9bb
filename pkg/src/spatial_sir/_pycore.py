"""Pure-numpy Gillespie engine; same interface and event semantics as ``_ccore``.

The compiled core keeps the susceptible pressures in a Fenwick tree.  This
fallback selects infections with a cumulative sum over the pressure array,
which costs O(N) per event but needs no compiler.
"""
from __future__ import annotations

import math

import numpy as np

K_CONST, K_GAUSS, K_BUMP, K_PYTHON = 0, 1, 2, -1
S, I, R = 0, 1, 2


def tau_from_d2(code: int, pref: float, shape: float, cutoff2: float, d2: np.ndarray) -> np.ndarray:
    """Kernel value as a function of squared distance (codes as in ``kernels.core_params``)."""
    d2 = np.asarray(d2, dtype=float)
    if code == K_CONST:
        out = np.full(d2.shape, pref)
    elif code == K_GAUSS:
        out = pref * np.exp(-d2 * shape)
    elif code == K_BUMP:
        s2 = d2 * shape
        out = np.zeros(d2.shape)
        inside = s2 < 1.0
        out[inside] = pref * np.exp(-1.0 / (1.0 - s2[inside]))
    else:
        raise ValueError(f"kernel code {code} has no closed form")
    if math.isfinite(cutoff2):
        out[d2 > cutoff2] = 0.0
    return out


class _Neighbourhoods:
    """Candidate arrays for the 3 x 3 cell block around each cell, built lazily."""

    def __init__(self, n, cell_start, cell_items):
        self.n = n
        self.start = np.asarray(cell_start)
        self.items = np.asarray(cell_items)
        self._cache = {}

    def of_cell(self, c: int) -> np.ndarray:
        got = self._cache.get(c)
        if got is None:
            n = self.n
            ix, iy = divmod(c, n)
            parts = []
            for cx in range(max(ix - 1, 0), min(ix + 2, n)):
                for cy in range(max(iy - 1, 0), min(iy + 2, n)):
                    cc = cx * n + cy
                    parts.append(self.items[self.start[cc]:self.start[cc + 1]])
            got = np.concatenate(parts).astype(np.intp) if parts else np.empty(0, np.intp)
            self._cache[c] = got
        return got


class Engine:
    """Exact next-reaction simulation of the spatial SIR chain.

    Parameters
    ----------
    positions, states : ndarray
        Initial configuration, shapes (N, 2) and (N,).
    p, q : float
        Recovery and infection constants.
    code, pref, shape, cutoff2 : int, float, float, float
        Packed kernel, see ``kernels.core_params``.
    cell_n, cell_of, cell_start, cell_items
        Cell list; ignored when ``cutoff2`` is infinite.
    rng : numpy.random.Generator or None
        Source of uniforms; ``None`` gives a replay-only engine.
    obs_a, obs_b : ndarray, optional
        ``(m, N)`` jump sizes ``phi^I - phi^S`` and ``phi^R - phi^I`` of the
        tracked test functions at each individual.
    tau_fn : callable, optional
        ``T(x_sus, x_inf)`` for interaction functions without a kernel code.
    """

    def __init__(self, positions, states, p, q, code, pref, shape, cutoff2,
                 cell_n=1, cell_of=None, cell_start=None, cell_items=None,
                 rng=None, obs_a=None, obs_b=None, tau_fn=None, buffer_size=4096):
        self.pos = np.ascontiguousarray(positions, dtype=float)
        self.st = np.array(states, dtype=np.int8)
        N = self.N = len(self.st)
        self.p, self.q = float(p), float(q)
        self.code, self.pref, self.shape, self.cutoff2 = int(code), float(pref), float(shape), float(cutoff2)
        if self.code == K_PYTHON and tau_fn is None:
            raise ValueError("kernel code -1 needs tau_fn")
        self.tau_fn = tau_fn
        self.dense = not math.isfinite(self.cutoff2)
        self.const_path = self.code == K_CONST and self.dense
        if not self.dense:
            self.cell_of = np.asarray(cell_of, dtype=np.intp)
            self.nbhd = _Neighbourhoods(int(cell_n), cell_start, cell_items)
        self.all_idx = np.arange(N)
        self.log2n = math.log2(max(N, 2))
        self.rebuild_every = max(N, 1024)

        self.lam = np.zeros(N)
        self.nb = np.zeros(N, dtype=np.int32)
        self.inf_list = np.zeros(N, dtype=np.intp)
        self.inf_pos = np.full(N, -1, dtype=np.intp)
        self.sus_list = np.zeros(N, dtype=np.intp)
        self.sus_pos = np.full(N, -1, dtype=np.intp)
        self.nS = self.nI = self.nR = 0
        for i in range(N):
            s = self.st[i]
            if s == S:
                self.sus_list[self.nS] = i
                self.sus_pos[i] = self.nS
                self.nS += 1
            elif s == I:
                self.inf_list[self.nI] = i
                self.inf_pos[i] = self.nI
                self.nI += 1
            elif s == R:
                self.nR += 1
            else:
                raise ValueError(f"invalid state {s} at index {i}")

        self.m = 0
        if obs_a is not None:
            self.oa = np.atleast_2d(np.asarray(obs_a, dtype=float))
            self.ob = np.atleast_2d(np.asarray(obs_b, dtype=float))
            self.m = self.oa.shape[0]
            if self.oa.shape != (self.m, N) or self.ob.shape != (self.m, N):
                raise ValueError("observable arrays must have shape (m, N)")
        self.oV = np.zeros(self.m)
        self.oC = np.zeros(self.m)
        self.oQ = np.zeros(self.m)

        if not self.const_path:
            for j in range(N):
                if self.st[j] == I:
                    self._neighbours(j, +1, track=False)
        self.t = 0.0
        self.t_obs = 0.0
        self._recompute_sums()
        if self.m:
            states = self.st
            # sum_k phi^{A_k}(x_k) minus the constant sum_k phi^S(x_k)
            self.oV = (self.oa * (states >= I)).sum(axis=1) + (self.ob * (states == R)).sum(axis=1)
        self.since_rebuild = 0

        self.rng = rng
        self.buffer_size = int(buffer_size)
        self.ubuf = np.empty(0)
        self.upos = 0
        self.n_events = 0
        self._log_t, self._log_k, self._log_i, self._log_obs = [], [], [], []
        self.t_next = math.inf
        if rng is not None:
            self._draw_next()

    # -- rates ---------------------------------------------------------------
    def _infection_total(self) -> float:
        if self.nI == 0:
            return 0.0
        if self.const_path:
            return self.pref * self.nI * self.nS
        return float(self.lam.sum())

    def total_rate(self) -> float:
        return self.p * self.nI + self._infection_total()

    def lam_array(self) -> np.ndarray:
        if self.const_path:
            return np.where(self.st == S, self.pref * self.nI, 0.0)
        return self.lam.copy()

    def states_array(self) -> np.ndarray:
        return self.st.copy()

    # -- observables ---------------------------------------------------------
    def _recompute_sums(self):
        if not self.m:
            return
        inf = self.st == I
        sus = self.st == S
        self.SB1 = (self.ob * inf).sum(axis=1)
        self.SB2 = (self.ob**2 * inf).sum(axis=1)
        if self.const_path:
            self.SA1 = (self.oa * sus).sum(axis=1)
            self.SA2 = (self.oa**2 * sus).sum(axis=1)
        else:
            w = self.lam * sus
            self.SA1 = self.oa @ w
            self.SA2 = (self.oa**2) @ w

    def _drift(self):
        N = self.N
        if self.const_path:
            lam = self.pref * self.nI
            return (self.p * self.SB1 + lam * self.SA1) / N, (self.p * self.SB2 + lam * self.SA2) / (N * N)
        return (self.p * self.SB1 + self.SA1) / N, (self.p * self.SB2 + self.SA2) / (N * N)

    def _integrate_to(self, t):
        if self.m and t > self.t_obs:
            d, qv = self._drift()
            dt = t - self.t_obs
            self.oC = self.oC + d * dt
            self.oQ = self.oQ + qv * dt
        self.t_obs = max(self.t_obs, t)

    def observe(self, t: float):
        """``(sum_k phi^{A_k}, compensator, quadratic-variation integral)`` at time ``t``."""
        if t < self.t_obs:
            raise ValueError("cannot observe before the last event")
        if not self.m:
            return np.zeros(0), np.zeros(0), np.zeros(0)
        d, qv = self._drift()
        dt = t - self.t_obs
        return self.oV.copy(), self.oC + d * dt, self.oQ + qv * dt

    # -- state changes -------------------------------------------------------
    def _neighbours(self, j, sign, track=True):
        if self.dense:
            cand = self.all_idx
        else:
            cand = self.nbhd.of_cell(int(self.cell_of[j]))
        cand = cand[self.st[cand] == S]
        if len(cand) == 0:
            return 0
        if self.code == K_PYTHON:
            tau = self.pref * np.asarray(self.tau_fn(self.pos[cand], self.pos[j]), dtype=float)
        else:
            d = self.pos[cand] - self.pos[j]
            d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
            tau = tau_from_d2(self.code, self.pref, self.shape, self.cutoff2, d2)
        hit = tau > 0
        k = cand[hit]
        tau = tau[hit]
        old = self.lam[k]
        if sign > 0:
            self.nb[k] += 1
            new = old + tau
        else:
            self.nb[k] -= 1
            new = np.where(self.nb[k] == 0, 0.0, np.maximum(old - tau, 0.0))
        self.lam[k] = new
        if track and self.m:
            delta = new - old
            self.SA1 += self.oa[:, k] @ delta
            self.SA2 += (self.oa[:, k] ** 2) @ delta
        return len(k)

    @staticmethod
    def _remove(lst, pos, n, i):
        k = pos[i]
        last = lst[n - 1]
        lst[k] = last
        pos[last] = k
        pos[i] = -1

    def _infect(self, i):
        if self.st[i] != S:
            raise ValueError(f"infection of non-susceptible individual {i}")
        if self.m:
            a = self.oa[:, i]
            b = self.ob[:, i]
            self.oV += a
            if self.const_path:
                self.SA1 -= a
                self.SA2 -= a * a
            else:
                self.SA1 -= self.lam[i] * a
                self.SA2 -= self.lam[i] * a * a
            self.SB1 += b
            self.SB2 += b * b
        self.lam[i] = 0.0
        self.nb[i] = 0
        self.st[i] = I
        self._remove(self.sus_list, self.sus_pos, self.nS, i)
        self.nS -= 1
        self.inf_list[self.nI] = i
        self.inf_pos[i] = self.nI
        self.nI += 1
        return 0 if self.const_path else self._neighbours(i, +1)

    def _recover(self, i):
        if self.st[i] != I:
            raise ValueError(f"recovery of non-infected individual {i}")
        if self.m:
            b = self.ob[:, i]
            self.oV += b
            self.SB1 -= b
            self.SB2 -= b * b
        self.st[i] = R
        self._remove(self.inf_list, self.inf_pos, self.nI, i)
        self.nI -= 1
        self.nR += 1
        return 0 if self.const_path else self._neighbours(i, -1)

    def _apply(self, t, kind, i):
        self._integrate_to(t)
        self.t = t
        touched = self._infect(i) if kind == I else self._recover(i)
        self.since_rebuild += 1
        if touched * self.log2n > self.N or self.since_rebuild >= self.rebuild_every:
            self._recompute_sums()
            self.since_rebuild = 0
        self.n_events += 1
        self._log_t.append(t)
        self._log_k.append(kind)
        self._log_i.append(i)
        if self.m:
            self._log_obs.append(np.stack([self.oV, self.oC, self.oQ]))

    # -- sampling ------------------------------------------------------------
    def _uniform(self) -> float:
        if self.upos >= len(self.ubuf):
            self.ubuf = self.rng.random(self.buffer_size)
            self.upos = 0
        u = self.ubuf[self.upos]
        self.upos += 1
        return float(u)

    def _draw_next(self):
        rate = self.total_rate()
        if rate <= 0.0:
            self.t_next = math.inf
        else:
            self.t_next = self.t - math.log1p(-self._uniform()) / rate

    def _select(self):
        rec = self.p * self.nI
        x = self._uniform() * (rec + self._infection_total())
        if x < rec:
            k = min(int(x / self.p), self.nI - 1)
            return R, int(self.inf_list[k])
        y = x - rec
        if self.const_path:
            k = min(int(y / (self.pref * self.nI)), self.nS - 1)
            return I, int(self.sus_list[k])
        cs = np.cumsum(self.lam)
        i = int(np.searchsorted(cs, y, side="right"))
        if i >= self.N or self.st[i] != S or self.lam[i] <= 0.0:
            i = int(np.flatnonzero(self.lam > 0.0)[-1])
        return I, i

    def step(self):
        """Fire the pending event; ``None`` once the chain is absorbed."""
        if self.rng is None:
            raise RuntimeError("replay-only engine has no random source")
        if not math.isfinite(self.t_next):
            return None
        t = self.t_next
        kind, i = self._select()
        self._apply(t, kind, i)
        self._draw_next()
        return t, kind, i

    def advance(self, t_stop: float) -> int:
        """Fire every event with time <= ``t_stop``; returns how many fired."""
        n = 0
        while self.t_next <= t_stop:
            self.step()
            n += 1
        return n

    def apply_event(self, t: float, kind: int, i: int):
        if t < self.t:
            raise ValueError("events must be applied in time order")
        self._apply(float(t), int(kind), int(i))

    def replay(self, times, kinds, idx):
        for t, k, i in zip(np.asarray(times, float), np.asarray(kinds), np.asarray(idx)):
            self.apply_event(t, k, i)

    def take_log(self) -> dict:
        out = {
            "times": np.asarray(self._log_t, dtype=float),
            "kinds": np.asarray(self._log_k, dtype=np.int8),
            "idx": np.asarray(self._log_i, dtype=np.int64),
        }
        if self.m:
            out["obs"] = np.asarray(self._log_obs).reshape(-1, 3, self.m)
        self._log_t, self._log_k, self._log_i, self._log_obs = [], [], [], []
        return out


def kernel_sum(query, atoms, weights, code, pref, shape, cutoff2, cell_n=1, cell_start=None, cell_items=None):
    """``out[q, c] = sum_j tau(|query_q - atom_j|^2) * weights[j, c]``."""
    query = np.ascontiguousarray(query, dtype=float)
    atoms = np.ascontiguousarray(atoms, dtype=float)
    weights = np.ascontiguousarray(weights, dtype=float)
    out = np.zeros((len(query), weights.shape[1]))
    if len(atoms) == 0 or len(query) == 0:
        return out
    if not math.isfinite(cutoff2):
        chunk = max(1, 4_000_000 // max(len(atoms), 1))
        for s in range(0, len(query), chunk):
            qd = query[s:s + chunk, None, :] - atoms[None, :, :]
            d2 = qd[..., 0] * qd[..., 0] + qd[..., 1] * qd[..., 1]
            out[s:s + chunk] = tau_from_d2(code, pref, shape, cutoff2, d2) @ weights
        return out
    nb = _Neighbourhoods(int(cell_n), cell_start, cell_items)
    n = int(cell_n)
    ij = np.floor(query * n).astype(np.int64)
    # query cells may lie one ring outside the domain; anything further has no atoms in range
    ok = np.all((ij >= -1) & (ij <= n), axis=1)
    clipped = np.clip(ij, 0, n - 1)
    cid = clipped[:, 0] * n + clipped[:, 1]
    sel = np.flatnonzero(ok)
    sel = sel[np.argsort(cid[sel], kind="stable")]
    cells, first = np.unique(cid[sel], return_index=True)
    bounds = np.append(first, len(sel))
    for c, lo, hi in zip(cells, bounds[:-1], bounds[1:]):
        rows = sel[lo:hi]
        # a query one ring outside borrows the block of its clipped cell, which covers its own block
        cand = nb.of_cell(int(c))
        if len(cand) == 0:
            continue
        qd = query[rows, None, :] - atoms[None, cand, :]
        d2 = qd[..., 0] * qd[..., 0] + qd[..., 1] * qd[..., 1]
        out[rows] = tau_from_d2(code, pref, shape, cutoff2, d2) @ weights[cand]
    return out
