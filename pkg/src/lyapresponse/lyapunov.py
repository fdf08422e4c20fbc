"""Largest Lyapunov exponent and incremental tangent maps.

The exponent is estimated from a tangent vector propagated jointly with the
state and renormalized at a fixed cadence, summing the log stretches.  The
incremental maps ``T_k`` (tangent map over one history step ``h`` starting
at ``x_k``) are kept in a ring buffer; spans of several steps are ordered
products with later increments multiplying on the left, and backward
actions are per-increment LU solves.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .dynamics import System, TrajectoryDivergence, initial_state


class DegenerateMap(np.linalg.LinAlgError):
    def __init__(self, index, rcond):
        self.index = index
        self.rcond = rcond
        cond = math.inf if rcond == 0 else 1.0 / rcond
        super().__init__(f"incremental tangent map T_{index} is numerically singular (condition ~ {cond:.3g})")


class HistoryUnderflow(IndexError):
    pass


@dataclass
class LyapunovEstimate:
    exponent: float
    stderr: float
    window: float
    trace_times: np.ndarray
    trace_values: np.ndarray
    block_rates: np.ndarray = field(repr=False)
    seed: int | None = None

    @property
    def trace(self):
        return np.column_stack([self.trace_times, self.trace_values])


def combine_estimates(estimates):
    """Duration-weighted average of independent estimates."""
    windows = np.array([e.window for e in estimates], dtype=float)
    lams = np.array([e.exponent for e in estimates])
    errs = np.array([e.stderr for e in estimates])
    wsum = windows.sum()
    lam = float(np.dot(windows, lams) / wsum)
    err = float(math.sqrt(np.sum((windows / wsum) ** 2 * errs ** 2)))
    return lam, err


def _unit(v):
    return v / np.linalg.norm(v)


def largest_lyapunov(system: System, x0=None, dt=0.01, spinup=1e3, window=5e4,
                     renorm_every=25, seed=0, trace_every=1000, block_length=1e3,
                     chunk_renorms=40000) -> LyapunovEstimate:
    """Estimate the largest Lyapunov exponent by tangent-vector renormalization.

    The state and tangent vector are spun up together for ``spinup`` time
    units (discarded), then the log stretches over ``window`` time units are
    summed.  ``stderr`` comes from non-overlapping blocks of
    ``block_length`` time units, shortened to ``window / 10`` for short
    windows.  The running estimate is recorded every ``trace_every``
    integrator steps (rounded to renormalization boundaries).
    """
    rng = np.random.default_rng(seed)
    n = system.dimension
    x = initial_state(n, seed) if x0 is None else np.asarray(x0, dtype=float)
    v = _unit(rng.standard_normal(n))

    spin_steps = int(round(spinup / dt))
    n_spin, rem = divmod(spin_steps, renorm_every)
    if n_spin:
        x, v, _ = system.log_stretches(x, v, dt, renorm_every, n_spin)
    if rem:
        x, v, _ = system.log_stretches(x, v, dt, rem, 1)

    total_steps = int(round(window / dt))
    if total_steps < renorm_every:
        raise ValueError("averaging window shorter than one renormalization interval")
    n_ren = total_steps // renorm_every
    window_eff = n_ren * renorm_every * dt

    blen = block_length if window_eff / block_length >= 10 else window_eff / 10
    per_block = max(1, int(round(blen / (renorm_every * dt))))
    trace_stride = max(1, int(round(trace_every / renorm_every)))

    total = 0.0
    done = 0
    block_sums = []
    carry = 0.0
    carry_n = 0
    t_times, t_vals = [], []
    while done < n_ren:
        m = min(chunk_renorms, n_ren - done)
        try:
            x, v, logs = system.log_stretches(x, v, dt, renorm_every, m)
        except TrajectoryDivergence as exc:
            raise TrajectoryDivergence(spin_steps + done * renorm_every + exc.step_index,
                                       str(exc)) from None
        cums = total + np.cumsum(logs)
        idx = np.arange(done + 1, done + m + 1)
        sel = idx % trace_stride == 0
        t_times.extend(idx[sel] * renorm_every * dt)
        t_vals.extend(cums[sel] / (idx[sel] * renorm_every * dt))
        total = float(cums[-1])
        # block sums, carrying partial blocks across chunks
        pos = 0
        while pos < m:
            take = min(per_block - carry_n, m - pos)
            carry += float(np.sum(logs[pos:pos + take]))
            carry_n += take
            pos += take
            if carry_n == per_block:
                block_sums.append(carry)
                carry, carry_n = 0.0, 0
        done += m

    lam = total / window_eff
    rates = np.array(block_sums) / (per_block * renorm_every * dt)
    stderr = float(np.std(rates, ddof=1) / math.sqrt(len(rates))) if len(rates) > 1 else math.nan
    return LyapunovEstimate(exponent=lam, stderr=stderr, window=window_eff,
                            trace_times=np.array(t_times), trace_values=np.array(t_vals),
                            block_rates=rates, seed=seed)


# --- incremental tangent maps ------------------------------------------------

@dataclass
class IncrementalTangentMap:
    matrix: np.ndarray
    anchor_index: int
    span: float
    end_state: np.ndarray = field(repr=False, default=None)


def incremental_map(system: System, x_k, dt, substeps, anchor_index=0) -> IncrementalTangentMap:
    """Tangent map of the ``h = dt * substeps`` flow at ``x_k``."""
    n = system.dimension
    x_end, T = system.propagate(np.asarray(x_k, dtype=float), np.eye(n), dt, substeps)
    return IncrementalTangentMap(matrix=T, anchor_index=anchor_index, span=dt * substeps, end_state=x_end)


class MapHistory:
    """Ring buffer of recent states, directions and incremental maps.

    After ``push(x_k, w_k, T_k)`` the newest index is ``k``.  The buffer
    holds the ``depth`` maps ``T_{k-depth} .. T_{k-1}`` that span the lag
    grid, the matching states and directions ``k-depth .. k``, and the
    outgoing map ``T_k`` of the newest state.  Each map is LU-factorized
    once on entry; backward actions reuse the factors.
    """

    def __init__(self, depth: int, dimension: int):
        if depth < 1:
            raise ValueError("history depth must be at least 1")
        self.depth = depth
        self.capacity = depth + 1
        n = dimension
        self.maps = np.zeros((self.capacity, n, n))
        self.lus = np.zeros((self.capacity, n, n))
        self.pivs = np.zeros((self.capacity, n), dtype=np.int64)
        self.rconds = np.zeros(self.capacity)
        self.states = np.zeros((self.capacity, n))
        self.directions = np.zeros((self.capacity, n))
        self.newest = -1
        self.count = 0

    def push(self, x_k, w_k, T_k):
        self.newest += 1
        self.count += 1
        s = self.newest % self.capacity
        T_k = np.asarray(T_k, dtype=float)
        self.maps[s] = T_k
        self.states[s] = x_k
        self.directions[s] = w_k
        with warnings.catch_warnings():
            # singular maps are reported through rcond when they are used
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(T_k, check_finite=False)
        self.lus[s] = lu
        self.pivs[s] = piv
        if np.all(np.isfinite(lu)) and np.all(np.diag(lu) != 0):
            rcond, _ = lapack.dgecon(lu, np.abs(T_k).sum(axis=0).max(), norm="1")
        else:
            rcond = 0.0
        self.rconds[s] = rcond

    @property
    def oldest(self):
        return self.newest - min(self.count, self.capacity) + 1

    def _slot(self, j):
        if j > self.newest or j < self.oldest:
            raise HistoryUnderflow(f"index {j} outside stored history [{self.oldest}, {self.newest}]")
        return j % self.capacity

    def map(self, j):
        return self.maps[self._slot(j)]

    def state(self, j):
        return self.states[self._slot(j)]

    def direction(self, j):
        return self.directions[self._slot(j)]

    def lu(self, j, rcond_min=1e-14):
        s = self._slot(j)
        if not self.rconds[s] > rcond_min:
            raise DegenerateMap(j, self.rconds[s])
        return self.lus[s], self.pivs[s]

    def check_span(self, k, m):
        """Raise unless maps ``T_{k-m} .. T_{k-1}`` are stored."""
        if m < 0:
            raise ValueError("span must be non-negative")
        if m:
            self._slot(k - 1)
            self._slot(k - m)


def forward_product(history: MapHistory, k: int, m: int):
    """``T_{k-1} T_{k-2} ... T_{k-m}``: the tangent map from ``x_{k-m}`` to ``x_k``."""
    history.check_span(k, m)
    n = history.maps.shape[1]
    B = np.eye(n)
    for j in range(1, m + 1):
        B = B @ history.map(k - j)
    return B


def backward_direction(history: MapHistory, k: int, m: int, w_k):
    """Pull ``w_k`` back ``m`` history steps: ``u_j = T_{k-j}^{-1} u_{j-1}`` by LU solves."""
    history.check_span(k, m)
    u = np.array(w_k, dtype=float)
    for j in range(1, m + 1):
        u = sla.lu_solve(history.lu(k - j), u, check_finite=False)
    return u
