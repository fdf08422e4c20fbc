"""Lag-correlation accumulation and the finite-time response curve.

Along an unperturbed trajectory sampled every ``h`` time units the
accumulator averages, for lags ``tau_m = h m`` and ``s_n = h n`` with
``0 <= m <= n <= M``,

    c1(tau_m)      = < w_k' D2f(x_k) : (w_k (x) B_m) >
    c2(tau_m, s_n) = < a_m' D2f(x_{k-m}) : (u_m (x) P_{m,n}) >

with ``B_m = T_{k-1} ... T_{k-m}``, ``a_m' = [(I - w w')(Df + Df') w]' B_m``
at ``x_k``, ``u_m = T_{k-m}^{-1} ... T_{k-1}^{-1} w_k`` and
``P_{m,n} = T_{k-m} ... T_{k-n}`` (``endpoint="printed"``, ``n - m + 1``
factors) or ``T_{k-m-1} ... T_{k-n}`` (``endpoint="continuum"``).  The
response ``r(t)`` is the trapezoidal integral of ``c1`` plus the iterated
trapezoidal integral of ``c2`` over the triangle ``tau <= s <= t``.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .dynamics import IntegratorConfig, System, initial_state
from .lyapunov import DegenerateMap, HistoryUnderflow, MapHistory

ENDPOINT_MODES = ("printed", "continuum")


@dataclass(frozen=True)
class ResponseGridConfig:
    h: float = 0.25
    M: int = 60
    K_target: int = 4_000_000
    endpoint: str = "printed"

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("history step h must be positive")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError("grid depth M must be a positive integer")
        if self.K_target < 1:
            raise ValueError("K_target must be positive")
        if self.endpoint not in ENDPOINT_MODES:
            raise ValueError(f"endpoint must be one of {ENDPOINT_MODES}, got {self.endpoint!r}")

    @property
    def times(self):
        return self.h * np.arange(self.M + 1)


class CorrelationGrid:
    """Running sums (or, once finalized, averages) of ``c1`` and ``c2``.

    ``c2`` is stored as an (M+1, M+1, N) array of which only the entries
    with ``m <= n`` are used.  Grids with equal shapes merge by adding sums
    and counts.
    """

    def __init__(self, M: int, dimension: int, endpoint: str = "printed"):
        self.M = M
        self.dimension = dimension
        self.endpoint = endpoint
        self.c1 = np.zeros((M + 1, dimension))
        self.c2 = np.zeros((M + 1, M + 1, dimension))
        self.count = 0
        self.averaged = False

    def copy(self):
        g = CorrelationGrid(self.M, self.dimension, self.endpoint)
        g.c1 = self.c1.copy()
        g.c2 = self.c2.copy()
        g.count = self.count
        g.averaged = self.averaged
        return g

    def merge(self, other: "CorrelationGrid") -> "CorrelationGrid":
        if self.averaged or other.averaged:
            raise ValueError("only un-finalized grids can be merged")
        if (self.M, self.dimension, self.endpoint) != (other.M, other.dimension, other.endpoint):
            raise ValueError("cannot merge grids of different shape or endpoint mode")
        out = self.copy()
        out.c1 += other.c1
        out.c2 += other.c2
        out.count += other.count
        return out

    __add__ = merge

    def triangle(self):
        """``(m, n)`` index arrays of the used ``c2`` entries, row-major."""
        return np.triu_indices(self.M + 1)


def finalize(grid: CorrelationGrid) -> CorrelationGrid:
    """Divide all sums by the sample count."""
    if grid.averaged:
        return grid.copy()
    if grid.count <= 0:
        raise ValueError("cannot finalize a grid with zero samples")
    out = grid.copy()
    out.c1 /= grid.count
    out.c2 /= grid.count
    out.averaged = True
    return out


def merge_grids(grids):
    """Fold grids left to right, in the order given."""
    grids = list(grids)
    out = grids[0].copy()
    for g in grids[1:]:
        out = out.merge(g)
    return out


# --- compiled per-sample kernels ---------------------------------------------

@numba.njit(cache=True)
def _vecmat(r, T, out):
    n = T.shape[1]
    for c in range(n):
        out[c] = 0.0
    for a in range(T.shape[0]):
        ra = r[a]
        for c in range(n):
            out[c] += ra * T[a, c]


@numba.njit(cache=True)
def _lu_solve_inplace(lu, piv, b):
    n = b.shape[0]
    for i in range(n):
        p = piv[i]
        if p != i:
            tmp = b[i]
            b[i] = b[p]
            b[p] = tmp
    for i in range(n):
        s = b[i]
        for j in range(i):
            s -= lu[i, j] * b[j]
        b[i] = s
    for i in range(n - 1, -1, -1):
        s = b[i]
        for j in range(i + 1, n):
            s -= lu[i, j] * b[j]
        b[i] = s / lu[i, i]


@numba.njit(cache=True)
def _lag_rows(maps, lus, pivs, k, cap, M, g, q, w, C1, A, U):
    C1[0] = g
    A[0] = q
    U[0] = w
    for m in range(1, M + 1):
        s = (k - m) % cap
        _vecmat(C1[m - 1], maps[s], C1[m])
        _vecmat(A[m - 1], maps[s], A[m])
        U[m] = U[m - 1]
        _lu_solve_inplace(lus[s], pivs[s], U[m])


@numba.njit(cache=True)
def _accumulate_c2(c2, H, maps, k, cap, M, printed):
    # R[m] holds the running row H[m] P_{m,n}; at lag n every active row is
    # multiplied by T_{k-n} in one matrix product
    n_dim = H.shape[1]
    R = np.zeros((M + 1, n_dim))
    for n in range(M + 1):
        T = maps[(k - n) % cap]
        if printed:
            R[n] = H[n]
            R[: n + 1] = np.dot(R[: n + 1], T)
        else:
            if n > 0:
                R[:n] = np.dot(R[:n], T)
            R[n] = H[n]
        for m in range(n + 1):
            for c in range(n_dim):
                c2[m, n, c] += R[m, c]


def lag_terms(history: MapHistory, system: System, rcond_min=1e-14):
    """Per-lag row vectors of the newest sample ``k`` in ``history``.

    Returns ``(C1, H)`` where ``C1[m]`` is the ``c1`` contribution at lag
    ``m`` and ``H[m] = a_m' D2f(x_{k-m}) : (u_m (x) .)``, the row that the
    ``P_{m,n}`` products act on.
    """
    M = history.depth
    k = history.newest
    if history.count < history.capacity:
        raise HistoryUnderflow(f"need {history.capacity} stored steps, have {history.count}")
    cap = history.capacity
    slots = (k - np.arange(1, M + 1)) % cap
    bad = np.flatnonzero(~(history.rconds[slots] > rcond_min))
    if bad.size:
        j = int(bad[0]) + 1
        raise DegenerateMap(k - j, float(history.rconds[slots[bad[0]]]))

    x = history.state(k)
    w = history.direction(k)
    J = system.jacobian(x)
    q = (J + J.T) @ w
    q -= w * (w @ q)
    g = system.hessian_contract(x, w, w)

    n = system.dimension
    C1 = np.empty((M + 1, n))
    A = np.empty((M + 1, n))
    U = np.empty((M + 1, n))
    _lag_rows(history.maps, history.lus, history.pivs, k, cap, M,
              np.ascontiguousarray(g, dtype=float), q, np.ascontiguousarray(w), C1, A, U)
    X = history.states[(k - np.arange(M + 1)) % cap]
    H = np.ascontiguousarray(system.hessian_contract_batch(X, A, U), dtype=float)
    return C1, H


def accumulate_sample(grid: CorrelationGrid, history: MapHistory, system: System):
    """Add the contribution of the newest sample in ``history`` to ``grid``."""
    if grid.averaged:
        raise ValueError("cannot accumulate into a finalized grid")
    if history.depth != grid.M:
        raise ValueError("history depth and grid depth differ")
    C1, H = lag_terms(history, system)
    grid.c1 += C1
    _accumulate_c2(grid.c2, H, history.maps, history.newest, history.capacity, grid.M,
                   grid.endpoint == "printed")
    grid.count += 1
    return grid


# --- trajectory driver -------------------------------------------------------

class ResponseAccumulator:
    """Walks one unperturbed trajectory and accumulates correlation sums.

    The state and direction are spun up for ``spinup`` time units first.
    Every history step the incremental map ``T_k`` is computed jointly with
    ``x_{k+1}``, pushed with ``(x_k, w_k)``, and once ``M + 1`` steps are
    stored a sample is accumulated.  ``w_{k+1}`` is ``T_k w_k`` normalized.
    """

    def __init__(self, system: System, config: ResponseGridConfig = ResponseGridConfig(),
                 dt=0.01, spinup=1e3, seed=0, x0=None):
        self.system = system
        self.config = config
        self.integrator = IntegratorConfig.from_history_step(dt, config.h)
        n = system.dimension
        rng = np.random.default_rng(seed)
        x = initial_state(n, seed) if x0 is None else np.asarray(x0, dtype=float)
        w = rng.standard_normal(n)
        w /= np.linalg.norm(w)
        sub = self.integrator.substeps_per_history_step
        n_spin = int(round(spinup / config.h))
        if n_spin:
            x, w, _ = system.log_stretches(x, w, dt, sub, n_spin)
        self.x = x
        self.w = w
        self.history = MapHistory(config.M, n)
        self.grid = CorrelationGrid(config.M, n, config.endpoint)
        self._eye = np.eye(n)

    def step(self):
        cfg = self.integrator
        x_next, T = self.system.propagate(self.x, self._eye, cfg.dt, cfg.substeps_per_history_step)
        self.history.push(self.x, self.w, T)
        sampled = self.history.count >= self.history.capacity
        if sampled:
            accumulate_sample(self.grid, self.history, self.system)
        v = T @ self.w
        self.w = v / np.linalg.norm(v)
        self.x = x_next
        return sampled

    def run(self, n_samples: int) -> CorrelationGrid:
        """Accumulate ``n_samples`` more samples into :attr:`grid` and return it."""
        target = self.grid.count + n_samples
        while self.grid.count < target:
            self.step()
        return self.grid

    def take_grid(self) -> CorrelationGrid:
        """Return the current sums and start a fresh grid on the same trajectory."""
        g = self.grid
        self.grid = CorrelationGrid(g.M, g.dimension, g.endpoint)
        return g


def shard_seeds(seed: int, shards: int):
    """Deterministic per-shard integer seeds."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(shards)]


def _run_shard(args):
    system, config, n_samples, dt, spinup, seed = args
    return ResponseAccumulator(system, config, dt=dt, spinup=spinup, seed=seed).run(n_samples)


def accumulate_correlations(system: System, config: ResponseGridConfig, n_samples: int,
                            seed=0, shards=1, dt=0.01, spinup=1e3, workers=1):
    """Split ``n_samples`` over independent shards and merge their sums.

    Shards get seeds from :func:`shard_seeds`; merging always folds in shard
    order, so the result does not depend on ``workers``.
    """
    if shards < 1:
        raise ValueError("need at least one shard")
    seeds = shard_seeds(seed, shards)
    base, extra = divmod(n_samples, shards)
    jobs = [(system, config, base + (i < extra), dt, spinup, s) for i, s in enumerate(seeds)]
    if workers > 1 and shards > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            grids = list(ex.map(_run_shard, jobs))
    else:
        grids = [_run_shard(j) for j in jobs]
    return merge_grids(grids), seeds


# --- quadrature --------------------------------------------------------------

@dataclass
class ResponseCurve:
    times: np.ndarray
    r_vectors: np.ndarray
    r_scalar: np.ndarray = field(init=False)

    def __post_init__(self):
        self.r_scalar = self.r_vectors.mean(axis=1)

    @property
    def h(self):
        return float(self.times[1] - self.times[0])

    def at(self, t0: float):
        i = grid_index(self.times, t0)
        return self.r_vectors[i], self.r_scalar[i]


def response_curve(c1, c2, h: float) -> ResponseCurve:
    """Trapezoidal assembly of ``r(t_i)``, ``t_i = h i``.

    ``c1`` has shape (M+1, N); ``c2`` has shape (M+1, M+1, N) with entries
    ``n < m`` ignored.  The ``c2`` part is integrated over ``s`` in
    ``[tau_m, t_i]`` first, then over ``tau`` in ``[0, t_i]``.
    """
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    M = c1.shape[0] - 1
    if c2.shape[:2] != (M + 1, M + 1) or c2.shape[2] != c1.shape[1]:
        raise ValueError("c1 and c2 shapes are inconsistent")
    c2 = c2 * np.triu(np.ones((M + 1, M + 1)))[:, :, None]

    # inner[m, i] = trapezoid over n in [m, i] of c2[m, n], zero for i <= m;
    # entries below the diagonal are zero, so the cumulative sum starts at n = m
    diag = c2[np.arange(M + 1), np.arange(M + 1)]
    inner = h * (np.cumsum(c2, axis=1) - 0.5 * (diag[:, None, :] + c2))
    inner *= np.triu(np.ones((M + 1, M + 1)), k=1)[:, :, None]

    r = np.zeros_like(c1)
    c1_cum = np.cumsum(c1, axis=0)
    for i in range(1, M + 1):
        r1 = h * (c1_cum[i] - 0.5 * (c1[0] + c1[i]))
        col = inner[: i + 1, i]
        r2 = h * (col.sum(axis=0) - 0.5 * (col[0] + col[i]))
        r[i] = r1 + r2
    return ResponseCurve(times=h * np.arange(M + 1), r_vectors=r)


def curve_from_grid(grid: CorrelationGrid, h: float) -> ResponseCurve:
    g = grid if grid.averaged else finalize(grid)
    return response_curve(g.c1, g.c2, h)


# --- response-time selection -------------------------------------------------

class NoPlateau(RuntimeError):
    pass


@dataclass
class PlateauSelection:
    t0: float
    index: int
    window: tuple
    method: str
    value: float


def grid_index(times, t0, tol=1e-9):
    h = times[1] - times[0]
    i = int(round(t0 / h))
    if abs(t0 / h - i) > tol * max(1.0, abs(t0 / h)) or not 0 <= i < len(times):
        raise ValueError(f"t0={t0} is not a point of the response grid (h={h}, t_max={times[-1]})")
    return i


def _window_ok(t, r, tol, max_elasticity):
    mean = r.mean()
    if mean == 0 or np.max(np.abs(r - mean)) >= tol * abs(mean):
        return False
    # a steady trend is not a plateau: log-log slope must stay small
    slope = np.polyfit(np.log(t), np.log(np.abs(r)), 1)[0]
    return abs(slope) < max_elasticity


def select_response_time(curve: ResponseCurve, method="auto", t0=None, plateau_tol=0.1,
                         min_points=5, t_min=1.0, max_elasticity=0.5, component=None):
    """Pick the finite response time from the plateau of ``r(t)``.

    ``method="manual"`` returns the grid point ``t0``.  ``method="auto"``
    searches ``t > t_min`` for the longest run of at least ``min_points``
    grid points over which ``max|r - mean| < plateau_tol |mean|`` and whose
    log-log slope is below ``max_elasticity``, and returns the run's
    midpoint.  Raises :class:`NoPlateau` if no run qualifies.
    """
    times = curve.times
    r = curve.r_scalar if component is None else curve.r_vectors[:, component]
    if method == "manual":
        if t0 is None:
            raise ValueError("manual selection needs t0")
        i = grid_index(times, t0)
        return PlateauSelection(t0=float(times[i]), index=i, window=(float(times[i]), float(times[i])),
                                method="manual", value=float(r[i]))
    if method != "auto":
        raise ValueError(f"unknown selection method {method!r}")

    start = int(np.searchsorted(times, t_min, side="right"))
    best = None
    for a in range(start, len(times)):
        b_ok = None
        for b in range(a + min_points - 1, len(times)):
            if _window_ok(times[a:b + 1], r[a:b + 1], plateau_tol, max_elasticity):
                b_ok = b
        if b_ok is not None and (best is None or b_ok - a > best[1] - best[0]):
            best = (a, b_ok)
    if best is None:
        raise NoPlateau(f"no plateau of >= {min_points} points within tolerance {plateau_tol}")
    a, b = best
    i = (a + b) // 2
    return PlateauSelection(t0=float(times[i]), index=i, window=(float(times[a]), float(times[b])),
                            method="auto", value=float(r[i]))
