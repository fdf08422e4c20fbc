"""Rescaled Lorenz 96 model with periodic boundary conditions.

    dx_i/dt = (x_{i-1} + alpha*beta) (x_{i+1} - x_{i-2}) - beta x_i + beta^2 (F - alpha)

With ``alpha = 0`` and ``beta = 1`` this is the standard Lorenz 96 system.
The substitution ``X = alpha + x / beta`` together with ``t_std = beta t``
maps rescaled trajectories onto standard ones, so choosing ``alpha`` and
``1 / beta`` as the climatological mean and standard deviation of the
standard model gives a rescaled climate with zero mean and unit variance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .dynamics import System, TrajectoryDivergence, initial_state


@dataclass(frozen=True)
class L96Params:
    forcing: float
    alpha: float = 0.0
    beta: float = 1.0
    n_vars: int = 20

    def __post_init__(self):
        if self.n_vars < 4:
            raise ValueError("Lorenz 96 needs at least 4 variables")
        if not self.forcing > 0:
            raise ValueError("forcing F must be positive")
        if self.alpha < 0 or not self.beta > 0:
            raise ValueError("need alpha >= 0 and beta > 0")

    @classmethod
    def standard(cls, forcing, n_vars=20):
        return cls(forcing=forcing, alpha=0.0, beta=1.0, n_vars=n_vars)


# --- compiled kernels --------------------------------------------------------

@numba.njit(cache=True)
def _rhs_into(x, ab, beta, drive, out):
    n = x.shape[0]
    for i in range(n):
        xm1 = x[i - 1]
        xm2 = x[i - 2]
        xp1 = x[(i + 1) % n]
        out[i] = (xm1 + ab) * (xp1 - xm2) - beta * x[i] + drive[i]


@numba.njit(cache=True)
def _jvp_into(x, V, ab, beta, out):
    n, m = V.shape
    for i in range(n):
        im1 = (i - 1) % n
        im2 = (i - 2) % n
        ip1 = (i + 1) % n
        c_m2 = -(x[im1] + ab)
        c_m1 = x[ip1] - x[im2]
        c_p1 = x[im1] + ab
        for j in range(m):
            out[i, j] = c_m2 * V[im2, j] + c_m1 * V[im1, j] - beta * V[i, j] + c_p1 * V[ip1, j]


@numba.njit(cache=True)
def _flow(x, dt, n_steps, ab, beta, drive):
    """State-only RK4.  Returns (x, failed_step) with failed_step = -1 on success."""
    n = x.shape[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    y = np.empty(n)
    x = x.copy()
    for s in range(n_steps):
        _rhs_into(x, ab, beta, drive, k1)
        for i in range(n):
            y[i] = x[i] + 0.5 * dt * k1[i]
        _rhs_into(y, ab, beta, drive, k2)
        for i in range(n):
            y[i] = x[i] + 0.5 * dt * k2[i]
        _rhs_into(y, ab, beta, drive, k3)
        for i in range(n):
            y[i] = x[i] + dt * k3[i]
        _rhs_into(y, ab, beta, drive, k4)
        tot = 0.0
        for i in range(n):
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            tot += x[i]
        if not np.isfinite(tot):
            return x, s + 1
    return x, -1


@numba.njit(cache=True)
def _propagate(x, V, dt, n_steps, ab, beta, drive):
    """Joint RK4 of state and tangent block, stage-consistent."""
    n, m = V.shape
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    K1 = np.empty((n, m))
    K2 = np.empty((n, m))
    K3 = np.empty((n, m))
    K4 = np.empty((n, m))
    y = np.empty(n)
    Y = np.empty((n, m))
    x = x.copy()
    V = V.copy()
    for s in range(n_steps):
        _rhs_into(x, ab, beta, drive, k1)
        _jvp_into(x, V, ab, beta, K1)
        for i in range(n):
            y[i] = x[i] + 0.5 * dt * k1[i]
            for j in range(m):
                Y[i, j] = V[i, j] + 0.5 * dt * K1[i, j]
        _rhs_into(y, ab, beta, drive, k2)
        _jvp_into(y, Y, ab, beta, K2)
        for i in range(n):
            y[i] = x[i] + 0.5 * dt * k2[i]
            for j in range(m):
                Y[i, j] = V[i, j] + 0.5 * dt * K2[i, j]
        _rhs_into(y, ab, beta, drive, k3)
        _jvp_into(y, Y, ab, beta, K3)
        for i in range(n):
            y[i] = x[i] + dt * k3[i]
            for j in range(m):
                Y[i, j] = V[i, j] + dt * K3[i, j]
        _rhs_into(y, ab, beta, drive, k4)
        _jvp_into(y, Y, ab, beta, K4)
        tot = 0.0
        for i in range(n):
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            tot += x[i]
            for j in range(m):
                V[i, j] += dt / 6.0 * (K1[i, j] + 2.0 * K2[i, j] + 2.0 * K3[i, j] + K4[i, j])
                tot += V[i, j]
        if not np.isfinite(tot):
            return x, V, s + 1
    return x, V, -1


@numba.njit(cache=True)
def _jv_into(x, v, ab, beta, out):
    n = x.shape[0]
    for i in range(n):
        xm1 = x[i - 1]
        out[i] = (-(xm1 + ab) * v[i - 2] + (x[(i + 1) % n] - x[i - 2]) * v[i - 1]
                  - beta * v[i] + (xm1 + ab) * v[(i + 1) % n])


@numba.njit(cache=True)
def _log_stretches(x, v, dt, steps_per_renorm, n_renorms, ab, beta, drive):
    """Single tangent vector with renormalization; allocation-free inner loop."""
    n = x.shape[0]
    logs = np.empty(n_renorms)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    q1 = np.empty(n)
    q2 = np.empty(n)
    q3 = np.empty(n)
    q4 = np.empty(n)
    y = np.empty(n)
    z = np.empty(n)
    x = x.copy()
    v = v / math.sqrt(np.sum(v * v))
    c = dt / 6.0
    for r in range(n_renorms):
        for s in range(steps_per_renorm):
            _rhs_into(x, ab, beta, drive, k1)
            _jv_into(x, v, ab, beta, q1)
            for i in range(n):
                y[i] = x[i] + 0.5 * dt * k1[i]
                z[i] = v[i] + 0.5 * dt * q1[i]
            _rhs_into(y, ab, beta, drive, k2)
            _jv_into(y, z, ab, beta, q2)
            for i in range(n):
                y[i] = x[i] + 0.5 * dt * k2[i]
                z[i] = v[i] + 0.5 * dt * q2[i]
            _rhs_into(y, ab, beta, drive, k3)
            _jv_into(y, z, ab, beta, q3)
            for i in range(n):
                y[i] = x[i] + dt * k3[i]
                z[i] = v[i] + dt * q3[i]
            _rhs_into(y, ab, beta, drive, k4)
            _jv_into(y, z, ab, beta, q4)
            tot = 0.0
            for i in range(n):
                x[i] += c * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                v[i] += c * (q1[i] + 2.0 * q2[i] + 2.0 * q3[i] + q4[i])
                tot += x[i]
            if not np.isfinite(tot):
                return x, v, logs, r * steps_per_renorm + s + 1
        nrm = math.sqrt(np.sum(v * v))
        if not (nrm > 0.0 and np.isfinite(nrm)):
            return x, v, logs, (r + 1) * steps_per_renorm
        logs[r] = math.log(nrm)
        for i in range(n):
            v[i] /= nrm
    return x, v, logs, -1


@numba.njit(cache=True)
def _moments(x, dt, n_samples, steps_between, ab, beta, drive):
    """Pooled sums of x and x^2 over ``n_samples`` snapshots."""
    s1 = 0.0
    s2 = 0.0
    for k in range(n_samples):
        x, failed = _flow(x, dt, steps_between, ab, beta, drive)
        if failed >= 0:
            return x, s1, s2, k * steps_between + failed
        for i in range(x.shape[0]):
            s1 += x[i]
            s2 += x[i] * x[i]
    return x, s1, s2, -1


@numba.njit(cache=True)
def _snapshots(x, dt, n_samples, steps_between, ab, beta, drive):
    out = np.empty((n_samples, x.shape[0]))
    for k in range(n_samples):
        x, failed = _flow(x, dt, steps_between, ab, beta, drive)
        if failed >= 0:
            return x, out, k * steps_between + failed
        out[k] = x
    return x, out, -1


@numba.njit(cache=True)
def _jacobian_into(x, ab, beta, J):
    n = x.shape[0]
    J[:, :] = 0.0
    for i in range(n):
        c = x[i - 1] + ab
        J[i, (i - 2) % n] -= c
        J[i, (i - 1) % n] += x[(i + 1) % n] - x[i - 2]
        J[i, i] -= beta
        J[i, (i + 1) % n] += c


@numba.njit(cache=True)
def _hessian_rows_into(W, U, out):
    # m_c = w_{c+1} (u_{c+2} - u_{c-1}) + w_{c-1} u_{c-2} - w_{c+2} u_{c+1}
    K, n = W.shape
    for k in range(K):
        for c in range(n):
            out[k, c] = (W[k, (c + 1) % n] * (U[k, (c + 2) % n] - U[k, c - 1])
                         + W[k, c - 1] * U[k, c - 2]
                         - W[k, (c + 2) % n] * U[k, (c + 1) % n])


# --- numpy reference forms ---------------------------------------------------

def _check_dim(params, *arrays):
    for a in arrays:
        if np.shape(a) != (params.n_vars,):
            raise ValueError(f"expected a vector of length {params.n_vars}, got shape {np.shape(a)}")


def l96_rhs(params: L96Params, x, perturbation=None):
    x = np.asarray(x, dtype=float)
    _check_dim(params, x)
    a, b = params.alpha, params.beta
    out = (np.roll(x, 1) + a * b) * (np.roll(x, -1) - np.roll(x, 2)) - b * x + b * b * (params.forcing - a)
    if perturbation is not None:
        out = out + perturbation
    return out


def l96_jacobian(params: L96Params, x):
    """Dense Jacobian; row ``i`` is nonzero only at columns i-2, i-1, i, i+1."""
    x = np.asarray(x, dtype=float)
    _check_dim(params, x)
    J = np.empty((params.n_vars, params.n_vars))
    _jacobian_into(x, params.alpha * params.beta, params.beta, J)
    return J


def l96_hessian_contract(params: L96Params, w, u):
    """``m_c = sum_ab w_a d2f_a/(dx_b dx_c) u_b`` in O(N).

    The only nonzero second derivatives are
    d2f_a/(dx_{a-1} dx_{a+1}) = 1 and d2f_a/(dx_{a-1} dx_{a-2}) = -1,
    plus their symmetric counterparts; the tensor does not depend on x.
    """
    w = np.asarray(w, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_dim(params, w, u)
    return _hessian_rows(w[None, :], u[None, :])[0]


def _hessian_rows(W, U):
    W = np.ascontiguousarray(W, dtype=float)
    U = np.ascontiguousarray(U, dtype=float)
    out = np.empty_like(W)
    _hessian_rows_into(W, U, out)
    return out


class Lorenz96(System):
    """Rescaled Lorenz 96 as a :class:`~lyapresponse.dynamics.System`.

    ``perturbation`` is an optional constant vector added to the vector
    field.  Bulk propagation runs in compiled kernels.
    """

    def __init__(self, params: L96Params, perturbation=None):
        self.params = params
        self.dimension = params.n_vars
        self.perturbation = (np.zeros(params.n_vars) if perturbation is None
                             else np.asarray(perturbation, dtype=float))
        _check_dim(params, self.perturbation)
        b = params.beta
        self._ab = params.alpha * b
        self._beta = b
        self._drive = b * b * (params.forcing - params.alpha) + self.perturbation

    @classmethod
    def with_node_forcing(cls, params: L96Params, p: float, node: int = 0):
        pert = np.zeros(params.n_vars)
        pert[node % params.n_vars] = p
        return cls(params, pert)

    def rhs(self, x):
        return l96_rhs(self.params, x, self.perturbation)

    def jacobian(self, x):
        return l96_jacobian(self.params, x)

    def jvp(self, x, V):
        V = np.asarray(V, dtype=float)
        if V.ndim == 1:
            out = np.empty((self.dimension, 1))
            _jvp_into(np.asarray(x, dtype=float), V[:, None].copy(), self._ab, self._beta, out)
            return out[:, 0]
        out = np.empty_like(V)
        _jvp_into(np.asarray(x, dtype=float), np.ascontiguousarray(V), self._ab, self._beta, out)
        return out

    def hessian_contract(self, x, w, u):
        return l96_hessian_contract(self.params, w, u)

    def hessian_contract_batch(self, X, W, U):
        return _hessian_rows(W, U)

    def flow(self, x, dt, n_steps):
        x, failed = _flow(np.asarray(x, dtype=float), dt, n_steps, self._ab, self._beta, self._drive)
        if failed >= 0:
            raise TrajectoryDivergence(failed)
        return x

    def propagate(self, x, V, dt, n_steps):
        V = np.asarray(V, dtype=float)
        squeeze = V.ndim == 1
        V2 = np.ascontiguousarray(V[:, None] if squeeze else V)
        x, V2, failed = _propagate(np.asarray(x, dtype=float), V2, dt, n_steps,
                                   self._ab, self._beta, self._drive)
        if failed >= 0:
            raise TrajectoryDivergence(failed)
        return x, (V2[:, 0] if squeeze else V2)

    def log_stretches(self, x, v, dt, steps_per_renorm, n_renorms):
        x, v, logs, failed = _log_stretches(np.asarray(x, dtype=float), np.asarray(v, dtype=float),
                                            dt, steps_per_renorm, n_renorms,
                                            self._ab, self._beta, self._drive)
        if failed >= 0:
            raise TrajectoryDivergence(failed, "non-finite state or tangent stretch")
        return x, v, logs

    def moments(self, x, dt, n_samples, steps_between):
        """Pooled (sum x, sum x^2) over snapshots every ``steps_between`` steps."""
        x, s1, s2, failed = _moments(np.asarray(x, dtype=float), dt, n_samples, steps_between,
                                     self._ab, self._beta, self._drive)
        if failed >= 0:
            raise TrajectoryDivergence(failed)
        return x, s1, s2

    def snapshots(self, x, dt, n_samples, steps_between):
        x, out, failed = _snapshots(np.asarray(x, dtype=float), dt, n_samples, steps_between,
                                    self._ab, self._beta, self._drive)
        if failed >= 0:
            raise TrajectoryDivergence(failed)
        return x, out


# --- calibration -------------------------------------------------------------

class CalibrationRejected(RuntimeError):
    def __init__(self, message, residual_mean=float("nan"), residual_var=float("nan")):
        super().__init__(message)
        self.residual_mean = residual_mean
        self.residual_var = residual_var


@dataclass
class CalibrationResult:
    forcing: float
    n_vars: int
    alpha: float
    beta: float
    residual_mean: float
    residual_var: float
    averaging_window: float
    seed: int = 0
    extra: dict = field(default_factory=dict)

    MAX_MEAN = 0.02
    MAX_VAR = 0.05

    @property
    def accepted(self) -> bool:
        return self.residual_mean <= self.MAX_MEAN and self.residual_var <= self.MAX_VAR

    def params(self) -> L96Params:
        return L96Params(forcing=self.forcing, alpha=self.alpha, beta=self.beta, n_vars=self.n_vars)


def pooled_moments(system: Lorenz96, seed, spinup, window, dt=0.01, sample_every=10):
    """Node- and time-pooled mean and variance after a discarded spin-up."""
    x = initial_state(system.dimension, seed)
    x = system.flow(x, dt, int(round(spinup / dt)))
    n_samples = int(round(window / (dt * sample_every)))
    if n_samples < 1:
        raise ValueError("averaging window shorter than one sampling interval")
    _, s1, s2 = system.moments(x, dt, n_samples, sample_every)
    count = n_samples * system.dimension
    mean = s1 / count
    return mean, s2 / count - mean * mean, s2 / count


def calibrate(forcing: float, n_vars: int = 20, spinup: float = 1e3, window: float = 1e4,
              seed: int = 0, dt: float = 0.01, validation_window: float | None = None,
              min_std: float = 1e-6) -> CalibrationResult:
    """Choose (alpha, beta) so the rescaled climate has zero mean and unit variance.

    alpha and 1/beta are the pooled mean and standard deviation of a long
    run of the standard model.  The result is then checked on a fresh run of
    the rescaled model with a different seed; failing that check raises
    :class:`CalibrationRejected`.
    """
    std_sys = Lorenz96(L96Params.standard(forcing, n_vars))
    mean, var, _ = pooled_moments(std_sys, seed, spinup, window, dt)
    std = math.sqrt(max(var, 0.0))
    if not std > min_std:
        raise CalibrationRejected(
            f"degenerate attractor at F={forcing}: pooled variance {var:.3g}",
            residual_mean=float("nan"), residual_var=1.0)
    if mean <= 0:
        raise CalibrationRejected(f"non-positive climatological mean {mean:.4g} at F={forcing}")
    alpha, beta = mean, 1.0 / std

    vwin = window if validation_window is None else validation_window
    resc = Lorenz96(L96Params(forcing=forcing, alpha=alpha, beta=beta, n_vars=n_vars))
    m1, _, m2 = pooled_moments(resc, seed + 1, spinup, vwin, dt)
    result = CalibrationResult(forcing=forcing, n_vars=n_vars, alpha=alpha, beta=beta,
                               residual_mean=abs(m1), residual_var=abs(m2 - 1.0),
                               averaging_window=window, seed=seed)
    if not result.accepted:
        raise CalibrationRejected(
            f"calibration self-check failed at F={forcing}: |<x>|={result.residual_mean:.4f}, "
            f"|<x^2>-1|={result.residual_var:.4f}",
            result.residual_mean, result.residual_var)
    return result
