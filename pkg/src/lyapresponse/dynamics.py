"""Autonomous ODE systems and fixed-step RK4 integration.

A system exposes its vector field, Jacobian and the contraction of its
second derivative with a pair of vectors.  States, tangent vectors and
tangent matrices are all advanced with the classical four-stage RK4 scheme;
tangent quantities reuse the intermediate stage states of the base step so
that base and tangent trajectories stay consistent to integrator order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class TrajectoryDivergence(FloatingPointError):
    """Raised when an integrated state or tangent quantity stops being finite."""

    def __init__(self, step_index: int, message: str = ""):
        self.step_index = int(step_index)
        super().__init__(message or f"trajectory diverged at step {self.step_index}")


@dataclass(frozen=True)
class IntegratorConfig:
    """Integrator time step and the number of steps per history step ``h``."""

    dt: float = 0.01
    substeps_per_history_step: int = 25

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.substeps_per_history_step) != self.substeps_per_history_step or self.substeps_per_history_step < 1:
            raise ValueError("substeps_per_history_step must be a positive integer")

    @property
    def h(self) -> float:
        return self.dt * self.substeps_per_history_step

    @classmethod
    def from_history_step(cls, dt: float, h: float) -> "IntegratorConfig":
        """Build a config from ``dt`` and ``h``, requiring ``h`` to be an integer multiple of ``dt``."""
        ratio = h / dt
        n = int(round(ratio))
        if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"history step h={h} is not an integer multiple of dt={dt}")
        return cls(dt=dt, substeps_per_history_step=n)


class System:
    """Base class for autonomous systems ``dx/dt = f(x)``.

    Subclasses implement :meth:`rhs`, :meth:`jacobian` and
    :meth:`hessian_contract`.  The bulk propagation methods have generic
    RK4 implementations here and may be overridden with compiled kernels;
    overrides must agree with the generic versions to rounding.
    """

    dimension: int

    def rhs(self, x):
        raise NotImplementedError

    def jacobian(self, x):
        raise NotImplementedError

    def jvp(self, x, V):
        """Jacobian action ``Df(x) @ V`` for a vector or an N x m matrix."""
        return self.jacobian(x) @ V

    def hessian_contract(self, x, w, u):
        """Row vector ``m_c = sum_ab w_a d2f_a/dx_b dx_c (x) u_b``."""
        raise NotImplementedError

    def hessian_contract_batch(self, X, W, U):
        """Row-wise :meth:`hessian_contract` over stacked states and vector pairs."""
        return np.array([self.hessian_contract(x, w, u) for x, w, u in zip(X, W, U)])

    # bulk propagation; generic versions, overridable

    def flow(self, x, dt, n_steps):
        return advance(self, x, dt, n_steps)

    def propagate(self, x, V, dt, n_steps):
        """Advance ``x`` and tangent block ``V`` jointly over ``n_steps`` RK4 steps."""
        x = np.asarray(x, dtype=float)
        V = np.asarray(V, dtype=float)
        for i in range(n_steps):
            try:
                x, V = rk4_joint_step(self, x, V, dt)
            except TrajectoryDivergence:
                raise TrajectoryDivergence(i + 1) from None
        return x, V

    def log_stretches(self, x, v, dt, steps_per_renorm, n_renorms):
        """Propagate ``(x, v)``, renormalizing ``v`` every ``steps_per_renorm`` steps.

        Returns the final state, the final unit direction and the array of
        ``n_renorms`` log-stretch increments.
        """
        logs = np.empty(n_renorms)
        v = np.asarray(v, dtype=float)
        v = v / np.linalg.norm(v)
        for j in range(n_renorms):
            x, vv = self.propagate(x, v[:, None], dt, steps_per_renorm)
            vv = vv[:, 0]
            s = np.linalg.norm(vv)
            if not (np.isfinite(s) and s > 0):
                raise TrajectoryDivergence(j * steps_per_renorm, "non-finite tangent stretch")
            logs[j] = np.log(s)
            v = vv / s
        return x, v, logs


class LinearSystem(System):
    """``f(x) = A x + b``; the second derivative vanishes identically."""

    def __init__(self, A, b=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.dimension = self.A.shape[0]
        self.b = np.zeros(self.dimension) if b is None else np.asarray(b, dtype=float)

    def rhs(self, x):
        return self.A @ x + self.b

    def jacobian(self, x):
        return self.A.copy()

    def hessian_contract(self, x, w, u):
        return np.zeros(self.dimension)

    def hessian_contract_batch(self, X, W, U):
        return np.zeros((len(W), self.dimension))


class ConstantField(LinearSystem):
    """``f(x) = c``."""

    def __init__(self, c):
        c = np.atleast_1d(np.asarray(c, dtype=float))
        super().__init__(np.zeros((c.size, c.size)), c)


def initial_state(n_vars: int, seed, amplitude: float = 1e-3):
    """Zero state plus seeded uniform noise of the given amplitude."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-amplitude, amplitude, n_vars)


def _check_finite(a, step_index=0):
    if not np.all(np.isfinite(a)):
        raise TrajectoryDivergence(step_index)


def rk4_step(system: System, x, dt: float):
    """One classical RK4 step of ``dx/dt = f(x)``."""
    x = np.asarray(x, dtype=float)
    k1 = system.rhs(x)
    k2 = system.rhs(x + 0.5 * dt * k1)
    k3 = system.rhs(x + 0.5 * dt * k2)
    k4 = system.rhs(x + dt * k3)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _check_finite(out)
    return out


def rk4_joint_step(system: System, x, V, dt: float):
    """RK4 step of ``x`` together with ``dV/dt = Df(x(t)) V``.

    ``V`` may be a vector or an N x m block.  The Jacobian is evaluated at
    the same stage states as the base step, so the tangent update is the
    exact derivative of the discrete RK4 map and is linear in ``V``.
    """
    x = np.asarray(x, dtype=float)
    V = np.asarray(V, dtype=float)
    k1 = system.rhs(x)
    K1 = system.jvp(x, V)
    x2 = x + 0.5 * dt * k1
    k2 = system.rhs(x2)
    K2 = system.jvp(x2, V + 0.5 * dt * K1)
    x3 = x + 0.5 * dt * k2
    k3 = system.rhs(x3)
    K3 = system.jvp(x3, V + 0.5 * dt * K2)
    x4 = x + dt * k3
    k4 = system.rhs(x4)
    K4 = system.jvp(x4, V + dt * K3)
    x_new = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    V_new = V + (dt / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
    _check_finite(x_new)
    _check_finite(V_new)
    return x_new, V_new


def advance(system: System, x0, dt: float, n_steps: int,
            observer: Optional[Callable[[int, np.ndarray], None]] = None):
    """Apply :func:`rk4_step` ``n_steps`` times.

    ``observer(i, x)`` is called after every step with the step count
    ``i`` (1-based) and the new state.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    x = np.asarray(x0, dtype=float).copy()
    for i in range(1, n_steps + 1):
        try:
            x = rk4_step(system, x, dt)
        except TrajectoryDivergence:
            raise TrajectoryDivergence(i) from None
        if observer is not None:
            observer(i, x)
    return x
