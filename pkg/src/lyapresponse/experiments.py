"""Direct-perturbation measurements and comparison with the predicted response."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dynamics import TrajectoryDivergence, initial_state
from .lorenz96 import L96Params, Lorenz96
from .lyapunov import LyapunovEstimate, largest_lyapunov

# half-widths of the p range treated as linear, per forcing regime
DEFAULT_LINEAR_RANGE = {5.0: 0.01, 6.0: 0.02, 8.0: 0.03}


def default_linear_range(forcing):
    return DEFAULT_LINEAR_RANGE.get(float(forcing), 0.01)


@dataclass(frozen=True)
class LyapunovSettings:
    dt: float = 0.01
    spinup: float = 1e3
    window: float = 5e4
    renorm_every: int = 25
    seed: int = 0
    block_length: float = 1e3


@dataclass(frozen=True)
class PerturbationSpec:
    params: L96Params
    magnitudes: tuple = (-0.03, -0.02, -0.01, 0.0, 0.01, 0.02, 0.03)
    node_index: int = 0


def measure_perturbed_lyapunov(params: L96Params, p: float, node: int = 0,
                               settings: LyapunovSettings = LyapunovSettings()) -> LyapunovEstimate:
    """Largest Lyapunov exponent of the model with ``p`` added to node ``node``."""
    system = Lorenz96.with_node_forcing(params, p, node)
    return largest_lyapunov(system, dt=settings.dt, spinup=settings.spinup, window=settings.window,
                            renorm_every=settings.renorm_every, seed=settings.seed,
                            block_length=settings.block_length)


@dataclass
class SweepRow:
    p: float
    exponent: float
    stderr: float
    error: str | None = None

    @property
    def ok(self):
        return self.error is None


@dataclass
class SweepResult:
    rows: list
    unperturbed: float
    unperturbed_stderr: float
    predicted_slope: float | None = None
    node_index: int = 0

    def ok_rows(self):
        return [r for r in self.rows if r.ok]

    def failed_rows(self):
        return [r for r in self.rows if not r.ok]

    def arrays(self):
        rows = self.ok_rows()
        return (np.array([r.p for r in rows]), np.array([r.exponent for r in rows]),
                np.array([r.stderr for r in rows]))


def _sweep_task(args):
    params, p, node, settings = args
    try:
        est = measure_perturbed_lyapunov(params, p, node, settings)
        return SweepRow(p=p, exponent=est.exponent, stderr=est.stderr)
    except TrajectoryDivergence as exc:
        return SweepRow(p=p, exponent=math.nan, stderr=math.nan, error=f"diverged: {exc}")


def response_sweep(spec: PerturbationSpec, settings: LyapunovSettings = LyapunovSettings(),
                   workers: int = 1, predicted_slope=None) -> SweepResult:
    """Measure the exponent at every magnitude in ``spec``, all with the same seed.

    Rows come back sorted by ``p``.  A diverged run is kept as a row carrying
    the reason instead of a value.
    """
    mags = sorted(set(float(p) for p in spec.magnitudes))
    if 0.0 not in mags:
        mags_run = sorted(mags + [0.0])
    else:
        mags_run = mags
    tasks = [(spec.params, p, spec.node_index, settings) for p in mags_run]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_sweep_task, tasks))
    else:
        rows = [_sweep_task(t) for t in tasks]
    zero = next(r for r in rows if r.p == 0.0)
    rows = [r for r in rows if r.p in mags]
    return SweepResult(rows=rows, unperturbed=zero.exponent, unperturbed_stderr=zero.stderr,
                       predicted_slope=predicted_slope, node_index=spec.node_index)


@dataclass
class FitReport:
    slope: float
    slope_stderr: float
    intercept: float
    predicted_slope: float | None
    relative_error: float | None
    p: np.ndarray = field(repr=False)
    delta: np.ndarray = field(repr=False)
    residuals: np.ndarray = field(repr=False)
    max_abs_p: float = math.inf


def linear_fit_compare(sweep: SweepResult, predicted_slope=None, max_abs_p=None) -> FitReport:
    """Least-squares line through measured ``delta = lambda_p - lambda_0`` vs ``p``.

    Only rows with ``|p| <= max_abs_p`` enter the fit.  The intercept is
    fitted too, so noise in the unperturbed value does not bias the slope.
    ``relative_error`` is ``|slope - predicted| / |slope|``.
    """
    if predicted_slope is None:
        predicted_slope = sweep.predicted_slope
    p, lam, err = sweep.arrays()
    lim = math.inf if max_abs_p is None else max_abs_p
    sel = np.abs(p) <= lim + 1e-12
    p, lam, err = p[sel], lam[sel], err[sel]
    if len(np.unique(p)) < 2 or len(p) < 3:
        raise ValueError("need at least 3 rows with 2 distinct magnitudes for a linear fit")
    delta = lam - sweep.unperturbed
    X = np.column_stack([np.ones_like(p), p])
    coef, *_ = np.linalg.lstsq(X, delta, rcond=None)
    intercept, slope = coef
    pc = p - p.mean()
    ss = np.sum(pc ** 2)
    slope_se = math.sqrt(np.sum(pc ** 2 * np.nan_to_num(err) ** 2)) / ss
    rel = None
    if predicted_slope is not None and slope != 0:
        rel = abs(slope - predicted_slope) / abs(slope)
    return FitReport(slope=float(slope), slope_stderr=slope_se, intercept=float(intercept),
                     predicted_slope=predicted_slope, relative_error=rel, p=p, delta=delta,
                     residuals=delta - X @ coef, max_abs_p=lim)


def central_difference_slope(lam_plus, lam_minus, p):
    return (lam_plus - lam_minus) / (2.0 * p)


def quadratic_significance(sweep: SweepResult, max_abs_p=None):
    """Weighted fit ``lambda_p = a + b p + c p^2``; returns ``(c, stderr_c, |c| / stderr_c)``."""
    p, lam, err = sweep.arrays()
    if max_abs_p is not None:
        sel = np.abs(p) <= max_abs_p + 1e-12
        p, lam, err = p[sel], lam[sel], err[sel]
    if len(p) < 4:
        raise ValueError("need at least 4 rows for a quadratic fit with a residual check")
    X = np.column_stack([np.ones_like(p), p, p * p])
    wts = 1.0 / err ** 2
    XtW = X.T * wts
    cov = np.linalg.inv(XtW @ X)
    coef = cov @ (XtW @ lam)
    c, se = float(coef[2]), float(math.sqrt(cov[2, 2]))
    return c, se, abs(c) / se


# --- lag autocorrelation -----------------------------------------------------

def acf_from_series(series, max_lag):
    """Mean-removed, variance-normalized autocorrelation pooled over columns.

    ``series`` has shape (samples, channels); each channel's autocovariance
    is computed by FFT with zero padding, the covariances are averaged over
    channels and divided by the pooled lag-0 value.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim == 1:
        series = series[:, None]
    n = series.shape[0]
    if max_lag >= n:
        raise ValueError("max_lag must be shorter than the series")
    y = series - series.mean(axis=0)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(y, n=nfft, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=nfft, axis=0)[: max_lag + 1] / n
    pooled = acov.mean(axis=1)
    return pooled / pooled[0]


def autocorrelation(params: L96Params, lag_max: float, window: float, seed=0, h=0.25,
                    dt=0.01, spinup=1e3):
    """Node-pooled lag autocorrelation of the model on the ``h`` grid up to ``lag_max``."""
    if window < 10 * lag_max:
        raise ValueError(f"window {window} too short for lag_max {lag_max} (need >= 10x)")
    system = Lorenz96(params)
    sub = int(round(h / dt))
    x = system.flow(initial_state(params.n_vars, seed), dt, int(round(spinup / dt)))
    n = int(round(window / h))
    _, snaps = system.snapshots(x, dt, n, sub)
    n_lag = int(round(lag_max / h))
    return h * np.arange(n_lag + 1), acf_from_series(snaps, n_lag)


def decorrelation_time(lags, acf, level=0.2):
    """First lag after which ``|acf|`` stays below ``level``."""
    above = np.flatnonzero(np.abs(acf) >= level)
    if above.size == 0:
        return float(lags[0])
    last = above[-1]
    if last + 1 >= len(lags):
        return math.inf
    return float(lags[last + 1])
