"""Run configuration, manifests and CSV output."""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import IntegratorConfig
from .response import ENDPOINT_MODES


class ConfigError(ValueError):
    """Invalid or incomplete run configuration; ``field`` names the offending key."""

    def __init__(self, field_name, message):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


PROFILES = {
    "paper": {"lyapunov.window": 1e6, "response.K": 4_000_000},
    "desk": {"lyapunov.window": 5e4, "response.K": 200_000},
}


@dataclass
class RunConfig:
    forcing: float
    n_vars: int = 20
    system: str = "lorenz96"
    alpha: float | None = None
    beta: float | None = None
    dt: float = 0.01
    spinup: float = 1e3
    calibration_window: float = 1e4
    h: float = 0.25
    M: int = 60
    K: int = 200_000
    endpoint: str = "printed"
    t0: float | None = None
    plateau_tol: float = 0.1
    lyapunov_window: float = 5e4
    renorm_every: int = 25
    block_length: float = 1e3
    node: int = 0
    magnitudes: tuple = (-0.03, -0.02, -0.01, 0.0, 0.01, 0.02, 0.03)
    linear_range: float | None = None
    predicted_slope: float | None = None
    lag_max: float = 15.0
    acf_window: float = 1e4
    seed: int = 0
    shards: int = 1
    out: str = "out"
    profile: str = "desk"

    def validate(self):
        """Check every derived constraint; raises :class:`ConfigError`."""
        if not (isinstance(self.forcing, (int, float)) and self.forcing > 0):
            raise ConfigError("regime.forcing", "must be a positive number")
        if self.n_vars < 4:
            raise ConfigError("regime.n_vars", "must be at least 4")
        if self.system not in ("lorenz96", "linear"):
            raise ConfigError("regime.system", "must be 'lorenz96' or 'linear'")
        if (self.alpha is None) != (self.beta is None):
            raise ConfigError("regime.beta" if self.beta is None else "regime.alpha",
                              "alpha and beta must be given together")
        if self.beta is not None and not self.beta > 0:
            raise ConfigError("regime.beta", "must be positive")
        if not self.dt > 0:
            raise ConfigError("integrator.dt", "must be positive")
        if self.spinup < 0:
            raise ConfigError("integrator.spinup", "must be non-negative")
        if not self.h > 0:
            raise ConfigError("response.h", "must be positive")
        try:
            IntegratorConfig.from_history_step(self.dt, self.h)
        except ValueError as exc:
            raise ConfigError("response.h", str(exc)) from None
        if self.M < 1:
            raise ConfigError("response.M", "must be at least 1")
        if self.K < 1:
            raise ConfigError("response.K", "must be at least 1")
        if self.endpoint not in ENDPOINT_MODES:
            raise ConfigError("response.endpoint", f"must be one of {ENDPOINT_MODES}")
        if self.t0 is not None:
            i = self.t0 / self.h
            if abs(i - round(i)) > 1e-9 or not 0 <= round(i) <= self.M:
                raise ConfigError("response.t0", f"{self.t0} is not a point of the grid h*[0..M]")
        if self.lyapunov_window <= 0:
            raise ConfigError("lyapunov.window", "must be positive")
        if self.renorm_every < 1:
            raise ConfigError("lyapunov.renorm_every", "must be a positive integer")
        if self.shards < 1:
            raise ConfigError("run.shards", "must be at least 1")
        if not 0 <= self.node < self.n_vars:
            raise ConfigError("sweep.node", "must index a model variable")
        if self.lag_max <= 0 or self.acf_window < 10 * self.lag_max:
            raise ConfigError("autocorr.window", "must be at least 10 x lag_max")
        return self

    def snapshot(self):
        d = asdict(self)
        d["magnitudes"] = list(self.magnitudes)
        return d


# (section, key) -> (attribute, parser)
_FIELDS = {
    ("regime", "forcing"): ("forcing", float),
    ("regime", "n_vars"): ("n_vars", int),
    ("regime", "system"): ("system", str),
    ("regime", "alpha"): ("alpha", float),
    ("regime", "beta"): ("beta", float),
    ("integrator", "dt"): ("dt", float),
    ("integrator", "spinup"): ("spinup", float),
    ("calibration", "window"): ("calibration_window", float),
    ("response", "h"): ("h", float),
    ("response", "m"): ("M", int),
    ("response", "k"): ("K", int),
    ("response", "endpoint"): ("endpoint", str),
    ("response", "t0"): ("t0", float),
    ("response", "plateau_tol"): ("plateau_tol", float),
    ("lyapunov", "window"): ("lyapunov_window", float),
    ("lyapunov", "renorm_every"): ("renorm_every", int),
    ("lyapunov", "block_length"): ("block_length", float),
    ("sweep", "node"): ("node", int),
    ("sweep", "magnitudes"): ("magnitudes", lambda s: tuple(float(v) for v in s.replace(",", " ").split())),
    ("sweep", "linear_range"): ("linear_range", float),
    ("sweep", "predicted_slope"): ("predicted_slope", float),
    ("autocorr", "lag_max"): ("lag_max", float),
    ("autocorr", "window"): ("acf_window", float),
    ("run", "seed"): ("seed", int),
    ("run", "shards"): ("shards", int),
    ("run", "out"): ("out", str),
}

_REQUIRED = [("regime", "forcing")]


def load_config(path=None, text=None, profile="desk", overrides=None) -> RunConfig:
    """Read an INI-style config; profile defaults < file values < ``overrides``."""
    cp = configparser.ConfigParser()
    if path is not None:
        with open(path) as fh:
            cp.read_file(fh)
    elif text is not None:
        cp.read_string(text)
    if profile not in PROFILES:
        raise ConfigError("profile", f"unknown profile {profile!r}")
    values = {"lyapunov_window": PROFILES[profile]["lyapunov.window"],
              "K": PROFILES[profile]["response.K"], "profile": profile}
    for sec, key in _REQUIRED:
        if not cp.has_option(sec, key):
            raise ConfigError(f"{sec}.{key}", "missing required field")
    for sec in cp.sections():
        for key, raw in cp.items(sec):
            if (sec, key) not in _FIELDS:
                raise ConfigError(f"{sec}.{key}", "unknown field")
            attr, parse = _FIELDS[(sec, key)]
            try:
                values[attr] = parse(raw)
            except ValueError:
                raise ConfigError(f"{sec}.{key}", f"cannot parse {raw!r}") from None
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values).validate()


# --- output ------------------------------------------------------------------

def fmt(x):
    """17 significant digits, the shortest form that round-trips a double."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan" if x is not None else ""
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def write_c1(path, grid, h):
    n = grid.dimension
    rows = ([m, m * h, *grid.c1[m]] for m in range(grid.M + 1))
    return write_csv(path, ["m", "tau"] + [f"c1_{i}" for i in range(n)], rows)


def write_c2(path, grid, h):
    n = grid.dimension
    mm, nn = grid.triangle()
    rows = ([m, k, m * h, k * h, *grid.c2[m, k]] for m, k in zip(mm, nn))
    return write_csv(path, ["m", "n", "tau", "s"] + [f"c2_{i}" for i in range(n)], rows)


def write_curve(path, curve):
    n = curve.r_vectors.shape[1]
    rows = ([t, rs, *rv] for t, rs, rv in zip(curve.times, curve.r_scalar, curve.r_vectors))
    return write_csv(path, ["t", "r_scalar"] + [f"r_{i}" for i in range(n)], rows)


def write_plot_data(path, times, values):
    """Two whitespace-separated columns, no header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for t, v in zip(times, values):
            fh.write(f"{fmt(t)} {fmt(v)}\n")
    return path


@dataclass
class RunManifest:
    command: str
    config: dict
    code_version: str = __version__
    calibration: dict | None = None
    wall_clock_seconds: float = 0.0
    shard_seeds: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def add_output(self, path):
        path = Path(path)
        self.outputs[path.name] = sha256(path)

    def write(self, out_dir):
        path = Path(out_dir) / f"manifest_{self.command}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")
