from fractions import Fraction

import numpy as np
import pytest

from lyapresponse import (CorrelationGrid, L96Params, LinearSystem, Lorenz96, NoPlateau, ResponseAccumulator,
                          ResponseGridConfig, accumulate_correlations, accumulate_sample, finalize,
                          response_curve, select_response_time)
from lyapresponse.lyapunov import HistoryUnderflow, MapHistory
from lyapresponse.response import ResponseCurve, curve_from_grid, merge_grids, shard_seeds

from test_lorenz96 import dense_hessian, naive_jacobian

SMALL = L96Params(8.0, alpha=2.1, beta=0.3, n_vars=6)


# --- brute-force oracle ------------------------------------------------------------------

def oracle_sample(hist, k, M, params, endpoint="printed"):
    """Dense evaluation of one sample's c1[m] and c2[m, n] from the stored history.

    Uses the full second-derivative tensor, explicit matrix inverses and
    freshly multiplied products for every (m, n).
    """
    n = params.n_vars
    D2 = dense_hessian(n)
    T = {j: hist.map(j) for j in range(k - M, k + 1)}
    w = hist.direction(k)
    J = naive_jacobian(hist.state(k), params.alpha, params.beta)
    q = (np.eye(n) - np.outer(w, w)) @ (J + J.T) @ w

    def chain(hi, lo):
        # T_hi T_{hi-1} ... T_lo, identity when hi < lo
        P = np.eye(n)
        for j in range(hi, lo - 1, -1):
            P = P @ T[j]
        return P

    c1 = np.zeros((M + 1, n))
    c2 = np.zeros((M + 1, M + 1, n))
    for m in range(M + 1):
        B = chain(k - 1, k - m)
        c1[m] = np.einsum("a,abd,b,dc->c", w, D2, w, B)
        a = q @ B
        u = np.linalg.inv(B) @ w
        for nn in range(m, M + 1):
            P = chain(k - m, k - nn) if endpoint == "printed" else chain(k - m - 1, k - nn)
            c2[m, nn] = np.einsum("a,abd,b,dc->c", a, D2, u, P)
    return c1, c2


@pytest.mark.parametrize("endpoint", ["printed", "continuum"])
def test_single_sample_matches_dense_oracle(endpoint):
    M = 4
    system = Lorenz96(SMALL)
    acc = ResponseAccumulator(system, ResponseGridConfig(M=M, endpoint=endpoint), spinup=20, seed=1)
    for _ in range(3):
        before = acc.grid.copy()
        while not acc.step():
            pass
        hist = acc.history
        k = hist.newest
        c1, c2 = oracle_sample(hist, k, M, SMALL, endpoint)
        d1 = acc.grid.c1 - before.c1
        d2 = acc.grid.c2 - before.c2
        scale = max(1.0, np.abs(c2).max(), np.abs(c1).max())
        assert np.max(np.abs(d1 - c1)) <= 1e-12 * scale
        iu = np.triu_indices(M + 1)
        assert np.max(np.abs(d2[iu] - c2[iu])) <= 1e-12 * scale


def test_first_sample_waits_for_full_history():
    acc = ResponseAccumulator(Lorenz96(SMALL), ResponseGridConfig(M=4), spinup=5, seed=0)
    flags = [acc.step() for _ in range(7)]
    # the first sample is taken at history index k = M
    assert flags == [False] * 4 + [True] * 3
    assert acc.history.newest - 2 == 4
    assert acc.grid.count == 3


def test_direction_is_normalized_pushforward():
    acc = ResponseAccumulator(Lorenz96(SMALL), ResponseGridConfig(M=3), spinup=5, seed=0)
    acc.run(2)
    hist = acc.history
    k = hist.newest
    v = hist.map(k - 1) @ hist.direction(k - 1)
    assert np.allclose(hist.direction(k), v / np.linalg.norm(v), atol=1e-14)
    assert abs(np.linalg.norm(hist.direction(k)) - 1) < 1e-12


def test_zero_lag_c1_is_hessian_of_direction():
    system = Lorenz96(SMALL)
    acc = ResponseAccumulator(system, ResponseGridConfig(M=2), spinup=5, seed=2)
    acc.run(1)
    w = acc.history.direction(acc.history.newest)
    assert np.allclose(acc.grid.c1[0], system.hessian_contract(None, w, w), atol=1e-14)


def test_linear_system_grid_stays_zero():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((6, 6)) * 0.3
    acc = ResponseAccumulator(LinearSystem(A), ResponseGridConfig(M=6), spinup=2, seed=0)
    grid = acc.run(50)
    assert np.all(grid.c1 == 0) and np.all(grid.c2 == 0)
    assert np.all(curve_from_grid(grid, 0.25).r_vectors == 0)


def test_accumulate_sample_contracts():
    system = Lorenz96(SMALL)
    hist = MapHistory(3, 6)
    grid = CorrelationGrid(3, 6)
    hist.push(np.zeros(6), np.ones(6) / 6 ** 0.5, np.eye(6))
    with pytest.raises(HistoryUnderflow):
        accumulate_sample(grid, hist, system)
    with pytest.raises(ValueError):
        accumulate_sample(CorrelationGrid(2, 6), hist, system)
    with pytest.raises(ValueError):
        accumulate_sample(finalize(grid.merge(_one_sample_grid())), hist, system)


def _one_sample_grid(M=3):
    acc = ResponseAccumulator(Lorenz96(SMALL), ResponseGridConfig(M=M), spinup=5, seed=0)
    return acc.run(1)


# --- grids ------------------------------------------------------------------------------

def test_finalize_single_sample():
    g = _one_sample_grid()
    f = finalize(g)
    assert np.array_equal(f.c1, g.c1) and np.array_equal(f.c2, g.c2)
    assert f.averaged and not g.averaged


def test_finalize_empty_grid():
    with pytest.raises(ValueError):
        finalize(CorrelationGrid(3, 6))


def test_merge_equals_concatenated_stream():
    cfg = ResponseGridConfig(M=5)
    acc = ResponseAccumulator(Lorenz96(SMALL), cfg, spinup=5, seed=3)
    acc.run(4)
    g1 = acc.take_grid()
    g2 = acc.run(6)
    whole = ResponseAccumulator(Lorenz96(SMALL), cfg, spinup=5, seed=3).run(10)
    merged = g1 + g2
    assert merged.count == 10
    assert np.allclose(finalize(merged).c1, finalize(whole).c1, rtol=1e-12, atol=1e-14)
    assert np.allclose(finalize(merged).c2, finalize(whole).c2, rtol=1e-12, atol=1e-14)


def test_merge_rejects_mismatch():
    with pytest.raises(ValueError):
        CorrelationGrid(3, 6).merge(CorrelationGrid(4, 6))
    with pytest.raises(ValueError):
        CorrelationGrid(3, 6).merge(CorrelationGrid(3, 6, "continuum"))


def test_shards_are_deterministic_and_merge_in_order():
    system = Lorenz96(SMALL)
    cfg = ResponseGridConfig(M=4)
    g1, seeds = accumulate_correlations(system, cfg, 30, seed=7, shards=4, spinup=5, workers=1)
    g2, _ = accumulate_correlations(system, cfg, 30, seed=7, shards=4, spinup=5, workers=2)
    assert seeds == shard_seeds(7, 4)
    assert len(set(seeds)) == 4
    assert g1.count == 30
    assert np.array_equal(g1.c1, g2.c1) and np.array_equal(g1.c2, g2.c2)
    parts = [ResponseAccumulator(system, cfg, spinup=5, seed=s).run(n) for s, n in zip(seeds, [8, 8, 7, 7])]
    manual = merge_grids(parts)
    assert np.array_equal(manual.c1, g1.c1) and np.array_equal(manual.c2, g1.c2)


def test_endpoint_modes_share_c1():
    a = ResponseAccumulator(Lorenz96(SMALL), ResponseGridConfig(M=4), spinup=5, seed=0).run(3)
    b = ResponseAccumulator(Lorenz96(SMALL), ResponseGridConfig(M=4, endpoint="continuum"),
                            spinup=5, seed=0).run(3)
    assert np.array_equal(a.c1, b.c1)
    assert not np.allclose(a.c2, b.c2)


def test_stationarity_of_c1():
    # two disjoint windows of one trajectory; standard errors from batch means
    system = Lorenz96(L96Params(8.0, alpha=2.34691, beta=0.27454))
    acc = ResponseAccumulator(system, ResponseGridConfig(M=8), spinup=100, seed=4)
    windows = []
    for _ in range(2):
        batches = []
        for _ in range(20):
            acc.run(500)
            batches.append(finalize(acc.take_grid()).c1.mean(axis=1))
        batches = np.array(batches)
        windows.append((batches.mean(axis=0), batches.std(axis=0, ddof=1) / np.sqrt(len(batches))))
    (m1, s1), (m2, s2) = windows
    assert np.all(np.abs(m1 - m2) <= 3 * np.hypot(s1, s2))


@pytest.mark.parametrize("kwargs", [dict(h=0.0), dict(M=0), dict(K_target=0), dict(endpoint="both")])
def test_grid_config_validation(kwargs):
    with pytest.raises(ValueError):
        ResponseGridConfig(**kwargs)


# --- quadrature ----------------------------------------------------------------------------

def _trapezoid_fraction(vals, h):
    if len(vals) < 2:
        return Fraction(0)
    return h * (sum(vals) - (vals[0] + vals[-1]) / 2)


def test_quadrature_zero():
    r = response_curve(np.zeros((9, 3)), np.zeros((9, 9, 3)), 0.25)
    assert np.all(r.r_vectors == 0)


@pytest.mark.parametrize("M,h", [(4, 0.25), (60, 0.25), (7, 0.1)])
def test_quadrature_constant_c1(M, h):
    r = response_curve(np.ones((M + 1, 2)), np.zeros((M + 1, M + 1, 2)), h)
    assert np.allclose(r.r_vectors[:, 0], h * np.arange(M + 1), rtol=1e-14, atol=0)
    assert r.r_vectors[0, 0] == 0


@pytest.mark.parametrize("M,h", [(4, 0.25), (60, 0.25), (9, 0.3)])
def test_quadrature_constant_c2(M, h):
    c2 = np.ones((M + 1, M + 1, 2))
    r = response_curve(np.zeros((M + 1, 2)), c2, h)
    t = h * np.arange(M + 1)
    assert np.allclose(r.r_vectors[:, 1], t ** 2 / 2, rtol=1e-13, atol=0)


def test_quadrature_linear_c1():
    M, h = 12, 0.25
    t = h * np.arange(M + 1)
    r = response_curve(np.tile(t[:, None], (1, 2)), np.zeros((M + 1, M + 1, 2)), h)
    assert np.allclose(r.r_scalar, t ** 2 / 2, rtol=1e-14, atol=1e-15)


def test_quadrature_bilinear_c2_matches_exact_rational_sum():
    M = 8
    h = Fraction(1, 4)
    tau = [h * m for m in range(M + 1)]
    c2 = np.zeros((M + 1, M + 1, 1))
    for m in range(M + 1):
        for n in range(m, M + 1):
            c2[m, n, 0] = float(tau[m] * tau[n])
    r = response_curve(np.zeros((M + 1, 1)), c2, float(h)).r_scalar
    for i in range(M + 1):
        inner = [_trapezoid_fraction([tau[m] * tau[n] for n in range(m, i + 1)], h) for m in range(i + 1)]
        exact = _trapezoid_fraction(inner, h)
        assert r[i] == pytest.approx(float(exact), rel=1e-14, abs=1e-15)


def test_quadrature_ignores_lower_triangle():
    M = 5
    c2 = np.tril(np.full((M + 1, M + 1), 7.0), k=-1)[:, :, None]
    r = response_curve(np.zeros((M + 1, 1)), c2, 0.25)
    assert np.all(r.r_vectors == 0)


def test_quadrature_shape_mismatch():
    with pytest.raises(ValueError):
        response_curve(np.zeros((5, 2)), np.zeros((4, 4, 2)), 0.25)


# --- plateau selection ----------------------------------------------------------------------

def synthetic_curve():
    t = 0.25 * np.arange(61)
    r = np.where(t < 3, t / 3, 1.0 + 0.01 * np.sin(7 * t))
    late = t > 10
    r[late] = 1.0 + (t[late] - 10) ** 2 * np.cos(3 * t[late])
    return ResponseCurve(times=t, r_vectors=np.tile(r[:, None], (1, 4)))


def test_auto_plateau_on_synthetic_curve():
    sel = select_response_time(synthetic_curve())
    assert sel.method == "auto"
    assert abs(sel.t0 - 6.5) <= 0.5
    assert abs(sel.window[0] - 3) <= 0.5 and abs(sel.window[1] - 10) <= 0.5
    assert sel.value == pytest.approx(1.0, abs=0.011)


def test_ramp_has_no_plateau():
    t = 0.25 * np.arange(61)
    with pytest.raises(NoPlateau):
        select_response_time(ResponseCurve(times=t, r_vectors=t[:, None].copy()), plateau_tol=0.1)


def test_zero_curve_has_no_plateau():
    t = 0.25 * np.arange(61)
    with pytest.raises(NoPlateau):
        select_response_time(ResponseCurve(times=t, r_vectors=np.zeros((61, 3))))


def test_manual_time_on_grid():
    sel = select_response_time(synthetic_curve(), "manual", t0=6.75)
    assert sel.index == 27 and sel.t0 == 6.75
    with pytest.raises(ValueError):
        select_response_time(synthetic_curve(), "manual", t0=6.8)
    with pytest.raises(ValueError):
        select_response_time(synthetic_curve(), "manual", t0=15.25)
    with pytest.raises(ValueError):
        select_response_time(synthetic_curve(), "manual")


def test_curve_accessors():
    c = synthetic_curve()
    vec, scalar = c.at(3.0)
    assert scalar == pytest.approx(1.0 + 0.01 * np.sin(21.0))
    assert vec.shape == (4,)
    assert c.h == 0.25
