import numpy as np
import pytest

from lyapresponse import L96Params, Lorenz96

# calibrated constants for the three regimes, used where a test needs a
# realistic rescaled system but not a fresh calibration run
REGIMES = {
    5.0: L96Params(5.0, alpha=1.81095, beta=0.41612),
    6.0: L96Params(6.0, alpha=2.01689, beta=0.35281),
    8.0: L96Params(8.0, alpha=2.34691, beta=0.27454),
}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def l96_8():
    return Lorenz96(REGIMES[8.0])


def attractor_states(system, n, seed=0, spacing=1.0, spinup=100.0, dt=0.01):
    """``n`` states along one trajectory, ``spacing`` time units apart."""
    from lyapresponse.dynamics import initial_state
    x = system.flow(initial_state(system.dimension, seed), dt, int(spinup / dt))
    out = []
    for _ in range(n):
        x = system.flow(x, dt, int(spacing / dt))
        out.append(x.copy())
    return np.array(out)


# --- acceptance reporting -------------------------------------------------------

ACCEPTANCE_LINES = []


def record(label, ok, detail):
    """Store and print one pass/fail line for the acceptance summary."""
    line = f"{label}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
