from pathlib import Path

import numpy as np
import pytest

from rmcsi.scenario import Scenario

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def small_config(n_rows=4, n_cols=4, n_antennas=8, n_bs=1, gamma=0.9, **mobility):
    positions = [[-20.0, 10.0], [40.0, 40.0], [10.0, -20.0]][:n_bs]
    return {
        "seed": 3,
        "grid": {"n_rows": n_rows, "n_cols": n_cols, "resolution": 5.0},
        "mobility": {"length_scale": 2.2, **mobility},
        "channel": {"n_antennas": n_antennas, "gamma": gamma, "snr_db": 20},
        "scatterers": {"buildings": [[6.0, 6.0, 9.0, 14.0]], "n_scatterers": 12},
        "base_stations": [{"position": p} for p in positions],
    }


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scenario():
    return Scenario.from_config(small_config())


@pytest.fixture(scope="session")
def desk_config_path():
    return CONFIGS / "desk.yaml"


def random_psd(rng, n, rank=None, scale=1.0):
    rank = n if rank is None else rank
    X = rng.standard_normal((n, rank)) + 1j * rng.standard_normal((n, rank))
    return scale * X @ X.conj().T / rank


def random_unit_rows(rng, M, N):
    Z = rng.standard_normal((N, M)) + 1j * rng.standard_normal((N, M))
    Q, _ = np.linalg.qr(Z)
    return Q.conj().T


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
