import copy
import json

import pytest

from diffapprox.harness.config import default_config_path


def benchmark_dict(name="linear_benchmark", **overrides):
    data = json.loads(default_config_path(name).read_text())
    data.update(copy.deepcopy(overrides))
    return data


def small_dict(name="linear_benchmark", **overrides):
    """A desk-sized variant of a shipped benchmark for fast end-to-end runs."""
    data = benchmark_dict(name)
    data.update({
        "operator": {"domain_length": 3.141592653589793, "n_modes": 4},
        "epsilons": [0.1, 0.05, 0.025],
        "T": 0.2,
        "n_paths": 400,
        "chunk_size": 128,
        "sampler": {"n_paths": 16, "n_samples": 40, "thinning": 0.5, "dt": 0.01},
        "poisson": {"T_cut": 4.0, "n_time_nodes": 201, "n_paths": 1},
        "moment_scan": {"gammas": [0.25, 0.75], "epsilons": [0.1, 0.05], "n_paths": 200, "spread_threshold": 0.25},
        "poisson_check": {"y": [1.5, -1.2, 1.8, -1.1], "n_surrogate_points": 8},
    })
    data.update(copy.deepcopy(overrides))
    return data


@pytest.fixture
def write_config(tmp_path):
    def write(data, name="cfg.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return path

    return write


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
