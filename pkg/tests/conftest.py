import copy
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from duia.config import ExperimentConfig  # noqa: E402
from duia.data import GeneratorConfig, generate, temporal_split  # noqa: E402


def small_config(**sections):
    """A fast model config; ``sections`` overlay nested keys, e.g. ``duia={"uie": False}``."""
    base = {
        "model": {"embedding_dim": 8, "buckets": 500, "d": 8, "tower_hidden": [16],
                  "user_net": {"k1": 8, "branching": 2}, "item_net": {"k1": 8, "branching": 2},
                  "expert_sizes": [16, 8], "tower_sizes": [8]},
        "optim": {"epochs": 1, "batch_size": 64},
    }
    merged = copy.deepcopy(base)
    for key, value in sections.items():
        if isinstance(value, dict):
            merged.setdefault(key, {}).update(value)
        else:
            merged[key] = value
    return ExperimentConfig.from_dict(merged)


@pytest.fixture(scope="session")
def tiny():
    ds = generate(GeneratorConfig(n_users=120, n_items=80, high_active_mean_events=20.0), 0)
    train, test = temporal_split(ds.events, 0.8)
    return ds, train, test


# acceptance reporting: one line per criterion in the terminal summary

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    item.config._criteria[number] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, status, detail = results[number]
        line = f"criterion {number:>2} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
