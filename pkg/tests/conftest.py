"""Shared fixtures: the fixed-seed benchmark sweep and acceptance reporting."""
import os
import shutil
import time
from pathlib import Path

import pytest
from hypothesis import settings

from vsprompt.harness import defaults, sweep_budgets
from vsprompt.harness.experiment import read_csv
from vsprompt.prompts import COMBINATIONS

settings.register_profile("repo", derandomize=True, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

BENCH_SEEDS = (0, 1, 2)
BENCH_ENV = "VSPROMPT_BENCH_DIR"

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): one numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.skipped:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        number, title = mark.args
        detail = dict(item.user_properties).get("detail", "")
        _criteria[number] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}" + (f"  [{detail}]" if detail else ""))


def bench_configs():
    """The frozen benchmark: every prompt combination plus FT-F at 10 and 30 samples,
    and a fraction sweep (10% and 100% of the pool) for A+P+C against FT-F."""
    base = defaults().replace("experiment", seeds=BENCH_SEEDS)
    main = base.replace("experiment", methods=("baseline",) + COMBINATIONS + ("FT-F",), budgets=("10", "30"))
    frac = base.replace("experiment", methods=("A+P+C", "FT-F"), budgets=("10%", "100%"))
    return main, frac


def _run(cfg, out: Path) -> list[dict]:
    results = out / "results.csv"
    if results.is_file():
        rows = read_csv(results)
        if rows and rows[0]["config_digest"] == cfg.digest():
            return rows
    return read_csv(sweep_budgets(cfg, out))


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    """Run (or reuse, via $VSPROMPT_BENCH_DIR) the benchmark sweeps once per session."""
    root = Path(os.environ[BENCH_ENV]) if os.environ.get(BENCH_ENV) else tmp_path_factory.mktemp("bench")
    main_cfg, frac_cfg = bench_configs()
    t0 = time.perf_counter()
    main = _run(main_cfg, root / "main")
    # the fraction sweep shares the pretrained checkpoints
    shutil.copytree(root / "main" / "checkpoints", root / "frac" / "checkpoints", dirs_exist_ok=True)
    frac = _run(frac_cfg, root / "frac")
    return {"root": root, "config": main_cfg, "main": main, "frac": frac,
            "timings": read_csv(root / "main" / "timings.csv"), "seconds": time.perf_counter() - t0}
