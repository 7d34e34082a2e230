import json
import time
from dataclasses import dataclass

import pytest

from contactfunnel import cli
from contactfunnel.config import load_config, shipped_config_text
from contactfunnel.dynamics import PlantParams

# criterion number -> (passed, detail); filled by test_acceptance, printed at the end
CRITERIA = {}
CRITERION_NAMES = {
    1: "nominal plan",
    2: "funnel soundness",
    3: "linearized invariance identity",
    4: "shrink schedule certificate",
    5: "disturbance recovery",
    6: "open-loop vs closed-loop separation",
    7: "oracle suites",
    8: "trace reproduction",
    9: "determinism",
}


def record_criterion(number, passed, detail):
    CRITERIA.setdefault(number, []).append((bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERION_NAMES):
        parts = CRITERIA.get(k)
        if not parts:
            terminalreporter.write_line(f"criterion {k} ({CRITERION_NAMES[k]}): NOT RUN")
            continue
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {k} ({CRITERION_NAMES[k]}): {'PASS' if ok else 'FAIL'}  {detail}")


def write_config(directory, **sections):
    """Shipped config with artifact paths moved into ``directory`` and any
    section keys overridden."""
    doc = json.loads(shipped_config_text())
    doc["paths"] = {k: str(directory / f"{k}.{'csv' if k in ('trace', 'report') else 'json'}")
                    for k in ("trajectory", "pwa", "policy", "schedule", "trace", "report")}
    for name, values in sections.items():
        doc.setdefault(name, {}).update(values)
    path = directory / "config.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


@dataclass
class Pipeline:
    directory: object
    config_path: object
    cfg: object
    plan_seconds: float

    def artifacts(self):
        return cli.load_plan(self.cfg), cli.load_table(self.cfg), cli.load_policy(self.cfg)


def run_pipeline(directory):
    """plan, then funnel --verify (which also builds the PWA table)."""
    config_path = write_config(directory)
    t0 = time.perf_counter()
    code = cli.main(["--config", str(config_path), "plan"])
    plan_seconds = time.perf_counter() - t0
    assert code == 0, "plan stage failed"
    code = cli.main(["--config", str(config_path), "funnel", "--verify"])
    assert code == 0, "funnel stage failed"
    return Pipeline(directory, config_path, load_config(config_path), plan_seconds)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("pipeline"))


@pytest.fixture(scope="session")
def flip(pipeline):
    """(traj, table, policy, params) of the shipped flip task."""
    traj, table, policy = pipeline.artifacts()
    return traj, table, policy, pipeline.cfg.plant


@pytest.fixture
def params():
    return PlantParams()
