import re

import numpy as np
import pytest
import torch

from nestseg.model.config import toy_config
from nestseg.model.network import build_model
from nestseg.phantom import PhantomSpec, generate_phantom

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_phantom():
    return generate_phantom(PhantomSpec(shape=(40, 40, 40), num_regions=5, seed=3))


@pytest.fixture
def toy_model():
    return build_model(toy_config(), seed=0).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERION = re.compile(r"test_acceptance\.py::test_c(\d+)_")


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if not m or getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            n = int(m.group(1))
            status = "PASS" if outcome == "passed" else "FAIL"
            if rows.get(n, ("PASS",))[0] == "PASS":
                rows[n] = (status, rep.nodeid.split("::")[-1])
    if rows:
        terminalreporter.section("acceptance criteria")
        for n in sorted(rows):
            status, name = rows[n]
            terminalreporter.write_line(f"criterion {n:2d}: {status}  ({name})")
