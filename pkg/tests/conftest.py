import re

import numpy as np
import pytest

from bdarts.engine import functional as F
from bdarts.engine.module import Conv2d, Linear, Module
from bdarts.search_space import AlphaTable, SearchCell

_CRITERIA = {}


class TinySupernet(Module):
    """Stem, one searched cell, GAP and a classifier: a few hundred weights.

    Exposes the same surface the search loop uses (``parameters``,
    ``arch_parameters``, ``classifier``, ``_alpha``).
    """

    def __init__(self, catalog=("dil_conv_3x3", "max_pool_3x3", "zero"), c=2, num_classes=2, seed=0):
        rng = np.random.default_rng(seed)
        self.stem = Conv2d(3, c, 3, padding=1, rng=rng)
        self.cell = SearchCell("deep", c, c, c, catalog, rng=rng)
        self.classifier = Linear(4 * c, num_classes, rng)
        self._alpha = AlphaTable(["normal"], catalog)
        self.assign_names()

    def arch_parameters(self):
        return self._alpha.tensors()

    def forward(self, x):
        s = self.stem(x)
        y = self.cell(s, s, self._alpha["normal"])
        return self.classifier(F.global_avg_pool(y))


@pytest.fixture
def tiny_net():
    return TinySupernet()


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if hasattr(report, "wasxfail"):
            outcome = "FAIL" if report.skipped else "PASS"  # a known shortfall still reads as red
        else:
            outcome = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        # several tests may share a criterion: any failure wins, then any pass
        rank = {"FAIL": 2, "PASS": 1, "SKIP": 0}
        if rank[outcome] >= rank[_CRITERIA.get(n, "SKIP")]:
            _CRITERIA[n] = outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {n:2d}: {_CRITERIA[n]}")
