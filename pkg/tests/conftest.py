import random
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

from hpis import ontology, pki

FIXTURES = Path(__file__).parent / "fixtures"
NOW = datetime(2024, 3, 1, 12, 0, 0, tzinfo=timezone.utc)


class PkiWorld:
    """One authority with a handful of enrolled participants, all valid around NOW."""

    def __init__(self, seed=1):
        self.rng = random.Random(seed)
        self.now = NOW
        self.authority = pki.create_authority("test-ca", self.rng, NOW - timedelta(days=30))
        self.trust = self.authority.trust_store()
        self._ids = {}

    def identity(self, subject, role="regional-depot", not_before=None, not_after=None):
        key = (subject, role)
        if key not in self._ids or not_before or not_after:
            nb = not_before or NOW - timedelta(days=1)
            na = not_after or NOW + timedelta(days=365)
            self._ids[key] = pki.enroll(self.authority, subject, role, nb, na, self.rng)
        return self._ids[key]


@pytest.fixture
def world():
    return PkiWorld()


@pytest.fixture(scope="session")
def seed_ontology():
    return ontology.seed()


# One PASS/FAIL line per acceptance criterion, printed after the run.
_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _ACCEPTANCE[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{_ACCEPTANCE[name]}  {name}")
