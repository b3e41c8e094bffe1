import re

import pytest
from click.testing import CliRunner

from hpis import pki
from hpis.cli import main
from hpis.errors import HpisError
from hpis.home import Home
from tests.conftest import FIXTURES

ETL = FIXTURES / "etl"


@pytest.fixture
def run(tmp_path):
    runner = CliRunner()

    def invoke(*args):
        return runner.invoke(main, ["--home", str(tmp_path / "home"), *map(str, args)])
    return invoke


def test_pki_lifecycle(run, tmp_path):
    r = run("ca-init", "--name", "national-ca")
    assert r.exit_code == 0 and "national-ca" in r.output
    assert run("ca-init", "--name", "again").exit_code == 1
    r = run("cert-issue", "--subject", "depot-r1", "--role", "regional-depot")
    assert r.exit_code == 0
    serial = int(r.output.strip())
    home = Home(tmp_path / "home")
    ident = home.identity("depot-r1")
    assert ident.cert.serial == serial
    assert pki.verify(ident.cert, home.trust()) == pki.CertStatus.VALID
    assert run("cert-revoke", "--serial", serial).output.strip() == f"revoked {serial}"
    assert pki.verify(ident.cert, home.trust()) == pki.CertStatus.REVOKED


def test_operational_errors_exit_1(run):
    r = run("cert-issue", "--subject", "x", "--role", "supplier")
    assert r.exit_code == 1 and r.output.startswith("error:")


def test_usage_errors_exit_2(run):
    assert run("cert-issue", "--subject", "x").exit_code == 2
    assert run("cert-issue", "--subject", "x", "--role", "wizard").exit_code == 2
    assert run("no-such-command").exit_code == 2
    assert run("scenario-run", "/does/not/exist.xml").exit_code == 2


def test_scenario_fig1_matches_shipped_file(run, tmp_path):
    from hpis.scenario import shipped_path

    out = tmp_path / "fig1.xml"
    assert run("scenario-fig1", "--out", out).exit_code == 0
    assert out.read_bytes() == shipped_path("fig1-baseline.xml").read_bytes()


def test_scenario_run_exit_codes(run, tmp_path):
    ok, bad = tmp_path / "ok.xml", tmp_path / "bad.xml"
    run("scenario-fig1", "--prescriptions", 50, "--out", ok)
    run("scenario-fig1", "--prescriptions", 50, "--incompatible", "--out", bad)
    report = tmp_path / "r.xml"
    r = run("scenario-run", ok, "--out", report)
    assert r.exit_code == 0 and re.search(r"^injected\t\d+$", r.output, re.M)
    assert run("scenario-run", ok, "--seed", 5, "--expect", report).exit_code == 0
    r = run("scenario-run", bad)
    assert r.exit_code == 4 and "refused" in r.output
    assert run("scenario-run", bad, "--expect", report).exit_code == 1
    broken = tmp_path / "broken.xml"
    broken.write_bytes(b"<Scenario/>")
    r = run("scenario-run", broken)
    assert r.exit_code == 1 and "ScenarioInvalid" in r.output


def test_report_diff(run, tmp_path):
    a, b = tmp_path / "a.xml", tmp_path / "b.xml"
    a.write_bytes(b"<R><x>1</x></R>")
    b.write_bytes(b"<R><x>2</x></R>")
    r = run("report-diff", a, a)
    assert r.exit_code == 0 and r.output.strip() == "identical"
    r = run("report-diff", a, b)
    assert r.exit_code == 1 and "-<x>1</x>" in r.output and "+<x>2</x>" in r.output


def test_etl_run_and_query(run, tmp_path):
    wh = tmp_path / "wh"
    args = ["etl-run", "--source", ETL / "chu-rabat.mapping.xml", ETL / "chu-rabat.csv",
            "--source", ETL / "clinique-casa.mapping.xml", ETL / "clinique-casa.xml",
            "--rules", ETL / "rules.xml", "--warehouse", wh]
    r = run(*args)
    assert r.exit_code == 0
    counts = dict(line.split("\t")[:2] for line in r.output.splitlines()
                  if not line.startswith("quarantine\t"))
    assert counts["rows"] == "202" and counts["inserted"] == "153"
    assert counts["quarantined"] == "44"
    again = run(*args)
    assert "inserted\t0" in again.output
    q = run("warehouse-query", "--warehouse", wh, "--drug", "urn:hpis:concept:drug",
            "--from", "2024-01", "--to", "2024-12")
    assert q.exit_code == 0 and int(q.output) > 0
    per_region = sum(int(run("warehouse-query", "--warehouse", wh, "--drug",
                             "urn:hpis:concept:drug", "--region", reg, "--from", "2024-01",
                             "--to", "2024-12").output) for reg in ("R1", "R2", "R3"))
    assert per_region == int(q.output)
    bad = run("warehouse-query", "--warehouse", wh, "--drug", "urn:hpis:concept:drug",
              "--from", "2024-05", "--to", "2024-01")
    assert bad.exit_code == 1 and "BadPeriodRange" in bad.output


def test_home_rejects_path_like_ids(tmp_path):
    home = Home(tmp_path)
    home.init_authority("ca")
    with pytest.raises(HpisError):
        home.issue("../evil", "supplier")
