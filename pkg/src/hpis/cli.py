"""Command-line entry point. Each subcommand is a thin adapter over one module call.

Exit codes: 0 success, 1 operational error, 2 usage error; ``scenario-run``
adds 3 (invariant violation) and 4 (handshake refusal).
"""

import difflib
import functools
import logging
import sys
from pathlib import Path

import click

from . import etl, pki, registry, scenario
from . import ontology as onto_mod
from .errors import HpisError
from .home import Home
from .transport import Endpoint, HttpNetwork


def _fail(message):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def operational(fn):
    """Map library errors to exit code 1 with a one-line message."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except HpisError as exc:
            _fail(f"{exc.code}: {exc}")
        except OSError as exc:
            _fail(str(exc))
    return wrapper


def _home(ctx):
    return Home(ctx.obj.get("home"))


def _ontology(path):
    return onto_mod.load_path(path) if path else onto_mod.seed()


def _split_address(value):
    """``id@host:port`` -> (id, host:port)."""
    if "@" not in value:
        raise click.BadParameter("expected ID@HOST:PORT")
    pid, addr = value.split("@", 1)
    return pid, addr


def _registry_client(home, as_id, registry_addr):
    reg_id, addr = _split_address(registry_addr)
    net = HttpNetwork([Endpoint(as_id, ""), Endpoint(reg_id, addr, False)])
    return registry.RegistryClient(net, home.identity(as_id), reg_id, home.trust())


@click.group()
@click.option("--home", envvar="HPIS_HOME", type=click.Path(file_okay=False),
              help="Key and store directory (default $HPIS_HOME or ~/.hpis).")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, home, verbose):
    """Secure drug-supply web services: PKI, registry, nodes, ETL and scenarios."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.ensure_object(dict)
    ctx.obj["home"] = home


# -- pki ------------------------------------------------------------------------

@main.command("ca-init")
@click.option("--name", required=True, help="Authority name.")
@click.option("--days", default=3650, show_default=True, type=click.IntRange(min=1))
@click.pass_context
@operational
def ca_init(ctx, name, days):
    """Create the certificate authority."""
    auth = _home(ctx).init_authority(name, days)
    click.echo(auth.root.to_xml().decode())


@main.command("cert-issue")
@click.option("--subject", required=True)
@click.option("--role", required=True, type=click.Choice(pki.ROLES))
@click.option("--days", default=365, show_default=True, type=click.IntRange(min=1))
@click.pass_context
@operational
def cert_issue(ctx, subject, role, days):
    """Issue a certificate and key for a participant; prints the serial."""
    ident = _home(ctx).issue(subject, role, days)
    click.echo(ident.cert.serial)


@main.command("cert-revoke")
@click.option("--serial", required=True, type=int)
@click.pass_context
@operational
def cert_revoke(ctx, serial):
    """Revoke a certificate by serial and republish the revocation list."""
    _home(ctx).revoke(serial)
    click.echo(f"revoked {serial}")


# -- registry ---------------------------------------------------------------------

@main.command("registry-serve")
@click.option("--id", "reg_id", default="registry", show_default=True)
@click.option("--listen", default="127.0.0.1:8100", show_default=True)
@click.option("--ontology", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
@operational
def registry_serve(ctx, reg_id, listen, ontology):
    """Serve the registry over HTTP until interrupted."""
    import uvicorn

    from .service import create_registry_app

    home = _home(ctx)
    reg = registry.Registry(home.registry_dir, _ontology(ontology), home.trust())
    service = registry.RegistryService(reg, home.identity(reg_id))
    host, port = listen.rsplit(":", 1)
    uvicorn.run(create_registry_app(service), host=host, port=int(port), log_level="warning")


@main.command("registry-publish")
@click.option("--as", "as_id", required=True, help="Publishing participant id.")
@click.option("--registry", "registry_addr", required=True, help="ID@HOST:PORT")
@click.argument("description", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
@operational
def registry_publish(ctx, as_id, registry_addr, description):
    """Publish a service description document; prints its key."""
    client = _registry_client(_home(ctx), as_id, registry_addr)
    click.echo(client.publish(Path(description).read_bytes()))


@main.command("registry-find")
@click.option("--as", "as_id", required=True)
@click.option("--registry", "registry_addr", required=True, help="ID@HOST:PORT")
@click.option("--concept", required=True)
@click.option("--subsumed", is_flag=True, help="Include services annotated with narrower concepts.")
@click.pass_context
@operational
def registry_find(ctx, as_id, registry_addr, concept, subsumed):
    """Print matching service keys, sorted ascending."""
    client = _registry_client(_home(ctx), as_id, registry_addr)
    for key in sorted(client.find(concept, subsumed)):
        click.echo(key)


# -- nodes ------------------------------------------------------------------------

@main.command("node-run")
@click.option("--scenario", "scenario_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--id", "pid", required=True)
@click.option("--listen", required=True, help="HOST:PORT")
@click.option("--registry", "registry_addr", required=True, help="ID@HOST:PORT")
@click.option("--peer", "peers", multiple=True, help="ID@HOST:PORT, repeatable.")
@click.pass_context
@operational
def node_run(ctx, scenario_path, pid, listen, registry_addr, peers):
    """Run one scenario participant as an HTTP node (publishes itself on start)."""
    import uvicorn

    from . import supply
    from .service import create_node_app
    from .service.app import NodeRuntime

    home = _home(ctx)
    sc = scenario.load_scenario(scenario_path)
    spec = next((p for p in sc.participants if p.id == pid), None)
    if spec is None:
        raise click.BadParameter(f"{pid} is not in the scenario", param_hint="--id")
    reg_id, reg_addr = _split_address(registry_addr)
    endpoints = [Endpoint(pid, listen, spec.compression), Endpoint(reg_id, reg_addr, False)]
    endpoints += [Endpoint(*_split_address(p)) for p in peers]
    net = HttpNetwork(endpoints)
    trust = home.trust()
    directory = {e.participant_id: home.identity_cert(e.participant_id) for e in endpoints
                 if e.participant_id != reg_id}
    ctx_ = supply.NodeContext(trust, directory, _ontology(sc.ontology_path or None))
    node = scenario.build_node(spec, home.identity(pid), ctx_, net)
    client = registry.RegistryClient(net, home.identity(pid), reg_id, trust)
    runtime = NodeRuntime(node, net, sc, client, listen)
    runtime.publish()
    host, port = listen.rsplit(":", 1)
    uvicorn.run(create_node_app(runtime), host=host, port=int(port), log_level="warning")


@main.command("scenario-run")
@click.argument("scenario_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, help="Override the scenario seed.")
@click.option("--out", type=click.Path(dir_okay=False), help="Write the report here.")
@click.option("--expect", type=click.Path(exists=True, dir_okay=False),
              help="Golden report; a byte mismatch exits 1.")
def scenario_run(scenario_path, seed, out, expect):
    """Run a scenario in deterministic stepped mode and print a summary."""
    try:
        report = scenario.run_scenario(scenario_path, seed=seed, out=out)
    except HpisError as exc:
        _fail(f"{exc.code}: {exc}")
    for k, v in report.stats.items():
        click.echo(f"{k}\t{v}")
    for v in report.violations:
        click.echo(f"violation\t{v}", err=True)
    if report.exit_code == scenario.EXIT_REFUSED:
        click.echo("handshake refused on at least one channel", err=True)
    if expect and Path(expect).read_bytes() != report.xml:
        _fail(f"report differs from {expect}")
    sys.exit(report.exit_code)


@main.command("scenario-fig1")
@click.option("--out", type=click.Path(dir_okay=False), help="Write here instead of stdout.")
@click.option("--prescriptions", default=1000, show_default=True, type=click.IntRange(min=0))
@click.option("--duplication", default=0.0, type=click.FloatRange(0, 1))
@click.option("--incompatible", is_flag=True, help="Give one hospital a policy its depot rejects.")
def scenario_fig1(out, prescriptions, duplication, incompatible):
    """Generate the baseline three-region scenario."""
    data = scenario.fig1_scenario(prescriptions, duplication=duplication,
                                  incompatible=incompatible)
    if out:
        Path(out).write_bytes(data)
    else:
        click.echo(data.decode(), nl=False)


# -- etl --------------------------------------------------------------------------

@main.command("etl-run")
@click.option("--source", "sources", multiple=True, required=True, nargs=2,
              type=click.Path(exists=True, dir_okay=False),
              help="MAPPING DATA pair, repeatable.")
@click.option("--rules", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--warehouse", required=True, type=click.Path(file_okay=False))
@click.option("--ontology", type=click.Path(exists=True, dir_okay=False))
@click.option("--canonical-dir", type=click.Path(file_okay=False),
              help="Keep the canonical prescription files here.")
@operational
def etl_run(sources, rules, warehouse, ontology, canonical_dir):
    """integrate, extract, transform and load; prints counts and quarantined rows."""
    descs = [etl.load_mapping(Path(m).read_bytes(), path=d) for m, d in sources]
    with etl.Warehouse(warehouse) as wh:
        rep = etl.run_pipeline(descs, _ontology(ontology), etl.load_rules(Path(rules).read_bytes()),
                               wh, canonical_dir)
    for k in ("rows", "facts", "duplicates", "inserted", "skipped"):
        click.echo(f"{k}\t{getattr(rep, k)}")
    click.echo(f"quarantined\t{len(rep.quarantine)}")
    for q in rep.quarantine:
        click.echo(f"quarantine\t{q.stage}\t{q.reason}\t{q.source_id}\t"
                   f"{q.raw.decode('utf-8', 'replace')}", err=True)


@main.command("warehouse-query")
@click.option("--warehouse", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--drug", required=True, help="Concept IRI (narrower concepts are included).")
@click.option("--region", help="Region id; omit for all regions.")
@click.option("--from", "period_from", required=True, help="YYYY-MM")
@click.option("--to", "period_to", required=True, help="YYYY-MM")
@click.option("--ontology", type=click.Path(exists=True, dir_okay=False))
@operational
def warehouse_query(warehouse, drug, region, period_from, period_to, ontology):
    """Print one consumption indicator as a single integer line."""
    with etl.Warehouse(warehouse) as wh:
        click.echo(etl.consumption_indicator(wh, _ontology(ontology), drug, region,
                                             period_from, period_to))


@main.command("report-diff")
@click.argument("a", type=click.Path(exists=True, dir_okay=False))
@click.argument("b", type=click.Path(exists=True, dir_okay=False))
def report_diff(a, b):
    """Compare two reports; exit 0 when byte-identical, else print a diff and exit 1."""
    da, db = Path(a).read_bytes(), Path(b).read_bytes()
    if da == db:
        click.echo("identical")
        return
    split = lambda d: d.decode("utf-8", "replace").replace("><", ">\n<").splitlines()  # noqa: E731
    for line in difflib.unified_diff(split(da), split(db), a, b, lineterm="", n=1):
        click.echo(line)
    sys.exit(1)


if __name__ == "__main__":
    main()
