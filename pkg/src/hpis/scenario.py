"""Scenario files, the deterministic stepped harness, and run reports.

A scenario (``urn:hpis:scenario:1``) names the participants with their
policies, stocks and reorder levels, the network model, and a timeline of
dispensing and assessment events keyed by step number::

    <Scenario name="" seed="" start="2024-01-01T00:00:00Z" stepSeconds="86400" steps="60">
      <Network latencyMin="0" latencyMax="0" duplication="0" reorderWindow="1"/>
      <Policies><PolicyDef name="p"><Policy xmlns="urn:hpis:policy:1">...</Policy></PolicyDef></Policies>
      <Participants>
        <Registry id="registry"/>
        <Supplier id="supplier" policy="p"/>
        <National id="national" policy="p" supplier="supplier" window="1"/>
        <Depot id="depot-r1" region="R1" national="national" policy="p">
          <Stock drug="IRI" qty="150"/><Reorder drug="IRI" s="60" S="200"/>
        </Depot>
        <Hospital id="" region="R1" depot="depot-r1" policy="p" source="csv|xml">...</Hospital>
      </Participants>
      <Timeline>
        <Dispense step="0" hospital="" term="" qty="" patient=""/>
        <Assess step="59" from="2024-01" to="2024-02"><Procure drug="IRI" qty="90"/></Assess>
      </Timeline>
    </Scenario>

Every step: dispensing events, pharmacy rupture checks, message delivery until
quiet, national window close, assessments, then a ledger snapshot and the
conservation check. Reports (``urn:hpis:report:1``) leave out everything that
depends on random bytes (message ids, keys, ciphertext sizes), so a noiseless
run gives the same bytes for any seed.
"""

import hashlib
import logging
import random
import tempfile
from dataclasses import dataclass, field, replace
from datetime import timedelta
from pathlib import Path

from . import etl, pki, registry, secpolicy, supply
from . import ontology as onto_mod
from . import xmlcanon as xc
from .errors import HpisError, MalformedXml, ScenarioInvalid
from .timeutil import format_instant, parse_instant
from .transport import FLAG_COMPRESSED, Endpoint, NetworkConfig, SimNetwork

log = logging.getLogger(__name__)

NS = "urn:hpis:scenario:1"
RNS = "urn:hpis:report:1"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_INVARIANT = 3
EXIT_REFUSED = 4

ROLE_OF = {"Registry": "registry", "Supplier": "supplier", "National": "national-supply",
           "Depot": "regional-depot", "Hospital": "hospital-pharmacy"}

C = onto_mod.CONCEPT_PREFIX
SERVICE_CONCEPT = {
    "hospital-pharmacy": C + "prescription-integration-service",
    "regional-depot": C + "regional-drug-order-service",
    "national-supply": C + "national-drug-order-service",
    "supplier": C + "drug-supply-service",
}
# What a client searches for when locating a peer; superclass queries exercise subsumption.
DISCOVERY_CONCEPT = {
    "hospital-pharmacy": C + "prescription-integration-service",
    "regional-depot": C + "drug-order-service",
    "national-supply": C + "drug-order-service",
    "supplier": C + "service",
}
SERVICE_ACTIONS = {
    "hospital-pharmacy": (supply.ACTION_INTEGRATE, supply.ACTION_SHIP),
    "regional-depot": (supply.ACTION_SUBMIT, supply.ACTION_SHIP),
    "national-supply": (supply.ACTION_SUBMIT, supply.ACTION_SHIP),
    "supplier": (supply.ACTION_SUBMIT,),
}


@dataclass
class ParticipantSpec:
    id: str
    role: str
    policy: str = ""
    region: str = ""
    depot: str = ""
    national: str = ""
    supplier: str = ""
    window: int = 1
    source: str = "csv"
    compression: bool = True
    stock: dict = field(default_factory=dict)
    reorder: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Dispense:
    step: int
    hospital: str
    term: str
    qty: int
    patient: str


@dataclass(frozen=True)
class Assess:
    step: int
    period_from: str
    period_to: str
    procured: tuple     # ((drug, qty), ...)


@dataclass
class Scenario:
    name: str
    seed: int
    start: object
    step_seconds: int
    steps: int
    network: NetworkConfig
    policies: dict
    participants: list
    events: list
    ontology_path: str = ""

    def by_role(self, role):
        return [p for p in self.participants if p.role == role]

    def participant(self, pid):
        return next(p for p in self.participants if p.id == pid)


def _int(el, name, default=None):
    raw = el.get(name)
    if raw is None:
        if default is None:
            raise ScenarioInvalid(f"{xc.split_tag(el.tag)[1]} needs {name}")
        return default
    try:
        return int(raw)
    except ValueError:
        raise ScenarioInvalid(f"{name}={raw!r} is not an integer") from None


def _levels(el):
    stock, reorder = {}, {}
    for c in xc.children(el):
        local = xc.split_tag(c.tag)[1]
        if local == "Stock":
            stock[c.get("drug", "")] = _int(c, "qty")
        elif local == "Reorder":
            reorder[c.get("drug", "")] = (_int(c, "s"), _int(c, "S"))
        else:
            raise ScenarioInvalid(f"unexpected {local}")
    return stock, reorder


def parse_scenario(data, base_dir=None):
    try:
        root = xc.parse_xml(data)
    except MalformedXml as exc:
        raise ScenarioInvalid(f"not XML: {exc}") from None
    if root.tag != xc.qn(NS, "Scenario"):
        raise ScenarioInvalid(f"root must be Scenario in {NS}")
    try:
        start = parse_instant(root.get("start", ""))
    except (HpisError, ValueError):
        raise ScenarioInvalid(f"bad start instant {root.get('start')!r}") from None
    sc = Scenario(name=root.get("name", ""), seed=_int(root, "seed", 0), start=start,
                  step_seconds=_int(root, "stepSeconds", 86400), steps=_int(root, "steps"),
                  network=NetworkConfig(), policies={}, participants=[], events=[])
    for section in xc.children(root):
        local = xc.split_tag(section.tag)[1]
        if local == "Network":
            try:
                sc.network = NetworkConfig(
                    latency_ms=(_int(section, "latencyMin", 0), _int(section, "latencyMax", 0)),
                    duplication=float(section.get("duplication", "0")),
                    reorder_window=_int(section, "reorderWindow", 1),
                    timeout_ms=_int(section, "timeoutMs", 30000),
                    compression_level=_int(section, "compressionLevel", 6))
            except ValueError as exc:
                raise ScenarioInvalid(f"network: {exc}") from None
        elif local == "Ontology":
            path = section.get("path", "")
            sc.ontology_path = str(Path(base_dir) / path) if base_dir and path else path
        elif local == "Policies":
            for d in xc.children(section):
                kids = xc.children(d)
                if len(kids) != 1:
                    raise ScenarioInvalid("PolicyDef holds exactly one Policy")
                try:
                    sc.policies[d.get("name", "")] = secpolicy.parse_policy(kids[0])
                except HpisError as exc:
                    raise ScenarioInvalid(f"policy {d.get('name')}: {exc.code} {exc}") from None
        elif local == "Participants":
            for p in xc.children(section):
                kind = xc.split_tag(p.tag)[1]
                if kind not in ROLE_OF:
                    raise ScenarioInvalid(f"unknown participant kind {kind}")
                stock, reorder = _levels(p)
                sc.participants.append(ParticipantSpec(
                    id=p.get("id", ""), role=ROLE_OF[kind], policy=p.get("policy", ""),
                    region=p.get("region", ""), depot=p.get("depot", ""),
                    national=p.get("national", ""), supplier=p.get("supplier", ""),
                    window=_int(p, "window", 1), source=p.get("source", "csv"),
                    compression=p.get("compression", "true") == "true",
                    stock=stock, reorder=reorder))
        elif local == "Timeline":
            for ev in xc.children(section):
                kind = xc.split_tag(ev.tag)[1]
                if kind == "Dispense":
                    sc.events.append(Dispense(_int(ev, "step"), ev.get("hospital", ""),
                                              ev.get("term", ""), _int(ev, "qty"),
                                              ev.get("patient", "")))
                elif kind == "Assess":
                    procured = tuple((c.get("drug", ""), _int(c, "qty"))
                                     for c in xc.children(ev))
                    sc.events.append(Assess(_int(ev, "step"), ev.get("from", ""),
                                            ev.get("to", ""), procured))
                else:
                    raise ScenarioInvalid(f"unknown event {kind}")
        else:
            raise ScenarioInvalid(f"unexpected section {local}")
    validate(sc)
    return sc


def load_scenario(path):
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise ScenarioInvalid(str(exc)) from None
    return parse_scenario(data, p.parent)


def validate(sc):
    ids = [p.id for p in sc.participants]
    if len(set(ids)) != len(ids) or not all(ids):
        raise ScenarioInvalid("participant ids must be unique and non-empty")
    known = {p.id: p for p in sc.participants}
    if len(sc.by_role("registry")) != 1:
        raise ScenarioInvalid("exactly one Registry is required")
    if len(sc.by_role("national-supply")) != 1 or len(sc.by_role("supplier")) != 1:
        raise ScenarioInvalid("exactly one National and one Supplier are required")
    if sc.steps <= 0 or sc.step_seconds <= 0:
        raise ScenarioInvalid("steps and stepSeconds must be positive")

    def ref(p, attr, role):
        target = known.get(getattr(p, attr))
        if target is None or target.role != role:
            raise ScenarioInvalid(f"{p.id}: {attr}={getattr(p, attr)!r} is not a declared {role}")

    for p in sc.participants:
        if p.role != "registry" and p.policy not in sc.policies:
            raise ScenarioInvalid(f"{p.id}: undeclared policy {p.policy!r}")
        if p.role == "hospital-pharmacy":
            ref(p, "depot", "regional-depot")
            if p.source not in etl.FORMATS:
                raise ScenarioInvalid(f"{p.id}: unknown source format {p.source}")
        if p.role == "regional-depot":
            ref(p, "national", "national-supply")
        if p.role == "national-supply":
            ref(p, "supplier", "supplier")
            if p.window < 1:
                raise ScenarioInvalid("aggregation window must be >= 1")
        if p.role in ("hospital-pharmacy", "regional-depot") and not p.region:
            raise ScenarioInvalid(f"{p.id}: region required")
        for drug, (s, big_s) in p.reorder.items():
            if not 0 <= s < big_s:
                raise ScenarioInvalid(f"{p.id}: reorder levels for {drug} need 0 <= s < S")
        if any(q < 0 for q in p.stock.values()):
            raise ScenarioInvalid(f"{p.id}: negative initial stock")
    last = -1
    for ev in sc.events:
        if ev.step < last:
            raise ScenarioInvalid("timeline steps must be non-decreasing")
        if not 0 <= ev.step < sc.steps:
            raise ScenarioInvalid(f"event at step {ev.step} outside 0..{sc.steps - 1}")
        last = ev.step
        if isinstance(ev, Dispense):
            if known.get(ev.hospital) is None or known[ev.hospital].role != "hospital-pharmacy":
                raise ScenarioInvalid(f"dispense at undeclared hospital {ev.hospital!r}")
            if ev.qty <= 0:
                raise ScenarioInvalid("dispense quantity must be positive")


# -- wiring shared by the harness and real mode ---------------------------------

def _drug(ontology, term):
    try:
        return ontology.normalize_term(term)
    except HpisError as exc:
        raise ScenarioInvalid(f"drug {term!r}: {exc.code}") from None


def build_node(spec, identity, ctx, network, rng=None):
    kw = dict(network=network, rng=rng,
              initial={_drug(ctx.ontology, d): q for d, q in spec.stock.items()},
              reorder=supply.ReorderPolicy({_drug(ctx.ontology, d): lv
                                            for d, lv in spec.reorder.items()}))
    if spec.role == "hospital-pharmacy":
        return supply.PharmacyNode(identity, ctx, spec.depot, spec.region, spec.source, **kw)
    if spec.role == "regional-depot":
        return supply.DepotNode(identity, ctx, spec.national, spec.region, **kw)
    if spec.role == "national-supply":
        return supply.NationalNode(identity, ctx, spec.supplier, spec.window, **kw)
    if spec.role == "supplier":
        return supply.SupplierNode(identity, ctx, **kw)
    raise ScenarioInvalid(f"{spec.id}: role {spec.role} runs no supply node")


def channels(sc):
    """Every (a, b) pair that exchanges supply messages, sorted."""
    out = set()
    national = sc.by_role("national-supply")[0]
    for h in sc.by_role("hospital-pharmacy"):
        out.add((h.id, h.depot))
        out.add((national.id, h.id))
    for d in sc.by_role("regional-depot"):
        out.add((d.id, d.national))
    out.add((national.id, national.supplier))
    return sorted(out)


def service_description(sc, pid, endpoint):
    p = sc.participant(pid)
    return registry.build_description(
        f"svc:{p.id}", f"{p.role} service of {p.id}", p.id, endpoint,
        SERVICE_ACTIONS[p.role], {SERVICE_CONCEPT[p.role]}, sc.policies[p.policy])


def channel_plan(sc, client, me, peer):
    """Discover ``peer`` through the registry and intersect policies: (plan or None, reason)."""
    spec = sc.participant(peer)
    key = f"svc:{peer}"
    if key not in client.find(DISCOVERY_CONCEPT[spec.role], include_subsumed=True):
        return None, f"{peer} not found in registry"
    own = secpolicy.normalize(sc.policies[sc.participant(me).policy])
    plan, common = secpolicy.negotiate(own, client.resolve_policy(key))
    if plan is None:
        return None, "empty intersection" if not common else "no usable alternative"
    return plan, ""


# -- harness ------------------------------------------------------------------

@dataclass
class Handshake:
    a: str
    b: str
    plan: object        # ProtectionPlan or None
    reason: str = ""


@dataclass
class Report:
    xml: bytes
    exit_code: int
    violations: list
    refusals: list
    stats: dict

    @property
    def ok(self):
        return self.exit_code == EXIT_OK


class Harness:
    """Boots PKI, registry and nodes for a scenario and drives it step by step."""

    def __init__(self, sc, seed=None, workdir=None):
        self.sc = sc
        self.seed = sc.seed if seed is None else seed
        self.rng = random.Random(self.seed)
        self.now = sc.start
        self.violations = []
        self.handshakes = []
        self.snapshots = []
        self.assessments = []
        self.duplicate_deliveries = 0
        self._tmp = None
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="hpis-run-")
            workdir = self._tmp.name
        self.workdir = Path(workdir)
        self.ontology = onto_mod.load_path(sc.ontology_path) if sc.ontology_path \
            else onto_mod.seed()
        self.network = SimNetwork(replace(sc.network, seed=self.seed))
        self.network.on_duplicate_response = self._duplicate_response
        self._boot()

    def close(self):
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None

    def clock(self):
        return self.now

    # -- boot ---------------------------------------------------------------

    def _boot(self):
        sc = self.sc
        horizon = timedelta(seconds=sc.step_seconds * sc.steps) + timedelta(days=365)
        issued_at = sc.start - timedelta(days=1)
        self.authority = pki.create_authority("hpis-national-ca", self.rng, issued_at,
                                              lifetime=horizon + timedelta(days=1))
        self.identities = {p.id: pki.enroll(self.authority, p.id, p.role, issued_at,
                                            sc.start + horizon, self.rng)
                           for p in sc.participants}
        self.trust = self.authority.trust_store()
        directory = {pid: ident.cert for pid, ident in self.identities.items()}
        self.ctx = supply.NodeContext(self.trust, directory, self.ontology, self.clock, [])

        reg_spec = sc.by_role("registry")[0]
        self.registry_id = reg_spec.id
        self.registry = registry.Registry(self.workdir / "registry", self.ontology, self.trust)
        service = registry.RegistryService(self.registry, self.identities[reg_spec.id],
                                           self.clock, self.rng)
        self.network.register(Endpoint(reg_spec.id, reg_spec.id, False), service.handle)

        self.nodes = {}
        for p in sorted(sc.participants, key=lambda p: p.id):
            if p.role == "registry":
                continue
            node = build_node(p, self.identities[p.id], self.ctx, self.network,
                              random.Random(self.rng.getrandbits(64)))
            self.nodes[p.id] = node
            self.network.register(Endpoint(p.id, p.id, p.compression), self._handler(node))
        self.initial_total = sum(n.ledger.total_on_hand() for n in self.nodes.values())
        self.rules = etl.Rules({p.id: p.region for p in sc.by_role("hospital-pharmacy")},
                               version=sc.name)

    def _drug(self, term):
        return _drug(self.ontology, term)

    def _handler(self, node):
        def handle(payload):
            before = node.state_digest()
            response = node.handle(payload)
            if node.last_was_replay:
                self.duplicate_deliveries += 1
                if node.state_digest() != before:
                    self.violations.append(f"step {self.step}: redelivery changed {node.id}")
            return response
        return handle

    def _duplicate_response(self, src, dst, response):
        node = self.nodes.get(src)
        if node is None or dst == self.registry_id:
            return
        before = node.state_digest()
        node.on_response(response)
        if node.state_digest() != before:
            self.violations.append(f"step {self.step}: duplicate response changed {src}")

    def _deliver(self):
        self.network.dispatch(lambda pending, resp: self.nodes[pending.src].on_response(resp))

    # -- handshake ----------------------------------------------------------

    def channels(self):
        return channels(self.sc)

    def _client(self, pid):
        return registry.RegistryClient(self.network, self.identities[pid], self.registry_id,
                                       self.trust, self.clock, self.rng)

    def publish_all(self):
        for p in sorted(self.sc.participants, key=lambda p: p.id):
            if p.role != "registry":
                self._client(p.id).publish(service_description(self.sc, p.id, p.id))

    def handshake(self):
        self.publish_all()
        for a, b in self.channels():
            plan_ab, why_ab = channel_plan(self.sc, self._client(a), a, b)
            plan_ba, why_ba = channel_plan(self.sc, self._client(b), b, a)
            if plan_ab != plan_ba:
                self.violations.append(f"asymmetric plans on {a}<->{b}")
                plan_ab = None
            reason = why_ab or why_ba
            self.handshakes.append(Handshake(a, b, plan_ab, reason))
            self.nodes[a].set_plan(b, plan_ab)
            self.nodes[b].set_plan(a, plan_ab)
            if plan_ab is None:
                log.warning("handshake refused %s <-> %s: %s", a, b, reason)

    # -- timeline -----------------------------------------------------------

    step = -1

    def run(self):
        self.handshake()
        events = list(self.sc.events)
        i = 0
        hospitals = [p.id for p in self.sc.by_role("hospital-pharmacy")]
        national = self.nodes[self.sc.by_role("national-supply")[0].id]
        for step in range(self.sc.steps):
            self.step = step
            self.now = self.sc.start + timedelta(seconds=self.sc.step_seconds * step)
            assessments = []
            while i < len(events) and events[i].step == step:
                ev = events[i]
                i += 1
                if isinstance(ev, Dispense):
                    self.nodes[ev.hospital].dispense(ev.term, ev.qty, ev.patient,
                                                     self.now.strftime("%Y-%m-%d"))
                else:
                    assessments.append(ev)
            for h in sorted(hospitals):
                self.nodes[h].pharmacy_step(self.now)
            self._deliver()
            if (step + 1) % national.window == 0:
                national.close_window()
                self._deliver()
            for ev in assessments:
                self._assess(national, hospitals, ev)
            self._snapshot(step)
        self._check_transport()
        for node in self.nodes.values():
            self.violations.extend(f"{node.id}: {v}" for v in node.violations)
        return self.report()

    def _assess(self, national, hospitals, ev):
        national.request_prescriptions(hospitals)
        self._deliver()
        regions = sorted({p.region for p in self.sc.by_role("regional-depot")})
        depots = {p.region: p.id for p in self.sc.by_role("regional-depot")}
        procured = {self._drug(d): q for d, q in ev.procured}
        drugs = sorted(procured)
        with etl.Warehouse(self.workdir / "warehouse") as wh:
            table, plan, quarantine = national.assess(self.rules, wh, drugs, regions,
                                                      ev.period_from, ev.period_to,
                                                      procured, depots)
        self.assessments.append((ev, table, plan, len(quarantine)))
        self._deliver()

    def totals(self):
        on_hand = sum(n.ledger.total_on_hand() for n in self.nodes.values())
        in_transit = sum(n.ledger.total_in_transit() for n in self.nodes.values())
        consumed = sum(sum(n.consumed.values()) for n in self.nodes.values()
                       if isinstance(n, supply.PharmacyNode))
        injected = sum(n.injected for n in self.nodes.values()
                       if isinstance(n, supply.SupplierNode))
        return on_hand, in_transit, consumed, injected

    def _snapshot(self, step):
        on_hand, in_transit, consumed, injected = self.totals()
        lhs, rhs = on_hand + in_transit + consumed, injected + self.initial_total
        if lhs != rhs:
            self.violations.append(f"step {step}: conservation {lhs} != {rhs}")
        for node in self.nodes.values():
            if any(q < 0 for q in node.ledger.on_hand.values()):
                self.violations.append(f"step {step}: negative stock at {node.id}")
        stock = {pid: dict(sorted((d, q) for d, q in n.ledger.on_hand.items()))
                 for pid, n in sorted(self.nodes.items())}
        transit = {pid: n.ledger.total_in_transit() for pid, n in sorted(self.nodes.items())}
        self.snapshots.append((step, self.now, stock, transit, lhs, rhs))

    def _check_transport(self):
        """Compression must be symmetric and used wherever a plan negotiated it."""
        plans = {}
        for hs in self.handshakes:
            if hs.plan is not None:
                plans[(hs.a, hs.b)] = plans[(hs.b, hs.a)] = hs.plan
        for ex in self.network.trace:
            req = bool(ex.request_flags & FLAG_COMPRESSED)
            if req != bool(ex.response_flags & FLAG_COMPRESSED):
                self.violations.append(f"exchange {ex.seq}: compression not mirrored")
            plan = plans.get((ex.src, ex.dst))
            if plan is not None and plan.compression:
                both = self.network.endpoint(ex.src).compression and \
                    self.network.endpoint(ex.dst).compression
                if both and not req:
                    self.violations.append(f"exchange {ex.seq}: negotiated compression unused")

    # -- report -------------------------------------------------------------

    def report(self):
        sc = self.sc
        root = xc.element(RNS, "Report", scenario=sc.name, steps=sc.steps)
        hs_el = xc.sub(root, RNS, "Handshakes")
        for hs in self.handshakes:
            attrs = {"a": hs.a, "b": hs.b,
                     "status": "agreed" if hs.plan is not None else "refused"}
            if hs.plan is not None:
                attrs["plan"] = hs.plan.describe()
            else:
                attrs["reason"] = hs.reason
            xc.sub(hs_el, RNS, "Channel", **attrs)

        steps_el = xc.sub(root, RNS, "Steps")
        digest = hashlib.sha256()
        for step, at, stock, transit, lhs, rhs in self.snapshots:
            st = xc.sub(steps_el, RNS, "Step", n=step, at=format_instant(at))
            for pid in stock:
                nd = xc.sub(st, RNS, "Node", id=pid, inTransit=transit[pid])
                for drug, q in stock[pid].items():
                    xc.sub(nd, RNS, "Stock", drug=drug, qty=q)
            xc.sub(st, RNS, "Conservation", lhs=lhs, rhs=rhs, ok=str(lhs == rhs).lower())
            digest.update(f"{step}:{lhs}:{rhs}\n".encode())

        orders_el = xc.sub(root, RNS, "Orders")
        for at, oid, frm, to in self.ctx.events:
            xc.sub(orders_el, RNS, "Transition", at=format_instant(at), order=oid,
                   **{"from": frm}, to=to)

        for ev, table, plan, quarantined in self.assessments:
            a_el = xc.sub(root, RNS, "Assessment", step=ev.step, periodFrom=ev.period_from,
                          periodTo=ev.period_to, quarantined=quarantined)
            ind = xc.sub(a_el, RNS, "Indicators")
            for (region, drug), q in sorted(table.items()):
                xc.sub(ind, RNS, "Cell", region=region, drug=drug, qty=q)
            alloc = xc.sub(a_el, RNS, "Allocation")
            for (region, drug), q in sorted(plan.items()):
                xc.sub(alloc, RNS, "Cell", region=region, drug=drug, qty=q)

        on_hand, in_transit, consumed, injected = self.totals()
        unserved = sum(sum(n.unserved.values()) for n in self.nodes.values()
                       if isinstance(n, supply.PharmacyNode))
        faults = sorted(f"{n.id}<-{peer}:{code}" for n in self.nodes.values()
                        for peer, code in n.faults)
        refusals = sorted(f"{n.id}->{peer}:{what}" for n in self.nodes.values()
                          for peer, what in n.refusals)
        stats = {"initial": self.initial_total, "injected": injected, "consumed": consumed,
                 "unserved": unserved, "onHand": on_hand, "inTransit": in_transit,
                 "exchanges": len(self.network.trace),
                 "compressedExchanges": sum(1 for e in self.network.trace
                                            if e.request_flags & FLAG_COMPRESSED),
                 "faults": len(faults), "refusals": len(refusals),
                 "orders": sum(len(n.orders) for n in self.nodes.values())}
        xc.sub(root, RNS, "Summary", **stats)
        for f in faults:
            xc.sub(root, RNS, "Fault", f)
        for r in refusals:
            xc.sub(root, RNS, "Refusal", r)
        for v in self.violations:
            xc.sub(root, RNS, "Violation", v)
        xc.sub(root, RNS, "ConservationChecksum", digest.hexdigest())

        if self.violations:
            code = EXIT_INVARIANT
        elif any(hs.plan is None for hs in self.handshakes):
            code = EXIT_REFUSED
        else:
            code = EXIT_OK
        stats["duplicateDeliveries"] = self.duplicate_deliveries
        return Report(xc.canonicalize(root) + b"\n", code, list(self.violations), refusals,
                      stats)


def run_scenario(scenario, seed=None, out=None, workdir=None):
    """Run a scenario (path, bytes or Scenario) and return its Report; writes it to ``out``."""
    if isinstance(scenario, (str, Path)):
        scenario = load_scenario(scenario)
    elif isinstance(scenario, (bytes, bytearray)):
        scenario = parse_scenario(scenario)
    h = Harness(scenario, seed, workdir)
    try:
        report = h.run()
    finally:
        h.close()
    if out is not None:
        Path(out).write_bytes(report.xml)
    return report


# -- the shipped baseline -------------------------------------------------------

FIG1_DRUGS = (
    ("aspirin", ("aspirine", "acide acétylsalicylique", "Aspirin")),
    ("clopidogrel", ("clopidogrel",)),
    ("atenolol", ("aténolol", "atenolol")),
    ("bisoprolol", ("bisoprolol",)),
    ("heparin", ("héparine", "heparin")),
    ("enoxaparin", ("énoxaparine", "enoxaparin")),
    ("atorvastatin", ("atorvastatine", "atorvastatin")),
    ("amlodipine", ("amlodipine",)),
    ("amoxicillin", ("amoxicilline", "amoxicillin")),
    ("amoxicillin-clavulanate", ("amoxicilline acide clavulanique", "co-amoxiclav")),
    ("azithromycin", ("azithromycine", "azithromycin")),
    ("ceftriaxone", ("ceftriaxone",)),
    ("ciprofloxacin", ("ciprofloxacine", "ciprofloxacin")),
    ("metronidazole", ("métronidazole", "metronidazole")),
    ("paracetamol", ("paracétamol", "acetaminophen", "Paracetamol")),
    ("ibuprofen", ("ibuprofène", "ibuprofen")),
    ("diclofenac", ("diclofénac", "diclofenac")),
    ("tramadol", ("tramadol",)),
    ("insulin", ("insuline", "insulin")),
    ("metformin", ("metformine", "metformin")),
)
FIG1_REGIONS = (("R1", "rabat"), ("R2", "casablanca"), ("R3", "fes"))


def _fig1_policy(*suites):
    alts = [(secpolicy.signed("Header", "Body"), secpolicy.encrypted("Body"),
             secpolicy.suite(s), secpolicy.timestamp(300), secpolicy.CLIENT_CERT,
             secpolicy.COMPRESSION) for s in suites]
    return secpolicy.policy_element(secpolicy.policy_of(*alts))


def fig1_scenario(prescriptions=1000, steps=60, seed=7, incompatible=False,
                  duplication=0.0, name="fig1-baseline"):
    """Three regions, six hospitals, twenty drugs. Deterministic for given arguments.

    ``incompatible`` gives the first hospital a policy with no overlap with
    its depot (handshake-refusal variant).
    """
    gen = random.Random(2024)
    root = xc.element(NS, "Scenario", name=name, seed=seed, start="2024-01-01T00:00:00Z",
                      stepSeconds=86400, steps=steps)
    xc.sub(root, NS, "Network", latencyMin=0, latencyMax=0, duplication=repr(duplication),
           reorderWindow=1)
    pols = xc.sub(root, NS, "Policies")
    for pname, suites in (("any-suite", ("urn:hpis:suite:basic", "urn:hpis:suite:chacha")),
                          ("basic-suite", ("urn:hpis:suite:basic",)),
                          ("chacha-only", ("urn:hpis:suite:chacha",))):
        xc.sub(pols, NS, "PolicyDef", name=pname).append(_fig1_policy(*suites))
    parts = xc.sub(root, NS, "Participants")
    xc.sub(parts, NS, "Registry", id="registry")
    xc.sub(parts, NS, "Supplier", id="supplier", policy="basic-suite")
    xc.sub(parts, NS, "National", id="national", policy="basic-suite", supplier="supplier",
           window=1)
    drugs = [C + d for d, _ in FIG1_DRUGS]
    hospitals = []
    for region, city in FIG1_REGIONS:
        depot = f"depot-{region.lower()}"
        el = xc.sub(parts, NS, "Depot", id=depot, region=region, national="national",
                    policy="basic-suite" if incompatible and region == "R1" else "any-suite")
        for d in drugs:
            xc.sub(el, NS, "Stock", drug=d, qty=120)
        for d in drugs:
            xc.sub(el, NS, "Reorder", drug=d, s=50, S=160)
        for k in (1, 2):
            hid = f"hopital-{city}-{k}"
            hospitals.append(hid)
            pol = "chacha-only" if incompatible and hid == hospitals[0] else "any-suite"
            el = xc.sub(parts, NS, "Hospital", id=hid, region=region, depot=depot,
                        policy=pol, source="csv" if k == 1 else "xml")
            for d in drugs:
                xc.sub(el, NS, "Stock", drug=d, qty=30)
            for d in drugs:
                xc.sub(el, NS, "Reorder", drug=d, s=12, S=40)
    tl = xc.sub(root, NS, "Timeline")
    events = []
    for n in range(prescriptions):
        step = gen.randrange(steps - 1)
        hid = gen.choice(hospitals)
        _, terms = FIG1_DRUGS[min(int(gen.paretovariate(1.2)) - 1, len(FIG1_DRUGS) - 1)
                              if gen.random() < 0.5 else gen.randrange(len(FIG1_DRUGS))]
        events.append((step, n, hid, gen.choice(terms), gen.randint(1, 6),
                       f"p-{gen.getrandbits(32):08x}"))
    for step, _, hid, term, qty, patient in sorted(events):
        xc.sub(tl, NS, "Dispense", step=step, hospital=hid, term=term, qty=qty,
               patient=patient)
    last_month = (steps - 1) // 31 + 1
    assess = xc.sub(tl, NS, "Assess", step=steps - 1, **{"from": "2024-01",
                                                          "to": f"2024-{last_month:02d}"})
    for d in drugs[::2]:
        xc.sub(assess, NS, "Procure", drug=d, qty=90)
    return xc.canonicalize(root) + b"\n"


def shipped_path(name):
    from importlib.resources import files
    return files("hpis.data") / "scenarios" / name
