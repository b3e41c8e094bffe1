"""Drug-supply actors and the order lifecycle.

Four roles exchange protected envelopes: hospital pharmacies order from their
regional depot, depots order from the national department, which buys from
the supplier. Each node owns its ledger and reacts only to messages.

Order body XML (``urn:hpis:order:1``)::

    <DrugOrder><OrderId/><Origin/><Destination/><Line drug="IRI" qty="int"/>...</DrugOrder>
    <OrderAck><OrderId/><Status/></OrderAck>                          response to submit
    <Shipment><ShipmentId/><OrderId/><Origin/><Destination/><Line/>...</Shipment>
    <DeliveryReceipt><ShipmentId/><OrderId/></DeliveryReceipt>         response to ship
"""

import logging
import random
from collections import defaultdict
from dataclasses import dataclass, replace

from . import envelope as env_mod
from . import etl
from . import xmlcanon as xc
from .errors import (HpisError, IllegalTransition, InvariantViolation, MalformedOrder,
                     NegativeIndicator, PolicyViolation, ReplayDetected,
                     WrongDestination)
from .secpolicy import ProtectionPlan, check_compliance
from .timeutil import utcnow

log = logging.getLogger(__name__)

NS = "urn:hpis:order:1"
ACTION_SUBMIT = "urn:hpis:order:submit"
ACTION_ACK = "urn:hpis:order:ack"
ACTION_SHIP = "urn:hpis:order:ship"
ACTION_DELIVER = "urn:hpis:order:deliver"
ACTION_INTEGRATE = "urn:hpis:rx:integrate"
ACTION_FAULT = "urn:hpis:fault"

# Faults go out even when no channel plan exists, so they are only signed.
FAULT_PLAN = ProtectionPlan.sign_only()

STATUSES = ("Created", "Submitted", "Acknowledged", "Fulfilled", "Backordered", "Delivered")
EVENTS = ("submit", "ack", "fulfill", "backorder", "deliver")
TRANSITIONS = {
    ("Created", "submit"): "Submitted",
    ("Submitted", "ack"): "Acknowledged",
    ("Acknowledged", "fulfill"): "Fulfilled",
    ("Acknowledged", "backorder"): "Backordered",
    ("Backordered", "fulfill"): "Fulfilled",
    ("Fulfilled", "deliver"): "Delivered",
}


# -- orders -------------------------------------------------------------------

@dataclass(frozen=True)
class OrderLine:
    drug: str
    quantity: int


def _lines(lines):
    out = tuple(sorted((ln if isinstance(ln, OrderLine) else OrderLine(*ln) for ln in lines),
                       key=lambda ln: ln.drug))
    drugs = [ln.drug for ln in out]
    if len(set(drugs)) != len(drugs):
        raise MalformedOrder("drug repeated within one order")
    for ln in out:
        if not ln.drug or type(ln.quantity) is not int or ln.quantity <= 0:
            raise MalformedOrder(f"bad line {ln.drug!r} x {ln.quantity!r}")
    return out


@dataclass(frozen=True)
class DrugOrder:
    order_id: str
    origin: str
    destination: str
    lines: tuple
    status: str = "Created"
    created_at: object = None

    def __post_init__(self):
        object.__setattr__(self, "lines", _lines(self.lines))
        if not self.lines:
            raise MalformedOrder("order without lines")
        if self.status not in STATUSES:
            raise MalformedOrder(f"unknown status {self.status}")

    def quantity(self, drug):
        return next((ln.quantity for ln in self.lines if ln.drug == drug), 0)


def order_transition(order, event):
    nxt = TRANSITIONS.get((order.status, event))
    if nxt is None:
        raise IllegalTransition(order.status, event)
    return replace(order, status=nxt)


@dataclass(frozen=True)
class Shipment:
    shipment_id: str
    order_id: str
    origin: str
    destination: str
    lines: tuple

    def __post_init__(self):
        object.__setattr__(self, "lines", _lines(self.lines))


def _with_lines(root, lines):
    for ln in lines:
        xc.sub(root, NS, "Line", drug=ln.drug, qty=ln.quantity)
    return root


def order_element(order):
    root = xc.element(NS, "DrugOrder")
    for name, value in (("OrderId", order.order_id), ("Origin", order.origin),
                        ("Destination", order.destination)):
        xc.sub(root, NS, name, value)
    return _with_lines(root, order.lines)


def shipment_element(sh):
    root = xc.element(NS, "Shipment")
    for name, value in (("ShipmentId", sh.shipment_id), ("OrderId", sh.order_id),
                        ("Origin", sh.origin), ("Destination", sh.destination)):
        xc.sub(root, NS, name, value)
    return _with_lines(root, sh.lines)


def _read(el, root_name, fields):
    if el.tag != xc.qn(NS, root_name):
        raise MalformedOrder(f"expected {root_name}, got {el.tag}")
    kids = xc.children(el)
    head, rest = kids[:len(fields)], kids[len(fields):]
    if [h.tag for h in head] != [xc.qn(NS, f) for f in fields]:
        raise MalformedOrder(f"{root_name} needs {', '.join(fields)} in order")
    values = [xc.text_of(h) for h in head]
    lines = []
    for ln in rest:
        if ln.tag != xc.qn(NS, "Line"):
            raise MalformedOrder(f"unexpected {ln.tag}")
        qty = ln.get("qty", "")
        if not qty.isdigit():
            raise MalformedOrder(f"bad quantity {qty!r}")
        lines.append(OrderLine(ln.get("drug", ""), int(qty)))
    return values, lines


def order_from_element(el):
    (oid, origin, dest), lines = _read(el, "DrugOrder", ("OrderId", "Origin", "Destination"))
    return DrugOrder(oid, origin, dest, lines, "Submitted")


def shipment_from_element(el):
    values, lines = _read(el, "Shipment", ("ShipmentId", "OrderId", "Origin", "Destination"))
    return Shipment(*values, lines)


def ack_element(order_id, status):
    root = xc.element(NS, "OrderAck")
    xc.sub(root, NS, "OrderId", order_id)
    xc.sub(root, NS, "Status", status)
    return root


def receipt_element(sh):
    root = xc.element(NS, "DeliveryReceipt")
    xc.sub(root, NS, "ShipmentId", sh.shipment_id)
    xc.sub(root, NS, "OrderId", sh.order_id)
    return root


def _fields(el, name, fields):
    (values, lines) = _read(el, name, fields)
    if lines:
        raise MalformedOrder(f"{name} carries no lines")
    return values


# -- stock --------------------------------------------------------------------

@dataclass(frozen=True)
class JournalEntry:
    at: object
    cause: str
    drug: str
    delta: int


class StockLedger:
    """On-hand stock per drug plus goods shipped but not yet confirmed delivered.

    ``in_transit`` is keyed by shipment id; an order may leave in several
    shipments when it is partially backordered.
    """

    def __init__(self, initial=None, at=None):
        self.on_hand = {}
        self.in_transit = {}
        self.journal = []
        for drug, qty in sorted((initial or {}).items()):
            if qty:
                self.credit(drug, qty, "initial", at)

    def get(self, drug):
        return self.on_hand.get(drug, 0)

    def credit(self, drug, qty, cause, at):
        if qty < 0:
            raise InvariantViolation(f"negative credit {drug} {qty}")
        self.on_hand[drug] = self.get(drug) + qty
        self.journal.append(JournalEntry(at, cause, drug, qty))

    def debit(self, drug, qty, cause, at):
        if qty < 0 or qty > self.get(drug):
            raise InvariantViolation(f"debit {qty} of {drug} with {self.get(drug)} on hand")
        self.on_hand[drug] = self.get(drug) - qty
        self.journal.append(JournalEntry(at, cause, drug, -qty))

    def ship_out(self, shipment_id, lines, at):
        for ln in lines:
            self.debit(ln.drug, ln.quantity, f"ship:{shipment_id}", at)
        self.in_transit[shipment_id] = tuple(lines)

    def send_external(self, shipment_id, lines):
        """Goods entering the system from outside (the supplier boundary)."""
        self.in_transit[shipment_id] = tuple(lines)

    def settle(self, shipment_id):
        return self.in_transit.pop(shipment_id, None) is not None

    def total_on_hand(self):
        return sum(self.on_hand.values())

    def total_in_transit(self):
        return sum(ln.quantity for lines in self.in_transit.values() for ln in lines)

    def snapshot(self):
        return (tuple(sorted(self.on_hand.items())),
                tuple(sorted((k, v) for k, v in self.in_transit.items())))


@dataclass(frozen=True)
class ReorderPolicy:
    """Per-drug (s, S): reorder when on-hand < s, up to S."""
    levels: dict

    def __post_init__(self):
        for drug, (s, big_s) in self.levels.items():
            if not (type(s) is int and type(big_s) is int and 0 <= s < big_s):
                raise ValueError(f"reorder levels for {drug} must satisfy 0 <= s < S")

    def drugs(self):
        return sorted(self.levels)

    def __getitem__(self, drug):
        return self.levels[drug]


def allocate(indicators, procured, regions=None):
    """Largest-remainder apportionment of procured quantities over regions.

    ``indicators`` maps (region, drug) -> consumption. Regions default to
    those present in ``indicators``. Zero total consumption splits equally.
    Returns {(region, drug): quantity}.
    """
    if any(v < 0 for v in indicators.values()):
        raise NegativeIndicator(", ".join(f"{r}/{d}" for (r, d), v in sorted(indicators.items())
                                          if v < 0))
    regions = sorted(set(regions) if regions is not None else {r for r, _ in indicators})
    plan = {}
    for drug in sorted(procured):
        total_units = procured[drug]
        if total_units < 0:
            raise NegativeIndicator(f"procured {drug} = {total_units}")
        if not regions:
            continue
        weights = [indicators.get((r, drug), 0) for r in regions]
        if sum(weights) == 0:
            weights = [1] * len(regions)
        denom = sum(weights)
        base = [total_units * w // denom for w in weights]
        rems = [total_units * w % denom for w in weights]
        leftover = total_units - sum(base)
        for i in sorted(range(len(regions)), key=lambda i: (-rems[i], regions[i]))[:leftover]:
            base[i] += 1
        for r, q in zip(regions, base):
            plan[(r, drug)] = q
    return plan


# -- nodes --------------------------------------------------------------------

@dataclass
class NodeContext:
    """Shared, read-only things every node needs."""
    trust: object
    directory: dict                 # participant id -> Certificate
    ontology: object = None
    clock: object = utcnow
    events: list = None             # shared transition log, in the order things happened


class Node:
    """Single-threaded actor: handles one envelope at a time, owns its ledger."""

    role = None

    def __init__(self, identity, ctx, network=None, rng=None, initial=None, reorder=None):
        self.identity = identity
        self.id = identity.participant_id
        self.ctx = ctx
        self.network = network
        self.rng = rng if rng is not None else random.Random()
        self.ledger = StockLedger(initial, ctx.clock())
        self.reorder = reorder
        self.plans = {}
        self.replay = env_mod.ReplayCache()
        self.responses = {}
        self.orders = {}             # orders this node placed
        self.received = defaultdict(lambda: defaultdict(int))
        self.inbound = {}            # order id -> ack status, for orders placed with us
        self.order_log = []          # (at, order_id, from, to)
        self.faults = []             # (peer, code)
        self.refusals = []           # (peer, what)
        self.violations = []
        self.replays = 0
        self.last_was_replay = False
        self._seq = 0

    # -- plumbing -------------------------------------------------------------

    def now(self):
        return self.ctx.clock()

    def next_id(self, prefix):
        self._seq += 1
        return f"{self.id}/{prefix}-{self._seq:05d}"

    def set_plan(self, peer, plan):
        self.plans[peer] = plan

    def _protect(self, peer, action, body, plan):
        out = env_mod.new_envelope(self.id, peer, action, body, now=self.now(), rng=self.rng)
        receiver = self.ctx.directory.get(peer) if plan.encrypts_body else None
        return env_mod.protect(out, plan, self.identity.keypair, self.identity.cert,
                               receiver, rng=self.rng)

    def post(self, peer, action, body):
        plan = self.plans.get(peer)
        if plan is None:
            raise PolicyViolation(f"no negotiated policy with {peer}")
        prot = self._protect(peer, action, body, plan)
        verdict = check_compliance(prot, plan)
        if not verdict.ok:
            self.violations.append(f"{action} to {peer}: {', '.join(verdict.violations)}")
        self.network.post(self.id, peer, env_mod.serialize(prot), compress=plan.compression)

    def _fault(self, peer, exc):
        body = xc.element(NS, "Fault", str(exc), code=exc.code)
        out = self._protect(peer or "unknown", ACTION_FAULT, body, FAULT_PLAN)
        return env_mod.serialize(out)

    def _transition(self, order_id, event):
        order = self.orders[order_id]
        new = order_transition(order, event)
        self.orders[order_id] = new
        self._log(order_id, order.status, new.status)
        return new

    def _log(self, order_id, old, new):
        entry = (self.now(), order_id, old, new)
        self.order_log.append(entry)
        if self.ctx.events is not None:
            self.ctx.events.append(entry)

    # -- receiving ------------------------------------------------------------

    def handle(self, payload):
        """Wire entry point: request envelope bytes in, response envelope bytes out."""
        self.last_was_replay = False
        peer = None
        try:
            env = env_mod.parse(payload)
            peer = env.sender
            if env.recipient != self.id:
                raise WrongDestination(f"{env.recipient} at {self.id}")
            plan = self.plans.get(env.sender)
            if plan is None:
                raise PolicyViolation(f"no negotiated policy with {env.sender}")
            try:
                opened = env_mod.open(env, self.identity.keypair, self.ctx.trust, plan,
                                      self.now(), self.replay)
            except ReplayDetected:
                self.replays += 1
                self.last_was_replay = True
                cached = self.responses.get(env.message_id)
                if cached is None:
                    raise
                return cached
            action, body = self.on_request(opened.envelope)
            response = env_mod.serialize(self._protect(env.sender, action, body, plan))
            self.responses[env.message_id] = response
            return response
        except HpisError as exc:
            log.info("%s rejected message from %s: %s", self.id, peer, exc.code)
            return self._fault(peer, exc)

    __call__ = handle

    def on_request(self, env):
        body = env.body_element()
        if env.action == ACTION_SUBMIT:
            order = order_from_element(body)
            if order.origin != env.sender:
                raise MalformedOrder(f"origin {order.origin} sent by {env.sender}")
            return ACTION_ACK, ack_element(order.order_id, self.receive_order(order))
        if env.action == ACTION_SHIP:
            sh = shipment_from_element(body)
            if sh.destination != self.id:
                raise WrongDestination(sh.destination)
            if sh.origin != env.sender:
                raise MalformedOrder(f"shipment origin {sh.origin} sent by {env.sender}")
            self.receive_shipment(sh)
            return ACTION_DELIVER, receipt_element(sh)
        if env.action == ACTION_INTEGRATE:
            return ACTION_INTEGRATE, self.integrate_response()
        raise MalformedOrder(f"{self.role} does not serve {env.action}")

    def on_response(self, raw):
        """Response envelope from a peer (including duplicates redelivered by the network)."""
        try:
            env = env_mod.parse(raw)
            if env.action == ACTION_FAULT:
                opened = env_mod.open(env, self.identity.keypair, self.ctx.trust, FAULT_PLAN,
                                      self.now(), self.replay)
                el = opened.envelope.body_element()
                self.faults.append((env.sender, el.get("code", "")))
                return
            plan = self.plans.get(env.sender)
            if plan is None:
                raise PolicyViolation(f"no negotiated policy with {env.sender}")
            opened = env_mod.open(env, self.identity.keypair, self.ctx.trust, plan,
                                  self.now(), self.replay)
        except ReplayDetected:
            self.replays += 1
            return
        except HpisError as exc:
            self.faults.append(("response", exc.code))
            return
        body = opened.envelope.body_element()
        if env.action == ACTION_ACK:
            oid, status = _fields(body, "OrderAck", ("OrderId", "Status"))
            self.on_ack(oid, status)
        elif env.action == ACTION_DELIVER:
            sid, _ = _fields(body, "DeliveryReceipt", ("ShipmentId", "OrderId"))
            self.ledger.settle(sid)
        elif env.action == ACTION_INTEGRATE:
            self.on_prescriptions(env.sender, xc.canonicalize(body))
        else:
            self.faults.append((env.sender, f"unexpected {env.action}"))

    def receive_order(self, order):
        raise MalformedOrder(f"{self.role} does not accept orders")

    def integrate_response(self):
        raise MalformedOrder(f"{self.role} has no prescription source")

    def on_prescriptions(self, sender, data):
        self.faults.append((sender, "unexpected prescriptions"))

    def on_ack(self, order_id, status):
        if order_id not in self.orders:
            self.faults.append(("ack", f"unknown order {order_id}"))
            return
        self._transition(order_id, "ack")
        self._transition(order_id, "fulfill" if status == "Fulfilled" else "backorder")
        self._maybe_delivered(order_id)

    def receive_shipment(self, sh):
        cause = self.receive_cause(sh)
        for ln in sh.lines:
            self.ledger.credit(ln.drug, ln.quantity, cause, self.now())
        if sh.order_id in self.orders:
            for ln in sh.lines:
                self.received[sh.order_id][ln.drug] += ln.quantity
            self._maybe_delivered(sh.order_id)
        self.after_receive(sh)

    def receive_cause(self, sh):
        return f"receive:{sh.shipment_id}"

    def after_receive(self, sh):
        pass

    def _maybe_delivered(self, order_id):
        order = self.orders[order_id]
        got = self.received.get(order_id, {})
        if any(got.get(ln.drug, 0) < ln.quantity for ln in order.lines):
            return
        if order.status == "Backordered":
            order = self._transition(order_id, "fulfill")
        if order.status == "Fulfilled":
            self._transition(order_id, "deliver")

    # -- sending --------------------------------------------------------------

    def on_order(self, drug):
        """Ordered but not yet received, over all open orders."""
        total = 0
        for oid, order in self.orders.items():
            if order.status != "Delivered":
                total += max(0, order.quantity(drug) - self.received.get(oid, {}).get(drug, 0))
        return total

    def place_order(self, destination, lines):
        order = DrugOrder(self.next_id("ord"), self.id, destination, lines, "Created", self.now())
        self.orders[order.order_id] = order
        self._log(order.order_id, "", "Created")
        try:
            self.post(destination, ACTION_SUBMIT, order_element(order))
        except PolicyViolation:
            self.refusals.append((destination, order.order_id))
            return self.orders[order.order_id]
        return self._transition(order.order_id, "submit")

    def ship(self, destination, order_id, lines):
        """Move goods out of on-hand into transit and send the shipment notice."""
        if self.plans.get(destination) is None:
            self.refusals.append((destination, order_id))
            return None
        sh = Shipment(self.next_id("shp"), order_id, self.id, destination, lines)
        self.ledger.ship_out(sh.shipment_id, sh.lines, self.now())
        self.post(destination, ACTION_SHIP, shipment_element(sh))
        return sh

    def state_digest(self):
        return (self.ledger.snapshot(), tuple(sorted((k, v.status) for k, v in self.orders.items())),
                tuple(sorted(self.inbound.items())))


def _backorder_lines(queue, predicate=lambda e: True):
    return sum(e[3] for e in queue if predicate(e))


class PharmacyNode(Node):
    """Hospital pharmacy: dispenses, keeps a local prescription store, orders from its depot."""

    role = "hospital-pharmacy"

    def __init__(self, identity, ctx, depot, region, source_format="csv", **kw):
        super().__init__(identity, ctx, **kw)
        self.depot = depot
        self.region = region
        self.source_format = source_format
        self.consumed = defaultdict(int)
        self.unserved = defaultdict(int)
        self.prescriptions = []      # PrescriptionRecord, local store

    def dispense(self, term, quantity, patient, date):
        """Serve a prescription from stock; returns the quantity actually dispensed."""
        drug = self.ctx.ontology.normalize_term(term)
        served = min(quantity, self.ledger.get(drug))
        if served < quantity:
            self.unserved[drug] += quantity - served
        if served:
            self.ledger.debit(drug, served, "dispense", self.now())
            self.consumed[drug] += served
            rid = f"rx-{len(self.prescriptions) + 1:05d}"
            self.prescriptions.append(etl.PrescriptionRecord(
                self.id, rid, self.id, self.region, date, term, served, patient))
        return served

    def pharmacy_step(self, now=None):
        """Rupture check: one order for every drug under its reorder point."""
        lines = []
        for drug in self.reorder.drugs() if self.reorder else ():
            s, big_s = self.reorder[drug]
            on_hand = self.ledger.get(drug)
            if on_hand < s:
                qty = big_s - on_hand - self.on_order(drug)
                if qty > 0:
                    lines.append(OrderLine(drug, qty))
        return [self.place_order(self.depot, lines)] if lines else []

    def local_source(self):
        """The pharmacy's own store rendered in its native format, with its mapping."""
        if self.source_format == "csv":
            text = "".join(f"{r.record_id};{r.facility};{r.date};{r.drug_term};{r.quantity};"
                           f"{r.patient_ref}\n" for r in self.prescriptions)
            mapping = {"fields": {"record_id": 0, "facility": 1, "date": 2, "term": 3,
                                  "qty": 4, "patient": 5},
                       "delimiter": ";", "header": False, "date_format": "%Y-%m-%d",
                       "region": self.region}
            return etl.SourceDescriptor(self.id, "csv", mapping, data=text.encode("utf-8"))
        root = xc.element("", "Ordonnances")
        for r in self.prescriptions:
            y, m, d = r.date.split("-")
            el = xc.sub(root, "", "Ordonnance", num=r.record_id)
            for name, value in (("Etablissement", r.facility), ("Date", f"{d}/{m}/{y}"),
                                ("Medicament", r.drug_term), ("Quantite", r.quantity),
                                ("Patient", r.patient_ref)):
                xc.sub(el, "", name, value)
        mapping = {"record": "Ordonnance", "date_format": "%d/%m/%Y", "region": self.region,
                   "fields": {"record_id": "@num", "facility": "Etablissement", "date": "Date",
                              "term": "Medicament", "qty": "Quantite", "patient": "Patient"}}
        return etl.SourceDescriptor(self.id, "xml", mapping, data=xc.canonicalize(root))

    def integrate_response(self):
        data, _, _ = etl.integrate_source(self.local_source())
        return xc.parse_xml(data)

    def state_digest(self):
        return super().state_digest() + (tuple(sorted(self.consumed.items())),)


class DepotNode(Node):
    """Regional depot: serves pharmacies, backorders shortfalls, replenishes from national."""

    role = "regional-depot"

    def __init__(self, identity, ctx, national, region, **kw):
        super().__init__(identity, ctx, **kw)
        self.national = national
        self.region = region
        self.backorders = []     # [order_id, origin, drug, remaining], FIFO

    def backordered(self, drug):
        return _backorder_lines(self.backorders, lambda e: e[2] == drug)

    def receive_order(self, order):
        """Ship what is on hand, backorder the rest, then check for rupture."""
        if order.destination != self.id:
            raise WrongDestination(order.destination)
        if order.order_id in self.inbound:
            return self.inbound[order.order_id]
        ship, short = [], False
        for ln in order.lines:
            q = min(ln.quantity, self.ledger.get(ln.drug))
            if q:
                ship.append(OrderLine(ln.drug, q))
            if ln.quantity > q:
                self.backorders.append([order.order_id, order.origin, ln.drug, ln.quantity - q])
                short = True
        status = "Backordered" if short else "Fulfilled"
        self.inbound[order.order_id] = status
        if ship:
            self.ship(order.origin, order.order_id, ship)
        self.replenish()
        return status

    def replenish(self):
        lines = []
        for drug in self.reorder.drugs() if self.reorder else ():
            s, big_s = self.reorder[drug]
            on_hand = self.ledger.get(drug)
            if on_hand < s:
                qty = big_s - on_hand + self.backordered(drug) - self.on_order(drug)
                if qty > 0:
                    lines.append(OrderLine(drug, qty))
        return self.place_order(self.national, lines) if lines else None

    def serve_backorders(self):
        grouped, avail = {}, dict(self.ledger.on_hand)
        for entry in self.backorders:
            oid, origin, drug, remaining = entry
            q = min(remaining, avail.get(drug, 0))
            if not q or self.plans.get(origin) is None:
                continue
            entry[3] -= q
            avail[drug] -= q
            grouped.setdefault((oid, origin), []).append(OrderLine(drug, q))
        for (oid, origin), lines in grouped.items():
            self.ship(origin, oid, lines)
        self.backorders = [e for e in self.backorders if e[3] > 0]

    def after_receive(self, sh):
        self.serve_backorders()
        self.replenish()

    def state_digest(self):
        return super().state_digest() + (tuple(map(tuple, self.backorders)),)


class NationalNode(Node):
    """Department of drugs supply: fans depot shortfalls into windowed supplier orders,
    and runs the indicator-driven assessment."""

    role = "national-supply"

    def __init__(self, identity, ctx, supplier, window=1, **kw):
        super().__init__(identity, ctx, **kw)
        self.supplier = supplier
        self.window = window
        self.backorders = []     # [order_id, depot, drug, remaining]
        self.pending = defaultdict(int)     # (drug, depot) -> shortfall in the open window
        self.purpose = {}        # supplier order id -> "aggregate" | "assessment"
        self.allocations = {}    # supplier order id -> ({(region, drug): q}, {region: depot})
        self.rx_files = {}

    def receive_order(self, order):
        if order.destination != self.id:
            raise WrongDestination(order.destination)
        if order.order_id in self.inbound:
            return self.inbound[order.order_id]
        ship, short = [], False
        for ln in order.lines:
            q = min(ln.quantity, self.ledger.get(ln.drug))
            if q:
                ship.append(OrderLine(ln.drug, q))
            rest = ln.quantity - q
            if rest:
                self.backorders.append([order.order_id, order.origin, ln.drug, rest])
                self.pending[(ln.drug, order.origin)] += rest
                short = True
        status = "Backordered" if short else "Fulfilled"
        self.inbound[order.order_id] = status
        if ship:
            self.ship(order.origin, order.order_id, ship)
        return status

    def close_window(self):
        """One supplier order for everything short in this window (None if nothing is)."""
        if not self.pending:
            return None
        totals = defaultdict(int)
        for (drug, _depot), q in sorted(self.pending.items()):
            totals[drug] += q
        self.pending.clear()
        order = self.place_order(self.supplier, [OrderLine(d, q) for d, q in sorted(totals.items())])
        self.purpose[order.order_id] = "aggregate"
        return order

    def receive_cause(self, sh):
        return "supplier-delivery" if sh.origin == self.supplier else super().receive_cause(sh)

    def after_receive(self, sh):
        if self.purpose.get(sh.order_id) == "assessment":
            plan, depots = self.allocations[sh.order_id]
            per_depot = defaultdict(list)
            for (region, drug), q in sorted(plan.items()):
                if q:
                    per_depot[depots[region]].append(OrderLine(drug, q))
            for depot in sorted(per_depot):
                self.ship(depot, sh.order_id, per_depot[depot])
        self.serve_backorders()

    def serve_backorders(self):
        grouped, avail = {}, dict(self.ledger.on_hand)
        for entry in sorted(self.backorders, key=lambda e: (e[2], e[1], e[0])):
            oid, depot, drug, remaining = entry
            q = min(remaining, avail.get(drug, 0))
            if not q or self.plans.get(depot) is None:
                continue
            entry[3] -= q
            avail[drug] -= q
            grouped.setdefault((oid, depot), []).append(OrderLine(drug, q))
        for (oid, depot), lines in sorted(grouped.items()):
            self.ship(depot, oid, lines)
        self.backorders = [e for e in self.backorders if e[3] > 0]

    # -- assessment -----------------------------------------------------------

    def request_prescriptions(self, hospitals):
        for h in sorted(hospitals):
            try:
                self.post(h, ACTION_INTEGRATE, xc.element(etl.NS, "IntegrateRequest"))
            except PolicyViolation:
                self.refusals.append((h, "integrate"))

    def on_prescriptions(self, sender, data):
        self.rx_files[sender] = data

    def assess(self, rules, warehouse, drugs, regions, period_from, period_to, procured,
               depots_by_region):
        """Warehouse the collected prescriptions, compute indicators, allocate, and buy."""
        onto = self.ctx.ontology
        ext = etl.extract([self.rx_files[h] for h in sorted(self.rx_files)])
        tr = etl.transform(ext.records, onto, rules)
        etl.load(tr.facts, warehouse)
        table = etl.indicators(warehouse, onto, drugs, regions, period_from, period_to)
        plan = allocate(table, procured, regions)
        lines = [OrderLine(d, q) for d, q in sorted(procured.items()) if q > 0]
        if lines:
            order = self.place_order(self.supplier, lines)
            self.purpose[order.order_id] = "assessment"
            self.allocations[order.order_id] = (plan, dict(depots_by_region))
        return table, plan, tr.quarantine

    def state_digest(self):
        return super().state_digest() + (tuple(map(tuple, self.backorders)),
                                         tuple(sorted(self.pending.items())))


class SupplierNode(Node):
    """System boundary: ships every order in full from an unlimited source."""

    role = "supplier"

    def __init__(self, identity, ctx, **kw):
        super().__init__(identity, ctx, **kw)
        self.injected = 0

    def receive_order(self, order):
        if order.destination != self.id:
            raise WrongDestination(order.destination)
        if order.order_id in self.inbound:
            return self.inbound[order.order_id]
        self.inbound[order.order_id] = "Fulfilled"
        if self.plans.get(order.origin) is None:
            return "Fulfilled"
        sh = Shipment(self.next_id("shp"), order.order_id, self.id, order.origin, order.lines)
        self.ledger.send_external(sh.shipment_id, sh.lines)
        self.injected += sum(ln.quantity for ln in sh.lines)
        self.post(order.origin, ACTION_SHIP, shipment_element(sh))
        return "Fulfilled"

    def state_digest(self):
        return super().state_digest() + (self.injected,)
