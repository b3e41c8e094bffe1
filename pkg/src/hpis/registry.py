"""National e-health services registry.

A minimal keyed store of annotated service descriptions with concept lookup.
Every operation requires a valid, non-revoked certificate; publishing is
reserved to provider roles and to the record's own provider.

Description document (``urn:hpis:service:1``)::

    <ServiceDescription xmlns="urn:hpis:service:1" key="" name="" provider="" endpoint="">
      <Action>urn:hpis:order:submit</Action>
      <ModelReference concept="urn:hpis:concept:regional-drug-order-service"/>
      <ServicePolicy><Policy xmlns="urn:hpis:policy:1">...</Policy></ServicePolicy>
    </ServiceDescription>

Store layout: ``<dir>/index.xml`` plus ``<dir>/records/<sha256(key)[:32]>.xml``
holding the description bytes verbatim. Both are replaced via
temp-file-then-rename.
"""

import hashlib
import logging
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

from . import envelope as env_mod
from . import pki, secpolicy
from . import xmlcanon as xc
from .errors import (AuthFailed, DuplicateKeyOtherProvider, HpisError, MalformedXml,
                     NotFound, RoleDenied, UnknownConcept, by_code)
from .timeutil import format_instant, utcnow

log = logging.getLogger(__name__)

NS = "urn:hpis:service:1"
RNS = "urn:hpis:registry:1"

PROVIDER_ROLES = frozenset({"hospital-pharmacy", "regional-depot", "national-supply", "supplier"})

ACTION_PUBLISH = "urn:hpis:registry:publish"
ACTION_FIND = "urn:hpis:registry:find"
ACTION_GET = "urn:hpis:registry:get"
ACTION_POLICY = "urn:hpis:registry:policy"
ACTION_RESPONSE = "urn:hpis:registry:response"

REGISTRY_PLAN = secpolicy.ProtectionPlan.sign_only(require_client_cert=True)

# Access window for signed requests made through the direct API.
REQUEST_WINDOW = 300


@dataclass(frozen=True)
class ServiceRecord:
    service_key: str
    name: str
    provider: str
    endpoint: str
    actions: frozenset
    model_refs: frozenset
    policy: secpolicy.PolicyDocument
    description: bytes

    @classmethod
    def from_description(cls, data):
        root = xc.parse_xml(data)
        xc.expect(root, NS, "ServiceDescription")
        actions, refs, policy = [], [], None
        for child in xc.children(root):
            ns, local = xc.split_tag(child.tag)
            if ns != NS:
                raise MalformedXml(f"unexpected {child.tag}")
            if local == "Action":
                actions.append(xc.text_of(child))
            elif local == "ModelReference":
                refs.append(child.get("concept", ""))
            elif local == "ServicePolicy":
                kids = xc.children(child)
                if len(kids) != 1:
                    raise MalformedXml("ServicePolicy must hold exactly one Policy")
                policy = secpolicy.parse_policy(kids[0])
            else:
                raise MalformedXml(f"unexpected {local}")
        key = root.get("key", "")
        if not key or policy is None:
            raise MalformedXml("description needs a key and a ServicePolicy")
        return cls(key, root.get("name", ""), root.get("provider", ""),
                   root.get("endpoint", ""), frozenset(actions), frozenset(refs),
                   policy, xc.canonicalize(root))


def build_description(key, name, provider, endpoint, actions, model_refs, policy):
    root = xc.element(NS, "ServiceDescription", key=key, name=name, provider=provider,
                      endpoint=endpoint)
    for a in sorted(actions):
        xc.sub(root, NS, "Action", a)
    for c in sorted(model_refs):
        xc.sub(root, NS, "ModelReference", concept=c)
    holder = xc.sub(root, NS, "ServicePolicy")
    if isinstance(policy, (bytes, str)):
        policy = secpolicy.parse_policy(policy)
    holder.append(secpolicy.policy_element(policy))
    return xc.canonicalize(root)


# -- signed requests (direct API) ---------------------------------------------

def request_bytes(op, at, **params):
    el = xc.element(RNS, "RegistryRequest", op=op, at=format_instant(at),
                    **{k: v for k, v in params.items() if v is not None})
    return xc.canonicalize(el)


@dataclass(frozen=True)
class Credentials:
    certificate: pki.Certificate
    at: object
    proof: bytes


def sign_request(identity, op, now=None, **params):
    now = (now or utcnow()).replace(microsecond=0)
    return Credentials(identity.cert, now, pki.sign(request_bytes(op, now, **params),
                                                     identity.keypair))


def _atomic_write(path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Registry:
    """Persistent registry core. Reads are lock-free over an immutable snapshot."""

    def __init__(self, store_dir, ontology, trust):
        self.dir = Path(store_dir)
        self.ontology = ontology
        self.trust = trust
        self._write_lock = threading.Lock()
        self._records = {}
        self._load()

    def _record_path(self, key):
        return self.dir / "records" / (hashlib.sha256(key.encode()).hexdigest()[:32] + ".xml")

    def _load(self):
        index = self.dir / "index.xml"
        if not index.exists():
            return
        root = xc.expect(xc.parse_xml(index.read_bytes()), RNS, "Index")
        records = {}
        for e in xc.children(root):
            data = (self.dir / "records" / e.get("file")).read_bytes()
            rec = ServiceRecord.from_description(data)
            if rec.service_key != e.get("key"):
                raise MalformedXml(f"index entry {e.get('key')} points at {rec.service_key}")
            records[rec.service_key] = rec
        self._records = records

    def _write_index(self, records):
        root = xc.element(RNS, "Index")
        for key in sorted(records):
            xc.sub(root, RNS, "Entry", key=key, provider=records[key].provider,
                   file=self._record_path(key).name)
        _atomic_write(self.dir / "index.xml", xc.canonicalize(root))

    # -- access control ---------------------------------------------------

    def check_certificate(self, cert, now):
        status = pki.verify(cert, self.trust, now)
        if not status.ok:
            raise AuthFailed(status.value)
        return cert

    def _authenticate(self, creds, op, now, **params):
        now = now or utcnow()
        if creds is None or creds.certificate is None:
            raise AuthFailed("no certificate")
        self.check_certificate(creds.certificate, now)
        if abs((now - creds.at).total_seconds()) > REQUEST_WINDOW:
            raise AuthFailed("stale request")
        if not pki.verify_sig(request_bytes(op, creds.at, **params), creds.proof,
                              creds.certificate.public_key):
            raise AuthFailed("bad request signature")
        return creds.certificate

    # -- operations ---------------------------------------------------------

    def publish(self, description, creds, now=None):
        rec = description if isinstance(description, ServiceRecord) else \
            ServiceRecord.from_description(description)
        cert = self._authenticate(creds, "publish", now, key=rec.service_key,
                                  digest=hashlib.sha256(rec.description).hexdigest())
        return self.publish_verified(rec, cert)

    def publish_verified(self, rec, cert):
        """Publish on behalf of an already authenticated certificate."""
        if cert.role not in PROVIDER_ROLES:
            raise RoleDenied(cert.role)
        if cert.subject != rec.provider:
            raise RoleDenied(f"{cert.subject} cannot publish for {rec.provider}")
        for iri in sorted(rec.model_refs):
            if iri not in self.ontology.concepts:
                raise UnknownConcept(iri)
        with self._write_lock:
            existing = self._records.get(rec.service_key)
            if existing is not None and existing.provider != rec.provider:
                raise DuplicateKeyOtherProvider(rec.service_key)
            _atomic_write(self._record_path(rec.service_key), rec.description)
            records = dict(self._records)
            records[rec.service_key] = rec
            self._write_index(records)
            self._records = records
        log.info("published %s by %s", rec.service_key, cert.subject)
        return rec.service_key

    def find_by_concept(self, concept, include_subsumed, creds, now=None):
        self._authenticate(creds, "find", now, concept=concept,
                           subsumed="true" if include_subsumed else "false")
        return self.find_verified(concept, include_subsumed)

    def find_verified(self, concept, include_subsumed):
        if concept not in self.ontology.concepts:
            raise UnknownConcept(concept)
        records = self._records
        out = []
        for key in sorted(records):
            refs = records[key].model_refs
            if include_subsumed:
                hit = any(r in self.ontology.concepts and self.ontology.subsumes(concept, r)
                          for r in refs)
            else:
                hit = concept in refs
            if hit:
                out.append(records[key])
        return out

    def get(self, key, creds, now=None):
        self._authenticate(creds, "get", now, key=key)
        return self.get_verified(key)

    def get_verified(self, key):
        try:
            return self._records[key]
        except KeyError:
            raise NotFound(key) from None

    def resolve_policy(self, key, creds, now=None):
        self._authenticate(creds, "policy", now, key=key)
        return secpolicy.normalize(self.get_verified(key).policy)

    def keys(self):
        return sorted(self._records)


# -- envelope-facing service --------------------------------------------------

def _fault(code, message):
    return xc.element(RNS, "Fault", message, code=code)


class RegistryService:
    """Wire handler: envelope bytes in (actions urn:hpis:registry:*), envelope bytes out."""

    def __init__(self, registry, identity, clock=utcnow, rng=None):
        self.registry = registry
        self.identity = identity
        self.clock = clock
        self.rng = rng
        self.replay = env_mod.ReplayCache()

    @property
    def participant_id(self):
        return self.identity.participant_id

    def _reply(self, to, body):
        out = env_mod.new_envelope(self.participant_id, to or "unknown", ACTION_RESPONSE,
                                   body, now=self.clock(), rng=self.rng)
        out = env_mod.protect(out, REGISTRY_PLAN, self.identity.keypair, self.identity.cert)
        return env_mod.serialize(out)

    def handle(self, payload):
        now = self.clock()
        to = None
        try:
            env = env_mod.parse(payload)
            to = env.sender
            try:
                opened = env_mod.open(env, self.identity.keypair, self.registry.trust,
                                      REGISTRY_PLAN, now, self.replay)
            except HpisError as exc:
                raise AuthFailed(f"{exc.code}: {exc}") from None
            body = self._dispatch(opened.envelope, opened.sender)
        except HpisError as exc:
            body = _fault(exc.code, str(exc))
        return self._reply(to, body)

    __call__ = handle

    def _dispatch(self, env, cert):
        req = env.body_element()
        xc.expect(req, RNS, "RegistryRequest")
        op = req.get("op", "")
        resp = xc.element(RNS, "RegistryResponse", op=op)
        r = self.registry
        if env.action == ACTION_PUBLISH and op == "publish":
            descs = xc.children(req)
            if len(descs) != 1:
                raise MalformedXml("publish needs one ServiceDescription")
            rec = ServiceRecord.from_description(xc.canonicalize(descs[0]))
            xc.sub(resp, RNS, "ServiceKey", r.publish_verified(rec, cert))
        elif env.action == ACTION_FIND and op == "find":
            for rec in r.find_verified(req.get("concept", ""),
                                       req.get("subsumed") == "true"):
                xc.sub(resp, RNS, "ServiceKey", rec.service_key)
        elif env.action == ACTION_GET and op == "get":
            resp.append(xc.parse_xml(r.get_verified(req.get("key", "")).description))
        elif env.action == ACTION_POLICY and op == "policy":
            nf = secpolicy.normalize(r.get_verified(req.get("key", "")).policy)
            resp.append(secpolicy.policy_element(secpolicy.to_document(nf)))
        else:
            raise MalformedXml(f"unsupported registry request {env.action} / {op}")
        return resp


class RegistryClient:
    """Client stub used by nodes and the CLI; faults are re-raised as their error class."""

    def __init__(self, network, identity, registry_id, trust, clock=utcnow, rng=None):
        self.network = network
        self.identity = identity
        self.registry_id = registry_id
        self.trust = trust
        self.clock = clock
        self.rng = rng
        self.replay = env_mod.ReplayCache()

    def _call(self, action, request):
        me = self.identity
        out = env_mod.new_envelope(me.participant_id, self.registry_id, action, request,
                                   now=self.clock(), rng=self.rng)
        out = env_mod.protect(out, REGISTRY_PLAN, me.keypair, me.cert)
        raw = self.network.send(me.participant_id, self.registry_id, env_mod.serialize(out))
        opened = env_mod.open(env_mod.parse(raw), me.keypair, self.trust, REGISTRY_PLAN,
                              self.clock(), self.replay)
        if opened.sender.role != "registry" or opened.sender_id != self.registry_id:
            raise AuthFailed(f"response not signed by registry {self.registry_id}")
        body = opened.envelope.body_element()
        if body.tag == xc.qn(RNS, "Fault"):
            cls = by_code(body.get("code", ""))
            try:
                raise cls(xc.text_of(body))
            except TypeError:
                raise HpisError(f"{body.get('code')}: {xc.text_of(body)}") from None
        return body

    def publish(self, description):
        req = xc.element(RNS, "RegistryRequest", op="publish")
        req.append(xc.parse_xml(description))
        body = self._call(ACTION_PUBLISH, req)
        return xc.text_of(xc.children(body)[0])

    def find(self, concept, include_subsumed=False):
        req = xc.element(RNS, "RegistryRequest", op="find", concept=concept,
                         subsumed="true" if include_subsumed else "false")
        return [xc.text_of(k) for k in xc.children(self._call(ACTION_FIND, req))]

    def get(self, key):
        body = self._call(ACTION_GET, xc.element(RNS, "RegistryRequest", op="get", key=key))
        return ServiceRecord.from_description(xc.canonicalize(xc.children(body)[0]))

    def resolve_policy(self, key):
        body = self._call(ACTION_POLICY,
                          xc.element(RNS, "RegistryRequest", op="policy", key=key))
        return secpolicy.normalize(secpolicy.parse_policy(xc.children(body)[0]))
