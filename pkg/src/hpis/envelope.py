"""The envelope profile, its bit-exact serialization, and sign-then-encrypt protection.

Wire shape (single default namespace ``urn:hpis:envelope:1``, no prefixes)::

    <Envelope xmlns="urn:hpis:envelope:1">
      <Header>
        <MessageId/><Timestamp/><From/><To/><Action/>
        <Security>
          <BinarySecurityToken/>            base64 of the sender certificate XML
          <Signature Algorithm=""/>         base64
          <EncryptedKey Algorithm=""/>      base64, only with an encrypted body
        </Security>
      </Header>
      <Body/>                               plaintext children, or a sole
                                            <EncryptedData Algorithm="">
    </Envelope>
"""

import random
import uuid
from dataclasses import dataclass, replace
from datetime import datetime, timedelta, timezone

from . import pki
from . import xmlcanon as xc
from .errors import (DecryptFailure, DuplicateHeaderField, HpisError, InvariantViolation,
                     KeyMismatch, MalformedXml, MissingHeaderField, NonCanonicalizable,
                     PlanUnsatisfiable, PolicyViolation, ReplayDetected, SignatureInvalid,
                     StaleTimestamp, UntrustedCertificate)
from .secpolicy import SUITES, check_compliance
from .timeutil import format_instant, parse_instant, utcnow

NS = "urn:hpis:envelope:1"

HEADER_FIELDS = ("MessageId", "Timestamp", "From", "To", "Action")
_HEADER_ORDER = HEADER_FIELDS + ("Security",)
_SECURITY_ORDER = ("BinarySecurityToken", "Signature", "EncryptedKey")

_BODY_OPEN = f'<Body xmlns="{NS}">'.encode()


@dataclass(frozen=True)
class EncryptedBody:
    algorithm: str
    data: bytes


@dataclass(frozen=True)
class SecurityHeader:
    sender_certificate: bytes = b""
    signature_algorithm: str = ""
    signature: bytes = b""
    encrypted_key_algorithm: str = None
    encrypted_key: bytes = None


@dataclass(frozen=True)
class Envelope:
    message_id: str
    timestamp: datetime
    sender: str
    recipient: str
    action: str
    body: bytes = None
    encrypted: EncryptedBody = None
    security: SecurityHeader = None

    @property
    def is_encrypted(self):
        return self.encrypted is not None

    def validate(self):
        for name, value in (("MessageId", self.message_id), ("From", self.sender),
                            ("To", self.recipient), ("Action", self.action)):
            if not isinstance(value, str) or not value.strip():
                raise InvariantViolation(f"{name} must be non-empty")
        if not isinstance(self.timestamp, datetime) or self.timestamp.tzinfo is None:
            raise InvariantViolation("Timestamp must be an aware UTC instant")
        if (self.body is None) == (self.encrypted is None):
            raise InvariantViolation("body must be exactly one of plaintext or encrypted")
        if self.security is not None:
            has_key = self.security.encrypted_key is not None
            if has_key != self.is_encrypted:
                raise InvariantViolation("EncryptedKey present iff body is encrypted")
        return self

    def body_elements(self):
        if self.body is None:
            raise InvariantViolation("body is encrypted")
        return xc.children(xc.parse_xml(_BODY_OPEN + self.body + b"</Body>"))

    def body_element(self):
        kids = self.body_elements()
        if len(kids) != 1:
            raise MalformedXml(f"expected a single body element, found {len(kids)}")
        return kids[0]


def canonical_body(elements):
    """Canonical bytes of Body content as it appears inside an envelope."""
    if isinstance(elements, (bytes, bytearray)):
        return canonical_body(xc.children(xc.parse_xml(_BODY_OPEN + bytes(elements) + b"</Body>")))
    if not isinstance(elements, (list, tuple)):
        elements = [elements]
    return b"".join(xc.canonicalize(e, NS) for e in elements)


def new_envelope(sender, recipient, action, body, now=None, rng=None, message_id=None):
    """Build a plaintext envelope; ``body`` is an element, a list of elements or canonical bytes."""
    now = now or utcnow()
    if message_id is None:
        r = rng if rng is not None else random.SystemRandom()
        message_id = f"urn:uuid:{uuid.UUID(int=r.getrandbits(128), version=4)}"
    return Envelope(message_id, now.astimezone(timezone.utc), sender, recipient, action,
                    body=canonical_body(body))


# -- serialization ------------------------------------------------------------

def _field_bytes(name, text):
    return xc.canonicalize(xc.element(NS, name, text), NS)


def _header_values(env):
    return (env.message_id, format_instant(env.timestamp), env.sender,
            env.recipient, env.action)


def _security_bytes(sec):
    out = []
    if sec.sender_certificate:
        out.append(_field_bytes("BinarySecurityToken", xc.b64(sec.sender_certificate)))
    if sec.signature:
        out.append(xc.canonicalize(xc.element(NS, "Signature", xc.b64(sec.signature),
                                              Algorithm=sec.signature_algorithm), NS))
    if sec.encrypted_key is not None:
        out.append(xc.canonicalize(xc.element(NS, "EncryptedKey", xc.b64(sec.encrypted_key),
                                              Algorithm=sec.encrypted_key_algorithm or ""), NS))
    return b"<Security>" + b"".join(out) + b"</Security>"


def _body_content(env):
    if env.encrypted is not None:
        return xc.canonicalize(xc.element(NS, "EncryptedData", xc.b64(env.encrypted.data),
                                          Algorithm=env.encrypted.algorithm), NS)
    return env.body


def serialize(env):
    env.validate()
    parts = [f'<Envelope xmlns="{NS}"><Header>'.encode()]
    for name, value in zip(HEADER_FIELDS, _header_values(env)):
        parts.append(_field_bytes(name, value))
    if env.security is not None:
        parts.append(_security_bytes(env.security))
    parts.append(b"</Header><Body>")
    parts.append(_body_content(env))
    parts.append(b"</Body></Envelope>")
    return b"".join(parts)


def _local(el):
    ns, local = xc.split_tag(el.tag)
    if ns != NS:
        raise MalformedXml(f"element {el.tag} outside {NS}")
    return local


def _ordered_unique(kids, order, missing_ok=()):
    """Map local-name -> element, enforcing membership, uniqueness and order."""
    found = {}
    for k in kids:
        name = _local(k)
        if name not in order:
            raise MalformedXml(f"unexpected element {name}")
        if name in found:
            raise DuplicateHeaderField(name)
        found[name] = k
    for name in order:
        if name not in found and name not in missing_ok:
            raise MissingHeaderField(name)
    names = [_local(k) for k in kids]
    if names != [n for n in order if n in found]:
        raise MalformedXml("header fields out of order")
    return found


def parse(data):
    root = xc.parse_xml(data)
    if root.tag != xc.qn(NS, "Envelope"):
        raise MalformedXml("root must be Envelope")
    kids = xc.children(root)
    if [xc.split_tag(k.tag) for k in kids] != [(NS, "Header"), (NS, "Body")]:
        raise MalformedXml("Envelope must contain Header then Body")
    header, body = kids
    h = _ordered_unique(xc.children(header), _HEADER_ORDER, missing_ok=("Security",))
    values = {n: xc.text_of(h[n]) for n in HEADER_FIELDS}
    for n in HEADER_FIELDS:
        if not values[n]:
            raise MissingHeaderField(n)
    security = None
    if "Security" in h:
        s = _ordered_unique(xc.children(h["Security"]), _SECURITY_ORDER,
                            missing_ok=_SECURITY_ORDER)
        security = SecurityHeader(
            sender_certificate=xc.unb64(xc.text_of(s["BinarySecurityToken"]))
            if "BinarySecurityToken" in s else b"",
            signature_algorithm=s["Signature"].get("Algorithm", "") if "Signature" in s else "",
            signature=xc.unb64(xc.text_of(s["Signature"])) if "Signature" in s else b"",
            encrypted_key_algorithm=s["EncryptedKey"].get("Algorithm", "")
            if "EncryptedKey" in s else None,
            encrypted_key=xc.unb64(xc.text_of(s["EncryptedKey"]))
            if "EncryptedKey" in s else None,
        )
    if xc.text_of(body):
        raise MalformedXml("text directly inside Body")
    body_kids = xc.children(body)
    plain, encrypted = None, None
    if len(body_kids) == 1 and body_kids[0].tag == xc.qn(NS, "EncryptedData"):
        ed = body_kids[0]
        encrypted = EncryptedBody(ed.get("Algorithm", ""), xc.unb64(xc.text_of(ed)))
    else:
        try:
            plain = canonical_body(body_kids)
        except NonCanonicalizable as exc:
            raise MalformedXml(str(exc)) from None
    env = Envelope(values["MessageId"], parse_instant(values["Timestamp"]),
                   values["From"], values["To"], values["Action"],
                   body=plain, encrypted=encrypted, security=security)
    try:
        return env.validate()
    except InvariantViolation as exc:
        raise MalformedXml(str(exc)) from None


# -- protection -----------------------------------------------------------------

def signing_input(env):
    """Newline-joined canonical MessageId, Timestamp, From, To, Action and plaintext Body."""
    if env.body is None:
        raise InvariantViolation("signing input needs the plaintext body")
    pieces = [xc.canonicalize(xc.element(NS, n, v))
              for n, v in zip(HEADER_FIELDS, _header_values(env))]
    pieces.append(_BODY_OPEN + env.body + b"</Body>")
    return b"\n".join(pieces)


def protect(env, plan, sender_key, sender_cert, receiver_cert=None, rng=None):
    """Sign, then (if the plan asks) encrypt the body for ``receiver_cert``."""
    env.validate()
    if env.body is None or env.security is not None:
        raise InvariantViolation("protect expects a plaintext, unprotected envelope")
    pub = sender_key.public if isinstance(sender_key, pki.KeyPair) else \
        pki.public_from_private(sender_key)
    if pub != sender_cert.public_key:
        raise KeyMismatch(sender_cert.subject)
    suite = SUITES.get(plan.suite)
    if suite is None:
        raise PlanUnsatisfiable(f"unknown suite {plan.suite}")
    sec = SecurityHeader(sender_certificate=sender_cert.to_xml(),
                         signature_algorithm=suite.signature,
                         signature=pki.sign(signing_input(env), sender_key))
    if not plan.encrypts_body:
        return replace(env, security=sec)
    if receiver_cert is None:
        raise PlanUnsatisfiable("encryption requires the receiver certificate")
    ct = pki.hybrid_encrypt(env.body, receiver_cert, suite.cipher, rng=rng)
    sec = replace(sec, encrypted_key_algorithm=suite.key_transport,
                  encrypted_key=ct.encrypted_key)
    return replace(env, body=None, encrypted=EncryptedBody(suite.cipher, ct.ciphertext),
                   security=sec)


class ReplayCache:
    """Remembers message ids for ``ttl`` seconds; not thread-safe (one per actor)."""

    def __init__(self, ttl=600):
        self.ttl = timedelta(seconds=ttl)
        self._seen = {}

    def __contains__(self, message_id):
        return message_id in self._seen

    def check_and_add(self, message_id, now):
        for mid in [m for m, exp in self._seen.items() if exp < now]:
            del self._seen[mid]
        if message_id in self._seen:
            raise ReplayDetected(message_id)
        self._seen[message_id] = now + self.ttl


@dataclass(frozen=True)
class Opened:
    envelope: Envelope
    sender: pki.Certificate

    @property
    def sender_id(self):
        return self.sender.subject


def open(env, receiver_key, trust, plan, now=None, replay_cache=None):  # noqa: A001
    """Verify and unwrap a protected envelope.

    Order of checks: certificate, decryption, signature, freshness, plan
    compliance, replay. The replay cache is only updated for envelopes that
    passed every other check.
    """
    now = now or utcnow()
    sec = env.security
    if sec is None:
        raise PolicyViolation("Security")
    if not sec.sender_certificate:
        raise UntrustedCertificate("missing")
    try:
        cert = pki.Certificate.from_xml(sec.sender_certificate)
    except HpisError:
        raise UntrustedCertificate("malformed") from None
    status = pki.verify(cert, trust, now)
    if not status.ok:
        raise UntrustedCertificate(status.value)
    if cert.subject != env.sender:
        raise UntrustedCertificate("SubjectMismatch")

    plain = env
    if env.is_encrypted:
        if receiver_key is None or sec.encrypted_key is None:
            raise DecryptFailure("no key material")
        try:
            pt = pki.hybrid_decrypt(
                pki.HybridCiphertext(sec.encrypted_key, env.encrypted.data),
                receiver_key, env.encrypted.algorithm)
        except pki.AlgorithmMismatch:
            raise DecryptFailure(f"unsupported cipher {env.encrypted.algorithm}") from None
        try:
            if canonical_body(pt) != pt:
                raise DecryptFailure("plaintext is not canonical")
        except (MalformedXml, NonCanonicalizable):
            raise DecryptFailure("plaintext is not XML") from None
        plain = replace(env, body=pt, encrypted=None)

    if sec.signature_algorithm != pki.SIG_ED25519 or not sec.signature:
        raise SignatureInvalid("missing or unsupported signature")
    if not pki.verify_sig(signing_input(plain), sec.signature, cert.public_key):
        raise SignatureInvalid(env.message_id)

    if abs((now - env.timestamp).total_seconds()) > plan.freshness_window:
        raise StaleTimestamp(f"{format_instant(env.timestamp)} vs {format_instant(now)}")

    verdict = check_compliance(env, plan)
    if not verdict.ok:
        raise PolicyViolation(", ".join(verdict.violations))

    if replay_cache is not None:
        replay_cache.check_and_add(env.message_id, now)
    return Opened(replace(plain, security=None), cert)
