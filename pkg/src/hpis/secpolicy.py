"""Security policies: a six-assertion profile of WS-SecurityPolicy on top of
WS-Policy normal form and strict intersection.

Documents live under ``urn:hpis:policy:1``::

    <Policy xmlns="urn:hpis:policy:1">
      <ExactlyOne>
        <All>
          <SignedParts><Part>Header</Part><Part>Body</Part></SignedParts>
          <EncryptedParts><Part>Body</Part></EncryptedParts>
          <AlgorithmSuite>urn:hpis:suite:basic</AlgorithmSuite>
          <RequireClientCertificate/>
          <RequireTimestamp window="300"/>
          <SupportCompression/>
        </All>
      </ExactlyOne>
    </Policy>
"""

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple

from . import pki
from . import xmlcanon as xc
from .errors import BadParameters, MalformedXml, UnknownAssertion, Unsatisfiable

NS = "urn:hpis:policy:1"

SIGNED_PARTS = "SignedParts"
ENCRYPTED_PARTS = "EncryptedParts"
ALGORITHM_SUITE = "AlgorithmSuite"
REQUIRE_CLIENT_CERT = "RequireClientCertificate"
REQUIRE_TIMESTAMP = "RequireTimestamp"
SUPPORT_COMPRESSION = "SupportCompression"

KINDS = (SIGNED_PARTS, ENCRYPTED_PARTS, ALGORITHM_SUITE, REQUIRE_CLIENT_CERT,
         REQUIRE_TIMESTAMP, SUPPORT_COMPRESSION)
OPERATORS = ("Policy", "All", "ExactlyOne")

HEADER, BODY = "Header", "Body"
SIGNABLE = frozenset({HEADER, BODY})
ENCRYPTABLE = frozenset({BODY})

DEFAULT_WINDOW = 300


class Suite(NamedTuple):
    signature: str
    cipher: str
    key_transport: str


DEFAULT_SUITE = "urn:hpis:suite:basic"
SUITES = {
    DEFAULT_SUITE: Suite(pki.SIG_ED25519, pki.ENC_AES256GCM, pki.KT_X25519),
    "urn:hpis:suite:chacha": Suite(pki.SIG_ED25519, pki.ENC_CHACHA20, pki.KT_X25519),
}


@dataclass(frozen=True)
class Assertion:
    kind: str
    parts: frozenset = frozenset()
    suite: str = ""
    window: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnknownAssertion(self.kind)
        if self.kind in (SIGNED_PARTS, ENCRYPTED_PARTS):
            allowed = SIGNABLE if self.kind == SIGNED_PARTS else ENCRYPTABLE
            if not self.parts or not set(self.parts) <= allowed:
                raise BadParameters(f"{self.kind} parts {sorted(self.parts)}")
            object.__setattr__(self, "parts", frozenset(self.parts))
        if self.kind == ALGORITHM_SUITE and not self.suite:
            raise BadParameters("AlgorithmSuite needs a suite id")
        if self.kind == REQUIRE_TIMESTAMP and self.window <= 0:
            raise BadParameters("RequireTimestamp window must be positive")

    def sort_key(self):
        return (self.kind, tuple(sorted(self.parts)), self.suite, self.window)

    def __str__(self):
        if self.parts:
            return f"{self.kind}({','.join(sorted(self.parts))})"
        if self.suite:
            return f"{self.kind}({self.suite})"
        if self.window:
            return f"{self.kind}({self.window})"
        return self.kind


def signed(*parts):
    return Assertion(SIGNED_PARTS, frozenset(parts))


def encrypted(*parts):
    return Assertion(ENCRYPTED_PARTS, frozenset(parts))


def suite(suite_id):
    return Assertion(ALGORITHM_SUITE, suite=suite_id)


def timestamp(window=DEFAULT_WINDOW):
    return Assertion(REQUIRE_TIMESTAMP, window=window)


CLIENT_CERT = Assertion(REQUIRE_CLIENT_CERT)
COMPRESSION = Assertion(SUPPORT_COMPRESSION)


@dataclass(frozen=True)
class Operator:
    op: str
    children: tuple = ()


@dataclass(frozen=True)
class PolicyDocument:
    root: Operator


def alt_key(alt):
    return tuple(sorted(a.sort_key() for a in alt))


def kinds(alt):
    return frozenset(a.kind for a in alt)


@dataclass(frozen=True)
class NormalForm:
    """ExactlyOne over All; alternatives keep first-seen order, no duplicates."""
    alternatives: tuple = field(default_factory=tuple)

    def __post_init__(self):
        seen, out = set(), []
        for alt in self.alternatives:
            alt = frozenset(alt)
            if alt not in seen:
                seen.add(alt)
                out.append(alt)
        object.__setattr__(self, "alternatives", tuple(out))

    def __len__(self):
        return len(self.alternatives)

    def __bool__(self):
        return bool(self.alternatives)

    def multiset(self):
        return sorted(alt_key(a) for a in self.alternatives)

    def satisfiable(self):
        for alt in self.alternatives:
            try:
                derive_plan(alt)
                return True
            except Unsatisfiable:
                pass
        return False


# -- XML --------------------------------------------------------------------

def _parse_node(el):
    ns, local = xc.split_tag(el.tag)
    if ns != NS:
        raise UnknownAssertion(local)
    if local in OPERATORS:
        return Operator(local, tuple(_parse_node(c) for c in xc.children(el)))
    if local in (SIGNED_PARTS, ENCRYPTED_PARTS):
        parts = []
        for c in xc.children(el):
            if c.tag != xc.qn(NS, "Part"):
                raise BadParameters(f"unexpected {c.tag} in {local}")
            parts.append(xc.text_of(c).strip())
        return Assertion(local, frozenset(parts))
    if local == ALGORITHM_SUITE:
        return Assertion(local, suite=xc.text_of(el).strip())
    if local == REQUIRE_TIMESTAMP:
        raw = el.get("window", str(DEFAULT_WINDOW))
        try:
            window = int(raw)
        except ValueError:
            raise BadParameters(f"window {raw!r}") from None
        return Assertion(local, window=window)
    if local in (REQUIRE_CLIENT_CERT, SUPPORT_COMPRESSION):
        if xc.children(el):
            raise BadParameters(f"{local} takes no parameters")
        return Assertion(local)
    raise UnknownAssertion(local)


def parse_policy(data):
    """Strict parse: unknown elements raise UnknownAssertion."""
    el = data if not isinstance(data, (bytes, str)) else xc.parse_xml(data)
    if el.tag != xc.qn(NS, "Policy"):
        raise MalformedXml(f"policy root must be Policy, got {el.tag}")
    return PolicyDocument(_parse_node(el))


def _emit(node, parent):
    if isinstance(node, Operator):
        el = xc.sub(parent, NS, node.op) if parent is not None else xc.element(NS, node.op)
        for c in node.children:
            _emit(c, el)
        return el
    if node.kind in (SIGNED_PARTS, ENCRYPTED_PARTS):
        el = xc.sub(parent, NS, node.kind)
        # Header before Body, matching envelope order
        for p in sorted(node.parts, key=lambda p: (p != HEADER, p)):
            xc.sub(el, NS, "Part", p)
    elif node.kind == ALGORITHM_SUITE:
        xc.sub(parent, NS, node.kind, node.suite)
    elif node.kind == REQUIRE_TIMESTAMP:
        xc.sub(parent, NS, node.kind, window=node.window)
    else:
        xc.sub(parent, NS, node.kind)


def policy_element(doc):
    return _emit(doc.root, None)


def policy_to_xml(doc):
    return xc.canonicalize(policy_element(doc))


def to_document(nf):
    """Embed a normal form back into a document: Policy(ExactlyOne(All(...)...))."""
    alts = tuple(Operator("All", tuple(sorted(a, key=Assertion.sort_key)))
                 for a in nf.alternatives)
    return PolicyDocument(Operator("Policy", (Operator("ExactlyOne", alts),)))


def policy_of(*alternatives):
    """Convenience builder: each argument is one alternative (an iterable of assertions)."""
    return to_document(NormalForm(tuple(frozenset(a) for a in alternatives)))


# -- normal form --------------------------------------------------------------

def _alternatives(node):
    if isinstance(node, Assertion):
        return [frozenset({node})]
    if node.op == "ExactlyOne":
        out = []
        for c in node.children:
            out.extend(_alternatives(c))
        return out
    # Policy and All: cross product of the children's alternatives
    acc = [frozenset()]
    for c in node.children:
        acc = [x | y for x in acc for y in _alternatives(c)]
    return acc


def normalize(doc):
    root = doc.root if isinstance(doc, PolicyDocument) else doc
    return NormalForm(tuple(_alternatives(root)))


def _merge(x, y):
    by_kind = {}
    for a in itertools.chain(x, y):
        by_kind.setdefault(a.kind, []).append(a)
    out = set()
    for kind, items in by_kind.items():
        if kind in (SIGNED_PARTS, ENCRYPTED_PARTS):
            out.add(Assertion(kind, frozenset().union(*(a.parts for a in items))))
        elif kind == ALGORITHM_SUITE:
            suites = {a.suite for a in items}
            if len(suites) != 1:
                return None
            out.add(items[0])
        elif kind == REQUIRE_TIMESTAMP:
            out.add(Assertion(kind, window=min(a.window for a in items)))
        else:
            out.add(Assertion(kind))
    return frozenset(out)


def intersect(a, b):
    """Strict-mode intersection; an empty result means no compatible alternative."""
    out = []
    for x in a.alternatives:
        for y in b.alternatives:
            if kinds(x) != kinds(y):
                continue
            merged = _merge(x, y)
            if merged is not None:
                out.append(merged)
    return NormalForm(tuple(out))


# -- plans ------------------------------------------------------------------

@dataclass(frozen=True)
class ProtectionPlan:
    sign_parts: frozenset = frozenset({HEADER, BODY})
    encrypt_parts: frozenset = frozenset()
    suite: str = DEFAULT_SUITE
    require_client_cert: bool = False
    freshness_window: int = DEFAULT_WINDOW
    compression: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sign_parts", frozenset(self.sign_parts))
        object.__setattr__(self, "encrypt_parts", frozenset(self.encrypt_parts))
        if not self.encrypt_parts <= self.sign_parts:
            raise ValueError("sign_parts must cover encrypt_parts")

    @property
    def encrypts_body(self):
        return BODY in self.encrypt_parts

    @classmethod
    def sign_only(cls, **kw):
        return cls(sign_parts={HEADER, BODY}, encrypt_parts=set(), **kw)

    @classmethod
    def sign_encrypt(cls, **kw):
        return cls(sign_parts={HEADER, BODY}, encrypt_parts={BODY}, **kw)

    def describe(self):
        return (f"sign={','.join(sorted(self.sign_parts)) or '-'} "
                f"encrypt={','.join(sorted(self.encrypt_parts)) or '-'} "
                f"suite={self.suite} cert={int(self.require_client_cert)} "
                f"window={self.freshness_window} compress={int(self.compression)}")


def derive_plan(alt):
    sign, enc = set(), set()
    suites, windows = set(), []
    cert = compress = False
    for a in alt:
        if a.kind == SIGNED_PARTS:
            sign |= a.parts
        elif a.kind == ENCRYPTED_PARTS:
            enc |= a.parts
        elif a.kind == ALGORITHM_SUITE:
            suites.add(a.suite)
        elif a.kind == REQUIRE_TIMESTAMP:
            windows.append(a.window)
        elif a.kind == REQUIRE_CLIENT_CERT:
            cert = True
        elif a.kind == SUPPORT_COMPRESSION:
            compress = True
    if len(suites) > 1:
        raise Unsatisfiable(f"conflicting suites {sorted(suites)}")
    return ProtectionPlan(
        sign_parts=frozenset(sign | enc),
        encrypt_parts=frozenset(enc),
        suite=suites.pop() if suites else DEFAULT_SUITE,
        require_client_cert=cert,
        freshness_window=min(windows) if windows else DEFAULT_WINDOW,
        compression=compress,
    )


def negotiate(a, b):
    """Intersect two policies and derive a plan from the first usable alternative.

    Alternatives are tried in canonical order so both ends of a channel pick
    the same one whichever side computes it. Returns ``(plan, intersection)``; ``plan`` is None when the intersection
    offers nothing usable, which callers treat as a handshake refusal.
    """
    na = a if isinstance(a, NormalForm) else normalize(a)
    nb = b if isinstance(b, NormalForm) else normalize(b)
    common = intersect(na, nb)
    for alt in sorted(common.alternatives, key=alt_key):
        try:
            return derive_plan(alt), common
        except Unsatisfiable:
            continue
    return None, common


# -- compliance ---------------------------------------------------------------

@dataclass(frozen=True)
class Compliance:
    violations: tuple = ()

    @property
    def ok(self):
        return not self.violations


def check_compliance(env, plan):
    """Structural check of an envelope against a plan; never raises.

    Cryptographic validity is not examined here (see ``envelope.open``).
    """
    v = []
    sec = env.security
    spec = SUITES.get(plan.suite)
    if plan.sign_parts and (sec is None or not sec.signature):
        v.append(str(Assertion(SIGNED_PARTS, plan.sign_parts)))
    if plan.encrypts_body and not env.is_encrypted:
        v.append(str(Assertion(ENCRYPTED_PARTS, plan.encrypt_parts)))
    if env.is_encrypted and (sec is None or sec.encrypted_key is None):
        v.append("EncryptedKey")
    if plan.require_client_cert and (sec is None or not sec.sender_certificate):
        v.append(REQUIRE_CLIENT_CERT)
    if spec is None:
        v.append(f"{ALGORITHM_SUITE}({plan.suite})")
    elif sec is not None:
        algs_ok = sec.signature_algorithm == spec.signature
        if env.is_encrypted:
            algs_ok = (algs_ok and env.encrypted.algorithm == spec.cipher
                       and sec.encrypted_key is not None
                       and sec.encrypted_key_algorithm == spec.key_transport)
        if not algs_ok:
            v.append(f"{ALGORITHM_SUITE}({plan.suite})")
    if env.timestamp is None:
        v.append(REQUIRE_TIMESTAMP)
    return Compliance(tuple(v))
