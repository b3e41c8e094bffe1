"""Desk-scale public key infrastructure.

One authority issues participant certificates directly from its root (no
intermediates). Keys are Ed25519 for signatures paired with X25519 for key
agreement; both halves are derived from one 32-byte seed so a key pair is
reproducible from a seeded ``random.Random``.

Certificates and revocation lists use the canonical XML profile under
``urn:hpis:cert:1`` rather than ASN.1.
"""

import enum
import functools
import hashlib
import random
from dataclasses import dataclass, field, replace
from datetime import timedelta

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey, Ed25519PublicKey)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey, X25519PublicKey)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM, ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import xmlcanon as xc
from .errors import (AlgorithmMismatch, DecryptFailure, DuplicateSerial,
                     MalformedXml, UnknownSerial, UntrustedCertificate)
from .timeutil import format_instant, parse_instant, utcnow

NS = "urn:hpis:cert:1"

KEY_ALG = "urn:hpis:key:ed25519-x25519"
SIG_ED25519 = "urn:hpis:alg:ed25519"
KT_X25519 = "urn:hpis:alg:x25519-hkdf-sha256"
ENC_AES256GCM = "urn:hpis:alg:aes256-gcm"
ENC_CHACHA20 = "urn:hpis:alg:chacha20-poly1305"

_CIPHERS = {ENC_AES256GCM: AESGCM, ENC_CHACHA20: ChaCha20Poly1305}

ROLES = ("hospital-pharmacy", "regional-depot", "national-supply", "supplier",
         "registry", "medical-staff", "patient")
AUTHORITY_ROLE = "authority"


def _rng(rng):
    return rng if rng is not None else random.SystemRandom()


# -- keys -------------------------------------------------------------------

@dataclass(frozen=True)
class PublicKey:
    algorithm: str
    data: bytes

    @property
    def key_id(self):
        return hashlib.sha256(self.algorithm.encode() + b"\0" + self.data).hexdigest()[:32]


@dataclass(frozen=True)
class PrivateKey:
    algorithm: str
    seed: bytes = field(repr=False)


@dataclass(frozen=True)
class KeyPair:
    public: PublicKey
    private: PrivateKey

    @property
    def algorithm(self):
        return self.public.algorithm


@functools.lru_cache(maxsize=256)
def _expand(seed):
    ed = Ed25519PrivateKey.from_private_bytes(seed)
    x = X25519PrivateKey.from_private_bytes(
        hashlib.sha256(b"hpis-x25519\0" + seed).digest())
    return ed, x


def _raw(pub):
    return pub.public_bytes(Encoding.Raw, PublicFormat.Raw)


def public_from_private(private):
    if private.algorithm != KEY_ALG:
        raise AlgorithmMismatch(private.algorithm)
    ed, x = _expand(private.seed)
    return PublicKey(KEY_ALG, _raw(ed.public_key()) + _raw(x.public_key()))


def keypair_from_seed(seed):
    if len(seed) != 32:
        raise ValueError("seed must be 32 bytes")
    private = PrivateKey(KEY_ALG, bytes(seed))
    return KeyPair(public_from_private(private), private)


def generate_keypair(rng=None):
    return keypair_from_seed(_rng(rng).randbytes(32))


def _private(key):
    return key.private if isinstance(key, KeyPair) else key


def _public(key):
    if isinstance(key, KeyPair):
        return key.public
    if isinstance(key, Certificate):
        return key.public_key
    return key


# -- signatures ---------------------------------------------------------------

def sign(data, private_key):
    priv = _private(private_key)
    if priv.algorithm != KEY_ALG:
        raise AlgorithmMismatch(priv.algorithm)
    ed, _ = _expand(priv.seed)
    return ed.sign(data)


def verify_sig(data, signature, public_key):
    pub = _public(public_key)
    if pub.algorithm != KEY_ALG:
        raise AlgorithmMismatch(pub.algorithm)
    if len(pub.data) != 64:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(pub.data[:32]).verify(signature, data)
        return True
    except (InvalidSignature, ValueError):
        return False


# -- hybrid encryption ------------------------------------------------------

@dataclass(frozen=True)
class HybridCiphertext:
    encrypted_key: bytes
    ciphertext: bytes


def _kek(shared, eph_pub, recv_pub):
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None,
                info=b"hpis-kek\0" + eph_pub + recv_pub).derive(shared)


def hybrid_encrypt(plaintext, receiver, cipher=ENC_AES256GCM, rng=None):
    """Encrypt under a fresh content key, itself wrapped for ``receiver``.

    ``encrypted_key`` = ephemeral X25519 public (32) | wrap nonce (12) |
    AES-GCM(kek, content key) (48). ``ciphertext`` = nonce (12) | AEAD output.
    """
    if cipher not in _CIPHERS:
        raise AlgorithmMismatch(cipher)
    pub = _public(receiver)
    if pub.algorithm != KEY_ALG:
        raise AlgorithmMismatch(pub.algorithm)
    r = _rng(rng)
    recv_x = pub.data[32:]
    eph = X25519PrivateKey.from_private_bytes(r.randbytes(32))
    eph_pub = _raw(eph.public_key())
    shared = eph.exchange(X25519PublicKey.from_public_bytes(recv_x))
    cek = r.randbytes(32)
    wrap_nonce = r.randbytes(12)
    wrapped = AESGCM(_kek(shared, eph_pub, recv_x)).encrypt(wrap_nonce, cek, eph_pub)
    nonce = r.randbytes(12)
    body = _CIPHERS[cipher](cek).encrypt(nonce, plaintext, None)
    return HybridCiphertext(eph_pub + wrap_nonce + wrapped, nonce + body)


def hybrid_decrypt(ct, receiver_private_key, cipher=ENC_AES256GCM):
    if cipher not in _CIPHERS:
        raise AlgorithmMismatch(cipher)
    priv = _private(receiver_private_key)
    if priv.algorithm != KEY_ALG:
        raise AlgorithmMismatch(priv.algorithm)
    ek, data = ct.encrypted_key, ct.ciphertext
    if len(ek) != 32 + 12 + 48 or len(data) < 12 + 16:
        raise DecryptFailure("truncated ciphertext")
    _, x = _expand(priv.seed)
    eph_pub = ek[:32]
    try:
        shared = x.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        kek = _kek(shared, eph_pub, _raw(x.public_key()))
        cek = AESGCM(kek).decrypt(ek[32:44], ek[44:], eph_pub)
        return _CIPHERS[cipher](cek).decrypt(data[:12], data[12:], None)
    except (InvalidTag, ValueError):
        raise DecryptFailure("authentication failed") from None


# -- certificates -----------------------------------------------------------

@dataclass(frozen=True)
class Certificate:
    serial: int
    subject: str
    role: str
    public_key: PublicKey
    issuer: str
    issuer_key_id: str
    not_before: object
    not_after: object
    issuer_signature: bytes = b""

    def _element(self, with_signature=True):
        root = xc.element(NS, "Certificate")
        xc.sub(root, NS, "Serial", self.serial)
        xc.sub(root, NS, "Subject", self.subject)
        xc.sub(root, NS, "Role", self.role)
        xc.sub(root, NS, "PublicKey", xc.b64(self.public_key.data),
               Algorithm=self.public_key.algorithm)
        xc.sub(root, NS, "Issuer", self.issuer, KeyId=self.issuer_key_id)
        xc.sub(root, NS, "NotBefore", format_instant(self.not_before))
        xc.sub(root, NS, "NotAfter", format_instant(self.not_after))
        if with_signature:
            xc.sub(root, NS, "IssuerSignature", xc.b64(self.issuer_signature),
                   Algorithm=SIG_ED25519)
        return root

    def tbs_bytes(self):
        """The bytes covered by the issuer signature."""
        return xc.canonicalize(self._element(with_signature=False))

    def to_element(self):
        return self._element()

    def to_xml(self):
        return xc.canonicalize(self._element())

    @classmethod
    def from_element(cls, root):
        xc.expect(root, NS, "Certificate")
        kids = xc.children(root)
        names = ["Serial", "Subject", "Role", "PublicKey", "Issuer",
                 "NotBefore", "NotAfter", "IssuerSignature"]
        if [xc.split_tag(k.tag) for k in kids] != [(NS, n) for n in names]:
            raise MalformedXml("certificate fields out of profile")
        f = dict(zip(names, kids))
        try:
            serial = int(xc.text_of(f["Serial"]))
        except ValueError:
            raise MalformedXml("bad serial") from None
        if str(serial) != xc.text_of(f["Serial"]):
            raise MalformedXml("non-canonical serial")
        alg = f["PublicKey"].get("Algorithm", "")
        # the signature algorithm sits outside the signed bytes, so only one value is accepted
        if f["IssuerSignature"].get("Algorithm") != SIG_ED25519:
            raise MalformedXml("unsupported issuer signature algorithm")
        return cls(
            serial=serial,
            subject=xc.text_of(f["Subject"]),
            role=xc.text_of(f["Role"]),
            public_key=PublicKey(alg, xc.unb64(xc.text_of(f["PublicKey"]))),
            issuer=xc.text_of(f["Issuer"]),
            issuer_key_id=f["Issuer"].get("KeyId", ""),
            not_before=parse_instant(xc.text_of(f["NotBefore"])),
            not_after=parse_instant(xc.text_of(f["NotAfter"])),
            issuer_signature=xc.unb64(xc.text_of(f["IssuerSignature"])),
        )

    @classmethod
    def from_xml(cls, data):
        return cls.from_element(xc.parse_xml(data))


class CertStatus(enum.Enum):
    VALID = "Valid"
    UNKNOWN_ISSUER = "UnknownIssuer"
    BAD_ISSUER_SIGNATURE = "BadIssuerSignature"
    NOT_YET_VALID = "NotYetValid"
    EXPIRED = "Expired"
    REVOKED = "Revoked"

    @property
    def ok(self):
        return self is CertStatus.VALID


class TrustStore:
    """Trusted roots keyed by key id plus a grow-only revocation set."""

    def __init__(self, roots=()):
        self._roots = {}
        self._revoked = set()
        for r in roots:
            self.add_root(r)

    def add_root(self, cert):
        self._roots[cert.public_key.key_id] = cert

    def root_for(self, key_id):
        return self._roots.get(key_id)

    @property
    def roots(self):
        return [self._roots[k] for k in sorted(self._roots)]

    @property
    def revoked(self):
        return frozenset(self._revoked)

    def add_revocation(self, issuer_key_id, serial):
        self._revoked.add((issuer_key_id, int(serial)))

    def is_revoked(self, cert):
        return (cert.issuer_key_id, cert.serial) in self._revoked

    def load_revocation_list(self, data):
        """Merge a signed revocation list; the signer must be a trusted root."""
        root = xc.parse_xml(data)
        xc.expect(root, NS, "RevocationList")
        key_id = root.get("IssuerKeyId", "")
        anchor = self._roots.get(key_id)
        if anchor is None:
            raise UntrustedCertificate("UnknownIssuer")
        kids = xc.children(root)
        if not kids or kids[-1].tag != xc.qn(NS, "Signature") or \
                kids[-1].get("Algorithm") != SIG_ED25519:
            raise MalformedXml("revocation list is unsigned")
        sig = xc.unb64(xc.text_of(kids[-1]))
        root.remove(kids[-1])
        if not verify_sig(xc.canonicalize(root), sig, anchor.public_key):
            raise MalformedXml("revocation list signature invalid")
        for k in kids[:-1]:
            self.add_revocation(key_id, int(k.get("serial")))


def verify(cert, trust, now=None):
    """First failing check wins: issuer, issuer signature, validity window, revocation."""
    now = now or utcnow()
    anchor = trust.root_for(cert.issuer_key_id)
    if anchor is None:
        return CertStatus.UNKNOWN_ISSUER
    if not verify_sig(cert.tbs_bytes(), cert.issuer_signature, anchor.public_key):
        return CertStatus.BAD_ISSUER_SIGNATURE
    if now < cert.not_before:
        return CertStatus.NOT_YET_VALID
    if now > cert.not_after:
        return CertStatus.EXPIRED
    if trust.is_revoked(cert):
        return CertStatus.REVOKED
    return CertStatus.VALID


class Authority:
    """Certificate authority state. issue/revoke must be externally serialized."""

    def __init__(self, name, keypair, root, next_serial=2, issued=None, revoked=None):
        self.name = name
        self.keypair = keypair
        self.root = root
        self.next_serial = next_serial
        self.issued = dict(issued or {root.serial: root.subject})
        self.revoked = set(revoked or ())

    @property
    def key_id(self):
        return self.keypair.public.key_id

    def _sign_cert(self, cert):
        return replace(cert, issuer_signature=sign(cert.tbs_bytes(), self.keypair))

    def issue(self, subject, role, public_key, not_before, not_after):
        if not not_before < not_after:
            raise ValueError("empty validity window")
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        serial = self.next_serial
        if serial in self.issued:
            raise DuplicateSerial(str(serial))
        cert = self._sign_cert(Certificate(
            serial=serial, subject=subject, role=role, public_key=public_key,
            issuer=self.name, issuer_key_id=self.key_id,
            not_before=not_before, not_after=not_after))
        self.issued[serial] = subject
        self.next_serial = serial + 1
        return cert

    def revoke(self, serial):
        if serial not in self.issued:
            raise UnknownSerial(str(serial))
        self.revoked.add(serial)
        return sorted(self.revoked)

    def trust_store(self):
        ts = TrustStore([self.root])
        for s in self.revoked:
            ts.add_revocation(self.key_id, s)
        return ts

    def revocation_list(self):
        root = xc.element(NS, "RevocationList", Issuer=self.name, IssuerKeyId=self.key_id)
        for s in sorted(self.revoked):
            xc.sub(root, NS, "Revoked", serial=s)
        sig = sign(xc.canonicalize(root), self.keypair)
        xc.sub(root, NS, "Signature", xc.b64(sig), Algorithm=SIG_ED25519)
        return xc.canonicalize(root)

    # Private state file: holds the root seed, keep it out of shared directories.
    def to_xml(self):
        root = xc.element(NS, "Authority", name=self.name, nextSerial=self.next_serial)
        xc.sub(root, NS, "PrivateKey", xc.b64(self.keypair.private.seed),
               Algorithm=self.keypair.private.algorithm)
        holder = xc.sub(root, NS, "Root")
        holder.append(self.root.to_element())
        for s in sorted(self.issued):
            xc.sub(root, NS, "Issued", serial=s, subject=self.issued[s])
        for s in sorted(self.revoked):
            xc.sub(root, NS, "Revoked", serial=s)
        return xc.canonicalize(root)

    @classmethod
    def from_xml(cls, data):
        root = xc.expect(xc.parse_xml(data), NS, "Authority")
        seed = xc.unb64(xc.text_of(root.find(xc.qn(NS, "PrivateKey"))))
        cert = Certificate.from_element(xc.children(root.find(xc.qn(NS, "Root")))[0])
        issued = {int(e.get("serial")): e.get("subject")
                  for e in root.findall(xc.qn(NS, "Issued"))}
        revoked = {int(e.get("serial")) for e in root.findall(xc.qn(NS, "Revoked"))}
        return cls(root.get("name"), keypair_from_seed(seed), cert,
                   int(root.get("nextSerial")), issued, revoked)


def create_authority(name, rng=None, now=None, lifetime=timedelta(days=3650)):
    """New authority with a self-signed root (serial 1, role ``authority``)."""
    now = (now or utcnow()).replace(microsecond=0)
    kp = generate_keypair(rng)
    root = Certificate(serial=1, subject=name, role=AUTHORITY_ROLE, public_key=kp.public,
                       issuer=name, issuer_key_id=kp.public.key_id,
                       not_before=now, not_after=now + lifetime)
    root = replace(root, issuer_signature=sign(root.tbs_bytes(), kp))
    return Authority(name, kp, root)


@dataclass(frozen=True)
class Identity:
    """A participant's certificate together with its key pair."""
    cert: Certificate
    keypair: KeyPair

    @property
    def participant_id(self):
        return self.cert.subject

    @property
    def role(self):
        return self.cert.role


def enroll(authority, subject, role, not_before, not_after, rng=None):
    kp = generate_keypair(rng)
    return Identity(authority.issue(subject, role, kp.public, not_before, not_after), kp)
