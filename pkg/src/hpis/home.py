"""On-disk layout under ``$HPIS_HOME`` (default ``~/.hpis``)::

    ca/authority.xml            authority state, including the root seed (private)
    ca/root.xml                 root certificate
    ca/crl.xml                  signed revocation list
    identities/<id>/cert.xml    participant certificate
    identities/<id>/key.xml     participant key seed (private)
    registry/                   registry store
"""

import os
from datetime import timedelta
from pathlib import Path

from . import pki
from . import xmlcanon as xc
from .errors import HpisError, MalformedXml
from .timeutil import utcnow


class HomeError(HpisError):
    pass


def default_home():
    return Path(os.environ.get("HPIS_HOME") or Path.home() / ".hpis")


def _write(path, data, private=False):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    if private:
        os.chmod(tmp, 0o600)
    os.replace(tmp, path)


def _safe_id(pid):
    if not pid or "/" in pid or pid.startswith("."):
        raise HomeError(f"unusable participant id {pid!r}")
    return pid


class Home:
    def __init__(self, root=None):
        self.root = Path(root) if root is not None else default_home()

    @property
    def ca_dir(self):
        return self.root / "ca"

    @property
    def registry_dir(self):
        return self.root / "registry"

    def identity_dir(self, pid):
        return self.root / "identities" / _safe_id(pid)

    # -- authority ----------------------------------------------------------

    def has_authority(self):
        return (self.ca_dir / "authority.xml").exists()

    def init_authority(self, name, days=3650, now=None):
        if self.has_authority():
            raise HomeError(f"an authority already exists in {self.ca_dir}")
        auth = pki.create_authority(name, now=now, lifetime=timedelta(days=days))
        self._save_authority(auth)
        return auth

    def authority(self):
        path = self.ca_dir / "authority.xml"
        if not path.exists():
            raise HomeError(f"no authority in {self.ca_dir}; run ca-init first")
        return pki.Authority.from_xml(path.read_bytes())

    def _save_authority(self, auth):
        _write(self.ca_dir / "authority.xml", auth.to_xml(), private=True)
        _write(self.ca_dir / "root.xml", auth.root.to_xml())
        _write(self.ca_dir / "crl.xml", auth.revocation_list())

    def issue(self, subject, role, days=365, now=None):
        auth = self.authority()
        if role not in pki.ROLES:
            raise HomeError(f"unknown role {role!r}")
        now = (now or utcnow()).replace(microsecond=0)
        ident = pki.enroll(auth, subject, role, now, now + timedelta(days=days))
        self._save_authority(auth)
        d = self.identity_dir(subject)
        _write(d / "cert.xml", ident.cert.to_xml())
        key = xc.element(pki.NS, "PrivateKey", xc.b64(ident.keypair.private.seed),
                         Algorithm=ident.keypair.private.algorithm)
        _write(d / "key.xml", xc.canonicalize(key), private=True)
        return ident

    def revoke(self, serial):
        auth = self.authority()
        auth.revoke(serial)
        self._save_authority(auth)

    def trust(self):
        """Trust store built only from public material (root + signed CRL)."""
        try:
            root = pki.Certificate.from_xml((self.ca_dir / "root.xml").read_bytes())
        except FileNotFoundError:
            raise HomeError(f"no root certificate in {self.ca_dir}; run ca-init first") from None
        ts = pki.TrustStore([root])
        crl = self.ca_dir / "crl.xml"
        if crl.exists():
            ts.load_revocation_list(crl.read_bytes())
        return ts

    # -- identities ---------------------------------------------------------

    def identity(self, pid):
        d = self.identity_dir(pid)
        try:
            cert = pki.Certificate.from_xml((d / "cert.xml").read_bytes())
            key = xc.parse_xml((d / "key.xml").read_bytes())
        except FileNotFoundError:
            raise HomeError(f"no identity for {pid!r}; run cert-issue first") from None
        if key.tag != xc.qn(pki.NS, "PrivateKey"):
            raise MalformedXml("key file")
        return pki.Identity(cert, pki.keypair_from_seed(xc.unb64(xc.text_of(key))))

    def identity_cert(self, pid):
        """A participant's public certificate only (what peers need for encryption)."""
        try:
            return pki.Certificate.from_xml((self.identity_dir(pid) / "cert.xml").read_bytes())
        except FileNotFoundError:
            raise HomeError(f"no certificate for {pid!r}") from None
