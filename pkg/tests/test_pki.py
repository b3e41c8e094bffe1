import random
from dataclasses import replace
from datetime import timedelta

import pytest

from hpis import pki
from hpis.errors import DecryptFailure, UnknownSerial
from tests.conftest import NOW

S = pki.CertStatus


def test_root_is_self_signed_and_valid(world):
    root = world.authority.root
    assert root.role == pki.AUTHORITY_ROLE
    assert pki.verify(root, world.trust, NOW) is S.VALID


def test_authorities_with_same_name_are_distinct():
    a = pki.create_authority("ca", random.Random(1), NOW)
    b = pki.create_authority("ca", random.Random(2), NOW)
    assert a.key_id != b.key_id
    ident = pki.enroll(a, "x", "supplier", NOW, NOW + timedelta(days=1), random.Random(3))
    assert pki.verify(ident.cert, b.trust_store(), NOW) is S.UNKNOWN_ISSUER


def test_issued_cert_preserves_subject_and_role(world):
    c = world.identity("hopital-rabat-1", "hospital-pharmacy").cert
    assert (c.subject, c.role) == ("hopital-rabat-1", "hospital-pharmacy")
    assert pki.verify(c, world.trust, NOW) is S.VALID
    assert pki.Certificate.from_xml(c.to_xml()) == c


def test_serials_strictly_increase(world):
    serials = [world.identity(f"p{i}").cert.serial for i in range(100)]
    assert all(a < b for a, b in zip(serials, serials[1:]))


def test_validity_window(world):
    c = world.identity("d").cert
    assert pki.verify(c, world.trust, c.not_after + timedelta(seconds=1)) is S.EXPIRED
    assert pki.verify(c, world.trust, c.not_before - timedelta(seconds=1)) is S.NOT_YET_VALID


def test_revocation_affects_only_its_target_and_is_idempotent(world):
    certs = [world.identity(f"h{i}").cert for i in range(3)]
    world.authority.revoke(certs[1].serial)
    world.authority.revoke(certs[1].serial)
    trust = world.authority.trust_store()
    assert [pki.verify(c, trust, NOW) for c in certs] == [S.VALID, S.REVOKED, S.VALID]
    # revoked stays revoked later on too
    assert pki.verify(certs[1], trust, NOW + timedelta(days=100)) is S.REVOKED
    with pytest.raises(UnknownSerial):
        world.authority.revoke(9999)


def test_signed_revocation_list_round_trip(world):
    c = world.identity("x").cert
    world.authority.revoke(c.serial)
    ts = pki.TrustStore([world.authority.root])
    ts.load_revocation_list(world.authority.revocation_list())
    assert pki.verify(c, ts, NOW) is S.REVOKED


@pytest.mark.parametrize("field,value", [("subject", "mallory"), ("role", "supplier"),
                                         ("serial", 77), ("issuer", "other"),
                                         ("not_after", NOW + timedelta(days=9999))])
def test_altered_field_breaks_issuer_signature(world, field, value):
    c = world.identity("victim", "hospital-pharmacy").cert
    assert pki.verify(replace(c, **{field: value}), world.trust, NOW) is S.BAD_ISSUER_SIGNATURE


def test_authority_state_round_trip(world):
    world.identity("a")
    again = pki.Authority.from_xml(world.authority.to_xml())
    assert again.to_xml() == world.authority.to_xml()


def test_signature_key_matrix():
    rng = random.Random(5)
    keys = [pki.generate_keypair(rng) for _ in range(3)]
    msg = b"order 42"
    for i, signer in enumerate(keys):
        sig = pki.sign(msg, signer)
        for j, checker in enumerate(keys):
            assert pki.verify_sig(msg, sig, checker) is (i == j)
        flipped = bytes([msg[0] ^ 1]) + msg[1:]
        assert not pki.verify_sig(flipped, sig, signer)
        assert not pki.verify_sig(msg, bytes([sig[0] ^ 1]) + sig[1:], signer)


@pytest.mark.parametrize("cipher", [pki.ENC_AES256GCM, pki.ENC_CHACHA20])
def test_hybrid_round_trip_and_wrong_key_matrix(cipher):
    rng = random.Random(9)
    keys = [pki.generate_keypair(rng) for _ in range(3)]
    for n in (0, 1, 17, 4096):
        pt = rng.randbytes(n)
        for i, k in enumerate(keys):
            ct = pki.hybrid_encrypt(pt, k.public, cipher, rng)
            for j, other in enumerate(keys):
                if i == j:
                    assert pki.hybrid_decrypt(ct, other, cipher) == pt
                else:
                    with pytest.raises(DecryptFailure):
                        pki.hybrid_decrypt(ct, other, cipher)


def test_hybrid_encryption_is_randomized_and_tamper_evident():
    kp = pki.generate_keypair(random.Random(1))
    a = pki.hybrid_encrypt(b"same", kp.public)
    b = pki.hybrid_encrypt(b"same", kp.public)
    assert a.ciphertext != b.ciphertext and a.encrypted_key != b.encrypted_key
    bad = pki.HybridCiphertext(a.encrypted_key, a.ciphertext[:-1] + bytes([a.ciphertext[-1] ^ 1]))
    with pytest.raises(DecryptFailure):
        pki.hybrid_decrypt(bad, kp)
