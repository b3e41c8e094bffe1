import itertools
import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpis import envelope as env_mod
from hpis import secpolicy as sp
from hpis.errors import BadParameters, MalformedXml, UnknownAssertion
from tests.conftest import NOW
from tests.policygen import VOCAB, random_document

P = f'xmlns="{sp.NS}"'


def test_parse_simple_policy():
    doc = sp.parse_policy(f"<Policy {P}><All><SignedParts><Part>Body</Part></SignedParts></All></Policy>")
    assert doc.root == sp.Operator("Policy", (sp.Operator("All", (sp.signed("Body"),)),))


def test_unknown_assertion_is_strict():
    with pytest.raises(UnknownAssertion, match="Foo"):
        sp.parse_policy(f"<Policy {P}><Foo/></Policy>")


@pytest.mark.parametrize("body", ["<SignedParts></SignedParts>",
                                  "<EncryptedParts><Part>Header</Part></EncryptedParts>",
                                  '<RequireTimestamp window="0"/>',
                                  '<RequireTimestamp window="x"/>',
                                  "<AlgorithmSuite></AlgorithmSuite>"])
def test_bad_parameters(body):
    with pytest.raises(BadParameters):
        sp.parse_policy(f"<Policy {P}>{body}</Policy>")


def test_root_must_be_policy():
    with pytest.raises(MalformedXml):
        sp.parse_policy(f"<All {P}/>")


def test_normalize_single_alternative():
    a, b = sp.signed("Body"), sp.CLIENT_CERT
    nf = sp.normalize(sp.PolicyDocument(sp.Operator("Policy", (sp.Operator("All", (a, b)),))))
    assert nf.alternatives == (frozenset({a, b}),)


def test_normalize_cross_product_matches_brute_force():
    a, b, c = sp.signed("Body"), sp.encrypted("Body"), sp.CLIENT_CERT
    doc = sp.Operator("All", (sp.Operator("ExactlyOne", (a, b)), sp.Operator("ExactlyOne", (c,))))
    expected = {frozenset(x) for x in itertools.product([a, b], [c])}
    assert set(sp.normalize(doc).alternatives) == expected


def test_empty_operators():
    assert len(sp.normalize(sp.Operator("ExactlyOne", ()))) == 0
    assert sp.normalize(sp.Operator("All", ())).alternatives == (frozenset(),)


def test_duplicate_assertions_collapse():
    a = sp.signed("Body")
    nf = sp.normalize(sp.Operator("All", (a, sp.signed("Body"))))
    assert nf.alternatives == (frozenset({a}),)


def test_intersect_examples():
    basic = sp.suite("urn:hpis:suite:basic")
    x = sp.NormalForm((frozenset({sp.signed("Body"), basic}),))
    y = sp.NormalForm((frozenset({sp.signed("Header"), basic}),))
    assert sp.intersect(x, y).alternatives == (frozenset({sp.signed("Header", "Body"), basic}),)
    assert sp.intersect(x, x).alternatives == x.alternatives
    s = sp.NormalForm((frozenset({sp.signed("Body")}),))
    e = sp.NormalForm((frozenset({sp.encrypted("Body")}),))
    assert not sp.intersect(s, e)
    chacha = sp.NormalForm((frozenset({sp.signed("Body"), sp.suite("urn:hpis:suite:chacha")}),))
    assert not sp.intersect(x, chacha)


def test_intersect_takes_min_window():
    a = sp.NormalForm((frozenset({sp.timestamp(120)}),))
    b = sp.NormalForm((frozenset({sp.timestamp(300)}),))
    assert sp.intersect(a, b).alternatives == (frozenset({sp.timestamp(120)}),)


@pytest.mark.parametrize("alt,fields", [
    ({sp.signed("Body")}, dict(sign_parts={"Body"}, encrypt_parts=set())),
    ({sp.encrypted("Body")}, dict(sign_parts={"Body"}, encrypt_parts={"Body"})),
    ({sp.signed("Header", "Body"), sp.encrypted("Body"), sp.timestamp(120)},
     dict(sign_parts={"Header", "Body"}, encrypt_parts={"Body"}, freshness_window=120)),
    ({sp.CLIENT_CERT, sp.COMPRESSION, sp.suite("urn:hpis:suite:chacha")},
     dict(sign_parts=set(), require_client_cert=True, compression=True,
          suite="urn:hpis:suite:chacha")),
])
def test_derive_plan_mapping(alt, fields):
    plan = sp.derive_plan(frozenset(alt))
    for k, v in fields.items():
        assert getattr(plan, k) == v, k
    if "suite" not in fields:
        assert plan.suite == sp.DEFAULT_SUITE
    if "freshness_window" not in fields:
        assert plan.freshness_window == sp.DEFAULT_WINDOW


def test_negotiate_is_side_independent():
    rng = random.Random(3)
    for _ in range(200):
        a, b = random_document(rng), random_document(rng)
        assert sp.negotiate(a, b)[0] == sp.negotiate(b, a)[0]


def test_xml_round_trip_preserves_normal_form():
    rng = random.Random(4)
    for _ in range(100):
        doc = random_document(rng)
        again = sp.parse_policy(sp.policy_to_xml(doc))
        assert sp.normalize(again).multiset() == sp.normalize(doc).multiset()


def _protected(plan, world):
    alice = world.identity("alice", "hospital-pharmacy")
    bob = world.identity("bob", "regional-depot")
    e = env_mod.new_envelope("alice", "bob", "urn:hpis:order:submit",
                             b'<Ping xmlns="urn:t"></Ping>', now=NOW, rng=world.rng)
    return env_mod.protect(e, plan, alice.keypair, alice.cert, bob.cert, world.rng)


def test_compliance_examples(world):
    plan = sp.ProtectionPlan.sign_encrypt(require_client_cert=True)
    good = _protected(plan, world)
    assert sp.check_compliance(good, plan).ok
    signed_only = _protected(sp.ProtectionPlan.sign_only(), world)
    assert "EncryptedParts(Body)" in sp.check_compliance(signed_only, plan).violations
    no_cert = replace(signed_only, security=replace(signed_only.security, sender_certificate=b""))
    assert sp.REQUIRE_CLIENT_CERT in sp.check_compliance(
        no_cert, sp.ProtectionPlan.sign_only(require_client_cert=True)).violations


alternatives = st.frozensets(st.sampled_from(VOCAB), max_size=4)
forms = st.lists(alternatives, max_size=3).map(lambda alts: sp.NormalForm(tuple(alts)))


@settings(max_examples=300, deadline=None)
@given(forms, forms)
def test_intersect_commutes(a, b):
    assert sp.intersect(a, b).multiset() == sp.intersect(b, a).multiset()


@settings(max_examples=300, deadline=None)
@given(forms)
def test_normalize_is_idempotent(a):
    assert sp.normalize(sp.to_document(a)).multiset() == a.multiset()


@settings(max_examples=300, deadline=None)
@given(forms)
def test_self_intersection_satisfiable_iff_satisfiable(a):
    assert sp.intersect(a, a).satisfiable() == a.satisfiable()
