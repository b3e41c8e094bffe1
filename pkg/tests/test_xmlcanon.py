import xml.etree.ElementTree as ET

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpis import xmlcanon as xc
from hpis.errors import MalformedXml, NonCanonicalizable


def test_whitespace_variants_canonicalize_identically():
    a = b'<a xmlns="urn:x"><b k="1">t</b><c/></a>'
    b = b'<a xmlns="urn:x">\n  <b   k="1">t</b>\n  <c></c>\n</a>'
    assert xc.recanonicalize(a) == xc.recanonicalize(b)


def test_attributes_sorted_by_name():
    el = ET.Element("e")
    el.set("b", "2")
    el.set("a", "1")
    assert xc.canonicalize(el) == b'<e a="1" b="2"></e>'


def test_empty_elements_use_start_end_pair_and_comments_dropped():
    out = xc.recanonicalize(b"<?xml version='1.0'?><r><!-- note --><x/></r>")
    assert out == b"<r><x></x></r>"


def test_namespace_written_only_where_it_changes():
    root = xc.element("urn:a", "r")
    xc.sub(root, "urn:a", "same")
    xc.sub(root, "urn:b", "other")
    assert xc.canonicalize(root) == \
        b'<r xmlns="urn:a"><same></same><other xmlns="urn:b"></other></r>'


def test_escaping():
    el = xc.element("", "e", 'a<b & "c"', q='x"<&\n')
    assert xc.canonicalize(el) == b'<e q="x&quot;&lt;&amp;&#xA;">a&lt;b &amp; "c"</e>'


def test_processing_instruction_rejected():
    root = xc.parse_xml(b"<r><?pi data?></r>")
    with pytest.raises(NonCanonicalizable):
        xc.canonicalize(root)


def test_control_characters_rejected():
    with pytest.raises(NonCanonicalizable):
        xc.canonicalize(xc.element("", "e", "bad\x01"))


@pytest.mark.parametrize("data", [b"", b"<a>", b"<a></b>", b"\xff\xfe",
                                  b'<!DOCTYPE a [<!ENTITY x "y">]><a>&x;</a>'])
def test_malformed_input(data):
    with pytest.raises(MalformedXml):
        xc.parse_xml(data)


def test_base64_strictness():
    assert xc.unb64(xc.b64(b"\x00\x01")) == b"\x00\x01"
    for bad in ("AAE", "AAF=", "A A=", "@@@@"):
        with pytest.raises(MalformedXml):
            xc.unb64(bad)


names = st.sampled_from(["a", "b", "item", "Line", "x1"])
texts = st.text(st.characters(blacklist_categories=("Cs", "Cc")), max_size=8)


@st.composite
def trees(draw, depth=3):
    el = ET.Element(draw(st.sampled_from(["", "{urn:t}", "{urn:u}"])) + draw(names))
    for k in draw(st.lists(names, max_size=3, unique=True)):
        el.set(k, draw(texts))
    el.text = draw(st.one_of(st.none(), texts))
    if depth:
        for child in draw(st.lists(trees(depth=depth - 1), max_size=3)):
            child.tail = draw(st.one_of(st.none(), texts))
            el.append(child)
    return el


@settings(max_examples=300, deadline=None)
@given(trees())
def test_canonical_form_is_a_fixed_point(tree):
    once = xc.canonicalize(tree)
    assert xc.recanonicalize(once) == once
