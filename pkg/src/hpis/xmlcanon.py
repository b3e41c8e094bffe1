"""Canonical XML codec shared by envelopes, certificates, policies and reports.

The canonical form is a small profile, not W3C C14N:

* UTF-8, no XML declaration, no comments;
* whitespace-only text and tails are dropped, other text is kept verbatim;
* attributes sorted by name, values double-quoted;
* a default ``xmlns`` is written on the top element and wherever the
  namespace changes, never a prefix;
* empty elements are written as ``<a></a>``.
"""

import base64
import binascii
import re
import xml.etree.ElementTree as ET

from .errors import MalformedXml, NonCanonicalizable

_BAD_CHARS = re.compile("[\x00-\x08\x0b\x0c\x0e-\x1f\ufffe\uffff]")


def split_tag(tag):
    if tag[:1] == "{":
        ns, _, local = tag[1:].partition("}")
        return ns, local
    return "", tag


def qn(ns, local):
    return f"{{{ns}}}{local}" if ns else local


def _escape_text(s):
    return (s.replace("&", "&amp;").replace("<", "&lt;")
             .replace(">", "&gt;").replace("\r", "&#xD;"))


def _escape_attr(s):
    return (s.replace("&", "&amp;").replace("<", "&lt;").replace('"', "&quot;")
             .replace("\t", "&#x9;").replace("\n", "&#xA;").replace("\r", "&#xD;"))


def _significant(s):
    return s is not None and s.strip(" \t\r\n") != ""


def _check_chars(s):
    if _BAD_CHARS.search(s):
        raise NonCanonicalizable("character not allowed in XML")
    return s


def _write(elem, parent_ns, out):
    if elem.tag is ET.Comment:
        return
    if elem.tag is ET.ProcessingInstruction or not isinstance(elem.tag, str):
        raise NonCanonicalizable("unsupported node kind")
    ns, local = split_tag(elem.tag)
    if not local:
        raise NonCanonicalizable("empty element name")
    out.append("<" + local)
    if ns != parent_ns and not (parent_ns is None and ns == ""):
        out.append(f' xmlns="{_escape_attr(ns)}"')
    for name in sorted(elem.attrib):
        if name.startswith("{"):
            raise NonCanonicalizable(f"namespaced attribute {name}")
        value = _check_chars(str(elem.attrib[name]))
        out.append(f' {name}="{_escape_attr(value)}"')
    out.append(">")
    if _significant(elem.text):
        out.append(_escape_text(_check_chars(elem.text)))
    for child in elem:
        _write(child, ns, out)
        if _significant(child.tail):
            out.append(_escape_text(_check_chars(child.tail)))
    out.append(f"</{local}>")


def canonicalize(elem, parent_ns=None):
    """Serialize an element tree to canonical bytes.

    ``parent_ns`` is the namespace in scope around ``elem``; the default
    (None) always writes an explicit ``xmlns`` on the top element so the
    output is self-contained.
    """
    out = []
    _write(elem, parent_ns, out)
    return "".join(out).encode("utf-8")


def parse_xml(data):
    """Parse bytes into an element tree, mapping every failure to MalformedXml."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    if b"<!DOCTYPE" in data or b"<!ENTITY" in data:
        raise MalformedXml("DTDs are not accepted")
    parser = ET.XMLParser(target=ET.TreeBuilder(insert_pis=True))
    try:
        parser.feed(data)
        return parser.close()
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from None
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedXml(str(exc)) from None


def recanonicalize(data):
    return canonicalize(parse_xml(data))


# -- small builders / readers ----------------------------------------------

def sub(parent, ns, local, text=None, **attrs):
    el = ET.SubElement(parent, qn(ns, local), {k: str(v) for k, v in attrs.items()})
    if text is not None:
        el.text = str(text)
    return el


def element(ns, local, text=None, **attrs):
    el = ET.Element(qn(ns, local), {k: str(v) for k, v in attrs.items()})
    if text is not None:
        el.text = str(text)
    return el


def children(elem):
    """Element children, skipping comments and processing instructions."""
    return [c for c in elem if isinstance(c.tag, str)]


def text_of(elem):
    return (elem.text or "") if _significant(elem.text) else ""


def expect(elem, ns, local):
    if elem.tag != qn(ns, local):
        raise MalformedXml(f"expected {{{ns}}}{local}, got {elem.tag}")
    return elem


def b64(data):
    return base64.b64encode(data).decode("ascii")


def unb64(text):
    """Strict base64: rejects non-alphabet characters and non-canonical padding bits."""
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError, ValueError):
        raise MalformedXml("invalid base64") from None
    if base64.b64encode(raw).decode("ascii") != text:
        raise MalformedXml("non-canonical base64")
    return raw
