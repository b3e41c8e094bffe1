import re
from datetime import datetime, timezone

from .errors import MalformedXml

_RFC3339 = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})(?:\.(\d{1,6}))?Z$")


def utcnow():
    return datetime.now(timezone.utc)


def format_instant(dt):
    """RFC 3339 in UTC with a ``Z`` suffix; fractional seconds only when nonzero."""
    dt = dt.astimezone(timezone.utc)
    base = dt.strftime("%Y-%m-%dT%H:%M:%S")
    if dt.microsecond:
        base += ".%06d" % dt.microsecond
    return base + "Z"


def parse_instant(text):
    m = _RFC3339.match(text)
    if not m:
        raise MalformedXml(f"bad instant {text!r}")
    frac = m.group(7)
    if frac is not None and (len(frac) != 6 or frac == "000000"):
        # only the exact form produced by format_instant is accepted
        raise MalformedXml(f"non-canonical instant {text!r}")
    try:
        return datetime(*(int(g) for g in m.groups()[:6]),
                        int(frac) if frac else 0, tzinfo=timezone.utc)
    except ValueError:
        raise MalformedXml(f"bad instant {text!r}") from None
