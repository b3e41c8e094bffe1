"""Prescription data integration and the consumption-indicator warehouse.

Chain: source adapters -> canonical prescription XML -> extract -> transform
(ontology normalization, facility->region rules, quarantine) -> load -> query.

Canonical prescription file (``urn:hpis:rx:1``)::

    <Prescriptions source="S">
      <Prescription id="" facility="" region="" date="YYYY-MM-DD" term="" qty="" patient=""/>
    </Prescriptions>

Source mapping file (``urn:hpis:rx:mapping:1``); ``column`` is a 0-based
index or a header name for CSV, ``path`` is ``@attr`` or a child element
name for XML sources::

    <SourceMapping source="S" format="csv" delimiter=";" header="false"
                   dateFormat="%Y-%m-%d" region="R1">
      <Field name="record_id" column="0"/> ...
    </SourceMapping>
    <SourceMapping source="S" format="xml" record="Ordonnance" dateFormat="%d/%m/%Y">
      <Field name="record_id" path="@num"/> ...
    </SourceMapping>

Warehouse directory (tab-separated, header row, ``\\n`` line ends)::

    drug.tsv    drug_key  iri
    region.tsv  region_key  region
    period.tsv  period_key  year  month
    fact.tsv    source_id  record_id  drug_key  region_key  period_key  facility  quantity
"""

import csv
import io
import logging
import os
import re
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

from . import xmlcanon as xc
from .errors import (BadPeriodRange, ConflictingFact, HpisError, MalformedXml,
                     UnknownConcept, UnknownSourceFormat, UnknownTerm,
                     UnreadableSource, WarehouseLocked)

log = logging.getLogger(__name__)

NS = "urn:hpis:rx:1"
MAPPING_NS = "urn:hpis:rx:mapping:1"
RULES_NS = "urn:hpis:rx:rules:1"

FIELDS = ("record_id", "facility", "date", "term", "qty", "patient")
FORMATS = ("csv", "xml")


@dataclass(frozen=True)
class PrescriptionRecord:
    source_id: str
    record_id: str
    facility: str
    region: str
    date: str            # ISO calendar date
    drug_term: str
    quantity: int
    patient_ref: str

    @property
    def natural_key(self):
        return (self.source_id, self.record_id)

    def to_element(self):
        return xc.element(NS, "Prescription", id=self.record_id, facility=self.facility,
                          region=self.region, date=self.date, term=self.drug_term,
                          qty=self.quantity, patient=self.patient_ref)


@dataclass(frozen=True)
class QuarantineEntry:
    raw: bytes
    reason: str
    stage: str
    source_id: str = ""


@dataclass
class SourceDescriptor:
    source_id: str
    format: str
    mapping: dict
    path: str = None
    data: bytes = None

    def read(self):
        if self.data is not None:
            return self.data
        try:
            return Path(self.path).read_bytes()
        except (OSError, TypeError) as exc:
            raise UnreadableSource(f"{self.source_id}: {exc}") from None


def load_mapping(data, path=None):
    """Parse a SourceMapping document into a descriptor (``path`` names the source data)."""
    root = xc.parse_xml(data)
    xc.expect(root, MAPPING_NS, "SourceMapping")
    fmt = root.get("format", "")
    fields = {}
    for f in xc.children(root):
        xc.expect(f, MAPPING_NS, "Field")
        fields[f.get("name")] = f.get("column") if fmt == "csv" else f.get("path")
    mapping = {
        "fields": fields,
        "delimiter": root.get("delimiter", ","),
        "header": root.get("header", "false") == "true",
        "date_format": root.get("dateFormat", "%Y-%m-%d"),
        "record": root.get("record", ""),
        "region": root.get("region", ""),
    }
    return SourceDescriptor(root.get("source", ""), fmt, mapping, path=path)


def load_rules(data):
    """facility -> region table from a Rules document."""
    root = xc.parse_xml(data)
    xc.expect(root, RULES_NS, "Rules")
    table = {}
    for f in xc.children(root):
        xc.expect(f, RULES_NS, "Facility")
        table[f.get("id")] = f.get("region")
    return Rules(table, root.get("version", ""))


@dataclass(frozen=True)
class Rules:
    facility_region: dict
    version: str = ""


# -- integrate ----------------------------------------------------------------

@dataclass
class IntegrationResult:
    files: dict = field(default_factory=dict)       # source_id -> canonical bytes
    quarantine: list = field(default_factory=list)
    rows: dict = field(default_factory=dict)        # source_id -> raw row count


def _normalize_row(values, mapping, source_id):
    """Raw field dict -> PrescriptionRecord, or a quarantine reason string."""
    for name in FIELDS:
        if not (values.get(name) or "").strip():
            return f"MissingField:{name}"
    raw_qty = values["qty"].strip()
    if not re.fullmatch(r"[0-9]+", raw_qty) or int(raw_qty) <= 0:
        return "BadQuantity"
    try:
        date = datetime.strptime(values["date"].strip(), mapping.get("date_format", "%Y-%m-%d"))
    except ValueError:
        return "BadDate"
    region = (values.get("region") or mapping.get("region") or "").strip()
    return PrescriptionRecord(source_id, values["record_id"].strip(), values["facility"].strip(),
                              region, date.strftime("%Y-%m-%d"), values["term"].strip(),
                              int(raw_qty), values["patient"].strip())


def _csv_rows(desc, raw):
    m = desc.mapping
    try:
        text = raw.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise UnreadableSource(f"{desc.source_id}: {exc}") from None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    reader = csv.reader(lines, delimiter=m.get("delimiter", ","))
    rows = list(reader)
    header = None
    if m.get("header") and rows:
        header, rows, lines = rows[0], rows[1:], lines[1:]
    cols = dict(m["fields"])
    for name, col in cols.items():
        if isinstance(col, str) and not col.isdigit():
            if header is None or col not in header:
                raise UnreadableSource(f"{desc.source_id}: no column {col!r}")
            cols[name] = header.index(col)
        else:
            cols[name] = int(col)
    for line, row in zip(lines, rows):
        values = {name: (row[i] if i < len(row) else "") for name, i in cols.items()}
        yield line.encode("utf-8"), values


def _xml_value(el, path):
    if path.startswith("@"):
        return el.get(path[1:], "")
    child = el.find(path) if "{" in path else None
    if child is None:
        for c in xc.children(el):
            if xc.split_tag(c.tag)[1] == path:
                child = c
                break
    return xc.text_of(child) if child is not None else ""


def _xml_rows(desc, raw):
    try:
        root = xc.parse_xml(raw)
    except MalformedXml as exc:
        raise UnreadableSource(f"{desc.source_id}: {exc}") from None
    record_tag = desc.mapping.get("record", "")
    for el in xc.children(root):
        if xc.split_tag(el.tag)[1] != record_tag:
            continue
        values = {name: _xml_value(el, path) for name, path in desc.mapping["fields"].items()}
        yield xc.canonicalize(el), values


def integrate_source(desc):
    """One source -> (canonical bytes, quarantine entries, raw row count)."""
    if desc.format not in FORMATS:
        raise UnknownSourceFormat(desc.format)
    raw = desc.read()
    rows = _csv_rows(desc, raw) if desc.format == "csv" else _xml_rows(desc, raw)
    root = xc.element(NS, "Prescriptions", source=desc.source_id)
    quarantine, count = [], 0
    for raw_row, values in rows:
        count += 1
        rec = _normalize_row(values, desc.mapping, desc.source_id)
        if isinstance(rec, str):
            quarantine.append(QuarantineEntry(raw_row, rec, "integrate", desc.source_id))
        else:
            root.append(rec.to_element())
    return xc.canonicalize(root), quarantine, count


def integrate(sources, out_dir=None):
    if not sources:
        raise UnreadableSource("no sources given")
    result = IntegrationResult()
    for desc in sources:
        data, q, count = integrate_source(desc)
        result.files[desc.source_id] = data
        result.quarantine.extend(q)
        result.rows[desc.source_id] = count
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / f"{desc.source_id}.xml").write_bytes(data)
    return result


# -- extract ------------------------------------------------------------------

@dataclass
class ExtractResult:
    records: list
    duplicates: list


def parse_canonical(data):
    root = xc.parse_xml(data)
    xc.expect(root, NS, "Prescriptions")
    source = root.get("source", "")
    out = []
    for el in xc.children(root):
        xc.expect(el, NS, "Prescription")
        try:
            qty = int(el.get("qty", ""))
        except ValueError:
            raise MalformedXml(f"bad qty in {source}/{el.get('id')}") from None
        out.append(PrescriptionRecord(source, el.get("id", ""), el.get("facility", ""),
                                      el.get("region", ""), el.get("date", ""),
                                      el.get("term", ""), qty, el.get("patient", "")))
    return out


def extract(files):
    """Records from canonical files in order; repeated natural keys keep the first."""
    seen, records, dups = set(), [], []
    for f in files:
        data = f if isinstance(f, (bytes, bytearray)) else Path(f).read_bytes()
        for rec in parse_canonical(data):
            if rec.natural_key in seen:
                log.warning("duplicate prescription %s/%s skipped", *rec.natural_key)
                dups.append(rec.natural_key)
                continue
            seen.add(rec.natural_key)
            records.append(rec)
    return ExtractResult(records, dups)


# -- transform ------------------------------------------------------------------

@dataclass(frozen=True)
class WarehouseFact:
    drug: str
    region: str
    year: int
    month: int
    facility: str
    quantity: int
    source_id: str
    record_id: str

    @property
    def natural_key(self):
        return (self.source_id, self.record_id)

    @property
    def period(self):
        return (self.year, self.month)


@dataclass
class TransformResult:
    facts: list
    quarantine: list


def transform(records, ontology, rules):
    facts, quarantine = [], []
    for rec in records:
        raw = xc.canonicalize(rec.to_element())
        try:
            drug = ontology.normalize_term(rec.drug_term)
        except UnknownTerm:
            quarantine.append(QuarantineEntry(raw, "UnknownTerm", "transform", rec.source_id))
            continue
        region = rules.facility_region.get(rec.facility)
        if not region:
            quarantine.append(QuarantineEntry(raw, "UnmappedFacility", "transform",
                                              rec.source_id))
            continue
        try:
            d = datetime.strptime(rec.date, "%Y-%m-%d")
        except ValueError:
            quarantine.append(QuarantineEntry(raw, "BadDate", "transform", rec.source_id))
            continue
        if rec.quantity <= 0:
            quarantine.append(QuarantineEntry(raw, "BadQuantity", "transform", rec.source_id))
            continue
        facts.append(WarehouseFact(drug, region, d.year, d.month, rec.facility, rec.quantity,
                                   rec.source_id, rec.record_id))
    return TransformResult(facts, quarantine)


# -- warehouse --------------------------------------------------------------------

def _read_tsv(path):
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter="\t", lineterminator="\n"))
    return rows[1:]


def _write_tsv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue(), encoding="utf-8")
    os.replace(tmp, path)


class Warehouse:
    """Star-schema fact store on disk; one writer at a time (lock file)."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = None
        self.facts = {}

    def open(self):
        self.path.mkdir(parents=True, exist_ok=True)
        lock = self.path / "warehouse.lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise WarehouseLocked(str(lock)) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        self._lock = lock
        try:
            self._read()
        except Exception:
            self.close()
            raise
        return self

    def close(self):
        if self._lock is not None:
            self._lock.unlink(missing_ok=True)
            self._lock = None

    def __enter__(self):
        return self.open() if self._lock is None else self

    def __exit__(self, *exc):
        self.close()

    def _read(self):
        drugs = {k: iri for k, iri in _read_tsv(self.path / "drug.tsv")}
        regions = {k: r for k, r in _read_tsv(self.path / "region.tsv")}
        periods = {k: (int(y), int(m)) for k, y, m in _read_tsv(self.path / "period.tsv")}
        self.facts = {}
        for src, rid, dk, rk, pk, facility, qty in _read_tsv(self.path / "fact.tsv"):
            y, m = periods[pk]
            f = WarehouseFact(drugs[dk], regions[rk], y, m, facility, int(qty), src, rid)
            self.facts[f.natural_key] = f

    def _write(self):
        drug_keys, region_keys, period_keys = {}, {}, {}
        rows = []
        for f in self.facts.values():
            dk = drug_keys.setdefault(f.drug, str(len(drug_keys) + 1))
            rk = region_keys.setdefault(f.region, str(len(region_keys) + 1))
            pk = period_keys.setdefault(f.period, str(len(period_keys) + 1))
            rows.append([f.source_id, f.record_id, dk, rk, pk, f.facility, str(f.quantity)])
        _write_tsv(self.path / "drug.tsv", ["drug_key", "iri"],
                   [[k, iri] for iri, k in drug_keys.items()])
        _write_tsv(self.path / "region.tsv", ["region_key", "region"],
                   [[k, r] for r, k in region_keys.items()])
        _write_tsv(self.path / "period.tsv", ["period_key", "year", "month"],
                   [[k, str(y), str(m)] for (y, m), k in period_keys.items()])
        _write_tsv(self.path / "fact.tsv", ["source_id", "record_id", "drug_key", "region_key",
                                            "period_key", "facility", "quantity"], rows)

    def snapshot(self):
        """Bytes of every table, for state comparisons."""
        return {p.name: p.read_bytes() for p in sorted(self.path.glob("*.tsv"))}


@dataclass
class LoadResult:
    inserted: int
    skipped: int


def load(facts, warehouse):
    """Upsert by natural key. Conflicts abort the whole batch before any write."""
    if warehouse._lock is None:
        raise HpisError("warehouse is not open")
    decisions, staged = [], {}
    for f in facts:
        existing = warehouse.facts.get(f.natural_key) or staged.get(f.natural_key)
        if existing is None:
            staged[f.natural_key] = f
            decisions.append(True)
        elif existing == f:
            decisions.append(False)
        else:
            raise ConflictingFact(f.natural_key)
    if staged:
        warehouse.facts.update(staged)
        warehouse._write()
    elif not (warehouse.path / "fact.tsv").exists():
        warehouse._write()
    inserted = sum(decisions)
    return LoadResult(inserted, len(decisions) - inserted)


def parse_period(p):
    if isinstance(p, tuple):
        y, m = p
    else:
        mt = re.fullmatch(r"(\d{4})-(\d{2})", str(p))
        if not mt:
            raise BadPeriodRange(f"bad period {p!r}")
        y, m = int(mt.group(1)), int(mt.group(2))
    if not 1 <= m <= 12:
        raise BadPeriodRange(f"bad month in {p!r}")
    return (y, m)


def consumption_indicator(warehouse, ontology, drug_concept, region, period_from, period_to):
    """Total quantity for a concept (and everything it subsumes) in a region and period range.

    ``region=None`` sums over all regions.
    """
    if drug_concept not in ontology.concepts:
        raise UnknownConcept(drug_concept)
    lo, hi = parse_period(period_from), parse_period(period_to)
    if lo > hi:
        raise BadPeriodRange(f"{period_from} > {period_to}")
    covered = ontology.descendants(drug_concept)
    return sum(f.quantity for f in warehouse.facts.values()
               if f.drug in covered and (region is None or f.region == region)
               and lo <= f.period <= hi)


def indicators(warehouse, ontology, drugs, regions, period_from, period_to):
    return {(r, d): consumption_indicator(warehouse, ontology, d, r, period_from, period_to)
            for r in sorted(regions) for d in sorted(drugs)}


@dataclass
class PipelineReport:
    rows: int
    facts: int
    duplicates: int
    quarantine: list
    inserted: int
    skipped: int


def run_pipeline(sources, ontology, rules, warehouse, out_dir=None):
    """integrate -> extract -> transform -> load against an open warehouse."""
    integ = integrate(sources, out_dir)
    ext = extract([integ.files[s.source_id] for s in sources])
    tr = transform(ext.records, ontology, rules)
    res = load(tr.facts, warehouse)
    return PipelineReport(sum(integ.rows.values()), len(tr.facts), len(ext.duplicates),
                          integ.quarantine + tr.quarantine, res.inserted, res.skipped)
