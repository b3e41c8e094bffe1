"""Shared e-health vocabulary: concepts, labels, equivalences and subsumption.

File profile (``urn:hpis:onto:1``)::

    <Ontology xmlns="urn:hpis:onto:1">
      <Concept iri="urn:hpis:concept:heart-attack">
        <Label>heart attack</Label>
        <SubClassOf iri="urn:hpis:concept:cardiovascular-indication"/>
        <EquivalentTo iri="urn:hpis:concept:myocardial-infarction"/>
      </Concept>
    </Ontology>

Label matching folds case, collapses whitespace and strips diacritics using
``FOLD_TABLE`` below (no locale machinery involved).
"""

from . import xmlcanon as xc
from .errors import CycleDetected, DuplicateLabel, MalformedXml, UnknownConcept, UnknownTerm

NS = "urn:hpis:onto:1"
CONCEPT_PREFIX = "urn:hpis:concept:"

# French accents plus the marks common in Arabic-to-Latin transliteration
# of Moroccan drug and place names.
FOLD_TABLE = str.maketrans({
    **dict.fromkeys("àâäáãåāă", "a"), **dict.fromkeys("ÀÂÄÁÃÅĀĂ", "a"),
    **dict.fromkeys("çć", "c"), **dict.fromkeys("ÇĆ", "c"),
    **dict.fromkeys("éèêëēė", "e"), **dict.fromkeys("ÉÈÊËĒĖ", "e"),
    **dict.fromkeys("îïíìī", "i"), **dict.fromkeys("ÎÏÍÌĪ", "i"),
    **dict.fromkeys("ôöóòõō", "o"), **dict.fromkeys("ÔÖÓÒÕŌ", "o"),
    **dict.fromkeys("ûüúùū", "u"), **dict.fromkeys("ÛÜÚÙŪ", "u"),
    "ÿ": "y", "Ÿ": "y", "ñ": "n", "Ñ": "n",
    "œ": "oe", "Œ": "oe", "æ": "ae", "Æ": "ae",
    "ḥ": "h", "Ḥ": "h", "ḫ": "kh", "Ḫ": "kh", "ṣ": "s", "Ṣ": "s", "š": "sh", "Š": "sh",
    "ḍ": "d", "Ḍ": "d", "ṭ": "t", "Ṭ": "t", "ẓ": "z", "Ẓ": "z", "ġ": "gh", "Ġ": "gh",
    "ʿ": "", "ʾ": "", "’": "'",
})


def fold(text):
    """Matching key for a label: diacritics folded, casefolded, whitespace collapsed."""
    return " ".join(text.translate(FOLD_TABLE).casefold().split())


class Ontology:
    """Immutable after construction; safe to share between threads."""

    def __init__(self, concepts, labels=None, equivalences=(), subclass_edges=()):
        self.concepts = frozenset(concepts)
        self._labels = {}
        self._display = {}
        for label, iri in (labels or {}).items() if isinstance(labels, dict) else (labels or ()):
            self._add_label(label, iri)
        self._parent = {c: c for c in self.concepts}
        for a, b in equivalences:
            self._union(self._known(a), self._known(b))
        # canonical representative = smallest IRI of the class
        classes = {}
        for c in sorted(self.concepts):
            classes.setdefault(self._find(c), []).append(c)
        self._rep = {}
        self._classes = {}
        for members in classes.values():
            rep = min(members)
            self._classes[rep] = tuple(members)
            for m in members:
                self._rep[m] = rep
        self.subclass_edges = frozenset((self._known(c), self._known(p)) for c, p in subclass_edges)
        self._up = {r: set() for r in self._classes}
        for c, p in self.subclass_edges:
            rc, rp = self._rep[c], self._rep[p]
            if rc != rp:
                self._up[rc].add(rp)
        self._check_acyclic()
        self._ancestors = {}
        for r in sorted(self._classes):
            self._closure(r)

    # -- construction helpers ---------------------------------------------

    def _known(self, iri):
        if iri not in self.concepts:
            raise UnknownConcept(iri)
        return iri

    def _add_label(self, label, iri):
        self._known(iri)
        key = fold(label)
        if not key:
            raise MalformedXml("empty label")
        prev = self._labels.get(key)
        if prev is not None and prev != iri:
            raise DuplicateLabel(label)
        self._labels[key] = iri
        self._display.setdefault(iri, label)

    def _find(self, c):
        while self._parent[c] != c:
            self._parent[c] = self._parent[self._parent[c]]
            c = self._parent[c]
        return c

    def _union(self, a, b):
        ra, rb = self._find(a), self._find(b)
        if ra != rb:
            self._parent[max(ra, rb)] = min(ra, rb)

    def _check_acyclic(self):
        state = {}

        def visit(node, path):
            state[node] = 1
            for nxt in sorted(self._up[node]):
                if state.get(nxt) == 1:
                    raise CycleDetected(path[path.index(nxt):] + [nxt])
                if nxt not in state:
                    visit(nxt, path + [nxt])
            state[node] = 2

        for r in sorted(self._up):
            if r not in state:
                visit(r, [r])

    def _closure(self, r):
        if r not in self._ancestors:
            acc = {r}
            for p in self._up[r]:
                acc |= self._closure(p)
            self._ancestors[r] = frozenset(acc)
        return self._ancestors[r]

    # -- queries ----------------------------------------------------------

    @property
    def labels(self):
        return dict(self._labels)

    def representative(self, iri):
        return self._rep[self._known(iri)]

    def equivalence_class(self, iri):
        return self._classes[self.representative(iri)]

    def label_of(self, iri):
        return self._display.get(iri, iri)

    def normalize_term(self, text):
        """Canonical representative IRI for a free-text term (or a known IRI)."""
        if text in self.concepts:
            return self._rep[text]
        iri = self._labels.get(fold(text))
        if iri is None:
            raise UnknownTerm(text)
        return self._rep[iri]

    def subsumes(self, ancestor, descendant):
        a, d = self.representative(ancestor), self.representative(descendant)
        return a in self._ancestors[d]

    def ancestors(self, iri):
        return self._ancestors[self.representative(iri)]

    def descendants(self, iri):
        """All concept IRIs (every class member) subsumed by ``iri``."""
        a = self.representative(iri)
        return frozenset(c for c in self.concepts if a in self._ancestors[self._rep[c]])

    # -- serialization ----------------------------------------------------

    def to_xml(self):
        root = xc.element(NS, "Ontology")
        by_concept = {}
        for key, iri in sorted(self._labels.items()):
            by_concept.setdefault(iri, []).append(key)
        eq = sorted((m, rep) for rep, ms in self._classes.items() for m in ms if m != rep)
        for c in sorted(self.concepts):
            el = xc.sub(root, NS, "Concept", iri=c)
            if c in self._display:
                xc.sub(el, NS, "Label", self._display[c])
            for p in sorted(p for cc, p in self.subclass_edges if cc == c):
                xc.sub(el, NS, "SubClassOf", iri=p)
            for m, rep in eq:
                if m == c:
                    xc.sub(el, NS, "EquivalentTo", iri=rep)
        return xc.canonicalize(root)


def load(data):
    root = xc.parse_xml(data)
    xc.expect(root, NS, "Ontology")
    concepts, labels, eqs, edges = [], [], [], []
    for el in xc.children(root):
        xc.expect(el, NS, "Concept")
        iri = el.get("iri", "")
        if not iri:
            raise MalformedXml("Concept without iri")
        concepts.append(iri)
        for child in xc.children(el):
            ns, local = xc.split_tag(child.tag)
            if ns != NS:
                raise MalformedXml(f"unexpected {child.tag}")
            if local == "Label":
                labels.append((xc.text_of(child), iri))
            elif local == "SubClassOf":
                edges.append((iri, child.get("iri", "")))
            elif local == "EquivalentTo":
                eqs.append((iri, child.get("iri", "")))
            else:
                raise MalformedXml(f"unexpected {local}")
    if len(set(concepts)) != len(concepts):
        raise MalformedXml("concept declared twice")
    return Ontology(concepts, labels, eqs, edges)


def load_path(path):
    with open(path, "rb") as fh:
        return load(fh.read())


def seed_path():
    from importlib.resources import files
    return files("hpis.data") / "seed-ontology.xml"


def seed():
    """The shipped fixture vocabulary (not a clinical terminology)."""
    return load(seed_path().read_bytes())
