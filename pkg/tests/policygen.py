"""Random policy documents for the property tests (plain ``random`` so runs are seedable)."""

from hpis import secpolicy as sp

VOCAB = (
    sp.signed("Body"), sp.signed("Header"), sp.signed("Header", "Body"),
    sp.encrypted("Body"),
    sp.suite("urn:hpis:suite:basic"), sp.suite("urn:hpis:suite:chacha"),
    sp.timestamp(120), sp.timestamp(300),
    sp.CLIENT_CERT, sp.COMPRESSION,
)


def random_alternative(rng, max_assertions=4):
    return frozenset(rng.sample(VOCAB, rng.randint(0, max_assertions)))


def random_document(rng, max_alternatives=3, max_assertions=4):
    """A document whose normal form has at most ``max_alternatives`` alternatives.

    Alternatives are wrapped in randomly nested operators so that
    normalization has real work to do.
    """
    alts = [random_alternative(rng, max_assertions)
            for _ in range(rng.randint(0, max_alternatives))]
    branches = []
    for alt in alts:
        items = sorted(alt, key=sp.Assertion.sort_key)
        rng.shuffle(items)
        if len(items) > 1 and rng.random() < 0.5:
            cut = rng.randint(1, len(items) - 1)
            node = sp.Operator("All", (sp.Operator("All", tuple(items[:cut])),
                                       sp.Operator("ExactlyOne", (sp.Operator("All", tuple(items[cut:])),))))
        else:
            node = sp.Operator("All", tuple(items))
        branches.append(node)
    return sp.PolicyDocument(sp.Operator("Policy", (sp.Operator("ExactlyOne", tuple(branches)),)))
