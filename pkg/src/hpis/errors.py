"""Exception hierarchy shared by every hpis module.

Each error carries a short machine-readable ``code`` (the class name) so
that faults can cross the wire and be re-raised on the client side.
"""


class HpisError(Exception):
    """Base class for all domain errors."""

    @property
    def code(self):
        return type(self).__name__


# -- codec ------------------------------------------------------------------

class MalformedXml(HpisError):
    pass


class NonCanonicalizable(HpisError):
    pass


# -- envelope ---------------------------------------------------------------

class InvariantViolation(HpisError):
    pass


class MissingHeaderField(HpisError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name


class DuplicateHeaderField(HpisError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name


class KeyMismatch(HpisError):
    pass


class PlanUnsatisfiable(HpisError):
    pass


class DecryptFailure(HpisError):
    pass


class UntrustedCertificate(HpisError):
    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


class SignatureInvalid(HpisError):
    pass


class StaleTimestamp(HpisError):
    pass


class PolicyViolation(HpisError):
    def __init__(self, missing):
        super().__init__(missing)
        self.missing = missing


class ReplayDetected(HpisError):
    pass


# -- policy -----------------------------------------------------------------

class UnknownAssertion(HpisError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name


class BadParameters(HpisError):
    pass


class Unsatisfiable(HpisError):
    pass


# -- pki --------------------------------------------------------------------

class DuplicateSerial(HpisError):
    pass


class UnknownSerial(HpisError):
    pass


class AlgorithmMismatch(HpisError):
    pass


# -- registry ---------------------------------------------------------------

class AuthFailed(HpisError):
    pass


class RoleDenied(HpisError):
    pass


class UnknownConcept(HpisError):
    def __init__(self, iri):
        super().__init__(iri)
        self.iri = iri


class DuplicateKeyOtherProvider(HpisError):
    pass


class NotFound(HpisError):
    pass


# -- ontology ---------------------------------------------------------------

class CycleDetected(HpisError):
    def __init__(self, path):
        super().__init__(" -> ".join(path))
        self.path = list(path)


class DuplicateLabel(HpisError):
    def __init__(self, label):
        super().__init__(label)
        self.label = label


class UnknownTerm(HpisError):
    def __init__(self, text):
        super().__init__(text)
        self.text = text


# -- supply -----------------------------------------------------------------

class WrongDestination(HpisError):
    pass


class MalformedOrder(HpisError):
    pass


class IllegalTransition(HpisError):
    def __init__(self, status, event):
        super().__init__(f"{status} + {event}")
        self.status = status
        self.event = event


class NegativeIndicator(HpisError):
    pass


# -- etl --------------------------------------------------------------------

class UnknownSourceFormat(HpisError):
    pass


class UnreadableSource(HpisError):
    pass


class ConflictingFact(HpisError):
    def __init__(self, natural_key):
        super().__init__(repr(natural_key))
        self.natural_key = natural_key


class BadPeriodRange(HpisError):
    pass


class WarehouseLocked(HpisError):
    pass


# -- transport --------------------------------------------------------------

class UnknownEndpoint(HpisError):
    pass


class Timeout(HpisError):
    pass


class CorruptStream(HpisError):
    pass


class ShortRead(HpisError):
    pass


class LengthOverflow(HpisError):
    pass


# -- scenario ---------------------------------------------------------------

class ScenarioInvalid(HpisError):
    pass


def by_code(code):
    """Look up an error class by its wire code; unknown codes map to HpisError."""
    cls = globals().get(code)
    if isinstance(cls, type) and issubclass(cls, HpisError):
        return cls
    return HpisError
