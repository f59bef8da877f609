"""Exception hierarchy shared by the catalogs, planner and server.

Every error carries an HTTP status so the server can map it without a lookup
table, and a stable ``code`` (the class name) that travels over the wire.
"""

from __future__ import annotations


class VDCError(Exception):
    status = 500

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.__class__.__name__)
        self.message = message or self.__class__.__name__
        self.details = details

    @property
    def code(self) -> str:
        return type(self).__name__

    def to_json(self) -> dict:
        body = {"error": self.code, "message": self.message}
        if self.details:
            body["details"] = self.details
        return body


class ValidationError(VDCError):
    status = 400


class NotFound(VDCError):
    status = 404


class Conflict(VDCError):
    status = 409


# validation (400)
class InvalidSchema(ValidationError): ...
class SchemaTemplateMismatch(ValidationError): ...
class EmptyBindings(ValidationError): ...
class UnvalidatedRecipe(ValidationError): ...
class IncompleteBindings(ValidationError): ...
class DomainViolation(ValidationError): ...
class UnknownParameter(ValidationError): ...
class TypeMismatch(ValidationError): ...
class ZeroPartitions(ValidationError): ...
class BadPlaceholder(ValidationError): ...
class UnterminatedPlaceholder(ValidationError): ...
class UnboundPlaceholder(ValidationError): ...
class UnencodableValue(ValidationError): ...
class NonReproParam(ValidationError): ...
class SeedOverflow(ValidationError): ...
class MissingEventsParam(ValidationError): ...
class BadRequest(ValidationError): ...
class UnknownSite(ValidationError): ...
class CompleteWithoutClaim(ValidationError): ...
class NotClaimant(ValidationError): ...
class InvalidTransition(ValidationError): ...
class CycleDetected(ValidationError): ...

# not found (404)
class UnknownReference(NotFound): ...
class UnknownDerivation(NotFound): ...
class UnknownObject(NotFound): ...
class UnknownDataset(NotFound): ...
class UnknownTransformation(NotFound): ...
class UnknownRecipe(NotFound): ...
class RouteNotFound(NotFound): ...

# conflict (409)
class DuplicateVersion(Conflict): ...
class DuplicateName(Conflict): ...
class DuplicateReplica(Conflict): ...


# journal / process level (500)
class CorruptRecord(VDCError):
    def __init__(self, message: str = "", *, line: int, **details):
        super().__init__(message or f"corrupt journal record at line {line}", line=line, **details)
        self.line = line


class JournalCorrupt(CorruptRecord): ...


class BindFailure(VDCError): ...


class ServerUnavailable(VDCError):
    status = 503


_REGISTRY = {
    cls.__name__: cls
    for cls in list(globals().values())
    if isinstance(cls, type) and issubclass(cls, VDCError)
}


def from_wire(status: int, body: dict) -> VDCError:
    """Rebuild the typed exception a server reported."""
    code = body.get("error", "VDCError")
    cls = _REGISTRY.get(code)
    message = body.get("message", code)
    details = body.get("details") or {}
    if cls is None:
        exc = VDCError(message, **details)
        exc.status = status
        return exc
    if issubclass(cls, CorruptRecord):
        return cls(message, line=details.pop("line", 0), **details)
    return cls(message, **details)
