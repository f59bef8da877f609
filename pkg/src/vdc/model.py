"""Domain types of the cookbook and their wire (JSON) forms."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Iterable, Mapping

from . import errors
from .identity import IMPLICIT_PARAMS, INT64_MAX, INT64_MIN, ObjectId, canonical_encode, sha256
from .templating import NAME_RE, RecipeTemplate, parse_template

DECIMAL_RE = re.compile(r"-?(0|[1-9][0-9]*)(\.[0-9]+)?\Z")


class ParamDomain(str, enum.Enum):
    REPRO = "REPRO"  # data reproducibility: the only domain that reaches identity
    APP = "APP"      # application complexity: verbosity, memory hints
    SITE = "SITE"    # grid location: bound at claim time from the site recipe


class ParamType(str, enum.Enum):
    INT = "int"
    BOOL = "bool"
    STRING = "string"
    DECIMAL = "decimal-string"


class State(str, enum.Enum):
    DEFINED = "DEFINED"
    CLAIMED = "CLAIMED"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


DOMAINS = tuple(d.value for d in ParamDomain)


def type_ok(ptype: ParamType, value: Any) -> bool:
    if ptype is ParamType.INT:
        return isinstance(value, int) and not isinstance(value, bool) and INT64_MIN <= value <= INT64_MAX
    if ptype is ParamType.BOOL:
        return isinstance(value, bool)
    if ptype is ParamType.STRING:
        return isinstance(value, str)
    return isinstance(value, str) and DECIMAL_RE.match(value) is not None


def format_ts(ts: float) -> str:
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_ts(text: str) -> float:
    if not isinstance(text, str):
        raise errors.BadRequest(f"timestamp must be an RFC3339 string, got {text!r}")
    t = text[:-1] + "+00:00" if text.endswith(("Z", "z")) else text
    try:
        dt = datetime.fromisoformat(t)
    except ValueError:
        raise errors.BadRequest(f"malformed RFC3339 timestamp {text!r}") from None
    if dt.tzinfo is None:
        raise errors.BadRequest(f"timestamp {text!r} lacks a UTC offset")
    return dt.timestamp()


def _require(body: Mapping, key: str, kind: type | tuple = object):
    if not isinstance(body, Mapping):
        raise errors.BadRequest("expected a JSON object")
    if key not in body:
        raise errors.BadRequest(f"missing field {key!r}")
    value = body[key]
    if kind is not object and (not isinstance(value, kind) or (kind is int and isinstance(value, bool))):
        raise errors.BadRequest(f"field {key!r} has the wrong type")
    return value


@dataclass(frozen=True)
class ParamSpec:
    name: str
    domain: ParamDomain
    type: ParamType
    required: bool = True
    default: Any = None

    def to_json(self) -> dict:
        out = {"name": self.name, "domain": self.domain.value, "type": self.type.value, "required": self.required}
        if not self.required:
            out["default"] = self.default
        return out

    @classmethod
    def from_json(cls, body: Mapping) -> "ParamSpec":
        try:
            domain = ParamDomain(_require(body, "domain", str))
            ptype = ParamType(_require(body, "type", str))
        except ValueError as exc:
            raise errors.InvalidSchema(str(exc)) from None
        required = body.get("required", "default" not in body)
        return cls(_require(body, "name", str), domain, ptype, bool(required), body.get("default"))


@dataclass(frozen=True)
class ParamSchema:
    entries: tuple[ParamSpec, ...]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if not NAME_RE.match(e.name):
                raise errors.InvalidSchema(f"bad parameter name {e.name!r}")
            if e.name in seen:
                raise errors.InvalidSchema(f"duplicate parameter {e.name!r}")
            seen.add(e.name)
            if e.required and e.default is not None:
                raise errors.InvalidSchema(f"required parameter {e.name!r} must not carry a default")
            if not e.required and not type_ok(e.type, e.default):
                raise errors.InvalidSchema(f"default of {e.name!r} does not match type {e.type.value}")
            if e.name in IMPLICIT_PARAMS and (e.domain is not ParamDomain.REPRO or e.type is not ParamType.INT):
                raise errors.InvalidSchema(f"{e.name!r} is partition-bound and must be an int REPRO parameter")

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, name: str) -> bool:
        return any(e.name == name for e in self.entries)

    def get(self, name: str) -> ParamSpec | None:
        for e in self.entries:
            if e.name == name:
                return e
        return None

    def domains(self) -> dict[str, str]:
        return {e.name: e.domain.value for e in self.entries}

    def by_domain(self, domain: ParamDomain) -> list[ParamSpec]:
        return [e for e in self.entries if e.domain is domain]

    def to_json(self) -> list:
        return [e.to_json() for e in self.entries]

    @classmethod
    def from_json(cls, body: Iterable) -> "ParamSchema":
        if not isinstance(body, list):
            raise errors.InvalidSchema("schema must be a list of parameter entries")
        return cls(tuple(ParamSpec.from_json(e) for e in body))


@dataclass(frozen=True)
class InputSlot:
    slot: str
    step: str

    def to_json(self) -> dict:
        return {"slot": self.slot, "step": self.step}


@dataclass(frozen=True)
class Transformation:
    name: str
    version: int
    step: str
    schema: ParamSchema
    template: RecipeTemplate
    inputs: tuple[InputSlot, ...] = ()
    consumed_internally: tuple[str, ...] = ()
    body_hash: bytes = field(default=b"", compare=False)

    def __post_init__(self):
        if not self.name:
            raise errors.InvalidSchema("transformation name must be non-empty")
        if not isinstance(self.version, int) or isinstance(self.version, bool) or self.version < 1:
            raise errors.InvalidSchema("transformation version must be a positive integer")
        slots = [s.slot for s in self.inputs]
        if len(set(slots)) != len(slots):
            raise errors.InvalidSchema("duplicate input slot")
        names = {e.name for e in self.schema}
        stray = [p for p in self.template.placeholders if p not in names and p not in IMPLICIT_PARAMS]
        if stray:
            raise errors.SchemaTemplateMismatch(
                f"placeholders not in schema: {', '.join(stray)}", placeholders=stray
            )
        unknown_internal = [n for n in self.consumed_internally if n not in names]
        if unknown_internal:
            raise errors.SchemaTemplateMismatch(
                f"consumed_internally names not in schema: {', '.join(unknown_internal)}"
            )
        housed = set(self.template.placeholders) | set(self.consumed_internally)
        unhoused = [e.name for e in self.schema if e.required and e.name not in housed]
        if unhoused:
            raise errors.SchemaTemplateMismatch(
                f"required parameters neither templated nor consumed internally: {', '.join(unhoused)}",
                unhoused=unhoused,
            )
        if not self.body_hash:
            object.__setattr__(self, "body_hash", self.compute_body_hash())

    def compute_body_hash(self) -> bytes:
        return sha256(canonical_encode({
            "schema": self.schema.to_json(),
            "template": self.template.text,
            "inputs": [s.to_json() for s in self.inputs],
        }))

    @property
    def ref(self) -> tuple[str, int]:
        return (self.name, self.version)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "version": self.version,
            "step": self.step,
            "schema": self.schema.to_json(),
            "template": self.template.text,
            "inputs": [s.to_json() for s in self.inputs],
            "consumed_internally": list(self.consumed_internally),
            "body_hash": self.body_hash.hex(),
        }

    @classmethod
    def from_json(cls, body: Mapping) -> "Transformation":
        inputs = body.get("inputs", [])
        if not isinstance(inputs, list):
            raise errors.InvalidSchema("inputs must be a list")
        slots = []
        for s in inputs:
            if isinstance(s, list) and len(s) == 2:
                slots.append(InputSlot(str(s[0]), str(s[1])))
            else:
                slots.append(InputSlot(_require(s, "slot", str), _require(s, "step", str)))
        return cls(
            name=_require(body, "name", str),
            version=_require(body, "version", int),
            step=_require(body, "step", str),
            schema=ParamSchema.from_json(_require(body, "schema", list)),
            template=parse_template(_require(body, "template", str)),
            inputs=tuple(slots),
            consumed_internally=tuple(body.get("consumed_internally", ())),
        )

    def check_bindings(self, bound: Mapping[str, Mapping[str, Any]], *, site_pending: bool) -> None:
        """Verify a domain-tagged binding map is complete and well-typed.

        With ``site_pending`` the SITE domain may still be incomplete; it is
        resolved when a compute element claims the derivation.
        """
        missing = []
        for e in self.schema:
            values = bound.get(e.domain.value, {})
            if e.name not in values:
                if e.name in IMPLICIT_PARAMS:
                    continue  # supplied per partition
                if e.required and not (site_pending and e.domain is ParamDomain.SITE):
                    missing.append(e.name)
                continue
            if not type_ok(e.type, values[e.name]):
                raise errors.TypeMismatch(
                    f"{e.name!r} expects {e.type.value}, got {values[e.name]!r}", param=e.name
                )
        if missing:
            raise errors.IncompleteBindings(f"unbound required parameters: {', '.join(missing)}", missing=missing)


@dataclass(frozen=True)
class Recipe:
    name: str
    domain: ParamDomain
    bindings: Mapping[str, Any]
    validated: bool = False
    note: str = ""

    def __post_init__(self):
        if not isinstance(self.domain, ParamDomain):
            try:
                object.__setattr__(self, "domain", ParamDomain(self.domain))
            except ValueError as exc:
                raise errors.BadRequest(str(exc)) from None
        if not self.name:
            raise errors.BadRequest("recipe name must be non-empty")
        if not self.bindings:
            raise errors.EmptyBindings(f"recipe {self.name!r} has no bindings")
        for k, v in self.bindings.items():
            if not NAME_RE.match(k):
                raise errors.BadRequest(f"bad parameter name {k!r}")
            if isinstance(v, float) or not isinstance(v, (int, str)):
                raise errors.TypeMismatch(f"recipe value for {k!r} must be int, bool or string")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "domain": self.domain.value,
            "bindings": dict(self.bindings),
            "validated": self.validated,
            "note": self.note,
        }

    @classmethod
    def from_json(cls, body: Mapping) -> "Recipe":
        try:
            domain = ParamDomain(_require(body, "domain", str))
        except ValueError as exc:
            raise errors.BadRequest(str(exc)) from None
        bindings = body.get("bindings", {})
        if not isinstance(bindings, Mapping):
            raise errors.BadRequest("bindings must be an object")
        return cls(
            name=_require(body, "name", str),
            domain=domain,
            bindings=dict(bindings),
            validated=bool(body.get("validated", False)),
            note=str(body.get("note", "")),
        )


@dataclass(frozen=True)
class DatasetInput:
    dataset: str
    version: int

    def to_json(self) -> dict:
        return {"dataset": self.dataset, "version": self.version}


@dataclass(frozen=True)
class Dataset:
    """A recipe composition over one transformation, split into partitions.

    ``inputs`` maps each of the transformation's input slots to an upstream
    dataset; partition ``i`` consumes upstream partition ``i mod M``.
    """

    name: str
    version: int
    transformation: tuple[str, int]
    recipes: Mapping[str, str] = field(default_factory=dict)
    overrides: Mapping[str, Any] = field(default_factory=dict)
    partitions: int = 1
    base_seed: int = 0
    seed_stride: int = 1
    inputs: Mapping[str, DatasetInput] = field(default_factory=dict)
    labels: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.name:
            raise errors.BadRequest("dataset name must be non-empty")
        if not isinstance(self.version, int) or self.version < 1:
            raise errors.BadRequest("dataset version must be a positive integer")
        for domain in self.recipes:
            if domain not in DOMAINS:
                raise errors.BadRequest(f"unknown parameter domain {domain!r}")
        if not isinstance(self.partitions, int) or isinstance(self.partitions, bool):
            raise errors.BadRequest("partitions must be an integer")
        if self.partitions < 1:
            raise errors.ZeroPartitions(f"dataset {self.name!r} must have at least one partition")
        for key in ("base_seed", "seed_stride"):
            v = getattr(self, key)
            if not isinstance(v, int) or isinstance(v, bool):
                raise errors.BadRequest(f"{key} must be an integer")

    @property
    def ref(self) -> tuple[str, int]:
        return (self.name, self.version)

    def to_json(self) -> dict:
        out = {
            "name": self.name,
            "version": self.version,
            "transformation": {"name": self.transformation[0], "version": self.transformation[1]},
            "recipes": dict(self.recipes),
            "overrides": dict(self.overrides),
            "partitions": self.partitions,
            "base_seed": self.base_seed,
            "seed_stride": self.seed_stride,
            "inputs": {k: v.to_json() for k, v in self.inputs.items()},
        }
        if self.labels:
            out["labels"] = dict(self.labels)
        return out

    @classmethod
    def from_json(cls, body: Mapping) -> "Dataset":
        tx = _require(body, "transformation")
        if isinstance(tx, Mapping):
            tx_ref = (_require(tx, "name", str), _require(tx, "version", int))
        elif isinstance(tx, list) and len(tx) == 2:
            tx_ref = (str(tx[0]), int(tx[1]))
        else:
            raise errors.BadRequest("transformation must be {name, version}")
        recipes = body.get("recipes", {})
        if isinstance(recipes, list):
            raise errors.BadRequest("recipes must map domain to recipe name")
        inputs = {}
        for slot, ref in dict(body.get("inputs", {})).items():
            inputs[slot] = DatasetInput(_require(ref, "dataset", str), _require(ref, "version", int))
        return cls(
            name=_require(body, "name", str),
            version=_require(body, "version", int),
            transformation=tx_ref,
            recipes=dict(recipes),
            overrides=dict(body.get("overrides", {})),
            partitions=_require(body, "partitions", int),
            base_seed=body.get("base_seed", 0),
            seed_stride=body.get("seed_stride", 1),
            inputs=inputs,
            labels=dict(body.get("labels", {})),
        )


@dataclass(frozen=True)
class ProvenanceRecord:
    compute_element: str
    network_domain: str
    country: str
    started: float
    finished: float
    exit_status: int
    output_bytes: int
    output_digest: bytes

    def __post_init__(self):
        if self.finished < self.started:
            raise errors.BadRequest("provenance finished precedes started")
        if self.output_bytes < 0:
            raise errors.BadRequest("output_bytes must be non-negative")
        if len(self.output_digest) != 32:
            raise errors.BadRequest("output_digest must be 32 bytes")

    def to_json(self) -> dict:
        return {
            "compute_element": self.compute_element,
            "network_domain": self.network_domain,
            "country": self.country,
            "started": format_ts(self.started),
            "finished": format_ts(self.finished),
            "exit_status": self.exit_status,
            "output_bytes": self.output_bytes,
            "output_digest": self.output_digest.hex(),
        }

    @classmethod
    def from_json(cls, body: Mapping) -> "ProvenanceRecord":
        try:
            digest = bytes.fromhex(_require(body, "output_digest", str))
        except ValueError:
            raise errors.BadRequest("output_digest must be hex") from None
        return cls(
            compute_element=_require(body, "compute_element", str),
            network_domain=str(body.get("network_domain", "")),
            country=str(body.get("country", "")),
            started=parse_ts(_require(body, "started")),
            finished=parse_ts(_require(body, "finished")),
            exit_status=body.get("exit_status", 0),
            output_bytes=_require(body, "output_bytes", int),
            output_digest=digest,
        )


@dataclass
class Derivation:
    id: ObjectId
    dataset: tuple[str, int]
    transformation: tuple[str, int]
    partition: int
    bound_params: dict[str, dict[str, Any]]
    input_ids: list[ObjectId]
    output_id: ObjectId
    seq: int
    state: State = State.DEFINED
    attempts: int = 0
    claim: tuple[str, float] | None = None
    claim_site: str | None = None
    claimants: list[str] = field(default_factory=list)
    provenance: ProvenanceRecord | None = None
    failure: str | None = None

    @staticmethod
    def id_for(output_id: ObjectId) -> ObjectId:
        return ObjectId.of({"derivation": str(output_id)})

    def to_json(self) -> dict:
        return {
            "id": str(self.id),
            "dataset": {"name": self.dataset[0], "version": self.dataset[1]},
            "transformation": {"name": self.transformation[0], "version": self.transformation[1]},
            "partition": self.partition,
            "bound_params": self.bound_params,
            "input_ids": [str(i) for i in self.input_ids],
            "output_id": str(self.output_id),
            "seq": self.seq,
            "state": self.state.value,
            "attempts": self.attempts,
            "claim": None if self.claim is None else
                {"ce_id": self.claim[0], "at": format_ts(self.claim[1]), "site": self.claim_site},
            "claimants": list(self.claimants),
            "provenance": None if self.provenance is None else self.provenance.to_json(),
            "failure": self.failure,
        }

    def summary(self) -> dict:
        return {
            "id": str(self.id),
            "partition": self.partition,
            "output_id": str(self.output_id),
            "state": self.state.value,
            "attempts": self.attempts,
        }

    @classmethod
    def from_json(cls, body: Mapping) -> "Derivation":
        claim = body.get("claim")
        prov = body.get("provenance")
        return cls(
            id=ObjectId.parse(body["id"]),
            dataset=(body["dataset"]["name"], body["dataset"]["version"]),
            transformation=(body["transformation"]["name"], body["transformation"]["version"]),
            partition=body["partition"],
            bound_params={k: dict(v) for k, v in body["bound_params"].items()},
            input_ids=[ObjectId.parse(i) for i in body["input_ids"]],
            output_id=ObjectId.parse(body["output_id"]),
            seq=body["seq"],
            state=State(body.get("state", "DEFINED")),
            attempts=body.get("attempts", 0),
            claim=None if not claim else (claim["ce_id"], parse_ts(claim["at"])),
            claim_site=None if not claim else claim.get("site"),
            claimants=list(body.get("claimants", [])),
            provenance=None if not prov else ProvenanceRecord.from_json(prov),
            failure=body.get("failure"),
        )


@dataclass(frozen=True)
class Replica:
    object_id: ObjectId
    site: str
    uri: str
    registered_at: float = 0.0

    @property
    def key(self) -> tuple[ObjectId, str, str]:
        return (self.object_id, self.site, self.uri)

    def to_json(self) -> dict:
        return {
            "object_id": str(self.object_id),
            "site": self.site,
            "uri": self.uri,
            "registered_at": format_ts(self.registered_at),
        }

    @classmethod
    def from_json(cls, body: Mapping, *, now: float = 0.0) -> "Replica":
        at = body.get("registered_at")
        return cls(
            object_id=ObjectId.parse(_require(body, "object_id", str)),
            site=_require(body, "site", str),
            uri=_require(body, "uri", str),
            registered_at=parse_ts(at) if at else now,
        )
