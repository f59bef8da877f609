"""Canonical encoding and content-addressed identity of virtual data objects.

An object's identity is the SHA-256 of the canonical JSON form of everything
that can change its bytes: the producing transformation, the REPRO-domain
parameters and the identities of its inputs. Where a derivation runs, and how
verbose it is, never enters the hash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Sequence

from .errors import BadRequest, NonReproParam, SeedOverflow, UnencodableValue

if TYPE_CHECKING:
    from .model import Dataset, Transformation

PREFIX = "vd1:"
INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

# Names every partition binds on its own; always REPRO.
PARTITION_INDEX = "partition_index"
RANDOM_SEED = "random_seed"
IMPLICIT_PARAMS = (PARTITION_INDEX, RANDOM_SEED)


@dataclass(frozen=True, order=True)
class ObjectId:
    digest: bytes = field(repr=False)

    def __post_init__(self):
        if not isinstance(self.digest, bytes) or len(self.digest) != 32:
            raise ValueError("ObjectId digest must be 32 bytes")

    @classmethod
    def parse(cls, text: str) -> "ObjectId":
        if not isinstance(text, str) or not text.startswith(PREFIX):
            raise BadRequest(f"malformed object id {text!r}")
        hexpart = text[len(PREFIX):]
        if len(hexpart) != 64 or hexpart != hexpart.lower():
            raise BadRequest(f"malformed object id {text!r}")
        try:
            return cls(bytes.fromhex(hexpart))
        except ValueError:
            raise BadRequest(f"malformed object id {text!r}") from None

    @classmethod
    def of(cls, value: Any) -> "ObjectId":
        return cls(hashlib.sha256(canonical_encode(value)).digest())

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return PREFIX + self.digest.hex()

    def __repr__(self) -> str:
        return f"ObjectId({self})"


def _encode(value: Any, out: list[str]) -> None:
    if value is None:
        out.append("null")
    elif value is True:
        out.append("true")
    elif value is False:
        out.append("false")
    elif isinstance(value, int):
        if not INT64_MIN <= value <= INT64_MAX:
            raise UnencodableValue(f"integer {value} outside signed 64-bit range")
        out.append(str(int(value)))
    elif isinstance(value, str):
        out.append(json.dumps(value, ensure_ascii=False))
    elif isinstance(value, Mapping):
        keys = list(value)
        for k in keys:
            if not isinstance(k, str):
                raise UnencodableValue(f"non-string map key {k!r}")
        out.append("{")
        for i, k in enumerate(sorted(keys)):
            if i:
                out.append(",")
            out.append(json.dumps(k, ensure_ascii=False))
            out.append(":")
            _encode(value[k], out)
        out.append("}")
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _encode(item, out)
        out.append("]")
    elif isinstance(value, ObjectId):
        out.append(json.dumps(str(value)))
    elif isinstance(value, float):
        raise UnencodableValue(f"floating-point value {value!r} has no canonical form")
    else:
        raise UnencodableValue(f"cannot encode {type(value).__name__}")


def canonical_encode(value: Any) -> bytes:
    """Encode ``value`` as canonical JSON bytes.

    Keys are sorted by code point, there is no whitespace, strings carry only
    the escapes JSON requires, and floats are refused outright.
    """
    out: list[str] = []
    _encode(value, out)
    try:
        return "".join(out).encode("utf-8")
    except UnicodeEncodeError as exc:
        raise UnencodableValue(f"string is not valid UTF-8 text: {exc}") from None


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def derivation_identity_document(
    tx: "Transformation", repro_params: Mapping[str, Any], input_ids: Sequence[ObjectId]
) -> dict:
    return {
        "transformation": {"name": tx.name, "version": tx.version, "body_hash": tx.body_hash.hex()},
        "repro": dict(repro_params),
        "inputs": [str(i) for i in input_ids],
    }


def derivation_output_id(
    tx: "Transformation", repro_params: Mapping[str, Any], input_ids: Sequence[ObjectId]
) -> ObjectId:
    """Identity of the object a derivation produces.

    ``input_ids`` must already be in the slot order ``tx.inputs`` declares.
    """
    domains = tx.schema.domains()
    for name in repro_params:
        if name in IMPLICIT_PARAMS:
            continue
        if domains.get(name) != "REPRO":
            raise NonReproParam(f"parameter {name!r} is not in the REPRO domain of {tx.name} v{tx.version}")
    if len(input_ids) != len(tx.inputs):
        raise BadRequest(
            f"{tx.name} v{tx.version} declares {len(tx.inputs)} input slots, got {len(input_ids)} ids"
        )
    return ObjectId.of(derivation_identity_document(tx, repro_params, input_ids))


def partition_seed(base_seed: int, stride: int, index: int) -> int:
    seed = base_seed + index * stride
    if not INT64_MIN <= seed <= INT64_MAX:
        raise SeedOverflow(f"seed for partition {index} ({seed}) exceeds signed 64-bit range")
    return seed


def expand_partitions(
    dataset: "Dataset",
    tx: "Transformation",
    bindings: Mapping[str, Mapping[str, Any]],
    inputs: Sequence[Sequence[ObjectId]] | None = None,
) -> list[tuple[int, dict[str, dict[str, Any]], ObjectId]]:
    """Expand a dataset into one (index, bound params, output id) per partition.

    ``bindings`` is the merged parameter map tagged by domain; ``inputs`` gives
    each partition's input ids in slot order (omitted for source steps).
    """
    if inputs is None:
        inputs = [()] * dataset.partitions
    if len(inputs) != dataset.partitions:
        raise BadRequest("one input list per partition is required")
    # range-check the last seed up front so no partial expansion escapes
    partition_seed(dataset.base_seed, dataset.seed_stride, dataset.partitions - 1)

    out = []
    for i in range(dataset.partitions):
        repro = dict(bindings.get("REPRO", {}))
        repro[PARTITION_INDEX] = i
        repro[RANDOM_SEED] = partition_seed(dataset.base_seed, dataset.seed_stride, i)
        bound = {
            "REPRO": repro,
            "APP": dict(bindings.get("APP", {})),
            "SITE": dict(bindings.get("SITE", {})),
        }
        out.append((i, bound, derivation_output_id(tx, repro, list(inputs[i]))))
    return out


def sorted_ids(ids: Iterable[ObjectId]) -> list[ObjectId]:
    return sorted(set(ids))
