"""Deterministic stand-in for the physics applications behind each step."""

from __future__ import annotations

import hashlib
from typing import Mapping, Sequence

from .. import errors
from ..identity import ObjectId
from ..model import Derivation
from .kernels import splitmix64_bytes

EVENT_BYTES = 16


def _fields(derivation: Derivation | Mapping) -> tuple[ObjectId, dict]:
    if isinstance(derivation, Derivation):
        return derivation.output_id, derivation.bound_params
    return ObjectId.parse(derivation["output_id"]), derivation["bound_params"]


def event_count(bound_params: Mapping) -> int:
    for domain in ("REPRO", "APP"):
        value = bound_params.get(domain, {}).get("events")
        if value is not None:
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise errors.MissingEventsParam(f"events must be a non-negative integer, got {value!r}")
            return value
    raise errors.MissingEventsParam("derivation binds no 'events' parameter")


def payload_seed(output_id: ObjectId, input_payloads: Sequence[bytes]) -> int:
    # the output id already is SHA-256 over the canonical identity document
    seed = int.from_bytes(output_id.digest[:8], "big")
    for payload in input_payloads:
        seed ^= int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")
    return seed


def simulated_transform(derivation: Derivation | Mapping, input_payloads: Sequence[bytes] = ()) -> tuple[bytes, bytes]:
    """Run a derivation: ``events * 16`` bytes of splitmix64 output and its SHA-256."""
    output_id, bound = _fields(derivation)
    events = event_count(bound)
    payload = splitmix64_bytes(payload_seed(output_id, input_payloads), 2 * events)
    return payload, hashlib.sha256(payload).digest()
