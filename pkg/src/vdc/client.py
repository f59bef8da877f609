"""Client for the catalog server, over HTTP or bound directly to a Service."""

from __future__ import annotations

import http.client
import json
import socket
import urllib.error
import urllib.request
from typing import Any, Callable
from urllib.parse import quote

from . import errors
from .model import format_ts


class ServerUnreachable(ConnectionError):
    def __init__(self, url: str, reason: str):
        super().__init__(f"cannot reach VDC server at {url}: {reason}")
        self.url = url


class HTTPTransport:
    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def __call__(self, method: str, path: str, body: Any = None) -> tuple[int, Any]:
        url = self.base_url + path
        data = None if body is None else json.dumps(body).encode("utf-8")
        req = urllib.request.Request(url, data=data, method=method)
        if data is not None:
            req.add_header("Content-Type", "application/json")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read()
                return resp.status, json.loads(raw) if raw else None
        except urllib.error.HTTPError as exc:
            try:
                raw = exc.read()
            except (OSError, http.client.HTTPException) as inner:
                raise ServerUnreachable(self.base_url, f"{type(inner).__name__}: {inner}") from None
            try:
                payload = json.loads(raw) if raw else {}
            except json.JSONDecodeError:
                payload = {"error": "VDCError", "message": raw.decode("utf-8", "replace")}
            return exc.code, payload
        except (urllib.error.URLError, ConnectionError, socket.timeout, TimeoutError) as exc:
            reason = getattr(exc, "reason", exc)
            raise ServerUnreachable(self.base_url, str(reason)) from None
        except (OSError, http.client.HTTPException) as exc:
            # includes a connection dropped mid-response
            raise ServerUnreachable(self.base_url, f"{type(exc).__name__}: {exc}") from None


class LocalTransport:
    """Calls a Service in-process; optional ``gate`` simulates unavailability."""

    def __init__(self, service, gate: Callable[[], bool] | None = None):
        self.service = service
        self.gate = gate

    def __call__(self, method: str, path: str, body: Any = None) -> tuple[int, Any]:
        if self.gate is not None and not self.gate():
            raise ServerUnreachable("local", "server unavailable")
        return self.service.handle(method, path, body)


class Client:
    def __init__(self, transport: Callable[[str, str, Any], tuple[int, Any]] | str):
        if isinstance(transport, str):
            transport = HTTPTransport(transport)
        self.transport = transport

    @property
    def url(self) -> str:
        return getattr(self.transport, "base_url", "local")

    def call(self, method: str, path: str, body: Any = None) -> tuple[int, Any]:
        status, out = self.transport(method, "/v1" + path, body)
        if status >= 400:
            raise errors.from_wire(status, out or {})
        return status, out

    # thin wrappers, one per endpoint

    def add_transformation(self, doc: dict) -> dict:
        return self.call("POST", "/transformations", doc)[1]

    def get_transformation(self, name: str, version: int) -> dict:
        return self.call("GET", f"/transformations/{quote(name)}/{version}")[1]

    def add_recipe(self, doc: dict) -> dict:
        return self.call("POST", "/recipes", doc)[1]

    def get_recipe(self, name: str) -> dict:
        return self.call("GET", f"/recipes/{quote(name)}")[1]

    def validate_recipe(self, name: str, note: str | None = None) -> dict:
        return self.call("POST", f"/recipes/{quote(name)}/validate", {} if note is None else {"note": note})[1]

    def bind_site(self, site: str, recipe: str) -> dict:
        return self.call("POST", "/sites", {"site": site, "recipe": recipe})[1]

    def compose(self, doc: dict) -> dict:
        return self.call("POST", "/datasets", doc)[1]

    def dataset_derivations(self, name: str, version: int) -> list[dict]:
        return self.call("GET", f"/datasets/{quote(name)}/{version}/derivations")[1]["derivations"]

    def reprocess(self, dataset: str, recipe: str) -> dict:
        return self.call("POST", f"/datasets/{quote(dataset)}/reprocess", {"recipe": recipe})[1]

    def claim(self, ce_id: str, site: str, now: float | None = None) -> dict | None:
        body = {"ce_id": ce_id, "site": site}
        if now is not None:
            body["now"] = format_ts(now)
        status, out = self.call("POST", "/work/claim", body)
        return None if status == 204 else out

    def derivation(self, did: str) -> dict:
        return self.call("GET", f"/derivations/{did}")[1]

    def complete(self, did: str, provenance: dict, uri: str | None = None) -> str:
        body = {"provenance": provenance}
        if uri is not None:
            body["uri"] = uri
        return self.call("POST", f"/derivations/{did}/complete", body)[1]["result"]

    def fail(self, did: str, ce_id: str, reason: str = "") -> str:
        return self.call("POST", f"/derivations/{did}/fail", {"ce_id": ce_id, "reason": reason})[1]["state"]

    def retry(self, did: str) -> None:
        self.call("POST", f"/derivations/{did}/retry", {})

    def provenance(self, did: str) -> dict:
        return self.call("GET", f"/derivations/{did}/provenance")[1]

    def gc(self, now: float | None = None) -> list[str]:
        body = {} if now is None else {"now": format_ts(now)}
        return self.call("POST", "/gc", body)[1]["requeued"]

    def materialize(self, target: str) -> dict:
        return self.call("POST", "/materialize", {"target": target})[1]

    def replicas(self, object_id: str) -> list[dict]:
        return self.call("GET", f"/replicas/{object_id}")[1]["replicas"]

    def add_replica(self, doc: dict) -> None:
        self.call("POST", "/replicas", doc)

    def delete_replicas(self, object_id: str) -> int:
        return self.call("DELETE", f"/replicas/{object_id}")[1]["deleted"]

    def status(self) -> dict:
        return self.call("GET", "/status")[1]
