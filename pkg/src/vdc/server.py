"""The central catalog server: routing, write-ahead journaling, HTTP transport.

:class:`Service` maps ``(method, path, body)`` to catalog and planner calls
and returns ``(status, body)``; it has no socket of its own, so the
in-process client and the HTTP handler share one routing table.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable
from urllib.parse import parse_qs, unquote, urlsplit

from . import errors
from .cookbook import Cookbook
from .identity import ObjectId
from .model import Dataset, ProvenanceRecord, Recipe, Replica, Transformation, format_ts, parse_ts
from .planner import Planner, PlannerConfig

log = logging.getLogger(__name__)


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8470
    journal: str | None = None
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    sites: dict[str, str] = field(default_factory=dict)
    fsync: bool = True
    background_gc: bool = True

    @classmethod
    def from_json(cls, body: dict) -> "ServerConfig":
        planner = body.get("planner", {})
        return cls(
            host=body.get("host", "127.0.0.1"),
            port=int(body.get("port", 8470)),
            journal=body.get("journal"),
            planner=PlannerConfig(**planner),
            sites=dict(body.get("sites", {})),
            fsync=bool(body.get("fsync", True)),
            background_gc=bool(body.get("background_gc", True)),
        )


_routes: list[tuple[str, re.Pattern, str]] = []


def route(method: str, pattern: str):
    regex = re.compile("^/v1" + re.sub(r"\{(\w+)\}", r"(?P<\1>[^/]+)", pattern) + "$")

    def deco(fn):
        _routes.append((method, regex, fn.__name__))
        return fn

    return deco


def _obj(text: str) -> ObjectId:
    return ObjectId.parse(unquote(text))


def _int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise errors.BadRequest(f"expected an integer, got {text!r}") from None


class Service:
    """Catalog server core. Thread-safe; every mutation is journaled first."""

    def __init__(
        self,
        config: ServerConfig | None = None,
        *,
        clock: Callable[[], float] = time.time,
    ):
        self.config = config or ServerConfig()
        self.clock = clock
        self.book = Cookbook(self.config.journal, clock=clock, fsync=self.config.fsync)
        self.planner = Planner(self.book, self.config.planner)
        with self.book.lock:
            if self.book.journal is not None:
                self.book.commit("server_started", {"at": format_ts(clock())})
            for site, recipe in self.config.sites.items():
                self.book.bind_site(site, recipe)

    def close(self) -> None:
        self.book.close()

    # -- dispatch --------------------------------------------------------

    def handle(self, method: str, path: str, body: Any = None) -> tuple[int, Any]:
        parts = urlsplit(path)
        query = {k: v[-1] for k, v in parse_qs(parts.query).items()}
        try:
            for m, regex, name in _routes:
                if m != method:
                    continue
                match = regex.match(parts.path)
                if match:
                    return getattr(self, name)(body if body is not None else {}, query, **match.groupdict())
            raise errors.RouteNotFound(f"no route for {method} {parts.path}")
        except errors.VDCError as exc:
            return exc.status, exc.to_json()
        except (KeyError, TypeError, ValueError) as exc:
            return 400, {"error": "BadRequest", "message": f"{type(exc).__name__}: {exc}"}
        except Exception as exc:  # noqa: BLE001
            log.exception("internal error on %s %s", method, path)
            return 500, {"error": "InternalError", "message": str(exc)}

    # -- catalogs --------------------------------------------------------

    @route("POST", "/transformations")
    def post_transformation(self, body, query):
        tx = Transformation.from_json(body)
        with self.book.lock:
            existing = self.book.state.transformations.get(tx.ref)
            if existing is not None:
                if existing.to_json() == tx.to_json():
                    return 200, {"name": tx.name, "version": tx.version, "body_hash": tx.body_hash.hex(), "existing": True}
                raise errors.DuplicateVersion(f"transformation {tx.name} v{tx.version} already exists")
            self.book.register_transformation(tx)
        return 201, {"name": tx.name, "version": tx.version, "body_hash": tx.body_hash.hex()}

    @route("GET", "/transformations/{name}/{version}")
    def get_transformation(self, body, query, name, version):
        return 200, self.book.get_transformation(unquote(name), _int(version)).to_json()

    @route("POST", "/recipes")
    def post_recipe(self, body, query):
        r = Recipe.from_json(body)
        with self.book.lock:
            existing = self.book.state.recipes.get(r.name)
            if existing is not None:
                if (existing.domain, dict(existing.bindings)) == (r.domain, dict(r.bindings)):
                    return 200, {"name": r.name, "existing": True}
                raise errors.DuplicateName(f"recipe {r.name!r} already exists")
            self.book.register_recipe(r)
        return 201, {"name": r.name}

    @route("GET", "/recipes/{name}")
    def get_recipe(self, body, query, name):
        return 200, self.book.get_recipe(unquote(name)).to_json()

    @route("POST", "/recipes/{name}/validate")
    def validate_recipe(self, body, query, name):
        return 200, self.book.mark_validated(unquote(name), body.get("note")).to_json()

    @route("POST", "/sites")
    def post_site(self, body, query):
        self.book.bind_site(body["site"], body["recipe"])
        return 200, {"site": body["site"], "recipe": body["recipe"]}

    @route("POST", "/datasets")
    def post_dataset(self, body, query):
        ds = Dataset.from_json(body)
        with self.book.lock:
            existing = self.book.state.datasets.get(ds.ref)
            if existing is not None:
                if existing.dataset.to_json() == ds.to_json():
                    return 200, self._composition(ds, self.book.dataset_derivations(*ds.ref), existing.created, existing.linked, True)
                raise errors.DuplicateVersion(f"dataset {ds.name} v{ds.version} already exists")
            comp = self.book.compose_dataset(ds)
        return 201, self._composition(ds, comp.derivations, comp.created, comp.linked, False)

    @staticmethod
    def _composition(ds, derivations, created, linked, existing):
        out = {
            "dataset": {"name": ds.name, "version": ds.version},
            "created": created,
            "linked": linked,
            "derivations": [d.summary() for d in derivations],
        }
        if existing:
            out["existing"] = True
        return out

    @route("GET", "/datasets/{name}/{version}")
    def get_dataset(self, body, query, name, version):
        rec = self.book.get_dataset(unquote(name), _int(version))
        return 200, rec.dataset.to_json()

    @route("GET", "/datasets/{name}/{version}/derivations")
    def get_dataset_derivations(self, body, query, name, version):
        with self.book.lock:
            ds = self.book.dataset_derivations(unquote(name), _int(version))
            return 200, {"derivations": [d.summary() for d in ds]}

    @route("POST", "/datasets/{name}/reprocess")
    def post_reprocess(self, body, query, name):
        return 200, self.planner.reprocess(unquote(name), body["recipe"]).to_json()

    # -- work ------------------------------------------------------------

    def _now(self, body) -> float | None:
        at = body.get("now")
        return None if at is None else parse_ts(at)

    @route("POST", "/work/claim")
    def post_claim(self, body, query):
        ce_id = body.get("ce_id", "")
        site = body.get("site", "")
        got = self.planner.claim_next(ce_id, site, self._now(body))
        if got is None:
            return 204, None
        d, text = got
        with self.book.lock:
            return 200, {"derivation": d.to_json(), "recipe": text}

    @route("GET", "/derivations/{did}")
    def get_derivation(self, body, query, did):
        with self.book.lock:
            return 200, self.book.get_derivation(_obj(did)).to_json()

    @route("POST", "/derivations/{did}/complete")
    def post_complete(self, body, query, did):
        prov = ProvenanceRecord.from_json(body["provenance"])
        if "output_digest" in body and body["output_digest"] != prov.output_digest.hex():
            raise errors.BadRequest("output_digest disagrees with the provenance record")
        return 200, {"result": self.planner.complete_derivation(_obj(did), prov, body.get("uri"))}

    @route("POST", "/derivations/{did}/fail")
    def post_fail(self, body, query, did):
        st = self.planner.fail_derivation(_obj(did), body["ce_id"], body.get("reason", ""))
        return 200, {"state": st.value}

    @route("POST", "/derivations/{did}/retry")
    def post_retry(self, body, query, did):
        self.planner.retry(_obj(did))
        return 200, {"state": "DEFINED"}

    @route("GET", "/derivations/{did}/provenance")
    def get_provenance(self, body, query, did):
        with self.book.lock:
            d = self.book.get_derivation(_obj(did))
            if d.provenance is None:
                raise errors.NotFound(f"{d.id} has no provenance (state {d.state.value})")
            return 200, d.provenance.to_json()

    @route("POST", "/gc")
    def post_gc(self, body, query):
        return 200, {"requeued": [str(i) for i in self.planner.gc_sweep(self._now(body))]}

    @route("POST", "/materialize")
    def post_materialize(self, body, query):
        return 200, self.planner.plan_materialization(ObjectId.parse(body["target"])).to_json()

    # -- replicas --------------------------------------------------------

    @route("GET", "/replicas/{oid}")
    def get_replicas(self, body, query, oid):
        with self.book.lock:
            return 200, {"replicas": [r.to_json() for r in self.book.find_replicas(_obj(oid))]}

    @route("POST", "/replicas")
    def post_replica(self, body, query):
        self.book.register_replica(Replica.from_json(body, now=self.clock()))
        return 201, {"object_id": body["object_id"]}

    @route("DELETE", "/replicas/{oid}")
    def delete_replicas(self, body, query, oid):
        n = self.book.delete_replicas(_obj(oid), query.get("site"), query.get("uri"))
        return 200, {"deleted": n}

    @route("GET", "/status")
    def get_status(self, body, query):
        out = self.book.status()
        out["planner"] = self.planner.config.to_json()
        return 200, out


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    service: Service

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _dispatch(self, method: str):
        length = int(self.headers.get("Content-Length") or 0)
        body = None
        if length:
            raw = self.rfile.read(length)
            try:
                body = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                self._send(400, {"error": "BadRequest", "message": f"malformed JSON body: {exc}"})
                return
        status, out = self.service.handle(method, self.path, body)
        self._send(status, out)

    def _send(self, status: int, out: Any):
        data = b"" if out is None else json.dumps(out, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        if out is not None:
            self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        if data:
            self.wfile.write(data)

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_DELETE(self):
        self._dispatch("DELETE")


def make_http_server(service: Service, host: str, port: int) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"service": service})
    try:
        httpd = ThreadingHTTPServer((host, port), handler)
    except OSError as exc:
        raise errors.BindFailure(f"cannot listen on {host}:{port}: {exc}") from None
    httpd.daemon_threads = True
    return httpd


def serve(config: ServerConfig, *, ready: Callable[[str], None] | None = None) -> None:
    """Replay the journal, then serve until interrupted."""
    service = Service(config)
    httpd = make_http_server(service, config.host, config.port)
    host, port = httpd.server_address[:2]
    url = f"http://{host}:{port}"
    stop = threading.Event()

    def gc_loop():
        while not stop.wait(config.planner.gc_period):
            try:
                service.planner.gc_sweep()
            except Exception:  # noqa: BLE001
                log.exception("gc sweep failed")

    if config.background_gc:
        threading.Thread(target=gc_loop, name="vdc-gc", daemon=True).start()
    log.info("serving on %s (journal %s)", url, config.journal)
    if ready is not None:
        ready(url)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        stop.set()
        httpd.server_close()
        service.close()
