"""Shared builders for tests: a controllable clock, services, a 4-step pipeline."""

from __future__ import annotations

import threading

from vdc import errors
from vdc.client import Client, LocalTransport
from vdc.cookbook import Cookbook
from vdc.model import Dataset, ProvenanceRecord, Recipe, State, Transformation, format_ts
from vdc.planner import Planner, PlannerConfig
from vdc.server import ServerConfig, Service, make_http_server
from vdc.simnet import pipeline_transformation, simulated_transform

D1 = b"\x11" * 32
D2 = b"\x22" * 32

STEPS = ("evgen", "simul", "pileup", "digit")
WIRING = {
    "evgen": {},
    "simul": {"generated": "evgen"},
    "pileup": {"signal": "simul", "minbias": "evgen"},
    "digit": {"piled": "pileup"},
}


class TickClock:
    def __init__(self, t: float = 1_000_000.0):
        self.t = t

    def __call__(self) -> float:
        return self.t


def make_service(journal=None, clock=None, **planner) -> Service:
    cfg = ServerConfig(journal=journal, planner=PlannerConfig(**planner), fsync=False, background_gc=False)
    return Service(cfg, clock=clock or TickClock())


def local_client(service: Service) -> Client:
    return Client(LocalTransport(service))


def seed_recipes(client: Client, site: str = "nd00") -> None:
    for doc in (
        {"name": "repro.small", "domain": "REPRO", "bindings": {"events": 4}},
        {"name": "repro.big", "domain": "REPRO", "bindings": {"events": 8}},
        {"name": "app.quiet", "domain": "APP", "bindings": {"verbosity": 0}},
        {"name": "app.loud", "domain": "APP", "bindings": {"verbosity": 3}},
        {"name": f"site.{site}", "domain": "SITE", "bindings": {"workdir": f"/scratch/{site}"}},
    ):
        client.add_recipe(doc)
        client.validate_recipe(doc["name"])
    client.bind_site(site, f"site.{site}")


def build_chain(client: Client, *, prefix: str = "p", partitions: int = 1, repro: str = "repro.small",
                base_seed: int = 100, steps=STEPS) -> dict[str, dict]:
    """Register one transformation per step and a dataset chain over them."""
    out = {}
    for step in steps:
        tx = pipeline_transformation(step, f"{prefix}.{step}.tx")
        client.add_transformation(tx)
        doc = {
            "name": f"{prefix}.{step}",
            "version": 1,
            "transformation": {"name": tx["name"], "version": 1},
            "recipes": {"REPRO": repro, "APP": "app.quiet"},
            "partitions": partitions,
            "base_seed": base_seed,
            "inputs": {slot: {"dataset": f"{prefix}.{up}", "version": 1} for slot, up in WIRING[step].items()},
        }
        comp = client.compose(doc)
        out[step] = {"doc": doc, "derivations": comp["derivations"]}
    return out


def run_until_idle(client: Client, storage: dict, *, ce: str = "ce0", site: str = "nd00", clock=None) -> dict:
    """Claim, execute and complete derivations until nothing is claimable.

    Returns the output digest (hex) of every derivation completed, by output id.
    """
    digests = {}
    while True:
        got = client.claim(ce, site)
        if got is None:
            return digests
        d = got["derivation"]
        inputs = [storage[client.replicas(i)[0]["uri"]] for i in d["input_ids"]]
        payload, digest = simulated_transform(d, inputs)
        uri = f"vdc://{site}/{d['output_id'][4:]}"
        storage[uri] = payload
        now = clock() if clock else 1_000_000.0
        client.complete(d["id"], provenance(ce, site, digest, len(payload), now), uri)
        digests[d["output_id"]] = digest.hex()


def provenance(ce: str, site: str, digest: bytes, size: int, at: float = 1_000_000.0, country: str = "country0") -> dict:
    return {
        "compute_element": ce,
        "network_domain": site,
        "country": country,
        "started": format_ts(at),
        "finished": format_ts(at),
        "exit_status": 0,
        "output_bytes": size,
        "output_digest": digest.hex(),
    }


class Running:
    """A real HTTP server on an ephemeral port, served from a thread."""

    def __init__(self, journal=None):
        cfg = ServerConfig(port=0, journal=journal, fsync=False, background_gc=False,
                           planner=PlannerConfig(claim_timeout=60, gc_period=30))
        self.service = Service(cfg)
        self.httpd = make_http_server(self.service, "127.0.0.1", 0)
        self.url = "http://127.0.0.1:%d" % self.httpd.server_address[1]
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        self.service.close()


class Lifecycle:
    """One evgen derivation under a planner, driven by named operations.

    Operations: ("claim", ce), ("complete", ce), ("diverge", ce) (complete with
    a different digest), ("fail", ce), ("timeout", None), ("retry", None).
    """

    def __init__(self, cap: int, journal=None):
        self.clock = TickClock()
        self.book = Cookbook(journal, clock=self.clock, fsync=False)
        self.planner = Planner(self.book, PlannerConfig(claim_timeout=10, gc_period=5, max_attempts=cap))
        self.book.register_transformation(Transformation.from_json(pipeline_transformation("evgen", "gen")))
        self.book.register_recipe(Recipe("r", "REPRO", {"events": 1}, validated=True))
        self.book.register_recipe(Recipe("s", "SITE", {"workdir": "/w"}, validated=True))
        self.book.bind_site("site", "s")
        comp = self.book.compose_dataset(Dataset("d", 1, ("gen", 1), {"REPRO": "r"}, partitions=1))
        self.did = comp.derivations[0].id

    def step(self, op):
        kind, ce = op
        p = self.planner
        try:
            if kind == "claim":
                return "claimed" if p.claim_next(ce, "site") else None
            if kind in ("complete", "diverge"):
                digest = D1 if kind == "complete" else D2
                ts = 1_025_481_600.0
                prov = ProvenanceRecord(ce, "site", "c", ts, ts, 0, 1, digest)
                return p.complete_derivation(self.did, prov)
            if kind == "fail":
                p.fail_derivation(self.did, ce)
                return "failed"
            if kind == "timeout":
                was_claimed = self._d().state is State.CLAIMED
                self.clock.t += 11
                p.gc_sweep()
                return "timed_out" if was_claimed else None
            p.retry(self.did)
            return "retried"
        except errors.VDCError as exc:
            return type(exc).__name__

    def _d(self):
        return self.book.state.derivations[self.did]

    def abstract(self):
        d = self._d()
        return (d.state.value, d.attempts, d.claim[0] if d.claim else None, frozenset(d.claimants))
