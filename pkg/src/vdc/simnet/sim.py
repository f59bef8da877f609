"""Desk-scale replay of a grid production run against the catalog server.

Compute elements are agents stepped once per discrete tick in a seeded
order, so a given :class:`SimConfig` always produces the same report. Each
agent claims a derivation, "runs" it for a few ticks, and reports back;
injected crashes leave claims dangling for the server's garbage collector,
and outage windows make every request fail until the window closes.
"""

from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import asdict, dataclass, field

from .. import errors
from ..client import Client, LocalTransport, ServerUnreachable
from ..model import format_ts
from ..planner import PlannerConfig
from ..server import ServerConfig, Service
from .transform import simulated_transform

log = logging.getLogger(__name__)

STEPS = ("evgen", "simul", "pileup", "digit")
STEP_INPUTS = {
    "evgen": [],
    "simul": [("generated", "evgen")],
    "pileup": [("signal", "simul"), ("minbias", "evgen")],
    "digit": [("piled", "pileup")],
}
# one extra REPRO knob per step, so identities differ by step semantics too
STEP_PARAM = {
    "evgen": {"name": "process", "domain": "REPRO", "type": "string", "required": False, "default": "minbias"},
    "simul": {"name": "geometry", "domain": "REPRO", "type": "string", "required": False, "default": "DC1-initial"},
    "pileup": {"name": "luminosity", "domain": "REPRO", "type": "decimal-string", "required": False, "default": "2.0"},
    "digit": {"name": "noise", "domain": "REPRO", "type": "bool", "required": False, "default": True},
}
# simulated epoch for deterministic runs: DC1 ran through 2002-2003
EPOCH = 1025481600.0  # 2002-07-01T00:00:00Z


def pipeline_transformation(step: str, name: str | None = None, version: int = 1) -> dict:
    """Wire document for a stand-in transformation of one pipeline step."""
    name = name or step
    extra = STEP_PARAM[step]
    template = (
        f"#!/bin/sh\n# {step} partition ${{partition_index}}\n"
        f"cd ${{workdir}}\n"
        f"athena.py -l ${{verbosity}} -c 'EvtMax=${{events}}; RndmSeed=${{random_seed}}; "
        f"{extra['name']}=\"${{{extra['name']}}}\"' {step}_jobOptions.py\n"
        f"echo \"exit $$?\"\n"
    )
    return {
        "name": name,
        "version": version,
        "step": step,
        "schema": [
            {"name": "random_seed", "domain": "REPRO", "type": "int", "required": True},
            {"name": "partition_index", "domain": "REPRO", "type": "int", "required": True},
            {"name": "events", "domain": "REPRO", "type": "int", "required": True},
            dict(extra),
            {"name": "verbosity", "domain": "APP", "type": "int", "required": False, "default": 0},
            {"name": "workdir", "domain": "SITE", "type": "string", "required": True},
        ],
        "template": template,
        "inputs": [{"slot": s, "step": k} for s, k in STEP_INPUTS[step]],
    }


@dataclass
class SimConfig:
    compute_elements: int = 700
    network_domains: int = 32
    countries: int = 8
    transformations: int = 100
    invocations: int = 8000
    datasets: int = 200
    ce_crash_probability: float = 0.0
    server_outage_windows: list = field(default_factory=list)
    rng_seed: int = 20021
    claim_timeout: int = 30
    gc_period: int = 5
    max_attempts: int = 10
    job_ticks: tuple = (1, 3)
    ce_restart_ticks: int = 5
    events_per_job: int = 16
    bulk_event_factor: int = 4
    max_ticks: int = 100_000
    journal: str | None = None

    def __post_init__(self):
        for key in ("compute_elements", "network_domains", "countries", "transformations",
                    "invocations", "datasets", "events_per_job", "bulk_event_factor"):
            if getattr(self, key) < 1:
                raise errors.BadRequest(f"{key} must be positive")
        if not 0.0 <= self.ce_crash_probability <= 1.0:
            raise errors.BadRequest("ce_crash_probability must lie in [0, 1]")
        self.server_outage_windows = [tuple(int(x) for x in w) for w in self.server_outage_windows]
        self.job_ticks = tuple(self.job_ticks)
        if self.job_ticks[0] < 1 or self.job_ticks[1] < self.job_ticks[0]:
            raise errors.BadRequest("job_ticks must be a (min, max) range of positive ticks")
        PlannerConfig(self.claim_timeout, self.max_attempts, self.gc_period)

    @classmethod
    def from_json(cls, body: dict) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(body) - known
        if unknown:
            raise errors.BadRequest(f"unknown SimConfig fields: {', '.join(sorted(unknown))}")
        return cls(**body)

    @classmethod
    def load(cls, path) -> "SimConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> dict:
        out = asdict(self)
        out["server_outage_windows"] = [list(w) for w in self.server_outage_windows]
        out["job_ticks"] = list(self.job_ticks)
        return out


@dataclass
class SimReport:
    invocations: int
    completed: int
    failed: int
    requeued: int
    total_claims: int
    crashes: int
    crashed_derivations: int
    crashed_then_completed: int
    stuck_claimed: int
    stuck_defined: int
    nondeterminism_incidents: int
    duplicate_reports: int
    outage_request_failures: int
    server_attributable_failures: int
    permanent_failure_fraction: float
    permanent_failure_fraction_per_claim: float
    per_dataset: dict
    vdc_share: dict
    catalog: dict
    ticks: int
    wall_clock_seconds: float

    def to_json(self) -> dict:
        return asdict(self)

    def comparable(self) -> dict:
        """Every field except wall-clock time, which no seed can fix."""
        out = self.to_json()
        out.pop("wall_clock_seconds")
        return out

    def table(self) -> str:
        rows = [
            ("Data Transformation", self.catalog.get("transformations")),
            ("Transformation Invocation", self.invocations),
            ("Compute Element", self.catalog.get("compute_elements")),
            ("Network Domain", self.catalog.get("network_domains")),
            ("Country", self.catalog.get("countries")),
            ("Datasets", len(self.per_dataset)),
            ("", ""),
            ("completed", self.completed),
            ("failed", self.failed),
            ("re-queued by gc/fail", self.requeued),
            ("claims issued", self.total_claims),
            ("CE crashes", self.crashes),
            ("crashed claims later completed", f"{self.crashed_then_completed}/{self.crashed_derivations}"),
            ("requests lost to outages", self.outage_request_failures),
            ("non-determinism incidents", self.nondeterminism_incidents),
            ("permanent-failure fraction", f"{self.permanent_failure_fraction:.6f}"),
            ("  (per claim)", f"{self.permanent_failure_fraction_per_claim:.6f}"),
            ("VDC-labelled datasets", f"{self.vdc_share['datasets_fraction']:.1%}"),
            ("VDC-labelled volume", f"{self.vdc_share['volume_fraction']:.1%}"),
            ("simulated ticks", self.ticks),
            ("wall clock (s)", f"{self.wall_clock_seconds:.2f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" if k else "" for k, v in rows)


class _Clock:
    def __init__(self, base: float):
        self.base = base
        self.tick = -1

    def now(self) -> float:
        return self.base + max(self.tick, 0)

    def at(self, tick: int) -> float:
        return self.base + tick


class _Gated:
    def __init__(self, transport, up):
        self.transport = transport
        self.up = up

    def __call__(self, method, path, body=None):
        if not self.up():
            raise ServerUnreachable("simulated", "server outage window")
        return self.transport(method, path, body)


@dataclass
class _Agent:
    ce_id: str
    site: str
    country: str
    job: dict | None = None
    started: int = 0
    finish: int = 0
    crash: bool = False
    down_until: int = 0


def dataset_plan(config: SimConfig) -> list[dict]:
    """Chains of datasets (one per pipeline step) with partitions summing to ``invocations``."""
    n_ds = min(config.datasets, config.invocations)
    steps = STEPS[: min(len(STEPS), config.transformations)]
    by_step = {s: [j for j in range(config.transformations) if j % len(STEPS) == i] for i, s in enumerate(steps)}
    base, extra = divmod(config.invocations, n_ds)
    out = []
    for d in range(n_ds):
        chain, s = divmod(d, len(steps))
        step = steps[s]
        txs = by_step[step]
        share = "vdc" if chain % 2 == 0 else "bulk"
        out.append({
            "index": d,
            "chain": chain,
            "step": step,
            "name": f"dc1.{chain:03d}.{step}",
            "tx": f"{step}.t{txs[chain % len(txs)]:03d}",
            "partitions": base + (1 if d < extra else 0),
            "share": share,
        })
    return out


def setup_production(client: Client, config: SimConfig) -> list[dict]:
    """Register transformations, recipes, sites and datasets; returns the dataset plan."""
    for j in range(config.transformations):
        step = STEPS[j % len(STEPS)]
        client.add_transformation(pipeline_transformation(step, f"{step}.t{j:03d}"))
    recipes = [
        {"name": "dc1.repro.vdc", "domain": "REPRO", "bindings": {"events": config.events_per_job}},
        {"name": "dc1.repro.bulk", "domain": "REPRO",
         "bindings": {"events": config.events_per_job * config.bulk_event_factor}},
        {"name": "dc1.app.default", "domain": "APP", "bindings": {"verbosity": 1}},
    ]
    for k in range(config.network_domains):
        recipes.append({"name": f"dc1.site.nd{k:02d}", "domain": "SITE", "bindings": {"workdir": f"/scratch/nd{k:02d}"}})
    for r in recipes:
        client.add_recipe(r)
        client.validate_recipe(r["name"], "validated by production manager")
    for k in range(config.network_domains):
        client.bind_site(f"nd{k:02d}", f"dc1.site.nd{k:02d}")

    plan = dataset_plan(config)
    names = {(p["chain"], p["step"]): p["name"] for p in plan}
    for p in plan:
        doc = {
            "name": p["name"],
            "version": 1,
            "transformation": {"name": p["tx"], "version": 1},
            "recipes": {"REPRO": f"dc1.repro.{p['share']}", "APP": "dc1.app.default"},
            "partitions": p["partitions"],
            "base_seed": 1_000_003 * (p["index"] + 1),
            "inputs": {slot: {"dataset": names[(p["chain"], up)], "version": 1} for slot, up in STEP_INPUTS[p["step"]]},
            "labels": {"share": p["share"]},
        }
        if p["step"] == "evgen":
            doc["overrides"] = {"process": f"channel{p['chain'] % 8}"}
        comp = client.compose(doc)
        p["derivations"] = [d["id"] for d in comp["derivations"]]
    return plan


def run_simulation(config: SimConfig, client: Client | None = None) -> SimReport:
    wall0 = time.perf_counter()
    rng = random.Random(config.rng_seed)
    windows = config.server_outage_windows
    clock = _Clock(EPOCH if client is None else float(int(time.time())))

    def up() -> bool:
        return not any(start <= clock.tick < start + length for start, length in windows)

    service = None
    if client is None:
        service = Service(
            ServerConfig(
                journal=config.journal,
                planner=PlannerConfig(config.claim_timeout, config.max_attempts, config.gc_period),
                fsync=False,
                background_gc=False,
            ),
            clock=clock.now,
        )
        transport = LocalTransport(service)
    else:
        transport = client.transport
    client = Client(_Gated(transport, up))
    client.status()  # ServerUnreachable propagates at startup

    try:
        return _run(config, client, clock, up, rng, wall0)
    finally:
        if service is not None:
            service.close()


def _run(config, client, clock, up, rng, wall0) -> SimReport:
    plan = setup_production(client, config)
    share_of = {did: p["share"] for p in plan for did in p["derivations"]}
    agents = [
        _Agent(f"ce{k:03d}", f"nd{k % config.network_domains:02d}", f"country{k % config.countries}")
        for k in range(config.compute_elements)
    ]
    storage: dict[str, bytes] = {}
    produced_bytes: dict[str, int] = {}
    crashed: set[str] = set()
    stats = dict(claims=0, crashes=0, requeued=0, outage=0, incidents=0, duplicates=0)
    outage_blocked: set[str] = set()

    def execute(agent: _Agent, t: int) -> None:
        d = agent.job["derivation"]
        inputs = []
        for iid in d["input_ids"]:
            reps = client.replicas(iid)
            uri = next((r["uri"] for r in reps if r["uri"] in storage), None)
            if uri is None:
                raise errors.UnknownObject(f"no readable replica of {iid}")
            inputs.append(storage[uri])
        payload, digest = simulated_transform(d, inputs)
        uri = f"vdc://{agent.site}/{d['output_id'][4:]}"
        storage[uri] = payload
        prov = {
            "compute_element": agent.ce_id,
            "network_domain": agent.site,
            "country": agent.country,
            "started": format_ts(clock.at(agent.started)),
            "finished": format_ts(clock.at(t)),
            "exit_status": 0,
            "output_bytes": len(payload),
            "output_digest": digest.hex(),
        }
        result = client.complete(d["id"], prov, uri)
        if result == "completed":
            produced_bytes[d["id"]] = len(payload)
        elif result == "incident":
            stats["incidents"] += 1
        else:
            stats["duplicates"] += 1

    def step(agent: _Agent, t: int) -> None:
        if agent.down_until > t:
            return
        if agent.job is None:
            try:
                got = client.claim(agent.ce_id, agent.site, now=clock.at(t))
            except ServerUnreachable:
                stats["outage"] += 1
                return
            if got is None:
                return
            stats["claims"] += 1
            agent.job = got
            agent.started = t
            agent.finish = t + rng.randint(*config.job_ticks)
            agent.crash = rng.random() < config.ce_crash_probability
            return
        if t < agent.finish:
            return
        if agent.crash:
            # claimed but never reported: only the server's gc can recover it
            stats["crashes"] += 1
            crashed.add(agent.job["derivation"]["id"])
            agent.job = None
            agent.down_until = t + config.ce_restart_ticks
            return
        try:
            execute(agent, t)
        except ServerUnreachable:
            stats["outage"] += 1
            outage_blocked.add(agent.job["derivation"]["id"])
            return
        except errors.CompleteWithoutClaim:
            log.info("%s lost its claim on %s", agent.ce_id, agent.job["derivation"]["id"])
        agent.job = None

    tick = 0
    while True:
        clock.tick = tick
        for agent in rng.sample(agents, len(agents)):
            step(agent, tick)
        if up():
            if tick and tick % config.gc_period == 0:
                stats["requeued"] += len(client.gc(clock.now()))
            states = client.status()["states"]
            if states["DEFINED"] == 0 and states["CLAIMED"] == 0:
                break
        tick += 1
        if tick > config.max_ticks:
            raise RuntimeError(f"simulation did not settle within {config.max_ticks} ticks")

    status = client.status()
    states = status["states"]
    per_dataset = {}
    final_state: dict[str, str] = {}
    for p in plan:
        ders = client.dataset_derivations(p["name"], 1)
        for d in ders:
            final_state[d["id"]] = d["state"]
        per_dataset[p["name"]] = {
            "partitions": p["partitions"],
            "completed": sum(d["state"] == "COMPLETED" for d in ders),
            "share": p["share"],
        }
    failed = states["FAILED"]
    n_inv = status["invocations"]
    vdc_bytes = sum(b for did, b in produced_bytes.items() if share_of.get(did) == "vdc")
    total_bytes = sum(produced_bytes.values())
    vdc_datasets = sum(1 for p in plan if p["share"] == "vdc")
    return SimReport(
        invocations=n_inv,
        completed=states["COMPLETED"],
        failed=failed,
        requeued=stats["requeued"],
        total_claims=stats["claims"],
        crashes=stats["crashes"],
        crashed_derivations=len(crashed),
        crashed_then_completed=sum(final_state.get(d) == "COMPLETED" for d in crashed),
        stuck_claimed=states["CLAIMED"],
        stuck_defined=states["DEFINED"],
        nondeterminism_incidents=status["incidents"],
        duplicate_reports=stats["duplicates"],
        outage_request_failures=stats["outage"],
        server_attributable_failures=sum(final_state.get(d) == "FAILED" for d in outage_blocked - crashed),
        permanent_failure_fraction=failed / n_inv if n_inv else 0.0,
        permanent_failure_fraction_per_claim=failed / stats["claims"] if stats["claims"] else 0.0,
        per_dataset=per_dataset,
        vdc_share={
            "datasets_fraction": vdc_datasets / len(plan),
            "volume_fraction": vdc_bytes / total_bytes if total_bytes else 0.0,
            "vdc_datasets": vdc_datasets,
            "vdc_bytes": vdc_bytes,
            "total_bytes": total_bytes,
        },
        catalog={k: status[k] for k in ("transformations", "invocations", "compute_elements", "network_domains", "countries")},
        ticks=tick,
        wall_clock_seconds=round(time.perf_counter() - wall0, 3),
    )


def execute_plan(client: Client, plan: dict, storage: dict[str, bytes], site: str = "on-demand") -> dict[str, bytes]:
    """Run a materialization plan stage by stage, registering each new replica.

    Returns the output digest of every derivation executed, keyed by output id.
    """
    digests: dict[str, bytes] = {}
    for stage in plan["stages"]:
        for did in stage:
            d = client.derivation(did)
            inputs = []
            for iid in d["input_ids"]:
                uri = next((r["uri"] for r in client.replicas(iid) if r["uri"] in storage), None)
                if uri is None:
                    raise errors.UnknownObject(f"input {iid} is not materialized")
                inputs.append(storage[uri])
            payload, digest = simulated_transform(d, inputs)
            uri = f"vdc://{site}/{d['output_id'][4:]}"
            storage[uri] = payload
            client.add_replica({"object_id": d["output_id"], "site": site, "uri": uri})
            digests[d["output_id"]] = digest
    return digests
