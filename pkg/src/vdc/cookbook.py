"""The cookbook: transformation, recipe, dataset/derivation and replica catalogs.

All state lives in :class:`CatalogState` and changes only through
:meth:`CatalogState.apply`, one journal event at a time. Live operations
validate, write the event ahead, then apply it; recovery applies the same
events read back from disk, so the two paths cannot drift apart.
"""

from __future__ import annotations

import heapq
import logging
import threading
import time
from dataclasses import dataclass, replace
from typing import Any, Callable

from . import errors
from .identity import IMPLICIT_PARAMS, ObjectId, canonical_encode, expand_partitions
from .journal import Journal, scan
from .model import (
    DOMAINS,
    Dataset,
    Derivation,
    ParamDomain,
    ProvenanceRecord,
    Recipe,
    Replica,
    State,
    Transformation,
    format_ts,
    parse_ts,
)

log = logging.getLogger(__name__)


@dataclass
class DatasetRecord:
    dataset: Dataset
    members: list[ObjectId]  # derivation id per partition
    created: int = 0
    linked: int = 0


@dataclass
class Composition:
    dataset: Dataset
    derivations: list[Derivation]
    created: int
    linked: int


class CatalogState:
    def __init__(self):
        self.transformations: dict[tuple[str, int], Transformation] = {}
        self.recipes: dict[str, Recipe] = {}
        self.datasets: dict[tuple[str, int], DatasetRecord] = {}
        self.derivations: dict[ObjectId, Derivation] = {}
        self.by_output: dict[ObjectId, ObjectId] = {}
        self.replicas: dict[ObjectId, list[Replica]] = {}
        self.sites: dict[str, str] = {}
        self.incidents: list[dict] = []
        self.downtime: list[tuple[str, str]] = []
        self.last_seq = 0
        self.last_ts: str | None = None
        self._next_order = 0
        # derived indexes, rebuilt by apply()
        self.claimed: dict[ObjectId, Derivation] = {}
        self._ready: list[tuple[int, bytes, ObjectId]] = []
        self._waiting: dict[ObjectId, set[ObjectId]] = {}

    # -- queries ---------------------------------------------------------

    def available(self, object_id: ObjectId) -> bool:
        return bool(self.replicas.get(object_id))

    def latest_dataset(self, name: str) -> DatasetRecord | None:
        versions = [v for (n, v) in self.datasets if n == name]
        return self.datasets[(name, max(versions))] if versions else None

    def producer(self, object_id: ObjectId) -> Derivation | None:
        did = self.by_output.get(object_id)
        return None if did is None else self.derivations[did]

    def pop_ready(self) -> Derivation | None:
        """Next claimable derivation: DEFINED with every input replicated."""
        while self._ready:
            _, _, did = heapq.heappop(self._ready)
            d = self.derivations[did]
            if d.state is not State.DEFINED:
                continue
            if not all(self.available(i) for i in d.input_ids):
                self._enqueue(d)
                continue
            return d
        return None

    def push_ready(self, d: Derivation) -> None:
        heapq.heappush(self._ready, (d.seq, d.id.digest, d.id))

    def to_json(self) -> dict:
        """Deterministic dump of everything replay must reproduce."""
        return {
            "transformations": [self.transformations[k].to_json() for k in sorted(self.transformations)],
            "recipes": [self.recipes[k].to_json() for k in sorted(self.recipes)],
            "datasets": [
                {"dataset": r.dataset.to_json(), "members": [str(m) for m in r.members],
                 "created": r.created, "linked": r.linked}
                for _, r in sorted(self.datasets.items())
            ],
            "derivations": [d.to_json() for d in sorted(self.derivations.values(), key=lambda d: d.seq)],
            "replicas": [
                r.to_json() for oid in sorted(self.replicas) for r in self.replicas[oid]
            ],
            "sites": dict(sorted(self.sites.items())),
            "incidents": list(self.incidents),
            "downtime": [list(w) for w in self.downtime],
            "last_seq": self.last_seq,
        }

    def serialize(self) -> bytes:
        return canonical_encode(self.to_json())

    # -- mutation --------------------------------------------------------

    def _enqueue(self, d: Derivation) -> None:
        missing = [i for i in d.input_ids if not self.available(i)]
        if missing:
            for i in missing:
                self._waiting.setdefault(i, set()).add(d.id)
        else:
            self.push_ready(d)

    def _replica_added(self, object_id: ObjectId) -> None:
        for did in sorted(self._waiting.pop(object_id, ()), key=lambda x: x.digest):
            d = self.derivations[did]
            if d.state is State.DEFINED:
                self._enqueue(d)

    def _add_replica(self, r: Replica) -> bool:
        bucket = self.replicas.setdefault(r.object_id, [])
        if any(x.key == r.key for x in bucket):
            return False
        bucket.append(r)
        self._replica_added(r.object_id)
        return True

    def apply(self, seq: int, ts: str, event: str, payload: dict) -> None:
        handler = getattr(self, "_on_" + event, None)
        if handler is None:
            raise errors.BadRequest(f"unknown journal event {event!r}")
        handler(payload)
        self.last_seq = seq
        self.last_ts = ts

    def _on_transformation_registered(self, p):
        tx = Transformation.from_json(p["transformation"])
        self.transformations[tx.ref] = tx

    def _on_recipe_registered(self, p):
        r = Recipe.from_json(p["recipe"])
        self.recipes[r.name] = r

    def _on_recipe_validated(self, p):
        r = self.recipes[p["name"]]
        self.recipes[r.name] = replace(r, validated=True, note=p.get("note", r.note))

    def _on_site_bound(self, p):
        self.sites[p["site"]] = p["recipe"]

    def _on_dataset_composed(self, p):
        ds = Dataset.from_json(p["dataset"])
        for body in p["derivations"]:
            d = Derivation.from_json(body)
            self.derivations[d.id] = d
            self.by_output[d.output_id] = d.id
            self._next_order = max(self._next_order, d.seq + 1)
            if d.state is State.DEFINED:
                self._enqueue(d)
        members = [ObjectId.parse(m) for m in p["members"]]
        self.datasets[ds.ref] = DatasetRecord(ds, members, len(p["derivations"]), len(members) - len(p["derivations"]))

    def _on_derivation_claimed(self, p):
        d = self.derivations[ObjectId.parse(p["id"])]
        d.state = State.CLAIMED
        d.attempts += 1
        d.claim = (p["ce_id"], parse_ts(p["at"]))
        d.claim_site = p.get("site")
        if p["ce_id"] not in d.claimants:
            d.claimants.append(p["ce_id"])
        self.claimed[d.id] = d

    def _on_derivation_completed(self, p):
        d = self.derivations[ObjectId.parse(p["id"])]
        d.state = State.COMPLETED
        d.provenance = ProvenanceRecord.from_json(p["provenance"])
        d.claim = None
        self.claimed.pop(d.id, None)
        self._add_replica(Replica.from_json(p["replica"]))

    def _on_nondeterminism_incident(self, p):
        self.incidents.append(dict(p))

    def _requeue(self, d: Derivation, terminal: bool, reason: str) -> None:
        self.claimed.pop(d.id, None)
        d.claim = None
        if terminal:
            d.state = State.FAILED
            d.failure = reason
        else:
            d.state = State.DEFINED
            self._enqueue(d)

    def _on_derivation_failed(self, p):
        d = self.derivations[ObjectId.parse(p["id"])]
        self._requeue(d, p["terminal"], p.get("reason") or "failed")

    def _on_derivation_timed_out(self, p):
        d = self.derivations[ObjectId.parse(p["id"])]
        self._requeue(d, p["terminal"], "claim timeout after max attempts")

    def _on_derivation_retried(self, p):
        d = self.derivations[ObjectId.parse(p["id"])]
        d.state = State.DEFINED
        d.attempts = 0
        d.failure = None
        self._enqueue(d)

    def _on_replica_registered(self, p):
        self._add_replica(Replica.from_json(p["replica"]))

    def _on_replicas_deleted(self, p):
        oid = ObjectId.parse(p["object_id"])
        site, uri = p.get("site"), p.get("uri")
        keep = [
            r for r in self.replicas.get(oid, [])
            if (site is not None and r.site != site) or (uri is not None and r.uri != uri)
        ]
        if keep:
            self.replicas[oid] = keep
        else:
            self.replicas.pop(oid, None)

    def _on_server_started(self, p):
        if self.last_ts is not None:
            self.downtime.append((self.last_ts, p["at"]))


def replay(journal_path) -> CatalogState:
    """Rebuild catalog state from a journal file (torn tail tolerated)."""
    state = CatalogState()
    records, _ = scan(journal_path)
    for rec in records:
        state.apply(rec.seq, rec.ts, rec.event, rec.payload)
    return state


class Cookbook:
    """Catalog operations over one :class:`CatalogState`, serialized by one lock."""

    def __init__(
        self,
        journal: Journal | str | None = None,
        *,
        clock: Callable[[], float] = time.time,
        fsync: bool = True,
    ):
        if isinstance(journal, (str, bytes)) or hasattr(journal, "__fspath__"):
            journal = Journal(journal, fsync=fsync)
        self.journal: Journal | None = journal
        self.clock = clock
        self.lock = threading.RLock()
        self.state = CatalogState()
        self._seq = 0
        if journal is not None:
            for rec in journal.recovered:
                self.state.apply(rec.seq, rec.ts, rec.event, rec.payload)
            self._seq = journal.next_seq - 1
            journal.recovered = []

    def commit(self, event: str, payload: dict) -> None:
        """Write-ahead then apply. Caller holds ``self.lock``."""
        now = self.clock()
        if self.journal is not None:
            rec = self.journal.append(event, payload, now)
            seq, ts = rec.seq, rec.ts
        else:
            self._seq += 1
            seq, ts = self._seq, format_ts(now)
        self.state.apply(seq, ts, event, payload)

    def close(self) -> None:
        if self.journal is not None:
            self.journal.close()

    # -- transformations -------------------------------------------------

    def register_transformation(self, tx: Transformation) -> tuple[str, int]:
        with self.lock:
            if tx.ref in self.state.transformations:
                raise errors.DuplicateVersion(f"transformation {tx.name} v{tx.version} already exists")
            self.commit("transformation_registered", {"transformation": tx.to_json()})
            return tx.ref

    def get_transformation(self, name: str, version: int) -> Transformation:
        tx = self.state.transformations.get((name, version))
        if tx is None:
            raise errors.UnknownTransformation(f"no transformation {name} v{version}")
        return tx

    # -- recipes ---------------------------------------------------------

    def register_recipe(self, recipe: Recipe) -> str:
        with self.lock:
            if recipe.name in self.state.recipes:
                raise errors.DuplicateName(f"recipe {recipe.name!r} already exists")
            self.commit("recipe_registered", {"recipe": recipe.to_json()})
            return recipe.name

    def get_recipe(self, name: str) -> Recipe:
        r = self.state.recipes.get(name)
        if r is None:
            raise errors.UnknownRecipe(f"no recipe {name!r}")
        return r

    def mark_validated(self, name: str, note: str | None = None) -> Recipe:
        with self.lock:
            self.get_recipe(name)
            payload = {"name": name}
            if note is not None:
                payload["note"] = note
            self.commit("recipe_validated", payload)
            return self.state.recipes[name]

    def bind_site(self, site: str, recipe_name: str) -> None:
        with self.lock:
            r = self.get_recipe(recipe_name)
            if r.domain is not ParamDomain.SITE:
                raise errors.DomainViolation(f"recipe {recipe_name!r} is {r.domain.value}, not SITE")
            if self.state.sites.get(site) == recipe_name:
                return
            self.commit("site_bound", {"site": site, "recipe": recipe_name})

    # -- datasets --------------------------------------------------------

    def resolve_bindings(self, ds: Dataset, tx: Transformation) -> dict[str, dict[str, Any]]:
        """Merge schema defaults, then domain recipes, then overrides."""
        bound: dict[str, dict[str, Any]] = {d: {} for d in DOMAINS}
        for e in tx.schema:
            if not e.required:
                bound[e.domain.value][e.name] = e.default
        for domain in DOMAINS:
            rname = ds.recipes.get(domain)
            if rname is None:
                continue
            r = self.state.recipes.get(rname)
            if r is None:
                raise errors.UnknownReference(f"recipe {rname!r} is not registered")
            if r.domain.value != domain:
                raise errors.DomainViolation(f"recipe {rname!r} is {r.domain.value}, listed under {domain}")
            if not r.validated:
                raise errors.UnvalidatedRecipe(f"recipe {rname!r} has not been validated")
            for name, value in r.bindings.items():
                if name in IMPLICIT_PARAMS:
                    raise errors.DomainViolation(f"recipe {rname!r} binds partition-bound {name!r}")
                spec = tx.schema.get(name)
                if spec is None:
                    continue  # recipes are shared across transformations
                if spec.domain is not r.domain:
                    raise errors.DomainViolation(
                        f"recipe {rname!r} ({r.domain.value}) binds {name!r}, a {spec.domain.value} parameter",
                        param=name,
                    )
                bound[domain][name] = value
        for name, value in ds.overrides.items():
            if name in IMPLICIT_PARAMS:
                raise errors.DomainViolation(f"{name!r} is bound per partition and cannot be overridden")
            spec = tx.schema.get(name)
            if spec is None:
                raise errors.UnknownParameter(f"override {name!r} is not a parameter of {tx.name} v{tx.version}")
            bound[spec.domain.value][name] = value
        tx.check_bindings(bound, site_pending=True)
        return bound

    def partition_inputs(self, ds: Dataset, tx: Transformation) -> list[list[ObjectId]] | None:
        if not tx.inputs:
            if ds.inputs:
                raise errors.BadRequest(f"{tx.name} v{tx.version} takes no inputs")
            return None
        per_slot = []
        for slot in tx.inputs:
            ref = ds.inputs.get(slot.slot)
            if ref is None:
                raise errors.IncompleteBindings(f"input slot {slot.slot!r} is not wired", missing=[slot.slot])
            up = self.state.datasets.get((ref.dataset, ref.version))
            if up is None:
                raise errors.UnknownReference(f"input dataset {ref.dataset} v{ref.version} does not exist")
            up_step = self.state.transformations[up.dataset.transformation].step
            if up_step != slot.step:
                raise errors.BadRequest(
                    f"slot {slot.slot!r} expects step {slot.step!r}, dataset {ref.dataset} produces {up_step!r}"
                )
            per_slot.append([self.state.derivations[m].output_id for m in up.members])
        extra = set(ds.inputs) - {s.slot for s in tx.inputs}
        if extra:
            raise errors.BadRequest(f"unknown input slots: {', '.join(sorted(extra))}")
        return [[outs[i % len(outs)] for outs in per_slot] for i in range(ds.partitions)]

    def plan_dataset(self, ds: Dataset):
        """Expand ``ds`` without committing: (transformation, expansion, inputs)."""
        tx = self.state.transformations.get(ds.transformation)
        if tx is None:
            raise errors.UnknownReference(f"transformation {ds.transformation[0]} v{ds.transformation[1]} does not exist")
        bound = self.resolve_bindings(ds, tx)
        inputs = self.partition_inputs(ds, tx)
        return tx, expand_partitions(ds, tx, bound, inputs), inputs

    def compose_dataset(self, ds: Dataset) -> Composition:
        with self.lock:
            if ds.ref in self.state.datasets:
                raise errors.DuplicateVersion(f"dataset {ds.name} v{ds.version} already exists")
            tx, expanded, inputs = self.plan_dataset(ds)
            created, members = [], []
            order = self.state._next_order
            for index, bound, oid in expanded:
                did = Derivation.id_for(oid)
                members.append(did)
                if oid in self.state.by_output:
                    continue
                d = Derivation(
                    id=did, dataset=ds.ref, transformation=tx.ref, partition=index,
                    bound_params=bound, input_ids=list(inputs[index]) if inputs else [],
                    output_id=oid, seq=order,
                )
                order += 1
                created.append(d.to_json())
            self.commit("dataset_composed", {
                "dataset": ds.to_json(),
                "derivations": created,
                "members": [str(m) for m in members],
            })
            return Composition(
                ds, [self.state.derivations[m] for m in members], len(created), len(members) - len(created)
            )

    def get_dataset(self, name: str, version: int) -> DatasetRecord:
        rec = self.state.datasets.get((name, version))
        if rec is None:
            raise errors.UnknownDataset(f"no dataset {name} v{version}")
        return rec

    def dataset_derivations(self, name: str, version: int) -> list[Derivation]:
        return [self.state.derivations[m] for m in self.get_dataset(name, version).members]

    # -- derivations / replicas ------------------------------------------

    def get_derivation(self, did: ObjectId) -> Derivation:
        d = self.state.derivations.get(did)
        if d is None:
            raise errors.UnknownDerivation(f"no derivation {did}")
        return d

    def register_replica(self, replica: Replica) -> None:
        with self.lock:
            if any(r.key == replica.key for r in self.state.replicas.get(replica.object_id, ())):
                raise errors.DuplicateReplica(f"replica {replica.site}:{replica.uri} already registered")
            self.commit("replica_registered", {"replica": replica.to_json()})

    def find_replicas(self, object_id: ObjectId) -> list[Replica]:
        return list(self.state.replicas.get(object_id, ()))

    def delete_replicas(self, object_id: ObjectId, site: str | None = None, uri: str | None = None) -> int:
        with self.lock:
            before = len(self.state.replicas.get(object_id, ()))
            if not before:
                return 0
            payload = {"object_id": str(object_id)}
            if site is not None:
                payload["site"] = site
            if uri is not None:
                payload["uri"] = uri
            self.commit("replicas_deleted", payload)
            return before - len(self.state.replicas.get(object_id, ()))

    def status(self) -> dict:
        with self.lock:
            st = self.state
            states = {s.value: 0 for s in State}
            ces, domains, countries = set(), set(), set()
            for d in st.derivations.values():
                states[d.state.value] += 1
                if d.provenance is not None:
                    ces.add(d.provenance.compute_element)
                    domains.add(d.provenance.network_domain)
                    countries.add(d.provenance.country)
            return {
                "transformations": len(st.transformations),
                "invocations": len(st.derivations),
                "compute_elements": len(ces),
                "network_domains": len(domains),
                "countries": len(countries),
                "datasets": len(st.datasets),
                "recipes": len(st.recipes),
                "replicas": sum(len(v) for v in st.replicas.values()),
                "states": states,
                "incidents": len(st.incidents),
                "downtime_windows": [list(w) for w in st.downtime],
                "last_seq": st.last_seq,
            }

