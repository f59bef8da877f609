"""Derivation lifecycle, dispatch, timeout garbage collection and DAG planning.

Dispatch is at-least-once: a claim that outlives ``claim_timeout`` is handed
out again, and whichever attempt reports first wins. Outputs are
deterministic, so a later report carrying the same digest is dropped and a
different digest is logged as a non-determinism incident.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Protocol, Sequence

from . import errors
from .cookbook import Cookbook
from .identity import ObjectId
from .model import (
    DatasetInput,
    Derivation,
    ParamDomain,
    ProvenanceRecord,
    Replica,
    State,
    format_ts,
)
from .templating import instantiate

log = logging.getLogger(__name__)

# Events a derivation can be subjected to. "complete_stranger" is a report from
# a CE that never claimed it; "complete_late" is one from an earlier claimant
# whose claim has since timed out or been taken over.
EVENTS = ("claim", "complete", "complete_late", "complete_stranger", "fail", "fail_stranger", "timeout", "retry")

# (state, event, at_attempt_cap) -> next state. Pairs absent from the table are
# either no-ops (claim/timeout skip non-matching states) or rejected.
TRANSITIONS: dict[tuple[State, str, bool], State] = {}
for _cap in (False, True):
    TRANSITIONS[(State.DEFINED, "claim", _cap)] = State.CLAIMED
    TRANSITIONS[(State.DEFINED, "complete_late", _cap)] = State.COMPLETED
    TRANSITIONS[(State.CLAIMED, "complete", _cap)] = State.COMPLETED
    TRANSITIONS[(State.CLAIMED, "complete_late", _cap)] = State.COMPLETED
    TRANSITIONS[(State.CLAIMED, "fail", _cap)] = State.FAILED if _cap else State.DEFINED
    TRANSITIONS[(State.CLAIMED, "timeout", _cap)] = State.FAILED if _cap else State.DEFINED
    TRANSITIONS[(State.COMPLETED, "complete", _cap)] = State.COMPLETED
    TRANSITIONS[(State.COMPLETED, "complete_late", _cap)] = State.COMPLETED
    # once completed, any report is judged by its digest alone
    TRANSITIONS[(State.COMPLETED, "complete_stranger", _cap)] = State.COMPLETED
    TRANSITIONS[(State.FAILED, "retry", _cap)] = State.DEFINED

# Pairs where the operation leaves the derivation untouched without an error.
NO_OPS = {
    (s, e) for s in State for e in ("claim", "timeout") if (s, e) != (State.DEFINED, "claim") and (s, e) != (State.CLAIMED, "timeout")
}


def next_state(state: State, event: str, capped: bool = False) -> State:
    """Declared successor of ``state`` under ``event``; raises if forbidden."""
    if (state, event, capped) in TRANSITIONS:
        return TRANSITIONS[(state, event, capped)]
    if (state, event) in NO_OPS:
        return state
    raise errors.InvalidTransition(f"{event} is not allowed in state {state.value}")


@dataclass(frozen=True)
class PlannerConfig:
    claim_timeout: float = 60.0
    max_attempts: int = 10
    gc_period: float = 30.0

    def __post_init__(self):
        if self.claim_timeout < 1:
            raise errors.BadRequest("claim_timeout must be at least one time unit")
        if self.max_attempts < 1:
            raise errors.BadRequest("max_attempts must be positive")
        if self.gc_period > self.claim_timeout:
            raise errors.BadRequest("gc_period must not exceed claim_timeout")

    def to_json(self) -> dict:
        return {"claim_timeout": self.claim_timeout, "max_attempts": self.max_attempts, "gc_period": self.gc_period}


@dataclass
class MaterializationPlan:
    target: ObjectId
    stages: list[list[ObjectId]] = field(default_factory=list)
    pruned: list[ObjectId] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "target": str(self.target),
            "stages": [[str(d) for d in stage] for stage in self.stages],
            "pruned": [str(p) for p in self.pruned],
        }

    @classmethod
    def from_json(cls, body: Mapping) -> "MaterializationPlan":
        return cls(
            ObjectId.parse(body["target"]),
            [[ObjectId.parse(d) for d in stage] for stage in body["stages"]],
            [ObjectId.parse(p) for p in body["pruned"]],
        )


class _Producer(Protocol):
    id: ObjectId
    input_ids: Sequence[ObjectId]


def plan_materialization(
    target: ObjectId,
    producers: Mapping[ObjectId, _Producer],
    available: Callable[[ObjectId], bool],
) -> MaterializationPlan:
    """Resolve what must run to obtain ``target``.

    ``producers`` maps an object id to the derivation producing it;
    ``available`` says whether a replica exists. Derivations are grouped by
    longest path from an available (or source) input, upstream first.
    """
    if available(target):
        return MaterializationPlan(target, [], [target])
    if target not in producers:
        raise errors.UnknownObject(f"{target} has no replica and no producing derivation")

    depth: dict[ObjectId, int] = {}
    on_path: set[ObjectId] = set()
    pruned: set[ObjectId] = set()
    ids: dict[ObjectId, ObjectId] = {}

    def visit(oid: ObjectId) -> int:
        if oid in depth:
            return depth[oid]
        if oid in on_path:
            raise errors.CycleDetected(f"derivation graph has a cycle through {oid}")
        on_path.add(oid)
        d = producers[oid]
        below = -1
        for inp in d.input_ids:
            if available(inp):
                pruned.add(inp)
            elif inp in producers:
                below = max(below, visit(inp))
            else:
                raise errors.UnknownObject(f"input {inp} has no replica and no producing derivation")
        on_path.discard(oid)
        depth[oid] = below + 1
        ids[oid] = d.id
        return depth[oid]

    visit(target)
    stages: list[list[ObjectId]] = [[] for _ in range(max(depth.values()) + 1)]
    for oid, k in depth.items():
        stages[k].append(ids[oid])
    for stage in stages:
        stage.sort()
    return MaterializationPlan(target, stages, sorted(pruned))


@dataclass
class ReprocessResult:
    dataset: tuple[str, int]
    invalidated: list[ObjectId]
    reused: int
    versions: list[tuple[str, int]]

    @property
    def invalidated_count(self) -> int:
        return len(self.invalidated)

    def to_json(self) -> dict:
        return {
            "dataset": {"name": self.dataset[0], "version": self.dataset[1]},
            "invalidated": len(self.invalidated),
            "reused": self.reused,
            "invalidated_ids": [str(i) for i in self.invalidated],
            "versions": [{"name": n, "version": v} for n, v in self.versions],
        }


class Planner:
    def __init__(self, cookbook: Cookbook, config: PlannerConfig | None = None):
        self.book = cookbook
        self.config = config or PlannerConfig()

    @property
    def state(self):
        return self.book.state

    def _now(self, now: float | None) -> float:
        return self.book.clock() if now is None else now

    # -- dispatch --------------------------------------------------------

    def site_bindings(self, site: str) -> dict:
        rname = self.state.sites.get(site)
        if rname is None or rname not in self.state.recipes:
            raise errors.UnknownSite(f"no SITE recipe registered for site {site!r}", site=site)
        return dict(self.state.recipes[rname].bindings)

    def render(self, d: Derivation, site: str) -> str:
        """Instantiate the recipe text for ``d`` as run at ``site``."""
        tx = self.state.transformations[d.transformation]
        site_values = self.site_bindings(site)
        bound = {k: dict(v) for k, v in d.bound_params.items()}
        for e in tx.schema.by_domain(ParamDomain.SITE):
            if e.name in site_values:
                bound["SITE"][e.name] = site_values[e.name]
        tx.check_bindings(bound, site_pending=False)
        flat = {**bound["REPRO"], **bound["APP"], **bound["SITE"]}
        return instantiate(tx.template, flat)

    def claim_next(self, ce_id: str, site: str, now: float | None = None) -> tuple[Derivation, str] | None:
        if not ce_id:
            raise errors.BadRequest("ce_id must be non-empty")
        with self.book.lock:
            self.site_bindings(site)
            d = self.state.pop_ready()
            if d is None:
                return None
            try:
                text = self.render(d, site)
                self.book.commit("derivation_claimed", {
                    "id": str(d.id), "ce_id": ce_id, "site": site, "at": format_ts(self._now(now)),
                })
            except Exception:
                self.state.push_ready(d)
                raise
            return d, text

    def complete_derivation(self, did: ObjectId, prov: ProvenanceRecord, uri: str | None = None) -> str:
        """Record a successful run. Returns "completed", "duplicate" or "incident"."""
        with self.book.lock:
            d = self.book.get_derivation(did)
            ce = prov.compute_element
            if prov.exit_status != 0:
                raise errors.BadRequest("a completion must carry exit_status 0; report failures via fail")
            if d.state is State.CLAIMED and d.claim[0] == ce:
                event = "complete"
            elif ce in d.claimants:
                event = "complete_late"
            else:
                event = "complete_stranger"
            if d.state is State.COMPLETED:
                next_state(d.state, event)
                if d.provenance.output_digest == prov.output_digest:
                    return "duplicate"
                self.book.commit("nondeterminism_incident", {
                    "id": str(d.id), "compute_element": ce,
                    "kept_digest": d.provenance.output_digest.hex(),
                    "reported_digest": prov.output_digest.hex(),
                })
                log.warning("non-determinism on %s: %s reported a different digest", d.id, ce)
                return "incident"
            if d.state is State.FAILED or event == "complete_stranger":
                raise errors.CompleteWithoutClaim(f"{ce} holds no claim on {d.id} (state {d.state.value})")
            next_state(d.state, event)
            site = d.claim_site if (d.claim and d.claim[0] == ce and d.claim_site) else prov.network_domain
            replica = Replica(d.output_id, site, uri or f"vdc://{site}/{d.output_id.hex}", prov.finished)
            self.book.commit("derivation_completed", {
                "id": str(d.id), "provenance": prov.to_json(), "replica": replica.to_json(),
            })
            return "completed"

    def fail_derivation(self, did: ObjectId, ce_id: str, reason: str = "") -> State:
        with self.book.lock:
            d = self.book.get_derivation(did)
            if d.state is not State.CLAIMED or d.claim[0] != ce_id:
                raise errors.NotClaimant(f"{ce_id} is not the current claimant of {d.id}")
            terminal = d.attempts >= self.config.max_attempts
            self.book.commit("derivation_failed", {
                "id": str(d.id), "ce_id": ce_id, "reason": reason, "terminal": terminal,
            })
            return d.state

    def gc_sweep(self, now: float | None = None) -> list[ObjectId]:
        """Re-queue claims older than the timeout; returns the re-queued ids."""
        with self.book.lock:
            now = self._now(now)
            expired = sorted(
                (d for d in self.state.claimed.values() if now - d.claim[1] > self.config.claim_timeout),
                key=lambda d: (d.seq, d.id),
            )
            requeued = []
            for d in expired:
                terminal = d.attempts >= self.config.max_attempts
                self.book.commit("derivation_timed_out", {"id": str(d.id), "terminal": terminal})
                if not terminal:
                    requeued.append(d.id)
            if requeued:
                log.info("gc re-queued %d derivations", len(requeued))
            return requeued

    def retry(self, did: ObjectId) -> None:
        with self.book.lock:
            d = self.book.get_derivation(did)
            next_state(d.state, "retry")
            self.book.commit("derivation_retried", {"id": str(d.id)})

    # -- on-demand materialization --------------------------------------

    def plan_materialization(self, target: ObjectId) -> MaterializationPlan:
        with self.book.lock:
            st = self.state
            producers = {oid: st.derivations[did] for oid, did in st.by_output.items()}
            return plan_materialization(target, producers, st.available)

    # -- reprocessing ----------------------------------------------------

    def _consumers(self) -> dict[tuple[str, int], list[tuple[str, int]]]:
        """Latest version of each dataset, keyed by the dataset refs it reads."""
        latest: dict[str, int] = {}
        for name, version in self.state.datasets:
            latest[name] = max(version, latest.get(name, 0))
        out: dict[tuple[str, int], list[tuple[str, int]]] = {}
        for name, version in sorted(latest.items()):
            ds = self.state.datasets[(name, version)].dataset
            for ref in ds.inputs.values():
                out.setdefault((ref.dataset, ref.version), []).append(ds.ref)
        return out

    def reprocess(self, dataset_name: str, recipe_name: str) -> ReprocessResult:
        """Swap one recipe into a dataset and re-derive what that changes.

        The dataset gets a new version; so does every downstream dataset
        (latest versions only) that consumes an output whose identity moved.
        Partitions whose identity did not move reuse the existing derivation.
        """
        with self.book.lock:
            st = self.state
            root = st.latest_dataset(dataset_name)
            if root is None:
                raise errors.UnknownDataset(f"no dataset named {dataset_name!r}")
            recipe = self.book.get_recipe(recipe_name)
            if not recipe.validated:
                raise errors.UnvalidatedRecipe(f"recipe {recipe_name!r} has not been validated")

            consumers = self._consumers()
            # topological order over datasets reachable downstream of the root
            order: list[tuple[str, int]] = []
            indeg: dict[tuple[str, int], int] = {}
            frontier = [root.dataset.ref]
            seen = {root.dataset.ref}
            while frontier:
                ref = frontier.pop()
                for c in consumers.get(ref, ()):
                    if c not in seen:
                        seen.add(c)
                        frontier.append(c)
            for ref in seen:
                ds = st.datasets[ref].dataset
                indeg[ref] = sum(1 for i in ds.inputs.values() if (i.dataset, i.version) in seen)
            ready = sorted(r for r, n in indeg.items() if n == 0)
            while ready:
                ref = ready.pop(0)
                order.append(ref)
                for c in consumers.get(ref, ()):
                    if c in indeg:
                        indeg[c] -= 1
                        if indeg[c] == 0:
                            ready.append(c)
                            ready.sort()

            remap: dict[tuple[str, int], tuple[str, int]] = {}
            invalidated: list[ObjectId] = []
            reused = 0
            versions: list[tuple[str, int]] = []
            changed_outputs: set[ObjectId] = set()
            for ref in order:
                rec = st.datasets[ref]
                ds = rec.dataset
                old_members = [st.derivations[m] for m in rec.members]
                if ref == root.dataset.ref:
                    recipes = dict(ds.recipes)
                    recipes[recipe.domain.value] = recipe.name
                    new_ds = replace(ds, recipes=recipes)
                else:
                    consumed = {i for d in old_members for i in d.input_ids}
                    if not consumed & changed_outputs:
                        continue
                    new_ds = ds
                new_inputs = {
                    slot: DatasetInput(*remap.get((i.dataset, i.version), (i.dataset, i.version)))
                    for slot, i in new_ds.inputs.items()
                }
                latest = st.latest_dataset(ds.name).dataset.version
                new_ds = replace(new_ds, version=latest + 1, inputs=new_inputs)
                comp = self.book.compose_dataset(new_ds)
                remap[ref] = new_ds.ref
                versions.append(new_ds.ref)
                for old, new in zip(old_members, comp.derivations):
                    if old.output_id == new.output_id:
                        reused += 1
                    else:
                        invalidated.append(old.output_id)
                        changed_outputs.add(old.output_id)
            return ReprocessResult(remap[root.dataset.ref], invalidated, reused, versions)
