
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from vdc import errors
from vdc.cookbook import Cookbook, replay
from vdc.identity import ObjectId
from vdc.journal import Journal, scan
from vdc.model import Dataset, Recipe, Replica, State, Transformation
from vdc.simnet import pipeline_transformation

EVGEN = {
    "name": "evgen",
    "version": 1,
    "step": "evgen",
    "schema": [
        {"name": "random_seed", "domain": "REPRO", "type": "int", "required": True},
        {"name": "events", "domain": "REPRO", "type": "int", "required": True},
        {"name": "verbosity", "domain": "APP", "type": "int", "required": False, "default": 0},
        {"name": "workdir", "domain": "SITE", "type": "string", "required": True},
    ],
    "template": "cd ${workdir} && pythia -seed ${random_seed} -n ${events} -v ${verbosity}",
}


def evgen(**changes):
    doc = dict(EVGEN, **changes)
    return Transformation.from_json(doc)


@pytest.fixture
def book():
    b = Cookbook()
    b.register_transformation(evgen())
    for r in (
        Recipe("dc1.repro.a", "REPRO", {"events": 10}),
        Recipe("dc1.app", "APP", {"verbosity": 2}),
        Recipe("dc1.site.cern", "SITE", {"workdir": "/scratch"}),
    ):
        b.register_recipe(r)
        b.mark_validated(r.name)
    return b


def ds(**kw):
    base = dict(name="ds", version=1, transformation=("evgen", 1),
                recipes={"REPRO": "dc1.repro.a", "APP": "dc1.app"}, partitions=3, base_seed=100)
    base.update(kw)
    return Dataset(**base)


# -- transformations -------------------------------------------------------

def test_register_transformation():
    b = Cookbook()
    assert b.register_transformation(evgen()) == ("evgen", 1)
    assert b.get_transformation("evgen", 1).body_hash == evgen().body_hash
    assert len(evgen().body_hash) == 32


def test_duplicate_version():
    b = Cookbook()
    b.register_transformation(evgen())
    with pytest.raises(errors.DuplicateVersion):
        b.register_transformation(evgen())
    b.register_transformation(evgen(version=2, template=EVGEN["template"] + " -x"))
    assert b.get_transformation("evgen", 1).template.text == EVGEN["template"]


def test_placeholder_missing_from_schema():
    with pytest.raises(errors.SchemaTemplateMismatch):
        evgen(template=EVGEN["template"] + " -g ${geometry}")


def test_required_param_unhoused():
    with pytest.raises(errors.SchemaTemplateMismatch):
        evgen(template="pythia -seed ${random_seed} -n ${events}")
    tx = evgen(template="pythia -seed ${random_seed} -n ${events}", consumed_internally=["workdir"])
    assert tx.consumed_internally == ("workdir",)


@pytest.mark.parametrize("entry", [
    {"name": "1bad", "domain": "REPRO", "type": "int"},
    {"name": "x", "domain": "OTHER", "type": "int"},
    {"name": "x", "domain": "REPRO", "type": "float"},
    {"name": "x", "domain": "REPRO", "type": "int", "required": False, "default": "7"},
    {"name": "x", "domain": "REPRO", "type": "int", "required": True, "default": 7},
    {"name": "random_seed", "domain": "APP", "type": "int"},
])
def test_invalid_schema(entry):
    with pytest.raises(errors.InvalidSchema):
        evgen(schema=EVGEN["schema"] + [entry], consumed_internally=[entry["name"]])


def test_duplicate_schema_name():
    with pytest.raises(errors.InvalidSchema):
        evgen(schema=EVGEN["schema"] + [EVGEN["schema"][1]])


def test_domains_partition_schema():
    tx = pipeline_transformation("pileup")
    t = Transformation.from_json(tx)
    names = [e.name for e in t.schema]
    doms = t.schema.domains()
    assert set(doms) == set(names) and set(doms.values()) <= {"REPRO", "APP", "SITE"}


# -- recipes ---------------------------------------------------------------

def test_register_recipe_and_validate():
    b = Cookbook()
    assert b.register_recipe(Recipe("dc1.site.cern", "SITE", {"workdir": "/scratch"})) == "dc1.site.cern"
    assert b.get_recipe("dc1.site.cern").validated is False
    b.mark_validated("dc1.site.cern", "checked by the production manager")
    r = b.get_recipe("dc1.site.cern")
    assert r.validated and r.note == "checked by the production manager"


def test_empty_recipe():
    with pytest.raises(errors.EmptyBindings):
        Recipe("x", "SITE", {})


def test_duplicate_recipe():
    b = Cookbook()
    b.register_recipe(Recipe.from_json({"name": "a", "domain": "APP", "bindings": {"verbosity": 1}}))
    with pytest.raises(errors.DuplicateName):
        b.register_recipe(Recipe.from_json({"name": "a", "domain": "APP", "bindings": {"verbosity": 2}}))


# -- datasets --------------------------------------------------------------

def test_compose_seeds(book):
    comp = book.compose_dataset(ds())
    assert comp.created == 3 and comp.linked == 0
    assert sorted(d.bound_params["REPRO"]["random_seed"] for d in comp.derivations) == [100, 101, 102]
    assert all(d.state is State.DEFINED for d in comp.derivations)
    assert len({d.output_id for d in comp.derivations}) == 3


def test_recompose_after_completion_links(book):
    first = book.compose_dataset(ds())
    for d in first.derivations:
        d.state = State.COMPLETED  # only identity matters here
    again = book.compose_dataset(ds(name="ds2"))
    assert again.created == 0 and again.linked == 3
    assert [d.id for d in again.derivations] == [d.id for d in first.derivations]


def test_app_change_shares_identity(book):
    book.register_recipe(Recipe("dc1.app.loud", "APP", {"verbosity": 5}, validated=True))
    a = book.compose_dataset(ds())
    b = book.compose_dataset(ds(name="other", recipes={"REPRO": "dc1.repro.a", "APP": "dc1.app.loud"}))
    assert b.linked == 3 and [d.output_id for d in a.derivations] == [d.output_id for d in b.derivations]


def test_domain_violation(book):
    book.register_recipe(Recipe("bad.site", "SITE", {"events": 10}, validated=True))
    with pytest.raises(errors.DomainViolation):
        book.compose_dataset(ds(recipes={"REPRO": "dc1.repro.a", "SITE": "bad.site"}))


def test_recipe_under_wrong_domain_key(book):
    with pytest.raises(errors.DomainViolation):
        book.compose_dataset(ds(recipes={"SITE": "dc1.repro.a"}))


def test_unvalidated_recipe(book):
    book.register_recipe(Recipe("raw", "REPRO", {"events": 3}))
    with pytest.raises(errors.UnvalidatedRecipe):
        book.compose_dataset(ds(recipes={"REPRO": "raw"}))


def test_incomplete_bindings(book):
    with pytest.raises(errors.IncompleteBindings):
        book.compose_dataset(ds(recipes={"APP": "dc1.app"}))


def test_type_mismatch(book):
    with pytest.raises(errors.TypeMismatch):
        book.compose_dataset(ds(overrides={"events": "ten"}))
    with pytest.raises(errors.TypeMismatch):
        book.compose_dataset(ds(overrides={"events": True}))


def test_unknown_references(book):
    with pytest.raises(errors.UnknownReference):
        book.compose_dataset(ds(transformation=("nope", 1)))
    with pytest.raises(errors.UnknownReference):
        book.compose_dataset(ds(recipes={"REPRO": "missing"}))


def test_zero_partitions():
    with pytest.raises(errors.ZeroPartitions):
        ds(partitions=0)


def test_overrides_win(book):
    comp = book.compose_dataset(ds(overrides={"events": 99, "verbosity": 4}, partitions=1))
    d = comp.derivations[0]
    assert d.bound_params["REPRO"]["events"] == 99 and d.bound_params["APP"]["verbosity"] == 4


def test_implicit_params_not_overridable(book):
    with pytest.raises(errors.DomainViolation):
        book.compose_dataset(ds(overrides={"random_seed": 1}))


def test_duplicate_dataset_version(book):
    book.compose_dataset(ds())
    with pytest.raises(errors.DuplicateVersion):
        book.compose_dataset(ds())


# -- replicas --------------------------------------------------------------

OID = ObjectId(b"\x07" * 32)


def test_replicas():
    b = Cookbook()
    assert b.find_replicas(OID) == []
    b.register_replica(Replica(OID, "cern", "root://cern/x"))
    assert len(b.find_replicas(OID)) == 1
    with pytest.raises(errors.DuplicateReplica):
        b.register_replica(Replica(OID, "cern", "root://cern/x"))
    b.register_replica(Replica(OID, "bnl", "root://bnl/x"))
    assert b.delete_replicas(OID, site="cern") == 1
    assert [r.site for r in b.find_replicas(OID)] == ["bnl"]


# -- journal ---------------------------------------------------------------

def _populate(path, n_extra=0):
    b = Cookbook(str(path), fsync=False)
    b.register_transformation(evgen())
    b.register_recipe(Recipe("r", "REPRO", {"events": 5}))
    b.mark_validated("r")
    b.register_recipe(Recipe("s", "SITE", {"workdir": "/w"}))
    b.compose_dataset(Dataset("d", 1, ("evgen", 1), {"REPRO": "r"}, partitions=2))
    for i in range(n_extra):
        b.register_replica(Replica(ObjectId(bytes([i]) * 32), "site", f"u{i}"))
    b.close()
    return b


def test_replay_empty(tmp_path):
    p = tmp_path / "j.ndjson"
    p.write_bytes(b"")
    st = replay(p)
    assert st.transformations == {} and st.derivations == {} and st.replicas == {}
    assert replay(tmp_path / "missing.ndjson").recipes == {}


def test_journal_record_format(tmp_path):
    import json

    p = tmp_path / "j.ndjson"
    _populate(p)
    lines = p.read_text("utf-8").splitlines()
    docs = [json.loads(l) for l in lines]
    assert [d["seq"] for d in docs] == list(range(1, len(docs) + 1))
    assert all(set(d) == {"seq", "ts", "event", "payload"} for d in docs)
    assert all(d["ts"].endswith("Z") for d in docs)


def test_torn_write_dropped(tmp_path):
    p = tmp_path / "j.ndjson"
    _populate(p)  # 5 events
    full = p.read_bytes()
    lines = full.splitlines(keepends=True)
    assert len(lines) == 5
    after5 = replay(p).serialize()
    # a sixth event cut mid-line
    _populate(tmp_path / "six.ndjson", n_extra=1)
    sixth = (tmp_path / "six.ndjson").read_bytes().splitlines(keepends=True)[5]
    p.write_bytes(full + sixth[: len(sixth) // 2])
    assert replay(p).serialize() == after5
    # reopening for write truncates the torn tail and appends cleanly
    b = Cookbook(str(p), fsync=False)
    b.register_replica(Replica(OID, "x", "y"))
    b.close()
    records, _ = scan(p)
    assert [r.seq for r in records] == [1, 2, 3, 4, 5, 6]


def test_replay_idempotent(tmp_path):
    p = tmp_path / "j.ndjson"
    _populate(p, n_extra=3)
    assert replay(p).serialize() == replay(p).serialize()


def test_corrupt_mid_file(tmp_path):
    p = tmp_path / "j.ndjson"
    _populate(p)
    lines = p.read_bytes().splitlines(keepends=True)
    lines[2] = b'{"seq": 3, "ts": "x", "event": \n'
    p.write_bytes(b"".join(lines))
    with pytest.raises(errors.CorruptRecord) as info:
        replay(p)
    assert info.value.line == 3
    with pytest.raises(errors.CorruptRecord):
        Journal(p)


def test_live_state_equals_replay(tmp_path):
    p = tmp_path / "j.ndjson"
    b = Cookbook(str(p), fsync=False)
    b.register_transformation(evgen())
    b.register_recipe(Recipe("r", "REPRO", {"events": 5}))
    b.mark_validated("r")
    b.compose_dataset(Dataset("d", 1, ("evgen", 1), {"REPRO": "r"}, partitions=4))
    live = b.state.serialize()
    b.close()
    assert replay(p).serialize() == live


# randomized event sequences: state(journal) == state(replay(write(journal)))

ops = st.lists(
    st.one_of(
        st.tuples(st.just("recipe"), st.integers(0, 5), st.sampled_from(["REPRO", "APP", "SITE"]), st.integers(0, 9)),
        st.tuples(st.just("validate"), st.integers(0, 5)),
        st.tuples(st.just("replica"), st.integers(0, 3), st.integers(0, 2)),
        st.tuples(st.just("unreplicate"), st.integers(0, 3)),
        st.tuples(st.just("dataset"), st.integers(0, 3), st.integers(1, 4), st.integers(0, 5)),
    ),
    max_size=25,
)


@given(ops)
@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
def test_replay_determinism(tmp_path_factory, seq):
    p = tmp_path_factory.mktemp("j") / "journal.ndjson"
    b = Cookbook(str(p), fsync=False)
    b.register_transformation(evgen())
    for op in seq:
        try:
            if op[0] == "recipe":
                _, i, dom, v = op
                key = {"REPRO": "events", "APP": "verbosity", "SITE": "workdir"}[dom]
                b.register_recipe(Recipe(f"r{i}", dom, {key: v if dom != "SITE" else f"/w{v}"}))
            elif op[0] == "validate":
                b.mark_validated(f"r{op[1]}")
            elif op[0] == "replica":
                b.register_replica(Replica(ObjectId(bytes([op[1]]) * 32), f"s{op[2]}", f"u{op[2]}"))
            elif op[0] == "unreplicate":
                b.delete_replicas(ObjectId(bytes([op[1]]) * 32))
            else:
                _, i, n, r = op
                b.compose_dataset(Dataset(f"d{i}", 1, ("evgen", 1), {"REPRO": f"r{r}"}, partitions=n, base_seed=i))
        except errors.VDCError:
            pass
    live = b.state.serialize()
    b.close()
    assert replay(p).serialize() == live
    # and replay of a replay-written journal is a fixed point
    assert replay(p).serialize() == replay(p).serialize()


@given(st.lists(st.tuples(st.integers(1, 5), st.integers(0, 50), st.integers(-3, 3)), min_size=1, max_size=6))
@settings(max_examples=40, deadline=None)
def test_memoization_no_duplicates(datasets):
    b = Cookbook()
    b.register_transformation(evgen())
    b.register_recipe(Recipe("r", "REPRO", {"events": 5}, validated=True))
    for round_ in range(2):
        for k, (n, seed, stride) in enumerate(datasets):
            b.compose_dataset(Dataset(f"d{k}.{round_}", 1, ("evgen", 1), {"REPRO": "r"},
                                      partitions=n, base_seed=seed, seed_stride=stride))
    outputs = [d.output_id for d in b.state.derivations.values()]
    assert len(outputs) == len(set(outputs))
    expected = {(seed + i * stride, i) for n, seed, stride in datasets for i in range(n)}
    assert len(outputs) == len(expected)
