import json
import re

import pytest
from conftest import make_fsm

from protofsm.errors import ParseError, SchemaError
from protofsm.model.document import (
    FsmDocument,
    ImplementationDoc,
    TransitionEdge,
    diff_to_document,
    diff_to_dot,
    load_fsm,
    parse,
    save_fsm,
    serialize,
    to_document,
    to_dot,
)
from protofsm.model.fsm import Implementation, Transition, diff
from protofsm.model.utils import package_path


@pytest.mark.parametrize("name", ["ikev2_groundtruth.json", "strongswan.json", "libopenikev2.json", "linear.json"])
def test_shipped_documents_are_canonical(data_dir, name):
    text = (data_dir / name).read_text(encoding="utf-8")
    assert serialize(parse(text)) == text


def test_shipped_document_sizes(data_dir):
    strongswan = load_fsm(data_dir / "strongswan.json")
    libopenikev2 = load_fsm(data_dir / "libopenikev2.json")
    truth = load_fsm(data_dir / "ikev2_groundtruth.json")
    assert (len(strongswan.states), len(strongswan.transitions)) == (8, 20)
    assert (len(libopenikev2.states), len(libopenikev2.transitions)) == (22, 43)
    assert (len(truth.states), len(truth.transitions)) == (8, 23)


def test_serialize_is_sorted_and_stable():
    fsm = make_fsm(
        [("B", "Z", "A"), ("A", "Y", "B"), ("A", "X", "B")],
        initial=["A"],
        final=["B"],
        implementation=Implementation("repo", "abc"),
    )
    doc = to_document(fsm)
    assert list(doc) == [
        "protocol",
        "implementation",
        "alphabet",
        "states",
        "initial_states",
        "final_states",
        "transitions",
    ]
    assert list(doc["transitions"]) == ["A", "B"]
    assert [e["receive_message"] for e in doc["transitions"]["A"]] == ["X", "Y"]
    assert serialize(fsm) == serialize(parse(serialize(fsm)))
    assert serialize(fsm).endswith("}\n")


def test_states_without_outgoing_edges_are_omitted(linear_fsm):
    assert "C" not in to_document(linear_fsm)["transitions"]


def test_parse_canonicalizes_names():
    doc = {
        "protocol": "tls",
        "implementation": {"repo": "", "commit": ""},
        "alphabet": ["client hello"],
        "states": ["start", "wait-server-hello"],
        "initial_states": ["start"],
        "final_states": ["wait-server-hello"],
        "transitions": {"start": [{"receive_message": "Client Hello", "next_state": "wait server hello"}]},
    }
    fsm = parse(json.dumps(doc))
    assert fsm.transitions == {Transition("START", "CLIENT_HELLO", "WAIT_SERVER_HELLO")}


def test_parse_invalid_json_reports_position():
    with pytest.raises(ParseError) as excinfo:
        parse('{\n  "protocol": "x",\n  oops\n}')
    assert excinfo.value.line == 3


def test_parse_missing_and_extra_keys():
    doc = json.loads(serialize(make_fsm([("A", "M", "B")], final=["B"])))
    del doc["alphabet"]
    doc["comment"] = "not allowed"
    with pytest.raises(SchemaError) as excinfo:
        parse(json.dumps(doc))
    assert excinfo.value.missing == ["alphabet"]
    assert excinfo.value.extra == ["comment"]


def test_parse_rejects_non_object():
    with pytest.raises(SchemaError):
        parse("[1, 2, 3]")


def test_save_and_load(tmp_path, linear_fsm):
    path = save_fsm(linear_fsm, tmp_path / "out" / "fsm.json")
    assert load_fsm(path) == linear_fsm


def test_to_dot(linear_fsm):
    dot = to_dot(linear_fsm)
    assert dot.startswith('digraph "linear" {')
    assert '"A" -> "B" [label="M1"];' in dot
    assert '"C" [shape=doublecircle];' in dot
    assert '"__start0" -> "A";' in dot


def test_diff_document_and_dot(linear_fsm):
    other = make_fsm([("A", "M1", "B"), ("B", "M2", "A")], initial=["A"], final=["B"], protocol="linear")
    d = diff(linear_fsm, other)
    doc = diff_to_document(d)
    assert doc["summary"]["shared_transitions"] == 1
    assert doc["states_only_in_a"] == ["C"]
    assert doc["transitions_only_in_b"] == [{"current_state": "B", "receive_message": "M2", "next_state": "A"}]
    dot = diff_to_dot(d)
    assert '"B" -> "C" [label="M2", color=red];' in dot
    assert '"B" -> "A" [label="M2", color=blue];' in dot


# published schema


@pytest.fixture
def fsm_schema():
    return json.loads(package_path("configs/fsm.schema.json").read_text(encoding="utf-8"))


def test_schema_tracks_document_model(fsm_schema):
    assert set(fsm_schema["required"]) == set(fsm_schema["properties"]) == set(FsmDocument.model_fields)
    implementation = fsm_schema["properties"]["implementation"]
    assert set(implementation["required"]) == set(ImplementationDoc.model_fields)
    edge = fsm_schema["properties"]["transitions"]["additionalProperties"]["items"]
    assert set(edge["required"]) == set(edge["properties"]) == set(TransitionEdge.model_fields)


def _schema_problems(doc: dict, schema: dict) -> list[str]:
    name = re.compile(schema["$defs"]["name"]["pattern"])
    problems = [f"missing {key}" for key in schema["required"] if key not in doc]
    problems += [f"extra {key}" for key in doc if key not in schema["properties"]]
    if set(doc.get("implementation", {})) != {"repo", "commit"}:
        problems.append("implementation keys")
    for key in ("alphabet", "states", "initial_states", "final_states"):
        names = doc.get(key, [])
        if len(set(names)) != len(names):
            problems.append(f"duplicates in {key}")
        problems += [f"{key}: {n}" for n in names if not name.match(n)]
    for state, edges in doc.get("transitions", {}).items():
        if not name.match(state):
            problems.append(f"transition source {state}")
        for edge in edges:
            if set(edge) != {"receive_message", "next_state"}:
                problems.append(f"edge keys under {state}")
            elif not (name.match(edge["receive_message"]) and name.match(edge["next_state"])):
                problems.append(f"edge names under {state}")
    return problems


SHIPPED_DOCUMENTS = [
    "data/ikev2_groundtruth.json",
    "data/strongswan.json",
    "data/libopenikev2.json",
    "data/linear.json",
    "infer/examples/toy/golden_fsm.json",
]


@pytest.mark.parametrize("name", SHIPPED_DOCUMENTS)
def test_shipped_documents_follow_schema(fsm_schema, name):
    doc = json.loads(package_path(name).read_text(encoding="utf-8"))
    assert _schema_problems(doc, fsm_schema) == []


def test_serialized_names_follow_schema_after_canonicalization(fsm_schema):
    doc = {
        "protocol": "p",
        "implementation": {"repo": "r", "commit": "c"},
        "alphabet": ["client hello"],
        "states": ["start", "wait-finished"],
        "initial_states": ["start"],
        "final_states": ["wait-finished"],
        "transitions": {"start": [{"receive_message": "client hello", "next_state": "wait-finished"}]},
    }
    assert _schema_problems(doc, fsm_schema)
    assert _schema_problems(json.loads(serialize(parse(json.dumps(doc)))), fsm_schema) == []
