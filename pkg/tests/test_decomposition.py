import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from t2vscore.backends import ScriptedBackend
from t2vscore.decomposition import (DecompositionError, EntityGraph, decompose, extract_json, load_template,
                                    parse_graph, uncovered_words, validate_graph)

CAT = {"elements": [{"id": 1, "text": "cat", "kind": "object"}, {"id": 2, "text": "a", "kind": "count"},
                    {"id": 3, "text": "playing soccer", "kind": "action"}], "tuples": [[1, 2], [1, 3]]}


def graph(n, edges, prompt="p"):
    return parse_graph({"elements": [{"id": i, "text": f"e{i}", "kind": "object"} for i in range(1, n + 1)],
                        "tuples": [list(e) for e in edges]}, prompt)


def has_cycle_closure(n, edges):
    reach = [[False] * (n + 1) for _ in range(n + 1)]
    for a, b in edges:
        reach[a][b] = True
    for k in range(1, n + 1):
        for i in range(1, n + 1):
            for j in range(1, n + 1):
                reach[i][j] = reach[i][j] or (reach[i][k] and reach[k][j])
    return any(reach[i][i] for i in range(1, n + 1))


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    st.just(n), st.lists(st.tuples(st.integers(1, n), st.integers(1, n)).filter(lambda e: e[0] != e[1]), max_size=10))))
def test_cycle_detection_matches_closure(case):
    n, edges = case
    problems = validate_graph(graph(n, edges))
    assert any(p.startswith("dependency cycle") for p in problems) == has_cycle_closure(n, edges)


def test_validation_messages():
    g = parse_graph({"elements": [{"id": 1, "text": "cat", "kind": "object"},
                                  {"id": 1, "text": "", "kind": "mood"}],
                     "tuples": [[1, 1], [1, 9]]}, "a cat")
    problems = validate_graph(g)
    assert "element id 1 is used more than once" in problems
    assert "element 1 has empty text" in problems
    assert "element 1 ('') has unknown kind 'mood'" in problems
    assert "tuple (1, 1) relates an element to itself" in problems
    assert "tuple (1, 9) references unknown element 9" in problems
    assert validate_graph(EntityGraph("x", ())) == ["graph has no elements"]


def test_graph_queries():
    g = parse_graph(dict(CAT, elements=CAT["elements"] + [{"id": 4, "text": "watercolor", "kind": "style"}]),
                    "a cat playing soccer, watercolor")
    assert g.non_global_ids() == {1, 2, 3}
    assert g.has_dynamic()
    assert g.depth() == {1: 0, 2: 1, 3: 1, 4: 0}
    assert EntityGraph.from_json(g.to_json()) == g
    assert uncovered_words(g) == []
    assert uncovered_words(parse_graph(CAT, "a fluffy cat playing soccer")) == ["fluffy"]


def test_parse_graph_errors():
    with pytest.raises(ValueError):
        parse_graph([], "p")
    with pytest.raises(ValueError, match="bad element"):
        parse_graph({"elements": [{"id": "x", "text": "a", "kind": "object"}]}, "p")
    with pytest.raises(ValueError, match="bad tuple"):
        parse_graph({"elements": [], "tuples": [[1, 2, 3]]}, "p")


@pytest.mark.parametrize("text, expected", [
    ('{"a": 1}', {"a": 1}),
    ('Sure!\n```json\n[1, 2]\n```', [1, 2]),
    ('note {broken then {"ok": true}', {"ok": True}),
])
def test_extract_json(text, expected):
    assert extract_json(text) == expected


def test_extract_json_none():
    with pytest.raises(ValueError):
        extract_json("no json here")


def test_template_has_prompt_slot():
    t = load_template("decompose_v1")
    assert t.rstrip().endswith("Prompt: {prompt}")


def test_decompose_repairs_cycle():
    bad = dict(CAT, tuples=[[1, 2], [2, 1], [1, 3]])
    seen = []

    def responder(req):
        seen.append(req)
        return json.dumps(bad if len(seen) == 1 else CAT)

    g = decompose("a cat playing soccer", ScriptedBackend(responder))
    assert len(seen) == 2
    assert "dependency cycle: 1 -> 2 -> 1" in seen[1].messages[-1].text
    assert [m.role for m in seen[1].messages] == ["user", "assistant", "user"]
    assert g.tuples == parse_graph(CAT, "").tuples and len(g.transcript) == 2


def test_decompose_gives_up():
    backend = ScriptedBackend(lambda req: "I'd rather not.")
    with pytest.raises(DecompositionError, match="after 3 attempts"):
        decompose("a cat", backend, max_retries=2)
    assert backend.calls == 3
    with pytest.raises(DecompositionError, match="empty prompt"):
        decompose("   ", backend)
