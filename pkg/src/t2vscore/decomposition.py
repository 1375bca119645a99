"""Prompt decomposition into semantic elements and dependency tuples via an LLM.

The LLM returns a JSON block (element list plus ``[head, dependent]``
tuples); it is validated locally and the model is re-prompted with the list
of violations up to ``max_retries`` times.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources

from .backends import ChatBackend, Message, TextPart, user_request

log = logging.getLogger(__name__)

KINDS = (
    "object", "attribute", "action", "count", "spatial_relation",
    "temporal_relation", "camera", "style", "global",
)
GLOBAL_KINDS = frozenset({"camera", "style", "global"})
DYNAMIC_KINDS = frozenset({"action", "temporal_relation", "camera"})
TEMPLATE_VERSION = "decompose_v1"

_STOPWORDS = frozenset(
    "a an the of in on at to with and or is are be by for from into onto its it this that "
    "as while over under".split()
)


class DecompositionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SemanticElement:
    element_id: int
    surface_text: str
    kind: str

    @property
    def is_global(self) -> bool:
        return self.kind in GLOBAL_KINDS


@dataclass(frozen=True)
class EntityTuple:
    head: int
    dependent: int


@dataclass(frozen=True)
class EntityGraph:
    prompt_text: str
    elements: tuple[SemanticElement, ...]
    tuples: tuple[EntityTuple, ...] = ()
    transcript: tuple[str, ...] = field(default=(), compare=False, repr=False)

    def element(self, element_id: int) -> SemanticElement:
        for e in self.elements:
            if e.element_id == element_id:
                return e
        raise KeyError(element_id)

    def ids(self) -> set[int]:
        return {e.element_id for e in self.elements}

    def non_global_ids(self) -> set[int]:
        return {e.element_id for e in self.elements if not e.is_global}

    def has_dynamic(self) -> bool:
        return any(e.kind in DYNAMIC_KINDS for e in self.elements)

    def depth(self) -> dict[int, int]:
        """Longest dependency chain above each element (roots are 0). Assumes a DAG."""
        parents: dict[int, list[int]] = {i: [] for i in self.ids()}
        for t in self.tuples:
            parents.setdefault(t.dependent, []).append(t.head)
        memo: dict[int, int] = {}

        def d(i):
            if i not in memo:
                memo[i] = 1 + max((d(p) for p in parents.get(i, [])), default=-1)
            return memo[i]

        return {i: d(i) for i in sorted(parents)}

    def to_json(self) -> dict:
        return {
            "prompt_text": self.prompt_text,
            "elements": [{"id": e.element_id, "text": e.surface_text, "kind": e.kind} for e in self.elements],
            "tuples": [[t.head, t.dependent] for t in self.tuples],
        }

    @classmethod
    def from_json(cls, obj: dict, prompt_text: str | None = None) -> "EntityGraph":
        return parse_graph(obj, prompt_text if prompt_text is not None else obj.get("prompt_text", ""))


def parse_graph(obj, prompt_text: str) -> EntityGraph:
    if not isinstance(obj, dict):
        raise ValueError("expected a JSON object with 'elements' and 'tuples'")
    elements = []
    for e in obj.get("elements", []):
        try:
            elements.append(SemanticElement(int(e["id"]), str(e["text"]).strip(), str(e["kind"]).strip().lower()))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"bad element {e!r}: {exc}") from None
    tuples = []
    for t in obj.get("tuples", []):
        try:
            head, dep = t
            tuples.append(EntityTuple(int(head), int(dep)))
        except (TypeError, ValueError):
            raise ValueError(f"bad tuple {t!r}") from None
    return EntityGraph(prompt_text, tuple(elements), tuple(tuples))


def _find_cycle(graph: EntityGraph) -> list[int] | None:
    children: dict[int, list[int]] = {}
    for t in graph.tuples:
        children.setdefault(t.head, []).append(t.dependent)
    state: dict[int, int] = {}
    stack: list[int] = []

    def visit(n):
        state[n] = 1
        stack.append(n)
        for c in children.get(n, []):
            if state.get(c) == 1:
                return stack[stack.index(c):] + [c]
            if c not in state:
                found = visit(c)
                if found:
                    return found
        stack.pop()
        state[n] = 2
        return None

    for n in sorted(children):
        if n not in state:
            found = visit(n)
            if found:
                return found
    return None


def validate_graph(g: EntityGraph) -> list[str]:
    """All invariant violations of ``g``; empty when the graph is valid."""
    problems = []
    if not g.elements:
        problems.append("graph has no elements")
    ids = [e.element_id for e in g.elements]
    for i in sorted({i for i in ids if ids.count(i) > 1}):
        problems.append(f"element id {i} is used more than once")
    for e in g.elements:
        if not e.surface_text:
            problems.append(f"element {e.element_id} has empty text")
        if e.kind not in KINDS:
            problems.append(f"element {e.element_id} ({e.surface_text!r}) has unknown kind {e.kind!r}")
    known = set(ids)
    for t in g.tuples:
        if t.head == t.dependent:
            problems.append(f"tuple ({t.head}, {t.dependent}) relates an element to itself")
        for side in (t.head, t.dependent):
            if side not in known:
                problems.append(f"tuple ({t.head}, {t.dependent}) references unknown element {side}")
    if not any("itself" in p for p in problems):
        cycle = _find_cycle(g)
        if cycle:
            problems.append("dependency cycle: " + " -> ".join(map(str, cycle)))
    return problems


def uncovered_words(g: EntityGraph) -> list[str]:
    """Content words of the prompt that no element mentions."""
    covered = " ".join(e.surface_text.lower() for e in g.elements)
    covered_words = set(re.findall(r"[\w'-]+", covered))
    words = re.findall(r"[\w'-]+", g.prompt_text.lower())
    return [w for w in words if w not in _STOPWORDS and w not in covered_words]


def extract_json(text: str):
    """First JSON object or array embedded in ``text`` (code fences allowed)."""
    dec = json.JSONDecoder()
    for m in re.finditer(r"[\[{]", text):
        try:
            obj, _ = dec.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        return obj
    raise ValueError("no JSON found in model output")


def load_template(name: str) -> str:
    return resources.files("t2vscore").joinpath("assets", f"{name}.txt").read_text(encoding="utf-8")


def decompose(prompt: str, backend: ChatBackend, max_retries: int = 2, model_id: str | None = None) -> EntityGraph:
    prompt = prompt.strip()
    if not prompt:
        raise DecompositionError("empty prompt")
    text = load_template(TEMPLATE_VERSION).replace("{prompt}", prompt)
    model = model_id or backend.profile.model_id
    history: list[Message] = []
    transcript: list[str] = []
    problems: list[str] = []
    for attempt in range(max_retries + 1):
        req = user_request(text, model_id=model, history=history)
        reply = backend.complete(req)
        transcript.append(reply)
        try:
            graph = parse_graph(extract_json(reply), prompt)
            problems = validate_graph(graph)
        except ValueError as exc:
            problems = [str(exc)]
        if not problems:
            missing = uncovered_words(graph)
            if missing:
                log.warning("decomposition of %r leaves words uncovered: %s", prompt, missing)
            return EntityGraph(graph.prompt_text, graph.elements, graph.tuples, tuple(transcript))
        log.info("decomposition attempt %d rejected: %s", attempt + 1, problems)
        history = list(req.messages[:-1]) + [
            req.messages[-1],
            Message("assistant", (TextPart(reply),)),
        ]
        text = ("Your previous answer is invalid:\n- " + "\n- ".join(problems)
                + "\nReturn the corrected JSON object only.")
    raise DecompositionError(f"could not decompose {prompt!r} after {max_retries + 1} attempts: {problems}")
