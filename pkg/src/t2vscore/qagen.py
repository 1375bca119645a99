"""Question/choice/answer generation from an entity graph.

One in-context prompt (instructions plus three worked examples) asks the
LLM for all questions at once. Tuples that fail local validation, and
elements left uncovered, are sent back for repair up to ``max_retries``
times; only the offending items are regenerated.

QA sets depend only on the prompt, so they are cached on disk and shared
by every video generated from the same prompt.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .backends import ChatBackend, Message, TextPart, user_request
from .decomposition import EntityGraph, extract_json, load_template

log = logging.getLogger(__name__)

ASPECTS = ("spatial", "temporal")
LABELS = "ABCDE"
TEMPLATE_VERSION = "qagen_v1"


class QAGenError(RuntimeError):
    pass


@dataclass(frozen=True)
class QAGenConfig:
    min_questions: int = 5
    max_questions: int = 12
    num_choices: int = 4
    max_retries: int = 2
    model_id: str | None = None

    def __post_init__(self):
        if not 2 <= self.num_choices <= 5:
            raise ValueError("num_choices must be in 2..5")
        if not 1 <= self.min_questions <= self.max_questions:
            raise ValueError("need 1 <= min_questions <= max_questions")

    def cache_key(self) -> str:
        return f"{TEMPLATE_VERSION}|{self.min_questions}|{self.max_questions}|{self.num_choices}|{self.model_id or ''}"


@dataclass(frozen=True)
class QATuple:
    question_id: int
    question_text: str
    choices: tuple[str, ...]
    answer_index: int
    covered_elements: frozenset
    aspect: str

    @property
    def answer(self) -> str:
        return self.choices[self.answer_index]

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "question": self.question_text,
            "choices": list(self.choices),
            "answer_index": self.answer_index,
            "elements": sorted(self.covered_elements),
            "aspect": self.aspect,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QATuple":
        return cls(int(obj["question_id"]), obj["question"], tuple(obj["choices"]),
                   int(obj["answer_index"]), frozenset(obj["elements"]), obj["aspect"])


@dataclass(frozen=True)
class QASet:
    graph: EntityGraph
    tuples: tuple[QATuple, ...]
    transcript: tuple[str, ...] = field(default=(), compare=False, repr=False)

    def __len__(self):
        return len(self.tuples)

    def to_json(self) -> dict:
        return {"graph": self.graph.to_json(), "tuples": [t.to_json() for t in self.tuples]}

    @classmethod
    def from_json(cls, obj: dict) -> "QASet":
        return cls(EntityGraph.from_json(obj["graph"]), tuple(QATuple.from_json(t) for t in obj["tuples"]))


def normalize_choice(text: str) -> str:
    return " ".join(text.casefold().split())


def tuple_problems(t: QATuple, graph: EntityGraph) -> list[str]:
    out = []
    if not t.question_text.strip():
        out.append(f"question {t.question_id}: empty question text")
    if not 2 <= len(t.choices) <= 5:
        out.append(f"question {t.question_id}: has {len(t.choices)} choices, need 2 to 5")
    if not 0 <= t.answer_index < len(t.choices):
        out.append(f"question {t.question_id}: answer index {t.answer_index} out of range for {len(t.choices)} choices")
    norm = [normalize_choice(c) for c in t.choices]
    if any(not c for c in norm):
        out.append(f"question {t.question_id}: empty choice")
    if len(set(norm)) != len(norm):
        out.append(f"question {t.question_id}: choices are not distinct")
    if t.aspect not in ASPECTS:
        out.append(f"question {t.question_id}: unknown aspect {t.aspect!r}")
    if not t.covered_elements:
        out.append(f"question {t.question_id}: covers no elements")
    unknown = sorted(set(t.covered_elements) - graph.ids())
    if unknown:
        out.append(f"question {t.question_id}: references unknown elements {unknown}")
    return out


def set_problems(s: QASet) -> list[str]:
    out = []
    covered = set().union(*(t.covered_elements for t in s.tuples)) if s.tuples else set()
    for eid in sorted(s.graph.non_global_ids() - covered):
        e = s.graph.element(eid)
        out.append(f"element {eid} ({e.surface_text!r}) is not covered by any question")
    if s.graph.has_dynamic() and not any(t.aspect == "temporal" for t in s.tuples):
        out.append("prompt has motion or change but no temporal question")
    ids = [t.question_id for t in s.tuples]
    if len(set(ids)) != len(ids):
        out.append("question ids are not unique")
    return out


def validate_qaset(s: QASet) -> list[str]:
    out = []
    for t in s.tuples:
        out.extend(tuple_problems(t, s.graph))
    return out + set_problems(s)


# --------------------------------------------------------------------------
# generation

def _answer_index(item: dict, choices: list[str]) -> int:
    if "answer_index" in item:
        return int(item["answer_index"])
    ans = item.get("answer")
    if isinstance(ans, bool):
        raise ValueError("boolean answer")
    if isinstance(ans, int):
        return ans
    ans = str(ans).strip()
    m = re.fullmatch(r"\(?([A-Ea-e])\)?[.)]?", ans)
    if m:
        return LABELS.index(m.group(1).upper())
    norm = [normalize_choice(c) for c in choices]
    if normalize_choice(ans) in norm:
        return norm.index(normalize_choice(ans))
    return -1


def _parse_item(item, qid: int) -> QATuple:
    if not isinstance(item, dict):
        raise ValueError(f"item {item!r} is not an object")
    choices = [str(c) for c in item.get("choices", [])]
    elements = item.get("elements", [])
    if isinstance(elements, (int, str)):
        elements = [elements]
    return QATuple(
        question_id=qid,
        question_text=str(item.get("question", "")).strip(),
        choices=tuple(choices),
        answer_index=_answer_index(item, choices),
        covered_elements=frozenset(int(e) for e in elements),
        aspect=str(item.get("aspect", "")).strip().lower(),
    )


def build_prompt(graph: EntityGraph, cfg: QAGenConfig) -> str:
    g = graph.to_json()
    return (load_template(TEMPLATE_VERSION)
            .replace("{min_questions}", str(cfg.min_questions))
            .replace("{max_questions}", str(cfg.max_questions))
            .replace("{num_choices}", str(cfg.num_choices))
            .replace("{prompt}", graph.prompt_text)
            .replace("{elements}", json.dumps(g["elements"]))
            .replace("{tuples}", json.dumps(g["tuples"])))


def _trim(tuples: list[QATuple], graph: EntityGraph, limit: int) -> list[QATuple]:
    """Drop trailing questions while coverage and the temporal requirement still hold."""
    out = list(tuples)
    i = len(out) - 1
    while len(out) > limit and i >= 0:
        cand = out[:i] + out[i + 1:]
        if not set_problems(QASet(graph, tuple(cand))):
            out = cand
        i -= 1
    return out


def generate_qa(graph: EntityGraph, backend: ChatBackend, cfg: QAGenConfig = QAGenConfig()) -> QASet:
    model = cfg.model_id or backend.profile.model_id
    text = build_prompt(graph, cfg)
    history: list[Message] = []
    transcript: list[str] = []
    tuples: list[QATuple] = []
    problems: list[str] = []
    next_id = 1

    for attempt in range(cfg.max_retries + 1):
        req = user_request(text, model_id=model, history=history, max_tokens=2048)
        reply = backend.complete(req)
        transcript.append(reply)
        try:
            items = extract_json(reply)
            if isinstance(items, dict):
                items = items.get("questions", [items])
            if not isinstance(items, list):
                raise ValueError("expected a JSON list of questions")
        except ValueError as exc:
            items = []
            problems = [f"unparseable output: {exc}"]
            if attempt == 0:
                # nothing usable yet; ask again for the full set
                history = list(req.messages) + [Message("assistant", (TextPart(reply),))]
                text = "That was not a valid JSON list. Return the full JSON list of questions only."
                continue

        by_id = {t.question_id: t for t in tuples}
        for item in items:
            target = item.get("replaces") if isinstance(item, dict) else None
            if target is not None and int(target) in by_id:
                qid = int(target)
            else:
                qid, next_id = next_id, next_id + 1
            try:
                by_id[qid] = _parse_item(item, qid)
            except (ValueError, TypeError) as exc:
                by_id[qid] = QATuple(qid, "", (), -1, frozenset(), "")
                log.info("question %d unparseable: %s", qid, exc)
        tuples = [by_id[k] for k in sorted(by_id)]

        qaset = QASet(graph, tuple(tuples))
        bad = {t.question_id: tuple_problems(t, graph) for t in tuples}
        bad = {k: v for k, v in bad.items() if v}
        problems = [p for v in bad.values() for p in v] + set_problems(qaset)
        good = [t for t in tuples if t.question_id not in bad]
        if len(good) < cfg.min_questions and not bad:
            problems.append(f"only {len(good)} questions, need at least {cfg.min_questions}")
        if not problems:
            tuples = _trim(tuples, graph, cfg.max_questions)
            if len(tuples) > cfg.max_questions:
                raise QAGenError(f"{len(tuples)} questions exceed the maximum of {cfg.max_questions}")
            renumbered = tuple(
                QATuple(i, t.question_text, t.choices, t.answer_index, t.covered_elements, t.aspect)
                for i, t in enumerate(tuples, 1)
            )
            return QASet(graph, renumbered, tuple(transcript))

        log.info("QA generation attempt %d rejected: %s", attempt + 1, problems)
        history = list(req.messages) + [Message("assistant", (TextPart(reply),))]
        lines = ["Some questions need fixing:"] + [f"- {p}" for p in problems]
        if bad:
            lines.append('For each broken question return a corrected item with "replaces": <question number> '
                         f"(questions are numbered from 1 in order; broken: {sorted(bad)}).")
        lines.append("Add new items (without \"replaces\") for anything not yet covered. "
                     "Return only a JSON list of the corrected and new items.")
        text = "\n".join(lines)

    raise QAGenError(f"QA generation for {graph.prompt_text!r} failed after "
                     f"{cfg.max_retries + 1} attempts: {problems}")


# --------------------------------------------------------------------------
# disk cache

def cache_path(cache_dir, prompt: str, cfg: QAGenConfig) -> Path:
    key = hashlib.sha256(f"{prompt}\0{cfg.cache_key()}".encode("utf-8")).hexdigest()[:24]
    return Path(cache_dir) / f"qa_{key}.json"


def load_cached(cache_dir, prompt: str, cfg: QAGenConfig) -> QASet | None:
    p = cache_path(cache_dir, prompt, cfg)
    if not p.exists():
        return None
    s = QASet.from_json(json.loads(p.read_text(encoding="utf-8")))
    if s.graph.prompt_text != prompt or validate_qaset(s):
        log.warning("ignoring stale or invalid QA cache entry %s", p)
        return None
    return s


def save_cached(cache_dir, s: QASet, cfg: QAGenConfig) -> Path:
    p = cache_path(cache_dir, s.graph.prompt_text, cfg)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(s.to_json(), indent=1, sort_keys=True, ensure_ascii=False), encoding="utf-8")
    return p
