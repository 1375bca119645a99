"""Multiple-choice video question answering and the alignment score.

The alignment score of a video is the fraction of its prompt's questions
that a multimodal backend answers correctly. Free-text replies are mapped
to choice indices by :func:`normalize_answer`; replies that cannot be
mapped, and failed requests, count as wrong unless ``skip_errored`` drops
failed requests from the denominator.
"""

from __future__ import annotations

import logging
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends import BackendError, ChatBackend, ChatRequest, ImagePart, Message, TextPart
from .dataset import VideoRecord
from .frames import list_frames, read_frame, write_frame
from .qagen import LABELS, QASet, QATuple
from .trajectory import OverlayConfig, TrajectoryError, load_trajectory, overlay_frame, summarize_motion

log = logging.getLogger(__name__)

CHANNELS = ("auto", "overlay", "summary", "both", "none")


class AlignmentError(RuntimeError):
    pass


@dataclass(frozen=True)
class VQAConfig:
    frames_k: int = 8
    use_trajectory: bool = True
    channel: str = "auto"
    skip_errored: bool = False
    max_in_flight: int = 4
    batch_questions: bool = False
    overlay: OverlayConfig = OverlayConfig()
    model_id: str | None = None

    def __post_init__(self):
        if self.frames_k < 1:
            raise ValueError("frames_k must be >= 1")
        if self.channel not in CHANNELS:
            raise ValueError(f"channel must be one of {CHANNELS}")


@dataclass(frozen=True)
class VQAVerdict:
    question_id: int
    predicted_index: int | None
    correct: bool
    raw_response: str
    aspect: str
    flag: str = ""  # "", "unparseable" or "errored"

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "predicted_index": self.predicted_index,
            "correct": self.correct,
            "raw_response": self.raw_response,
            "aspect": self.aspect,
            "flag": self.flag,
        }


@dataclass(frozen=True)
class AlignmentResult:
    video_id: str
    verdicts: tuple[VQAVerdict, ...]
    score: float
    accuracy_spatial: float | None
    accuracy_temporal: float | None
    n_scored: int = 0

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "score": self.score,
            "accuracy_spatial": self.accuracy_spatial,
            "accuracy_temporal": self.accuracy_temporal,
            "n_scored": self.n_scored,
            "verdicts": [v.to_json() for v in self.verdicts],
        }


# --------------------------------------------------------------------------
# frames

def sample_frame_indices(n: int, k: int) -> list[int]:
    """``k`` evenly spaced indices into ``n`` frames, ends included.

    Index i is round(i * (n - 1) / (k - 1)) rounded half up; k == 1 takes the
    middle frame floor((n - 1) / 2); k >= n takes every frame once.
    """
    if n < 1:
        raise ValueError("video has no frames")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        return list(range(n))
    if k == 1:
        return [(n - 1) // 2]
    return [(2 * i * (n - 1) + (k - 1)) // (2 * (k - 1)) for i in range(k)]


def sample_frames(video: VideoRecord, k: int) -> list[np.ndarray]:
    files = list_frames(video.frame_source)
    return [read_frame(files[i]) for i in sample_frame_indices(len(files), k)]


@dataclass
class VideoInputs:
    frames: list[np.ndarray]
    motion_text: str | None = None
    frame_indices: list[int] = field(default_factory=list)
    overlaid: bool = False


def prepare_inputs(video: VideoRecord, cfg: VQAConfig, accepts_images: bool,
                   dump_overlays: bool = False) -> VideoInputs:
    """Sample frames and attach the trajectory channel the backend can consume."""
    files = list_frames(video.frame_source)
    idx = sample_frame_indices(len(files), cfg.frames_k)
    frames = [read_frame(files[i]) for i in idx]
    inputs = VideoInputs(frames if accepts_images else [], None, idx)
    if not cfg.use_trajectory or cfg.channel == "none" or video.trajectory_path is None:
        return inputs

    bundle = load_trajectory(video.trajectory_path)
    if bundle.frame_count != len(files):
        raise TrajectoryError(
            f"trajectory has {bundle.frame_count} frames but {video.frame_source} has {len(files)}")
    channel = cfg.channel
    if channel == "auto":
        channel = "overlay" if accepts_images else "summary"
    if channel in ("overlay", "both") and accepts_images:
        inputs.frames = [overlay_frame(f, bundle, i, cfg.overlay) for f, i in zip(frames, idx)]
        inputs.overlaid = True
        if dump_overlays:
            out_dir = Path(str(video.frame_source) + ".overlays")
            out_dir.mkdir(parents=True, exist_ok=True)
            for f, i in zip(inputs.frames, idx):
                write_frame(out_dir / f"{i:05d}.png", f)
    if channel in ("summary", "both") or not accepts_images:
        inputs.motion_text = summarize_motion(bundle)
    return inputs


# --------------------------------------------------------------------------
# answer normalization

_PUNCT = str.maketrans({c: " " for c in string.punctuation})


def _norm_text(s: str) -> str:
    return " ".join(s.casefold().translate(_PUNCT).split())


def _label_candidates(raw: str, n: int) -> set[int]:
    low = raw.casefold().strip()
    valid = LABELS[:n].lower()
    found = set()
    norm = _norm_text(low)
    if len(norm) == 1 and norm in valid:
        found.add(valid.index(norm))
    patterns = (
        r"\(([a-e])\)",                                # (c)
        r"^([a-e])\s*[.):]",                           # c.  c)  c:
        r"\b(?:answer|option|choice)\s*(?:is|:)?\s*:?\s*([a-e])\s*(?:$|[.,;:!)])",  # answer is c.
    )
    for pat in patterns:
        for m in re.finditer(pat, low):
            if m.group(1) in valid:
                found.add(valid.index(m.group(1)))
    return found


def normalize_answer(response: str, choices: Sequence[str]) -> int | None:
    """Map a free-text reply to a choice index, or None if it cannot be done.

    Steps, in order: a standalone choice label (``B``, ``(c)``, ``c.``,
    ``answer is c``); exact match with a normalized choice text; a unique
    choice text contained in the reply (a choice contained in a longer
    matching choice does not count); otherwise None.
    """
    n = len(choices)
    labels = _label_candidates(response, n)
    if len(labels) == 1:
        return labels.pop()

    norm = _norm_text(response)
    norm_choices = [_norm_text(c) for c in choices]
    exact = [i for i, c in enumerate(norm_choices) if c and c == norm]
    if len(exact) == 1:
        return exact[0]

    padded = f" {norm} "
    hits = [i for i, c in enumerate(norm_choices) if c and f" {c} " in padded]
    hits = [i for i in hits if not any(j != i and norm_choices[i] in norm_choices[j] for j in hits)]
    if len(hits) == 1:
        return hits[0]
    return None


# --------------------------------------------------------------------------
# question answering

SYSTEM_PROMPT = (
    "You are shown frames sampled in temporal order from a generated video. "
    "Answer the multiple-choice question about the video using only what you see."
)
OVERLAY_NOTE = (
    " Colored trails drawn on the frames are point-tracking trajectories: each trail shows where a point "
    "moved during the preceding frames and ends at its current position."
)


def format_question(q: QATuple) -> str:
    lines = [f"Question: {q.question_text}", "Choices:"]
    lines += [f"{LABELS[i]}. {c}" for i, c in enumerate(q.choices)]
    lines.append("Answer with the letter of the correct choice.")
    return "\n".join(lines)


def build_vqa_request(frames: Sequence[np.ndarray], q: QATuple, motion_text: str | None = None,
                      overlaid: bool = False, model_id: str = "") -> ChatRequest:
    system = SYSTEM_PROMPT + (OVERLAY_NOTE if overlaid else "")
    text = format_question(q)
    if motion_text:
        text = f"Tracked motion in the video: {motion_text}\n\n{text}"
    parts = [ImagePart(f) for f in frames] + [TextPart(text)]
    return ChatRequest(
        (Message("system", (TextPart(system),)), Message("user", tuple(parts))),
        model_id=model_id, max_tokens=64,
    )


def _verdict(q: QATuple, reply: str) -> VQAVerdict:
    pred = normalize_answer(reply, q.choices)
    return VQAVerdict(q.question_id, pred, pred is not None and pred == q.answer_index, reply, q.aspect,
                      "" if pred is not None else "unparseable")


def answer_question(frames: Sequence[np.ndarray], q: QATuple, backend: ChatBackend,
                    motion_text: str | None = None, overlaid: bool = False,
                    model_id: str | None = None) -> VQAVerdict:
    req = build_vqa_request(frames, q, motion_text, overlaid, model_id or backend.profile.model_id)
    try:
        reply = backend.complete(req)
    except BackendError as exc:
        log.warning("question %d failed: %s", q.question_id, exc)
        return VQAVerdict(q.question_id, None, False, f"ERROR: {exc}", q.aspect, "errored")
    return _verdict(q, reply)


def _answer_batched(inputs: VideoInputs, qs: Sequence[QATuple], backend: ChatBackend, model: str) -> list[VQAVerdict]:
    blocks = [f"[{i}] " + format_question(q).replace("Answer with the letter of the correct choice.", "")
              for i, q in enumerate(qs, 1)]
    text = "\n\n".join(blocks) + "\n\nAnswer every question on its own line as '<number>: <letter>'."
    if inputs.motion_text:
        text = f"Tracked motion in the video: {inputs.motion_text}\n\n{text}"
    parts = [ImagePart(f) for f in inputs.frames] + [TextPart(text)]
    system = SYSTEM_PROMPT + (OVERLAY_NOTE if inputs.overlaid else "")
    req = ChatRequest((Message("system", (TextPart(system),)), Message("user", tuple(parts))),
                      model_id=model, max_tokens=16 * len(qs) + 32)
    try:
        reply = backend.complete(req)
    except BackendError as exc:
        return [VQAVerdict(q.question_id, None, False, f"ERROR: {exc}", q.aspect, "errored") for q in qs]
    answers = {}
    for line in reply.splitlines():
        m = re.match(r"\s*\[?(\d+)\]?\s*[:.)-]\s*(.+)", line)
        if m:
            answers.setdefault(int(m.group(1)), m.group(2).strip())
    return [_verdict(q, answers.get(i, "")) for i, q in enumerate(qs, 1)]


def alignment_from_verdicts(video_id: str, verdicts: Sequence[VQAVerdict], skip_errored: bool = False) -> AlignmentResult:
    verdicts = tuple(sorted(verdicts, key=lambda v: v.question_id))
    scored = [v for v in verdicts if not (skip_errored and v.flag == "errored")]
    if not scored:
        raise AlignmentError(f"video {video_id}: no scorable questions")
    correct = sum(v.correct for v in scored)

    def acc(aspect):
        sub = [v for v in scored if v.aspect == aspect]
        return sum(v.correct for v in sub) / len(sub) if sub else None

    return AlignmentResult(video_id, verdicts, correct / len(scored), acc("spatial"), acc("temporal"), len(scored))


def score_alignment(video: VideoRecord, qaset: QASet, backend: ChatBackend, cfg: VQAConfig = VQAConfig(),
                    inputs: VideoInputs | None = None) -> AlignmentResult:
    if not qaset.tuples:
        raise AlignmentError(f"empty question set for {video.video_id}")
    if inputs is None:
        inputs = prepare_inputs(video, cfg, backend.profile.accepts_images)
    model = cfg.model_id or backend.profile.model_id
    if cfg.batch_questions:
        verdicts = _answer_batched(inputs, qaset.tuples, backend, model)
    else:
        with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
            verdicts = list(pool.map(
                lambda q: answer_question(inputs.frames, q, backend, inputs.motion_text, inputs.overlaid, model),
                qaset.tuples,
            ))
    return alignment_from_verdicts(video.video_id, verdicts, cfg.skip_errored)
