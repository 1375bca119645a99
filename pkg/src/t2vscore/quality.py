"""Video quality score: remapped and fused expert judgements, plus list-wise losses.

Expert scores arrive from external providers as :class:`RawScoreBatch`.
Each batch is passed through a logistic remap standardised on the batch's
own mean and population standard deviation, and the technical and semantic
remaps are averaged into the final score in (0, 1).

The loss functions (pairwise rank hinge, centred-cosine linear loss and
their combination) are exported with analytic gradients for trainers that
live outside this package.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.3


@dataclass(frozen=True)
class RawScoreBatch:
    entries: tuple[tuple[str, float], ...]
    provider_id: str

    def __post_init__(self):
        if not (self.provider_id in ("technical", "semantic") or self.provider_id.startswith("custom:")):
            raise ValueError(f"unknown provider id {self.provider_id!r}")
        seen = set()
        for vid, score in self.entries:
            if vid in seen:
                raise ValueError(f"duplicate video id {vid!r} in {self.provider_id} batch")
            seen.add(vid)
            if not math.isfinite(score):
                raise ValueError(f"non-finite score {score!r} for video {vid!r}")

    @classmethod
    def from_mapping(cls, scores: Mapping[str, float], provider_id: str) -> "RawScoreBatch":
        return cls(tuple((k, float(v)) for k, v in scores.items()), provider_id)

    def as_dict(self) -> dict[str, float]:
        return dict(self.entries)

    def subset(self, video_ids: Iterable[str]) -> "RawScoreBatch":
        wanted = set(video_ids)
        return RawScoreBatch(tuple(e for e in self.entries if e[0] in wanted), self.provider_id)


@dataclass(frozen=True)
class RemapContext:
    mu: float
    sigma: float
    source_batch_size: int


@dataclass(frozen=True)
class QualityResult:
    video_id: str
    remapped_tech: float
    remapped_sem: float
    fused: float


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def remap(batch: RawScoreBatch) -> tuple[dict[str, float], RemapContext]:
    """Logistic remap standardised on this batch's mean and population std.

    A constant batch (sigma == 0) maps every entry to 0.5.
    """
    if not batch.entries:
        raise ValueError("cannot remap an empty batch")
    s = np.array([v for _, v in batch.entries], dtype=float)
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite score in batch")
    mu = math.fsum(s) / len(s)
    # an exactly constant batch can still produce a one-ulp sigma via the mean
    sigma = 0.0 if np.ptp(s) == 0.0 else math.sqrt(math.fsum((s - mu) ** 2) / len(s))
    ctx = RemapContext(mu=mu, sigma=sigma, source_batch_size=len(s))
    if sigma == 0.0:
        return {vid: 0.5 for vid, _ in batch.entries}, ctx
    out = {vid: _sigmoid((v - mu) / sigma) for vid, v in batch.entries}
    return out, ctx


def fuse(tech: Mapping[str, float], sem: Mapping[str, float]) -> list[QualityResult]:
    """Average the two remapped expert scores per video, in ``tech`` order."""
    if set(tech) != set(sem):
        missing = sorted(set(tech) ^ set(sem))
        raise KeyError(f"expert key sets differ on: {missing}")
    return [
        QualityResult(vid, tech[vid], sem[vid], (tech[vid] + sem[vid]) / 2.0)
        for vid in tech
    ]


def remap_by_group(batch: RawScoreBatch, groups: Mapping[str, str]) -> dict[str, float]:
    """Remap each group of videos (e.g. per generator) against its own statistics."""
    by_group: dict[str, list[tuple[str, float]]] = {}
    for vid, v in batch.entries:
        by_group.setdefault(groups[vid], []).append((vid, v))
    out: dict[str, float] = {}
    for key in sorted(by_group):
        part, _ = remap(RawScoreBatch(tuple(by_group[key]), batch.provider_id))
        out.update(part)
    return {vid: out[vid] for vid, _ in batch.entries}


# --------------------------------------------------------------------------
# list-wise objectives

@dataclass(frozen=True)
class ScoreLists:
    s_pred: tuple[float, ...]
    s_gt: tuple[float, ...]
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if len(self.s_pred) != len(self.s_gt):
            raise ValueError(f"length mismatch: {len(self.s_pred)} vs {len(self.s_gt)}")
        if len(self.s_pred) < 2:
            raise ValueError("lists need at least 2 entries")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @classmethod
    def of(cls, s_pred: Sequence[float], s_gt: Sequence[float], lam: float = DEFAULT_LAMBDA) -> "ScoreLists":
        return cls(tuple(map(float, s_pred)), tuple(map(float, s_gt)), float(lam))


def _pair_terms(l: ScoreLists) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(l.s_pred)
    g = np.asarray(l.s_gt)
    iu, ju = np.triu_indices(len(p), k=1)
    sign = np.sign(g[ju] - g[iu])
    return (p[iu] - p[ju]) * sign, sign


def rank_loss(l: ScoreLists) -> float:
    """Pairwise hinge over unordered pairs i < j.

    The ordered-pair sum is exactly twice this value; the factor is folded
    into lambda.
    """
    return float(rank_loss_batch(np.asarray(l.s_pred)[None, :], np.asarray(l.s_gt)[None, :])[0])


def rank_loss_batch(s_pred: np.ndarray, s_gt: np.ndarray) -> np.ndarray:
    """:func:`rank_loss` of each row of two (m, n) arrays."""
    p = np.asarray(s_pred, dtype=float)
    g = np.asarray(s_gt, dtype=float)
    if p.shape != g.shape or p.ndim != 2:
        raise ValueError(f"expected two (m, n) arrays of equal shape, got {p.shape} and {g.shape}")
    iu, ju = np.triu_indices(p.shape[1], k=1)
    terms = (p[:, iu] - p[:, ju]) * np.sign(g[:, ju] - g[:, iu])
    return np.maximum(terms, 0.0).sum(axis=1)


def _centred(l: ScoreLists):
    a = np.asarray(l.s_pred) - np.mean(l.s_pred)
    b = np.asarray(l.s_gt) - np.mean(l.s_gt)
    return a, b, float(np.linalg.norm(a)), float(np.linalg.norm(b))


def linear_loss(l: ScoreLists) -> float:
    """(1 - cosine of the centred lists) / 2, in [0, 1].

    Zero-variance input has no defined cosine; 0.5 is returned with a warning.
    """
    a, b, na, nb = _centred(l)
    if na == 0.0 or nb == 0.0:
        log.warning("linear_loss undefined for zero-variance list; returning 0.5")
        return 0.5
    cos = _cosine(a, b)
    return (1.0 - cos) / 2.0


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    # sqrt of the product of squared norms is exact for mirrored inputs;
    # the snap absorbs rounding in the centring for exact affine relations
    cos = float(np.dot(a, b)) / math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if abs(abs(cos) - 1.0) <= 4 * np.finfo(float).eps:
        cos = math.copysign(1.0, cos)
    return max(-1.0, min(1.0, cos))


def total_loss(l: ScoreLists) -> float:
    return linear_loss(l) + l.lam * rank_loss(l)


def loss_gradients(l: ScoreLists) -> np.ndarray:
    """d total_loss / d s_pred. Rank-hinge kinks take subgradient 0."""
    n = len(l.s_pred)
    grad = np.zeros(n)

    terms, sign = _pair_terms(l)
    iu, ju = np.triu_indices(n, k=1)
    active = terms > 0
    np.add.at(grad, iu[active], l.lam * sign[active])
    np.add.at(grad, ju[active], -l.lam * sign[active])

    a, b, na, nb = _centred(l)
    if na > 0.0 and nb > 0.0:
        cos = _cosine(a, b)
        # a and b are already centred, so the centring projection is a no-op
        dcos = b / (na * nb) - cos * a / (na * na)
        grad += -0.5 * dcos
    return grad


# --------------------------------------------------------------------------
# score providers

def read_score_file(path) -> dict[str, float]:
    """Read ``video_id<TAB>score`` lines. Blank lines and ``#`` comments are skipped."""
    scores: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'video_id<TAB>score'")
            vid, raw = parts[0].strip(), parts[1].strip()
            if vid in scores:
                raise ValueError(f"{path}:{lineno}: duplicate video id {vid!r}")
            try:
                scores[vid] = float(raw)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad score {raw!r}") from None
    return scores


def write_score_file(path, scores: Mapping[str, float]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for vid, v in scores.items():
            fh.write(f"{vid}\t{v!r}\n")


POSITIVE_PROMPT = "good, high quality"
NEGATIVE_PROMPT = "poor, low quality"

_PROB_RE = re.compile(r"(?<![\d.])(0(?:\.\d+)?|1(?:\.0+)?|\.\d+)(?![\d.])")


def parse_positive_confidence(text: str) -> float | None:
    """Extract P(positive) from a reply to the binary quality prompt."""
    low = text.strip().lower()
    m = _PROB_RE.search(low)
    if m:
        return float(m.group(1))
    pos = POSITIVE_PROMPT in low
    neg = NEGATIVE_PROMPT in low
    if pos != neg:
        return 1.0 if pos else 0.0
    return None


class SemanticPromptProvider:
    """Semantic-expert stand-in that asks a multimodal backend the binary quality prompt.

    The backend is asked for the probability that the frames are
    "good, high quality" rather than "poor, low quality"; that positive-class
    confidence is the raw semantic score.
    """

    provider_id = "semantic"

    def __init__(self, backend, frame_loader, k: int = 8, model_id: str | None = None):
        self.backend = backend
        self.frame_loader = frame_loader
        self.k = k
        self.model_id = model_id

    def build_request(self, frames):
        from .backends import ChatRequest, ImagePart, Message, TextPart

        text = (
            "Judge only the visual quality of these video frames, ignoring their content. "
            f"Is the video '{POSITIVE_PROMPT}' or '{NEGATIVE_PROMPT}'? "
            f"Reply with a single number in [0, 1]: the probability that it is '{POSITIVE_PROMPT}'."
        )
        parts = [ImagePart(f) for f in frames] + [TextPart(text)]
        return ChatRequest(
            messages=(Message("user", tuple(parts)),),
            model_id=self.model_id or self.backend.profile.model_id,
            max_tokens=16,
        )

    def score(self, records) -> RawScoreBatch:
        entries = []
        for rec in records:
            frames = self.frame_loader(rec, self.k)
            reply = self.backend.complete(self.build_request(frames))
            conf = parse_positive_confidence(reply)
            if conf is None:
                raise ValueError(f"unparseable quality confidence for {rec.video_id}: {reply!r}")
            entries.append((rec.video_id, conf))
        return RawScoreBatch(tuple(entries), self.provider_id)
