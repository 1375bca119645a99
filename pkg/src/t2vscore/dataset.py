"""Evaluation-set data model: generated videos, prompts, generators and human ratings.

Manifests are JSON Lines, one :class:`VideoRecord` per line::

    {"video_id": "v01", "prompt_text": "...", "generator_id": "gen_a",
     "frame_source": "frames/v01", "trajectory_path": "tracks/v01.json",
     "annotations": [{"rater_id": "r1", "alignment_score": 3, "quality_score": 4}]}

Paths are relative to the manifest's directory and are resolved on load.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stats


class ManifestError(ValueError):
    pass


SCORE_RANGE = range(1, 6)


@dataclass(frozen=True)
class RaterAnnotation:
    rater_id: str
    alignment_score: int
    quality_score: int

    def __post_init__(self):
        for name in ("alignment_score", "quality_score"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v not in SCORE_RANGE:
                raise ManifestError(f"rater {self.rater_id!r}: {name}={v!r} not in 1..5")


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    prompt_text: str
    generator_id: str
    frame_source: Path
    trajectory_path: Path | None = None
    annotations: tuple[RaterAnnotation, ...] = ()

    def __post_init__(self):
        if not self.video_id:
            raise ManifestError("empty video_id")
        raters = [a.rater_id for a in self.annotations]
        if len(set(raters)) != len(raters):
            raise ManifestError(f"video {self.video_id!r}: more than one annotation per rater")


@dataclass(frozen=True)
class Manifest:
    records: tuple[VideoRecord, ...]
    generator_ids: frozenset = field(default=None)

    def __post_init__(self):
        gens = frozenset(r.generator_id for r in self.records)
        if self.generator_ids is None:
            object.__setattr__(self, "generator_ids", gens)
        elif frozenset(self.generator_ids) != gens:
            raise ManifestError("generator_ids disagree with the records")
        ids = [r.video_id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate video_id: {', '.join(dup)}")

    def __len__(self):
        return len(self.records)

    def by_id(self) -> dict[str, VideoRecord]:
        return {r.video_id: r for r in self.records}

    def subset(self, video_ids) -> "Manifest":
        keep = set(video_ids)
        return Manifest(tuple(r for r in self.records if r.video_id in keep))


@dataclass(frozen=True)
class CrossModelSplit:
    held_in: str
    held_out: frozenset

    def __post_init__(self):
        if self.held_in in self.held_out:
            raise ValueError("held_in generator is also held out")
        if not self.held_out:
            raise ValueError("held_out is empty")


def _record_from_json(obj: dict, base: Path) -> VideoRecord:
    try:
        anns = tuple(
            RaterAnnotation(str(a["rater_id"]), a["alignment_score"], a["quality_score"])
            for a in obj.get("annotations", [])
        )
        traj = obj.get("trajectory_path")
        return VideoRecord(
            video_id=str(obj["video_id"]),
            prompt_text=str(obj["prompt_text"]),
            generator_id=str(obj["generator_id"]),
            frame_source=(base / obj["frame_source"]).resolve(),
            trajectory_path=(base / traj).resolve() if traj else None,
            annotations=anns,
        )
    except KeyError as exc:
        raise ManifestError(f"missing field {exc.args[0]!r}") from None
    except TypeError as exc:
        raise ManifestError(str(exc)) from None


def load_manifest(path) -> Manifest:
    path = Path(path)
    base = path.parent.resolve()
    records = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: parse error: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: record is not an object")
            try:
                rec = _record_from_json(obj, base)
            except ManifestError as exc:
                vid = obj.get("video_id", "?")
                raise ManifestError(f"{path}:{lineno}: record {vid!r}: {exc}") from None
            if rec.video_id in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate video_id {rec.video_id!r} (first on line {seen[rec.video_id]})")
            seen[rec.video_id] = lineno
            records.append(rec)
    return Manifest(tuple(records))


def _rel(p: Path, base: Path) -> str:
    return Path(os.path.relpath(p, base)).as_posix()


def write_manifest(m: Manifest, path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", encoding="utf-8") as fh:
        for r in m.records:
            obj = {
                "video_id": r.video_id,
                "prompt_text": r.prompt_text,
                "generator_id": r.generator_id,
                "frame_source": _rel(r.frame_source, base),
                "annotations": [
                    {"rater_id": a.rater_id, "alignment_score": a.alignment_score,
                     "quality_score": a.quality_score}
                    for a in r.annotations
                ],
            }
            if r.trajectory_path is not None:
                obj["trajectory_path"] = _rel(r.trajectory_path, base)
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def _screened(values: list[int], z: float) -> list[int]:
    a = np.asarray(values, dtype=float)
    sd = a.std()
    if sd == 0:
        return values
    keep = [v for v, zz in zip(values, np.abs(a - a.mean()) / sd) if zz <= z]
    return keep or values


def mean_opinion_scores(m: Manifest, screen_z: float | None = None) -> dict[str, tuple[float, float]]:
    """Per-video mean rater score on (alignment, quality).

    ``screen_z`` optionally drops ratings more than that many standard
    deviations from the video's mean before averaging; off by default.
    """
    out = {}
    for r in m.records:
        if not r.annotations:
            raise ManifestError(f"video {r.video_id!r} has no annotations")
        al = sorted(a.alignment_score for a in r.annotations)
        qu = sorted(a.quality_score for a in r.annotations)
        if screen_z is not None:
            al, qu = _screened(al, screen_z), _screened(qu, screen_z)
        out[r.video_id] = (math.fsum(al) / len(al), math.fsum(qu) / len(qu))
    return out


@dataclass
class DistributionSummary:
    mu_alignment: float
    mu_quality: float
    inter_dim_spearman: float | None
    inter_dim_kendall: float | None
    flags: list[str] = field(default_factory=list)


def summarize_distribution(m: Manifest) -> DistributionSummary:
    if len(m.records) < 2:
        raise ManifestError("need at least 2 videos to correlate the two dimensions")
    mos = mean_opinion_scores(m)
    al = [mos[r.video_id][0] for r in m.records]
    qu = [mos[r.video_id][1] for r in m.records]
    c = stats.correlate(al, qu)
    return DistributionSummary(
        mu_alignment=math.fsum(al) / len(al),
        mu_quality=math.fsum(qu) / len(qu),
        inter_dim_spearman=c.spearman,
        inter_dim_kendall=c.kendall,
        flags=[f for f in c.flags if not f.startswith("pearson")],
    )


def cross_model_splits(m: Manifest) -> list[CrossModelSplit]:
    gens = sorted(m.generator_ids)
    if len(gens) < 2:
        raise ManifestError("cross-model splits need at least 2 generators")
    return [CrossModelSplit(g, frozenset(x for x in gens if x != g)) for g in gens]
