"""End-to-end scoring runs and correlation tables."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from . import __version__
from . import qagen as qagen_mod
from .backends import BackendError, ChatBackend, fetch_scores
from .dataset import Manifest, ManifestError, cross_model_splits, mean_opinion_scores
from .decomposition import TEMPLATE_VERSION as DECOMPOSE_TEMPLATE, DecompositionError, decompose
from .frames import FrameError
from .qagen import QAGenConfig, QAGenError, QASet, generate_qa
from .quality import (DEFAULT_LAMBDA, RawScoreBatch, ScoreLists, SemanticPromptProvider, remap,
                      remap_by_group, total_loss)
from .stats import correlate
from .trajectory import TrajectoryError
from .vqa import AlignmentError, AlignmentResult, VQAConfig, prepare_inputs, sample_frames, score_alignment

log = logging.getLogger(__name__)

EXPERTS = ("technical", "semantic")


class PipelineError(RuntimeError):
    """Run-level failure. ``kind`` is "validation" or "backend"."""

    def __init__(self, msg: str, kind: str = "validation"):
        super().__init__(msg)
        self.kind = kind


@dataclass(frozen=True)
class ScoreConfig:
    frames_k: int = 8
    num_choices: int = 4
    min_questions: int = 5
    max_questions: int = 12
    lam: float = DEFAULT_LAMBDA
    use_trajectory: bool = True
    channel: str = "auto"
    experts: tuple[str, ...] = EXPERTS
    remap_scope: str = "run"
    skip_errored: bool = False
    max_in_flight: int = 4
    video_workers: int = 2
    batch_questions: bool = False

    def __post_init__(self):
        if not self.experts or set(self.experts) - set(EXPERTS):
            raise ValueError(f"experts must be a non-empty subset of {EXPERTS}")
        if self.remap_scope not in ("run", "generator"):
            raise ValueError("remap_scope must be 'run' or 'generator'")

    def qagen(self) -> QAGenConfig:
        return QAGenConfig(self.min_questions, self.max_questions, self.num_choices)

    def vqa(self) -> VQAConfig:
        return VQAConfig(frames_k=self.frames_k, use_trajectory=self.use_trajectory, channel=self.channel,
                         skip_errored=self.skip_errored, max_in_flight=self.max_in_flight,
                         batch_questions=self.batch_questions)

    def to_json(self) -> dict:
        d = asdict(self)
        d["experts"] = list(self.experts)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ScoreConfig":
        d = dict(d)
        d["experts"] = tuple(d.get("experts", EXPERTS))
        return cls(**d)

    def fingerprint(self, extra: Mapping | None = None) -> str:
        d = self.to_json()
        # parallelism does not change results
        d.pop("video_workers")
        d.pop("max_in_flight")
        d["templates"] = [DECOMPOSE_TEMPLATE, qagen_mod.TEMPLATE_VERSION]
        if extra:
            d.update(extra)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ScoreSources:
    """Where raw expert scores come from: TSV path or service URL; semantic may fall back to the MLLM."""

    technical: str | None = None
    semantic: str | None = None


# --------------------------------------------------------------------------
# canonical JSON

def _canon(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return "null"
        s = f"{obj:.6f}"
        return "0.000000" if s == "-0.000000" else s
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, Mapping):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k), ensure_ascii=False)}: {_canon(obj[k], indent, level + 1)}"
                 for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + _canon(v, indent, level + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def canonical_json(obj, indent: int = 2) -> str:
    """Sorted keys, floats fixed at 6 decimals, trailing newline."""
    return _canon(obj, indent, 0) + "\n"


# --------------------------------------------------------------------------
# reports

@dataclass
class ScoreReport:
    per_video: list[dict]
    skipped: list[dict]
    config_fingerprint: str
    tool_version: str = __version__
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "per_video": self.per_video,
            "skipped": self.skipped,
            "config_fingerprint": self.config_fingerprint,
            "tool_version": self.tool_version,
            "config": self.config,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ScoreReport":
        return cls(d["per_video"], d.get("skipped", []), d["config_fingerprint"],
                   d.get("tool_version", ""), d.get("config", {}))

    @classmethod
    def load(cls, path) -> "ScoreReport":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def column(self, name: str) -> dict[str, float]:
        return {row["video_id"]: row[name] for row in self.per_video}


@dataclass
class EvalRow:
    metric_name: str
    target: str
    n: int
    spearman: float | None
    kendall: float | None
    pearson: float | None
    flags: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {
            "metric_name": self.metric_name,
            "target": self.target,
            "n": self.n,
            "spearman": self.spearman,
            "kendall": self.kendall,
            "pearson": self.pearson,
            "flags": self.flags,
        }
        if self.extra:
            d["extra"] = self.extra
        return d


@dataclass
class EvalGroup:
    label: str
    video_ids: list[str]
    rows: list[EvalRow]
    held_in: str | None = None
    held_out: list[str] | None = None

    def to_json(self) -> dict:
        d = {"label": self.label, "video_ids": self.video_ids, "rows": [r.to_json() for r in self.rows]}
        if self.held_in is not None:
            d["held_in"] = self.held_in
            d["held_out"] = self.held_out
        return d


@dataclass
class EvalTable:
    grouping: str
    groups: list[EvalGroup]

    def to_json(self) -> dict:
        return {"grouping": self.grouping, "groups": [g.to_json() for g in self.groups]}

    def format_text(self) -> str:
        def cell(v):
            return "   n/a" if v is None else f"{v:7.4f}"

        lines = []
        for g in self.groups:
            lines.append(f"== {g.label} ({len(g.video_ids)} videos)")
            lines.append(f"{'metric':<40} {'target':<10} {'SRCC':>7} {'KRCC':>7} {'PLCC':>7}")
            for r in g.rows:
                flag = f"  [{', '.join(r.flags)}]" if r.flags else ""
                lines.append(f"{r.metric_name:<40} {r.target:<10} {cell(r.spearman)} {cell(r.kendall)} "
                             f"{cell(r.pearson)}{flag}")
        return "\n".join(lines) + "\n"


def eval_row(name: str, target: str, metric: Sequence[float], reference: Sequence[float],
             lam: float | None = None) -> EvalRow:
    c = correlate(metric, reference)
    row = EvalRow(name, target, c.n, c.spearman, c.kendall, c.pearson, list(c.flags))
    if lam is not None:
        row.extra["listwise_loss"] = total_loss(ScoreLists.of(metric, reference, lam))
    return row


# --------------------------------------------------------------------------
# scoring

def build_qasets(manifest: Manifest, llm: ChatBackend, cfg: ScoreConfig,
                 cache_dir=None) -> tuple[dict[str, QASet], dict[str, str]]:
    """QA set per distinct prompt; failures are returned as prompt -> reason."""
    qcfg = cfg.qagen()
    out, failed = {}, {}
    for prompt in sorted({r.prompt_text for r in manifest.records}):
        cached = qagen_mod.load_cached(cache_dir, prompt, qcfg) if cache_dir else None
        if cached is not None:
            out[prompt] = cached
            continue
        try:
            graph = decompose(prompt, llm)
            qs = generate_qa(graph, llm, qcfg)
        except (DecompositionError, QAGenError, BackendError) as exc:
            log.error("QA generation failed for %r: %s", prompt, exc)
            failed[prompt] = str(exc)
            continue
        if cache_dir:
            qagen_mod.save_cached(cache_dir, qs, qcfg)
        out[prompt] = qs
    return out, failed


def run_alignment(manifest: Manifest, qasets: Mapping[str, QASet], mllm: ChatBackend, cfg: ScoreConfig,
                  dump_overlays: bool = False) -> tuple[dict[str, AlignmentResult], dict[str, dict]]:
    vcfg = cfg.vqa()

    def one(rec):
        qs = qasets.get(rec.prompt_text)
        if qs is None:
            return rec.video_id, None, {"kind": "backend", "reason": "question generation failed for prompt"}
        try:
            inputs = prepare_inputs(rec, vcfg, mllm.profile.accepts_images, dump_overlays)
        except (FrameError, TrajectoryError) as exc:
            return rec.video_id, None, {"kind": "validation", "reason": str(exc)}
        try:
            return rec.video_id, score_alignment(rec, qs, mllm, vcfg, inputs), None
        except (AlignmentError, BackendError) as exc:
            return rec.video_id, None, {"kind": "backend", "reason": str(exc)}

    with ThreadPoolExecutor(max_workers=max(1, cfg.video_workers)) as pool:
        results = list(pool.map(one, manifest.records))
    aligned, skipped = {}, {}
    for vid, res, skip in results:
        if skip is not None:
            skipped[vid] = skip
        else:
            aligned[vid] = res
    return aligned, skipped


def collect_raw_scores(manifest: Manifest, video_ids: Sequence[str], sources: ScoreSources, cfg: ScoreConfig,
                       mllm: ChatBackend | None) -> dict[str, RawScoreBatch]:
    batches = {}
    for expert in cfg.experts:
        src = getattr(sources, expert)
        if src is not None:
            batches[expert] = fetch_scores(video_ids, src, expert)
        elif expert == "semantic" and mllm is not None and mllm.profile.accepts_images:
            by_id = manifest.by_id()
            provider = SemanticPromptProvider(mllm, sample_frames, k=cfg.frames_k)
            batches[expert] = provider.score([by_id[v] for v in video_ids])
        else:
            raise PipelineError(f"no score source configured for the {expert} expert")
    return batches


def quality_scores(manifest: Manifest, batches: Mapping[str, RawScoreBatch], cfg: ScoreConfig) -> dict[str, dict]:
    groups = {r.video_id: r.generator_id for r in manifest.records}
    remapped = {}
    for expert, batch in batches.items():
        if cfg.remap_scope == "generator":
            remapped[expert] = remap_by_group(batch, groups)
        else:
            remapped[expert] = remap(batch)[0]
    ids = list(next(iter(batches.values())).as_dict())
    out = {}
    for vid in ids:
        tech = remapped.get("technical", {}).get(vid)
        sem = remapped.get("semantic", {}).get(vid)
        parts = [v for v in (tech, sem) if v is not None]
        out[vid] = {
            "video_id": vid,
            "raw_tech": batches["technical"].as_dict()[vid] if "technical" in batches else None,
            "raw_sem": batches["semantic"].as_dict()[vid] if "semantic" in batches else None,
            "remapped_tech": tech,
            "remapped_sem": sem,
            "fused": sum(parts) / len(parts),
        }
    return out


def run_score(manifest: Manifest, cfg: ScoreConfig, llm: ChatBackend, mllm: ChatBackend,
              sources: ScoreSources, cache_dir=None, dump_overlays: bool = False,
              raw_scores_out=None) -> ScoreReport:
    if not manifest.records:
        raise PipelineError("no records")
    qasets, failed = build_qasets(manifest, llm, cfg, cache_dir)
    aligned, skipped = run_alignment(manifest, qasets, mllm, cfg, dump_overlays)
    for vid, skip in list(skipped.items()):
        rec = manifest.by_id()[vid]
        if rec.prompt_text in failed:
            skip["reason"] = f"question generation failed: {failed[rec.prompt_text]}"

    scored_ids = [r.video_id for r in manifest.records if r.video_id in aligned]
    per_video = []
    if scored_ids:
        try:
            batches = collect_raw_scores(manifest, scored_ids, sources, cfg, mllm)
        except (KeyError, ValueError) as exc:
            raise PipelineError(f"quality scores: {exc}") from exc
        except BackendError as exc:
            raise PipelineError(f"quality scores: {exc}", "backend") from exc
        if raw_scores_out is not None:
            for expert, batch in batches.items():
                raw_scores_out[expert] = batch
        quality = quality_scores(manifest, batches, cfg)
        gens = {r.video_id: r.generator_id for r in manifest.records}
        for vid in sorted(scored_ids):
            al = aligned[vid]
            per_video.append({
                "video_id": vid,
                "generator_id": gens[vid],
                "t2vscore_a": al.score,
                "t2vscore_q": quality[vid]["fused"],
                "alignment_detail": al.to_json(),
                "quality_detail": quality[vid],
            })
    skipped_list = [{"video_id": vid, **skipped[vid]} for vid in sorted(skipped)]
    return ScoreReport(per_video, skipped_list, cfg.fingerprint(_model_ids(llm, mllm)), __version__, cfg.to_json())


def _model_ids(llm, mllm) -> dict:
    return {"llm_model": llm.profile.model_id, "mllm_model": mllm.profile.model_id}


# --------------------------------------------------------------------------
# tables

def _coverage(report: ScoreReport, manifest: Manifest) -> None:
    in_report = {r["video_id"] for r in report.per_video} | {s["video_id"] for s in report.skipped}
    in_manifest = {r.video_id for r in manifest.records}
    missing = sorted(in_manifest - in_report)
    extra = sorted({r["video_id"] for r in report.per_video} - in_manifest)
    if missing or extra:
        raise PipelineError(f"report/manifest coverage mismatch: missing={missing} unknown={extra}")


def _rows(report: ScoreReport, mos: Mapping[str, tuple[float, float]], ids: Sequence[str],
          extra_metrics: Mapping[str, tuple[str, Mapping[str, float]]] | None, lam: float | None) -> list[EvalRow]:
    a = report.column("t2vscore_a")
    q = report.column("t2vscore_q")
    rows = [
        eval_row("t2vscore_a", "alignment", [a[v] for v in ids], [mos[v][0] for v in ids], lam),
        eval_row("t2vscore_q", "quality", [q[v] for v in ids], [mos[v][1] for v in ids], lam),
    ]
    for name, (target, col) in sorted((extra_metrics or {}).items()):
        missing = [v for v in ids if v not in col]
        if missing:
            raise PipelineError(f"metric {name!r} lacks scores for: {', '.join(missing)}")
        k = 0 if target == "alignment" else 1
        rows.append(eval_row(name, target, [col[v] for v in ids], [mos[v][k] for v in ids], lam))
    return rows


def correlate_report(report: ScoreReport, manifest: Manifest,
                     extra_metrics: Mapping[str, tuple[str, Mapping[str, float]]] | None = None,
                     lam: float | None = None) -> EvalTable:
    _coverage(report, manifest)
    mos = mean_opinion_scores(manifest)
    ids = sorted(r["video_id"] for r in report.per_video)
    if len(ids) < 2:
        raise PipelineError("need at least 2 scored videos to correlate")
    return EvalTable("overall", [EvalGroup("overall", ids, _rows(report, mos, ids, extra_metrics, lam))])


def crossmodel_report(report: ScoreReport, manifest: Manifest,
                      extra_metrics: Mapping[str, tuple[str, Mapping[str, float]]] | None = None,
                      lam: float | None = None) -> EvalTable:
    _coverage(report, manifest)
    try:
        splits = cross_model_splits(manifest)
    except ManifestError as exc:
        raise PipelineError(str(exc)) from exc
    mos = mean_opinion_scores(manifest)
    gens = {r["video_id"]: r["generator_id"] for r in report.per_video}
    groups = []
    for sp in splits:
        ids = sorted(v for v, g in gens.items() if g in sp.held_out)
        if len(ids) < 2:
            rows = []
        else:
            rows = _rows(report, mos, ids, extra_metrics, lam)
        groups.append(EvalGroup(f"except {sp.held_in}", ids, rows, sp.held_in, sorted(sp.held_out)))
    return EvalTable("cross_model", groups)


ABLATION_EXPERTS = {"tech": ("technical",), "sem": ("semantic",), "both": EXPERTS}


def ablate(manifest: Manifest, cfg: ScoreConfig, llm: ChatBackend, mllm: ChatBackend, sources: ScoreSources,
           experts: Sequence[str] = ("sem", "tech", "both"), trajectory: Sequence[bool] = (True, False),
           cache_dir=None) -> EvalTable:
    """One row per (expert set, trajectory on/off) variant.

    The row's correlations are the variant's quality score against quality
    MOS; ``extra`` carries the alignment score's correlations and the mean
    spatial/temporal VQA accuracies under that trajectory setting.
    """
    if not manifest.records:
        raise PipelineError("no records")
    mos = mean_opinion_scores(manifest)
    qasets, _ = build_qasets(manifest, llm, cfg, cache_dir)

    alignment_by_traj = {}
    for traj in dict.fromkeys(trajectory):
        aligned, _ = run_alignment(manifest, qasets, mllm, replace(cfg, use_trajectory=traj))
        alignment_by_traj[traj] = aligned
    common = set.intersection(*(set(a) for a in alignment_by_traj.values()))
    ids = sorted(common)
    if len(ids) < 2:
        raise PipelineError("fewer than 2 videos scored in every variant")

    quality_by_experts = {}
    for name in dict.fromkeys(experts):
        vcfg = replace(cfg, experts=ABLATION_EXPERTS[name])
        batches = collect_raw_scores(manifest, ids, sources, vcfg, mllm)
        quality_by_experts[name] = quality_scores(manifest, batches, vcfg)

    rows = []
    for name in dict.fromkeys(experts):
        q = quality_by_experts[name]
        for traj in dict.fromkeys(trajectory):
            aligned = alignment_by_traj[traj]
            row = eval_row(f"experts={name},trajectory={'on' if traj else 'off'}", "quality",
                           [q[v]["fused"] for v in ids], [mos[v][1] for v in ids])
            a = eval_row("t2vscore_a", "alignment", [aligned[v].score for v in ids], [mos[v][0] for v in ids])
            temporal = [aligned[v].accuracy_temporal for v in ids if aligned[v].accuracy_temporal is not None]
            spatial = [aligned[v].accuracy_spatial for v in ids if aligned[v].accuracy_spatial is not None]
            row.extra = {
                "alignment": {k: a.to_json()[k] for k in ("spearman", "kendall", "pearson", "flags")},
                "accuracy_temporal": sum(temporal) / len(temporal) if temporal else None,
                "accuracy_spatial": sum(spatial) / len(spatial) if spatial else None,
            }
            rows.append(row)
    return EvalTable("ablation", [EvalGroup("ablation", ids, rows)])
