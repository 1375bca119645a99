import json
import shutil

import pytest

from t2vscore import cli
from t2vscore.backends import ScriptedBackend
from t2vscore.dataset import Manifest, load_manifest, mean_opinion_scores, write_manifest
from t2vscore.pipeline import (PipelineError, ScoreConfig, ScoreReport, ScoreSources, canonical_json,
                               crossmodel_report, quality_scores, run_score)
from t2vscore.quality import RawScoreBatch
from t2vscore.stats import spearman


def score_args(minidata, mock_fixtures, *extra):
    return ["score", "--manifest", str(minidata / "manifest.jsonl"), "--mock", "--fixtures", str(mock_fixtures),
            "--tech-scores", str(minidata / "scores_technical.tsv"),
            "--sem-scores", str(minidata / "scores_semantic.tsv"), *extra]


@pytest.fixture
def report_path(tmp_path, minidata, mock_fixtures):
    out = tmp_path / "report.json"
    assert cli.main(score_args(minidata, mock_fixtures, "--out", str(out))) == 0
    return out


def test_score_matches_golden(report_path, minidata):
    assert report_path.read_bytes() == (minidata / "golden" / "score_report.json").read_bytes()


def test_correlate_matches_golden(report_path, minidata, tmp_path, capsys):
    out = tmp_path / "table.json"
    rc = cli.main(["correlate", "--report", str(report_path), "--manifest", str(minidata / "manifest.jsonl"),
                   "--out", str(out)])
    assert rc == 0
    assert out.read_bytes() == (minidata / "golden" / "correlation_table.json").read_bytes()
    assert "t2vscore_a" in capsys.readouterr().err


def test_alignment_scores_match_answer_script(report_path, minidata):
    """Recompute every video's alignment score from the scripted answers, independently of the pipeline."""
    script = json.loads((minidata / "answer_script.json").read_text())
    prompts = {r.video_id: r.prompt_text for r in load_manifest(minidata / "manifest.jsonl").records}
    report = ScoreReport.load(report_path)
    for row in report.per_video:
        qs = script["questions"][prompts[row["video_id"]]]
        answers = [a for a in script["answers"] if a["video_id"] == row["video_id"] and a["trajectory"]]
        correct = sum(a["intended_index"] == "ABCDE".index(qs[a["question_id"] - 1]["answer"]) for a in answers)
        assert row["t2vscore_a"] == round(correct / len(qs), 6)


def test_fusion_beats_single_experts_on_minidata(report_path, minidata):
    m = load_manifest(minidata / "manifest.jsonl")
    mos = mean_opinion_scores(m)
    rows = ScoreReport.load(report_path).per_video
    ref = [mos[r["video_id"]][1] for r in rows]
    fused = spearman([r["t2vscore_q"] for r in rows], ref)
    assert fused >= spearman([r["quality_detail"]["raw_tech"] for r in rows], ref)
    assert fused >= spearman([r["quality_detail"]["raw_sem"] for r in rows], ref)


def test_audit_and_replay(tmp_path, minidata, mock_fixtures):
    audit = tmp_path / "audit"
    first = tmp_path / "first.json"
    assert cli.main(score_args(minidata, mock_fixtures, "--audit-dir", str(audit), "--out", str(first))) == 0
    assert (audit / "run.json").exists() and (audit / "scores_technical.tsv").exists()
    assert len(list(audit.glob("*.json"))) == 1 + 5 + 5 + 60
    replayed = tmp_path / "replayed.json"
    assert cli.main(["replay", str(audit), "--out", str(replayed)]) == 0
    assert replayed.read_bytes() == first.read_bytes()


def copy_minidata(minidata, tmp_path):
    dst = tmp_path / "md"
    shutil.copytree(minidata, dst, ignore=shutil.ignore_patterns("golden"))
    return dst


def test_skip_policy_and_exit_codes(tmp_path, mock_fixtures, minidata):
    md = copy_minidata(minidata, tmp_path)
    shutil.rmtree(md / "frames" / "v05")
    out = tmp_path / "r.json"
    assert cli.main(score_args(md, mock_fixtures, "--out", str(out))) == cli.EXIT_PARTIAL
    report = json.loads(out.read_text())
    assert [s["video_id"] for s in report["skipped"]] == ["v05"]
    assert report["skipped"][0]["kind"] == "validation"
    assert len(report["per_video"]) == 11
    assert cli.main(score_args(md, mock_fixtures, "--strict", "--out", str(out))) == cli.EXIT_VALIDATION


def test_missing_fixtures_is_backend_failure(tmp_path, mock_fixtures, minidata):
    out = tmp_path / "r.json"
    # four frames per video produce requests that were never recorded
    rc = cli.main(score_args(minidata, mock_fixtures, "--frames-k", "4", "--out", str(out)))
    assert rc == cli.EXIT_BACKEND
    report = json.loads(out.read_text())
    # failed requests are scored as incorrect rather than skipped
    assert len(report["per_video"]) == 12 and report["skipped"] == []
    assert {v["flag"] for r in report["per_video"] for v in r["alignment_detail"]["verdicts"]} == {"errored"}
    assert {r["t2vscore_a"] for r in report["per_video"]} == {0.0}
    rc = cli.main(score_args(minidata, mock_fixtures, "--frames-k", "4", "--skip-errored", "--out", str(out)))
    report = json.loads(out.read_text())
    assert rc == cli.EXIT_PARTIAL and len(report["skipped"]) == 12


def test_empty_manifest(tmp_path, mock_fixtures, capsys):
    (tmp_path / "m.jsonl").write_text("")
    rc = cli.main(["score", "--manifest", str(tmp_path / "m.jsonl"), "--mock", "--fixtures", str(mock_fixtures)])
    assert rc == cli.EXIT_VALIDATION and "no records" in capsys.readouterr().err


def test_bad_manifest(tmp_path, mock_fixtures, capsys):
    (tmp_path / "m.jsonl").write_text("{oops\n")
    rc = cli.main(["score", "--manifest", str(tmp_path / "m.jsonl"), "--mock", "--fixtures", str(mock_fixtures)])
    assert rc == cli.EXIT_VALIDATION and "m.jsonl:1" in capsys.readouterr().err


def test_crossmodel_groups(report_path, minidata, tmp_path):
    out = tmp_path / "x.json"
    assert cli.main(["crossmodel", "--report", str(report_path), "--manifest", str(minidata / "manifest.jsonl"),
                     "--out", str(out)]) == 0
    table = json.loads(out.read_text())
    assert [g["label"] for g in table["groups"]] == ["except gen_a", "except gen_b", "except gen_c"]
    assert table["groups"][0]["video_ids"] == ["v02", "v03", "v05", "v06", "v08", "v09", "v11", "v12"]


def test_correlate_extra_metric_and_loss(report_path, minidata, tmp_path):
    metric = tmp_path / "clip.tsv"
    metric.write_text("".join(f"v{i:02d}\t{i % 5}\n" for i in range(1, 13)))
    out = tmp_path / "t.json"
    assert cli.main(["correlate", "--report", str(report_path), "--manifest", str(minidata / "manifest.jsonl"),
                     "--metric", f"alignment:clip={metric}", "--lambda", "0.3", "--out", str(out)]) == 0
    rows = json.loads(out.read_text())["groups"][0]["rows"]
    assert [r["metric_name"] for r in rows] == ["t2vscore_a", "t2vscore_q", "clip"]
    assert all("listwise_loss" in r["extra"] for r in rows)
    bad = cli.main(["correlate", "--report", str(report_path), "--manifest", str(minidata / "manifest.jsonl"),
                    "--metric", "nonsense"])
    assert bad == cli.EXIT_VALIDATION


def test_correlate_coverage_mismatch(report_path, minidata, tmp_path):
    m = load_manifest(minidata / "manifest.jsonl")
    write_manifest(m.subset([f"v{i:02d}" for i in range(1, 7)]), minidata.parent / "_tmp_subset.jsonl")
    try:
        rc = cli.main(["correlate", "--report", str(report_path), "--manifest",
                       str(minidata.parent / "_tmp_subset.jsonl")])
    finally:
        (minidata.parent / "_tmp_subset.jsonl").unlink()
    assert rc == cli.EXIT_VALIDATION


def test_ablation_table(minidata, mock_fixtures, tmp_path):
    out = tmp_path / "abl.json"
    args = score_args(minidata, mock_fixtures, "--out", str(out))
    args[0] = "ablate"
    assert cli.main(args) == 0
    rows = json.loads(out.read_text())["groups"][0]["rows"]
    names = [r["metric_name"] for r in rows]
    assert names == [f"experts={e},trajectory={t}" for e in ("sem", "tech", "both") for t in ("on", "off")]
    by = {r["metric_name"]: r for r in rows}
    # trajectory settings only change alignment; expert choice only changes quality
    assert by["experts=both,trajectory=on"]["spearman"] == by["experts=both,trajectory=off"]["spearman"]
    assert by["experts=both,trajectory=on"]["spearman"] > by["experts=tech,trajectory=on"]["spearman"]
    on, off = by["experts=sem,trajectory=on"]["extra"], by["experts=sem,trajectory=off"]["extra"]
    assert on["accuracy_temporal"] > off["accuracy_temporal"]
    assert on["accuracy_spatial"] == off["accuracy_spatial"]
    assert on["alignment"]["spearman"] > off["alignment"]["spearman"]


def test_fingerprint_ignores_parallelism_only():
    base = ScoreConfig()
    assert base.fingerprint() == ScoreConfig(max_in_flight=1, video_workers=8).fingerprint()
    assert base.fingerprint() != ScoreConfig(frames_k=4).fingerprint()
    assert base.fingerprint() != base.fingerprint({"llm_model": "other"})
    assert ScoreConfig.from_json(base.to_json()) == base
    with pytest.raises(ValueError):
        ScoreConfig(experts=("aesthetic",))


def test_canonical_json():
    text = canonical_json({"b": [1.0, -0.0000001, None], "a": {"z": True, "y": "é"}, "c": float("nan")})
    assert text == ('{\n  "a": {\n    "y": "é",\n    "z": true\n  },\n  "b": [\n    1.000000,\n    0.000000,\n'
                    '    null\n  ],\n  "c": null\n}\n')


def test_quality_scope_and_single_expert(minidata):
    m = load_manifest(minidata / "manifest.jsonl")
    tech = RawScoreBatch.from_mapping({r.video_id: float(i) for i, r in enumerate(m.records)}, "technical")
    single = quality_scores(m, {"technical": tech}, ScoreConfig(experts=("technical",)))
    assert all(v["fused"] == v["remapped_tech"] and v["remapped_sem"] is None for v in single.values())
    per_gen = quality_scores(m, {"technical": tech}, ScoreConfig(experts=("technical",), remap_scope="generator"))
    # each generator's videos are remapped on their own, so every generator has the same spread
    by_gen = {}
    for r in m.records:
        by_gen.setdefault(r.generator_id, []).append(round(per_gen[r.video_id]["fused"], 12))
    assert len({tuple(v) for v in by_gen.values()}) == 1


def test_run_score_missing_score_source(minidata):
    m = load_manifest(minidata / "manifest.jsonl").subset(["v07", "v08"])
    text_only = ScriptedBackend(lambda req: "A")
    text_only.profile.capabilities = frozenset({"text"})
    with pytest.raises(PipelineError):
        run_score(Manifest(()), ScoreConfig(), text_only, text_only, ScoreSources())
    cfg = ScoreConfig(use_trajectory=False)
    report = run_score(m, cfg, text_only, text_only,
                       ScoreSources(technical=str(minidata / "scores_technical.tsv")))
    # the text-only MLLM cannot see frames: every video is skipped, so no quality source is needed
    assert report.per_video == [] and len(report.skipped) == 2


def test_crossmodel_needs_two_generators(report_path, minidata):
    m = load_manifest(minidata / "manifest.jsonl")
    only_a = m.subset([r.video_id for r in m.records if r.generator_id == "gen_a"])
    report = ScoreReport.load(report_path)
    report.per_video = [r for r in report.per_video if r["generator_id"] == "gen_a"]
    with pytest.raises(PipelineError):
        crossmodel_report(report, only_a)
