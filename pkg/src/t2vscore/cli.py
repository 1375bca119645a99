"""Command-line entry point.

Exit codes: 0 success, 2 validation failure, 3 backend failure,
4 partial success (some videos skipped, run without ``--strict``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from .backends import (AuditLog, BackendError, BackendProfile, HTTPChatBackend, MockChatBackend,
                       load_profiles)
from .dataset import ManifestError, load_manifest
from .pipeline import (PipelineError, ScoreConfig, ScoreReport, ScoreSources, ablate, canonical_json,
                       correlate_report, crossmodel_report, run_score)
from .quality import DEFAULT_LAMBDA, read_score_file, write_score_file

log = logging.getLogger("t2vscore")

EXIT_OK, EXIT_VALIDATION, EXIT_BACKEND, EXIT_PARTIAL = 0, 2, 3, 4
DEFAULT_FIXTURES = "fixtures/backends"
MOCK_CAPS = ("text", "image")


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _config_from_args(args) -> ScoreConfig:
    return ScoreConfig(
        frames_k=args.frames_k,
        num_choices=args.choices,
        lam=args.lam,
        use_trajectory=not args.no_trajectory,
        channel=args.channel,
        remap_scope=args.remap_scope,
        skip_errored=args.skip_errored,
        max_in_flight=args.max_in_flight,
    )


def _profile_json(p: BackendProfile) -> dict:
    return {"name": p.name, "model_id": p.model_id, "capabilities": sorted(p.capabilities)}


def make_backends(args, audit: AuditLog | None):
    """(llm, mllm) for the chosen mode: --replay, --mock, a profile file, or the environment."""
    if args.replay:
        run = _read_run(args.replay)
        profiles = run.get("profiles", {})
        out = []
        for role in ("llm", "mllm"):
            p = profiles.get(role, {"name": "replay", "model_id": "mock", "capabilities": list(MOCK_CAPS)})
            out.append(MockChatBackend.from_audit_dir(args.replay, BackendProfile(**p), audit))
        return tuple(out)
    if args.mock:
        fixtures = MockChatBackend.read_fixtures(args.fixtures or os.environ.get("T2V_MOCK_FIXTURES", DEFAULT_FIXTURES))
        return tuple(
            MockChatBackend(fixtures, BackendProfile(name=f"mock-{role}", model_id="mock", capabilities=MOCK_CAPS), audit)
            for role in ("llm", "mllm")
        )
    if args.backend_profile:
        profiles = load_profiles(args.backend_profile)
    else:
        p = BackendProfile.from_env(name="env", capabilities={"text", "image"},
                                    model_id=os.environ.get("T2V_MODEL", ""))
        profiles = {"llm": p, "mllm": p}
    return HTTPChatBackend(profiles["llm"], audit), HTTPChatBackend(profiles["mllm"], audit)


def _read_run(audit_dir) -> dict:
    p = Path(audit_dir) / "run.json"
    return json.loads(p.read_text(encoding="utf-8")) if p.exists() else {}


def _sources(args) -> ScoreSources:
    src = ScoreSources(args.tech_scores, args.sem_scores)
    if args.replay:
        # replay uses the raw scores captured by the original run
        for expert in ("technical", "semantic"):
            saved = Path(args.replay) / f"scores_{expert}.tsv"
            if saved.exists():
                setattr(src, expert, str(saved))
    return src


def cmd_score(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = _config_from_args(args)
    audit = AuditLog(args.audit_dir) if args.audit_dir else None
    llm, mllm = make_backends(args, audit)
    sources = _sources(args)
    cache_dir = args.cache_dir
    tmp = None
    if cache_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="t2v_qa_")
        cache_dir = tmp.name
    raw = {}
    try:
        report = run_score(manifest, cfg, llm, mllm, sources, cache_dir, args.dump_overlays, raw)
    finally:
        if tmp is not None:
            tmp.cleanup()
    if audit is not None:
        for expert, batch in raw.items():
            write_score_file(audit.directory / f"scores_{expert}.tsv", batch.as_dict())
        run = {
            "manifest": str(Path(args.manifest).resolve()),
            "config": cfg.to_json(),
            "profiles": {"llm": _profile_json(llm.profile), "mllm": _profile_json(mllm.profile)},
        }
        (audit.directory / "run.json").write_text(json.dumps(run, indent=1, sort_keys=True), encoding="utf-8")
    _write(canonical_json(report.to_json()), args.out)
    for s in report.skipped:
        log.warning("skipped %s: %s", s["video_id"], s["reason"])
    verdicts = [v for row in report.per_video for v in row["alignment_detail"]["verdicts"]]
    n_errored = sum(v["flag"] == "errored" for v in verdicts)
    if n_errored:
        log.warning("%d of %d VQA requests failed and were scored as incorrect", n_errored, len(verdicts))
        if n_errored == len(verdicts) or args.strict:
            return EXIT_BACKEND
    if not report.skipped:
        return EXIT_OK
    if args.strict:
        return EXIT_VALIDATION if any(s["kind"] == "validation" for s in report.skipped) else EXIT_BACKEND
    return EXIT_PARTIAL


def _extra_metrics(specs) -> dict:
    out = {}
    for spec in specs or []:
        try:
            lhs, path = spec.split("=", 1)
            target, name = lhs.split(":", 1)
        except ValueError:
            raise PipelineError(f"--metric expects TARGET:NAME=PATH, got {spec!r}") from None
        if target not in ("alignment", "quality"):
            raise PipelineError(f"--metric target must be alignment or quality, got {target!r}")
        out[name] = (target, read_score_file(path))
    return out


def _emit_table(table, args) -> None:
    _write(canonical_json(table.to_json()), args.out)
    if args.text or args.out:
        sys.stderr.write(table.format_text())


def cmd_correlate(args) -> int:
    report = ScoreReport.load(args.report)
    table = correlate_report(report, load_manifest(args.manifest), _extra_metrics(args.metric), args.lam)
    _emit_table(table, args)
    return EXIT_OK


def cmd_crossmodel(args) -> int:
    report = ScoreReport.load(args.report)
    table = crossmodel_report(report, load_manifest(args.manifest), _extra_metrics(args.metric), args.lam)
    _emit_table(table, args)
    return EXIT_OK


def cmd_ablate(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = _config_from_args(args)
    audit = AuditLog(args.audit_dir) if args.audit_dir else None
    llm, mllm = make_backends(args, audit)
    experts = [e.strip() for e in args.experts.split(",") if e.strip()]
    traj = [t.strip() == "on" for t in args.trajectory.split(",") if t.strip()]
    with tempfile.TemporaryDirectory(prefix="t2v_qa_") as tmp:
        table = ablate(manifest, cfg, llm, mllm, _sources(args), experts, traj, args.cache_dir or tmp)
    _emit_table(table, args)
    return EXIT_OK


def cmd_replay(args) -> int:
    run = _read_run(args.audit_dir)
    if not run:
        raise PipelineError(f"{args.audit_dir} has no run.json; was it written by 'score --audit-dir'?")
    ns = build_parser().parse_args(["score", "--manifest", args.manifest or run["manifest"]])
    cfg = run["config"]
    ns.frames_k, ns.choices, ns.lam = cfg["frames_k"], cfg["num_choices"], cfg["lam"]
    ns.no_trajectory = not cfg["use_trajectory"]
    ns.channel, ns.remap_scope = cfg["channel"], cfg["remap_scope"]
    ns.skip_errored, ns.max_in_flight = cfg["skip_errored"], cfg["max_in_flight"]
    ns.replay, ns.out, ns.strict = args.audit_dir, args.out, args.strict
    return cmd_score(ns)


def _add_backend_flags(p) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--backend-profile", help="JSON profile file ({llm: {...}, mllm: {...}} or one profile)")
    p.add_argument("--mock", action="store_true", help="answer from fixtures keyed by request hash")
    p.add_argument("--fixtures", help=f"mock fixture file or directory (default {DEFAULT_FIXTURES})")
    p.add_argument("--replay", metavar="AUDIT_DIR", help="answer from a previous run's audit log; no network")
    p.add_argument("--audit-dir", help="write one JSON file per backend request here")
    p.add_argument("--cache-dir", help="QA set cache directory")
    p.add_argument("--tech-scores", help="technical expert scores: TSV path or service URL")
    p.add_argument("--sem-scores", help="semantic expert scores: TSV path or service URL (default: ask the MLLM)")
    p.add_argument("--frames-k", type=int, default=8)
    p.add_argument("--choices", type=int, default=4)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--no-trajectory", action="store_true")
    p.add_argument("--channel", default="auto", choices=["auto", "overlay", "summary", "both", "none"])
    p.add_argument("--remap-scope", default="run", choices=["run", "generator"])
    p.add_argument("--skip-errored", action="store_true")
    p.add_argument("--max-in-flight", type=int, default=4)
    p.add_argument("--dump-overlays", action="store_true")
    p.add_argument("--strict", action="store_true")
    p.add_argument("--out")


def _add_table_flags(p) -> None:
    p.add_argument("--report", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--metric", action="append", metavar="TARGET:NAME=PATH",
                   help="extra metric column (TSV) to correlate with alignment or quality MOS")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="also report the list-wise loss of each metric against MOS with this weight")
    p.add_argument("--text", action="store_true", help="print a plain-text table to stderr")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="t2vscore", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score every video in a manifest")
    _add_backend_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("correlate", help="correlate a score report with human ratings")
    _add_table_flags(p)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("crossmodel", help="correlations on videos from all generators but one")
    _add_table_flags(p)
    p.set_defaults(func=cmd_crossmodel)

    p = sub.add_parser("ablate", help="expert and trajectory ablations")
    _add_backend_flags(p)
    p.add_argument("--experts", default="sem,tech,both")
    p.add_argument("--trajectory", default="on,off")
    p.add_argument("--text", action="store_true", help="print a plain-text table to stderr")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("replay", help="re-run a scored manifest from its audit log")
    p.add_argument("audit_dir")
    p.add_argument("--manifest", help="override the manifest path recorded in the audit log")
    p.add_argument("--strict", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ManifestError, PipelineError, ValueError, KeyError, OSError) as exc:
        kind = getattr(exc, "kind", "validation")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND if kind == "backend" else EXIT_VALIDATION
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    raise SystemExit(main())
