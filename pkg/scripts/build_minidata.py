"""Build the bundled 12-video synthetic evaluation set, its mock fixtures and golden reports.

    python scripts/build_minidata.py [--root fixtures]

Everything is deterministic. The script

1. renders 12 tiny videos (4 prompts x 3 fake generators) as PNG frames,
   with analytic point tracks for each,
2. writes the manifest with 3 raters per video and the two expert score files,
3. runs the scoring pipeline against a scripted backend whose answers come from
   the tables below, recording every exchange into a hash-keyed mock fixture file,
4. re-runs ``score`` and ``correlate`` through the CLI with ``--mock`` and stores
   the outputs as golden files.

The answer table is also written to ``answer_script.json`` so tests can
recompute each video's alignment score by hand.
"""

from __future__ import annotations

import argparse
import json
import re
import shutil
import tempfile
from pathlib import Path

import numpy as np

from t2vscore import cli
from t2vscore.backends import BackendProfile, ChatRequest, ImagePart, ScriptedBackend
from t2vscore.dataset import Manifest, RaterAnnotation, VideoRecord, write_manifest
from t2vscore.frames import write_frame
from t2vscore.pipeline import ScoreConfig, ScoreSources, ablate, run_score
from t2vscore.quality import write_score_file
from t2vscore.stats import spearman
from t2vscore.trajectory import Track, TrackPoint, TrajectoryBundle, overlay_frame, save_trajectory
from t2vscore.vqa import OVERLAY_NOTE, sample_frame_indices

W, H, N_FRAMES = 48, 36, 12
GENERATORS = ("gen_a", "gen_b", "gen_c")

PROMPTS = {
    "P1": "a red ball rolling to the right",
    "P2": "a cat playing soccer, camera pans left",
    "P3": "two blue cubes on a white floor",
    "P4": "a green car driving forward, camera zooms in",
}

GRAPHS = {
    "P1": {"elements": [{"id": 1, "text": "ball", "kind": "object"}, {"id": 2, "text": "a", "kind": "count"},
                        {"id": 3, "text": "red", "kind": "attribute"},
                        {"id": 4, "text": "rolling to the right", "kind": "action"}],
           "tuples": [[1, 2], [1, 3], [1, 4]]},
    "P2": {"elements": [{"id": 1, "text": "cat", "kind": "object"}, {"id": 2, "text": "a", "kind": "count"},
                        {"id": 3, "text": "playing soccer", "kind": "action"},
                        {"id": 4, "text": "camera pans left", "kind": "camera"}],
           "tuples": [[1, 2], [1, 3]]},
    "P3": {"elements": [{"id": 1, "text": "cubes", "kind": "object"}, {"id": 2, "text": "two", "kind": "count"},
                        {"id": 3, "text": "blue", "kind": "attribute"}, {"id": 4, "text": "floor", "kind": "object"},
                        {"id": 5, "text": "white", "kind": "attribute"},
                        {"id": 6, "text": "on", "kind": "spatial_relation"}],
           "tuples": [[1, 2], [1, 3], [4, 5], [1, 6], [6, 4]]},
    "P4": {"elements": [{"id": 1, "text": "car", "kind": "object"}, {"id": 2, "text": "a", "kind": "count"},
                        {"id": 3, "text": "green", "kind": "attribute"},
                        {"id": 4, "text": "driving forward", "kind": "action"},
                        {"id": 5, "text": "camera zooms in", "kind": "camera"}],
           "tuples": [[1, 2], [1, 3], [1, 4]]},
}
# first reply for P4 contains a cycle and must be re-prompted
BAD_GRAPH_P4 = {"elements": GRAPHS["P4"]["elements"], "tuples": [[1, 2], [1, 3], [1, 4], [4, 1]]}


def q(text, choices, answer, elements, aspect):
    return {"question": text, "choices": choices, "answer": "ABCDE"[answer], "elements": elements, "aspect": aspect}


QUESTIONS = {
    "P1": [
        q("What object is shown?", ["ball", "cube", "car", "cat"], 0, [1], "spatial"),
        q("How many balls are there?", ["two", "one", "three", "none"], 1, [2, 1], "spatial"),
        q("What color is the ball?", ["blue", "green", "red", "yellow"], 2, [3], "spatial"),
        q("Which way does the ball move?", ["to the left", "it stays still", "upward", "to the right"], 3, [4], "temporal"),
        q("Is the ball rolling?", ["yes", "no"], 0, [4], "temporal"),
    ],
    "P2": [
        q("Which animal appears?", ["dog", "cat", "rabbit", "bird"], 1, [1, 2], "spatial"),
        q("What is the cat doing?", ["sleeping", "eating", "playing soccer", "climbing"], 2, [3], "temporal"),
        q("How does the camera move?", ["pans right", "stays still", "pans left", "zooms in"], 2, [4], "temporal"),
        q("Is there a ball near the cat?", ["yes", "no"], 0, [3], "spatial"),
        q("How many cats are there?", ["one", "two", "three", "four"], 0, [2], "spatial"),
    ],
    "P3": [
        q("How many cubes are there?", ["one", "two", "three", "four"], 1, [1, 2], "spatial"),
        q("What color are the cubes?", ["red", "blue", "green", "white"], 1, [3], "spatial"),
        q("Where are the cubes?", ["on the floor", "in the air", "under a table", "in a box"], 0, [6, 4], "spatial"),
        q("What color is the floor?", ["black", "brown", "white", "blue"], 2, [5, 4], "spatial"),
        q("What shape are the objects?", ["spheres", "cubes", "cones", "cylinders"], 1, [1], "spatial"),
    ],
    "P4": [
        q("What vehicle is shown?", ["truck", "car", "bicycle", "boat"], 1, [1, 2], "spatial"),
        q("What color is the car?", ["green", "red", "blue", "black"], 0, [3], "spatial"),
        q("Is the car moving forward?", ["no", "yes"], 1, [4], "temporal"),
        q("How does the camera move?", ["zooms out", "pans left", "zooms in", "stays still"], 2, [5], "temporal"),
        q("How many cars are there?", ["one", "none", "two", "three"], 0, [2], "spatial"),
    ],
}

# video: prompt, generator, motion, answers with trajectory (1 = correct), answers without,
# alignment ratings, quality ratings, technical raw score, semantic raw score
VIDEOS = {
    "v01": ("P1", "gen_a", "object_right", "11111", "11100", (4, 5, 4), (4, 4, 3), 0.51, 0.46),
    "v02": ("P1", "gen_b", "object_right", "11110", "11100", (4, 3, 4), (3, 3, 3), 0.46, 0.42),
    "v03": ("P1", "gen_c", "static", "11100", "11110", (2, 3, 2), (2, 2, 1), 0.68, 0.25),
    "v04": ("P2", "gen_a", "pan_left", "11111", "11011", (5, 4, 4), (5, 4, 5), 0.40, 0.55),
    "v05": ("P2", "gen_b", "static", "11011", "11011", (3, 3, 2), (2, 3, 2), 0.56, 0.34),
    "v06": ("P2", "gen_c", "pan_left", "11111", "10011", (4, 4, 5), (3, 4, 3), 0.40, 0.43),
    "v07": ("P3", "gen_a", "static", "11111", "11111", (4, 5, 5), (4, 5, 4), 0.75, 0.35),
    "v08": ("P3", "gen_b", "static", "10111", "10111", (3, 4, 3), (1, 2, 1), 0.32, 0.45),
    "v09": ("P3", "gen_c", "static", "11010", "11010", (2, 2, 3), (3, 2, 3), 0.51, 0.39),
    "v10": ("P4", "gen_a", "zoom_in", "11111", "11101", (4, 4, 4), (5, 5, 5), 0.83, 0.57),
    "v11": ("P4", "gen_b", "zoom_in", "11101", "11001", (3, 4, 4), (4, 4, 4), 0.68, 0.43),
    "v12": ("P4", "gen_c", "zoom_out", "11100", "11110", (2, 1, 2), (2, 1, 1), 0.29, 0.37),
}
# wrong answers that the scripted model gives as an unparseable reply
UNPARSEABLE = {("v08", 2), ("v09", 5)}
REPLY_STYLES = ("{L}", "({l}) {text}", "The answer is {L}.", "{text}", "Answer: {L}", "{L}. {text}")

PROMPT_COLORS = {"P1": (220, 40, 40), "P2": (235, 140, 40), "P3": (40, 70, 220), "P4": (40, 180, 60)}


# --------------------------------------------------------------------------
# synthetic videos

def camera_map(motion: str, t: int):
    """Scene point (x, y) at frame 0 -> image position at frame t."""
    cx, cy = (W - 1) / 2, (H - 1) / 2
    if motion == "pan_left":
        return lambda x, y: (x + 2.0 * t, y)
    if motion in ("zoom_in", "zoom_out"):
        s = (1.03 if motion == "zoom_in" else 1 / 1.03) ** t
        return lambda x, y: (cx + s * (x - cx), cy + s * (y - cy))
    return lambda x, y: (x, y)


def render_video(vid: str, prompt: str, motion: str, rng: np.random.Generator):
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    cx, cy = (W - 1) / 2, (H - 1) / 2
    base = rng.uniform(0, 2 * np.pi, size=3)
    frames = []
    obj0 = np.array([12.0, 18.0]) if prompt == "P1" else np.array([cx, cy])
    for t in range(N_FRAMES):
        # inverse camera map for the background texture
        if motion == "pan_left":
            sx, sy = xs - 2.0 * t, ys
        elif motion in ("zoom_in", "zoom_out"):
            s = (1.03 if motion == "zoom_in" else 1 / 1.03) ** t
            sx, sy = cx + (xs - cx) / s, cy + (ys - cy) / s
        else:
            sx, sy = xs, ys
        img = np.stack([
            110 + 40 * np.sin(sx / 5.0 + base[c]) * np.cos(sy / 7.0 + base[c]) for c in range(3)
        ], axis=-1)
        if prompt == "P1" and motion == "object_right":
            ox, oy = obj0[0] + 3.0 * t, obj0[1]
        else:
            ox, oy = camera_map(motion, t)(*obj0)
        r = 5.0 if prompt != "P3" else 4.0
        mask = (xs - ox) ** 2 + (ys - oy) ** 2 <= r * r
        if prompt == "P3":
            mask = ((np.abs(xs - ox + 8) <= r) | (np.abs(xs - ox - 8) <= r)) & (np.abs(ys - oy) <= r)
        img[mask] = PROMPT_COLORS[prompt]
        img += rng.normal(0, 4.0, size=img.shape)
        frames.append(np.clip(img, 0, 255).astype(np.uint8))
    return frames


def make_tracks(prompt: str, motion: str) -> TrajectoryBundle:
    grid = [(x, y) for y in (6.0, 18.0, 30.0) for x in (6.0, 24.0, 42.0)]
    tracks = []
    for tid, (x0, y0) in enumerate(grid):
        pts = []
        for t in range(N_FRAMES):
            x, y = camera_map(motion, t)(x0, y0)
            inside = 0 <= x <= W - 1 and 0 <= y <= H - 1
            pts.append(TrackPoint(t, round(x, 3), round(y, 3), inside))
        tracks.append(Track(tid, tuple(pts)))
    if prompt == "P1" and motion == "object_right":
        for k, dy in enumerate((-2.0, 2.0)):
            pts = tuple(TrackPoint(t, 12.0 + 3.0 * t, 18.0 + dy, True) for t in range(N_FRAMES))
            tracks.append(Track(len(grid) + k, pts))
    return TrajectoryBundle(tuple(tracks), N_FRAMES, (W, H))


# --------------------------------------------------------------------------
# scripted model

def reply_text(choices, idx, style_no):
    if idx is None:
        return "I cannot tell from these frames."
    style = REPLY_STYLES[style_no % len(REPLY_STYLES)]
    return style.format(L="ABCDE"[idx], l="abcde"[idx], text=choices[idx])


def answer_plan():
    """(video, question_id, trajectory_on) -> (reply text, intended choice index or None)."""
    plan = {}
    style = 0
    for vid, (pkey, _, _, on, off, *_rest) in VIDEOS.items():
        for traj, pattern in ((True, on), (False, off)):
            for qi, qq in enumerate(QUESTIONS[pkey]):
                qid = qi + 1
                ans = "ABCDE".index(qq["answer"])
                if pattern[qi] == "1":
                    idx = ans
                elif (vid, qid) in UNPARSEABLE:
                    idx = None
                else:
                    idx = next(i for i in range(len(qq["choices"])) if i != ans)
                plan[(vid, qid, traj)] = (reply_text(qq["choices"], idx, style), idx)
                style += 1
    return plan


class Responder:
    def __init__(self, digests, plan):
        self.digests = digests
        self.plan = plan

    def __call__(self, req: ChatRequest) -> str:
        first = req.messages[0].text if req.messages else ""
        is_retry = any(m.role == "assistant" for m in req.messages)
        if "You break a text-to-video prompt" in req.text:
            pkey = self._prompt_key(req.messages[0].text)
            if pkey == "P4" and not is_retry:
                return "Here is the decomposition:\n```json\n" + json.dumps(BAD_GRAPH_P4) + "\n```"
            return json.dumps(GRAPHS[pkey])
        if "You write multiple-choice questions" in req.text:
            pkey = self._prompt_key(req.messages[0].text)
            items = [dict(x) for x in QUESTIONS[pkey]]
            if pkey == "P2":
                if not is_retry:
                    broken = dict(items[3])
                    broken.pop("answer")
                    broken["answer_index"] = 7
                    items[3] = broken
                    return json.dumps(items)
                fixed = dict(items[3])
                fixed["replaces"] = 4
                return json.dumps([fixed])
            return json.dumps(items)
        if first.startswith("You are shown frames"):
            images = req.images()
            vid, traj = self.digests[images[0].digest()]
            assert traj == (OVERLAY_NOTE.strip() in first)
            qtext = re.search(r"Question: (.*)", req.messages[-1].text).group(1)
            pkey = VIDEOS[vid][0]
            qid = 1 + [x["question"] for x in QUESTIONS[pkey]].index(qtext)
            return self.plan[(vid, qid, traj)][0]
        raise AssertionError(f"unexpected request: {req.text[:200]!r}")

    @staticmethod
    def _prompt_key(text: str) -> str:
        prompt = re.findall(r"^Prompt: (.*)$", text, flags=re.M)[-1].strip()
        return next(k for k, v in PROMPTS.items() if v == prompt)


# --------------------------------------------------------------------------

def build(root: Path) -> None:
    data = root / "minidata"
    if data.exists():
        shutil.rmtree(data)
    (data / "frames").mkdir(parents=True)
    (data / "tracks").mkdir()
    (root / "backends").mkdir(parents=True, exist_ok=True)

    records = []
    digests = {}
    k = ScoreConfig().frames_k
    for n, (vid, (pkey, gen, motion, _on, _off, al, qu, _t, _s)) in enumerate(VIDEOS.items()):
        rng = np.random.default_rng(1000 + n)
        frames = render_video(vid, pkey, motion, rng)
        fdir = data / "frames" / vid
        fdir.mkdir()
        for t, f in enumerate(frames):
            write_frame(fdir / f"{t:05d}.png", f)
        bundle = make_tracks(pkey, motion)
        save_trajectory(bundle, data / "tracks" / f"{vid}.json")
        first = sample_frame_indices(N_FRAMES, k)[0]
        digests[ImagePart(frames[first]).digest()] = (vid, False)
        digests[ImagePart(overlay_frame(frames[first], bundle, first)).digest()] = (vid, True)
        anns = tuple(RaterAnnotation(f"r{i + 1}", a, b) for i, (a, b) in enumerate(zip(al, qu)))
        records.append(VideoRecord(vid, PROMPTS[pkey], gen, fdir.resolve(),
                                   (data / "tracks" / f"{vid}.json").resolve(), anns))
    assert len(digests) == 2 * len(VIDEOS), "first sampled frames must be distinct"
    manifest = Manifest(tuple(records))
    write_manifest(manifest, data / "manifest.jsonl")
    write_score_file(data / "scores_technical.tsv", {v: row[7] for v, row in VIDEOS.items()})
    write_score_file(data / "scores_semantic.tsv", {v: row[8] for v, row in VIDEOS.items()})

    plan = answer_plan()
    script = {
        "questions": {PROMPTS[p]: qs for p, qs in QUESTIONS.items()},
        "answers": [
            {"video_id": vid, "question_id": qid, "trajectory": traj, "reply": reply, "intended_index": idx}
            for (vid, qid, traj), (reply, idx) in sorted(plan.items())
        ],
    }
    (data / "answer_script.json").write_text(json.dumps(script, indent=1), encoding="utf-8")

    profile = BackendProfile(name="mock", model_id="mock", capabilities={"text", "image"})
    backend = ScriptedBackend(Responder(digests, plan), profile)
    sources = ScoreSources(str(data / "scores_technical.tsv"), str(data / "scores_semantic.tsv"))
    with tempfile.TemporaryDirectory() as tmp:
        run_score(manifest, ScoreConfig(), backend, backend, sources, cache_dir=Path(tmp) / "a")
        ablate(manifest, ScoreConfig(), backend, backend, sources, cache_dir=Path(tmp) / "b")
    fixtures = {h: backend.transcript[h] for h in sorted(backend.transcript)}
    (root / "backends" / "minidata.json").write_text(json.dumps(fixtures, indent=1, sort_keys=True), encoding="utf-8")

    gold = data / "golden"
    gold.mkdir()
    base = ["--manifest", str(data / "manifest.jsonl"), "--mock", "--fixtures", str(root / "backends"),
            "--tech-scores", str(data / "scores_technical.tsv"), "--sem-scores", str(data / "scores_semantic.tsv")]
    rc = cli.main(["score", *base, "--out", str(gold / "score_report.json")])
    assert rc == 0, rc
    rc = cli.main(["correlate", "--report", str(gold / "score_report.json"), "--manifest",
                   str(data / "manifest.jsonl"), "--out", str(gold / "correlation_table.json")])
    assert rc == 0, rc

    # sanity checks on the construction
    mos_q = {v: sum(r[6]) / 3 for v, r in VIDEOS.items()}
    ids = sorted(VIDEOS)
    tech = [VIDEOS[v][7] for v in ids]
    sem = [VIDEOS[v][8] for v in ids]
    report = json.loads((gold / "score_report.json").read_text())
    fused = [r["t2vscore_q"] for r in report["per_video"]]
    ref = [mos_q[v] for v in ids]
    s_t, s_s, s_f = spearman(tech, ref), spearman(sem, ref), spearman(fused, ref)
    print(f"SRCC tech={s_t:.3f} sem={s_s:.3f} fused={s_f:.3f}")
    assert s_f >= max(s_t, s_s), "fused quality should beat each expert on this set"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default=str(Path(__file__).resolve().parents[1] / "fixtures"))
    args = ap.parse_args()
    build(Path(args.root))


if __name__ == "__main__":
    main()
