from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from t2vscore.backends import BackendProfile, ScriptedBackend, TransientError
from t2vscore.dataset import VideoRecord
from t2vscore.decomposition import parse_graph
from t2vscore.frames import write_frame
from t2vscore.qagen import QASet, QATuple
from t2vscore.trajectory import Track, TrackPoint, TrajectoryBundle, TrajectoryError, save_trajectory
from t2vscore.vqa import (OVERLAY_NOTE, AlignmentError, VQAConfig, VQAVerdict, alignment_from_verdicts,
                          build_vqa_request, format_question, normalize_answer, prepare_inputs, sample_frame_indices,
                          score_alignment)

COLORS = ["red", "green", "blue", "yellow"]


@pytest.mark.parametrize("reply, expected", [
    ("B", 1), ("b", 1), ("(c)", 2), ("(C) blue", 2), ("d. yellow", 3), ("A: red", 0),
    ("The answer is C.", 2), ("Answer: b", 1), ("I think the correct option is D", 3),
    ("green", 1), ("  Blue!  ", 2), ("The ball is yellow in every frame.", 3),
    ("red or green", None), ("purple", None), ("", None), ("A or B", None),
])
def test_normalize_answer(reply, expected):
    assert normalize_answer(reply, COLORS) == expected


def test_normalize_prefers_longer_contained_choice():
    choices = ["pans left", "pans left then right", "zooms", "static"]
    assert normalize_answer("it pans left then right", choices) == 1
    assert normalize_answer("pans left", choices) == 0


def test_normalize_label_beyond_choice_count():
    assert normalize_answer("(c)", ["yes", "no"]) is None
    assert normalize_answer("a", ["yes", "no"]) == 0


@pytest.mark.parametrize("n, k, expected", [
    (32, 8, [0, 4, 9, 13, 18, 22, 27, 31]),
    (5, 8, [0, 1, 2, 3, 4]),
    (10, 1, [4]),
    (11, 1, [5]),
    (1, 3, [0]),
    (9, 3, [0, 4, 8]),
])
def test_sample_frame_indices_examples(n, k, expected):
    assert sample_frame_indices(n, k) == expected


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 400), st.integers(1, 40))
def test_sample_frame_indices_oracle(n, k):
    got = sample_frame_indices(n, k)
    if k >= n:
        assert got == list(range(n))
    elif k == 1:
        assert got == [(n - 1) // 2]
    else:
        assert got == [(Fraction(i * (n - 1), k - 1) + Fraction(1, 2)).__floor__() for i in range(k)]
        assert got[0] == 0 and got[-1] == n - 1
        assert all(a < b for a, b in zip(got, got[1:]))


def test_sample_frame_indices_errors():
    with pytest.raises(ValueError):
        sample_frame_indices(0, 3)
    with pytest.raises(ValueError):
        sample_frame_indices(3, 0)


# ---- requests and scoring

GRAPH = parse_graph({"elements": [{"id": 1, "text": "ball", "kind": "object"},
                                  {"id": 2, "text": "rolling", "kind": "action"}], "tuples": [[1, 2]]},
                    "a ball rolling")
QS = QASet(GRAPH, (
    QATuple(1, "What color is the ball?", tuple(COLORS), 0, frozenset({1}), "spatial"),
    QATuple(2, "Which way does it roll?", ("left", "right"), 1, frozenset({2}), "temporal"),
    QATuple(3, "Is it a ball?", ("yes", "no"), 0, frozenset({1}), "spatial"),
))


def test_format_question():
    assert format_question(QS.tuples[1]) == (
        "Question: Which way does it roll?\nChoices:\nA. left\nB. right\n"
        "Answer with the letter of the correct choice.")


def test_request_layout():
    frames = [np.zeros((4, 4, 3), np.uint8), np.ones((4, 4, 3), np.uint8)]
    req = build_vqa_request(frames, QS.tuples[0], motion_text="Camera motion: static.", overlaid=True, model_id="m")
    assert [m.role for m in req.messages] == ["system", "user"]
    assert req.messages[0].text.endswith(OVERLAY_NOTE)
    assert len(req.images()) == 2 and req.max_tokens == 64 and req.temperature == 0
    assert req.messages[1].text.startswith("Tracked motion in the video: Camera motion: static.\n\nQuestion:")
    plain = build_vqa_request(frames, QS.tuples[0])
    assert OVERLAY_NOTE not in plain.text and plain.request_hash() != req.request_hash()


@pytest.fixture
def video(tmp_path):
    fdir = tmp_path / "frames"
    fdir.mkdir()
    for t in range(6):
        write_frame(fdir / f"{t:05d}.png", np.full((12, 16, 3), 20 * t, np.uint8))
    track = Track(0, tuple(TrackPoint(t, 2.0 + 2 * t, 6.0, True) for t in range(6)))
    save_trajectory(TrajectoryBundle((track,), 6, (16, 12)), tmp_path / "t.json")
    return VideoRecord("v", "a ball rolling", "g", fdir, tmp_path / "t.json")


def test_prepare_inputs_channels(video):
    img = prepare_inputs(video, VQAConfig(frames_k=3), accepts_images=True, dump_overlays=True)
    assert img.frame_indices == [0, 3, 5] and img.overlaid and img.motion_text is None
    assert (video.frame_source.parent / "frames.overlays" / "00003.png").exists()
    assert not np.array_equal(img.frames[1], np.full((12, 16, 3), 60, np.uint8))

    txt = prepare_inputs(video, VQAConfig(frames_k=3), accepts_images=False)
    assert txt.frames == [] and txt.motion_text.startswith("Camera motion:")

    both = prepare_inputs(video, VQAConfig(frames_k=3, channel="both"), accepts_images=True)
    assert both.overlaid and both.motion_text

    off = prepare_inputs(video, VQAConfig(frames_k=3, use_trajectory=False), accepts_images=True)
    assert not off.overlaid and off.motion_text is None
    assert np.array_equal(off.frames[1], np.full((12, 16, 3), 60, np.uint8))


def test_prepare_inputs_frame_count_mismatch(video, tmp_path):
    save_trajectory(TrajectoryBundle((), 9, (16, 12)), tmp_path / "t.json")
    with pytest.raises(TrajectoryError, match="9 frames"):
        prepare_inputs(video, VQAConfig(), accepts_images=True)


def answer_by_question(answers):
    def responder(req):
        q = req.messages[-1].text.split("Question: ")[1].split("\n")[0]
        r = answers[q]
        if isinstance(r, Exception):
            raise r
        return r
    return responder


def test_score_alignment_counts(video):
    backend = ScriptedBackend(answer_by_question({
        "What color is the ball?": "A", "Which way does it roll?": "left", "Is it a ball?": "hmm"}))
    res = score_alignment(video, QS, backend, VQAConfig(frames_k=2))
    assert res.score == 1 / 3 and res.n_scored == 3
    assert res.accuracy_spatial == 0.5 and res.accuracy_temporal == 0.0
    assert [v.flag for v in res.verdicts] == ["", "", "unparseable"]
    assert backend.calls == 3


def test_errored_requests_and_skip_policy(video):
    profile = BackendProfile(name="s", capabilities={"text", "image"}, max_attempts=1)
    answers = {"What color is the ball?": "A", "Which way does it roll?": TransientError("503"),
               "Is it a ball?": "yes"}
    counted = score_alignment(video, QS, ScriptedBackend(answer_by_question(answers), profile), VQAConfig())
    assert counted.score == 2 / 3 and counted.verdicts[1].flag == "errored"
    skipped = score_alignment(video, QS, ScriptedBackend(answer_by_question(answers), profile),
                              VQAConfig(skip_errored=True))
    assert skipped.score == 1.0 and skipped.n_scored == 2 and skipped.accuracy_temporal is None


def test_all_errored_with_skip_raises():
    v = [VQAVerdict(1, None, False, "ERROR", "spatial", "errored")]
    with pytest.raises(AlignmentError):
        alignment_from_verdicts("x", v, skip_errored=True)
    assert alignment_from_verdicts("x", v).score == 0.0


def test_batched_questions(video):
    seen = []

    def responder(req):
        seen.append(req)
        return "1: A\n2) B\n[3] no"

    res = score_alignment(video, QS, ScriptedBackend(responder), VQAConfig(batch_questions=True))
    assert len(seen) == 1 and "[3] Question: Is it a ball?" in seen[0].text
    assert [v.correct for v in res.verdicts] == [True, True, False]


def test_empty_question_set(video):
    with pytest.raises(AlignmentError):
        score_alignment(video, QASet(GRAPH, ()), ScriptedBackend(lambda r: "A"))
