"""Point trajectories from an external tracker: loading, overlays, motion summaries.

Trajectory files are JSON::

    {"frame_count": 16, "frame_size": [320, 240],
     "tracks": [{"track_id": 0, "points": [[0, 10.0, 20.0, true], ...]}, ...]}

Each point is ``[frame_index, x, y, visible]`` in pixel coordinates with the
origin at the top-left corner and y pointing down.

Motion convention: scene content moving right across the frame is reported
as the camera panning left (panning from right to left), and likewise for
the other directions. Rotation is reported as seen on screen, so a positive
angle is counter-clockwise to the viewer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image, ImageDraw

STATIC_PX = 0.2  # px/frame
ZOOM_EPS = 0.01  # |scale - 1| per frame
ROTATION_DEG = 0.2  # degrees per frame
OUTLIER_PX = 1.0  # px/frame residual against the global motion

PALETTE = (
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
)


class TrajectoryError(ValueError):
    pass


class TrackPoint(NamedTuple):
    frame_index: int
    x: float
    y: float
    visible: bool


@dataclass(frozen=True)
class Track:
    track_id: int
    points: tuple[TrackPoint, ...]

    def __post_init__(self):
        idx = [p.frame_index for p in self.points]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise TrajectoryError(f"track {self.track_id}: frame indices not strictly increasing: {idx}")

    def at(self, frame_index: int) -> TrackPoint | None:
        for p in self.points:
            if p.frame_index == frame_index:
                return p
        return None


@dataclass(frozen=True)
class TrajectoryBundle:
    tracks: tuple[Track, ...]
    frame_count: int
    frame_size: tuple[int, int]

    def __post_init__(self):
        if self.frame_count < 0:
            raise TrajectoryError("negative frame_count")
        for t in self.tracks:
            for p in t.points:
                if not 0 <= p.frame_index < self.frame_count:
                    raise TrajectoryError(
                        f"track {t.track_id}: frame index {p.frame_index} outside [0, {self.frame_count})")

    def in_frame(self, p: TrackPoint) -> bool:
        w, h = self.frame_size
        return 0.0 <= p.x <= w - 1 and 0.0 <= p.y <= h - 1

    def usable(self, p: TrackPoint | None) -> bool:
        return p is not None and p.visible and self.in_frame(p)

    def sorted_tracks(self) -> list[Track]:
        return sorted(self.tracks, key=lambda t: t.track_id)


def bundle_from_json(obj: dict) -> TrajectoryBundle:
    try:
        frame_count = int(obj["frame_count"])
        w, h = obj["frame_size"]
        raw_tracks = obj["tracks"]
    except (KeyError, TypeError, ValueError) as exc:
        raise TrajectoryError(f"trajectory schema violation: {exc}") from None
    tracks = []
    for i, t in enumerate(raw_tracks):
        if isinstance(t, dict):
            tid, pts = int(t.get("track_id", i)), t.get("points", [])
        else:
            tid, pts = i, t
        try:
            points = tuple(TrackPoint(int(f), float(x), float(y), bool(v)) for f, x, y, v in pts)
        except (TypeError, ValueError) as exc:
            raise TrajectoryError(f"track {tid}: bad point: {exc}") from None
        tracks.append(Track(tid, points))
    ids = [t.track_id for t in tracks]
    if len(set(ids)) != len(ids):
        raise TrajectoryError("duplicate track_id")
    return TrajectoryBundle(tuple(tracks), frame_count, (int(w), int(h)))


def bundle_to_json(b: TrajectoryBundle) -> dict:
    return {
        "frame_count": b.frame_count,
        "frame_size": list(b.frame_size),
        "tracks": [
            {"track_id": t.track_id, "points": [[p.frame_index, p.x, p.y, p.visible] for p in t.points]}
            for t in b.tracks
        ],
    }


def load_trajectory(path) -> TrajectoryBundle:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TrajectoryError(f"{path}: not JSON: {exc.msg}") from None
    return bundle_from_json(obj)


def save_trajectory(b: TrajectoryBundle, path) -> None:
    Path(path).write_text(json.dumps(bundle_to_json(b)), encoding="utf-8")


# --------------------------------------------------------------------------
# overlays

@dataclass(frozen=True)
class OverlayConfig:
    tail_length: int = 8
    line_width: int = 1
    palette: tuple = PALETTE


def track_color(track_id: int, cfg: OverlayConfig = OverlayConfig()) -> tuple[int, int, int]:
    return cfg.palette[track_id % len(cfg.palette)]


def tail_vertices(bundle: TrajectoryBundle, track: Track, frame_index: int, tail_length: int) -> list[tuple[int, int]]:
    """Pixel vertices of the visible points in ``(frame_index - tail_length, frame_index]``."""
    lo = frame_index - tail_length
    return [
        (int(round(p.x)), int(round(p.y)))
        for p in track.points
        if lo < p.frame_index <= frame_index and bundle.usable(p)
    ]


def overlay_frame(frame: np.ndarray, bundle: TrajectoryBundle, frame_index: int,
                  cfg: OverlayConfig = OverlayConfig()) -> np.ndarray:
    """Copy of ``frame`` with each track's recent tail drawn on it."""
    out = np.array(frame, dtype=np.uint8, copy=True)
    if not bundle.tracks:
        return out
    h, w = out.shape[:2]
    if (w, h) != tuple(bundle.frame_size):
        raise TrajectoryError(f"frame is {w}x{h} but trajectories are for {bundle.frame_size}")
    im = Image.fromarray(out)
    draw = ImageDraw.Draw(im)
    for track in bundle.sorted_tracks():
        verts = tail_vertices(bundle, track, frame_index, cfg.tail_length)
        if not verts:
            continue
        color = track_color(track.track_id, cfg)
        if len(set(verts)) == 1:
            draw.point(verts[0], fill=color)
        else:
            draw.line(verts, fill=color, width=cfg.line_width)
    return np.asarray(im, dtype=np.uint8).copy()


def render_overlay(frames: Sequence[np.ndarray], t: TrajectoryBundle,
                   cfg: OverlayConfig = OverlayConfig()) -> list[np.ndarray]:
    if len(frames) != t.frame_count:
        raise TrajectoryError(f"got {len(frames)} frames for a {t.frame_count}-frame trajectory")
    shapes = {np.asarray(f).shape[:2] for f in frames}
    if len(shapes) > 1:
        raise TrajectoryError("frames differ in size")
    return [overlay_frame(f, t, i, cfg) for i, f in enumerate(frames)]


# --------------------------------------------------------------------------
# motion summary

@dataclass
class MotionEstimate:
    label: str
    median_dx: float = 0.0
    median_dy: float = 0.0
    scale: float = 1.0
    angle_deg: float = 0.0
    n_pairs: int = 0
    outliers: list[tuple[str, float, float]] = field(default_factory=list)


def _fit_similarity(src: np.ndarray, dst: np.ndarray) -> tuple[float, float] | None:
    """Least-squares similarity src -> dst; returns (scale, angle_deg) with y flipped up."""
    z = src[:, 0] - 1j * src[:, 1]
    w = dst[:, 0] - 1j * dst[:, 1]
    zc = z - z.mean()
    wc = w - w.mean()
    denom = float(np.sum(np.abs(zc) ** 2))
    if len(src) < 2 or denom < 1e-9:
        return None
    a = np.sum(np.conj(zc) * wc) / denom
    return float(abs(a)), math.degrees(math.atan2(a.imag, a.real))


def _region(x: float, y: float, size: tuple[int, int]) -> str:
    w, h = size
    col = ("left", "center", "right")[min(2, int(3 * x / max(w, 1)))]
    row = ("top", "middle", "bottom")[min(2, int(3 * y / max(h, 1)))]
    return "center" if (row, col) == ("middle", "center") else f"{row}-{col}"


def _direction(dx: float, dy: float) -> str:
    if abs(dx) >= abs(dy):
        return "right" if dx > 0 else "left"
    return "down" if dy > 0 else "up"


def estimate_motion(t: TrajectoryBundle) -> MotionEstimate:
    tracks = t.sorted_tracks()
    disps = []  # (track_id, dx, dy)
    scales, angles = [], []
    predicted: dict[int, list[tuple[float, float, float, float]]] = {}
    lookup = [(tr.track_id, {p.frame_index: p for p in tr.points}) for tr in tracks]
    n_pairs = 0
    for f in range(t.frame_count - 1):
        pairs = []
        for tid, pts in lookup:
            p, q = pts.get(f), pts.get(f + 1)
            if t.usable(p) and t.usable(q):
                pairs.append((tid, p, q))
        if not pairs:
            continue
        n_pairs += 1
        src = np.array([[p.x, p.y] for _, p, _ in pairs])
        dst = np.array([[q.x, q.y] for _, _, q in pairs])
        z = src[:, 0] - 1j * src[:, 1]
        w = dst[:, 0] - 1j * dst[:, 1]
        keep = np.ones(len(pairs), dtype=bool)
        # trimmed fit: refit without points that move on their own
        for _ in range(3):
            fit = _fit_similarity(src[keep], dst[keep])
            a = 1.0 + 0j if fit is None else fit[0] * complex(math.cos(math.radians(fit[1])),
                                                              math.sin(math.radians(fit[1])))
            pred = a * (z - z[keep].mean()) + w[keep].mean()
            inliers = np.abs(w - pred) <= OUTLIER_PX
            if inliers.sum() < 2 or np.array_equal(inliers, keep):
                break
            keep = inliers
        if fit is not None:
            scales.append(fit[0])
            angles.append(fit[1])
        for k, (tid, p, q) in enumerate(pairs):
            disps.append((tid, q.x - p.x, q.y - p.y))
            # residual in image coordinates (y down)
            rx = (w[k] - pred[k]).real
            ry = -(w[k] - pred[k]).imag
            predicted.setdefault(tid, []).append((p.x, p.y, rx, ry))

    if not disps:
        return MotionEstimate("none")

    mdx = float(np.median([d[1] for d in disps]))
    mdy = float(np.median([d[2] for d in disps]))
    scale = float(np.median(scales)) if scales else 1.0
    angle = float(np.median(angles)) if angles else 0.0

    if abs(scale - 1.0) > ZOOM_EPS:
        label = "zoom_in" if scale > 1.0 else "zoom_out"
    elif abs(angle) > ROTATION_DEG:
        label = "rotate_ccw" if angle > 0 else "rotate_cw"
    elif math.hypot(mdx, mdy) < STATIC_PX:
        label = "static"
    elif abs(mdx) >= abs(mdy):
        label = "pan_left" if mdx > 0 else "pan_right"
    else:
        label = "pan_up" if mdy > 0 else "pan_down"

    by_region: dict[str, list[tuple[float, float]]] = {}
    for tid in sorted(predicted):
        rows = np.array(predicted[tid])
        rx, ry = float(rows[:, 2].mean()), float(rows[:, 3].mean())
        if math.hypot(rx, ry) > OUTLIER_PX:
            region = _region(float(rows[:, 0].mean()), float(rows[:, 1].mean()), t.frame_size)
            by_region.setdefault(region, []).append((rx, ry))
    outliers = []
    for region in sorted(by_region):
        v = np.array(by_region[region])
        outliers.append((region, float(np.median(v[:, 0])), float(np.median(v[:, 1]))))
    return MotionEstimate(label, mdx, mdy, scale, angle, n_pairs, outliers)


_CAMERA_TEXT = {
    "static": "the camera is static",
    "pan_left": "the camera pans left (panning from right to left)",
    "pan_right": "the camera pans right (panning from left to right)",
    "pan_up": "the camera pans up (tilting upward)",
    "pan_down": "the camera pans down (tilting downward)",
    "zoom_in": "the camera zooms in",
    "zoom_out": "the camera zooms out",
    "rotate_ccw": "the view is rotating counter-clockwise",
    "rotate_cw": "the view is rotating clockwise",
}


def summarize_motion(t: TrajectoryBundle) -> str:
    """Deterministic one-paragraph description of global and local motion."""
    est = estimate_motion(t)
    if est.label == "none":
        return "Motion: no reliable motion detected."
    text = f"Camera motion: {_CAMERA_TEXT[est.label]}"
    if est.label.startswith("pan"):
        text += (f"; scene content shifts {_direction(est.median_dx, est.median_dy)} by about "
                 f"{math.hypot(est.median_dx, est.median_dy):.1f} px per frame")
    elif est.label.startswith("rotate"):
        text += f" at about {abs(est.angle_deg):.1f} degrees per frame"
    elif est.label.startswith("zoom"):
        text += f" (scale change {100 * (est.scale - 1):+.1f}% per frame)"
    text += "."
    if est.outliers:
        parts = [
            f"in the {region} region moving {_direction(dx, dy)} (~{math.hypot(dx, dy):.1f} px per frame)"
            for region, dx, dy in est.outliers
        ]
        text += " Independent object motion: " + "; ".join(parts) + "."
    else:
        text += " No independent object motion detected."
    return text
