"""Reading pre-extracted frame images.

Only directories of ordered image files are supported. To evaluate a video
container, extract its frames first, e.g.::

    ffmpeg -i clip.mp4 -vsync 0 frames/clip/%05d.png
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


class FrameError(OSError):
    pass


def list_frames(source) -> list[Path]:
    source = Path(source)
    if not source.exists():
        raise FrameError(f"frame source not found: {source}")
    if not source.is_dir():
        raise FrameError(f"{source} is not a frame directory; extract frames first (see t2vscore.frames)")
    files = sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FrameError(f"no frames in {source}")
    return files


def read_frame(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except OSError as exc:
        raise FrameError(f"unreadable frame {path}: {exc}") from exc


def write_frame(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path, format="PNG")
