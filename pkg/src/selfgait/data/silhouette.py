"""Silhouette normalisation and frame I/O."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import EmptySilhouette

logger = logging.getLogger(__name__)

FRAME_HEIGHT = 64
FRAME_WIDTH = 44


def nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize sampling each output pixel at its centre."""
    in_h, in_w = img.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * in_h / out_h).astype(np.int64), in_h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * in_w / out_w).astype(np.int64), in_w - 1)
    return img[rows[:, None], cols[None, :]]


def align_silhouette(raw: np.ndarray, height: int = FRAME_HEIGHT, width: int = FRAME_WIDTH) -> np.ndarray:
    """Crop to the occupied rows, scale to ``height`` and centre horizontally.

    The horizontal centre is the centre of mass of the upper half of the
    rescaled figure (the head/torso region is far steadier than the legs).
    Columns falling outside the source are zero-padded.
    """
    raw = np.asarray(raw, dtype=np.float32)
    if raw.ndim != 2:
        raise ValueError(f"expected a 2-D silhouette, got shape {raw.shape}")
    occupied = np.flatnonzero(raw.max(axis=1) > 0)
    if occupied.size == 0:
        raise EmptySilhouette("silhouette has no foreground pixels")
    cropped = raw[occupied[0]:occupied[-1] + 1]

    scale = height / cropped.shape[0]
    new_w = max(1, int(round(cropped.shape[1] * scale)))
    resized = nearest_resize(cropped, height, new_w)

    top = resized[: height // 2]
    mass = top.sum(axis=0)
    if mass.sum() <= 0:
        mass = resized.sum(axis=0)
    center = float((mass * np.arange(new_w)).sum() / mass.sum())
    left = int(np.floor(center + 0.5)) - width // 2

    out = np.zeros((height, width), dtype=np.float32)
    src_lo, src_hi = max(left, 0), min(left + width, new_w)
    if src_hi > src_lo:
        out[:, src_lo - left:src_hi - left] = resized[:, src_lo:src_hi]
    return np.clip(out, 0.0, 1.0)


def read_frame(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale frame scaled to [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def write_frame(path: str | Path, frame: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_aligned_frames(paths) -> np.ndarray:
    """Load frames in order, aligning any that are not already 64x44.

    Empty frames are skipped with a log line, as segmentation dropouts are
    common in real silhouette data.
    """
    frames = []
    for p in paths:
        img = read_frame(p)
        if img.shape == (FRAME_HEIGHT, FRAME_WIDTH):
            frames.append(img)
            continue
        try:
            frames.append(align_silhouette(img))
        except EmptySilhouette:
            logger.info("skipping empty frame %s", p)
    if not frames:
        return np.zeros((0, FRAME_HEIGHT, FRAME_WIDTH), dtype=np.float32)
    return np.stack(frames)
