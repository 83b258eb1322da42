"""Activity masks: pixels whose values ever exceed a threshold.

A mask marks grid cells that showed traffic above a threshold at any time in
any channel; everything else can be zeroed in predictions. Threshold 0 gives
the "always stayed zero" variant (exceed is strict).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .movie_store import MovieReader, ingest, open_movie

_FRAME_BATCH = 64


@dataclass(frozen=True)
class Mask:
    active: np.ndarray  # (h, w) bool
    threshold: int
    source_span: int    # number of frames scanned


def build_mask(movies: list[MovieReader], threshold: int) -> Mask:
    """Mark pixels where any scanned value, in any channel, is > threshold."""
    if not movies:
        raise ValueError("empty movie set")
    if not 0 <= threshold <= 255:
        raise ValueError(f"threshold must be a uint8 value, got {threshold}")
    first = movies[0].header
    peak = np.zeros((first.h, first.w), dtype=np.uint8)
    span = 0
    for m in movies:
        hdr = m.header
        if (hdr.h, hdr.w) != peak.shape:
            raise ValueError(f"grid {hdr.h}x{hdr.w} does not match {peak.shape}")
        for t0 in range(0, hdr.t, _FRAME_BATCH):
            n = min(_FRAME_BATCH, hdr.t - t0)
            frames = m.read_frames(t0, n).frames
            np.maximum(peak, frames.max(axis=(0, 1)), out=peak)
        span += hdr.t
    return Mask(peak > threshold, threshold, span)


def apply_mask(frames: np.ndarray, mask: Mask) -> np.ndarray:
    """Zero inactive pixels across all leading (frame, channel) axes."""
    if frames.shape[-2:] != mask.active.shape:
        raise ValueError(
            f"frame grid {frames.shape[-2:]} does not match mask {mask.active.shape}"
        )
    return frames * mask.active.astype(frames.dtype)


def save_mask(mask: Mask, path: str | Path) -> Path:
    """Persist as a 1-frame, 1-channel TMM1 movie with values {0, 255}."""
    grid = np.where(mask.active, 255, 0).astype(np.uint8)[None, None]
    return ingest(grid, f"mask-thr{mask.threshold}-n{mask.source_span}", "MASK", path)


def load_mask(path: str | Path) -> Mask:
    with open_movie(path) as m:
        hdr = m.header
        if hdr.t != 1 or hdr.c != 1 or hdr.date != "MASK":
            raise ValueError(f"{path} is not a mask file")
        grid = m.read_all()[0, 0]
    threshold, span = 0, hdr.t
    if hdr.city.startswith("mask-thr"):
        try:
            thr_part, n_part = hdr.city[len("mask-thr"):].split("-n")
            threshold, span = int(thr_part), int(n_part)
        except ValueError:
            pass
    return Mask(grid > 0, threshold, span)
