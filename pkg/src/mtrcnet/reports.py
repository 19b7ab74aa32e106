"""Raster figures: matrix heatmaps and per-video label ribbons (PNG)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .evaluation import labels_of

# one colour per phase, distinguishable at a glance
PHASE_COLORS = np.array([
    (228, 26, 28), (55, 126, 184), (77, 175, 74), (152, 78, 163),
    (255, 127, 0), (255, 215, 0), (166, 86, 40), (247, 129, 191),
    (153, 153, 153), (0, 0, 0),
], dtype=np.uint8)
ON_COLOR = np.array((40, 40, 40), dtype=np.uint8)
OFF_COLOR = np.array((245, 245, 245), dtype=np.uint8)


def heatmap_pixels(matrix, cell: int = 16) -> np.ndarray:
    """(H, W, 3) uint8 image, white for 0 through dark blue for 1.

    Values are clipped to [0, 1]; nan cells are drawn grey.
    """
    m = np.asarray(matrix, dtype=np.float64)
    v = np.clip(np.nan_to_num(m, nan=0.0), 0.0, 1.0)
    white = np.array([255.0, 255.0, 255.0])
    blue = np.array([8.0, 48.0, 107.0])
    rgb = white + v[..., None] * (blue - white)
    rgb[np.isnan(m)] = 160.0
    rgb = np.rint(rgb).astype(np.uint8)
    return np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)


def save_heatmap(path, matrix, cell: int = 16):
    Image.fromarray(heatmap_pixels(matrix, cell), mode="RGB").save(path)


def ribbon_pixels(labels, height: int = 12, width_per_frame: int = 2) -> np.ndarray:
    """Colour strip of phase labels with time running left to right."""
    labels = np.asarray(labels, dtype=np.int64)
    strip = PHASE_COLORS[labels % len(PHASE_COLORS)]
    strip = np.repeat(strip[None], height, axis=0)
    return np.repeat(strip, width_per_frame, axis=1)


def tool_ribbon_pixels(tools, row_height: int = 6, width_per_frame: int = 2) -> np.ndarray:
    """One dark/light row per tool, time running left to right."""
    tools = np.asarray(tools).astype(bool).T
    img = np.where(tools[..., None], ON_COLOR, OFF_COLOR).astype(np.uint8)
    img = np.repeat(img, row_height, axis=0)
    return np.repeat(img, width_per_frame, axis=1)


def save_ribbons(out_dir, video_id, gt_phase, pred_phase, gt_tools=None, pred_tools=None):
    """Write ``{video}_phase_gt.png``, ``{video}_phase_pred.png`` and, when tool
    labels are given, the matching ``_tools_`` pair. Returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    pairs = [("phase_gt", ribbon_pixels(gt_phase)), ("phase_pred", ribbon_pixels(pred_phase))]
    if gt_tools is not None and pred_tools is not None:
        pairs += [("tools_gt", tool_ribbon_pixels(gt_tools)), ("tools_pred", tool_ribbon_pixels(pred_tools))]
    for suffix, px in pairs:
        p = out / f"{video_id}_{suffix}.png"
        Image.fromarray(px, mode="RGB").save(p)
        paths.append(p)
    return paths


def render_report(report, predictions, annotations, out_dir, tool_threshold: float = 0.5):
    """Heatmaps for every matrix in ``report`` plus ribbons for every video."""
    out = Path(out_dir)
    fig = out / "figures"
    fig.mkdir(parents=True, exist_ok=True)
    for name in report.MATRICES:
        save_heatmap(fig / f"{name}.png", getattr(report, name))
    by_video = {}
    for r in predictions:
        by_video.setdefault(r.video_id, {})[int(r.frame_idx)] = r
    for vid in report.videos:
        gt_phase, gt_tools = labels_of(annotations[vid])
        recs = [by_video[vid][t] for t in range(len(gt_phase))]
        pred_phase = np.array([r.phase_pred for r in recs])
        pred_tools = np.array([r.tool_probs for r in recs]) >= tool_threshold
        save_ribbons(fig / "ribbons", vid, gt_phase, pred_phase, gt_tools, pred_tools)
    return fig
