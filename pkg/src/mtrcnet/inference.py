"""Online (causal) prediction over whole videos and the predictions CSV."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import VideoRecord, center_crop
from .errors import ParseError
from .model import MTRCNet, RecurrentState, encode_frames, map_phase_features, phase_head_forward, tool_head_forward


@dataclass
class PredictionRecord:
    video_id: str
    frame_idx: int
    phase_probs: np.ndarray
    phase_pred: int
    tool_probs: np.ndarray


def argmax_lowest(p: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    return np.argmax(p, axis=-1)


@torch.no_grad()
def stream_video(model: MTRCNet, frames: np.ndarray):
    """Feed frames one at a time, carrying the LSTM state across the video.

    Each frame is encoded on its own, so the output at frame t never depends
    on later frames. Returns ``(phase_probs, tool_probs, tool_priors)`` arrays
    of shape (T, 7).
    """
    model.eval()
    cfg = model.config
    dtype = next(model.parameters()).dtype
    frames = center_crop(np.asarray(frames), cfg.frame_size)
    state = RecurrentState.zeros(1, cfg.phase_feature_dim, dtype=dtype)
    phase, tools, priors = [], [], []
    for t in range(len(frames)):
        x = torch.as_tensor(frames[t], dtype=dtype)[None, None]
        g = encode_frames(x, model.backbone)
        tool = tool_head_forward(g, model.tool_head)
        pp, r, state = phase_head_forward(g, state, model.phase_head)
        source = pp if cfg.mapping_source == "phase_labels" else r
        prior = map_phase_features(source, model.mapping_cell.to_tools)
        phase.append(pp[0, 0].numpy())
        tools.append(tool[0, 0].numpy())
        priors.append(prior[0, 0].numpy())
    return (np.asarray(phase, dtype=np.float64), np.asarray(tools, dtype=np.float64),
            np.asarray(priors, dtype=np.float64))


def predict_video(model: MTRCNet, video: VideoRecord) -> list:
    phase, tools, _ = stream_video(model, video.frames)
    preds = argmax_lowest(phase)
    return [
        PredictionRecord(video.video_id, t, phase[t], int(preds[t]), tools[t])
        for t in range(len(phase))
    ]


def csv_header(num_phases=7, num_tools=7):
    return (["video_id", "frame_idx", "phase_pred"]
            + [f"pp{i}" for i in range(num_phases)] + [f"tp{i}" for i in range(num_tools)])


def write_predictions(path, records):
    records = list(records)
    nz = len(records[0].phase_probs) if records else 7
    nc = len(records[0].tool_probs) if records else 7
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(nz, nc))
        for r in records:
            w.writerow([r.video_id, r.frame_idx, r.phase_pred]
                       + [repr(float(v)) for v in r.phase_probs]
                       + [repr(float(v)) for v in r.tool_probs])


def read_predictions(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty predictions file", path) from None
        nz = sum(h.startswith("pp") for h in header)
        nc = sum(h.startswith("tp") for h in header)
        if header != csv_header(nz, nc):
            raise ParseError(f"unexpected predictions header {header}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            try:
                vals = [float(v) for v in row[3:]]
                out.append(PredictionRecord(
                    row[0], int(row[1]), np.asarray(vals[:nz]), int(row[2]), np.asarray(vals[nz:nz + nc])))
            except (ValueError, IndexError):
                raise ParseError("malformed prediction row", path, lineno) from None
    return out


def predict_dataset(model: MTRCNet, videos, path=None) -> list:
    records = []
    for v in videos:
        records.extend(predict_video(model, v))
    if path is not None:
        write_predictions(Path(path), records)
    return records
