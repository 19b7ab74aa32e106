"""Phase and tool metrics, confusion and co-occurrence matrices, run reports."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError

log = logging.getLogger(__name__)

TOOL_THRESHOLD = 0.5


@dataclass
class PhaseScores:
    precision: np.ndarray  # per phase, nan where undefined
    recall: np.ndarray
    mean_precision: float
    mean_recall: float


def phase_pr_re(gt, pred, num_phases: int = 7) -> PhaseScores:
    """Per-phase precision |GT & P| / |P| and recall |GT & P| / |GT|.

    Undefined values (empty P or empty GT) are nan and left out of the means.
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise AlignmentError(f"ground truth has {gt.shape} labels, predictions {pred.shape}")
    pr = np.full(num_phases, np.nan)
    re = np.full(num_phases, np.nan)
    for z in range(num_phases):
        in_gt = gt == z
        in_p = pred == z
        hit = np.count_nonzero(in_gt & in_p)
        if in_p.any():
            pr[z] = hit / np.count_nonzero(in_p)
        if in_gt.any():
            re[z] = hit / np.count_nonzero(in_gt)
    return PhaseScores(pr, re, _nanmean(pr), _nanmean(re))


def _nanmean(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    ok = ~np.isnan(x)
    return float(x[ok].mean()) if ok.any() else float("nan")


def video_accuracy(gt, pred) -> float:
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise AlignmentError(f"ground truth has {gt.shape} labels, predictions {pred.shape}")
    if gt.size == 0:
        log.warning("empty video skipped in accuracy")
        return float("nan")
    return float(np.count_nonzero(gt == pred) / gt.size)


def average_precision(scores, labels) -> float:
    """Mean of precision@k over the ranks k of positive frames.

    Frames are ranked by descending score; ties keep ascending frame order.
    Returns nan (with a warning) when there is no positive frame.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = np.count_nonzero(labels)
    if n_pos == 0:
        log.warning("average precision undefined without positive labels")
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return math.fsum(float(i) / float(k) for i, k in enumerate(ranks, start=1)) / n_pos


def mean_average_precision(scores, labels):
    """Per-column AP and their mean over columns that have positives."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    aps = np.array([average_precision(scores[:, c], labels[:, c]) for c in range(labels.shape[1])])
    return aps, _nanmean(aps)


def f1(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def confusion_counts(gt, pred, num_phases: int = 7) -> np.ndarray:
    m = np.zeros((num_phases, num_phases), dtype=np.int64)
    np.add.at(m, (np.asarray(gt), np.asarray(pred)), 1)
    return m


def normalize_rows(counts):
    """Row-normalise; returns ``(matrix, has_support)``. Empty rows stay zero."""
    counts = np.asarray(counts, dtype=np.float64)
    sums = counts.sum(axis=1)
    support = sums > 0
    out = np.zeros_like(counts)
    out[support] = counts[support] / sums[support, None]
    return out, support


def confusion_matrix(gt, pred, num_phases: int = 7):
    """Rows are ground-truth phases, columns predicted phases, rows sum to one.

    Returns ``(matrix, has_support)``.
    """
    return normalize_rows(confusion_counts(gt, pred, num_phases))


def cooccurrence_counts(phases, tools, num_phases: int = 7) -> np.ndarray:
    """(num_tools + 1, num_phases) counts; the last row counts tool-free frames."""
    phases = np.asarray(phases)
    tools = np.asarray(tools).astype(bool)
    if len(phases) != len(tools):
        raise AlignmentError("phase and tool sequences differ in length")
    nc = tools.shape[1]
    out = np.zeros((nc + 1, num_phases), dtype=np.int64)
    for z in range(num_phases):
        sel = phases == z
        out[:nc, z] = tools[sel].sum(axis=0)
        out[nc, z] = np.count_nonzero(~tools[sel].any(axis=1))
    return out


def cooccurrence_matrix(phases, tools, num_phases: int = 7):
    """Row-normalised tool/phase co-occurrence. Returns ``(matrix, has_support)``."""
    return normalize_rows(cooccurrence_counts(phases, tools, num_phases))


def cooccurrence_diff(gt_counts, pred_counts) -> np.ndarray:
    """|gt - pred| counts, min-max scaled over the whole matrix to [0, 1]."""
    d = np.abs(np.asarray(gt_counts, dtype=np.float64) - np.asarray(pred_counts, dtype=np.float64))
    lo, hi = d.min(), d.max()
    if hi == lo:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


@dataclass
class EvalReport:
    num_phases: int
    num_tools: int
    videos: list
    per_video: dict
    per_phase_precision: list
    per_phase_recall: list
    mean_precision: float
    std_precision: float
    mean_recall: float
    std_recall: float
    f1: float
    mean_accuracy: float
    std_accuracy: float
    per_tool_ap: list
    mAP: float
    video_mAP_mean: float
    video_mAP_std: float
    confusion: np.ndarray = field(repr=False)
    confusion_support: np.ndarray = field(repr=False)
    cooccurrence_gt: np.ndarray = field(repr=False)
    cooccurrence_pred: np.ndarray = field(repr=False)
    cooccurrence_diff: np.ndarray = field(repr=False)
    pooled: dict = field(default_factory=dict)

    MATRICES = ("confusion", "cooccurrence_gt", "cooccurrence_pred", "cooccurrence_diff")

    def summary(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in self.MATRICES + ("confusion_support",)}
        return _jsonable(d)

    def cooccurrence_error(self) -> float:
        """Mean absolute difference between predicted and true co-occurrence."""
        return float(np.mean(np.abs(self.cooccurrence_pred - self.cooccurrence_gt)))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if math.isnan(x) else x
    if isinstance(x, np.integer):
        return int(x)
    return x


def _mean_std(values):
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


def labels_of(ann):
    if hasattr(ann, "phase_labels"):
        return np.asarray(ann.phase_labels), np.asarray(ann.tool_labels)
    return np.asarray(ann[0]), np.asarray(ann[1])


def evaluate_run(predictions, annotations, num_phases: int = 7) -> EvalReport:
    """Score prediction records against per-video annotations.

    ``annotations`` maps video id to a VideoRecord/Annotations or a
    ``(phase_labels, tool_labels)`` pair. Every annotated frame needs exactly
    one prediction. Videos are folded in sorted-id order.
    """
    by_video = {}
    for r in predictions:
        by_video.setdefault(r.video_id, {})[int(r.frame_idx)] = r
    missing = []
    for vid in sorted(annotations):
        n = len(labels_of(annotations[vid])[0])
        have = by_video.get(vid, {})
        missing.extend((vid, t) for t in range(n) if t not in have)
    if missing:
        raise AlignmentError(f"{len(missing)} annotated frame(s) lack a prediction", missing)

    videos = sorted(annotations)
    per_video = {}
    per_phase_pr, per_phase_re = [], []
    all_gt, all_pred, all_tools, all_scores = [], [], [], []
    video_maps = []
    for vid in videos:
        gt_phase, gt_tools = labels_of(annotations[vid])
        recs = [by_video[vid][t] for t in range(len(gt_phase))]
        pred = np.array([r.phase_pred for r in recs], dtype=np.int64)
        scores = np.array([r.tool_probs for r in recs], dtype=np.float64)
        ps = phase_pr_re(gt_phase, pred, num_phases)
        acc = video_accuracy(gt_phase, pred)
        _, vmap = mean_average_precision(scores, gt_tools)
        per_video[vid] = {"precision": ps.mean_precision, "recall": ps.mean_recall,
                          "accuracy": acc, "mAP": vmap}
        per_phase_pr.append(ps.precision)
        per_phase_re.append(ps.recall)
        video_maps.append(vmap)
        all_gt.append(gt_phase)
        all_pred.append(pred)
        all_tools.append(gt_tools)
        all_scores.append(scores)

    gt = np.concatenate(all_gt)
    pred = np.concatenate(all_pred)
    tools = np.concatenate(all_tools)
    scores = np.concatenate(all_scores)
    mean_pr, std_pr = _mean_std([v["precision"] for v in per_video.values()])
    mean_re, std_re = _mean_std([v["recall"] for v in per_video.values()])
    mean_acc, std_acc = _mean_std([v["accuracy"] for v in per_video.values()])
    vmap_mean, vmap_std = _mean_std(video_maps)
    aps, m_ap = mean_average_precision(scores, tools)
    conf, support = confusion_matrix(gt, pred, num_phases)
    pred_tools = scores >= TOOL_THRESHOLD
    gt_counts = cooccurrence_counts(gt, tools, num_phases)
    pred_counts = cooccurrence_counts(pred, pred_tools, num_phases)
    pooled = phase_pr_re(gt, pred, num_phases)
    return EvalReport(
        num_phases=num_phases,
        num_tools=tools.shape[1],
        videos=videos,
        per_video=per_video,
        per_phase_precision=_col_nanmean(per_phase_pr),
        per_phase_recall=_col_nanmean(per_phase_re),
        mean_precision=mean_pr,
        std_precision=std_pr,
        mean_recall=mean_re,
        std_recall=std_re,
        f1=f1(mean_pr, mean_re),
        mean_accuracy=mean_acc,
        std_accuracy=std_acc,
        per_tool_ap=aps.tolist(),
        mAP=m_ap,
        video_mAP_mean=vmap_mean,
        video_mAP_std=vmap_std,
        confusion=conf,
        confusion_support=support,
        cooccurrence_gt=normalize_rows(gt_counts)[0],
        cooccurrence_pred=normalize_rows(pred_counts)[0],
        cooccurrence_diff=cooccurrence_diff(gt_counts, pred_counts),
        pooled={
            "precision": pooled.mean_precision,
            "recall": pooled.mean_recall,
            "accuracy": video_accuracy(gt, pred),
            "per_phase_precision": pooled.precision.tolist(),
            "per_phase_recall": pooled.recall.tolist(),
            "gt_counts": gt_counts.tolist(),
            "pred_counts": pred_counts.tolist(),
        },
    )


def _col_nanmean(rows) -> list:
    return [_nanmean(col) for col in np.vstack(rows).T]


def evaluate_files(predictions_csv, dataset_dir, video_ids=None) -> EvalReport:
    """Evaluate a predictions CSV against the annotation files of a dataset."""
    from .data import load_annotations, load_split, video_paths
    from .inference import read_predictions

    split, meta = load_split(dataset_dir)
    fps = meta.get("annotation_fps", 25)
    ids = list(video_ids) if video_ids is not None else split.test_videos
    anns = {}
    for vid in ids:
        _, phase_path, tool_path = video_paths(dataset_dir, vid)
        anns[vid] = load_annotations(phase_path, tool_path, fps_phase=fps)
    return evaluate_run(read_predictions(predictions_csv), anns)


def write_matrix_csv(path, matrix):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(matrix):
            w.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def write_report(report: EvalReport, out_dir):
    """``report.json`` plus one CSV per matrix."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    for name in EvalReport.MATRICES:
        write_matrix_csv(out / f"{name}.csv", getattr(report, name))
