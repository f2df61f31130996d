"""Metrics and report emission.

Keypoint quality is the normalized mean error: mean distance between
predicted and true positions over the truly visible points, divided by the
geometric mean of the face box sides. Pose quality is per-axis mean absolute
error in degrees plus the fraction of faces within 15 degrees on every
scored axis (predictions snap to the nearest 15-degree step first, matching
coarse pose bins).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from heatcascade.geometry import AnnotatedFace, Shape, face_size

POSE_STEP_DEG = 15.0
ACCURACY_TOLERANCE_DEG = 15.0
DEFAULT_CED_STEP = 0.002


def nme(predicted: Shape, face: AnnotatedFace) -> float:
    """Normalized mean error for one face, visible landmarks only."""
    seen = face.visibility > 0.5
    if not seen.any():
        raise ValueError("face has no visible landmarks to score")
    diff = predicted.points[seen] - face.shape.points[seen]
    if np.isnan(diff).any():
        raise ValueError("prediction lacks coordinates for a visible landmark")
    dist = np.linalg.norm(diff, axis=1)
    return float(dist.mean() / face_size(face.box))


def ced_curve(errors, thresholds=None):
    """Cumulative error distribution: fraction of faces at or under each cut.

    Returns (thresholds, fractions); fractions are nondecreasing and reach
    1.0 once the last threshold passes the worst error.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("need at least one error value")
    if thresholds is None:
        top = max(float(errors.max()) * 1.05, DEFAULT_CED_STEP)
        thresholds = np.arange(0.0, top + DEFAULT_CED_STEP, DEFAULT_CED_STEP)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.ndim != 1 or thresholds.size == 0 or np.any(np.diff(thresholds) <= 0):
        raise ValueError("thresholds must be a strictly increasing 1-D sequence")
    fractions = (errors[None, :] <= thresholds[:, None]).mean(axis=1)
    return thresholds, fractions


def discretize_pose(angles) -> np.ndarray:
    """Snap angles to the nearest 15-degree step (banker's rounding on ties)."""
    return POSE_STEP_DEG * np.round(np.asarray(angles, dtype=np.float64) / POSE_STEP_DEG)


def pose_metrics(predicted, target, yaw_only: bool = False):
    """Per-axis MAE, overall MAE, and the within-15-degrees accuracy.

    predicted and target are (S, 3) yaw/pitch/roll arrays in degrees.
    Predictions are discretized to 15-degree steps before scoring. With
    yaw_only, the accuracy counts only the yaw axis; MAE always covers all
    three axes.
    """
    pred = discretize_pose(predicted)
    tgt = np.asarray(target, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[1] != 3 or pred.shape != tgt.shape:
        raise ValueError("pose arrays must both be (S, 3)")
    abs_err = np.abs(pred - tgt)
    axis_mae = abs_err.mean(axis=0)
    overall = float(axis_mae.mean())
    scored = abs_err[:, :1] if yaw_only else abs_err
    accuracy = float((scored.max(axis=1) <= ACCURACY_TOLERANCE_DEG).mean())
    return axis_mae, overall, accuracy


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Everything eval produces for one protocol run."""

    protocol: str
    sample_count: int
    nme_values: np.ndarray
    mean_nme: float
    median_nme: float
    ced_thresholds: np.ndarray
    ced_fractions: np.ndarray
    pose_axis_mae: np.ndarray
    pose_overall_mae: float
    pose_accuracy: float
    group_mean_nme: dict = field(default_factory=dict)


def build_report(
    predictions,
    faces,
    protocol: str = "full",
    thresholds=None,
    yaw_only: bool = False,
    groups: dict | None = None,
) -> EvalReport:
    """Score aligned (prediction, face) lists into one report.

    predictions is a list of (Shape, pose_array) pairs in face order;
    groups optionally maps group names to index arrays for per-group NME.
    """
    if len(predictions) != len(faces):
        raise ValueError(
            f"got {len(predictions)} predictions for {len(faces)} faces"
        )
    if not faces:
        raise ValueError("cannot evaluate an empty set")
    errors = np.array([nme(p[0], f) for p, f in zip(predictions, faces)])
    pose_pred = np.stack([np.asarray(p[1], dtype=np.float64) for p in predictions])
    pose_true = np.stack([f.pose.as_array() for f in faces])
    axis_mae, overall, accuracy = pose_metrics(pose_pred, pose_true, yaw_only)
    ths, fracs = ced_curve(errors, thresholds)
    group_means = {}
    for name, idx in (groups or {}).items():
        idx = np.asarray(idx, dtype=int)
        if idx.size:
            group_means[name] = float(errors[idx].mean())
    return EvalReport(
        protocol=protocol,
        sample_count=len(faces),
        nme_values=errors,
        mean_nme=float(errors.mean()),
        median_nme=float(np.median(errors)),
        ced_thresholds=ths,
        ced_fractions=fracs,
        pose_axis_mae=axis_mae,
        pose_overall_mae=overall,
        pose_accuracy=accuracy,
        group_mean_nme=group_means,
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def write_summary_csv(report: EvalReport, path) -> None:
    rows = [
        ("protocol", report.protocol),
        ("samples", report.sample_count),
        ("mean_nme", _fmt(report.mean_nme)),
        ("median_nme", _fmt(report.median_nme)),
        ("pose_mae_yaw", _fmt(report.pose_axis_mae[0])),
        ("pose_mae_pitch", _fmt(report.pose_axis_mae[1])),
        ("pose_mae_roll", _fmt(report.pose_axis_mae[2])),
        ("pose_mae_overall", _fmt(report.pose_overall_mae)),
        ("pose_accuracy_15deg", _fmt(report.pose_accuracy)),
    ]
    for name in sorted(report.group_mean_nme):
        rows.append((f"group_{name}_mean_nme", _fmt(report.group_mean_nme[name])))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("metric", "value"))
        writer.writerows(rows)


def write_ced_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("threshold", "fraction"))
        for t, f in zip(report.ced_thresholds, report.ced_fractions):
            writer.writerow((_fmt(t), _fmt(f)))


def write_ced_svg(report: EvalReport, path, width=640, height=440) -> None:
    """Self-contained CED plot; coordinates printed with fixed precision."""
    ths = report.ced_thresholds
    fracs = report.ced_fractions
    left, right, top, bottom = 60, 20, 20, 50
    pw = width - left - right
    ph = height - top - bottom
    tmax = float(ths[-1]) if ths[-1] > 0 else 1.0

    def px(t):
        return left + pw * (t / tmax)

    def py(f):
        return top + ph * (1.0 - f)

    points = " ".join(f"{px(t):.2f},{py(f):.2f}" for t, f in zip(ths, fracs))
    grid = []
    for k in range(5):
        frac = k / 4.0
        y = py(frac)
        grid.append(
            f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" '
            f'stroke="#cccccc" stroke-width="1"/>'
        )
        grid.append(
            f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end" '
            f'font-size="12">{frac:.2f}</text>'
        )
        t = tmax * frac
        x = px(t)
        grid.append(
            f'<text x="{x:.2f}" y="{top + ph + 18}" text-anchor="middle" '
            f'font-size="12">{t:.3f}</text>'
        )
    body = "\n".join(
        [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
            '<rect width="100%" height="100%" fill="white"/>',
            *grid,
            f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" '
            'fill="none" stroke="#333333"/>',
            f'<polyline points="{points}" fill="none" stroke="#c0392b" stroke-width="2"/>',
            f'<text x="{left + pw / 2:.2f}" y="{height - 12}" text-anchor="middle" '
            'font-size="13">normalized mean error</text>',
            f'<text x="16" y="{top + ph / 2:.2f}" font-size="13" '
            f'transform="rotate(-90 16 {top + ph / 2:.2f})" '
            'text-anchor="middle">fraction of faces</text>',
            f'<text x="{left + pw / 2:.2f}" y="{top + 2}" text-anchor="middle" '
            f'font-size="13">{report.protocol}: CED over {report.sample_count} faces</text>',
            "</svg>",
        ]
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(body)
        fh.write("\n")


def emit_report(report: EvalReport, out_dir) -> dict:
    """Write summary.csv, ced.csv, and ced.svg; returns the file paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "summary": os.path.join(out_dir, "summary.csv"),
        "ced_csv": os.path.join(out_dir, "ced.csv"),
        "ced_svg": os.path.join(out_dir, "ced.svg"),
    }
    write_summary_csv(report, paths["summary"])
    write_ced_csv(report, paths["ced_csv"])
    write_ced_svg(report, paths["ced_svg"])
    return paths
