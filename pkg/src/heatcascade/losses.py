"""Regression targets and training losses.

Each round regresses a bounded step toward the ground truth instead of the
full residual: the step direction is exact but its length is clipped, which
keeps targets in a stable range across rounds. Losses gate every keypoint
term by ground-truth visibility so occluded points contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from heatcascade.geometry import N_LANDMARKS, Pose3D, Shape


@dataclass(frozen=True)
class StagePolicy:
    """Per-round knobs: step bound, loss mix, gating, mining, schedule."""

    stage: int
    correction_bound: float | None
    l1_weight: float
    keypoint_weight: float
    pose_weight: float
    visibility_weight: float
    vis_threshold: float = 0.03
    mining: bool = False
    patch_mode: bool = False
    learning_rate: float = 0.05
    epochs: int = 8

    def __post_init__(self):
        if not 1 <= self.stage <= 5:
            raise ValueError(f"stage must be 1..5, got {self.stage}")
        if self.correction_bound is not None and not self.correction_bound > 0:
            raise ValueError(f"correction bound must be positive, got {self.correction_bound}")
        if (self.correction_bound is not None) != (self.stage <= 2):
            raise ValueError("early rounds (1-2) bound corrections; later rounds must not")
        if self.patch_mode != (self.stage == 5):
            raise ValueError("patch mode is exactly the final round")
        if self.patch_mode and self.pose_weight != 0.0:
            raise ValueError("the patch round predicts no pose; its pose weight must be 0")
        for name in ("l1_weight", "keypoint_weight", "pose_weight", "visibility_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.vis_threshold <= 1.0:
            raise ValueError(f"vis_threshold must lie in [0, 1], got {self.vis_threshold}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


def default_policies(correction_bound: float = 20.0) -> tuple[StagePolicy, ...]:
    """The standard five-round schedule.

    Rounds 1-2 regress bounded steps with a pure squared keypoint loss;
    rounds 3-4 regress free steps with an added L1 term (weight 0.2 then
    0.1) and lighter pose weighting; round 4 mines hard examples; round 5
    refines from local patches only, with mining and no pose head.
    """
    return (
        StagePolicy(1, correction_bound, 0.0, 1.0, 0.5, 0.5),
        StagePolicy(2, correction_bound, 0.0, 1.0, 0.5, 0.5),
        StagePolicy(3, None, 0.2, 1.0, 0.25, 0.5),
        StagePolicy(4, None, 0.1, 1.0, 0.25, 0.5, mining=True),
        StagePolicy(5, None, 0.1, 1.0, 0.0, 0.5, mining=True, patch_mode=True),
    )


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted total plus the unweighted parts it was mixed from."""

    total: float
    keypoint: float
    pose: float
    visibility: float
    n: int


def bounded_correction(
    target: Shape, current: Shape, bound: float | None, visibility
) -> np.ndarray:
    """Per-point step from current toward target, length clipped to bound.

    Invisible points (score < 0.5) get a zero step, as does any point already
    on target. bound=None means unclipped. Visible points must have concrete
    target coordinates.
    """
    if bound is not None and not bound > 0:
        raise ValueError(f"bound must be positive or None, got {bound}")
    vis = np.asarray(visibility, dtype=np.float64).reshape(-1)
    if vis.shape != (N_LANDMARKS,):
        raise ValueError(f"visibility needs {N_LANDMARKS} entries, got {vis.shape[0]}")
    seen = vis >= 0.5
    bad = np.nonzero(seen & target.absent)[0]
    if bad.size:
        raise ValueError(f"landmark {int(bad[0])} is visible but the target has no coordinates")
    if np.isnan(current.points[seen]).any():
        raise ValueError("current estimate must have concrete coordinates for visible points")

    out = np.zeros((N_LANDMARKS, 2), dtype=np.float64)
    diff = target.points[seen] - current.points[seen]
    dist = np.linalg.norm(diff, axis=1)
    step = np.zeros_like(diff)
    moving = dist > 0
    limit = dist if bound is None else np.minimum(bound, dist)
    step[moving] = diff[moving] * (limit[moving] / dist[moving])[:, None]
    out[seen] = step
    return out


def _masked_diff(predicted: Shape, target: Shape, vis: np.ndarray) -> np.ndarray:
    """(N, 2) coordinate differences, zeroed where the point is invisible."""
    seen = vis >= 0.5
    bad = np.nonzero(seen & target.absent)[0]
    if bad.size:
        raise ValueError(f"landmark {int(bad[0])} is visible but the target has no coordinates")
    if np.isnan(predicted.points[seen]).any():
        raise ValueError("prediction must have concrete coordinates for visible points")
    diff = np.zeros((N_LANDMARKS, 2), dtype=np.float64)
    diff[seen] = predicted.points[seen] - target.points[seen]
    return diff


def keypoint_loss(predicted: Shape, target: Shape, visibility) -> float:
    """Sum of squared coordinate errors over visible points."""
    vis = np.asarray(visibility, dtype=np.float64).reshape(-1)
    diff = _masked_diff(predicted, target, vis)
    return float((diff * diff).sum())


def mixed_keypoint_loss(
    predicted: Shape, target: Shape, visibility, l1_weight: float, n: int
):
    """Squared + weighted absolute coordinate error, averaged over n samples.

    Returns (value, gradient) where the gradient is d(value)/d(predicted),
    an (N, 2) array. The absolute term's derivative uses sign() with
    sign(0) = 0. Setting l1_weight=0 recovers the plain squared loss / n.
    """
    if l1_weight < 0:
        raise ValueError(f"l1_weight must be >= 0, got {l1_weight}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    vis = np.asarray(visibility, dtype=np.float64).reshape(-1)
    diff = _masked_diff(predicted, target, vis)
    value = float(((diff * diff) + l1_weight * np.abs(diff)).sum()) / n
    grad = (2.0 * diff + l1_weight * np.sign(diff)) / n
    return value, grad


def pose_loss(predicted: Pose3D, target: Pose3D) -> float:
    """Squared Euclidean distance between pose angle triples, in degrees^2."""
    d = predicted.as_array() - target.as_array()
    return float(d @ d)


def visibility_loss(predicted, target) -> float:
    """Sum of squared visibility-score errors."""
    p = np.asarray(predicted, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.shape != (N_LANDMARKS,) or t.shape != (N_LANDMARKS,):
        raise ValueError(f"visibility vectors need {N_LANDMARKS} entries")
    d = p - t
    return float(d @ d)


def total_loss(
    keypoint: float, pose: float, visibility: float, policy: StagePolicy, n: int
) -> LossBreakdown:
    """Mix the three already-averaged parts with the policy's weights."""
    for name, val in (("keypoint", keypoint), ("pose", pose), ("visibility", visibility)):
        if not np.isfinite(val) or val < 0:
            raise ValueError(f"{name} part must be finite and >= 0, got {val}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    total = (
        policy.keypoint_weight * keypoint
        + policy.pose_weight * pose
        + policy.visibility_weight * visibility
    )
    return LossBreakdown(float(total), keypoint, pose, visibility, n)
