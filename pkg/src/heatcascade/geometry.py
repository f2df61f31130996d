"""Core geometric types: keypoint shapes, face boxes, 3D pose, mean shape.

Coordinates are image pixels with x right, y down, pixel centers at integer
positions. A shape always holds exactly ``N_LANDMARKS`` points; occluded
points that have no annotated position carry an (nan, nan) sentinel pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

N_LANDMARKS = 21

# Point ordering (left/right from the viewer's side):
#   0-2   left brow   (outer corner, center, inner corner)
#   3-5   right brow  (inner corner, center, outer corner)
#   6-8   left eye    (outer corner, center, inner corner)
#   9-11  right eye   (inner corner, center, outer corner)
#   12    left ear lobe
#   13-15 nose        (left wing, tip, right wing)
#   16    right ear lobe
#   17-19 mouth       (left corner, center, right corner)
#   20    chin
LANDMARK_NAMES = (
    "brow_l_out", "brow_l_mid", "brow_l_in",
    "brow_r_in", "brow_r_mid", "brow_r_out",
    "eye_l_out", "eye_l_mid", "eye_l_in",
    "eye_r_in", "eye_r_mid", "eye_r_out",
    "ear_l",
    "nose_l", "nose_mid", "nose_r",
    "ear_r",
    "mouth_l", "mouth_mid", "mouth_r",
    "chin",
)

# Index permutation applied when an image is mirrored horizontally.
# Self-inverse: FLIP_INDEX[FLIP_INDEX[i]] == i.
FLIP_INDEX = np.array(
    [5, 4, 3, 2, 1, 0, 11, 10, 9, 8, 7, 6, 16, 15, 14, 13, 12, 19, 18, 17, 20]
)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Shape:
    """21 keypoint positions in pixels, (nan, nan) rows for absent points."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2):
            raise ValueError(
                f"shape needs exactly {N_LANDMARKS} (x, y) rows, got array of shape {pts.shape}"
            )
        if np.isinf(pts).any():
            raise ValueError("shape coordinates must be finite (nan pairs mark absent points)")
        nan = np.isnan(pts)
        if np.any(nan[:, 0] != nan[:, 1]):
            bad = int(np.nonzero(nan[:, 0] != nan[:, 1])[0][0])
            raise ValueError(f"landmark {bad}: absent points need both coordinates nan")
        object.__setattr__(self, "points", _frozen(pts))

    @property
    def absent(self) -> np.ndarray:
        """Boolean mask, True where the point has no coordinates."""
        return np.isnan(self.points[:, 0])

    def offset(self, delta: np.ndarray) -> "Shape":
        return Shape(self.points + np.asarray(delta, dtype=np.float64))


def as_visibility(values, ground_truth: bool = False) -> np.ndarray:
    """Validate a visibility vector; binary 0/1 required when ground_truth."""
    v = np.array(values, dtype=np.float64).reshape(-1)
    if v.shape != (N_LANDMARKS,):
        raise ValueError(f"visibility needs {N_LANDMARKS} entries, got {v.shape[0]}")
    if not np.isfinite(v).all():
        raise ValueError("visibility entries must be finite")
    if v.min() < 0.0 or v.max() > 1.0:
        raise ValueError("visibility entries must lie in [0, 1]")
    if ground_truth and not np.isin(v, (0.0, 1.0)).all():
        raise ValueError("ground-truth visibility must be binary 0/1")
    return _frozen(v)


@dataclass(frozen=True)
class Pose3D:
    """Head orientation in degrees: yaw (left/right), pitch (up/down), roll (in-plane)."""

    yaw: float
    pitch: float
    roll: float

    def __post_init__(self):
        for name in ("yaw", "pitch", "roll"):
            val = getattr(self, name)
            if not math.isfinite(val):
                raise ValueError(f"pose {name} must be finite, got {val!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch, self.roll], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Pose3D":
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        if a.shape != (3,):
            raise ValueError(f"pose array needs 3 entries, got {a.shape[0]}")
        return Pose3D(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class FaceBox:
    """Axis-aligned face box: top-left corner (x, y), width w, height h."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"box {name} must be finite")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    def corners(self) -> np.ndarray:
        x, y, w, h = self.x, self.y, self.w, self.h
        return np.array([[x, y], [x + w, y], [x + w, y + h], [x, y + h]], dtype=np.float64)


def face_size(box: FaceBox) -> float:
    """Geometric-mean side length, the normalizer for keypoint errors."""
    return math.sqrt(box.w * box.h)


@dataclass(frozen=True, eq=False)
class AnnotatedFace:
    """One labelled face: image reference, box, keypoints, visibility, pose."""

    image_path: str
    box: FaceBox
    shape: Shape
    visibility: np.ndarray
    pose: Pose3D
    split_tag: str = ""

    def __post_init__(self):
        vis = as_visibility(self.visibility, ground_truth=True)
        hidden = self.shape.absent
        bad = np.nonzero((vis > 0.5) & hidden)[0]
        if bad.size:
            raise ValueError(f"landmark {int(bad[0])} marked visible but has no coordinates")
        object.__setattr__(self, "visibility", vis)


@dataclass(frozen=True, eq=False)
class MeanShape:
    """Average shape in box-normalized coordinates, each point inside [0, 1]^2."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2):
            raise ValueError(f"mean shape needs {N_LANDMARKS} points, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("mean shape coordinates must be finite")
        if pts.min() < -1e-9 or pts.max() > 1.0 + 1e-9:
            raise ValueError("mean shape coordinates must lie inside the unit square")
        object.__setattr__(self, "points", _frozen(pts))


def normalize_to_box(shape: Shape, box: FaceBox) -> np.ndarray:
    """Map pixel coordinates into the box's unit square (absent rows stay nan)."""
    return (shape.points - (box.x, box.y)) / (box.w, box.h)


def place_in_box(mean: MeanShape, box: FaceBox) -> Shape:
    """Scale the mean shape into a concrete box; the cascade's starting point."""
    return Shape(mean.points * (box.w, box.h) + (box.x, box.y))


def compute_mean_shape(faces) -> MeanShape:
    """Per-landmark average over box-normalized training shapes, visible points only."""
    faces = list(faces)
    if not faces:
        raise ValueError("cannot compute a mean shape from zero faces")
    sums = np.zeros((N_LANDMARKS, 2), dtype=np.float64)
    counts = np.zeros(N_LANDMARKS, dtype=np.float64)
    for face in faces:
        norm = normalize_to_box(face.shape, face.box)
        seen = face.visibility > 0.5
        sums[seen] += norm[seen]
        counts[seen] += 1.0
    missing = np.nonzero(counts == 0)[0]
    if missing.size:
        raise ValueError(f"landmark {int(missing[0])} is visible in no training face")
    return MeanShape(sums / counts[:, None])


def _rotation(angle_deg: float) -> np.ndarray:
    # Screen convention: y grows downward, positive angle turns +x toward +y.
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def transform_annotation(
    face: AnnotatedFace, image: np.ndarray, angle_deg: float = 0.0, flip: bool = False
):
    """Mirror and/or rotate a labelled face, keeping labels consistent.

    Flip happens first (around the vertical image axis), then rotation about
    the image center on the same canvas size. Returns the transformed
    ``(AnnotatedFace, image)``; the face keeps the original image_path, the
    caller renames it when saving. Raises ValueError if the rotated box no
    longer overlaps the canvas.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got array of shape {image.shape}")
    img = image
    pts = face.shape.points.copy()
    vis = np.asarray(face.visibility, dtype=np.float64)
    box = face.box
    pose = face.pose
    h_img, w_img = img.shape[:2]

    if flip:
        img = np.ascontiguousarray(img[:, ::-1])
        pts[:, 0] = (w_img - 1.0) - pts[:, 0]
        pts = pts[FLIP_INDEX]
        vis = vis[FLIP_INDEX]
        box = FaceBox((w_img - 1.0) - (box.x + box.w), box.y, box.w, box.h)
        pose = Pose3D(-pose.yaw, pose.pitch, -pose.roll)

    if angle_deg != 0.0:
        center = np.array([(w_img - 1.0) / 2.0, (h_img - 1.0) / 2.0])
        rot = _rotation(angle_deg)
        shift = center - rot @ center
        pts = pts @ rot.T + shift
        corners = box.corners() @ rot.T + shift
        lo = corners.min(axis=0)
        hi = corners.max(axis=0)
        if hi[0] <= 0 or hi[1] <= 0 or lo[0] >= w_img - 1 or lo[1] >= h_img - 1:
            raise ValueError("rotated face box falls entirely outside the image")
        box = FaceBox(float(lo[0]), float(lo[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1]))
        matrix = np.hstack([rot, shift[:, None]])
        img = cv2.warpAffine(img, matrix, (w_img, h_img), flags=cv2.INTER_LINEAR)
        pose = Pose3D(pose.yaw, pose.pitch, pose.roll + angle_deg)

    out = AnnotatedFace(
        image_path=face.image_path,
        box=box,
        shape=Shape(pts),
        visibility=vis,
        pose=pose,
        split_tag=face.split_tag,
    )
    return out, np.ascontiguousarray(img)
