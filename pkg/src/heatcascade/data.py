"""Annotation I/O, dataset protocols, and the synthetic face corpus.

Annotations travel as JSON Lines, one face per line:

    {"image": "face_00000.png",
     "box": [x, y, w, h],
     "pose": [yaw, pitch, roll],
     "landmarks": [[index, x, y, visible], ...],   # 21 entries
     "split": ""}

Invisible landmarks (visible == 0) may carry null coordinates or omit them
as a two-element [index, 0] entry. Coordinates serialize via repr so a
save/load round trip is exact.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from heatcascade.errors import DataError
from heatcascade.geometry import (
    N_LANDMARKS,
    AnnotatedFace,
    FaceBox,
    Pose3D,
    Shape,
    transform_annotation,
)

YAW_LIMIT = 120.0  # profile-and-beyond yaw span seen in annotations
PIFA_TEST_SIZE = 1000
AFW_MIN_BOX_HEIGHT = 150.0
VARIANT_ANGLES = (15.0, 30.0, 45.0, 60.0)


# ---------------------------------------------------------------------------
# annotation records

def face_to_record(face: AnnotatedFace) -> dict:
    landmarks = []
    for i in range(N_LANDMARKS):
        x, y = face.shape.points[i]
        v = int(face.visibility[i])
        if math.isnan(x):
            landmarks.append([i, None, None, v])
        else:
            landmarks.append([i, float(x), float(y), v])
    return {
        "image": face.image_path,
        "box": [face.box.x, face.box.y, face.box.w, face.box.h],
        "pose": [face.pose.yaw, face.pose.pitch, face.pose.roll],
        "landmarks": landmarks,
        "split": face.split_tag,
    }


def _record_to_face(rec: dict) -> AnnotatedFace:
    for key in ("image", "box", "pose", "landmarks"):
        if key not in rec:
            raise ValueError(f"missing field {key!r}")
    box = rec["box"]
    if not (isinstance(box, list) and len(box) == 4):
        raise ValueError("box must be a [x, y, w, h] list")
    pose = rec["pose"]
    if not (isinstance(pose, list) and len(pose) == 3):
        raise ValueError("pose must be a [yaw, pitch, roll] list")
    yaw, pitch, roll = (float(v) for v in pose)
    if abs(yaw) > YAW_LIMIT:
        raise ValueError(f"yaw {yaw} outside [-{YAW_LIMIT}, {YAW_LIMIT}]")
    if abs(pitch) > 180.0 or abs(roll) > 180.0:
        raise ValueError("pitch/roll outside [-180, 180]")
    marks = rec["landmarks"]
    if not (isinstance(marks, list) and len(marks) == N_LANDMARKS):
        raise ValueError(f"landmarks must list all {N_LANDMARKS} points")
    pts = np.full((N_LANDMARKS, 2), np.nan)
    vis = np.zeros(N_LANDMARKS)
    seen = set()
    for entry in marks:
        if not isinstance(entry, list) or len(entry) not in (2, 4):
            raise ValueError("landmark entries are [i, x, y, v] or [i, v]")
        idx = entry[0]
        if not isinstance(idx, int) or not 0 <= idx < N_LANDMARKS:
            raise ValueError(f"landmark index {idx!r} out of range")
        if idx in seen:
            raise ValueError(f"landmark index {idx} appears twice")
        seen.add(idx)
        if len(entry) == 2:
            v = entry[1]
            x = y = None
        else:
            _, x, y, v = entry
        if v not in (0, 1):
            raise ValueError(f"landmark {idx} visibility must be 0 or 1, got {v!r}")
        if v == 1 and (x is None or y is None):
            raise ValueError(f"landmark {idx} is visible but has no coordinates")
        if x is not None and y is not None:
            pts[idx] = (float(x), float(y))
        vis[idx] = float(v)
    return AnnotatedFace(
        image_path=str(rec["image"]),
        box=FaceBox(float(box[0]), float(box[1]), float(box[2]), float(box[3])),
        shape=Shape(pts),
        visibility=vis,
        pose=Pose3D(yaw, pitch, roll),
        split_tag=str(rec.get("split", "")),
    )


def load_annotations(path) -> list[AnnotatedFace]:
    """Read a JSONL annotation file; empty file means an empty dataset."""
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                faces.append(_record_to_face(rec))
            except (json.JSONDecodeError, ValueError, TypeError) as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
    return faces


def save_annotations(faces, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for face in faces:
            fh.write(json.dumps(face_to_record(face), sort_keys=True))
            fh.write("\n")


def load_image(directory, face: AnnotatedFace) -> np.ndarray:
    path = os.path.join(directory, face.image_path)
    img = cv2.imread(path, cv2.IMREAD_COLOR)
    if img is None:
        raise DataError(f"cannot read image {path}")
    return np.ascontiguousarray(img[:, :, ::-1])  # BGR -> RGB


def save_image(directory, name: str, image: np.ndarray) -> None:
    path = os.path.join(directory, name)
    if not cv2.imwrite(path, np.ascontiguousarray(image[:, :, ::-1])):
        raise DataError(f"cannot write image {path}")


# ---------------------------------------------------------------------------
# protocols

@dataclass(frozen=True)
class ProtocolSplit:
    """Train/test index partition, optionally with yaw difficulty groups."""

    name: str
    train: np.ndarray
    test: np.ndarray
    yaw_groups: dict = field(default_factory=dict)


def split_train_test(faces, seed: int, test_size: int = PIFA_TEST_SIZE) -> ProtocolSplit:
    """Seeded random holdout: test_size faces for testing, the rest for training."""
    n = len(faces)
    if n < test_size + 1:
        raise ValueError(f"need at least {test_size + 1} faces, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    return ProtocolSplit("full", order[test_size:], order[:test_size])


def split_yaw_grouped(faces, seed: int, test_size: int = PIFA_TEST_SIZE) -> ProtocolSplit:
    """The holdout split plus three equal-count absolute-yaw test groups.

    Test faces are ordered by |yaw| and cut into thirds (truncating the
    remainder), giving near-frontal, half-profile, and profile groups of
    identical size.
    """
    base = split_train_test(faces, seed, test_size)
    yaws = np.array([abs(faces[i].pose.yaw) for i in base.test])
    order = base.test[np.argsort(yaws, kind="stable")]
    third = test_size // 3
    groups = {
        "easy": order[:third],
        "medium": order[third : 2 * third],
        "hard": order[2 * third : 3 * third],
    }
    return ProtocolSplit("yaw-grouped", base.train, base.test, groups)


def filter_min_height(faces, min_height: float = AFW_MIN_BOX_HEIGHT) -> list[int]:
    """Indices of faces whose box is strictly taller than min_height pixels."""
    return [i for i, f in enumerate(faces) if f.box.h > min_height]


def make_all_variants(
    faces,
    images,
    angles=VARIANT_ANGLES,
    include_originals: bool = False,
):
    """Rotated and mirrored copies of every face: len(angles) x 2 per input.

    Each variant is cropped to the transformed face box plus the visible
    landmarks (with a small margin) and renamed from the source image stem.
    Returns (faces, images) lists; originals are prepended when asked for.
    """
    out_faces: list[AnnotatedFace] = []
    out_images: list[np.ndarray] = []
    if include_originals:
        out_faces.extend(faces)
        out_images.extend(images)
    for face, image in zip(faces, images):
        stem, ext = os.path.splitext(os.path.basename(face.image_path))
        for flip in (False, True):
            for angle in angles:
                variant, img = transform_annotation(face, image, angle_deg=angle, flip=flip)
                variant, img = _crop_to_face(variant, img)
                name = f"{stem}_f{int(flip)}_r{angle:g}{ext or '.png'}"
                out_faces.append(replace(variant, image_path=name))
                out_images.append(img)
    return out_faces, out_images


def _crop_to_face(face: AnnotatedFace, image: np.ndarray, margin_frac: float = 0.08):
    h, w = image.shape[:2]
    pts = face.shape.points[face.visibility > 0.5]
    xs = [face.box.x, face.box.x + face.box.w]
    ys = [face.box.y, face.box.y + face.box.h]
    if len(pts):
        xs += [pts[:, 0].min(), pts[:, 0].max()]
        ys += [pts[:, 1].min(), pts[:, 1].max()]
    margin = margin_frac * max(face.box.w, face.box.h)
    x0 = max(0, int(math.floor(min(xs) - margin)))
    y0 = max(0, int(math.floor(min(ys) - margin)))
    x1 = min(w, int(math.ceil(max(xs) + margin)) + 1)
    y1 = min(h, int(math.ceil(max(ys) + margin)) + 1)
    if x1 - x0 < 2 or y1 - y0 < 2:
        raise ValueError("face crop collapsed to nothing")
    cropped = np.ascontiguousarray(image[y0:y1, x0:x1])
    shifted = replace(
        face,
        box=FaceBox(face.box.x - x0, face.box.y - y0, face.box.w, face.box.h),
        shape=Shape(face.shape.points - (x0, y0)),
    )
    return shifted, cropped


# ---------------------------------------------------------------------------
# synthetic corpus

@dataclass(frozen=True)
class SyntheticFaceSpec:
    """Knobs for the generated face corpus."""

    image_size: int = 128
    face_scale: tuple[float, float] = (52.0, 78.0)
    yaw_range: tuple[float, float] = (-35.0, 35.0)
    pitch_range: tuple[float, float] = (-20.0, 20.0)
    roll_range: tuple[float, float] = (-25.0, 25.0)
    box_margin: float = 0.12
    box_jitter: float = 0.06
    blob_radius_frac: float = 0.045
    clutter_blobs: int = 3

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        lo, hi = self.face_scale
        if not 0 < lo <= hi:
            raise ValueError("face_scale must be a positive (lo, hi) pair")
        for name in ("yaw_range", "pitch_range", "roll_range"):
            a, b = getattr(self, name)
            if a > b:
                raise ValueError(f"{name} must be (lo, hi) with lo <= hi")
        if abs(self.yaw_range[0]) > YAW_LIMIT or abs(self.yaw_range[1]) > YAW_LIMIT:
            raise ValueError(f"yaw range must stay within +-{YAW_LIMIT}")


# Canonical 3D landmark template, x right, y down, z toward the camera.
# Mirror-symmetric in x so a frontal projection is left/right symmetric.
_TEMPLATE = np.array(
    [
        (-0.62, -0.55, 0.28), (-0.40, -0.62, 0.40), (-0.18, -0.55, 0.45),  # left brow
        (0.18, -0.55, 0.45), (0.40, -0.62, 0.40), (0.62, -0.55, 0.28),  # right brow
        (-0.54, -0.32, 0.30), (-0.36, -0.30, 0.40), (-0.18, -0.32, 0.42),  # left eye
        (0.18, -0.32, 0.42), (0.36, -0.30, 0.40), (0.54, -0.32, 0.30),  # right eye
        (-0.85, 0.05, -0.25),  # left ear
        (-0.16, 0.18, 0.48), (0.0, 0.10, 0.62), (0.16, 0.18, 0.48),  # nose
        (0.85, 0.05, -0.25),  # right ear
        (-0.28, 0.55, 0.34), (0.0, 0.52, 0.46), (0.28, 0.55, 0.34),  # mouth
        (0.0, 0.88, 0.25),  # chin
    ]
)

# Surface normals approximated from a head-like sphere behind the points.
_SPHERE_CENTER = np.array([0.0, 0.0, -0.8])


def _template_normals() -> np.ndarray:
    d = _TEMPLATE - _SPHERE_CENTER
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _rotation_xyz(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """World rotation: yaw about y, pitch about x, then roll about z (view axis)."""
    ay, ax, az = np.radians([yaw, pitch, roll])
    cy, sy = np.cos(ay), np.sin(ay)
    cx, sx = np.cos(ax), np.sin(ax)
    cz, sz = np.cos(az), np.sin(az)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    # screen-convention roll: +x toward +y, matching image rotation
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ rx @ ry


def landmark_palette() -> np.ndarray:
    """21 landmark colors from a coarse RGB grid, pairwise distance >= 128.

    Grays and the three half-half-low mixes are dropped so every color also
    stays far from the muted backgrounds and the head disk.
    """
    levels = (0.0, 128.0, 255.0)
    drop = {
        (0.0, 0.0, 0.0),
        (128.0, 128.0, 128.0),
        (255.0, 255.0, 255.0),
        (128.0, 128.0, 0.0),
        (128.0, 0.0, 128.0),
        (0.0, 128.0, 128.0),
    }
    colors = [
        (r, g, b)
        for r in levels
        for g in levels
        for b in levels
        if (r, g, b) not in drop
    ]
    return np.array(colors, dtype=np.float64)


def _soft_disk(canvas, cx, cy, radius, color):
    size = canvas.shape[0]
    r0 = max(0, int(cy - radius - 2))
    r1 = min(size, int(cy + radius + 3))
    c0 = max(0, int(cx - radius - 2))
    c1 = min(size, int(cx + radius + 3))
    if r0 >= r1 or c0 >= c1:
        return
    yy, xx = np.mgrid[r0:r1, c0:c1]
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)[:, :, None]
    canvas[r0:r1, c0:c1] = (1 - alpha) * canvas[r0:r1, c0:c1] + alpha * color


def generate_synthetic(count: int, spec: SyntheticFaceSpec, seed: int):
    """Deterministic labelled toy faces: (faces, images) lists.

    Each face is a rotated 3D landmark template projected orthographically
    onto a cluttered background; landmarks facing the camera are painted as
    distinct solid-color disks, ones facing away are dropped and marked
    invisible. Boxes are the landmark hull plus margin, then jittered like a
    sloppy detector.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng([seed, 2861])
    normals = _template_normals()
    palette = landmark_palette()
    size = spec.image_size
    faces: list[AnnotatedFace] = []
    images: list[np.ndarray] = []
    for n in range(count):
        yaw = rng.uniform(*spec.yaw_range)
        pitch = rng.uniform(*spec.pitch_range)
        roll = rng.uniform(*spec.roll_range)
        scale = rng.uniform(*spec.face_scale) / 2.0
        rot = _rotation_xyz(yaw, pitch, roll)
        pts3 = _TEMPLATE @ rot.T
        norms = normals @ rot.T
        visible = (norms[:, 2] > 1e-9).astype(float)

        extent = scale * 1.1
        lo = extent + 2.0
        hi = size - extent - 2.0
        center = rng.uniform(lo, hi, 2) if hi > lo else np.full(2, size / 2.0)
        pts2 = pts3[:, :2] * scale + center

        # background: near-gray gradient plus muted clutter; staying close to
        # gray keeps every background pixel far from the landmark palette
        img = np.empty((size, size, 3), dtype=np.float64)
        base = rng.uniform(30, 70) + rng.uniform(-8, 8, 3)
        tilt = rng.uniform(-20, 20, (2, 1)) + rng.uniform(-5, 5, (2, 3))
        ramp = np.linspace(0.0, 1.0, size)
        img[:] = base + ramp[:, None, None] * tilt[0] + ramp[None, :, None] * tilt[1]
        for _ in range(spec.clutter_blobs):
            ccx, ccy = rng.uniform(0, size, 2)
            crad = rng.uniform(size * 0.1, size * 0.3)
            gray = rng.uniform(40, 90)
            ccol = gray + rng.uniform(-12, 12, 3)
            _soft_disk(img, ccx, ccy, crad, ccol)

        # head disk behind the landmarks
        head_col = np.array([120.0, 95.0, 80.0]) + rng.uniform(-15, 15, 3)
        _soft_disk(img, center[0], center[1] + 0.05 * scale, scale * 1.18, head_col)

        radius = max(1.6, spec.blob_radius_frac * scale * 2.0)
        for i in range(N_LANDMARKS):
            if visible[i] > 0.5:
                _soft_disk(img, pts2[i, 0], pts2[i, 1], radius, palette[i])

        coords = pts2.copy()
        coords[visible < 0.5] = np.nan
        margin = spec.box_margin * scale * 2.0
        x0, y0 = pts2.min(axis=0) - margin
        x1, y1 = pts2.max(axis=0) + margin
        jitter = spec.box_jitter * scale * 2.0
        x0 += rng.uniform(-jitter, jitter)
        y0 += rng.uniform(-jitter, jitter)
        x1 += rng.uniform(-jitter, jitter)
        y1 += rng.uniform(-jitter, jitter)

        faces.append(
            AnnotatedFace(
                image_path=f"face_{n:05d}.png",
                box=FaceBox(float(x0), float(y0), float(x1 - x0), float(y1 - y0)),
                shape=Shape(coords),
                visibility=visible,
                pose=Pose3D(yaw, pitch, roll),
            )
        )
        images.append(np.clip(img, 0, 255).astype(np.uint8))
    return faces, images


def write_corpus(faces, images, directory) -> None:
    """Save images and annotations.jsonl under directory."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    for face, image in zip(faces, images):
        save_image(os.path.join(directory, "images"), face.image_path, image)
    save_annotations(faces, os.path.join(directory, "annotations.jsonl"))


def read_corpus(directory):
    """Load (faces, images) saved by write_corpus."""
    faces = load_annotations(os.path.join(directory, "annotations.jsonl"))
    images = [load_image(os.path.join(directory, "images"), f) for f in faces]
    return faces, images
