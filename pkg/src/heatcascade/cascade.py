"""The five-round estimation pipeline: four global rounds plus a local one.

Inference starts from the mean shape placed in the face box, then repeats:
render the current estimate into heatmap channels, run the round's network,
add the predicted per-point steps. Rounds one and two render every channel;
later rounds gate channels by the previous round's predicted visibility. The
final round re-estimates each point from a small image patch around it and
only moves points whose predicted visibility clears the gate.

Training mirrors inference: each round's targets are bounded steps from the
previous round's actual training-set outputs, so the network learns to fix
its own upstream errors. Late rounds resample batches toward hard examples.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass

import cv2
import numpy as np

from heatcascade.errors import DataError, TrainingDivergedError
from heatcascade.geometry import (
    N_LANDMARKS,
    AnnotatedFace,
    FaceBox,
    MeanShape,
    Pose3D,
    Shape,
    compute_mean_shape,
    face_size,
    place_in_box,
)
from heatcascade.losses import StagePolicy, bounded_correction
from heatcascade.network import (
    GLOBAL_OUTPUTS,
    PATCH_OUTPUTS,
    ConvSpec,
    Net,
    NetSpec,
    RegressorOutput,
    RegressorParams,
    StageTargets,
    train_stage,
)
from heatcascade.params_io import load_params, save_params
from heatcascade.render import RenderConfig, render

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = 1


# ---------------------------------------------------------------------------
# model container and bundle I/O

@dataclass(eq=False)
class CascadeModel:
    """Everything needed to run the five rounds on a new face."""

    mean_shape: MeanShape
    policies: tuple[StagePolicy, ...]
    render_cfg: RenderConfig
    global_spec: NetSpec
    patch_spec: NetSpec | None
    stage_params: tuple[RegressorParams | None, ...]
    patch_window_frac: float = 0.25

    def __post_init__(self):
        if len(self.policies) != 5 or [p.stage for p in self.policies] != [1, 2, 3, 4, 5]:
            raise ValueError("policies must cover stages 1..5 in order")
        if len(self.stage_params) != 5:
            raise ValueError("stage_params must have 5 entries (None for untrained)")
        if not 0 < self.patch_window_frac < 1:
            raise ValueError("patch_window_frac must lie in (0, 1)")

    def require_params(self, stage: int) -> RegressorParams:
        params = self.stage_params[stage - 1]
        if params is None:
            raise ValueError(f"stage {stage} parameters are missing from the model")
        return params


@dataclass(frozen=True, eq=False)
class CascadeResult:
    """Final estimate plus the per-round shape trajectory (image frame)."""

    shape: Shape
    visibility: np.ndarray
    pose: Pose3D
    trajectory: tuple[Shape, ...]


def _spec_to_dict(spec: NetSpec) -> dict:
    return {
        "input_channels": spec.input_channels,
        "input_size": list(spec.input_size),
        "trunk": [[c.out_channels, c.kernel, c.stride, c.pad] for c in spec.trunk],
        "branches": [
            [source, [[c.out_channels, c.kernel, c.stride, c.pad] for c in chain]]
            for source, chain in spec.branches
        ],
        "reduce_channels": spec.reduce_channels,
        "outputs": spec.outputs,
        "groups": spec.groups,
        "rgb_channels": spec.rgb_channels,
        "dtype": spec.dtype,
    }


def _spec_from_dict(d: dict) -> NetSpec:
    return NetSpec(
        input_channels=int(d["input_channels"]),
        input_size=tuple(int(v) for v in d["input_size"]),
        trunk=tuple(ConvSpec(*map(int, c)) for c in d["trunk"]),
        branches=tuple(
            (int(source), tuple(ConvSpec(*map(int, c)) for c in chain))
            for source, chain in d["branches"]
        ),
        reduce_channels=int(d["reduce_channels"]),
        outputs=int(d["outputs"]),
        groups=int(d["groups"]),
        rgb_channels=int(d["rgb_channels"]),
        dtype=str(d["dtype"]),
    )


def _policy_to_dict(p: StagePolicy) -> dict:
    return {
        "stage": p.stage,
        "correction_bound": p.correction_bound,
        "l1_weight": p.l1_weight,
        "keypoint_weight": p.keypoint_weight,
        "pose_weight": p.pose_weight,
        "visibility_weight": p.visibility_weight,
        "vis_threshold": p.vis_threshold,
        "mining": p.mining,
        "patch_mode": p.patch_mode,
        "learning_rate": p.learning_rate,
        "epochs": p.epochs,
    }


def _policy_from_dict(d: dict) -> StagePolicy:
    bound = d["correction_bound"]
    return StagePolicy(
        stage=int(d["stage"]),
        correction_bound=None if bound is None else float(bound),
        l1_weight=float(d["l1_weight"]),
        keypoint_weight=float(d["keypoint_weight"]),
        pose_weight=float(d["pose_weight"]),
        visibility_weight=float(d["visibility_weight"]),
        vis_threshold=float(d["vis_threshold"]),
        mining=bool(d["mining"]),
        patch_mode=bool(d["patch_mode"]),
        learning_rate=float(d["learning_rate"]),
        epochs=int(d["epochs"]),
    )


def save_model(model: CascadeModel, directory) -> None:
    """Write the model bundle: manifest.json plus one params file per round."""
    os.makedirs(directory, exist_ok=True)
    stages = {}
    for i, params in enumerate(model.stage_params, start=1):
        if params is None:
            continue
        name = f"stage{i}.params"
        save_params(params, os.path.join(directory, name))
        stages[str(i)] = name
    cfg = model.render_cfg
    manifest = {
        "format": MANIFEST_FORMAT,
        "mean_shape": [[float(x), float(y)] for x, y in model.mean_shape.points],
        "render": {
            "width": cfg.width,
            "height": cfg.height,
            "sigma": cfg.sigma,
            "amplitude": cfg.amplitude,
            "vis_threshold": cfg.vis_threshold,
        },
        "policies": [_policy_to_dict(p) for p in model.policies],
        "global_spec": _spec_to_dict(model.global_spec),
        "patch_spec": None if model.patch_spec is None else _spec_to_dict(model.patch_spec),
        "patch_window_frac": model.patch_window_frac,
        "stages": stages,
    }
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_model(directory) -> CascadeModel:
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{directory}: no {MANIFEST_NAME}; not a model bundle")
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path}: unsupported bundle format {manifest.get('format')!r}")
    try:
        render_cfg = RenderConfig(**manifest["render"])
        policies = tuple(_policy_from_dict(p) for p in manifest["policies"])
        global_spec = _spec_from_dict(manifest["global_spec"])
        patch_spec = (
            None if manifest["patch_spec"] is None else _spec_from_dict(manifest["patch_spec"])
        )
        mean = MeanShape(np.array(manifest["mean_shape"], dtype=np.float64))
        window_frac = float(manifest["patch_window_frac"])
        stage_files = manifest["stages"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad manifest: {exc}") from exc
    params: list[RegressorParams | None] = []
    for i in range(1, 6):
        name = stage_files.get(str(i))
        if name is None:
            params.append(None)
            continue
        file_path = os.path.join(directory, name)
        if not os.path.exists(file_path):
            raise DataError(f"{directory}: stage {i} parameter file {name} is missing")
        params.append(load_params(file_path))
    return CascadeModel(
        mean_shape=mean,
        policies=policies,
        render_cfg=render_cfg,
        global_spec=global_spec,
        patch_spec=patch_spec,
        stage_params=tuple(params),
        patch_window_frac=window_frac,
    )


# ---------------------------------------------------------------------------
# patches

@dataclass(frozen=True, eq=False)
class PatchSet:
    """Per-point local crops: (N, 4, P, P) rasters plus crop geometry."""

    tensor: np.ndarray
    offsets: np.ndarray
    window: int
    resolution: int

    @property
    def scale(self) -> float:
        """Image pixels per patch pixel."""
        return self.window / self.resolution


def patch_window(box: FaceBox, frac: float = 0.25) -> int:
    """Side length of the square refinement window for this face."""
    return max(4, int(round(frac * face_size(box))))


def extract_patches(
    image: np.ndarray, shape: Shape, window: int, resolution: int
) -> PatchSet:
    """Cut a window around every point, resample to the net raster.

    Windows snap to integer pixels and are zero-padded where they leave the
    image. Channel 4 is a Gaussian at the point's subpixel position inside
    the patch, carrying the fraction the integer snap discarded.
    """
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("expected an HxWx3 uint8 image")
    if window < 2 or resolution < 2:
        raise ValueError("window and resolution must be at least 2")
    if np.isnan(shape.points).any():
        raise ValueError("every point needs concrete coordinates to cut patches")
    h, w = image.shape[:2]
    tensor = np.zeros((N_LANDMARKS, 4, resolution, resolution), dtype=np.float64)
    offsets = np.zeros((N_LANDMARKS, 2), dtype=np.float64)
    axis = np.arange(resolution, dtype=np.float64)
    sigma = resolution / 8.0
    inv = 1.0 / (2.0 * sigma * sigma)
    for i in range(N_LANDMARKS):
        x, y = shape.points[i]
        x0 = int(round(x)) - window // 2
        y0 = int(round(y)) - window // 2
        offsets[i] = (x0, y0)
        crop = np.zeros((window, window, 3), dtype=np.uint8)
        sx0, sy0 = max(0, x0), max(0, y0)
        sx1, sy1 = min(w, x0 + window), min(h, y0 + window)
        if sx0 < sx1 and sy0 < sy1:
            crop[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = image[sy0:sy1, sx0:sx1]
        small = cv2.resize(crop, (resolution, resolution), interpolation=cv2.INTER_AREA)
        tensor[i, :3] = small.transpose(2, 0, 1) / 255.0
        u = (x - x0) * resolution / window
        v = (y - y0) * resolution / window
        gx = np.exp(-((axis - u) ** 2) * inv)
        gy = np.exp(-((axis - v) ** 2) * inv)
        tensor[i, 3] = np.outer(gy, gx)
    return PatchSet(tensor, offsets, window, resolution)


def apply_local_output(
    shape: Shape, output: RegressorOutput, patch_scale: float, vis_threshold: float
):
    """Convert patch-frame steps to image pixels and gate them by visibility.

    Points whose predicted visibility is below the threshold keep their
    exact previous coordinates (the step is zeroed, not merely small).
    Returns (Shape, visibility).
    """
    gate = output.visibility >= vis_threshold
    step = output.corrections * patch_scale * gate[:, None]
    return Shape(shape.points + step), output.visibility


def run_local_stage(
    image: np.ndarray,
    shape: Shape,
    params: RegressorParams,
    window: int,
    spec: NetSpec,
    vis_threshold: float,
):
    """One network pass of the patch round for a single face."""
    patches = extract_patches(image, shape, window, spec.input_size[0])
    net = Net(spec)
    out = RegressorOutput.from_vector(net.forward(params, patches.tensor[None])[0])
    return apply_local_output(shape, out, patches.scale, vis_threshold)


# ---------------------------------------------------------------------------
# backends

class NetworkBackend:
    """Runs the model's trained networks; the normal inference path."""

    needs_rendering = True

    def __init__(self, model: CascadeModel):
        self.model = model
        self.global_net = Net(model.global_spec)
        self.patch_net = None if model.patch_spec is None else Net(model.patch_spec)

    @property
    def wants_patches(self) -> bool:
        return self.patch_net is not None

    def global_batch(self, stage: int, x: np.ndarray) -> np.ndarray:
        return self.global_net.forward(self.model.require_params(stage), x)

    def patch_batch(self, x: np.ndarray) -> np.ndarray:
        if self.patch_net is None:
            raise ValueError("model has no patch network")
        return self.patch_net.forward(self.model.require_params(5), x)

    def stage_output(self, stage, payload, current, scale) -> RegressorOutput:
        if stage == 5:
            return RegressorOutput.from_vector(self.patch_batch(payload.tensor[None])[0])
        return RegressorOutput.from_vector(self.global_batch(stage, payload.channels[None])[0])


class OracleBackend:
    """Bypasses the networks: answers with ideal steps from the ground truth.

    Used to validate the cascade loop itself. Corrections are bounded steps
    toward the true shape (bound follows the model's policies unless a fixed
    bound is given), visibility and pose echo the annotation.
    """

    needs_rendering = False
    wants_patches = False

    def __init__(self, face: AnnotatedFace, model: CascadeModel, bound: float | None = None):
        self.face = face
        self.model = model
        self.bound = bound
        self.fixed_bound = bound is not None

    def stage_output(self, stage, payload, current: Shape, scale) -> RegressorOutput:
        sx, sy = scale
        target = Shape(self.face.shape.points * (sx, sy))
        if self.fixed_bound:
            bound = self.bound
        else:
            bound = self.model.policies[stage - 1].correction_bound
        corr = bounded_correction(target, current, bound, self.face.visibility)
        return RegressorOutput(corr, self.face.visibility, self.face.pose.as_array())


def run_cascade(
    image: np.ndarray,
    box: FaceBox,
    model: CascadeModel,
    backend=None,
    initial_shape: Shape | None = None,
    use_stage5: bool = True,
) -> CascadeResult:
    """Estimate keypoints, visibility, and pose for one face.

    The trajectory records the image-frame shape after initialization and
    after every round, so trajectory[t] is the output of round t.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got array of shape {image.shape}")
    if backend is None:
        backend = NetworkBackend(model)
    cfg = model.render_cfg
    h, w = image.shape[:2]
    sx, sy = cfg.width / w, cfg.height / h
    net_img = cv2.resize(image, (cfg.width, cfg.height), interpolation=cv2.INTER_AREA)

    start = place_in_box(model.mean_shape, box) if initial_shape is None else initial_shape
    if np.isnan(start.points).any():
        raise ValueError("initial shape must have concrete coordinates everywhere")
    y_net = start.points * (sx, sy)
    trajectory = [Shape(y_net / (sx, sy))]
    visibility = np.ones(N_LANDMARKS)
    pose = np.zeros(3)

    for stage in (1, 2, 3, 4):
        policy = model.policies[stage - 1]
        render_vis = np.ones(N_LANDMARKS) if stage <= 2 else visibility
        payload = render(net_img, Shape(y_net), render_vis, cfg) if backend.needs_rendering else None
        out = backend.stage_output(stage, payload, Shape(y_net), (sx, sy))
        y_net = y_net + out.corrections
        visibility = out.visibility
        pose = out.pose
        trajectory.append(Shape(y_net / (sx, sy)))

    shape_img = Shape(y_net / (sx, sy))
    if use_stage5:
        policy = model.policies[4]
        if backend.wants_patches:
            window = patch_window(box, model.patch_window_frac)
            patches = extract_patches(image, shape_img, window, model.patch_spec.input_size[0])
            out = backend.stage_output(5, patches, shape_img, patches.scale)
            shape_img, visibility = apply_local_output(
                shape_img, out, patches.scale, policy.vis_threshold
            )
        elif backend.needs_rendering:
            raise ValueError("stage 5 requested but the model has no patch network")
        else:
            # oracle-style backends answer in the net frame without patches
            out = backend.stage_output(5, None, Shape(y_net), (sx, sy))
            gate = (out.visibility >= policy.vis_threshold)[:, None]
            y_net = y_net + out.corrections * gate
            visibility = out.visibility
            shape_img = Shape(y_net / (sx, sy))
        trajectory.append(shape_img)

    return CascadeResult(
        shape=shape_img,
        visibility=visibility,
        pose=Pose3D.from_array(pose),
        trajectory=tuple(trajectory),
    )


def infer_faces(
    model: CascadeModel,
    boxes,
    images,
    use_stage5: bool = True,
    chunk: int = 64,
) -> list[CascadeResult]:
    """Batched run_cascade over many faces with the network backend."""
    backend = NetworkBackend(model)
    cfg = model.render_cfg
    count = len(boxes)
    if count != len(images):
        raise ValueError(f"got {count} boxes for {len(images)} images")
    scales = np.empty((count, 2))
    net_imgs = []
    for i, img in enumerate(images):
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image {i}: expected HxWx3, got {img.shape}")
        h, w = img.shape[:2]
        scales[i] = (cfg.width / w, cfg.height / h)
        net_imgs.append(cv2.resize(img, (cfg.width, cfg.height), interpolation=cv2.INTER_AREA))

    y_net = np.stack([place_in_box(model.mean_shape, b).points for b in boxes]) * scales[:, None, :]
    trajectories = [y_net / scales[:, None, :]]
    visibility = np.ones((count, N_LANDMARKS))
    poses = np.zeros((count, 3))

    for stage in (1, 2, 3, 4):
        outs = np.empty((count, GLOBAL_OUTPUTS))
        for lo in range(0, count, chunk):
            hi = min(lo + chunk, count)
            render_vis = np.ones((hi - lo, N_LANDMARKS)) if stage <= 2 else visibility[lo:hi]
            x = np.stack(
                [
                    render(net_imgs[i], Shape(y_net[i]), render_vis[i - lo], cfg).channels
                    for i in range(lo, hi)
                ]
            )
            outs[lo:hi] = backend.global_batch(stage, x)
        y_net = y_net + outs[:, : 2 * N_LANDMARKS].reshape(count, N_LANDMARKS, 2)
        visibility = np.clip(outs[:, 2 * N_LANDMARKS : 3 * N_LANDMARKS], 0.0, 1.0)
        poses = outs[:, 3 * N_LANDMARKS :]
        trajectories.append(y_net / scales[:, None, :])

    shapes_img = y_net / scales[:, None, :]
    if use_stage5:
        if model.patch_spec is None:
            raise ValueError("stage 5 requested but the model has no patch network")
        policy = model.policies[4]
        resolution = model.patch_spec.input_size[0]
        new_shapes = np.empty_like(shapes_img)
        for lo in range(0, count, chunk):
            hi = min(lo + chunk, count)
            sets = [
                extract_patches(
                    images[i],
                    Shape(shapes_img[i]),
                    patch_window(boxes[i], model.patch_window_frac),
                    resolution,
                )
                for i in range(lo, hi)
            ]
            outs = backend.patch_batch(np.stack([p.tensor for p in sets]))
            for j, pset in enumerate(sets):
                out = RegressorOutput.from_vector(outs[j])
                shape, vis = apply_local_output(
                    Shape(shapes_img[lo + j]), out, pset.scale, policy.vis_threshold
                )
                new_shapes[lo + j] = shape.points
                visibility[lo + j] = vis
        shapes_img = new_shapes
        trajectories.append(shapes_img.copy())

    results = []
    for i in range(count):
        results.append(
            CascadeResult(
                shape=Shape(shapes_img[i]),
                visibility=visibility[i].copy(),
                pose=Pose3D.from_array(poses[i]),
                trajectory=tuple(Shape(t[i]) for t in trajectories),
            )
        )
    return results


# ---------------------------------------------------------------------------
# hard-example mining

@dataclass(frozen=True, eq=False)
class MiningPartition:
    """Hard/easy index split derived from the error histogram."""

    hard: np.ndarray
    easy: np.ndarray
    mode_center: float
    threshold: float
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def hard_fraction(self) -> float:
        return len(self.hard) / (len(self.hard) + len(self.easy))


def mine_hard_samples(
    errors,
    bin_width: float = 0.005,
    min_hard_fraction: float = 0.3,
    threshold: float | None = None,
) -> MiningPartition:
    """Split samples into hard and easy by their error distribution.

    Histogram the errors, take the modal bin's center as the distribution's
    typical error, then pick the cut as the largest bin edge at or above that
    center whose strict tail still holds at least min_hard_fraction of the
    samples. A sample is hard when its error exceeds the cut. Passing
    threshold fixes the cut directly and skips the fraction guarantee.
    """
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size < 2:
        raise ValueError("need at least two errors to mine")
    if not np.isfinite(errors).all() or errors.min() < 0:
        raise ValueError("errors must be finite and nonnegative")
    if errors.max() == errors.min():
        raise ValueError("all errors are identical; the partition is degenerate")
    if bin_width <= 0:
        raise ValueError(f"bin_width must be positive, got {bin_width}")
    if not 0.0 < min_hard_fraction < 1.0:
        raise ValueError(f"min_hard_fraction must lie in (0, 1), got {min_hard_fraction}")

    n_bins = int(errors.max() // bin_width) + 1
    edges = bin_width * np.arange(n_bins + 1)
    counts, _ = np.histogram(errors, bins=edges)
    mode_bin = int(np.argmax(counts))
    center = float(edges[mode_bin] + bin_width / 2.0)

    if threshold is not None:
        if threshold < 0:
            raise ValueError(f"threshold must be nonnegative, got {threshold}")
        cut = float(threshold)
    else:
        candidates = np.concatenate([[center], edges[edges > center]])
        tails = (errors[None, :] > candidates[:, None]).mean(axis=1)
        ok = candidates[tails >= min_hard_fraction]
        if ok.size == 0:
            raise ValueError(
                "no cut at or above the modal error keeps "
                f"{min_hard_fraction:.0%} of samples hard"
            )
        cut = float(ok.max())

    hard = np.nonzero(errors > cut)[0]
    easy = np.nonzero(errors <= cut)[0]
    if hard.size == 0 or easy.size == 0:
        raise ValueError("the cut left one side empty; the partition is degenerate")
    return MiningPartition(hard, easy, center, cut, edges, counts)


def balanced_batches(
    partition: MiningPartition,
    batch_size: int,
    rng: np.random.Generator,
    n_batches: int | None = None,
) -> list[np.ndarray]:
    """Half-hard, half-easy index batches.

    The larger group cycles through seeded permutations; the smaller group is
    resampled with replacement so every batch stays balanced.
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch_size must be even and >= 2, got {batch_size}")
    hard, easy = partition.hard, partition.easy
    half = batch_size // 2
    total = len(hard) + len(easy)
    if n_batches is None:
        n_batches = math.ceil(total / batch_size)
    small, big = (hard, easy) if len(hard) <= len(easy) else (easy, hard)
    hard_is_small = len(hard) <= len(easy)
    batches = []
    big_order = rng.permutation(big)
    pos = 0
    for _ in range(n_batches):
        take_small = rng.choice(small, size=half, replace=True)
        if pos + half > len(big_order):
            big_order = rng.permutation(big)
            pos = 0
        if len(big_order) >= half:
            take_big = big_order[pos : pos + half]
            pos += half
        else:
            take_big = rng.choice(big, size=half, replace=True)
        pair = (take_small, take_big) if hard_is_small else (take_big, take_small)
        batches.append(np.concatenate(pair))
    return batches


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainSettings:
    """Run-level knobs shared by all rounds."""

    render_cfg: RenderConfig
    policies: tuple[StagePolicy, ...]
    global_spec: NetSpec
    patch_spec: NetSpec
    seed: int = 0
    batch_size: int = 32
    patch_window_frac: float = 0.25
    finetune_scale: float = 0.1
    finetune_epochs: int = 2
    mining_bin_width: float = 0.005
    mining_min_hard_fraction: float = 0.3
    mining_threshold: float | None = None
    train_stage5: bool = True
    chunk: int = 64


class _GlobalStageData:
    """Lazy (raster, targets) pairs for one global round."""

    def __init__(self, net_imgs, estimates, render_vis, corrections, gt_vis, gt_pose, cfg):
        self.net_imgs = net_imgs
        self.estimates = estimates
        self.render_vis = render_vis
        self.corrections = corrections
        self.gt_vis = gt_vis
        self.gt_pose = gt_pose
        self.cfg = cfg

    def __len__(self):
        return len(self.net_imgs)

    def __getitem__(self, i):
        rendered = render(
            self.net_imgs[i], Shape(self.estimates[i]), self.render_vis[i], self.cfg
        )
        targets = StageTargets(self.corrections[i], self.gt_vis[i], self.gt_pose[i])
        return rendered.channels, targets


class _PatchStageData:
    """Lazy (patch bank, targets) pairs for the local round."""

    def __init__(self, images, estimates, windows, corrections, gt_vis, resolution):
        self.images = images
        self.estimates = estimates
        self.windows = windows
        self.corrections = corrections
        self.gt_vis = gt_vis
        self.resolution = resolution

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        patches = extract_patches(
            self.images[i], Shape(self.estimates[i]), self.windows[i], self.resolution
        )
        targets = StageTargets(self.corrections[i], self.gt_vis[i], None)
        return patches.tensor, targets


def _stage_corrections(gt_net, estimates, visibilities, bound):
    out = np.empty_like(estimates)
    for i in range(len(estimates)):
        out[i] = bounded_correction(
            Shape(gt_net[i]), Shape(estimates[i]), bound, visibilities[i]
        )
    return out


def _batch_nme(estimates_img, gt_img, gt_vis, sizes) -> np.ndarray:
    count = len(estimates_img)
    out = np.empty(count)
    for i in range(count):
        seen = gt_vis[i] > 0.5
        if not seen.any():
            raise ValueError(f"face {i} has no visible landmarks")
        dist = np.linalg.norm(estimates_img[i, seen] - gt_img[i, seen], axis=1)
        out[i] = dist.mean() / sizes[i]
    return out


def _forward_dataset(net: Net, params: RegressorParams, dataset, chunk: int) -> np.ndarray:
    outs = []
    for lo in range(0, len(dataset), chunk):
        hi = min(lo + chunk, len(dataset))
        x = np.stack([dataset[i][0] for i in range(lo, hi)]).astype(net.spec.np_dtype)
        outs.append(net.forward(params, x))
    return np.concatenate(outs, axis=0)


def train_cascade(faces, images, settings: TrainSettings):
    """Fit all five rounds; returns (CascadeModel, stats dict).

    stats carries per-round training medians and mining bookkeeping:
    train_median_nme[t] and train_hard_fraction[t] are measured after round
    t's training, hard fractions against the mining cut.
    """
    faces = list(faces)
    images = list(images)
    if len(faces) != len(images):
        raise ValueError(f"got {len(faces)} faces for {len(images)} images")
    if not faces:
        raise ValueError("cannot train on an empty dataset")
    if [p.stage for p in settings.policies] != [1, 2, 3, 4, 5]:
        raise ValueError("policies must cover stages 1..5 in order")

    cfg = settings.render_cfg
    count = len(faces)
    mean = compute_mean_shape(faces)
    seed_seq = np.random.SeedSequence(settings.seed)
    stage_seeds = [int(s.generate_state(1)[0]) for s in seed_seq.spawn(12)]

    scales = np.empty((count, 2))
    net_imgs = []
    for i, img in enumerate(images):
        h, w = img.shape[:2]
        scales[i] = (cfg.width / w, cfg.height / h)
        net_imgs.append(cv2.resize(img, (cfg.width, cfg.height), interpolation=cv2.INTER_AREA))
    gt_img = np.stack([f.shape.points for f in faces])
    gt_net = gt_img * scales[:, None, :]
    gt_vis = np.stack([f.visibility for f in faces])
    gt_pose = np.stack([f.pose.as_array() for f in faces])
    sizes = np.array([face_size(f.box) for f in faces])

    estimates = np.stack([place_in_box(mean, f.box).points for f in faces]) * scales[:, None, :]
    render_vis = np.ones((count, N_LANDMARKS))
    global_net = Net(settings.global_spec)
    stats = {
        "train_median_nme": [float(np.median(_batch_nme(estimates / scales[:, None, :], gt_img, gt_vis, sizes)))],
        "train_hard_fraction": {},
        "mining_hard_fraction_before": {},
        "mining_threshold": {},
        "epoch_losses": {},
    }
    nmes = None
    partition = None
    stage_params: list[RegressorParams | None] = [None] * 5
    prev: RegressorParams | None = None

    for stage in (1, 2, 3, 4):
        policy = settings.policies[stage - 1]
        corr_t = _stage_corrections(gt_net, estimates, gt_vis, policy.correction_bound)
        vis_for_render = render_vis if stage >= 3 else np.ones((count, N_LANDMARKS))
        dataset = _GlobalStageData(
            net_imgs, estimates, vis_for_render, corr_t, gt_vis, gt_pose, cfg
        )
        batches_fn = None
        if policy.mining:
            if nmes is None:
                raise ValueError("mining needs errors from a previous round")
            partition = mine_hard_samples(
                nmes,
                settings.mining_bin_width,
                settings.mining_min_hard_fraction,
                settings.mining_threshold,
            )
            stats["mining_threshold"][stage] = partition.threshold
            stats["mining_hard_fraction_before"][stage] = partition.hard_fraction
            log.info(
                "stage %d mining: %d hard / %d easy (cut %.4f)",
                stage, len(partition.hard), len(partition.easy), partition.threshold,
            )
            part = partition
            batches_fn = lambda rng, p=part: balanced_batches(p, settings.batch_size, rng)
        try:
            params, losses = train_stage(
                dataset,
                policy,
                settings.global_spec,
                init=prev,
                seed=stage_seeds[stage - 1],
                batch_size=settings.batch_size,
                batches_fn=batches_fn,
                stage_tag=f"stage{stage}",
            )
            stats["epoch_losses"][stage] = losses
            if policy.mining and settings.finetune_epochs > 0:
                params, ft_losses = train_stage(
                    dataset,
                    policy,
                    settings.global_spec,
                    init=params,
                    seed=stage_seeds[stage - 1 + 5],
                    batch_size=settings.batch_size,
                    learning_rate=policy.learning_rate * settings.finetune_scale,
                    epochs=settings.finetune_epochs,
                    stage_tag=f"stage{stage}-finetune",
                )
                stats["epoch_losses"][stage] = losses + ft_losses
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(
                f"stage {stage}: {exc}", stage=stage, epoch=exc.epoch
            ) from exc
        stage_params[stage - 1] = params
        prev = params

        outs = _forward_dataset(global_net, params, dataset, settings.chunk)
        estimates = estimates + outs[:, : 2 * N_LANDMARKS].reshape(count, N_LANDMARKS, 2)
        render_vis = np.clip(outs[:, 2 * N_LANDMARKS : 3 * N_LANDMARKS], 0.0, 1.0)
        nmes = _batch_nme(estimates / scales[:, None, :], gt_img, gt_vis, sizes)
        stats["train_median_nme"].append(float(np.median(nmes)))
        if partition is not None:
            stats["train_hard_fraction"][stage] = float((nmes > partition.threshold).mean())
        log.info("stage %d done: train median NME %.4f", stage, stats["train_median_nme"][-1])

    if settings.train_stage5:
        policy = settings.policies[4]
        estimates_img = estimates / scales[:, None, :]
        windows = [patch_window(f.box, settings.patch_window_frac) for f in faces]
        resolution = settings.patch_spec.input_size[0]
        corr_img = _stage_corrections(gt_img, estimates_img, gt_vis, None)
        corr_patch = corr_img * (resolution / np.asarray(windows, dtype=np.float64))[:, None, None]
        dataset5 = _PatchStageData(images, estimates_img, windows, corr_patch, gt_vis, resolution)
        batches_fn = None
        partition = None
        if policy.mining:
            partition = mine_hard_samples(
                nmes,
                settings.mining_bin_width,
                settings.mining_min_hard_fraction,
                settings.mining_threshold,
            )
            stats["mining_threshold"][5] = partition.threshold
            stats["mining_hard_fraction_before"][5] = partition.hard_fraction
            part5 = partition
            batches_fn = lambda rng, p=part5: balanced_batches(p, settings.batch_size, rng)
        try:
            params, losses = train_stage(
                dataset5,
                policy,
                settings.patch_spec,
                seed=stage_seeds[4],
                batch_size=settings.batch_size,
                batches_fn=batches_fn,
                stage_tag="stage5",
            )
            stats["epoch_losses"][5] = losses
            if policy.mining and settings.finetune_epochs > 0:
                params, ft_losses = train_stage(
                    dataset5,
                    policy,
                    settings.patch_spec,
                    init=params,
                    seed=stage_seeds[9],
                    batch_size=settings.batch_size,
                    learning_rate=policy.learning_rate * settings.finetune_scale,
                    epochs=settings.finetune_epochs,
                    stage_tag="stage5-finetune",
                )
                stats["epoch_losses"][5] = losses + ft_losses
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"stage 5: {exc}", stage=5, epoch=exc.epoch) from exc
        stage_params[4] = params

    model = CascadeModel(
        mean_shape=mean,
        policies=tuple(settings.policies),
        render_cfg=cfg,
        global_spec=settings.global_spec,
        patch_spec=settings.patch_spec if settings.train_stage5 else None,
        stage_params=tuple(stage_params),
        patch_window_frac=settings.patch_window_frac,
    )
    if settings.train_stage5:
        results = infer_faces(
            model, [f.box for f in faces], images, use_stage5=True, chunk=settings.chunk
        )
        final = np.stack([r.shape.points for r in results])
        nmes5 = _batch_nme(final, gt_img, gt_vis, sizes)
        stats["train_median_nme"].append(float(np.median(nmes5)))
        if partition is not None:
            stats["train_hard_fraction"][5] = float((nmes5 > partition.threshold).mean())
        log.info("stage 5 done: train median NME %.4f", stats["train_median_nme"][-1])
    return model, stats
