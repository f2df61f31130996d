"""From-scratch convolutional regressor with analytic backprop.

One network predicts, for a whole face raster (or a bank of local patches),
a flat output vector holding per-keypoint coordinate corrections, per-point
visibility scores, and optionally three pose angles. Layers are plain numpy
so every backward pass is hand-derived and can be validated against finite
differences.

Architecture: a conv trunk (conv + PReLU per stage), side branches tapped
from intermediate trunk stages that stride their way down to the trunk's
final raster size, channel concatenation of trunk and branch outputs, a 1x1
mixing conv, then a single fully connected head. Patch-mode networks run the
same conv stack over each patch with shared weights and feed the head from
the concatenated per-patch features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from heatcascade.errors import TrainingDivergedError
from heatcascade.geometry import N_LANDMARKS
from heatcascade.losses import StagePolicy

log = logging.getLogger(__name__)

MOMENTUM = 0.9
GLOBAL_OUTPUTS = 3 * N_LANDMARKS + 3
PATCH_OUTPUTS = 3 * N_LANDMARKS
_STD_EPS = 1e-6


# ---------------------------------------------------------------------------
# specs

@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError("conv needs at least one output channel")
        if self.kernel < 1 or self.stride < 1 or self.pad < 0:
            raise ValueError(
                f"bad conv geometry: kernel={self.kernel} stride={self.stride} pad={self.pad}"
            )

    def out_size(self, size: tuple[int, int]) -> tuple[int, int]:
        h = (size[0] + 2 * self.pad - self.kernel) // self.stride + 1
        w = (size[1] + 2 * self.pad - self.kernel) // self.stride + 1
        if h < 1 or w < 1:
            raise ValueError(f"conv collapses raster {size} to {h}x{w}")
        return (h, w)


@dataclass(frozen=True)
class NetSpec:
    """Static description of one regressor network."""

    input_channels: int
    input_size: tuple[int, int]
    trunk: tuple[ConvSpec, ...]
    branches: tuple[tuple[int, tuple[ConvSpec, ...]], ...] = ()
    reduce_channels: int = 16
    outputs: int = GLOBAL_OUTPUTS
    groups: int = 1
    rgb_channels: int = 3
    dtype: str = "float64"

    def __post_init__(self):
        if self.input_channels < 1:
            raise ValueError("need at least one input channel")
        if len(self.trunk) < 1:
            raise ValueError("trunk needs at least one conv stage")
        if self.reduce_channels < 1:
            raise ValueError("reduce_channels must be >= 1")
        if self.outputs not in (GLOBAL_OUTPUTS, PATCH_OUTPUTS):
            raise ValueError(
                f"outputs must be {GLOBAL_OUTPUTS} (with pose) or {PATCH_OUTPUTS} (patch mode)"
            )
        if self.groups < 1:
            raise ValueError("groups must be >= 1")
        if not 0 <= self.rgb_channels <= self.input_channels:
            raise ValueError("rgb_channels must not exceed input_channels")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        sizes = [tuple(self.input_size)]
        for conv in self.trunk:
            sizes.append(conv.out_size(sizes[-1]))
        final = sizes[-1]
        last_source = 0
        for source, chain in self.branches:
            if not 1 <= source < len(self.trunk):
                raise ValueError(
                    f"branch source {source} must name a trunk stage before the last one"
                )
            if source <= last_source:
                raise ValueError("branch sources must be strictly increasing")
            last_source = source
            if not chain:
                raise ValueError(f"branch at trunk stage {source} has no convs")
            size = sizes[source]
            for conv in chain:
                size = conv.out_size(size)
            if size != final:
                raise ValueError(
                    f"branch at trunk stage {source} ends at raster {size}, trunk ends at {final}"
                )

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass(eq=False)
class RegressorParams:
    """Named weight tensors for one stage's network."""

    tensors: dict[str, np.ndarray]
    stage_tag: str = ""

    def copy(self) -> "RegressorParams":
        return RegressorParams({k: v.copy() for k, v in self.tensors.items()}, self.stage_tag)


@dataclass(frozen=True, eq=False)
class RegressorOutput:
    """One network evaluation: coordinate steps, visibility scores, pose."""

    corrections: np.ndarray
    visibility: np.ndarray
    pose: np.ndarray

    def __post_init__(self):
        corr = np.asarray(self.corrections, dtype=np.float64)
        vis = np.asarray(self.visibility, dtype=np.float64)
        pose = np.asarray(self.pose, dtype=np.float64)
        if corr.shape != (N_LANDMARKS, 2):
            raise ValueError(f"corrections must be ({N_LANDMARKS}, 2), got {corr.shape}")
        if vis.shape != (N_LANDMARKS,):
            raise ValueError(f"visibility must have {N_LANDMARKS} entries, got {vis.shape}")
        if pose.shape != (3,):
            raise ValueError(f"pose must have 3 entries, got {pose.shape}")
        if not (np.isfinite(corr).all() and np.isfinite(vis).all() and np.isfinite(pose).all()):
            raise ValueError("regressor outputs must be finite")
        if vis.min() < 0.0 or vis.max() > 1.0:
            raise ValueError("visibility scores must lie in [0, 1]")
        object.__setattr__(self, "corrections", corr)
        object.__setattr__(self, "visibility", vis)
        object.__setattr__(self, "pose", pose)

    def as_vector(self) -> np.ndarray:
        """Flat layout: 2N corrections, N visibilities, 3 pose angles (= 66)."""
        return np.concatenate([self.corrections.ravel(), self.visibility, self.pose])

    @staticmethod
    def from_vector(vec: np.ndarray) -> "RegressorOutput":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.shape[0] == GLOBAL_OUTPUTS:
            pose = vec[3 * N_LANDMARKS:]
        elif vec.shape[0] == PATCH_OUTPUTS:
            pose = np.zeros(3)
        else:
            raise ValueError(
                f"output vector must have {GLOBAL_OUTPUTS} or {PATCH_OUTPUTS} entries, "
                f"got {vec.shape[0]}"
            )
        corr = vec[: 2 * N_LANDMARKS].reshape(N_LANDMARKS, 2)
        vis = np.clip(vec[2 * N_LANDMARKS : 3 * N_LANDMARKS], 0.0, 1.0)
        return RegressorOutput(corr, vis, pose)


@dataclass(frozen=True, eq=False)
class StageTargets:
    """Supervision for one sample: step, visibility, pose (None in patch mode)."""

    corrections: np.ndarray
    visibility: np.ndarray
    pose: np.ndarray | None


# ---------------------------------------------------------------------------
# layer primitives

def _im2col(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B, Ho*Wo, C*k*k) patch matrix."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    b, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kernel * kernel)
    return np.ascontiguousarray(cols), (ho, wo)


def _col2im(dcols, x_shape, out_size, kernel, stride, pad):
    """Scatter-add patch-matrix gradients back to the input raster."""
    b, c, h, w = x_shape
    ho, wo = out_size
    dpad = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dcols = dcols.reshape(b, ho, wo, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
    for ki in range(kernel):
        for kj in range(kernel):
            dpad[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += dcols[
                :, :, :, :, ki, kj
            ]
    if pad:
        return dpad[:, :, pad : pad + h, pad : pad + w]
    return dpad


class _Conv:
    def __init__(self, name: str, in_ch: int, spec: ConvSpec):
        self.name = name
        self.in_ch = in_ch
        self.spec = spec

    def param_shapes(self):
        k = self.spec.kernel
        return {
            f"{self.name}.weight": (self.spec.out_channels, self.in_ch * k * k),
            f"{self.name}.bias": (self.spec.out_channels,),
        }

    def init(self, rng: np.random.Generator, dtype) -> dict:
        k = self.spec.kernel
        fan_in = self.in_ch * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (self.spec.out_channels, fan_in))
        return {
            f"{self.name}.weight": w.astype(dtype),
            f"{self.name}.bias": np.zeros(self.spec.out_channels, dtype=dtype),
        }

    def forward(self, x, tensors):
        w = tensors[f"{self.name}.weight"]
        b = tensors[f"{self.name}.bias"]
        s = self.spec
        cols, out_size = _im2col(x, s.kernel, s.stride, s.pad)
        batch, patches, _ = cols.shape
        y = cols.reshape(batch * patches, -1) @ w.T + b
        y = y.reshape(batch, patches, s.out_channels).transpose(0, 2, 1)
        y = y.reshape(batch, s.out_channels, *out_size)
        return y, (cols, x.shape, out_size)

    def backward(self, dy, tensors, cache):
        w = tensors[f"{self.name}.weight"]
        cols, x_shape, out_size = cache
        s = self.spec
        batch = dy.shape[0]
        dy_mat = dy.reshape(batch, s.out_channels, -1).transpose(0, 2, 1)
        dy_flat = dy_mat.reshape(-1, s.out_channels)
        cols_flat = cols.reshape(dy_flat.shape[0], -1)
        grads = {
            f"{self.name}.weight": dy_flat.T @ cols_flat,
            f"{self.name}.bias": dy_flat.sum(axis=0),
        }
        dcols = dy_flat @ w
        dx = _col2im(
            dcols.reshape(batch, -1, dcols.shape[1]), x_shape, out_size, s.kernel, s.stride, s.pad
        )
        return dx, grads


class _PReLU:
    """Leaky rectifier with one learnable negative-side slope per channel."""

    def __init__(self, name: str, channels: int):
        self.name = name
        self.channels = channels

    def param_shapes(self):
        return {f"{self.name}.slope": (self.channels,)}

    def init(self, rng: np.random.Generator, dtype) -> dict:
        return {f"{self.name}.slope": np.full(self.channels, 0.25, dtype=dtype)}

    def forward(self, x, tensors):
        a = tensors[f"{self.name}.slope"][None, :, None, None]
        pos = x > 0
        y = np.where(pos, x, a * x)
        return y, (x, pos)

    def backward(self, dy, tensors, cache):
        a = tensors[f"{self.name}.slope"][None, :, None, None]
        x, pos = cache
        dx = dy * np.where(pos, 1.0, a)
        da = (dy * np.where(pos, 0.0, x)).sum(axis=(0, 2, 3))
        return dx, {f"{self.name}.slope": da}


class _FC:
    def __init__(self, name: str, in_features: int, out_features: int):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features

    def param_shapes(self):
        return {
            f"{self.name}.weight": (self.out_features, self.in_features),
            f"{self.name}.bias": (self.out_features,),
        }

    def init(self, rng: np.random.Generator, dtype) -> dict:
        w = rng.normal(0.0, 0.1 / np.sqrt(self.in_features), (self.out_features, self.in_features))
        return {
            f"{self.name}.weight": w.astype(dtype),
            f"{self.name}.bias": np.zeros(self.out_features, dtype=dtype),
        }

    def forward(self, x, tensors):
        w = tensors[f"{self.name}.weight"]
        b = tensors[f"{self.name}.bias"]
        return x @ w.T + b, (x,)

    def backward(self, dy, tensors, cache):
        w = tensors[f"{self.name}.weight"]
        (x,) = cache
        grads = {f"{self.name}.weight": dy.T @ x, f"{self.name}.bias": dy.sum(axis=0)}
        return dy @ w, grads


# ---------------------------------------------------------------------------
# the assembled network

class Net:
    """Executable form of a NetSpec: parameter init, forward, backward."""

    def __init__(self, spec: NetSpec):
        self.spec = spec
        self.trunk: list[tuple[_Conv, _PReLU]] = []
        ch = spec.input_channels
        size = tuple(spec.input_size)
        self._trunk_channels = []
        in_ch = ch
        for i, conv in enumerate(spec.trunk, start=1):
            self.trunk.append((_Conv(f"trunk{i}", in_ch, conv), _PReLU(f"trunk{i}", conv.out_channels)))
            size = conv.out_size(size)
            in_ch = conv.out_channels
            self._trunk_channels.append(in_ch)
        self.final_size = size
        self.branches: list[tuple[int, list[tuple[_Conv, _PReLU]]]] = []
        concat_ch = in_ch
        for source, chain in spec.branches:
            layers = []
            bch = self._trunk_channels[source - 1]
            for j, conv in enumerate(chain, start=1):
                name = f"branch{source}.{j}"
                layers.append((_Conv(name, bch, conv), _PReLU(name, conv.out_channels)))
                bch = conv.out_channels
            concat_ch += bch
            self.branches.append((source, layers))
        self.reduce = _Conv("reduce", concat_ch, ConvSpec(spec.reduce_channels, 1))
        self.reduce_act = _PReLU("reduce", spec.reduce_channels)
        self.features = spec.reduce_channels * size[0] * size[1]
        self.head = _FC("head", self.features * spec.groups, spec.outputs)

    def _layers(self):
        for conv, act in self.trunk:
            yield conv
            yield act
        for _, chain in self.branches:
            for conv, act in chain:
                yield conv
                yield act
        yield self.reduce
        yield self.reduce_act
        yield self.head

    def param_shapes(self) -> dict:
        shapes = {}
        for layer in self._layers():
            shapes.update(layer.param_shapes())
        return shapes

    def init_params(self, rng: np.random.Generator, stage_tag: str = "") -> RegressorParams:
        tensors = {}
        for layer in self._layers():
            tensors.update(layer.init(rng, self.spec.np_dtype))
        return RegressorParams(tensors, stage_tag)

    def _check_params(self, params: RegressorParams):
        want = self.param_shapes()
        have = {k: v.shape for k, v in params.tensors.items()}
        if want != have:
            missing = sorted(set(want) - set(have))
            extra = sorted(set(have) - set(want))
            raise ValueError(
                f"parameter tensors do not match the network layout (missing {missing}, unexpected {extra})"
            )

    def _normalize_input(self, x: np.ndarray) -> np.ndarray:
        """Accept (C,H,W) / (G,C,H,W) / batched forms, return (B, G, C, H, W)."""
        spec = self.spec
        want = (spec.input_channels, *spec.input_size)
        x = np.asarray(x, dtype=spec.np_dtype)
        if spec.groups == 1:
            if x.shape == want:
                x = x[None]
            if x.ndim != 4 or x.shape[1:] != want:
                raise ValueError(
                    f"expected input channels {want}, got array of shape {x.shape}"
                )
            return x[:, None]
        want_g = (spec.groups, *want)
        if x.shape == want_g:
            x = x[None]
        if x.ndim != 5 or x.shape[1:] != want_g:
            raise ValueError(f"expected patch input {want_g}, got array of shape {x.shape}")
        return x

    def _standardize(self, flat: np.ndarray) -> np.ndarray:
        """Shift/scale each sample's RGB channels to zero mean, unit spread."""
        k = self.spec.rgb_channels
        if k == 0:
            return flat
        rgb = flat[:, :k]
        mean = rgb.mean(axis=(2, 3), keepdims=True)
        std = rgb.std(axis=(2, 3), keepdims=True)
        flat = flat.copy()
        flat[:, :k] = (rgb - mean) / (std + _STD_EPS)
        return flat

    def forward(self, params: RegressorParams, x: np.ndarray, want_cache: bool = False):
        self._check_params(params)
        t = params.tensors
        x = self._normalize_input(x)
        batch, groups = x.shape[:2]
        flat = x.reshape(batch * groups, *x.shape[2:])
        flat = self._standardize(flat)

        caches = {"trunk": [], "branches": [], "taps": {}}
        h = flat
        for idx, (conv, act) in enumerate(self.trunk, start=1):
            h, c1 = conv.forward(h, t)
            h, c2 = act.forward(h, t)
            caches["trunk"].append((c1, c2))
            if any(source == idx for source, _ in self.branches):
                caches["taps"][idx] = h
        parts = [h]
        for source, chain in self.branches:
            bh = caches["taps"][source]
            bcaches = []
            for conv, act in chain:
                bh, c1 = conv.forward(bh, t)
                bh, c2 = act.forward(bh, t)
                bcaches.append((c1, c2))
            caches["branches"].append(bcaches)
            parts.append(bh)
        cat = np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]
        caches["split"] = [p.shape[1] for p in parts]
        red, cr = self.reduce.forward(cat, t)
        red, cra = self.reduce_act.forward(red, t)
        caches["reduce"] = (cr, cra)
        feats = red.reshape(batch, groups * self.features)
        out, ch = self.head.forward(feats, t)
        caches["head"] = ch
        caches["dims"] = (batch, groups, red.shape)
        if want_cache:
            return out, caches
        return out

    def backward(self, params: RegressorParams, caches, dout: np.ndarray) -> dict:
        """Gradient of the supplied output cotangent w.r.t. every parameter."""
        t = params.tensors
        grads = {}
        batch, groups, red_shape = caches["dims"]
        dfeats, g = self.head.backward(dout, t, caches["head"])
        grads.update(g)
        dred = dfeats.reshape(red_shape)
        dred, g = self.reduce_act.backward(dred, t, caches["reduce"][1])
        grads.update(g)
        dcat, g = self.reduce.backward(dred, t, caches["reduce"][0])
        grads.update(g)

        split = caches["split"]
        edges = np.cumsum(split)[:-1]
        parts = np.split(dcat, edges, axis=1) if len(split) > 1 else [dcat]
        dtrunk_out = parts[0]
        dtaps = {}
        for (source, chain), bcaches, dpart in zip(self.branches, caches["branches"], parts[1:]):
            dh = dpart
            for (conv, act), (c1, c2) in zip(reversed(chain), reversed(bcaches)):
                dh, g = act.backward(dh, t, c2)
                _merge_grads(grads, g)
                dh, g = conv.backward(dh, t, c1)
                _merge_grads(grads, g)
            dtaps[source] = dtaps.get(source, 0) + dh

        dh = dtrunk_out
        for idx in range(len(self.trunk), 0, -1):
            if idx in dtaps:
                dh = dh + dtaps[idx]
            conv, act = self.trunk[idx - 1]
            c1, c2 = caches["trunk"][idx - 1]
            dh, g = act.backward(dh, t, c2)
            _merge_grads(grads, g)
            dh, g = conv.backward(dh, t, c1)
            _merge_grads(grads, g)
        return grads


def _merge_grads(into: dict, new: dict):
    for k, v in new.items():
        if k in into:
            into[k] = into[k] + v
        else:
            into[k] = v


def predict(net: Net, params: RegressorParams, x: np.ndarray) -> RegressorOutput:
    """Evaluate one sample and unpack the output vector (visibility clamped)."""
    out = net.forward(params, x)
    if out.shape[0] != 1:
        raise ValueError("predict takes a single sample; use forward for batches")
    return RegressorOutput.from_vector(out[0])


# ---------------------------------------------------------------------------
# training

def _stack_targets(samples, patch_mode: bool):
    corr = np.stack([s.corrections for s in samples])
    vis = np.stack([s.visibility for s in samples])
    pose = None if patch_mode else np.stack([s.pose for s in samples])
    return corr, vis, pose


def batch_loss_and_grad(out: np.ndarray, corr_t, vis_t, pose_t, policy: StagePolicy):
    """Mean per-sample loss over the batch plus its gradient w.r.t. out.

    Keypoint part: visibility-gated squared error plus policy.l1_weight times
    the gated absolute error. Pose and visibility parts are squared errors.
    Parts are averaged over the batch, then mixed with the policy weights.
    """
    n = out.shape[0]
    dout = np.zeros_like(out)
    k = N_LANDMARKS
    corr = out[:, : 2 * k].reshape(n, k, 2)
    diff = (corr - corr_t) * vis_t[:, :, None]
    gamma = policy.l1_weight
    kp = float(((diff * diff) + gamma * np.abs(diff)).sum()) / n
    dout[:, : 2 * k] = ((2.0 * diff + gamma * np.sign(diff)) * vis_t[:, :, None]).reshape(n, -1) / n

    vd = out[:, 2 * k : 3 * k] - vis_t
    vis_part = float((vd * vd).sum()) / n
    dout[:, 2 * k : 3 * k] = 2.0 * vd / n

    pose_part = 0.0
    if pose_t is not None:
        pd = out[:, 3 * k :] - pose_t
        pose_part = float((pd * pd).sum()) / n
        dout[:, 3 * k :] = 2.0 * pd / n

    total = (
        policy.keypoint_weight * kp
        + policy.pose_weight * pose_part
        + policy.visibility_weight * vis_part
    )
    dout[:, : 2 * k] *= policy.keypoint_weight
    dout[:, 2 * k : 3 * k] *= policy.visibility_weight
    if pose_t is not None:
        dout[:, 3 * k :] *= policy.pose_weight
    return float(total), dout


def _default_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_stage(
    data,
    policy: StagePolicy,
    spec: NetSpec,
    *,
    init: RegressorParams | None = None,
    seed=0,
    batch_size: int = 32,
    learning_rate: float | None = None,
    epochs: int | None = None,
    batches_fn=None,
    stage_tag: str = "",
):
    """Fit one round's network by minibatch SGD with momentum.

    data is an indexable sequence of (input_raster, StageTargets) pairs; it
    may build rasters lazily in __getitem__. batches_fn, when given, maps an
    rng to the list of index batches for one epoch (used for mined batches).
    Returns (params, per_epoch_losses). The returned parameters are the
    final ones unless the last epoch's mean loss exceeds the first's, in
    which case the best epoch's snapshot is returned.
    """
    n = len(data)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    net = Net(spec)
    rng = np.random.default_rng(seed)
    if init is None:
        params = net.init_params(rng, stage_tag)
    else:
        params = init.copy()
        params.stage_tag = stage_tag or init.stage_tag
        net._check_params(params)
    lr = policy.learning_rate if learning_rate is None else learning_rate
    n_epochs = policy.epochs if epochs is None else epochs
    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    patch_mode = spec.outputs == PATCH_OUTPUTS

    losses: list[float] = []
    best = (np.inf, None)
    for epoch in range(n_epochs):
        batches = batches_fn(rng) if batches_fn is not None else _default_batches(n, batch_size, rng)
        epoch_sum = 0.0
        epoch_n = 0
        for batch in batches:
            pairs = [data[int(i)] for i in batch]
            x = np.stack([p[0] for p in pairs]).astype(spec.np_dtype)
            corr_t, vis_t, pose_t = _stack_targets([p[1] for p in pairs], patch_mode)
            out, caches = net.forward(params, x, want_cache=True)
            value, dout = batch_loss_and_grad(out, corr_t, vis_t, pose_t, policy)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch + 1}", epoch=epoch + 1
                )
            grads = net.backward(params, caches, dout)
            for k in params.tensors:
                velocity[k] = MOMENTUM * velocity[k] - lr * grads[k]
                params.tensors[k] += velocity[k]
            epoch_sum += value * len(batch)
            epoch_n += len(batch)
        mean = epoch_sum / max(epoch_n, 1)
        losses.append(mean)
        if mean < best[0]:
            best = (mean, params.copy())
        log.info("%s epoch %d/%d loss %.6f", stage_tag or "stage", epoch + 1, n_epochs, mean)
    if losses and losses[-1] > losses[0] and best[1] is not None:
        log.info("%s: final loss regressed, keeping best snapshot %.6f", stage_tag, best[0])
        params = best[1]
    return params, losses


# ---------------------------------------------------------------------------
# gradient checking

def gradient_check(
    spec: NetSpec,
    policy: StagePolicy,
    *,
    seed: int = 0,
    batch: int = 2,
    step: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Builds a random batch and random targets from the seed, computes analytic
    parameter gradients via backward, then perturbs every scalar parameter by
    +-step. Everything runs in float64 regardless of spec.dtype.
    """
    spec64 = NetSpec(
        spec.input_channels,
        tuple(spec.input_size),
        spec.trunk,
        spec.branches,
        spec.reduce_channels,
        spec.outputs,
        spec.groups,
        spec.rgb_channels,
        "float64",
    )
    net = Net(spec64)
    rng = np.random.default_rng(seed)
    params = net.init_params(rng, "gradcheck")
    shape = (batch, spec64.groups, spec64.input_channels, *spec64.input_size)
    x = rng.uniform(0.0, 1.0, shape if spec64.groups > 1 else (batch,) + shape[2:])
    patch_mode = spec64.outputs == PATCH_OUTPUTS
    corr_t = rng.normal(0.0, 2.0, (batch, N_LANDMARKS, 2))
    vis_t = (rng.uniform(size=(batch, N_LANDMARKS)) > 0.3).astype(np.float64)
    pose_t = None if patch_mode else rng.normal(0.0, 10.0, (batch, 3))

    def loss_of(p: RegressorParams) -> float:
        out = net.forward(p, x)
        value, _ = batch_loss_and_grad(out, corr_t, vis_t, pose_t, policy)
        return value

    out, caches = net.forward(params, x, want_cache=True)
    _, dout = batch_loss_and_grad(out, corr_t, vis_t, pose_t, policy)
    analytic = net.backward(params, caches, dout)

    worst = 0.0
    for name in sorted(params.tensors):
        tensor = params.tensors[name]
        grad = analytic[name]
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            keep = tensor[idx]
            tensor[idx] = keep + step
            up = loss_of(params)
            tensor[idx] = keep - step
            down = loss_of(params)
            tensor[idx] = keep
            numeric = (up - down) / (2.0 * step)
            a = float(grad[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            if err > worst:
                worst = err
    return worst
