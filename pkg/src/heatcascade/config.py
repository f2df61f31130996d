"""Run configuration: one JSON file drives every command.

A config is a plain dict of sections; anything omitted falls back to the
defaults below, anything unknown is rejected. The defaults describe a small
setup that trains in minutes on one core. Scaling up is a matter of
overriding the render size, the network layout, and the per-stage schedule.
"""

from __future__ import annotations

import copy
import json

from heatcascade.errors import ConfigError
from heatcascade.data import SyntheticFaceSpec
from heatcascade.losses import StagePolicy
from heatcascade.network import ConvSpec, NetSpec
from heatcascade.render import RenderConfig
from heatcascade.geometry import N_LANDMARKS
from heatcascade.cascade import TrainSettings

DEFAULTS: dict = {
    "seed": 0,
    "synth": {
        "count": 2300,
        "image_size": 128,
        "face_scale": [52.0, 78.0],
        "yaw_range": [-35.0, 35.0],
        "pitch_range": [-20.0, 20.0],
        "roll_range": [-25.0, 25.0],
        "box_margin": 0.12,
        "box_jitter": 0.06,
        "blob_radius_frac": 0.045,
        "clutter_blobs": 3,
    },
    "render": {
        "width": 64,
        "height": 64,
        "sigma": 2.0,
        "amplitude": 1.0,
        "vis_threshold": 0.03,
    },
    "stages": [
        {
            "correction_bound": 6.0,
            "l1_weight": 0.0,
            "keypoint_weight": 1.0,
            "pose_weight": 0.05,
            "visibility_weight": 0.5,
            "vis_threshold": 0.03,
            "mining": False,
            "learning_rate": 3e-4,
            "epochs": 6,
        },
        {
            "correction_bound": 6.0,
            "l1_weight": 0.0,
            "keypoint_weight": 1.0,
            "pose_weight": 0.05,
            "visibility_weight": 0.5,
            "vis_threshold": 0.03,
            "mining": False,
            "learning_rate": 3e-4,
            "epochs": 4,
        },
        {
            "correction_bound": None,
            "l1_weight": 0.2,
            "keypoint_weight": 1.0,
            "pose_weight": 0.02,
            "visibility_weight": 0.5,
            "vis_threshold": 0.03,
            "mining": False,
            "learning_rate": 3e-4,
            "epochs": 4,
        },
        {
            "correction_bound": None,
            "l1_weight": 0.1,
            "keypoint_weight": 1.0,
            "pose_weight": 0.02,
            "visibility_weight": 0.5,
            "vis_threshold": 0.03,
            "mining": True,
            "learning_rate": 3e-4,
            "epochs": 4,
        },
        {
            "correction_bound": None,
            "l1_weight": 0.1,
            "keypoint_weight": 1.0,
            "pose_weight": 0.0,
            "visibility_weight": 0.5,
            "vis_threshold": 0.03,
            "mining": True,
            "learning_rate": 3e-4,
            "epochs": 6,
        },
    ],
    "network": {
        "global": {
            "input_size": 64,
            "trunk": [[16, 5, 2, 2], [24, 3, 2, 1], [32, 3, 2, 1], [48, 3, 2, 1]],
            "branches": [[1, [[16, 3, 2, 1], [16, 3, 4, 1]]], [3, [[24, 3, 2, 1]]]],
            "reduce_channels": 48,
            "dtype": "float32",
        },
        "patch": {
            "input_size": 16,
            "trunk": [[8, 3, 2, 1], [12, 3, 2, 1]],
            "branches": [],
            "reduce_channels": 12,
            "dtype": "float32",
        },
    },
    "training": {
        "batch_size": 32,
        "patch_window_frac": 0.25,
        "finetune_scale": 0.1,
        "finetune_epochs": 2,
        "mining_bin_width": 0.005,
        "mining_min_hard_fraction": 0.3,
        "mining_threshold": None,
        "train_stage5": True,
        "chunk": 64,
    },
    "protocol": {
        "name": "full",
        "test_size": 1000,
        "min_height": 150.0,
        "yaw_only": False,
    },
}

PROTOCOL_NAMES = ("full", "yaw-grouped", "min-height")


def _merge(base, override, path):
    if not isinstance(override, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(override).__name__}")
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"{path + key}: unknown key")
        if isinstance(base[key], dict):
            merged[key] = _merge(base[key], value, path + key + ".")
        elif key == "stages":
            merged[key] = _merge_stages(value, path + key)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _merge_stages(value, path):
    if not isinstance(value, list) or len(value) != 5:
        raise ConfigError(f"{path}: must be a list of 5 per-round objects")
    merged = []
    for i, override in enumerate(value):
        merged.append(_merge(DEFAULTS["stages"][i], override, f"{path}[{i}]."))
    return merged


def load_run_config(path=None) -> dict:
    """Read a JSON config and fill gaps with defaults; None means all defaults."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}")
    return _merge(DEFAULTS, raw, "")


def _build(section, builder, **kwargs):
    try:
        return builder(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def synth_spec(cfg: dict) -> SyntheticFaceSpec:
    s = cfg["synth"]
    return _build(
        "synth",
        SyntheticFaceSpec,
        image_size=int(s["image_size"]),
        face_scale=tuple(float(v) for v in s["face_scale"]),
        yaw_range=tuple(float(v) for v in s["yaw_range"]),
        pitch_range=tuple(float(v) for v in s["pitch_range"]),
        roll_range=tuple(float(v) for v in s["roll_range"]),
        box_margin=float(s["box_margin"]),
        box_jitter=float(s["box_jitter"]),
        blob_radius_frac=float(s["blob_radius_frac"]),
        clutter_blobs=int(s["clutter_blobs"]),
    )


def render_cfg(cfg: dict) -> RenderConfig:
    r = cfg["render"]
    return _build(
        "render",
        RenderConfig,
        width=int(r["width"]),
        height=int(r["height"]),
        sigma=float(r["sigma"]),
        amplitude=float(r["amplitude"]),
        vis_threshold=float(r["vis_threshold"]),
    )


def stage_policies(cfg: dict) -> tuple[StagePolicy, ...]:
    policies = []
    for i, s in enumerate(cfg["stages"], start=1):
        bound = s["correction_bound"]
        policies.append(
            _build(
                f"stages[{i - 1}]",
                StagePolicy,
                stage=i,
                correction_bound=None if bound is None else float(bound),
                l1_weight=float(s["l1_weight"]),
                keypoint_weight=float(s["keypoint_weight"]),
                pose_weight=float(s["pose_weight"]),
                visibility_weight=float(s["visibility_weight"]),
                vis_threshold=float(s["vis_threshold"]),
                mining=bool(s["mining"]),
                patch_mode=i == 5,
                learning_rate=float(s["learning_rate"]),
                epochs=int(s["epochs"]),
            )
        )
    return tuple(policies)


def _convs(raw, section):
    chain = []
    for c in raw:
        if not isinstance(c, list) or len(c) != 4:
            raise ConfigError(f"{section}: each conv is [channels, kernel, stride, pad]")
        chain.append(ConvSpec(*(int(v) for v in c)))
    return tuple(chain)


def global_net_spec(cfg: dict) -> NetSpec:
    g = cfg["network"]["global"]
    r = cfg["render"]
    if int(g["input_size"]) != int(r["width"]) or int(r["width"]) != int(r["height"]):
        raise ConfigError(
            "network.global.input_size must match a square render "
            f"({r['width']}x{r['height']} vs {g['input_size']})"
        )
    return _build(
        "network.global",
        NetSpec,
        input_channels=3 + N_LANDMARKS,
        input_size=(int(g["input_size"]), int(g["input_size"])),
        trunk=_convs(g["trunk"], "network.global.trunk"),
        branches=tuple(
            (int(src), _convs(chain, "network.global.branches"))
            for src, chain in g["branches"]
        ),
        reduce_channels=int(g["reduce_channels"]),
        dtype=str(g["dtype"]),
    )


def patch_net_spec(cfg: dict) -> NetSpec:
    p = cfg["network"]["patch"]
    return _build(
        "network.patch",
        NetSpec,
        input_channels=4,
        input_size=(int(p["input_size"]), int(p["input_size"])),
        trunk=_convs(p["trunk"], "network.patch.trunk"),
        branches=tuple(
            (int(src), _convs(chain, "network.patch.branches"))
            for src, chain in p["branches"]
        ),
        reduce_channels=int(p["reduce_channels"]),
        outputs=3 * N_LANDMARKS,
        groups=N_LANDMARKS,
        dtype=str(p["dtype"]),
    )


def train_settings(cfg: dict) -> TrainSettings:
    t = cfg["training"]
    threshold = t["mining_threshold"]
    return _build(
        "training",
        TrainSettings,
        render_cfg=render_cfg(cfg),
        policies=stage_policies(cfg),
        global_spec=global_net_spec(cfg),
        patch_spec=patch_net_spec(cfg),
        seed=int(cfg["seed"]),
        batch_size=int(t["batch_size"]),
        patch_window_frac=float(t["patch_window_frac"]),
        finetune_scale=float(t["finetune_scale"]),
        finetune_epochs=int(t["finetune_epochs"]),
        mining_bin_width=float(t["mining_bin_width"]),
        mining_min_hard_fraction=float(t["mining_min_hard_fraction"]),
        mining_threshold=None if threshold is None else float(threshold),
        train_stage5=bool(t["train_stage5"]),
        chunk=int(t["chunk"]),
    )


def protocol_settings(cfg: dict) -> dict:
    p = cfg["protocol"]
    if p["name"] not in PROTOCOL_NAMES:
        raise ConfigError(
            f"protocol.name must be one of {', '.join(PROTOCOL_NAMES)}, got {p['name']!r}"
        )
    test_size = int(p["test_size"])
    if test_size < 3:
        raise ConfigError(f"protocol.test_size must be at least 3, got {test_size}")
    return {
        "name": p["name"],
        "test_size": test_size,
        "min_height": float(p["min_height"]),
        "yaw_only": bool(p["yaw_only"]),
    }
