"""Command line interface.

Subcommands cover the whole workflow: synth makes a labelled toy corpus,
train fits the five-round model, infer writes predictions for a corpus,
eval scores predictions under a protocol, augment expands a corpus with
rotated and mirrored variants, gradcheck compares the analytic gradients
against finite differences. Exit codes: 0 success, 2 bad configuration or
usage, 3 bad data, 4 training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from heatcascade import config as cfg_mod
from heatcascade.cascade import infer_faces, load_model, save_model, train_cascade
from heatcascade.data import (
    filter_min_height,
    generate_synthetic,
    load_annotations,
    load_image,
    make_all_variants,
    read_corpus,
    split_train_test,
    split_yaw_grouped,
    write_corpus,
)
from heatcascade.errors import ConfigError, DataError, TrainingDivergedError
from heatcascade.evaluate import build_report, emit_report
from heatcascade.geometry import N_LANDMARKS, Shape
from heatcascade.network import ConvSpec, NetSpec, gradient_check

log = logging.getLogger("heatcascade")

# Compact layouts for the numeric gradient check. Central differences visit
# every scalar parameter twice, so the configured production network would
# take hours; these exercise the same layer types (trunk, branch taps,
# activation slopes, reduction, grouped head) at a checkable size.
CHECK_GLOBAL = NetSpec(
    input_channels=3 + N_LANDMARKS,
    input_size=(12, 12),
    trunk=(ConvSpec(6, 3, 2, 1), ConvSpec(8, 3, 2, 1)),
    branches=((1, (ConvSpec(6, 3, 2, 1),)),),
    reduce_channels=8,
    dtype="float64",
)
CHECK_PATCH = NetSpec(
    input_channels=4,
    input_size=(8, 8),
    trunk=(ConvSpec(4, 3, 2, 1),),
    branches=(),
    reduce_channels=3,
    outputs=3 * N_LANDMARKS,
    groups=3,
    dtype="float64",
)


# ---------------------------------------------------------------------------
# prediction files

def write_predictions(results, names, path) -> None:
    """One JSON line per face: image name, points, visibility, pose."""
    with open(path, "w", encoding="utf-8") as fh:
        for name, res in zip(names, results):
            rec = {
                "image": name,
                "points": [[float(x), float(y)] for x, y in res.shape.points],
                "visibility": [float(v) for v in res.visibility],
                "pose": [res.pose.yaw, res.pose.pitch, res.pose.roll],
            }
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def read_predictions(path) -> dict:
    """Map image name -> (Shape, visibility, pose array)."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                pts = np.array(rec["points"], dtype=np.float64)
                vis = np.array(rec["visibility"], dtype=np.float64)
                pose = np.array(rec["pose"], dtype=np.float64)
                if pts.shape != (N_LANDMARKS, 2) or vis.shape != (N_LANDMARKS,):
                    raise ValueError(f"expected {N_LANDMARKS} points")
                if pose.shape != (3,):
                    raise ValueError("pose must be [yaw, pitch, roll]")
                out[str(rec["image"])] = (Shape(pts), vis, pose)
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
    if not out:
        raise DataError(f"{path}: no predictions found")
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    cfg = cfg_mod.load_run_config(args.config)
    spec = cfg_mod.synth_spec(cfg)
    count = cfg["synth"]["count"] if args.count is None else args.count
    seed = cfg["seed"] if args.seed is None else args.seed
    log.info("generating %d synthetic faces (seed %d)", count, seed)
    faces, images = generate_synthetic(count, spec, seed=seed)
    write_corpus(faces, images, args.out)
    log.info("corpus written to %s", args.out)
    return 0


def cmd_train(args) -> int:
    cfg = cfg_mod.load_run_config(args.config)
    settings = cfg_mod.train_settings(cfg)
    if args.seed is not None:
        settings = dataclasses.replace(settings, seed=args.seed)
    faces, images = read_corpus(args.data)
    log.info("training on %d faces", len(faces))
    t0 = time.time()
    model, stats = train_cascade(faces, images, settings)
    log.info("trained in %.0f s", time.time() - t0)
    save_model(model, args.out)
    stats_path = os.path.join(args.out, "training_stats.json")
    with open(stats_path, "w", encoding="utf-8") as fh:
        json.dump(_plain(stats), fh, sort_keys=True, indent=1)
        fh.write("\n")
    log.info("model bundle written to %s", args.out)
    print(
        "median train error per round:",
        " ".join(f"{v:.4f}" for v in stats["train_median_nme"]),
    )
    return 0


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def cmd_infer(args) -> int:
    model = load_model(args.model)
    faces = load_annotations(os.path.join(args.data, "annotations.jsonl"))
    if not faces:
        raise DataError(f"{args.data}: corpus has no faces")
    images = [load_image(os.path.join(args.data, "images"), f) for f in faces]
    log.info("running %d faces through the cascade", len(faces))
    results = infer_faces(
        model, [f.box for f in faces], images, use_stage5=not args.no_stage5
    )
    write_predictions(results, [f.image_path for f in faces], args.out)
    log.info("predictions written to %s", args.out)
    return 0


def _scored_indices(faces, protocol, seed):
    name = protocol["name"]
    if name == "full":
        idx = list(split_train_test(faces, seed, protocol["test_size"]).test)
        return idx, None
    if name == "yaw-grouped":
        split = split_yaw_grouped(faces, seed, protocol["test_size"])
        idx = list(split.test)
        reindex = {int(i): k for k, i in enumerate(idx)}
        groups = {
            g: [reindex[int(i)] for i in members]
            for g, members in split.yaw_groups.items()
        }
        return idx, groups
    idx = filter_min_height(faces, protocol["min_height"])
    if not idx:
        raise DataError(f"no faces taller than {protocol['min_height']} px to score")
    return idx, None


def cmd_eval(args) -> int:
    cfg = cfg_mod.load_run_config(args.config)
    protocol = cfg_mod.protocol_settings(cfg)
    faces = load_annotations(os.path.join(args.data, "annotations.jsonl"))
    if not faces:
        raise DataError(f"{args.data}: corpus has no faces")
    preds = read_predictions(args.pred)
    idx, groups = _scored_indices(faces, protocol, cfg["seed"])
    scored_faces, scored_preds = [], []
    for i in idx:
        face = faces[i]
        if face.image_path not in preds:
            raise DataError(f"{args.pred}: no prediction for {face.image_path}")
        shape, _, pose = preds[face.image_path]
        scored_faces.append(face)
        scored_preds.append((shape, pose))
    report = build_report(
        scored_preds,
        scored_faces,
        protocol=protocol["name"],
        yaw_only=protocol["yaw_only"],
        groups=groups,
    )
    paths = emit_report(report, args.out)
    log.info("report written to %s", args.out)
    print(f"protocol {report.protocol}: {report.sample_count} faces")
    print(f"mean nme {report.mean_nme:.5f}  median nme {report.median_nme:.5f}")
    print(
        f"pose mae {report.pose_overall_mae:.2f} deg  "
        f"accuracy(15 deg) {report.pose_accuracy:.3f}"
    )
    for g in sorted(report.group_mean_nme):
        print(f"group {g}: mean nme {report.group_mean_nme[g]:.5f}")
    for key in ("summary", "ced_csv", "ced_svg"):
        print(paths[key])
    return 0


def cmd_augment(args) -> int:
    faces, images = read_corpus(args.data)
    log.info("augmenting %d faces (8 variants each)", len(faces))
    out_faces, out_images = make_all_variants(
        faces, images, include_originals=args.include_originals
    )
    write_corpus(out_faces, out_images, args.out)
    log.info("%d faces written to %s", len(out_faces), args.out)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = cfg_mod.load_run_config(args.config)
    if args.patch:
        spec = CHECK_PATCH
        policy = cfg_mod.stage_policies(cfg)[4]
    else:
        spec = CHECK_GLOBAL
        policy = cfg_mod.stage_policies(cfg)[args.stage - 1]
    log.info(
        "checking %s network gradients against central differences",
        "patch" if args.patch else "global",
    )
    err = gradient_check(spec, policy, seed=args.seed, batch=args.batch)
    ok = err <= args.tolerance
    print(
        f"max relative gradient error {err:.3e} "
        f"{'<=' if ok else '>'} {args.tolerance:.0e}: {'OK' if ok else 'FAIL'}"
    )
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heatcascade",
        description="iterative keypoint, visibility, and pose estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labelled synthetic corpus")
    p.add_argument("--out", required=True, help="corpus directory to create")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--count", type=int, help="number of faces (overrides config)")
    p.add_argument("--seed", type=int, help="corpus seed (overrides config)")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train the five-round model on a corpus")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="model bundle directory to create")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int, help="training seed (overrides config)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="predict keypoints for every face in a corpus")
    p.add_argument("--model", required=True, help="model bundle directory")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="predictions JSONL to write")
    p.add_argument("--no-stage5", action="store_true", help="skip the local refinement round")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predictions under a protocol")
    p.add_argument("--data", required=True, help="corpus directory with annotations")
    p.add_argument("--pred", required=True, help="predictions JSONL from infer")
    p.add_argument("--out", required=True, help="report directory to create")
    p.add_argument("--config", help="JSON run config (protocol section)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("augment", help="add rotated and mirrored copies of a corpus")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="augmented corpus directory to create")
    p.add_argument(
        "--include-originals", action="store_true", help="keep the source faces too"
    )
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("gradcheck", help="verify analytic gradients numerically")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--stage", type=int, default=3, choices=(1, 2, 3, 4),
                   help="global round whose loss mix to check")
    p.add_argument("--patch", action="store_true", help="check the patch network instead")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s"
    )
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    except DataError as exc:
        log.error("%s", exc)
        return 3
    except TrainingDivergedError as exc:
        log.error("training diverged: %s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
