"""Command-line pipeline: gen, train, eval, bev.

One binary with subcommands.  Settings come from a TOML file (unknown
keys rejected) with per-command flag overrides; every run echoes its
effective configuration into the output directory and derives all
randomness from a single root seed, so identical invocations produce
identical artifacts.  Exit codes: 0 success, 1 user error, 2 internal
error.  CUBOIDLIFT_LOG=debug|info|warning controls verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys

try:
    import tomllib
except ModuleNotFoundError:  # 3.10 fallback
    import tomli as tomllib

import numpy as np

from . import dataset as ds
from . import kitti_io
from . import lifter as lf
from . import metrics as mt
from .geometry import interpolation_matrix
from .pose import dims_from_psi, ego_to_allo, recover_orientation, template_psi, wrap_angle

log = logging.getLogger("cuboidlift")


class UserError(Exception):
    """Bad input or configuration; reported without a traceback."""


_CAMERA_DEFAULT = {
    "fx": ds.DEFAULT_CAMERA.fx,
    "fy": ds.DEFAULT_CAMERA.fy,
    "cx": ds.DEFAULT_CAMERA.cx,
    "cy": ds.DEFAULT_CAMERA.cy,
    "width": ds.DEFAULT_CAMERA.width,
    "height": ds.DEFAULT_CAMERA.height,
}
_UNLABELED_CAMERA_DEFAULT = {
    "fx": ds.UNLABELED_CAMERA.fx,
    "fy": ds.UNLABELED_CAMERA.fy,
    "cx": ds.UNLABELED_CAMERA.cx,
    "cy": ds.UNLABELED_CAMERA.cy,
    "width": ds.UNLABELED_CAMERA.width,
    "height": ds.UNLABELED_CAMERA.height,
}

DEFAULTS = {
    "gen": {
        "seed": 0,
        "pairs": 1000,
        "augment": 1,
        "unlabeled": 0,
        "shard_size": 10000,
        "so3_tilt": 0.0,
    },
    "spec": {
        "h_range": [1.3, 1.9],
        "w_range": [1.5, 2.0],
        "l_range": [3.2, 4.8],
        "depth_range": [4.0, 60.0],
        "u_margin": 0.1,
        "v_band": [0.35, 0.75],
        "instances_per_image": [1, 12],
        "min_visibility": 0.7,
        "intrinsics_mode": "fixed",
        "camera": _CAMERA_DEFAULT,
        "unlabeled_camera": _UNLABELED_CAMERA_DEFAULT,
    },
    "train": {
        "seed": 0,
        "dataset": "",
        "mode": "plain",
        "cr": "auto",
        "noise_sigma_px": 0.0,
        "dropout": 0.5,
        "lr": 0.001,
        "lr_decay": 0.5,
        "lr_decay_every": 50,
        "epochs": 300,
        "batch_size": 256,
        "w_hm": 1.0,
        "w_2d": 0.1,
        "w_3d": 1.0,
        "w_cr": 0.005,
        "cr_warmup_epochs": 1,
        "resume": "",
    },
    "eval": {
        "seed": 0,
        "dataset": "",
        "checkpoint": "",
        "sigmas": [0.0, 2.0],
        "iou_threshold": 0.7,
        "pck_levels": [0.1, 0.2, 0.3],
    },
    "bev": {
        "predictions": "",
        "ground_truth": "",
        "span_x": 30.0,
        "span_z": 60.0,
        "size": 600,
        "arrow_len": 2.0,
    },
}


def _check_keys(config, schema, path=""):
    for key, value in config.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise UserError(f"unknown configuration key: {where}")
        if isinstance(schema[key], dict):
            if not isinstance(value, dict):
                raise UserError(f"configuration key {where} must be a table")
            _check_keys(value, schema[key], where)


def _deep_merge(base, override):
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path):
    """DEFAULTS overlaid with the TOML file; unknown keys rejected."""
    if path is None:
        return json.loads(json.dumps(DEFAULTS))  # deep copy
    try:
        with open(path, "rb") as fh:
            loaded = tomllib.load(fh)
    except FileNotFoundError:
        raise UserError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise UserError(f"config parse error in {path}: {exc}")
    _check_keys(loaded, DEFAULTS)
    return _deep_merge(DEFAULTS, loaded)


def build_spec(section):
    def pair(name):
        value = section[name]
        if not (isinstance(value, (list, tuple)) and len(value) == 2):
            raise UserError(f"spec.{name} must be a two-element list")
        return tuple(value)

    try:
        return ds.SampleSpec(
            h_range=pair("h_range"),
            w_range=pair("w_range"),
            l_range=pair("l_range"),
            depth_range=pair("depth_range"),
            u_margin=section["u_margin"],
            v_band=pair("v_band"),
            instances_per_image=tuple(int(x) for x in section["instances_per_image"]),
            min_visibility=section["min_visibility"],
            intrinsics_mode=section["intrinsics_mode"],
            camera=ds.Camera(**section["camera"]),
            unlabeled_camera=ds.Camera(**section["unlabeled_camera"]),
        )
    except (ValueError, TypeError) as exc:
        raise UserError(f"invalid spec: {exc}")


def _prepare_out(out, force):
    if out is None:
        raise UserError("--out is required")
    if os.path.exists(out):
        if os.listdir(out) and not force:
            raise UserError(f"output directory {out} is not empty (use --force)")
        if force:
            shutil.rmtree(out)
    os.makedirs(out, exist_ok=True)
    return out


def _echo_config(out, config):
    with open(os.path.join(out, "effective_config.json"), "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _apply_overrides(config, section, args, names):
    for name in names:
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            config[section][name.replace("-", "_")] = value


# ---- gen ----


def cmd_gen(args):
    config = load_config(args.config)
    _apply_overrides(config, "gen", args,
                     ["seed", "pairs", "augment", "unlabeled", "so3_tilt", "shard_size"])
    gen = config["gen"]
    spec = build_spec(config["spec"])
    out = _prepare_out(args.out, args.force)
    _echo_config(out, config)
    try:
        manifest = ds.generate_to_dir(
            out,
            seed=gen["seed"],
            spec=spec,
            base_count=gen["pairs"],
            augment_factor=gen["augment"],
            unlabeled_count=gen["unlabeled"],
            so3_tilt=gen["so3_tilt"],
            shard_size=gen["shard_size"],
        )
    except ValueError as exc:
        raise UserError(str(exc))
    counts = manifest["counts"]
    print(f"generated {counts['labeled']} labeled and {counts['unlabeled']} "
          f"unlabeled records in {out}")
    return 0


# ---- train ----


def _train_config(section):
    cr = section["cr"]
    if cr not in ("auto", "on", "off"):
        raise UserError("train.cr must be auto, on or off")
    mixed = section["mode"] == "mixed"
    if section["mode"] not in ("plain", "mixed"):
        raise UserError("train.mode must be plain or mixed")
    cr_enabled = mixed if cr == "auto" else (cr == "on")
    try:
        return lf.TrainConfig(
            lr=section["lr"],
            lr_decay=section["lr_decay"],
            lr_decay_every=section["lr_decay_every"],
            epochs=section["epochs"],
            batch_size=section["batch_size"],
            w_hm=section["w_hm"],
            w_2d=section["w_2d"],
            w_3d=section["w_3d"],
            w_cr=section["w_cr"],
            cr_enabled=cr_enabled,
            cr_warmup_epochs=section["cr_warmup_epochs"],
            mixed=mixed,
            seed=section["seed"],
        )
    except ValueError as exc:
        raise UserError(f"invalid training configuration: {exc}")


def _write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(lf.HISTORY_COLUMNS)
        for rec in history:
            row = rec.as_row()
            writer.writerow([row[0]] + [repr(x) for x in row[1:]])


def cmd_train(args):
    config = load_config(args.config)
    _apply_overrides(config, "train", args,
                     ["seed", "dataset", "mode", "cr", "noise_sigma_px", "dropout",
                      "lr", "epochs", "batch_size", "resume"])
    section = config["train"]
    if not section["dataset"]:
        raise UserError("train.dataset (or --dataset) is required")
    tcfg = _train_config(section)
    out = _prepare_out(args.out, args.force)
    _echo_config(out, config)

    if not os.path.isdir(section["dataset"]):
        raise UserError(f"dataset directory not found: {section['dataset']}")
    data = ds.load_training_data(
        section["dataset"], noise_sigma_px=section["noise_sigma_px"],
        seed=tcfg.seed,
    )
    if data.inputs.shape[1] != lf.INPUT_DIM:
        raise UserError(
            f"dataset has {data.inputs.shape[1]} input values per sample; "
            f"the lifter takes {lf.INPUT_DIM}"
        )

    start_epoch = 1
    history = []
    if section["resume"]:
        model, optimizer, last_epoch, _, history = lf.load_checkpoint(section["resume"])
        if optimizer is None:
            raise UserError("checkpoint carries no optimizer state; cannot resume")
        start_epoch = last_epoch + 1
        log.info("resuming from %s at epoch %d", section["resume"], start_epoch)
    else:
        model = lf.LifterNet(
            rng=np.random.default_rng(np.random.SeedSequence([tcfg.seed, 1])),
            dropout_rate=section["dropout"],
        )
        optimizer = lf.Adam(model.params)

    def log_epoch(epoch, _model, record):
        log.info("epoch %d: loss_3d=%.6f loss_total=%.6f", epoch, record.loss_3d,
                 record.loss_total)

    history = lf.train(model, data, tcfg, callbacks=[log_epoch], optimizer=optimizer,
                       start_epoch=start_epoch, history=history)
    ckpt = os.path.join(out, "checkpoint.bin")
    lf.save_checkpoint(ckpt, model, optimizer, epoch=tcfg.epochs, config=tcfg,
                       history=history)
    _write_history_csv(os.path.join(out, "loss.csv"), history)
    final = history[-1]
    print(f"trained {tcfg.epochs} epochs; final loss_3d={final.loss_3d:.6f} "
          f"checkpoint={ckpt}")
    return 0


# ---- eval ----


def _gt_record(dims, centroid, yaw, bbox, visibility):
    h = dims[0]
    location = (centroid[0], centroid[1] + h / 2.0, centroid[2])
    return kitti_io.DetectionRecord(
        class_name="Car",
        truncation=float(np.clip(1.0 - visibility, 0.0, 1.0)),
        occlusion=0,
        alpha=ego_to_allo(yaw, location),
        bbox=tuple(bbox),
        dims=tuple(dims),
        location=location,
        rotation_y=wrap_angle(yaw),
    )


def _pred_record(gt, pred_dims, pred_yaw):
    return kitti_io.DetectionRecord(
        class_name="Car",
        truncation=gt.truncation,
        occlusion=gt.occlusion,
        alpha=ego_to_allo(pred_yaw, gt.location),
        bbox=gt.bbox,
        dims=pred_dims,
        location=gt.location,
        rotation_y=wrap_angle(pred_yaw),
        score=1.0,
    )


def _eval_one_sigma(model, dataset_dir, sigma, seed, interp, pck_levels, iou_threshold,
                    out_dir):
    data = ds.load_training_data(dataset_dir, noise_sigma_px=sigma, seed=seed)
    n = data.inputs.shape[0]
    psi_hat = model.predict(data.inputs).astype(float).reshape(n, -1, 3)
    template = template_psi(interp)

    yaw_pred = np.empty(n)
    pred_dims = np.empty((n, 3))
    for i in range(n):
        estimate = recover_orientation(psi_hat[i], template)
        # recover_orientation aligns template onto prediction; its yaw is
        # the prediction's yaw directly
        yaw_pred[i] = estimate.yaw
        pred_dims[i] = dims_from_psi(psi_hat[i])
    errors = np.abs(wrap_angle(yaw_pred - data.yaw))

    heights = data.bbox[:, 3] - data.bbox[:, 1]
    pck_means = {}
    for level in pck_levels:
        values = [
            mt.pck(data.phi_g_noisy[i], data.phi_g[i], heights[i], level)
            for i in range(n)
        ]
        pck_means[str(level)] = float(np.mean(values))

    frames = []
    gt_dir = os.path.join(out_dir, "gt")
    pred_dir = os.path.join(out_dir, "preds")
    os.makedirs(gt_dir, exist_ok=True)
    os.makedirs(pred_dir, exist_ok=True)
    by_image = {}
    for i in range(n):
        by_image.setdefault(int(data.image[i]), []).append(i)
    aoe_pairs = []
    for image_id in sorted(by_image):
        members = by_image[image_id]
        gts = []
        preds = []
        for i in members:
            gt = _gt_record(data.dims[i], data.centroid[i], data.yaw[i], data.bbox[i],
                            data.visibility[i])
            gts.append(gt)
            preds.append(_pred_record(gt, tuple(pred_dims[i]), yaw_pred[i]))
            aoe_pairs.append((data.centroid[i][2], gt.occlusion, errors[i]))
        name = f"{image_id:06d}.txt"
        with open(os.path.join(gt_dir, name), "w") as fh:
            fh.write(kitti_io.write_result_file(gts))
        with open(os.path.join(pred_dir, name), "w") as fh:
            fh.write(kitti_io.write_result_file(preds))
        frames.append(mt.EvalFrame(gts=gts, preds=preds))

    summary_rows = mt.summarize(frames, iou_threshold, regimes=("easy", "moderate",
                                                                "hard", "all"))
    mt.write_summary_csv(os.path.join(out_dir, "metrics.csv"), summary_rows)
    bins = mt.aoe_bins(aoe_pairs)
    mt.write_aoe_csv(os.path.join(out_dir, "aoe.csv"), bins)
    aoe_rows = [
        {"depth": f"[{lo:g},{hi:g})", "occlusion": occ, "mean_error_deg":
         float(np.degrees(mean)), "count": count}
        for (lo, hi, occ), (mean, count) in bins.items()
    ]
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(f"samples: {n}\n")
        fh.write(f"median yaw error: {np.degrees(np.median(errors)):.4f} deg\n")
        fh.write(f"mean yaw error: {np.degrees(np.mean(errors)):.4f} deg\n\n")
        fh.write(mt.format_table(summary_rows, ("regime", "ap", "aos")))
        fh.write("\n")
        fh.write(mt.format_table(aoe_rows,
                                 ("depth", "occlusion", "mean_error_deg", "count")))
        fh.write("\npck: ")
        fh.write(" ".join(f"@{k}={v:.4f}" for k, v in pck_means.items()))
        fh.write("\n")
    return {
        "sigma": sigma,
        "n": n,
        "median_yaw_deg": float(np.degrees(np.median(errors))),
        "mean_yaw_deg": float(np.degrees(np.mean(errors))),
        "pck": pck_means,
        "metrics": summary_rows,
    }


def cmd_eval(args):
    config = load_config(args.config)
    _apply_overrides(config, "eval", args, ["seed", "dataset", "checkpoint",
                                            "iou_threshold"])
    if getattr(args, "sigmas", None) is not None:
        try:
            config["eval"]["sigmas"] = [float(s) for s in args.sigmas.split(",")]
        except ValueError:
            raise UserError(f"cannot parse --sigmas value {args.sigmas!r}")
    section = config["eval"]
    if not section["dataset"]:
        raise UserError("eval.dataset (or --dataset) is required")
    if not section["checkpoint"]:
        raise UserError("eval.checkpoint (or --checkpoint) is required")
    if not os.path.isdir(section["dataset"]):
        raise UserError(f"dataset directory not found: {section['dataset']}")
    if not os.path.isfile(section["checkpoint"]):
        raise UserError(f"checkpoint not found: {section['checkpoint']}")
    out = _prepare_out(args.out, args.force)
    _echo_config(out, config)

    model, _, _, _, _ = lf.load_checkpoint(section["checkpoint"])
    manifest = ds.read_manifest(section["dataset"])
    betas = manifest.get("interp_betas", [0.75, 0.25])
    interp = interpolation_matrix(len(betas), betas)

    results = []
    for sigma in section["sigmas"]:
        sigma_dir = os.path.join(out, f"sigma-{sigma:g}")
        os.makedirs(sigma_dir, exist_ok=True)
        result = _eval_one_sigma(
            model, section["dataset"], sigma, section["seed"], interp,
            section["pck_levels"], section["iou_threshold"], sigma_dir,
        )
        results.append(result)
        print(f"sigma={sigma:g}px median_yaw={result['median_yaw_deg']:.3f}deg "
              f"mean_yaw={result['mean_yaw_deg']:.3f}deg")
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump({"results": results}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


# ---- bev ----


def _bev_svg(arrows, span_x, span_z, size, arrow_len):
    def sx(x):
        return (x + span_x) / (2.0 * span_x) * size

    def sy(z):
        return size - z / span_z * size

    colors = {"gt": "#2b6cb0", "pred": "#c0392b"}
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="#ffffff"/>',
    ]
    for row in arrows:
        x0, y0 = sx(row["x"]), sy(row["z"])
        x1 = sx(row["x"] + arrow_len * np.cos(row["yaw"]))
        y1 = sy(row["z"] - arrow_len * np.sin(row["yaw"]))
        color = colors[row["kind"]]
        lines.append(
            f'<circle cx="{x0:.2f}" cy="{y0:.2f}" r="2.5" fill="{color}"/>'
        )
        lines.append(
            f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_bev(args):
    config = load_config(args.config)
    _apply_overrides(config, "bev", args, ["predictions", "ground_truth"])
    section = config["bev"]
    if not section["ground_truth"]:
        raise UserError("bev.ground_truth (or --ground-truth) is required")
    out = _prepare_out(args.out, args.force)
    _echo_config(out, config)

    arrows = []

    def collect(directory, kind):
        if not directory:
            return
        if not os.path.isdir(directory):
            raise UserError(f"directory not found: {directory}")
        for name in sorted(os.listdir(directory)):
            if not name.endswith(".txt"):
                continue
            with open(os.path.join(directory, name)) as fh:
                records = kitti_io.parse_label_file(fh.read())
            for idx, rec in enumerate(records):
                arrows.append(
                    {
                        "frame": name[:-4],
                        "kind": kind,
                        "index": idx,
                        "x": rec.location[0],
                        "z": rec.location[2],
                        "yaw": rec.rotation_y,
                    }
                )

    collect(section["ground_truth"], "gt")
    collect(section["predictions"], "pred")

    svg = _bev_svg(arrows, section["span_x"], section["span_z"], section["size"],
                   section["arrow_len"])
    with open(os.path.join(out, "bev.svg"), "w") as fh:
        fh.write(svg)
    with open(os.path.join(out, "arrows.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "kind", "index", "x", "z", "yaw"])
        for row in arrows:
            writer.writerow([row["frame"], row["kind"], row["index"],
                             repr(row["x"]), repr(row["z"]), repr(row["yaw"])])
    print(f"wrote {len(arrows)} arrows to {out}")
    return 0


# ---- entry point ----


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits 2 by default; usage problems are user errors
        self.print_usage(sys.stderr)
        raise UserError(message)


def build_parser():
    parser = _Parser(prog="cuboidlift", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true",
                       help="replace a non-empty output directory")
        p.add_argument("--seed", type=int, help="root random seed")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--pairs", type=int, help="base cuboid count")
    p.add_argument("--augment", type=int, help="rotation augmentation factor")
    p.add_argument("--unlabeled", type=int, help="unlabeled pool size")
    p.add_argument("--so3-tilt", type=float, dest="so3_tilt",
                   help="pitch/roll range for augmented re-renders (radians)")
    p.add_argument("--shard-size", type=int, dest="shard_size")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the lifting network")
    common(p)
    p.add_argument("--dataset", help="generated dataset directory")
    p.add_argument("--mode", choices=["plain", "mixed"])
    p.add_argument("--cr", choices=["auto", "on", "off"],
                   help="cross-ratio monitor: auto follows the mode")
    p.add_argument("--noise-sigma-px", type=float, dest="noise_sigma_px")
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint end to end")
    common(p)
    p.add_argument("--dataset", help="held-out dataset directory")
    p.add_argument("--checkpoint")
    p.add_argument("--sigmas", help="comma-separated keypoint noise levels in px")
    p.add_argument("--iou-threshold", type=float, dest="iou_threshold")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bev", help="bird's-eye-view figure from label files")
    common(p)
    p.add_argument("--predictions", help="directory of predicted label files")
    p.add_argument("--ground-truth", dest="ground_truth",
                   help="directory of ground-truth label files")
    p.set_defaults(func=cmd_bev)
    return parser


def main(argv=None):
    level = os.environ.get("CUBOIDLIFT_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (kitti_io.LabelFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        import traceback

        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
