"""Command-line entry point: ``alien synth|train|infer|eval|render|resample``.

Settings come from an optional config file of ``section.key = value`` lines;
command-line flags override them. Exit codes: 0 success, 2 invalid
configuration or bad weights, 3 I/O failure, 4 diverged training.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .codec import FEATURES
from .errors import AlienError, BadMagicError, DivergedError, FormatError, ShapeMismatchError, TruncatedFileError
from .evaluation import evaluate, format_report, threshold_sweep
from .fileio import atomic_write_text, read_ppm, read_truth, write_ppm, write_truth
from .geometry import build_layout, cells_covering
from .inference import (
    InferenceConfig,
    default_parallelism,
    infer_image,
    raw_output_count,
    read_detections,
    write_detections,
)
from .loss import LossWeights
from .model import load_weights, save_weights, build_alien, alien_arch
from .synth import ChipPolicy, SceneSpec, SceneTruth, generate_scene, hsv_to_rgb, sample_chips
from .train import TrainConfig, train

log = logging.getLogger("alien")

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 2, 3, 4
SEGMENT_HALF_LENGTH = 15.0
OVERLAY_HEADER = "x y x1 y1 x2 y2 r g b"


class ConfigError(AlienError):
    pass


# ---------------------------------------------------------------- config


def read_config(path: Optional[str]) -> dict[str, str]:
    if not path:
        return {}
    cfg = {}
    for no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{path}:{no}: key '{key}' lacks a section")
        cfg[key] = value
    return cfg


def _merge(cfg: dict[str, str], overrides: dict[str, object]) -> dict[str, str]:
    out = dict(cfg)
    for k, v in overrides.items():
        if v is not None:
            out[k] = str(v)
    return out


def _echo(cfg: dict[str, str]) -> None:
    for k in sorted(cfg):
        log.info("config %s = %s", k, cfg[k])


def _get(cfg, key, cast, default):
    if key not in cfg:
        return default
    try:
        if cast is bool:
            return cfg[key].lower() in ("1", "true", "yes", "on")
        return cast(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def scene_spec_from(cfg) -> SceneSpec:
    d = SceneSpec()
    try:
        return SceneSpec(
            width=_get(cfg, "scene.width", int, d.width),
            height=_get(cfg, "scene.height", int, d.height),
            target_count=_get(cfg, "scene.target_count", int, d.target_count),
            target_length=_get(cfg, "scene.target_length", float, d.target_length),
            target_width=_get(cfg, "scene.target_width", float, d.target_width),
            background_level=_get(cfg, "scene.background_level", float, d.background_level),
            noise_amplitude=_get(cfg, "scene.noise_amplitude", float, d.noise_amplitude),
            min_separation=_get(cfg, "scene.min_separation", float, d.min_separation),
            margin=_get(cfg, "scene.margin", float, d.margin),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# Tiny single-batch run that must drive its loss well below the start.
OVERFIT_PRESET = {
    "train.epochs": "60",
    "train.batch_size": "8",
    "train.learning_rate": "0.001",
    "chips.per_scene": "8",
    "chips.max_scenes": "1",
    "model.width": "0.5",
}


def train_config_from(cfg) -> TrainConfig:
    d = TrainConfig()
    lambdas = cfg.get("train.lambda")
    weights = d.weights
    try:
        if lambdas:
            vals = tuple(float(v) for v in lambdas.replace(",", " ").split())
            if len(vals) == 1:
                vals = vals * len(FEATURES)
            if len(vals) != len(FEATURES):
                raise ConfigError(f"train.lambda needs 1 or {len(FEATURES)} values")
            weights = LossWeights(vals)
        return TrainConfig(
            epochs=_get(cfg, "train.epochs", int, d.epochs),
            batch_size=_get(cfg, "train.batch_size", int, d.batch_size),
            learning_rate=_get(cfg, "train.learning_rate", float, d.learning_rate),
            weights=weights,
            seed=_get(cfg, "train.seed", int, d.seed),
            checkpoint_interval=_get(cfg, "train.checkpoint_interval", int, d.checkpoint_interval),
            augment=_get(cfg, "train.augment", bool, d.augment),
            lr_decay_epoch=_get(cfg, "train.lr_decay_epoch", int, d.lr_decay_epoch),
            lr_decay_factor=_get(cfg, "train.lr_decay_factor", float, d.lr_decay_factor),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def inference_config_from(cfg) -> InferenceConfig:
    d = InferenceConfig()
    try:
        return InferenceConfig(
            threshold=_get(cfg, "infer.threshold", float, d.threshold),
            merge_radius=_get(cfg, "infer.merge_radius", float, d.merge_radius),
            tile_parallelism=_get(cfg, "infer.tile_parallelism", int, default_parallelism()),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence((seed, index)).generate_state(1)[0])


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = _merge(read_config(args.spec), {"synth.seed": args.seed, "synth.count": args.count})
    _echo(cfg)
    spec = scene_spec_from(cfg)
    seed = _get(cfg, "synth.seed", int, 0)
    count = _get(cfg, "synth.count", int, 1)
    if count < 0:
        raise ConfigError("count must be >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        img, truth = generate_scene(spec, scene_seed(seed, i))
        stem = out / f"scene_{i:04d}"
        write_ppm(stem.with_suffix(".ppm"), img)
        write_truth(stem.with_suffix(".truth"), truth.targets)
        print(f"{stem.name}: {spec.width}x{spec.height}, {len(truth.targets)} targets")
    return 0


def _scene_pairs(data: Path) -> list[tuple[Path, Path]]:
    if not data.is_dir():
        raise FileNotFoundError(f"data directory {data} not found")
    pairs = []
    for ppm in sorted(data.glob("*.ppm")):
        t = ppm.with_suffix(".truth")
        if t.exists():
            pairs.append((ppm, t))
    if not pairs:
        raise FileNotFoundError(f"no scene/truth pairs in {data}")
    return pairs


def cmd_train(args) -> int:
    base = dict(OVERFIT_PRESET) if args.preset == "overfit" else {}
    base.update(read_config(args.config))
    cfg = _merge(
        base,
        {
            "train.epochs": args.epochs,
            "train.seed": args.seed,
            "train.batch_size": args.batch_size,
            "train.learning_rate": args.lr,
            "model.width": args.width,
            "chips.per_scene": args.chips_per_scene,
        },
    )
    _echo(cfg)
    tcfg = train_config_from(cfg)
    width = _get(cfg, "model.width", float, 1.0)
    if width <= 0:
        raise ConfigError("model.width must be positive")
    per_scene = _get(cfg, "chips.per_scene", int, 500)
    max_scenes = _get(cfg, "chips.max_scenes", int, 0)
    policy = ChipPolicy(per_scene, _get(cfg, "chips.positive_fraction", float, 0.5))
    out = Path(args.out)
    history_path = Path(args.history) if args.history else Path(str(out) + ".history")
    if tcfg.checkpoint_interval:
        tcfg = replace(tcfg, checkpoint_path=str(out) + ".ckpt")
    layout = build_layout()
    pairs = _scene_pairs(Path(args.data))
    if max_scenes:
        pairs = pairs[:max_scenes]
    dataset = []
    for i, (ppm, tr) in enumerate(pairs):
        img = read_ppm(ppm)
        truth = SceneTruth(read_truth(tr), img.shape[1], img.shape[0])
        dataset += sample_chips(img, truth, layout, policy, seed=scene_seed(tcfg.seed, i))
    log.info("%d chips from %d scenes", len(dataset), len(pairs))
    arch = alien_arch(width)
    if tcfg.epochs == 0 or not dataset:
        model, history_text = build_alien(tcfg.seed, arch), "epoch loss " + " ".join(FEATURES) + " seconds\n"
    else:
        model, history = train(dataset, tcfg, arch=arch, layout=layout)
        history_text = history.format(FEATURES)
    save_weights(model, out)
    atomic_write_text(history_path, history_text)
    print(f"wrote {out} ({model.param_count()} parameters) and {history_path}")
    return 0


def cmd_infer(args) -> int:
    cfg = _merge(
        read_config(args.config),
        {"infer.threshold": args.threshold, "infer.merge_radius": args.merge_radius},
    )
    _echo(cfg)
    icfg = inference_config_from(cfg)
    model = load_weights(args.weights)
    image = read_ppm(args.image)
    layout = build_layout()
    h, w = image.shape[:2]
    n_cells = len(cells_covering(w, h, layout))
    dets = infer_image(model, image, layout, icfg)
    write_detections(args.out, dets)
    print(f"cells: {n_cells}")
    print(f"raw outputs: {raw_output_count(w, h, layout)}")
    print(f"detections: {len(dets)}")
    return 0


def cmd_eval(args) -> int:
    dets = read_detections(args.detections)
    truth = read_truth(args.truth)
    report = evaluate(dets, truth, args.radius, args.fold_orientation)
    sys.stdout.write(format_report(report))
    if args.sweep:
        ths = [float(t) for t in args.sweep.split(",")]
        print()
        print("threshold\ttp\tfp\tfn")
        for th, tp, fp, fn in threshold_sweep(dets, truth, ths, args.radius):
            print(f"{th:.4f}\t{tp}\t{fp}\t{fn}")
    return 0


def overlay_records(dets) -> list[tuple]:
    rows = []
    for d in dets:
        t = math.radians(d.orientation)
        hx, hy = SEGMENT_HALF_LENGTH * math.sin(t), -SEGMENT_HALF_LENGTH * math.cos(t)
        r, g, b = (int(round(255 * c)) for c in hsv_to_rgb(d.hue, min(max(d.saturation, 0), 1), min(max(d.value, 0), 1)))
        rows.append((d.x, d.y, d.x + hx, d.y + hy, d.x - hx, d.y - hy, r, g, b))
    return rows


def format_overlay(rows) -> str:
    lines = [OVERLAY_HEADER]
    for x, y, x1, y1, x2, y2, r, g, b in rows:
        lines.append(f"{x:.4f} {y:.4f} {x1:.4f} {y1:.4f} {x2:.4f} {y2:.4f} {r} {g} {b}")
    return "\n".join(lines) + "\n"


def rasterize_overlay(image: np.ndarray, rows) -> np.ndarray:
    out = image.copy()
    h, w = out.shape[:2]
    for x, y, x1, y1, x2, y2, r, g, b in rows:
        n = int(2 * SEGMENT_HALF_LENGTH) + 1
        for s in np.linspace(0.0, 1.0, n):
            px, py = int(round(x1 + (x2 - x1) * s)), int(round(y1 + (y2 - y1) * s))
            if 0 <= px < w and 0 <= py < h:
                out[py, px] = (r, g, b)
        cx, cy = int(round(x)), int(round(y))
        out[max(cy - 1, 0) : cy + 2, max(cx - 1, 0) : cx + 2] = (255, 0, 0)
    return out


def cmd_render(args) -> int:
    image = read_ppm(args.image)
    rows = overlay_records(read_detections(args.detections))
    atomic_write_text(args.out, format_overlay(rows))
    if args.raster:
        write_ppm(args.raster, rasterize_overlay(image, rows))
    print(f"overlay records: {len(rows)}")
    return 0


def resample_image(image: np.ndarray, scale: float) -> np.ndarray:
    """Bilinear resampling of an 8-bit RGB raster by ``scale``."""
    if scale <= 0:
        raise ConfigError("scale must be positive")
    h, w = image.shape[:2]
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (nh, nw) == (h, w):
        return image.copy()
    out = ndimage.zoom(image.astype(np.float64), (nh / h, nw / w, 1), order=1, mode="nearest", grid_mode=True)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def cmd_resample(args) -> int:
    image = read_ppm(args.image)
    out = resample_image(image, args.scale)
    write_ppm(args.out, out)
    print(f"{image.shape[1]}x{image.shape[0]} -> {out.shape[1]}x{out.shape[0]}")
    return 0


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="alien", description="Small-object detection on overhead imagery.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress and the effective config")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes with truth files")
    p.add_argument("--spec", help="config file with scene.* keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train weights on a directory of scenes")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="history log path (default: <out>.history)")
    p.add_argument("--preset", choices=["overfit"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--width", type=float, help="channel-width multiplier for the detector stack")
    p.add_argument("--chips-per-scene", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run trained weights over an image")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--threshold", type=float)
    p.add_argument("--merge-radius", type=float)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--radius", type=float, default=8.0)
    p.add_argument("--fold-orientation", action="store_true", help="compare orientations mod 180")
    p.add_argument("--sweep", help="comma-separated thresholds for a TP/FP/FN sweep")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="emit overlay plot data for detections")
    p.add_argument("--image", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--raster", help="also draw the overlay onto a copy of the image (PPM)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("resample", help="bilinear rescale of a PPM image")
    p.add_argument("--image", required=True)
    p.add_argument("--scale", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_resample)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (BadMagicError, TruncatedFileError, ShapeMismatchError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (AlienError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
