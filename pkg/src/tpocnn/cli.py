"""Batch command line front end.

Subcommands: train, eval, map, sweep, extract, gradcheck. Runs are driven by
``key = value`` config files (paths resolve relative to the config file);
every artifact carries the config hash so results can be audited afterwards.
Exit codes: 0 success, 2 configuration/validation failure, 3 numerical
failure during training.
"""

import argparse
import colorsys
import hashlib
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .checks import run_suite
from .data import (
    apply_descriptor,
    compute_band_stats,
    ensure_same_grid,
    load_cube,
    load_descriptor,
    load_labels,
    load_split,
    make_split,
    normalize,
)
from .errors import ConfigError, TpoError, TrainingAbort
from .layers import load_checkpoint, save_checkpoint
from .models import ModelSpec, TpoCnn
from .sampler import SamplerConfig, build_dataset
from .training import (
    TrainConfig,
    average_accuracy,
    confusion_to_csv,
    evaluate,
    kappa,
    loss_trace_to_csv,
    overall_accuracy,
    per_class_accuracy,
    predict_scene,
    report_to_text,
    train,
)

SWEEP_AXES = ("patch_size", "r_value", "samples_per_class", "views")


@dataclass
class RunConfig:
    cube: Path
    labels: Path
    output_dir: Path
    descriptor: Path = None
    split: Path = None
    palette: Path = None
    variant: str = "tpo_cnn2"
    patch_size: int = 5
    views: int = 9
    border_mode: str = "mirror"
    p: int = 8
    q: int = 16
    r: int = 32
    branch_channels: int = 32
    epochs: int = 200
    batch_size: int = 512
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    per_class: int = 200
    seed: int = 0
    early_stop: bool = False
    sweep_axis: str = None
    sweep_values: tuple = None

    _PATHS = ("cube", "labels", "output_dir", "descriptor", "split", "palette")
    _INTS = ("patch_size", "views", "p", "q", "r", "branch_channels", "epochs",
             "batch_size", "per_class", "seed")
    _FLOATS = ("learning_rate", "weight_decay")

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        base = path.parent
        known = {f.name for f in fields(cls)}
        raw = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (s.strip() for s in line.split("=", 1))
                if key not in known:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                raw[key] = value
        for required in ("cube", "labels", "output_dir"):
            if required not in raw:
                raise ConfigError(f"{path}: missing required key {required!r}")

        kwargs = {}
        try:
            for key, value in raw.items():
                if key in cls._PATHS:
                    kwargs[key] = (base / value).resolve()
                elif key in cls._INTS:
                    kwargs[key] = int(value)
                elif key in cls._FLOATS:
                    kwargs[key] = float(value)
                elif key == "early_stop":
                    kwargs[key] = value.lower() in ("1", "true", "yes")
                elif key == "sweep_values":
                    kwargs[key] = tuple(int(v.strip()) for v in value.split(","))
                else:
                    kwargs[key] = value
        except ValueError as e:
            raise ConfigError(f"{path}: {e}") from e
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self):
        for name in ("cube", "labels", "descriptor", "split", "palette"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name} file {p} does not exist")
        if self.variant not in ("tpo_cnn1", "tpo_cnn2"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.sweep_axis is not None and self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep_axis must be one of {SWEEP_AXES}")
        if self.border_mode not in ("mirror", "zero"):
            raise ConfigError(f"border_mode must be mirror or zero, got {self.border_mode!r}")

    def config_hash(self):
        """Hash of every experiment-defining key, sorted, so key order in the
        file never matters. Output location and palette are excluded."""
        skip = {"output_dir", "palette"}
        parts = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name in skip:
                continue
            value = getattr(self, f.name)
            parts.append(f"{f.name}={value}")
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# palette and image output
# ---------------------------------------------------------------------------

def default_palette(class_count):
    """class id -> RGB; 0 is black, classes take maximally spaced hues."""
    steps = max(class_count, 16)
    palette = {0: (0, 0, 0)}
    for cls in range(1, class_count + 1):
        hue = (cls - 1) / steps
        r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
        palette[cls] = (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))
    colors = list(palette.values())
    if len(set(colors)) != len(colors):
        raise ConfigError("palette collision; supply an explicit palette file")
    return palette


def load_palette(path):
    """Palette file: one 'class r g b' per line, '#' comments allowed."""
    palette = {0: (0, 0, 0)}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ConfigError(f"{path}:{lineno}: expected 'class r g b'")
            cls, r, g, b = (int(x) for x in parts)
            palette[cls] = (r, g, b)
    return palette


def write_ppm(path, rgb, comment=None):
    """Binary PPM (P6); `rgb` is an H×W×3 uint8 array."""
    h, w, _ = rgb.shape
    header = b"P6\n"
    if comment:
        header += b"# " + comment.encode() + b"\n"
    header += f"{w} {h}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def render_class_map(class_map, palette):
    h, w = class_map.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    for cls, color in palette.items():
        rgb[class_map == cls] = color
    missing = set(np.unique(class_map)) - set(palette)
    if missing:
        raise ConfigError(f"palette has no colors for classes {sorted(missing)}")
    return rgb


# ---------------------------------------------------------------------------
# shared pipeline assembly
# ---------------------------------------------------------------------------

def load_scene(cfg):
    """Load cube + labels, apply the descriptor, normalize, draw the split."""
    cube = load_cube(cfg.cube)
    labels = load_labels(cfg.labels)
    ensure_same_grid(cube, labels)
    if cfg.descriptor is not None:
        cube, labels = apply_descriptor(cube, labels, load_descriptor(cfg.descriptor))
    stats = compute_band_stats(cube)
    normed = normalize(cube, stats)
    if cfg.split is not None:
        split = load_split(cfg.split, per_class_count=cfg.per_class, rng_seed=cfg.seed)
    else:
        split = make_split(labels, cfg.per_class, cfg.seed)
    class_count = len(labels.class_ids())
    return normed, labels, split, class_count


def model_from_config(cfg, bands, class_count):
    spec = ModelSpec(variant=cfg.variant, p=cfg.p, q=cfg.q, r=cfg.r,
                     input_bands=bands, patch_size=cfg.patch_size,
                     class_count=class_count, views=cfg.views,
                     branch_channels=cfg.branch_channels)
    return TpoCnn(spec)


def sampler_from_config(cfg):
    return SamplerConfig(patch_size=cfg.patch_size, border_mode=cfg.border_mode,
                         views=cfg.views)


def _train_once(cfg):
    normed, labels, split, class_count = load_scene(cfg)
    scfg = sampler_from_config(cfg)
    train_ds = build_dataset(normed, labels, split, scfg, part="train")
    test_ds = build_dataset(normed, labels, split, scfg, part="test")
    model = model_from_config(cfg, normed.bands, class_count)
    model.init_params(cfg.seed)
    tc = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                     learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
                     seed=cfg.seed, early_stop=cfg.early_stop)
    report = train(model, train_ds, tc, eval_dataset=test_ds)
    report.config_hash = cfg.config_hash()
    return model, report


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(cfg):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model, report = _train_once(cfg)
    except TrainingAbort as e:
        if e.last_good_state is not None:
            save_checkpoint(out / "model.last_good.tpow", e.last_good_state)
        raise
    save_checkpoint(out / "model.tpow", model.state_items())
    (out / "model.tpow.meta").write_text(f"config_hash = {report.config_hash}\n")
    (out / "report.txt").write_text(report_to_text(report))
    (out / "confusion.csv").write_text(f"# config_hash = {report.config_hash}\n"
                                       + confusion_to_csv(report.confusion))
    (out / "loss_trace.csv").write_text(f"# config_hash = {report.config_hash}\n"
                                        + loss_trace_to_csv(report.loss_trace))
    print(f"trained: OA={report.oa:.2f} AA={report.aa:.2f} kappa={report.kappa_score:.4f} "
          f"({report.wall_clock:.1f}s, hash {report.config_hash})")
    return 0


def _load_model(cfg, weights, bands, class_count):
    model = model_from_config(cfg, bands, class_count)
    model.load_state_items(load_checkpoint(weights))
    return model


def cmd_eval(cfg, weights):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    normed, labels, split, class_count = load_scene(cfg)
    model = _load_model(cfg, weights, normed.bands, class_count)
    test_ds = build_dataset(normed, labels, split, sampler_from_config(cfg), part="test")
    cm = evaluate(model, test_ds, batch_size=cfg.batch_size)
    chash = cfg.config_hash()
    lines = [
        f"config_hash = {chash}",
        f"seed = {cfg.seed}",
        f"oa = {overall_accuracy(cm):.6f}",
        f"aa = {average_accuracy(cm):.6f}",
        f"kappa = {kappa(cm):.6f}",
    ]
    for i, acc in enumerate(per_class_accuracy(cm), 1):
        value = "nan" if np.isnan(acc) else f"{acc:.6f}"
        lines.append(f"class_{i}_accuracy = {value}")
    (out / "eval_report.txt").write_text("\n".join(lines) + "\n")
    (out / "eval_confusion.csv").write_text(f"# config_hash = {chash}\n" + confusion_to_csv(cm))
    print(f"evaluated: OA={overall_accuracy(cm):.2f} (hash {chash})")
    return 0


def cmd_map(cfg, weights, output):
    normed, labels, _, class_count = load_scene(cfg)
    model = _load_model(cfg, weights, normed.bands, class_count)
    predictions = predict_scene(model, normed, sampler_from_config(cfg),
                                batch_size=cfg.batch_size)
    palette = load_palette(cfg.palette) if cfg.palette else default_palette(class_count)
    rgb = render_class_map(predictions, palette)
    write_ppm(output, rgb, comment=f"config_hash {cfg.config_hash()}")
    print(f"map written to {output}")
    return 0


def _sweep_cell(cfg, axis, value):
    cell = RunConfig(**{f.name: getattr(cfg, f.name) for f in fields(RunConfig)})
    if axis == "patch_size":
        cell.patch_size = value
    elif axis == "r_value":
        cell.r = value
    elif axis == "samples_per_class":
        cell.per_class = value
    elif axis == "views":
        cell.views = value
    cell.sweep_axis = None
    cell.sweep_values = None
    return cell


def cmd_sweep(cfg):
    if cfg.sweep_axis is None or not cfg.sweep_values:
        raise ConfigError("sweep needs sweep_axis and sweep_values in the config")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    def run_cell(value):
        cell = _sweep_cell(cfg, cfg.sweep_axis, value)
        try:
            _, report = _train_once(cell)
            return (value, f"{report.oa:.4f}", f"{report.aa:.4f}",
                    f"{report.kappa_score:.6f}", "")
        except TpoError as e:
            return (value, "", "", "", str(e).replace(",", ";"))

    workers = _sweep_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, cfg.sweep_values))
    else:
        rows = [run_cell(v) for v in cfg.sweep_values]

    lines = [f"# config_hash = {cfg.config_hash()}",
             f"{cfg.sweep_axis},oa,aa,kappa,error"]
    lines += [",".join(str(x) for x in row) for row in rows]
    path = out / f"sweep_{cfg.sweep_axis}.csv"
    path.write_text("\n".join(lines) + "\n")
    print(f"sweep written to {path}")
    return 0


def _sweep_workers():
    try:
        return max(1, int(os.environ.get("TPO_THREADS", "")))
    except ValueError:
        return 1


def cmd_extract(cfg, output):
    normed, labels, split, _ = load_scene(cfg)
    scfg = sampler_from_config(cfg)
    dataset = build_dataset(normed, labels, split, scfg, part="all")
    v, d, k, _ = dataset.sample_shape
    header = (f"count={len(dataset)} views={v} bands={d} patch={k} "
              f"config_hash={cfg.config_hash()}\n")
    with open(output, "wb") as fh:
        fh.write(header.encode())
        for sample in dataset:
            fh.write(np.ascontiguousarray(sample.views, dtype="<f4").tobytes())
    print(f"{len(dataset)} samples written to {output}")
    return 0


def cmd_gradcheck():
    ok, _, _ = run_suite(verbose=True)
    return 0 if ok else 3


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="tpo",
                                     description="Hyperspectral classification workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("-c", "--config", required=True, help="run config file")

    p_train = sub.add_parser("train", help="train a model and write artifacts")
    add_config(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    add_config(p_eval)
    p_eval.add_argument("-w", "--weights", required=True, help="checkpoint (.tpow)")

    p_map = sub.add_parser("map", help="render a full-scene thematic map")
    add_config(p_map)
    p_map.add_argument("-w", "--weights", required=True)
    p_map.add_argument("-o", "--output", required=True, help="output PPM path")

    p_sweep = sub.add_parser("sweep", help="train/eval across one hyperparameter axis")
    add_config(p_sweep)

    p_extract = sub.add_parser("extract", help="dump view stacks for inspection")
    add_config(p_extract)
    p_extract.add_argument("-o", "--output", required=True)

    sub.add_parser("gradcheck", help="run the full gradient-check suite")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck()
        cfg = RunConfig.from_file(args.config)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, Path(args.weights))
        if args.command == "map":
            return cmd_map(cfg, Path(args.weights), Path(args.output))
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "extract":
            return cmd_extract(cfg, Path(args.output))
        raise ConfigError(f"unknown command {args.command!r}")
    except TrainingAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except FloatingPointError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3
    except (TpoError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
