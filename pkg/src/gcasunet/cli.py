"""Command-line interface.

Subcommands: ``synth``, ``train``, ``eval``, ``infer``, ``ablation``,
``check`` and ``replay``. Option values resolve as defaults < ``--config``
file (flat ``key = value`` lines) < command-line flags; the resolved values
are written to ``manifest.json`` next to every output so ``replay`` can
reproduce it.

Exit codes: 0 ok, 1 check failure, 2 usage/config, 3 I/O, 4 numeric failure,
5 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_model, save_checkpoint
from .checks import GRAD_BLOCKS, run_checks
from .data import (
    AnnotationParseError, DataError, MissingImageError, SynthSpec, load_dataset, resize_image, stack_dataset,
    synth_generate, write_dataset,
)
from .model import TOGGLES, ConfigError, ModelConfig, build_model
from .pnm import PNMError, read_ppm, write_pgm_density
from .training import (
    ABLATION_VARIANTS, NonFiniteGradientError, NonFiniteLossError, TrainConfig,
    evaluate, predict_density, run_ablation, train, write_ablation_csv, write_log_csv,
)

logger = logging.getLogger("gcasunet")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# typed options


def _range(text: str):
    parts = str(text).split(":")
    if len(parts) != 2:
        raise ValueError(f"expected MIN:MAX, got {text!r}")
    lo, hi = (float(p) for p in parts)
    if lo > hi:
        raise ValueError(f"range {text!r}: min exceeds max")
    return lo, hi


def _int_range(text: str):
    lo, hi = _range(text)
    if lo != int(lo) or hi != int(hi):
        raise ValueError(f"range {text!r} must be integral")
    return int(lo), int(hi)


def _ints(text: str):
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).lower()
    if v not in ("true", "false", "on", "off", "1", "0", "yes", "no"):
        raise ValueError(f"expected a boolean, got {text!r}")
    return v in ("true", "on", "1", "yes")


def _toggles(values) -> Dict[str, bool]:
    if isinstance(values, dict):
        return {k: bool(v) for k, v in values.items()}
    if isinstance(values, str):
        values = [v for v in values.replace(",", " ").split() if v]
    out = {}
    for item in values or []:
        name, _, state = item.partition("=")
        if name not in TOGGLES:
            raise ValueError(f"unknown toggle {name!r}; expected one of {TOGGLES}")
        out[name] = _bool(state)
    return out


# name -> (parser, default, help)
MODEL_OPTS = {
    "stages": (int, 2, "encoder/decoder stages"),
    "patch_size": (int, 4, "patch size in pixels"),
    "embed_dim": (int, 32, "token width of the first stage"),
    "window_size": (int, 4, "attention window side in tokens"),
    "heads": (_ints, (2, 4), "heads per stage, comma separated"),
    "depths": (_ints, (2, 2), "Swin blocks per stage, comma separated"),
    "bottleneck_heads": (int, 8, "attention heads in the bottleneck"),
    "mask_scale": (str, "rescaled", "GCAM mask scaling: rescaled or literal"),
    "input_size": (int, 64, "model input side in pixels"),
    "toggle": (_toggles, {}, "module switch such as gcam=off (repeatable)"),
}
TRAIN_OPTS = {
    "lr": (float, 0.003, "peak learning rate"),
    "decay_rate": (float, 0.95, "per-epoch lr decay after warm-up"),
    "decay_mode": (str, "lr", "how decay_rate is used: lr or weight_decay"),
    "weight_decay": (float, 0.01, "AdamW decoupled weight decay"),
    "batch_size": (int, 8, "batch size"),
    "warmup": (int, None, "warm-up epochs (default min(5, epochs-1))"),
    "epochs": (int, 30, "training epochs"),
    "loss_scale": (float, 1000.0, "multiplier on the pixel MSE"),
    "grad_clip": (float, 1.0, "global gradient-norm clip"),
    "sigma": (float, 2.0, "density kernel width in pixels"),
    "flip_augment": (_bool, True, "random horizontal/vertical flips"),
    "seed": (int, 0, "seed for initialisation and data order"),
}
SYNTH_OPTS = {
    "n": (int, 100, "number of images"),
    "size": (int, 64, "image side in pixels"),
    "count": (_int_range, (1, 20), "objects per image MIN:MAX"),
    "radius": (_range, (2.0, 3.5), "object radius MIN:MAX in pixels"),
    "distractors": (_int_range, (0, 5), "distractor shapes MIN:MAX"),
    "noise": (float, 0.05, "background noise std"),
    "seed": (int, 0, "dataset seed"),
    "start": (int, 0, "index of the first image"),
}
SPLIT_OPTS = {
    "val_fraction": (float, 0.2, "trailing fraction of --data held out for validation"),
}


def _add_opts(p: argparse.ArgumentParser, opts: Dict[str, tuple]) -> None:
    for name, (_, default, help_) in opts.items():
        flag = "--" + name.replace("_", "-")
        if name == "toggle":
            p.add_argument(flag, action="append", default=None, metavar="NAME=on|off", help=help_)
        else:
            p.add_argument(flag, default=None, help=f"{help_} (default: {default})")


def read_config_file(path: Optional[str]) -> Dict[str, str]:
    if not path:
        return {}
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        values[k.replace("-", "_")] = v
    return values


def resolve(ns: argparse.Namespace, opts: Dict[str, tuple], file_values: Dict[str, str]) -> Dict[str, object]:
    """Merge defaults < config file < flags into typed values."""
    out = {}
    for name, (parse, default, _) in opts.items():
        raw = getattr(ns, name, None)
        try:
            if raw is not None:
                out[name] = parse(raw)
            elif name in file_values:
                out[name] = parse(file_values[name])
            else:
                out[name] = default
        except (ValueError, TypeError) as exc:
            raise UsageError(f"--{name.replace('_', '-')}: {exc}") from None
    return out


def model_config_from(o: Dict[str, object]) -> ModelConfig:
    toggles = {t: True for t in TOGGLES}
    toggles.update(o["toggle"])
    return ModelConfig(
        stages=o["stages"], patch_size=o["patch_size"], embed_dim=o["embed_dim"],
        window_size=o["window_size"], heads_per_stage=o["heads"], depths_per_stage=o["depths"],
        bottleneck_heads=o["bottleneck_heads"], mask_scale_mode=o["mask_scale"],
        input_size=o["input_size"], **toggles,
    )


def train_config_from(o: Dict[str, object]) -> TrainConfig:
    epochs = o["epochs"]
    warm = o["warmup"] if o["warmup"] is not None else min(5, max(epochs - 1, 0))
    return TrainConfig(
        lr=o["lr"], decay_rate=o["decay_rate"], decay_mode=o["decay_mode"],
        weight_decay=o["weight_decay"], batch_size=o["batch_size"], warmup_epochs=warm,
        total_epochs=epochs, seed=o["seed"], loss_scale=o["loss_scale"], grad_clip=o["grad_clip"],
        sigma=o["sigma"], flip_augment=o["flip_augment"],
    )


def synth_spec_from(o: Dict[str, object]) -> SynthSpec:
    return SynthSpec(
        image_size=o["size"], count_range=o["count"], object_radius_range=o["radius"],
        distractor_count_range=o["distractors"], background_noise=o["noise"], seed=o["seed"],
    )


# ---------------------------------------------------------------------------
# manifests


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, Path):
        return str(v)
    return v


def write_manifest(out: Path, command: str, options: Dict[str, object], started: str,
                   outputs: Sequence[str], **configs) -> Path:
    manifest = {
        "tool": "gcasunet",
        "version": __version__,
        "command": command,
        "options": _jsonable(options),
        "seed": options.get("seed"),
        "started": started,
        "finished": _now(),
        "outputs": list(outputs),
    }
    manifest.update({k: _jsonable(asdict(v)) for k, v in configs.items() if v is not None})
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# commands; each takes fully resolved options


def split_records(records, val_fraction: float):
    if not 0.0 <= val_fraction < 1.0:
        raise UsageError("--val-fraction must lie in [0, 1)")
    n_val = int(round(len(records) * val_fraction))
    return records[: len(records) - n_val], records[len(records) - n_val:]


def _load_split(data: str, split: str, val_fraction: float, input_size: int):
    records = load_dataset(data, input_size)
    train_recs, val_recs = split_records(records, val_fraction)
    return {"all": records, "train": train_recs, "val": val_recs}[split]


def do_synth(o: Dict[str, object]) -> int:
    started = _now()
    spec = synth_spec_from(o)
    if o["n"] < 0:
        raise UsageError("--n must be >= 0")
    out = Path(o["out"])
    records = synth_generate(spec, o["n"], start=o["start"])
    write_dataset(out, records)
    write_manifest(out, "synth", o, started, [r.name for r in records] + ["annotations.txt"], synth_spec=spec)
    print(f"wrote {len(records)} images to {out}")
    return EXIT_OK


def do_train(o: Dict[str, object]) -> int:
    started = _now()
    cfg = model_config_from(o)
    tc = train_config_from(o)
    out = Path(o["out"])
    train_recs, val_recs = split_records(load_dataset(o["data"], cfg.input_size), o["val_fraction"])
    if not train_recs:
        raise UsageError("training split is empty")
    images, dens, _ = stack_dataset(train_recs, tc.sigma)
    val = None
    if val_recs:
        vi, _, vc = stack_dataset(val_recs, tc.sigma)
        val = (vi, vc)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, seed=tc.seed)
    history = train(model, images, dens, tc, val=val,
                    on_epoch=lambda h: print(f"epoch {h.epoch} lr={h.lr:.4g} loss={h.train_loss:.5g} "
                                             f"val_mae={h.val_mae:.4f} val_rmse={h.val_rmse:.4f}"))
    save_checkpoint(model, cfg, out / "checkpoint.bin")
    write_log_csv(out / "train_log.csv", history)
    write_manifest(out, "train", o, started, ["checkpoint.bin", "train_log.csv"], model_config=cfg, train_config=tc)
    if history:
        print(f"final val_mae={history[-1].val_mae!r}")
    return EXIT_OK


def do_eval(o: Dict[str, object]) -> int:
    started = _now()
    model = load_model(o["checkpoint"])
    recs = _load_split(o["data"], o["split"], o["val_fraction"], model.cfg.input_size)
    if not recs:
        raise UsageError("dataset split is empty")
    images, _, counts = stack_dataset(recs)
    report = evaluate(model, images, counts, ids=[r.name for r in recs])
    outputs = []
    if o.get("out"):
        out = Path(o["out"])
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "eval.csv")
        write_manifest(out, "eval", o, started, ["eval.csv"], model_config=model.cfg)
        outputs.append("eval.csv")
    print(report.summary())
    return EXIT_OK


def _image_paths(spec: Sequence[str]) -> List[Path]:
    paths = []
    for s in spec:
        p = Path(s)
        if p.is_dir():
            paths += sorted(p.glob("*.ppm"))
        elif p.is_file():
            paths.append(p)
        else:
            raise MissingImageError(f"image {s!r} not found")
    return paths


def do_infer(o: Dict[str, object]) -> int:
    started = _now()
    model = load_model(o["checkpoint"])
    size = model.cfg.input_size
    paths = _image_paths(o["images"])
    if not paths:
        raise UsageError("no images given")
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    images = []
    for p in paths:
        px = read_ppm(p)
        images.append(px if px.shape[:2] == (size, size) else resize_image(px, size))
    maps = predict_density(model, np.stack(images)).astype(np.float64)
    outputs = ["counts.csv"]
    with open(out / "counts.csv", "w", encoding="utf-8") as fh:
        fh.write("image_id,count\n")
        for p, m in zip(paths, maps):
            write_pgm_density(out / f"{p.stem}.pgm", m)
            outputs.append(f"{p.stem}.pgm")
            if o["raw"]:
                np.savetxt(out / f"{p.stem}.csv", m, delimiter=",", fmt="%.17g")
                outputs.append(f"{p.stem}.csv")
            fh.write(f"{p.name},{float(m.sum())!r}\n")
    write_manifest(out, "infer", o, started, outputs, model_config=model.cfg)
    print(f"wrote {len(paths)} density maps to {out}")
    return EXIT_OK


def _parse_variants(text: Optional[str]) -> List[Dict[str, bool]]:
    if not text or text == "all":
        return list(ABLATION_VARIANTS)
    variants = []
    for chunk in text.split(";"):
        if chunk.strip():
            variants.append(_toggles(chunk))
    return variants


def do_ablation(o: Dict[str, object]) -> int:
    started = _now()
    cfg = model_config_from(o)
    tc = train_config_from(o)
    out = Path(o["out"])
    recs = load_dataset(o["data"], cfg.input_size)
    if o.get("test_data"):
        train_recs, test_recs = recs, load_dataset(o["test_data"], cfg.input_size)
    else:
        train_recs, test_recs = split_records(recs, o["val_fraction"])
    if not train_recs or not test_recs:
        raise UsageError("ablation needs non-empty train and test sets")
    ti, td, _ = stack_dataset(train_recs, tc.sigma)
    si, _, sc = stack_dataset(test_recs, tc.sigma)
    try:
        variants = _parse_variants(o["variants"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = run_ablation(variants, cfg, tc, (ti, td), (si, sc), o["seeds"])
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(out / "ablation.csv", rows)
    write_manifest(out, "ablation", o, started, ["ablation.csv"], model_config=cfg, train_config=tc)
    for r in rows:
        flags = " ".join(f"{k}={'on' if v else 'off'}" for k, v in r.toggles.items())
        print(f"{flags}  median_mae={r.median_mae:.4f} median_rmse={r.median_rmse:.4f} {r.error}")
    return EXIT_OK


def do_check(o: Dict[str, object]) -> int:
    results = run_checks(tol=o["tol"], h=o["h"], fault=o["inject_fault"])
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_CHECK
    print("all checks passed")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[Dict[str, object]], int]] = {
    "synth": do_synth,
    "train": do_train,
    "eval": do_eval,
    "infer": do_infer,
    "ablation": do_ablation,
    "check": do_check,
}

# option tables per command, in resolution order
COMMAND_OPTS = {
    "synth": [SYNTH_OPTS],
    "train": [MODEL_OPTS, TRAIN_OPTS, SPLIT_OPTS],
    "eval": [SPLIT_OPTS],
    "infer": [],
    "ablation": [MODEL_OPTS, TRAIN_OPTS, SPLIT_OPTS],
    "check": [],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcasunet", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic counting dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_opts(p, SYNTH_OPTS)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_opts(p, MODEL_OPTS)
    _add_opts(p, TRAIN_OPTS)
    _add_opts(p, SPLIT_OPTS)

    p = sub.add_parser("eval", help="evaluate a checkpoint (MAE/RMSE)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("all", "train", "val"), default="all")
    p.add_argument("--out", help="directory for eval.csv and manifest")
    p.add_argument("--config")
    _add_opts(p, SPLIT_OPTS)

    p = sub.add_parser("infer", help="write density maps and counts for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--raw", action="store_true", help="also write raw float maps as CSV")
    p.add_argument("images", nargs="+", help="P6 images or directories of them")

    p = sub.add_parser("ablation", help="train and compare module-toggle variants")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", default="all",
                   help="'all' or ';'-separated toggle sets, e.g. 'gcam=off,gefs=off,gafu=off;gcam=on'")
    p.add_argument("--config")
    _add_opts(p, MODEL_OPTS)
    _add_opts(p, TRAIN_OPTS)
    _add_opts(p, SPLIT_OPTS)

    p = sub.add_parser("check", help="run gradient and invariant checks")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--inject-fault", choices=GRAD_BLOCKS, default=None,
                   help="negate one block's gradient (harness self-test)")

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default: the recorded one)")
    return parser


PASSTHROUGH = ("out", "data", "test_data", "checkpoint", "split", "raw", "images", "tol", "h",
               "inject_fault", "variants")


def resolve_options(ns: argparse.Namespace) -> Dict[str, object]:
    file_values = read_config_file(getattr(ns, "config", None))
    options: Dict[str, object] = {}
    for table in COMMAND_OPTS[ns.command]:
        options.update(resolve(ns, table, file_values))
    for key in PASSTHROUGH:
        if hasattr(ns, key):
            options[key] = getattr(ns, key)
    if ns.command == "ablation":
        try:
            options["seeds"] = list(_ints(ns.seeds))
        except ValueError as exc:
            raise UsageError(f"--seeds: {exc}") from None
    if getattr(ns, "config", None):
        options["config_text"] = file_values
    return options


def run_command(command: str, options: Dict[str, object]) -> int:
    """Run ``command`` with resolved ``options``, mapping failures to exit codes."""
    try:
        return COMMANDS[command](options)
    except (MissingImageError, AnnotationParseError, PNMError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (NonFiniteLossError, NonFiniteGradientError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def replay(manifest_path: str, out: Optional[str]) -> int:
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: cannot read manifest: {exc}", file=sys.stderr)
        return EXIT_IO
    command = manifest.get("command")
    if command not in COMMANDS:
        print(f"error: manifest has unknown command {command!r}", file=sys.stderr)
        return EXIT_USAGE
    options = dict(manifest["options"])
    for key in ("count", "distractors", "heads", "depths"):
        if isinstance(options.get(key), list):
            options[key] = tuple(options[key])
    if isinstance(options.get("radius"), list):
        options["radius"] = tuple(options["radius"])
    if out:
        options["out"] = out
    return run_command(command, options)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if ns.command == "replay":
        return replay(ns.manifest, ns.out)
    try:
        options = resolve_options(ns)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return run_command(ns.command, options)


if __name__ == "__main__":
    sys.exit(main())
