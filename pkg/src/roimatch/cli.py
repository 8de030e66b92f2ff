"""Command line: ``roimatch {synth,train,eval,infer,viz}``.

Every failure ends with one stderr line ``error code=<n> kind=<kind> msg=<json string>``
and exit status 2 (usage), 3 (io), 4 (config) or 5 (numeric failure).
"""
from __future__ import annotations

import argparse
import ast
import configparser
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import cv2
import numpy as np

from .data import (LEVELS, ManifestError, assign_splits, load_manifest, load_sample, read_image,
                   read_mask, save_sample, synth_pair, write_image, write_manifest)
from .geometry import PolygonSet
from .loss import LossConfig
from .model import CheckpointVersionError, ModelConfig, load_checkpoint
from .postprocess import DecodeConfig, MatchResult

log = logging.getLogger("roimatch")

EXIT_USAGE, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 2, 3, 4, 5


class CliError(Exception):
    code = EXIT_USAGE
    kind = "usage"


class UsageError(CliError):
    pass


class ConfigError(CliError):
    code, kind = EXIT_CONFIG, "config"


@dataclass
class DataConfig:
    train_split: str = "train"
    val_split: str = "val"
    synth_size: int = 256


def _train_config_cls():
    from .trainer import TrainConfig
    return TrainConfig


SECTIONS = {"model": ModelConfig, "loss": LossConfig, "train": None, "decode": DecodeConfig,
            "data": DataConfig}


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def load_run_config(path: str | None, overrides: list[str]) -> dict:
    """Merge an INI file and ``section.key=value`` overrides into config objects."""
    raw = {name: {} for name in SECTIONS}
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except configparser.Error as e:
            raise ConfigError(f"malformed config {path}: {e}".replace("\n", " ")) from None
        for section in parser.sections():
            if section not in raw:
                raise ConfigError(f"unknown section [{section}]")
            raw[section].update({k: _parse_value(v) for k, v in parser.items(section)})
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not section.key=value")
        if section not in raw:
            raise ConfigError(f"unknown section {section!r} in override {item!r}")
        raw[section][name] = _parse_value(value.strip())

    out = {}
    for section, values in raw.items():
        cls = SECTIONS[section] or _train_config_cls()
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
        try:
            out[section] = cls(**values)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{section}] {e}") from None
    return out


def dump_run_config(configs: dict, path: Path) -> None:
    parser = configparser.ConfigParser()
    for section, cfg in configs.items():
        parser[section] = {k: repr(v) for k, v in asdict(cfg).items()}
    with open(path, "w") as fh:
        parser.write(fh)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, configs) -> dict:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    levels = args.levels.split(",")
    bad = [lv for lv in levels if lv not in LEVELS]
    if bad:
        raise UsageError(f"unknown level(s): {', '.join(bad)}")
    out = args.out
    files = out / "pairs"
    files.mkdir(parents=True, exist_ok=True)
    size = configs["data"].synth_size
    samples = [synth_pair(lv, args.seed * 100_000 + i, size) for lv in levels for i in range(args.count)]
    splits = assign_splits([s.pair_id for s in samples])
    records = []
    for s in samples:
        rec = save_sample(s, files, splits[s.pair_id])
        records.append({**rec, **{k: f"pairs/{v}" for k, v in rec.items()
                                  if k in ("ref_image", "ref_mask", "tgt_image", "tgt_polygons")}})
    write_manifest(records, out / "manifest.json")
    counts = {k: sum(r["split"] == k for r in records) for k in ("train", "val", "test")}
    return {"manifest": str(out / "manifest.json"), "records": len(records), "splits": counts}


def _load_split(manifest_path, split):
    man = load_manifest(manifest_path)
    records = man.split(split)
    return [load_sample(r) for r in records]


def cmd_train(args, configs) -> dict:
    from .trainer import build_model, train, validate
    tcfg = configs["train"]
    if args.seed is not None:
        tcfg.seed = args.seed
    train_samples = _load_split(args.manifest, configs["data"].train_split)
    if not train_samples:
        raise UsageError(f"split {configs['data'].train_split!r} is empty")
    val_samples = _load_split(args.manifest, configs["data"].val_split) or None
    args.out.mkdir(parents=True, exist_ok=True)
    dump_run_config(configs, args.out / "config.ini")
    model = build_model(configs["model"], seed=tcfg.seed)
    res = train(model, train_samples, configs["loss"], tcfg, val_samples, configs["decode"], args.out)
    summary = {"iterations": tcfg.max_iterations, "checkpoint": str(args.out / "last.pt")}
    if res.log:
        summary["final_loss"] = res.log[-1]["total"]
    if val_samples:
        rep = validate(model, val_samples, configs["decode"])
        summary.update(val_miou=rep.miou, val_f=rep.f_measure)
    return summary


def cmd_eval(args, configs) -> dict:
    from .trainer import validate
    model, _ = load_checkpoint(args.checkpoint)
    samples = _load_split(args.manifest, args.split)
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    rep = validate(model, samples, configs["decode"])
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(rep.to_json())
    (args.out / "report.csv").write_text(rep.to_csv())
    return {"miou": rep.miou, "f_measure": rep.f_measure, "report": str(args.out / "report.json")}


def draw_overlay(image: np.ndarray, result: MatchResult, gt: PolygonSet | None = None) -> np.ndarray:
    """Predicted mask tint plus boxes: ground truth in red, predictions in green (RGB)."""
    canvas = image.copy()
    tint = canvas[result.merged > 0].astype(np.float32)
    canvas[result.merged > 0] = (0.6 * tint + 0.4 * np.array([0, 255, 0])).astype(np.uint8)
    if gt is not None:
        for p in gt:
            x0, y0, x1, y1 = p.bounds()
            cv2.rectangle(canvas, (int(round(x0)), int(round(y0))),
                          (int(round(x1)) - 1, int(round(y1)) - 1), (255, 0, 0), 2)
    for inst in result.instances:
        x0, y0, x1, y1 = inst.box
        cv2.rectangle(canvas, (x0, y0), (x1, y1), (0, 255, 0), 1)
    return canvas


def cmd_infer(args, configs) -> dict:
    from .trainer import infer_pair
    model, _ = load_checkpoint(args.checkpoint)
    ref, mask, tgt = read_image(args.ref_image), read_mask(args.ref_mask), read_image(args.tgt_image)
    if mask.shape != ref.shape[:2]:
        raise UsageError("reference mask and image sizes differ")
    gt = PolygonSet.from_json(Path(args.gt_polygons).read_text()) if args.gt_polygons else None
    start = time.perf_counter()
    result = infer_pair(model, ref, mask, tgt, configs["decode"])
    latency = time.perf_counter() - start
    args.out.mkdir(parents=True, exist_ok=True)
    write_image(args.out / "mask.png", result.merged * 255)
    (args.out / "result.json").write_text(result.to_json("mask.png", latency_s=latency))
    if args.viz:
        write_image(args.out / "overlay.png", draw_overlay(tgt, result, gt))
    return {"instances": len(result.instances), "latency_s": latency,
            "result": str(args.out / "result.json")}


def cmd_viz(args, configs) -> dict:
    from .trainer import infer_pair
    model, _ = load_checkpoint(args.checkpoint)
    samples = _load_split(args.manifest, args.split)[: args.limit or None]
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    args.out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        result = infer_pair(model, s.reference_image, s.reference_mask, s.target_image, configs["decode"])
        ref = s.reference_image.copy()
        ref[s.reference_mask > 0] = (0.6 * ref[s.reference_mask > 0] + 0.4 * np.array([255, 0, 0]))
        write_image(args.out / f"{s.pair_id}.png",
                    np.concatenate([ref, draw_overlay(s.target_image, result, s.target_polygons)], 1))
    return {"overlays": len(samples), "out": str(args.out)}


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file with [model] [loss] [train] [decode] [data]")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--viz", action="store_true", help="also write overlay images")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="roimatch", description="Visual-prompt region matching for document images.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic benchmark")
    p.add_argument("--count", type=int, required=True, help="pairs per level")
    p.add_argument("--levels", default=",".join(LEVELS))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="match one reference/target pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ref-image", required=True)
    p.add_argument("--ref-mask", required=True)
    p.add_argument("--tgt-image", required=True)
    p.add_argument("--gt-polygons", help="optional ground-truth polygons JSON for the overlay")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("viz", parents=[common], help="write overlays for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_viz)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(f"error code={code} kind={kind} msg={json.dumps(str(message))}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    from .trainer import NumericFailure
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        configs = load_run_config(args.config, args.overrides)
        if args.seed is None and args.command == "synth":
            args.seed = 0
        summary = args.func(args, configs)
    except CliError as e:
        return _fail(e.code, e.kind, e)
    except CheckpointVersionError as e:
        return _fail(EXIT_IO, "checkpoint_version", e)
    except (ManifestError, OSError) as e:
        return _fail(EXIT_IO, "io", e)
    except NumericFailure as e:
        return _fail(EXIT_NUMERIC, "numeric", e)
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
