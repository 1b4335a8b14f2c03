"""Command-line entry point: ``ciscnet <subcommand> [flags]``.

Machine-readable results go to stdout as one JSON document; progress and
tables go to stderr. Exit codes: 0 ok, 1 gradient check failed, 2 invalid
config or input, 3 I/O failure, 4 nothing left after filtering, 5 checkpoint
or shape mismatch, 6 misaligned prediction and ground-truth sets.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import generate_synthetic, load_dataset, save_dataset
from .encode import encode_distance_maps
from .errors import (
    CheckpointError,
    EmptyAfterFilter,
    IndivisibleDimensions,
    InvalidConfig,
    IoFailure,
    MissingFile,
    ShapeMismatch,
    ValidationError,
)
from .metrics import evaluate, format_table
from .net.checkpoint import load_checkpoint
from .net.gradcheck import check_loss_gradient, check_unet_gradients
from .net.unet import NetworkConfig, UNet
from .pipeline import load_predictions, predict_dataset, save_prediction
from .postprocess import PostprocessConfig
from .train.augment import AugmentConfig
from .train.loop import TrainConfig, filter_and_split, train_loop

logger = logging.getLogger("ciscnet")

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_EMPTY = 4
EXIT_CHECKPOINT = 5
EXIT_MISALIGNED = 6


class CliExit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """Config file sections merged with command-line flags (flags win)."""

    seed: int = 0
    network: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    postprocess: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    SECTIONS = ("network", "train", "postprocess", "synth")

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise MissingFile(f"config file {p} does not exist")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{p} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise InvalidConfig("config must be a JSON object")
        unknown = set(doc) - set(cls.SECTIONS) - {"seed"}
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(seed=int(doc.get("seed", 0)))
        for name in cls.SECTIONS:
            section = doc.get(name, {})
            if not isinstance(section, dict):
                raise InvalidConfig(f"config section {name!r} must be an object")
            setattr(cfg, name, dict(section))
        return cfg

    def override(self, section: str, **values) -> None:
        target = getattr(self, section)
        target.update({k: v for k, v in values.items() if v is not None})

    def network_config(self) -> NetworkConfig:
        return _build(NetworkConfig, {"seed": self.seed, **self.network}, "network")

    def train_config(self) -> TrainConfig:
        doc = {"seed": self.seed, **self.train}
        try:
            return TrainConfig.from_dict(doc)
        except TypeError as exc:
            raise InvalidConfig(f"train section: {exc}") from exc

    def postprocess_config(self) -> PostprocessConfig:
        return _build(PostprocessConfig, self.postprocess, "postprocess")


def _build(cls, values: dict, section: str):
    try:
        return cls(**values)
    except TypeError as exc:
        raise InvalidConfig(f"{section} section: {exc}") from exc


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise MissingFile(f"{what} {p} does not exist")
    return p


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _say(text: str) -> None:
    sys.stderr.write(text + "\n")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args, run: RunConfig) -> int:
    run.override("synth", n_patches=args.n, height=args.height, width=args.width,
                 density=args.density, touching=args.touching or None, min_area=args.min_area)
    opts = {"n_patches": 10, **run.synth}
    try:
        patches = generate_synthetic(run.seed, **opts)
    except TypeError as exc:
        raise InvalidConfig(f"synth section: {exc}") from exc
    save_dataset(patches, args.out, seed=run.seed)
    _say(f"wrote {len(patches)} patches to {args.out}")
    _emit({"out": str(args.out), "patch_count": len(patches), "seed": run.seed})
    return EXIT_OK


def cmd_encode(args, run: RunConfig) -> int:
    patches = load_dataset(_require_dir(args.data, "dataset"))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i, patch in enumerate(patches):
            channels = encode_distance_maps(patch).channels
            save_prediction(out / f"dm_{i:05}.raw", out / f"dm_{i:05}.json", channels)
    except OSError as exc:
        raise IoFailure(f"cannot write encodings to {out}: {exc}") from exc
    _emit({"out": str(out), "patch_count": len(patches)})
    return EXIT_OK


def cmd_train(args, run: RunConfig) -> int:
    run.override("network", depth=args.depth, base_features=args.base_features,
                 groups=args.groups)
    run.override("train", total_steps=args.steps, batch_size=args.batch_size,
                 split_ratio=args.split_ratio, eval_every=args.eval_every,
                 warmup_steps=args.warmup)
    if args.lr is not None:
        run.train["optimizer"] = {**run.train.get("optimizer", {}), "lr": args.lr}
    if args.no_augment:
        run.train["augment"] = asdict(AugmentConfig.disabled())
    net_cfg = run.network_config()
    cfg = run.train_config()
    patches = load_dataset(_require_dir(args.data, "dataset"))
    train_set, val_set = filter_and_split(patches, cfg.split_ratio, run.seed)
    kept = len(train_set) + len(val_set)
    _say(f"split: {len(patches)} patches, {kept} with nuclei -> "
         f"train {len(train_set)} (ceil({cfg.split_ratio} * {kept}) = "
         f"{math.ceil(cfg.split_ratio * kept)}), val {len(val_set)}")
    out = Path(args.out)
    result = train_loop(train_set, val_set, net_cfg, cfg, out_dir=out)
    _emit({
        "checkpoint": str(out / "ckpt"),
        "log": str(out / "train_log.csv"),
        "patches": len(patches),
        "kept": kept,
        "train": len(train_set),
        "val": len(val_set),
        "initial_train_loss": result.initial_train_loss,
        "final_train_loss": result.final_train_loss,
        "best_val_loss": result.best_val_loss,
    })
    return EXIT_OK


def cmd_predict(args, run: RunConfig) -> int:
    run.override("postprocess", seed_threshold=args.seed_threshold,
                 mask_threshold=args.mask_threshold, min_cell_area=args.min_cell_area)
    post_cfg = run.postprocess_config()
    params, net_cfg, _ = load_checkpoint(_require_dir(args.ckpt, "checkpoint"))
    patches = load_dataset(_require_dir(args.data, "dataset"))
    net = UNet(net_cfg, params)
    try:
        results = predict_dataset(net, patches, args.out, tta=args.tta, cfg=post_cfg)
    except (ShapeMismatch, IndivisibleDimensions) as exc:
        raise CliExit(EXIT_CHECKPOINT, f"checkpoint does not fit the data: {exc}") from exc
    totals = np.sum([r.counts for r in results], axis=0) if results else np.zeros(6, int)
    _emit({
        "out": str(args.out),
        "patch_count": len(results),
        "tta": bool(args.tta),
        "total_counts": [int(c) for c in totals],
    })
    return EXIT_OK


def _aligned(gt, preds, label: str):
    if len(gt) != len(preds):
        raise CliExit(EXIT_MISALIGNED, f"{label}: {len(preds)} predictions for {len(gt)} patches")
    for i, (patch, result) in enumerate(zip(gt, preds)):
        if patch.shape != result.instances.shape:
            raise CliExit(
                EXIT_MISALIGNED,
                f"{label}: patch {i} is {patch.shape}, prediction is {result.instances.shape}",
            )


def cmd_eval(args, run: RunConfig) -> int:
    gt = load_dataset(_require_dir(args.gt, "ground-truth dataset"))
    preds, _ = load_predictions(_require_dir(args.pred, "prediction directory"))
    _aligned(gt, preds, "predictions")
    report = evaluate(gt, preds, args.strict_six_class)
    tta_report = None
    if args.pred_tta is not None:
        tta_preds, _ = load_predictions(_require_dir(args.pred_tta, "tta prediction directory"))
        _aligned(gt, tta_preds, "tta predictions")
        tta_report = evaluate(gt, tta_preds, args.strict_six_class)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "metrics.json", out / "counts.csv")
        if tta_report is not None:
            tta_report.save(out / "metrics_tta.json", out / "counts_tta.csv")
    except OSError as exc:
        raise IoFailure(f"cannot write metrics to {out}: {exc}") from exc
    _say(format_table([(args.name, report, tta_report)]))
    doc = {"metrics": report.to_dict()}
    if tta_report is not None:
        doc["metrics_tta"] = tta_report.to_dict()
    _emit(doc)
    return EXIT_OK


def cmd_gradcheck(args, run: RunConfig) -> int:
    run.override("network", depth=args.depth, base_features=args.base_features,
                 groups=args.groups)
    net_cfg = _build(NetworkConfig, {"depth": 2, "base_features": 8, **run.network,
                                     "seed": run.seed}, "network")
    layers: dict[str, float] = {}
    seeds = [run.seed + i for i in range(args.seeds)]
    for s in seeds:
        rep = check_unet_gradients(net_cfg, seed=s, size=args.size,
                                   tolerance=args.tolerance, corrupt=args.corrupt)
        for name, err in rep.errors.items():
            layers[name] = max(layers.get(name, 0.0), err)
        loss = check_loss_gradient(seed=s, tolerance=args.tolerance)
        layers["total_loss"] = max(layers.get("total_loss", 0.0), loss.errors["total_loss"])
    failures = [name for name, err in layers.items() if not err <= args.tolerance]
    for name, err in layers.items():
        _say(f"{'FAIL' if name in failures else 'ok  '} {name:<24} {err:.3e}")
    worst = max(layers, key=layers.get)
    _emit({
        "passed": not failures,
        "tolerance": args.tolerance,
        "seeds": seeds,
        "max_relative_error": layers,
        "worst": {"layer": worst, "error": layers[worst]},
        "failures": failures,
    })
    return EXIT_OK if not failures else EXIT_GRADCHECK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its values")
    common.add_argument("--seed", type=int, help="master seed (default: config or 0)")
    common.add_argument("--threads", type=int, help="BLAS thread limit")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="ciscnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, help="number of patches (default 10)")
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--min-area", type=int)
    p.add_argument("--touching", action="store_true", help="allow adjacent nuclei")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("encode", parents=[common], help="dump per-class distance maps")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", parents=[common], help="train a U-Net")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--split-ratio", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--base-features", type=int)
    p.add_argument("--groups", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="run a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tta", action="store_true", help="average over the 8 dihedral transforms")
    p.add_argument("--seed-threshold", type=float)
    p.add_argument("--mask-threshold", type=float)
    p.add_argument("--min-cell-area", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="score predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pred-tta", help="second prediction directory made with --tta")
    p.add_argument("--name", default="eval", help="row label in the table")
    p.add_argument("--strict-six-class", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--depth", type=int)
    p.add_argument("--base-features", type=int)
    p.add_argument("--groups", type=int)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _run(args) -> int:
    run = RunConfig.load(args.config)
    if args.seed is not None:
        run.seed = args.seed
    return args.func(args, run)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise InvalidConfig("--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return _run(args)
        return _run(args)
    except CliExit as exc:
        _say(f"error: {exc}")
        return exc.code
    except EmptyAfterFilter as exc:
        _say(f"error: {exc}")
        return EXIT_EMPTY
    except CheckpointError as exc:
        _say(f"error: {exc}")
        return EXIT_CHECKPOINT
    except (MissingFile, IoFailure, OSError) as exc:
        _say(f"error: {exc}")
        return EXIT_IO
    except ValidationError as exc:
        _say(f"error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
