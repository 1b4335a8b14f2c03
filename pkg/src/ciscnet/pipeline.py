"""Inference over a dataset directory and the prediction directory format.

A prediction directory holds ``predictions.json`` plus, per patch i,
``pred_{i:05}.raw`` (6 x H x W little-endian float32) with its sidecar
``pred_{i:05}.json``, and the decoded ``seg_{i:05}.raw`` (u16 instances)
with ``seg_{i:05}.json`` (label -> class, counts).
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import CLASS_NAMES, LabeledPatch
from .errors import IoFailure, MissingFile, ShapeMismatch, ValidationError
from .net.unet import UNet
from .postprocess import PostprocessConfig, SegmentationResult, postprocess, tta_predict
from .train.loop import to_network_input

PREDICTIONS_NAME = "predictions.json"


def _names(i: int) -> dict[str, str]:
    return {
        "prediction": f"pred_{i:05}.raw",
        "prediction_meta": f"pred_{i:05}.json",
        "instances": f"seg_{i:05}.raw",
        "result": f"seg_{i:05}.json",
    }


def save_prediction(raw_path, json_path, pred: np.ndarray) -> None:
    pred = np.asarray(pred)
    if pred.ndim != 3:
        raise ShapeMismatch(f"prediction must be (C, H, W), got {pred.shape}")
    pred.astype("<f4").tofile(raw_path)
    meta = {"shape": list(pred.shape), "dtype": "<f4", "channels": list(CLASS_NAMES)}
    Path(json_path).write_text(json.dumps(meta, indent=2) + "\n")


def load_prediction(raw_path, json_path) -> np.ndarray:
    meta = json.loads(Path(json_path).read_text())
    shape = tuple(meta["shape"])
    flat = np.fromfile(raw_path, dtype="<f4")
    if flat.size != int(np.prod(shape)):
        raise ShapeMismatch(f"{raw_path}: {flat.size} values, sidecar says {shape}")
    return flat.reshape(shape)


def predict_patch(net: UNet, patch: LabeledPatch, tta: bool = False) -> np.ndarray:
    """Raw (6, H, W) float32 prediction for one patch."""
    x = to_network_input(patch.image, net.dtype)[None]
    net.check_input(x)
    if tta:
        return tta_predict(net, x[0])
    return net.forward(x)[0]


def predict_dataset(net: UNet, patches, out_dir, tta: bool = False,
                    cfg: PostprocessConfig = PostprocessConfig()) -> list[SegmentationResult]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    patches = list(patches)
    entries, results = [], []
    for i, patch in enumerate(patches):
        pred = predict_patch(net, patch, tta)
        result = postprocess(pred, cfg)
        names = _names(i)
        try:
            save_prediction(out / names["prediction"], out / names["prediction_meta"], pred)
            result.save(out / names["instances"], out / names["result"])
        except OSError as exc:
            raise IoFailure(f"cannot write predictions to {out}: {exc}") from exc
        entries.append(names)
        results.append(result)
    h, w = patches[0].shape if patches else (0, 0)
    doc = {
        "patch_count": len(patches),
        "height": h,
        "width": w,
        "tta": bool(tta),
        "postprocess": asdict(cfg),
        "entries": entries,
    }
    (out / PREDICTIONS_NAME).write_text(json.dumps(doc, indent=2) + "\n")
    return results


def load_predictions(path) -> tuple[list[SegmentationResult], dict]:
    """SegmentationResults of a prediction directory, plus its manifest."""
    root = Path(path)
    mpath = root / PREDICTIONS_NAME
    if not mpath.is_file():
        raise MissingFile(f"no {PREDICTIONS_NAME} in {root}")
    try:
        doc = json.loads(mpath.read_text())
        entries = doc["entries"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"malformed {mpath}: {exc}") from exc
    results = []
    for entry in entries:
        raw, meta = root / entry["instances"], root / entry["result"]
        if not raw.is_file() or not meta.is_file():
            raise MissingFile(f"missing prediction file for entry {entry}")
        results.append(SegmentationResult.load(raw, meta))
    return results, doc
