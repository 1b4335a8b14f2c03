"""Dataset preparation and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..data import LabeledPatch
from ..encode import compute_weight_map, encode_distance_maps
from ..errors import EmptyAfterFilter, InvalidConfig, OutOfRange
from ..net.checkpoint import save_checkpoint
from ..net.unet import NetworkConfig, UNet
from .augment import AugmentConfig, geometric_augment, photometric_augment
from .loss import class_balanced_omega, total_loss
from .optim import OptimizerConfig, ScheduleConfig, TrainState, lr_at, optimizer_step

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "train_loss", "val_loss", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    split_ratio: float = 0.8
    loss_weights: tuple[float, ...] | None = None  # None: class-balanced from the train split
    smooth_l1_beta: float = 1.0
    w_bg: float = 1.0
    w_fg: float = 10.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    total_steps: int = 1000
    warmup_steps: int | None = None  # None: 5% of total_steps
    batch_size: int = 4
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval_every: int = 0  # steps between val evaluations; 0 = once per epoch
    log_wallclock: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise InvalidConfig("split_ratio must lie in (0, 1)")
        if self.loss_weights is not None:
            w = np.asarray(self.loss_weights, dtype=float)
            if w.shape != (7,) or (w < 0).any() or w.sum() <= 0:
                raise InvalidConfig("loss_weights needs 7 non-negative values with positive sum")
        if self.smooth_l1_beta <= 0:
            raise InvalidConfig("smooth_l1_beta must be > 0")
        if self.batch_size < 1 or self.total_steps < 1:
            raise InvalidConfig("batch_size and total_steps must be >= 1")
        if self.eval_every < 0:
            raise InvalidConfig("eval_every must be >= 0")
        self.schedule  # validates warmup

    @property
    def schedule(self) -> ScheduleConfig:
        warm = self.warmup_steps
        if warm is None:
            warm = int(round(0.05 * self.total_steps))
        return ScheduleConfig(warmup_steps=warm, total_steps=self.total_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = None if self.loss_weights is None else list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "optimizer" in d and isinstance(d["optimizer"], dict):
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        if "augment" in d and isinstance(d["augment"], dict):
            aug = dict(d["augment"])
            for key in ("scale_range", "saturation_range", "contrast_range",
                        "blur_sigma", "noise_sigma"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            d["augment"] = AugmentConfig(**aug)
        if d.get("loss_weights") is not None:
            d["loss_weights"] = tuple(d["loss_weights"])
        return cls(**d)


def filter_and_split(patches, ratio: float = 0.8, seed: int = 0):
    """Drop patches without nuclei, shuffle, and split ceil(ratio * n) / rest."""
    if not 0.0 < ratio < 1.0:
        raise InvalidConfig("ratio must lie in (0, 1)")
    kept = [p for p in patches if (p.instances > 0).any()]
    if not kept:
        raise EmptyAfterFilter("no patch contains a nucleus")
    order = np.random.default_rng(seed).permutation(len(kept))
    n_train = math.ceil(ratio * len(kept))
    train = [kept[i] for i in order[:n_train]]
    val = [kept[i] for i in order[n_train:]]
    return train, val


def normalize_image(image) -> np.ndarray:
    """Map intensities in [0, 255] to [-1, 1]."""
    image = np.asarray(image)
    if image.size and (image.min() < 0 or image.max() > 255):
        raise OutOfRange("image intensities must lie in [0, 255]")
    return image.astype(np.float64) / 127.5 - 1.0


def to_network_input(image, dtype=np.float32) -> np.ndarray:
    """(H, W, 3) intensities -> normalized (3, H, W)."""
    return np.ascontiguousarray(normalize_image(image).transpose(2, 0, 1), dtype=dtype)


@dataclass
class Sample:
    x: np.ndarray  # (3, H, W)
    target: np.ndarray  # (6, H, W)
    weights: np.ndarray  # (H, W)


def prepare_sample(patch: LabeledPatch, cfg: TrainConfig, rng=None, dtype=np.float32) -> Sample:
    """Geometric augmentation, encoding, photometric augmentation, normalization."""
    image = patch.image
    if rng is not None:
        patch = geometric_augment(patch, rng, cfg.augment)
        image = photometric_augment(patch.image, rng, cfg.augment)
    target = encode_distance_maps(patch).channels
    weights = compute_weight_map(patch, cfg.w_bg, cfg.w_fg)
    return Sample(
        x=to_network_input(image, dtype),
        target=target.astype(dtype),
        weights=weights.astype(dtype),
    )


def _stack(samples):
    return (
        np.stack([s.x for s in samples]),
        np.stack([s.target for s in samples]),
        np.stack([s.weights for s in samples]),
    )


def dataset_loss(net: UNet, samples, omega, beta, batch_size=8) -> float:
    """Pixel-weighted loss over a list of prepared samples (no augmentation)."""
    total, norm = 0.0, 0.0
    for i in range(0, len(samples), batch_size):
        x, t, w = _stack(samples[i : i + batch_size])
        loss, _ = total_loss(net.forward(x), t, w, omega, beta)
        total += loss * float(w.sum())
        norm += float(w.sum())
    return total / norm


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    log: list[dict]
    omega: np.ndarray
    initial_train_loss: float
    final_train_loss: float
    best_val_loss: float


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([_format(row.get(c)) for c in LOG_COLUMNS])


def train_loop(
    train_set,
    val_set,
    net_cfg: NetworkConfig,
    cfg: TrainConfig,
    out_dir=None,
) -> TrainResult:
    """Train the U-Net with Ranger on freshly augmented, freshly encoded samples.

    Each drawn sample gets its own rng stream derived from (seed, epoch,
    sample index), so results do not depend on evaluation order. When
    ``val_set`` is empty the training patches (unaugmented) stand in for it.
    With ``out_dir`` the best-validation checkpoint goes to ``out_dir/ckpt``
    and the log to ``out_dir/train_log.csv``.
    """
    train_set = list(train_set)
    if not train_set:
        raise EmptyAfterFilter("training split is empty")
    val_set = list(val_set) or train_set
    net = UNet(net_cfg, dtype=np.float32)
    state = TrainState.create(net.params)
    schedule = cfg.schedule
    beta = cfg.smooth_l1_beta

    plain_train = [prepare_sample(p, cfg) for p in train_set]
    val_samples = [prepare_sample(p, cfg) for p in val_set]
    if cfg.loss_weights is None:
        omega = class_balanced_omega(s.target for s in plain_train)
    else:
        omega = np.asarray(cfg.loss_weights, dtype=np.float64)
    # Targets only change when the label geometry does.
    cache_targets = not cfg.augment.geometric_enabled

    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    eval_every = cfg.eval_every or steps_per_epoch
    initial = dataset_loss(net, plain_train, omega, beta)
    best_val = math.inf
    best_params = {k: v.copy() for k, v in net.params.items()}
    log: list[dict] = []
    running, running_n = 0.0, 0
    t0 = time.perf_counter()

    for step in range(1, cfg.total_steps + 1):
        epoch, pos = divmod(step - 1, steps_per_epoch)
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(n)
        idx = order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]
        batch = []
        for i in idx:
            rng = np.random.default_rng([cfg.seed, 2, epoch, int(i)])
            if cache_targets:
                s = plain_train[i]
                # Photometric-only augmentation still draws from its own stream.
                image = photometric_augment(train_set[i].image, rng, cfg.augment)
                batch.append(Sample(to_network_input(image), s.target, s.weights))
            else:
                batch.append(prepare_sample(train_set[i], cfg, rng))
        x, t, w = _stack(batch)
        pred = net.forward(x)
        loss, grad = total_loss(pred, t, w, omega, beta)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at step {step}")
        grads = net.backward(grad)
        lr = lr_at(step, cfg.optimizer.lr, schedule)
        optimizer_step(state, grads, lr, cfg.optimizer)
        running += loss
        running_n += 1

        if step % eval_every == 0 or step == cfg.total_steps:
            val_loss = dataset_loss(net, val_samples, omega, beta)
            row = {
                "step": step,
                "lr": lr,
                "train_loss": running / running_n,
                "val_loss": val_loss,
                "seconds": round(time.perf_counter() - t0, 3) if cfg.log_wallclock else None,
            }
            log.append(row)
            logger.info("step %d lr %.3g train %.5f val %.5f", step, lr, row["train_loss"], val_loss)
            running, running_n = 0.0, 0
            if val_loss < best_val:
                best_val = val_loss
                best_params = {k: v.copy() for k, v in net.params.items()}

    final = dataset_loss(net, plain_train, omega, beta)
    result = TrainResult(
        params=net.params,
        best_params=best_params,
        log=log,
        omega=omega,
        initial_train_loss=initial,
        final_train_loss=final,
        best_val_loss=best_val,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(
            out / "ckpt",
            best_params,
            net_cfg,
            extra={"best_val_loss": best_val, "omega": [float(o) for o in omega],
                   "train_config": cfg.to_dict()},
        )
        write_log(out / "train_log.csv", log)
    return result
