"""Central finite-difference checks for the U-Net and the training loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .unet import NetworkConfig, UNet


@dataclass
class GradCheckReport:
    """Maximum relative error per checked tensor."""

    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if e > self.tolerance]


def relative_error(analytic, numeric, floor: float) -> float:
    """||a - n|| / max(||a||, ||n||, floor).

    ``floor`` keeps tensors whose true gradient is zero (e.g. a conv bias
    feeding a one-channel normalization group) from turning round-off into
    large relative errors.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def randomize_affine(params, rng, scale=0.1):
    """Move biases and affine terms off their init so no term is degenerate."""
    for name, value in params.items():
        if name.endswith((".bias", ".beta")):
            value[...] = rng.normal(0.0, scale, value.shape)
        elif name.endswith(".gamma"):
            value[...] = rng.uniform(0.5, 1.5, value.shape)


def check_unet_gradients(
    cfg: NetworkConfig,
    seed: int = 0,
    batch: int = 2,
    size: int = 8,
    samples_per_tensor: int = 6,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    corrupt: str | None = None,
) -> GradCheckReport:
    """Compare backprop against central differences of ``sum(out * R)``.

    A random subset of entries is perturbed in every parameter tensor, and
    in the input. ``corrupt`` names a tensor whose analytic gradient is
    deliberately perturbed (fault injection for testing the checker).
    """
    rng = np.random.default_rng(seed)
    net = UNet(cfg, dtype=np.float64)
    randomize_affine(net.params, rng)
    x = rng.normal(size=(batch, cfg.in_channels, size, size))
    proj = rng.normal(size=(batch, cfg.out_channels, size, size))

    def objective():
        return float(np.sum(net.forward(x) * proj))

    net.forward(x)
    grads = net.backward(proj)
    if corrupt is not None:
        grads[corrupt] = grads[corrupt] + 1e-2 * (1.0 + np.abs(grads[corrupt]))

    targets = dict(net.params)
    targets["input"] = x
    scale = max(np.linalg.norm(g) for g in grads.values())
    floor = 1e-4 * scale
    report = GradCheckReport(tolerance=tolerance)
    for name, tensor in targets.items():
        k = min(samples_per_tensor, tensor.size)
        idx = rng.choice(tensor.size, size=k, replace=False)
        numeric = np.empty(k)
        for j, i in enumerate(idx):
            old = tensor.flat[i]
            tensor.flat[i] = old + h
            fp = objective()
            tensor.flat[i] = old - h
            fm = objective()
            tensor.flat[i] = old
            numeric[j] = (fp - fm) / (2.0 * h)
        report.errors[name] = relative_error(grads[name].ravel()[idx], numeric, floor)
    return report


def check_loss_gradient(seed: int = 0, shape=(1, 6, 4, 4), h: float = 1e-5,
                        tolerance: float = 1e-6, beta: float = 1.0) -> GradCheckReport:
    """Finite-difference check of :func:`ciscnet.train.loss.total_loss`."""
    from ..train.loss import total_loss

    rng = np.random.default_rng(seed)
    n, c, hh, ww = shape
    pred = rng.normal(0.0, 0.8, size=shape)
    target = rng.uniform(0.0, 1.0, size=shape) * (rng.uniform(size=shape) < 0.5)
    weights = rng.choice([1.0, 10.0], size=(n, hh, ww))
    omega = rng.uniform(0.5, 2.0, size=7)
    _, grad = total_loss(pred, target, weights, omega, beta)
    numeric = np.empty(pred.size)
    for i in range(pred.size):
        old = pred.flat[i]
        pred.flat[i] = old + h
        fp = total_loss(pred, target, weights, omega, beta)[0]
        pred.flat[i] = old - h
        fm = total_loss(pred, target, weights, omega, beta)[0]
        pred.flat[i] = old
        numeric[i] = (fp - fm) / (2.0 * h)
    scale = float(np.linalg.norm(grad))
    report = GradCheckReport(tolerance=tolerance)
    report.errors["total_loss"] = relative_error(grad, numeric, 1e-4 * scale)
    return report
