"""Single-branch U-Net with explicit reverse-mode gradients."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import IndivisibleDimensions, IndivisibleGroups, InvalidConfig, ShapeMismatch
from . import functional as F

logger = logging.getLogger(__name__)

Parameters = dict  # ordered name -> ndarray


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    out_channels: int = 6
    depth: int = 4
    base_features: int = 64
    feature_cap: int = 1024
    groups: int = 8
    eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise InvalidConfig("depth must be >= 1")
        if self.base_features < 1 or self.feature_cap < 1 or self.groups < 1:
            raise InvalidConfig("feature counts and groups must be positive")
        for d in range(self.depth + 1):
            if self.features(d) % self.groups:
                raise IndivisibleGroups(
                    f"level {d} has {self.features(d)} features, not divisible "
                    f"by {self.groups} groups"
                )

    def features(self, level: int) -> int:
        return min(self.base_features * 2**level, self.feature_cap)

    def to_dict(self) -> dict:
        return asdict(self)


def _block_specs(cfg: NetworkConfig):
    """(name, kind, shape-args) for every layer, in forward order."""
    specs = []
    cin = cfg.in_channels
    for d in range(cfg.depth):
        f = cfg.features(d)
        specs += [(f"enc{d}.conv0", "block", (cin, f)), (f"enc{d}.conv1", "block", (f, f))]
        specs.append((f"down{d}", "down", (f, f)))
        cin = f
    fb = cfg.features(cfg.depth)
    specs += [("mid.conv0", "block", (cin, fb)), ("mid.conv1", "block", (fb, fb))]
    cin = fb
    for d in reversed(range(cfg.depth)):
        f = cfg.features(d)
        specs.append((f"up{d}", "up", (cin, f)))
        specs += [(f"dec{d}.conv0", "block", (2 * f, f)), (f"dec{d}.conv1", "block", (f, f))]
        cin = f
    specs.append(("head", "head", (cin, cfg.out_channels)))
    return specs


def init_parameters(cfg: NetworkConfig, dtype=np.float32) -> Parameters:
    """He-uniform (fan-in) conv weights, zero biases, unit/zero affine."""
    rng = np.random.default_rng(cfg.seed)
    params: Parameters = {}

    def conv(name, cin, cout, k):
        bound = np.sqrt(6.0 / (cin * k * k))
        params[f"{name}.weight"] = rng.uniform(-bound, bound, (cout, cin, k, k))
        params[f"{name}.bias"] = np.zeros(cout)

    for name, kind, (cin, cout) in _block_specs(cfg):
        if kind == "block":
            conv(name, cin, cout, 3)
            params[f"{name}.gamma"] = np.ones(cout)
            params[f"{name}.beta"] = np.zeros(cout)
        elif kind == "down":
            conv(name, cin, cout, 3)
        elif kind == "up":
            bound = np.sqrt(6.0 / (cin * 4))
            params[f"{name}.weight"] = rng.uniform(-bound, bound, (cin, cout, 2, 2))
            params[f"{name}.bias"] = np.zeros(cout)
        else:
            conv(name, cin, cout, 1)
    return {k: v.astype(dtype) for k, v in params.items()}


def parameter_count(params: Parameters) -> int:
    return int(sum(v.size for v in params.values()))


def parameter_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Shapes without allocating weights (full-scale configs are large)."""
    shapes = {}
    for name, kind, (cin, cout) in _block_specs(cfg):
        if kind == "block":
            shapes.update({f"{name}.weight": (cout, cin, 3, 3), f"{name}.bias": (cout,),
                           f"{name}.gamma": (cout,), f"{name}.beta": (cout,)})
        elif kind == "down":
            shapes.update({f"{name}.weight": (cout, cin, 3, 3), f"{name}.bias": (cout,)})
        elif kind == "up":
            shapes.update({f"{name}.weight": (cin, cout, 2, 2), f"{name}.bias": (cout,)})
        else:
            shapes.update({f"{name}.weight": (cout, cin, 1, 1), f"{name}.bias": (cout,)})
    return shapes


class UNet:
    """Forward pass that records a tape, and the matching backward pass.

    ``forward`` keeps the caches of the most recent call; ``backward`` must be
    called with an upstream gradient shaped like that call's output.
    """

    def __init__(self, cfg: NetworkConfig, params: Parameters | None = None, dtype=np.float32):
        self.cfg = cfg
        self.params = init_parameters(cfg, dtype) if params is None else params
        self._specs = _block_specs(cfg)
        self._tape = None

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeMismatch(
                f"expected (N, {self.cfg.in_channels}, H, W) input, got {x.shape}"
            )
        m = 2**self.cfg.depth
        if x.shape[2] % m or x.shape[3] % m:
            raise IndivisibleDimensions(
                f"spatial size {x.shape[2:]} not divisible by 2**depth = {m}"
            )

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        """(N, 3, H, W) -> (N, 6, H, W) raw regression maps."""
        self.check_input(x)
        p = self.params
        x = np.ascontiguousarray(np.asarray(x, dtype=self.dtype).transpose(0, 2, 3, 1))
        tape = []
        skips = []
        for name, kind, _ in self._specs:
            if kind == "block":
                if name.startswith("dec") and name.endswith("conv0"):
                    skip = skips.pop()
                    tape.append((name + ".cat", "cat", x.shape[3]))
                    x = np.concatenate([x, skip], axis=3)
                x, c1 = F.conv2d_forward(x, p[f"{name}.weight"], p[f"{name}.bias"], 1, 1)
                x, c2 = F.group_norm_forward(
                    x, p[f"{name}.gamma"], p[f"{name}.beta"], self.cfg.groups, self.cfg.eps
                )
                x, c3 = F.mish_forward(x)
                tape.append((name, kind, (c1, c2, c3)))
            elif kind == "down":
                skips.append(x)
                x, c = F.conv2d_forward(x, p[f"{name}.weight"], p[f"{name}.bias"], 2, 1)
                tape.append((name, kind, c))
            elif kind == "up":
                x, c = F.conv_transpose2d_forward(x, p[f"{name}.weight"], p[f"{name}.bias"])
                tape.append((name, kind, c))
            else:
                x, c = F.conv2d_forward(x, p[f"{name}.weight"], p[f"{name}.bias"], 1, 0)
                tape.append((name, kind, c))
        self._tape = tape
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))

    def backward(self, dy):
        """Gradients of every parameter, plus ``"input"`` for the input.

        Skip gradients flow back through the stride-2 convs' inputs: each
        ``down`` layer adds the gradient arriving via its concatenated copy.
        """
        if self._tape is None:
            raise ShapeMismatch("backward called before forward")
        grads: dict[str, np.ndarray] = {}
        skip_grads = []
        g = np.ascontiguousarray(np.asarray(dy, dtype=self.dtype).transpose(0, 2, 3, 1))
        for name, kind, cache in reversed(self._tape):
            if kind == "block":
                c1, c2, c3 = cache
                g = F.mish_backward(g, c3)
                g, grads[f"{name}.gamma"], grads[f"{name}.beta"] = F.group_norm_backward(g, c2)
                g, grads[f"{name}.weight"], grads[f"{name}.bias"] = F.conv2d_backward(g, c1)
            elif kind == "cat":
                split = cache
                skip_grads.append(g[..., split:])
                g = np.ascontiguousarray(g[..., :split])
            elif kind == "down":
                g, grads[f"{name}.weight"], grads[f"{name}.bias"] = F.conv2d_backward(g, cache)
                g = g + skip_grads.pop()
            elif kind == "up":
                g, grads[f"{name}.weight"], grads[f"{name}.bias"] = F.conv_transpose2d_backward(g, cache)
            else:
                g, grads[f"{name}.weight"], grads[f"{name}.bias"] = F.conv2d_backward(g, cache)
        ordered = {k: grads[k] for k in self.params}
        ordered["input"] = np.ascontiguousarray(g.transpose(0, 3, 1, 2))
        return ordered


def unet_forward(params: Parameters, x, cfg: NetworkConfig):
    return UNet(cfg, params).forward(x)


def unet_backward(params: Parameters, x, upstream, cfg: NetworkConfig):
    net = UNet(cfg, params)
    out = net.forward(x)
    if out.shape != np.shape(upstream):
        raise ShapeMismatch(f"upstream gradient {np.shape(upstream)} vs output {out.shape}")
    return net.backward(upstream)


def log_full_scale_parameter_count() -> int:
    cfg = NetworkConfig(depth=4, base_features=64, feature_cap=1024)
    n = int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))
    logger.info("U-Net depth=4 base=64 cap=1024: %d parameters", n)
    return n
