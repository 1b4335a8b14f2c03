import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ciscnet.data import LabeledPatch, count_ground_truth, generate_synthetic
from ciscnet.errors import EmptyAfterFilter, InvalidConfig, OutOfRange, ShapeMismatch, StepOutOfRange
from ciscnet.net.checkpoint import load_checkpoint
from ciscnet.net.gradcheck import check_loss_gradient
from ciscnet.net.unet import NetworkConfig
from ciscnet.train.augment import (
    AugmentConfig,
    augment,
    flip_rotate,
    geometric_augment,
    photometric_augment,
    scale_patch,
)
from ciscnet.train.loop import (
    LOG_COLUMNS,
    TrainConfig,
    filter_and_split,
    normalize_image,
    train_loop,
)
from ciscnet.train.loss import class_balanced_omega, smooth_l1, total_loss
from ciscnet.train.optim import (
    OptimizerConfig,
    ScheduleConfig,
    TrainState,
    lr_at,
    optimizer_step,
    rectification,
)


def empty_patch(h=32, w=32):
    return LabeledPatch(np.full((h, w, 3), 230, np.uint8), np.zeros((h, w), np.uint16),
                        np.zeros((h, w), np.uint8))


class TestSmoothL1:
    def test_values(self):
        assert smooth_l1(np.array(0.0), np.array(0.0)) == 0.0
        assert smooth_l1(np.array(2.0), np.array(0.0), 1.0) == 1.5
        assert smooth_l1(np.array(0.5), np.array(0.0), 1.0) == 0.125

    def test_continuous_at_beta(self):
        beta = 0.3
        lo = smooth_l1(np.array(beta - 1e-9), np.array(0.0), beta)
        hi = smooth_l1(np.array(beta + 1e-9), np.array(0.0), beta)
        assert abs(hi - lo) < 1e-8

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            smooth_l1(np.zeros(3), np.zeros(4))


class TestTotalLoss:
    def test_perfect_prediction(self):
        t = np.random.default_rng(0).uniform(size=(2, 6, 4, 4))
        loss, grad = total_loss(t, t.copy(), np.ones((2, 4, 4)), np.ones(7))
        assert loss == 0.0 and not grad.any()

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        pred = rng.normal(size=(2, 6, 3, 3))
        target = rng.uniform(size=(2, 6, 3, 3))
        omega = np.array([0.0] + [0.7] * 6)
        loss, _ = total_loss(pred, target, np.ones((2, 3, 3)), omega)
        means = []
        for c in range(6):
            vals = []
            for n in range(2):
                for i in range(3):
                    for j in range(3):
                        d = abs(pred[n, c, i, j] - target[n, c, i, j])
                        vals.append(0.5 * d * d if d < 1 else d - 0.5)
            means.append(sum(vals) / len(vals))
        assert abs(loss - 0.7 * sum(means)) < 1e-12

    def test_cell_term(self):
        pred = np.zeros((1, 6, 1, 2))
        pred[0, :, 0, 0] = 0.1  # channel sum 0.6 at pixel 0
        target = np.zeros_like(pred)
        omega = np.zeros(7)
        omega[0] = 1.0
        loss, grad = total_loss(pred, target, np.array([[[1.0, 3.0]]]), omega)
        assert np.isclose(loss, 0.5 * 0.36 * 1.0 / 4.0)
        assert np.allclose(grad[0, :, 0, 0], 0.6 / 4.0) and not grad[0, :, 0, 1].any()

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_gradient(self, seed):
        assert check_loss_gradient(seed=seed, tolerance=1e-6).passed

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6))
    def test_nonnegative_and_homogeneous(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.normal(size=(1, 6, 3, 3))
        target = rng.uniform(size=(1, 6, 3, 3))
        w = rng.choice([1.0, 10.0], size=(1, 3, 3))
        omega = rng.uniform(0.1, 2, size=7)
        l1, g1 = total_loss(pred, target, w, omega)
        l2, g2 = total_loss(pred, target, w, 2 * omega)
        assert l1 > 0
        assert np.isclose(l2, 2 * l1, rtol=1e-12) and np.allclose(g2, 2 * g1, rtol=1e-12)

    def test_bad_shapes(self):
        with pytest.raises(ShapeMismatch):
            total_loss(np.zeros((1, 6, 2, 2)), np.zeros((1, 6, 2, 2)), np.ones((1, 2, 3)), np.ones(7))
        with pytest.raises(ShapeMismatch):
            total_loss(np.zeros((1, 6, 2, 2)), np.zeros((1, 6, 2, 2)), np.ones((1, 2, 2)), np.ones(6))

    def test_class_balanced_omega(self):
        t = np.zeros((6, 4, 4))
        t[0, :2] = 1.0  # 8 px of class 1
        t[1, 0, :2] = 1.0  # 2 px of class 2
        omega = class_balanced_omega([t])
        assert omega[0] == 1.0
        assert np.isclose(omega[1:].mean(), 1.0)
        assert np.isclose(omega[2] / omega[1], 4.0)


class TestOptimizer:
    def quadratic(self, lr, steps=200, **kw):
        w = {"w": np.array([1.0, 1.0])}
        state = TrainState.create(w)
        cfg = OptimizerConfig(lr=lr, **kw)
        for _ in range(steps):
            optimizer_step(state, {"w": 2 * state.params["w"]}, lr, cfg)
        return float(np.sum(state.params["w"] ** 2))

    def test_quadratic(self):
        assert self.quadratic(0.1) <= 0.01 * 2.0

    def test_zero_gradient_fixed_point(self):
        w = {"a": np.array([0.3, -1.2]), "b": np.ones((2, 2))}
        ref = {k: v.copy() for k, v in w.items()}
        state = TrainState.create(w)
        for _ in range(20):
            optimizer_step(state, {k: np.zeros_like(v) for k, v in w.items()}, 0.1, OptimizerConfig())
        assert all(np.array_equal(state.params[k], ref[k]) for k in ref)

    def plain_radam(self, w0, grads_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        rho_inf = 2 / (1 - b2) - 1
        traj = []
        for t in range(1, steps + 1):
            g = grads_fn(w)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1**t)
            rho = rho_inf - 2 * t * b2**t / (1 - b2**t)
            if rho > 4:
                r = math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
                w = w - lr * r * mh / (np.sqrt(v / (1 - b2**t)) + eps)
            else:
                w = w - lr * mh
            traj.append(w.copy())
        return traj

    def test_lookahead_one_is_radam(self):
        grad = lambda w: 2 * w + np.sin(w)  # noqa: E731
        w0 = np.array([1.0, -0.5, 2.0])
        ref = self.plain_radam(w0, grad, 0.05, 50)
        state = TrainState.create({"w": w0.copy()})
        cfg = OptimizerConfig(lr=0.05, lookahead_k=1, lookahead_alpha=1.0)
        for t in range(50):
            optimizer_step(state, {"w": grad(state.params["w"])}, 0.05, cfg)
            assert np.abs(state.params["w"] - ref[t]).max() <= 1e-12
            assert np.array_equal(state.slow["w"], state.params["w"])

    def test_rectification_threshold(self):
        # For beta2 = 0.999, rho_4 = 3.9975 and rho_5 = 4.9960.
        assert [rectification(t, 0.999) is None for t in range(1, 8)] == [True] * 4 + [False] * 3

    def test_shape_mismatch(self):
        state = TrainState.create({"w": np.zeros(2)})
        with pytest.raises(ShapeMismatch):
            optimizer_step(state, {"w": np.zeros(3)}, 0.1, OptimizerConfig())

    def test_invalid_config(self):
        with pytest.raises(InvalidConfig):
            OptimizerConfig(lookahead_k=0)


class TestSchedule:
    s = ScheduleConfig(warmup_steps=10, total_steps=110)

    def test_endpoints(self):
        assert lr_at(0, 1.0, self.s) == 0.0
        assert lr_at(10, 1.0, self.s) == 1.0
        assert abs(lr_at(60, 1.0, self.s) - 0.5) < 1e-15
        assert lr_at(110, 1.0, self.s) == 0.0

    def test_out_of_range(self):
        with pytest.raises(StepOutOfRange):
            lr_at(111, 1.0, self.s)
        with pytest.raises(StepOutOfRange):
            lr_at(-1, 1.0, self.s)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 50), st.integers(1, 400))
    def test_continuity(self, warm, extra):
        s = ScheduleConfig(warmup_steps=warm, total_steps=warm + extra)
        bound = max(1 / warm, math.pi / extra)
        for step in range(s.total_steps):
            assert abs(lr_at(step + 1, 1.0, s) - lr_at(step, 1.0, s)) <= bound + 1e-12

    def test_default_warmup_is_five_percent(self):
        assert TrainConfig(total_steps=2000).schedule.warmup_steps == 100


class TestPreparation:
    def test_split_counts(self):
        patches = generate_synthetic(0, 8, 32, 32) + [empty_patch(), empty_patch()]
        train, val = filter_and_split(patches, 0.8, seed=3)
        assert (len(train), len(val)) == (7, 1)
        again = filter_and_split(patches, 0.8, seed=3)
        assert [p.instances.tobytes() for p in train] == [p.instances.tobytes() for p in again[0]]

    def test_all_empty(self):
        with pytest.raises(EmptyAfterFilter):
            filter_and_split([empty_patch()] * 3)

    def test_normalize(self):
        out = normalize_image(np.array([[[0, 255, 128]]]))
        assert out[0, 0, 0] == -1.0 and out[0, 0, 1] == 1.0
        assert abs(out[0, 0, 2] - 0.0039215686274509665) < 1e-15

    def test_normalize_range(self):
        with pytest.raises(OutOfRange):
            normalize_image(np.array([[[256, 0, 0]]]))


class TestAugment:
    patch = generate_synthetic(5, 1, 48, 48, density=0.8)[0]

    def test_all_disabled_is_identity(self):
        out = augment(self.patch, np.random.default_rng(0), AugmentConfig.disabled())
        assert out is self.patch

    def test_flip_involution(self):
        arrays = [self.patch.image, self.patch.instances, self.patch.classes]
        once = flip_rotate(arrays, 0, True)
        twice = flip_rotate(once, 0, True)
        assert all(np.array_equal(a, b) for a, b in zip(arrays, twice))

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_rotation_preserves_counts(self, k):
        img, inst, cls = flip_rotate([self.patch.image, self.patch.instances, self.patch.classes], k, False)
        rotated = LabeledPatch(img, inst, cls)
        assert np.array_equal(count_ground_truth(rotated), count_ground_truth(self.patch))

    @pytest.mark.parametrize("factor", [0.8, 1.0, 1.25])
    def test_scale_keeps_invariants(self, factor):
        out = scale_patch(self.patch, factor)
        assert out.shape == self.patch.shape
        assert ((out.classes > 0) == (out.instances > 0)).all()
        assert set(np.unique(out.instances)) <= set(np.unique(self.patch.instances))
        if factor == 1.0:
            assert np.array_equal(out.instances, self.patch.instances)

    def test_photometric_touches_image_only(self):
        cfg = AugmentConfig(p_flip_rot=0, p_scale=0, p_color=1, p_blur=1, p_noise=1)
        out = augment(self.patch, np.random.default_rng(3), cfg)
        assert np.array_equal(out.instances, self.patch.instances)
        assert not np.array_equal(out.image, self.patch.image)
        assert out.image.dtype == np.uint8

    def test_photometric_range(self):
        cfg = AugmentConfig(p_color=1, p_blur=1, p_noise=1, noise_sigma=(50, 60))
        img = photometric_augment(self.patch.image, np.random.default_rng(1), cfg)
        assert img.min() >= 0 and img.max() <= 255

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10**6))
    def test_geometric_invariants(self, seed):
        cfg = AugmentConfig(p_flip_rot=1, p_scale=0.5)
        out = geometric_augment(self.patch, np.random.default_rng(seed), cfg)
        assert ((out.classes > 0) == (out.instances > 0)).all()
        for lab, c in out.instance_classes().items():
            assert self.patch.instance_classes()[lab] == c

    def test_seeded(self):
        cfg = AugmentConfig(p_flip_rot=1, p_scale=1, p_color=1, p_blur=1, p_noise=1)
        a = augment(self.patch, np.random.default_rng(9), cfg)
        b = augment(self.patch, np.random.default_rng(9), cfg)
        assert a.image.tobytes() == b.image.tobytes() and a.instances.tobytes() == b.instances.tobytes()


class TestLoop:
    net = NetworkConfig(depth=1, base_features=8, seed=0)

    def test_smoke_one_step(self, tmp_path):
        patches = generate_synthetic(2, 1, 32, 32)
        cfg = TrainConfig(total_steps=1, batch_size=1, augment=AugmentConfig.disabled())
        res = train_loop(patches, [], self.net, cfg, out_dir=tmp_path)
        assert math.isfinite(res.best_val_loss)
        params, net_cfg, extra = load_checkpoint(tmp_path / "ckpt")
        assert net_cfg == self.net and set(params) == set(res.best_params)
        with open(tmp_path / "train_log.csv") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 2 and rows[1][4] == ""

    def test_deterministic_with_augmentation(self, tmp_path):
        patches = generate_synthetic(3, 3, 32, 32)
        cfg = TrainConfig(total_steps=6, batch_size=2, eval_every=2, seed=4)
        a = train_loop(patches[:2], patches[2:], self.net, cfg, out_dir=tmp_path / "a")
        b = train_loop(patches[:2], patches[2:], self.net, cfg, out_dir=tmp_path / "b")
        assert a.log == b.log
        assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
        assert (tmp_path / "a" / "ckpt" / "weights.bin").read_bytes() == (tmp_path / "b" / "ckpt" / "weights.bin").read_bytes()

    def test_loss_decreases(self):
        patches = generate_synthetic(1, 2, 32, 32)
        cfg = TrainConfig(total_steps=40, batch_size=2, augment=AugmentConfig.disabled(),
                          optimizer=OptimizerConfig(lr=3e-3))
        res = train_loop(patches, [], self.net, cfg)
        assert res.final_train_loss < 0.9 * res.initial_train_loss

    def test_config_roundtrip(self):
        cfg = TrainConfig(loss_weights=(1.0,) * 7, total_steps=5)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_invalid_config(self):
        with pytest.raises(InvalidConfig):
            TrainConfig(split_ratio=1.0)
        with pytest.raises(InvalidConfig):
            TrainConfig(total_steps=10, warmup_steps=20)
        with pytest.raises(InvalidConfig):
            TrainConfig(loss_weights=(0.0,) * 7)
