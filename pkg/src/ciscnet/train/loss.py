"""Weighted multi-channel smooth-L1 loss with its analytic gradient."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidConfig, ShapeMismatch


def smooth_l1(pred, target, beta: float = 1.0):
    """Elementwise smooth L1: 0.5 d**2 / beta below beta, |d| - 0.5 beta above."""
    if beta <= 0:
        raise InvalidConfig("smooth_l1 beta must be > 0")
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    d = np.abs(pred - target)
    return np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)


def smooth_l1_grad(pred, target, beta: float = 1.0):
    d = np.asarray(pred) - np.asarray(target)
    return np.where(np.abs(d) < beta, d / beta, np.sign(d))


def total_loss(pred, target, weight_map, omega, beta: float = 1.0):
    """L = sum_i omega_i L_i over the six class channels and their sum.

    Args:
        pred: (N, 6, H, W) raw network output.
        target: (N, 6, H, W) distance-map channels.
        weight_map: (N, H, W) pixel weights.
        omega: 7 weights; ``omega[0]`` scales the channel-sum (cell) term,
            ``omega[1:]`` the per-class terms.
        beta: smooth-L1 transition point.

    Each term is a weighted mean, ``sum(w * l) / sum(w)`` over batch and
    pixels. Returns ``(loss, dloss/dpred)``.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    weight_map = np.asarray(weight_map)
    omega = np.asarray(omega, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 4:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    n, c, h, w = pred.shape
    if weight_map.shape != (n, h, w):
        raise ShapeMismatch(f"weight map {weight_map.shape} vs {(n, h, w)}")
    if omega.shape != (c + 1,):
        raise ShapeMismatch(f"need {c + 1} loss weights, got {omega.shape}")

    wm = weight_map[:, None]
    norm = weight_map.sum()
    per_channel = smooth_l1(pred, target, beta)
    channel_terms = (wm * per_channel).sum(axis=(0, 2, 3)) / norm
    cell_pred = pred.sum(axis=1, keepdims=True)
    cell_target = target.sum(axis=1, keepdims=True)
    cell_term = (wm * smooth_l1(cell_pred, cell_target, beta)).sum() / norm
    loss = omega[0] * cell_term + float(omega[1:] @ channel_terms)

    scale = wm / norm
    grad = omega[1:][None, :, None, None] * scale * smooth_l1_grad(pred, target, beta)
    # The cell term reaches every channel through the channel sum.
    grad = grad + omega[0] * scale * smooth_l1_grad(cell_pred, cell_target, beta)
    return float(loss), grad.astype(pred.dtype, copy=False)


def class_balanced_omega(targets, cell_weight: float = 1.0) -> np.ndarray:
    """omega_0 = ``cell_weight``; class weights inverse to pixel frequency.

    ``targets`` is an iterable of (6, H, W) channel arrays. Class weights are
    normalized to mean 1; classes with no pixels get the mean raw weight of
    the present classes, or 1 if no class is present.
    """
    counts = np.zeros(6)
    for t in targets:
        counts += (np.asarray(t) > 0).sum(axis=(1, 2))
    present = counts > 0
    omega = np.ones(7)
    omega[0] = cell_weight
    if present.any():
        raw = np.zeros(6)
        raw[present] = counts[present].sum() / counts[present]
        raw[~present] = raw[present].mean()
        omega[1:] = raw / raw.mean()
    return omega
