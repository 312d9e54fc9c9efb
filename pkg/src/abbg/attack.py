"""Targeted box-regression loss and the iterative bounded perturbation loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    BoundingBox,
    BoxGenConfig,
    generate_adversarial_boxes,
    select_positive,
)
from .tracker import (
    BoxPrediction,
    SearchWindow,
    TrackerState,
    crop_search_window,
    predict,
    pullback,
    update_state,
)


@dataclass(frozen=True)
class AttackConfig:
    """Budget and schedule of the perturbation loop.

    epsilon bounds the max-norm of the accumulated per-frame perturbation;
    a zero budget degrades the attack to an exact no-op so attacked and clean
    runs coincide. step_size is the per-iteration sign-step magnitude.
    """

    epsilon: float = 10.0
    steps: int = 10
    step_size: float = 1.0
    carry_over: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")


@dataclass
class Perturbation:
    """Additive image delta for one search window, with the window's frame origin."""

    delta: np.ndarray
    origin: tuple[int, int]


@dataclass
class FrameAttackReport:
    clean_box: BoundingBox
    attacked_box: BoundingBox
    loss_per_iteration: list[float] = field(default_factory=list)
    threshold_per_iteration: list[float] = field(default_factory=list)
    final_delta_linf: float = 0.0
    final_delta_l1_mean: float = 0.0


def smoothed_l1(d):
    """Huber-style penalty: quadratic inside |d| < 1, linear outside."""
    d = np.asarray(d, dtype=float)
    out = np.where(np.abs(d) < 1.0, 0.5 * d * d, np.abs(d) - 0.5)
    return float(out) if out.ndim == 0 else out


def smoothed_l1_grad(d):
    """Derivative of smoothed_l1: d inside the quadratic zone, sign(d) outside."""
    d = np.asarray(d, dtype=float)
    out = np.where(np.abs(d) < 1.0, d, np.sign(d))
    return float(out) if out.ndim == 0 else out


def _coordinate_scale(window_extent: tuple[int, int]) -> np.ndarray:
    win_h, win_w = window_extent
    # x and w normalized by window width, y and h by window height
    return np.array([win_w, win_h, win_w, win_h], dtype=float)


def abbg_loss(
    predicted: BoundingBox, targets: np.ndarray, window_extent: tuple[int, int]
) -> tuple[float, np.ndarray]:
    """Mean smoothed-L1 regression of the prediction onto the selected boxes.

    Coordinates are normalized by the window extent before the penalty; the
    loss is summed over the 4 coordinates and averaged over target boxes.
    Returns the value and its gradient with respect to the raw (x, y, w, h);
    the targets are constants.
    """
    targets = np.asarray(targets, dtype=float)
    if targets.ndim != 2 or targets.shape[0] == 0 or targets.shape[1] != 4:
        raise ValueError(f"need a nonempty (n, 4) target array, got shape {targets.shape}")
    scale = _coordinate_scale(window_extent)
    diff = (predicted.as_array()[None, :] - targets) / scale[None, :]
    value = float(np.mean(np.sum(smoothed_l1(diff), axis=1)))
    grad = np.mean(smoothed_l1_grad(diff), axis=0) / scale
    return value, grad


def _project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(delta, -epsilon, epsilon)


def _carried_delta(window: SearchWindow, incoming: Perturbation | None, cfg: AttackConfig) -> np.ndarray:
    delta = np.zeros_like(window.image)
    if incoming is None or not cfg.carry_over:
        return delta
    if incoming.delta.shape != window.image.shape:
        raise ValueError(
            f"carry-over shape mismatch: {incoming.delta.shape} vs {window.image.shape}"
        )
    # Re-apply the previous delta where the two windows overlap in the frame.
    dr = window.origin[0] - incoming.origin[0]
    dc = window.origin[1] - incoming.origin[1]
    h, w = window.image.shape
    src_r0, src_r1 = max(0, dr), min(h, h + dr)
    src_c0, src_c1 = max(0, dc), min(w, w + dc)
    if src_r0 < src_r1 and src_c0 < src_c1:
        dst_r0, dst_c0 = src_r0 - dr, src_c0 - dc
        delta[dst_r0 : dst_r0 + (src_r1 - src_r0), dst_c0 : dst_c0 + (src_c1 - src_c0)] = (
            incoming.delta[src_r0:src_r1, src_c0:src_c1]
        )
    return _project_linf(delta, cfg.epsilon)


def _apply(window: SearchWindow, delta: np.ndarray) -> SearchWindow:
    return SearchWindow(window.origin, np.clip(window.image + delta, 0.0, 255.0))


def _finish_report(clean: BoxPrediction, final: BoxPrediction, delta, losses, thresholds):
    return FrameAttackReport(
        clean_box=clean.box,
        attacked_box=final.box,
        loss_per_iteration=losses,
        threshold_per_iteration=thresholds,
        final_delta_linf=float(np.max(np.abs(delta))),
        final_delta_l1_mean=float(np.mean(np.abs(delta))),
    )


def abbg_attack_frame(
    state: TrackerState,
    frame: np.ndarray,
    attack_cfg: AttackConfig,
    boxgen_cfg: BoxGenConfig,
    rng: np.random.Generator,
    incoming: Perturbation | None = None,
) -> tuple[Perturbation, BoxPrediction, FrameAttackReport]:
    """Attack one frame's search window and poison the tracker state.

    Each iteration predicts on the perturbed window, samples fresh candidate
    boxes around that prediction, keeps the closest ones, and takes a signed
    gradient step on the window pixels toward them, projecting back into the
    epsilon-ball. The state is updated from the final attacked prediction.
    """
    window = crop_search_window(frame, state)
    clean_pred = predict(state, window)
    delta = _carried_delta(window, incoming, attack_cfg)

    losses: list[float] = []
    thresholds: list[float] = []
    for _ in range(attack_cfg.steps):
        pred = predict(state, _apply(window, delta))
        try:
            batch = generate_adversarial_boxes(pred.box, boxgen_cfg, rng)
        except ValueError:
            # Degenerate prediction: give up on this frame, keep the clean result.
            update_state(state, clean_pred.box)
            zero = np.zeros_like(window.image)
            report = _finish_report(clean_pred, clean_pred, zero, losses, thresholds)
            return Perturbation(zero, window.origin), clean_pred, report
        batch = select_positive(batch, boxgen_cfg.retain_fraction)
        loss, box_grad = abbg_loss(pred.box, batch.selected_boxes(), window.image.shape)
        grad = pullback(pred, box_grad)
        delta = _project_linf(delta - attack_cfg.step_size * np.sign(grad), attack_cfg.epsilon)
        losses.append(loss)
        thresholds.append(batch.threshold)

    final_pred = predict(state, _apply(window, delta))
    update_state(state, final_pred.box)
    report = _finish_report(clean_pred, final_pred, delta, losses, thresholds)
    return Perturbation(delta, window.origin), final_pred, report


def random_noise_baseline(
    window: SearchWindow, attack_cfg: AttackConfig, rng: np.random.Generator
) -> Perturbation:
    """Uniform noise in [-epsilon, epsilon] per pixel; the effectiveness control."""
    if attack_cfg.epsilon == 0:
        delta = np.zeros_like(window.image)
    else:
        delta = rng.uniform(-attack_cfg.epsilon, attack_cfg.epsilon, window.image.shape)
    return Perturbation(delta, window.origin)


def untargeted_pgd_baseline(
    state: TrackerState,
    frame: np.ndarray,
    attack_cfg: AttackConfig,
    rng: np.random.Generator,
) -> tuple[Perturbation, BoxPrediction, FrameAttackReport]:
    """Ascend the smoothed-L1 distance from the frame's clean prediction.

    Same projection and clamping contract as the targeted attack, but the loss
    is maximized and no perturbation is carried across frames. ``rng`` is
    accepted for driver symmetry; the loop itself is deterministic.
    """
    del rng
    window = crop_search_window(frame, state)
    clean_pred = predict(state, window)
    target = clean_pred.box.as_array()[None, :]
    delta = np.zeros_like(window.image)

    losses: list[float] = []
    for _ in range(attack_cfg.steps):
        pred = predict(state, _apply(window, delta))
        loss, box_grad = abbg_loss(pred.box, target, window.image.shape)
        grad = pullback(pred, box_grad)
        delta = _project_linf(delta + attack_cfg.step_size * np.sign(grad), attack_cfg.epsilon)
        losses.append(loss)

    final_pred = predict(state, _apply(window, delta))
    update_state(state, final_pred.box)
    report = _finish_report(clean_pred, final_pred, delta, losses, [])
    return Perturbation(delta, window.origin), final_pred, report
