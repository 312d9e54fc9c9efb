"""Differentiable template-matching tracker with an exact pixel-level backward pass.

The forward path is zero-normalized cross-correlation over a search window,
soft-argmax localization, and a response-spread size head. Every output box
coordinate is a smooth function of the window pixels, and ``pullback`` returns
the exact chain-rule gradient of a box cotangent with respect to those pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import BoundingBox

VAR_EPS = 1e-6
MIN_TEMPLATE_SIDE = 4
WINDOW_FACTOR = 3

_LUMA = (0.299, 0.587, 0.114)


def to_gray(image: np.ndarray) -> np.ndarray:
    """Collapse an (H, W, 3) image to luma; 2-D images pass through as float."""
    arr = np.asarray(image, dtype=float)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] == 3:
        return _LUMA[0] * arr[:, :, 0] + _LUMA[1] * arr[:, :, 1] + _LUMA[2] * arr[:, :, 2]
    if arr.ndim == 3 and arr.shape[2] == 1:
        return arr[:, :, 0]
    raise ValueError(f"expected (H, W) or (H, W, 1|3) image, got shape {arr.shape}")


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclass
class SearchWindow:
    """Cropped tracker input; origin is the window's (row, col) in frame coords."""

    origin: tuple[int, int]
    image: np.ndarray


@dataclass
class TrackerState:
    """Per-target tracker state. The template is fixed after initialization.

    ``spread_ref`` is the response spread measured on the initialization frame;
    the size head treats twice this value as the spread that maps to the top of
    the size range, which pins the size factor near 1 while the match quality
    stays at its initial level.
    """

    template: np.ndarray
    prev_box: BoundingBox
    size_damping: float = 0.3
    temperature: float = 10.0
    size_range: tuple[float, float] = (0.5, 1.5)
    spread_ref: float = 1.0


@dataclass
class BoxPrediction:
    """Predicted box plus every intermediate needed for the backward pass."""

    box: BoundingBox
    score_map: np.ndarray
    probability_map: np.ndarray
    window: SearchWindow = None
    template_centered: np.ndarray = None
    template_norm: float = 0.0
    patch_mean: np.ndarray = None
    patch_sigma: np.ndarray = None
    row_mean: float = 0.0
    col_mean: float = 0.0
    spread: float = 0.0
    size_factor: float = 1.0
    size_gate_open: bool = True
    spread_ref: float = 1.0
    size_range: tuple[float, float] = (0.5, 1.5)
    temperature: float = 10.0


def _crop_window_at(gray: np.ndarray, center_rc: tuple[float, float], t_h: int, t_w: int):
    win_h, win_w = WINDOW_FACTOR * t_h, WINDOW_FACTOR * t_w
    origin_r = _round_half_up(center_rc[0]) - win_h // 2
    origin_c = _round_half_up(center_rc[1]) - win_w // 2
    rows = np.clip(origin_r + np.arange(win_h), 0, gray.shape[0] - 1)
    cols = np.clip(origin_c + np.arange(win_w), 0, gray.shape[1] - 1)
    return SearchWindow(origin=(origin_r, origin_c), image=gray[np.ix_(rows, cols)])


def init_state(
    frame: np.ndarray,
    gt_box: BoundingBox,
    size_damping: float = 0.3,
    temperature: float = 10.0,
    size_range: tuple[float, float] = (0.5, 1.5),
) -> TrackerState:
    """Extract the template at the rounded ground-truth box and calibrate the size head."""
    if not 0 < size_damping <= 1:
        raise ValueError(f"size_damping must be in (0, 1], got {size_damping}")
    gray = to_gray(frame)
    row = _round_half_up(gt_box.y)
    col = _round_half_up(gt_box.x)
    t_h = _round_half_up(gt_box.h)
    t_w = _round_half_up(gt_box.w)
    if t_h < MIN_TEMPLATE_SIDE or t_w < MIN_TEMPLATE_SIDE:
        raise ValueError(f"template {t_h}x{t_w} below minimum {MIN_TEMPLATE_SIDE}x{MIN_TEMPLATE_SIDE}")
    if row < 0 or col < 0 or row + t_h > gray.shape[0] or col + t_w > gray.shape[1]:
        raise ValueError(f"box {gt_box} leaves the {gray.shape} frame after rounding")
    template = gray[row : row + t_h, col : col + t_w].copy()

    state = TrackerState(
        template=template,
        prev_box=gt_box,
        size_damping=size_damping,
        temperature=temperature,
        size_range=size_range,
    )
    # Calibration pass: spread of the response on the init frame's own window.
    cy = gt_box.y + gt_box.h / 2.0
    cx = gt_box.x + gt_box.w / 2.0
    window = _crop_window_at(gray, (cy, cx), t_h, t_w)
    score = ncc_map(window.image, template)
    _, _, prob = soft_argmax(score, temperature)
    state.spread_ref = max(_spread_about_mean(prob), 1e-9)
    return state


def crop_search_window(frame: np.ndarray, state: TrackerState) -> SearchWindow:
    """Window of 3x the template extent centered on the previous prediction.

    Out-of-frame pixels are filled by edge replication.
    """
    gray = to_gray(frame)
    t_h, t_w = state.template.shape
    cx, cy = state.prev_box.center
    return _crop_window_at(gray, (cy, cx), t_h, t_w)


def ncc_map(window: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Zero-normalized cross-correlation of the template at every window offset."""
    score, _ = _ncc_with_context(window, template)
    return score


def _ncc_with_context(window: np.ndarray, template: np.ndarray):
    window = np.asarray(window, dtype=float)
    template = np.asarray(template, dtype=float)
    t_h, t_w = template.shape
    if window.shape[0] < t_h or window.shape[1] < t_w:
        raise ValueError(f"template {template.shape} larger than window {window.shape}")
    n = t_h * t_w
    centered = template - template.mean()
    template_norm = math.sqrt(float(np.sum(centered * centered)) + VAR_EPS)

    patches = sliding_window_view(window, (t_h, t_w))
    patch_sum = patches.sum(axis=(-2, -1))
    patch_mean = patch_sum / n
    # sum of (P - mean)^2 = sum P^2 - n * mean^2; tiny negatives from rounding
    # are absorbed by the variance guard.
    sq = np.einsum("uvab,uvab->uv", patches, patches)
    var = sq - patch_sum * patch_mean
    patch_sigma = np.sqrt(np.maximum(var, 0.0) + VAR_EPS)
    num = np.einsum("uvab,ab->uv", patches, centered)
    score = num / (patch_sigma * template_norm)
    return score, (centered, template_norm, patch_mean, patch_sigma)


def soft_argmax(score: np.ndarray, temperature: float) -> tuple[float, float, np.ndarray]:
    """Expected (row, col) under softmax(temperature * score), max-stabilized."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = temperature * (score - score.max())
    p = np.exp(z)
    p /= p.sum()
    rows = np.arange(score.shape[0], dtype=float)
    cols = np.arange(score.shape[1], dtype=float)
    row = float(p.sum(axis=1) @ rows)
    col = float(p.sum(axis=0) @ cols)
    return row, col, p


def _spread_about_mean(prob: np.ndarray, row_mean: float = None, col_mean: float = None) -> float:
    rows = np.arange(prob.shape[0], dtype=float)
    cols = np.arange(prob.shape[1], dtype=float)
    p_row = prob.sum(axis=1)
    p_col = prob.sum(axis=0)
    if row_mean is None:
        row_mean = float(p_row @ rows)
    if col_mean is None:
        col_mean = float(p_col @ cols)
    return float(p_row @ (rows - row_mean) ** 2 + p_col @ (cols - col_mean) ** 2)


def uniform_spread(shape: tuple[int, int]) -> float:
    """Spread of the uniform distribution over an (m, n) grid, closed form."""
    m, n = shape
    return (m * m - 1) / 12.0 + (n * n - 1) / 12.0


def _size_factor(spread: float, f_min: float, f_max: float, ref_spread: float):
    gate_open = spread < 2.0 * ref_spread
    ratio = min(spread / (2.0 * ref_spread), 1.0)
    return f_min + (f_max - f_min) * ratio, gate_open


def spread_size_head(
    prob: np.ndarray,
    base_box: BoundingBox,
    f_min: float,
    f_max: float,
    ref_spread: float = None,
) -> tuple[float, float]:
    """Scale the base box by a factor driven by the response spread.

    The spread is the probability-weighted squared distance from the map's
    soft-argmax location. Without an explicit reference it is normalized by
    the uniform-grid spread (a fully diffuse response maps to f_max, a point
    response to f_min); a tracker passes its calibrated reference instead.
    """
    spread = _spread_about_mean(prob)
    if ref_spread is None:
        ref_spread = uniform_spread(prob.shape) / 2.0
    factor, _ = _size_factor(spread, f_min, f_max, ref_spread)
    return base_box.w * factor, base_box.h * factor


def predict(state: TrackerState, window: SearchWindow) -> BoxPrediction:
    """Localize the template in the window; every box coordinate stays differentiable.

    The reported size is the template extent scaled by the spread head, so size
    errors do not compound through the state update.
    """
    t_h, t_w = state.template.shape
    score, (centered, template_norm, patch_mean, patch_sigma) = _ncc_with_context(
        window.image, state.template
    )
    row, col, prob = soft_argmax(score, state.temperature)
    spread = _spread_about_mean(prob, row, col)
    f_min, f_max = state.size_range
    factor, gate_open = _size_factor(spread, f_min, f_max, state.spread_ref)

    w = t_w * factor
    h = t_h * factor
    center_y = window.origin[0] + row + t_h / 2.0
    center_x = window.origin[1] + col + t_w / 2.0
    box = BoundingBox(center_x - w / 2.0, center_y - h / 2.0, w, h)
    return BoxPrediction(
        box=box,
        score_map=score,
        probability_map=prob,
        window=window,
        template_centered=centered,
        template_norm=template_norm,
        patch_mean=patch_mean,
        patch_sigma=patch_sigma,
        row_mean=row,
        col_mean=col,
        spread=spread,
        size_factor=factor,
        size_gate_open=gate_open,
        spread_ref=state.spread_ref,
        size_range=state.size_range,
        temperature=state.temperature,
    )


def pullback(prediction: BoxPrediction, box_cotangent) -> np.ndarray:
    """Gradient of <cotangent, box> with respect to every window pixel.

    Exact reverse-mode chain rule through the box assembly, the size head, the
    softmax expectation, and the normalized correlation. The spread term needs
    no adjoint through the soft-argmax means because the probability-weighted
    deviations about the mean sum to zero.
    """
    if prediction.window is None or prediction.patch_sigma is None:
        raise ValueError("prediction carries no intermediates; produce it with predict()")
    gx, gy, gw, gh = (float(g) for g in box_cotangent)
    t_h, t_w = prediction.template_centered.shape
    f_min, f_max = prediction.size_range

    g_col = gx
    g_row = gy
    g_factor = t_w * (gw - 0.5 * gx) + t_h * (gh - 0.5 * gy)
    if prediction.size_gate_open:
        g_spread = g_factor * (f_max - f_min) / (2.0 * prediction.spread_ref)
    else:
        g_spread = 0.0

    score = prediction.score_map
    prob = prediction.probability_map
    mu, mv = score.shape
    rows = np.arange(mu, dtype=float)[:, None]
    cols = np.arange(mv, dtype=float)[None, :]
    dist_sq = (rows - prediction.row_mean) ** 2 + (cols - prediction.col_mean) ** 2
    g_prob = g_row * rows + g_col * cols + g_spread * dist_sq
    g_score = prediction.temperature * prob * (g_prob - float(np.sum(prob * g_prob)))

    sigma = prediction.patch_sigma
    alpha = g_score / (sigma * prediction.template_norm)
    beta = g_score * score / (sigma * sigma)
    window = prediction.window.image
    mean = prediction.patch_mean
    grad = np.zeros_like(window)
    centered = prediction.template_centered
    for a in range(t_h):
        for b in range(t_w):
            grad[a : a + mu, b : b + mv] += alpha * centered[a, b] - beta * (
                window[a : a + mu, b : b + mv] - mean
            )
    return grad


def update_state(state: TrackerState, predicted: BoundingBox) -> TrackerState:
    """Recenter on the prediction; blend sizes with the damping factor."""
    lam = state.size_damping
    cx, cy = predicted.center
    w = (1 - lam) * state.prev_box.w + lam * predicted.w
    h = (1 - lam) * state.prev_box.h + lam * predicted.h
    state.prev_box = BoundingBox(cx - w / 2.0, cy - h / 2.0, w, h)
    return state


def finite_diff_check(
    state: TrackerState,
    window: SearchWindow,
    cotangent,
    step: float = 0.5,
    probes: int = 100,
    rng: np.random.Generator = None,
    forward=None,
    backward=None,
) -> float:
    """Worst relative error of the analytic gradient vs central differences.

    Probes random window pixels; the relative error uses
    max(|analytic|, |numeric|, 1e-8) as denominator. ``forward``/``backward``
    default to the tracker's predict/pullback and exist so tests can swap in
    toy heads.
    """
    if probes < 1:
        raise ValueError(f"probes must be >= 1, got {probes}")
    if rng is None:
        rng = np.random.default_rng(0)
    if forward is None:
        forward = lambda win: predict(state, win)
    if backward is None:
        backward = pullback
    cot = np.asarray(cotangent, dtype=float)

    prediction = forward(window)
    grad = backward(prediction, cot)

    def objective(image: np.ndarray) -> float:
        box = forward(SearchWindow(window.origin, image)).box
        return float(cot @ box.as_array())

    worst = 0.0
    height, width = window.image.shape
    for _ in range(probes):
        i = int(rng.integers(height))
        j = int(rng.integers(width))
        plus = window.image.copy()
        plus[i, j] += step
        minus = window.image.copy()
        minus[i, j] -= step
        numeric = (objective(plus) - objective(minus)) / (2.0 * step)
        analytic = float(grad[i, j])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
