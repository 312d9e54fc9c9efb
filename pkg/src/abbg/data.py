"""Synthetic sequences with exact ground truth, plus portable pixmap I/O."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import BoundingBox


class SequenceFormatError(ValueError):
    """Raised when an on-disk sequence or image file is malformed."""


@dataclass
class Sequence:
    name: str
    frames: list[np.ndarray]
    gt: list[BoundingBox]

    def __post_init__(self):
        if len(self.frames) != len(self.gt) or len(self.frames) < 2:
            raise ValueError(
                f"need matching frames/gt of length >= 2, got {len(self.frames)}/{len(self.gt)}"
            )
        shape = self.frames[0].shape
        for i, frame in enumerate(self.frames):
            if frame.shape != shape:
                raise ValueError(f"frame {i} shape {frame.shape} differs from {shape}")
        height, width = shape[0], shape[1]
        for i, box in enumerate(self.gt):
            if box.x + box.w <= 0 or box.y + box.h <= 0 or box.x >= width or box.y >= height:
                raise ValueError(f"gt box {i} does not intersect the {height}x{width} frame")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class SynthConfig:
    """Textured rectangle drifting over a textured background.

    The trajectory reflects off the frame borders so the object never leaves
    the frame; per-frame Gaussian pixel noise is added and frames are rounded
    to integer values. Textures come from ``texture_seed``; the caller's rng
    only drives the noise.
    """

    frame_size: tuple[int, int] = (128, 128)
    object_size: tuple[int, int] = (16, 16)
    velocity: tuple[float, float] = (1.0, 1.0)
    frames: int = 100
    texture_seed: int = 0
    noise_sigma: float = 2.0
    motion: str = "linear"

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError(f"need at least 2 frames, got {self.frames}")
        if self.motion not in ("linear", "sinusoidal"):
            raise ValueError(f"unknown motion kind {self.motion!r}")
        if self.object_size[0] >= self.frame_size[0] or self.object_size[1] >= self.frame_size[1]:
            raise ValueError(f"object {self.object_size} does not fit in frame {self.frame_size}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def _reflect(value: float, limit: float) -> float:
    if limit <= 0:
        return 0.0
    period = 2.0 * limit
    m = value % period
    return m if m <= limit else period - m


SINUSOID_PERIOD = 50.0


def synth_sequence(cfg: SynthConfig, rng: np.random.Generator, name: str = "synth") -> Sequence:
    """Render the sequence; ground-truth boxes are exact by construction."""
    frame_h, frame_w = cfg.frame_size
    obj_h, obj_w = cfg.object_size
    texture_rng = np.random.default_rng(cfg.texture_seed)
    background = 128.0 + texture_rng.uniform(-32.0, 32.0, (frame_h, frame_w))
    pattern = texture_rng.uniform(0.0, 255.0, (obj_h, obj_w))

    limit_y = float(frame_h - obj_h)
    limit_x = float(frame_w - obj_w)
    start_y = texture_rng.uniform(0.2, 0.8) * limit_y
    start_x = texture_rng.uniform(0.2, 0.8) * limit_x
    vy, vx = cfg.velocity

    frames: list[np.ndarray] = []
    gt: list[BoundingBox] = []
    for t in range(cfg.frames):
        if cfg.motion == "linear":
            y = _reflect(start_y + vy * t, limit_y)
            x = _reflect(start_x + vx * t, limit_x)
        else:
            amp_y = vy * SINUSOID_PERIOD / (2.0 * math.pi)
            y = _reflect(start_y + amp_y * math.sin(2.0 * math.pi * t / SINUSOID_PERIOD), limit_y)
            x = _reflect(start_x + vx * t, limit_x)
        iy = int(math.floor(y + 0.5))
        ix = int(math.floor(x + 0.5))
        frame = background.copy()
        frame[iy : iy + obj_h, ix : ix + obj_w] = pattern
        if cfg.noise_sigma > 0:
            frame = frame + rng.normal(0.0, cfg.noise_sigma, frame.shape)
        frames.append(np.rint(np.clip(frame, 0.0, 255.0)))
        gt.append(BoundingBox(float(ix), float(iy), float(obj_w), float(obj_h)))
    return Sequence(name=name, frames=frames, gt=gt)


def write_ppm(image: np.ndarray, path) -> None:
    """Binary P6 pixmap, max value 255; grayscale input is written as replicated channels."""
    arr = np.asarray(image, dtype=float)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {arr.shape}")
    data = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    height, width = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_ppm_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SequenceFormatError("truncated pixmap header")
        tokens.append(blob[start:pos])
    return tokens, pos + 1  # header ends with a single whitespace byte


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 pixmap as an (H, W, 3) float array in [0, 255]."""
    blob = Path(path).read_bytes()
    tokens, offset = _read_ppm_tokens(blob, 4)
    magic, width_s, height_s, maxval_s = tokens
    if magic != b"P6":
        raise SequenceFormatError(f"unsupported pixmap variant {magic!r} (only P6)")
    try:
        width, height, maxval = int(width_s), int(height_s), int(maxval_s)
    except ValueError as exc:
        raise SequenceFormatError(f"malformed pixmap header in {path}") from exc
    if maxval != 255:
        raise SequenceFormatError(f"unsupported max value {maxval} (only 255)")
    expected = width * height * 3
    raster = blob[offset : offset + expected]
    if len(raster) != expected:
        raise SequenceFormatError(f"pixmap raster truncated: {len(raster)} of {expected} bytes")
    return (
        np.frombuffer(raster, dtype=np.uint8).astype(float).reshape(height, width, 3)
    )


def _parse_groundtruth(path: Path) -> list[BoundingBox]:
    boxes: list[BoundingBox] = []
    lines = path.read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise SequenceFormatError(
                f"{path}: parse error at line {lineno}: expected 'x,y,w,h', got {line!r}"
            )
        try:
            x, y, w, h = (float(p) for p in parts)
        except ValueError as exc:
            raise SequenceFormatError(
                f"{path}: parse error at line {lineno}: non-numeric field in {line!r}"
            ) from exc
        try:
            boxes.append(BoundingBox(x, y, w, h))
        except ValueError as exc:
            raise SequenceFormatError(f"{path}: invalid box at line {lineno}: {exc}") from exc
    return boxes


def _collapse_gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 3 and np.array_equal(image[:, :, 0], image[:, :, 1]) and np.array_equal(
        image[:, :, 0], image[:, :, 2]
    ):
        return image[:, :, 0]
    return image


def load_sequence(directory) -> Sequence:
    """Load ``<dir>/frames/*.ppm`` plus ``<dir>/groundtruth.txt``.

    Frame files are ordered by the integer in their stem. Channel-replicated
    grayscale frames collapse back to 2-D arrays so a written synthetic
    sequence loads value-identical.
    """
    root = Path(directory)
    frames_dir = root / "frames"
    gt_path = root / "groundtruth.txt"
    if not frames_dir.is_dir():
        raise SequenceFormatError(f"{root}: missing frames/ directory")
    if not gt_path.is_file():
        raise SequenceFormatError(f"{root}: missing groundtruth.txt")

    entries = []
    for p in frames_dir.iterdir():
        if not p.is_file():
            continue
        if p.suffix.lower() != ".ppm":
            raise SequenceFormatError(f"{p}: unsupported image format (only .ppm)")
        match = re.search(r"\d+", p.stem)
        if match is None:
            raise SequenceFormatError(f"{p}: frame file name carries no frame number")
        entries.append((int(match.group()), p))
    entries.sort()

    boxes = _parse_groundtruth(gt_path)
    if len(entries) != len(boxes):
        raise SequenceFormatError(
            f"{root}: {len(entries)} frames but {len(boxes)} ground-truth lines"
        )
    frames = [_collapse_gray(read_ppm(p)) for _, p in entries]
    return Sequence(name=root.name, frames=frames, gt=boxes)


def write_sequence(seq: Sequence, directory) -> None:
    """Write the standard layout: frames/%08d.ppm and groundtruth.txt."""
    root = Path(directory)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        write_ppm(frame, root / "frames" / f"{i:08d}.ppm")
    lines = [f"{b.x:.6g},{b.y:.6g},{b.w:.6g},{b.h:.6g}" for b in seq.gt]
    (root / "groundtruth.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
