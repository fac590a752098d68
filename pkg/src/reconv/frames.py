"""Frame acquisition and preprocessing.

Grayscale conversion, block-mean downsampling, two deterministic synthetic
sources (a moving sprite and a paddle-catch toy environment), binary PGM
file ingestion, and frame-to-frame change statistics.

All sources are pure functions of (config, step) or (state, action), with
every random choice derived from an explicit seed, so streams are identical
across runs and platforms.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .region import diff_bounding_rect, diff_tiled_tight

__all__ = [
    "Frame",
    "SpriteConfig",
    "PaddleEnvState",
    "ChangeStats",
    "LEFT",
    "STAY",
    "RIGHT",
    "to_grayscale",
    "downsample",
    "sprite_frame",
    "paddle_init",
    "paddle_render",
    "paddle_step",
    "read_pgm",
    "write_pgm",
    "read_pgm_sequence",
    "change_stats",
    "FrameSourceError",
    "MalformedPgmError",
    "UnsupportedMaxvalError",
    "DimensionDriftError",
    "EmptySourceError",
    "SourceExhaustedError",
]


class FrameSourceError(Exception):
    """Base class for frame ingestion failures."""


class MalformedPgmError(FrameSourceError):
    """PGM header or payload does not follow the P5 format."""


class UnsupportedMaxvalError(FrameSourceError):
    """PGM maxval is not 255 (only 8-bit grayscale is supported)."""


class DimensionDriftError(FrameSourceError):
    """A frame in a sequence has different dimensions than the first."""


class EmptySourceError(FrameSourceError):
    """A directory or stream yielded no frames at all."""


class SourceExhaustedError(FrameSourceError):
    """A stream ended before the requested number of frames."""


@dataclass(frozen=True, eq=False)
class Frame:
    """A grayscale frame: uint8 intensities, shape (rows, cols), immutable."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise ValueError(f"frame must be a non-empty 2-D array, got {px.shape}")
        if px.dtype != np.uint8:
            if not np.issubdtype(px.dtype, np.integer):
                raise ValueError(f"frame pixels must be integers, got {px.dtype}")
            if px.min() < 0 or px.max() > 255:
                raise ValueError("frame intensities must lie in [0, 255]")
            px = px.astype(np.uint8)
        else:
            px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def rows(self) -> int:
        return self.pixels.shape[0]

    @property
    def cols(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


def to_grayscale(r: np.ndarray, g: np.ndarray, b: np.ndarray) -> Frame:
    """Combine three channel planes into a luma frame:
    round(0.299R + 0.587G + 0.114B), clamped to [0, 255]."""
    r, g, b = (np.asarray(p) for p in (r, g, b))
    if not (r.shape == g.shape == b.shape) or r.ndim != 2:
        raise ValueError(f"channel shapes differ: {r.shape}, {g.shape}, {b.shape}")
    luma = 0.299 * r + 0.587 * g + 0.114 * b
    return Frame(np.clip(np.rint(luma), 0, 255).astype(np.uint8))


def downsample(f: Frame, d: int) -> Frame:
    """Shrink by an integer factor: each output pixel is the rounded mean of
    one d x d block. Trailing rows/cols that do not fill a block are dropped."""
    if d < 1:
        raise ValueError("downsample factor must be >= 1")
    if d == 1:
        return f
    rows, cols = f.rows // d, f.cols // d
    if rows == 0 or cols == 0:
        raise ValueError(f"factor {d} exceeds frame dims {f.rows}x{f.cols}")
    blocks = f.pixels[: rows * d, : cols * d].reshape(rows, d, cols, d)
    means = blocks.mean(axis=(1, 3), dtype=np.float64)
    return Frame(np.clip(np.rint(means), 0, 255).astype(np.uint8))


# ------------------------------------------------------------ sprite source


@dataclass(frozen=True)
class SpriteConfig:
    """A solid rectangle moving with constant velocity, wrapping at borders."""

    rows: int
    cols: int
    sprite_rows: int = 5
    sprite_cols: int = 5
    velocity: tuple[int, int] = (0, 1)
    start: tuple[int, int] = (0, 0)
    intensity: int = 255
    background: int = 0

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("frame dims must be positive")
        if not (1 <= self.sprite_rows <= self.rows and 1 <= self.sprite_cols <= self.cols):
            raise ValueError("sprite must fit inside the frame")
        if not (0 <= self.start[0] < self.rows and 0 <= self.start[1] < self.cols):
            raise ValueError("start position outside frame")
        for v in (self.intensity, self.background):
            if not 0 <= v <= 255:
                raise ValueError("intensities must lie in [0, 255]")
        if self.intensity == self.background:
            raise ValueError("sprite intensity must differ from background")


def sprite_frame(cfg: SpriteConfig, t: int) -> Frame:
    """Frame at step t: sprite at start + t * velocity (modulo frame dims)."""
    if t < 0:
        raise ValueError("step index must be >= 0")
    px = np.full((cfg.rows, cfg.cols), cfg.background, dtype=np.uint8)
    r0 = (cfg.start[0] + t * cfg.velocity[0]) % cfg.rows
    c0 = (cfg.start[1] + t * cfg.velocity[1]) % cfg.cols
    rr = (r0 + np.arange(cfg.sprite_rows)) % cfg.rows
    cc = (c0 + np.arange(cfg.sprite_cols)) % cfg.cols
    px[np.ix_(rr, cc)] = cfg.intensity
    return Frame(px)


# ------------------------------------------------------------ paddle source

LEFT, STAY, RIGHT = 0, 1, 2

_BALL_INTENSITY = 255
_PADDLE_INTENSITY = 128


@dataclass(frozen=True)
class PaddleEnvState:
    """Paddle-catch toy environment: a ball falls from the top; the paddle
    slides along the bottom row; catching scores +1, missing -1.

    The state is a value — :func:`paddle_step` returns a new one — and every
    respawn column comes from a counter-indexed seeded generator, so the
    trajectory is a pure function of (seed, action sequence).
    """

    rows: int
    cols: int
    ball_row: int
    ball_col: int
    fall_rate: int
    paddle_col: int
    paddle_width: int
    seed: int
    spawns: int
    catches: int = 0
    misses: int = 0

    def __post_init__(self) -> None:
        if self.rows < 2 or self.cols < 1:
            raise ValueError("environment needs >= 2 rows and >= 1 col")
        if not (1 <= self.paddle_width <= self.cols):
            raise ValueError("paddle width must fit the frame")
        if not (0 <= self.paddle_col <= self.cols - self.paddle_width):
            raise ValueError("paddle outside frame")
        if not (0 <= self.ball_row < self.rows and 0 <= self.ball_col < self.cols):
            raise ValueError("ball outside frame")
        if self.fall_rate < 1:
            raise ValueError("fall rate must be >= 1")


def _spawn_col(seed: int, spawn_index: int, cols: int) -> int:
    rng = np.random.default_rng(np.random.SeedSequence((seed, spawn_index)))
    return int(rng.integers(0, cols))


def paddle_init(
    rows: int,
    cols: int,
    paddle_width: int | None = None,
    fall_rate: int = 1,
    seed: int = 0,
) -> PaddleEnvState:
    width = max(1, cols // 8) if paddle_width is None else paddle_width
    return PaddleEnvState(
        rows=rows,
        cols=cols,
        ball_row=0,
        ball_col=_spawn_col(seed, 0, cols),
        fall_rate=fall_rate,
        paddle_col=(cols - width) // 2,
        paddle_width=width,
        seed=seed,
        spawns=1,
    )


def paddle_render(state: PaddleEnvState) -> Frame:
    px = np.zeros((state.rows, state.cols), dtype=np.uint8)
    px[state.rows - 1, state.paddle_col : state.paddle_col + state.paddle_width] = (
        _PADDLE_INTENSITY
    )
    px[state.ball_row, state.ball_col] = _BALL_INTENSITY
    return Frame(px)


def paddle_step(
    state: PaddleEnvState, action: int
) -> tuple[PaddleEnvState, Frame, float, bool]:
    """Advance one step: move the paddle, drop the ball, settle the episode
    if the ball reaches the bottom row. Returns (state, frame, reward, done);
    the frame renders the returned state (post-respawn when done)."""
    if action not in (LEFT, STAY, RIGHT):
        raise ValueError(f"action must be one of {LEFT}/{STAY}/{RIGHT}, got {action}")
    paddle_col = min(
        max(state.paddle_col + (action - 1), 0), state.cols - state.paddle_width
    )
    ball_row = state.ball_row + state.fall_rate
    if ball_row >= state.rows - 1:
        caught = paddle_col <= state.ball_col < paddle_col + state.paddle_width
        new = replace(
            state,
            paddle_col=paddle_col,
            ball_row=0,
            ball_col=_spawn_col(state.seed, state.spawns, state.cols),
            spawns=state.spawns + 1,
            catches=state.catches + int(caught),
            misses=state.misses + int(not caught),
        )
        return new, paddle_render(new), (1.0 if caught else -1.0), True
    new = replace(state, paddle_col=paddle_col, ball_row=ball_row)
    return new, paddle_render(new), 0.0, False


# -------------------------------------------------------------- PGM I/O


_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pgm(data: bytes, name: str) -> Frame:
    pos = 0
    tokens = []
    for _ in range(4):  # magic, cols, rows, maxval
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise MalformedPgmError(f"{name}: truncated header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise MalformedPgmError(f"{name}: not a binary PGM (magic {tokens[0]!r})")
    try:
        cols, rows, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise MalformedPgmError(f"{name}: non-numeric header fields") from None
    if cols < 1 or rows < 1:
        raise MalformedPgmError(f"{name}: non-positive dimensions {cols}x{rows}")
    if maxval != 255:
        raise UnsupportedMaxvalError(f"{name}: maxval {maxval} (only 255 supported)")
    if pos >= len(data) or data[pos : pos + 1] not in (b"\n", b" ", b"\t", b"\r"):
        raise MalformedPgmError(f"{name}: missing whitespace after maxval")
    pos += 1
    payload = data[pos:]
    if len(payload) != rows * cols:
        raise MalformedPgmError(
            f"{name}: expected {rows * cols} pixel bytes, found {len(payload)}"
        )
    px = np.frombuffer(payload, dtype=np.uint8).reshape(rows, cols)
    return Frame(px)


def read_pgm(path: str | Path) -> Frame:
    """Read one binary (P5) PGM file with maxval 255."""
    path = Path(path)
    return _parse_pgm(path.read_bytes(), path.name)


def write_pgm(frame: Frame, path: str | Path) -> None:
    """Write a frame as binary PGM; read_pgm reproduces it exactly."""
    header = f"P5\n{frame.cols} {frame.rows}\n255\n".encode("ascii")
    Path(path).write_bytes(header + frame.pixels.tobytes())


def read_pgm_sequence(directory: str | Path) -> list[Frame]:
    """All *.pgm files under ``directory`` in lexicographic filename order.
    Dimensions must not drift across the sequence."""
    directory = Path(directory)
    paths = sorted(directory.glob("*.pgm"))
    if not paths:
        raise EmptySourceError(f"no .pgm files in {directory}")
    out: list[Frame] = []
    for p in paths:
        f = read_pgm(p)
        if out and (f.rows, f.cols) != (out[0].rows, out[0].cols):
            raise DimensionDriftError(
                f"{p.name}: {f.rows}x{f.cols} differs from first frame "
                f"{out[0].rows}x{out[0].cols}"
            )
        out.append(f)
    return out


# ----------------------------------------------------------- change stats


@dataclass(frozen=True)
class ChangeStats:
    """Per-step change statistics averaged over consecutive frame pairs.

    The tiled statistic sums, per tile, the bounding rect of that tile's own
    changed pixels, so it interpolates between the raw changed-pixel count
    (tile=1) and the global bounding-rect area (tile >= frame), and the
    ordering invariant changed <= tiled <= rect holds by construction.
    """

    frames_observed: int
    mean_changed_pixels: float
    mean_tiled_area: float
    mean_bounding_rect_area: float

    def __post_init__(self) -> None:
        if not (
            0.0
            <= self.mean_changed_pixels
            <= self.mean_tiled_area
            <= self.mean_bounding_rect_area
        ):
            raise ValueError(f"change statistics ordering violated: {self}")


def change_stats(
    source: Iterable[Frame], n_frames: int, tile: int, tol: int = 0
) -> ChangeStats:
    """Average changed-pixel count, tiled area, and bounding-rect area over
    the n_frames - 1 consecutive pairs of the first n_frames frames."""
    if n_frames < 2:
        raise ValueError("need at least 2 frames to compare")
    it: Iterator[Frame] = iter(source)
    changed_sum = 0
    tiled_sum = 0
    rect_sum = 0
    prev: Frame | None = None
    seen = 0
    for f in it:
        if prev is not None:
            delta = np.abs(
                prev.pixels.astype(np.int32) - f.pixels.astype(np.int32)
            )
            changed_sum += int((delta > tol).sum())
            tiled_sum += diff_tiled_tight(prev.pixels, f.pixels, tile, tol).area
            r = diff_bounding_rect(prev.pixels, f.pixels, tol)
            rect_sum += 0 if r is None else r.area
        prev = f
        seen += 1
        if seen == n_frames:
            break
    if seen < n_frames:
        raise SourceExhaustedError(f"source ended after {seen}/{n_frames} frames")
    pairs = n_frames - 1
    return ChangeStats(
        frames_observed=n_frames,
        mean_changed_pixels=changed_sum / pairs,
        mean_tiled_area=tiled_sum / pairs,
        mean_bounding_rect_area=rect_sum / pairs,
    )
