"""Activation-cache engine: a two-conv-plus-dense policy network that reuses
cached per-layer activations between consecutive frames.

The full path recomputes everything. The reuse path diffs the incoming frame
against the previous one, dilates the changed region through each layer's
receptive-field geometry, recomputes only those output patches, and splices
them into the caches in place. With dense-delta mode off, the reuse path's
probabilities are bitwise equal to the full path's on every step — the conv
kernels guarantee per-element accumulation order, and the dense layer always
sees the same operand shapes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .frames import Frame
from .region import (
    ConvGeometry,
    Rect,
    RegionSet,
    affected_output_rect,
    diff_bounding_rect,
    diff_tiled,
    normalize,
)
from .tensor import ConvWeights, DenseWeights, conv2d, conv2d_region, dense, relu, softmax

__all__ = [
    "NetConfig",
    "CachedNet",
    "StepOutput",
    "ColdCacheError",
    "mac_count",
    "full_mac_count",
    "dense_delta",
]


class ColdCacheError(RuntimeError):
    """An operation that needs warm caches ran on a cold net."""


@dataclass(frozen=True)
class NetConfig:
    """Architecture and reuse-policy parameters of a CachedNet.

    ``diff_tile=None`` selects bounding-rect diffing (the default); an
    integer selects tiled diffing with that tile size. Input pixels are
    multiplied by ``input_scale`` when converted to floats, identically on
    both forward paths.
    """

    in_rows: int
    in_cols: int
    filters1: int
    filters2: int
    kernel1: int = 3
    kernel2: int = 3
    stride1: int = 1
    stride2: int = 1
    padding1: Optional[int] = None  # None: same-style (kernel-1)//2
    padding2: Optional[int] = None
    action_count: int = 3
    dense_delta_mode: bool = False
    diff_tile: Optional[int] = None
    diff_tol: int = 0
    input_scale: float = 1.0 / 255.0

    def __post_init__(self) -> None:
        if self.filters1 < 1 or self.filters2 < 1:
            raise ValueError("filter counts must be positive")
        if self.action_count < 1:
            raise ValueError("action_count must be positive")
        if self.diff_tile is not None and self.diff_tile < 1:
            raise ValueError("diff_tile must be >= 1")
        if self.diff_tol < 0:
            raise ValueError("diff_tol must be >= 0")
        self.geom2  # force geometry validation (chaining) at construction

    @property
    def geom1(self) -> ConvGeometry:
        p = (self.kernel1 - 1) // 2 if self.padding1 is None else self.padding1
        return ConvGeometry(self.in_rows, self.in_cols, self.kernel1, self.stride1, p)

    @property
    def geom2(self) -> ConvGeometry:
        g1 = self.geom1
        p = (self.kernel2 - 1) // 2 if self.padding2 is None else self.padding2
        return ConvGeometry(g1.out_rows, g1.out_cols, self.kernel2, self.stride2, p)

    @property
    def dense_in(self) -> int:
        g2 = self.geom2
        return self.filters2 * g2.out_rows * g2.out_cols


@dataclass(frozen=True)
class StepOutput:
    """Instrumented result of one forward step."""

    probs: np.ndarray
    dirty_in: RegionSet
    dirty1: RegionSet
    dirty2: RegionSet
    macs_used: int
    mode: str  # "full" | "reuse"

    def __post_init__(self) -> None:
        if abs(float(self.probs.sum()) - 1.0) > 1e-6:
            raise ValueError("probs must sum to 1")
        if self.mode not in ("full", "reuse"):
            raise ValueError(f"unknown mode {self.mode!r}")


def _conv_macs(area: int, out_channels: int, in_channels: int, kernel: int) -> int:
    return area * out_channels * in_channels * kernel * kernel


def full_mac_count(cfg: NetConfig) -> int:
    """Analytic multiply-accumulate count of one full forward pass."""
    g1, g2 = cfg.geom1, cfg.geom2
    return (
        _conv_macs(g1.out_rows * g1.out_cols, cfg.filters1, 1, cfg.kernel1)
        + _conv_macs(g2.out_rows * g2.out_cols, cfg.filters2, cfg.filters1, cfg.kernel2)
        + cfg.dense_in * cfg.action_count
    )


def mac_count(cfg: NetConfig, dirty1: RegionSet, dirty2: RegionSet) -> int:
    """Analytic MAC count of a reuse step that recomputes the given dirty
    regions, plus the dense cost (delta cost when dense_delta_mode is on)."""
    g1, g2 = cfg.geom1, cfg.geom2
    for r in dirty1:
        if r.row1 >= g1.out_rows or r.col1 >= g1.out_cols:
            raise ValueError(f"dirty1 rect {r} outside layer-1 output")
    for r in dirty2:
        if r.row1 >= g2.out_rows or r.col1 >= g2.out_cols:
            raise ValueError(f"dirty2 rect {r} outside layer-2 output")
    if cfg.dense_delta_mode:
        dense_macs = cfg.action_count * cfg.filters2 * dirty2.area
    else:
        dense_macs = cfg.dense_in * cfg.action_count
    return (
        _conv_macs(dirty1.area, cfg.filters1, 1, cfg.kernel1)
        + _conv_macs(dirty2.area, cfg.filters2, cfg.filters1, cfg.kernel2)
        + dense_macs
    )


class CachedNet:
    """The policy network plus its per-frame activation caches.

    Warm state (all set together): ``cache1``/``cache2`` hold the post-ReLU
    activations of ``prev_frame``, ``cached_logits``/``cached_probs`` the
    matching head outputs. ``last_dirty`` records the (dirty_in, dirty1,
    dirty2) of the most recent step for the training pass. ``mac_counter``
    accumulates analytic MACs over all steps. Instances are single-threaded;
    create one per worker.
    """

    def __init__(
        self,
        config: NetConfig,
        w1: ConvWeights,
        w2: ConvWeights,
        wd: DenseWeights,
    ) -> None:
        g1, g2 = config.geom1, config.geom2
        if (w1.out_channels, w1.in_channels, w1.kernel) != (config.filters1, 1, config.kernel1):
            raise ValueError(f"layer-1 weights {w1.weights.shape} do not match config")
        if (w2.out_channels, w2.in_channels, w2.kernel) != (
            config.filters2, config.filters1, config.kernel2,
        ):
            raise ValueError(f"layer-2 weights {w2.weights.shape} do not match config")
        if (wd.out_size, wd.in_size) != (config.action_count, config.dense_in):
            raise ValueError(f"dense weights {wd.weights.shape} do not match config")
        if not (w1.dtype == w2.dtype == wd.dtype):
            raise ValueError("all weights must share one dtype")
        self.config = config
        self.w1, self.w2, self.wd = w1, w2, wd
        self.dtype = w1.dtype
        self._g1, self._g2 = g1, g2
        self.cache1: Optional[np.ndarray] = None
        self.cache2: Optional[np.ndarray] = None
        self.cached_logits: Optional[np.ndarray] = None
        self.cached_probs: Optional[np.ndarray] = None
        self.prev_frame: Optional[Frame] = None
        self.last_dirty: Optional[tuple[RegionSet, RegionSet, RegionSet]] = None
        self.mac_counter = 0

    @classmethod
    def initialize(
        cls, config: NetConfig, seed: int, dtype: np.dtype = np.float32
    ) -> "CachedNet":
        """He-initialized conv weights, small dense head, zero biases."""
        rng = np.random.default_rng(seed)
        k1, k2 = config.kernel1, config.kernel2
        f1, f2 = config.filters1, config.filters2

        def conv_w(out_c: int, in_c: int, k: int) -> ConvWeights:
            std = np.sqrt(2.0 / (in_c * k * k))
            return ConvWeights(
                (rng.standard_normal((out_c, in_c, k, k)) * std).astype(dtype),
                np.zeros(out_c, dtype=dtype),
            )

        wd = DenseWeights(
            (
                rng.standard_normal((config.action_count, config.dense_in))
                / np.sqrt(config.dense_in)
            ).astype(dtype),
            np.zeros(config.action_count, dtype=dtype),
        )
        return cls(config, conv_w(f1, 1, k1), conv_w(f2, f1, k2), wd)

    # ------------------------------------------------------------- plumbing

    @property
    def warm(self) -> bool:
        return self.cache1 is not None

    def invalidate_cache(self) -> None:
        """Drop all cached state (required after any weight update)."""
        self.cache1 = None
        self.cache2 = None
        self.cached_logits = None
        self.cached_probs = None
        self.prev_frame = None
        self.last_dirty = None

    def _check_frame(self, frame: Frame) -> None:
        if (frame.rows, frame.cols) != (self.config.in_rows, self.config.in_cols):
            raise ValueError(
                f"frame {frame.rows}x{frame.cols} does not match config input "
                f"{self.config.in_rows}x{self.config.in_cols}"
            )

    def _to_input(self, frame: Frame) -> np.ndarray:
        x = frame.pixels.astype(self.dtype) * self.dtype.type(self.config.input_scale)
        return x.reshape(1, self.config.in_rows, self.config.in_cols)

    def _full_region_sets(self) -> tuple[RegionSet, RegionSet, RegionSet]:
        return (
            RegionSet((Rect(0, 0, self.config.in_rows - 1, self.config.in_cols - 1),)),
            RegionSet((self._g1.full_output_rect,)),
            RegionSet((self._g2.full_output_rect,)),
        )

    # -------------------------------------------------------------- forward

    def forward_full(self, frame: Frame) -> StepOutput:
        """Recompute the whole network and refresh every cache."""
        self._check_frame(frame)
        x = self._to_input(frame)
        a1 = relu(conv2d(x, self.w1, self._g1))
        a2 = relu(conv2d(a1, self.w2, self._g2))
        logits = dense(a2.reshape(-1), self.wd)
        probs = softmax(logits)
        self.cache1, self.cache2 = a1, a2
        self.cached_logits, self.cached_probs = logits, probs
        self.prev_frame = frame
        dirty_in, dirty1, dirty2 = self._full_region_sets()
        self.last_dirty = (dirty_in, dirty1, dirty2)
        macs = full_mac_count(self.config)
        self.mac_counter += macs
        return StepOutput(probs.copy(), dirty_in, dirty1, dirty2, macs, "full")

    def _diff(self, frame: Frame) -> RegionSet:
        cfg = self.config
        assert self.prev_frame is not None
        if cfg.diff_tile is not None:
            return diff_tiled(
                self.prev_frame.pixels, frame.pixels, cfg.diff_tile, cfg.diff_tol
            )
        r = diff_bounding_rect(self.prev_frame.pixels, frame.pixels, cfg.diff_tol)
        return RegionSet(() if r is None else (r,))

    @staticmethod
    def _dilate(dirty: RegionSet, g: ConvGeometry) -> RegionSet:
        hits = [
            a for r in dirty if (a := affected_output_rect(r, g)) is not None
        ]
        return normalize(hits, g.out_rows, g.out_cols)

    def forward_reuse(self, frame: Frame) -> StepOutput:
        """Diff against the previous frame and recompute only affected
        regions; falls back to the full path on a cold cache."""
        self._check_frame(frame)
        if not self.warm:
            return self.forward_full(frame)
        cfg = self.config
        dirty_in = self._diff(frame)
        empty = RegionSet(())
        if dirty_in.is_empty:
            self.prev_frame = frame
            self.last_dirty = (empty, empty, empty)
            return StepOutput(self.cached_probs.copy(), empty, empty, empty, 0, "reuse")

        x = self._to_input(frame)
        dirty1 = self._dilate(dirty_in, self._g1)
        macs = 0
        for r in dirty1:
            patch = conv2d_region(x, self.w1, self._g1, r)
            np.maximum(patch, 0, out=patch)
            self.cache1[(slice(None), *r.as_slices())] = patch
            macs += _conv_macs(r.area, cfg.filters1, 1, cfg.kernel1)

        dirty2 = self._dilate(dirty1, self._g2)
        for r in dirty2:
            sl = (slice(None), *r.as_slices())
            patch = conv2d_region(self.cache1, self.w2, self._g2, r)
            np.maximum(patch, 0, out=patch)
            if cfg.dense_delta_mode:
                old = self.cache2[sl].copy()
                self.cache2[sl] = patch
                self.cached_logits = dense_delta(self, r, old, patch)
            else:
                self.cache2[sl] = patch
            macs += _conv_macs(r.area, cfg.filters2, cfg.filters1, cfg.kernel2)

        if dirty2.is_empty:
            logits = self.cached_logits  # layer-2 cache untouched
        elif cfg.dense_delta_mode:
            logits = self.cached_logits  # updated rect-by-rect above
            macs += cfg.action_count * cfg.filters2 * dirty2.area
        else:
            logits = dense(self.cache2.reshape(-1), self.wd)
            macs += cfg.dense_in * cfg.action_count
        probs = softmax(logits)
        self.cached_logits, self.cached_probs = logits, probs
        self.prev_frame = frame
        self.last_dirty = (dirty_in, dirty1, dirty2)
        self.mac_counter += macs
        return StepOutput(probs.copy(), dirty_in, dirty1, dirty2, macs, "reuse")


def dense_delta(
    net: CachedNet, rect: Rect, old_patch: np.ndarray, new_patch: np.ndarray
) -> np.ndarray:
    """Incremental dense head: cached_logits + W[:, changed] @ (new - old).

    Agrees with a full dense recompute to ~1e-4 relative in single precision
    (accumulation order differs, so the match is tolerance-based, never
    bitwise). Requires dense_delta_mode and a warm cache.
    """
    cfg = net.config
    if not cfg.dense_delta_mode:
        raise ValueError("dense_delta requires dense_delta_mode to be on")
    if not net.warm or net.cached_logits is None:
        raise ColdCacheError("dense_delta needs a warm cache")
    g2 = cfg.geom2
    shape = (cfg.filters2, rect.height, rect.width)
    if old_patch.shape != shape or new_patch.shape != shape:
        raise ValueError(
            f"patch shapes {old_patch.shape}/{new_patch.shape} != {shape}"
        )
    plane = g2.out_rows * g2.out_cols
    idx = (
        np.arange(cfg.filters2)[:, None, None] * plane
        + np.arange(rect.row0, rect.row1 + 1)[None, :, None] * g2.out_cols
        + np.arange(rect.col0, rect.col1 + 1)[None, None, :]
    ).ravel()
    delta = (new_patch - old_patch).ravel()
    return net.cached_logits + net.wd.weights[:, idx] @ delta
