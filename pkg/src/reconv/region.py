"""Dirty-rectangle algebra for frame diffing and receptive-field dilation.

Coordinates are (row, col) pairs with *inclusive* bounds. A :class:`Rect` is
never empty; "no region" is represented by ``None`` where a single rectangle
is expected, or by an empty :class:`RegionSet`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

import numpy as np

__all__ = [
    "Rect",
    "RegionSet",
    "ConvGeometry",
    "diff_bounding_rect",
    "diff_tiled",
    "diff_tiled_tight",
    "affected_output_rect",
    "required_input_rect",
    "normalize",
]


@dataclass(frozen=True)
class Rect:
    """Inclusive axis-aligned rectangle: rows row0..row1, cols col0..col1."""

    row0: int
    col0: int
    row1: int
    col1: int

    def __post_init__(self) -> None:
        if self.row0 < 0 or self.col0 < 0:
            raise ValueError(f"negative rect coordinates: {self}")
        if self.row1 < self.row0 or self.col1 < self.col0:
            raise ValueError(f"inverted rect bounds: {self}")

    @property
    def height(self) -> int:
        return self.row1 - self.row0 + 1

    @property
    def width(self) -> int:
        return self.col1 - self.col0 + 1

    @property
    def area(self) -> int:
        return self.height * self.width

    def as_slices(self) -> tuple[slice, slice]:
        """(row slice, col slice) for indexing the last two array axes."""
        return slice(self.row0, self.row1 + 1), slice(self.col0, self.col1 + 1)

    def contains(self, row: int, col: int) -> bool:
        return self.row0 <= row <= self.row1 and self.col0 <= col <= self.col1

    def intersects(self, other: "Rect") -> bool:
        return (
            self.row0 <= other.row1
            and other.row0 <= self.row1
            and self.col0 <= other.col1
            and other.col0 <= self.col1
        )


@dataclass(frozen=True)
class RegionSet:
    """A set of pairwise-disjoint rects, ordered by (row0, col0).

    :func:`normalize` produces the canonical decomposition (maximal row bands
    of constant column cross-section), under which two region sets cover the
    same pixels iff they are equal.
    """

    rects: tuple[Rect, ...] = ()

    def __post_init__(self) -> None:
        for a, b in zip(self.rects, self.rects[1:]):
            if (b.row0, b.col0) <= (a.row0, a.col0):
                raise ValueError("rects must be sorted by (row0, col0)")
        for i, a in enumerate(self.rects):
            for b in self.rects[i + 1 :]:
                if a.intersects(b):
                    raise ValueError(f"overlapping rects: {a} and {b}")

    @classmethod
    def empty(cls) -> "RegionSet":
        return cls(())

    @property
    def is_empty(self) -> bool:
        return not self.rects

    @property
    def area(self) -> int:
        return sum(r.area for r in self.rects)

    def contains(self, row: int, col: int) -> bool:
        return any(r.contains(row, col) for r in self.rects)

    def __iter__(self) -> Iterator[Rect]:
        return iter(self.rects)

    def __len__(self) -> int:
        return len(self.rects)

    def __bool__(self) -> bool:
        return bool(self.rects)


@dataclass(frozen=True)
class ConvGeometry:
    """Shape parameters of one conv layer (square kernel, symmetric padding)."""

    in_rows: int
    in_cols: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.in_rows < 1 or self.in_cols < 1:
            raise ValueError("input dimensions must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0 <= self.padding <= self.kernel - 1:
            # padding > kernel-1 would let an output column see only padding,
            # making its required input span empty.
            raise ValueError("padding must satisfy 0 <= padding <= kernel - 1")
        if self.out_rows < 1 or self.out_cols < 1:
            raise ValueError(f"kernel does not fit input: {self}")

    @property
    def out_rows(self) -> int:
        return (self.in_rows + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def out_cols(self) -> int:
        return (self.in_cols + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def full_input_rect(self) -> Rect:
        return Rect(0, 0, self.in_rows - 1, self.in_cols - 1)

    @property
    def full_output_rect(self) -> Rect:
        return Rect(0, 0, self.out_rows - 1, self.out_cols - 1)


def _change_mask(prev: np.ndarray, curr: np.ndarray, tol: int) -> np.ndarray:
    if prev.ndim != 2 or curr.ndim != 2:
        raise ValueError("frames must be 2-D arrays")
    if prev.shape != curr.shape:
        raise ValueError(f"frame shapes differ: {prev.shape} vs {curr.shape}")
    if tol < 0:
        raise ValueError("tol must be >= 0")
    delta = np.abs(prev.astype(np.int32) - curr.astype(np.int32))
    return delta > tol


def diff_bounding_rect(
    prev: np.ndarray, curr: np.ndarray, tol: int = 0
) -> Optional[Rect]:
    """Bounding rect of all pixels where ``|curr - prev| > tol``, or None."""
    mask = _change_mask(prev, curr, tol)
    rows = mask.any(axis=1).nonzero()[0]
    if rows.size == 0:
        return None
    cols = mask.any(axis=0).nonzero()[0]
    return Rect(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def _changed_blocks(mask: np.ndarray, tile: int) -> np.ndarray:
    """Boolean (block_rows, block_cols) grid: does each tile contain a change?"""
    rows, cols = mask.shape
    brows = -(-rows // tile)
    bcols = -(-cols // tile)
    padded = np.zeros((brows * tile, bcols * tile), dtype=bool)
    padded[:rows, :cols] = mask
    return padded.reshape(brows, tile, bcols, tile).any(axis=(1, 3))


def diff_tiled(
    prev: np.ndarray, curr: np.ndarray, tile: int, tol: int = 0
) -> RegionSet:
    """Changed region as a normalized union of tile-aligned blocks.

    The frame is cut into ``tile`` x ``tile`` blocks (clipped at the edges);
    every block containing at least one changed pixel is included whole.
    """
    if tile < 1:
        raise ValueError("tile must be >= 1")
    mask = _change_mask(prev, curr, tol)
    rows, cols = mask.shape
    rects = [
        Rect(
            br * tile,
            bc * tile,
            min((br + 1) * tile, rows) - 1,
            min((bc + 1) * tile, cols) - 1,
        )
        for br, bc in np.argwhere(_changed_blocks(mask, tile))
    ]
    return normalize(rects, rows, cols)


def diff_tiled_tight(
    prev: np.ndarray, curr: np.ndarray, tile: int, tol: int = 0
) -> RegionSet:
    """Like :func:`diff_tiled`, but each block contributes only the bounding
    rect of its own changed pixels (tile-local bounding boxes).

    Total area interpolates between the changed-pixel count (tile=1) and the
    global bounding rect (tile >= frame size).
    """
    if tile < 1:
        raise ValueError("tile must be >= 1")
    mask = _change_mask(prev, curr, tol)
    rows, cols = mask.shape
    rects = []
    for br, bc in np.argwhere(_changed_blocks(mask, tile)):
        r0, c0 = br * tile, bc * tile
        block = mask[r0 : r0 + tile, c0 : c0 + tile]
        rset = block.any(axis=1).nonzero()[0]
        cset = block.any(axis=0).nonzero()[0]
        rects.append(
            Rect(
                r0 + int(rset[0]),
                c0 + int(cset[0]),
                r0 + int(rset[-1]),
                c0 + int(cset[-1]),
            )
        )
    return normalize(rects, rows, cols)


def _ceil_div(a: int, b: int) -> int:
    return -((-a) // b)


def affected_output_rect(r: Rect, g: ConvGeometry) -> Optional[Rect]:
    """Smallest output rect covering every output whose receptive field
    touches ``r``. None if no receptive field does (possible when stride >
    kernel leaves input gaps)."""
    if r.row1 >= g.in_rows or r.col1 >= g.in_cols:
        raise ValueError(f"rect {r} outside input {g.in_rows}x{g.in_cols}")
    # Output o reads input rows o*stride - padding .. o*stride - padding + k-1,
    # so o touches input row x iff ceil((x+p-k+1)/s) <= o <= floor((x+p)/s).
    o_r0 = max(0, _ceil_div(r.row0 + g.padding - g.kernel + 1, g.stride))
    o_c0 = max(0, _ceil_div(r.col0 + g.padding - g.kernel + 1, g.stride))
    o_r1 = min(g.out_rows - 1, (r.row1 + g.padding) // g.stride)
    o_c1 = min(g.out_cols - 1, (r.col1 + g.padding) // g.stride)
    if o_r0 > o_r1 or o_c0 > o_c1:
        return None
    return Rect(o_r0, o_c0, o_r1, o_c1)


def required_input_rect(r: Rect, g: ConvGeometry) -> Rect:
    """Smallest input rect containing every in-bounds pixel read when
    computing output rect ``r`` (padding positions excluded)."""
    if r.row1 >= g.out_rows or r.col1 >= g.out_cols:
        raise ValueError(f"rect {r} outside output {g.out_rows}x{g.out_cols}")
    i_r0 = max(0, r.row0 * g.stride - g.padding)
    i_c0 = max(0, r.col0 * g.stride - g.padding)
    i_r1 = min(g.in_rows - 1, r.row1 * g.stride - g.padding + g.kernel - 1)
    i_c1 = min(g.in_cols - 1, r.col1 * g.stride - g.padding + g.kernel - 1)
    return Rect(i_r0, i_c0, i_r1, i_c1)


def normalize(rects: Iterable[Rect], rows: int, cols: int) -> RegionSet:
    """Canonical disjoint decomposition of the union of ``rects``.

    Cuts the union into maximal horizontal bands of constant column
    cross-section (touching column intervals merged), then merges vertically
    adjacent bands with identical cross-sections. The result depends only on
    the covered pixel set. Area equals the union's pixel count even when the
    inputs overlap.
    """
    rect_list = list(rects)
    for r in rect_list:
        if r.row1 >= rows or r.col1 >= cols:
            raise ValueError(f"rect {r} outside bounds {rows}x{cols}")
    if not rect_list:
        return RegionSet(())

    edges = sorted({r.row0 for r in rect_list} | {r.row1 + 1 for r in rect_list})
    bands: list[list] = []  # mutable [y0, y1, column intervals] triples
    for y0, y_next in zip(edges, edges[1:]):
        spans = sorted(
            (r.col0, r.col1) for r in rect_list if r.row0 <= y0 <= r.row1
        )
        if not spans:
            continue
        merged = [spans[0]]
        for c0, c1 in spans[1:]:
            if c0 <= merged[-1][1] + 1:
                merged[-1] = (merged[-1][0], max(merged[-1][1], c1))
            else:
                merged.append((c0, c1))
        ivals = tuple(merged)
        if bands and bands[-1][1] + 1 == y0 and bands[-1][2] == ivals:
            bands[-1][1] = y_next - 1
        else:
            bands.append([y0, y_next - 1, ivals])

    out = [
        Rect(y0, c0, y1, c1) for y0, y1, ivals in bands for c0, c1 in ivals
    ]
    return RegionSet(tuple(out))
