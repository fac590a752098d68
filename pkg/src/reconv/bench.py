"""Benchmark harness and CLI: timed inference/training runs over sources,
modes, and filter configurations, with MAC counts and change statistics,
emitted as CSV or a Markdown report.

Timing scope: a monotonic clock wraps the model step only — forward passes
for inference, forward + backward + weight updates for training. Frame
generation and preprocessing (grayscale/downsample) run outside the timed
sections; inference streams are fully pre-generated. MAC columns count
forward-pass multiply-accumulates only. When both modes run, an untimed
lockstep pass first verifies that full and reuse probabilities agree
bitwise; any mismatch aborts the run.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .engine import CachedNet, NetConfig
from .frames import (
    Frame,
    FrameSourceError,
    SpriteConfig,
    change_stats,
    downsample,
    paddle_init,
    paddle_render,
    paddle_step,
    read_pgm_sequence,
    sprite_frame,
)
from .grad import (
    DivergenceError,
    GradAccumulator,
    TraceStep,
    apply_gradient,
    backward_reuse,
)

__all__ = [
    "BenchConfig",
    "BenchRecord",
    "VerificationError",
    "CSV_HEADER",
    "DEFAULT_FILTER_PAIRS",
    "run_inference_bench",
    "run_training_bench",
    "emit_table",
    "parse_csv",
    "time_steps",
    "main",
]

CSV_HEADER = (
    "source,mode,filters1,filters2,downsample,steps,mean_seconds,std_seconds,"
    "mean_changed_pixels,mean_rect_area,macs_per_step,speedup_vs_full"
)

DEFAULT_FILTER_PAIRS: tuple[tuple[int, int], ...] = ((20, 40), (40, 80), (80, 160))

_SPRITE_SIZE = 5  # post-downsample sprite side length
_STATS_TILE = 8  # tile used for change statistics when diffing is rect-based
_MODE_ORDER = ("full", "reuse")


class VerificationError(RuntimeError):
    """Full and reuse modes produced different outputs during the untimed
    cross-check — the run's numbers would compare different computations."""


@dataclass(frozen=True)
class BenchConfig:
    """One benchmark invocation.

    ``input_rows``/``input_cols`` are the network input dimensions after
    downsampling; sprite and paddle sources generate raw frames at
    ``input * downsample`` so the preprocessed stream lands exactly on the
    configured input size. PGM sources derive their dimensions from the
    files instead.
    """

    source: str = "sprite"  # "sprite" | "paddle" | "pgm:<dir>"
    modes: tuple[str, ...] = ("full", "reuse")
    steps: int = 3000
    repeats: int = 10
    filter_pairs: tuple[tuple[int, int], ...] = DEFAULT_FILTER_PAIRS
    downsample: int = 4
    kernel: int = 3
    diff: str = "rect"  # "rect" | "tiled:N"
    seed: int = 0
    out: Optional[str] = None
    fmt: str = "csv"  # "csv" | "md"
    train: bool = False
    input_rows: int = 80
    input_cols: int = 80
    learning_rate: float = 1e-3
    gamma: float = 0.99

    def __post_init__(self) -> None:
        if self.source_kind not in ("sprite", "paddle", "pgm"):
            raise ValueError(
                f"source must be sprite, paddle, or pgm:<dir>, got {self.source!r}"
            )
        if self.source_kind == "pgm" and not self.pgm_dir:
            raise ValueError("pgm source needs a directory: pgm:<dir>")
        if not self.modes or not set(self.modes) <= {"full", "reuse"}:
            raise ValueError(f"modes must be a non-empty subset of full/reuse: {self.modes}")
        if len(set(self.modes)) != len(self.modes):
            raise ValueError(f"duplicate modes: {self.modes}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        for pair in self.filter_pairs:
            if len(pair) != 2 or pair[0] < 1 or pair[1] < 1:
                raise ValueError(f"filter pairs must be positive (f1, f2): {pair}")
        if not self.filter_pairs:
            raise ValueError("need at least one filter pair")
        if self.downsample not in (2, 4):
            raise ValueError("downsample must be 2 or 4")
        self.diff_tile  # parse/validate the diff strategy
        if self.fmt not in ("csv", "md"):
            raise ValueError(f"format must be csv or md, got {self.fmt!r}")
        if self.input_rows < 1 or self.input_cols < 1:
            raise ValueError("input dims must be positive")

    @property
    def source_kind(self) -> str:
        return "pgm" if self.source.startswith("pgm:") else self.source

    @property
    def pgm_dir(self) -> str:
        return self.source[4:] if self.source.startswith("pgm:") else ""

    @property
    def source_name(self) -> str:
        return Path(self.pgm_dir).name if self.source_kind == "pgm" else self.source

    @property
    def diff_tile(self) -> Optional[int]:
        if self.diff == "rect":
            return None
        if self.diff.startswith("tiled:"):
            try:
                tile = int(self.diff[6:])
            except ValueError:
                tile = 0
            if tile >= 1:
                return tile
        raise ValueError(f"diff must be 'rect' or 'tiled:N' (N >= 1), got {self.diff!r}")


@dataclass(frozen=True)
class BenchRecord:
    """One table row: a (source, mode, architecture) timing measurement."""

    source: str
    mode: str
    filters1: int
    filters2: int
    downsample: int
    steps: int
    mean_seconds: float
    std_seconds: float
    mean_changed_pixels: float
    mean_rect_area: float
    macs_per_step: float
    speedup_vs_full: Optional[float] = None  # reuse rows with a full baseline

    def __post_init__(self) -> None:
        if self.mode not in ("full", "reuse"):
            raise ValueError(f"mode must be full or reuse, got {self.mode!r}")
        if any(c in self.source for c in ",\r\n"):
            raise ValueError("source name must not contain commas or newlines")
        if self.filters1 < 1 or self.filters2 < 1:
            raise ValueError("filter counts must be positive")
        if not self.mean_seconds > 0:
            raise ValueError("mean_seconds must be > 0")
        if self.std_seconds < 0:
            raise ValueError("std_seconds must be >= 0")
        if self.speedup_vs_full is not None and self.speedup_vs_full <= 0:
            raise ValueError("speedup must be positive when present")


# -------------------------------------------------------------- frame sources


def _sprite_stream(cfg: BenchConfig, n: int) -> list[Frame]:
    d = cfg.downsample
    sp = SpriteConfig(
        cfg.input_rows * d,
        cfg.input_cols * d,
        sprite_rows=_SPRITE_SIZE * d,
        sprite_cols=_SPRITE_SIZE * d,
        velocity=(0, d),
        start=((cfg.input_rows // 2) * d, 0),
    )
    return [downsample(sprite_frame(sp, t), d) for t in range(n)]


def _paddle_stream(cfg: BenchConfig, n: int) -> list[Frame]:
    d = cfg.downsample
    env = paddle_init(
        cfg.input_rows * d, cfg.input_cols * d, fall_rate=d, seed=cfg.seed
    )
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 101)))
    frames = [downsample(paddle_render(env), d)]
    while len(frames) < n:
        env, raw, _, _ = paddle_step(env, int(rng.integers(0, 3)))
        frames.append(downsample(raw, d))
    return frames


def _pgm_stream(cfg: BenchConfig, n: int) -> list[Frame]:
    files = [downsample(f, cfg.downsample) for f in read_pgm_sequence(cfg.pgm_dir)]
    return [files[i % len(files)] for i in range(n)]


def _frame_stream(cfg: BenchConfig, n: int) -> list[Frame]:
    if cfg.source_kind == "sprite":
        return _sprite_stream(cfg, n)
    if cfg.source_kind == "paddle":
        return _paddle_stream(cfg, n)
    return _pgm_stream(cfg, n)


def _net_config(cfg: BenchConfig, rows: int, cols: int, f1: int, f2: int) -> NetConfig:
    return NetConfig(
        rows, cols, f1, f2,
        kernel1=cfg.kernel, kernel2=cfg.kernel, diff_tile=cfg.diff_tile,
    )


def _modes_in_order(cfg: BenchConfig) -> list[str]:
    return [m for m in _MODE_ORDER if m in cfg.modes]


# ------------------------------------------------------------------- timing


def time_steps(fn: Callable[[], None], steps: int) -> float:
    """Wall-clock seconds for ``steps`` calls of ``fn`` under one monotonic
    clock pair — the same harness shape the benchmark loops use."""
    t0 = time.perf_counter()
    for _ in range(steps):
        fn()
    return time.perf_counter() - t0


def _timed_inference_pass(
    ncfg: NetConfig, frames: Sequence[Frame], seed: int, mode: str
) -> float:
    net = CachedNet.initialize(ncfg, seed=seed)
    step = net.forward_full if mode == "full" else net.forward_reuse
    t0 = time.perf_counter()
    for fr in frames:
        step(fr)
    return time.perf_counter() - t0


def _macs_and_verify(
    ncfg: NetConfig, frames: Sequence[Frame], cfg: BenchConfig, modes: Sequence[str]
) -> dict[str, float]:
    """Untimed pass per mode collecting MAC counts; with both modes present,
    runs them in lockstep and insists on bitwise-equal probabilities."""
    n = len(frames)
    if set(modes) == {"full", "reuse"}:
        nf = CachedNet.initialize(ncfg, seed=cfg.seed)
        nr = CachedNet.initialize(ncfg, seed=cfg.seed)
        for i, fr in enumerate(frames):
            pf = nf.forward_full(fr).probs
            pr = nr.forward_reuse(fr).probs
            if not np.array_equal(pf, pr):
                raise VerificationError(
                    f"full and reuse outputs diverged at step {i} "
                    f"(source {cfg.source_name}, filters "
                    f"{ncfg.filters1}/{ncfg.filters2}): "
                    f"max abs diff {np.abs(pf - pr).max():.3e}"
                )
        return {"full": nf.mac_counter / n, "reuse": nr.mac_counter / n}
    out: dict[str, float] = {}
    for mode in modes:
        net = CachedNet.initialize(ncfg, seed=cfg.seed)
        step = net.forward_full if mode == "full" else net.forward_reuse
        for fr in frames:
            step(fr)
        out[mode] = net.mac_counter / n
    return out


# ---------------------------------------------------------------- inference


def run_inference_bench(cfg: BenchConfig) -> list[BenchRecord]:
    """Time the forward path over a pre-generated frame stream, per mode and
    filter pair, ``cfg.repeats`` times each with identically seeded weights."""
    frames = _frame_stream(cfg, cfg.steps)
    rows, cols = frames[0].rows, frames[0].cols
    stats = change_stats(frames, len(frames), tile=cfg.diff_tile or _STATS_TILE)
    modes = _modes_in_order(cfg)
    records: list[BenchRecord] = []
    for f1, f2 in cfg.filter_pairs:
        ncfg = _net_config(cfg, rows, cols, f1, f2)
        macs = _macs_and_verify(ncfg, frames, cfg, modes)
        full_mean: Optional[float] = None
        for mode in modes:
            times = [
                _timed_inference_pass(ncfg, frames, cfg.seed, mode)
                for _ in range(cfg.repeats)
            ]
            mean_s = float(np.mean(times))
            if mode == "full":
                full_mean = mean_s
            records.append(
                BenchRecord(
                    source=cfg.source_name,
                    mode=mode,
                    filters1=f1,
                    filters2=f2,
                    downsample=cfg.downsample,
                    steps=cfg.steps,
                    mean_seconds=mean_s,
                    std_seconds=float(np.std(times)),
                    mean_changed_pixels=stats.mean_changed_pixels,
                    mean_rect_area=stats.mean_bounding_rect_area,
                    macs_per_step=macs[mode],
                    speedup_vs_full=(
                        full_mean / mean_s
                        if mode == "reuse" and full_mean is not None
                        else None
                    ),
                )
            )
    return records


# ----------------------------------------------------------------- training


def _train_run(
    ncfg: NetConfig, cfg: BenchConfig, mode: str
) -> tuple[float, CachedNet, list[Frame]]:
    """One seeded training run of cfg.steps model steps. Returns (timed
    seconds, trained net, preprocessed frame sequence). The clock covers
    forward + backward + gradient accumulation + episode-end updates; the
    environment step and downsampling run between timed segments. A partial
    episode at the step limit keeps its compute time but applies no update.
    """
    d = cfg.downsample
    net = CachedNet.initialize(ncfg, seed=cfg.seed)
    env = paddle_init(
        cfg.input_rows * d, cfg.input_cols * d, fall_rate=d, seed=cfg.seed
    )
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 202)))
    forward = net.forward_full if mode == "full" else net.forward_reuse
    acc = GradAccumulator(net, cfg.gamma)
    frame = downsample(paddle_render(env), d)
    frames = [frame]
    timed = 0.0
    for step_idx in range(cfg.steps):
        t0 = time.perf_counter()
        out = forward(frame)
        p = out.probs.astype(np.float64)
        action = int(rng.choice(p.size, p=p / p.sum()))
        trace = TraceStep(
            frame, action, float(out.probs[action]), 0.0,
            out.dirty_in, out.dirty1, out.dirty2,
        )
        g = backward_reuse(net, trace, 1.0)
        timed += time.perf_counter() - t0

        env, raw, reward, done = paddle_step(env, action)
        frame = downsample(raw, d)
        frames.append(frame)

        t0 = time.perf_counter()
        acc.add(g, reward)
        if done:
            total = acc.total
            norm = total.norm()
            if not np.isfinite(norm):
                raise DivergenceError(
                    f"non-finite gradient at step {step_idx} "
                    f"(source {cfg.source_name}, mode {mode}, filters "
                    f"{ncfg.filters1}/{ncfg.filters2})"
                )
            apply_gradient(net, total, cfg.learning_rate)
            acc = GradAccumulator(net, cfg.gamma)
        timed += time.perf_counter() - t0
    return timed, net, frames


def run_training_bench(cfg: BenchConfig) -> list[BenchRecord]:
    """Time forward + backward + update per step on the paddle environment,
    REINFORCE updates applied at episode boundaries."""
    if cfg.source_kind != "paddle":
        raise ValueError("the training bench requires --source paddle")
    modes = _modes_in_order(cfg)
    records: list[BenchRecord] = []
    for f1, f2 in cfg.filter_pairs:
        ncfg = _net_config(cfg, cfg.input_rows, cfg.input_cols, f1, f2)
        full_mean: Optional[float] = None
        for mode in modes:
            times: list[float] = []
            macs_per_step = 0.0
            stats = None
            for rep in range(cfg.repeats):
                elapsed, net, frames = _train_run(ncfg, cfg, mode)
                times.append(elapsed)
                if rep == 0:
                    macs_per_step = net.mac_counter / cfg.steps
                    stats = change_stats(
                        frames, len(frames), tile=cfg.diff_tile or _STATS_TILE
                    )
            assert stats is not None
            mean_s = float(np.mean(times))
            if mode == "full":
                full_mean = mean_s
            records.append(
                BenchRecord(
                    source=cfg.source_name,
                    mode=mode,
                    filters1=f1,
                    filters2=f2,
                    downsample=cfg.downsample,
                    steps=cfg.steps,
                    mean_seconds=mean_s,
                    std_seconds=float(np.std(times)),
                    mean_changed_pixels=stats.mean_changed_pixels,
                    mean_rect_area=stats.mean_bounding_rect_area,
                    macs_per_step=macs_per_step,
                    speedup_vs_full=(
                        full_mean / mean_s
                        if mode == "reuse" and full_mean is not None
                        else None
                    ),
                )
            )
    return records


# ------------------------------------------------------------------- tables


def emit_table(records: Sequence[BenchRecord], fmt: str) -> str:
    if not records:
        raise ValueError("no records to emit")
    if fmt == "csv":
        return _emit_csv(records)
    if fmt == "md":
        return _emit_md(records)
    raise ValueError(f"format must be csv or md, got {fmt!r}")


def _emit_csv(records: Sequence[BenchRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER.split(","))
    for r in records:
        w.writerow(
            [
                r.source, r.mode, r.filters1, r.filters2, r.downsample, r.steps,
                repr(r.mean_seconds), repr(r.std_seconds),
                repr(r.mean_changed_pixels), repr(r.mean_rect_area),
                repr(r.macs_per_step),
                "" if r.speedup_vs_full is None else repr(r.speedup_vs_full),
            ]
        )
    return buf.getvalue()


def _emit_md(records: Sequence[BenchRecord]) -> str:
    groups: dict[tuple, dict[str, BenchRecord]] = {}
    for r in records:
        key = (r.source, r.filters1, r.filters2, r.downsample, r.steps)
        groups.setdefault(key, {})[r.mode] = r

    lines = [
        "Timing scope: model step only (forward; plus backward and updates "
        "when training). Frame generation and preprocessing are untimed.",
        "",
        "| source | full (s) | reuse (s) | speedup | filters | downsample |",
        "| --- | --- | --- | --- | --- | --- |",
    ]
    full_means: list[float] = []
    reuse_means: list[float] = []
    for (source, f1, f2, ds, _steps), by_mode in groups.items():
        full = by_mode.get("full")
        reuse = by_mode.get("reuse")
        if full:
            full_means.append(full.mean_seconds)
        if reuse:
            reuse_means.append(reuse.mean_seconds)
        speedup = (
            f"{reuse.speedup_vs_full:.2f}"
            if reuse is not None and reuse.speedup_vs_full is not None
            else ""
        )
        lines.append(
            f"| {source} "
            f"| {f'{full.mean_seconds:.1f}' if full else ''} "
            f"| {f'{reuse.mean_seconds:.1f}' if reuse else ''} "
            f"| {speedup} | {f1}/{f2} | {ds} |"
        )
    mean_full = f"{np.mean(full_means):.1f}" if full_means else ""
    mean_reuse = f"{np.mean(reuse_means):.1f}" if reuse_means else ""
    mean_speedup = (
        f"{np.mean(full_means) / np.mean(reuse_means):.2f}"
        if full_means and reuse_means
        else ""
    )
    lines.append(f"| Mean | {mean_full} | {mean_reuse} | {mean_speedup} |  |  |")
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> list[BenchRecord]:
    """Inverse of the CSV emitter; floats round-trip exactly via repr()."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty CSV input")
    if ",".join(rows[0]) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header: {','.join(rows[0])!r}")
    records = []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 12:
            raise ValueError(f"line {i}: expected 12 fields, got {len(row)}")
        records.append(
            BenchRecord(
                source=row[0],
                mode=row[1],
                filters1=int(row[2]),
                filters2=int(row[3]),
                downsample=int(row[4]),
                steps=int(row[5]),
                mean_seconds=float(row[6]),
                std_seconds=float(row[7]),
                mean_changed_pixels=float(row[8]),
                mean_rect_area=float(row[9]),
                macs_per_step=float(row[10]),
                speedup_vs_full=float(row[11]) if row[11] else None,
            )
        )
    return records


# ----------------------------------------------------------------------- CLI


def _filters_arg(s: str) -> tuple[int, int]:
    parts = s.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected F1,F2 (e.g. 20,40), got {s!r}")
    try:
        f1, f2 = int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"filter counts must be integers: {s!r}")
    if f1 < 1 or f2 < 1:
        raise argparse.ArgumentTypeError(f"filter counts must be positive: {s!r}")
    return f1, f2


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="reconv-bench",
        description=(
            "Benchmark full-recompute vs activation-reuse CNN stepping: "
            "timed runs per source/mode/architecture with MAC counts and "
            "change statistics, reported as CSV or Markdown."
        ),
    )
    p.add_argument("--source", default="sprite",
                   help="frame source: sprite | paddle | pgm:<dir> (default sprite)")
    p.add_argument("--mode", default="both", choices=["full", "reuse", "both"],
                   help="which arms to run (default both)")
    p.add_argument("--steps", type=int, default=3000,
                   help="model steps per run (default 3000)")
    p.add_argument("--repeats", type=int, default=10,
                   help="timed repetitions per record (default 10)")
    p.add_argument("--filters", type=_filters_arg, action="append", metavar="F1,F2",
                   help="conv filter pair; repeatable "
                        "(default 20,40 40,80 80,160)")
    p.add_argument("--downsample", type=int, default=4, choices=[2, 4],
                   help="block-mean downsample factor (default 4)")
    p.add_argument("--kernel", type=int, default=3,
                   help="conv kernel size, odd (default 3)")
    p.add_argument("--diff", default="rect",
                   help="change detection: rect | tiled:N (default rect)")
    p.add_argument("--train", action="store_true",
                   help="run the training bench (paddle source only)")
    p.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    p.add_argument("--format", default="csv", choices=["csv", "md"],
                   help="output format (default csv)")
    p.add_argument("--out", default=None, metavar="PATH",
                   help="write the table here instead of stdout")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = BenchConfig(
            source=args.source,
            modes=("full", "reuse") if args.mode == "both" else (args.mode,),
            steps=args.steps,
            repeats=args.repeats,
            filter_pairs=tuple(args.filters) if args.filters else DEFAULT_FILTER_PAIRS,
            downsample=args.downsample,
            kernel=args.kernel,
            diff=args.diff,
            seed=args.seed,
            out=args.out,
            fmt=args.format,
            train=args.train,
        )
        records = run_training_bench(cfg) if cfg.train else run_inference_bench(cfg)
        text = emit_table(records, cfg.fmt)
        if cfg.out is not None:
            Path(cfg.out).write_text(text)
        else:
            sys.stdout.write(text)
        return 0
    except (ValueError, OSError, FrameSourceError, VerificationError,
            DivergenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
