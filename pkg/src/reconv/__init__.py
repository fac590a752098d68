"""reconv: frame-to-frame convolutional activation reuse on CPU.

A small CNN engine that caches per-layer activations between consecutive
frames and recomputes only the regions whose inputs actually changed, plus
the training (REINFORCE) and benchmarking machinery built on top of it.
"""
from .bench import (
    BenchConfig,
    BenchRecord,
    VerificationError,
    emit_table,
    parse_csv,
    run_inference_bench,
    run_training_bench,
)
from .engine import (
    CachedNet,
    ColdCacheError,
    NetConfig,
    StepOutput,
    dense_delta,
    full_mac_count,
    mac_count,
)
from .frames import (
    ChangeStats,
    DimensionDriftError,
    EmptySourceError,
    Frame,
    FrameSourceError,
    MalformedPgmError,
    PaddleEnvState,
    SpriteConfig,
    UnsupportedMaxvalError,
    change_stats,
    downsample,
    paddle_init,
    paddle_render,
    paddle_step,
    read_pgm,
    read_pgm_sequence,
    sprite_frame,
    to_grayscale,
    write_pgm,
)
from .grad import (
    DivergenceError,
    EpisodeResult,
    EpisodeTrace,
    GradAccumulator,
    Gradients,
    StaleForwardError,
    TraceStep,
    TrainConfig,
    apply_gradient,
    backward_full,
    backward_reuse,
    reinforce_episode,
    returns_to_go,
)
from .region import (
    ConvGeometry,
    Rect,
    RegionSet,
    affected_output_rect,
    diff_bounding_rect,
    diff_tiled,
    diff_tiled_tight,
    normalize,
    required_input_rect,
)
from .tensor import (
    ConvWeights,
    DenseWeights,
    conv2d,
    conv2d_region,
    dense,
    relu,
    softmax,
)

__version__ = "0.1.0"

__all__ = [
    "BenchConfig",
    "BenchRecord",
    "CachedNet",
    "ChangeStats",
    "ColdCacheError",
    "ConvGeometry",
    "ConvWeights",
    "DenseWeights",
    "DimensionDriftError",
    "DivergenceError",
    "EmptySourceError",
    "EpisodeResult",
    "EpisodeTrace",
    "Frame",
    "FrameSourceError",
    "GradAccumulator",
    "Gradients",
    "MalformedPgmError",
    "NetConfig",
    "PaddleEnvState",
    "Rect",
    "RegionSet",
    "SpriteConfig",
    "StaleForwardError",
    "StepOutput",
    "TraceStep",
    "TrainConfig",
    "UnsupportedMaxvalError",
    "VerificationError",
    "affected_output_rect",
    "apply_gradient",
    "backward_full",
    "backward_reuse",
    "change_stats",
    "conv2d",
    "conv2d_region",
    "dense",
    "dense_delta",
    "diff_bounding_rect",
    "diff_tiled",
    "diff_tiled_tight",
    "downsample",
    "emit_table",
    "full_mac_count",
    "mac_count",
    "normalize",
    "paddle_init",
    "paddle_render",
    "paddle_step",
    "parse_csv",
    "read_pgm",
    "read_pgm_sequence",
    "reinforce_episode",
    "relu",
    "required_input_rect",
    "returns_to_go",
    "run_inference_bench",
    "run_training_bench",
    "softmax",
    "sprite_frame",
    "to_grayscale",
    "write_pgm",
]
