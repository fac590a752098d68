"""Backpropagation and REINFORCE training.

``backward_full`` differentiates scale * log pi(action) through the whole
network. ``backward_reuse`` implements the dynamic-graph semantics of the
reuse path: cached activations enter the graph as constants, so conv
weight/bias gradients accumulate only from output positions the forward pass
actually recomputed (the recorded dirty regions). Dense gradients are always
full — the dense layer is recomputed every step. Both functions share one
region-parameterized core, so full-dirty reuse gradients equal full
gradients bitwise.

Reuse-mode training is therefore an *approximation* of full-gradient
training; its exact semantics is "run full backprop, then zero every
per-position conv contribution outside the dirty regions" (the mask oracle
the tests compare against).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .engine import CachedNet
from .frames import Frame, PaddleEnvState, paddle_render, paddle_step
from .region import Rect, RegionSet
from .tensor import ConvWeights, DenseWeights

__all__ = [
    "Gradients",
    "TrainConfig",
    "TraceStep",
    "EpisodeTrace",
    "EpisodeResult",
    "GradAccumulator",
    "StaleForwardError",
    "DivergenceError",
    "backward_full",
    "backward_reuse",
    "returns_to_go",
    "apply_gradient",
    "reinforce_episode",
]


class StaleForwardError(RuntimeError):
    """backward_* called without a matching forward pass on the same frame."""


class DivergenceError(RuntimeError):
    """A non-finite gradient appeared during training."""


@dataclass(frozen=True, eq=False)
class Gradients:
    """Per-parameter gradients, shape-matched to the network weights."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wd: np.ndarray
    bd: np.ndarray

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2, self.wd, self.bd)

    def norm(self) -> float:
        # overflow to inf is fine here: callers use a non-finite norm as the
        # divergence signal
        with np.errstate(over="ignore"):
            return float(
                np.sqrt(sum(np.sum(a.astype(np.float64) ** 2) for a in self.arrays()))
            )

    @classmethod
    def zeros_like(cls, net: CachedNet) -> "Gradients":
        return cls(
            np.zeros_like(net.w1.weights),
            np.zeros_like(net.w1.bias),
            np.zeros_like(net.w2.weights),
            np.zeros_like(net.w2.bias),
            np.zeros_like(net.wd.weights),
            np.zeros_like(net.wd.bias),
        )


@dataclass(frozen=True)
class TrainConfig:
    """REINFORCE hyperparameters. gamma and alpha are documented defaults;
    alpha = 0 is allowed (plays episodes without changing weights)."""

    gamma: float = 0.99
    learning_rate: float = 1e-3
    steps: int = 3000
    seed: int = 0
    mode: str = "full"

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.learning_rate < 0.0:
            raise ValueError("learning rate must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.mode not in ("full", "reuse"):
            raise ValueError(f"mode must be 'full' or 'reuse', got {self.mode!r}")


@dataclass(frozen=True, eq=False)
class TraceStep:
    """One step of an episode: what was seen, done, and recomputed."""

    frame: Frame
    action: int
    prob: float
    reward: float
    dirty_in: RegionSet
    dirty1: RegionSet
    dirty2: RegionSet

    def __post_init__(self) -> None:
        if not 0.0 < self.prob <= 1.0:
            raise ValueError(f"action probability {self.prob} outside (0, 1]")
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")


@dataclass(frozen=True, eq=False)
class EpisodeTrace:
    steps: tuple[TraceStep, ...]

    @property
    def total_reward(self) -> float:
        return sum(s.reward for s in self.steps)


@dataclass(frozen=True, eq=False)
class EpisodeResult:
    trace: EpisodeTrace
    episode_return: float
    grad_norm: float


# ------------------------------------------------------------- backward core


def _padded(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    c, r, w = x.shape
    out = np.zeros((c, r + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, p : p + r, p : p + w] = x
    return out


def _conv_layer_backward(
    dout_full: np.ndarray,
    act_out: np.ndarray,
    x_padded: np.ndarray,
    w: ConvWeights,
    stride: int,
    rects: Sequence[Rect],
    gw: np.ndarray,
    gb: np.ndarray,
    dx_padded: Optional[np.ndarray],
) -> None:
    """Accumulate one conv layer's gradients from the given output rects.

    dout_full: gradient wrt the layer's post-ReLU output (full array);
    act_out: the post-ReLU output itself (for the ReLU mask); x_padded: the
    layer's padded input. Writes into gw/gb and, when dx_padded is given,
    accumulates the gradient wrt the (padded) input.
    """
    k = w.kernel
    for r in rects:
        sl = (slice(None), slice(r.row0, r.row1 + 1), slice(r.col0, r.col1 + 1))
        dpre = dout_full[sl] * (act_out[sl] > 0)
        gb += dpre.sum(axis=(1, 2))
        for dr in range(k):
            rsl = slice(r.row0 * stride + dr, r.row1 * stride + dr + 1, stride)
            for dc in range(k):
                csl = slice(r.col0 * stride + dc, r.col1 * stride + dc + 1, stride)
                xs = x_padded[:, rsl, csl]
                gw[:, :, dr, dc] += np.tensordot(dpre, xs, axes=([1, 2], [1, 2]))
                if dx_padded is not None:
                    dx_padded[:, rsl, csl] += np.tensordot(
                        w.weights[:, :, dr, dc], dpre, axes=([0], [0])
                    )


def _backward(
    net: CachedNet,
    frame: Frame,
    action: int,
    scale: float,
    rects1: Sequence[Rect],
    rects2: Sequence[Rect],
) -> Gradients:
    cfg = net.config
    if not net.warm:
        raise StaleForwardError("backward requires a forward pass first")
    if net.prev_frame != frame:
        raise StaleForwardError("frame does not match the last forward pass")
    if not 0 <= action < cfg.action_count:
        raise ValueError(f"action {action} outside [0, {cfg.action_count})")
    g1, g2 = cfg.geom1, cfg.geom2
    dt = net.dtype.type

    # head: d(scale * log pi(action)) / dlogits = scale * (onehot - probs)
    dz = -net.cached_probs.copy()
    dz[action] += dt(1)
    dz *= dt(scale)
    a2_flat = net.cache2.reshape(-1)
    gwd = np.outer(dz, a2_flat)
    gbd = dz.copy()

    grads = Gradients(
        np.zeros_like(net.w1.weights),
        np.zeros_like(net.w1.bias),
        np.zeros_like(net.w2.weights),
        np.zeros_like(net.w2.bias),
        gwd,
        gbd,
    )

    da2 = (net.wd.weights.T @ dz).reshape(net.cache2.shape)
    x1_padded = _padded(net.cache1, g2.padding)
    dx1_padded = np.zeros_like(x1_padded)
    _conv_layer_backward(
        da2, net.cache2, x1_padded, net.w2, g2.stride, rects2,
        grads.w2, grads.b2, dx1_padded,
    )

    p2 = g2.padding
    dx1 = dx1_padded[:, p2 : p2 + g2.in_rows, p2 : p2 + g2.in_cols]
    x0_padded = _padded(net._to_input(frame), g1.padding)
    _conv_layer_backward(
        dx1, net.cache1, x0_padded, net.w1, g1.stride, rects1,
        grads.w1, grads.b1, None,
    )
    return grads


def backward_full(net: CachedNet, frame: Frame, action: int, scale: float) -> Gradients:
    """Gradient of scale * log pi(action | frame) through the whole network.
    Requires the net's last forward pass to have been on ``frame``."""
    g1, g2 = net.config.geom1, net.config.geom2
    return _backward(
        net, frame, action, scale,
        [g1.full_output_rect], [g2.full_output_rect],
    )


def backward_reuse(net: CachedNet, step: TraceStep, scale: float) -> Gradients:
    """Gradient restricted to the regions the forward pass recomputed.

    Dense gradients equal backward_full's; conv gradients accumulate only
    inside step.dirty1/step.dirty2. With full-frame dirty regions this is
    bitwise equal to backward_full (same code path, same rects).
    """
    return _backward(
        net, step.frame, step.action, scale,
        list(step.dirty1.rects), list(step.dirty2.rects),
    )


# ---------------------------------------------------------------- REINFORCE


def returns_to_go(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """Discounted suffix sums: G_t = sum_j gamma^j * r_{t+j}."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    out = np.zeros(len(rewards), dtype=np.float64)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


class GradAccumulator:
    """Running eligibility trace: add(g_t, r_t) maintains E <- gamma*E + g_t
    and total += r_t * E, which telescopes to sum_t G_t * g_t — the
    REINFORCE update — without storing per-step gradients."""

    def __init__(self, net: CachedNet, gamma: float) -> None:
        self._gamma = gamma
        self._trace = Gradients.zeros_like(net)
        self._total = Gradients.zeros_like(net)

    def add(self, g: Gradients, reward: float) -> None:
        for e, t, a in zip(self._trace.arrays(), self._total.arrays(), g.arrays()):
            e *= e.dtype.type(self._gamma)
            e += a
            t += e.dtype.type(reward) * e

    @property
    def total(self) -> Gradients:
        return self._total


def apply_gradient(net: CachedNet, g: Gradients, learning_rate: float) -> None:
    """Gradient-ascent step: theta += learning_rate * g.

    Invalidates the activation caches — they were computed with the old
    weights and would otherwise poison later reuse steps.
    """
    lr = net.dtype.type(learning_rate)
    for w, a in zip(
        (net.w1.weights, net.w1.bias, net.w2.weights, net.w2.bias,
         net.wd.weights, net.wd.bias),
        g.arrays(),
    ):
        w += lr * a
    net.invalidate_cache()


def reinforce_episode(
    net: CachedNet,
    env: PaddleEnvState,
    cfg: TrainConfig,
    rng: Optional[np.random.Generator] = None,
) -> tuple[PaddleEnvState, EpisodeResult]:
    """Play one episode, accumulate sum_t G_t * grad log pi(a_t), and apply
    theta += alpha * total. Returns the advanced environment state and the
    episode record. Deterministic given (weights, env state, cfg.seed) when
    no generator is supplied; callers running many episodes should pass a
    persistent ``rng``.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    forward = net.forward_reuse if cfg.mode == "reuse" else net.forward_full
    acc = GradAccumulator(net, cfg.gamma)
    steps: list[TraceStep] = []
    frame = paddle_render(env)
    done = False
    while not done:
        out = forward(frame)
        p = out.probs.astype(np.float64)
        action = int(rng.choice(len(p), p=p / p.sum()))
        g = _backward(
            net, frame, action, 1.0,
            list(out.dirty1.rects), list(out.dirty2.rects),
        )
        env, next_frame, reward, done = paddle_step(env, action)
        steps.append(
            TraceStep(frame, action, float(out.probs[action]), reward,
                      out.dirty_in, out.dirty1, out.dirty2)
        )
        acc.add(g, reward)
        frame = next_frame
    total = acc.total
    norm = total.norm()
    if not np.isfinite(norm):
        raise DivergenceError(
            f"non-finite gradient after episode of {len(steps)} steps "
            f"(return {sum(s.reward for s in steps)})"
        )
    apply_gradient(net, total, cfg.learning_rate)
    trace = EpisodeTrace(tuple(steps))
    return env, EpisodeResult(trace, trace.total_reward, norm)
