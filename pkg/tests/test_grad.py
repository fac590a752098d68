"""Gradient correctness and REINFORCE training behavior.

The load-bearing checks: central finite differences over every parameter of
a small double-precision net; bitwise identity of full-dirty reuse backprop
with full backprop; and agreement of region-restricted backprop with a mask
oracle (full-array backprop with per-position contributions zeroed outside
the dirty regions) built from independent einsum arithmetic.
"""
from __future__ import annotations

import numpy as np
import pytest

from reconv.engine import CachedNet, NetConfig
from reconv.frames import (
    Frame,
    PaddleEnvState,
    SpriteConfig,
    paddle_init,
    paddle_render,
    sprite_frame,
)
from reconv.grad import (
    DivergenceError,
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
from reconv.region import Rect, RegionSet
from reconv.tensor import ConvWeights, DenseWeights, conv2d, dense, relu, softmax


# ------------------------------------------------------------------ helpers


def rel_gap(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), 1e-12)
    return float(np.abs(a - b).max(initial=0.0)) / denom


def assert_grads_close(a: Gradients, b: Gradients, tol: float) -> None:
    for x, y in zip(a.arrays(), b.arrays()):
        assert rel_gap(x, y) <= tol


def make_net(
    rows: int = 16,
    cols: int = 16,
    f1: int = 4,
    f2: int = 8,
    seed: int = 0,
    dtype=np.float64,
    **kw,
) -> CachedNet:
    cfg = NetConfig(rows, cols, f1, f2, **kw)
    return CachedNet.initialize(cfg, seed=seed, dtype=np.dtype(dtype))


def random_frame(rng: np.random.Generator, rows: int = 16, cols: int = 16) -> Frame:
    return Frame(rng.integers(0, 256, size=(rows, cols), dtype=np.uint8))


def margin_net() -> tuple[CachedNet, Frame]:
    """A net built so every pre-activation sits far from the ReLU kink:
    positive weights and bright pixels keep three layer-1 filters strictly
    active, one negated filter strictly dead, and all layer-2 pre-activations
    positive. Finite differences at h=1e-3 then never cross a kink."""
    rng = np.random.default_rng(7)
    cfg = NetConfig(16, 16, 4, 8, padding1=0, padding2=0)
    # magnitudes tuned small: activations stay O(1) and the logits balanced,
    # keeping softmax curvature low enough for 1e-4-relative finite diffs
    w1 = rng.uniform(0.05, 0.2, size=(4, 1, 3, 3))
    w1[0] *= -1.0
    w2 = rng.uniform(0.01, 0.04, size=(8, 4, 3, 3))
    wd = 0.3 * rng.standard_normal((3, cfg.dense_in)) / np.sqrt(cfg.dense_in)
    net = CachedNet(
        cfg,
        ConvWeights(w1, np.full(4, 0.01)),
        ConvWeights(w2, np.full(8, 0.01)),
        DenseWeights(wd, rng.uniform(-0.05, 0.05, size=3)),
    )
    frame = Frame(rng.integers(100, 256, size=(16, 16), dtype=np.uint8))
    return net, frame


def log_pi(net: CachedNet, frame: Frame, action: int) -> float:
    """log pi(action | frame) recomputed functionally from current weights."""
    g1, g2 = net.config.geom1, net.config.geom2
    x = net._to_input(frame)
    a1 = relu(conv2d(x, net.w1, g1))
    a2 = relu(conv2d(a1, net.w2, g2))
    z = dense(a2.reshape(-1), net.wd)
    return float(np.log(softmax(z)[action]))


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x.copy()
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def _region_mask(region: RegionSet, shape: tuple[int, int]) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    for r in region:
        m[r.row0 : r.row1 + 1, r.col0 : r.col1 + 1] = True
    return m


def mask_oracle(
    net: CachedNet,
    frame: Frame,
    action: int,
    scale: float,
    dirty1: RegionSet,
    dirty2: RegionSet,
) -> Gradients:
    """Full-array backprop with conv contributions masked to the dirty
    regions — an independent einsum formulation of reuse-mode gradients."""
    cfg = net.config
    g1, g2 = cfg.geom1, cfg.geom2
    x = net._to_input(frame)
    a1 = relu(conv2d(x, net.w1, g1))
    a2 = relu(conv2d(a1, net.w2, g2))
    z = dense(a2.reshape(-1), net.wd)
    p = softmax(z)
    dz = -p.copy()
    dz[action] += 1.0
    dz *= np.asarray(scale, dtype=p.dtype)

    gwd = np.outer(dz, a2.reshape(-1))
    gbd = dz.copy()

    def conv_grads(dout, act, xp, w, stride, mask):
        dpre = dout * (act > 0) * mask
        gw = np.zeros_like(w.weights)
        dxp = np.zeros_like(xp)
        h, wid = act.shape[1], act.shape[2]
        for dr in range(w.kernel):
            rsl = slice(dr, dr + (h - 1) * stride + 1, stride)
            for dc in range(w.kernel):
                csl = slice(dc, dc + (wid - 1) * stride + 1, stride)
                xs = xp[:, rsl, csl]
                gw[:, :, dr, dc] = np.einsum("ohw,ihw->oi", dpre, xs)
                dxp[:, rsl, csl] += np.einsum(
                    "oi,ohw->ihw", w.weights[:, :, dr, dc], dpre
                )
        return gw, dpre.sum(axis=(1, 2)), dxp

    m2 = _region_mask(dirty2, a2.shape[1:])
    gw2, gb2, dx1p = conv_grads(
        (net.wd.weights.T @ dz).reshape(a2.shape), a2, _pad(a1, g2.padding),
        net.w2, g2.stride, m2,
    )
    p2 = g2.padding
    dx1 = dx1p[:, p2 : p2 + a1.shape[1], p2 : p2 + a1.shape[2]]
    m1 = _region_mask(dirty1, a1.shape[1:])
    gw1, gb1, _ = conv_grads(dx1, a1, _pad(x, g1.padding), net.w1, g1.stride, m1)
    return Gradients(gw1, gb1, gw2, gb2, gwd, gbd)


def full_sets(net: CachedNet) -> tuple[RegionSet, RegionSet]:
    g1, g2 = net.config.geom1, net.config.geom2
    return (
        RegionSet((g1.full_output_rect,)),
        RegionSet((g2.full_output_rect,)),
    )


def trace_step_from(out, frame: Frame, action: int, reward: float = 0.0) -> TraceStep:
    return TraceStep(
        frame, action, float(out.probs[action]), reward,
        out.dirty_in, out.dirty1, out.dirty2,
    )


# ----------------------------------------------------------- backward basics


def test_scale_zero_gives_all_zero_gradients():
    net, frame = margin_net()
    net.forward_full(frame)
    g = backward_full(net, frame, action=2, scale=0.0)
    for a in g.arrays():
        assert not a.any()
    assert g.norm() == 0.0


def test_dense_bias_gradient_is_onehot_minus_probs():
    net, frame = margin_net()
    out = net.forward_full(frame)
    for action in range(3):
        g = backward_full(net, frame, action, scale=1.0)
        expect = -out.probs.copy()
        expect[action] += 1.0
        np.testing.assert_array_equal(g.bd, expect)
        # dense weight gradient is the same signal times the activations
        np.testing.assert_allclose(
            g.wd, np.outer(expect, net.cache2.reshape(-1)), rtol=0, atol=0
        )


def test_backward_without_forward_raises():
    net, frame = margin_net()
    with pytest.raises(StaleForwardError):
        backward_full(net, frame, 0, 1.0)


def test_backward_on_mismatched_frame_raises():
    net, frame = margin_net()
    net.forward_full(frame)
    other = Frame(np.zeros((16, 16), dtype=np.uint8))
    with pytest.raises(StaleForwardError):
        backward_full(net, other, 0, 1.0)


def test_backward_after_weight_update_raises():
    net, frame = margin_net()
    net.forward_full(frame)
    g = backward_full(net, frame, 0, 1.0)
    apply_gradient(net, g, 1e-3)
    with pytest.raises(StaleForwardError):
        backward_full(net, frame, 0, 1.0)


def test_backward_rejects_bad_action():
    net, frame = margin_net()
    net.forward_full(frame)
    with pytest.raises(ValueError):
        backward_full(net, frame, 3, 1.0)


def test_finite_differences_every_parameter():
    net, frame = margin_net()

    # guard the construction: all pre-activations clear of the kink
    g1, g2 = net.config.geom1, net.config.geom2
    z1 = conv2d(net._to_input(frame), net.w1, g1)
    z2 = conv2d(relu(z1), net.w2, g2)
    assert np.abs(z1).min() > 0.05
    assert np.abs(z2).min() > 0.05

    action = 1
    net.forward_full(frame)
    an = backward_full(net, frame, action, scale=1.0)

    h = 1e-3
    worst = 0.0
    pairs = [
        (net.w1.weights, an.w1), (net.w1.bias, an.b1),
        (net.w2.weights, an.w2), (net.w2.bias, an.b2),
        (net.wd.weights, an.wd), (net.wd.bias, an.bd),
    ]
    for theta, grad in pairs:
        flat_t = theta.reshape(-1)
        flat_g = grad.reshape(-1)
        for i in range(flat_t.size):
            orig = flat_t[i]
            flat_t[i] = orig + h
            up = log_pi(net, frame, action)
            flat_t[i] = orig - h
            down = log_pi(net, frame, action)
            flat_t[i] = orig
            fd = (up - down) / (2 * h)
            err = abs(fd - flat_g[i]) / max(abs(fd), abs(flat_g[i]), 1e-5)
            worst = max(worst, err)
    assert worst <= 1e-4, f"worst relative finite-difference error {worst:.3e}"


def test_scale_linearity():
    net, frame = margin_net()
    net.forward_full(frame)
    g1 = backward_full(net, frame, 0, scale=1.25)
    g2 = backward_full(net, frame, 0, scale=2.5)
    for a, b in zip(g1.arrays(), g2.arrays()):
        assert rel_gap(2.0 * a, b) <= 1e-6


# --------------------------------------------------------- reuse-mode grads


def test_full_dirty_reuse_backward_is_bitwise_full():
    net, frame = margin_net()
    out = net.forward_full(frame)
    step = trace_step_from(out, frame, action=2)
    # forward_full records full region sets, so this is the degenerate case
    ref = backward_full(net, frame, 2, scale=0.7)
    got = backward_reuse(net, step, scale=0.7)
    for a, b in zip(ref.arrays(), got.arrays()):
        np.testing.assert_array_equal(a, b)


def test_empty_dirty_conv_grads_zero_dense_matches():
    net = make_net(seed=3)
    rng = np.random.default_rng(5)
    frame = random_frame(rng)
    net.forward_full(frame)
    out = net.forward_reuse(frame)  # identical frame -> empty dirty sets
    assert out.dirty_in.is_empty and out.dirty1.is_empty and out.dirty2.is_empty
    step = trace_step_from(out, frame, action=1)
    got = backward_reuse(net, step, scale=1.0)
    ref = backward_full(net, frame, 1, scale=1.0)
    for a in (got.w1, got.b1, got.w2, got.b2):
        assert not a.any()
    assert rel_gap(got.wd, ref.wd) <= 1e-12
    assert rel_gap(got.bd, ref.bd) <= 1e-12


@pytest.mark.parametrize("diff_tile", [None, 5])
def test_sprite_sequence_matches_mask_oracle(diff_tile):
    cfg_kw = dict(diff_tile=diff_tile)
    net = make_net(rows=24, cols=24, f1=4, f2=6, seed=11, **cfg_kw)
    sprite = SpriteConfig(24, 24, sprite_rows=5, sprite_cols=4,
                          velocity=(1, 2), start=(3, 2))
    net.forward_full(sprite_frame(sprite, 0))
    rng = np.random.default_rng(17)
    for t in range(1, 9):
        frame = sprite_frame(sprite, t)
        out = net.forward_reuse(frame)
        assert not out.dirty2.is_empty
        action = int(rng.integers(0, 3))
        got = backward_reuse(net, trace_step_from(out, frame, action), scale=1.0)
        want = mask_oracle(net, frame, action, 1.0, out.dirty1, out.dirty2)
        assert_grads_close(got, want, 1e-6)


def test_full_backward_matches_unmasked_oracle():
    net, frame = margin_net()
    net.forward_full(frame)
    d1, d2 = full_sets(net)
    got = backward_full(net, frame, 0, scale=1.0)
    want = mask_oracle(net, frame, 0, 1.0, d1, d2)
    assert_grads_close(got, want, 1e-10)


def test_backward_reuse_on_stale_net_raises():
    net = make_net(seed=3)
    rng = np.random.default_rng(5)
    frame = random_frame(rng)
    out = net.forward_full(frame)
    step = trace_step_from(out, frame, action=0)
    net.forward_full(random_frame(rng))  # net has moved on
    with pytest.raises(StaleForwardError):
        backward_reuse(net, step, 1.0)


# -------------------------------------------------------------- returns


def test_returns_single_reward():
    np.testing.assert_array_equal(returns_to_go([1.0], 0.5), [1.0])


def test_returns_pinned_sequence():
    np.testing.assert_allclose(
        returns_to_go([0.0, 0.0, 1.0], 0.99), [0.9801, 0.99, 1.0], rtol=0, atol=1e-15
    )


def test_returns_gamma_zero_is_identity():
    r = [0.5, -1.0, 2.0, 0.0]
    np.testing.assert_array_equal(returns_to_go(r, 0.0), r)


def test_returns_validates_gamma():
    with pytest.raises(ValueError):
        returns_to_go([1.0], 1.5)
    with pytest.raises(ValueError):
        returns_to_go([1.0], -0.1)


# ---------------------------------------------------------- accumulation


def random_gradients(rng: np.random.Generator, net: CachedNet) -> Gradients:
    z = Gradients.zeros_like(net)
    return Gradients(*(rng.standard_normal(a.shape) for a in z.arrays()))


def test_accumulator_equals_return_weighted_sum():
    net = make_net(rows=8, cols=8, f1=2, f2=3, seed=1)
    rng = np.random.default_rng(2)
    gamma = 0.9
    grads = [random_gradients(rng, net) for _ in range(6)]
    rewards = rng.standard_normal(6)
    acc = GradAccumulator(net, gamma)
    for g, r in zip(grads, rewards):
        acc.add(g, float(r))
    returns = returns_to_go(rewards, gamma)
    for idx, total in enumerate(acc.total.arrays()):
        want = sum(G * g.arrays()[idx] for G, g in zip(returns, grads))
        assert rel_gap(total, want) <= 1e-12


def test_accumulator_zero_rewards_gives_zero_update():
    net = make_net(rows=8, cols=8, f1=2, f2=3, seed=1)
    rng = np.random.default_rng(4)
    acc = GradAccumulator(net, 0.99)
    for _ in range(5):
        acc.add(random_gradients(rng, net), 0.0)
    before = [a.copy() for a in
              (net.w1.weights, net.w1.bias, net.w2.weights,
               net.w2.bias, net.wd.weights, net.wd.bias)]
    apply_gradient(net, acc.total, 1e-2)
    after = (net.w1.weights, net.w1.bias, net.w2.weights,
             net.w2.bias, net.wd.weights, net.wd.bias)
    for b, a in zip(before, after):
        np.testing.assert_array_equal(b, a)


def test_apply_gradient_updates_and_invalidates():
    net, frame = margin_net()
    net.forward_full(frame)
    g = backward_full(net, frame, 0, 1.0)
    w1_before = net.w1.weights.copy()
    apply_gradient(net, g, 0.1)
    assert not net.warm
    np.testing.assert_array_equal(net.w1.weights, w1_before + 0.1 * g.w1)


# ------------------------------------------------------------- REINFORCE


def paddle_setup(seed: int = 3) -> tuple[CachedNet, PaddleEnvState]:
    net = make_net(rows=16, cols=16, f1=4, f2=6, seed=seed, dtype=np.float32)
    env = paddle_init(16, 16, seed=seed)
    return net, env


def weights_of(net: CachedNet) -> list[np.ndarray]:
    return [a.copy() for a in (net.w1.weights, net.w1.bias, net.w2.weights,
                               net.w2.bias, net.wd.weights, net.wd.bias)]


def test_reinforce_alpha_zero_plays_but_leaves_weights():
    net, env = paddle_setup()
    before = weights_of(net)
    cfg = TrainConfig(learning_rate=0.0, seed=9)
    env2, result = reinforce_episode(net, env, cfg)
    assert len(result.trace.steps) == 15  # 16-row board, fall rate 1
    assert abs(result.episode_return) == 1.0  # terminal catch or miss
    assert env2.spawns == env.spawns + 1
    for b, a in zip(before, weights_of(net)):
        np.testing.assert_array_equal(b, a)
    assert not net.warm  # update path still clears caches


@pytest.mark.parametrize("mode", ["full", "reuse"])
def test_reinforce_fixed_seed_trajectories_identical(mode):
    def run():
        net, env = paddle_setup()
        rng = np.random.default_rng(21)
        cfg = TrainConfig(mode=mode)
        returns = []
        for _ in range(3):
            env, result = reinforce_episode(net, env, cfg, rng)
            assert np.isfinite(result.grad_norm)
            returns.append(result.episode_return)
        return weights_of(net), returns

    (w_a, r_a), (w_b, r_b) = run(), run()
    assert r_a == r_b
    for a, b in zip(w_a, w_b):
        np.testing.assert_array_equal(a, b)


def test_reinforce_trace_contents():
    net, env = paddle_setup()
    _, result = reinforce_episode(net, env, TrainConfig(seed=5))
    steps = result.trace.steps
    assert all(0.0 < s.prob <= 1.0 for s in steps)
    assert all(s.reward == 0.0 for s in steps[:-1])
    assert steps[-1].reward in (1.0, -1.0)
    assert result.trace.total_reward == result.episode_return
    assert isinstance(result.trace, EpisodeTrace)


def test_reinforce_modes_start_equal_then_diverge():
    # same sampling stream: the first episode's actions agree step for step,
    # so full and reuse runs stay comparable; weights may drift afterwards
    net_f, env_f = paddle_setup()
    net_r, env_r = paddle_setup()
    _, res_f = reinforce_episode(net_f, env_f, TrainConfig(mode="full", seed=13))
    _, res_r = reinforce_episode(net_r, env_r, TrainConfig(mode="reuse", seed=13))
    assert [s.action for s in res_f.trace.steps] == [s.action for s in res_r.trace.steps]
    assert res_f.episode_return == res_r.episode_return


def test_reinforce_divergence_detected():
    _, env = paddle_setup()
    # inflate the conv weights so layer-2 activations reach ~1e160 (their
    # squares overflow the float64 gradient norm) while shrinking the dense
    # weights keeps the logits ordinary and the forward pass healthy
    net64 = make_net(rows=16, cols=16, f1=4, f2=6, seed=0, dtype=np.float64)
    for arr, c in ((net64.w1.weights, 1e100), (net64.w2.weights, 1e60),
                   (net64.wd.weights, 1e-161)):
        arr *= c
    with pytest.raises(DivergenceError):
        reinforce_episode(net64, env, TrainConfig(seed=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.5)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1e-3)
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(mode="half")
    TrainConfig(learning_rate=0.0)  # explicitly allowed: plays without learning


def test_trace_step_validation():
    frame = Frame(np.zeros((4, 4), dtype=np.uint8))
    empty = RegionSet(())
    with pytest.raises(ValueError):
        TraceStep(frame, 0, 0.0, 0.0, empty, empty, empty)
    with pytest.raises(ValueError):
        TraceStep(frame, 0, 0.5, float("nan"), empty, empty, empty)
