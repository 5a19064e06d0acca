import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amflow import tensor as T
from amflow.amf import (
    MotionFlow,
    amf_loss,
    combine_losses,
    distance_weight,
    extract_amf_full,
    extract_amf_windowed,
    total_loss,
    window_loss,
)
from amflow.attention import OpCounter, TileGrid, build_window_plan, plan_windows, project_qk, temporal_pairs
from amflow.synth import generate_static, generate_translating

from .oracles import full_argmax_flow, tokens_rms, windowed_argmax_flow


def _setup(video, tau=4.0, tile=4):
    h, w = video.height, video.width
    ctx = project_qk(video, seed=0, head_dim=min(8, video.channels), tau=tau)
    tiles = TileGrid(h, w, (tile, tile), (tile, tile))
    return ctx, tiles


def test_full_flow_matches_loop_oracle():
    video, _ = generate_translating(4, 6, 12, 12, (1, -1), texture_seed=5)
    ctx, tiles = _setup(video)
    pairs = temporal_pairs(4, 2)
    flow = extract_amf_full(ctx, tiles, pairs, "hard")
    q = tokens_rms(video.values) @ ctx.w_q
    np.testing.assert_array_equal(flow.delta, full_argmax_flow(q, tiles.centers, pairs, 12))


def test_windowed_flow_matches_loop_oracle():
    video, _ = generate_translating(4, 6, 12, 12, (1, -1), texture_seed=5)
    ctx, tiles = _setup(video)
    for mode in ("argmax", "anchor"):
        plan = plan_windows(ctx, tiles, 2, 5, mode)
        flow = extract_amf_windowed(ctx, plan, "hard")
        q = tokens_rms(video.values) @ ctx.w_q
        oracle = windowed_argmax_flow(q, tiles.centers, plan.pairs, plan.centers, 5, 12, 12)
        np.testing.assert_array_equal(flow.delta, oracle)


def test_static_flow_is_zero():
    video, _ = generate_static(3, 8, 16, 16, seed=2)
    ctx, tiles = _setup(video)
    flow = extract_amf_full(ctx, tiles, temporal_pairs(3, 2), "hard")
    assert not flow.delta.any()


def test_pair_zero_two_on_translating_video():
    video, _ = generate_translating(3, 8, 32, 32, (0, 1), texture_seed=1)
    ctx, tiles = _setup(video)
    flow = extract_amf_full(ctx, tiles, [[0, 2]], "hard")
    x = tiles.centers[:, 1]
    # circular motion: the two rightmost columns of tiles find their match on the far side
    expected_dx = (x + 2) % 32 - x
    np.testing.assert_array_equal(flow.delta[0, :, 0], 0)
    np.testing.assert_array_equal(flow.delta[0, :, 1], expected_dx)
    assert np.sum(expected_dx == 2) == 56


def test_soft_flow_close_to_hard_when_attention_is_peaked():
    video, _ = generate_translating(3, 8, 32, 32, (0, 1), texture_seed=1)
    ctx, tiles = _setup(video, tau=200.0)
    pairs = temporal_pairs(3, 2)
    hard = extract_amf_full(ctx, tiles, pairs, "hard")
    soft = extract_amf_full(ctx, tiles, pairs, "soft")
    assert np.abs(soft.delta - hard.delta).max() < 0.1
    plan = plan_windows(ctx, tiles, 2, 9, "anchor")
    # slots whose match wraps past the right edge have no clear winner inside the window
    inside = tiles.centers[None, :, 1] + (plan.pairs[:, 1] - plan.pairs[:, 0])[:, None] < 32
    gap = np.abs(extract_amf_windowed(ctx, plan, "soft").delta - extract_amf_windowed(ctx, plan, "hard").delta)
    assert gap[inside].max() < 0.1


def test_soft_window_flow_stays_in_window_hull_and_spread_is_nonnegative():
    video, _ = generate_translating(3, 8, 16, 16, (0, 1), texture_seed=1)
    ctx, tiles = _setup(video, tau=1.0)
    plan = plan_windows(ctx, tiles, 2, 5, "anchor")
    soft = extract_amf_windowed(ctx, plan, "soft")
    rel = plan.positions - tiles.centers[None, :, None, :]
    lo = np.where(plan.mask[..., None], rel, np.inf).min(axis=2)
    hi = np.where(plan.mask[..., None], rel, -np.inf).max(axis=2)
    assert np.all(soft.delta >= lo - 1e-12) and np.all(soft.delta <= hi + 1e-12)
    assert soft.spread.data.min() > -1e-12


def test_degenerate_window_equals_full_flow():
    video, _ = generate_translating(3, 6, 15, 15, (0, 1), texture_seed=8)
    ctx, tiles = _setup(video, tile=3)
    pairs = temporal_pairs(3, 2)
    centers = np.full((len(pairs), tiles.n_tiles, 2), 7)
    plan = build_window_plan(centers, 2, 15, 3, 15, 15, tiles)
    np.testing.assert_array_equal(extract_amf_windowed(ctx, plan, "hard").delta, extract_amf_full(ctx, tiles, pairs, "hard").delta)


def test_miscentered_windows_disagree_with_full_flow():
    video, _ = generate_translating(4, 8, 32, 32, (0, 1), texture_seed=3)
    ctx, tiles = _setup(video)
    pairs = temporal_pairs(4, 3)
    full = extract_amf_full(ctx, tiles, pairs, "hard")
    # every window pushed 2*l cells away from the truth (clamped at the border)
    centers = tiles.centers[None] + full.delta.astype(int) + np.array([0, 2 * 5])
    centers[..., 1] = np.where(centers[..., 1] >= 32, centers[..., 1] - 4 * 5, centers[..., 1])
    plan = build_window_plan(centers, 3, 5, 4, 32, 32, tiles)
    agree = np.all(extract_amf_windowed(ctx, plan, "hard").delta == full.delta, axis=-1).mean()
    assert agree < 0.05


def test_windowed_counter_counts_every_window_slot():
    video, _ = generate_static(3, 4, 8, 8)
    ctx, tiles = _setup(video)
    plan = plan_windows(ctx, tiles, 2, 3, "anchor")
    counter = OpCounter()
    extract_amf_windowed(ctx, plan, "hard", counter)
    assert counter.windowed == 3 * tiles.n_tiles * 9
    counter = OpCounter()
    extract_amf_full(ctx, tiles, plan.pairs, "hard", counter)
    assert counter.full == 3 * 64 * 64


def test_full_extraction_rejects_backward_pairs():
    video, _ = generate_static(3, 4, 8, 8)
    ctx, tiles = _setup(video)
    with pytest.raises(ValueError):
        extract_amf_full(ctx, tiles, [[1, 1]], "hard")
    with pytest.raises(ValueError):
        extract_amf_full(ctx, tiles, [[0, 1]], "fuzzy")


@pytest.mark.parametrize("s_f", [2, 3, 5])
def test_distance_weights(s_f):
    assert distance_weight(1, s_f) == 1.0
    assert distance_weight(s_f, s_f, 0.2) == pytest.approx(0.8, abs=1e-15)
    assert distance_weight(s_f + 1, s_f) == 0.0
    ws = [distance_weight(d, s_f) for d in range(1, s_f + 3)]
    assert all(a >= b for a, b in zip(ws, ws[1:]))


def test_distance_weight_edge_cases():
    assert distance_weight(1, 1) == 1.0
    for bad in (0, -1, 1.5):
        with pytest.raises(ValueError):
            distance_weight(bad, 3)


def _flow(pairs, delta):
    return MotionFlow(np.array(pairs), np.array(delta, dtype=float))


def test_amf_loss_hand_examples():
    ref = _flow([[0, 1]], [[[0, 1]]])
    assert amf_loss(ref, ref, 3).item() == 0.0
    assert amf_loss(ref, _flow([[0, 1]], [[[0, 0]]]), 3).item() == 1.0
    two_ref = _flow([[0, 1], [0, 3]], [[[0, 0]], [[0, 0]]])
    two_gen = _flow([[0, 1], [0, 3]], [[[1, 0]], [[0, 1]]])
    assert amf_loss(two_ref, two_gen, 3, 0.2).item() == pytest.approx(0.9, abs=1e-15)


def test_amf_loss_rejects_mismatched_pairs():
    with pytest.raises(ValueError):
        amf_loss(_flow([[0, 1]], [[[0, 0]]]), _flow([[0, 2]], [[[0, 0]]]), 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.floats(0.1, 5.0))
def test_amf_loss_symmetric_and_quadratic(seed, c):
    rng = np.random.default_rng(seed)
    pairs = temporal_pairs(5, 3)
    a = _flow(pairs, rng.normal(size=(len(pairs), 4, 2)))
    b = _flow(pairs, rng.normal(size=(len(pairs), 4, 2)))
    lab, lba = amf_loss(a, b, 3).item(), amf_loss(b, a, 3).item()
    assert lab >= 0 and lab == pytest.approx(lba, rel=1e-12)
    scaled = _flow(pairs, a.delta + c * (b.delta - a.delta))
    assert amf_loss(a, scaled, 3).item() == pytest.approx(c * c * lab, rel=1e-10)


def test_window_loss_static_and_single_step_span():
    video, _ = generate_static(4, 8, 16, 16, seed=1)
    ctx, tiles = _setup(video)
    plan = plan_windows(ctx, tiles, 3, 5, "argmax")
    assert window_loss(ctx, plan).item() == pytest.approx(0.0, abs=1e-20)
    video, _ = generate_translating(4, 8, 16, 16, (0, 1), texture_seed=1)
    ctx, tiles = _setup(video)
    assert window_loss(ctx, plan_windows(ctx, tiles, 1, 5, "argmax")).item() == 0.0


def test_window_loss_prefers_tracking_windows():
    video, _ = generate_translating(5, 8, 32, 32, (0, 1), texture_seed=1)
    ctx, tiles = _setup(video)
    tracking = window_loss(ctx, plan_windows(ctx, tiles, 3, 5, "argmax")).item()
    frozen = window_loss(ctx, plan_windows(ctx, tiles, 3, 5, "anchor")).item()
    # border windows clamp differently per target, so tracking is small but not zero
    assert tracking < 0.5 * frozen


def test_total_loss_weights():
    assert combine_losses(0.2, 0.1) == pytest.approx(1.1, abs=1e-15)
    assert combine_losses(0.2, 0.1, lambda_window=0.0) == 5 * 0.2
    with pytest.raises(ValueError):
        combine_losses(0.2, 0.1, lambda_amf=-1.0)


def test_total_loss_breakdown_is_consistent_and_zero_on_static():
    video, _ = generate_static(3, 8, 16, 16, seed=3)
    ctx, tiles = _setup(video, tau=60.0)
    plan = plan_windows(ctx, tiles, 2, 5, "anchor")
    ref = extract_amf_windowed(ctx, plan, "hard")
    lb = total_loss(ref, ctx, plan, expected=False)
    assert lb.total == lb.lambda_amf * lb.amf + lb.lambda_window * lb.window
    assert lb.total < 1e-12
    assert lb.pair_weights == [1.0, 0.8, 1.0]
    with pytest.raises(ValueError):
        total_loss(ref, ctx, plan, lambda_window=-0.5)


def test_expected_loss_adds_attention_spread():
    video, _ = generate_translating(3, 8, 16, 16, (0, 1), texture_seed=2)
    ctx, tiles = _setup(video, tau=1.0)
    plan = plan_windows(ctx, tiles, 2, 5, "anchor")
    ref = extract_amf_windowed(ctx, plan, "hard")
    soft = extract_amf_windowed(ctx, plan, "soft")
    plain = amf_loss(ref, soft, 2).item()
    expected = amf_loss(ref, soft, 2, expected=True).item()
    weights = np.array([distance_weight(j - i, 2) for i, j in plan.pairs])
    extra = (weights * soft.spread.data.mean(axis=1)).sum() / len(weights)
    assert expected == pytest.approx(plain + extra, rel=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_total_loss_gradient_small_instance(seed):
    # two frames on a 4x4 grid, 2x2 tiles
    video, _ = generate_translating(2, 4, 4, 4, (0, 1), texture_seed=seed)
    ctx = project_qk(video, head_dim=4, tau=4.0)
    tiles = TileGrid(4, 4, (2, 2), (2, 2))
    plan = plan_windows(ctx, tiles, 1, 3, "anchor")
    ref = extract_amf_windowed(ctx, plan, "hard")
    x = video.values + 0.3 * np.random.default_rng(seed).standard_normal(video.shape)

    def loss(t):
        return total_loss(ref, project_qk(t, head_dim=4, tau=4.0), plan).total_tensor

    assert T.check_gradient(loss, x, step=1e-3) < 1e-4
