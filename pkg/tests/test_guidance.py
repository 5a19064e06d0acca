import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amflow.guidance import (
    AdamState,
    GuidanceConfig,
    adamw_step,
    gradient_computations,
    gradient_similarity_diag,
    inner_optimize,
    lr_at,
    median_adjacent_similarity,
    should_compute_gradient,
    write_trace_csv,
)
from amflow.tensor import NonFiniteError

from .oracles import adamw_scalar


def test_lr_schedule_endpoints():
    assert lr_at(0, 10) == 0.003
    assert lr_at(9, 10) == pytest.approx(0.002, abs=1e-18)
    assert lr_at(0, 1) == 0.003
    lrs = [lr_at(j, 10) for j in range(10)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_at(10, 10)


@pytest.mark.parametrize("skip, expected", [(1, 10), (2, 5), (3, 4), (5, 2), (10, 1), (20, 1)])
def test_gradient_schedule_counts(skip, expected):
    mask = [should_compute_gradient(j, skip) for j in range(10)]
    assert mask[0]
    assert sum(mask) == expected == gradient_computations(10, skip)


def test_force_full_overrides_skipping():
    assert all(should_compute_gradient(j, 3, force_full=True) for j in range(10))
    assert gradient_computations(10, 3, force_full=True) == 10


def test_config_rejects_bad_values():
    for bad in ({"skip_interval": 0}, {"inner_steps": 0}, {"lr_start": 0.001, "lr_end": 0.002}, {"l": 4}, {"tau": 0.0}, {"lambda_window": -1}):
        with pytest.raises(ValueError):
            GuidanceConfig(**bad)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.floats(-2, 2), st.floats(1e-4, 0.1))
def test_adamw_matches_scalar_oracle(grads, x0, lr):
    x = np.array([x0])
    state = AdamState.zeros_like(x)
    xs, m, v, t = x0, 0.0, 0.0, 0
    for g in grads:
        x, state = adamw_step(x, np.array([g]), state, lr)
        xs, m, v = adamw_scalar(xs, g, m, v, t, lr)
        t += 1
    assert x[0] == pytest.approx(xs, rel=1e-12, abs=1e-15)


def test_zero_gradient_only_decays():
    x = np.array([2.0, -1.0])
    out, _ = adamw_step(x, np.zeros(2), AdamState.zeros_like(x), 0.01)
    np.testing.assert_allclose(out, x * (1 - 0.01 * 0.01), rtol=1e-15)


def test_reuse_without_moment_update_keeps_state():
    x = np.array([1.0])
    _, state = adamw_step(x, np.array([0.5]), AdamState.zeros_like(x), 0.01)
    _, again = adamw_step(x, np.array([9.0]), state, 0.01, update_moments=False)
    assert again is state


def _quadratic(counter):
    target = np.array([1.0, -2.0, 0.5])

    def ev(x):
        counter.append(1)
        d = x - target
        return float(d @ d), 2 * d

    return ev


@pytest.mark.parametrize("skip", [1, 3, 10])
def test_inner_loop_counts_and_evaluator_calls(skip):
    calls = []
    cfg = GuidanceConfig(skip_interval=skip)
    _, cache, trace = inner_optimize(np.zeros(3), _quadratic(calls), cfg)
    assert cache.compute_count == len(calls) == gradient_computations(10, skip)
    assert cache.reuse_count == 10 - cache.compute_count
    assert [r.computed for r in trace.rows] == [j % skip == 0 for j in range(10)]
    assert len(trace.gradients) == cache.compute_count


def test_inner_loop_lowers_quadratic_loss_with_and_without_skipping():
    def final_loss(skip):
        cfg = GuidanceConfig(skip_interval=skip, inner_steps=50, lr_start=0.1, lr_end=0.05)
        x, _, _ = inner_optimize(np.zeros(3), _quadratic([]), cfg)
        return _quadratic([])(x)[0]

    start = _quadratic([])(np.zeros(3))[0]
    assert final_loss(1) < 0.1 * start
    assert final_loss(10) < start


def test_inner_loop_is_deterministic_and_does_not_mutate_input():
    x0 = np.linspace(-1, 1, 3)
    keep = x0.copy()
    a, _, _ = inner_optimize(x0, _quadratic([]), GuidanceConfig())
    b, _, _ = inner_optimize(x0, _quadratic([]), GuidanceConfig())
    assert a.tobytes() == b.tobytes()
    assert np.array_equal(x0, keep)


def test_non_finite_gradient_aborts():
    def bad(x):
        return 1.0, np.full_like(x, np.nan)

    with pytest.raises(NonFiniteError, match="inner step 0"):
        inner_optimize(np.zeros(2), bad, GuidanceConfig())


def test_trace_sink_receives_every_row():
    seen = []
    inner_optimize(np.zeros(3), _quadratic([]), GuidanceConfig(), trace_sink=seen.append)
    assert [r.step for r in seen] == list(range(10))


def test_gradient_similarity_constant_and_orthogonal():
    sim, zero = gradient_similarity_diag([np.ones(4) * k for k in (1, 2, 3)])
    np.testing.assert_allclose(sim, 1.0, atol=1e-15)
    assert not zero.any()
    sim, _ = gradient_similarity_diag(list(np.eye(3)))
    np.testing.assert_allclose(sim, np.eye(3), atol=1e-15)
    assert median_adjacent_similarity(sim) == 0.0


def test_gradient_similarity_flags_zero_rows():
    sim, zero = gradient_similarity_diag([np.ones(3), np.zeros(3), -np.ones(3)])
    assert zero.tolist() == [False, True, False]
    assert sim[1].tolist() == [0.0, 0.0, 0.0]
    assert sim[0, 2] == pytest.approx(-1.0)
    assert np.all(np.abs(sim) <= 1.0)


def test_median_adjacent_needs_two_steps():
    assert np.isnan(median_adjacent_similarity(np.ones((1, 1))))


def test_trace_csv(tmp_path):
    _, _, trace = inner_optimize(np.zeros(3), _quadratic([]), GuidanceConfig(skip_interval=3))
    path = tmp_path / "trace.csv"
    write_trace_csv(path, trace.rows, extra={"outer_step": [7] * 10})
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["outer_step", "step", "computed", "loss", "grad_norm", "lr", "wall_time_ns"]
    assert [r["computed"] for r in rows] == ["1", "0", "0", "1", "0", "0", "1", "0", "0", "1"]
    assert rows[1]["loss"] == "" and float(rows[0]["loss"]) > 0
