"""Attention motion flow: dense oracle and windowed extraction, and the guidance losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import grid_positions

FLOW_MODES = ("hard", "soft")


@dataclass
class MotionFlow:
    """Displacements ``delta[n, p] = (dy, dx)`` for pair ``pairs[n]`` and tile ``p``.

    Soft flows extracted from a differentiable context also keep ``tensor``, the
    same values on the tape.
    """

    pairs: np.ndarray
    delta: np.ndarray
    mode: str = "hard"
    tensor: T.Tensor | None = field(default=None, repr=False)
    spread: T.Tensor | None = field(default=None, repr=False)  # (n_pairs, N_tiles) attention variance

    def as_tensor(self):
        return self.tensor if self.tensor is not None else T.constant(self.delta)


def _check_mode(mode):
    if mode not in FLOW_MODES:
        raise ValueError(f"unknown flow mode {mode!r}; expected one of {FLOW_MODES}")


def extract_amf_full(ctx, tiles, pairs, mode="hard", counter=None):
    """Brute-force flow: per pair, the dense ``S x S`` map of every query against every key.

    Only the representative rows are turned into displacements; the rest of the
    map is what dense extraction pays for, and it is charged to ``counter.full``.
    """
    _check_mode(mode)
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    if np.any(pairs[:, 1] <= pairs[:, 0]):
        raise ValueError("pairs must satisfy j > i")
    pos = grid_positions(ctx.height, ctx.width)
    rep = tiles.center_index
    q, k = ctx.q.data, ctx.k.data
    out = np.empty((len(pairs), tiles.n_tiles, 2))
    for n, (i, j) in enumerate(pairs):
        dense = (q[i] @ k[j].T) * ctx.score_scale
        if counter is not None:
            counter.full += dense.size
        rows = dense[rep]
        if mode == "hard":
            target = pos[np.argmax(rows, axis=1)]
        else:
            target = T.softmax_last_axis(rows).data @ pos
        out[n] = target - tiles.centers
    return MotionFlow(pairs, out, mode)


def windowed_scores(ctx, plan):
    """Scores ``(n_pairs, N_tiles, l*l)`` of representative queries against their window keys (on the tape)."""
    F, S, D = ctx.q.shape
    tiles = plan.tiles
    q_flat = T.reshape(ctx.q, (F * S, D))
    k_flat = q_flat if ctx.k is ctx.q else T.reshape(ctx.k, (F * S, D))
    anchors = plan.pairs[:, 0:1] * S + tiles.center_index[None, :]  # (P, N)
    keys_at = plan.pairs[:, 1, None, None] * S + plan.index  # (P, N, L)
    q_rep = T.reshape(T.take(q_flat, anchors), anchors.shape + (D, 1))
    keys = T.take(k_flat, keys_at)  # (P, N, L, D)
    scores = T.reshape(T.matmul(keys, q_rep), keys_at.shape)
    return T.scale(scores, ctx.score_scale)


def extract_amf_windowed(ctx, plan, mode="hard", counter=None):
    """Flow restricted to the planned windows.

    Hard mode takes the in-window argmax (ties to the smallest flat index); soft
    mode renormalizes the softmax over the window and returns the expected
    position, which stays differentiable through ``ctx``.
    """
    _check_mode(mode)
    scores = windowed_scores(ctx, plan)
    if counter is not None:
        counter.windowed += scores.data.size
    rep = plan.tiles.centers.astype(np.float64)
    if mode == "hard":
        masked = np.where(plan.mask, scores.data, -np.inf)
        best = np.argmax(masked, axis=-1)
        target = np.take_along_axis(plan.positions, best[..., None, None], axis=-2)[..., 0, :]
        return MotionFlow(plan.pairs, target - rep, "hard")
    attn = T.softmax_last_axis(scores, mask=plan.mask)
    rel = plan.positions - rep[None, :, None, :]
    delta = T.position_weighted_sum(attn, rel)
    second = T.position_weighted_sum(attn, (rel * rel).sum(axis=-1, keepdims=True))
    spread = T.sub(T.reshape(second, second.shape[:-1]), T.squared_l2(delta, axis=-1))
    return MotionFlow(plan.pairs, delta.data, "soft", tensor=delta, spread=spread)


def distance_weight(d, s_f, alpha=0.2):
    """Linearly decaying pair weight: 1 at distance 1, ``1 - alpha`` at ``s_f``, 0 beyond."""
    if d < 1 or int(d) != d:
        raise ValueError(f"frame distance must be a positive integer, got {d}")
    if d > s_f:
        return 0.0
    if s_f == 1:
        return 1.0
    return 1.0 - alpha * (d - 1) / (s_f - 1)


def amf_loss(flow_ref, flow_gen, s_f, alpha=0.2, expected=False):
    """Weighted mean over pairs of the tile-averaged squared displacement error (a Tensor).

    With ``expected=True`` and a soft generated flow, the squared error is taken
    in expectation over the window attention, which adds the attention spread
    to the plug-in error; for one-hot attention both agree.
    """
    if flow_ref.pairs.shape != flow_gen.pairs.shape or np.any(flow_ref.pairs != flow_gen.pairs):
        raise ValueError("reference and generated flows cover different pair sets")
    if flow_ref.delta.shape != flow_gen.delta.shape:
        raise ValueError(f"flow shapes differ: {flow_ref.delta.shape} vs {flow_gen.delta.shape}")
    weights = np.array([distance_weight(j - i, s_f, alpha) for i, j in flow_ref.pairs])
    diff = T.sub(flow_gen.as_tensor(), flow_ref.as_tensor())
    err = T.squared_l2(diff, axis=-1)  # (P, N)
    if expected and flow_gen.spread is not None:
        err = T.add(err, flow_gen.spread)
    per_pair = T.mean(err, axis=1)  # (P,)
    return T.scale(T.sum(T.mul(per_pair, weights)), 1.0 / len(weights))


def window_means(ctx, plan):
    """Mean key over each in-bounds window, ``(n_pairs, N_tiles, D_h)`` on the tape."""
    F, S, D = ctx.k.shape
    k_flat = T.reshape(ctx.k, (F * S, D))
    keys = T.take(k_flat, plan.pairs[:, 1, None, None] * S + plan.index)  # (P, N, L, D)
    weights = plan.mask / plan.mask.sum(axis=-1, keepdims=True)
    return T.sum(T.mul(keys, weights[..., None]), axis=2)


def _consecutive_targets(pairs):
    """Index pairs ``(a, b)`` into ``pairs`` for consecutive targets of one anchor, plus per-row weights."""
    by_anchor = {}
    for n, (i, j) in enumerate(pairs):
        by_anchor.setdefault(int(i), []).append((int(j), n))
    first, second, coef = [], [], []
    anchors = [i for i, lst in by_anchor.items() if len(lst) >= 2]
    for i in anchors:
        lst = sorted(by_anchor[i])
        for (_, a), (_, b) in zip(lst, lst[1:]):
            first.append(a)
            second.append(b)
            coef.append(1.0 / (len(lst) - 1))
    if not anchors:
        return None
    coef = np.array(coef) / len(anchors)
    return np.array(first), np.array(second), coef


def window_loss(ctx, plan):
    """Drift of the window-mean key between consecutive targets of the same anchor.

    Averaged per anchor over its ``N_i - 1`` consecutive target pairs, over tiles,
    and over the anchors that have at least two targets. Zero when no anchor does
    (``s_f == 1``).
    """
    idx = _consecutive_targets(plan.pairs)
    if idx is None:
        return T.constant(0.0)
    first, second, coef = idx
    means = window_means(ctx, plan)
    drift = T.sub(T.take(means, second), T.take(means, first))  # (M, N, D)
    per_row = T.mean(T.squared_l2(drift, axis=-1), axis=1)  # (M,)
    return T.sum(T.mul(per_row, coef))


@dataclass
class LossBreakdown:
    amf: float
    window: float
    total: float
    lambda_amf: float
    lambda_window: float
    pair_weights: list
    total_tensor: T.Tensor | None = field(default=None, repr=False)


def combine_losses(l_amf, l_window, lambda_amf=5.0, lambda_window=1.0):
    if lambda_amf < 0 or lambda_window < 0:
        raise ValueError("loss weights must be non-negative")
    return lambda_amf * l_amf + lambda_window * l_window


def total_loss(flow_ref, ctx_gen, plan, lambda_amf=5.0, lambda_window=1.0, alpha=0.2, window_plan=None, expected=True):
    """Weighted motion loss plus corresponding-window loss for a generated context.

    The generated flow is the soft windowed flow of ``ctx_gen`` over ``plan``;
    the window loss uses ``window_plan`` (defaults to ``plan``).
    """
    if lambda_amf < 0 or lambda_window < 0:
        raise ValueError("loss weights must be non-negative")
    flow_gen = extract_amf_windowed(ctx_gen, plan, "soft")
    l_amf = amf_loss(flow_ref, flow_gen, plan.s_f, alpha, expected=expected)
    wp = plan if window_plan is None else window_plan
    l_win = window_loss(ctx_gen, wp)
    total = T.add(T.scale(l_amf, lambda_amf), T.scale(l_win, lambda_window))
    weights = [distance_weight(j - i, plan.s_f, alpha) for i, j in plan.pairs]
    return LossBreakdown(
        amf=l_amf.item(),
        window=l_win.item(),
        total=total.item(),
        lambda_amf=float(lambda_amf),
        lambda_window=float(lambda_window),
        pair_weights=weights,
        total_tensor=total,
    )
