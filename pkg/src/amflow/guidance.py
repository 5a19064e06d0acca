"""Latent-only inner optimization with AdamW and step-skipping gradient reuse."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import NonFiniteError


@dataclass
class GuidanceConfig:
    inner_steps: int = 10
    skip_interval: int = 3
    lr_start: float = 0.003
    lr_end: float = 0.002
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    force_full_gradients: bool = False
    moments_on_reuse: bool = True
    lambda_amf: float = 5.0
    lambda_window: float = 1.0
    alpha: float = 0.2
    s_f: int = 3
    l: int = 9
    tau: float = 4.0
    head_dim: int = 8
    tile_size: tuple = (4, 4)
    tile_stride: tuple = (4, 4)
    center_mode: str = "argmax"
    qk_norm: bool = True

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.tile_size = tuple(int(v) for v in self.tile_size)
        self.tile_stride = tuple(int(v) for v in self.tile_stride)
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.skip_interval < 1:
            raise ValueError("skip_interval must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.lambda_amf < 0 or self.lambda_window < 0:
            raise ValueError("loss weights must be non-negative")
        if self.s_f < 1:
            raise ValueError("s_f must be >= 1")
        if self.l < 1 or self.l % 2 == 0:
            raise ValueError("l must be a positive odd integer")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def as_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class GradientCache:
    g_cached: np.ndarray | None = None
    last_computed_step: int = -1
    compute_count: int = 0
    reuse_count: int = 0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, x):
        return cls(np.zeros_like(x), np.zeros_like(x), 0)


@dataclass
class TraceRow:
    step: int
    computed: bool
    loss: float
    grad_norm: float
    lr: float
    wall_time_ns: int


@dataclass
class InnerTrace:
    rows: list = field(default_factory=list)
    gradients: list = field(default_factory=list)  # (step, gradient) for computed steps


def lr_at(j, J, lr_start=0.003, lr_end=0.002):
    if not 0 <= j < J:
        raise ValueError(f"inner step {j} outside 0..{J - 1}")
    if J == 1:
        return lr_start
    return lr_start + (lr_end - lr_start) * j / (J - 1)


def should_compute_gradient(j, skip_interval, force_full=False):
    if j < 0:
        raise ValueError("step index must be non-negative")
    return force_full or j % skip_interval == 0


def gradient_computations(J, skip_interval, force_full=False):
    return J if force_full else math.ceil(J / skip_interval)


def adamw_step(latent, g, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, update_moments=True):
    """One AdamW update with decoupled weight decay. Returns ``(latent, state)``.

    With ``update_moments=False`` the stored moments are applied as they are
    (the optimizer is paused rather than fed ``g``).
    """
    b1, b2 = betas
    if update_moments:
        step = state.step + 1
        m = b1 * state.m + (1.0 - b1) * g
        v = b2 * state.v + (1.0 - b2) * g * g
        state = AdamState(m, v, step)
    if state.step == 0:
        return latent * (1.0 - lr * weight_decay), state
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    decayed = latent * (1.0 - lr * weight_decay)
    return decayed - lr * m_hat / (np.sqrt(v_hat) + eps), state


def inner_optimize(latent, loss_evaluator, config, trace_sink=None):
    """Run ``config.inner_steps`` AdamW updates, recomputing the gradient every
    ``skip_interval`` steps and reusing the cached one in between.

    ``loss_evaluator(latent) -> (loss, gradient)`` is only called on compute
    steps. Returns ``(latent, cache, trace)``.
    """
    x = np.array(latent, dtype=np.float64, copy=True)
    cache = GradientCache()
    state = AdamState.zeros_like(x)
    trace = InnerTrace()
    J = config.inner_steps
    for j in range(J):
        start = time.perf_counter_ns()
        lr = lr_at(j, J, config.lr_start, config.lr_end)
        computed = should_compute_gradient(j, config.skip_interval, config.force_full_gradients)
        loss = float("nan")
        if computed:
            loss, g = loss_evaluator(x)
            g = np.asarray(g, dtype=np.float64)
            if not (np.isfinite(loss) and np.all(np.isfinite(g))):
                raise NonFiniteError(f"non-finite loss/gradient at inner step {j}; trace so far: {trace.rows}")
            cache.g_cached = g
            cache.last_computed_step = j
            cache.compute_count += 1
            trace.gradients.append((j, g))
        else:
            g = cache.g_cached
            cache.reuse_count += 1
        x, state = adamw_step(
            x, g, state, lr, config.betas, config.eps, config.weight_decay,
            update_moments=computed or config.moments_on_reuse,
        )
        row = TraceRow(j, computed, float(loss), float(np.linalg.norm(g)), lr, time.perf_counter_ns() - start)
        trace.rows.append(row)
        if trace_sink is not None:
            trace_sink(row)
    return x, cache, trace


def gradient_similarity_diag(gradients):
    """Pairwise cosine similarity between step gradients.

    Returns ``(matrix, zero_rows)``; rows of zero-norm gradients are 0 and flagged.
    """
    G = np.stack([np.asarray(g, dtype=np.float64).reshape(-1) for g in gradients])
    norms = np.linalg.norm(G, axis=1)
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    unit = G / safe[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    return sim, zero


def median_adjacent_similarity(sim):
    if len(sim) < 2:
        return float("nan")
    return float(np.median(np.diag(sim, k=1)))


TRACE_COLUMNS = ("step", "computed", "loss", "grad_norm", "lr", "wall_time_ns")


def write_trace_csv(path, rows, extra=None):
    """Trace CSV; ``extra`` maps column name -> per-row values prepended to each row."""
    extra = extra or {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(extra) + list(TRACE_COLUMNS))
        for n, r in enumerate(rows):
            writer.writerow(
                [extra[k][n] for k in extra]
                + [r.step, int(r.computed), "" if math.isnan(r.loss) else repr(r.loss), repr(r.grad_norm), repr(r.lr), r.wall_time_ns]
            )
