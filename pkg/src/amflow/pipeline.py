"""End-to-end motion transfer on the toy sampler.

The outer loop follows a linear interpolant ``x = (1 - sigma) * x0 + sigma * eps``.
Guidance edits the latent right after a denoising step; motion features are
read from the clean estimate ``x0_hat`` so the edit carries through to the end.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .amf import amf_loss, extract_amf_windowed, total_loss
from .attention import OpCounter, TileGrid, build_window_plan, count_score_ops, plan_windows, project_qk, temporal_pairs
from .guidance import GuidanceConfig, gradient_similarity_diag, inner_optimize, median_adjacent_similarity
from .rng import stream
from .synth import LatentVideo, LinearSchedule, add_inversion_noise, inversion_noise
from .tensor import NonFiniteError


@dataclass
class TransferJob:
    reference: LatentVideo
    content_target: LatentVideo
    outer_steps: int = 50
    guided_fraction: float = 0.2
    seed: int = 0
    config: GuidanceConfig = field(default_factory=GuidanceConfig)

    def __post_init__(self):
        if not isinstance(self.reference, LatentVideo):
            self.reference = LatentVideo(self.reference)
        if not isinstance(self.content_target, LatentVideo):
            self.content_target = LatentVideo(self.content_target)
        if not 0 < self.guided_fraction <= 1:
            raise ValueError("guided_fraction must be in (0, 1]")
        if self.outer_steps < 1:
            raise ValueError("outer_steps must be >= 1")
        r, c = self.reference.shape, self.content_target.shape
        if (r[0], r[2], r[3]) != (c[0], c[2], c[3]):
            raise ValueError(f"reference grid {r} and content grid {c} differ in F, h or w")
        cfg = self.config
        if cfg.l > min(r[2], r[3]):
            raise ValueError(f"window side {cfg.l} exceeds grid {r[2]}x{r[3]}")
        if max(cfg.tile_size[0], cfg.tile_stride[0]) > r[2] or max(cfg.tile_size[1], cfg.tile_stride[1]) > r[3]:
            raise ValueError("tile size/stride larger than the grid")

    @property
    def guided_steps(self):
        # the small slack keeps 0.2 * 50 from rounding up to 11
        return min(self.outer_steps, math.ceil(self.guided_fraction * self.outer_steps - 1e-9))

    @property
    def schedule(self):
        return LinearSchedule(self.outer_steps)


class TransferError(NonFiniteError):
    """Guidance produced a non-finite latent; ``last_good`` holds the latest finite one."""

    def __init__(self, message, last_good, step):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


def guidance_level(t):
    """Schedule index whose noise level the guided step ``t`` runs at (guidance follows the denoise step)."""
    return t + 1


def clean_estimate(x, sigma, noise):
    """``x0_hat = (x - sigma * noise) / (1 - sigma)``; accepts arrays or tape tensors."""
    if not sigma < 1:
        raise ValueError("clean estimate undefined at sigma = 1")
    if isinstance(x, T.Tensor):
        return T.scale(T.sub(x, sigma * noise), 1.0 / (1.0 - sigma))
    return (x - sigma * noise) / (1.0 - sigma)


@dataclass
class ReferenceEntry:
    t: int
    sigma: float
    flow: object
    plan: object
    window_plan: object


@dataclass
class ReferenceCache:
    entries: list
    counter: OpCounter

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, t):
        return self.entries[t]


def tile_grid(job):
    cfg = job.config
    return TileGrid(job.reference.height, job.reference.width, cfg.tile_size, cfg.tile_stride)


def tracking_plan(flow, plan):
    """Windows centered where the reference flow says each tile went (used by the window loss)."""
    centers = plan.tiles.centers[None] + np.rint(flow.delta).astype(np.intp)
    return build_window_plan(centers, plan.s_f, plan.l, plan.frames, plan.height, plan.width, plan.tiles, "flow")


def reference_features(reference, t_index, schedule, seed, cfg):
    """Noise the reference to ``t_index`` and read attention features from its clean estimate."""
    noised = add_inversion_noise(reference, t_index, schedule, seed)
    sigma = schedule.sigma(t_index)
    eps = inversion_noise(reference.shape, t_index, seed)
    x0 = noised.values if sigma == 0 else clean_estimate(noised.values, sigma, eps)
    return project_qk(x0, seed=seed, head_dim=cfg.head_dim, tau=cfg.tau, qk_norm=cfg.qk_norm)


def invert_reference(reference, job):
    """One cache entry (hard reference flow plus windows) per guided outer step."""
    cfg = job.config
    tiles = tile_grid(job)
    schedule = job.schedule
    counter = OpCounter()
    entries = []
    for t in range(job.guided_steps):
        level = guidance_level(t)
        ctx = reference_features(reference, level, schedule, job.seed, cfg)
        plan = plan_windows(ctx, tiles, cfg.s_f, cfg.l, cfg.center_mode, counter)
        flow = extract_amf_windowed(ctx, plan, "hard", counter)
        entries.append(ReferenceEntry(t, schedule.sigma(level), flow, plan, tracking_plan(flow, plan)))
    return ReferenceCache(entries, counter)


def toy_denoise_step(latent, t, T_steps, content_target, schedule, noise):
    """Move from ``sigma_t`` to ``sigma_{t+1}`` along the interpolant.

    The noise prediction is the sampler's own initial noise, so the clean
    estimate is ``x0_hat``; at ``sigma_t = 1`` the estimate is undefined and
    ``content_target`` is used directly.
    """
    if not 0 <= t < T_steps:
        raise ValueError(f"outer step {t} outside 0..{T_steps - 1}")
    content = content_target.values if isinstance(content_target, LatentVideo) else np.asarray(content_target)
    s, s_next = schedule.sigma(t), schedule.sigma(t + 1)
    x0 = content if s >= 1.0 else clean_estimate(latent, s, noise)
    if s_next == 0.0:
        return np.array(x0, dtype=np.float64, copy=True)
    return latent + (s - s_next) * (x0 - noise) if s < 1.0 else (1.0 - s_next) * x0 + s_next * noise


def make_loss_evaluator(entry, sigma, noise, cfg, plan_for, calls):
    """``latent -> (L_total, gradient)`` against one reference cache entry."""

    def evaluate(x):
        calls.append(1)
        leaf = T.Tensor(x, requires_grad=True)
        ctx = project_qk(clean_estimate(leaf, sigma, noise), seed=plan_for.seed, head_dim=cfg.head_dim, tau=cfg.tau, qk_norm=cfg.qk_norm)
        loss = total_loss(
            entry.flow, ctx, plan_for.plan, cfg.lambda_amf, cfg.lambda_window, cfg.alpha,
            window_plan=entry.window_plan, expected=True,
        )
        T.backward(loss.total_tensor)
        return loss.total, leaf.grad

    return evaluate


@dataclass
class _GenPlan:
    plan: object
    seed: int


def motion_fidelity(flow_gen, flow_ref):
    """Mean endpoint error and mean cosine over slots where both displacements are nonzero."""
    a = np.asarray(getattr(flow_gen, "delta", flow_gen), dtype=np.float64)
    b = np.asarray(getattr(flow_ref, "delta", flow_ref), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"flow shapes differ: {a.shape} vs {b.shape}")
    epe = float(np.linalg.norm(a - b, axis=-1).mean())
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    both = (na > 0) & (nb > 0)
    if not both.any():
        same = not (na.any() or nb.any())
        return {"mean_epe": epe, "cosine": 1.0 if same else 0.0, "degenerate": True}
    cos = (a[both] * b[both]).sum(-1) / (na[both] * nb[both])
    return {"mean_epe": epe, "cosine": float(cos.mean()), "degenerate": False}


@dataclass
class TransferResult:
    generated: LatentVideo
    report: dict
    traces: list
    timings: dict
    gradient_similarity: np.ndarray | None = None


def expected_ops(cfg, job, n_tiles, guided, evals):
    """Analytic windowed/acquisition totals for a run with ``evals`` loss evaluations."""
    F, h, w = job.reference.frames, job.reference.height, job.reference.width
    per = count_score_ops(F, h, w, cfg.s_f, cfg.l, n_tiles, cfg.center_mode)
    # reference: one plan + one hard extraction per guided step;
    # generated: one plan per guided step, one soft extraction per evaluation, one final hard + soft pass
    totals = {
        "windowed": per["windowed_ops"] * (guided + evals + 2),
        "acquisition": per["acquisition_ops"] * (2 * guided + 1),
    }
    return totals, per


def run_transfer(job, trace_sink=None, clock=None):
    """Guided generation. Returns a :class:`TransferResult`.

    ``report`` holds only deterministic quantities; wall times go to ``timings``.
    """
    clock = clock or time.perf_counter_ns
    t_start = clock()
    cfg = job.config
    tiles = tile_grid(job)
    schedule = job.schedule
    Tn, G = job.outer_steps, job.guided_steps
    shape = job.content_target.shape

    cache = invert_reference(job.reference, job)
    t_inverted = clock()
    noise = stream(job.seed, "noise").standard_normal(shape)
    x = noise.copy()
    gen_counter = OpCounter()
    traces, steps, calls = [], [], []
    first_gradients = None
    step_ns = []
    for t in range(Tn):
        s0 = clock()
        x = toy_denoise_step(x, t, Tn, job.content_target, schedule, noise)
        if t < G:
            entry = cache[t]
            level = guidance_level(t)
            sigma = schedule.sigma(level)
            ctx = project_qk(clean_estimate(x, sigma, noise), seed=job.seed, head_dim=cfg.head_dim, tau=cfg.tau, qk_norm=cfg.qk_norm)
            plan = plan_windows(ctx, tiles, cfg.s_f, cfg.l, cfg.center_mode, gen_counter)
            n_before = len(calls)
            evaluate = make_loss_evaluator(entry, sigma, noise, cfg, _GenPlan(plan, job.seed), calls)

            def counted(xx, _evaluate=evaluate):
                loss, g = _evaluate(xx)
                gen_counter.windowed += plan.index.size
                return loss, g

            last_good = x.copy()
            try:
                x, gcache, trace = inner_optimize(x, counted, cfg, trace_sink)
            except NonFiniteError as exc:
                raise TransferError(f"guided step {t}: {exc}", last_good, t) from exc
            if not np.all(np.isfinite(x)):
                raise TransferError(f"guided step {t}: non-finite latent", last_good, t)
            if first_gradients is None:
                first_gradients = [g for _, g in trace.gradients]
            traces.append(trace)
            computed = [r.loss for r in trace.rows if r.computed]
            steps.append({
                "t": t,
                "sigma": sigma,
                "gradient_computations": gcache.compute_count,
                "reused_steps": gcache.reuse_count,
                "loss_evaluations": len(calls) - n_before,
                "loss_first": computed[0],
                "loss_last_computed": computed[-1],
            })
        elif not np.all(np.isfinite(x)):
            raise TransferError(f"outer step {t}: non-finite latent", x, t)
        step_ns.append(clock() - s0)

    generated = LatentVideo(x)
    final = evaluate_generated(generated, cache[G - 1] if G else None, job, tiles, gen_counter)
    sim, zero = gradient_similarity_diag(first_gradients) if first_gradients else (np.zeros((0, 0)), np.zeros(0, bool))
    evals = len(calls)
    analytic, per = expected_ops(cfg, job, tiles.n_tiles, G, evals)
    ops = {
        "reference": cache.counter.as_dict(),
        "generated": gen_counter.as_dict(),
        "per_extraction": per,
    }
    totals = {
        "windowed": cache.counter.windowed + gen_counter.windowed,
        "acquisition": cache.counter.acquisition + gen_counter.acquisition,
    }
    ops["totals"] = totals
    ops["totals_match_analytic"] = totals == analytic
    report = {
        "grid": {"frames": shape[0], "channels": shape[1], "height": shape[2], "width": shape[3]},
        "outer_steps": Tn,
        "guided_steps": G,
        "seed": job.seed,
        "config": cfg.as_dict(),
        "gradient_computations": int(sum(s["gradient_computations"] for s in steps)),
        "loss_evaluations": evals,
        "guided": steps,
        "final": final,
        "ops": ops,
        "gradient_similarity": {
            "steps": int(len(sim)),
            "median_adjacent": median_adjacent_similarity(sim) if len(sim) >= 2 else None,
            "zero_gradient_rows": int(np.sum(zero)),
        },
    }
    t_end = clock()
    timings = {
        "total_ns": t_end - t_start,
        "inversion_ns": t_inverted - t_start,
        "outer_step_ns": step_ns,
        "inner_step_ns": [[r.wall_time_ns for r in tr.rows] for tr in traces],
    }
    return TransferResult(generated, report, traces, timings, sim)


def dense_flow(ctx, s_f, l):
    """Hard flow with every token as a query and its window centered on itself.

    This is the point-track view used for dense motion fidelity; it is a
    diagnostic and is not charged to any op counter.
    """
    tiles = TileGrid(ctx.height, ctx.width, (1, 1), (1, 1))
    pairs = temporal_pairs(ctx.frames, s_f)
    centers = np.broadcast_to(tiles.centers[None], (len(pairs), tiles.n_tiles, 2))
    plan = build_window_plan(centers, s_f, l, ctx.frames, ctx.height, ctx.width, tiles, "anchor")
    return extract_amf_windowed(ctx, plan, "hard")


def evaluate_generated(generated, entry, job, tiles, counter=None):
    """Flows of the final latent against the reference.

    Tile flows are compared with the reference flow of the last guided step;
    the dense per-token flows are compared with the clean reference's.
    """
    if entry is None:
        return {}
    cfg = job.config
    ctx = project_qk(generated, seed=job.seed, head_dim=cfg.head_dim, tau=cfg.tau, qk_norm=cfg.qk_norm)
    ref_ctx = project_qk(job.reference, seed=job.seed, head_dim=cfg.head_dim, tau=cfg.tau, qk_norm=cfg.qk_norm)
    dense = motion_fidelity(dense_flow(ctx, cfg.s_f, cfg.l), dense_flow(ref_ctx, cfg.s_f, cfg.l))
    plan = plan_windows(ctx, tiles, cfg.s_f, cfg.l, cfg.center_mode, counter)
    hard = extract_amf_windowed(ctx, plan, "hard", counter)
    soft = extract_amf_windowed(ctx, plan, "soft", counter)
    fid = motion_fidelity(hard, entry.flow)
    return {
        "l_amf": amf_loss(entry.flow, soft, cfg.s_f, cfg.alpha).item(),
        "l_amf_hard": amf_loss(entry.flow, hard, cfg.s_f, cfg.alpha).item(),
        "mean_epe": fid["mean_epe"],
        "cosine": fid["cosine"],
        "degenerate": fid["degenerate"],
        "exact_fraction": float(np.mean(np.all(hard.delta == entry.flow.delta, axis=-1))),
        "dense_epe": dense["mean_epe"],
        "dense_cosine": dense["cosine"],
    }


def unguided_sample(job):
    """The sampler with guidance switched off (ends exactly at ``content_target``)."""
    schedule = job.schedule
    noise = stream(job.seed, "noise").standard_normal(job.content_target.shape)
    x = noise.copy()
    for t in range(job.outer_steps):
        x = toy_denoise_step(x, t, job.outer_steps, job.content_target, schedule, noise)
    return LatentVideo(x)
