"""``amflow`` command line: synth, transfer, bench, gradcheck, diag.

Exit codes: 0 success, 1 numerical failure, 2 usage or config error.
Errors are also printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, container
from . import tensor as T
from .amf import extract_amf_full, extract_amf_windowed, total_loss
from .attention import OpCounter, count_score_ops, plan_windows, project_qk, temporal_pairs
from .config import ConfigError, parse_config, parse_overrides
from .guidance import gradient_similarity_diag, median_adjacent_similarity, write_trace_csv
from .pipeline import TransferError, run_transfer, tile_grid, tracking_plan
from .rng import stream
from .scenarios import build_content, build_job, build_reference
from .synth import sidecar
from .tensor import NonFiniteError

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2
GRADCHECK_THRESHOLD = 1e-4
BENCH_SKIPS = (1, 2, 3, 5)
BENCH_FRAMES = (8, 16, 32)


class UsageError(Exception):
    pass


def _plain(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dump_json(path, obj):
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False, default=_plain) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out, command, cfg, files, volatile=()):
    """``manifest.json``: config echo, version, seed, and hashes of the deterministic outputs."""
    dump_json(out / "manifest.json", {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.as_dict(),
        "files": {name: _sha256(out / name) for name in sorted(files)},
        "volatile_files": sorted(volatile),
    })
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")


def _prepare(args):
    overrides = parse_overrides(args.set)
    for key in ("seed", "out_dir"):
        flag = getattr(args, "seed" if key == "seed" else "out", None)
        if flag is not None:
            if key in overrides:
                raise ConfigError(f"conflicting values for {key!r} from --set and its own flag", key)
            overrides[key] = str(flag)
    cfg = parse_config(args.config, overrides)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


# --- subcommands -----------------------------------------------------------

def cmd_synth(cfg, out):
    video, gt, params = build_reference(cfg)
    container.save(out / "reference.amft", video.values)
    container.save(out / "gt_flow.amft", gt.dense())
    container.save(out / "content.amft", build_content(cfg).values)
    (out / "reference.json").write_text(sidecar(params.pop("kind"), **params, **gt.describe()) + "\n", encoding="utf-8")
    files = ["reference.amft", "gt_flow.amft", "content.amft", "reference.json"]
    write_manifest(out, "synth", cfg, files)
    print(json.dumps({"status": "ok", "out": str(out), "files": files}, sort_keys=True))
    return EXIT_OK


def _trace_rows(result):
    rows, outer = [], []
    for entry, trace in zip(result.report["guided"], result.traces):
        rows.extend(trace.rows)
        outer.extend([entry["t"]] * len(trace.rows))
    return rows, {"outer_step": outer}


def write_gradsim(path, sim, zero):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row"] + [f"s{j}" for j in range(len(sim))] + ["zero_norm"])
        for i, row in enumerate(sim):
            writer.writerow([i] + [repr(float(v)) for v in row] + [int(zero[i])])


def cmd_transfer(cfg, out):
    job = build_job(cfg)
    try:
        result = run_transfer(job)
    except TransferError as exc:
        container.save(out / "last_good.amft", exc.last_good)
        raise
    container.save(out / "generated.amft", result.generated.values)
    dump_json(out / "report.json", result.report)
    dump_json(out / "timings.json", result.timings)
    rows, extra = _trace_rows(result)
    write_trace_csv(out / "trace.csv", rows, extra)
    sim, zero = gradient_similarity_diag([g for _, g in result.traces[0].gradients]) if result.traces else (np.zeros((0, 0)), [])
    write_gradsim(out / "gradsim.csv", sim, zero)
    files = ["generated.amft", "report.json", "gradsim.csv"]
    write_manifest(out, "transfer", cfg, files, volatile=["timings.json", "trace.csv"])
    final = result.report["final"]
    print(json.dumps({"status": "ok", "out": str(out), "mean_epe": final.get("mean_epe"), "l_amf": final.get("l_amf"),
                      "gradient_computations": result.report["gradient_computations"]}, sort_keys=True))
    return EXIT_OK


def extraction_benchmark(cfg, reference):
    """Dense vs windowed extraction of the reference flow: counters, analytics, agreement."""
    job = build_job(cfg, reference)
    tiles = tile_grid(job)
    g = job.config
    ctx = project_qk(reference, seed=cfg.seed, head_dim=g.head_dim, tau=g.tau, qk_norm=g.qk_norm)
    pairs = temporal_pairs(reference.frames, g.s_f)
    timings = {}
    full_counter, win_counter = OpCounter(), OpCounter()
    t0 = time.perf_counter_ns()
    full = extract_amf_full(ctx, tiles, pairs, "hard", full_counter)
    timings["full_ns"] = time.perf_counter_ns() - t0
    t0 = time.perf_counter_ns()
    plan = plan_windows(ctx, tiles, g.s_f, g.l, g.center_mode, win_counter)
    windowed = extract_amf_windowed(ctx, plan, "hard", win_counter)
    timings["windowed_ns"] = time.perf_counter_ns() - t0
    analytic = count_score_ops(reference.frames, reference.height, reference.width, g.s_f, g.l, tiles.n_tiles, g.center_mode)
    S = reference.height * reference.width
    table = {
        "pairs": len(pairs),
        "full_counter": full_counter.full,
        "full_analytic_same_pairs": len(pairs) * S * S,
        "windowed_counter": win_counter.windowed,
        "acquisition_counter": win_counter.acquisition,
        "analytic": analytic,
        "counters_match": win_counter.windowed == analytic["windowed_ops"] and win_counter.acquisition == analytic["acquisition_ops"]
        and full_counter.full == len(pairs) * S * S,
        "agreement": float(np.mean(np.all(full.delta == windowed.delta, axis=-1))),
        "scaling": {
            str(F): count_score_ops(F, reference.height, reference.width, g.s_f, g.l, tiles.n_tiles, g.center_mode)
            for F in BENCH_FRAMES
        },
    }
    return table, timings


def cmd_bench(cfg, out):
    reference = build_reference(cfg)[0]
    extraction, ext_times = extraction_benchmark(cfg, reference)
    sweep, sweep_times = [], {}
    for skip in BENCH_SKIPS:
        run_cfg = cfg.__class__(**{**cfg.__dict__, "skip_interval": skip}).validate()
        t0 = time.perf_counter_ns()
        result = run_transfer(build_job(run_cfg, reference))
        sweep_times[str(skip)] = time.perf_counter_ns() - t0
        rep = result.report
        sweep.append({
            "skip_interval": skip,
            "gradient_computations": rep["gradient_computations"],
            "loss_evaluations": rep["loss_evaluations"],
            "final_l_amf": rep["final"]["l_amf"],
            "mean_epe": rep["final"]["mean_epe"],
            "dense_epe": rep["final"]["dense_epe"],
        })
    base = sweep[0]["final_l_amf"]
    for row in sweep:
        row["l_amf_ratio_vs_skip1"] = row["final_l_amf"] / base if base > 0 else None
        row["count_reduction"] = sweep[0]["gradient_computations"] / row["gradient_computations"]
    dump_json(out / "bench.json", {"extraction": extraction, "skip_sweep": sweep})
    dump_json(out / "bench_timings.json", {"extraction": ext_times, "transfer_ns": sweep_times})
    write_manifest(out, "bench", cfg, ["bench.json"], volatile=["bench_timings.json"])
    print(json.dumps({"status": "ok", "out": str(out), "op_ratio": extraction["analytic"]["ratio"]}, sort_keys=True))
    return EXIT_OK


def gradcheck_problem(cfg):
    """``(loss_fn, latent)`` for L_total at a seeded latent near the content target."""
    reference = build_reference(cfg)[0]
    job = build_job(cfg, reference)
    g = job.config
    tiles = tile_grid(job)
    ref_ctx = project_qk(reference, seed=cfg.seed, head_dim=g.head_dim, tau=g.tau, qk_norm=g.qk_norm)
    plan = plan_windows(ref_ctx, tiles, g.s_f, g.l, g.center_mode)
    flow_ref = extract_amf_windowed(ref_ctx, plan, "hard")
    window_plan = tracking_plan(flow_ref, plan)
    latent = job.content_target.values + 0.5 * stream(cfg.seed, "gradcheck", "latent").standard_normal(reference.shape)

    def loss_fn(x):
        ctx = project_qk(x, seed=cfg.seed, head_dim=g.head_dim, tau=g.tau, qk_norm=g.qk_norm)
        return total_loss(flow_ref, ctx, plan, g.lambda_amf, g.lambda_window, g.alpha, window_plan=window_plan).total_tensor

    return loss_fn, latent


def cmd_gradcheck(cfg, out):
    loss_fn, latent = gradcheck_problem(cfg)
    err = T.check_gradient(loss_fn, latent, step=cfg.gradcheck_step, seed=cfg.seed)
    passed = err < GRADCHECK_THRESHOLD
    dump_json(out / "gradcheck.json", {"max_relative_error": err, "step": cfg.gradcheck_step, "threshold": GRADCHECK_THRESHOLD, "passed": passed})
    write_manifest(out, "gradcheck", cfg, ["gradcheck.json"])
    print(f"max relative error {err:.3e} ({'ok' if passed else 'FAILED'}, threshold {GRADCHECK_THRESHOLD:g})")
    return EXIT_OK if passed else EXIT_NUMERIC


def _reference_flow(cfg):
    reference = build_reference(cfg)[0]
    job = build_job(cfg, reference)
    g = job.config
    tiles = tile_grid(job)
    ctx = project_qk(reference, seed=cfg.seed, head_dim=g.head_dim, tau=g.tau, qk_norm=g.qk_norm)
    plan = plan_windows(ctx, tiles, g.s_f, g.l, g.center_mode)
    return plan, extract_amf_windowed(ctx, plan, cfg.flow_mode)


def write_pgm(path, image):
    """8-bit binary PGM (P5), scaled so the maximum maps to 255."""
    img = np.asarray(image, dtype=np.float64)
    peak = img.max() if img.size and img.max() > 0 else 1.0
    pixels = np.clip(np.rint(img / peak * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def flow_magnitude_image(flow, tiles):
    """One tile-grid magnitude panel per pair, stacked top to bottom with a blank row between."""
    rows = len(np.unique(tiles.centers[:, 0]))
    cols = tiles.n_tiles // rows
    mag = np.linalg.norm(flow.delta, axis=-1).reshape(len(flow.pairs), rows, cols)
    panels = [np.vstack([m, np.zeros((1, cols))]) for m in mag]
    return np.vstack(panels)[:-1]


def cmd_diag(cfg, out, what):
    if what == "windows":
        plan, _ = _reference_flow(cfg)
        sizes = plan.window_sizes()
        with open(out / "windows.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["i", "j", "tile", "rep_y", "rep_x", "center_y", "center_x", "window_cells"])
            for n, (i, j) in enumerate(plan.pairs):
                for p in range(plan.tiles.n_tiles):
                    ry, rx = plan.tiles.centers[p]
                    cy, cx = plan.centers[n, p]
                    writer.writerow([i, j, p, ry, rx, cy, cx, sizes[n, p]])
        container.save(out / "centers.amft", plan.centers.astype(np.float64))
        dump_json(out / "windows.json", plan.describe())
        files = ["windows.csv", "centers.amft", "windows.json"]
    elif what == "flow":
        plan, flow = _reference_flow(cfg)
        with open(out / "flow.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["i", "j", "tile", "rep_y", "rep_x", "dy", "dx"])
            for n, (i, j) in enumerate(flow.pairs):
                for p in range(plan.tiles.n_tiles):
                    ry, rx = plan.tiles.centers[p]
                    dy, dx = flow.delta[n, p]
                    writer.writerow([i, j, p, ry, rx, repr(float(dy)), repr(float(dx))])
        write_pgm(out / "flow.pgm", flow_magnitude_image(flow, plan.tiles))
        container.save(out / "flow.amft", flow.delta)
        files = ["flow.csv", "flow.pgm", "flow.amft"]
    else:  # gradsim: one guided step with every inner gradient computed
        run_cfg = cfg.__class__(**{**cfg.__dict__, "force_full_gradients": True,
                                   "guided_fraction": 1.0 / cfg.outer_steps}).validate()
        result = run_transfer(build_job(run_cfg))
        sim, zero = gradient_similarity_diag([g for _, g in result.traces[0].gradients])
        write_gradsim(out / "gradsim.csv", sim, zero)
        med = median_adjacent_similarity(sim)
        dump_json(out / "gradsim.json", {"steps": len(sim), "median_adjacent": None if np.isnan(med) else med,
                                          "zero_gradient_rows": int(np.sum(zero))})
        files = ["gradsim.csv", "gradsim.json"]
    write_manifest(out, f"diag {what}", cfg, files)
    print(json.dumps({"status": "ok", "out": str(out), "files": files}, sort_keys=True))
    return EXIT_OK


# --- entry point -----------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="amflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"amflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="master seed (same as --set seed=N)")
        p.add_argument("--out", help="output directory (same as --set out_dir=DIR)")
        return p

    common(sub.add_parser("synth", help="write a synthetic reference video and its ground-truth flow"))
    common(sub.add_parser("transfer", help="run guided motion transfer"))
    common(sub.add_parser("bench", help="extraction op counts and a skip-interval sweep"))
    common(sub.add_parser("gradcheck", help="finite-difference check of the total-loss gradient"))
    diag = common(sub.add_parser("diag", help="dump window centers, reference flow, or gradient similarity"))
    diag.add_argument("what", choices=("windows", "flow", "gradsim"))
    return parser


def _fail(code, kind, message, **extra):
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, out = _prepare(args)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, "config", str(exc), key=exc.key)
    except OSError as exc:
        return _fail(EXIT_USAGE, "io", str(exc))
    try:
        if args.command == "synth":
            return cmd_synth(cfg, out)
        if args.command == "transfer":
            return cmd_transfer(cfg, out)
        if args.command == "bench":
            return cmd_bench(cfg, out)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out)
        return cmd_diag(cfg, out, args.what)
    except TransferError as exc:
        return _fail(EXIT_NUMERIC, "non_finite", str(exc), step=exc.step)
    except NonFiniteError as exc:
        return _fail(EXIT_NUMERIC, "non_finite", str(exc))
    except ValueError as exc:
        return _fail(EXIT_USAGE, "invalid_input", str(exc))


if __name__ == "__main__":
    sys.exit(main())
