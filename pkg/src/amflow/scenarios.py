"""Reference and content videos built from a :class:`RunConfig`."""
from __future__ import annotations

import numpy as np

from .config import RunConfig
from .pipeline import TransferJob
from .synth import LatentVideo, band_limited_texture, generate_multi_object, generate_static, generate_translating


def build_reference(cfg: RunConfig):
    """``(LatentVideo, GroundTruthFlow, sidecar params)`` for ``cfg.reference``."""
    F, C, h, w = cfg.frames, cfg.channels, cfg.height, cfg.width
    if cfg.reference == "translating":
        video, gt = generate_translating(F, C, h, w, cfg.velocity, texture_seed=cfg.seed, amplitude=cfg.amplitude)
        params = {"velocity": list(cfg.velocity)}
    elif cfg.reference == "static":
        video, gt = generate_static(F, C, h, w, seed=cfg.seed, amplitude=cfg.amplitude)
        params = {}
    else:
        video, gt = generate_multi_object(F, C, h, w, cfg.objects, seed=cfg.seed, amplitude=cfg.amplitude)
        params = {"objects": [[list(r), list(v)] for r, v in cfg.objects]}
    params.update(kind=cfg.reference, frames=F, channels=C, height=h, width=w, seed=cfg.seed, amplitude=cfg.amplitude)
    return video, gt, params


def build_content(cfg: RunConfig):
    """Static, low-frequency appearance target (the stand-in for a text prompt)."""
    tex = band_limited_texture(cfg.seed, "content", cfg.channels, cfg.height, cfg.width, cfg.amplitude, band=(0.0, cfg.content_band))
    return LatentVideo(np.broadcast_to(tex, (cfg.frames, cfg.channels, cfg.height, cfg.width)).copy())


def build_job(cfg: RunConfig, reference=None):
    if reference is None:
        reference = build_reference(cfg)[0]
    return TransferJob(reference, build_content(cfg), cfg.outer_steps, cfg.guided_fraction, cfg.seed, cfg.guidance())


def config(**overrides):
    """A validated RunConfig with keyword overrides (values already typed)."""
    return RunConfig(**overrides).validate()
