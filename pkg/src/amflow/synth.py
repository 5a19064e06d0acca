"""Synthetic latent videos with known motion, and step-consistent inversion noise."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .rng import stream

# per-channel RMS of generated textures, comparable to the unit-variance sampler noise
DEFAULT_AMPLITUDE = 2.0


@dataclass
class LatentVideo:
    values: np.ndarray  # (F, C, h, w)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4:
            raise ValueError(f"latent video must be (F, C, h, w), got shape {self.values.shape}")
        if self.values.shape[0] < 2:
            raise ValueError("latent video needs at least 2 frames")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("latent video has non-finite values")

    @property
    def shape(self):
        return self.values.shape

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def channels(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[2]

    @property
    def width(self):
        return self.values.shape[3]


@dataclass
class GroundTruthFlow:
    """Rigid per-region motion: ``labels[f, y, x]`` indexes ``velocities``.

    The displacement of the point at ``(y, x)`` in frame ``i`` to frame ``j`` is
    ``(j - i) * velocities[labels[i, y, x]]``.
    """

    labels: np.ndarray  # (F, h, w) int
    velocities: np.ndarray  # (n_regions, 2) cells/frame

    def pair(self, i, j, positions):
        """Displacements ``(len(positions), 2)`` for integer ``(row, col)`` positions."""
        positions = np.asarray(positions, dtype=np.intp)
        lab = self.labels[i, positions[:, 0], positions[:, 1]]
        return (j - i) * self.velocities[lab]

    def for_pairs(self, pairs, positions):
        return np.stack([self.pair(i, j, positions) for i, j in pairs])

    def dense(self):
        """Per-frame velocity field ``(F, h, w, 2)``, the serialized form."""
        return self.velocities[self.labels]

    def describe(self):
        return {"velocities": self.velocities.tolist(), "n_regions": int(len(self.velocities))}


def _wave_numbers(rng, h, w, n, band):
    """``n`` integer wave vectors whose normalized radius lies in ``band`` (rejection sampling)."""
    ky_all, kx_all = [], []
    while len(ky_all) < n:
        ky = rng.integers(-(h // 2), h // 2 + 1, size=4 * n)
        kx = rng.integers(-(w // 2), w // 2 + 1, size=4 * n)
        radius = np.hypot(ky / max(h // 2, 1), kx / max(w // 2, 1))
        keep = (radius >= band[0]) & (radius <= band[1]) & ((ky != 0) | (kx != 0))
        ky_all.extend(ky[keep].tolist())
        kx_all.extend(kx[keep].tolist())
    return np.array(ky_all[:n]), np.array(kx_all[:n])


def band_limited_texture(seed, name, channels, h, w, amplitude=DEFAULT_AMPLITUDE, n_waves=48, band=(0.25, np.inf)):
    """Sum of random-phase sinusoids with integer wave numbers (periodic on the grid).

    Wave vectors are drawn with normalized radius inside ``band``. The default
    keeps only the upper frequencies, so neighbouring cells decorrelate quickly
    and query/key similarity peaks sharply at the true match.
    """
    rng = stream(seed, "texture", name)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.empty((channels, h, w))
    for c in range(channels):
        ky, kx = _wave_numbers(rng, h, w, n_waves, band)
        phase = rng.uniform(0.0, 2 * np.pi, size=ky.size)
        weight = rng.uniform(0.5, 1.0, size=ky.size)
        arg = 2 * np.pi * (ky[:, None, None] * yy / h + kx[:, None, None] * xx / w) + phase[:, None, None]
        field = (weight[:, None, None] * np.cos(arg)).sum(axis=0)
        field -= field.mean()
        out[c] = field / np.sqrt((field**2).mean())
    return amplitude * out


def _bilinear_shift(frame, dy, dx):
    """Periodic bilinear resampling: ``out[y, x] = frame[y - dy, x - dx]``."""
    _, h, w = frame.shape
    y = (np.arange(h)[:, None] - dy) % h
    x = (np.arange(w)[None, :] - dx) % w
    y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
    fy, fx = y - y0, x - x0
    y1, x1 = (y0 + 1) % h, (x0 + 1) % w
    return (
        frame[:, y0, x0] * (1 - fy) * (1 - fx)
        + frame[:, y1, x0] * fy * (1 - fx)
        + frame[:, y0, x1] * (1 - fy) * fx
        + frame[:, y1, x1] * fy * fx
    )


def _shift(frame, dy, dx):
    if float(dy).is_integer() and float(dx).is_integer():
        return np.roll(frame, (int(dy), int(dx)), axis=(-2, -1))
    return _bilinear_shift(frame, dy, dx)


def _check_grid(F, C, h, w):
    if min(h, w, C) < 1:
        raise ValueError(f"zero-area grid: C={C}, h={h}, w={w}")
    if F < 2:
        raise ValueError("need at least 2 frames")


def generate_translating(F, C, h, w, velocity=(0, 1), texture_seed=0, amplitude=DEFAULT_AMPLITUDE):
    """Frame ``t`` is frame 0 shifted by ``t * velocity`` (circularly for integer velocities)."""
    _check_grid(F, C, h, w)
    vy, vx = map(float, velocity)
    if abs(vy) * (F - 1) >= h or abs(vx) * (F - 1) >= w:
        raise ValueError(f"velocity {velocity} moves the pattern out of a {h}x{w} frame over {F} frames")
    base = band_limited_texture(texture_seed, "base", C, h, w, amplitude)
    values = np.stack([_shift(base, t * vy, t * vx) for t in range(F)])
    gt = GroundTruthFlow(np.zeros((F, h, w), dtype=np.intp), np.array([[vy, vx]]))
    return LatentVideo(values), gt


def _region_mask(h, w, region):
    y0, x0, hh, ww = region
    mask = np.zeros((h, w), dtype=bool)
    mask[y0 : y0 + hh, x0 : x0 + ww] = True
    return mask


def generate_multi_object(F, C, h, w, objects, seed=0, amplitude=DEFAULT_AMPLITUDE):
    """Rectangular textured objects moving over a static textured background.

    ``objects`` is a list of ``((y0, x0, height, width), (vy, vx))`` with integer
    velocities. Regions wrap around the grid edges, so an object covering the
    whole frame reproduces :func:`generate_translating`.
    """
    _check_grid(F, C, h, w)
    vel = [tuple(int(v) for v in o[1]) for o in objects]
    for (_, v_in), v in zip(objects, vel):
        if tuple(float(a) for a in v_in) != tuple(float(a) for a in v):
            raise ValueError("multi-object videos take integer velocities only")
    background = band_limited_texture(seed, "background", C, h, w, amplitude)
    # object 0 uses the same texture stream as generate_translating
    textures = [band_limited_texture(seed, "base" if k == 0 else f"object{k}", C, h, w, amplitude) for k in range(len(objects))]

    labels = np.zeros((F, h, w), dtype=np.intp)
    values = np.empty((F, C, h, w))
    for t in range(F):
        occupied = np.zeros((h, w), dtype=bool)
        frame = background.copy()
        for k, ((region, _), (vy, vx)) in enumerate(zip(objects, vel)):
            mask = np.roll(_region_mask(h, w, region), (t * vy, t * vx), axis=(0, 1))
            if np.any(occupied & mask):
                raise ValueError(f"object trajectories overlap at frame {t}")
            occupied |= mask
            frame = np.where(mask, np.roll(textures[k], (t * vy, t * vx), axis=(-2, -1)), frame)
            labels[t][mask] = k + 1
        values[t] = frame
    velocities = np.array([[0.0, 0.0]] + [[float(vy), float(vx)] for vy, vx in vel])
    return LatentVideo(values), GroundTruthFlow(labels, velocities)


def generate_static(F, C, h, w, seed=0, amplitude=DEFAULT_AMPLITUDE, name="static"):
    _check_grid(F, C, h, w)
    base = band_limited_texture(seed, name, C, h, w, amplitude)
    values = np.broadcast_to(base, (F, C, h, w)).copy()
    return LatentVideo(values), GroundTruthFlow(np.zeros((F, h, w), dtype=np.intp), np.zeros((1, 2)))


class LinearSchedule:
    """``sigma_t = 1 - t / T`` for ``t = 0..T``; shared by inversion and sampling."""

    def __init__(self, steps):
        if steps < 1:
            raise ValueError("schedule needs at least one step")
        self.steps = int(steps)
        self.sigmas = 1.0 - np.arange(self.steps + 1) / self.steps

    def sigma(self, t):
        if not 0 <= t <= self.steps:
            raise IndexError(f"step {t} outside schedule 0..{self.steps}")
        return float(self.sigmas[t])

    def __len__(self):
        return self.steps


def inversion_noise(shape, t_index, seed):
    return stream(seed, "inversion", int(t_index)).standard_normal(shape)


def add_inversion_noise(clean, t_index, schedule, seed):
    """``(1 - sigma_t) * clean + sigma_t * eps`` with ``eps`` fixed by ``(t_index, seed)``."""
    values = clean.values if isinstance(clean, LatentVideo) else np.asarray(clean, dtype=np.float64)
    sigma = schedule.sigma(t_index)
    eps = inversion_noise(values.shape, t_index, seed)
    return LatentVideo((1.0 - sigma) * values + sigma * eps)


def sidecar(kind, **params):
    """JSON description of the motion model written next to synthesized tensors."""
    return json.dumps({"kind": kind, **params}, sort_keys=True, indent=2)
