"""Query/key projection, tiles, representative attention and sliding-window plans."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import stream
from .synth import LatentVideo

CENTER_MODES = ("argmax", "expectation", "anchor")


@dataclass
class OpCounter:
    """Attention score evaluations, split by purpose.

    ``full`` counts dense per-token maps (the brute-force baseline), ``windowed``
    the scores inside planned windows, ``acquisition`` the representative-query
    scores spent estimating window centers.
    """

    full: int = 0
    windowed: int = 0
    acquisition: int = 0

    def as_dict(self):
        return {"full": self.full, "windowed": self.windowed, "acquisition": self.acquisition}

    def __iadd__(self, other):
        self.full += other.full
        self.windowed += other.windowed
        self.acquisition += other.acquisition
        return self


@dataclass
class AttentionContext:
    q: T.Tensor  # (F, S, D_h)
    k: T.Tensor  # (F, S, D_h)
    w_q: np.ndarray  # (C, D_h)
    w_k: np.ndarray
    height: int
    width: int
    tau: float = 1.0

    @property
    def frames(self):
        return self.q.shape[0]

    @property
    def tokens(self):
        return self.q.shape[1]

    @property
    def head_dim(self):
        return self.q.shape[2]

    @property
    def score_scale(self):
        return self.tau / math.sqrt(self.head_dim)

    def grid_q(self):
        """Queries as ``(F, h, w, D_h)``."""
        return self.q.data.reshape(self.frames, self.height, self.width, -1)

    def grid_k(self):
        return self.k.data.reshape(self.frames, self.height, self.width, -1)


def projection_matrix(channels, head_dim, seed):
    """Seeded ``(C, D_h)`` matrix with orthonormal columns."""
    if head_dim > channels:
        raise ValueError(f"head_dim {head_dim} exceeds channel count {channels}")
    g = stream(seed, "projection").standard_normal((channels, head_dim))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def project_qk(video, seed=0, head_dim=None, tau=1.0, qk_norm=True, identity=False):
    """Per-token linear projection of a latent video to queries and keys.

    ``video`` may be a :class:`LatentVideo`, an ``(F, C, h, w)`` array or a
    :class:`~amflow.tensor.Tensor` (gradients then flow back to it). Queries and
    keys share one projection so a token always matches itself best. With
    ``qk_norm`` each token is first scaled to unit RMS over channels.
    """
    if isinstance(video, LatentVideo):
        video = video.values
    x = video if isinstance(video, T.Tensor) else T.constant(video)
    if x.ndim != 4:
        raise ValueError(f"expected (F, C, h, w), got {x.shape}")
    F, C, h, w = x.shape
    head_dim = C if head_dim is None else int(head_dim)
    if head_dim < 1 or C < 1:
        raise ValueError("channels and head_dim must be >= 1")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if identity:
        if head_dim != C:
            raise ValueError("identity projection needs head_dim == channels")
        w_q = np.eye(C)
    else:
        w_q = projection_matrix(C, head_dim, seed)

    tokens = T.reshape(T.transpose(x, (0, 2, 3, 1)), (F, h * w, C))
    if qk_norm:
        tokens = T.rms_normalize(tokens)
    q = T.matmul(tokens, w_q)
    return AttentionContext(q=q, k=q, w_q=w_q, w_k=w_q, height=h, width=w, tau=float(tau))


@dataclass
class TileGrid:
    """Tiles with border clamping; each has a representative query at its center."""

    height: int
    width: int
    tile_size: tuple = (4, 4)
    stride: tuple = (4, 4)
    origins: np.ndarray = field(init=False)
    centers: np.ndarray = field(init=False)

    def __post_init__(self):
        th, tw = self.tile_size
        sh, sw = self.stride
        if th < 1 or tw < 1 or sh < 1 or sw < 1:
            raise ValueError("tile size and stride must be positive")
        if th > self.height or tw > self.width:
            raise ValueError(f"tile {self.tile_size} larger than grid {self.height}x{self.width}")
        rows = _axis_origins(self.height, th, sh)
        cols = _axis_origins(self.width, tw, sw)
        self.origins = np.array([(r, c) for r in rows for c in cols], dtype=np.intp)
        self.centers = self.origins + np.array([th // 2, tw // 2], dtype=np.intp)

    @property
    def n_tiles(self):
        return len(self.origins)

    @property
    def center_index(self):
        """Flat row-major token index of each representative query."""
        return self.centers[:, 0] * self.width + self.centers[:, 1]

    def members(self, p):
        r, c = self.origins[p]
        th, tw = self.tile_size
        rr, cc = np.meshgrid(np.arange(r, r + th), np.arange(c, c + tw), indexing="ij")
        return (rr * self.width + cc).reshape(-1)


def _axis_origins(n, size, stride):
    origins = list(range(0, n - size + 1, stride))
    if origins[-1] + size < n:
        origins.append(n - size)
    return origins


def grid_positions(h, w):
    """``(S, 2)`` array mapping flat index ``s`` to ``(row, col)``."""
    rr, cc = np.divmod(np.arange(h * w), w)
    return np.stack([rr, cc], axis=1).astype(np.float64)


def temporal_pairs(F, s_f):
    """Anchor/target pairs ``(i, j)`` with ``1 <= j - i <= s_f`` (0-based frames)."""
    if s_f < 1:
        raise ValueError("temporal span must be >= 1")
    return np.array([(i, j) for i in range(F) for j in range(i + 1, min(i + s_f, F - 1) + 1)], dtype=np.intp).reshape(-1, 2)


def all_pairs(F):
    return temporal_pairs(F, F - 1)


def _rep_scores(ctx, tiles, i, j):
    q = ctx.q.data[i, tiles.center_index]  # (N, D)
    return (q @ ctx.k.data[j].T) * ctx.score_scale  # (N, S)


def representative_attention(ctx, tiles, i, j, counter=None):
    """Softmax attention of each tile's representative query over all tokens of frame ``j``."""
    if not (0 <= i < ctx.frames and 0 <= j < ctx.frames):
        raise IndexError(f"frame pair ({i}, {j}) outside 0..{ctx.frames - 1}")
    scores = _rep_scores(ctx, tiles, i, j)
    if counter is not None:
        counter.acquisition += scores.size
    return T.softmax_last_axis(scores).data


def estimate_center_expectation(a_rep, h, w):
    """Attention-weighted mean position per row, ``(N, 2)`` floats."""
    return a_rep @ grid_positions(h, w)


def estimate_center_argmax(ctx, tiles, i, j, counter=None):
    """Tile center plus the argmax displacement of its representative query.

    Ties go to the smallest flat index (``np.argmax`` returns the first maximum).
    """
    scores = _rep_scores(ctx, tiles, i, j)
    if counter is not None:
        counter.acquisition += scores.size
    best = np.argmax(scores, axis=1)
    target = np.stack(np.divmod(best, ctx.width), axis=1)
    return tiles.centers + (target - tiles.centers)


def estimate_centers(ctx, tiles, pairs, mode="argmax", counter=None):
    """Integer window centers ``(n_pairs, N_tiles, 2)`` for every pair."""
    if mode not in CENTER_MODES:
        raise ValueError(f"unknown center mode {mode!r}; expected one of {CENTER_MODES}")
    out = np.empty((len(pairs), tiles.n_tiles, 2), dtype=np.intp)
    for n, (i, j) in enumerate(pairs):
        if mode == "anchor":
            out[n] = tiles.centers
        elif mode == "argmax":
            out[n] = estimate_center_argmax(ctx, tiles, i, j, counter)
        else:
            c = estimate_center_expectation(representative_attention(ctx, tiles, i, j, counter), ctx.height, ctx.width)
            out[n] = np.floor(c + 0.5).astype(np.intp)
    return out


@dataclass
class WindowPlan:
    """Clamped ``l x l`` windows per (pair, tile).

    ``index`` holds flat token indices ``(n_pairs, N_tiles, l*l)``; slots that
    fall outside the grid carry a clipped placeholder index and ``mask == False``.
    """

    pairs: np.ndarray
    centers: np.ndarray
    s_f: int
    l: int
    frames: int
    height: int
    width: int
    tiles: TileGrid
    center_mode: str = "argmax"
    index: np.ndarray = field(init=False, repr=False)
    mask: np.ndarray = field(init=False, repr=False)
    positions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        r = self.l // 2
        off = np.arange(-r, r + 1)
        dy, dx = np.meshgrid(off, off, indexing="ij")
        rows = self.centers[..., 0:1] + dy.reshape(-1)
        cols = self.centers[..., 1:2] + dx.reshape(-1)
        self.mask = (rows >= 0) & (rows < self.height) & (cols >= 0) & (cols < self.width)
        rows = np.clip(rows, 0, self.height - 1)
        cols = np.clip(cols, 0, self.width - 1)
        self.index = rows * self.width + cols
        self.positions = np.stack([rows, cols], axis=-1).astype(np.float64)

    @property
    def n_pairs(self):
        return len(self.pairs)

    def window(self, n, p):
        """Sorted flat indices of the in-bounds window for pair slot ``n``, tile ``p``."""
        return self.index[n, p][self.mask[n, p]]

    def window_sizes(self):
        return self.mask.sum(axis=-1)

    def describe(self):
        th, tw = self.tiles.tile_size
        sh, sw = self.tiles.stride
        return {
            "s_f": int(self.s_f),
            "l": int(self.l),
            "center_mode": self.center_mode,
            "frames": int(self.frames),
            "height": int(self.height),
            "width": int(self.width),
            "tile_size": [int(th), int(tw)],
            "tile_stride": [int(sh), int(sw)],
            "n_tiles": int(self.tiles.n_tiles),
            "pairs": self.pairs.tolist(),
        }


def build_window_plan(centers, s_f, l, F, h, w, tiles, center_mode="argmax"):
    if l < 1 or l % 2 == 0:
        raise ValueError(f"window side l must be odd, got {l}")
    if l > min(h, w):
        raise ValueError(f"window side {l} exceeds grid {h}x{w}")
    pairs = temporal_pairs(F, s_f)
    centers = np.asarray(centers)
    if centers.shape != (len(pairs), tiles.n_tiles, 2):
        raise ValueError(f"centers shape {centers.shape} != {(len(pairs), tiles.n_tiles, 2)}")
    lo = np.zeros(2, dtype=np.intp)
    hi = np.array([h - 1, w - 1], dtype=np.intp)
    centers = np.clip(np.rint(centers).astype(np.intp), lo, hi)
    return WindowPlan(pairs, centers, int(s_f), int(l), int(F), int(h), int(w), tiles, center_mode)


def plan_windows(ctx, tiles, s_f, l, center_mode="argmax", counter=None):
    """Estimate centers from ``ctx`` and build the plan in one call."""
    pairs = temporal_pairs(ctx.frames, s_f)
    centers = estimate_centers(ctx, tiles, pairs, center_mode, counter)
    return build_window_plan(centers, s_f, l, ctx.frames, ctx.height, ctx.width, tiles, center_mode)


def count_score_ops(F, h, w, s_f, l, n_tiles, center_mode="argmax"):
    """Analytic score counts for dense extraction vs. sliding windows.

    ``full_ops`` charges every token of every frame pair against every token
    (the dense per-token map); ``windowed_ops`` charges ``l*l`` scores per tile
    and temporal pair. ``acquisition_ops`` is the representative-query cost of
    placing the windows (zero in ``anchor`` mode).
    """
    S = h * w
    full_pairs = F * (F - 1) // 2
    windowed_pairs = sum(min(s_f, F - 1 - i) for i in range(F))
    full_ops = full_pairs * S * S
    windowed_ops = windowed_pairs * n_tiles * l * l
    acquisition = 0 if center_mode == "anchor" else windowed_pairs * n_tiles * S
    return {
        "full_pairs": full_pairs,
        "windowed_pairs": windowed_pairs,
        "full_ops": full_ops,
        "windowed_ops": windowed_ops,
        "acquisition_ops": acquisition,
        "ratio": full_ops / windowed_ops,
    }
