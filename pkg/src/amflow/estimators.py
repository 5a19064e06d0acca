"""scikit-learn style wrappers around flow extraction and motion transfer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .amf import FLOW_MODES, extract_amf_full, extract_amf_windowed
from .attention import CENTER_MODES, OpCounter, TileGrid, plan_windows, project_qk, temporal_pairs
from .guidance import GuidanceConfig
from .pipeline import TransferJob, invert_reference, motion_fidelity, run_transfer
from .validation import check_choice, check_int, check_positive, check_video


class AMFExtractor(TransformerMixin, BaseEstimator):
    """Video -> per-pair, per-tile displacements ``(n_pairs, N_tiles, 2)``.

    ``fit`` only checks the grid and builds the tile layout; ``transform``
    extracts the flow of each video it is given. ``window=False`` runs the
    dense oracle over the same pairs.
    """

    def __init__(self, s_f=3, l=9, tile_size=(4, 4), tile_stride=(4, 4), tau=4.0, head_dim=8,
                 center_mode="argmax", mode="hard", window=True, qk_norm=True, seed=0):
        self.s_f = s_f
        self.l = l
        self.tile_size = tile_size
        self.tile_stride = tile_stride
        self.tau = tau
        self.head_dim = head_dim
        self.center_mode = center_mode
        self.mode = mode
        self.window = window
        self.qk_norm = qk_norm
        self.seed = seed

    def _validate_params(self):
        check_int(self.s_f, "s_f", 1)
        check_int(self.l, "l", 1, odd=True)
        check_int(self.head_dim, "head_dim", 2)
        check_positive(self.tau, "tau")
        check_choice(self.center_mode, "center_mode", CENTER_MODES)
        check_choice(self.mode, "mode", FLOW_MODES)

    def fit(self, X, y=None):
        self._validate_params()
        video = check_video(X)
        if self.l > min(video.height, video.width):
            raise ValueError(f"l={self.l} exceeds the {video.height}x{video.width} grid")
        self.grid_shape_ = (video.frames, video.height, video.width)
        self.n_features_in_ = video.channels
        self.tiles_ = TileGrid(video.height, video.width, tuple(self.tile_size), tuple(self.tile_stride))
        self.pairs_ = temporal_pairs(video.frames, self.s_f)
        self.counter_ = OpCounter()
        return self

    def transform(self, X):
        check_is_fitted(self, "tiles_")
        video = check_video(X)
        if (video.frames, video.height, video.width) != self.grid_shape_ or video.channels != self.n_features_in_:
            raise ValueError(f"video shape {video.shape} does not match the fitted grid {self.grid_shape_}")
        flow = self.extract(video)
        return flow.delta

    def extract(self, video):
        """The full :class:`MotionFlow` for one video."""
        ctx = project_qk(video, seed=self.seed, head_dim=self.head_dim, tau=self.tau, qk_norm=self.qk_norm)
        if not self.window:
            return extract_amf_full(ctx, self.tiles_, self.pairs_, self.mode, self.counter_)
        plan = plan_windows(ctx, self.tiles_, self.s_f, self.l, self.center_mode, self.counter_)
        return extract_amf_windowed(ctx, plan, self.mode, self.counter_)


class MotionTransfer(BaseEstimator):
    """Fit on a reference video, then generate videos that follow its motion.

    ``predict(content)`` runs the guided sampler with ``content`` as the
    appearance target and returns the generated latent ``(F, C, h, w)``.
    """

    def __init__(self, outer_steps=50, guided_fraction=0.2, inner_steps=10, skip_interval=3,
                 lr_start=0.003, lr_end=0.002, lambda_amf=5.0, lambda_window=1.0, alpha=0.2,
                 s_f=3, l=9, tau=4.0, head_dim=8, tile_size=(4, 4), tile_stride=(4, 4),
                 center_mode="anchor", seed=0):
        self.outer_steps = outer_steps
        self.guided_fraction = guided_fraction
        self.inner_steps = inner_steps
        self.skip_interval = skip_interval
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.lambda_amf = lambda_amf
        self.lambda_window = lambda_window
        self.alpha = alpha
        self.s_f = s_f
        self.l = l
        self.tau = tau
        self.head_dim = head_dim
        self.tile_size = tile_size
        self.tile_stride = tile_stride
        self.center_mode = center_mode
        self.seed = seed

    def guidance_config(self):
        return GuidanceConfig(
            inner_steps=self.inner_steps, skip_interval=self.skip_interval,
            lr_start=self.lr_start, lr_end=self.lr_end,
            lambda_amf=self.lambda_amf, lambda_window=self.lambda_window, alpha=self.alpha,
            s_f=self.s_f, l=self.l, tau=self.tau, head_dim=self.head_dim,
            tile_size=tuple(self.tile_size), tile_stride=tuple(self.tile_stride),
            center_mode=self.center_mode,
        )

    def _job(self, content):
        return TransferJob(self.reference_, content, self.outer_steps, self.guided_fraction, self.seed, self.guidance_config())

    def fit(self, X, y=None):
        """Cache the reference flow of ``X``."""
        self.reference_ = check_video(X)
        self.cache_ = invert_reference(self.reference_, self._job(self.reference_))
        return self

    def predict(self, X):
        check_is_fitted(self, "reference_")
        result = run_transfer(self._job(check_video(X, "content")))
        self.report_ = result.report
        return result.generated.values

    def score(self, X, y=None):
        """Negative mean endpoint error of the generated flow against the reference flow."""
        generated = self.predict(X)
        return -float(self.report_["final"]["mean_epe"]) if generated is not None else np.nan

    def reference_flow(self):
        check_is_fitted(self, "cache_")
        return self.cache_[len(self.cache_) - 1].flow

    @staticmethod
    def fidelity(flow_gen, flow_ref):
        return motion_fidelity(flow_gen, flow_ref)
