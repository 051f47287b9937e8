"""Estimator-style wrappers around the two trainable networks.

Both follow the fit/predict convention: constructor arguments are stored
unchanged and retrievable through get_params/set_params, learned state
lives in trailing-underscore attributes, and predict refuses to run
before fit.
"""

from __future__ import annotations

from .config import FUSION_MODES, RunConfig
from .detector import FusionContext, infer, train_fusion, train_proposal_network
from .synthworld import Frame


def _check_frames(frames, name: str):
    frames = list(frames)
    if not frames:
        raise ValueError(f"{name}: frames must be a nonempty sequence")
    for i, f in enumerate(frames):
        if not isinstance(f, Frame):
            raise TypeError(f"{name}: frames[{i}] is {type(f).__name__}, "
                            f"expected Frame")
    return frames


class _ParamsMixin:
    _param_names: tuple = ()

    def get_params(self, deep: bool = True) -> dict:
        return {k: getattr(self, k) for k in self._param_names}

    def set_params(self, **params):
        for k, v in params.items():
            if k not in self._param_names:
                raise ValueError(f"{type(self).__name__}: unknown parameter {k!r}")
            setattr(self, k, v)
        return self

    def _require_fitted(self, attr: str):
        if not hasattr(self, attr):
            raise ValueError(f"{type(self).__name__} is not fitted; call fit first")


class ProposalDetector(_ParamsMixin):
    """First-stage detector: trains the per-cell proposal network and
    predicts score-ranked proposals per frame."""

    _param_names = ("config", "probabilistic", "random_state")

    def __init__(self, config: RunConfig | None = None, probabilistic: bool = True,
                 random_state: int = 0):
        self.config = config
        self.probabilistic = probabilistic
        self.random_state = random_state

    def fit(self, frames, y=None):
        frames = _check_frames(frames, "ProposalDetector.fit")
        cfg = self.config or RunConfig()
        self.model_ = train_proposal_network(frames, cfg, self.random_state,
                                             probabilistic=self.probabilistic)
        self.config_ = cfg
        return self

    def predict(self, frames):
        """Per-frame lists of (box, score) proposals above the score floor,
        suppressed at the training-time proposal NMS threshold."""
        self._require_fitted("model_")
        frames = _check_frames(frames, "ProposalDetector.predict")
        from .detector import select_proposals
        from .features import rasterize_bev
        cfg = self.config_
        tc = cfg.train_fusion
        out = []
        for f in frames:
            grid = rasterize_bev(f.points, cfg.world, cfg.features)
            sel = select_proposals(self.model_, grid, f, tc.k_infer,
                                   tc.proposal_nms_iou, tc.pre_nms_top)
            out.append([(sel.boxes[i], float(sel.scores[i]))
                        for i in range(len(sel))])
        return out


class FusionDetector(_ParamsMixin):
    """Two-stage detector: proposal network plus fusion refinement head,
    trained in one of the four sampling modes."""

    _param_names = ("config", "mode", "probabilistic", "random_state")

    def __init__(self, config: RunConfig | None = None,
                 mode: str = "learned_sampling", probabilistic: bool = True,
                 random_state: int = 0):
        self.config = config
        self.mode = mode
        self.probabilistic = probabilistic
        self.random_state = random_state

    def fit(self, frames, y=None):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"FusionDetector: unknown mode {self.mode!r}")
        frames = _check_frames(frames, "FusionDetector.fit")
        cfg = self.config or RunConfig()
        self.proposal_model_ = train_proposal_network(
            frames, cfg, self.random_state, probabilistic=self.probabilistic)
        context = FusionContext(frames, self.proposal_model_, cfg)
        self.fusion_model_ = train_fusion(context, self.mode, self.random_state)
        self.config_ = cfg
        return self

    def predict(self, frames):
        """Per-frame lists of final Detection objects."""
        self._require_fitted("fusion_model_")
        frames = _check_frames(frames, "FusionDetector.predict")
        return [infer(f, self.proposal_model_, self.fusion_model_, self.config_)
                for f in frames]
