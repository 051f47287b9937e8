"""Two-stage probabilistic detector: BEV proposal network and fusion network.

Stage one slides a small MLP over K x K BEV patches (strided) and emits,
per cell, a Gaussian classification logit (mean, log variance) and a
Gaussian 8-dim box regression (mean, log variance per dim) decoded against
a per-cell prior box. It trains with a sampled-logit focal loss on all
cells and the attenuated regression loss on positive cells only.

Stage two pools BEV and image RoI features for each selected proposal,
concatenates them with the proposal's 8-dim encoding and score, and trains
a dropout MLP to re-classify and refine the box. Its training regimes:

- baseline / no_sampling: proposals enter as their predicted means.
- fixed_sigma: selected encoding dims are perturbed with a constant sigma.
- learned_sampling: encoding dims and the logit are perturbed by
  reparameterized draws from the stage-one predicted distributions, and
  regression targets are re-encoded against the sampled box so the decoded
  prediction stays consistent.

With every predicted variance at the clamp floor, learned_sampling reduces
to no_sampling bit-exactly under a shared seed: sampling draws come from a
dedicated "sampling" stream, so dropout (on "train_fusion") is unaffected.

Inference is sampling-free: select, pool means, fuse, decode, NMS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, SAMPLE_DIM_NAMES
from .features import BevGrid, grid_shape, rasterize_bev, roi_pool_bev, roi_pool_image
from .geometry import (Box3D, PriorBox, corners_bev, decode_box, encode_box,
                       iou_bev, project_to_image)
from .neural import (MLP, Adam, Sgd, clamp_log_var, load_checkpoint,
                     sampled_logit_classification_loss, save_checkpoint,
                     sample_gaussian, sigmoid, attenuated_regression_loss,
                     focal_loss)
from .rng import Rng
from .synthworld import Frame

N_PROPOSAL_OUTPUTS = 18  # logit mean, logit log var, 8 reg means, 8 reg log vars


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, value):
        super().__init__(f"non-finite training loss at step {step}: {value}")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class ProbabilisticProposal:
    """One stage-one output: Gaussian heads decoded against a cell prior."""

    anchor: PriorBox
    logit_mean: float
    logit_log_var: float
    reg_mean: np.ndarray
    reg_log_var: np.ndarray
    cell_index: int

    @property
    def score(self) -> float:
        return float(sigmoid(np.float64(self.logit_mean)))

    @property
    def box(self) -> Box3D:
        from .geometry import BoxEncoding8
        return decode_box(BoxEncoding8.from_array(self.reg_mean), self.anchor)


@dataclass(frozen=True)
class Detection:
    """Final output: refined box, fused score, provenance ids."""

    frame_id: str
    box: Box3D
    score: float
    proposal_id: int


def _decode_many(enc: np.ndarray, anchors_xy: np.ndarray, anchor_dims,
                 idx: np.ndarray) -> list:
    from .geometry import BoxEncoding8
    al, aw, ah = anchor_dims
    boxes = []
    for row, i in zip(enc, idx):
        ref = PriorBox(anchors_xy[i, 0], anchors_xy[i, 1], 0.0, al, aw, ah, 0.0)
        boxes.append(decode_box(BoxEncoding8.from_array(row), ref))
    return boxes


class ProposalModel:
    """Strided per-cell MLP over BEV patches with Gaussian heads."""

    def __init__(self, cfg: RunConfig, params: dict | None = None,
                 rng: Rng | None = None):
        self.cfg = cfg
        k = cfg.model.patch_size
        self.in_dim = k * k * cfg.features.n_channels
        sizes = (self.in_dim, *cfg.model.proposal_hidden, N_PROPOSAL_OUTPUTS)
        fresh = params is None
        self.mlp = MLP(sizes, dropout=cfg.model.proposal_dropout,
                       params=params, rng=rng)
        if fresh:
            # positive cells are rare, so start the objectness logit at the
            # base rate instead of 0.5 to keep early focal loss off the
            # easy-negative plateau; a small head init keeps the variance
            # outputs near zero where the attenuated loss is well behaved;
            # log-variance biases start negative so early logit samples and
            # box samples stay close to their means while calibration forms
            p = cfg.model.cls_prior
            last = self.mlp.n_layers - 1
            self.mlp.params[f"W{last}"] *= 0.1
            b = self.mlp.params[f"b{last}"]
            b[0] = math.log(p / (1.0 - p))
            b[1] = -2.0
            b[10:18] = -2.0
        self._anchors_xy = None

    @property
    def anchor_dims(self):
        w = self.cfg.world
        return (w.mean_length, w.mean_width, w.mean_height)

    def anchors_xy(self) -> np.ndarray:
        """(n_cells, 2) metric centers of the strided patch centers."""
        if self._anchors_xy is None:
            w, f, m = self.cfg.world, self.cfg.features, self.cfg.model
            nx, ny = grid_shape(w, f)
            k, stride = m.patch_size, m.stride
            n_i = (nx - k) // stride + 1
            n_j = (ny - k) // stride + 1
            ii = np.arange(n_i) * stride + k // 2
            jj = np.arange(n_j) * stride + k // 2
            cx = w.x_min + (ii + 0.5) * f.resolution
            cy = w.y_min + (jj + 0.5) * f.resolution
            gx, gy = np.meshgrid(cx, cy, indexing="ij")
            self._anchors_xy = np.column_stack([gx.reshape(-1), gy.reshape(-1)])
        return self._anchors_xy

    def anchor_box(self, cell_index: int) -> PriorBox:
        xy = self.anchors_xy()[cell_index]
        al, aw, ah = self.anchor_dims
        return PriorBox(float(xy[0]), float(xy[1]), 0.0, al, aw, ah, 0.0)

    def patches(self, grid: BevGrid) -> np.ndarray:
        """(n_cells, K*K*C) strided local patches, channels scaled to ~[0,1]."""
        k, stride = self.cfg.model.patch_size, self.cfg.model.stride
        win = np.lib.stride_tricks.sliding_window_view(grid.cells, (k, k), axis=(0, 1))
        win = win[::stride, ::stride]
        flat = np.ascontiguousarray(win).reshape(-1, self.in_dim)
        # fixed conditioning: bring max-height and log-count in line with the
        # binary slab channels so no input dimension dominates the first layer
        n_ch = self.cfg.features.n_channels
        w = self.cfg.world
        scaled = flat.reshape(-1, n_ch, k * k)
        scaled[:, n_ch - 2] *= 1.0 / (w.z_max - w.z_min)
        scaled[:, n_ch - 1] *= 0.2
        return flat

    def evidence(self, patches: np.ndarray) -> np.ndarray:
        """True where the receptive field holds at least one point."""
        k = self.cfg.model.patch_size
        n_ch = self.cfg.features.n_channels
        per_ch = patches.reshape(len(patches), n_ch, k * k)
        return per_ch[:, n_ch - 1].sum(axis=1) > 0.0

    def forward_raw(self, grid: BevGrid, train: bool = False, rng: Rng | None = None):
        patches = self.patches(grid)
        raw, cache = self.mlp.forward(patches, train=train, rng=rng)
        return raw, cache, patches

    def split_heads(self, raw: np.ndarray):
        """(logit_mean, logit_log_var, reg_mean, reg_log_var), log vars clamped."""
        return (raw[:, 0], clamp_log_var(raw[:, 1]),
                raw[:, 2:10], clamp_log_var(raw[:, 10:18]))

    def proposals(self, grid: BevGrid) -> list:
        """All per-cell proposals (eval mode), one per strided cell."""
        raw, _, _ = self.forward_raw(grid)
        lm, lv, rm, rv = self.split_heads(raw)
        out = []
        for i in range(len(raw)):
            out.append(ProbabilisticProposal(
                anchor=self.anchor_box(i), logit_mean=float(lm[i]),
                logit_log_var=float(lv[i]), reg_mean=rm[i].copy(),
                reg_log_var=rv[i].copy(), cell_index=i))
        return out

    def save(self, path, extra_meta: dict | None = None):
        meta = {"kind": "proposal", "config": self.cfg.to_dict()}
        meta.update(extra_meta or {})
        save_checkpoint(path, self.mlp.spec(), self.mlp.params, meta)

    @classmethod
    def load(cls, path) -> "ProposalModel":
        from .config import config_from_dict
        arch, params, meta = load_checkpoint(path)
        if meta.get("kind") != "proposal":
            raise ValueError(f"checkpoint at {path} is not a proposal model")
        cfg = config_from_dict(meta["config"])
        model = cls(cfg, params=params)
        if list(model.mlp.sizes) != list(arch["sizes"]):
            raise ValueError("checkpoint architecture does not match config")
        return model


def _canonical_target(box: Box3D) -> Box3D:
    """Same footprint with yaw folded into [-pi/2, pi/2].

    A rectangle is unchanged under yaw -> yaw + pi, so cos/sin targets for
    the raw heading are sign-ambiguous and average to zero under the
    regression loss. Folding picks the one learnable representative.
    """
    yaw = math.remainder(box.yaw, math.pi)
    return Box3D(box.cx, box.cy, box.z_bottom, box.length, box.width,
                 box.height, yaw)


def _assign_cells(anchors_xy: np.ndarray, gt_boxes) -> tuple:
    """Positive iff the cell center lies inside a ground-truth footprint.

    Cells inside two footprints take the box whose center is nearest.
    Returns (labels (n,), target index per cell (n,), -1 for negatives).
    """
    n = len(anchors_xy)
    labels = np.zeros(n, dtype=np.int64)
    target = np.full(n, -1, dtype=np.int64)
    best_d2 = np.full(n, np.inf)
    for g, box in enumerate(gt_boxes):
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        dx = anchors_xy[:, 0] - box.cx
        dy = anchors_xy[:, 1] - box.cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        inside = (np.abs(u) <= 0.5 * box.length) & (np.abs(v) <= 0.5 * box.width)
        d2 = dx * dx + dy * dy
        take = inside & (d2 < best_d2)
        labels[take] = 1
        target[take] = g
        best_d2[take] = d2[take]
    return labels, target


def proposal_loss_and_grad(model: ProposalModel, raw: np.ndarray, frame: Frame,
                           rng: Rng, probabilistic: bool,
                           gamma: float, alpha: float):
    """Per-frame stage-one loss and d loss / d raw outputs.

    Classification on every cell, regression on positive cells only, both
    normalized by max(1, n_pos). The non-probabilistic path ignores the
    variance heads: plain focal on sigmoid(mean), 0.5 L2 on the means.
    """
    lm, lv_raw = raw[:, 0], raw[:, 1]
    rm, rv_raw = raw[:, 2:10], raw[:, 10:18]
    anchors_xy = model.anchors_xy()
    gt_boxes = [o.box for o in frame.objects]
    labels, target = _assign_cells(anchors_xy, gt_boxes)
    pos = np.flatnonzero(labels == 1)
    norm = 1.0 / max(1, len(pos))

    d_raw = np.zeros_like(raw)
    if probabilistic:
        eps = rng.normal(size=lm.shape)
        loss_vec, d_lm, d_lv, _ = sampled_logit_classification_loss(
            lm, lv_raw, labels, eps=eps, gamma=gamma, alpha=alpha)
        loss_cls = float(loss_vec.sum()) * norm
        d_raw[:, 0] = d_lm * norm
        d_raw[:, 1] = d_lv * norm
    else:
        p = sigmoid(lm)
        loss_vec, d_p = focal_loss(p, labels, gamma=gamma, alpha=alpha)
        loss_cls = float(loss_vec.sum()) * norm
        d_raw[:, 0] = d_p * p * (1.0 - p) * norm

    loss_reg = 0.0
    if len(pos):
        al, aw, ah = model.anchor_dims
        targets = np.empty((len(pos), 8), dtype=np.float64)
        for row, i in enumerate(pos):
            ref = PriorBox(anchors_xy[i, 0], anchors_xy[i, 1], 0.0, al, aw, ah, 0.0)
            targets[row] = encode_box(_canonical_target(gt_boxes[target[i]]),
                                      ref).to_array()
        if probabilistic:
            loss_reg, d_rm, d_rv = attenuated_regression_loss(
                rm[pos], rv_raw[pos], targets)
            loss_reg *= norm
            d_raw[pos, 2:10] = d_rm * norm
            d_raw[pos, 10:18] = d_rv * norm
        else:
            r = targets - rm[pos]
            loss_reg = float(0.5 * np.sum(r * r)) * norm
            d_raw[pos, 2:10] = -r * norm
    return loss_cls, loss_reg, d_raw


def train_proposal_network(frames, cfg: RunConfig, seed: int,
                           probabilistic: bool | None = None,
                           log_rows: list | None = None) -> ProposalModel:
    """SGD training of the stage-one network over cycled frames."""
    if not frames:
        raise ValueError("train_proposal_network: dataset is empty")
    tc = cfg.train_lidar
    if probabilistic is None:
        probabilistic = tc.probabilistic
    init_rng = Rng(seed, "train_lidar/init")
    model = ProposalModel(cfg, rng=init_rng)
    train_rng = Rng(seed, "train_lidar/steps")
    drop_rng = Rng(seed, "train_lidar/dropout")
    opt = Sgd(tc.lr, decay=tc.lr_decay, decay_every=tc.lr_decay_every,
              momentum=tc.momentum)
    for step in range(tc.steps):
        frame = frames[step % len(frames)]
        grid = rasterize_bev(frame.points, cfg.world, cfg.features)
        raw, cache, _ = model.forward_raw(grid, train=cfg.model.proposal_dropout > 0,
                                          rng=drop_rng)
        loss_cls, loss_reg, d_raw = proposal_loss_and_grad(
            model, raw, frame, train_rng, probabilistic, tc.focal_gamma, tc.focal_alpha)
        total = loss_cls + loss_reg
        if not math.isfinite(total):
            raise TrainingDivergence(step, total)
        grads, _ = model.mlp.backward(cache, d_raw)
        opt.step(model.mlp.params, grads, step)
        if log_rows is not None:
            log_rows.append((step, loss_cls, loss_reg, opt.lr_at(step)))
    return model


@dataclass
class SelectedProposals:
    """Arrays for the k proposals surviving scoring, FOV, and NMS."""

    cell_index: np.ndarray
    boxes: list
    enc_mean: np.ndarray
    reg_log_var: np.ndarray
    logit_mean: np.ndarray
    logit_log_var: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.boxes)


def _nms_keep_bev(boxes, scores, thresh: float) -> list:
    """Greedy BEV NMS with a bounding-rectangle prefilter (exact result)."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    aabb = np.empty((len(boxes), 4))
    for i, b in enumerate(boxes):
        c = corners_bev(b)
        aabb[i] = (c[:, 0].min(), c[:, 1].min(), c[:, 0].max(), c[:, 1].max())
    kept = []
    for idx in order:
        i = int(idx)
        ok = True
        for j in kept:
            if (aabb[i, 0] > aabb[j, 2] or aabb[j, 0] > aabb[i, 2]
                    or aabb[i, 1] > aabb[j, 3] or aabb[j, 1] > aabb[i, 3]):
                continue
            if iou_bev(boxes[i], boxes[j]) > thresh:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


def select_proposals(model: ProposalModel, grid: BevGrid, frame: Frame,
                     k: int, nms_thresh: float, pre_top: int) -> SelectedProposals:
    """Top-k surviving proposals: evidence filter, FOV filter, NMS, truncate.

    Cells whose receptive field saw no LiDAR point are dropped (an empty
    frame yields no proposals), then out-of-camera proposals are removed,
    then greedy BEV NMS keeps the top k by score.
    """
    raw, _, patches = model.forward_raw(grid)
    lm, lv, rm, rv = model.split_heads(raw)
    ev = model.evidence(patches)
    idx = np.flatnonzero(ev)
    if len(idx) == 0:
        return _empty_selection()
    order = np.argsort(-lm[idx], kind="stable")[:pre_top]
    idx = idx[order]
    boxes = _decode_many(rm[idx], model.anchors_xy(), model.anchor_dims, idx)
    vis = [project_to_image(b, frame.camera) is not None for b in boxes]
    idx = idx[np.asarray(vis, dtype=bool)]
    boxes = [b for b, v in zip(boxes, vis) if v]
    if len(idx) == 0:
        return _empty_selection()
    scores = sigmoid(lm[idx])
    kept = _nms_keep_bev(boxes, scores, nms_thresh)[:k]
    sel = idx[kept]
    return SelectedProposals(
        cell_index=sel,
        boxes=[boxes[i] for i in kept],
        enc_mean=rm[sel].copy(),
        reg_log_var=rv[sel].copy(),
        logit_mean=lm[sel].copy(),
        logit_log_var=lv[sel].copy(),
        scores=sigmoid(lm[sel]),
    )


def _empty_selection() -> SelectedProposals:
    return SelectedProposals(np.zeros(0, dtype=np.int64), [],
                             np.zeros((0, 8)), np.zeros((0, 8)),
                             np.zeros(0), np.zeros(0), np.zeros(0))


def sample_proposal(enc_mean: np.ndarray, reg_log_var: np.ndarray,
                    logit_mean: float, logit_log_var: float,
                    rng: Rng, dims, sigma_override: float | None = None,
                    sample_logit: bool = True):
    """Perturb selected encoding dims (and optionally the logit) by
    reparameterized draws; unselected dims keep their means.

    With sigma_override set, the predicted scales are replaced by the
    constant sigma on the selected dims (fixed-sigma training). Returns
    (sampled encoding, sampled logit).
    """
    dim_idx = np.array([SAMPLE_DIM_NAMES.index(d) for d in dims], dtype=np.int64)
    enc = np.array(enc_mean, dtype=np.float64, copy=True)
    eps = rng.normal(size=len(dim_idx))
    if sigma_override is None:
        vals, _ = sample_gaussian(enc[dim_idx], reg_log_var[dim_idx], eps=eps)
        enc[dim_idx] = vals
    else:
        enc[dim_idx] = enc[dim_idx] + sigma_override * eps
    logit = float(logit_mean)
    if sample_logit:
        eps_l = rng.normal()
        val, _ = sample_gaussian(np.float64(logit_mean), np.float64(logit_log_var),
                                 eps=eps_l)
        logit = float(val)
    return enc, logit


class FusionModel:
    """Dropout MLP over concatenated RoI features, encoding, and score."""

    def __init__(self, cfg: RunConfig, in_dim: int, params: dict | None = None,
                 rng: Rng | None = None, mode: str = "no_sampling"):
        self.cfg = cfg
        self.in_dim = in_dim
        self.mode = mode
        sizes = (in_dim, *cfg.model.fusion_hidden, 9)
        self.mlp = MLP(sizes, dropout=cfg.model.fusion_dropout, params=params, rng=rng)

    def save(self, path, extra_meta: dict | None = None):
        meta = {"kind": "fusion", "mode": self.mode, "in_dim": self.in_dim,
                "config": self.cfg.to_dict()}
        meta.update(extra_meta or {})
        save_checkpoint(path, self.mlp.spec(), self.mlp.params, meta)

    @classmethod
    def load(cls, path) -> "FusionModel":
        from .config import config_from_dict
        arch, params, meta = load_checkpoint(path)
        if meta.get("kind") != "fusion":
            raise ValueError(f"checkpoint at {path} is not a fusion model")
        cfg = config_from_dict(meta["config"])
        return cls(cfg, in_dim=int(meta["in_dim"]), params=params,
                   mode=meta.get("mode", "no_sampling"))


def fusion_input_dim(cfg: RunConfig) -> int:
    f = cfg.features
    n_img_ch = 3
    return f.pool_bev ** 2 * f.n_channels + f.pool_image ** 2 * n_img_ch + 9


def assemble_fusion_input(grid: BevGrid, frame: Frame, box: Box3D,
                          enc: np.ndarray, score: float, cfg: RunConfig):
    """One fusion feature row; None when the box left the camera FOV."""
    img_patch = roi_pool_image(frame.image_raster, box, frame.camera,
                               cfg.features.pool_image)
    if img_patch is None:
        return None
    bev_patch = roi_pool_bev(grid, box, cfg.features.pool_bev)
    return np.concatenate([bev_patch.reshape(-1), img_patch.reshape(-1),
                           np.asarray(enc, dtype=np.float64), [float(score)]])


@dataclass
class FrameBundle:
    """Cached per-frame fusion-training material for a frozen stage one."""

    frame: Frame
    sel: SelectedProposals
    labels: np.ndarray
    matched_gt: np.ndarray
    inputs_mean: np.ndarray
    anchors: list


class FusionContext:
    """Builds and memoizes FrameBundles for one proposal model + dataset.

    Proposal selection, matching, and mean-path pooled inputs depend only
    on the frozen stage-one model, so the three fusion training modes share
    this cache.
    """

    def __init__(self, frames, model: ProposalModel, cfg: RunConfig):
        self.frames = frames
        self.model = model
        self.cfg = cfg
        self._cache = {}

    def bundle(self, i: int) -> FrameBundle:
        if i not in self._cache:
            self._cache[i] = self._build(self.frames[i])
        return self._cache[i]

    def _build(self, frame: Frame) -> FrameBundle:
        cfg = self.cfg
        tc = cfg.train_fusion
        grid = rasterize_bev(frame.points, cfg.world, cfg.features)
        sel = select_proposals(self.model, grid, frame, tc.k_train,
                               tc.proposal_nms_iou, tc.pre_nms_top)
        n = len(sel)
        labels = np.zeros(n, dtype=np.int64)
        matched = np.full(n, -1, dtype=np.int64)
        gts = [o.box for o in frame.objects]
        for i, box in enumerate(sel.boxes):
            best, best_iou = -1, tc.match_iou
            for g, gt in enumerate(gts):
                if abs(gt.cx - box.cx) > 6.0 or abs(gt.cy - box.cy) > 6.0:
                    continue
                o = iou_bev(box, gt)
                if o > best_iou:
                    best, best_iou = g, o
            if best >= 0:
                labels[i] = 1
                matched[i] = best
        rows = [assemble_fusion_input(grid, frame, sel.boxes[i], sel.enc_mean[i],
                                      sel.scores[i], cfg) for i in range(n)]
        inputs = np.array(rows, dtype=np.float64) if rows else \
            np.zeros((0, fusion_input_dim(cfg)))
        anchors = [self.model.anchor_box(int(c)) for c in sel.cell_index]
        return FrameBundle(frame=frame, sel=sel, labels=labels, matched_gt=matched,
                           inputs_mean=inputs, anchors=anchors)


def _fusion_step_losses(fusion: FusionModel, bundle: FrameBundle,
                        grid: BevGrid | None, cfg: RunConfig, mode: str,
                        sample_rng: Rng | None, drop_rng: Rng,
                        fixed_sigma: float | None = None,
                        sample_dims=None):
    """One frame's fusion forward/backward material.

    Returns (loss_cls, loss_reg, grads) or None when the frame has no
    usable proposals.
    """
    sel = bundle.sel
    n = len(sel)
    if n == 0:
        return None
    tc = cfg.train_fusion
    frame = bundle.frame
    gts = [o.box for o in frame.objects]
    dims = tc.sample_dims if sample_dims is None else tuple(sample_dims)

    if mode in ("baseline", "no_sampling"):
        inputs = bundle.inputs_mean
        prop_boxes = sel.boxes
    else:
        sigma = None
        if mode == "fixed_sigma":
            sigma = tc.fixed_sigma if fixed_sigma is None else float(fixed_sigma)
        sample_logit = mode == "learned_sampling"
        inputs = np.empty_like(bundle.inputs_mean)
        prop_boxes = []
        from .geometry import BoxEncoding8
        for i in range(n):
            enc_s, logit_s = sample_proposal(
                sel.enc_mean[i], sel.reg_log_var[i], float(sel.logit_mean[i]),
                float(sel.logit_log_var[i]), sample_rng, dims,
                sigma_override=sigma, sample_logit=sample_logit)
            box_s = decode_box(BoxEncoding8.from_array(enc_s), bundle.anchors[i])
            score_s = float(sigmoid(np.float64(logit_s)))
            row = assemble_fusion_input(grid, frame, box_s, enc_s, score_s, cfg)
            if row is None:
                # Sampled box left the FOV: fall back to the mean-path row.
                row = bundle.inputs_mean[i]
                box_s = sel.boxes[i]
            inputs[i] = row
            prop_boxes.append(box_s)

    out, cache = fusion.mlp.forward(inputs, train=True, rng=drop_rng)
    logits = out[:, 0]
    p = sigmoid(logits)
    loss_vec, d_p = focal_loss(p, bundle.labels, gamma=0.0, alpha=1.0)
    loss_cls = float(loss_vec.mean())
    d_out = np.zeros_like(out)
    d_out[:, 0] = d_p * p * (1.0 - p) / n

    pos = np.flatnonzero(bundle.labels == 1)
    loss_reg = 0.0
    if len(pos):
        targets = np.empty((len(pos), 8))
        for row, i in enumerate(pos):
            ref_box = prop_boxes[i]
            ref = PriorBox(ref_box.cx, ref_box.cy, ref_box.z_bottom, ref_box.length,
                           ref_box.width, ref_box.height, ref_box.yaw)
            targets[row] = encode_box(_canonical_target(gts[bundle.matched_gt[i]]),
                                      ref).to_array()
        r = targets - out[pos, 1:9]
        loss_reg = float(0.5 * np.sum(r * r)) / len(pos)
        d_out[pos, 1:9] = -r / len(pos)

    grads, _ = fusion.mlp.backward(cache, d_out)
    return loss_cls, loss_reg, grads


def train_fusion(context: FusionContext, mode: str, seed: int,
                 log_rows: list | None = None, fixed_sigma: float | None = None,
                 sample_dims=None) -> FusionModel:
    """Adam training of the fusion head in the requested sampling mode.

    fixed_sigma / sample_dims override the corresponding training-config
    values for this run only (used by the ablation matrix).
    """
    cfg = context.cfg
    tc = cfg.train_fusion
    if mode not in ("baseline", "no_sampling", "fixed_sigma", "learned_sampling"):
        raise ValueError(f"train_fusion: unknown mode {mode!r}")
    init_rng = Rng(seed, "train_fusion/init")
    fusion = FusionModel(cfg, fusion_input_dim(cfg), rng=init_rng, mode=mode)
    drop_rng = Rng(seed, "train_fusion/dropout")
    sample_rng = Rng(seed, "sampling")
    opt = Adam(tc.lr)
    n_frames = len(context.frames)
    if n_frames == 0:
        raise ValueError("train_fusion: dataset is empty")
    needs_grid = mode in ("fixed_sigma", "learned_sampling")
    for step in range(tc.steps):
        bundle = context.bundle(step % n_frames)
        grid = None
        if needs_grid and len(bundle.sel):
            grid = rasterize_bev(bundle.frame.points, cfg.world, cfg.features)
        res = _fusion_step_losses(fusion, bundle, grid, cfg, mode,
                                  sample_rng, drop_rng,
                                  fixed_sigma=fixed_sigma,
                                  sample_dims=sample_dims)
        if res is None:
            if log_rows is not None:
                log_rows.append((step, 0.0, 0.0, tc.lr))
            continue
        loss_cls, loss_reg, grads = res
        total = loss_cls + loss_reg
        if not math.isfinite(total):
            raise TrainingDivergence(step, total)
        opt.step(fusion.mlp.params, grads)
        if log_rows is not None:
            log_rows.append((step, loss_cls, loss_reg, tc.lr))
    return fusion


def infer(frame: Frame, model: ProposalModel, fusion: FusionModel,
          cfg: RunConfig | None = None) -> list:
    """Sampling-free inference: select, pool means, fuse, decode, final NMS."""
    cfg = cfg or model.cfg
    tc = cfg.train_fusion
    ev = cfg.evaluation
    grid = rasterize_bev(frame.points, cfg.world, cfg.features)
    sel = select_proposals(model, grid, frame, tc.k_infer,
                           tc.proposal_nms_iou, tc.pre_nms_top)
    if len(sel) == 0:
        return []
    rows = [assemble_fusion_input(grid, frame, sel.boxes[i], sel.enc_mean[i],
                                  sel.scores[i], cfg) for i in range(len(sel))]
    inputs = np.array(rows, dtype=np.float64)
    out, _ = fusion.mlp.forward(inputs, train=False)
    scores = sigmoid(out[:, 0])
    from .geometry import BoxEncoding8
    boxes = []
    for i in range(len(sel)):
        ref_box = sel.boxes[i]
        ref = PriorBox(ref_box.cx, ref_box.cy, ref_box.z_bottom, ref_box.length,
                       ref_box.width, ref_box.height, ref_box.yaw)
        boxes.append(decode_box(BoxEncoding8.from_array(out[i, 1:9]), ref))
    keep = [i for i in range(len(boxes)) if scores[i] > ev.score_floor]
    if not keep:
        return []
    kept_boxes = [boxes[i] for i in keep]
    kept_scores = scores[keep]
    order = _nms_keep_bev(kept_boxes, kept_scores, ev.final_nms_iou)
    dets = []
    for j in order:
        i = keep[j]
        dets.append(Detection(frame_id=frame.frame_id, box=boxes[i],
                              score=float(scores[i]),
                              proposal_id=int(sel.cell_index[i])))
    return dets


def proposal_checksum(model: ProposalModel) -> str:
    import hashlib
    h = hashlib.sha256()
    for name in sorted(model.mlp.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.mlp.params[name]).tobytes())
    return h.hexdigest()
