"""Dense network core: forward/backward passes, probabilistic losses,
optimizers, and bit-exact checkpoints.

Everything is plain numpy float64. Networks are stacks of affine layers
with ReLU and inverted dropout on the hidden layers and a linear output.
Reverse-mode gradients are hand-derived and validated against central
finite differences.

Variance heads predict s = ln(sigma^2), clamped to [-10, 10]. The clamp
floor is treated as the deterministic limit: sample_gaussian returns the
mean exactly (sigma = 0) when s is at or below the floor, so the sampling
path reduces bit-exactly to the mean path when all variances are floored.
"""

from __future__ import annotations

import base64
import json

import numpy as np

from .rng import Rng

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
PROB_EPS = 1e-7

CHECKPOINT_FORMAT = "uncfuse-checkpoint-v1"


def clamp_log_var(s):
    return np.clip(s, LOG_VAR_MIN, LOG_VAR_MAX)


def _logvar_grad_mask(log_var):
    """Derivative of the clamp: 1 strictly inside [-10, 10], 0 at and beyond."""
    lv = np.asarray(log_var, dtype=np.float64)
    return ((lv > LOG_VAR_MIN) & (lv < LOG_VAR_MAX)).astype(np.float64)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


def sample_gaussian(mean, log_var, rng: Rng | None = None, eps=None):
    """Reparameterized draw: value = mean + exp(0.5 s) * eps, eps ~ N(0,1).

    At or below the clamp floor sigma is exactly 0, so value == mean to the
    bit. Gradients: d value/d mean = 1; d value/d s = 0.5 exp(0.5 s) eps
    (zero at the floor). eps is returned so those gradients can flow.
    """
    mean = np.asarray(mean, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    if eps is None:
        if rng is None:
            raise ValueError("sample_gaussian: need rng or eps")
        eps = rng.normal(size=mean.shape) if mean.shape else float(rng.normal())
    eps = np.asarray(eps, dtype=np.float64)
    s = clamp_log_var(log_var)
    value = np.where(log_var > LOG_VAR_MIN, mean + np.exp(0.5 * s) * eps, mean)
    return value, eps


def attenuated_regression_loss(mean, log_var, target):
    """Heteroscedastic regression loss, summed over all elements.

    Per element, with s = ln sigma^2 (clamped) and residual r = t - mu:
        L = 0.5 exp(-s) r^2 + 0.5 s
        dL/dmu = -exp(-s) r
        dL/ds  = -0.5 exp(-s) r^2 + 0.5
    With s frozen at 0 this is exactly 0.5 L2.
    """
    mean = np.asarray(mean, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    s = clamp_log_var(log_var)
    r = target - mean
    inv_var = np.exp(-s)
    loss = float(np.sum(0.5 * inv_var * r * r + 0.5 * s))
    d_mean = -inv_var * r
    d_log_var = (-0.5 * inv_var * r * r + 0.5) * _logvar_grad_mask(log_var)
    return loss, d_mean, d_log_var


def focal_loss(p, label, gamma: float = 2.0, alpha: float = 0.25):
    """-alpha (1 - p_t)^gamma ln(p_t), p clamped to [1e-7, 1 - 1e-7].

    p_t is p for label 1 and 1-p for label 0. gamma = 0, alpha = 1 is plain
    cross-entropy. Returns elementwise loss and dL/dp (zero where the clamp
    is active).
    """
    p = np.asarray(p, dtype=np.float64)
    label = np.asarray(label)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    pos = label == 1
    p_t = np.where(pos, pc, 1.0 - pc)
    one_minus = 1.0 - p_t
    loss = -alpha * one_minus ** gamma * np.log(p_t)
    if gamma == 0.0:
        d_pt = -alpha / p_t
    else:
        d_pt = alpha * (gamma * one_minus ** (gamma - 1.0) * np.log(p_t)
                        - one_minus ** gamma / p_t)
    active = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    d_p = np.where(pos, d_pt, -d_pt) * active
    return loss, d_p


def sampled_logit_classification_loss(logit_mean, logit_log_var, label,
                                      rng: Rng | None = None, eps=None,
                                      gamma: float = 2.0, alpha: float = 0.25):
    """Classification loss through a sampled positive logit.

    The positive-class logit is drawn by reparameterization; the negative
    logit is pinned at 0, so the two-class softmax score is sigmoid(l').
    Focal loss is applied to that score, and gradients flow to both the
    logit mean and its log variance through the sample. Returns
    (elementwise loss, d mean, d log_var, eps).
    """
    logit_mean = np.asarray(logit_mean, dtype=np.float64)
    logit_log_var = np.asarray(logit_log_var, dtype=np.float64)
    logit, eps = sample_gaussian(logit_mean, logit_log_var, rng=rng, eps=eps)
    p = sigmoid(logit)
    loss, d_p = focal_loss(p, label, gamma=gamma, alpha=alpha)
    d_logit = d_p * p * (1.0 - p)
    s = clamp_log_var(logit_log_var)
    d_sigma_path = 0.5 * np.exp(0.5 * s) * np.asarray(eps, dtype=np.float64)
    d_sigma_path = np.where(logit_log_var > LOG_VAR_MIN, d_sigma_path, 0.0)
    d_log_var = d_logit * d_sigma_path * _logvar_grad_mask(logit_log_var)
    return loss, d_logit, d_log_var, eps


class MLP:
    """Affine -> ReLU -> dropout hidden layers, linear output, float64 params."""

    def __init__(self, sizes, dropout: float = 0.0, rng: Rng | None = None,
                 params: dict | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("MLP: need at least input and output sizes")
        self.dropout = float(dropout)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("MLP: dropout must be in [0, 1)")
        self.n_layers = len(self.sizes) - 1
        if params is not None:
            self.params = params
            self._check_shapes()
        else:
            if rng is None:
                rng = Rng(0, "init")
            self.params = {}
            for i in range(self.n_layers):
                fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
                scale = np.sqrt(2.0 / fan_in)
                self.params[f"W{i}"] = scale * rng.normal(size=(fan_in, fan_out))
                self.params[f"b{i}"] = np.zeros(fan_out, dtype=np.float64)

    def _check_shapes(self):
        for i in range(self.n_layers):
            w = self.params[f"W{i}"]
            b = self.params[f"b{i}"]
            want = (self.sizes[i], self.sizes[i + 1])
            if w.shape != want or b.shape != (self.sizes[i + 1],):
                raise ValueError(f"MLP: parameter W{i}/b{i} shape mismatch, want {want}")

    def forward(self, x, train: bool = False, rng: Rng | None = None):
        """Returns (output, cache). Dropout is active only when train=True."""
        a = np.asarray(x, dtype=np.float64)
        squeeze = a.ndim == 1
        if squeeze:
            a = a[None, :]
        if a.shape[1] != self.sizes[0]:
            raise ValueError(f"MLP: input width {a.shape[1]}, expected {self.sizes[0]}")
        cache = {"inputs": [a], "pre": [], "masks": []}
        for i in range(self.n_layers):
            z = a @ self.params[f"W{i}"] + self.params[f"b{i}"]
            cache["pre"].append(z)
            if i < self.n_layers - 1:
                a = np.maximum(z, 0.0)
                if train and self.dropout > 0.0:
                    if rng is None:
                        raise ValueError("MLP: train-mode dropout needs an rng")
                    keep = 1.0 - self.dropout
                    mask = (rng.uniform(size=a.shape) >= self.dropout) / keep
                    a = a * mask
                    cache["masks"].append(mask)
                else:
                    cache["masks"].append(None)
                cache["inputs"].append(a)
            else:
                a = z
        cache["squeeze"] = squeeze
        return (a[0] if squeeze else a), cache

    def backward(self, cache, d_out):
        """Exact reverse-mode gradients; returns (grads dict, d_input)."""
        d = np.asarray(d_out, dtype=np.float64)
        if cache["squeeze"]:
            d = d[None, :]
        grads = {}
        for i in reversed(range(self.n_layers)):
            a_in = cache["inputs"][i]
            grads[f"W{i}"] = a_in.T @ d
            grads[f"b{i}"] = d.sum(axis=0)
            d = d @ self.params[f"W{i}"].T
            if i > 0:
                mask = cache["masks"][i - 1]
                if mask is not None:
                    d = d * mask
                d = d * (cache["pre"][i - 1] > 0.0)
        return grads, (d[0] if cache["squeeze"] else d)

    def spec(self) -> dict:
        return {"sizes": list(self.sizes), "dropout": self.dropout}

    @classmethod
    def from_spec(cls, spec: dict, params: dict) -> "MLP":
        return cls(spec["sizes"], dropout=spec.get("dropout", 0.0), params=params)


class Sgd:
    """SGD with multiplicative step decay and optional heavy-ball momentum.

    momentum = 0 recovers the plain update exactly (no velocity state is
    kept, so the parameter arithmetic is bit-identical to vanilla SGD).
    """

    def __init__(self, lr: float, decay: float = 1.0, decay_every: int = 30000,
                 momentum: float = 0.0):
        self.lr = float(lr)
        self.decay = float(decay)
        self.decay_every = int(decay_every)
        self.momentum = float(momentum)
        self.velocity = {}

    def lr_at(self, step: int) -> float:
        return self.lr * self.decay ** (step // self.decay_every)

    def step(self, params: dict, grads: dict, step_idx: int):
        lr = self.lr_at(step_idx)
        for name in sorted(grads):
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            if self.momentum != 0.0:
                v = self.velocity.get(name)
                if v is None:
                    v = np.zeros_like(g)
                v = self.momentum * v + g
                self.velocity[name] = v
                g = v
            params[name] -= lr * g


class Adam:
    """Adam with bias-corrected moments (beta1 0.9, beta2 0.999, eps 1e-8)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / b1t
            v_hat = self.v[name] / b2t
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape),
            "data": base64.b64encode(a.astype("<f8").tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).copy()


def save_checkpoint(path, arch: dict, params: dict, meta: dict | None = None):
    """Versioned JSON container; floats as little-endian base64 for bit
    exactness, keys sorted so identical models produce identical bytes."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "arch": arch,
        "meta": meta or {},
        "params": {k: _encode_array(v) for k, v in params.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format {doc.get('format')!r}")
    params = {k: _decode_array(v) for k, v in doc["params"].items()}
    return doc["arch"], params, doc.get("meta", {})
