"""Temporal attention over frames and kernel attention over dilation branches."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Param, Tensor
from .errors import ConfigError, InputError, ShapeError


def _centered(pose: np.ndarray) -> np.ndarray:
    # subtract the per-axis centroid, then flatten to a 2J vector
    return (pose - pose.mean(axis=-2, keepdims=True)).reshape(*pose.shape[:-2], -1)


def ncc(p_i: np.ndarray, p_t: np.ndarray) -> float:
    """Positive cosine similarity between two centered 2-D poses, in [0, 1]."""
    p_i, p_t = np.asarray(p_i, dtype=float), np.asarray(p_t, dtype=float)
    if p_i.shape != p_t.shape:
        raise ShapeError(f"ncc: pose shapes differ {p_i.shape} vs {p_t.shape}")
    a, b = _centered(p_i), _centered(p_t)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), 0.0, 1.0))


def temporal_attention_init(window: np.ndarray, target: int) -> np.ndarray:
    """Layer-0 weights: ncc of every frame against the target frame.

    Accepts ``n x J x 2`` or a batch ``B x n x J x 2``; returns ``n`` or ``B x n``.
    """
    window = np.asarray(window, dtype=float)
    if window.ndim < 3 or window.shape[-3] == 0:
        raise InputError("temporal attention needs a non-empty window of poses")
    n = window.shape[-3]
    if not 0 <= target < n:
        raise InputError(f"target index {target} outside window of {n}")
    vecs = _centered(window)  # (..., n, 2J)
    tgt = vecs[..., target : target + 1, :]
    dots = (vecs * tgt).sum(axis=-1)
    norms = np.linalg.norm(vecs, axis=-1) * np.linalg.norm(tgt, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(norms > 0, dots / np.where(norms > 0, norms, 1.0), 0.0)
    return np.clip(cos, 0.0, 1.0)


def temporal_attention_propagate(w_prev, theta: Tensor) -> Tensor:
    """``sigmoid(theta^T w_prev)`` for one vector or row-wise over a batch."""
    w_prev = ag.as_tensor(w_prev)
    if theta.data.ndim != 2 or w_prev.shape[-1] != theta.shape[0]:
        raise ShapeError(f"temporal attention: weights of length {w_prev.shape[-1]} vs theta {theta.shape}")
    return ag.sigmoid(ag.matmul(w_prev, theta))


def apply_temporal_weights(w, t: Tensor) -> Tensor:
    """Scale frame ``u`` of ``t`` (``[B x] C x F``) by weight ``u``."""
    w = ag.as_tensor(w)
    if w.shape[-1] != t.shape[-1]:
        raise ShapeError(f"{w.shape[-1]} temporal weights for {t.shape[-1]} frames")
    if t.data.ndim == 3:
        w = ag.reshape(w, (w.shape[0] if w.data.ndim == 2 else 1, 1, w.shape[-1]))
    return ag.mul(t, w)


def kernel_attention(branches: list[Tensor], theta_r: Tensor, theta_m: Tensor) -> tuple[Tensor, Tensor]:
    """Fuse branch tensors (each ``B x C x F``) with channel-wise softmax gates.

    ``theta_r`` is ``r x C``; ``theta_m`` stacks the M matrices as ``M x C x r``.
    Returns the fused tensor and the ``B x M x C`` branch weights.
    """
    m = len(branches)
    if m == 0:
        raise ConfigError("kernel attention needs at least one branch")
    shape = branches[0].shape
    if any(b.shape != shape for b in branches):
        raise ConfigError(f"branch outputs disagree in shape: {[b.shape for b in branches]}")
    c = shape[1]
    if theta_r.shape[1] != c or theta_m.shape[:2] != (m, c) or theta_m.shape[2] != theta_r.shape[0]:
        raise ConfigError(f"kernel attention params {theta_r.shape}, {theta_m.shape} do not fit {m} branches of {c} channels")
    stacked = ag.stack(branches, axis=1)  # B x M x C x F
    fused = ag.tsum(stacked, axis=1)  # B x C x F
    stats = ag.global_average_pool(fused)  # B x C
    reduced = ag.linear(stats, theta_r)  # B x r
    # logits[b, m, c] = sum_r theta_m[m, c, r] * reduced[b, r]
    logits = ag.matmul(ag.reshape(reduced, (reduced.shape[0], 1, 1, -1)), ag.transpose(theta_m, (0, 2, 1)))
    logits = ag.reshape(logits, (reduced.shape[0], m, c))
    weights = ag.softmax(logits, axis=1)
    gated = ag.mul(stacked, ag.reshape(weights, (weights.shape[0], m, c, 1)))
    return ag.tsum(gated, axis=1), weights


class TcnUnit:
    """conv -> batch norm -> relu -> dropout."""

    def __init__(self, name, c_in, c_out, kernel, dilation, groups, padding, rng):
        fan_in = (c_in // groups) * kernel
        bound = np.sqrt(6.0 / fan_in)
        self.w = Param(f"{name}.w", rng.uniform(-bound, bound, (c_out, c_in // groups, kernel)))
        self.gamma = Param(f"{name}.bn.gamma", np.ones(c_out))
        self.beta = Param(f"{name}.bn.beta", np.zeros(c_out))
        self.bn = ag.BatchNormState(c_out)
        self.name = name
        self.dilation, self.groups, self.padding = dilation, groups, padding

    def params(self) -> list[Param]:
        return [self.w, self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.bn.mean": self.bn.running_mean, f"{self.name}.bn.var": self.bn.running_var}

    def set_buffers(self, bufs: dict[str, np.ndarray]) -> None:
        self.bn.running_mean = bufs[f"{self.name}.bn.mean"].copy()
        self.bn.running_var = bufs[f"{self.name}.bn.var"].copy()

    def __call__(self, x: Tensor, train: bool, p: float, rng) -> Tensor:
        y = ag.conv1d_dilated(x, self.w, None, self.dilation, self.groups, self.padding)
        y = ag.batch_norm(y, self.gamma, self.beta, self.bn, train)
        return ag.dropout(ag.relu(y), p, train, rng)


class KernelAttentionBlock:
    """M dilated branches fused by learned channel-wise softmax weights.

    Branch ``m`` (1-based) uses dilation ``m * base_dilation``; padding keeps
    the frame count so the branch outputs can be summed.
    """

    def __init__(self, name, channels, branches, groups, reduction, base_dilation, kernel, causal, rng):
        padding = "causal" if causal else "same"
        self.units = [
            TcnUnit(f"{name}.branch{m}", channels, channels, kernel, m * base_dilation, groups, padding, rng)
            for m in range(1, branches + 1)
        ]
        self.theta_r = Param(f"{name}.theta_r", rng.normal(0.0, 1.0 / np.sqrt(channels), (reduction, channels)))
        self.theta_m = Param(f"{name}.theta_m", rng.normal(0.0, 1.0 / np.sqrt(reduction), (branches, channels, reduction)))
        self.last_weights: np.ndarray | None = None

    def params(self) -> list[Param]:
        out = [p for u in self.units for p in u.params()]
        return out + [self.theta_r, self.theta_m]

    def __call__(self, x: Tensor, train: bool, p: float, rng) -> Tensor:
        outs = [u(x, train, p, rng) for u in self.units]
        fused, weights = kernel_attention(outs, self.theta_r, self.theta_m)
        self.last_weights = weights.data
        return fused
