"""ATCN+MDC network assembly, forward pass, and architecture audits.

Data flow for ``L`` layers and ``V`` levels on an ``n``-frame window::

    input 2J x n  --(ncc weights W0)-->  top TCN unit (k1, valid)      -> f1 frames
    for i in 1..L-2:
        weight frames by W_i = sigmoid(theta_t_i^T W_{i-1})
        middle layer i: depthwise valid reduce (k, d) -> kernel attention
                        -> 1x1 aggregation, plus cropped residual     -> f_{i+1}
        level i (< V): dilated unit on the f1 tensor, cropped, added
    bottom: linear C -> 3J on the single remaining frame

Outputs are root-relative millimetres.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autograd as ag
from .attention import (
    KernelAttentionBlock,
    TcnUnit,
    apply_temporal_weights,
    temporal_attention_init,
    temporal_attention_propagate,
)
from .autograd import Param, Tensor
from .errors import ConfigError, InputError
from .strict import from_strict_dict

OUTPUT_SCALE_MM = 100.0
ROOT_JOINT = 0


@dataclass
class ModelConfig:
    layers: int = 4
    levels: int = 2
    joints: int = 17
    kernel_sizes: list[int] | None = None
    dilations: list[int] | None = None
    channels: int = 1024
    branches: int = 3
    groups: int = 8
    reduction: int = 128
    dropout: float = 0.2
    causal: bool = False
    branch_kernel: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kernel_sizes is None:
            self.kernel_sizes = [3] * max(self.layers - 1, 0)
        else:
            self.kernel_sizes = [int(k) for k in self.kernel_sizes]
        if self.dilations is None:
            self.dilations = list(np.cumprod([1] + self.kernel_sizes[:-1]).astype(int).tolist()) if self.kernel_sizes else []
        else:
            self.dilations = [int(d) for d in self.dilations]
        self.validate()

    def validate(self) -> None:
        L, V = self.layers, self.levels
        if L < 2:
            raise ConfigError("need at least 2 layers (top and bottom)")
        if len(self.kernel_sizes) != L - 1 or len(self.dilations) != L - 1:
            raise ConfigError(f"{L} layers need {L - 1} kernel sizes and dilations")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError(f"kernel sizes must be odd and positive: {self.kernel_sizes}")
        if any(d < 1 for d in self.dilations):
            raise ConfigError("dilations must be >= 1")
        if V < 1 or (V > 1 and V > L - 2):
            raise ConfigError(f"levels V={V} must satisfy 1 <= V <= L-2 (L={L})")
        for name in ("joints", "channels", "branches", "groups", "reduction"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.channels % self.groups:
            raise ConfigError(f"channels {self.channels} not divisible by groups {self.groups}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        if self.branch_kernel < 1 or self.branch_kernel % 2 == 0:
            raise ConfigError("branch kernel must be odd")
        frames = stage_frames(self)
        for v in range(1, V):
            span = 2 * 3**v
            if frames[1] - span < frames[v + 1]:
                raise ConfigError(f"level {v} unit (dilation {3**v}) cannot cover stage {v + 1}")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelConfig:
        return from_strict_dict(cls, data, "model")

    @classmethod
    def prototype(cls, name: str, **overrides) -> ModelConfig:
        """Named prototypes ``L4xV2``, ``L5xV3``, ``L6xV4``."""
        presets = {"L4xV2": (4, 2), "L5xV3": (5, 3), "L6xV4": (6, 4)}
        if name not in presets:
            raise ConfigError(f"unknown prototype {name!r}")
        L, V = presets[name]
        return cls(layers=L, levels=V, **overrides)


def stage_frames(config: ModelConfig) -> list[int]:
    """Frame count after each reducing stage, starting with the input window."""
    frames = [receptive_field(config)]
    for k, d in zip(config.kernel_sizes, config.dilations):
        frames.append(frames[-1] - (k - 1) * d)
    return frames


def receptive_field(config: ModelConfig) -> int:
    """Input frames consumed per prediction; equals the product of kernel sizes
    under the default cumulative dilation schedule."""
    return 1 + sum((k - 1) * d for k, d in zip(config.kernel_sizes, config.dilations))


class Model:
    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        C, J = cfg.channels, cfg.joints
        self.frames = stage_frames(cfg)
        self.n = self.frames[0]
        self.align = "right" if cfg.causal else "center"
        self.dropout_p = cfg.dropout
        self.rng: np.random.Generator | None = None

        self.top = TcnUnit("top", 2 * J, C, cfg.kernel_sizes[0], cfg.dilations[0], 1, "valid", rng)
        self.theta_t: list[Param] = []
        self.middle: list[dict[str, Any]] = []
        for i in range(1, cfg.layers - 1):
            k, d = cfg.kernel_sizes[i], cfg.dilations[i]
            f_prev, f_cur = self.frames[i - 1], self.frames[i]
            self.theta_t.append(Param(f"attn.theta_t{i}", rng.normal(0.0, 1.0 / np.sqrt(f_prev), (f_prev, f_cur))))
            self.middle.append(
                {
                    "reduce": TcnUnit(f"mid{i}.reduce", C, C, k, d, C, "valid", rng),
                    "attention": KernelAttentionBlock(
                        f"mid{i}.ka", C, cfg.branches, cfg.groups, cfg.reduction, d, cfg.branch_kernel, cfg.causal, rng
                    ),
                    "aggregate": TcnUnit(f"mid{i}.aggregate", C, C, 1, 1, 1, "valid", rng),
                }
            )
        self.levels = [
            TcnUnit(f"mdc{v}", C, C, 3, 3**v, cfg.groups, "valid", rng) for v in range(1, cfg.levels)
        ]
        bound = 1.0 / np.sqrt(C)
        self.bottom_w = Param("bottom.w", rng.uniform(-bound, bound, (3 * J, C)))
        self.bottom_b = Param("bottom.b", np.zeros(3 * J))

    # -------------------------------------------------------------- params

    def _units(self) -> list[TcnUnit]:
        units = [self.top]
        for layer in self.middle:
            units += [layer["reduce"], *layer["attention"].units, layer["aggregate"]]
        return units + self.levels

    def parameters(self) -> list[Param]:
        params = list(self.top.params())
        for i, layer in enumerate(self.middle):
            params.append(self.theta_t[i])
            params += layer["reduce"].params() + layer["attention"].params() + layer["aggregate"].params()
        for unit in self.levels:
            params += unit.params()
        return params + [self.bottom_w, self.bottom_b]

    def named_parameters(self) -> dict[str, Param]:
        named = {p.name: p for p in self.parameters()}
        assert len(named) == len(self.parameters()), "duplicate parameter names"
        return named

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for u in self._units():
            out.update(u.buffers())
        return out

    def set_buffers(self, bufs: dict[str, np.ndarray]) -> None:
        for u in self._units():
            u.set_buffers(bufs)

    def zero_grad(self) -> None:
        ag.zero_grad(self.parameters())

    # -------------------------------------------------------------- forward

    @property
    def target_index(self) -> int:
        return self.n - 1 if self.config.causal else (self.n - 1) // 2

    def forward_tensor(self, windows: np.ndarray, train: bool = False) -> Tensor:
        """Batch of ``B x n x J x 2`` windows -> ``B x J x 3`` tensor in mm."""
        windows = np.asarray(windows, dtype=float)
        cfg = self.config
        if windows.ndim != 4 or windows.shape[2:] != (cfg.joints, 2):
            raise InputError(f"expected windows of shape B x n x {cfg.joints} x 2, got {windows.shape}")
        B, n = windows.shape[:2]
        if n != self.n:
            raise InputError(f"window has {n} frames; this model needs exactly {self.n}")
        p, rng = self.dropout_p, self.rng
        if train and p > 0 and rng is None:
            self.rng = rng = np.random.default_rng(cfg.seed)

        w = Tensor(temporal_attention_init(windows, self.target_index))
        x = Tensor(windows.reshape(B, n, 2 * cfg.joints).transpose(0, 2, 1))
        h = self.top(apply_temporal_weights(w, x), train, p, rng)
        first = h
        for i, layer in enumerate(self.middle, start=1):
            w = temporal_attention_propagate(w, self.theta_t[i - 1])
            h = apply_temporal_weights(w, h)
            y = layer["reduce"](h, train, p, rng)
            y = layer["attention"](y, train, p, rng)
            y = layer["aggregate"](y, train, p, rng)
            h = ag.add(y, ag.crop_frames(h, y.shape[-1], self.align))
            if i < cfg.levels:
                skip = self.levels[i - 1](first, train, p, rng)
                h = ag.add(h, ag.crop_frames(skip, h.shape[-1], self.align))
        feat = ag.reshape(h, (B, cfg.channels))
        out = ag.mul(ag.linear(feat, self.bottom_w, self.bottom_b), OUTPUT_SCALE_MM)
        out = ag.reshape(out, (B, cfg.joints, 3))
        return ag.sub(out, out[:, ROOT_JOINT : ROOT_JOINT + 1, :])

    def predict(self, windows: np.ndarray, chunk: int = 64) -> np.ndarray:
        """Eval-mode predictions for ``B x n x J x 2`` windows.

        Windows are evaluated in fixed-size chunks (the last one padded), so a
        window's output never depends on how many other windows are present.
        """
        windows = np.asarray(windows, dtype=float)
        out = np.empty((len(windows), self.config.joints, 3))
        for start in range(0, len(windows), chunk):
            part = windows[start : start + chunk]
            m = len(part)
            if m < chunk:
                part = np.concatenate([part, np.repeat(part[-1:], chunk - m, axis=0)])
            out[start : start + m] = self.forward_tensor(part, train=False).data[:m]
        return out

    def forward(self, window: np.ndarray) -> np.ndarray:
        """One ``n x J x 2`` window -> one ``J x 3`` pose (eval mode)."""
        return self.forward_tensor(np.asarray(window)[None], train=False).data[0]

    def causal_forward(self, window: np.ndarray) -> np.ndarray:
        if not self.config.causal:
            raise ConfigError("causal_forward needs a model built with causal=True")
        return self.forward(window)


def build(config: ModelConfig) -> Model:
    return Model(config)


def param_count(model: Model) -> int:
    return int(sum(p.size for p in model.parameters()))


def param_count_for(config: ModelConfig) -> int:
    """Parameter count of ``build(config)`` without allocating the weights."""
    C, J, M, G, r = config.channels, config.joints, config.branches, config.groups, config.reduction
    k_b = config.branch_kernel
    frames = stage_frames(config)
    total = 2 * J * C * config.kernel_sizes[0] + 2 * C
    for i in range(1, config.layers - 1):
        total += frames[i - 1] * frames[i]  # theta_t
        total += C * config.kernel_sizes[i] + 2 * C  # depthwise reduce
        total += M * (C * (C // G) * k_b + 2 * C)  # branches
        total += r * C + M * C * r  # theta_r, theta_m
        total += C * C + 2 * C  # aggregate
    total += (config.levels - 1) * (C * (C // G) * 3 + 2 * C)
    total += 3 * J * C + 3 * J
    return total
