"""Soft (group lasso) and hard (scaling-factor L1) sparsity terms and their schedules."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import DTYPE, Tensor
from .errors import ArgumentError, ConfigError
from .model import Kind, ModelGraph, Reg, Role, activations


@dataclass
class GLConfig:
    beta: float = 1e-4
    epsilon: float = 1e-8
    target_layers: tuple[int, ...] | None = None  # None: every GL-tagged layer

    def targets(self, model: ModelGraph) -> list[int]:
        if self.target_layers is None:
            return [l.index for l in model.layers_with(Reg.GL)]
        return list(self.target_layers)


@dataclass(frozen=True)
class FixedTau:
    value: float = 0.001


@dataclass(frozen=True)
class PercentileTau:
    ratio: float

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"percentile ratio must lie in (0, 1), got {self.ratio}")


@dataclass
class SSSConfig:
    gamma_target: float = 1e-3
    warmup_epochs: int = 10
    ramp_epochs: int = 40
    tau_mode: FixedTau | PercentileTau = field(default_factory=FixedTau)
    tau_default: float = 0.001
    min_channels: int = 2

    def __post_init__(self):
        if self.warmup_epochs < 0 or self.ramp_epochs < 1 or self.min_channels < 1:
            raise ConfigError("need warmup_epochs >= 0, ramp_epochs >= 1, min_channels >= 1")
        if self.gamma_target < 0:
            raise ConfigError("gamma_target must be nonnegative")


# ---------------------------------------------------------------- group lasso


def _gl_layer(model: ModelGraph, index: int):
    if index < 0 or index >= len(model.layers):
        raise ConfigError(f"GL target layer {index} does not exist")
    layer = model.layers[index]
    if layer.kind is not Kind.CONV:
        raise ConfigError(f"GL target layer {index} is {layer.kind.value}, not Conv")
    return model.weights[index].data


def group_norms(weight: np.ndarray) -> np.ndarray:
    """L2 norm of each output channel's full (Cin*K*K) weight vector."""
    flat = weight.reshape(weight.shape[0], -1).astype(np.float64)
    return np.sqrt((flat * flat).sum(axis=1))


def gl_penalty(model: ModelGraph, cfg: GLConfig) -> float:
    total = 0.0
    for idx in cfg.targets(model):
        total += float(group_norms(_gl_layer(model, idx)).sum())
    return cfg.beta * total


def gl_gradient(weights_g, beta: float, epsilon: float = 1e-8):
    """beta * w / (||w|| + eps) for one channel group; zero vector maps to zero."""
    if epsilon <= 0:
        raise ArgumentError("epsilon must be positive")
    w = weights_g.data if isinstance(weights_g, Tensor) else np.asarray(weights_g, dtype=DTYPE)
    norm = math.sqrt(float((w.astype(np.float64) ** 2).sum()))
    g = (beta * w.astype(np.float64) / (norm + epsilon)).astype(DTYPE)
    return Tensor(g)


def gl_layer_gradient(weight: np.ndarray, beta: float, epsilon: float = 1e-8) -> np.ndarray:
    """Row-wise :func:`gl_gradient` over every output channel of a conv weight."""
    norms = group_norms(weight)
    scale = beta / (norms + epsilon)
    return (weight.astype(np.float64) * scale.reshape((-1,) + (1,) * (weight.ndim - 1))).astype(DTYPE)


def add_gl_gradients(model: ModelGraph, cfg: GLConfig) -> None:
    """Accumulate the penalty gradient into ``.grad`` of every target weight."""
    for idx in cfg.targets(model):
        w = model.weights[idx]
        _gl_layer(model, idx)
        g = gl_layer_gradient(w.data, cfg.beta, cfg.epsilon)
        w.grad = g if w.grad is None else w.grad + g


# ---------------------------------------------------------------- scaling factors


def sss_penalty(model: ModelGraph, gamma: float) -> float:
    if gamma < 0:
        raise ArgumentError("gamma must be nonnegative")
    total = sum(float(np.abs(model.scaling[l.index].data.astype(np.float64)).sum())
                for l in model.layers_with(Reg.SSS))
    return gamma * total


def sss_subgradient(lambda_val, gamma: float):
    """gamma * sign(lambda), choosing 0 at lambda == 0. Works elementwise on arrays."""
    if np.ndim(lambda_val) == 0:
        return gamma * float(np.sign(lambda_val))
    return (gamma * np.sign(lambda_val)).astype(DTYPE)


def add_sss_subgradients(model: ModelGraph, gamma: float) -> None:
    for l in model.layers_with(Reg.SSS):
        lam = model.scaling[l.index]
        g = sss_subgradient(lam.data, gamma)
        lam.grad = g if lam.grad is None else lam.grad + g


def gamma_schedule(epoch: int, cfg: SSSConfig) -> float:
    """Zero through warmup, then a linear ramp to ``gamma_target`` over ``ramp_epochs``."""
    if epoch < 0:
        raise ArgumentError(f"epoch must be >= 0, got {epoch}")
    if epoch < cfg.warmup_epochs:
        return 0.0
    done = epoch - cfg.warmup_epochs
    if done >= cfg.ramp_epochs:
        return cfg.gamma_target
    return cfg.gamma_target * done / cfg.ramp_epochs


def scaling_pool(model: ModelGraph) -> np.ndarray:
    layers = model.layers_with(Reg.SSS)
    if not layers:
        return np.zeros(0)
    return np.concatenate([np.abs(model.scaling[l.index].data.astype(np.float64)) for l in layers])


def select_tau(model: ModelGraph, mode: FixedTau | PercentileTau) -> float:
    if isinstance(mode, FixedTau):
        if mode.value <= 0:
            raise ConfigError("fixed tau must be positive")
        return float(mode.value)
    pool = np.sort(scaling_pool(model))
    if pool.size == 0:
        raise ConfigError("no scaling factors to take a percentile of")
    tau = float(pool[int(math.floor(mode.ratio * (pool.size - 1)))])
    # a zero percentile would prune nothing under the strict < rule
    return tau if tau > 0 else float(np.finfo(DTYPE).tiny)


# ---------------------------------------------------------------- redundancy


@dataclass
class LayerRedundancy:
    layer_index: int
    role: str
    channels: int
    high_corr_ratio: float
    redundancy_score: float
    constant_channels: int = 0


@dataclass
class RedundancyReport:
    layers: list[LayerRedundancy]

    def mean_score(self, role: str) -> float:
        vals = [l.redundancy_score for l in self.layers if l.role == role]
        return float(np.mean(vals)) if vals else 0.0

    def to_json(self) -> str:
        return json.dumps([asdict(l) for l in self.layers], indent=2)

    def to_table(self) -> str:
        rows = [("group", "layer", "channels", "high_corr_ratio", "redundancy_score")]
        rows += [(l.role, str(l.layer_index), str(l.channels), f"{l.high_corr_ratio:.3f}",
                  f"{l.redundancy_score:.3f}") for l in self.layers]
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


def channel_redundancy(act: np.ndarray, threshold: float = 0.9) -> tuple[float, float, int]:
    """(high-correlation pair fraction, mean max |rho|, constant channel count) for [N,C,...] activations."""
    c = act.shape[1]
    x = np.moveaxis(np.asarray(act, dtype=np.float64), 1, 0).reshape(c, -1)
    x = x - x.mean(axis=1, keepdims=True)
    std = np.sqrt((x * x).mean(axis=1))
    const = std <= 1e-12 * max(1.0, float(np.abs(x).max(initial=0.0)))
    if c < 2:
        return 0.0, 0.0, int(const.sum())
    safe = np.where(const, 1.0, std)
    z = x / safe[:, None]
    rho = np.abs(z @ z.T) / x.shape[1]
    rho[const, :] = 0.0
    rho[:, const] = 0.0
    np.fill_diagonal(rho, 0.0)
    rho = np.minimum(rho, 1.0)
    iu = np.triu_indices(c, k=1)
    high = float((rho[iu] > threshold).mean())
    score = float(rho.max(axis=1).mean())
    return high, score, int(const.sum())


def analysed_layers(model: ModelGraph) -> list[int]:
    """Neck convs and the hidden (pre-projection) convs of every head branch."""
    return [l.index for l in model.layers
            if l.kind is Kind.CONV and l.role in (Role.NECK, Role.HEAD)]


def redundancy_analysis(model: ModelGraph, calibration_batch: Tensor, threshold: float = 0.9) -> RedundancyReport:
    acts = activations(model, calibration_batch)
    out = []
    for idx in analysed_layers(model):
        high, score, const = channel_redundancy(acts[idx].data, threshold)
        layer = model.layers[idx]
        out.append(LayerRedundancy(idx, layer.role.value, layer.out_channels, high, score, const))
    return RedundancyReport(out)
