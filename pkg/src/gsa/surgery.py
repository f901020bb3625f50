"""Turn learned channel scales into a pruning plan, cut the channels out, count the cost."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, conv_out_size
from .errors import ArgumentError, StructuralError
from .model import Kind, ModelGraph, Reg, strip_scales


@dataclass
class LayerPlan:
    layer_index: int
    kept: list[int]
    removed: list[int]
    tau_used: float


@dataclass
class PruningPlan:
    layers: list[LayerPlan] = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not any(p.removed for p in self.layers)

    @property
    def n_removed(self) -> int:
        return sum(len(p.removed) for p in self.layers)

    def to_json(self) -> str:
        return json.dumps([asdict(p) for p in self.layers], indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PruningPlan":
        return cls([LayerPlan(d["layer_index"], list(d["kept"]), list(d["removed"]), float(d["tau_used"]))
                    for d in json.loads(text)])


def make_plan(model: ModelGraph, tau: float, min_channels: int = 2) -> PruningPlan:
    """Remove channels with |lambda| < tau, never leaving fewer than max(min_channels, 2).

    When the floor binds, the largest-|lambda| victims are spared; among equal
    magnitudes the lower channel index goes first.
    """
    if tau <= 0:
        raise ArgumentError("tau must be positive")
    plan = PruningPlan()
    for layer in model.layers_with(Reg.SSS):
        mag = np.abs(model.scaling[layer.index].data)
        n = mag.size
        floor = min(n, max(min_channels, 2))
        victims = sorted((c for c in range(n) if mag[c] < tau), key=lambda c: (mag[c], c))
        removed = sorted(victims[: max(0, n - floor)])
        kept = sorted(set(range(n)) - set(removed))
        plan.layers.append(LayerPlan(layer.index, kept, removed, float(tau)))
    return plan


def apply_plan(model: ModelGraph, plan: PruningPlan) -> ModelGraph:
    """Fresh graph with removed channels cut from producer rows, scales and consumer columns."""
    new = model.copy()
    for p in plan.layers:
        if p.layer_index >= len(new.layers) or new.layers[p.layer_index].regularizer is not Reg.SSS:
            raise StructuralError(f"plan layer {p.layer_index} is not an SSS layer of this model")
        layer = new.layers[p.layer_index]
        if sorted(p.kept + p.removed) != list(range(layer.out_channels)):
            raise StructuralError(f"plan for layer {p.layer_index} does not partition its {layer.out_channels} channels")
        if not p.removed:
            continue
        keep = np.asarray(p.kept)
        prod = new.layers[layer.inputs[0]]
        new.weights[prod.index] = Tensor(new.weights[prod.index].data[keep], requires_grad=True)
        new.biases[prod.index] = Tensor(new.biases[prod.index].data[keep], requires_grad=True)
        prod.out_channels = len(keep)
        new.scaling[layer.index] = Tensor(new.scaling[layer.index].data[keep], requires_grad=True)
        layer.in_channels = layer.out_channels = len(keep)
        for c in new.consumers(layer.index):
            cons = new.layers[c]
            new.weights[c] = Tensor(new.weights[c].data[:, keep], requires_grad=True)
            cons.in_channels = len(keep)
    new.validate()
    return new


def mask_plan(model: ModelGraph, plan: PruningPlan) -> ModelGraph:
    """Copy of ``model`` with every removed channel's scale forced to zero."""
    masked = model.copy()
    for p in plan.layers:
        masked.scaling[p.layer_index].data[p.removed] = 0.0
    return masked


def fold_scales(model: ModelGraph) -> ModelGraph:
    """Export form: multiply each scale into its consumers' input columns and drop the scale layers."""
    folded = model.copy()
    for layer in folded.layers_with(Reg.SSS):
        lam = folded.scaling[layer.index].data
        for c in folded.consumers(layer.index):
            folded.weights[c].data *= lam[None, :, None, None]
    return strip_scales(folded)


# ---------------------------------------------------------------- complexity


@dataclass
class LayerCost:
    layer_index: int
    kind: str
    role: str
    params: int
    flops: int
    out_shape: tuple[int, int, int]


@dataclass
class ComplexityReport:
    params: int
    flops: int
    per_layer: list[LayerCost]

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def to_json(self) -> str:
        d = {"params": self.params, "flops": self.flops, "gflops": self.gflops,
             "per_layer": [asdict(l) for l in self.per_layer]}
        return json.dumps(d, indent=2)

    def to_table(self) -> str:
        rows = [("layer", "kind", "role", "out_shape", "params", "flops")]
        rows += [(str(l.layer_index), l.kind, l.role, "x".join(map(str, l.out_shape)), str(l.params), str(l.flops))
                 for l in self.per_layer]
        rows.append(("total", "", "", "", str(self.params), str(self.flops)))
        widths = [max(len(r[i]) for r in rows) for i in range(6)]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


def conv_flops(kernel: int, cin: int, cout: int, hout: int, wout: int) -> int:
    return 2 * kernel * kernel * cin * cout * hout * wout


def flops_count(model: ModelGraph, input_shape=(3, 64, 64)) -> ComplexityReport:
    """Per-image forward cost, one multiply-add counted as two FLOPs."""
    c, h, w = input_shape[-3:]
    shapes = {-1: (c, h, w)}
    per_layer = []
    for l in model.layers:
        _, hi, wi = shapes[l.inputs[0]]
        params = flops = 0
        if l.kind in (Kind.CONV, Kind.DETECT):
            ho, wo = conv_out_size(hi, l.kernel, l.stride, l.kernel // 2), conv_out_size(wi, l.kernel, l.stride, l.kernel // 2)
            flops = conv_flops(l.kernel, l.in_channels, l.out_channels, ho, wo)
            params = model.weights[l.index].size + model.biases[l.index].size
        elif l.kind is Kind.SCALE:
            ho, wo = hi, wi
            flops = ho * wo * l.out_channels
            params = model.scaling[l.index].size
        elif l.kind is Kind.UPSAMPLE:
            ho, wo = hi * l.factor, wi * l.factor
        else:
            ho, wo = hi, wi
        shapes[l.index] = (l.out_channels, ho, wo)
        per_layer.append(LayerCost(l.index, l.kind.value, l.role.value, params, flops, shapes[l.index]))
    return ComplexityReport(sum(p.params for p in per_layer), sum(p.flops for p in per_layer), per_layer)
