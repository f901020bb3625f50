"""Layered detector description, student/teacher builders, forward pass and checkpoints.

The miniature mirrors the backbone / neck / head split of a one-stage
detector at two scales:

    backbone   3 strided 3x3 convs                      (stride 2, 4, 8)
    neck       upsample + concat + fusion conv  (GL)    -> fine map  (H/4)
               strided conv (GL) + concat + fusion (GL) -> coarse map (H/8)
    head       per scale, per branch {cls, box, obj}:
               3x3 conv -> ChannelScale (SSS) -> 1x1 projection

Layer indices double as the position in ``ModelGraph.layers``; index -1
refers to the input image.
"""

from __future__ import annotations

import copy
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArgumentError, DataError, DimensionError, StructuralError

MAGIC = b"GSAK"
FORMAT_VERSION = 1
TOTAL_STRIDE = 8
SCALES = ("coarse", "fine")
BRANCHES = ("cls", "box", "obj")


class Kind(Enum):
    CONV = "Conv"
    UPSAMPLE = "Upsample"
    CONCAT = "Concat"
    DETECT = "DetectHead"
    SCALE = "ChannelScale"


class Role(Enum):
    BACKBONE = "Backbone"
    NECK = "Neck"
    HEAD = "Head"


class Reg(Enum):
    NONE = "None"
    GL = "GL"
    SSS = "SSS"


@dataclass
class LayerSpec:
    index: int
    kind: Kind
    role: Role
    in_channels: int
    out_channels: int
    regularizer: Reg = Reg.NONE
    inputs: tuple[int, ...] = ()
    kernel: int = 1
    stride: int = 1
    factor: int = 1
    act: bool = False
    branch: str = ""
    scale: str = ""

    @property
    def has_weight(self) -> bool:
        return self.kind in (Kind.CONV, Kind.DETECT)


@dataclass
class ScaleOutput:
    class_logits: Tensor
    box: Tensor
    objectness: Tensor


@dataclass
class DetectorOutput:
    scales: dict[str, ScaleOutput]

    def __getitem__(self, scale: str) -> ScaleOutput:
        return self.scales[scale]


@dataclass
class ModelGraph:
    layers: list[LayerSpec]
    num_classes: int
    weights: dict[int, Tensor] = field(default_factory=dict)
    biases: dict[int, Tensor] = field(default_factory=dict)
    scaling: dict[int, Tensor] = field(default_factory=dict)

    @property
    def edges(self) -> dict[int, tuple[int, ...]]:
        return {l.index: l.inputs for l in self.layers}

    def consumers(self, index: int) -> list[int]:
        return [l.index for l in self.layers if index in l.inputs]

    def layers_with(self, regularizer: Reg) -> list[LayerSpec]:
        return [l for l in self.layers if l.regularizer is regularizer]

    def parameters(self):
        """Yield ``(name, tensor, decays)``; scaling factors are exempt from weight decay."""
        for l in self.layers:
            if l.index in self.weights:
                yield f"w{l.index}", self.weights[l.index], True
                yield f"b{l.index}", self.biases[l.index], True
            if l.index in self.scaling:
                yield f"s{l.index}", self.scaling[l.index], False

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def validate(self) -> None:
        out_ch: dict[int, int] = {-1: 3}
        for pos, l in enumerate(self.layers):
            if l.index != pos:
                raise StructuralError(f"layer at position {pos} carries index {l.index}")
            if not l.inputs or any(i >= l.index or i < -1 for i in l.inputs):
                raise StructuralError(f"layer {l.index} inputs {l.inputs} break topological order")
            if l.regularizer is Reg.GL and not (l.role is Role.NECK and l.kind is Kind.CONV):
                raise StructuralError(f"GL layer {l.index} must be a Neck Conv")
            if l.regularizer is Reg.SSS and not (l.role is Role.HEAD and l.kind is Kind.SCALE):
                raise StructuralError(f"SSS layer {l.index} must be a Head ChannelScale")
            fed = sum(out_ch[i] for i in l.inputs)
            if l.kind is Kind.CONCAT:
                if len(l.inputs) < 2 or l.in_channels != fed or l.out_channels != fed:
                    raise StructuralError(f"concat layer {l.index} channel sum mismatch")
            else:
                if len(l.inputs) != 1 or l.in_channels != fed:
                    raise StructuralError(f"layer {l.index} expects {l.in_channels} channels, fed {fed}")
                if l.kind in (Kind.UPSAMPLE, Kind.SCALE) and l.out_channels != l.in_channels:
                    raise StructuralError(f"layer {l.index} must preserve channel count")
            if l.has_weight:
                w = self.weights.get(l.index)
                want = (l.out_channels, l.in_channels, l.kernel, l.kernel)
                if w is None or w.shape != want:
                    raise StructuralError(f"layer {l.index} weight shape {None if w is None else w.shape} != {want}")
                if self.biases[l.index].shape != (l.out_channels,):
                    raise StructuralError(f"layer {l.index} bias shape mismatch")
            if l.kind is Kind.SCALE:
                lam = self.scaling.get(l.index)
                if lam is None or lam.shape != (l.out_channels,):
                    raise StructuralError(f"scale layer {l.index} needs a scaling vector of length {l.out_channels}")
                # surgery only rewires inside a head branch: producer conv feeds this scale alone
                prod = self.layers[l.inputs[0]]
                if prod.kind is not Kind.CONV or self.consumers(prod.index) != [l.index]:
                    raise StructuralError(f"scale layer {l.index} must directly follow a private Conv")
                for c in self.consumers(l.index):
                    if self.layers[c].kind not in (Kind.CONV, Kind.DETECT):
                        raise StructuralError(f"scale layer {l.index} consumer {c} is not a conv")
            out_ch[l.index] = l.out_channels
        heads = {(l.scale, l.branch) for l in self.layers if l.kind is Kind.DETECT}
        if heads != {(s, b) for s in SCALES for b in BRANCHES}:
            raise StructuralError(f"detect heads incomplete: {sorted(heads)}")


# ---------------------------------------------------------------- builders


def _graph(num_classes: int, width: int, multiplier: int, with_scales: bool) -> ModelGraph:
    w = width * multiplier
    layers: list[LayerSpec] = []

    def add(kind, role, inputs, cin, cout, **kw) -> int:
        layers.append(LayerSpec(len(layers), kind, role, cin, cout, inputs=tuple(inputs), **kw))
        return len(layers) - 1

    conv = dict(kernel=3, act=True)
    gl = Reg.GL if with_scales else Reg.NONE
    b0 = add(Kind.CONV, Role.BACKBONE, [-1], 3, w, stride=2, **conv)
    b1 = add(Kind.CONV, Role.BACKBONE, [b0], w, 2 * w, stride=2, **conv)
    b2 = add(Kind.CONV, Role.BACKBONE, [b1], 2 * w, 4 * w, stride=2, **conv)
    up = add(Kind.UPSAMPLE, Role.NECK, [b2], 4 * w, 4 * w, factor=2)
    cat1 = add(Kind.CONCAT, Role.NECK, [up, b1], 6 * w, 6 * w)
    fine = add(Kind.CONV, Role.NECK, [cat1], 6 * w, 2 * w, regularizer=gl, **conv)
    down = add(Kind.CONV, Role.NECK, [fine], 2 * w, 2 * w, stride=2, regularizer=gl, **conv)
    cat2 = add(Kind.CONCAT, Role.NECK, [down, b2], 6 * w, 6 * w)
    coarse = add(Kind.CONV, Role.NECK, [cat2], 6 * w, 4 * w, regularizer=gl, **conv)

    hidden = w
    outs = {"cls": num_classes, "box": 4, "obj": 1}
    for scale, src, cin in (("coarse", coarse, 4 * w), ("fine", fine, 2 * w)):
        for branch in BRANCHES:
            h = add(Kind.CONV, Role.HEAD, [src], cin, hidden, branch=branch, scale=scale, **conv)
            if with_scales:
                h = add(Kind.SCALE, Role.HEAD, [h], hidden, hidden, regularizer=Reg.SSS, branch=branch, scale=scale)
            add(Kind.DETECT, Role.HEAD, [h], hidden, outs[branch], branch=branch, scale=scale)
    return ModelGraph(layers, num_classes)


def init_weights(model: ModelGraph, seed: int = 0) -> ModelGraph:
    """He-normal conv weights, zero biases except detection priors, all scales 1."""
    rng = np.random.default_rng(seed)
    for l in model.layers:
        if l.has_weight:
            fan_in = l.in_channels * l.kernel * l.kernel
            gain = 2.0 if l.act else 1.0
            w = rng.normal(0.0, np.sqrt(gain / fan_in), size=(l.out_channels, l.in_channels, l.kernel, l.kernel))
            b = np.zeros(l.out_channels)
            if l.kind is Kind.DETECT:
                w *= 0.1
                if l.branch == "obj":
                    b[:] = -4.0
                elif l.branch == "cls":
                    b[:] = -2.0
            model.weights[l.index] = Tensor(w, requires_grad=True)
            model.biases[l.index] = Tensor(b, requires_grad=True)
        if l.kind is Kind.SCALE:
            model.scaling[l.index] = Tensor(np.ones(l.out_channels), requires_grad=True)
    return model


def build_student(num_classes: int, width: int, seed: int = 0) -> ModelGraph:
    if num_classes < 1:
        raise ArgumentError(f"num_classes must be >= 1, got {num_classes}")
    if width < 4:
        raise ArgumentError(f"width must be >= 4, got {width}")
    model = init_weights(_graph(num_classes, width, 1, with_scales=True), seed)
    model.validate()
    return model


def build_teacher(num_classes: int, width: int, multiplier: int = 2, seed: int = 0) -> ModelGraph:
    if multiplier < 2:
        raise ArgumentError(f"teacher multiplier must be >= 2, got {multiplier}")
    if num_classes < 1:
        raise ArgumentError(f"num_classes must be >= 1, got {num_classes}")
    if width < 4:
        raise ArgumentError(f"width must be >= 4, got {width}")
    model = init_weights(_graph(num_classes, width, multiplier, with_scales=False), seed)
    model.validate()
    return model


def strip_scales(model: ModelGraph) -> ModelGraph:
    """Same network with every ChannelScale removed and consumers rewired to its producer."""
    remap: dict[int, int] = {-1: -1}
    layers: list[LayerSpec] = []
    out = ModelGraph(layers, model.num_classes)
    for l in model.layers:
        if l.kind is Kind.SCALE:
            remap[l.index] = remap[l.inputs[0]]
            continue
        new = copy.copy(l)
        new.index = len(layers)
        new.inputs = tuple(remap[i] for i in l.inputs)
        layers.append(new)
        remap[l.index] = new.index
        if l.has_weight:
            out.weights[new.index] = model.weights[l.index].copy()
            out.biases[new.index] = model.biases[l.index].copy()
    return out


# ---------------------------------------------------------------- forward


@contextmanager
def _no_tape():
    saved = ad._ACTIVE[:]
    ad._ACTIVE.clear()
    try:
        yield
    finally:
        ad._ACTIVE[:] = saved


def _check_input(images: Tensor) -> None:
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"images must be [N,3,H,W], got {images.shape}")
    for axis in (2, 3):
        if images.shape[axis] % TOTAL_STRIDE:
            raise DimensionError(f"image axis {axis} size {images.shape[axis]} not divisible by {TOTAL_STRIDE}")


def _execute(model: ModelGraph, images: Tensor) -> dict[int, Tensor]:
    acts: dict[int, Tensor] = {-1: images}
    for l in model.layers:
        xs = [acts[i] for i in l.inputs]
        if l.kind in (Kind.CONV, Kind.DETECT):
            y = ad.conv2d(xs[0], model.weights[l.index], model.biases[l.index], l.stride, l.kernel // 2)
            if l.act:
                y = ad.silu(y)
        elif l.kind is Kind.SCALE:
            y = ad.channel_scale(xs[0], model.scaling[l.index])
        elif l.kind is Kind.UPSAMPLE:
            y = ad.upsample_nearest(xs[0], l.factor)
        else:
            y = xs[0]
            for x in xs[1:]:
                y = ad.concat_channels(y, x)
        acts[l.index] = y
    return acts


def activations(model: ModelGraph, images: Tensor, record_tape: bool = False) -> dict[int, Tensor]:
    """Every layer's output keyed by layer index."""
    _check_input(images)
    if record_tape:
        return _execute(model, images)
    with _no_tape():
        return _execute(model, images)


def forward(model: ModelGraph, images: Tensor, record_tape: bool = False) -> DetectorOutput:
    """Run the graph; with ``record_tape`` operations join the caller's active :class:`Tape`."""
    acts = activations(model, images, record_tape)
    found: dict[str, dict[str, Tensor]] = {s: {} for s in SCALES}
    for l in model.layers:
        if l.kind is Kind.DETECT:
            found[l.scale][l.branch] = acts[l.index]
    return DetectorOutput({s: ScaleOutput(d["cls"], d["box"], d["obj"]) for s, d in found.items()})


# ---------------------------------------------------------------- checkpoint

_KINDS = list(Kind)
_ROLES = list(Role)
_REGS = list(Reg)
_BRANCH_CODES = ("",) + BRANCHES
_SCALE_CODES = ("",) + SCALES

_LAYER = struct.Struct("<iBBBBIIBBBBBB")


def _blob(arr: np.ndarray) -> bytes:
    flat = np.ascontiguousarray(arr, dtype="<f4").ravel()
    return struct.pack("<I", flat.size) + flat.tobytes()


def save_checkpoint(model: ModelGraph) -> bytes:
    """Serialize to the GSAK container (little-endian throughout)."""
    parts = [MAGIC, struct.pack("<III", FORMAT_VERSION, model.num_classes, len(model.layers))]
    for l in model.layers:
        parts.append(_LAYER.pack(
            l.index, _KINDS.index(l.kind), _ROLES.index(l.role), _REGS.index(l.regularizer), int(l.act),
            l.in_channels, l.out_channels, l.kernel, l.stride, l.factor,
            _BRANCH_CODES.index(l.branch), _SCALE_CODES.index(l.scale), len(l.inputs)))
        parts.append(struct.pack(f"<{len(l.inputs)}i", *l.inputs))
        if l.index in model.weights:
            parts += [b"\x01", _blob(model.weights[l.index].data), _blob(model.biases[l.index].data)]
        else:
            parts.append(b"\x00")
        if l.index in model.scaling:
            parts += [b"\x01", _blob(model.scaling[l.index].data)]
        else:
            parts.append(b"\x00")
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str):
        s = struct.Struct(fmt)
        if self.pos + s.size > len(self.buf):
            raise DataError("checkpoint truncated")
        vals = s.unpack_from(self.buf, self.pos)
        self.pos += s.size
        return vals

    def blob(self, shape) -> Tensor:
        (n,) = self.take("<I")
        if n != int(np.prod(shape)):
            raise DataError(f"checkpoint blob has {n} values, layer needs shape {shape}")
        (raw,) = self.take(f"<{4 * n}s")
        return Tensor(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32), requires_grad=True)


def load_checkpoint(buf: bytes) -> ModelGraph:
    if buf[:4] != MAGIC:
        raise DataError("not a GSAK checkpoint")
    r = _Reader(buf)
    r.pos = 4
    version, num_classes, n_layers = r.take("<III")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    model = ModelGraph([], num_classes)
    for _ in range(n_layers):
        (idx, kind, role, reg, act, cin, cout, k, s, f, br, sc, nin) = r.take(_LAYER.format)
        inputs = r.take(f"<{nin}i")
        l = LayerSpec(idx, _KINDS[kind], _ROLES[role], cin, cout, _REGS[reg], tuple(inputs),
                      k, s, f, bool(act), _BRANCH_CODES[br], _SCALE_CODES[sc])
        model.layers.append(l)
        if r.take("<B")[0]:
            model.weights[idx] = r.blob((cout, cin, k, k))
            model.biases[idx] = r.blob((cout,))
        if r.take("<B")[0]:
            model.scaling[idx] = r.blob((cout,))
    if r.pos != len(buf):
        raise DataError("trailing bytes after checkpoint")
    model.validate()
    return model


def write_checkpoint(model: ModelGraph, path) -> Path:
    path = Path(path)
    path.write_bytes(save_checkpoint(model))
    return path


def read_checkpoint(path) -> ModelGraph:
    return load_checkpoint(Path(path).read_bytes())
