"""SGD with momentum, cosine annealing, the detection loss and a generic epoch loop."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, Tape, Tensor
from .data import DetectionSample
from .errors import ArgumentError, DataError, NumericError, TrainingError
from .model import DetectorOutput, ModelGraph, forward

SMALL_BOX_AREA = 0.05
LOSS_WEIGHTS = {"obj": 1.0, "cls": 1.0, "box": 5.0}


@dataclass
class SGDConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_min: float = 0.0
    cosine_total: int = 1
    clip_norm: float = 10.0  # global gradient-norm ceiling; 0 disables

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.clip_norm < 0:
            raise ArgumentError("need lr > 0, momentum in [0, 1) and clip_norm >= 0")


def cosine_lr(epoch: int, cfg: SGDConfig) -> float:
    if not 0 <= epoch <= cfg.cosine_total:
        raise ArgumentError(f"epoch {epoch} outside [0, {cfg.cosine_total}]")
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * epoch / cfg.cosine_total))


def sgd_step(model: ModelGraph, cfg: SGDConfig, velocity: dict[str, np.ndarray], lr: float | None = None) -> dict:
    """v <- mu v + (g + wd w);  w <- w - lr v. Scaling factors get no weight decay.

    With ``clip_norm > 0`` the raw gradients are first rescaled so their global
    L2 norm does not exceed it.
    """
    lr = cfg.lr if lr is None else lr
    live = [(name, t, decays) for name, t, decays in model.parameters() if t.requires_grad]
    for name, t, _ in live:
        if t.grad is None:
            raise TrainingError(f"parameter {name} has no gradient")
    clip = 1.0
    if cfg.clip_norm > 0:
        norm = math.sqrt(sum(float(np.square(t.grad, dtype=np.float64).sum()) for _, t, _ in live))
        if norm > cfg.clip_norm:
            clip = cfg.clip_norm / norm
    for name, t, decays in live:
        grad = t.grad * DTYPE(clip) if clip != 1.0 else t.grad
        g = grad + cfg.weight_decay * t.data if decays and cfg.weight_decay else grad
        v = velocity.get(name)
        v = g.astype(DTYPE) if v is None or v.shape != g.shape else cfg.momentum * v + g
        velocity[name] = v
        t.data -= DTYPE(lr) * v
    return velocity


# ---------------------------------------------------------------- detection loss


@dataclass
class ScaleTargets:
    obj: np.ndarray      # [N,1,H,W]
    cls: np.ndarray      # [N,C,H,W]
    box: np.ndarray      # [N,4,H,W]
    pos: np.ndarray      # [N,1,H,W] bool


def build_targets(batch: Sequence[DetectionSample], shapes: dict[str, tuple[int, int]], num_classes: int):
    """Center-cell assignment: area < 0.05 goes to the fine grid, the rest to the coarse one."""
    n = len(batch)
    out = {s: ScaleTargets(np.zeros((n, 1, h, w), DTYPE), np.zeros((n, num_classes, h, w), DTYPE),
                           np.zeros((n, 4, h, w), DTYPE), np.zeros((n, 1, h, w), bool))
           for s, (h, w) in shapes.items()}
    for b, sample in enumerate(batch):
        sample.validate(num_classes)
        for (cx, cy, bw, bh), lab in zip(sample.boxes, sample.labels):
            t = out["fine" if bw * bh < SMALL_BOX_AREA else "coarse"]
            gh, gw = t.obj.shape[2:]
            j, i = min(int(cx * gw), gw - 1), min(int(cy * gh), gh - 1)
            t.obj[b, 0, i, j] = 1.0
            t.pos[b, 0, i, j] = True
            t.cls[b, :, i, j] = 0.0
            t.cls[b, lab, i, j] = 1.0
            t.box[b, :, i, j] = (cx * gw - j, cy * gh - i, math.log(bw * gw), math.log(bh * gh))
    return out


def detection_loss(output: DetectorOutput, batch: Sequence[DetectionSample], obj_pos_weight: float = 10.0):
    """BCE objectness over every cell + BCE classes and smooth-L1 boxes on assigned cells, 1:1:5.

    Returns ``(loss, parts)`` where ``parts`` holds the unweighted component values.
    """
    if not batch:
        raise DataError("detection_loss needs a nonempty batch")
    shapes = {s: o.objectness.shape[2:] for s, o in output.scales.items()}
    num_classes = next(iter(output.scales.values())).class_logits.shape[1]
    targets = build_targets(batch, shapes, num_classes)
    n_cells = sum(t.obj.size for t in targets.values())
    n_pos = max(1, sum(int(t.pos.sum()) for t in targets.values()))
    obj = cls = box = None
    for s, o in output.scales.items():
        t = targets[s]
        w_obj = np.where(t.pos, obj_pos_weight, 1.0).astype(DTYPE) / n_cells
        term = ad.bce_with_logits(o.objectness, t.obj, w_obj)
        obj = term if obj is None else obj + term
        if not t.pos.any():
            continue
        w_cls = np.broadcast_to(t.pos, t.cls.shape).astype(DTYPE) / (n_pos * num_classes)
        term = ad.bce_with_logits(o.class_logits, t.cls, w_cls)
        cls = term if cls is None else cls + term
        xy = ad.sigmoid(o.box[:, :2])
        wh = o.box[:, 2:]
        w_box = np.broadcast_to(t.pos, (t.pos.shape[0], 2) + t.pos.shape[2:]).astype(DTYPE) / (n_pos * 4)
        term = ad.smooth_l1(xy, t.box[:, :2], w_box) + ad.smooth_l1(wh, t.box[:, 2:], w_box)
        box = term if box is None else box + term
    parts = {"obj": obj.item(), "cls": 0.0 if cls is None else cls.item(), "box": 0.0 if box is None else box.item()}
    loss = obj * LOSS_WEIGHTS["obj"]
    if cls is not None:
        loss = loss + cls * LOSS_WEIGHTS["cls"] + box * LOSS_WEIGHTS["box"]
    return loss, parts


# ---------------------------------------------------------------- loop


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def stack_images(samples: Sequence[DetectionSample]) -> Tensor:
    return Tensor(np.stack([s.image for s in samples]))


def check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}: {value}")


def train_epoch(model: ModelGraph, samples: Sequence[DetectionSample], lr: float, sgd: SGDConfig,
                velocity: dict, rng: np.random.Generator, batch_size: int = 16,
                extra_loss: Callable[[Tensor, DetectorOutput], Tensor] | None = None,
                after_backward: Callable[[ModelGraph], None] | None = None) -> dict[str, float]:
    """One pass over ``samples``; returns per-batch mean losses.

    ``extra_loss(images, output)`` may add terms on the tape (distillation);
    ``after_backward(model)`` may add explicit penalty gradients.
    """
    sums: dict[str, float] = {}
    count = 0
    for idx in batches(len(samples), batch_size, rng):
        batch = [samples[i] for i in idx]
        x = stack_images(batch)
        with Tape() as tape:
            out = forward(model, x, record_tape=True)
            det, parts = detection_loss(out, batch)
            total = det
            if extra_loss is not None:
                extra = extra_loss(x, out)
                parts["kd"] = extra.item()
                total = det + extra
        parts["det"] = det.item()
        parts["total"] = total.item()
        check_finite(parts["total"], "loss")
        for _, t, _ in model.parameters():
            t.grad = None
        tape.backward(total)
        for name, t, _ in model.parameters():
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
        if after_backward is not None:
            after_backward(model)
        sgd_step(model, sgd, velocity, lr)
        for k, v in parts.items():
            sums[k] = sums.get(k, 0.0) + v
        count += 1
    return {k: v / max(count, 1) for k, v in sums.items()}
