"""Synthetic occluded-shapes detection data and its on-disk layout.

Layout of a dataset directory::

    annotations.jsonl      {"image": "images/000000.gsai", "boxes": [[cx,cy,w,h],...], "labels": [...]}
    images/000000.gsai     16-byte header + little-endian float32 CHW pixels

Header: magic ``GSAI``, u32 dtype code (1 = f32), u16 C, u16 H, u16 W, u16 reserved.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ArgumentError, DataError

IMAGE_MAGIC = b"GSAI"
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sIHHHH")

MAX_CLASSES = 8
TINTS = (np.array([0.95, 0.55, 0.2]), np.array([0.25, 0.6, 0.95]))
SHAPES = ("box", "disc", "ring", "cross")


@dataclass
class DetectionSample:
    image: np.ndarray    # [3, H, W] float32 in [0, 1]
    boxes: np.ndarray    # [k, 4] normalized (cx, cy, w, h)
    labels: np.ndarray   # [k] int

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise DataError("boxes and labels differ in length")

    def validate(self, num_classes: int | None = None) -> None:
        b = self.boxes
        if b.size:
            x0, x1 = b[:, 0] - b[:, 2] / 2, b[:, 0] + b[:, 2] / 2
            y0, y1 = b[:, 1] - b[:, 3] / 2, b[:, 1] + b[:, 3] / 2
            tol = 1e-9
            if (b[:, 2:] <= 0).any() or x0.min() < -tol or y0.min() < -tol or x1.max() > 1 + tol or y1.max() > 1 + tol:
                raise DataError("box outside the unit square")
        if num_classes is not None and self.labels.size and (self.labels.max() >= num_classes or self.labels.min() < 0):
            raise DataError(f"label outside [0, {num_classes})")


def _draw(img: np.ndarray, shape: str, x0: int, y0: int, x1: int, y1: int, color: np.ndarray) -> None:
    h, w = y1 - y0, x1 - x0
    yy, xx = np.mgrid[0:h, 0:w]
    if shape == "box":
        mask = np.ones((h, w), bool)
    elif shape == "disc":
        mask = ((xx + 0.5 - w / 2) / (w / 2)) ** 2 + ((yy + 0.5 - h / 2) / (h / 2)) ** 2 <= 1.0
    elif shape == "ring":
        t = max(1, min(h, w) // 4)
        mask = np.ones((h, w), bool)
        mask[t:h - t, t:w - t] = False
    else:
        ty, tx = max(1, h // 4), max(1, w // 4)
        mask = (np.abs(yy + 0.5 - h / 2) < ty) | (np.abs(xx + 0.5 - w / 2) < tx)
    region = img[:, y0:y1, x0:x1]
    region[:, mask] = color[:, None]


def _iou_xyxy(a, b) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union else 0.0


def _sample(rng: np.random.Generator, num_classes: int, size: int) -> DetectionSample:
    yy, xx = np.mgrid[0:size, 0:size] / size
    gx, gy = rng.uniform(-0.15, 0.15, 2)
    base = 0.15 + gx * xx + gy * yy
    img = np.clip(base + rng.normal(0, 0.04, (3, size, size)), 0, 1)

    placed: list[tuple[int, int, int, int]] = []
    labels: list[int] = []
    for _ in range(int(rng.integers(1, 5))):
        cls = int(rng.integers(num_classes))
        for _attempt in range(20):
            bw = int(rng.integers(int(0.12 * size), int(0.45 * size) + 1))
            bh = int(rng.integers(int(0.12 * size), int(0.45 * size) + 1))
            x0 = int(rng.integers(0, size - bw + 1))
            y0 = int(rng.integers(0, size - bh + 1))
            cand = (x0, y0, x0 + bw, y0 + bh)
            if all(_iou_xyxy(cand, p) <= 0.3 for p in placed):
                break
        else:
            continue
        color = np.clip(TINTS[cls // len(SHAPES)] * rng.uniform(0.8, 1.05), 0, 1)
        _draw(img, SHAPES[cls % len(SHAPES)], *cand, color)
        placed.append(cand)
        labels.append(cls)

    # occluder strips: translucent bars across the scene
    if rng.random() < 0.3:
        for _ in range(int(rng.integers(1, 3))):
            width = int(rng.integers(2, 4))
            pos = int(rng.integers(0, size - width))
            shade = rng.uniform(0.3, 0.7)
            if rng.random() < 0.5:
                img[:, pos:pos + width, :] = 0.5 * img[:, pos:pos + width, :] + 0.5 * shade
            else:
                img[:, :, pos:pos + width] = 0.5 * img[:, :, pos:pos + width] + 0.5 * shade

    boxes = [((x0 + x1) / 2 / size, (y0 + y1) / 2 / size, (x1 - x0) / size, (y1 - y0) / size)
             for x0, y0, x1, y1 in placed]
    return DetectionSample(img.astype(np.float32), np.array(boxes).reshape(-1, 4), np.array(labels, dtype=np.int64))


def iter_synthetic(seed: int, n: int, num_classes: int, size: int = 64) -> Iterator[DetectionSample]:
    if not 1 <= num_classes <= MAX_CLASSES:
        raise ArgumentError(f"num_classes must be in [1, {MAX_CLASSES}], got {num_classes}")
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield _sample(rng, num_classes, size)


def generate_synthetic(seed: int, n: int, num_classes: int, size: int = 64) -> list[DetectionSample]:
    """``n`` deterministic images with 1-4 shapes each; class = shape x tint."""
    return list(iter_synthetic(seed, n, num_classes, size))


# ---------------------------------------------------------------- disk format


def encode_image(image: np.ndarray) -> bytes:
    c, h, w = image.shape
    return _HEADER.pack(IMAGE_MAGIC, DTYPE_F32, c, h, w, 0) + np.ascontiguousarray(image, dtype="<f4").tobytes()


def decode_image(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise DataError("image file shorter than its header")
    magic, dtype, c, h, w, _ = _HEADER.unpack_from(buf)
    if magic != IMAGE_MAGIC or dtype != DTYPE_F32:
        raise DataError("not a GSAI float32 image")
    if len(buf) != _HEADER.size + 4 * c * h * w:
        raise DataError("image payload size does not match header")
    return np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(c, h, w).astype(np.float32)


def save_dataset(samples: list[DetectionSample], root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        name = f"images/{i:06d}.gsai"
        (root / name).write_bytes(encode_image(s.image))
        lines.append(json.dumps({"image": name, "boxes": s.boxes.tolist(), "labels": s.labels.tolist()}))
    (root / "annotations.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    return root


def load_dataset(root, num_classes: int | None = None) -> list[DetectionSample]:
    root = Path(root)
    ann = root / "annotations.jsonl"
    if not ann.exists():
        raise DataError(f"no annotations.jsonl under {root}")
    out = []
    for lineno, line in enumerate(ann.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            img = decode_image((root / rec["image"]).read_bytes())
        except (KeyError, ValueError, OSError) as exc:
            raise DataError(f"{ann}:{lineno}: {exc}") from exc
        s = DetectionSample(img, np.array(rec["boxes"], dtype=np.float64).reshape(-1, 4), rec["labels"])
        s.validate(num_classes)
        out.append(s)
    return out
