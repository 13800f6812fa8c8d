"""Synthetic single-object detection data and metrics.

Each image holds one filled rectangle on a dark background.  The class sets
the rectangle's colour pattern and aspect ratio; the box is the rectangle's
pixel extent, stored as normalised ``(cx, cy, w, h)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

SPLITS = ("weight", "arch", "test")
_SPLIT_STREAM = {"weight": 1, "arch": 2, "test": 3, "train": 4}

# (rgb intensity, stripe period or 0, aspect ratio w/h)
_CLASS_STYLES = (
    ((1.0, 0.25, 0.25), 0, 2.0),
    ((0.25, 1.0, 0.25), 0, 0.5),
    ((0.25, 0.25, 1.0), 0, 1.0),
    ((0.9, 0.9, 0.9), 2, 1.0),
    ((1.0, 1.0, 0.25), 0, 1.0),
    ((0.25, 1.0, 1.0), 2, 2.0),
    ((1.0, 0.25, 1.0), 2, 0.5),
    ((0.6, 0.6, 0.6), 0, 1.5),
)
# one pure channel per class; used by the easy, linearly separable variant
_SEPARABLE_STYLES = (
    ((1.0, 0.0, 0.0), 0, 1.0),
    ((0.0, 1.0, 0.0), 0, 1.0),
    ((0.0, 0.0, 1.0), 0, 1.0),
    ((1.0, 1.0, 1.0), 0, 1.0),
)


class DataError(ValueError):
    """Inconsistent predictions/targets or an invalid dataset request."""


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    n_weight: int = 256
    n_arch: int = 256
    n_test: int = 256
    image_size: int = 64
    num_classes: int = 4
    noise: float = 0.05
    min_side: float = 0.1
    max_side: float = 0.6
    variant: str = "standard"

    def __post_init__(self):
        styles = _SEPARABLE_STYLES if self.variant == "separable" else _CLASS_STYLES
        if self.variant not in ("standard", "separable"):
            raise DataError(f"unknown variant {self.variant!r}")
        if not 1 <= self.num_classes <= len(styles):
            raise DataError(f"num_classes must be in [1, {len(styles)}] for variant {self.variant}")
        if not 0 < self.min_side <= self.max_side <= 0.9:
            raise DataError("need 0 < min_side <= max_side <= 0.9")
        if self.image_size < 8:
            raise DataError("image_size must be at least 8")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def styles(self):
        return (_SEPARABLE_STYLES if self.variant == "separable" else _CLASS_STYLES)[: self.num_classes]


@dataclass
class Split:
    name: str
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N,) int64
    boxes: np.ndarray   # (N, 4) float32, normalised (cx, cy, w, h)

    def __len__(self) -> int:
        return len(self.labels)

    def batches(self, batch_size: int, seed: int, epoch: int, shuffle: bool = True):
        """Yield ``Batch`` objects; the order is a pure function of (seed, epoch)."""
        idx = np.arange(len(self))
        if shuffle:
            idx = np.random.default_rng([seed, _SPLIT_STREAM[self.name], epoch]).permutation(len(self))
        for start in range(0, len(idx), batch_size):
            sel = idx[start:start + batch_size]
            yield Batch(self.name, sel, self.images[sel], self.labels[sel], self.boxes[sel])


@dataclass
class Batch:
    """A mini-batch tagged with the split it was drawn from."""

    split: str
    ids: np.ndarray
    images: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    spec: DatasetSpec
    weight: Split
    arch: Split
    test: Split

    def split(self, name: str) -> Split:
        return getattr(self, name)

    def train_pool(self) -> Split:
        """Weight and arch splits together, used to retrain a fixed architecture."""
        w, a = self.weight, self.arch
        return Split("train", np.concatenate([w.images, a.images]), np.concatenate([w.labels, a.labels]),
                     np.concatenate([w.boxes, a.boxes]))


def class_intensity(spec: DatasetSpec, label: int) -> np.ndarray:
    return np.array(spec.styles()[label][0], dtype=np.float32)


def _render(rng: np.random.Generator, spec: DatasetSpec, label: int):
    size = spec.image_size
    colour, stripe, aspect = spec.styles()[label]
    side = rng.uniform(spec.min_side, spec.max_side)
    bw = min(side * np.sqrt(aspect), 0.9)
    bh = min(side / np.sqrt(aspect), 0.9)
    pw, ph = max(2, int(round(bw * size))), max(2, int(round(bh * size)))
    x0 = int(rng.integers(0, size - pw + 1))
    y0 = int(rng.integers(0, size - ph + 1))
    img = np.zeros((3, size, size), dtype=np.float32)
    patch = np.ones((ph, pw), dtype=np.float32)
    if stripe:
        patch[(np.arange(ph) // stripe) % 2 == 1, :] = 0.5
    img[:, y0:y0 + ph, x0:x0 + pw] = np.asarray(colour, dtype=np.float32)[:, None, None] * patch
    if spec.noise > 0:
        img += rng.normal(0.0, spec.noise, size=img.shape).astype(np.float32)
    box = np.array([(x0 + pw / 2) / size, (y0 + ph / 2) / size, pw / size, ph / size], dtype=np.float32)
    return img, box


def generate_split(spec: DatasetSpec, name: str, count: int) -> Split:
    rng = np.random.default_rng([spec.seed, _SPLIT_STREAM[name]])
    images = np.empty((count, 3, spec.image_size, spec.image_size), dtype=np.float32)
    labels = rng.integers(0, spec.num_classes, size=count).astype(np.int64)
    boxes = np.empty((count, 4), dtype=np.float32)
    for i in range(count):
        images[i], boxes[i] = _render(rng, spec, int(labels[i]))
    return Split(name, images, labels, boxes)


def generate(spec: DatasetSpec) -> Dataset:
    """Build all three splits; identical specs give bit-identical arrays."""
    return Dataset(spec, generate_split(spec, "weight", spec.n_weight),
                   generate_split(spec, "arch", spec.n_arch), generate_split(spec, "test", spec.n_test))


def load_or_generate(spec: DatasetSpec, cache_dir: str | Path | None = None) -> Dataset:
    """``generate`` with an optional on-disk cache keyed by the spec hash."""
    if cache_dir is None:
        return generate(spec)
    path = Path(cache_dir) / f"toy_{spec.fingerprint()}.npz"
    if path.exists():
        z = np.load(path)
        return Dataset(spec, *(Split(s, z[f"{s}_images"], z[f"{s}_labels"], z[f"{s}_boxes"]) for s in SPLITS))
    ds = generate(spec)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for s in SPLITS:
        sp = ds.split(s)
        arrays.update({f"{s}_images": sp.images, f"{s}_labels": sp.labels, f"{s}_boxes": sp.boxes})
    np.savez_compressed(path, **arrays)
    return ds


# -- metrics --------------------------------------------------------------------
def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of ``(cx, cy, w, h)`` boxes."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    aw, ah = np.clip(a[:, 2], 0, None), np.clip(a[:, 3], 0, None)
    bw, bh = np.clip(b[:, 2], 0, None), np.clip(b[:, 3], 0, None)
    ix = np.clip(np.minimum(a[:, 0] + aw / 2, b[:, 0] + bw / 2) - np.maximum(a[:, 0] - aw / 2, b[:, 0] - bw / 2), 0, None)
    iy = np.clip(np.minimum(a[:, 1] + ah / 2, b[:, 1] + bh / 2) - np.maximum(a[:, 1] - ah / 2, b[:, 1] - bh / 2), 0, None)
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def evaluate(pred_logits, pred_boxes, labels, boxes) -> dict[str, float]:
    """Accuracy, mean IoU and the detection loss of a set of predictions.

    ``pred_logits`` may also be a 1-D array of predicted class ids, in which
    case no loss is reported.
    """
    pred_logits = np.asarray(pred_logits)
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    labels = np.asarray(labels)
    boxes = np.asarray(boxes, dtype=np.float64)
    n = len(labels)
    if len(pred_logits) != n or len(pred_boxes) != n or len(boxes) != n:
        raise DataError(f"length mismatch: {len(pred_logits)} logits, {len(pred_boxes)} boxes, {n} targets")
    if n == 0:
        raise DataError("nothing to evaluate")
    ious = box_iou(pred_boxes, boxes)
    if pred_logits.ndim == 1:
        pred_cls = pred_logits.astype(np.int64)
        loss = float("nan")
    else:
        pred_cls = pred_logits.argmax(axis=1)
        z = pred_logits.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        ce = -logp[np.arange(n), labels].mean()
        d = np.abs(pred_boxes - boxes)
        sl1 = np.where(d < 1, 0.5 * d * d, d - 0.5).sum(axis=1).mean()
        loss = float(ce + sl1)
    return {"accuracy": float(np.mean(pred_cls == labels)), "mean_iou": float(ious.mean()), "loss": loss}
