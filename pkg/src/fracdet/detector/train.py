"""Targets, loss, SGD training, decoding and gradient-weighted heatmaps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import ops
from ..core.rng import make_rng
from ..core.tensor import Graph, NonFiniteError, Tensor
from .metrics import DetectionResult, evaluate_map, nms
from .model import Detector
from .scenes import SyntheticScene

CONF_FLOOR = 0.05
NMS_IOU = 0.5


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


def stack_images(scenes: list[SyntheticScene], dtype=np.float64) -> np.ndarray:
    return np.stack([s.image for s in scenes]).astype(dtype)


def build_targets(scenes: list[SyntheticScene], stride: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Objectness map, box-offset targets and positive mask on the stride grid.

    The positive cell of a box is the cell holding its centre. When two boxes
    land in one cell the smaller box wins. Offsets are the distances from the
    cell centre to the box edges (left, top, right, bottom) in units of stride.
    """
    n = len(scenes)
    gh, gw = scenes[0].height // stride, scenes[0].width // stride
    obj = np.zeros((n, gh, gw))
    offsets = np.zeros((n, 4, gh, gw))
    for i, scene in enumerate(scenes):
        for box in sorted(scene.boxes, key=lambda b: -(b[2] - b[0]) * (b[3] - b[1])):
            cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
            gx, gy = min(int(cx // stride), gw - 1), min(int(cy // stride), gh - 1)
            px, py = (gx + 0.5) * stride, (gy + 0.5) * stride
            obj[i, gy, gx] = 1.0
            offsets[i, :, gy, gx] = [(px - box[0]) / stride, (py - box[1]) / stride,
                                     (box[2] - px) / stride, (box[3] - py) / stride]
    return obj, offsets, obj.astype(bool)


def detection_loss(out: Tensor, obj: np.ndarray, offsets: np.ndarray, positive: np.ndarray) -> Tensor:
    """Per-image summed objectness BCE plus L1 box error on positive cells."""
    n = out.shape[0]
    logits = ops.crop(out, (slice(None), slice(0, 1)))
    bce = ops.sum(ops.bce_with_logits(logits, obj[:, None].astype(out.dtype)))
    boxes = ops.crop(out, (slice(None), slice(1, 5)))
    mask = positive[:, None].astype(out.dtype)
    l1 = ops.sum(ops.mul(ops.abs(ops.sub(boxes, offsets.astype(out.dtype))), mask))
    return ops.mul(ops.add(bce, l1), 1.0 / n)


def dataset_loss(model: Detector, images, targets, batch: int = 50) -> float:
    obj, offsets, positive = targets
    total = 0.0
    for s in range(0, len(images), batch):
        sl = slice(s, s + batch)
        out = model(Tensor(images[sl]), mode="eval")
        total += detection_loss(out, obj[sl], offsets[sl], positive[sl]).item() * len(images[sl])
    return total / len(images)


@dataclass
class TrainResult:
    history: list[float]
    initial_loss: float
    steps: int = 0
    extras: dict = field(default_factory=dict)


def train(
    model: Detector,
    scenes: list[SyntheticScene],
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 16,
    dtype=np.float64,
) -> TrainResult:
    """Plain minibatch SGD.

    Minibatch order and dropout masks come from ``seed``. After every epoch
    the eval-mode loss over the whole set is appended to the history, so
    ``lr = 0`` gives a constant history.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    rng = make_rng(seed)
    images = stack_images(scenes, dtype)
    targets = build_targets(scenes, model.config.stride)
    obj, offsets, positive = targets
    params = model.parameters()
    for p in params:
        p.data = p.data.astype(dtype)
        p.requires_grad = True
    history: list[float] = []
    initial = dataset_loss(model, images, targets)
    steps = 0
    try:
        for _ in range(epochs):
            order = rng.permutation(len(scenes))
            for s in range(0, len(order), batch_size):
                idx = np.sort(order[s : s + batch_size])
                with Graph() as g:
                    out = model(Tensor(images[idx]), mode="train", rng=rng)
                    loss = detection_loss(out, obj[idx], offsets[idx], positive[idx])
                grads = g.backward(loss)
                for p in params:
                    grad = grads.get(p)
                    if grad is not None:
                        p.data -= (lr * grad).astype(p.dtype)
                    p.grad = None
                steps += 1
            value = dataset_loss(model, images, targets)
            if not np.isfinite(value):
                raise TrainingDiverged("loss became non-finite", history)
            history.append(value)
    except NonFiniteError as exc:
        raise TrainingDiverged(str(exc), history) from exc
    return TrainResult(history, initial, steps)


def decode(out: np.ndarray, stride: int, image_hw: tuple[int, int]) -> list[list[tuple[tuple[float, ...], float]]]:
    """Per-image (box, confidence) lists after the confidence floor and NMS."""
    h, w = image_hw
    n, _, gh, gw = out.shape
    conf = 1.0 / (1.0 + np.exp(-out[:, 0]))
    results = []
    for i in range(n):
        boxes, scores = [], []
        for gy in range(gh):
            for gx in range(gw):
                c = float(conf[i, gy, gx])
                if c < CONF_FLOOR:
                    continue
                px, py = (gx + 0.5) * stride, (gy + 0.5) * stride
                l, t, r, b = (out[i, 1:, gy, gx] * stride).tolist()
                box = (
                    float(np.clip(px - l, 0, w)), float(np.clip(py - t, 0, h)),
                    float(np.clip(px + r, 0, w)), float(np.clip(py + b, 0, h)),
                )
                if box[2] <= box[0] or box[3] <= box[1]:
                    continue
                boxes.append(box)
                scores.append(c)
        keep = nms(boxes, scores, NMS_IOU)
        results.append([(boxes[k], scores[k]) for k in keep])
    return results


def predict(model: Detector, scenes: list[SyntheticScene], batch: int = 50):
    images = stack_images(scenes, model.head_w.dtype)
    preds = []
    for s in range(0, len(images), batch):
        out = model(Tensor(images[s : s + batch]), mode="eval").data
        preds.extend(decode(out, model.config.stride, images.shape[2:]))
    return preds


def evaluate(model: Detector, scenes: list[SyntheticScene]) -> DetectionResult:
    return evaluate_map(predict(model, scenes), [s.boxes for s in scenes])


def gradcam(features: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """relu(sum_c mean(grad_c) * F_c), scaled so the maximum is 1; all-zero stays zero."""
    weights = gradient.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, features, axes=([0], [0])), 0.0)
    peak = cam.max()
    return cam / peak if peak > 0 else cam


def heatmap(model: Detector, image: np.ndarray, target_cell: tuple[int, int] | None = None) -> np.ndarray:
    """Gradient-weighted map of the last feature layer for one objectness logit.

    ``image`` is 1 x H x W. ``target_cell`` (row, col) defaults to the cell
    with the highest objectness. Returns an H/stride x W/stride map in [0, 1].
    """
    x = Tensor(np.asarray(image, dtype=model.head_w.dtype)[None])
    feats = model.features(x, mode="eval").data[0]
    leaf = Tensor(feats[None].copy(), requires_grad=True)
    with Graph() as g:
        out = model.head(leaf)
        if target_cell is None:
            target_cell = np.unravel_index(int(np.argmax(out.data[0, 0])), out.shape[2:])
        r, c = target_cell
        logit = ops.crop(out, (0, 0, r, c))
    grads = g.backward(logit)
    return gradcam(feats, grads[leaf][0])
