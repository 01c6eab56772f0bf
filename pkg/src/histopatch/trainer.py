"""Training loops for both stages, early stopping, and evaluation metrics.

Stage one fits the patch-wise network on overlapping patches that inherit
their parent image's label.  Stage two freezes that network, turns every
image into a channel-stacked feature map via non-overlapping tiles, and fits
the image-wise classifier on top.  Both stages stop early once validation
accuracy stops improving and keep the best-epoch parameters.

Runs are reproducible: every random draw (shuffles, dropout masks, init)
comes from a counter-based generator derived from the run seed, so identical
inputs give bitwise-identical checkpoints and metrics in single-threaded
mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import ops
from .autodiff import Tape
from .data import LabeledImage, Manifest, load_images
from .geometry import PatchGrid, patch_coords
from .model import (
    NetworkSpec,
    canonical_imagewise_spec,
    canonical_patchwise_spec,
    image_feature_stack,
    infer_image,
    init_params,
    network_forward,
    patchwise_logits,
    trainable_names,
)
from .rng import derive
from .tensor import Tensor

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "Metrics",
    "TrainResult",
    "sgd_step",
    "early_stop",
    "confusion_matrix",
    "metrics_from_confusion",
    "train_patchwise",
    "train_imagewise",
    "evaluate_patches",
    "evaluate_images",
]

N_CLASSES = 4
EVAL_BATCH = 64  # fixed so recorded and recomputed accuracies share shapes

Logger = Callable[[str], None]
EpochHook = Callable[[int, dict[str, Tensor]], None]


@dataclass
class TrainConfig:
    stage: str  # "patchwise" | "imagewise"
    seed: int = 0
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 5
    dropout_rate: float = 0.5  # image-wise head only
    window: int = 64
    stride: int = 32
    base_width: int = 8
    feature_depth: int = 8
    head_depth: int = 64

    def validate(self) -> None:
        if self.stage not in ("patchwise", "imagewise"):
            raise ValueError(f"stage must be patchwise or imagewise, got {self.stage!r}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 2:
            raise ValueError(
                f"batch size must be >= 2 (batch norm needs a variance), got {self.batch_size}"
            )
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float


@dataclass
class Metrics:
    epochs: list[EpochRecord]
    confusion: list[list[int]]
    accuracy: float
    precision: list[float]
    recall: list[float]
    best_epoch: int

    def to_dict(self) -> dict:
        return {
            "epochs": [{"epoch": e.epoch, "train_loss": e.train_loss,
                        "val_acc": e.val_acc} for e in self.epochs],
            "confusion": self.confusion,
            "accuracy": self.accuracy,
            "per_class": {"precision": self.precision, "recall": self.recall},
            "best_epoch": self.best_epoch,
        }


@dataclass
class TrainResult:
    spec: NetworkSpec
    params: dict[str, Tensor]
    meta: dict
    metrics: Metrics


# ---------------------------------------------------------------------------
# building blocks

def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
             velocity: dict[str, np.ndarray], lr: float, momentum: float
             ) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Momentum update, in place: v <- momentum*v + g; w <- w - lr*v."""
    for name, grad in grads.items():
        w = params[name]
        g = np.asarray(grad, dtype=np.float32)
        v = velocity[name]
        if g.shape != w.data.shape or v.shape != w.data.shape:
            raise ValueError(
                f"{name}: shapes differ (param {w.data.shape}, grad {g.shape}, "
                f"velocity {v.shape})"
            )
        v *= momentum
        v += g
        w.data -= lr * v
    return params, velocity


def early_stop(history: list[float], patience: int) -> tuple[bool, int]:
    """Whether to stop, and the best epoch index (earliest on ties).

    Stops after `patience` consecutive epochs at or below the best accuracy so
    far; only strict improvement resets the counter.  An empty history gives
    (False, -1).
    """
    if patience < 1:
        raise ValueError(f"patience must be >= 1, got {patience}")
    if not history:
        return False, -1
    best_acc, best_epoch, streak = history[0], 0, 0
    for i in range(1, len(history)):
        if history[i] > best_acc:
            best_acc, best_epoch, streak = history[i], i, 0
        else:
            streak += 1
            if streak >= patience:
                return True, best_epoch
    return False, best_epoch


def confusion_matrix(true_labels: np.ndarray, pred_labels: np.ndarray) -> np.ndarray:
    m = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for t, p in zip(true_labels, pred_labels):
        m[int(t), int(p)] += 1
    return m


def metrics_from_confusion(m: np.ndarray) -> tuple[float, list[float], list[float]]:
    """(accuracy, per-class precision, per-class recall); empty denominators
    give 0.0."""
    m = np.asarray(m)
    total = int(m.sum())
    accuracy = float(np.trace(m)) / total if total else 0.0
    precision, recall = [], []
    for c in range(N_CLASSES):
        col = int(m[:, c].sum())
        row = int(m[c, :].sum())
        precision.append(float(m[c, c]) / col if col else 0.0)
        recall.append(float(m[c, c]) / row if row else 0.0)
    return accuracy, precision, recall


def _shuffled_batches(n: int, batch_size: int,
                      rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Seeded permutation chopped into batches; stragglers smaller than 2 are
    dropped (batch norm needs a variance)."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        chunk = perm[start:start + batch_size]
        if len(chunk) >= 2:
            yield chunk


def _snapshot(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for name, t in params.items()}


def _check_manifest(manifest: Manifest) -> None:
    if manifest.stats is None:
        raise ValueError("manifest has no normalization stats; compute them first")
    train = manifest.split_records("train")
    val = manifest.split_records("val")
    if not train or not val:
        raise ValueError("both train and val splits must be non-empty")
    present = {r.label for r in train}
    missing = sorted(set(range(N_CLASSES)) - present)
    if missing:
        raise ValueError(f"train split is missing classes {missing}")


def _log(log: Logger | None, msg: str) -> None:
    if log is not None:
        log(msg)


# ---------------------------------------------------------------------------
# patch-level plumbing

class _PatchIndex:
    """Flat random-access view over every patch of a list of images."""

    def __init__(self, images: list[LabeledImage], window: int, stride: int):
        self.images = images
        self.window = window
        entries = []
        for i, img in enumerate(images):
            _, h, w = img.pixels.shape
            grid = PatchGrid(image_w=w, image_h=h, window=window, stride=stride)
            for x, y in patch_coords(grid):
                entries.append((i, x, y))
        self.entries = np.asarray(entries, dtype=np.int64)
        self.labels = np.asarray([images[i].label for i, _, _ in entries],
                                 dtype=np.int64)

    def __len__(self) -> int:
        return len(self.entries)

    def gather(self, idxs: np.ndarray) -> np.ndarray:
        k = self.window
        batch = np.empty((len(idxs), 3, k, k), dtype=np.float32)
        for j, t in enumerate(idxs):
            i, x, y = self.entries[t]
            batch[j] = self.images[i].pixels.data[:, y:y + k, x:x + k]
        return batch


def evaluate_patches(spec: NetworkSpec, params: dict[str, Tensor],
                     images: list[LabeledImage], window: int,
                     stride: int) -> np.ndarray:
    """Patch-level confusion matrix (rows true, cols predicted), eval mode."""
    index = _PatchIndex(images, window, stride)
    preds = np.empty(len(index), dtype=np.int64)
    for start in range(0, len(index), EVAL_BATCH):
        idxs = np.arange(start, min(start + EVAL_BATCH, len(index)))
        logits = patchwise_logits(spec, params, Tensor(index.gather(idxs)), "eval")
        preds[idxs] = np.argmax(logits.data, axis=1)
    return confusion_matrix(index.labels, preds)


def evaluate_images(pw_spec: NetworkSpec, pw_params: dict[str, Tensor],
                    iw_spec: NetworkSpec, iw_params: dict[str, Tensor],
                    images: list[LabeledImage], window: int) -> np.ndarray:
    """Image-level confusion matrix via the full two-stage inference path."""
    if not images:
        raise ValueError("no images to evaluate")
    m = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for img in images:
        cls, _ = infer_image(pw_spec, pw_params, iw_spec, iw_params,
                             img.pixels, window)
        m[img.label, cls] += 1
    return m


# ---------------------------------------------------------------------------
# stage one

def train_patchwise(manifest: Manifest, config: TrainConfig,
                    log: Logger | None = None,
                    epoch_hook: EpochHook | None = None) -> TrainResult:
    """Fit the patch-wise network on overlapping labeled patches.

    ``epoch_hook(epoch, params)`` is called with the live parameter dict
    after each epoch's validation, for diagnostics only.
    """
    config.validate()
    if config.stage != "patchwise":
        raise ValueError(f"config stage is {config.stage!r}, expected patchwise")
    _check_manifest(manifest)

    train_imgs = load_images(manifest, "train", normalized=True)
    val_imgs = load_images(manifest, "val", normalized=True)
    index = _PatchIndex(train_imgs, config.window, config.stride)
    _log(log, f"stage 1: {len(train_imgs)} train images -> {len(index)} patches, "
              f"{len(val_imgs)} val images")

    spec = canonical_patchwise_spec(config.base_width, config.feature_depth)
    params = init_params(spec, config.seed)
    trainables = trainable_names(spec)
    velocity = {n: np.zeros_like(params[n].data) for n in trainables}

    epochs: list[EpochRecord] = []
    best_params = _snapshot(params)
    best_acc, best_epoch = -1.0, -1
    for epoch in range(config.max_epochs):
        shuffle_rng = derive(config.seed, "shuffle.patch", epoch)
        loss_sum, n_sum = 0.0, 0
        for idxs in _shuffled_batches(len(index), config.batch_size, shuffle_rng):
            tape = Tape()
            batch = Tensor(index.gather(idxs))
            logits = patchwise_logits(spec, params, batch, "train", tape=tape)
            loss = ops.cross_entropy(logits, index.labels[idxs], tape=tape)
            for n in trainables:
                params[n].grad = None
            tape.backward(loss)
            grads = {n: params[n].grad for n in trainables}
            sgd_step(params, grads, velocity, config.lr, config.momentum)
            loss_sum += loss.item() * len(idxs)
            n_sum += len(idxs)

        confusion = evaluate_patches(spec, params, val_imgs, config.window,
                                     config.stride)
        val_acc, _, _ = metrics_from_confusion(confusion)
        epochs.append(EpochRecord(epoch, loss_sum / n_sum, val_acc))
        _log(log, f"epoch {epoch}: train_loss {loss_sum / n_sum:.4f} "
                  f"val_acc {val_acc:.4f}")
        if epoch_hook is not None:
            epoch_hook(epoch, params)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_params = _snapshot(params)
        stop, _ = early_stop([e.val_acc for e in epochs], config.patience)
        if stop:
            _log(log, f"early stop after epoch {epoch}, best epoch {best_epoch}")
            break

    confusion = evaluate_patches(spec, best_params, val_imgs, config.window,
                                 config.stride)
    accuracy, precision, recall = metrics_from_confusion(confusion)
    metrics = Metrics(epochs=epochs, confusion=confusion.tolist(),
                      accuracy=accuracy, precision=precision, recall=recall,
                      best_epoch=best_epoch)
    meta = {
        "stage": "patchwise",
        "window": config.window,
        "stride": config.stride,
        "base_width": config.base_width,
        "feature_depth": config.feature_depth,
        "seed": config.seed,
        "lr": config.lr,
        "momentum": config.momentum,
        "batch_size": config.batch_size,
        "max_epochs": config.max_epochs,
        "patience": config.patience,
        "norm_mean": list(manifest.stats.mean),
        "norm_std": list(manifest.stats.std),
        "best_epoch": best_epoch,
        "val_acc": accuracy,
    }
    return TrainResult(spec=spec, params=best_params, meta=meta, metrics=metrics)


# ---------------------------------------------------------------------------
# stage two

def _image_grid(images: list[LabeledImage], window: int) -> PatchGrid:
    shapes = {img.pixels.shape for img in images}
    if len(shapes) != 1:
        raise ValueError(f"images must share one shape, got {sorted(shapes)}")
    _, h, w = next(iter(shapes))
    return PatchGrid(image_w=w, image_h=h, window=window, stride=window)


def _feature_stacks(pw_spec: NetworkSpec, pw_params: dict[str, Tensor],
                    images: list[LabeledImage], window: int) -> list[Tensor]:
    return [image_feature_stack(pw_spec, pw_params, img.pixels, window)
            for img in images]


def _stack_accuracy(iw_spec: NetworkSpec, iw_params: dict[str, Tensor],
                    stacks: list[Tensor], labels: list[int]) -> tuple[np.ndarray, float]:
    """Confusion and accuracy over cached feature stacks, one image per
    forward pass (the exact shapes the inference path uses)."""
    m = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for stack, label in zip(stacks, labels):
        probs = network_forward(iw_spec, iw_params, Tensor(stack.data[None]),
                                "eval", with_softmax=True)
        m[label, int(np.argmax(probs.data[0]))] += 1
    acc, _, _ = metrics_from_confusion(m)
    return m, acc


def train_imagewise(manifest: Manifest, pw_spec: NetworkSpec,
                    pw_params: dict[str, Tensor], config: TrainConfig,
                    log: Logger | None = None,
                    epoch_hook: EpochHook | None = None) -> TrainResult:
    """Fit the image-wise classifier on frozen patch-wise features.

    The trunk never sees a gradient: every feature stack is precomputed in
    eval mode once and reused across epochs.  ``epoch_hook`` behaves as in
    ``train_patchwise``.
    """
    config.validate()
    if config.stage != "imagewise":
        raise ValueError(f"config stage is {config.stage!r}, expected imagewise")
    if pw_spec.kind != "patchwise":
        raise ValueError(f"first-stage checkpoint has kind {pw_spec.kind!r}")
    _check_manifest(manifest)

    train_imgs = load_images(manifest, "train", normalized=True)
    val_imgs = load_images(manifest, "val", normalized=True)
    grid = _image_grid(train_imgs + val_imgs, config.window)
    feature_depth = pw_spec.feature_depth
    iw_spec = canonical_imagewise_spec(n_patches=grid.total,
                                       feature_depth=feature_depth,
                                       head_depth=config.head_depth,
                                       dropout_rate=config.dropout_rate)

    _log(log, f"stage 2: caching feature stacks for {len(train_imgs)} train "
              f"+ {len(val_imgs)} val images ({grid.total} patches each)")
    train_stacks = _feature_stacks(pw_spec, pw_params, train_imgs, config.window)
    val_stacks = _feature_stacks(pw_spec, pw_params, val_imgs, config.window)
    train_labels = np.asarray([img.label for img in train_imgs], dtype=np.int64)
    val_labels = [img.label for img in val_imgs]

    iw_params = init_params(iw_spec, config.seed)
    trainables = trainable_names(iw_spec)
    velocity = {n: np.zeros_like(iw_params[n].data) for n in trainables}

    epochs: list[EpochRecord] = []
    best_params = _snapshot(iw_params)
    best_acc, best_epoch = -1.0, -1
    for epoch in range(config.max_epochs):
        shuffle_rng = derive(config.seed, "shuffle.image", epoch)
        loss_sum, n_sum = 0.0, 0
        for batch_i, idxs in enumerate(
                _shuffled_batches(len(train_stacks), config.batch_size, shuffle_rng)):
            tape = Tape()
            batch = Tensor(np.stack([train_stacks[i].data for i in idxs]))

            def dropout_rng(layer_idx: int, _e: int = epoch, _b: int = batch_i):
                return derive(config.seed, f"dropout.l{layer_idx}",
                              _e * 1_000_000 + _b)

            logits = network_forward(iw_spec, iw_params, batch, "train",
                                     tape=tape, dropout_rng=dropout_rng)
            loss = ops.cross_entropy(logits, train_labels[idxs], tape=tape)
            for n in trainables:
                iw_params[n].grad = None
            tape.backward(loss)
            grads = {n: iw_params[n].grad for n in trainables}
            sgd_step(iw_params, grads, velocity, config.lr, config.momentum)
            loss_sum += loss.item() * len(idxs)
            n_sum += len(idxs)

        _, val_acc = _stack_accuracy(iw_spec, iw_params, val_stacks, val_labels)
        epochs.append(EpochRecord(epoch, loss_sum / n_sum, val_acc))
        _log(log, f"epoch {epoch}: train_loss {loss_sum / n_sum:.4f} "
                  f"val_acc {val_acc:.4f}")
        if epoch_hook is not None:
            epoch_hook(epoch, iw_params)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_params = _snapshot(iw_params)
        stop, _ = early_stop([e.val_acc for e in epochs], config.patience)
        if stop:
            _log(log, f"early stop after epoch {epoch}, best epoch {best_epoch}")
            break

    confusion, accuracy = _stack_accuracy(iw_spec, best_params, val_stacks, val_labels)
    _, precision, recall = metrics_from_confusion(confusion)
    metrics = Metrics(epochs=epochs, confusion=confusion.tolist(),
                      accuracy=accuracy, precision=precision, recall=recall,
                      best_epoch=best_epoch)
    meta = {
        "stage": "imagewise",
        "window": config.window,
        "n_patches": grid.total,
        "feature_depth": feature_depth,
        "head_depth": config.head_depth,
        "dropout_rate": config.dropout_rate,
        "seed": config.seed,
        "lr": config.lr,
        "momentum": config.momentum,
        "batch_size": config.batch_size,
        "max_epochs": config.max_epochs,
        "patience": config.patience,
        "norm_mean": list(manifest.stats.mean),
        "norm_std": list(manifest.stats.std),
        "best_epoch": best_epoch,
        "val_acc": accuracy,
    }
    return TrainResult(spec=iw_spec, params=best_params, meta=meta, metrics=metrics)
