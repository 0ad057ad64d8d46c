"""Loss, Adam optimizer, augmentation, dataset split and the training loop.

Training is batch-size-1 over full images: per image the ground-truth
density map is generated at full resolution from the (possibly
augmented) points, sum-pooled 4x to the network's output scale, and the
pixel-wise squared-error loss is backpropagated through the whole graph.
Seeded single-threaded runs are bit-reproducible.
"""

import csv
import json
import time
from dataclasses import dataclass, asdict, field

import numpy as np

from . import groundtruth, serialize
from .errors import DataError, NumericalError, ShapeError
from .model import DensityNet


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    sigma: float = 7.0
    val_fraction: float = 0.30
    augment_flip: bool = True
    augment_brightness: bool = True
    augment_contrast: bool = True
    brightness_delta: float = 0.1
    contrast_low: float = 0.8
    contrast_high: float = 1.2
    checkpoint_every: int = 0  # epochs; 0 = only best/last
    precision: str = "f32"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValueError("validation fraction must be in (0, 1)")


def mse_loss(pred, gt):
    """Sum-over-pixels, mean-over-batch squared error and its gradient."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {gt.shape}")
    n = pred.shape[0]
    diff = pred - gt
    loss = float(np.sum(diff * diff)) / n
    grad = (2.0 / n) * diff
    return loss, grad


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators, keyed like model.parameters()."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr):
    """One in-place Adam update; returns the (mutated) params and state."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params, state


def augment(image, points, config: TrainConfig, rng):
    """Random horizontal flip + brightness/contrast jitter.

    ``image`` is a (1,C,H,W) tensor already normalized to [-1, 1];
    point x coordinates are mirrored together with the image.
    """
    w = image.shape[3]
    points = list(points)
    if config.augment_flip and rng.random() < 0.5:
        image = image[:, :, :, ::-1].copy()
        points = [(w - 1 - x, y) for x, y in points]
    if config.augment_brightness:
        image = image + rng.uniform(-config.brightness_delta, config.brightness_delta)
    if config.augment_contrast:
        c = rng.uniform(config.contrast_low, config.contrast_high)
        mean = image.mean()
        image = (image - mean) * c + mean
    if config.augment_brightness or config.augment_contrast:
        image = np.clip(image, -1.0, 1.0)
    return image.astype(np.float32), points


def split_dataset(items, fraction, seed):
    """Deterministic shuffled split into (train, val)."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    order = list(np.random.default_rng(seed).permutation(len(items)))
    n_val = int(round(len(items) * fraction))
    val = [items[i] for i in order[:n_val]]
    train = [items[i] for i in order[n_val:]]
    return train, val


@dataclass
class Sample:
    """One training example: normalized image + its dot annotation."""

    image: np.ndarray  # (1, C, H, W) in [-1, 1]
    annotation: groundtruth.DotAnnotation


def _target_map(points, h, w, sigma):
    ann = groundtruth.DotAnnotation("", list(points))
    full = groundtruth.generate_density_map(ann, h, w, sigma)
    return groundtruth.downsample_gt(full, 4)


def train_step(model, optimizer, sample_image, points, sigma, lr):
    """Forward/loss/backward/Adam for one image; returns the loss."""
    gt = _target_map(points, sample_image.shape[2], sample_image.shape[3], sigma)
    pred, cache = model.forward(sample_image, want_cache=True)
    loss, grad = mse_loss(pred, gt[None, None].astype(model.dtype))
    if not np.isfinite(loss):
        bad = model.first_nonfinite_stage(cache)
        raise NumericalError(
            f"non-finite loss; first non-finite layer output: {bad or 'loss only'}"
        )
    grads = model.backward(cache, grad)
    adam_step(model.parameters(), grads, optimizer, lr)
    return loss


def validation_mae(model, samples):
    errs = []
    for s in samples:
        pred = model.forward(s.image)
        errs.append(abs(float(pred.sum()) - s.annotation.count))
    return float(np.mean(errs)) if errs else float("nan")


def train(model: DensityNet, samples, config: TrainConfig, out_dir=None, log=None,
          deterministic_log=False):
    """Train on pre-split or raw samples; returns (model, log_rows).

    ``samples`` may be a (train, val) tuple or a flat list, which is then
    split per ``config.val_fraction``. When ``out_dir`` is given, writes
    ``log.csv``, ``best.sonn``/``last.sonn`` checkpoints and sidecar JSON
    recording the config and the epoch/val-MAE each was saved at.
    """
    if isinstance(samples, tuple):
        train_set, val_set = samples
    else:
        train_set, val_set = split_dataset(samples, config.val_fraction, config.seed)
    if not train_set:
        raise DataError("training set is empty")

    rng = np.random.default_rng(config.seed + 1)
    optimizer = AdamState()
    rows = []
    best = None
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        losses = []
        for i in order:
            s = train_set[int(i)]
            image, points = augment(s.image, s.annotation.points, config, rng)
            losses.append(
                train_step(model, optimizer, image, points, config.sigma, config.learning_rate)
            )
        val_mae = validation_mae(model, val_set)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_mae": val_mae,
            "seconds": time.perf_counter() - t0,
        }
        rows.append(row)
        if log:
            log(row)
        if out_dir is not None:
            if best is None or (val_mae == val_mae and val_mae < best):
                best = val_mae
                _save_checkpoint(model, config, epoch, val_mae, out_dir, "best")
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                _save_checkpoint(model, config, epoch, val_mae, out_dir, f"epoch{epoch}")
    if out_dir is not None:
        _save_checkpoint(model, config, config.epochs - 1, rows[-1]["val_mae"], out_dir, "last")
        write_log_csv(rows, out_dir / "log.csv", zero_seconds=deterministic_log)
    return model, rows


def _save_checkpoint(model, config, epoch, val_mae, out_dir, stem):
    serialize.save_model(model, out_dir / f"{stem}.sonn")
    with open(out_dir / f"{stem}.json", "w") as f:
        json.dump(
            {"config": asdict(config), "epoch": epoch, "val_mae": val_mae}, f, indent=2
        )


def write_log_csv(rows, path, zero_seconds=False):
    """zero_seconds keeps deterministic-mode logs bit-identical across runs."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_mae", "seconds"])
        for r in rows:
            secs = 0.0 if zero_seconds else r["seconds"]
            writer.writerow(
                [r["epoch"], repr(r["train_loss"]), repr(r["val_mae"]), f"{secs:.3f}"]
            )


def gradient_check(model: DensityNet, seed=0, input_hw=(8, 8), h_step=1e-5, tol=1e-5):
    """Compare every parameter's analytic gradient with central finite
    differences of the scalar loss; returns a per-layer report dict.

    The model must be float64; finite differences are unreliable in f32.
    """
    if model.dtype != np.float64:
        raise ValueError("gradient_check requires a float64 model")
    rng = np.random.default_rng(seed)
    # randomize every parameter (biases included) so no stage is stuck in
    # a dead ReLU region where all gradients vanish identically
    for p in model.parameters().values():
        p[...] = rng.uniform(-0.5, 0.5, p.shape)
    # a positive fusion bias keeps part of the output off the dead side
    # of the final ReLU
    model.fusion.bias[...] = np.abs(model.fusion.bias) + 0.1
    h, w = input_hw
    x = rng.uniform(-1, 1, (1, model.config.in_channels, h, w))
    pred = model.forward(x)
    if float(np.abs(pred).max()) == 0.0:
        raise NumericalError("gradient check model output is identically zero")
    gt = rng.uniform(0, 0.5, pred.shape)

    def loss_fn():
        out = model.forward(x)
        return float(np.sum((out - gt) ** 2))

    pred, cache = model.forward(x, want_cache=True)
    _, grad = mse_loss(pred, gt)
    analytic = model.backward(cache, grad)

    report = {}
    params = model.parameters()
    for name, p in params.items():
        flat = p.reshape(-1)
        ga = analytic[name].reshape(-1)
        num = np.empty_like(ga)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h_step
            lp = loss_fn()
            flat[i] = orig - h_step
            lm = loss_fn()
            flat[i] = orig
            num[i] = (lp - lm) / (2 * h_step)
        # error relative to the layer's gradient scale, so near-zero
        # coordinates are not judged against floating-point noise alone
        scale = max(np.abs(num).max(), np.abs(ga).max(), 1e-8)
        report[name] = float(np.abs(num - ga).max() / scale)
    return {
        "per_parameter": report,
        "max_relative_error": max(report.values()),
        "passed": max(report.values()) < tol,
        "tolerance": tol,
    }
