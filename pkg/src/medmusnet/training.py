"""Training loop and sliding-window inference."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .model import Model, ModelConfig, build, deep_supervision_loss, forward
from .optim import Optimizer, OptimizerConfig
from .tensor import NonFiniteError, Tensor, no_grad, parameters_grad_norm

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 2
    optimizer: str = "sgd_nesterov"
    lr: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 3e-5
    lr_schedule: str = "poly"  # "poly" (exponent 0.9) or "constant"
    grad_clip: Optional[float] = 12.0
    shuffle: bool = True
    flips: bool = False
    label_downsampling: str = "nearest"
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(kind=self.optimizer, lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def desk_train_config(**overrides) -> TrainConfig:
    """Smoke-scale schedule. SGD with 0.99 Nesterov momentum stalls on the
    all-background solution at this step budget; Adam does not."""
    return TrainConfig(**{**dict(epochs=100, optimizer="adam", lr=3e-3, lr_schedule="poly"), **overrides})


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    per_scale: List[float]


def normalize_intensity(x: np.ndarray) -> np.ndarray:
    """Per-case z-score."""
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    return (x - x.mean()) / (sd if sd > 0 else 1.0)


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if cfg.lr_schedule == "poly":
        return cfg.lr * (1.0 - epoch / cfg.epochs) ** 0.9
    raise ValueError(f"unknown lr schedule {cfg.lr_schedule!r}")


def _batches(n: int, batch_size: int, rng: Optional[np.random.Generator]) -> List[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train(
    model: Model,
    dataset: Sequence[Tuple[np.ndarray, np.ndarray]],
    config: TrainConfig,
    seed: int = 0,
    stop_after: Optional[int] = None,
    callback=None,
) -> Tuple[Model, List[EpochRecord]]:
    """Train in place on ``(image, labels)`` pairs of shape (D, H, W).

    ``stop_after`` ends the run early without changing the learning-rate
    schedule, which stays tied to ``config.epochs``. ``callback(epoch, model,
    history)`` may return True to stop.
    """
    if not dataset:
        raise ValueError("empty dataset")
    dtype = model.parameters()[0].dtype
    images = np.stack([np.asarray(im, dtype=dtype) for im, _ in dataset])[:, None]
    labels = np.stack([np.asarray(gt) for _, gt in dataset]).astype(np.int64)
    if tuple(images.shape[2:]) != model.config.patch_size:
        raise ValueError(f"patches {images.shape[2:]} != model patch size {model.config.patch_size}")
    opt = Optimizer(model.parameters(), config.optimizer_config())
    rng = np.random.default_rng(seed)
    history: List[EpochRecord] = []
    last = config.epochs if stop_after is None else min(stop_after, config.epochs)
    for epoch in range(last):
        lr = _lr_at(config, epoch)
        losses, scales = [], []
        for idx in _batches(len(images), config.batch_size, rng if config.shuffle else None):
            x, y = images[idx], labels[idx]
            if config.flips:
                for ax in range(3):
                    if rng.random() < 0.5:
                        x = np.flip(x, axis=2 + ax)
                        y = np.flip(y, axis=1 + ax)
                x, y = np.ascontiguousarray(x), np.ascontiguousarray(y)
            opt.zero_grad()
            try:
                out = forward(model, Tensor(x))
                lb = deep_supervision_loss(out, y, label_mode=config.label_downsampling)
                lb.total.backward()
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            if not np.isfinite(lb.value):
                raise TrainingDiverged(f"epoch {epoch}: non-finite loss {lb.value}")
            if config.grad_clip:
                norm = parameters_grad_norm(opt.params)
                if not np.isfinite(norm):
                    raise TrainingDiverged(f"epoch {epoch}: non-finite gradient norm")
                if norm > config.grad_clip:
                    k = config.grad_clip / norm
                    for p in opt.params:
                        if p.grad is not None:
                            p.grad *= k
            opt.step(lr)
            losses.append(lb.value)
            scales.append(lb.per_scale)
        rec = EpochRecord(epoch, float(np.mean(losses)), np.mean(scales, axis=0).tolist())
        history.append(rec)
        log.info("epoch %d loss %.5f lr %.5g", epoch, rec.loss, lr)
        if config.checkpoint_every and config.checkpoint_dir and (epoch + 1) % config.checkpoint_every == 0:
            save_model(Path(config.checkpoint_dir) / f"epoch_{epoch + 1:04d}.ckpt", model)
        if callback is not None and callback(epoch, model, history):
            break
    return model, history


def write_loss_curve(path, history: Sequence[EpochRecord]) -> None:
    n = len(history[0].per_scale) if history else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "L"] + [f"L_{i}" for i in range(n)])
        for r in history:
            w.writerow([r.epoch, repr(r.loss)] + [repr(v) for v in r.per_scale])


def save_model(path, model: Model) -> Path:
    return save_checkpoint(path, model.state_dict(), {"model_config": model.config.to_dict()})


def load_model(path) -> Model:
    arrays, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    dtype = next(iter(arrays.values())).dtype
    model = build(cfg, 0, dtype=dtype)
    model.load_state_dict(arrays)
    return model


# ---------------------------------------------------------------------------
# inference


def _positions(size: int, patch: int, step: int) -> List[int]:
    if size <= patch:
        return [0]
    n = int(np.ceil((size - patch) / step)) + 1
    return sorted(set(int(round(p)) for p in np.linspace(0, size - patch, n)))


def gaussian_window(patch: Sequence[int], sigma_scale: float = 0.125) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(p) - (p - 1) / 2.0 for p in patch], indexing="ij")
    w = np.ones(tuple(patch))
    for g, p in zip(grids, patch):
        w = w * np.exp(-0.5 * (g / (sigma_scale * p)) ** 2)
    w /= w.max()
    return np.maximum(w, 1e-3)


@dataclass
class Prediction:
    probabilities: np.ndarray  # (C, D, H, W)
    mask: np.ndarray  # argmax, uint8


def predict_volume(
    model: Model,
    volume: np.ndarray,
    overlap: float = 0.5,
    weighting: str = "gaussian",
) -> Prediction:
    """Sliding-window prediction over a 3-D array (already normalised)."""
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    vol = np.asarray(volume)
    patch = model.config.patch_size
    pad = [max(0, p - s) for p, s in zip(patch, vol.shape)]
    padded = np.pad(vol, [(0, p) for p in pad]) if any(pad) else vol
    dtype = model.parameters()[0].dtype
    C = model.config.num_classes
    if weighting == "gaussian":
        wwin = gaussian_window(patch)
    elif weighting == "uniform":
        wwin = np.ones(patch)
    else:
        raise ValueError(f"unknown window weighting {weighting!r}")
    steps = [max(1, int(np.floor(p * (1 - overlap)))) for p in patch]
    starts = [_positions(s, p, st) for s, p, st in zip(padded.shape, patch, steps)]
    acc = np.zeros((C,) + padded.shape)
    norm = np.zeros(padded.shape)
    with no_grad():
        for a in starts[0]:
            for b in starts[1]:
                for c in starts[2]:
                    sl = (slice(a, a + patch[0]), slice(b, b + patch[1]), slice(c, c + patch[2]))
                    x = Tensor(padded[sl][None, None].astype(dtype))
                    p0 = forward(model, x).probs[0].data[0]
                    acc[(slice(None),) + sl] += p0 * wwin
                    norm[sl] += wwin
    probs = acc / norm
    crop = tuple(slice(0, s) for s in vol.shape)
    probs = probs[(slice(None),) + crop]
    return Prediction(probs, probs.argmax(axis=0).astype(np.uint8))


def dice_score(pred: np.ndarray, gt: np.ndarray) -> Optional[float]:
    p, g = np.asarray(pred) > 0, np.asarray(gt) > 0
    denom = p.sum() + g.sum()
    if denom == 0:
        return None
    return float(2.0 * (p & g).sum() / denom)


def training_dice(model: Model, dataset: Sequence[Tuple[np.ndarray, np.ndarray]]) -> List[Optional[float]]:
    """DSC of argmax predictions on each training patch."""
    dtype = model.parameters()[0].dtype
    out = []
    with no_grad():
        for im, gt in dataset:
            p0 = forward(model, Tensor(np.asarray(im, dtype=dtype)[None, None])).probs[0].data[0]
            out.append(dice_score(p0.argmax(axis=0), gt))
    return out
