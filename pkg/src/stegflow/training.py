"""Dataset handling and the negative-log-likelihood training loop."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, NonFiniteError, TrainingDiverged
from .flow import FlowModel, to_domain

_LN2 = math.log(2.0)


@dataclass
class Dataset:
    """Images in [0, 255] with train/eval split tags."""

    images: list[np.ndarray]
    tags: list[str]
    source: str = "unspecified"

    def __post_init__(self):
        if not self.images:
            raise DataError(f"{self.source}: dataset is empty")
        if len(self.tags) != len(self.images):
            raise DataError(f"{self.source}: {len(self.images)} images but "
                            f"{len(self.tags)} split tags")
        bad = [t for t in self.tags if t not in ("train", "eval")]
        if bad:
            raise DataError(f"{self.source}: unknown split tag {bad[0]!r}")
        self.images = [np.asarray(im, dtype=np.float32) for im in self.images]
        dims = self.images[0].shape
        for i, im in enumerate(self.images):
            if im.ndim != 3 or im.shape[2] != 3:
                raise DataError(f"{self.source}: image {i} has shape {im.shape}, "
                                f"expected (H, W, 3)")
            if im.shape != dims:
                raise DataError(f"{self.source}: image {i} has dims "
                                f"{im.shape[:2]}, expected {dims[:2]}")
            if im.min() < 0 or im.max() > 255:
                raise DataError(f"{self.source}: image {i} has pixel values outside "
                                f"[0, 255] (min={im.min()}, max={im.max()})")

    @property
    def dims(self) -> tuple[int, int]:
        return self.images[0].shape[:2]

    def split(self, tag: str) -> np.ndarray:
        """Stacked (N, H, W, 3) array of the images carrying `tag`."""
        picked = [im for im, t in zip(self.images, self.tags) if t == tag]
        if not picked:
            return np.zeros((0,) + self.images[0].shape, dtype=np.float32)
        return np.stack(picked)


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one training run; a fixed seed reproduces it exactly."""

    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_interval: int = 10
    dequantize: bool = True
    clip_norm: float = 50.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("batch_size", "learning_rate", "checkpoint_interval", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class TrainResult:
    """Loss curve rows plus the checkpoint trail of one run."""

    curve: list[tuple[int, int, float]] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    initial_eval_bpd: float | None = None
    final_eval_bpd: float | None = None

    @property
    def last_checkpoint(self) -> str | None:
        return self.checkpoints[-1] if self.checkpoints else None


def synth_dataset(seed: int, n: int, dims: tuple[int, int],
                  eval_fraction: float = 0.2) -> Dataset:
    """Smooth random color fields: sums of low-frequency cosines per channel.

    Stands in for a photographic corpus at desk scale while giving the flow
    a learnable, non-degenerate distribution. Pixels are integer-quantized
    into [0, 255].
    """
    if n < 1:
        raise ConfigError(f"synth_dataset needs n >= 1, got {n}")
    if not 0 <= eval_fraction < 1:
        raise ConfigError(f"eval_fraction must be in [0, 1), got {eval_fraction}")
    h, w = dims
    rng = np.random.default_rng(np.random.SeedSequence((seed, h, w, n)))
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    images = []
    for _ in range(n):
        base = np.zeros((h, w), dtype=np.float64)
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 2.5, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            base += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        img = np.zeros((h, w, 3), dtype=np.float64)
        for c in range(3):
            fy, fx = rng.uniform(0.5, 2.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            detail = rng.uniform(0.1, 0.5) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
            img[:, :, c] = base + detail
        lo = rng.uniform(10, 80)
        hi = rng.uniform(170, 245)
        span = img.max() - img.min()
        img = (img - img.min()) / max(span, 1e-9) * (hi - lo) + lo
        images.append(np.rint(img).astype(np.float32))
    n_eval = int(round(n * eval_fraction))
    tags = ["train"] * (n - n_eval) + ["eval"] * n_eval
    return Dataset(images=images, tags=tags, source=f"synth(seed={seed}, n={n})")


def ingest_images(path: str, eval_fraction: float = 0.0) -> Dataset:
    """Load a directory of raster images in deterministic filename order."""
    from PIL import Image, UnidentifiedImageError

    if not os.path.isdir(path):
        raise DataError(f"{path}: not a directory")
    names = sorted(f for f in os.listdir(path)
                   if f.lower().endswith((".png", ".tif", ".tiff", ".bmp")))
    if not names:
        raise DataError(f"{path}: no raster images found")
    images, dims = [], None
    for name in names:
        full = os.path.join(path, name)
        try:
            with Image.open(full) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32)
        except (OSError, UnidentifiedImageError) as exc:
            raise DataError(f"{path}: unreadable image {name}: {exc}") from exc
        if dims is None:
            dims = arr.shape
        elif arr.shape != dims:
            raise DataError(f"{path}: image {name} has dims {arr.shape[:2]}, "
                            f"expected {dims[:2]} (first file sets the contract)")
        images.append(arr)
    n_eval = int(round(len(images) * eval_fraction))
    tags = ["train"] * (len(images) - n_eval) + ["eval"] * n_eval
    return Dataset(images=images, tags=tags, source=path)


def bits_per_dim(model: FlowModel, domain_images: np.ndarray) -> np.ndarray:
    """-log2 p(I) / (H*W*3) for each image already in model domain."""
    d = model.config.height * model.config.width * 3
    return (-model.log_likelihood(domain_images) / (d * _LN2)).astype(np.float32)


def _nll_bits(model: FlowModel, batch: ad.Tensor) -> ad.Tensor:
    d = model.config.height * model.config.width * 3
    ll = model.log_likelihood_t(batch)
    return ad.mul(ll.mean(), -1.0 / (d * _LN2))


def train(model: FlowModel, dataset: Dataset, config: TrainConfig,
          checkpoint_dir: str | None = None) -> TrainResult:
    """Minimize NLL (bits per dim) with Adam; checkpoints at fixed intervals.

    A non-finite loss or gradient aborts the run, keeping the last
    checkpoint written; the raised error names it.
    """
    h, w = model.config.height, model.config.width
    if dataset.dims != (h, w):
        raise DataError(f"dataset dims {dataset.dims} do not match model "
                        f"config ({h}, {w})")
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    train_px = dataset.split("train")
    eval_px = dataset.split("eval")
    if train_px.shape[0] == 0:
        raise DataError("dataset has no images tagged 'train'")
    result = TrainResult()
    if eval_px.shape[0]:
        result.initial_eval_bpd = float(bits_per_dim(model, to_domain(eval_px)).mean())
    if config.epochs == 0:
        result.final_eval_bpd = result.initial_eval_bpd
        return result

    n_train = train_px.shape[0]
    batch = min(config.batch_size, n_train)
    batches_per_epoch = n_train // batch
    order = rng.permutation(n_train)
    first = to_domain(train_px[order[:batch]])
    model.initialize_actnorm(first)
    params = model.parameters()
    opt = ad.Adam(params, lr=config.learning_rate)

    def save_checkpoint(epoch: int) -> None:
        if checkpoint_dir is None:
            return
        os.makedirs(checkpoint_dir, exist_ok=True)
        path = os.path.join(checkpoint_dir, f"checkpoint-epoch{epoch:04d}.ckpt")
        model.save(path)
        result.checkpoints.append(path)

    for epoch in range(config.epochs):
        if epoch > 0:
            order = rng.permutation(n_train)
        for step in range(batches_per_epoch):
            idx = order[step * batch:(step + 1) * batch]
            x = to_domain(train_px[idx])
            if config.dequantize:
                x = x + rng.uniform(0.0, 1.0 / 255.0, x.shape).astype(np.float32)
            with ad.Tape() as tape:
                loss = _nll_bits(model, ad.tensor(x))
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step}; "
                        f"last good checkpoint: {result.last_checkpoint}")
                tape.backward(loss)
            ad.clip_grad_norm(params, config.clip_norm)
            try:
                opt.step()
            except NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite gradient at epoch {epoch} step {step} ({exc}); "
                    f"last good checkpoint: {result.last_checkpoint}") from exc
            opt.zero_grad()
            result.curve.append((epoch, step, loss_value))
        if (epoch + 1) % config.checkpoint_interval == 0:
            save_checkpoint(epoch)

    if config.epochs % config.checkpoint_interval != 0:
        save_checkpoint(config.epochs - 1)
    if eval_px.shape[0]:
        result.final_eval_bpd = float(bits_per_dim(model, to_domain(eval_px)).mean())
    return result


def write_loss_curve(path: str, curve: list[tuple[int, int, float]]) -> None:
    """Loss curve to CSV with a fixed header; deterministic formatting."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "step", "nll_bits_per_dim"])
        for epoch, step, value in curve:
            writer.writerow([epoch, step, f"{value:.6f}"])
    os.replace(tmp, path)
