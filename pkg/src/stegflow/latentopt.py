"""Latent optimization: descend the assessor score gap to sharpen samples.

A small convolutional quality assessor scores images (positive means judged
real, negative means judged generated). Starting from the mean projection
of a few real reference images, the optimizer repeatedly generates an image
from the current latent, measures Diff = |mean real score - generated
score|, and takes a plain gradient step on the latent. Reference scores are
computed once, before the loop; the loop generates one image per step.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError
from .flow import FlowModel, MultiScaleLatent

_ASSESSOR_CHANNELS = (16, 32, 32)


class QualityAssessor:
    """conv-affine-relu x3, global mean pool, linear scalar head."""

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA55E)))
        self.params: list[tuple[str, Tensor]] = []
        c_in = 3
        self._blocks = []
        for i, c_out in enumerate(_ASSESSOR_CHANNELS):
            w = ad.parameter(rng.normal(0.0, 0.1, (3, 3, c_in, c_out)))
            scale = ad.parameter(np.ones(c_out, dtype=np.float32))
            shift = ad.parameter(np.zeros(c_out, dtype=np.float32))
            self._blocks.append((w, scale, shift))
            self.params += [(f"block{i}.w", w), (f"block{i}.scale", scale),
                            (f"block{i}.shift", shift)]
            c_in = c_out
        self._head_w = ad.parameter(rng.normal(0.0, 0.1, (c_in, 1)))
        self._head_b = ad.parameter(np.zeros(1, dtype=np.float32))
        self.params += [("head.w", self._head_w), ("head.b", self._head_b)]

    def score_t(self, x: Tensor) -> Tensor:
        """Differentiable scalar score per image; x is (N, H, W, 3)."""
        h = x
        for w, scale, shift in self._blocks:
            h = ad.shift_channels(ad.scale_channels(ad.conv2d(h, w), scale), shift)
            h = h.relu()
        pooled = ad.reduce_mean(h, axis=(1, 2))
        out = ad.add(ad.matmul(pooled, self._head_w), self._head_b)
        return out.reshape((x.shape[0],))

    def score(self, images: np.ndarray) -> np.ndarray:
        s = self.score_t(ad.tensor(np.asarray(images, dtype=np.float32)))
        s.check_finite("assessor score")
        return s.data


def train_assessor(real: np.ndarray, generated: np.ndarray, seed: int = 0,
                   epochs: int = 60, learning_rate: float = 3e-3,
                   holdout_fraction: float = 0.25
                   ) -> tuple[QualityAssessor, float]:
    """Fit the assessor as a logistic discriminator; returns held-out accuracy.

    Both classes arrive as (N, H, W, 3) arrays in model domain.
    """
    real = np.asarray(real, dtype=np.float32)
    generated = np.asarray(generated, dtype=np.float32)
    if real.shape[0] == 0 or generated.shape[0] == 0:
        raise DataError("train_assessor needs both real and generated images "
                        f"(got {real.shape[0]} real, {generated.shape[0]} generated)")
    if real.shape[1:] != generated.shape[1:]:
        raise DataError(f"class dims differ: real {real.shape[1:]} vs "
                        f"generated {generated.shape[1:]}")
    n_hold_r = max(1, int(real.shape[0] * holdout_fraction))
    n_hold_g = max(1, int(generated.shape[0] * holdout_fraction))
    if real.shape[0] - n_hold_r < 1 or generated.shape[0] - n_hold_g < 1:
        raise DataError("not enough images to carve a held-out split")
    train_x = np.concatenate([real[n_hold_r:], generated[n_hold_g:]])
    train_y = np.concatenate([np.ones(real.shape[0] - n_hold_r, dtype=np.float32),
                              -np.ones(generated.shape[0] - n_hold_g, dtype=np.float32)])
    assessor = QualityAssessor(seed=seed)
    opt = ad.Adam(assessor.params, lr=learning_rate)
    y = ad.tensor(train_y)
    x = ad.tensor(train_x)
    for _ in range(epochs):
        with ad.Tape() as tape:
            s = assessor.score_t(x)
            loss = ad.neg(ad.mul(s, y)).softplus().mean()
            tape.backward(loss)
        opt.step()
        opt.zero_grad()
    hold_r = assessor.score(real[:n_hold_r])
    hold_g = assessor.score(generated[:n_hold_g])
    accuracy = (float((hold_r > 0).sum()) + float((hold_g < 0).sum())) / (
        n_hold_r + n_hold_g)
    return assessor, accuracy


@dataclass(frozen=True)
class OptConfig:
    """Algorithm knobs: step size, loop bounds, exit threshold, reference count."""

    epsilon: float = 1e-3
    max_step: int = 100
    thresh: float = 0.1
    n_refs: int = 3

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.max_step < 1:
            raise ConfigError(f"max_step must be >= 1, got {self.max_step}")
        if self.n_refs < 1:
            raise ConfigError(f"n_refs must be >= 1, got {self.n_refs}")
        if math.isnan(self.thresh):
            raise ConfigError("thresh must not be NaN")


@dataclass
class OptResult:
    """Optimized latent plus the per-step (step, diff, score_gen) trace."""

    latent: MultiScaleLatent
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    exited_early: bool = False


def init_latent(model: FlowModel, real_images: np.ndarray) -> MultiScaleLatent:
    """Elementwise mean of the reference images' latent projections."""
    real_images = np.asarray(real_images, dtype=np.float32)
    if real_images.ndim != 4 or real_images.shape[0] < 1:
        raise DataError(f"need (n, H, W, 3) reference images, got "
                        f"{real_images.shape}")
    latents, _ = model.forward(real_images)
    return MultiScaleLatent([z.mean(axis=0).astype(np.float32) for z in latents])


def diff(assessor: QualityAssessor, real_scores: np.ndarray,
         gen_image: np.ndarray) -> float:
    """|mean(real scores) - score(generated image)|."""
    gen_image = np.asarray(gen_image, dtype=np.float32)
    if gen_image.ndim == 3:
        gen_image = gen_image[None]
    score_gen = float(assessor.score(gen_image)[0])
    return abs(float(np.mean(real_scores)) - score_gen)


def optimize_latent(model: FlowModel, assessor: QualityAssessor,
                    real_images: np.ndarray, config: OptConfig) -> OptResult:
    """Algorithm: project references, then descend Diff by plain gradient steps.

    Each iteration decodes the current latent (batch of one), scores it,
    backpropagates Diff through the assessor and the inverse flow, applies
    Z := Z - epsilon * grad, and exits once the measured Diff falls below
    thresh. A non-finite Diff or gradient aborts, returning the last finite
    latent.
    """
    real_images = np.asarray(real_images, dtype=np.float32)
    if real_images.shape[0] < config.n_refs:
        raise DataError(f"need {config.n_refs} reference images, got "
                        f"{real_images.shape[0]}")
    refs = real_images[:config.n_refs]
    mean_real = float(np.mean(assessor.score(refs)))
    z = [t[None].copy() for t in init_latent(model, refs).tensors]
    result = OptResult(latent=MultiScaleLatent([t[0].copy() for t in z]))
    for step in range(config.max_step):
        z_t = [ad.tensor(t, requires_grad=True) for t in z]
        with ad.Tape() as tape:
            image = model.inverse_t(z_t)
            score_gen = assessor.score_t(image)
            gap = ad.absolute(ad.add(score_gen, -mean_real)).sum()
            diff_value = float(gap.data)
            if not math.isfinite(diff_value):
                break  # return last finite latent
            tape.backward(gap)
        grads = [t.grad for t in z_t]
        if any(g is None or not np.all(np.isfinite(g)) for g in grads):
            break
        result.trace.append((step, diff_value, float(score_gen.data[0])))
        z = [(t - np.float32(config.epsilon) * g).astype(np.float32)
             for t, g in zip(z, grads)]
        result.latent = MultiScaleLatent([t[0].copy() for t in z])
        if diff_value < config.thresh:
            result.exited_early = True
            break
    return result


def write_trace(path: str, trace: list[tuple[int, float, float]]) -> None:
    """Diff trace to CSV (step, diff, score_gen); deterministic formatting."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "diff", "score_gen"])
        for step, d, s in trace:
            writer.writerow([step, f"{d:.6f}", f"{s:.6f}"])
    os.replace(tmp, path)
