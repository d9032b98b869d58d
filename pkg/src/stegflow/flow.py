"""Invertible multi-scale flow: an exact image <-> latent bijection.

The model is a stack of levels. Each level squeezes space into channels,
applies K flow steps (actnorm -> invertible 1x1 -> affine coupling), and
splits half of the channels off as an emitted latent; the final level emits
everything. Every transform tracks its analytic log-determinant, so the
model gives exact log-likelihoods under a standard-normal prior.

Both directions are written against the tape ops in `autodiff`, so the
inverse path (latent -> image) is differentiable with respect to the
latents, which the latent optimizer requires.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, ShapeError

HIDDEN_CHANNELS = 64  # coupling subnet width; fixed constant for checkpoint v1
CHECKPOINT_MAGIC = b"SFW1"
CHECKPOINT_VERSION = 1
_PERM_SEED = 0x51E6  # 1x1 permutations derive from this, never stored
_LOG_2PI = float(np.log(2.0 * np.pi))


def to_domain(pixels: np.ndarray) -> np.ndarray:
    """Map [0, 255] pixel values to the model input domain [-0.5, 0.5]."""
    return (np.asarray(pixels, dtype=np.float32) / 255.0 - 0.5).astype(np.float32)


def from_domain(x: np.ndarray) -> np.ndarray:
    """Map model-domain values back to [0, 255] (unclipped, unrounded)."""
    return ((np.asarray(x, dtype=np.float32) + 0.5) * 255.0).astype(np.float32)


def squeeze(x: Tensor) -> Tensor:
    """Space-to-depth: (N, H, W, C) -> (N, H/2, W/2, 4C).

    Each 2x2 block lands in channel order (top-left, top-right,
    bottom-left, bottom-right), i.e. [[a, b], [c, d]] -> (a, b, c, d).
    """
    if len(x.shape) != 4:
        raise ShapeError(f"squeeze: expected (N,H,W,C), got {x.shape}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze: spatial dims must be even, got {h}x{w}")
    y = x.reshape((n, h // 2, 2, w // 2, 2, c))
    y = y.transpose((0, 1, 3, 2, 4, 5))
    return y.reshape((n, h // 2, w // 2, 4 * c))


def unsqueeze(y: Tensor) -> Tensor:
    """Depth-to-space inverse of `squeeze`."""
    if len(y.shape) != 4:
        raise ShapeError(f"unsqueeze: expected (N,H,W,C), got {y.shape}")
    n, h, w, c = y.shape
    if c % 4:
        raise ShapeError(f"unsqueeze: channel count must be divisible by 4, got {c}")
    x = y.reshape((n, h, w, 2, 2, c // 4))
    x = x.transpose((0, 1, 3, 2, 4, 5))
    return x.reshape((n, 2 * h, 2 * w, c // 4))


class ActNorm:
    """Per-channel affine y = exp(logs) * (x + bias).

    The scale is parameterized in log space, so it is strictly positive by
    construction. Fresh instances are the identity; `initialize_from` sets
    data-dependent statistics (zero mean, unit variance per channel).
    """

    def __init__(self, channels: int):
        self.logs = ad.parameter(np.zeros(channels, dtype=np.float32))
        self.bias = ad.parameter(np.zeros(channels, dtype=np.float32))
        self.initialized = False

    def initialize_from(self, x: np.ndarray) -> None:
        mean = x.mean(axis=(0, 1, 2))
        std = x.std(axis=(0, 1, 2))
        self.bias.data = (-mean).astype(np.float32)
        self.logs.data = (-np.log(std + 1e-6)).astype(np.float32)
        self.initialized = True

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        _, h, w, _ = x.shape
        y = ad.scale_channels(ad.shift_channels(x, self.bias), self.logs.exp())
        logdet = ad.mul(self.logs.sum(), float(h * w))
        return y, logdet

    def inverse(self, y: Tensor) -> Tensor:
        x = ad.scale_channels(y, ad.neg(self.logs).exp())
        return ad.shift_channels(x, ad.neg(self.bias))


class Invertible1x1:
    """Invertible 1x1 convolution, LU-parameterized.

    W = P @ (I + L_strict) @ (U_strict + diag(exp(log_d))) with P a fixed
    permutation, so log|det W| = sum(log_d) exactly and a fresh instance is
    the permutation P itself.
    """

    def __init__(self, channels: int, perm_rng: np.random.Generator):
        c = channels
        perm = perm_rng.permutation(c)
        self.perm = np.eye(c, dtype=np.float32)[perm]
        self.lower = ad.parameter(np.zeros((c, c), dtype=np.float32))
        self.upper = ad.parameter(np.zeros((c, c), dtype=np.float32))
        self.log_d = ad.parameter(np.zeros(c, dtype=np.float32))
        self._mask_l = np.tril(np.ones((c, c), dtype=np.float32), k=-1)
        self._mask_u = np.triu(np.ones((c, c), dtype=np.float32), k=1)
        self._eye = np.eye(c, dtype=np.float32)

    def weight_t(self) -> Tensor:
        lower = ad.add(ad.tensor(self._eye), ad.mul(self.lower, ad.tensor(self._mask_l)))
        upper = ad.add(ad.mul(self.upper, ad.tensor(self._mask_u)),
                       ad.diag(self.log_d.exp()))
        return ad.matmul(ad.tensor(self.perm), ad.matmul(lower, upper))

    def weight(self) -> np.ndarray:
        lower = np.eye(len(self.log_d.data)) + self.lower.data * self._mask_l
        upper = self.upper.data * self._mask_u + np.diag(np.exp(self.log_d.data))
        return self.perm.astype(np.float64) @ lower.astype(np.float64) @ upper.astype(np.float64)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        n, h, w, c = x.shape
        y = ad.matmul(x.reshape((n * h * w, c)), self.weight_t().transpose((1, 0)))
        logdet = ad.mul(self.log_d.sum(), float(h * w))
        return y.reshape((n, h, w, c)), logdet

    def inverse(self, y: Tensor) -> Tensor:
        # constant inverse: only gradients w.r.t. y are needed on this path
        n, h, w, c = y.shape
        w_inv = np.linalg.inv(self.weight()).astype(np.float32)
        x = ad.matmul(y.reshape((n * h * w, c)), ad.tensor(w_inv.T))
        return x.reshape((n, h, w, c))


class AffineCoupling:
    """Affine coupling: the first half of the channels parameterizes an
    elementwise affine map of the second half.

    The subnet is two 3x3 convolutions with a ReLU between them; its output
    splits into a tanh-bounded log-scale and a shift. The final convolution
    is zero-initialized, so a fresh coupling is the identity with logdet 0.
    """

    def __init__(self, channels: int, init_rng: np.random.Generator):
        self.ca = channels // 2
        self.cb = channels - self.ca
        hidden = HIDDEN_CHANNELS
        self.w1 = ad.parameter(init_rng.normal(0.0, 0.05, (3, 3, self.ca, hidden)))
        self.b1 = ad.parameter(np.zeros(hidden, dtype=np.float32))
        self.w2 = ad.parameter(np.zeros((3, 3, hidden, 2 * self.cb), dtype=np.float32))
        self.b2 = ad.parameter(np.zeros(2 * self.cb, dtype=np.float32))

    def _subnet(self, xa: Tensor) -> tuple[Tensor, Tensor]:
        h = ad.shift_channels(ad.conv2d(xa, self.w1), self.b1).relu()
        out = ad.shift_channels(ad.conv2d(h, self.w2), self.b2)
        log_scale = ad.narrow(out, 3, 0, self.cb).tanh()
        shift = ad.narrow(out, 3, self.cb, self.cb)
        return log_scale, shift

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        xa = ad.narrow(x, 3, 0, self.ca)
        xb = ad.narrow(x, 3, self.ca, self.cb)
        log_scale, shift = self._subnet(xa)
        yb = ad.add(ad.mul(xb, log_scale.exp()), shift)
        logdet = ad.reduce_sum(log_scale, axis=(1, 2, 3))
        return ad.concat([xa, yb], axis=3), logdet

    def inverse(self, y: Tensor) -> Tensor:
        ya = ad.narrow(y, 3, 0, self.ca)
        yb = ad.narrow(y, 3, self.ca, self.cb)
        log_scale, shift = self._subnet(ya)
        xb = ad.mul(ad.sub(yb, shift), ad.neg(log_scale).exp())
        return ad.concat([ya, xb], axis=3)


class FlowStep:
    """One actnorm -> invertible 1x1 -> coupling unit."""

    def __init__(self, channels: int, name: str,
                 perm_rng: np.random.Generator, init_rng: np.random.Generator):
        self.name = name
        self.actnorm = ActNorm(channels)
        self.mix = Invertible1x1(channels, perm_rng)
        self.coupling = AffineCoupling(channels, init_rng)

    def forward(self, x: Tensor, init_actnorm: bool = False) -> tuple[Tensor, list[Tensor]]:
        if init_actnorm and not self.actnorm.initialized:
            self.actnorm.initialize_from(x.data)
        y, ld1 = self.actnorm.forward(x)
        y.check_finite(f"{self.name}.actnorm")
        y, ld2 = self.mix.forward(y)
        y.check_finite(f"{self.name}.mix")
        y, ld3 = self.coupling.forward(y)
        y.check_finite(f"{self.name}.coupling")
        return y, [ld1, ld2, ld3]

    def inverse(self, y: Tensor) -> Tensor:
        x = self.coupling.inverse(y)
        x.check_finite(f"{self.name}.coupling")
        x = self.mix.inverse(x)
        x.check_finite(f"{self.name}.mix")
        x = self.actnorm.inverse(x)
        x.check_finite(f"{self.name}.actnorm")
        return x

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            (f"{self.name}.actnorm.logs", self.actnorm.logs),
            (f"{self.name}.actnorm.bias", self.actnorm.bias),
            (f"{self.name}.mix.lower", self.mix.lower),
            (f"{self.name}.mix.upper", self.mix.upper),
            (f"{self.name}.mix.log_d", self.mix.log_d),
            (f"{self.name}.coupling.w1", self.coupling.w1),
            (f"{self.name}.coupling.b1", self.coupling.b1),
            (f"{self.name}.coupling.w2", self.coupling.w2),
            (f"{self.name}.coupling.b2", self.coupling.b2),
        ]


@dataclass(frozen=True)
class FlowConfig:
    """Flow architecture: image dims plus level/step counts."""

    height: int = 16
    width: int = 16
    levels: int = 3
    steps: int = 4

    def __post_init__(self):
        if self.levels < 1 or self.steps < 1:
            raise ConfigError(f"levels and steps must be >= 1, got "
                              f"levels={self.levels}, steps={self.steps}")
        div = 2 ** self.levels
        if self.height % div or self.width % div:
            raise ConfigError(f"image dims {self.height}x{self.width} must be "
                              f"divisible by 2^levels = {div}")

    def latent_shapes(self) -> list[tuple[int, int, int]]:
        """Per-level emitted latent shapes; element counts sum to H*W*3."""
        shapes = []
        h, w, c = self.height, self.width, 3
        for level in range(self.levels):
            h, w, c = h // 2, w // 2, 4 * c
            if level < self.levels - 1:
                emit = c // 2
                c -= emit
            else:
                emit = c
            shapes.append((h, w, emit))
        return shapes

    @property
    def latent_size(self) -> int:
        return sum(h * w * c for h, w, c in self.latent_shapes())


@dataclass
class MultiScaleLatent:
    """Ordered per-level latents for one image, with sampling metadata."""

    tensors: list[np.ndarray]
    temperature: float | None = None

    def __post_init__(self):
        self.tensors = [np.asarray(t, dtype=np.float32) for t in self.tensors]

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors)

    def flatten(self) -> np.ndarray:
        """Row-major concatenation, level order first to last."""
        return np.concatenate([t.reshape(-1) for t in self.tensors]).astype(np.float32)

    @classmethod
    def from_flat(cls, flat: np.ndarray, shapes: list[tuple[int, int, int]],
                  temperature: float | None = None) -> "MultiScaleLatent":
        flat = np.asarray(flat, dtype=np.float32).reshape(-1)
        total = sum(h * w * c for h, w, c in shapes)
        if flat.size != total:
            raise ShapeError(f"flat latent has {flat.size} elements, schedule needs {total}")
        tensors, offset = [], 0
        for h, w, c in shapes:
            n = h * w * c
            tensors.append(flat[offset:offset + n].reshape(h, w, c).copy())
            offset += n
        return cls(tensors=tensors, temperature=temperature)

    def copy(self) -> "MultiScaleLatent":
        return MultiScaleLatent([t.copy() for t in self.tensors], self.temperature)


class FlowModel:
    """The multi-scale flow with exact likelihood and checkpointing.

    Permutations inside the 1x1 convolutions derive from a module-level
    seed keyed by (level, step), so a checkpoint reconstructs the model
    from its header plus parameter blocks alone. A trained model is
    immutable under inference calls; only training mutates parameters.
    """

    def __init__(self, config: FlowConfig, init_seed: int = 0):
        self.config = config
        self.levels: list[list[FlowStep]] = []
        init_rng = np.random.default_rng(np.random.SeedSequence(init_seed))
        c = 3
        for li in range(config.levels):
            c *= 4
            steps = []
            for ki in range(config.steps):
                perm_rng = np.random.default_rng(
                    np.random.SeedSequence((_PERM_SEED, li, ki)))
                steps.append(FlowStep(c, f"level{li}.step{ki}", perm_rng, init_rng))
            self.levels.append(steps)
            if li < config.levels - 1:
                c -= c // 2

    # -- core bijection (tape-aware) ------------------------------------------

    def forward_t(self, x: Tensor, init_actnorm: bool = False
                  ) -> tuple[list[Tensor], Tensor]:
        n, h, w, c = self._check_image_shape(x.shape)
        latents: list[Tensor] = []
        logdet: Tensor = ad.tensor(np.zeros(1, dtype=x.data.dtype))
        for li, steps in enumerate(self.levels):
            x = squeeze(x)
            for step in steps:
                x, lds = step.forward(x, init_actnorm=init_actnorm)
                for ld in lds:
                    logdet = ad.add(logdet, ld)
            if li < self.config.levels - 1:
                keep = x.shape[3] // 2
                latents.append(ad.narrow(x, 3, 0, keep))
                x = ad.narrow(x, 3, keep, x.shape[3] - keep)
            else:
                latents.append(x)
        return latents, logdet

    def inverse_t(self, latents: list[Tensor]) -> Tensor:
        shapes = self.config.latent_shapes()
        if len(latents) != len(shapes):
            raise ShapeError(f"expected {len(shapes)} latent levels, got {len(latents)}")
        for li, (z, (h, w, c)) in enumerate(zip(latents, shapes)):
            if tuple(z.shape[1:]) != (h, w, c):
                raise ShapeError(f"level {li}: latent shape {tuple(z.shape[1:])} "
                                 f"does not match schedule {(h, w, c)}")
        x = latents[-1]
        for li in range(self.config.levels - 1, -1, -1):
            if li < self.config.levels - 1:
                x = ad.concat([latents[li], x], axis=3)
            for step in reversed(self.levels[li]):
                x = step.inverse(x)
            x = unsqueeze(x)
        return x

    def log_likelihood_t(self, x: Tensor) -> Tensor:
        """log p(image) = standard-normal log p(Z) + total log-determinant."""
        latents, logdet = self.forward_t(x)
        ll = logdet
        for z in latents:
            d = z.shape[1] * z.shape[2] * z.shape[3]
            sq = ad.reduce_sum(ad.mul(z, z), axis=(1, 2, 3))
            ll = ad.add(ll, ad.add(ad.mul(sq, -0.5), -0.5 * _LOG_2PI * d))
        ll.check_finite("log_likelihood")
        return ll

    # -- numpy front doors ------------------------------------------------------

    def forward(self, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        latents, logdet = self.forward_t(ad.tensor(x))
        n = x.shape[0]
        return [z.data for z in latents], np.broadcast_to(logdet.data, (n,)).copy()

    def inverse(self, latents: list[np.ndarray]) -> np.ndarray:
        return self.inverse_t([ad.tensor(z) for z in latents]).data

    def log_likelihood(self, x: np.ndarray) -> np.ndarray:
        return self.log_likelihood_t(ad.tensor(x)).data

    def encode(self, image: np.ndarray) -> MultiScaleLatent:
        """Single image (H, W, 3) in model domain -> latents."""
        latents, _ = self.forward(np.asarray(image, dtype=np.float32)[None])
        return MultiScaleLatent([z[0] for z in latents])

    def decode(self, latent: MultiScaleLatent) -> np.ndarray:
        """Latents -> single image (H, W, 3) in model domain."""
        return self.inverse([t[None] for t in latent.tensors])[0]

    # -- sampling ---------------------------------------------------------------

    def sample_latent(self, rng: np.random.Generator,
                      temperature: float) -> MultiScaleLatent:
        if temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {temperature}")
        tensors = [rng.normal(0.0, 1.0, (h, w, c)).astype(np.float32) * np.float32(temperature)
                   for h, w, c in self.config.latent_shapes()]
        return MultiScaleLatent(tensors, temperature=temperature)

    def sample(self, rng: np.random.Generator,
               temperature: float) -> tuple[MultiScaleLatent, np.ndarray]:
        latent = self.sample_latent(rng, temperature)
        return latent, self.decode(latent)

    # -- parameters and checkpoints ----------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for steps in self.levels:
            for step in steps:
                out.extend(step.parameters())
        return out

    def initialize_actnorm(self, batch: np.ndarray) -> None:
        self.forward_t(ad.tensor(batch), init_actnorm=True)

    def save(self, path: str) -> None:
        header = struct.pack("<4sIIIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                             self.config.height, self.config.width,
                             self.config.levels, self.config.steps)
        blocks = [p.data.astype("<f4").tobytes() for _, p in self.parameters()]
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as f:
            f.write(header)
            for b in blocks:
                f.write(b)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "FlowModel":
        with open(path, "rb") as f:
            raw = f.read()
        head_size = struct.calcsize("<4sIIIII")
        if len(raw) < head_size:
            raise CheckpointError(f"{path}: truncated header ({len(raw)} bytes)")
        magic, version, h, w, levels, steps = struct.unpack_from("<4sIIIII", raw)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        try:
            config = FlowConfig(height=h, width=w, levels=levels, steps=steps)
        except ConfigError as exc:
            raise CheckpointError(f"{path}: invalid header dims: {exc}") from exc
        model = cls(config)
        offset = head_size
        for name, p in model.parameters():
            nbytes = p.data.size * 4
            if offset + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated at parameter {name}")
            block = np.frombuffer(raw, dtype="<f4", count=p.data.size, offset=offset)
            p.data = block.reshape(p.data.shape).astype(np.float32)
            offset += nbytes
        if offset != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
        for steps_ in model.levels:
            for step in steps_:
                step.actnorm.initialized = True
        return model

    # -- internals ----------------------------------------------------------------

    def _check_image_shape(self, shape) -> tuple[int, int, int, int]:
        cfg = self.config
        if len(shape) != 4 or shape[1:] != (cfg.height, cfg.width, 3):
            raise ShapeError(f"expected images (N, {cfg.height}, {cfg.width}, 3), "
                             f"got {tuple(shape)}")
        return shape
