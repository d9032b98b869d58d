"""Bit-exact payload embedding in the IEEE-754 planes of latent floats.

Each float32 latent value is a 32-bit word: bit 31 is the sign, bits 30..23
the exponent, bits 22..0 the fraction (bit 22 most significant). A BitPlan
names the hideable bits used: optionally the sign, plus a fraction range
[alpha:beta]. Exponent bits are never written; touching them wrecks the
decoded image.

Wire contract, frozen here: latent floats are traversed in flattening order
(levels first to last, each row-major); within a float the sign bit is
consumed first, then fraction bits from beta down to alpha. Floats past the
end of the payload are left bit-identical, so extraction needs the true
payload bit length, carried out of band.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, CodecError, ConfigError
from .flow import MultiScaleLatent

LATENT_MAGIC = b"SFZ1"
LATENT_VERSION = 1
SIGN_BIT = 31
FRACTION_HIGH = 22


@dataclass(frozen=True)
class BitPlan:
    """Which bits of each latent float carry payload.

    `alpha`/`beta` bound the fraction range (both None for sign-only or
    empty plans). The empty plan (no sign, no range) is the 0-bpp baseline.
    """

    use_sign: bool = False
    alpha: int | None = None
    beta: int | None = None

    def __post_init__(self):
        if (self.alpha is None) != (self.beta is None):
            raise ConfigError("plan must set both alpha and beta or neither")
        if self.alpha is not None:
            if not (0 <= self.alpha <= self.beta <= FRACTION_HIGH):
                raise ConfigError(f"plan needs 0 <= alpha <= beta <= {FRACTION_HIGH}, "
                                  f"got {self.alpha}:{self.beta}")

    @property
    def bits_per_float(self) -> int:
        bits = 1 if self.use_sign else 0
        if self.alpha is not None:
            bits += self.beta - self.alpha + 1
        return bits

    def bit_positions(self) -> list[int]:
        """Fill order within one float: sign first, then beta down to alpha."""
        positions = [SIGN_BIT] if self.use_sign else []
        if self.alpha is not None:
            positions.extend(range(self.beta, self.alpha - 1, -1))
        return positions

    def __str__(self) -> str:
        parts = []
        if self.use_sign:
            parts.append("S")
        if self.alpha is not None:
            parts.append(f"{self.alpha}:{self.beta}")
        return ",".join(parts) if parts else "none"


def parse_plan(text: str) -> BitPlan:
    """Parse plan descriptors: 'S', 'S,0:22', '14:22', or 'none'."""
    cleaned = text.strip().replace(" ", "")
    if cleaned.lower() in ("none", ""):
        return BitPlan()
    use_sign = False
    alpha = beta = None
    for part in cleaned.split(","):
        if part.upper() == "S":
            use_sign = True
        elif ":" in part:
            lo, _, hi = part.partition(":")
            try:
                alpha, beta = int(lo), int(hi)
            except ValueError:
                raise ConfigError(f"bad fraction range {part!r} in plan {text!r}")
        else:
            raise ConfigError(f"bad plan component {part!r} in plan {text!r} "
                              f"(expected 'S', 'a:b', or 'none')")
    return BitPlan(use_sign=use_sign, alpha=alpha, beta=beta)


@dataclass
class Payload:
    """A bit sequence; bytes pack MSB-first for file I/O."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8).reshape(-1)
        if self.bits.size and self.bits.max() > 1:
            raise CodecError("payload bits must be 0 or 1")

    @property
    def length(self) -> int:
        return int(self.bits.size)

    @classmethod
    def from_bytes(cls, data: bytes, bit_length: int) -> "Payload":
        if bit_length < 0 or bit_length > 8 * len(data):
            raise CodecError(f"bit_length {bit_length} outside 0..{8 * len(data)} "
                             f"for {len(data)} bytes")
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:bit_length]
        return cls(bits=bits)

    def to_bytes(self) -> bytes:
        return np.packbits(self.bits).tobytes()

    @classmethod
    def random(cls, rng: np.random.Generator, nbits: int) -> "Payload":
        return cls(bits=rng.integers(0, 2, nbits, dtype=np.uint8))


def float_to_bits(x: np.ndarray) -> np.ndarray:
    """float32 array -> uint32 words in IEEE-754 binary32 layout."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise CodecError("latent floats must be finite (NaN/Inf have reserved "
                         "exponent fields)")
    return x.view(np.uint32).copy()


def bits_to_float(words: np.ndarray) -> np.ndarray:
    """Inverse of float_to_bits: uint32 words -> float32 array."""
    words = np.ascontiguousarray(words, dtype=np.uint32)
    return words.view(np.float32).copy()


def plan_capacity(plan: BitPlan, n_floats: int,
                  image_dims: tuple[int, int]) -> tuple[int, float]:
    """(total payload bits, bits-per-pixel) for a plan over n_floats latents."""
    total = plan.bits_per_float * n_floats
    h, w = image_dims
    return total, total / float(h * w)


def _slot_counts(length: int, bits_per_float: int, slot: int) -> int:
    # number of floats whose slot-th hideable bit falls inside the payload
    if length <= slot:
        return 0
    return (length - slot + bits_per_float - 1) // bits_per_float


def embed(z: MultiScaleLatent, payload: Payload, plan: BitPlan) -> MultiScaleLatent:
    """Write payload bits into the plan's bit positions, in wire order.

    Floats beyond the payload keep every bit; exponent fields are never
    touched by construction.
    """
    flat = z.flatten()
    capacity = plan.bits_per_float * flat.size
    if payload.length > capacity:
        raise CapacityError(f"payload is {payload.length} bits but plan "
                            f"[{plan}] holds {capacity} bits over {flat.size} floats")
    words = float_to_bits(flat)
    positions = plan.bit_positions()
    b = plan.bits_per_float
    for slot, pos in enumerate(positions):
        count = _slot_counts(payload.length, b, slot)
        if count == 0:
            continue
        vals = payload.bits[slot::b].astype(np.uint32)
        keep = np.uint32(~(1 << pos) & 0xFFFFFFFF)
        words[:count] = (words[:count] & keep) | (vals << np.uint32(pos))
    shapes = [t.shape for t in z.tensors]
    return MultiScaleLatent.from_flat(bits_to_float(words), shapes,
                                      temperature=z.temperature)


def extract(z_star: MultiScaleLatent, plan: BitPlan, length: int) -> Payload:
    """Read `length` bits from the same positions, in the same order."""
    flat = z_star.flatten()
    capacity = plan.bits_per_float * flat.size
    if length < 0 or length > capacity:
        raise CapacityError(f"requested {length} bits but plan [{plan}] holds "
                            f"{capacity} bits over {flat.size} floats")
    words = float_to_bits(flat)
    bits = np.zeros(length, dtype=np.uint8)
    b = plan.bits_per_float
    for slot, pos in enumerate(plan.bit_positions()):
        count = _slot_counts(length, b, slot)
        if count == 0:
            continue
        bits[slot::b] = (words[:count] >> np.uint32(pos)) & np.uint32(1)
    return Payload(bits=bits)


# -- latent file format -----------------------------------------------------------


def latent_to_bytes(z: MultiScaleLatent) -> bytes:
    """Header (magic, version, L, temperature, per-level dims) + LE float32 words."""
    temp = 0.0 if z.temperature is None else float(z.temperature)
    head = struct.pack("<4sIIf", LATENT_MAGIC, LATENT_VERSION, len(z.tensors), temp)
    dims = b"".join(struct.pack("<III", *t.shape) for t in z.tensors)
    body = z.flatten().astype("<f4").tobytes()
    return head + dims + body


def latent_from_bytes(data: bytes) -> MultiScaleLatent:
    head_size = struct.calcsize("<4sIIf")
    if len(data) < head_size:
        raise CodecError(f"latent blob truncated at header ({len(data)} bytes)")
    magic, version, levels, temp = struct.unpack_from("<4sIIf", data)
    if magic != LATENT_MAGIC:
        raise CodecError(f"bad latent magic {magic!r}")
    if version != LATENT_VERSION:
        raise CodecError(f"unsupported latent version {version}")
    dims_size = levels * struct.calcsize("<III")
    if len(data) < head_size + dims_size:
        raise CodecError("latent blob truncated in shape table")
    shapes = [struct.unpack_from("<III", data, head_size + i * 12) for i in range(levels)]
    total = sum(h * w * c for h, w, c in shapes)
    body = data[head_size + dims_size:]
    if len(body) != 4 * total:
        raise CodecError(f"latent body holds {len(body) // 4} words, shape table "
                         f"needs {total}")
    flat = np.frombuffer(body, dtype="<f4").astype(np.float32)
    return MultiScaleLatent.from_flat(flat, shapes,
                                      temperature=None if temp == 0.0 else temp)


def save_latent(path: str, z: MultiScaleLatent) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(latent_to_bytes(z))
    os.replace(tmp, path)


def load_latent(path: str) -> MultiScaleLatent:
    with open(path, "rb") as f:
        return latent_from_bytes(f.read())
