"""Save-format channels, recovery metrics, and the steganalysis stand-in.

The two channels model what happens to a generated image on disk: the
quantized-u8 channel rounds to 8-bit integers (PNG-like, lossy for the
latent bits), the float32-lossless channel keeps every bit (TIFF-like).
Metrics follow the usual conventions: Acc is the XNOR agreement rate of
embedded and extracted payloads, bpp is payload bits per image pixel, and
PE is the minimum over detection thresholds of (P_FA + P_MD) / 2.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .codec import BitPlan, Payload, embed, extract, plan_capacity
from .errors import ConfigError, DataError, ShapeError
from .flow import FlowModel, MultiScaleLatent, from_domain, to_domain

QUANTIZED_U8 = "quantized-u8"
FLOAT_LOSSLESS = "float32-lossless"


@dataclass(frozen=True)
class Channel:
    """A save-format model; `kind` is one of the two module constants."""

    kind: str

    def __post_init__(self):
        if self.kind not in (QUANTIZED_U8, FLOAT_LOSSLESS):
            raise ConfigError(f"unknown channel kind {self.kind!r}")

    def __str__(self) -> str:
        return self.kind


def parse_channel(text: str) -> Channel:
    """CLI spellings: 'u8' and 'float', plus the full kind names."""
    aliases = {"u8": QUANTIZED_U8, QUANTIZED_U8: QUANTIZED_U8,
               "float": FLOAT_LOSSLESS, FLOAT_LOSSLESS: FLOAT_LOSSLESS}
    key = text.strip().lower()
    if key not in aliases:
        raise ConfigError(f"unknown channel {text!r} (expected 'u8' or 'float')")
    return Channel(kind=aliases[key])


def apply_channel(image: np.ndarray, channel: Channel) -> np.ndarray:
    """Push a model-domain image through the save format.

    quantized-u8: map to [0, 255], clip, round half-to-even, map back.
    float32-lossless: bit-exact identity.
    """
    image = np.asarray(image, dtype=np.float32)
    if channel.kind == FLOAT_LOSSLESS:
        return image.copy()
    px = np.clip(from_domain(image), 0.0, 255.0)
    return to_domain(np.rint(px))


def acc(secret: Payload | np.ndarray, secret_star: Payload | np.ndarray) -> float:
    """Fraction of positions where the bit sequences agree (XNOR rate)."""
    a = secret.bits if isinstance(secret, Payload) else np.asarray(secret, dtype=np.uint8)
    b = (secret_star.bits if isinstance(secret_star, Payload)
         else np.asarray(secret_star, dtype=np.uint8))
    if a.shape != b.shape:
        raise ShapeError(f"acc: length mismatch, {a.size} vs {b.size}")
    if a.size == 0:
        raise ShapeError("acc: empty sequences have no agreement rate")
    return float(np.mean(a == b))


@dataclass
class RoundtripResult:
    stego_image: np.ndarray
    received_image: np.ndarray
    extracted: Payload
    acc: float


def roundtrip(model: FlowModel, z: MultiScaleLatent, payload: Payload,
              plan: BitPlan, channel: Channel) -> RoundtripResult:
    """embed -> decode -> channel -> encode -> extract, with Acc."""
    z_s = embed(z, payload, plan)
    image = model.decode(z_s)
    received = apply_channel(image, channel)
    z_star = model.encode(received)
    extracted = extract(z_star, plan, payload.length)
    agreement = acc(payload, extracted) if payload.length else float("nan")
    return RoundtripResult(stego_image=image, received_image=received,
                           extracted=extracted, acc=agreement)


# -- steganalysis stand-in -----------------------------------------------------------

_LAPLACIAN = np.array([[0.0, -1.0, 0.0],
                       [-1.0, 4.0, -1.0],
                       [0.0, -1.0, 0.0]], dtype=np.float32)


def _residual_features(images: np.ndarray) -> np.ndarray:
    """Per-image stats of the 3x3 Laplacian high-pass residual."""
    images = np.asarray(images, dtype=np.float32)
    n, h, w, c = images.shape
    pad = np.zeros((n, h + 2, w + 2, c), dtype=np.float32)
    pad[:, 1:h + 1, 1:w + 1, :] = images
    res = np.zeros_like(images)
    for dy in range(3):
        for dx in range(3):
            k = _LAPLACIAN[dy, dx]
            if k:
                res += k * pad[:, dy:dy + h, dx:dx + w, :]
    m2 = np.mean(res * res, axis=(1, 2))
    m4 = np.mean(res ** 4, axis=(1, 2))
    feats = [
        np.mean(np.abs(res), axis=(1, 2)),
        np.sqrt(m2),
        np.max(np.abs(res), axis=(1, 2)),
        m4 / np.maximum(m2 * m2, 1e-12),
    ]
    return np.concatenate(feats, axis=1)


class Steganalyzer:
    """Logistic classifier over high-pass residual features.

    Higher score means 'judged stego'; the decision threshold is swept by
    the PE report rather than fixed. The holdout fraction used at training
    time is remembered so pe() evaluates the same held-out prefix.
    """

    def __init__(self, mean: np.ndarray, std: np.ndarray, weights: np.ndarray,
                 bias: float, holdout_fraction: float):
        self.mean = mean
        self.std = std
        self.weights = weights
        self.bias = bias
        self.holdout_fraction = holdout_fraction

    def scores(self, images: np.ndarray) -> np.ndarray:
        f = (_residual_features(np.asarray(images, dtype=np.float32)) - self.mean)
        return (f / self.std) @ self.weights + self.bias


def _holdout_count(n: int, fraction: float) -> int:
    return max(1, int(n * fraction))


def _check_two_classes(cover: np.ndarray, stego: np.ndarray):
    if cover.shape[0] == 0 or stego.shape[0] == 0:
        raise DataError(f"need both classes, got {cover.shape[0]} cover and "
                        f"{stego.shape[0]} stego images")
    if cover.shape[1:] != stego.shape[1:]:
        raise DataError(f"class dims differ: {cover.shape[1:]} vs {stego.shape[1:]}")


def train_steganalyzer(cover: np.ndarray, stego: np.ndarray, seed: int = 0,
                       holdout_fraction: float = 0.5, steps: int = 400,
                       learning_rate: float = 0.05) -> Steganalyzer:
    """Fit the logistic stand-in on everything past the held-out prefix."""
    cover = np.asarray(cover, dtype=np.float32)
    stego = np.asarray(stego, dtype=np.float32)
    _check_two_classes(cover, stego)
    n_hold_c = _holdout_count(cover.shape[0], holdout_fraction)
    n_hold_s = _holdout_count(stego.shape[0], holdout_fraction)
    if cover.shape[0] - n_hold_c < 1 or stego.shape[0] - n_hold_s < 1:
        raise DataError("not enough images for a held-out split")
    train_x = np.concatenate([_residual_features(cover[n_hold_c:]),
                              _residual_features(stego[n_hold_s:])])
    train_y = np.concatenate([np.zeros(cover.shape[0] - n_hold_c),
                              np.ones(stego.shape[0] - n_hold_s)])
    mean = train_x.mean(axis=0)
    std = np.maximum(train_x.std(axis=0), 1e-6)
    xs = (train_x - mean) / std
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x57E6)))
    w = rng.normal(0.0, 0.01, xs.shape[1])
    b = 0.0
    for _ in range(steps):
        logits = xs @ w + b
        p = 1.0 / (1.0 + np.exp(-logits))
        grad_logit = (p - train_y) / len(train_y)
        w -= learning_rate * (xs.T @ grad_logit)
        b -= learning_rate * float(grad_logit.sum())
    return Steganalyzer(mean=mean, std=std, weights=w, bias=b,
                        holdout_fraction=holdout_fraction)


def pe(classifier: Steganalyzer, cover: np.ndarray,
       stego: np.ndarray) -> "PeReport":
    """PE on the held-out prefix of each class (the part training never saw)."""
    cover = np.asarray(cover, dtype=np.float32)
    stego = np.asarray(stego, dtype=np.float32)
    _check_two_classes(cover, stego)
    n_hold_c = _holdout_count(cover.shape[0], classifier.holdout_fraction)
    n_hold_s = _holdout_count(stego.shape[0], classifier.holdout_fraction)
    return pe_from_scores(classifier.scores(cover[:n_hold_c]),
                          classifier.scores(stego[:n_hold_s]))


@dataclass
class PeReport:
    """Threshold sweep: PE = min over thresholds of (P_FA + P_MD) / 2."""

    pe: float
    thresholds: np.ndarray
    p_fa: np.ndarray
    p_md: np.ndarray
    auc: float


def pe_from_scores(cover_scores: np.ndarray, stego_scores: np.ndarray) -> PeReport:
    """Sweep every midpoint of sorted unique scores, plus both extremes.

    Stego is the positive class: P_FA is the cover fraction above the
    threshold, P_MD the stego fraction at or below it.
    """
    cover_scores = np.asarray(cover_scores, dtype=np.float64).reshape(-1)
    stego_scores = np.asarray(stego_scores, dtype=np.float64).reshape(-1)
    if cover_scores.size == 0 or stego_scores.size == 0:
        raise DataError("PE needs scores for both classes")
    pooled = np.unique(np.concatenate([cover_scores, stego_scores]))
    mids = (pooled[:-1] + pooled[1:]) / 2.0 if pooled.size > 1 else np.zeros(0)
    thresholds = np.concatenate([[pooled[0] - 1.0], mids, [pooled[-1] + 1.0]])
    p_fa = np.array([(cover_scores > t).mean() for t in thresholds])
    p_md = np.array([(stego_scores <= t).mean() for t in thresholds])
    pe = float(np.min((p_fa + p_md) / 2.0))
    # rank-based AUC (probability a stego score outranks a cover score)
    both = np.concatenate([cover_scores, stego_scores])
    order = np.argsort(both, kind="stable")
    ranks = np.empty_like(both)
    ranks[order] = np.arange(1, both.size + 1)
    # average ties so the statistic is exact
    sorted_scores = both[order]
    i = 0
    while i < both.size:
        j = i
        while j + 1 < both.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = (i + 1 + j + 1) / 2.0
        i = j + 1
    n_c, n_s = cover_scores.size, stego_scores.size
    u = ranks[n_c:].sum() - n_s * (n_s + 1) / 2.0
    auc = float(u / (n_c * n_s))
    return PeReport(pe=pe, thresholds=thresholds, p_fa=p_fa, p_md=p_md, auc=auc)


# -- experiment table ------------------------------------------------------------------


@dataclass
class ExperimentRow:
    plan: str
    bpp: float
    acc_mean: float | None
    acc_std: float | None
    trials: int
    channel: str
    source: str


def default_plans() -> list[BitPlan]:
    """The 0-bpp baseline plus the plan ladder used in the report tables."""
    return [
        BitPlan(),
        BitPlan(use_sign=True),
        BitPlan(alpha=22, beta=22),
        BitPlan(alpha=14, beta=22),
        BitPlan(alpha=0, beta=22),
        BitPlan(use_sign=True, alpha=0, beta=22),
    ]


def default_channels() -> list[Channel]:
    return [Channel(FLOAT_LOSSLESS), Channel(QUANTIZED_U8)]


def run_table(model: FlowModel, plans: list[BitPlan], channels: list[Channel],
              trials: int = 32, seed: int = 0, temperature: float = 0.7,
              optimizer=None) -> list[ExperimentRow]:
    """One row per (plan, channel, source); paired trials share latents and bits.

    `optimizer`, when given, is a callable (rng) -> MultiScaleLatent adding
    an 'optimized' latent source beside the random delta-scaled one.
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    h, w = model.config.height, model.config.width
    n_floats = model.config.latent_size
    max_bits = max(p.bits_per_float for p in plans) * n_floats if plans else 0
    root = np.random.SeedSequence((seed, 0x7AB1E))
    sources = ["random"] + (["optimized"] if optimizer is not None else [])
    latents: dict[str, list[MultiScaleLatent]] = {s: [] for s in sources}
    bitstreams: list[np.ndarray] = []
    for trial_seq in root.spawn(trials):
        rng = np.random.default_rng(trial_seq)
        latents["random"].append(model.sample_latent(rng, temperature))
        bitstreams.append(rng.integers(0, 2, max_bits, dtype=np.uint8))
        if optimizer is not None:
            latents["optimized"].append(optimizer(rng))
    rows = []
    for plan in plans:
        total_bits, bpp = plan_capacity(plan, n_floats, (h, w))
        for channel in channels:
            for source in sources:
                if total_bits == 0:
                    rows.append(ExperimentRow(plan=str(plan), bpp=0.0, acc_mean=None,
                                              acc_std=None, trials=trials,
                                              channel=str(channel), source=source))
                    continue
                accs = []
                for t in range(trials):
                    payload = Payload(bits=bitstreams[t][:total_bits])
                    result = roundtrip(model, latents[source][t], payload, plan, channel)
                    accs.append(result.acc)
                accs = np.array(accs)
                rows.append(ExperimentRow(plan=str(plan), bpp=bpp,
                                          acc_mean=float(accs.mean()),
                                          acc_std=float(accs.std()),
                                          trials=trials, channel=str(channel),
                                          source=source))
    return rows


def write_table(path: str, rows: list[ExperimentRow]) -> None:
    """Experiment table CSV; fixed column order, deterministic formatting."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["plan", "bpp", "acc_mean", "acc_std", "channel",
                         "source", "trials"])
        for r in rows:
            writer.writerow([
                r.plan, f"{r.bpp:.4f}",
                "" if r.acc_mean is None else f"{r.acc_mean:.6f}",
                "" if r.acc_std is None else f"{r.acc_std:.6f}",
                r.channel, r.source, r.trials,
            ])
    os.replace(tmp, path)


def write_pe_report(path: str, report: PeReport) -> None:
    """ROC sweep CSV: one row per threshold, with PE and AUC in the header row."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"# pe={report.pe:.6f}", f"auc={report.auc:.6f}"])
        writer.writerow(["threshold", "p_fa", "p_md"])
        for t, fa, md in zip(report.thresholds, report.p_fa, report.p_md):
            writer.writerow([f"{t:.6f}", f"{fa:.6f}", f"{md:.6f}"])
    os.replace(tmp, path)


def bit_plane_agreement(model: FlowModel, channel: Channel, trials: int = 64,
                        seed: int = 0, temperature: float = 0.7) -> np.ndarray:
    """Mean per-fraction-bit agreement (index 0..22) across full-plan trials.

    Embeds a full 0:22 payload each trial and measures, per fraction bit
    index, how often the extracted bit matches the embedded one.
    """
    plan = BitPlan(alpha=0, beta=22)
    n_floats = model.config.latent_size
    agreement = np.zeros(23, dtype=np.float64)
    root = np.random.SeedSequence((seed, 0xB17))
    for trial_seq in root.spawn(trials):
        rng = np.random.default_rng(trial_seq)
        z = model.sample_latent(rng, temperature)
        payload = Payload.random(rng, 23 * n_floats)
        result = roundtrip(model, z, payload, plan, channel)
        sent = payload.bits.reshape(n_floats, 23)
        got = result.extracted.bits.reshape(n_floats, 23)
        # slot j within a float holds fraction bit (22 - j)
        per_slot = (sent == got).mean(axis=0)
        agreement += per_slot[::-1]
    return agreement / trials
