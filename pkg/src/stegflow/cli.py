"""Command-line workbench: train, optimize-latent, embed, extract, evaluate, steganalyze.

Every command resolves a RunConfig from defaults, an optional flat
key=value config file, and CLI overrides; writes its artifacts atomically
into --out; and drops the resolved config beside them for provenance.
Exit codes: 0 success, 2 usage/config errors, 1 runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import channel as ch
from . import figures
from .codec import (BitPlan, Payload, embed, extract, load_latent, parse_plan,
                    plan_capacity, save_latent)
from .errors import ConfigError, StegflowError
from .flow import FlowConfig, FlowModel, from_domain, to_domain
from .latentopt import OptConfig, optimize_latent, train_assessor, write_trace
from .training import (TrainConfig, ingest_images, synth_dataset, train,
                       write_loss_curve)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

CONFIG_FILENAME = "run_config.txt"


@dataclass(frozen=True)
class RunConfig:
    """Resolved knobs for one command run; serialized next to every output."""

    height: int = 16
    width: int = 16
    levels: int = 3
    steps: int = 4
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    checkpoint_interval: int = 10
    synth_images: int = 384
    epsilon: float = 1e-3
    n_refs: int = 3
    thresh: float = 0.1
    max_step: int = 100
    plan: str = "S,0:22"
    channel: str = "u8"
    temperature: float = 0.7
    trials: int = 32
    images: int = 512
    seed: int = 0

    def flow_config(self) -> FlowConfig:
        return FlowConfig(height=self.height, width=self.width,
                          levels=self.levels, steps=self.steps)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, seed=self.seed,
                           checkpoint_interval=self.checkpoint_interval)

    def opt_config(self) -> OptConfig:
        return OptConfig(epsilon=self.epsilon, max_step=self.max_step,
                         thresh=self.thresh, n_refs=self.n_refs)

    def bit_plan(self) -> BitPlan:
        return parse_plan(self.plan)

    def channel_model(self) -> ch.Channel:
        return ch.Channel(ch.parse_channel(self.channel).kind)


def parse_config_file(path: str) -> dict[str, str]:
    """Flat key = value lines; blank lines and # comments ignored."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """defaults <- config file <- CLI flags, with typed coercion per field."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    resolved: dict = {}
    file_values = parse_config_file(args.config) if getattr(args, "config", None) else {}
    for key, text in file_values.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        resolved[key] = _coerce(key, text, fields[key].type)
    for key in fields:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    config = RunConfig(**resolved)
    # validate eagerly so bad values are usage errors, not mid-run surprises
    config.flow_config()
    config.train_config()
    config.opt_config()
    config.bit_plan()
    config.channel_model()
    if config.trials < 1:
        raise ConfigError(f"trials must be >= 1, got {config.trials}")
    if config.images < 4:
        raise ConfigError(f"images must be >= 4, got {config.images}")
    if config.synth_images < 2:
        raise ConfigError(f"synth_images must be >= 2, got {config.synth_images}")
    return config


def _coerce(key: str, text: str, annotation):
    kind = {"int": int, "float": float, "str": str}[str(annotation)]
    try:
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None


def write_run_config(out_dir: str, config: RunConfig) -> str:
    path = os.path.join(out_dir, CONFIG_FILENAME)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        for key, value in sorted(dataclasses.asdict(config).items()):
            f.write(f"{key} = {value}\n")
    os.replace(tmp, path)
    return path


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _load_model(path: str) -> FlowModel:
    if not os.path.isfile(path):
        raise ConfigError(f"checkpoint not found: {path}")
    return FlowModel.load(path)


def _real_images(config: RunConfig, data_dir: str | None, tag: str,
                 dims: tuple[int, int]):
    """Training-domain real images: an ingest directory or the synthetic set."""
    if data_dir is not None:
        if not os.path.isdir(data_dir):
            raise ConfigError(f"dataset path not found: {data_dir}")
        dataset = ingest_images(data_dir, eval_fraction=0.2)
    else:
        dataset = synth_dataset(seed=config.seed, n=config.synth_images,
                                dims=dims, eval_fraction=0.2)
    if dataset.dims != dims:
        raise ConfigError(f"dataset is {dataset.dims[0]}x{dataset.dims[1]} but the "
                          f"model expects {dims[0]}x{dims[1]}")
    return dataset if tag == "dataset" else to_domain(dataset.split(tag))


def _generated_pool(model: FlowModel, config: RunConfig, n: int,
                    tag: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, tag)))
    return np.stack([model.sample(rng, config.temperature)[1] for _ in range(n)])


def _write_image(path: str, image_domain: np.ndarray, channel: ch.Channel):
    """u8 -> real PNG; float -> raw .npy of the domain image (lossless)."""
    tmp = f"{path}.tmp"
    if channel.kind == ch.QUANTIZED_U8:
        pixels = from_domain(ch.apply_channel(image_domain, channel))
        img = Image.fromarray(pixels.astype(np.uint8), mode="RGB")
        with open(tmp, "wb") as f:
            img.save(f, format="PNG")
    else:
        with open(tmp, "wb") as f:
            np.save(f, image_domain.astype(np.float32))
    os.replace(tmp, path)


def _read_image(path: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise ConfigError(f"stego image not found: {path}")
    if path.endswith(".npy"):
        arr = np.load(path)
        if arr.dtype != np.float32 or arr.ndim != 3:
            raise ConfigError(f"{path}: expected a float32 (H, W, 3) array")
        return arr
    with Image.open(path) as img:
        return to_domain(np.asarray(img.convert("RGB"), dtype=np.float32))


def _write_json(path: str, payload: dict):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _write_bytes(path: str, data: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# -- commands ---------------------------------------------------------------------


def cmd_train(args) -> int:
    config = resolve_config(args)
    out = _ensure_out(args.out)
    dataset = _real_images(config, args.data, "dataset",
                           dims=(config.height, config.width))
    model = FlowModel(config.flow_config(), init_seed=config.seed)
    result = train(model, dataset, config.train_config(), checkpoint_dir=out)
    ckpt = os.path.join(out, "checkpoint.ckpt")
    model.save(ckpt)
    curve_csv = os.path.join(out, "loss_curve.csv")
    write_loss_curve(curve_csv, result.curve)
    figures.plot_loss_curve(result.curve, os.path.join(out, "loss_curve.png"))
    write_run_config(out, config)
    print(f"trained {config.epochs} epochs on {len(dataset.images)} images")
    print(f"eval nll: {result.initial_eval_bpd:.4f} -> {result.final_eval_bpd:.4f} bits/dim")
    print(f"wrote {ckpt}")
    print(f"wrote {curve_csv}")
    return EXIT_OK


def cmd_optimize_latent(args) -> int:
    config = resolve_config(args)
    out = _ensure_out(args.out)
    model = _load_model(args.checkpoint)
    real = _real_images(config, args.data, "train",
                        dims=(model.config.height, model.config.width))
    n = min(len(real), 128)
    generated = _generated_pool(model, config, n, tag=0xA55E)
    assessor, holdout_acc = train_assessor(real[:n], generated, seed=config.seed)
    result = optimize_latent(model, assessor, real[:config.n_refs],
                             config.opt_config())
    latent_path = os.path.join(out, "latent.bin")
    save_latent(latent_path, result.latent)
    trace_csv = os.path.join(out, "trace.csv")
    write_trace(trace_csv, result.trace)
    figures.plot_trace(result.trace, os.path.join(out, "trace.png"))
    write_run_config(out, config)
    first, last = result.trace[0][1], result.trace[-1][1]
    print(f"assessor holdout accuracy: {holdout_acc:.3f}")
    print(f"diff: {first:.4f} -> {last:.4f} over {len(result.trace)} steps"
          + (" (early exit)" if result.exited_early else ""))
    print(f"wrote {latent_path}")
    print(f"wrote {trace_csv}")
    return EXIT_OK


def cmd_embed(args) -> int:
    config = resolve_config(args)
    out = _ensure_out(args.out)
    model = _load_model(args.checkpoint)
    plan = config.bit_plan()
    channel = config.channel_model()
    if args.payload is not None:
        if not os.path.isfile(args.payload):
            raise ConfigError(f"payload file not found: {args.payload}")
        with open(args.payload, "rb") as f:
            data = f.read()
        payload = Payload.from_bytes(data, bit_length=8 * len(data))
    else:
        payload = Payload(bits=np.zeros(0, dtype=np.uint8))
    if args.latent is not None:
        z = load_latent(args.latent)
    else:
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x1A7E)))
        z = model.sample_latent(rng, config.temperature)
    z_s = embed(z, payload, plan)
    image = model.decode(z_s)
    stego_name = "stego.png" if channel.kind == ch.QUANTIZED_U8 else "stego.npy"
    stego_path = os.path.join(out, stego_name)
    _write_image(stego_path, image, channel)
    h, w = model.config.height, model.config.width
    capacity, _ = plan_capacity(plan, model.config.latent_size, (h, w))
    bpp = payload.length / (h * w)
    _write_json(os.path.join(out, "metadata.json"), {
        "plan": str(plan), "channel": str(channel),
        "payload_bits": payload.length, "bpp": bpp,
        "height": model.config.height, "width": model.config.width,
        "levels": model.config.levels, "steps": model.config.steps,
    })
    write_run_config(out, config)
    print(f"embedded {payload.length} bits ({bpp:.2f} bpp, capacity {capacity})")
    print(f"wrote {stego_path}")
    return EXIT_OK


def cmd_extract(args) -> int:
    config = resolve_config(args)
    out = _ensure_out(args.out)
    model = _load_model(args.checkpoint)
    meta_path = args.metadata
    if meta_path is None:
        sidecar = os.path.join(os.path.dirname(os.path.abspath(args.stego)),
                               "metadata.json")
        meta_path = sidecar if os.path.isfile(sidecar) else None
    meta = {}
    if meta_path is not None:
        if not os.path.isfile(meta_path):
            raise ConfigError(f"metadata file not found: {meta_path}")
        with open(meta_path) as f:
            meta = json.load(f)
    if args.plan:
        plan = parse_plan(args.plan)
    elif "plan" in meta:
        plan = parse_plan(meta["plan"])
    else:
        plan = config.bit_plan()
    if args.bits is not None:
        bits = args.bits
    elif "payload_bits" in meta:
        bits = int(meta["payload_bits"])
    else:
        raise ConfigError("payload bit length unknown: pass --bits or a "
                          "metadata file recording payload_bits")
    image = _read_image(args.stego)
    z_star = model.encode(image)
    extracted = extract(z_star, plan, bits)
    payload_path = os.path.join(out, "payload.bin")
    _write_bytes(payload_path, extracted.to_bytes())
    write_run_config(out, config)
    print(f"extracted {extracted.length} bits with plan {plan}")
    print(f"wrote {payload_path}")
    if args.reference is not None:
        if not os.path.isfile(args.reference):
            raise ConfigError(f"reference payload not found: {args.reference}")
        with open(args.reference, "rb") as f:
            ref = f.read()
        reference = Payload.from_bytes(ref, bit_length=8 * len(ref))
        if reference.length < extracted.length:
            raise ConfigError(f"reference holds {reference.length} bits, fewer than "
                              f"the {extracted.length} extracted")
        if extracted.length == 0:
            print("acc vs reference: skipped (0 extracted bits)")
        else:
            agreement = ch.acc(extracted.bits, reference.bits[:extracted.length])
            print(f"acc vs reference: {agreement:.4f}")
    return EXIT_OK


def _steganalysis_pools(model: FlowModel, config: RunConfig,
                        plan: BitPlan, channel: ch.Channel):
    """Cover = plain generated; stego = generated with payload (if plan > 0 bpp)."""
    n = config.images
    cover = _generated_pool(model, config, n, tag=0xC0)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x57)))
    capacity, _ = plan_capacity(plan, model.config.latent_size,
                                (model.config.height, model.config.width))
    stego = []
    for _ in range(n):
        z = model.sample_latent(rng, config.temperature)
        if capacity:
            z = embed(z, Payload.random(rng, capacity), plan)
        stego.append(ch.apply_channel(model.decode(z), channel))
    cover = np.stack([ch.apply_channel(img, channel) for img in cover])
    return cover, np.stack(stego)


def cmd_evaluate(args) -> int:
    config = resolve_config(args)
    out = _ensure_out(args.out)
    model = _load_model(args.checkpoint)
    rows = ch.run_table(model, ch.default_plans(), ch.default_channels(),
                        trials=config.trials, seed=config.seed,
                        temperature=config.temperature)
    table_csv = os.path.join(out, "table.csv")
    ch.write_table(table_csv, rows)
    figures.plot_table(rows, os.path.join(out, "table.png"))
    plan = config.bit_plan()
    channel = config.channel_model()
    cover, stego = _steganalysis_pools(model, config, plan, channel)
    clf = ch.train_steganalyzer(cover, stego, seed=config.seed)
    report = ch.pe(clf, cover, stego)
    pe_csv = os.path.join(out, "pe_report.csv")
    ch.write_pe_report(pe_csv, report)
    figures.plot_roc(report, os.path.join(out, "roc.png"))
    write_run_config(out, config)
    print(f"table: {len(rows)} rows over {config.trials} trials")
    print(f"steganalysis at plan {plan} via {channel}: "
          f"PE={report.pe:.4f} AUC={report.auc:.4f}")
    print(f"wrote {table_csv}")
    print(f"wrote {pe_csv}")
    return EXIT_OK


def cmd_steganalyze(args) -> int:
    config = resolve_config(args)
    out = _ensure_out(args.out)
    model = _load_model(args.checkpoint)
    plan = config.bit_plan()
    channel = config.channel_model()
    cover, stego = _steganalysis_pools(model, config, plan, channel)
    clf = ch.train_steganalyzer(cover, stego, seed=config.seed)
    report = ch.pe(clf, cover, stego)
    pe_csv = os.path.join(out, "pe_report.csv")
    ch.write_pe_report(pe_csv, report)
    figures.plot_roc(report, os.path.join(out, "roc.png"))
    write_run_config(out, config)
    print(f"steganalysis at plan {plan} via {channel} on {config.images} "
          f"images per class: PE={report.pe:.4f} AUC={report.auc:.4f}")
    print(f"wrote {pe_csv}")
    return EXIT_OK


# -- argument surface --------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stegflow",
        description="flow-based generative steganography workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a flow model and write a checkpoint")
    _add_common(p)
    p.add_argument("--data", help="directory of raster images (synthetic set if omitted)")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("optimize-latent", help="score-gap descent on a sampled latent")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="real reference images (synthetic set if omitted)")
    p.set_defaults(func=cmd_optimize_latent)

    p = sub.add_parser("embed", help="hide payload bits in a generated image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--payload", help="payload file (omit for a 0 bpp plain image)")
    p.add_argument("--latent", help="saved latent file (sampled if omitted)")
    p.add_argument("--plan", help="bit plan, e.g. S | 14:22 | S,0:22")
    p.add_argument("--channel", choices=["u8", "float"])
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="recover payload bits from a stego image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stego", required=True, help="stego image (.png or .npy)")
    p.add_argument("--metadata", help="metadata sidecar (defaults to stego's dir)")
    p.add_argument("--plan", help="bit plan override")
    p.add_argument("--bits", type=int, help="payload bit length if no metadata")
    p.add_argument("--reference", help="original payload file, prints Acc")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="Acc/bpp table plus a steganalysis report")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trials", type=int)
    p.add_argument("--images", type=int)
    p.add_argument("--plan", help="plan for the steganalysis pools")
    p.add_argument("--channel", choices=["u8", "float"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("steganalyze", help="train the stand-in detector, report PE")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", type=int)
    p.add_argument("--plan", help="bit plan for the stego class")
    p.add_argument("--channel", choices=["u8", "float"])
    p.set_defaults(func=cmd_steganalyze)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"stegflow: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StegflowError as exc:
        print(f"stegflow: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
