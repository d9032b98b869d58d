"""Acceptance gate: one test per shipping criterion.

Each test computes its result at the stated tolerance, records a
[PASS]/[FAIL] line for the terminal summary, and then asserts, so a red
criterion still leaves a readable one-line verdict in the report.
"""

import time

import numpy as np
import pytest

import stegflow.autodiff as ad
import stegflow.channel as ch
from conftest import record_acceptance
from helpers import check_grad, check_grad_subset, perturb_model
from stegflow.cli import main as cli_main
from stegflow.codec import (BitPlan, Payload, embed, extract, float_to_bits,
                            plan_capacity)
from stegflow.flow import FlowConfig, FlowModel, to_domain
from stegflow.latentopt import OptConfig, optimize_latent
from test_autodiff import OP_CASES
from test_channel import brute_force_pe

_EXPONENT_MASK = np.uint32(0x7F800000)


def _verdict(ok: bool, number: int, text: str) -> str:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {text}"
    record_acceptance(line)
    return line


def test_criterion_01_bijectivity(flow16, dataset16):
    started = time.monotonic()
    images = to_domain(dataset16.split("eval")[:64])
    latents, _ = flow16.forward(images)
    image_err = float(np.max(np.abs(flow16.inverse(latents) - images)))

    rng = np.random.default_rng(np.random.SeedSequence((41, 0)))
    latent_err = 0.0
    for _ in range(64):
        z = flow16.sample_latent(rng, 0.7)
        z_back = flow16.encode(flow16.decode(z))
        latent_err = max(latent_err, float(np.max(np.abs(z.flatten() - z_back.flatten()))))
    elapsed = time.monotonic() - started

    ok = image_err < 1e-4 and latent_err < 1e-4 and elapsed < 60.0
    line = _verdict(ok, 1, "bijectivity on trained 16x16 L=3: "
                    f"image err {image_err:.2e}, latent err {latent_err:.2e} "
                    f"(tol 1e-4), 64 images each way in {elapsed:.1f}s (< 60s)")
    assert ok, line


def test_criterion_02_logdet_vs_dense_jacobian():
    model = FlowModel(FlowConfig(height=4, width=4, levels=2, steps=2), init_seed=5)
    perturb_model(model, seed=5, scale=0.1)
    rng = np.random.default_rng(np.random.SeedSequence((42, 0)))
    dim = 4 * 4 * 3
    worst = 0.0
    for _ in range(8):
        x = rng.normal(0.0, 0.3, (1, 4, 4, 3)).astype(np.float32)

        def flat_forward(v64):
            tensors, _ = model.forward_t(ad.tensor(v64.reshape(1, 4, 4, 3)))
            return np.concatenate([t.data.reshape(-1) for t in tensors])

        h = 1e-4
        jac = np.zeros((dim, dim))
        base = x.astype(np.float64).reshape(-1)
        for j in range(dim):
            up, down = base.copy(), base.copy()
            up[j] += h
            down[j] -= h
            jac[:, j] = (flat_forward(up) - flat_forward(down)) / (2 * h)
        # permutations make negative determinants legitimate; only |det| matters
        _, numeric = np.linalg.slogdet(jac)

        _, logdet = model.forward_t(ad.tensor(x))
        analytic = float(np.sum(logdet.data))  # batch of one
        worst = max(worst, abs(analytic - numeric))

    ok = worst < 1e-2
    line = _verdict(ok, 2, "analytic log-det vs dense numerical Jacobian on "
                    f"4x4x3: worst abs gap {worst:.2e} over 8 inputs (tol 1e-2)")
    assert ok, line


def test_criterion_03_gradcheck(flow16, assessor16):
    assessor, _ = assessor16
    shapes = flow16.config.latent_shapes()
    sizes = [int(np.prod(s)) for s in shapes]
    rng = np.random.default_rng(np.random.SeedSequence((43, 0)))
    z0 = np.concatenate([rng.normal(size=(1,) + s).reshape(-1) for s in shapes]) * 0.5

    def build_diff(zflat):
        tensors, offset = [], 0
        for s, n in zip(shapes, sizes):
            seg = ad.narrow(zflat.reshape((z0.size,)), 0, offset, n)
            tensors.append(seg.reshape((1,) + s))
            offset += n
        image = flow16.inverse_t(tensors)
        score = assessor.score_t(image)
        return ad.absolute(ad.add(score, -3.0)).sum()

    failure = None
    worst_op = worst_e2e = float("nan")
    try:
        worst_op = max(check_grad(build, x0, rel_tol=1e-3, h=1e-3)
                       for _, build, x0 in OP_CASES)
        # h=1e-4: central differences at 1e-3 hit visible truncation error on
        # this sharply curved composite, while the analytic gradient matches a
        # float64 re-derivation to ~1e-7.
        worst_e2e = check_grad_subset(build_diff, z0, n_coords=16, rel_tol=1e-2,
                                      h=1e-4, seed=43)
    except AssertionError as exc:
        failure = str(exc).splitlines()[0]

    ok = failure is None
    detail = (f"{len(OP_CASES)} op cases worst rel {worst_op:.2e} (tol 1e-3); "
              f"grad of Diff through assessor + inverse flow worst rel "
              f"{worst_e2e:.2e} (tol 1e-2)" if ok else failure)
    line = _verdict(ok, 3, f"gradcheck: {detail}")
    assert ok, line


def test_criterion_04_codec_exactness(flow16):
    shapes = flow16.config.latent_shapes()
    plans = [BitPlan(use_sign=True),
             BitPlan(use_sign=True, alpha=0, beta=22),
             BitPlan(alpha=14, beta=22),
             BitPlan(alpha=22, beta=22)]
    n_floats = flow16.config.latent_size
    rng = np.random.default_rng(np.random.SeedSequence((44, 0)))
    trips = 0
    bit_errors = 0
    exponents_clean = True
    for plan in plans:
        capacity, _ = plan_capacity(plan, n_floats, (16, 16))
        for _ in range(250):
            z = flow16.sample_latent(rng, 1.0)
            payload = Payload.random(rng, int(rng.integers(1, capacity + 1)))
            z_s = embed(z, payload, plan)
            got = extract(z_s, plan, payload.length)
            bit_errors += int(np.sum(got.bits != payload.bits))
            before = float_to_bits(z.flatten()) & _EXPONENT_MASK
            after = float_to_bits(z_s.flatten()) & _EXPONENT_MASK
            exponents_clean = exponents_clean and bool(np.array_equal(before, after))
            trips += 1

    capacities = {str(p): plan_capacity(p, n_floats, (16, 16))[1]
                  for p in plans + [BitPlan(alpha=0, beta=22)]}
    expected = {"S": 3.0, "S,0:22": 72.0, "14:22": 27.0, "0:22": 69.0}
    caps_ok = all(capacities[k] == v for k, v in expected.items())

    ok = trips == 1000 and bit_errors == 0 and exponents_clean and caps_ok
    line = _verdict(ok, 4, f"codec: {trips} randomized round trips across 4 "
                    f"plans, {bit_errors} bit errors; exponent mask unchanged: "
                    f"{exponents_clean}; bpp table S=3, S,0:22=72, 14:22=27, "
                    f"0:22=69 exact: {caps_ok}")
    assert ok, line


def _acc(rows, plan: str, channel: str) -> float:
    row = next(r for r in rows if r.plan == plan and r.channel == channel
               and r.source == "random")
    return row.acc_mean


def test_criterion_05_channel_ordering(table32):
    shared = ["S", "22:22", "14:22", "0:22", "S,0:22"]
    pairs = {p: (_acc(table32, p, ch.FLOAT_LOSSLESS), _acc(table32, p, ch.QUANTIZED_U8))
             for p in shared}
    ordering_ok = all(lossless >= u8 for lossless, u8 in pairs.values())
    trend_ok = _acc(table32, "22:22", ch.FLOAT_LOSSLESS) >= \
        _acc(table32, "0:22", ch.FLOAT_LOSSLESS) - 0.02
    summary = ", ".join(f"{p}: {l:.3f}>={u:.3f}" for p, (l, u) in pairs.items())

    ok = ordering_ok and trend_ok
    line = _verdict(ok, 5, "32 paired trials, lossless >= u8 per plan "
                    f"({summary}); Acc(22:22) >= Acc(0:22) - 0.02 lossless: "
                    f"{trend_ok}")
    assert ok, line


def test_criterion_06_high_plane_reliability(table32):
    value = _acc(table32, "22:22", ch.FLOAT_LOSSLESS)
    ok = value >= 0.95
    line = _verdict(ok, 6, f"plan 22:22 on lossless channel, trained model: "
                    f"mean Acc {value:.4f} over 32 trials (>= 0.95, "
                    f"no magnitude restriction needed)")
    assert ok, line


def test_criterion_07_optimizer_behavior(flow16, dataset16, assessor16, opt_runs):
    first, last = [], []
    per_seed_pass = 0
    for run in opt_runs:
        diffs = [row[1] for row in run.trace]
        q = max(1, len(diffs) // 4)
        lo, hi = diffs[:q], diffs[-q:]
        first.extend(lo)
        last.extend(hi)
        if float(np.median(hi)) <= float(np.median(lo)):
            per_seed_pass += 1
    pooled_ok = float(np.median(last)) <= float(np.median(first))

    assessor, _ = assessor16
    refs = to_domain(dataset16.split("eval")[:3])
    huge = optimize_latent(flow16, assessor, refs,
                           OptConfig(thresh=1e6, max_step=50))
    early_ok = huge.exited_early and len(huge.trace) == 1

    ok = pooled_ok and early_ok
    line = _verdict(ok, 7, "8 seeds: median Diff last quartile "
                    f"{float(np.median(last)):.3f} <= first quartile "
                    f"{float(np.median(first)):.3f} ({per_seed_pass}/8 seeds "
                    f"individually); early exit with thresh above initial "
                    f"Diff: {early_ok}")
    assert ok, line


def test_criterion_08_pe_oracle():
    rng = np.random.default_rng(np.random.SeedSequence((48, 0)))
    exact = True
    for _ in range(4):
        cover = rng.normal(0.0, 1.0, int(rng.integers(50, 500)))
        stego = rng.normal(rng.uniform(0, 2), 1.0, int(rng.integers(50, 500)))
        exact = exact and ch.pe_from_scores(cover, stego).pe == brute_force_pe(cover, stego)

    gauss = ch.pe_from_scores(rng.normal(0.0, 1.0, 4000),
                              rng.normal(2.0, 1.0, 4000)).pe
    gauss_ok = abs(gauss - 0.1587) < 0.02

    ok = exact and gauss_ok
    line = _verdict(ok, 8, f"PE sweep equals brute-force enumeration on <= 1e3 "
                    f"scores: {exact}; N(0,1) vs N(2,1) PE {gauss:.4f} "
                    f"(0.1587 +- 0.02)")
    assert ok, line


def test_criterion_09_null_payload_steganalysis(null_pool):
    clf = ch.train_steganalyzer(null_pool[:1024], null_pool[1024:], seed=0)
    report = ch.pe(clf, null_pool[:1024], null_pool[1024:])
    ok = report.pe >= 0.45
    line = _verdict(ok, 9, f"zero-payload steganalysis: held-out PE "
                    f"{report.pe:.4f} (>= 0.45), AUC {report.auc:.3f}, "
                    f"1024 images per class")
    assert ok, line


def test_criterion_10_evaluate_reproducibility(tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("height = 8\nwidth = 8\nlevels = 2\nsteps = 2\n"
                   "epochs = 2\nsynth_images = 64\ntrials = 2\nimages = 8\n")
    codes = [cli_main(["train", "--config", str(cfg), "--seed", "3",
                       "--out", str(tmp_path / "train")])]
    runs = []
    for name in ("a", "b"):
        codes.append(cli_main(
            ["evaluate", "--config", str(cfg), "--seed", "3",
             "--checkpoint", str(tmp_path / "train" / "checkpoint.ckpt"),
             "--out", str(tmp_path / name)]))
        out = tmp_path / name
        if (out / "table.csv").is_file():
            runs.append(((out / "table.csv").read_bytes(),
                         (out / "pe_report.csv").read_bytes()))
    commands_ok = all(c == 0 for c in codes)
    table_same = len(runs) == 2 and runs[0][0] == runs[1][0]
    pe_same = len(runs) == 2 and runs[0][1] == runs[1][1]

    ok = commands_ok and table_same and pe_same
    line = _verdict(ok, 10, f"cmd_evaluate twice with one seed (exit codes "
                    f"{codes}): table.csv byte-identical: {table_same}, "
                    f"pe_report.csv byte-identical: {pe_same} (reduced "
                    f"config; suite runtime bound reported by pytest)")
    assert ok, line
