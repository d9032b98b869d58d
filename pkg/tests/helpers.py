"""Shared test oracles: finite-difference gradients and model perturbation."""

from __future__ import annotations

import numpy as np

from stegflow import autodiff as ad


def fd_gradient(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central finite differences of a scalar-valued f, coordinate by coordinate."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_grad(build, x0: np.ndarray, rel_tol: float = 1e-3, h: float = 1e-3):
    """Compare the float32 tape gradient of scalar build(x) against central
    differences.

    The analytic side runs the ops in their production dtype (float32). The
    finite-difference oracle runs the same graph in float64 so the oracle's
    own rounding noise stays far below the tolerance it enforces.
    """
    x0 = np.asarray(x0, dtype=np.float32)

    def f(arr):
        t = ad.tensor(arr.copy(), dtype=np.float64)
        return float(build(t).data)

    x = ad.tensor(x0.copy(), requires_grad=True, dtype=np.float32)
    with ad.Tape() as tape:
        loss = build(x)
        tape.backward(loss)
    assert x.grad is not None
    analytic = x.grad.astype(np.float64)
    numeric = fd_gradient(f, x0.astype(np.float64), h)
    scale = max(np.sqrt(np.mean(analytic ** 2)), 1e-6)
    worst = 0.0
    for idx in np.ndindex(x0.shape):
        a, n = analytic[idx], numeric[idx]
        if max(abs(a), abs(n)) < 1e-3 * scale:
            continue
        rel = abs(a - n) / max(abs(a), abs(n))
        worst = max(worst, rel)
        assert rel < rel_tol, f"grad mismatch at {idx}: analytic={a}, fd={n}, rel={rel}"
    return worst


def check_grad_subset(build, x0: np.ndarray, n_coords: int = 16,
                      rel_tol: float = 1e-2, h: float = 1e-3, seed: int = 0):
    """Finite-difference check on a random subset of coordinates.

    Same float32-analytic / float64-oracle split as check_grad, for graphs
    too large to difference coordinate by coordinate.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    x = ad.tensor(x0.copy(), requires_grad=True, dtype=np.float32)
    with ad.Tape() as tape:
        tape.backward(build(x))
    analytic = x.grad.astype(np.float64)

    def f(arr):
        return float(build(ad.tensor(arr, dtype=np.float64)).data)

    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(x0.size, size=min(n_coords, x0.size), replace=False)
    base = x0.astype(np.float64).copy()
    flat = base.reshape(-1)
    scale = max(np.sqrt(np.mean(analytic ** 2)), 1e-6)
    checked = 0
    worst = 0.0
    for i in flat_idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(base)
        flat[i] = orig - h
        fm = f(base)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        if max(abs(a), abs(numeric)) < 1e-3 * scale:
            continue
        rel = abs(a - numeric) / max(abs(a), abs(numeric))
        worst = max(worst, rel)
        assert rel < rel_tol, f"grad mismatch at flat index {i}: " \
                              f"analytic={a}, fd={numeric}, rel={rel}"
        checked += 1
    assert checked >= min(4, x0.size), "too few informative coordinates checked"
    return worst


def perturb_model(model, seed: int = 0, scale: float = 0.1):
    """Randomize flow parameters so round-trip tests exercise a non-identity map."""
    rng = np.random.default_rng(seed)
    for name, p in model.parameters():
        if name.endswith("coupling.w1"):
            continue  # already randomly initialized
        p.data = (p.data + rng.normal(0.0, scale, p.data.shape)).astype(np.float32)
    for steps in model.levels:
        for step in steps:
            step.actnorm.initialized = True
    return model
