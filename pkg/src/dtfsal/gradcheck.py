"""Finite-difference verification of autograd rules.

Central differences in float64 at h=1e-5 against tape gradients; every
differentiable op and every composite block registers a small case here so
the CLI and the test suite exercise one shared list.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def numeric_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = DEFAULT_STEP,
) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``fn()`` w.r.t. each tensor."""
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g.reshape(t.data.shape))
    return grads


ABS_NOISE_FLOOR = 2e-8  # central-difference noise at h=1e-5 in float64


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst per-element relative error, ignoring sub-noise discrepancies.

    Central differences at h=1e-5 carry ~1e-9 absolute noise through deep
    graphs, which would read as large *relative* error on gradient elements
    that are essentially zero; discrepancies below ABS_NOISE_FLOOR are
    therefore not scored. Any real backward-rule defect produces errors on
    the scale of the gradient itself, far above the floor (the corrupted
    negative-control test relies on this).
    """
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric)) + 1e-6
    rel = np.where(diff > ABS_NOISE_FLOOR, diff / denom, 0.0)
    return float(np.max(rel)) if rel.size else 0.0


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = DEFAULT_STEP,
) -> float:
    """Max relative error between tape and finite-difference gradients."""
    for t in tensors:
        t.zero_grad()
    with GradTape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = []
    for t in tensors:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(t.grad.copy())
        t.zero_grad()
    numeric = numeric_gradients(fn, tensors, step)
    return max(max_relative_error(a, n) for a, n in zip(analytic, numeric))


@dataclass
class GradCase:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


_REGISTRY: list[GradCase] = []


def register_case(name: str):
    def deco(build):
        _REGISTRY.append(GradCase(name, build))
        return build

    return deco


def registered_cases() -> list[GradCase]:
    # Import registers the built-in cases exactly once.
    from . import gradcheck_cases  # noqa: F401

    return list(_REGISTRY)


def run_suite(
    name_filter: str = "",
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    tol: float = DEFAULT_TOL,
    step: float = DEFAULT_STEP,
) -> list[tuple[str, float, bool]]:
    """Run every registered case on every seed; returns (name, max_err, ok)."""
    results = []
    for case in registered_cases():
        if name_filter and name_filter.lower() not in case.name.lower():
            continue
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            fn, tensors = case.build(rng)
            worst = max(worst, check_gradients(fn, tensors, step))
        results.append((case.name, worst, worst < tol))
    return results
