from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tape, Tensor, backward


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def gradient_pairs(
    closure: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    coords_per_param: int | None = None,
    seed: int = 0,
    grad_transform: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> tuple[float, list[tuple[str, int, float, float]]]:
    """Loss value and ``(param name, flat index, analytic, numeric)`` for
    every checked coordinate; frozen parameters are skipped."""
    rng = np.random.default_rng(seed)
    saved = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = closure()
    backward(tape, loss)
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.grad[...] = saved[p.name]
    if grad_transform is not None:
        analytic = {name: grad_transform(name, g) for name, g in analytic.items()}

    pairs = []
    for p in params:
        if p.frozen:
            continue
        flat = p.data.reshape(-1)
        n = flat.size
        if coords_per_param is None or coords_per_param >= n:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=coords_per_param, replace=False))
        a_flat = analytic[p.name].reshape(-1)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + eps
            f_plus = closure().item()
            flat[k] = orig - eps
            f_minus = closure().item()
            flat[k] = orig
            pairs.append((p.name, int(k), float(a_flat[k]), (f_plus - f_minus) / (2.0 * eps)))
    return loss.item(), pairs


def gradient_check_report(
    closure: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    coords_per_param: int | None = None,
    seed: int = 0,
    grad_transform: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> dict[str, float]:
    """Compare backward() gradients against central differences.

    ``closure`` must be deterministic and return a scalar tensor. Up to
    ``coords_per_param`` coordinates per parameter are sampled (all when None).
    Frozen parameters are not perturbed and report zero error.
    ``grad_transform`` lets callers tamper with the analytic gradient, which is
    how mutation checks confirm the harness can fail.
    """
    _, pairs = gradient_pairs(closure, params, eps, coords_per_param, seed, grad_transform)
    report = {p.name: 0.0 for p in params}
    for name, _, a, n in pairs:
        report[name] = max(report[name], relative_error(a, n))
    return report


def gradient_check(closure, params, eps: float = 1e-5, **kwargs) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    report = gradient_check_report(closure, params, eps, **kwargs)
    return max(report.values(), default=0.0)
