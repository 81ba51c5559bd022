"""Server-side aggregation and target-network synchronisation maths."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from fclsim.encoder import LayoutMismatchError, ParamVector, ema_update, param_l1_distance

MAX_PTNU_STEPS = 1_000_000


def aggregate_params(models: Sequence[tuple[ParamVector, float]]) -> ParamVector:
    """Sample-count weighted average ``sum(n_c / n * f_c)``."""
    if not models:
        raise ValueError("nothing to aggregate")
    layout = models[0][0].layout
    if any(p.layout != layout for p, _ in models):
        raise LayoutMismatchError("cannot aggregate models with different layouts")
    weights = np.array([float(n) for _, n in models])
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("sample counts must be non-negative with a positive sum")
    first = models[0][0].values
    if all(np.array_equal(p.values, first) for p, _ in models[1:]):
        return models[0][0].copy()
    acc = np.zeros_like(first)
    for (p, _), w in zip(models, weights / weights.sum()):
        acc += w * p.values
    return ParamVector(acc, layout)


def ptnu_steps(d0: float, d_target: float, m_d: float) -> int:
    """Closed-form step count of :func:`ptnu` (geometric contraction)."""
    if d0 <= d_target:
        return 0
    if d_target == 0:
        raise ValueError("zero target distance is only reached in the limit")
    return max(0, math.ceil(math.log(d_target / d0) / math.log(m_d)))


def ptnu(online: ParamVector, target: ParamVector, d_target: float, m_d: float, *, return_steps: bool = False):
    """Pull ``target`` toward ``online`` by repeated EMA until their mean-l1 distance is <= ``d_target``.

    A zero ``d_target`` with a non-zero starting distance returns ``online``
    itself (the limit of the iteration).
    """
    if d_target < 0 or not math.isfinite(d_target):
        raise ValueError(f"target distance must be finite and >= 0, got {d_target}")
    if not 0.0 < m_d < 1.0:
        raise ValueError(f"m_d must be in (0,1), got {m_d}")
    if not (np.all(np.isfinite(online.values)) and np.all(np.isfinite(target.values))):
        raise ValueError("ptnu inputs must be finite")
    xi = target
    dist = param_l1_distance(online, xi)
    steps = 0
    if dist > d_target and d_target == 0.0:
        xi = online.copy()
    else:
        while dist > d_target:
            xi = ema_update(xi, online, m_d)
            dist = param_l1_distance(online, xi)
            steps += 1
            if steps > MAX_PTNU_STEPS:
                raise RuntimeError("ptnu failed to converge")
    return (xi, steps) if return_steps else xi


def client_distance(global_online: ParamVector, prev_target: ParamVector) -> float:
    """Client-side distance between the fresh global online encoder and last round's local target."""
    return param_l1_distance(global_online, prev_target)


def predict_distance(dp: Sequence[float], alpha: float) -> tuple[float, float]:
    """Return ``(DP, alpha * DP)`` where DP is the mean of the client distances."""
    if len(dp) == 0:
        raise ValueError("no client distances to average")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    DP = float(np.mean(dp))
    return DP, alpha * DP


def calibrate_alpha(d_exact: float, DP: float, alpha: float = 1.0) -> float:
    """``d_exact / DP``; keeps ``alpha`` when both are zero."""
    if DP == 0:
        if d_exact == 0:
            return alpha
        raise ZeroDivisionError("cannot calibrate against a zero predicted distance")
    if DP < 0 or d_exact < 0:
        raise ValueError("distances must be non-negative")
    return d_exact / DP
