"""Rényi-composition accountant for repeated Gaussian-mechanism steps.

Each step is charged as a full (non-subsampled) Gaussian mechanism with
noise multiplier ``sigma``; T steps compose to RDP ``T * alpha / (2 sigma^2)``
at order alpha, converted with ``eps = rdp + log(1/delta) / (alpha - 1)``.
No amplification by sampling is claimed, so the result upper-bounds the true
epsilon of shuffled-batch DP-SGD.
"""
from __future__ import annotations

import math

from .errors import ArgumentError


def _check(sigma: float, steps: int, delta: float) -> None:
    if not (sigma > 0 and math.isfinite(sigma)):
        raise ArgumentError("noise multiplier must be finite and > 0")
    if steps < 0 or int(steps) != steps:
        raise ArgumentError("steps must be a non-negative integer")
    if not 0 < delta < 1:
        raise ArgumentError("delta must lie in (0, 1)")


def epsilon_at_order(alpha: float, sigma: float, steps: int, delta: float) -> float:
    """The alpha-specific bound; minimised by :func:`account_epsilon`."""
    _check(sigma, steps, delta)
    if not alpha > 1:
        raise ArgumentError("Rényi order must exceed 1")
    return steps * alpha / (2 * sigma**2) + math.log(1 / delta) / (alpha - 1)


def optimal_order(sigma: float, steps: int, delta: float) -> float:
    _check(sigma, steps, delta)
    if steps == 0:
        return math.inf
    return 1 + sigma * math.sqrt(2 * math.log(1 / delta) / steps)


def account_epsilon(sigma: float, steps: int, delta: float) -> float:
    """Closed-form minimum over alpha > 1 of the composed RDP bound."""
    _check(sigma, steps, delta)
    if steps == 0:
        return 0.0
    return steps / (2 * sigma**2) + math.sqrt(2 * steps * math.log(1 / delta)) / sigma


def noise_for_epsilon(epsilon: float, steps: int, delta: float) -> float:
    """Smallest noise multiplier whose ``account_epsilon`` equals ``epsilon``."""
    if not epsilon > 0:
        raise ArgumentError("target epsilon must be > 0")
    if steps < 1:
        raise ArgumentError("steps must be >= 1")
    _check(1.0, steps, delta)
    # epsilon is a quadratic in u = 1/sigma
    b = math.sqrt(2 * steps * math.log(1 / delta))
    u = (-b + math.sqrt(b * b + 2 * steps * epsilon)) / steps
    return 1.0 / u
