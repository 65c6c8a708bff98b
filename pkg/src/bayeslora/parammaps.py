"""Standard-deviation parameterizations and their convergence behaviour.

A posterior standard deviation sigma_q must stay positive, so it is
produced from an unconstrained parameter rho through a map: either
``sigma = rho**2`` (square) or ``sigma = log(1 + exp(rho))`` (softplus).
The choice matters: near sigma_q -> 0+ the square map's KL gradient grows
like 1/rho while the softplus map's gradient plateaus near -1, which makes
plain gradient descent on the KL term dramatically slower to open the
posterior up toward the prior scale.  ``convergence_race`` measures that
difference directly.
"""

from __future__ import annotations

import enum
import math

import numpy as np
from scipy.special import expit

__all__ = [
    "ParamMap",
    "apply_map",
    "map_derivative",
    "inverse_map",
    "scalar_kl",
    "kl_grad_rho",
    "convergence_race",
    "race_curve",
]


class ParamMap(enum.Enum):
    SQUARE = "square"
    SOFTPLUS = "softplus"


def apply_map(pmap: ParamMap, rho):
    """Map the raw parameter to a standard deviation.

    Works element-wise on arrays.  Softplus is evaluated overflow-safe:
    for large rho, log(1 + exp(rho)) -> rho without computing exp(rho).
    """
    if pmap is ParamMap.SQUARE:
        return rho * rho
    return np.logaddexp(0.0, rho)


def map_derivative(pmap: ParamMap, rho):
    """d sigma / d rho, element-wise."""
    if pmap is ParamMap.SQUARE:
        return 2.0 * rho
    return expit(rho)


def inverse_map(pmap: ParamMap, sigma):
    """Raw parameter whose image under the map is ``sigma`` (> 0).

    The square map has two preimages; the positive root is returned.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise ValueError("inverse_map requires sigma > 0")
    if pmap is ParamMap.SQUARE:
        out = np.sqrt(sigma)
    else:
        # log(exp(sigma) - 1) = sigma + log(1 - exp(-sigma)), stable for large sigma
        out = sigma + np.log(-np.expm1(-sigma))
    return float(out) if out.ndim == 0 else out


def scalar_kl(pmap: ParamMap, rho: float, sigma_p: float) -> float:
    """KL( N(0, sigma(rho)^2) || N(0, sigma_p^2) ) for one coordinate."""
    sigma = float(apply_map(pmap, rho))
    if sigma <= 0.0:
        raise ValueError("scalar_kl is undefined at sigma = 0")
    return math.log(sigma_p / sigma) + sigma * sigma / (2.0 * sigma_p * sigma_p) - 0.5


def kl_grad_rho(pmap: ParamMap, rho, sigma_p: float):
    """Derivative of :func:`scalar_kl` with respect to rho.

    Square map:    -2/rho + 2 rho^3 / sigma_p^2   (undefined at rho = 0).
    Softplus map:  s(rho) * (sigma/sigma_p^2 - 1/sigma) with s the sigmoid.
    """
    rho_arr = np.asarray(rho, dtype=np.float64)
    if pmap is ParamMap.SQUARE:
        if np.any(rho_arr == 0.0):
            raise ValueError("square-map KL gradient is undefined at rho = 0")
        out = -2.0 / rho_arr + 2.0 * rho_arr**3 / (sigma_p * sigma_p)
    else:
        sigma = np.logaddexp(0.0, rho_arr)
        out = expit(rho_arr) * (sigma / (sigma_p * sigma_p) - 1.0 / sigma)
    return float(out) if out.ndim == 0 else out


def _apply_scalar(pmap: ParamMap, rho: float) -> float:
    if pmap is ParamMap.SQUARE:
        return rho * rho
    if rho > 30.0:
        return rho + math.log1p(math.exp(-rho))
    return math.log1p(math.exp(rho))


def _grad_scalar(pmap: ParamMap, rho: float, sigma_p: float) -> float:
    if pmap is ParamMap.SQUARE:
        return -2.0 / rho + 2.0 * rho**3 / (sigma_p * sigma_p)
    sigma = _apply_scalar(pmap, rho)
    s = 1.0 / (1.0 + math.exp(-rho)) if rho > -30.0 else math.exp(rho)
    return s * (sigma / (sigma_p * sigma_p) - 1.0 / sigma)


def convergence_race(
    pmap: ParamMap,
    sigma_p: float,
    sigma_q0: float,
    lr: float,
    target: float,
    max_steps: int,
) -> int:
    """Plain gradient-descent steps on rho until sigma(rho) >= target.

    Descends the scalar KL alone (no momentum, no schedule) from
    sigma(rho_0) = sigma_q0.  Returns the first step index at which the
    standard deviation reaches the target, 0 if already there, or
    ``max_steps`` if the target is never reached within the budget.
    """
    if sigma_q0 <= 0.0:
        raise ValueError("sigma_q0 must be positive")
    if target > sigma_p:
        raise ValueError("target must not exceed sigma_p")
    if sigma_q0 >= target:
        return 0
    rho = float(inverse_map(pmap, sigma_q0))
    for step in range(1, max_steps + 1):
        rho -= lr * _grad_scalar(pmap, rho, sigma_p)
        if _apply_scalar(pmap, rho) >= target:
            return step
    return max_steps


def race_curve(
    pmap: ParamMap,
    sigma_p: float,
    sigma_q0: float,
    lr: float,
    n_steps: int,
    record_every: int = 1,
) -> list[tuple[int, float]]:
    """(step, sigma_q) trajectory of the race, for plotting/export."""
    if sigma_q0 <= 0.0:
        raise ValueError("sigma_q0 must be positive")
    rho = float(inverse_map(pmap, sigma_q0))
    points = [(0, sigma_q0)]
    for step in range(1, n_steps + 1):
        rho -= lr * _grad_scalar(pmap, rho, sigma_p)
        if step % record_every == 0 or step == n_steps:
            points.append((step, _apply_scalar(pmap, rho)))
    return points
