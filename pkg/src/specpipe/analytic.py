"""Closed-form throughput model for early-exit self-speculative decoding.

Conventions used throughout:
  alpha       per-token draft acceptance rate, in [0, 1]
  gamma       draft length per round (draft-then-verify schedules)
  n_layers    decoder depth N of the full model
  exit_depth  layer E at which the draft head exits, 1 <= E <= N

Verification of a gamma-token draft batch is assumed to cost one full forward
regardless of gamma (flat batched verification), and drafting one token costs
the E/N fraction of a full forward. All speedups are relative to plain
autoregressive decoding with the full model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class CostModel:
    """Wall-clock cost of one full-model forward and one draft forward.

    t_draft = 0 is allowed as the free-drafts limit; t_target must be positive.
    """

    t_target: float
    t_draft: float

    def __post_init__(self):
        if self.t_target <= 0.0:
            raise ValueError("t_target must be positive")
        if self.t_draft < 0.0:
            raise ValueError("t_draft must be non-negative")


@dataclass(frozen=True)
class SpeedupParams:
    """Parameter bundle (alpha, gamma, n_layers, exit_depth) for the speedup laws."""

    alpha: float
    gamma: int
    n_layers: int
    exit_depth: int

    def __post_init__(self):
        _check_alpha(self.alpha)
        _check_gamma(self.gamma)
        _check_depths(self.n_layers, self.exit_depth)


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha!r}")


def _check_gamma(gamma: int) -> None:
    if not isinstance(gamma, int) or isinstance(gamma, bool) or gamma < 1:
        raise ValueError(f"gamma must be an integer >= 1, got {gamma!r}")


def _check_depths(n_layers: int, exit_depth: int) -> None:
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    if not 1 <= exit_depth <= n_layers:
        raise ValueError(
            f"exit_depth must lie in [1, n_layers], got {exit_depth} with N={n_layers}"
        )


def n_stages(n_layers: int, exit_depth: int) -> int:
    """ceil(N / E): number of pipeline stages; a remainder forms its own stage."""
    _check_depths(n_layers, exit_depth)
    return -(-n_layers // exit_depth)


def expected_accept_len(alpha: float, gamma: int) -> float:
    """Expected number of accepted drafts per round of gamma i.i.d. trials.

    Equals alpha * (1 - alpha**gamma) / (1 - alpha); at alpha = 1 the limit is
    gamma (every draft accepted).
    """
    _check_alpha(alpha)
    _check_gamma(gamma)
    if alpha == 1.0:
        return float(gamma)
    return alpha * (1.0 - alpha**gamma) / (1.0 - alpha)


def overall_acceptance(alpha: float, gamma: int) -> float:
    """Fraction of drafted tokens that get accepted, counting the drafts wasted
    after the first rejection of a round: expected_accept_len / gamma."""
    return expected_accept_len(alpha, gamma) / gamma


def sd_gain(cost: CostModel, alpha: float, gamma: int) -> float:
    """Classic speculative-decoding gain with flat verification cost:

        t_target / (gamma * t_draft + t_target) * (expected_accept_len + 1)
    """
    _check_alpha(alpha)
    _check_gamma(gamma)
    e = expected_accept_len(alpha, gamma)
    return cost.t_target / (gamma * cost.t_draft + cost.t_target) * (e + 1.0)


def _accepted_per_round_factor(alpha: float, gamma: int) -> float:
    # (1 - alpha**(gamma+1)) / (1 - alpha) == expected_accept_len + 1,
    # written to stay finite at the alpha -> 1 limit.
    if alpha == 1.0:
        return float(gamma + 1)
    return (1.0 - alpha ** (gamma + 1)) / (1.0 - alpha)


def eesd_speedup(params: SpeedupParams, cache_reuse: bool = False) -> float:
    """Draft-then-verify speedup when drafting costs E/N of a forward per token.

    With cache_reuse the verification forward skips the first E layers already
    computed by the draft pass, replacing gamma*E + N by gamma*E + N - E in the
    denominator. Off by default.
    """
    a, g = params.alpha, params.gamma
    n, e = params.n_layers, params.exit_depth
    denom = g * e + n - (e if cache_reuse else 0)
    return _accepted_per_round_factor(a, g) * n / denom


def ppsd_speedup(alpha: float, n_layers: int, exit_depth: int) -> float:
    """Verify-while-draft pipeline speedup:

        N / (alpha * E + (1 - alpha) * ceil(N/E) * E)

    An accepted token costs one stage of latency; a rejection costs a full
    pipeline refill. Equals N/E at alpha = 1 and 1 at alpha = 0 when E
    divides N.
    """
    _check_alpha(alpha)
    s = n_stages(n_layers, exit_depth)
    e = exit_depth
    return n_layers / (alpha * e + (1.0 - alpha) * s * e)


def ppsd_reference_speedup(
    alpha: float, n_layers: int, exit_depth: int, exit_stage: int
) -> float:
    """Reference extrapolation of ppsd_speedup to a draft head exiting after
    exit_stage stages (k * E layers):

        N / (alpha * k * E + (1 - alpha) * ceil(N/E) * E)

    This is a derived formula for the simulator's deeper-exit mode, not one of
    the core closed forms; exit_stage = 1 recovers ppsd_speedup.
    """
    _check_alpha(alpha)
    s = n_stages(n_layers, exit_depth)
    if not 1 <= exit_stage <= s - 1:
        raise ValueError(f"exit_stage must lie in [1, {s - 1}], got {exit_stage}")
    e = exit_depth
    return n_layers / (alpha * exit_stage * e + (1.0 - alpha) * s * e)


def ppsd_over_eesd_lambda(params: SpeedupParams) -> float:
    """Ratio of the pipeline speedup to the draft-then-verify speedup:

        (1 - alpha) * (gamma*E + N)
        ---------------------------------------------------
        [alpha*E + (1 - alpha)*ceil(N/E)*E] * (1 - alpha**(gamma+1))

    At alpha = 1 this returns the limit of the ratio, (gamma + N/E) / (gamma + 1).
    """
    a, g = params.alpha, params.gamma
    n, e = params.n_layers, params.exit_depth
    s = n_stages(n, e)
    if a == 1.0:
        return (g + n / e) / (g + 1.0)
    num = (1.0 - a) * (g * e + n)
    den = (a * e + (1.0 - a) * s * e) * (1.0 - a ** (g + 1))
    return num / den


def unimodal_peak(values: list[float]) -> int:
    """Index of the unique maximum of a strictly-rise-then-strictly-fall
    sequence. Raises if the sequence is not shaped that way, so shape checks
    over gamma sweeps cannot silently pass on a flat or wiggly curve."""
    if not values:
        raise ValueError("empty sequence")
    peak = max(range(len(values)), key=values.__getitem__)
    for i in range(peak):
        if not values[i] < values[i + 1]:
            raise ValueError(f"not rising at index {i} before the peak")
    for i in range(peak, len(values) - 1):
        if not values[i] > values[i + 1]:
            raise ValueError(f"not falling at index {i} after the peak")
    return peak


def eesd_best_gamma(alpha: float, n_layers: int, exit_depth: int, gamma_max: int = 64) -> int:
    """Draft length maximizing eesd_speedup over 1..gamma_max."""
    _check_alpha(alpha)
    best_g, best_v = 1, -math.inf
    for g in range(1, gamma_max + 1):
        v = eesd_speedup(SpeedupParams(alpha, g, n_layers, exit_depth))
        if v > best_v:
            best_g, best_v = g, v
    return best_g
