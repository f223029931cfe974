"""Core speculative-sampling primitives.

The accept/resample rule lives here: a draft token d sampled from the draft
distribution p is accepted iff a uniform draw r satisfies r <= min(1, q[d]/p[d])
against the target distribution q, and a rejected draft is replaced by a sample
from the residual distribution max(0, q - p) / Z. Composing the two paths
reproduces q exactly, which is what makes speculative decoding lossless.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream

SUM_TOLERANCE = 1e-9
_RESIDUAL_FLOOR = 1e-12


class DistributionError(ValueError):
    """Raised when a vector does not describe a valid probability distribution."""


class DegenerateResidualError(ValueError):
    """Raised when q <= p pointwise leaves no residual mass to sample from."""


@dataclass(frozen=True, eq=False)
class ProbVec:
    """A fixed probability vector over token ids 0..len-1.

    Entries must be non-negative and sum to 1 within SUM_TOLERANCE. There is
    no silent renormalization; use ProbVec.from_weights when the caller wants
    an explicit one.
    """

    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 1:
            raise DistributionError(f"expected a 1-d vector, got shape {arr.shape}")
        if arr.size < 2:
            raise DistributionError("distribution needs at least 2 entries")
        if np.any(arr < 0.0):
            raise DistributionError("negative probability mass")
        total = float(arr.sum())
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise DistributionError(f"probabilities sum to {total!r}, not 1")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    @classmethod
    def from_weights(cls, weights) -> "ProbVec":
        """Explicitly renormalize non-negative weights into a ProbVec."""
        arr = np.asarray(weights, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise DistributionError("weights must be a 1-d vector of length >= 2")
        if np.any(arr < 0.0):
            raise DistributionError("negative weight")
        total = float(arr.sum())
        if total <= 0.0:
            raise DistributionError("weights sum to zero")
        return cls(arr / total)

    def __len__(self) -> int:
        return int(self.probs.size)

    def __getitem__(self, token: int) -> float:
        return float(self.probs[token])


def sample_token(dist: ProbVec, rng: RngStream) -> int:
    """Inverse-CDF sample; consumes exactly one uniform draw.

    Token i owns the half-open interval [cum_{i-1}, cum_i), so zero-probability
    tokens are never selected.
    """
    u = rng.uniform()
    cum = np.cumsum(dist.probs)
    idx = int(np.searchsorted(cum, u, side="right"))
    if idx >= len(dist):  # guard the 1e-9 sum slack at the top end
        idx = len(dist) - 1
    return idx


def accept_draft(p_at_token: float, q_at_token: float, rng: RngStream) -> bool:
    """Accept a draft with probability min(1, q/p); one uniform draw."""
    if not 0.0 <= p_at_token <= 1.0 or not 0.0 <= q_at_token <= 1.0:
        raise ValueError("token probabilities must lie in [0, 1]")
    if p_at_token == 0.0:
        raise ValueError("draft token has zero probability under the draft model")
    r = rng.uniform()
    if q_at_token == 0.0:
        # the grid uniform can land on exactly 0.0, which r <= q/p would
        # accept; a token with no target mass must never pass
        return False
    return r <= min(1.0, q_at_token / p_at_token)


def residual_distribution(p: ProbVec, q: ProbVec) -> ProbVec:
    """Normalized positive part of q - p, the distribution to resample from
    after a rejection."""
    if len(p) != len(q):
        raise DistributionError("draft and target distributions differ in length")
    diff = np.maximum(q.probs - p.probs, 0.0)
    z = float(diff.sum())
    if z <= _RESIDUAL_FLOOR:
        raise DegenerateResidualError("q <= p pointwise; residual has no mass")
    return ProbVec(diff / z)


def greedy_match(p: ProbVec, q: ProbVec) -> tuple[bool, int]:
    """Deterministic verification: accept iff both argmaxes agree.

    Ties break toward the lowest token id on both sides. Returns (accepted,
    argmax of q), the second element being the token the target model commits.
    """
    if len(p) != len(q):
        raise DistributionError("draft and target distributions differ in length")
    top_p = int(np.argmax(p.probs))
    top_q = int(np.argmax(q.probs))
    return top_p == top_q, top_q
