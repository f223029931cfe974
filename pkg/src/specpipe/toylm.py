"""A deterministic toy language model with a tunable early-exit head.

The "model" is a chain of 64-bit avalanche mixes: a prefix of tokens folds into
a sequence digest, each layer folds its index into that digest, and the final
digest seeds the token logits. There is no learning anywhere; the point is a
next-token distribution that is cheap, fully reproducible, sensitive to every
prefix token, and composable across layer ranges so pipeline stages can pass
partial states around and still agree exactly with a monolithic forward.

The early-exit head returns softmax(target_logits + misalignment * noise),
where the noise is a zero-mean pseudo-random vector keyed by the exit-layer
state. misalignment = 0 makes the draft head agree with the full model exactly;
larger values push the two apart and drive the acceptance rate down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import MASK64, RngStream, derive_seed, mix64, mix64_array
from .speccore import ProbVec

_SEQ_SALT = 0x243F6A8885A308D3
_TOKEN_SALT = 0x13198A2E03707344
_LAYER_SALT = 0x452821E638D01377
_LOGIT_SALT = 0xBE5466CF34E90C6C
_NOISE_SALT = 0xC0AC29B7C97C50DD

_LOGIT_SPREAD = 8.0  # logits uniform in [-4, 4)
_EVAL_PREFIX_LEN = 8

_NP_S11 = np.uint64(11)
_INV_2_53 = 2.0**-53


@dataclass(frozen=True)
class PrefixState:
    """Opaque forward state of some prefix at some layer; just the digest."""

    digest: int


def _softmax(logits: np.ndarray) -> ProbVec:
    z = logits - logits.max()
    w = np.exp(z)
    return ProbVec(w / w.sum())


def _unit_floats(words: np.ndarray) -> np.ndarray:
    return (words >> _NP_S11).astype(np.float64) * _INV_2_53


@dataclass(frozen=True)
class ToyLM:
    n_layers: int
    vocab: int
    seed: int
    misalignment: float = 0.0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.misalignment < 0.0:
            raise ValueError("misalignment must be non-negative")

    # ---- digest plumbing ------------------------------------------------

    def empty_digest(self) -> int:
        """Layer-0 digest of the empty prefix."""
        return mix64(self.seed ^ _SEQ_SALT)

    def extend_digest(self, digest: int, token: int) -> int:
        """Fold one more token into a layer-0 sequence digest."""
        if not 0 <= token < self.vocab:
            raise ValueError(f"token {token} outside vocab of {self.vocab}")
        return mix64(digest ^ ((_TOKEN_SALT + token) & MASK64))

    def seq_digest(self, prefix) -> int:
        d = self.empty_digest()
        for t in prefix:
            d = self.extend_digest(d, t)
        return d

    def advance_digest(self, digest: int, from_layer: int, to_layer: int) -> int:
        """Run layers from_layer+1 .. to_layer over a digest."""
        if not 0 <= from_layer <= to_layer <= self.n_layers:
            raise ValueError(
                f"bad layer range {from_layer}..{to_layer} for depth {self.n_layers}"
            )
        for k in range(from_layer + 1, to_layer + 1):
            digest = mix64(digest ^ ((k * _LAYER_SALT) & MASK64))
        return digest

    def layer_state(self, prefix, layer: int) -> PrefixState:
        """Forward state of prefix after the given layer (1-based)."""
        if not 1 <= layer <= self.n_layers:
            raise ValueError(f"layer must lie in [1, {self.n_layers}], got {layer}")
        return PrefixState(self.advance_digest(self.seq_digest(prefix), 0, layer))

    def advance_state(self, state: PrefixState, from_layer: int, to_layer: int) -> PrefixState:
        return PrefixState(self.advance_digest(state.digest, from_layer, to_layer))

    # ---- distributions ---------------------------------------------------

    def _token_words(self, digest: int, salt: int) -> np.ndarray:
        ids = np.arange(self.vocab, dtype=np.uint64)
        keyed = (np.uint64(digest) ^ (ids * np.uint64(_TOKEN_SALT | 1))) + np.uint64(salt)
        return mix64_array(keyed)

    def _logits(self, final_digest: int) -> np.ndarray:
        u = _unit_floats(self._token_words(final_digest, _LOGIT_SALT))
        return (u - 0.5) * _LOGIT_SPREAD

    def _noise(self, exit_digest: int) -> np.ndarray:
        u = _unit_floats(self._token_words(exit_digest, _NOISE_SALT))
        return 2.0 * u - 1.0

    def dist_from_final_state(self, state: PrefixState) -> ProbVec:
        """Full-model next-token distribution from a layer-N state."""
        return _softmax(self._logits(state.digest))

    def exit_dist_from_states(self, final: PrefixState, exit_state: PrefixState) -> ProbVec:
        logits = self._logits(final.digest)
        if self.misalignment != 0.0:
            logits = logits + self.misalignment * self._noise(exit_state.digest)
        return _softmax(logits)

    def target_dist(self, prefix) -> ProbVec:
        """Next-token distribution of the full model given a non-empty prefix."""
        if len(prefix) == 0:
            raise ValueError("prefix must be non-empty")
        return self.dist_from_final_state(self.layer_state(prefix, self.n_layers))

    def exit_dist(self, prefix, exit_depth: int) -> ProbVec:
        """Next-token distribution of the early-exit head at exit_depth.

        Equals target_dist exactly when misalignment is 0.
        """
        if len(prefix) == 0:
            raise ValueError("prefix must be non-empty")
        if not 1 <= exit_depth <= self.n_layers:
            raise ValueError(
                f"exit_depth must lie in [1, {self.n_layers}], got {exit_depth}"
            )
        d0 = self.seq_digest(prefix)
        final = PrefixState(self.advance_digest(d0, 0, self.n_layers))
        at_exit = PrefixState(self.advance_digest(d0, 0, exit_depth))
        return self.exit_dist_from_states(final, at_exit)

    # ---- measured alignment ----------------------------------------------

    def _eval_prefixes(self, n_prefixes: int, eval_seed: int | None):
        if n_prefixes < 1:
            raise ValueError("n_prefixes must be >= 1")
        if eval_seed is None:
            eval_seed = derive_seed(self.seed, "empirical-alpha")
        stream = RngStream(eval_seed)
        for _ in range(n_prefixes):
            yield [stream.randbelow(self.vocab) for _ in range(_EVAL_PREFIX_LEN)]

    def empirical_alpha(
        self, exit_depth: int, n_prefixes: int, eval_seed: int | None = None
    ) -> float:
        """Mean acceptance probability sum(min(p, q)) over random prefixes.

        This is the per-token acceptance rate the sampling-mode verifier
        realizes when drafts come from the exit head. Deterministic for fixed
        (model, eval_seed, n_prefixes); exactly 1.0 at misalignment = 0.
        """
        acc = 0.0
        for prefix in self._eval_prefixes(n_prefixes, eval_seed):
            p = self.exit_dist(prefix, exit_depth)
            q = self.target_dist(prefix)
            acc += float(np.minimum(p.probs, q.probs).sum())
        return acc / n_prefixes

    def greedy_agreement(
        self, exit_depth: int, n_prefixes: int, eval_seed: int | None = None
    ) -> float:
        """Fraction of random prefixes where exit head and full model share the
        same argmax token; the acceptance rate of greedy-mode verification."""
        hits = 0
        for prefix in self._eval_prefixes(n_prefixes, eval_seed):
            p = self.exit_dist(prefix, exit_depth)
            q = self.target_dist(prefix)
            if int(np.argmax(p.probs)) == int(np.argmax(q.probs)):
                hits += 1
        return hits / n_prefixes
