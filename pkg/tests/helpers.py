"""Shared oracles and checkers for the test suite.

The Monte-Carlo pieces here are deliberately independent of the library
internals: they use numpy's own generator, not RngStream, so a bug in the
package RNG cannot cancel out in both places.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from specpipe import ProbVec, RngStream
from specpipe.pipesim import (
    ACTIVATION,
    CHECK_TOKEN,
    DRAFT_TOKEN,
    EventTrace,
    FINAL_TOKEN,
    PipelineConfig,
    TraceRow,
)


def mc_accept_chain_mean(alpha: float, gamma: int, trials: int, seed: int) -> float:
    """Monte-Carlo mean of the accepted-prefix length: draw gamma independent
    accept/reject verdicts per trial and count the leading accepts."""
    gen = np.random.default_rng(seed)
    u = gen.random((trials, gamma))
    leading = np.cumprod(u < alpha, axis=1)
    return float(leading.sum(axis=1).mean())


def random_probvec(gen: np.random.Generator, vocab: int, sparse: bool = False) -> ProbVec:
    """A random distribution; with sparse=True some entries are exactly 0."""
    w = gen.random(vocab)
    if sparse:
        w = w * (gen.random(vocab) < 0.7)
        if w.sum() == 0.0:
            w[int(gen.integers(vocab))] = 1.0
    return ProbVec.from_weights(w)


class FixedUniforms:
    """Stands in for RngStream where a test wants scripted draws."""

    def __init__(self, values):
        self.values = list(values)
        self.counter = 0

    def uniform(self) -> float:
        v = self.values[self.counter]
        self.counter += 1
        return v


class CountingRng(RngStream):
    """RngStream whose children tally their own uniform draws."""

    def __init__(self, seed: int):
        super().__init__(seed)
        self.children: dict[str | int, "CountingRng"] = {}
        self.draws = 0

    def uniform(self) -> float:
        self.draws += 1
        return super().uniform()

    def split(self, label) -> "CountingRng":
        child = CountingRng(super().split(label).seed)
        self.children[label] = child
        return child


# ---------------------------------------------------------------------------
# trace checkers


def check_work_conservation(trace: EventTrace, cfg: PipelineConfig) -> None:
    """One stage-forward per (tick, stage); commits only from the last stage;
    drafts only from the exit stage."""
    forwards = Counter()
    for row in trace:
        if row.kind in (ACTIVATION, FINAL_TOKEN, CHECK_TOKEN):
            forwards[(row.tick, row.stage)] += 1
        if row.kind in (FINAL_TOKEN, CHECK_TOKEN):
            assert row.stage == cfg.n_stages, f"commit from stage {row.stage}"
        if row.kind == DRAFT_TOKEN:
            assert row.stage == cfg.exit_stage, f"draft from stage {row.stage}"
    for key, n in forwards.items():
        assert n == 1, f"stage ran {n} forwards at (tick, stage)={key}"


def check_batched_work_conservation(trace: EventTrace, cfg: PipelineConfig) -> None:
    """Round-schedule variant: the verdict tick carries one batched commit
    event per scanned position, everything else is one forward per slot."""
    forwards = Counter()
    for row in trace:
        if row.kind == ACTIVATION:
            forwards[(row.tick, row.stage)] += 1
        elif row.kind in (FINAL_TOKEN, CHECK_TOKEN):
            assert row.stage == cfg.n_stages
        elif row.kind == DRAFT_TOKEN:
            assert row.stage == cfg.exit_stage
            forwards[(row.tick, row.stage)] += 1
    for key, n in forwards.items():
        assert n == 1, f"stage ran {n} forwards at (tick, stage)={key}"


def committed_rows(trace: EventTrace) -> list[TraceRow]:
    return [r for r in trace if r.kind in (FINAL_TOKEN, CHECK_TOKEN)]


def check_commit_order(trace: EventTrace) -> None:
    """Commits cover positions 1..K in order with non-decreasing ticks."""
    rows = committed_rows(trace)
    for i, row in enumerate(rows, start=1):
        assert row.position == i, f"commit {i} carries position {row.position}"
    ticks = [r.tick for r in rows]
    assert ticks == sorted(ticks)


def check_flush_discipline(trace: EventTrace, relaunch_stage: int = 1) -> None:
    """Commits land in position order, nothing works on a committed position,
    and after a rejection the first strictly later event is the relaunch of
    the next position (in-flight work for flushed positions never resurfaces).

    Events sharing the rejection's tick are exempt: they are the work the
    other stages did in parallel before the verdict could reach them.
    """
    committed = 0
    pending_reset: int | None = None
    for row in trace:
        if row.kind in (FINAL_TOKEN, CHECK_TOKEN):
            assert row.position == committed + 1, (
                f"commit carries position {row.position}, expected {committed + 1}"
            )
            committed += 1
            if row.kind == CHECK_TOKEN:
                pending_reset = row.tick
        else:
            assert row.position > committed, (
                f"{row.kind} at position {row.position} already committed"
            )
            if pending_reset is not None and row.tick > pending_reset:
                assert row.position == committed + 1, (
                    f"stale in-flight position {row.position} survived a flush"
                )
                assert row.stage == relaunch_stage
                pending_reset = None


def stage_busy_ticks(trace: EventTrace, stage: int) -> set[int]:
    return {
        r.tick
        for r in trace
        if r.stage == stage and r.kind in (ACTIVATION, FINAL_TOKEN, CHECK_TOKEN, DRAFT_TOKEN)
    }
