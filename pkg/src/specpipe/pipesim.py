"""Tick-accurate simulators for staged decoding schedules.

Time model: one tick is one stage-forward. A depth-N model split at exit_depth
E has n_stages = ceil(N / E); the first n_stages - 1 stages hold E layers each
and the remainder forms the last stage, which still costs a full tick and also
hosts the output head. The autoregressive baseline therefore spends n_stages
ticks per token, and all speedups here are throughput * n_stages (times the
hop period when a communication latency is configured).

Three schedules are simulated:

- autoregressive: strictly sequential, token i+1 starts after token i commits.
- eesd (draft-then-verify): rounds of gamma one-tick drafts followed by one
  batched full forward costing n_stages ticks, then an acceptance scan over
  the drafts. A fully accepted round commits a bonus token from the verifier.
- ppsd (verify-while-draft): the draft head keeps emitting speculative tokens
  every tick while downstream stages verify earlier positions. One token
  commits per tick in steady state; a rejection commits the corrected token
  immediately, flushes all in-flight work past it, and refills the pipe.

Verdicts come from an AcceptanceOracle: BERNOULLI(alpha) for schedule-level
studies, or a ToyLM in sampling mode (accept iff r <= min(1, q/p), resample
the residual on rejection) or greedy mode (accept iff argmaxes agree).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, NamedTuple

import numpy as np

from .rng import RngStream
from .speccore import (
    ProbVec,
    accept_draft,
    greedy_match,
    residual_distribution,
    sample_token,
)
from .toylm import PrefixState, ToyLM

PROMPT_LEN = 8

ACTIVATION = "ACTIVATION"
DRAFT_TOKEN = "DRAFT_TOKEN"
FINAL_TOKEN = "FINAL_TOKEN"
CHECK_TOKEN = "CHECK_TOKEN"
_KINDS = (ACTIVATION, DRAFT_TOKEN, FINAL_TOKEN, CHECK_TOKEN)

TRACE_HEADER = "tick,stage,kind,position,token,verdict"


# ---------------------------------------------------------------------------
# configuration and message types


@dataclass(frozen=True)
class PipelineConfig:
    """Stage partition of a depth-n_layers model cut every exit_depth layers.

    exit_stage is the stage whose boundary hosts the draft head (1 by default
    when the model has at least two stages). comm_latency adds a constant
    number of extra ticks to every stage-to-stage message hop.
    """

    n_layers: int
    exit_depth: int
    exit_stage: int | None = None
    comm_latency: int = 0
    n_stages: int = field(init=False)
    stage_layers: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if not 1 <= self.exit_depth <= self.n_layers:
            raise ValueError(
                f"exit_depth must lie in [1, n_layers], got {self.exit_depth} "
                f"with n_layers={self.n_layers}"
            )
        if self.comm_latency < 0:
            raise ValueError("comm_latency must be non-negative")
        s = -(-self.n_layers // self.exit_depth)
        layers = (self.exit_depth,) * (s - 1) + (
            self.n_layers - (s - 1) * self.exit_depth,
        )
        object.__setattr__(self, "n_stages", s)
        object.__setattr__(self, "stage_layers", layers)
        if self.exit_stage is None:
            object.__setattr__(self, "exit_stage", 1 if s >= 2 else None)
        elif s < 2:
            raise ValueError("a draft head needs at least 2 stages")
        elif not 1 <= self.exit_stage <= s - 1:
            raise ValueError(
                f"exit_stage must lie in [1, {s - 1}], got {self.exit_stage}"
            )

    @property
    def exit_layer(self) -> int:
        if self.exit_stage is None:
            raise ValueError("single-stage pipeline has no draft head")
        return self.exit_stage * self.exit_depth

    @property
    def hop_period(self) -> int:
        """Ticks from one stage-forward to the next stage starting on it."""
        return 1 + self.comm_latency

    @property
    def ar_ticks_per_token(self) -> int:
        return self.n_stages * self.hop_period


def partition_stages(n_layers: int, exit_depth: int) -> tuple[int, ...]:
    """Layer counts per stage; the remainder, if any, is its own final stage."""
    return PipelineConfig(n_layers, exit_depth).stage_layers


@dataclass(frozen=True)
class StageMessage:
    """One message on the inter-stage wire.

    ACTIVATION carries a PrefixState payload downstream; DRAFT_TOKEN leaves the
    exit stage; FINAL_TOKEN (accept or plain commit) and CHECK_TOKEN (rejection
    carrying the corrected token) leave the last stage only.
    """

    kind: str
    position: int
    token: int | None = None
    payload: PrefixState | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if self.position < 1:
            raise ValueError("position must be >= 1")
        if self.payload is not None and self.kind != ACTIVATION:
            raise ValueError("only ACTIVATION messages carry a state payload")


class TraceRow(NamedTuple):
    tick: int
    stage: int
    kind: str
    position: int
    token: int | None
    verdict: str


class EventTrace:
    """Chronological record of every message a run emitted."""

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[tuple[int, int, StageMessage, str]] = []

    def add(self, tick: int, stage: int, message: StageMessage, verdict: str = "") -> None:
        self.records.append((tick, stage, message, verdict))

    def rows(self) -> Iterator[TraceRow]:
        for tick, stage, msg, verdict in self.records:
            yield TraceRow(tick, stage, msg.kind, msg.position, msg.token, verdict)

    def __iter__(self) -> Iterator[TraceRow]:
        return self.rows()

    def __len__(self) -> int:
        return len(self.records)

    def write_csv(self, dest) -> None:
        """Write one record per line to a path or a file-like object."""
        if hasattr(dest, "write"):
            self._write(dest)
        else:
            with open(dest, "w", newline="") as fh:
                self._write(fh)

    def _write(self, fh) -> None:
        fh.write(TRACE_HEADER + "\n")
        for row in self.rows():
            token = "" if row.token is None else str(row.token)
            fh.write(
                f"{row.tick},{row.stage},{row.kind},{row.position},{token},{row.verdict}\n"
            )


class OracleMode(str, Enum):
    BERNOULLI = "bernoulli"
    TOYLM_SAMPLING = "toylm-sampling"
    TOYLM_GREEDY = "toylm-greedy"


@dataclass(frozen=True)
class AcceptanceOracle:
    """Verdict source for the simulators; see the module docstring."""

    mode: OracleMode
    alpha: float | None = None
    lm: ToyLM | None = None

    def __post_init__(self):
        if self.mode is OracleMode.BERNOULLI:
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ValueError("BERNOULLI oracle needs alpha in [0, 1]")
            if self.lm is not None:
                raise ValueError("BERNOULLI oracle does not take a model")
        else:
            if self.lm is None:
                raise ValueError(f"{self.mode.value} oracle needs a ToyLM")
            if self.alpha is not None:
                raise ValueError("toy-LM oracles measure alpha, do not set it")

    @classmethod
    def bernoulli(cls, alpha: float) -> "AcceptanceOracle":
        return cls(OracleMode.BERNOULLI, alpha=alpha)

    @classmethod
    def toylm_sampling(cls, lm: ToyLM) -> "AcceptanceOracle":
        return cls(OracleMode.TOYLM_SAMPLING, lm=lm)

    @classmethod
    def toylm_greedy(cls, lm: ToyLM) -> "AcceptanceOracle":
        return cls(OracleMode.TOYLM_GREEDY, lm=lm)

    @property
    def greedy(self) -> bool:
        return self.mode is OracleMode.TOYLM_GREEDY


@dataclass(frozen=True)
class RunMetrics:
    """Aggregate counts of one simulated run.

    accepts counts tokens committed through an accepted draft; rejects counts
    tokens committed straight from the full model (a rejection's corrected
    token, the bonus token of a fully accepted round, or every token in the
    autoregressive schedule), so committed_tokens = accepts + rejects always.
    alpha_all_measured is accepted drafts over drafted tokens submitted for
    verification, or None when nothing was drafted.
    """

    committed_tokens: int
    ticks: int
    accepts: int
    rejects: int
    alpha_all_measured: float | None
    throughput: float
    speedup_vs_ar: float


def _metrics(
    committed: int,
    ticks: int,
    accepts: int,
    rejects: int,
    drafted: int,
    ar_ticks_per_token: int,
) -> RunMetrics:
    if committed != accepts + rejects:
        raise AssertionError("commit accounting out of balance")
    throughput = committed / ticks if ticks > 0 else 0.0
    return RunMetrics(
        committed_tokens=committed,
        ticks=ticks,
        accepts=accepts,
        rejects=rejects,
        alpha_all_measured=(accepts / drafted) if drafted > 0 else None,
        throughput=throughput,
        speedup_vs_ar=throughput * ar_ticks_per_token,
    )


def steady_state_view(metrics: RunMetrics, cfg: PipelineConfig) -> RunMetrics:
    """Recompute rates with the first n_stages warm-up ticks subtracted."""
    ticks = max(1, metrics.ticks - cfg.n_stages * cfg.hop_period)
    throughput = metrics.committed_tokens / ticks
    return replace(
        metrics,
        ticks=ticks,
        throughput=throughput,
        speedup_vs_ar=throughput * cfg.ar_ticks_per_token,
    )


def default_prompt(vocab: int, rng: RngStream) -> list[int]:
    """Prompt used by the simulate_* entry points when a toy-LM oracle is in
    play: PROMPT_LEN tokens drawn from the run's prompt stream."""
    stream = rng.split("prompt")
    return [stream.randbelow(vocab) for _ in range(PROMPT_LEN)]


# ---------------------------------------------------------------------------
# shared toy-LM sequence bookkeeping


class _SeqTracker:
    """Token sequence plus incremental layer-0 digests of every prefix."""

    __slots__ = ("lm", "tokens", "digests")

    def __init__(self, lm: ToyLM, prompt: list[int]):
        self.lm = lm
        self.tokens: list[int] = []
        self.digests: list[int] = [lm.empty_digest()]
        for t in prompt:
            self.push(t)

    def push(self, token: int) -> None:
        self.tokens.append(token)
        self.digests.append(self.lm.extend_digest(self.digests[-1], token))

    def prefix_digest(self, n_tokens: int) -> int:
        return self.digests[n_tokens]

    def replace_and_truncate(self, idx: int, token: int) -> None:
        """Overwrite tokens[idx] and drop everything after it."""
        del self.tokens[idx:]
        del self.digests[idx + 1 :]
        self.push(token)

    def truncate(self, n_tokens: int) -> None:
        del self.tokens[n_tokens:]
        del self.digests[n_tokens + 1 :]

    def __len__(self) -> int:
        return len(self.tokens)


class _ToyVerifier:
    """Draft and verdict logic shared by the eesd and ppsd engines."""

    __slots__ = ("lm", "greedy", "draft_stream", "verify_stream", "commit_stream")

    def __init__(self, lm: ToyLM, greedy: bool, rng: RngStream):
        self.lm = lm
        self.greedy = greedy
        self.draft_stream = rng.split("draft")
        self.verify_stream = rng.split("verify")
        self.commit_stream = rng.split("commit")

    def draft(self, p: ProbVec) -> int:
        if self.greedy:
            return int(np.argmax(p.probs))
        return sample_token(p, self.draft_stream)

    def verdict(self, p: ProbVec, token: int, q: ProbVec) -> tuple[bool, int]:
        """Returns (accepted, committed token)."""
        if self.greedy:
            ok, top_q = greedy_match(p, q)
            return ok, (token if ok else top_q)
        if accept_draft(p[token], q[token], self.verify_stream):
            return True, token
        return False, sample_token(residual_distribution(p, q), self.commit_stream)

    def full_model_token(self, q: ProbVec) -> int:
        """A token straight from the target distribution (bonus and
        forced-reject paths)."""
        if self.greedy:
            return int(np.argmax(q.probs))
        return sample_token(q, self.commit_stream)


# ---------------------------------------------------------------------------
# autoregressive


def simulate_autoregressive(
    cfg: PipelineConfig, horizon: int, *, trace: EventTrace | None = None
) -> RunMetrics:
    """Sequential baseline: every token walks all stages before the next
    starts, so ticks come out at horizon * n_stages (hop period 1)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    s, per = cfg.n_stages, cfg.hop_period
    if trace is not None:
        for i in range(1, horizon + 1):
            start = 1 + (i - 1) * s * per
            for st in range(1, s):
                trace.add(start + (st - 1) * per, st, StageMessage(ACTIVATION, i))
            trace.add(start + (s - 1) * per, s, StageMessage(FINAL_TOKEN, i))
    ticks = 1 + (horizon - 1) * s * per + (s - 1) * per
    return _metrics(horizon, ticks, 0, horizon, 0, cfg.ar_ticks_per_token)


def decode_autoregressive(
    lm: ToyLM, prompt: list[int], max_tokens: int, mode: str, rng: RngStream
) -> list[int]:
    """Reference decode with the full model only; the oracle the speculative
    schedules are checked against."""
    _check_mode(mode)
    _check_prompt(lm, prompt)
    commit_stream = rng.split("commit")
    seq = _SeqTracker(lm, list(prompt))
    out: list[int] = []
    for _ in range(max_tokens):
        final = lm.advance_digest(seq.prefix_digest(len(seq)), 0, lm.n_layers)
        q = lm.dist_from_final_state(PrefixState(final))
        if mode == "greedy":
            token = int(np.argmax(q.probs))
        else:
            token = sample_token(q, commit_stream)
        seq.push(token)
        out.append(token)
    return out


def _check_mode(mode: str) -> None:
    if mode not in ("greedy", "sampling"):
        raise ValueError(f"mode must be 'greedy' or 'sampling', got {mode!r}")


def _check_prompt(lm: ToyLM, prompt) -> None:
    if len(prompt) == 0:
        raise ValueError("prompt must be non-empty")
    for t in prompt:
        if not 0 <= t < lm.vocab:
            raise ValueError(f"prompt token {t} outside vocab of {lm.vocab}")


def _require_draft_head(cfg: PipelineConfig) -> int:
    if cfg.exit_stage is None:
        raise ValueError("this schedule needs a draft head (at least 2 stages)")
    return cfg.exit_stage


# ---------------------------------------------------------------------------
# eesd: draft-then-verify rounds


def simulate_eesd(
    cfg: PipelineConfig,
    gamma: int,
    oracle: AcceptanceOracle,
    horizon: int,
    rng: RngStream,
    *,
    trace: EventTrace | None = None,
) -> RunMetrics:
    """Round schedule: gamma drafts at one tick each (exit stage 1), then one
    batched full forward over the pipeline (n_stages ticks), then the
    acceptance scan. The scan stops at the first rejection, whose corrected
    token commits; a clean sweep commits a bonus token from the verifier. The
    last round may overshoot the horizon and is counted whole.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    k = _require_draft_head(cfg)
    s, per = cfg.n_stages, cfg.hop_period
    draft_ticks_each = 1 if k == 1 else k * per
    round_ticks = gamma * draft_ticks_each + s * per

    toy = oracle.mode is not OracleMode.BERNOULLI
    if toy:
        ver = _ToyVerifier(oracle.lm, oracle.greedy, rng)
        seq = _SeqTracker(oracle.lm, default_prompt(oracle.lm.vocab, rng))
        n_prompt = len(seq)
        exit_layer = cfg.exit_layer
        lm = oracle.lm
    else:
        verify_stream = rng.split("verify")

    committed = accepts = rejects = drafted = 0
    t = 0
    while committed < horizon:
        base = committed
        verdict_tick = t + gamma * draft_ticks_each + (s - 1) * per + 1
        drafts: list[tuple[int, ProbVec]] = []
        for h in range(1, gamma + 1):
            if toy:
                d0 = seq.prefix_digest(len(seq))
                final = PrefixState(lm.advance_digest(d0, 0, lm.n_layers))
                at_exit = PrefixState(lm.advance_digest(d0, 0, exit_layer))
                p = lm.exit_dist_from_states(final, at_exit)
                token = ver.draft(p)
                seq.push(token)
                drafts.append((token, p))
            else:
                token = None
            if trace is not None:
                trace.add(
                    t + h * draft_ticks_each,
                    k,
                    StageMessage(DRAFT_TOKEN, base + h, token),
                )
        if trace is not None:
            for st in range(1, s):
                trace.add(
                    t + gamma * draft_ticks_each + (st - 1) * per + 1,
                    st,
                    StageMessage(ACTIVATION, base + 1),
                )

        # acceptance scan, lazily verifying until the first rejection
        n_acc = 0
        corrected: int | None = None
        for h in range(1, gamma + 1):
            if toy:
                token, p = drafts[h - 1]
                final = lm.advance_digest(
                    seq.prefix_digest(n_prompt + base + h - 1), 0, lm.n_layers
                )
                q = lm.dist_from_final_state(PrefixState(final))
                ok, committed_token = ver.verdict(p, token, q)
            else:
                ok = verify_stream.uniform() < oracle.alpha
                token = committed_token = None
            if ok:
                n_acc += 1
                if trace is not None:
                    trace.add(
                        verdict_tick, s, StageMessage(FINAL_TOKEN, base + h, token), "accept"
                    )
            else:
                corrected = committed_token
                if trace is not None:
                    trace.add(
                        verdict_tick,
                        s,
                        StageMessage(CHECK_TOKEN, base + h, committed_token),
                        "reject",
                    )
                break

        if n_acc == gamma:
            if toy:
                final = lm.advance_digest(seq.prefix_digest(len(seq)), 0, lm.n_layers)
                bonus = ver.full_model_token(lm.dist_from_final_state(PrefixState(final)))
                seq.push(bonus)
            else:
                bonus = None
            if trace is not None:
                trace.add(
                    verdict_tick, s, StageMessage(FINAL_TOKEN, base + gamma + 1, bonus)
                )
        elif toy:
            seq.replace_and_truncate(n_prompt + base + n_acc, corrected)

        drafted += gamma
        accepts += n_acc
        rejects += 1  # the corrected token or the bonus, always full-model
        committed += n_acc + 1
        t += round_ticks

    return _metrics(committed, t, accepts, rejects, drafted, cfg.ar_ticks_per_token)


# ---------------------------------------------------------------------------
# ppsd: verify-while-draft pipeline


class _Chain:
    """One position's forward pass in flight through the stages."""

    __slots__ = ("pos", "layer", "digest", "token", "p")

    def __init__(self, pos: int, digest: int | None):
        self.pos = pos
        self.layer = 0
        self.digest = digest
        self.token: int | None = None
        self.p: ProbVec | None = None


def simulate_ppsd(
    cfg: PipelineConfig,
    oracle: AcceptanceOracle,
    horizon: int,
    rng: RngStream,
    *,
    trace: EventTrace | None = None,
) -> RunMetrics:
    """Pipelined schedule: the exit stage launches a speculative chain every
    tick, the last stage verifies one position per tick in steady state, and a
    rejection flushes everything in flight past it before the pipe refills."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    _require_draft_head(cfg)
    if oracle.mode is OracleMode.BERNOULLI and trace is None:
        return _ppsd_bernoulli_untraced(cfg, oracle.alpha, horizon, rng)
    committed, ticks, accepts, rejects, _ = _ppsd_machine(
        cfg, oracle, horizon, rng, trace, prompt=None, force_reject=False
    )
    return _metrics(
        committed, ticks, accepts, rejects, accepts + rejects, cfg.ar_ticks_per_token
    )


def decode_ppsd(
    lm: ToyLM,
    cfg: PipelineConfig,
    prompt: list[int],
    max_tokens: int,
    mode: str,
    rng: RngStream,
    *,
    force_reject: bool = False,
) -> tuple[list[int], RunMetrics, EventTrace]:
    """Functional decode over the toy LM on the pipelined schedule.

    In greedy mode the committed sequence equals decode_autoregressive exactly;
    in sampling mode it is distributed as the full model (lossless). With
    force_reject every draft is discarded and the full model's token commits,
    which also reproduces the autoregressive output.
    """
    _check_mode(mode)
    _check_prompt(lm, prompt)
    if cfg.n_layers != lm.n_layers:
        raise ValueError(
            f"pipeline is {cfg.n_layers} layers deep but the model has {lm.n_layers}"
        )
    _require_draft_head(cfg)
    trace = EventTrace()
    if max_tokens == 0:
        return [], _metrics(0, 0, 0, 0, 0, cfg.ar_ticks_per_token), trace
    oracle = (
        AcceptanceOracle.toylm_greedy(lm)
        if mode == "greedy"
        else AcceptanceOracle.toylm_sampling(lm)
    )
    committed, ticks, accepts, rejects, tokens = _ppsd_machine(
        cfg, oracle, max_tokens, rng, trace, prompt=list(prompt), force_reject=force_reject
    )
    metrics = _metrics(
        committed, ticks, accepts, rejects, accepts + rejects, cfg.ar_ticks_per_token
    )
    return tokens, metrics, trace


def _ppsd_bernoulli_untraced(
    cfg: PipelineConfig, alpha: float, horizon: int, rng: RngStream
) -> RunMetrics:
    # Same mechanics as _ppsd_machine with every per-stage no-op stripped:
    # the pipe holds launch ticks of in-flight chains, the head matures after
    # (n_stages - 1) hop periods, and a rejection clears the pipe.
    s, per = cfg.n_stages, cfg.hop_period
    k = cfg.exit_stage
    verify_age = (s - 1) * per
    launch_gap = 1 if k == 1 else k * per
    verify_stream = rng.split("verify")
    pipe: deque[int] = deque()
    committed = accepts = rejects = 0
    t = 0
    next_launch = 1
    while committed < horizon:
        t += 1
        if t == next_launch:
            pipe.append(t)
            next_launch = t + launch_gap
        if pipe and t - pipe[0] == verify_age:
            pipe.popleft()
            if verify_stream.uniform() < alpha:
                accepts += 1
            else:
                rejects += 1
                pipe.clear()
                next_launch = t + per
            committed += 1
    return _metrics(
        committed, t, accepts, rejects, accepts + rejects, cfg.ar_ticks_per_token
    )


def _ppsd_machine(
    cfg: PipelineConfig,
    oracle: AcceptanceOracle,
    stop_commits: int,
    rng: RngStream,
    trace: EventTrace | None,
    *,
    prompt: list[int] | None,
    force_reject: bool,
) -> tuple[int, int, int, int, list[int]]:
    """Per-tick stage machine. Returns (committed, ticks, accepts, rejects,
    committed generated tokens)."""
    s, per = cfg.n_stages, cfg.hop_period
    k = cfg.exit_stage
    toy = oracle.mode is not OracleMode.BERNOULLI
    if toy:
        lm = oracle.lm
        ver = _ToyVerifier(lm, oracle.greedy, rng)
        if prompt is None:
            prompt = default_prompt(lm.vocab, rng)
        seq = _SeqTracker(lm, prompt)
        n_prompt = len(seq)
    else:
        verify_stream = rng.split("verify")
        seq = None

    cur: list[_Chain | None] = [None] * (s + 1)
    transit: deque[tuple[int, int, _Chain]] = deque()  # (ready_tick, dest, chain)
    committed = accepts = rejects = 0
    draft_head = 0
    next_launch: int | None = 1
    t = 0

    def emit_activation(ch: _Chain, from_stage: int, tick: int) -> None:
        if trace is not None:
            payload = PrefixState(ch.digest) if toy else None
            trace.add(tick, from_stage, StageMessage(ACTIVATION, ch.pos, payload=payload))
        transit.append((tick + per, from_stage + 1, ch))

    def make_draft(ch: _Chain, stage: int, tick: int) -> None:
        nonlocal next_launch
        if toy:
            at_exit = PrefixState(ch.digest)
            final = PrefixState(lm.advance_digest(ch.digest, ch.layer, lm.n_layers))
            ch.p = lm.exit_dist_from_states(final, at_exit)
            ch.token = ver.draft(ch.p)
            seq.push(ch.token)
        if trace is not None:
            trace.add(tick, stage, StageMessage(DRAFT_TOKEN, ch.pos, ch.token))
        next_launch = tick + (1 if stage == 1 else per)

    while committed < stop_commits:
        t += 1
        while transit and transit[0][0] == t:
            _, dest, ch = transit.popleft()
            cur[dest] = ch
        rollback: int | None = None
        corrected: int | None = None

        for st in range(s, 1, -1):
            ch = cur[st]
            cur[st] = None
            if ch is None:
                continue
            if toy:
                ch.digest = lm.advance_digest(
                    ch.digest, ch.layer, ch.layer + cfg.stage_layers[st - 1]
                )
            ch.layer += cfg.stage_layers[st - 1]
            if st == s:
                if ch.pos != committed + 1:
                    raise AssertionError("verdicts must land in position order")
                if toy:
                    q = lm.dist_from_final_state(PrefixState(ch.digest))
                    if force_reject:
                        ok, tok = False, ver.full_model_token(q)
                    else:
                        ok, tok = ver.verdict(ch.p, ch.token, q)
                else:
                    ok = (not force_reject) and verify_stream.uniform() < oracle.alpha
                    tok = None
                committed += 1
                if ok:
                    accepts += 1
                    if trace is not None:
                        trace.add(t, s, StageMessage(FINAL_TOKEN, ch.pos, tok), "accept")
                else:
                    rejects += 1
                    rollback, corrected = ch.pos, tok
                    if trace is not None:
                        trace.add(t, s, StageMessage(CHECK_TOKEN, ch.pos, tok), "reject")
            else:
                if st == k:
                    make_draft(ch, st, t)
                emit_activation(ch, st, t)

        if next_launch is not None and t == next_launch:
            pos = draft_head + 1
            ch = _Chain(pos, seq.prefix_digest(n_prompt + pos - 1) if toy else None)
            if toy:
                ch.digest = lm.advance_digest(ch.digest, 0, cfg.stage_layers[0])
            ch.layer = cfg.stage_layers[0]
            draft_head = pos
            if k == 1:
                make_draft(ch, 1, t)
            else:
                next_launch = None  # blocked until the exit stage returns a draft
            emit_activation(ch, 1, t)

        if rollback is not None:
            transit.clear()
            for st in range(1, s + 1):
                cur[st] = None
            draft_head = rollback
            if toy:
                seq.replace_and_truncate(n_prompt + rollback - 1, corrected)
            next_launch = t + per

    tokens = seq.tokens[n_prompt : n_prompt + committed] if toy else []
    return committed, t, accepts, rejects, tokens
