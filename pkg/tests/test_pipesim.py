import io

import numpy as np
import pytest

from specpipe import (
    AcceptanceOracle,
    EventTrace,
    PipelineConfig,
    RngStream,
    ToyLM,
    decode_autoregressive,
    decode_ppsd,
    default_prompt,
    derive_seed,
    eesd_speedup,
    overall_acceptance,
    partition_stages,
    ppsd_reference_speedup,
    ppsd_speedup,
    simulate_autoregressive,
    simulate_eesd,
    simulate_ppsd,
    steady_state_view,
    SpeedupParams,
)
from specpipe.pipesim import (
    ACTIVATION,
    CHECK_TOKEN,
    DRAFT_TOKEN,
    FINAL_TOKEN,
    StageMessage,
    TRACE_HEADER,
)

from helpers import (
    CountingRng,
    check_batched_work_conservation,
    check_commit_order,
    check_flush_discipline,
    check_work_conservation,
    committed_rows,
    stage_busy_ticks,
)


def run_rng(seed: int = 0) -> RngStream:
    return RngStream(derive_seed(seed, "run"))


class TestPipelineConfig:
    def test_partition_examples(self):
        assert partition_stages(32, 8) == (8, 8, 8, 8)
        assert partition_stages(33, 8) == (8, 8, 8, 8, 1)
        assert partition_stages(40, 16) == (16, 16, 8)
        assert partition_stages(32, 32) == (32,)

    def test_partition_sums_and_positivity(self):
        for n in range(1, 70):
            for e in range(1, n + 1):
                layers = partition_stages(n, e)
                assert sum(layers) == n
                assert all(x >= 1 for x in layers)
                assert len(layers) == -(-n // e)

    def test_exit_stage_defaults(self):
        assert PipelineConfig(32, 8).exit_stage == 1
        assert PipelineConfig(32, 32).exit_stage is None

    def test_exit_stage_bounds(self):
        assert PipelineConfig(32, 8, exit_stage=3).exit_stage == 3
        with pytest.raises(ValueError):
            PipelineConfig(32, 8, exit_stage=4)
        with pytest.raises(ValueError):
            PipelineConfig(32, 8, exit_stage=0)
        with pytest.raises(ValueError):
            PipelineConfig(32, 32, exit_stage=1)

    def test_exit_layer(self):
        assert PipelineConfig(32, 8).exit_layer == 8
        assert PipelineConfig(32, 8, exit_stage=2).exit_layer == 16
        with pytest.raises(ValueError):
            PipelineConfig(32, 32).exit_layer

    def test_depth_validation(self):
        with pytest.raises(ValueError):
            PipelineConfig(32, 0)
        with pytest.raises(ValueError):
            PipelineConfig(32, 33)
        with pytest.raises(ValueError):
            PipelineConfig(32, 8, comm_latency=-1)

    def test_stage_message_validation(self):
        with pytest.raises(ValueError):
            StageMessage("NOISE", 1)
        with pytest.raises(ValueError):
            StageMessage(FINAL_TOKEN, 0)
        with pytest.raises(ValueError):
            StageMessage(FINAL_TOKEN, 1, payload=object())


class TestAutoregressive:
    def test_tick_counts(self):
        assert simulate_autoregressive(PipelineConfig(32, 8), 100).ticks == 400
        assert simulate_autoregressive(PipelineConfig(32, 32), 50).ticks == 50
        assert simulate_autoregressive(PipelineConfig(40, 16), 10).ticks == 30

    def test_throughput_and_speedup(self):
        m = simulate_autoregressive(PipelineConfig(32, 8), 100)
        assert m.throughput == pytest.approx(0.25)
        assert m.speedup_vs_ar == pytest.approx(1.0)
        assert m.committed_tokens == m.rejects == 100
        assert m.accepts == 0
        assert m.alpha_all_measured is None

    def test_horizon_validation(self):
        with pytest.raises(ValueError):
            simulate_autoregressive(PipelineConfig(32, 8), 0)

    def test_trace_shape(self):
        trace = EventTrace()
        simulate_autoregressive(PipelineConfig(32, 8), 5, trace=trace)
        check_work_conservation(trace, PipelineConfig(32, 8))
        check_commit_order(trace)
        finals = committed_rows(trace)
        assert [r.tick for r in finals] == [4, 8, 12, 16, 20]

    def test_comm_latency_stretches_hops(self):
        cfg = PipelineConfig(32, 8, comm_latency=1)
        m = simulate_autoregressive(cfg, 10)
        # ten tokens, each walking 4 stages at 2 ticks per hop, minus the
        # trailing hop after the last commit
        assert m.ticks == 10 * 8 - 1


class TestEesdExact:
    def test_always_reject_round_arithmetic(self):
        cfg = PipelineConfig(32, 8)
        for gamma in (1, 3, 5):
            m = simulate_eesd(cfg, gamma, AcceptanceOracle.bernoulli(0.0), 500, run_rng())
            assert m.committed_tokens == 500
            assert m.ticks == 500 * (gamma + 4)
            assert m.speedup_vs_ar == pytest.approx(4 / (gamma + 4))
            assert m.accepts == 0
            assert m.alpha_all_measured == 0.0

    def test_always_accept_round_arithmetic(self):
        cfg = PipelineConfig(32, 8)
        for gamma in (1, 3, 10):
            m = simulate_eesd(cfg, gamma, AcceptanceOracle.bernoulli(1.0), 10_000, run_rng())
            assert m.speedup_vs_ar == pytest.approx(4 * (gamma + 1) / (gamma + 4))
            assert m.alpha_all_measured == 1.0
            assert m.committed_tokens % (gamma + 1) == 0

    def test_matches_closed_form_example(self):
        cfg = PipelineConfig(32, 8)
        m = simulate_eesd(cfg, 5, AcceptanceOracle.bernoulli(0.6), 100_000, run_rng())
        assert m.speedup_vs_ar == pytest.approx(1.059, rel=0.02)

    def test_alpha_all_converges(self):
        cfg = PipelineConfig(32, 8)
        for alpha, gamma in ((0.3, 2), (0.6, 5), (0.9, 8)):
            m = simulate_eesd(
                cfg, gamma, AcceptanceOracle.bernoulli(alpha), 100_000, run_rng(3)
            )
            assert m.alpha_all_measured == pytest.approx(
                overall_acceptance(alpha, gamma), abs=0.01
            )

    def test_one_verify_draw_per_scanned_token(self):
        cfg = PipelineConfig(32, 8)
        rng = CountingRng(derive_seed(0, "run"))
        m = simulate_eesd(cfg, 4, AcceptanceOracle.bernoulli(1.0), 2000, rng)
        assert rng.children["verify"].draws == m.accepts
        rng = CountingRng(derive_seed(0, "run"))
        m = simulate_eesd(cfg, 4, AcceptanceOracle.bernoulli(0.0), 2000, rng)
        assert rng.children["verify"].draws == m.rejects
        rng = CountingRng(derive_seed(0, "run"))
        m = simulate_eesd(cfg, 4, AcceptanceOracle.bernoulli(0.5), 2000, rng)
        assert m.accepts <= rng.children["verify"].draws <= m.accepts + m.rejects

    def test_gamma_validation(self):
        with pytest.raises(ValueError):
            simulate_eesd(PipelineConfig(32, 8), 0, AcceptanceOracle.bernoulli(0.5), 10, run_rng())

    def test_single_stage_has_no_draft_head(self):
        with pytest.raises(ValueError):
            simulate_eesd(PipelineConfig(32, 32), 2, AcceptanceOracle.bernoulli(0.5), 10, run_rng())

    def test_comm_latency_round_arithmetic(self):
        cfg = PipelineConfig(32, 8, comm_latency=1)
        m = simulate_eesd(cfg, 3, AcceptanceOracle.bernoulli(0.0), 100, run_rng())
        # drafts stay one tick each at exit stage 1; the verify pass pays the hops
        assert m.ticks == 100 * (3 + 4 * 2)

    def test_toy_oracle_runs_and_accounts(self):
        lm = ToyLM(n_layers=32, vocab=16, seed=9, misalignment=1.0)
        m = simulate_eesd(
            PipelineConfig(32, 8), 4, AcceptanceOracle.toylm_sampling(lm), 1500, run_rng(2)
        )
        assert m.committed_tokens >= 1500
        assert m.committed_tokens == m.accepts + m.rejects
        assert 0.0 < m.alpha_all_measured < 1.0

    def test_trace_is_batch_work_conserving(self):
        cfg = PipelineConfig(32, 8)
        trace = EventTrace()
        simulate_eesd(cfg, 3, AcceptanceOracle.bernoulli(0.5), 60, run_rng(), trace=trace)
        check_batched_work_conservation(trace, cfg)
        check_commit_order(trace)
        check_flush_discipline(trace)


class TestPpsdExact:
    def test_perfect_acceptance_fills_pipe(self):
        cfg = PipelineConfig(32, 8)
        m = simulate_ppsd(cfg, AcceptanceOracle.bernoulli(1.0), 1000, run_rng())
        assert m.ticks == 1000 + 3
        assert m.rejects == 0
        assert m.speedup_vs_ar == pytest.approx(4.0, rel=0.02)

    def test_always_reject_degrades_to_baseline(self):
        cfg = PipelineConfig(32, 8)
        m = simulate_ppsd(cfg, AcceptanceOracle.bernoulli(0.0), 1000, run_rng())
        assert m.ticks == 4000
        assert m.speedup_vs_ar == pytest.approx(1.0)
        assert m.accepts == 0

    def test_matches_closed_form_example(self):
        cfg = PipelineConfig(32, 8)
        m = simulate_ppsd(cfg, AcceptanceOracle.bernoulli(0.5), 100_000, run_rng())
        assert m.speedup_vs_ar == pytest.approx(1.6, rel=0.02)

    def test_one_verify_draw_per_commit(self):
        cfg = PipelineConfig(32, 8)
        rng = CountingRng(derive_seed(4, "run"))
        m = simulate_ppsd(cfg, AcceptanceOracle.bernoulli(0.7), 3000, rng)
        assert rng.children["verify"].draws == m.accepts + m.rejects == 3000

    def test_machine_and_fast_path_agree(self):
        for alpha in (0.0, 0.3, 0.7, 1.0):
            for shape in ((32, 8), (40, 10), (33, 8)):
                cfg = PipelineConfig(*shape)
                fast = simulate_ppsd(
                    cfg, AcceptanceOracle.bernoulli(alpha), 3000, run_rng(11)
                )
                traced = simulate_ppsd(
                    cfg, AcceptanceOracle.bernoulli(alpha), 3000, run_rng(11),
                    trace=EventTrace(),
                )
                assert fast == traced

    def test_machine_and_fast_path_agree_deep_exit(self):
        cfg = PipelineConfig(32, 8, exit_stage=2)
        fast = simulate_ppsd(cfg, AcceptanceOracle.bernoulli(0.6), 2000, run_rng(12))
        traced = simulate_ppsd(
            cfg, AcceptanceOracle.bernoulli(0.6), 2000, run_rng(12), trace=EventTrace()
        )
        assert fast == traced

    def test_deep_exit_matches_reference_formula(self):
        cfg = PipelineConfig(32, 8, exit_stage=2)
        m = simulate_ppsd(cfg, AcceptanceOracle.bernoulli(0.5), 100_000, run_rng())
        assert m.speedup_vs_ar == pytest.approx(
            ppsd_reference_speedup(0.5, 32, 8, exit_stage=2), rel=0.02
        )

    def test_remainder_stage_shape(self):
        # 33 layers at depth 8: five stages, last stage holds a single layer
        cfg = PipelineConfig(33, 8)
        m = simulate_ppsd(cfg, AcceptanceOracle.bernoulli(1.0), 2000, run_rng())
        assert m.ticks == 2000 + 4
        m0 = simulate_ppsd(cfg, AcceptanceOracle.bernoulli(0.0), 2000, run_rng())
        assert m0.speedup_vs_ar == pytest.approx(1.0)

    def test_single_stage_rejected(self):
        with pytest.raises(ValueError):
            simulate_ppsd(PipelineConfig(32, 32), AcceptanceOracle.bernoulli(0.5), 10, run_rng())

    def test_comm_latency_pipelines_hops(self):
        cfg = PipelineConfig(32, 8, comm_latency=1)
        m = simulate_ppsd(cfg, AcceptanceOracle.bernoulli(1.0), 5000, run_rng())
        # launches still one per tick; only the pipe fill pays the latency
        assert m.ticks == 5000 + (4 - 1) * 2


class TestPpsdTraces:
    def _trace(self, alpha: float, horizon: int = 300, seed: int = 0):
        cfg = PipelineConfig(32, 8)
        trace = EventTrace()
        metrics = simulate_ppsd(
            cfg, AcceptanceOracle.bernoulli(alpha), horizon, run_rng(seed), trace=trace
        )
        return cfg, trace, metrics

    def test_work_conservation_and_order(self):
        cfg, trace, _ = self._trace(0.6)
        check_work_conservation(trace, cfg)
        check_commit_order(trace)

    def test_flush_discipline(self):
        cfg, trace, _ = self._trace(0.6)
        check_flush_discipline(trace)

    def test_zero_bubble_at_full_acceptance(self):
        cfg, trace, metrics = self._trace(1.0, horizon=200)
        for stage in range(1, cfg.n_stages + 1):
            busy = stage_busy_ticks(trace, stage)
            expected = set(range(stage, metrics.ticks + 1))
            assert expected <= busy, f"stage {stage} idled in steady state"

    def test_rejection_refill_gap(self):
        cfg, trace, _ = self._trace(0.5, horizon=200, seed=5)
        rows = committed_rows(trace)
        for a, b in zip(rows, rows[1:]):
            gap = b.tick - a.tick
            if a.kind == CHECK_TOKEN:
                assert gap == cfg.n_stages
            else:
                assert gap == 1

    def test_trace_determinism(self):
        _, t1, m1 = self._trace(0.4, seed=9)
        _, t2, m2 = self._trace(0.4, seed=9)
        assert m1 == m2
        assert list(t1) == list(t2)

    def test_csv_export_format(self):
        _, trace, _ = self._trace(0.5, horizon=30)
        buf = io.StringIO()
        trace.write_csv(buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == TRACE_HEADER == "tick,stage,kind,position,token,verdict"
        assert len(lines) == len(trace) + 1
        kinds = {ACTIVATION, DRAFT_TOKEN, FINAL_TOKEN, CHECK_TOKEN}
        for line in lines[1:]:
            tick, stage, kind, position, token, verdict = line.split(",")
            assert int(tick) >= 1 and int(stage) >= 1 and int(position) >= 1
            assert kind in kinds
            assert token == ""  # bernoulli runs carry no token ids
            assert verdict in ("", "accept", "reject")


class TestDecode:
    CFG = PipelineConfig(32, 8)

    def lm(self, seed: int = 0, beta: float = 1.0) -> ToyLM:
        return ToyLM(n_layers=32, vocab=16, seed=derive_seed(seed, "lm"), misalignment=beta)

    def test_greedy_equals_autoregressive(self):
        lm = self.lm(3)
        prompt = [1, 2, 3, 4]
        tokens, metrics, trace = decode_ppsd(lm, self.CFG, prompt, 96, "greedy", run_rng(3))
        ref = decode_autoregressive(lm, prompt, 96, "greedy", run_rng(3))
        assert tokens == ref
        assert metrics.committed_tokens == 96
        check_work_conservation(trace, self.CFG)
        check_commit_order(trace)
        check_flush_discipline(trace)

    def test_greedy_autoregressive_ignores_rng(self):
        lm = self.lm(1)
        outs = {
            tuple(decode_autoregressive(lm, [5, 5], 32, "greedy", RngStream(s)))
            for s in range(5)
        }
        assert len(outs) == 1

    def test_commit_prefix_matches_oracle_at_every_step(self):
        lm = self.lm(7)
        prompt = [9, 0, 2]
        tokens, _, trace = decode_ppsd(lm, self.CFG, prompt, 24, "greedy", run_rng(7))
        committed = [r.token for r in committed_rows(trace)]
        assert committed == tokens
        for m in range(1, len(tokens) + 1):
            assert decode_autoregressive(lm, prompt, m, "greedy", run_rng()) == tokens[:m]

    def test_sampling_is_deterministic_per_seed(self):
        lm = self.lm(4)
        a = decode_ppsd(lm, self.CFG, [1], 64, "sampling", run_rng(21))
        b = decode_ppsd(lm, self.CFG, [1], 64, "sampling", run_rng(21))
        assert a[0] == b[0]
        assert a[1] == b[1]
        c = decode_ppsd(lm, self.CFG, [1], 64, "sampling", run_rng(22))
        assert c[0] != a[0]

    def test_force_reject_reproduces_autoregressive_sampling(self):
        lm = self.lm(6)
        prompt = [2, 7]
        tokens, metrics, _ = decode_ppsd(
            lm, self.CFG, prompt, 80, "sampling", run_rng(6), force_reject=True
        )
        ref = decode_autoregressive(lm, prompt, 80, "sampling", run_rng(6))
        assert tokens == ref
        assert metrics.accepts == 0
        assert metrics.speedup_vs_ar == pytest.approx(1.0)

    def test_force_reject_reproduces_autoregressive_greedy(self):
        lm = self.lm(6)
        tokens, _, _ = decode_ppsd(
            lm, self.CFG, [3], 40, "greedy", run_rng(8), force_reject=True
        )
        assert tokens == decode_autoregressive(lm, [3], 40, "greedy", run_rng(8))

    def test_first_token_law_matches_target(self):
        lm = self.lm(12, beta=2.0)
        prompt = [11, 4, 4, 0]
        q = lm.target_dist(prompt)
        counts = np.zeros(16)
        n = 4000
        for i in range(n):
            tokens, _, _ = decode_ppsd(lm, self.CFG, prompt, 1, "sampling", run_rng(1000 + i))
            counts[tokens[0]] += 1
        tv = 0.5 * np.abs(counts / n - q.probs).sum()
        assert tv < 0.05

    def test_max_tokens_zero(self):
        tokens, metrics, trace = decode_ppsd(self.lm(), self.CFG, [1], 0, "greedy", run_rng())
        assert tokens == []
        assert metrics.committed_tokens == 0 and metrics.ticks == 0
        assert len(trace) == 0
        assert decode_autoregressive(self.lm(), [1], 0, "greedy", run_rng()) == []

    def test_input_validation(self):
        lm = self.lm()
        with pytest.raises(ValueError):
            decode_ppsd(lm, PipelineConfig(24, 8), [1], 4, "greedy", run_rng())
        with pytest.raises(ValueError):
            decode_ppsd(lm, self.CFG, [], 4, "greedy", run_rng())
        with pytest.raises(ValueError):
            decode_ppsd(lm, self.CFG, [16], 4, "greedy", run_rng())
        with pytest.raises(ValueError):
            decode_ppsd(lm, self.CFG, [1], 4, "argmax", run_rng())

    def test_deep_exit_decode_stays_lossless(self):
        lm = self.lm(5)
        cfg = PipelineConfig(32, 8, exit_stage=2)
        tokens, metrics, trace = decode_ppsd(lm, cfg, [6, 6], 48, "greedy", run_rng(5))
        assert tokens == decode_autoregressive(lm, [6, 6], 48, "greedy", run_rng(5))
        check_work_conservation(trace, cfg)
        check_flush_discipline(trace)

    def test_comm_latency_decode_stays_lossless(self):
        lm = self.lm(5)
        cfg = PipelineConfig(32, 8, comm_latency=2)
        tokens, _, trace = decode_ppsd(lm, cfg, [6, 6], 48, "greedy", run_rng(5))
        assert tokens == decode_autoregressive(lm, [6, 6], 48, "greedy", run_rng(5))
        check_work_conservation(trace, cfg)

    def test_trace_tokens_round_trip_csv(self):
        lm = self.lm(2)
        _, _, trace = decode_ppsd(lm, self.CFG, [8, 1], 20, "greedy", run_rng(2))
        buf = io.StringIO()
        trace.write_csv(buf)
        body = buf.getvalue().splitlines()[1:]
        parsed = [line.split(",") for line in body]
        drafted = [int(p[4]) for p in parsed if p[2] == DRAFT_TOKEN]
        assert all(0 <= t < 16 for t in drafted)


class TestSimulatePpsdToyOracles:
    def test_greedy_oracle_simulation(self):
        lm = ToyLM(n_layers=32, vocab=16, seed=77, misalignment=1.0)
        m = simulate_ppsd(
            PipelineConfig(32, 8), AcceptanceOracle.toylm_greedy(lm), 800, run_rng(1)
        )
        assert m.committed_tokens == 800
        assert 0.0 < m.alpha_all_measured < 1.0

    def test_prompt_comes_from_prompt_stream(self):
        rng = run_rng(0)
        prompt = default_prompt(16, rng)
        assert len(prompt) == 8
        assert all(0 <= t < 16 for t in prompt)
        assert prompt == default_prompt(16, run_rng(0))
        # drawing the prompt does not advance the parent stream
        assert rng.counter == 0


class TestMetricsViews:
    def test_steady_state_view(self):
        cfg = PipelineConfig(32, 8)
        m = simulate_ppsd(cfg, AcceptanceOracle.bernoulli(1.0), 500, run_rng())
        s = steady_state_view(m, cfg)
        assert s.ticks == m.ticks - 4
        assert s.committed_tokens == m.committed_tokens
        assert s.throughput > m.throughput

    def test_throughput_bounds(self):
        cfg = PipelineConfig(32, 8)
        for alpha in (0.0, 0.5, 1.0):
            m = simulate_ppsd(cfg, AcceptanceOracle.bernoulli(alpha), 2000, run_rng())
            assert 0.0 < m.throughput <= 1.0


class TestThroughputLawGrid:
    """Spot versions of the convergence laws; the acceptance module runs the
    full grids."""

    def test_ppsd_direction(self):
        cfg = PipelineConfig(40, 10)
        m = simulate_ppsd(cfg, AcceptanceOracle.bernoulli(0.75), 60_000, run_rng(14))
        assert m.speedup_vs_ar == pytest.approx(ppsd_speedup(0.75, 40, 10), rel=0.02)

    def test_eesd_direction(self):
        cfg = PipelineConfig(40, 10)
        params = SpeedupParams(alpha=0.75, gamma=4, n_layers=40, exit_depth=10)
        m = simulate_eesd(cfg, 4, AcceptanceOracle.bernoulli(0.75), 60_000, run_rng(15))
        assert m.speedup_vs_ar == pytest.approx(eesd_speedup(params), rel=0.02)
