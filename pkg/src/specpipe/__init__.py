"""Analytic model and tick-accurate simulator for early-exit self-speculative
decoding, in three schedules: autoregressive, draft-then-verify rounds (eesd),
and the verify-while-draft pipeline (ppsd)."""

__version__ = "0.1.0"

from .analytic import (
    CostModel,
    SpeedupParams,
    eesd_best_gamma,
    eesd_speedup,
    expected_accept_len,
    n_stages,
    overall_acceptance,
    ppsd_over_eesd_lambda,
    ppsd_reference_speedup,
    ppsd_speedup,
    sd_gain,
    unimodal_peak,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    RunResult,
    SweepSpec,
    analytic_report,
    run,
    sweep,
    write_results_csv,
)
from .pipesim import (
    AcceptanceOracle,
    EventTrace,
    OracleMode,
    PipelineConfig,
    RunMetrics,
    StageMessage,
    decode_autoregressive,
    decode_ppsd,
    default_prompt,
    partition_stages,
    simulate_autoregressive,
    simulate_eesd,
    simulate_ppsd,
    steady_state_view,
)
from .rng import RngStream, derive_seed, mix64
from .speccore import (
    DegenerateResidualError,
    DistributionError,
    ProbVec,
    accept_draft,
    greedy_match,
    residual_distribution,
    sample_token,
)
from .toylm import PrefixState, ToyLM

__all__ = [
    "AcceptanceOracle",
    "ConfigError",
    "CostModel",
    "DegenerateResidualError",
    "DistributionError",
    "EventTrace",
    "ExperimentConfig",
    "OracleMode",
    "PipelineConfig",
    "PrefixState",
    "ProbVec",
    "RngStream",
    "RunMetrics",
    "RunResult",
    "SpeedupParams",
    "StageMessage",
    "SweepSpec",
    "ToyLM",
    "accept_draft",
    "analytic_report",
    "decode_autoregressive",
    "decode_ppsd",
    "default_prompt",
    "derive_seed",
    "eesd_best_gamma",
    "eesd_speedup",
    "expected_accept_len",
    "greedy_match",
    "mix64",
    "n_stages",
    "overall_acceptance",
    "partition_stages",
    "ppsd_over_eesd_lambda",
    "ppsd_reference_speedup",
    "ppsd_speedup",
    "residual_distribution",
    "run",
    "sample_token",
    "sd_gain",
    "simulate_autoregressive",
    "simulate_eesd",
    "simulate_ppsd",
    "steady_state_view",
    "sweep",
    "unimodal_peak",
    "write_results_csv",
]
