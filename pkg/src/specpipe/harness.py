"""Experiment configs, single runs, sweeps, and result serialization.

An ExperimentConfig pins down one simulated run completely: schedule, stage
geometry, verdict oracle, horizon, and seed. run() executes it and pairs the
measured metrics with the matching closed-form speedup so results files carry
their own reference column. sweep() expands a base config along one or two
axes into a list of runs sharing the base seed.

Relative output paths resolve against the SPECPIPE_OUT_DIR environment
variable when it is set, so batch jobs can redirect artifacts without
touching their configs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, fields, replace
from typing import Iterable, Sequence

from .analytic import (
    CostModel,
    SpeedupParams,
    eesd_speedup,
    expected_accept_len,
    overall_acceptance,
    ppsd_over_eesd_lambda,
    ppsd_reference_speedup,
    ppsd_speedup,
    sd_gain,
)
from .pipesim import (
    AcceptanceOracle,
    EventTrace,
    PipelineConfig,
    RunMetrics,
    simulate_autoregressive,
    simulate_eesd,
    simulate_ppsd,
    steady_state_view,
)
from .rng import RngStream, derive_seed
from .toylm import ToyLM

REGIMES = ("autoregressive", "eesd", "ppsd")
ORACLES = ("bernoulli", "toylm-sampling", "toylm-greedy")

RESULTS_HEADER = (
    "regime,n_layers,exit_depth,gamma,alpha,beta,seed,horizon,"
    "committed,ticks,accepts,rejects,alpha_all,throughput,speedup,analytic_speedup"
)

ALPHA_EVAL_PREFIXES = 200
MAX_SWEEP_CELLS = 10_000


class ConfigError(ValueError):
    """A config field failed validation; .field names the offender."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ExperimentConfig:
    regime: str
    n_layers: int
    exit_depth: int
    horizon: int
    exit_stage: int | None = None
    comm_latency: int = 0
    gamma: int | None = None
    oracle: str | None = None
    alpha: float | None = None
    beta: float = 0.0
    vocab: int = 16
    seed: int = 0
    steady_state: bool = False
    out: str | None = None
    trace_out: str | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError("regime", f"must be one of {REGIMES}, got {self.regime!r}")
        _check_int(self, "n_layers", minimum=1)
        _check_int(self, "exit_depth", minimum=1)
        if self.exit_depth > self.n_layers:
            raise ConfigError(
                "exit_depth", f"must be <= n_layers, got {self.exit_depth} > {self.n_layers}"
            )
        _check_int(self, "horizon", minimum=1)
        _check_int(self, "comm_latency", minimum=0)
        _check_int(self, "seed")
        _check_int(self, "vocab", minimum=2)
        n_stages = -(-self.n_layers // self.exit_depth)
        if self.exit_stage is not None:
            _check_int(self, "exit_stage", minimum=1)
            if n_stages < 2:
                raise ConfigError("exit_stage", "needs at least 2 stages")
            if self.exit_stage > n_stages - 1:
                raise ConfigError(
                    "exit_stage",
                    f"must be <= n_stages - 1 = {n_stages - 1}, got {self.exit_stage}",
                )

        if self.regime == "autoregressive":
            for name in ("gamma", "oracle", "alpha"):
                if getattr(self, name) is not None:
                    raise ConfigError(name, "does not apply to the autoregressive regime")
            if self.beta != 0.0:
                raise ConfigError("beta", "does not apply to the autoregressive regime")
            return

        if self.oracle not in ORACLES:
            raise ConfigError(
                "oracle", f"{self.regime} regime needs one of {ORACLES}, got {self.oracle!r}"
            )
        if self.regime == "eesd":
            if self.gamma is None:
                raise ConfigError("gamma", "eesd regime needs a draft length")
            _check_int(self, "gamma", minimum=1)
        elif self.gamma is not None:
            raise ConfigError("gamma", "only the eesd regime takes a draft length")

        if self.oracle == "bernoulli":
            if self.alpha is None:
                raise ConfigError("alpha", "bernoulli oracle needs an acceptance rate")
            if not isinstance(self.alpha, (int, float)) or isinstance(self.alpha, bool):
                raise ConfigError("alpha", f"must be a number, got {self.alpha!r}")
            if not 0.0 <= self.alpha <= 1.0 or math.isnan(self.alpha):
                raise ConfigError("alpha", f"must lie in [0, 1], got {self.alpha}")
            if self.beta != 0.0:
                raise ConfigError("beta", "only applies to toy-LM oracles")
        else:
            if self.alpha is not None:
                raise ConfigError("alpha", "toy-LM oracles measure alpha, do not set it")
            if not isinstance(self.beta, (int, float)) or isinstance(self.beta, bool):
                raise ConfigError("beta", f"must be a number, got {self.beta!r}")
            if self.beta < 0.0 or math.isnan(self.beta):
                raise ConfigError("beta", f"must be >= 0, got {self.beta}")

    # ---- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value != f.default:
                out[f.name] = value
        out["regime"] = self.regime
        out["n_layers"] = self.n_layers
        out["exit_depth"] = self.exit_depth
        out["horizon"] = self.horizon
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown config field")
        missing = [k for k in ("regime", "n_layers", "exit_depth", "horizon") if k not in data]
        if missing:
            raise ConfigError(missing[0], "required config field is missing")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("config", f"not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config", "top-level JSON value must be an object")
        return cls.from_dict(data)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _check_int(cfg, name: str, minimum: int | None = None) -> None:
    value = getattr(cfg, name)
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(name, f"must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(name, f"must be >= {minimum}, got {value}")


@dataclass(frozen=True)
class RunResult:
    config: ExperimentConfig
    metrics: RunMetrics
    analytic_speedup: float | None
    measured_alpha: float | None
    trace: EventTrace | None


def _build_oracle(config: ExperimentConfig) -> tuple[AcceptanceOracle, ToyLM | None]:
    if config.oracle == "bernoulli":
        return AcceptanceOracle.bernoulli(config.alpha), None
    lm = ToyLM(
        n_layers=config.n_layers,
        vocab=config.vocab,
        seed=derive_seed(config.seed, "lm"),
        misalignment=config.beta,
    )
    if config.oracle == "toylm-greedy":
        return AcceptanceOracle.toylm_greedy(lm), lm
    return AcceptanceOracle.toylm_sampling(lm), lm


def _reference_alpha(config: ExperimentConfig, pipe: PipelineConfig, lm: ToyLM | None):
    """Acceptance rate to feed the closed forms: the configured one for the
    bernoulli oracle, a measured one for the toy model."""
    if config.oracle == "bernoulli":
        return config.alpha
    if config.oracle == "toylm-sampling":
        return lm.empirical_alpha(pipe.exit_layer, ALPHA_EVAL_PREFIXES)
    return lm.greedy_agreement(pipe.exit_layer, ALPHA_EVAL_PREFIXES)


def _analytic_speedup(
    config: ExperimentConfig, pipe: PipelineConfig, alpha: float | None
) -> float | None:
    if config.regime == "autoregressive" or alpha is None:
        return None
    if config.regime == "ppsd":
        if pipe.exit_stage == 1:
            return ppsd_speedup(alpha, config.n_layers, config.exit_depth)
        return ppsd_reference_speedup(
            alpha, config.n_layers, config.exit_depth, pipe.exit_stage
        )
    if pipe.exit_stage != 1:
        return None  # no closed form for deep-exit drafting rounds
    params = SpeedupParams(
        alpha=alpha,
        gamma=config.gamma,
        n_layers=config.n_layers,
        exit_depth=config.exit_depth,
    )
    return eesd_speedup(params)


def run(config: ExperimentConfig, *, want_trace: bool = False) -> RunResult:
    """Execute one experiment and attach its closed-form reference speedup.

    Writes the results row to config.out and the event trace to
    config.trace_out when those paths are set. A trace is collected when
    either trace_out is set or want_trace is passed.
    """
    pipe = PipelineConfig(
        n_layers=config.n_layers,
        exit_depth=config.exit_depth,
        exit_stage=config.exit_stage,
        comm_latency=config.comm_latency,
    )
    trace = EventTrace() if (want_trace or config.trace_out) else None
    rng = RngStream(derive_seed(config.seed, "run"))

    if config.regime == "autoregressive":
        metrics = simulate_autoregressive(pipe, config.horizon, trace=trace)
        alpha_ref = None
    else:
        oracle, lm = _build_oracle(config)
        if config.regime == "eesd":
            metrics = simulate_eesd(
                pipe, config.gamma, oracle, config.horizon, rng, trace=trace
            )
        else:
            metrics = simulate_ppsd(pipe, oracle, config.horizon, rng, trace=trace)
        alpha_ref = _reference_alpha(config, pipe, lm)

    if config.steady_state:
        metrics = steady_state_view(metrics, pipe)
    result = RunResult(
        config=config,
        metrics=metrics,
        analytic_speedup=_analytic_speedup(config, pipe, alpha_ref),
        measured_alpha=alpha_ref,
        trace=trace,
    )
    if config.out:
        write_results_csv([result], resolve_out_path(config.out))
    if config.trace_out:
        trace.write_csv(resolve_out_path(config.trace_out))
    return result


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepSpec:
    """A base config expanded along one or two named axes.

    Axes iterate in the given order with the second axis innermost, every cell
    keeping the base seed so any row can be reproduced as a single run.
    """

    base: ExperimentConfig
    axes: tuple[tuple[str, tuple], ...]

    def __post_init__(self):
        if not 1 <= len(self.axes) <= 2:
            raise ConfigError("axes", f"need 1 or 2 sweep axes, got {len(self.axes)}")
        names = [name for name, _ in self.axes]
        if len(set(names)) != len(names):
            raise ConfigError("axes", "sweep axes must name distinct fields")
        field_names = {f.name for f in fields(ExperimentConfig)}
        total = 1
        for name, values in self.axes:
            if name not in field_names:
                raise ConfigError(name, "unknown config field")
            if name in ("out", "trace_out"):
                raise ConfigError(name, "output paths cannot be swept")
            if len(values) == 0:
                raise ConfigError(name, "sweep axis needs at least one value")
            total *= len(values)
        if total > MAX_SWEEP_CELLS:
            raise ConfigError(
                "axes", f"sweep of {total} cells exceeds the cap of {MAX_SWEEP_CELLS}"
            )

    def configs(self) -> list[ExperimentConfig]:
        base = replace(self.base, out=None, trace_out=None)
        cells = [base]
        for name, values in self.axes:
            cells = [replace(cfg, **{name: v}) for cfg in cells for v in values]
        return cells

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        if not isinstance(data, dict):
            raise ConfigError("sweep", "top-level JSON value must be an object")
        unknown = set(data) - {"base", "axes"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown sweep field")
        if "base" not in data or "axes" not in data:
            raise ConfigError("sweep", "needs 'base' and 'axes' entries")
        axes_raw = data["axes"]
        if not isinstance(axes_raw, dict) or not axes_raw:
            raise ConfigError("axes", "must be an object mapping field names to value lists")
        axes = tuple((name, tuple(vals)) for name, vals in axes_raw.items())
        return cls(base=ExperimentConfig.from_dict(data["base"]), axes=axes)

    @classmethod
    def from_json(cls, path) -> "SweepSpec":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("sweep", f"not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def sweep(spec: SweepSpec) -> list[RunResult]:
    return [run(cfg) for cfg in spec.configs()]


# ---------------------------------------------------------------------------
# result serialization


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def result_row(result: RunResult) -> str:
    cfg, m = result.config, result.metrics
    cells = [
        cfg.regime,
        cfg.n_layers,
        cfg.exit_depth,
        cfg.gamma,
        cfg.alpha,
        cfg.beta if cfg.oracle in ("toylm-sampling", "toylm-greedy") else None,
        cfg.seed,
        cfg.horizon,
        m.committed_tokens,
        m.ticks,
        m.accepts,
        m.rejects,
        m.alpha_all_measured,
        m.throughput,
        m.speedup_vs_ar,
        result.analytic_speedup,
    ]
    return ",".join(_fmt(c) for c in cells)


def write_results_csv(results: Iterable[RunResult], dest) -> None:
    if hasattr(dest, "write"):
        _write_results(results, dest)
    else:
        with open(dest, "w", newline="") as fh:
            _write_results(results, fh)


def _write_results(results: Iterable[RunResult], fh) -> None:
    fh.write(RESULTS_HEADER + "\n")
    for res in results:
        fh.write(result_row(res) + "\n")


def resolve_out_path(path: str) -> str:
    base = os.environ.get("SPECPIPE_OUT_DIR")
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


# ---------------------------------------------------------------------------
# analytic report


def analytic_report(
    alpha: float,
    gamma: int,
    n_layers: int,
    exit_depth: int,
    t_target: float = 1.0,
    t_draft: float | None = None,
) -> str:
    """Closed-form quantities for one operating point, four decimals each.

    The per-token draft cost defaults to t_target scaled by the exit depth
    fraction, matching the tick model where a draft costs one stage-forward
    out of n_stages.
    """
    params = SpeedupParams(
        alpha=alpha, gamma=gamma, n_layers=n_layers, exit_depth=exit_depth
    )
    if t_draft is None:
        t_draft = t_target * exit_depth / n_layers
    cost = CostModel(t_target=t_target, t_draft=t_draft)
    rows = [
        ("expected_accept_len", expected_accept_len(alpha, gamma)),
        ("overall_acceptance", overall_acceptance(alpha, gamma)),
        ("sd_gain", sd_gain(cost, alpha, gamma)),
        ("eesd_speedup", eesd_speedup(params)),
        ("ppsd_speedup", ppsd_speedup(alpha, n_layers, exit_depth)),
        ("lambda_ppsd_over_eesd", ppsd_over_eesd_lambda(params)),
    ]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {value:.4f}" for name, value in rows)
