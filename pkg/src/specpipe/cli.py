"""Command line front end.

Subcommands:

  analytic   print the closed-form quantities for one operating point
  run        execute one experiment (JSON config, flags override)
  sweep      expand a sweep spec and write one combined results CSV
  decode     greedy or sampling decode on the pipelined schedule
  trace      like run, but the point is the event trace CSV

`run` and `trace` accept --config plus individual flags; a flag given on the
command line wins over the value in the file. Exit status is 0 on success and
2 on a config or usage error, with a diagnostic naming the offending field on
stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .harness import (
    ConfigError,
    ExperimentConfig,
    SweepSpec,
    analytic_report,
    resolve_out_path,
    result_row,
    run as run_experiment,
    sweep as run_sweep,
    write_results_csv,
    RESULTS_HEADER,
)
from .pipesim import (
    PipelineConfig,
    decode_autoregressive,
    decode_ppsd,
    default_prompt,
)
from .rng import RngStream, derive_seed
from .toylm import ToyLM


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="JSON", help="experiment config file")
    parser.add_argument("--regime", choices=("autoregressive", "eesd", "ppsd"))
    parser.add_argument("--n-layers", type=int)
    parser.add_argument("--exit-depth", type=int)
    parser.add_argument("--exit-stage", type=int)
    parser.add_argument("--comm-latency", type=int)
    parser.add_argument("--horizon", type=int)
    parser.add_argument("--gamma", type=int)
    parser.add_argument(
        "--oracle", choices=("bernoulli", "toylm-sampling", "toylm-greedy")
    )
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--vocab", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument(
        "--steady-state", action="store_const", const=True, default=None,
        help="subtract pipeline warm-up ticks from the rates",
    )
    parser.add_argument("--out", help="write the results CSV here")
    parser.add_argument("--trace-out", help="write the event trace CSV here")
    parser.add_argument(
        "--dump-config", action="store_true",
        help="print the effective config as JSON and exit without running",
    )


_CONFIG_FLAG_FIELDS = (
    "regime",
    "n_layers",
    "exit_depth",
    "exit_stage",
    "comm_latency",
    "horizon",
    "gamma",
    "oracle",
    "alpha",
    "beta",
    "vocab",
    "seed",
    "steady_state",
    "out",
    "trace_out",
)


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    data: dict = {}
    if args.config:
        data = ExperimentConfig.from_json(args.config).to_dict()
    for name in _CONFIG_FLAG_FIELDS:
        value = getattr(args, name)
        if value is not None:
            data[name] = value
    return ExperimentConfig.from_dict(data)


def _print_kv(pairs: list[tuple[str, object]]) -> None:
    width = max(len(k) for k, _ in pairs)
    for key, value in pairs:
        if isinstance(value, float):
            value = format(value, ".6g")
        print(f"{key:<{width}}  {value}")


def _cmd_analytic(args: argparse.Namespace) -> int:
    print(
        analytic_report(
            alpha=args.alpha,
            gamma=args.gamma,
            n_layers=args.n_layers,
            exit_depth=args.exit_depth,
            t_target=args.t_target,
            t_draft=args.t_draft,
        )
    )
    return 0


def _cmd_run(args: argparse.Namespace, *, need_trace: bool = False) -> int:
    config = _config_from_args(args)
    if need_trace and not config.trace_out:
        raise ConfigError("trace_out", "the trace subcommand needs --trace-out")
    if args.dump_config:
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        return 0
    result = run_experiment(config)
    m = result.metrics
    pairs: list[tuple[str, object]] = [
        ("regime", config.regime),
        ("committed", m.committed_tokens),
        ("ticks", m.ticks),
        ("accepts", m.accepts),
        ("rejects", m.rejects),
    ]
    if m.alpha_all_measured is not None:
        pairs.append(("alpha_all", m.alpha_all_measured))
    pairs.append(("throughput", m.throughput))
    pairs.append(("speedup_vs_ar", m.speedup_vs_ar))
    if result.analytic_speedup is not None:
        pairs.append(("analytic_speedup", result.analytic_speedup))
    _print_kv(pairs)
    if config.out:
        print(f"results -> {resolve_out_path(config.out)}")
    if config.trace_out:
        print(f"trace   -> {resolve_out_path(config.trace_out)}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    spec = SweepSpec.from_json(args.config)
    results = run_sweep(spec)
    if args.out:
        path = resolve_out_path(args.out)
        write_results_csv(results, path)
        print(f"{len(results)} rows -> {path}")
    else:
        print(RESULTS_HEADER)
        for res in results:
            print(result_row(res))
    return 0


def _parse_prompt(text: str, vocab: int) -> list[int]:
    try:
        tokens = [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError("prompt", f"must be comma-separated integers, got {text!r}")
    if not tokens:
        raise ConfigError("prompt", "must contain at least one token")
    for t in tokens:
        if not 0 <= t < vocab:
            raise ConfigError("prompt", f"token {t} outside vocab of {vocab}")
    return tokens


def _cmd_decode(args: argparse.Namespace) -> int:
    pipe = PipelineConfig(
        n_layers=args.n_layers,
        exit_depth=args.exit_depth,
        exit_stage=args.exit_stage,
        comm_latency=args.comm_latency,
    )
    lm = ToyLM(
        n_layers=args.n_layers,
        vocab=args.vocab,
        seed=derive_seed(args.seed, "lm"),
        misalignment=args.beta,
    )
    rng = RngStream(derive_seed(args.seed, "run"))
    if args.prompt is not None:
        prompt = _parse_prompt(args.prompt, args.vocab)
    else:
        prompt = default_prompt(args.vocab, rng)
    tokens, metrics, trace = decode_ppsd(
        lm, pipe, prompt, args.max_tokens, args.mode, rng,
        force_reject=args.force_reject,
    )
    print("tokens:", " ".join(str(t) for t in tokens))
    pairs: list[tuple[str, object]] = [
        ("committed", metrics.committed_tokens),
        ("ticks", metrics.ticks),
        ("accepts", metrics.accepts),
        ("rejects", metrics.rejects),
        ("throughput", metrics.throughput),
        ("speedup_vs_ar", metrics.speedup_vs_ar),
    ]
    _print_kv(pairs)
    if args.check_ar:
        ar_rng = RngStream(derive_seed(args.seed, "run"))
        reference = decode_autoregressive(lm, prompt, args.max_tokens, args.mode, ar_rng)
        same = reference == tokens
        print(f"matches_autoregressive  {same}")
        if not same:
            return 1
    if args.trace_out:
        path = resolve_out_path(args.trace_out)
        trace.write_csv(path)
        print(f"trace -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specpipe",
        description="analytic model and tick simulator for early-exit speculative decoding",
    )
    parser.add_argument("--version", action="version", version=f"specpipe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_an = sub.add_parser("analytic", help="print closed-form quantities")
    p_an.add_argument("--alpha", type=float, required=True)
    p_an.add_argument("--gamma", type=int, required=True)
    p_an.add_argument("--n-layers", type=int, required=True)
    p_an.add_argument("--exit-depth", type=int, required=True)
    p_an.add_argument("--t-target", type=float, default=1.0)
    p_an.add_argument("--t-draft", type=float, default=None)
    p_an.set_defaults(func=_cmd_analytic)

    p_run = sub.add_parser("run", help="execute one experiment")
    _add_config_flags(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a sweep spec")
    p_sweep.add_argument("--config", metavar="JSON", required=True, help="sweep spec file")
    p_sweep.add_argument("--out", help="combined results CSV (default: stdout)")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_dec = sub.add_parser("decode", help="decode with the pipelined schedule")
    p_dec.add_argument("--n-layers", type=int, required=True)
    p_dec.add_argument("--exit-depth", type=int, required=True)
    p_dec.add_argument("--exit-stage", type=int, default=None)
    p_dec.add_argument("--comm-latency", type=int, default=0)
    p_dec.add_argument("--vocab", type=int, default=16)
    p_dec.add_argument("--beta", type=float, default=0.0)
    p_dec.add_argument("--seed", type=int, default=0)
    p_dec.add_argument("--mode", choices=("greedy", "sampling"), default="sampling")
    p_dec.add_argument("--max-tokens", type=int, default=64)
    p_dec.add_argument("--prompt", help="comma-separated token ids (default: seeded)")
    p_dec.add_argument(
        "--force-reject", action="store_true",
        help="discard every draft; commits come from the full model only",
    )
    p_dec.add_argument(
        "--check-ar", action="store_true",
        help="also run the sequential reference and compare token sequences",
    )
    p_dec.add_argument("--trace-out", help="write the event trace CSV here")
    p_dec.set_defaults(func=_cmd_decode)

    p_tr = sub.add_parser("trace", help="run one experiment for its event trace")
    _add_config_flags(p_tr)
    p_tr.set_defaults(func=lambda a: _cmd_run(a, need_trace=True))

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
