"""Command-line entry points.

Subcommands: gen-layout, run-trial, ga-train, run-grid, report, and
mock-llm-serve.  See README for examples.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

from .core import Arena, DEFAULT_PARAMS, load_params, save_params
from .engine import TrialConfig, run_trial
from .gateway import GatewayConfig, mock_serve
from .harness import (
    ARENA_RESOURCES,
    GridSpec,
    emit_boxplot_data,
    load_store,
    run_grid,
    summarize,
    write_summary_csv,
    write_summary_markdown,
)
from .layouts import Distribution, LayoutSpec, generate, load_layout, save_layout
from .tuner import GaConfig, ga_run, save_history


def _add_gateway_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--llm-mode", default="mock", choices=("live", "mock", "replay", "record"))
    parser.add_argument("--llm-base-url", default="http://127.0.0.1:8080/v1")
    parser.add_argument("--llm-model", default="mock-model")
    parser.add_argument("--llm-api-key-env", default="OPENAI_API_KEY")
    parser.add_argument("--llm-timeout", type=float, default=30.0)
    parser.add_argument("--llm-mock-behavior", default="scripted")
    parser.add_argument("--llm-cassette", default=None)
    parser.add_argument("--llm-reasoning-effort", default="low", choices=("low", "medium", "high"))
    parser.add_argument("--llm-max-output-tokens", type=int, default=1024)


def _gateway_from_args(args) -> GatewayConfig:
    return GatewayConfig(
        base_url=args.llm_base_url,
        model_name=args.llm_model,
        api_key_env=args.llm_api_key_env,
        reasoning_effort=args.llm_reasoning_effort,
        max_output_tokens=args.llm_max_output_tokens,
        timeout=args.llm_timeout,
        mode=args.llm_mode,
        mock_behavior=args.llm_mock_behavior,
        cassette_path=args.llm_cassette,
    )


def _cmd_gen_layout(args) -> int:
    arena = Arena.square(args.arena)
    spec = LayoutSpec(Distribution(args.dist), args.count, arena, seed=args.seed)
    field = generate(spec)
    save_layout(field, spec, args.out)
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y"])
            writer.writerows((repr(float(x)), repr(float(y))) for x, y in field.positions)
    print(f"wrote {len(field)} points to {args.out}")
    return 0


def _cmd_run_trial(args) -> int:
    arena = Arena.square(args.arena)
    count = args.count if args.count is not None else ARENA_RESOURCES.get(args.arena)
    if count is None:
        print("--count is required for non-standard arena sizes", file=sys.stderr)
        return 1
    params = load_params(args.params) if args.params else DEFAULT_PARAMS
    layout_seed = args.layout_seed if args.layout_seed is not None else args.seed
    layout = LayoutSpec(Distribution(args.dist), count, arena, seed=layout_seed)
    config = TrialConfig(
        arena=arena,
        team_size=args.team,
        layout=layout,
        params=params,
        policy=args.policy,
        duration=args.duration,
        seed=args.seed,
        gateway=_gateway_from_args(args) if args.policy == "llm" else None,
    )
    resources = load_layout(args.layout_file) if args.layout_file else None
    result = run_trial(config, resources=resources)
    if args.log:
        with open(args.log, "wb") as fh:
            fh.write(result.log_bytes())
    report = {
        "deposits": result.deposits,
        "llm_calls": result.llm_calls,
        "llm_fallbacks": result.llm_fallbacks,
        "latency_mean": (sum(result.latency_samples) / len(result.latency_samples))
        if result.latency_samples else None,
        "settings": result.settings,
    }
    print(json.dumps(report, indent=2))
    return 0


def _cmd_ga_train(args) -> int:
    config = GaConfig(
        population=args.population,
        generations=args.generations,
        trials_per_genome=args.trials,
        eval_duration=args.duration,
        team_size=args.team,
        arena_side=args.arena,
        resource_count=args.count if args.count is not None else ARENA_RESOURCES[args.arena],
        distribution=Distribution(args.dist),
        master_seed=args.seed,
        workers=args.workers,
    )
    start = time.time()
    best, history = ga_run(config)
    save_params(best, args.out)
    if args.history:
        save_history(history, args.history)
    print(f"best fitness {history[-1].best_so_far:.2f} after {config.generations} generations "
          f"({time.time() - start:.1f}s); genome written to {args.out}")
    return 0


def _load_grid_spec(args) -> GridSpec:
    overrides = {}
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as fh:
            overrides = json.load(fh)
    params = DEFAULT_PARAMS
    if "params_file" in overrides:
        params = load_params(overrides.pop("params_file"))
    if args.params:
        params = load_params(args.params)
    policies = tuple(args.policies.split(",")) if args.policies else None
    kwargs = dict(
        team_sizes=tuple(overrides.get("team_sizes", (4, 6, 8, 10))),
        arena_sides=tuple(float(a) for a in overrides.get("arena_sides", (6.0, 8.0, 10.0))),
        distributions=tuple(overrides.get("distributions", ("clustered", "powerlaw", "random"))),
        trials_per_cell=int(overrides.get("trials_per_cell", 10)),
        duration=float(overrides.get("duration", 1200.0)),
        policies=policies or tuple(overrides.get("policies", ("cascade", "scripted"))),
        master_seed=int(overrides.get("master_seed", 0)),
        params=params,
    )
    if any(p == "llm" for p in kwargs["policies"]):
        kwargs["gateway"] = _gateway_from_args(args)
    return GridSpec(**kwargs)


def _cmd_run_grid(args) -> int:
    spec = _load_grid_spec(args)
    total = len(spec.cells()) * spec.trials_per_cell * len(spec.policies)
    done = {"n": 0}

    def progress(row):
        done["n"] += 1
        status = row.get("status")
        print(f"[{done['n']}] {row['key']}: "
              + (f"deposits={row['deposits']}" if status == "ok" else f"ERROR {row.get('error')}"))

    rows = run_grid(spec, args.out, parallelism=args.parallelism,
                    resume=args.resume, progress=progress)
    ok = sum(1 for r in rows if r.get("status") == "ok")
    failed = sum(1 for r in rows if r.get("status") == "error")
    print(f"grid complete: {ok}/{total} trials ok, {failed} failed; store at {args.out}")
    return 2 if failed else 0


def _cmd_report(args) -> int:
    rows = load_store(args.store)
    if not rows:
        print(f"no results found in {args.store}", file=sys.stderr)
        return 1
    summary = summarize(rows, args.baseline, args.candidate)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "summary.csv")
    md_path = os.path.join(args.out, "summary.md")
    write_summary_csv(summary, csv_path, args.baseline, args.candidate)
    write_summary_markdown(summary, md_path, args.baseline, args.candidate)
    boxplots = emit_boxplot_data(rows, args.out)
    print(f"{args.candidate} wins {summary.wins}/{summary.cells} cells")
    if summary.mean_relative_improvement is not None:
        print(f"mean relative improvement {100 * summary.mean_relative_improvement:+.1f}%, "
              f"mean absolute gain {summary.mean_absolute_gain:+.2f}")
    print(f"wrote {csv_path}, {md_path}, {len(boxplots)} boxplot CSVs")
    if summary.missing_cells:
        print(f"WARNING: {len(summary.missing_cells)} cells missing a policy", file=sys.stderr)
    return 0


def _cmd_mock_llm_serve(args) -> int:
    server = mock_serve(args.behavior, port=args.port, cassette_path=args.cassette)
    print(f"mock endpoint ({args.behavior}) listening on {server.base_url}")
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        server.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swarmforage")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-layout", help="generate a resource layout file")
    p.add_argument("--dist", required=True, choices=[d.value for d in Distribution])
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--arena", type=float, required=True, help="arena side length in meters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None, help="also write scatter data as CSV")
    p.set_defaults(func=_cmd_gen_layout)

    p = sub.add_parser("run-trial", help="run one foraging trial")
    p.add_argument("--team", type=int, default=4)
    p.add_argument("--arena", type=float, default=6.0)
    p.add_argument("--dist", default="clustered", choices=[d.value for d in Distribution])
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--params", default=None, help="parameter file (ga-train output)")
    p.add_argument("--policy", default="cascade")
    p.add_argument("--duration", type=float, default=1200.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layout-seed", type=int, default=None)
    p.add_argument("--layout-file", default=None, help="reuse a generated layout file")
    p.add_argument("--log", default=None, help="write the JSONL event log here")
    _add_gateway_args(p)
    p.set_defaults(func=_cmd_run_trial)

    p = sub.add_parser("ga-train", help="tune the seven parameters with the GA")
    p.add_argument("--population", type=int, default=10)
    p.add_argument("--generations", type=int, default=30)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--duration", type=float, default=720.0)
    p.add_argument("--team", type=int, default=6)
    p.add_argument("--arena", type=float, default=8.0)
    p.add_argument("--dist", default="powerlaw", choices=[d.value for d in Distribution])
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="best-genome parameter file")
    p.add_argument("--history", default=None, help="per-generation CSV")
    p.set_defaults(func=_cmd_ga_train)

    p = sub.add_parser("run-grid", help="run the experiment grid")
    p.add_argument("--spec", default=None, help="JSON file overriding grid fields")
    p.add_argument("--policies", default=None, help="comma-separated policy list")
    p.add_argument("--params", default=None)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True)
    _add_gateway_args(p)
    p.set_defaults(func=_cmd_run_grid)

    p = sub.add_parser("report", help="summarize a results store")
    p.add_argument("--store", required=True)
    p.add_argument("--baseline", default="cascade")
    p.add_argument("--candidate", default="scripted")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("mock-llm-serve", help="serve a local mock decision endpoint")
    p.add_argument("--behavior", default="scripted")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--cassette", default=None)
    p.set_defaults(func=_cmd_mock_llm_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
