"""Command-line entry point: ``sirc generate | run | project | report | compact``.

Exit codes: 0 success, 1 validation or usage error, 2 I/O error, 3 internal
invariant violation (for example an accounting identity that does not hold).

Configuration precedence is flags > config file > defaults. Without
``--config`` the file ``$SIRC_CONFIG_DIR/sirc.json`` is used when it exists.
"""

from __future__ import annotations

import argparse
import logging
import sys
from fractions import Fraction
from pathlib import Path

from sirc.config import load_config
from sirc.domain import ValidationError
from sirc.metrics import (
    AccountingError,
    ProjectionInputs,
    RunReport,
    check_accounting,
    parse_structured,
    project_cost,
    project_tokens,
    projection_from_report,
    render_csv,
    render_structured,
    render_table,
)
from sirc.pipeline import MockBackend, run_experiment, run_sweep
from sirc.store import CacheStore
from sirc.workload import generate, read_workload, write_workload

log = logging.getLogger("sirc")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INVARIANT = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors (exit 1); exit 2 is reserved for I/O."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _number(text: str) -> float:
    """Float that also accepts ratios such as ``4841/500``."""
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


# -- generate -----------------------------------------------------------------


def cmd_generate(args) -> int:
    overrides = {
        "seed": args.seed,
        "workload": {
            "n_seed_prompts": args.n_seed_prompts,
            "n_challenge_prompts": args.n_challenge_prompts,
            "n_intent_families": args.families,
            "near_miss_rate": args.near_miss_rate,
        },
    }
    config = load_config(args.config, overrides)
    spec = config.workload_spec()
    prompts = generate(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        n = write_workload(prompts, fh)
    if n == 0:
        log.warning("workload is empty: n_seed_prompts and n_challenge_prompts are both 0")
    near = sum(p.is_near_miss for p in prompts)
    print(f"seed: {spec.seed}")
    print(f"wrote {n} prompts to {out} (seed set {spec.n_seed_prompts}, challenge set {spec.n_challenge_prompts},"
          f" {near} near-miss, {spec.n_intent_families} families)")
    return EXIT_OK


# -- run ----------------------------------------------------------------------


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _summary_line(pipeline: RunReport, mono: RunReport) -> str:
    air, vs = pipeline.stages.get("AIR"), pipeline.stages.get("VS")
    parts = []
    if air is not None and vs is not None:
        parts.append(f"AIR hit rate {air.hits}/{air.invocations} = {100 * air.hit_rate:.2f}%")
        parts.append(f"VS hit rate {vs.hits}/{vs.invocations} = {100 * vs.hit_rate:.2f}%")
    parts.append(f"tokens/prompt pipeline {pipeline.tokens_per_request:,.2f} vs monolithic {mono.tokens_per_request:,.2f}")
    return "; ".join(parts)


def cmd_run(args) -> int:
    overrides = {"seed": args.seed, "pipeline": {"air_tau": args.air_tau, "vs_tau": args.vs_tau,
                                                 "mono_tau": args.mono_tau}}
    if args.out_dir is not None:
        overrides["output"] = {"dir": args.out_dir}
    config = load_config(args.config, overrides)
    spec = config.workload_spec()
    with open(args.workload, encoding="utf-8") as fh:
        workload = read_workload(fh)
    schemas = {ns: spec.schema(ns) for ns in spec.namespaces}
    unknown = sorted({p.prompt.client_namespace for p in workload} - set(schemas))
    if unknown:
        raise ValidationError(f"workload namespace {unknown[0]!r} is not configured (workload.namespaces)")
    n_seed = args.n_seed if args.n_seed is not None else min(spec.n_seed_prompts, len(workload))
    pipe_cfg = config.pipeline_config()
    backend = MockBackend.from_workload(workload, config.backend_spec())
    keep = args.snapshot is not None

    if args.tau:
        results = run_sweep(workload, pipe_cfg, backend, schemas, args.tau, n_seed, args.workers, keep)
        runs = [(f"_tau{t:.2f}", r) for t, r in results.items()]
    else:
        runs = [("", run_experiment(workload, pipe_cfg, backend, schemas, n_seed, keep))]

    out_dir = Path(config.output["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for suffix, result in runs:
        for report in (result.pipeline, result.monolithic):
            check_accounting(report)
            base = f"{report.system}{suffix}"
            _write(out_dir / f"{base}.report", render_structured(report))
            if args.csv:
                _write(out_dir / f"{base}.csv", render_csv(report))
        label = f" (tau {suffix[4:]})" if suffix else ""
        print(f"== pipeline-aware{label} ==")
        print(render_table(result.pipeline))
        print(f"== monolithic{label} ==")
        print(render_table(result.monolithic))
        print(_summary_line(result.pipeline, result.monolithic))
        print()
    if args.tau:
        print("tau sweep (prompt-level threshold):")
        for suffix, result in runs:
            air = result.pipeline.stages.get("AIR")
            sem = air.semantic_hits if air else 0
            e2e = sum(result.pipeline.e2e_latency_ms) / max(1, len(result.pipeline.e2e_latency_ms))
            print(f"  tau {suffix[4:]}: AIR semantic hits {sem}; mean simulated end-to-end {e2e:,.2f} ms")
    if keep:
        _write(Path(args.snapshot), runs[0][1].pipeline_snapshot)
    print(f"reports written to {out_dir}")
    return EXIT_OK


# -- project ------------------------------------------------------------------

_TOKEN_FLAGS = ("air_uncached", "vs_uncached", "air_cached", "vs_cached", "fanout")


def cmd_project_tokens(args) -> int:
    if args.from_report:
        with open(args.from_report, encoding="utf-8") as fh:
            inputs = projection_from_report(parse_structured(fh.read()))
    else:
        missing = [f"--{name.replace('_', '-')}" for name in _TOKEN_FLAGS if getattr(args, name) is None]
        if missing:
            args.parser.error(f"the following arguments are required: {', '.join(missing)}")
        inputs = ProjectionInputs(args.air_uncached, args.vs_uncached, args.air_cached, args.vs_cached, args.fanout)
    proj = project_tokens(inputs)
    print(f"fanout: {inputs.vs_fanout:.4f} VS invocations per prompt")
    print(f"without caching: {proj.without_caching:,.2f} tokens/prompt")
    print(f"with caching:    {proj.with_caching:,.2f} tokens/prompt")
    print(f"reduction:       {100 * proj.reduction:.1f}% ({proj.reduction:.6f})")
    return EXIT_OK


def cmd_project_cost(args) -> int:
    scale = 1e-6  # flags are per million tokens
    cost = project_cost(args.calls, args.retained, args.in_tokens, args.out_tokens,
                        args.price_in * scale, args.price_out * scale)
    print(f"LLM-backed calls: {cost.paid_calls:,} of {cost.calls:,} ({100 * args.retained:.2f}% retained)")
    print(f"cost without caching: {cost.without_caching:,.2f}")
    print(f"cost with caching:    {cost.with_caching:,.2f}")
    return EXIT_OK


# -- report / compact ---------------------------------------------------------


def cmd_report(args) -> int:
    with open(args.path, encoding="utf-8") as fh:
        report = parse_structured(fh.read())
    check_accounting(report)
    render = {"table": render_table, "csv": render_csv, "structured": render_structured}[args.format]
    sys.stdout.write(render(report))
    return EXIT_OK


def cmd_compact(args) -> int:
    with open(args.snapshot, encoding="utf-8") as fh:
        store = CacheStore.load(fh)
    for ns in args.invalidate or ():
        store.bump_epoch(ns)
    removed = store.compact()
    out = Path(args.out or args.snapshot)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        kept = store.dump(fh)
    print(f"removed {removed} stale entries; {kept} remain in {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sirc", description="Pipeline-aware semantic cache experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic workload file")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--out", required=True, help="workload output path")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-seed-prompts", type=int)
    g.add_argument("--n-challenge-prompts", type=int)
    g.add_argument("--families", type=int, help="number of intent families")
    g.add_argument("--near-miss-rate", type=float)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="replay a workload through both cache systems")
    r.add_argument("--workload", required=True)
    r.add_argument("--config", help="JSON config file")
    r.add_argument("--out-dir", help="report directory (default from config: output.dir)")
    r.add_argument("--seed", type=int)
    r.add_argument("--n-seed", type=int, help="warm-up prompts (default workload.n_seed_prompts)")
    r.add_argument("--air-tau", type=float)
    r.add_argument("--vs-tau", type=float)
    r.add_argument("--mono-tau", type=float)
    r.add_argument("--tau", type=float, action="append",
                   help="sweep the prompt-level threshold; repeat for several values")
    r.add_argument("--workers", type=int, default=1, help="parallel sweep experiments (default 1)")
    r.add_argument("--csv", action="store_true", help="also write CSV reports")
    r.add_argument("--snapshot", help="write the pipeline cache snapshot here")
    r.set_defaults(func=cmd_run)

    p = sub.add_parser("project", help="token and cost projections")
    psub = p.add_subparsers(dest="projection", required=True, parser_class=_Parser)
    t = psub.add_parser("tokens", help="per-prompt tokens with and without stage caching")
    t.add_argument("--air-uncached", type=_number)
    t.add_argument("--vs-uncached", type=_number)
    t.add_argument("--air-cached", type=_number)
    t.add_argument("--vs-cached", type=_number)
    t.add_argument("--fanout", type=_number, help="VS invocations per prompt, e.g. 4841/500")
    t.add_argument("--from-report", help="derive all inputs from a pipeline report")
    t.set_defaults(func=cmd_project_tokens, parser=t)
    c = psub.add_parser("cost", help="API cost when only a fraction of calls reach the LLM")
    c.add_argument("--calls", type=int, required=True)
    c.add_argument("--retained", type=_number, required=True, help="fraction of calls that are LLM-backed")
    c.add_argument("--in-tokens", type=_number, required=True, help="mean input tokens per call")
    c.add_argument("--out-tokens", type=_number, required=True, help="mean output tokens per call")
    c.add_argument("--price-in", type=_number, default=0.0, help="price per 1M input tokens")
    c.add_argument("--price-out", type=_number, default=0.0, help="price per 1M output tokens")
    c.set_defaults(func=cmd_project_cost)

    rep = sub.add_parser("report", help="re-render a stored report")
    rep.add_argument("path")
    rep.add_argument("--format", choices=("table", "csv", "structured"), default="table")
    rep.set_defaults(func=cmd_report)

    k = sub.add_parser("compact", help="drop stale-epoch entries from a cache snapshot")
    k.add_argument("snapshot")
    k.add_argument("--out", help="output path (default: rewrite in place)")
    k.add_argument("--invalidate", action="append", metavar="NAMESPACE",
                   help="bump this namespace's epoch before compacting (repeatable)")
    k.set_defaults(func=cmd_compact)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ValidationError, ValueError) as exc:
        print(f"sirc: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"sirc: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AccountingError as exc:
        print(f"sirc: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except Exception as exc:  # noqa: BLE001 - anything else is a bug
        log.exception("internal error")
        print(f"sirc: internal error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
