"""Command-line interface.

    icl-dynamics run <config.json> [--output-dir DIR]
    icl-dynamics summarize <dir> --metric {loglik|entropy|accuracy} [--unpaired]
    icl-dynamics plotdata <dir> [--window N]
    icl-dynamics maxcontext <task.jsonl> [--template NAME] [--limit N] [--samples N]
    icl-dynamics serve <config.json> [--host H] [--port P]

The backend URL for remote configs can be overridden with the
ICL_DYNAMICS_BACKEND_URL environment variable.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .runner import (
    ExperimentConfig,
    build_backend,
    compute_max_context,
    emit_plot_data,
    render_summary_table,
    run_experiment,
    summarize,
    write_summary_cells,
)
from .verbalize import TEMPLATES, load_dataset


def _cmd_run(args) -> int:
    config = ExperimentConfig.load(args.config, output_dir=args.output_dir)
    result = run_experiment(config)
    print(f"wrote {result.output_dir} (K={result.max_context_size}, "
          f"{config.repetitions} runs x {len(config.transforms)} transforms)")
    for label, outcome in sorted(result.outcomes.items()):
        c = outcome.curves
        print(f"  {label}: final acc={c.accuracy_mean[-1]:.3f} "
              f"loglik={c.loglik_mean[-1]:.4f} entropy={c.entropy_mean[-1]:.4f}"
              + (f" ({outcome.aborted} aborted)" if outcome.aborted else ""))
    return 0


def _cmd_summarize(args) -> int:
    cells = summarize(args.dir, metric=args.metric, paired=not args.unpaired)
    print(render_summary_table(cells, args.metric))
    path = write_summary_cells(args.dir, args.metric, cells)
    print(f"wrote {path}")
    return 0


def _cmd_plotdata(args) -> int:
    for path in emit_plot_data(args.dir, window=args.window):
        print(f"wrote {path}")
    return 0


def _cmd_maxcontext(args) -> int:
    dataset = load_dataset(args.task)
    template = TEMPLATES[args.template]
    backend_spec = json.loads(Path(args.backend_config).read_text()) if args.backend_config else {"kind": "echo"}
    backend = build_backend(backend_spec, dataset, template)
    k = compute_max_context(
        dataset, template, backend, args.limit or backend.token_limit,
        sample_count=args.samples, seed=args.seed,
    )
    print(k)
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    spec = json.loads(Path(args.config).read_text(encoding="utf-8"))
    dataset = load_dataset(spec["task"])
    template = TEMPLATES[spec.get("template", "single")]
    backend = build_backend(spec["backend"], dataset, template)
    uvicorn.run(create_app(backend), host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icl-dynamics", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute an experiment config")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("summarize", help="significance table default vs variants")
    p.add_argument("dir")
    p.add_argument("--metric", choices=["loglik", "entropy", "accuracy"], default="loglik")
    p.add_argument("--unpaired", action="store_true")
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("plotdata", help="CSV curves for plotting")
    p.add_argument("dir")
    p.add_argument("--window", type=int, default=None)
    p.set_defaults(func=_cmd_plotdata)

    p = sub.add_parser("maxcontext", help="max in-context examples within the token limit")
    p.add_argument("task")
    p.add_argument("--template", choices=sorted(TEMPLATES), default="single")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backend-config", default=None)
    p.set_defaults(func=_cmd_maxcontext)

    p = sub.add_parser("serve", help="serve a reference backend over the wire protocol")
    p.add_argument("config", help="JSON with 'task', 'template', 'backend'")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
