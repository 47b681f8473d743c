"""Command line: ``fedutr {run,stats,plug-and-play,harness}``.

Exit codes: 0 success, 1 configuration or input error, 2 failure while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, build_config, load_config, override
from .datasets import DatasetFormatError, compute_stats, load_interactions
from .numeric import NonFiniteError
from .urm import EmbeddingFormatError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("fedutr")


def _common(p):
    p.add_argument("--config", required=True, help="key = value experiment file")
    p.add_argument("--out", help="output directory (overrides the config's out)")
    p.add_argument("--seed", type=int, help="overrides the config's seed")
    p.add_argument("--threads", type=int, help="worker threads")


def build_parser():
    parser = argparse.ArgumentParser(prog="fedutr", description="Federated recommendation simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("run", help="run the experiment kind named in the config"))
    _common(sub.add_parser("plug-and-play", help="FCF with and without text-derived item rows"))
    _common(sub.add_parser("harness", help="convex FedAvg rate harness"))
    st = sub.add_parser("stats", help="dataset statistics as JSON")
    st.add_argument("dataset", nargs="?", help="user<TAB>item[<TAB>ts] file")
    st.add_argument("--config", help="use the config's dataset (synthetic when it names none)")
    st.add_argument("--seed", type=int)
    st.add_argument("--min-interactions", type=int, default=2)
    st.add_argument("--out", help="also write the JSON here")
    return parser


def _load(args, kind=None):
    overrides = {"seed": args.seed, "threads": args.threads}
    if kind is not None:
        overrides["kind"] = kind
    return load_config(args.config, overrides)


def _cmd_run(args, kind=None):
    from .runner import execute

    cfg = _load(args, kind)
    run_dir = execute(cfg, args.out, command=" ".join(["fedutr"] + sys.argv[1:]))
    print(run_dir.path)
    return EXIT_OK


def _cmd_stats(args):
    from .runner import load_data

    if args.dataset:
        ds = load_interactions(args.dataset, args.min_interactions)
    else:
        cfg = load_config(args.config, {"seed": args.seed}) if args.config else build_config({})
        if args.seed is not None and not args.config:
            cfg = override(cfg, seed=args.seed)
        ds, _ = load_data(cfg)
    stats = compute_stats(ds)
    text = json.dumps({**stats.__dict__, "table": stats.rounded()}, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "plug-and-play":
            return _cmd_run(args, "plug_and_play")
        if args.command == "harness":
            return _cmd_run(args, "convex_harness")
        return _cmd_stats(args)
    except (ConfigError, DatasetFormatError, EmbeddingFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
