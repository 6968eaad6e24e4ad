"""Command-line entry point: ``gclmo <subcommand> ...``.

Every subcommand accepts ``--config FILE`` and repeatable ``--set key=value``;
dedicated flags map onto config keys and win over both the file and
``GCLMO_*`` environment variables.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .config import DEFAULTS, load_config
from .errors import ConfigError, GclmoError, InputError, NumericalError

log = logging.getLogger("gclmo")

# flag dest -> config key
DATAGEN_FLAGS = {
    "items": "datagen.items",
    "categories": "datagen.categories",
    "queries": "datagen.queries",
    "users": "datagen.users",
    "days": "datagen.days",
    "eval_days": "datagen.eval_days",
    "page_size": "datagen.page_size",
    "skew": "datagen.skew",
    "seed": "datagen.seed",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'stage.key = value' config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("-v", "--verbose", action="store_true")


def _flag(p, name, key, **kw):
    kind = type(DEFAULTS[key])
    p.add_argument(name, type=kind if kind is not bool else str, default=None, help=f"sets {key}", **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gclmo", description="Multi-objective graph contrastive item-to-item retrieval.")
    parser.add_argument("--version", action="version", version=f"gclmo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="synthetic catalog and search logs")
    _common(p)
    for dest, key in DATAGEN_FLAGS.items():
        _flag(p, "--" + dest.replace("_", "-"), key)
    p.add_argument("--out", required=True, help="training logs (JSONL)")
    p.add_argument("--catalog-out", required=True)
    p.add_argument("--eval-out", help="held-out logs for the --eval-days days after training")

    p = sub.add_parser("build-graph", help="co-click neighbor graph")
    _common(p)
    p.add_argument("--logs", required=True)
    _flag(p, "--window-days", "graph.window_days")
    p.add_argument("--catalog", help="size the graph to the full catalog")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train and checkpoint a model")
    _common(p)
    p.add_argument("--logs", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics-out", help="per-epoch JSONL (default: <out>.metrics.jsonl)")
    p.add_argument("--plot", action="store_true", help="also write a loss-curve PNG")

    p = sub.add_parser("build-index", help="per-item top-K similar-item lists")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--catalog", required=True)
    _flag(p, "--topk", "index.topk")
    p.add_argument("--all-categories", action="store_true", help="do not restrict neighbors to the item's category")
    p.add_argument("--out", required=True)

    p = sub.add_parser("retrieve", help="q2i2i lookup for one user history")
    _common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--history", required=True, help='JSONL of {"item_id": i, "day": d}, chronological')
    p.add_argument("--catalog", required=True)
    p.add_argument("--query-category", type=int, required=True)
    p.add_argument("--size", type=int, default=100)
    p.add_argument("--max-triggers", type=int, default=3)
    p.add_argument("--out", help="TSV output (default: stdout)")

    p = sub.add_parser("exposure-stats", help="per-item average daily exposure and long-tail threshold")
    _common(p)
    p.add_argument("--logs", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="offline metrics on held-out logs")
    _common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--eval-logs", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--k", type=int, default=None)
    stats = p.add_mutually_exclusive_group(required=True)
    stats.add_argument("--exposure-stats", help="file from the exposure-stats subcommand")
    stats.add_argument("--train-logs", help="compute exposure stats from these logs")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="seeded variant comparison (TSV + PNG)")
    _common(p)
    p.add_argument("--variants", help="file: one 'name [key=value ...]' per line; bare names use built-ins")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--popularity", action="store_true", help="add the click-count baseline as a row group")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pipeline", help="datagen -> build-graph -> train -> build-index -> evaluate")
    _common(p)
    p.add_argument("--stages", help="comma-separated subset (default: all)")
    p.add_argument("--workdir")
    return parser


def _pairs(items, what) -> dict:
    out = {}
    for item in items:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"{what}: expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args, flags: dict | None = None):
    overrides = _pairs(args.set, "--set")
    for dest, key in (flags or {}).items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def parse_variants(path) -> dict[str, dict]:
    from .evaluation import VARIANTS

    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open variants: {exc.strerror}", path=path) from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            name, deltas = parts[0], parts[1:]
            if not deltas:
                if name not in VARIANTS:
                    raise InputError(f"unknown built-in variant {name!r}; known: {', '.join(VARIANTS)}", path, lineno)
                out[name] = dict(VARIANTS[name])
                continue
            delta = {}
            for d in deltas:
                key, eq, value = d.partition("=")
                if not eq:
                    raise InputError(f"expected key=value, got {d!r}", path, lineno)
                if key not in DEFAULTS:
                    raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}; valid keys: {', '.join(sorted(DEFAULTS))}")
                delta[key] = value
            out[name] = delta
    return out


def cmd_datagen(args) -> None:
    from .datagen import split_by_day, write_catalog, write_logs
    from .pipeline import make_catalog
    from .datagen import generate_logs

    cfg = _config(args, DATAGEN_FLAGS)
    catalog = make_catalog(cfg)
    days = cfg["datagen.days"] + (cfg["datagen.eval_days"] if args.eval_out else 0)
    records = list(generate_logs(catalog, cfg["datagen.users"], days, cfg["datagen.page_size"], cfg["datagen.seed"]))
    train_records, held_out = split_by_day(records, cfg["datagen.days"])
    write_catalog(catalog, args.catalog_out)
    n = write_logs(train_records, args.out)
    log.info("wrote %d records to %s", n, args.out)
    if args.eval_out:
        write_logs(held_out, args.eval_out)


def cmd_build_graph(args) -> None:
    from .datagen import read_catalog, read_logs
    from .graph import build_neighbor_graph, write_graph

    cfg = _config(args, {"window_days": "graph.window_days"})
    category = read_catalog(args.catalog).item_category if args.catalog else None
    graph = build_neighbor_graph(read_logs(args.logs), cfg["graph.window_days"], category=category)
    write_graph(graph, args.out)
    log.info("graph: %d nodes, %d edges", graph.n_nodes, graph.n_edges)


def cmd_train(args) -> None:
    from .pipeline import train_from_files

    cfg = _config(args)
    metrics_out = args.metrics_out or f"{args.out}.metrics.jsonl"
    result = train_from_files(cfg, args.logs, args.graph, args.catalog, args.out, metrics_out)
    if args.plot and result.history:
        from .plots import plot_training

        log.info("wrote %s", plot_training(result.history, metrics_out))


def cmd_build_index(args) -> None:
    from .pipeline import index_from_files

    cfg = _config(args, {"topk": "index.topk"})
    if args.all_categories:
        cfg["index.category_restricted"] = False
    index_from_files(cfg, args.checkpoint, args.graph, args.catalog, args.out)


def _read_history(path) -> list[tuple[int, int]]:
    out = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open history: {exc.strerror}", path=path) from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out.append((int(row["item_id"]), int(row["day"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise InputError(f"expected {{\"item_id\": i, \"day\": d}}: {exc}", path, lineno) from None
    return out


def cmd_retrieve(args) -> None:
    from .datagen import read_catalog
    from .retrieval import read_index, retrieve, select_triggers

    _config(args)
    catalog = read_catalog(args.catalog)
    history = _read_history(args.history)
    for item, _ in history:
        if not 0 <= item < catalog.n_items:
            raise InputError(f"history item {item} not in catalog", path=args.history)
    triggers = select_triggers(history, args.query_category, args.max_triggers, catalog.item_category)
    result = retrieve(read_index(args.index), triggers, args.size)
    lines = ["rank\titem_id\tscore\ttrigger"]
    lines += [f"{r}\t{i}\t{s:.6f}\t{t}" for r, (i, s, t) in enumerate(result.items, start=1)]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if not triggers:
        log.warning("no history item in category %d; empty result", args.query_category)


def cmd_exposure_stats(args) -> None:
    from .datagen import read_catalog, read_logs
    from .evaluation import write_exposure_stats
    from .pipeline import make_stats

    cfg = _config(args)
    catalog = read_catalog(args.catalog)
    write_exposure_stats(make_stats(cfg, list(read_logs(args.logs)), catalog.n_items), args.out)


def cmd_evaluate(args) -> None:
    from .datagen import read_catalog, read_logs
    from .evaluation import evaluate, read_exposure_stats
    from .pipeline import eval_k, make_stats, write_atomic
    from .retrieval import read_index

    cfg = _config(args)
    catalog = read_catalog(args.catalog)
    train_max = None
    if args.exposure_stats:
        stats = read_exposure_stats(args.exposure_stats)
    else:
        train_records = list(read_logs(args.train_logs))
        stats = make_stats(cfg, train_records, catalog.n_items)
        train_max = max((r.timestamp_day for r in train_records), default=None)
    k = args.k if args.k is not None else eval_k(cfg, catalog.n_items)
    report = evaluate(read_index(args.index), list(read_logs(args.eval_logs)), k, catalog, stats, train_max)
    write_atomic(args.out, report.to_json() + "\n")


def cmd_ablate(args) -> None:
    from .evaluation import ablate
    from .pipeline import write_atomic
    from .plots import plot_ablation

    cfg = _config(args)
    variants = parse_variants(args.variants) if args.variants else {}

    def progress(row):
        log.info("%s seed %d: %s", row["variant"], row["seed"], {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})

    table = ablate(cfg, variants, n_seeds=args.seeds, progress=progress, popularity=args.popularity)
    write_atomic(args.out, table.to_tsv())
    log.info("wrote %s and %s", args.out, plot_ablation(table, args.out))


def cmd_pipeline(args) -> None:
    from .pipeline import run_pipeline

    cfg = _config(args)
    stages = [s.strip() for s in args.stages.split(",") if s.strip()] if args.stages else None
    manifest = run_pipeline(cfg, stages, args.workdir)
    log.info("stages done: %s", ", ".join(manifest["stages"]))


COMMANDS = {
    "datagen": cmd_datagen,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "build-index": cmd_build_index,
    "retrieve": cmd_retrieve,
    "exposure-stats": cmd_exposure_stats,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"gclmo: error: {exc}", file=sys.stderr)
        print(json.dumps(exc.state, indent=1, sort_keys=True, default=str), file=sys.stderr)
        return exc.exit_code
    except GclmoError as exc:
        print(f"gclmo: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyError as exc:
        print(f"gclmo: error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return InputError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
