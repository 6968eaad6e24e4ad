"""Stage wiring: in-memory experiments for ablations and the file-based pipeline."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import model as M
from .config import Config
from .datagen import (
    Catalog,
    generate_catalog,
    generate_logs,
    read_catalog,
    read_logs,
    split_by_day,
    write_catalog,
    write_logs,
)
from .errors import GclmoError, InputError
from .evaluation import (
    ExposureStats,
    evaluate,
    exposure_stats,
    read_exposure_stats,
    write_exposure_stats,
)
from .graph import NeighborGraph, build_neighbor_graph, read_graph, write_graph
from .retrieval import build_index, read_index, write_index
from .train import TrainConfig, build_instances, train

log = logging.getLogger(__name__)


def eval_k(cfg: Config, n_items: int) -> int:
    k = int(cfg["eval.k"])
    return k if k > 0 else max(1, n_items // 100)


def make_catalog(cfg: Config) -> Catalog:
    return generate_catalog(
        cfg["datagen.items"],
        cfg["datagen.categories"],
        cfg["datagen.queries"],
        cfg["datagen.skew"],
        cfg["datagen.dim"],
        cfg["datagen.seed"],
        relevance_threshold=cfg["datagen.relevance_threshold"],
        n_styles=cfg["datagen.styles"],
        style_strength=cfg["datagen.style_strength"],
    )


def make_logs(cfg: Config, catalog: Catalog):
    days = cfg["datagen.days"] + cfg["datagen.eval_days"]
    records = list(generate_logs(catalog, cfg["datagen.users"], days, cfg["datagen.page_size"], cfg["datagen.seed"]))
    return split_by_day(records, cfg["datagen.days"])


def make_stats(cfg: Config, train_records, n_items: int) -> ExposureStats:
    thr = cfg["eval.longtail_threshold"]
    return exposure_stats(
        train_records, n_items, cfg["eval.longtail_window"], cfg["eval.longtail_percentile"], thr if thr >= 0 else None
    )


@dataclass
class ExperimentData:
    catalog: Catalog
    train_records: list
    eval_records: list
    graph: NeighborGraph
    stats: ExposureStats
    _instances: dict = field(default_factory=dict)

    def instances(self, tc: TrainConfig):
        key = (tc.under_impressions, tc.random_negatives, tc.seed)
        if key not in self._instances:
            rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 4]))
            self._instances[key] = build_instances(self.train_records, self.catalog, key[0], key[1], rng)
        return self._instances[key]


def prepare_data(cfg: Config) -> ExperimentData:
    catalog = make_catalog(cfg)
    train_records, eval_records = make_logs(cfg, catalog)
    graph = build_neighbor_graph(train_records, cfg["graph.window_days"], category=catalog.item_category)
    return ExperimentData(catalog, train_records, eval_records, graph, make_stats(cfg, train_records, catalog.n_items))


def train_model(cfg: Config, data: ExperimentData, on_epoch=None):
    tc = cfg.train_config()
    model = M.init_model(data.catalog.n_items, data.catalog.n_categories, tc.dim, tc.tau, tc.init_scale, tc.seed)
    return train(model, data.graph, data.instances(tc), tc, data.catalog.item_category, on_epoch=on_epoch)


def run_variant(cfg: Config, data: ExperimentData, delta: dict | None = None):
    cfg = Config(cfg)
    for key, value in (delta or {}).items():
        cfg[key] = value
    result = train_model(cfg, data)
    index = build_index(
        result.model,
        data.graph,
        data.catalog.item_category,
        cfg["index.topk"],
        cfg["index.category_restricted"],
        cfg["train.fanout"],
    )
    k = eval_k(cfg, data.catalog.n_items)
    return evaluate(index, data.eval_records, k, data.catalog, data.stats, train_max_day=cfg["datagen.days"] - 1)


STAGES = ("datagen", "build-graph", "train", "build-index", "evaluate")

FILES = {
    "catalog": "catalog.json",
    "logs": "logs.jsonl",
    "eval_logs": "eval_logs.jsonl",
    "graph": "graph.tsv",
    "checkpoint": "model.ckpt",
    "metrics": "train_metrics.jsonl",
    "index": "index.tsv",
    "stats": "exposure_stats.json",
    "report": "report.json",
    "manifest": "manifest.json",
}

# files each stage reads; hashed into the manifest before the stage runs
STAGE_INPUTS = {
    "datagen": (),
    "build-graph": ("logs", "catalog"),
    "train": ("logs", "graph", "catalog"),
    "build-index": ("checkpoint", "graph", "catalog"),
    "evaluate": ("index", "eval_logs", "logs", "catalog"),
}


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_atomic(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def stage_datagen(cfg: Config, paths: dict) -> None:
    catalog = make_catalog(cfg)
    train_records, held_out = make_logs(cfg, catalog)
    write_catalog(catalog, paths["catalog"])
    write_logs(train_records, paths["logs"])
    write_logs(held_out, paths["eval_logs"])


def stage_build_graph(cfg: Config, paths: dict) -> None:
    catalog = read_catalog(paths["catalog"])
    records = list(read_logs(paths["logs"]))
    write_graph(build_neighbor_graph(records, cfg["graph.window_days"], category=catalog.item_category), paths["graph"])


def train_from_files(cfg: Config, logs, graph_path, catalog_path, out, metrics_out=None):
    """Train a fresh model from files, checkpointing to ``out``.

    Per-epoch metrics go to ``metrics_out`` as JSON lines when given.
    """
    catalog = read_catalog(catalog_path)
    records = list(read_logs(logs))
    graph = read_graph(graph_path, catalog.item_category)
    if graph.n_nodes != catalog.n_items:
        raise InputError(f"graph has {graph.n_nodes} nodes, catalog {catalog.n_items} items", path=graph_path)
    tc = cfg.train_config()
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 4]))
    instances = build_instances(records, catalog, tc.under_impressions, tc.random_negatives, rng)
    model = M.init_model(catalog.n_items, catalog.n_categories, tc.dim, tc.tau, tc.init_scale, tc.seed)
    sink = open(metrics_out, "w", encoding="utf-8") if metrics_out else None
    try:

        def on_epoch(entry):
            log.info("epoch %d total loss %.4f", entry["epoch"], entry["loss_total"])
            if sink is not None:
                sink.write(json.dumps(entry, sort_keys=True) + "\n")
                sink.flush()

        result = train(model, graph, instances, tc, catalog.item_category, on_epoch=on_epoch)
    finally:
        if sink is not None:
            sink.close()
    M.checkpoint(result.model, out)
    return result


def stage_train(cfg: Config, paths: dict) -> None:
    train_from_files(cfg, paths["logs"], paths["graph"], paths["catalog"], paths["checkpoint"], paths["metrics"])


def index_from_files(cfg: Config, checkpoint_path, graph_path, catalog_path, out):
    catalog = read_catalog(catalog_path)
    model = M.restore(checkpoint_path)
    graph = read_graph(graph_path, catalog.item_category)
    index = build_index(
        model, graph, catalog.item_category, cfg["index.topk"], cfg["index.category_restricted"], cfg["train.fanout"]
    )
    write_index(index, out)
    return index


def stage_build_index(cfg: Config, paths: dict) -> None:
    index_from_files(cfg, paths["checkpoint"], paths["graph"], paths["catalog"], paths["index"])


def stage_evaluate(cfg: Config, paths: dict) -> None:
    catalog = read_catalog(paths["catalog"])
    train_records = list(read_logs(paths["logs"]))
    stats = make_stats(cfg, train_records, catalog.n_items)
    write_exposure_stats(stats, paths["stats"])
    held_out = list(read_logs(paths["eval_logs"]))
    train_max = max((r.timestamp_day for r in train_records), default=-1)
    report = evaluate(read_index(paths["index"]), held_out, eval_k(cfg, catalog.n_items), catalog, stats, train_max)
    write_atomic(paths["report"], report.to_json() + "\n")


RUNNERS = {
    "datagen": stage_datagen,
    "build-graph": stage_build_graph,
    "train": stage_train,
    "build-index": stage_build_index,
    "evaluate": stage_evaluate,
}


def run_pipeline(cfg: Config, stages=None, workdir=None) -> dict:
    """Run the requested stages in dependency order inside ``workdir``.

    The manifest is rewritten atomically after every stage.  A failing stage
    leaves a partial manifest naming it, then the error propagates.
    """
    wanted = set(STAGES if stages is None else stages)
    unknown = wanted - set(STAGES)
    if unknown:
        raise InputError(f"unknown stage(s) {sorted(unknown)}; valid: {', '.join(STAGES)}")
    workdir = workdir or cfg["pipeline.workdir"]
    os.makedirs(workdir, exist_ok=True)
    paths = {k: os.path.join(workdir, v) for k, v in FILES.items()}
    manifest = {
        "version": __version__,
        "config": dict(sorted(cfg.items())),
        "seeds": {"datagen": cfg["datagen.seed"], "train": cfg["train.seed"]},
        "stages": [],
        "inputs": {},
        "outputs": {},
        "wall_time": {},
        "status": "running",
    }

    def save():
        write_atomic(paths["manifest"], json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    for stage in STAGES:
        if stage not in wanted:
            continue
        try:
            hashes = {}
            for key in STAGE_INPUTS[stage]:
                if not os.path.exists(paths[key]):
                    raise InputError(f"missing input for stage {stage}", path=paths[key])
                hashes[FILES[key]] = file_hash(paths[key])
            manifest["inputs"][stage] = hashes
            start = time.perf_counter()
            RUNNERS[stage](cfg, paths)
            manifest["wall_time"][stage] = time.perf_counter() - start
            manifest["stages"].append(stage)
        except GclmoError as exc:
            manifest["status"] = "failed"
            manifest["failed_stage"] = stage
            manifest["error"] = str(exc)
            save()
            raise
        save()
    for key, name in FILES.items():
        if key != "manifest" and os.path.exists(paths[key]):
            manifest["outputs"][name] = file_hash(paths[key])
    manifest["status"] = "ok"
    save()
    return manifest
