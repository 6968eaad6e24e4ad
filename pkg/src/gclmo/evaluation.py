"""Offline metrics: Recall@K, purchase Recall@K, good-relevance rate and
long-tail rate, plus seeded ablation comparisons."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datagen import Catalog, relevance_mask
from .errors import ContractViolation, InputError
from .retrieval import InvertedIndex, retrieve

PRODUCTION_LONGTAIL_WINDOW = 30
PRODUCTION_LONGTAIL_THRESHOLD = 100.0


@dataclass
class EvalRecord:
    triggers: list[int]
    targets: list[int]
    query_id: int
    is_purchase_record: bool
    purchase_targets: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.targets = list(dict.fromkeys(self.targets))
        if not self.targets:
            raise ContractViolation("evaluation record needs at least one target")


def eval_records(records) -> list[EvalRecord]:
    """Held-out searches that have triggers and at least one click."""
    out = []
    for rec in records:
        clicked = rec.clicked_items()
        if rec.trigger_items and clicked:
            bought = rec.purchased_items()
            out.append(EvalRecord(list(rec.trigger_items), clicked, rec.query_id, bool(bought), bought))
    return out


@dataclass
class ExposureStats:
    avg_daily: np.ndarray  # per item, over the window
    window_days: int
    threshold: float
    production_window: int = PRODUCTION_LONGTAIL_WINDOW
    production_threshold: float = PRODUCTION_LONGTAIL_THRESHOLD

    def is_long_tail(self, items) -> np.ndarray:
        items = np.asarray(items, dtype=np.int64)
        known = (items >= 0) & (items < len(self.avg_daily))
        exp = np.zeros(len(items))
        exp[known] = self.avg_daily[items[known]]
        return exp < self.threshold

    def to_json(self) -> dict:
        return {
            "window_days": self.window_days,
            "threshold": self.threshold,
            "production_window": self.production_window,
            "production_threshold": self.production_threshold,
            "avg_daily": self.avg_daily.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ExposureStats":
        return cls(
            np.asarray(d["avg_daily"], dtype=np.float64),
            int(d["window_days"]),
            float(d["threshold"]),
            int(d.get("production_window", PRODUCTION_LONGTAIL_WINDOW)),
            float(d.get("production_threshold", PRODUCTION_LONGTAIL_THRESHOLD)),
        )


def exposure_stats(records, n_items: int, window_days: int = 14, percentile: float = 80.0, threshold: float | None = None) -> ExposureStats:
    """Average daily exposures over the trailing window.

    Without an explicit ``threshold`` the long-tail cut is the given
    percentile of the per-item averages.
    """
    records = list(records)
    counts = np.zeros(n_items)
    if records:
        last = max(r.timestamp_day for r in records)
        for r in records:
            if r.timestamp_day > last - window_days:
                for item, _, _ in r.exposed:
                    counts[item] += 1
    avg = counts / window_days
    if threshold is None or threshold < 0:
        threshold = float(np.percentile(avg, percentile))
    return ExposureStats(avg, window_days, float(threshold))


def write_exposure_stats(stats: ExposureStats, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(stats.to_json(), fh)


def read_exposure_stats(path) -> ExposureStats:
    try:
        with open(path, encoding="utf-8") as fh:
            return ExposureStats.from_json(json.load(fh))
    except OSError as exc:
        raise InputError(f"cannot open exposure stats: {exc.strerror}", path=path) from exc
    except (ValueError, KeyError) as exc:
        raise InputError(f"malformed exposure stats: {exc}", path=path) from exc


def recall_at_k(retrieved, targets) -> float:
    targets = set(targets)
    if not targets:
        raise ContractViolation("empty target set")
    return sum(1 for i in retrieved if i in targets) / len(targets)


def p_good(retrieved, query_id: int, relevance: Callable[[int, int], bool] | Catalog) -> float:
    retrieved = list(retrieved)
    if not retrieved:
        raise ContractViolation("empty retrieval set")
    if isinstance(relevance, Catalog):
        return float(relevance_mask(retrieved, query_id, relevance).mean())
    return sum(bool(relevance(i, query_id)) for i in retrieved) / len(retrieved)


def p_longtail(retrieved, stats: ExposureStats) -> float:
    retrieved = list(retrieved)
    if not retrieved:
        raise ContractViolation("empty retrieval set")
    return float(stats.is_long_tail(retrieved).mean())


@dataclass
class MetricsReport:
    recall_at_k: float
    recall_p_at_k: float
    p_good: float
    p_l: float
    k: int
    n_records: int
    n_purchase_records: int
    per_seed: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def popularity_retriever(train_records, catalog: Catalog):
    """Baseline ranking each category's items by global training click count."""
    clicks = np.zeros(catalog.n_items)
    for r in train_records:
        for item in r.clicked_items():
            clicks[item] += 1
    ranked = {}
    for c in range(catalog.n_categories):
        members = catalog.items_in_category(c)
        ranked[c] = members[np.lexsort((members, -clicks[members]))].tolist()

    def run(triggers, k):
        if not triggers:
            return []
        tset = set(triggers)
        cat = int(catalog.item_category[triggers[0]])
        return [i for i in ranked[cat] if i not in tset][:k]

    return run


def index_retriever(index: InvertedIndex):
    def run(triggers, k):
        return retrieve(index, triggers, k).item_ids

    return run


def evaluate(index, records: Sequence, k: int, catalog: Catalog, stats: ExposureStats, train_max_day: int | None = None) -> MetricsReport:
    """Average the four metrics over held-out searches.

    ``index`` is an ``InvertedIndex`` or any ``(triggers, k) -> item ids``
    callable.  ``records`` are raw search records or ``EvalRecord``s; raw
    records are checked against ``train_max_day`` for temporal leakage.
    """
    if k < 1:
        raise ContractViolation("K must be >= 1")
    if records and not isinstance(records[0], EvalRecord):
        if train_max_day is not None:
            early = [r.timestamp_day for r in records if r.timestamp_day <= train_max_day]
            if early:
                raise ContractViolation(f"evaluation record on day {early[0]} overlaps training (max day {train_max_day})")
        records = eval_records(records)
    if not records:
        raise ContractViolation("no evaluation records")
    run = index_retriever(index) if isinstance(index, InvertedIndex) else index
    recalls, recalls_p, goods, tails = [], [], [], []
    for rec in records:
        got = run(rec.triggers, k)
        recalls.append(recall_at_k(got, rec.targets))
        if rec.is_purchase_record:
            recalls_p.append(recall_at_k(got, rec.purchase_targets or rec.targets))
        if got:
            goods.append(p_good(got, rec.query_id, catalog))
            tails.append(p_longtail(got, stats))

    def mean(xs):
        return float(np.mean(xs)) if xs else 0.0

    return MetricsReport(mean(recalls), mean(recalls_p), mean(goods), mean(tails), k, len(records), len(recalls_p))


VARIANTS = {
    "GCL-MO": {},
    "minus-relevance": {"train.w_relevance": 0.0},
    "minus-exposure": {"train.w_exposure": 0.0},
    "minus-click": {"train.w_click": 0.0},
    "minus-purchase": {"train.w_purchase": 0.0},
    "GL-MO": {"train.contrastive": False},
    "AP-GCL-MO": {"train.exclude_positives": False},
}

METRICS = ("recall_at_k", "recall_p_at_k", "p_good", "p_l")


@dataclass
class AblationTable:
    rows: list[dict]  # one per (variant, seed)
    variants: list[str]
    seeds: list[int]

    def values(self, variant: str, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.rows if r["variant"] == variant])

    def summary(self) -> dict[str, dict[str, tuple[float, float]]]:
        out = {}
        for v in self.variants:
            out[v] = {}
            for m in METRICS:
                x = self.values(v, m)
                out[v][m] = (float(x.mean()), float(x.std(ddof=1)) if len(x) > 1 else 0.0)
        return out

    def to_tsv(self) -> str:
        head = ["variant", "seed", *METRICS]
        lines = ["\t".join(head)]
        for r in self.rows:
            lines.append("\t".join([r["variant"], str(r["seed"])] + [f"{r[m]:.6f}" for m in METRICS]))
        for v, stats in self.summary().items():
            lines.append("\t".join([v, "mean"] + [f"{stats[m][0]:.6f}" for m in METRICS]))
            lines.append("\t".join([v, "stdev"] + [f"{stats[m][1]:.6f}" for m in METRICS]))
        return "\n".join(lines) + "\n"


POPULARITY = "popularity"


def ablate(
    base_config,
    variants: dict[str, dict] | None = None,
    n_seeds: int = 5,
    seeds=None,
    progress=None,
    popularity: bool = False,
) -> AblationTable:
    """Train and evaluate each variant on the same per-seed data.

    The base configuration is always the first row group, named
    ``"GCL-MO"`` unless ``variants`` already maps that name.  With
    ``popularity`` a ``"popularity"`` row group scores the click-count
    baseline on the same held-out records.
    """
    from .pipeline import eval_k, prepare_data, run_variant

    if n_seeds < 3 and seeds is None:
        raise ContractViolation("ablation needs at least 3 seeds")
    seeds = list(seeds) if seeds is not None else list(range(n_seeds))
    variants = dict(variants or {})
    plan = {"GCL-MO": variants.pop("GCL-MO", {})}
    plan.update(variants)
    rows = []
    for seed in seeds:
        cfg = base_config.with_seed(seed)
        data = prepare_data(cfg)
        for name, delta in plan.items():
            report = run_variant(cfg, data, delta)
            row = {"variant": name, "seed": seed, **{m: getattr(report, m) for m in METRICS}}
            rows.append(row)
            if progress is not None:
                progress(row)
        if popularity:
            report = evaluate(
                popularity_retriever(data.train_records, data.catalog),
                data.eval_records,
                eval_k(cfg, data.catalog.n_items),
                data.catalog,
                data.stats,
            )
            row = {"variant": POPULARITY, "seed": seed, **{m: getattr(report, m) for m in METRICS}}
            rows.append(row)
            if progress is not None:
                progress(row)
    names = list(plan) + ([POPULARITY] if popularity else [])
    return AblationTable(rows, names, seeds)
