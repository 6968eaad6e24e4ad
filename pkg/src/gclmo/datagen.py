"""Synthetic search-behavior logs with a controlled popularity skew.

The catalog carries hidden latent vectors for items and queries.  They drive
exposure, click and purchase draws in the generator and back the relevance
oracle used for labels and evaluation; the model never sees them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class ItemMeta:
    item_id: int
    category_id: int
    popularity: float
    latent_vector: np.ndarray


@dataclass(frozen=True)
class QueryMeta:
    query_id: int
    category_id: int
    latent_vector: np.ndarray


@dataclass
class Catalog:
    """Item and query tables stored column-wise.

    ``item_category[i]``, ``popularity[i]`` and ``item_latent[i]`` describe
    item ``i``; item ids are ``0..n_items-1`` in decreasing popularity order.
    """

    item_category: np.ndarray
    popularity: np.ndarray
    item_latent: np.ndarray
    query_category: np.ndarray
    query_latent: np.ndarray
    n_categories: int
    style_latent: np.ndarray = None  # (n_categories, n_styles, dim) taste directions
    relevance_threshold: float = 0.4
    skew: float = 1.1
    seed: int = 0
    _by_category: list = field(default=None, init=False, repr=False, compare=False)

    @property
    def n_items(self) -> int:
        return len(self.item_category)

    @property
    def n_queries(self) -> int:
        return len(self.query_category)

    @property
    def dim(self) -> int:
        return self.item_latent.shape[1]

    @property
    def items(self) -> list[ItemMeta]:
        return [
            ItemMeta(i, int(self.item_category[i]), float(self.popularity[i]), self.item_latent[i])
            for i in range(self.n_items)
        ]

    @property
    def queries(self) -> list[QueryMeta]:
        return [
            QueryMeta(q, int(self.query_category[q]), self.query_latent[q])
            for q in range(self.n_queries)
        ]

    def items_in_category(self, category_id: int) -> np.ndarray:
        if self._by_category is None:
            order = np.argsort(self.item_category, kind="stable")
            bounds = np.searchsorted(self.item_category[order], np.arange(self.n_categories + 1))
            self._by_category = [order[bounds[c]:bounds[c + 1]] for c in range(self.n_categories)]
        return self._by_category[category_id]

    def to_json(self) -> dict:
        return {
            "n_categories": self.n_categories,
            "relevance_threshold": self.relevance_threshold,
            "skew": self.skew,
            "seed": self.seed,
            "item_category": self.item_category.tolist(),
            "popularity": self.popularity.tolist(),
            "item_latent": self.item_latent.tolist(),
            "query_category": self.query_category.tolist(),
            "query_latent": self.query_latent.tolist(),
            "style_latent": self.style_latent.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Catalog":
        try:
            return cls(
                item_category=np.asarray(data["item_category"], dtype=np.int64),
                popularity=np.asarray(data["popularity"], dtype=np.float64),
                item_latent=np.asarray(data["item_latent"], dtype=np.float64),
                query_category=np.asarray(data["query_category"], dtype=np.int64),
                query_latent=np.asarray(data["query_latent"], dtype=np.float64),
                n_categories=int(data["n_categories"]),
                style_latent=np.asarray(data["style_latent"], dtype=np.float64),
                relevance_threshold=float(data["relevance_threshold"]),
                skew=float(data.get("skew", 1.1)),
                seed=int(data.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed catalog: {exc}") from exc


@dataclass
class SearchRecord:
    user_id: int
    query_id: int
    category_id: int
    trigger_items: list[int]
    exposed: list[tuple[int, bool, bool]]
    timestamp_day: int

    def clicked_items(self) -> list[int]:
        return [item for item, clicked, _ in self.exposed if clicked]

    def purchased_items(self) -> list[int]:
        return [item for item, _, purchased in self.exposed if purchased]

    def to_json(self) -> str:
        return json.dumps(
            {
                "user_id": self.user_id,
                "query_id": self.query_id,
                "category_id": self.category_id,
                "trigger_items": self.trigger_items,
                "exposed": [[i, c, p] for i, c, p in self.exposed],
                "timestamp_day": self.timestamp_day,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "SearchRecord":
        d = json.loads(line)
        exposed = []
        for entry in d["exposed"]:
            item, clicked, purchased = entry
            if not isinstance(clicked, bool) or not isinstance(purchased, bool):
                raise ValueError("click/purchase flags must be booleans")
            if purchased and not clicked:
                raise ValueError(f"item {item} purchased without click")
            exposed.append((int(item), clicked, purchased))
        return cls(
            user_id=int(d["user_id"]),
            query_id=int(d["query_id"]),
            category_id=int(d["category_id"]),
            trigger_items=[int(t) for t in d["trigger_items"]],
            exposed=exposed,
            timestamp_day=int(d["timestamp_day"]),
        )


@dataclass(frozen=True)
class BehaviorConfig:
    """Knobs of the simulated user and ranking behavior."""

    searches_per_day: float = 1.0
    favorite_categories: int = 3
    favorite_prob: float = 0.85
    taste_weight: float = 2.0
    popularity_weight: float = 1.0
    exposure_sharpness: float = 6.0
    click_slope: float = 6.0
    click_bias: float = -4.0
    purchase_slope: float = 4.0
    purchase_bias: float = -3.0
    max_triggers: int = 3


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def zipf_weights(n: int, skew: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -skew
    return w / w.sum()


def generate_catalog(
    n_items: int,
    n_categories: int,
    n_queries: int,
    skew: float = 1.1,
    dim: int = 16,
    seed: int = 0,
    spread: float = 1.0,
    relevance_threshold: float = 0.4,
    n_styles: int = 6,
    style_strength: float = 1.5,
) -> Catalog:
    """Zipf popularity by item id, round-robin categories shuffled over ids.

    Item latents mix a category center, one of ``n_styles`` per-category
    style directions and isotropic noise; users later prefer one style per
    category, which is what makes co-clicks informative.
    """
    if n_categories < 1 or n_items < n_categories:
        raise ConfigError(f"need n_items >= n_categories >= 1, got {n_items}, {n_categories}")
    if n_queries < 1:
        raise ConfigError(f"n_queries must be >= 1, got {n_queries}")
    if not skew > 0:
        raise ConfigError(f"skew must be > 0, got {skew}")
    if dim < 2:
        raise ConfigError(f"dim must be >= 2, got {dim}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))

    popularity = zipf_weights(n_items, skew)
    item_category = rng.permutation(np.arange(n_items) % n_categories)
    centers = _normalize_rows(rng.standard_normal((n_categories, dim)))
    styles = _normalize_rows(rng.standard_normal((n_categories, n_styles, dim)))
    item_style = rng.integers(0, n_styles, size=n_items)
    noise = rng.standard_normal((n_items, dim)) / np.sqrt(dim)
    item_latent = _normalize_rows(
        centers[item_category] + style_strength * styles[item_category, item_style] + spread * noise
    )

    query_category = rng.permutation(np.arange(n_queries) % n_categories)
    qnoise = rng.standard_normal((n_queries, dim)) / np.sqrt(dim)
    query_latent = _normalize_rows(centers[query_category] + spread * qnoise)
    return Catalog(
        item_category=item_category.astype(np.int64),
        popularity=popularity,
        item_latent=item_latent,
        query_category=query_category.astype(np.int64),
        query_latent=query_latent,
        n_categories=n_categories,
        style_latent=styles,
        relevance_threshold=relevance_threshold,
        skew=skew,
        seed=seed,
    )


def relevance_oracle(item_id: int, query_id: int, catalog: Catalog) -> bool:
    if not 0 <= item_id < catalog.n_items:
        raise KeyError(f"unknown item {item_id}")
    if not 0 <= query_id < catalog.n_queries:
        raise KeyError(f"unknown query {query_id}")
    if catalog.item_category[item_id] != catalog.query_category[query_id]:
        return False
    sim = float(catalog.item_latent[item_id] @ catalog.query_latent[query_id])
    return sim > catalog.relevance_threshold


def relevance_mask(item_ids: np.ndarray, query_id: int, catalog: Catalog) -> np.ndarray:
    """Vectorized ``relevance_oracle`` over many items for one query."""
    item_ids = np.asarray(item_ids, dtype=np.int64)
    same = catalog.item_category[item_ids] == catalog.query_category[query_id]
    sim = catalog.item_latent[item_ids] @ catalog.query_latent[query_id]
    return same & (sim > catalog.relevance_threshold)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate_logs(
    catalog: Catalog,
    n_users: int,
    n_days: int,
    page_size: int = 10,
    seed: int = 0,
    behavior: BehaviorConfig | None = None,
) -> Iterator[SearchRecord]:
    """Yield search records ordered by (day, user, record).

    Each day draws from its own seed derived from ``seed`` and the day index,
    so a day's randomness does not depend on how many draws earlier days made.
    Trigger lists depend on earlier clicks, which makes days sequential.
    """
    if catalog.n_items == 0:
        raise ConfigError("empty catalog")
    if page_size < 1:
        raise ConfigError(f"page_size must be >= 1, got {page_size}")
    if n_users < 1 or n_days < 1:
        raise ConfigError("n_users and n_days must be >= 1")
    from .retrieval import select_triggers

    bc = behavior or BehaviorConfig()
    cats_with_queries = np.unique(catalog.query_category)
    sizes = np.bincount(catalog.item_category, minlength=catalog.n_categories)[cats_with_queries]
    if sizes.min() < page_size:
        raise ConfigError(f"page_size {page_size} exceeds the smallest searched category ({sizes.min()} items)")
    queries_by_cat = {int(c): np.flatnonzero(catalog.query_category == c) for c in cats_with_queries}
    mass = np.bincount(catalog.item_category, weights=catalog.popularity, minlength=catalog.n_categories)
    cat_p = mass[cats_with_queries] / mass[cats_with_queries].sum()
    log_pop = np.log(catalog.popularity)

    urng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    n_fav = min(bc.favorite_categories, len(cats_with_queries))
    favorites = [urng.choice(cats_with_queries, size=n_fav, replace=False, p=cat_p) for _ in range(n_users)]
    n_styles = catalog.style_latent.shape[1]
    user_style = urng.integers(0, n_styles, size=(n_users, catalog.n_categories))
    history: list[list[tuple[int, int]]] = [[] for _ in range(n_users)]

    for day in range(n_days):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2, day]))
        for user in range(n_users):
            for _ in range(rng.poisson(bc.searches_per_day)):
                if rng.random() < bc.favorite_prob:
                    cat = int(rng.choice(favorites[user]))
                else:
                    cat = int(rng.choice(cats_with_queries, p=cat_p))
                query = int(rng.choice(queries_by_cat[cat]))
                intent = catalog.query_latent[query] + bc.taste_weight * catalog.style_latent[cat, user_style[user, cat]]
                intent /= np.linalg.norm(intent)

                pool = catalog.items_in_category(cat)
                sim = catalog.item_latent[pool] @ intent
                n = page_size
                keys = bc.popularity_weight * log_pop[pool] + bc.exposure_sharpness * sim + rng.gumbel(size=len(pool))
                top = np.argpartition(-keys, n - 1)[:n] if n < len(pool) else np.arange(len(pool))
                top = top[np.argsort(-keys[top], kind="stable")]
                p_click = _sigmoid(bc.click_slope * sim[top] + bc.click_bias)
                p_buy = _sigmoid(bc.purchase_slope * sim[top] + bc.purchase_bias)
                clicked = rng.random(n) < p_click
                purchased = clicked & (rng.random(n) < p_buy)

                triggers = select_triggers(history[user], cat, bc.max_triggers, catalog.item_category)
                record = SearchRecord(
                    user_id=user,
                    query_id=query,
                    category_id=cat,
                    trigger_items=triggers,
                    exposed=[
                        (int(pool[t]), bool(c), bool(p)) for t, c, p in zip(top, clicked, purchased)
                    ],
                    timestamp_day=day,
                )
                history[user].extend((item, day) for item in record.clicked_items())
                yield record


def write_logs(records: Iterable[SearchRecord], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")
            n += 1
    return n


def read_logs(path) -> Iterator[SearchRecord]:
    """Parse a JSONL log, raising ``InputError`` with the offending line number."""
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open logs: {exc.strerror}", path=path) from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield SearchRecord.from_json(line)
            except (ValueError, KeyError, TypeError) as exc:
                raise InputError(f"bad search record: {exc}", path=path, line=lineno) from exc


def load_logs(path) -> list[SearchRecord]:
    return list(read_logs(path))


def write_catalog(catalog: Catalog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(catalog.to_json(), fh)


def read_catalog(path) -> Catalog:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot open catalog: {exc.strerror}", path=path) from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed catalog JSON: {exc.msg}", path=path, line=exc.lineno) from exc
    return Catalog.from_json(data)


def split_by_day(records: Sequence[SearchRecord], first_eval_day: int):
    train = [r for r in records if r.timestamp_day < first_eval_day]
    held_out = [r for r in records if r.timestamp_day >= first_eval_day]
    return train, held_out
