"""Offline item-to-item index and the query -> trigger -> similar-item lookup."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .errors import ConfigError, InputError


@dataclass
class InvertedIndex:
    lists: dict[int, list[tuple[int, float]]]
    topk: int
    category_restricted: bool
    checkpoint_hash: str = ""

    def __getitem__(self, item: int) -> list[tuple[int, float]]:
        return self.lists[item]

    def __contains__(self, item: int) -> bool:
        return item in self.lists

    @property
    def metadata(self) -> dict:
        return {
            "checkpoint_hash": self.checkpoint_hash,
            "topk": self.topk,
            "category_restricted": self.category_restricted,
        }


@dataclass
class RetrievalResult:
    query_id: int | None
    triggers: list[int]
    items: list[tuple[int, float, int]]  # (item, best score, contributing trigger)
    skipped_triggers: int = 0

    @property
    def item_ids(self) -> list[int]:
        return [i for i, _, _ in self.items]


def model_hash(model: M.EmbeddingModel) -> str:
    h = hashlib.sha256()
    for p in model.parameters().values():
        h.update(np.ascontiguousarray(p).tobytes())
    h.update(repr(model.tau).encode())
    return h.hexdigest()[:16]


def item_vectors(model: M.EmbeddingModel, graph, category, fanout: int = 10, chunk: int = 4096) -> np.ndarray:
    """Inference vectors over the base graph using each item's ``fanout``
    heaviest neighbors, so the index is a deterministic function of the model."""
    n = model.n_items
    out = np.empty((n, model.dim))
    for lo in range(0, n, chunk):
        nodes = np.arange(lo, min(n, lo + chunk))
        nbrs = graph.top_neighbors(nodes, fanout) if graph is not None else np.full((len(nodes), 0), -1)
        z, _ = M.forward(model, nodes, nbrs, nbrs >= 0, category)
        out[lo : lo + len(nodes)] = z
    return out


def _unit_rows(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)


# cosines are rounded to this many decimals so that mathematically equal scores
# computed along different summation orders compare equal
SCORE_DECIMALS = 12


def topk_from_vectors(vectors: np.ndarray, category, topk: int, category_restricted: bool = True, chunk: int = 1024):
    """Exact top-k cosine neighbors; ties broken by ascending item id."""
    if topk < 1:
        raise ConfigError(f"topK must be >= 1, got {topk}")
    unit = _unit_rows(np.asarray(vectors, dtype=np.float64))
    n = len(unit)
    category = np.asarray(category)
    lists: dict[int, list[tuple[int, float]]] = {}
    if category_restricted:
        groups = [np.flatnonzero(category == c) for c in np.unique(category)]
    else:
        groups = [np.arange(n)]
    for members in groups:
        sub = unit[members]
        k = min(topk, len(members) - 1)
        for lo in range(0, len(members), chunk):
            rows = members[lo : lo + chunk]
            sims = np.round(unit[rows] @ sub.T, SCORE_DECIMALS)
            sims[np.arange(len(rows)), np.arange(lo, lo + len(rows))] = -np.inf
            if k <= 0:
                for r in rows:
                    lists[int(r)] = []
                continue
            ids = np.broadcast_to(members, sims.shape)
            order = np.lexsort((ids, -sims), axis=-1)[:, :k]
            for pos, (r, o) in enumerate(zip(rows, order)):
                lists[int(r)] = [(int(members[j]), float(sims[pos, j])) for j in o]
    return lists


def build_index(model, graph, category, topk: int = 100, category_restricted: bool = True, fanout: int = 10) -> InvertedIndex:
    vectors = item_vectors(model, graph, category, fanout)
    lists = topk_from_vectors(vectors, category, topk, category_restricted)
    return InvertedIndex(lists, topk, category_restricted, model_hash(model))


def select_triggers(history, category: int, max_triggers: int, item_category) -> list[int]:
    """Most recent distinct history items of ``category``.

    ``history`` is a sequence of ``(item_id, day)`` in chronological order;
    later entries on the same day count as more recent.
    """
    if max_triggers < 1:
        raise ConfigError(f"max_triggers must be >= 1, got {max_triggers}")
    order = sorted(range(len(history)), key=lambda i: (history[i][1], i), reverse=True)
    out: list[int] = []
    seen = set()
    for i in order:
        item = int(history[i][0])
        if item in seen or item_category[item] != category:
            continue
        seen.add(item)
        out.append(item)
        if len(out) == max_triggers:
            break
    return out


def retrieve(index: InvertedIndex, triggers, result_size: int, query_id=None) -> RetrievalResult:
    """Max-merge the triggers' lists, drop the triggers, keep the best ``result_size``."""
    if result_size < 1:
        raise ConfigError(f"result_size must be >= 1, got {result_size}")
    trig = list(dict.fromkeys(int(t) for t in triggers))
    tset = set(trig)
    best: dict[int, tuple[float, int]] = {}
    skipped = 0
    for t in trig:
        if t not in index:
            skipped += 1
            continue
        for item, s in index[t]:
            if item in tset:
                continue
            cur = best.get(item)
            if cur is None or s > cur[0] or (s == cur[0] and t < cur[1]):
                best[item] = (s, t)
    ranked = sorted(best.items(), key=lambda kv: (-kv[1][0], kv[0]))[:result_size]
    return RetrievalResult(query_id, trig, [(i, s, t) for i, (s, t) in ranked], skipped)


def write_index(index: InvertedIndex, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in sorted(index.lists):
            body = ",".join(f"{j}:{s:.6f}" for j, s in index.lists[item])
            fh.write(f"{item}\t{body}\n")
    with open(f"{path}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(index.metadata, fh, sort_keys=True)


def read_index(path) -> InvertedIndex:
    lists = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open index: {exc.strerror}", path=path) from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            key, tab, body = line.rstrip("\n").partition("\t")
            try:
                if not tab:
                    raise ValueError
                entries = []
                for part in filter(None, body.split(",")):
                    j, s = part.split(":")
                    entries.append((int(j), float(s)))
                lists[int(key)] = entries
            except ValueError:
                raise InputError("expected 'item<TAB>neighbor:score,...'", path, lineno) from None
    meta = {"topk": max((len(v) for v in lists.values()), default=0), "category_restricted": True, "checkpoint_hash": ""}
    try:
        with open(f"{path}.meta.json", encoding="utf-8") as fh:
            meta.update(json.load(fh))
    except FileNotFoundError:
        pass
    return InvertedIndex(lists, int(meta["topk"]), bool(meta["category_restricted"]), meta["checkpoint_hash"])
