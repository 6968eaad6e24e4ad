"""Two-level item graph: trigger-to-page objective edges and a weighted
same-category co-click graph, plus augmented overlay views of the latter."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError


class NeighborGraph:
    """Symmetric weighted adjacency in CSR form.

    ``rev[s]`` is the slot holding the reverse direction of slot ``s``.
    Every edge is stored twice; ``n_edges`` counts undirected edges.
    """

    def __init__(self, category: np.ndarray, rows, cols, weights):
        self.category = np.asarray(category, dtype=np.int64)
        n = len(self.category)
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.int64)
        if len(rows) and (np.any(rows == cols) or np.any(weights < 1)):
            raise ValueError("self loops and non-positive weights are not allowed")
        if len(rows) and np.any(self.category[rows] != self.category[cols]):
            raise ValueError("edges must connect items of the same category")
        # store both directions, sorted by (row, col)
        r = np.concatenate([rows, cols])
        c = np.concatenate([cols, rows])
        w = np.concatenate([weights, weights])
        order = np.lexsort((c, r))
        r, c, w = r[order], c[order], w[order]
        keys = r * n + c
        if len(keys) > 1 and np.any(keys[1:] == keys[:-1]):
            raise ValueError("duplicate edge")
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(r, minlength=n), out=self.indptr[1:])
        self.indices = c
        self.weights = w
        self.rows = r
        self._keys = keys
        self.rev = np.searchsorted(keys, c * n + r)
        self.upper = np.flatnonzero(r < c)
        self._upper_keys = keys[self.upper]
        self._identity = None

    @classmethod
    def empty(cls, category) -> "NeighborGraph":
        return cls(category, [], [], [])

    @property
    def n_nodes(self) -> int:
        return len(self.category)

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2

    def has_edge(self, i: int, j: int) -> bool:
        key = i * self.n_nodes + j
        pos = np.searchsorted(self._keys, key)
        return bool(pos < len(self._keys) and self._keys[pos] == key)

    def _check(self, node: int) -> None:
        if not 0 <= node < self.n_nodes:
            raise KeyError(f"unknown node {node}")

    def neighbors(self, node: int) -> list[tuple[int, int]]:
        self._check(node)
        lo, hi = self.indptr[node], self.indptr[node + 1]
        return list(zip(self.indices[lo:hi].tolist(), self.weights[lo:hi].tolist()))

    def edges(self) -> list[tuple[int, int, int]]:
        """Undirected edges once each, ``i < j``, sorted."""
        upper = self.rows < self.indices
        return list(zip(self.rows[upper].tolist(), self.indices[upper].tolist(), self.weights[upper].tolist()))

    def view(self) -> "GraphView":
        if self._identity is None:
            self._identity = GraphView(self)
        return self._identity

    def top_neighbors(self, nodes: np.ndarray, k: int) -> np.ndarray:
        """Heaviest ``k`` neighbors per node (ties by ascending id), padded with -1."""
        out = np.full((len(nodes), k), -1, dtype=np.int64)
        for row, node in enumerate(nodes):
            lo, hi = self.indptr[node], self.indptr[node + 1]
            if hi == lo:
                continue
            order = np.lexsort((self.indices[lo:hi], -self.weights[lo:hi]))[:k]
            out[row, : len(order)] = self.indices[lo:hi][order]
        return out

    def __eq__(self, other):
        if not isinstance(other, NeighborGraph):
            return NotImplemented
        return (
            np.array_equal(self.category, other.category)
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.weights, other.weights)
        )


@dataclass
class GraphView:
    """Overlay over a base graph: dropped nodes, removed slots, added unit edges.

    The base is never mutated.  ``removed`` is a mask over base slots and is
    kept symmetric; ``added`` holds undirected pairs ``(i, j)`` with ``i < j``.
    """

    base: NeighborGraph
    dropped: np.ndarray = None
    removed: np.ndarray = None
    added: np.ndarray = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = self.base.n_nodes
        if self.dropped is None:
            self.dropped = np.zeros(n, dtype=bool)
        if self.removed is None:
            self.removed = np.zeros(len(self.base.indices), dtype=bool)
        if self.added is None:
            self.added = np.zeros((0, 2), dtype=np.int64)

    @property
    def dropped_nodes(self) -> set[int]:
        return set(np.flatnonzero(self.dropped).tolist())

    @property
    def edge_delta(self) -> set[tuple[str, int, int]]:
        b = self.base
        gone = self.removed & (b.rows < b.indices)
        delta = {("-", i, j) for i, j in zip(b.rows[gone].tolist(), b.indices[gone].tolist())}
        delta |= {("+", int(i), int(j)) for i, j in self.added}
        return delta

    def _live(self):
        if "live" not in self._cache:
            b = self.base
            w = np.where(self.removed | self.dropped[b.rows] | self.dropped[b.indices], 0, b.weights)
            add_ptr, ac = self._added()
            self._cache["live"] = (w, add_ptr, ac)
        return self._cache["live"]

    def _added(self):
        """Live added edges in CSR form over both directions."""
        if "added" not in self._cache:
            n = self.base.n_nodes
            a = self.added
            if len(a):
                keep = ~(self.dropped[a[:, 0]] | self.dropped[a[:, 1]])
                a = a[keep]
            ar = np.concatenate([a[:, 0], a[:, 1]])
            ac = np.concatenate([a[:, 1], a[:, 0]])
            order = np.argsort(ar * n + ac)
            ar, ac = ar[order], ac[order]
            add_ptr = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(np.bincount(ar, minlength=n), out=add_ptr[1:])
            self._cache["added"] = (add_ptr, ac)
        return self._cache["added"]

    def _local(self, nodes: np.ndarray):
        """Live base weights restricted to the slots of ``nodes``.

        Returns ``(slots, cum, start, total)``: the concatenated CSR slots of
        each node, the running weight sum over them, and each node's offset
        and total weight in that sum.
        """
        b = self.base
        lo, hi = b.indptr[nodes], b.indptr[nodes + 1]
        deg = hi - lo
        offsets = np.zeros(len(nodes) + 1, dtype=np.int64)
        np.cumsum(deg, out=offsets[1:])
        slots = np.repeat(lo - offsets[:-1], deg) + np.arange(offsets[-1])
        dead = self.removed[slots] | np.repeat(self.dropped[nodes], deg) | self.dropped[b.indices[slots]]
        cum = np.cumsum(np.where(dead, 0, b.weights[slots]))
        padded = np.concatenate([[0], cum])
        start = padded[offsets[:-1]]
        return slots, cum, start, padded[offsets[1:]] - start

    def neighbors(self, node: int) -> list[tuple[int, int]]:
        self.base._check(node)
        w, add_ptr, add_cols = self._live()
        b = self.base
        lo, hi = b.indptr[node], b.indptr[node + 1]
        out = [(int(j), int(x)) for j, x in zip(b.indices[lo:hi], w[lo:hi]) if x > 0]
        out += [(int(j), 1) for j in add_cols[add_ptr[node]:add_ptr[node + 1]]]
        return sorted(out)

    def edges(self) -> list[tuple[int, int, int]]:
        out = []
        for i in range(self.base.n_nodes):
            out.extend((i, j, w) for j, w in self.neighbors(i) if i < j)
        return out

    def sample(self, nodes: np.ndarray, k: int, rng: np.random.Generator):
        """Draw ``k`` weighted neighbors with replacement for each node.

        Returns ``(ids, mask)`` of shape ``(len(nodes), k)``; rows of nodes
        with no live neighbors are fully masked out (ids set to -1).
        """
        nodes = np.asarray(nodes, dtype=np.int64)
        uniq, inv = np.unique(nodes, return_inverse=True)
        slots, cum, ustart, utotal = self._local(uniq)
        start, base_total = ustart[inv], utotal[inv]
        add_ptr, add_cols = self._added()
        n_added = add_ptr[nodes + 1] - add_ptr[nodes]
        total = base_total + n_added
        has = total > 0
        r = rng.integers(0, np.maximum(total, 1)[:, None], size=(len(nodes), k))
        in_base = r < base_total[:, None]
        ids = np.full(r.shape, -1, dtype=np.int64)
        if len(cum):
            target = (start[:, None] + r).ravel()
            order = np.argsort(target)
            pos = np.empty(len(target), dtype=np.int64)
            pos[order] = np.searchsorted(cum, target[order], side="right")
            pos = np.minimum(pos, len(cum) - 1).reshape(r.shape)
            ids = np.where(in_base, self.base.indices[slots[pos]], -1)
        if len(add_cols):
            aslot = add_ptr[nodes][:, None] + (r - base_total[:, None])
            aslot = np.clip(aslot, 0, len(add_cols) - 1)
            ids = np.where(in_base, ids, add_cols[aslot])
        ids[~has] = -1
        mask = np.broadcast_to(has[:, None], ids.shape).copy()
        return ids, mask


def as_view(graph) -> GraphView:
    return graph.view() if isinstance(graph, NeighborGraph) else graph


def sample_neighbors(graph_view, node: int, k: int, rng: np.random.Generator) -> list[int]:
    """``k`` draws with replacement from ``node``'s live neighbors, each neighbor
    with probability proportional to its co-click weight; empty if isolated."""
    if k < 1:
        raise ConfigError(f"fan-out k must be >= 1, got {k}")
    view = as_view(graph_view)
    view.base._check(node)
    ids, mask = view.sample(np.array([node]), k, rng)
    return ids[0][mask[0]].tolist()


def augment_node_drop(graph, p_drop: float, rng: np.random.Generator) -> GraphView:
    if not 0 <= p_drop < 1:
        raise ConfigError(f"p_drop must be in [0, 1), got {p_drop}")
    view = as_view(graph)
    dropped = view.dropped | (rng.random(view.base.n_nodes) < p_drop)
    return GraphView(view.base, dropped, view.removed, view.added)


def augment_edge_perturb(graph, p_edge: float, rng: np.random.Generator) -> GraphView:
    """Remove each edge with probability ``p_edge`` and add, in equal expectation,
    unit-weight same-category edges drawn uniformly among non-edges."""
    if not 0 <= p_edge < 1:
        raise ConfigError(f"p_edge must be in [0, 1), got {p_edge}")
    view = as_view(graph)
    b = view.base
    upper = b.upper
    hit = upper[rng.random(len(upper)) < p_edge]
    removed = view.removed.copy()
    removed[hit] = True
    removed[b.rev[hit]] = True
    n_add = int(rng.binomial(len(upper), p_edge)) if p_edge > 0 else 0
    added = _sample_non_edges(b, n_add, rng, exclude=view.added)
    if len(view.added):
        added = np.concatenate([view.added, added])
    return GraphView(b, view.dropped, removed, added)


def _category_members(graph: NeighborGraph):
    cached = getattr(graph, "_members", None)
    if cached is None:
        order = np.argsort(graph.category, kind="stable")
        n_cat = int(graph.category.max()) + 1 if graph.n_nodes else 0
        bounds = np.searchsorted(graph.category[order], np.arange(n_cat + 1))
        sizes = np.diff(bounds)
        pairs = sizes * (sizes - 1) // 2
        cached = (order, bounds, sizes, pairs)
        graph._members = cached
    return cached


def _weighted_draw(p: np.ndarray, size: int, rng) -> np.ndarray:
    """Same draws and generator state as ``rng.choice(len(p), size, p=p)``.

    The generator inverts the normalized cdf with a binary search; with few
    categories counting ``cdf <= u`` is several times faster.
    """
    cdf = p.cumsum()
    cdf /= cdf[-1]
    u = rng.random(size)
    if len(cdf) > 64:
        return cdf.searchsorted(u, side="right")
    return (cdf[None, :] <= u[:, None]).sum(axis=1)


def _stable_order(keys: np.ndarray, bound: int) -> np.ndarray:
    """``np.argsort(keys, kind="stable")`` for keys in ``[0, bound)``.

    Sorting ``key * m + position`` gives the same order and is several times
    faster than a stable argsort when the composite fits in int64.
    """
    m = len(keys)
    if bound * max(m, 1) >= 2**62:
        return np.argsort(keys, kind="stable")
    return np.sort(keys * m + np.arange(m)) % m


def _sample_non_edges(graph: NeighborGraph, n_add: int, rng, exclude=None) -> np.ndarray:
    out = np.zeros((0, 2), dtype=np.int64)
    if n_add == 0:
        return out
    order, bounds, sizes, pairs = _category_members(graph)
    total_pairs = pairs.sum()
    if total_pairs == 0:
        return out
    n = graph.n_nodes
    excluded = np.zeros(0, dtype=np.int64)
    if exclude is not None and len(exclude):
        excluded = np.asarray(exclude[:, 0] * n + exclude[:, 1], dtype=np.int64)
    chosen = np.zeros(0, dtype=np.int64)
    # bounded retries: dense categories may have fewer free pairs than requested
    for _ in range(20):
        need = n_add - len(chosen)
        if need <= 0:
            break
        m = 2 * need + 16
        cats = _weighted_draw(pairs / total_pairs, m, rng)
        a = rng.integers(0, sizes[cats])
        bb = rng.integers(0, np.maximum(sizes[cats] - 1, 1))
        bb = bb + (bb >= a)
        i = order[bounds[cats] + a]
        j = order[bounds[cats] + bb]
        keys = np.minimum(i, j) * n + np.maximum(i, j)
        # first occurrence of each distinct key, in draw order, minus existing
        # edges and earlier picks; one stable sort serves all the tests
        order = _stable_order(keys, n * n)
        sk = keys[order]
        head = np.ones(len(sk), dtype=bool)
        head[1:] = sk[1:] != sk[:-1]
        sk, first = sk[head], order[head]
        free = ~np.isin(sk, excluded) & ~np.isin(sk, chosen)
        # candidates have i < j, so only the upper-triangle keys can match
        ukeys = graph._upper_keys
        if len(ukeys):
            pos = np.minimum(np.searchsorted(ukeys, sk), len(ukeys) - 1)
            free &= ukeys[pos] != sk
        keys = keys[np.sort(first[free])]
        chosen = np.concatenate([chosen, keys[:need]])
    keys = np.array(chosen, dtype=np.int64)
    return np.stack([keys // n, keys % n], axis=1) if len(keys) else out


def build_neighbor_graph(records: Iterable, window_days: int = 7, category=None, n_nodes=None) -> NeighborGraph:
    """Co-click graph over the trailing ``window_days`` of the log.

    Each user contributes weight 1 to every unordered pair of distinct
    same-category items they clicked inside the window.  ``category`` (an
    item -> category array, e.g. from the catalog) sizes the graph so every
    catalog item is a node; otherwise categories are read from the records.
    """
    if window_days < 1:
        raise ConfigError(f"window_days must be >= 1, got {window_days}")
    records = list(records)
    cat_map: dict[int, int] = {}
    for rec in records:
        for item, _, _ in rec.exposed:
            cat_map[item] = rec.category_id
    if category is None:
        size = max(cat_map, default=-1) + 1 if n_nodes is None else n_nodes
        category = np.full(size, -1, dtype=np.int64)
        for item, c in cat_map.items():
            category[item] = c
    category = np.asarray(category, dtype=np.int64)
    if not records:
        return NeighborGraph.empty(category)
    last = max(r.timestamp_day for r in records)
    clicks = defaultdict(set)
    for rec in records:
        if rec.timestamp_day > last - window_days:
            for item in rec.clicked_items():
                clicks[(rec.user_id, int(category[item]))].add(item)
    lo_parts, hi_parts = [], []
    for key in sorted(clicks):
        items = np.array(sorted(clicks[key]), dtype=np.int64)
        if len(items) < 2:
            continue
        a, b = np.triu_indices(len(items), k=1)
        lo_parts.append(items[a])
        hi_parts.append(items[b])
    if not lo_parts:
        return NeighborGraph.empty(category)
    n = len(category)
    keys = np.concatenate(lo_parts) * n + np.concatenate(hi_parts)
    uniq, counts = np.unique(keys, return_counts=True)
    return NeighborGraph(category, uniq // n, uniq % n, counts)


@dataclass
class ObjectiveEdges:
    """Trigger -> exposed page links; ``pairs[e] = (trigger, record index)``."""

    records: Sequence
    pairs: list[tuple[int, int]]

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        for trigger, idx in self.pairs:
            yield trigger, self.records[idx]


def build_objective_edges(records: Iterable) -> ObjectiveEdges:
    records = list(records)
    pairs = [(t, idx) for idx, rec in enumerate(records) for t in rec.trigger_items]
    return ObjectiveEdges(records, pairs)


def write_graph(graph: NeighborGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, j, w in graph.edges():
            fh.write(f"{i}\t{j}\t{w}\n")
    with open(category_path(path), "w", encoding="utf-8") as fh:
        for item, c in enumerate(graph.category.tolist()):
            fh.write(f"{item}\t{c}\n")


def category_path(path) -> str:
    return f"{path}.categories.tsv"


def read_graph(path, category=None) -> NeighborGraph:
    """Load an edge list; categories come from ``category`` or the sidecar map."""
    if category is None:
        cats = []
        try:
            with open(category_path(path), encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    parts = line.rstrip("\n").split("\t")
                    if len(parts) != 2 or int(parts[0]) != len(cats):
                        raise InputError("expected 'item<TAB>category' in item order", category_path(path), lineno)
                    cats.append(int(parts[1]))
        except OSError as exc:
            raise InputError(f"cannot open category map: {exc.strerror}", path=category_path(path)) from exc
        except ValueError as exc:
            raise InputError(str(exc), category_path(path)) from exc
        category = np.array(cats, dtype=np.int64)
    rows, cols, ws = [], [], []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open graph: {exc.strerror}", path=path) from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            try:
                i, j, w = (int(p) for p in parts)
            except ValueError:
                raise InputError("expected 'item_i<TAB>item_j<TAB>weight'", path, lineno) from None
            if not (0 <= i < j < len(category)) or w < 1:
                raise InputError(f"invalid edge ({i}, {j}, {w})", path, lineno)
            rows.append(i)
            cols.append(j)
            ws.append(w)
    try:
        return NeighborGraph(category, rows, cols, ws)
    except ValueError as exc:
        raise InputError(str(exc), path) from exc
