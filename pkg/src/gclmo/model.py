"""Item embedding model: ID + category base embedding, one hop of
dot-product attention over sampled neighbors, cosine scoring."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ConfigError, InputError


@dataclass
class EmbeddingModel:
    id_embeddings: np.ndarray  # (n_items, d)
    category_embeddings: np.ndarray  # (n_categories, d)
    w_self: np.ndarray  # (d, d)
    w_neigh: np.ndarray  # (d, d)
    tau: float = 0.07

    @property
    def dim(self) -> int:
        return self.id_embeddings.shape[1]

    @property
    def n_items(self) -> int:
        return self.id_embeddings.shape[0]

    @property
    def n_categories(self) -> int:
        return self.category_embeddings.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "id_embeddings": self.id_embeddings,
            "category_embeddings": self.category_embeddings,
            "w_self": self.w_self,
            "w_neigh": self.w_neigh,
        }

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            self.id_embeddings.copy(),
            self.category_embeddings.copy(),
            self.w_self.copy(),
            self.w_neigh.copy(),
            self.tau,
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.parameters().values())


@dataclass(frozen=True)
class ItemVector:
    values: np.ndarray
    source_item: int


def init_model(
    n_items: int,
    n_categories: int,
    d: int = 32,
    tau: float = 0.07,
    init_scale: float = 0.05,
    seed: int = 0,
    dtype=np.float32,
) -> EmbeddingModel:
    """Uniform tables in ``[-init_scale, init_scale]``; aggregator matrices are
    identity plus noise of the same scale.

    Parameters are stored as float32 by default so that the 9-significant-digit
    checkpoint text round-trips them exactly.  All arithmetic runs in float64.
    """
    if d < 2:
        raise ConfigError(f"dimension must be >= 2, got {d}")
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    if n_items < 1 or n_categories < 1:
        raise ConfigError("model needs at least one item and one category")
    if init_scale < 0:
        raise ConfigError(f"init_scale must be >= 0, got {init_scale}")
    rng = np.random.default_rng(seed)

    def uniform(shape):
        return rng.uniform(-init_scale, init_scale, size=shape).astype(dtype)

    return EmbeddingModel(
        id_embeddings=uniform((n_items, d)),
        category_embeddings=uniform((n_categories, d)),
        w_self=(np.eye(d) + uniform((d, d))).astype(dtype),
        w_neigh=(np.eye(d) + uniform((d, d))).astype(dtype),
        tau=float(tau),
    )


def _lookup_check(model: EmbeddingModel, items: np.ndarray) -> None:
    if items.size and (items.min() < 0 or items.max() >= model.n_items):
        bad = items[(items < 0) | (items >= model.n_items)].flat[0]
        raise KeyError(f"unknown item {int(bad)}")


def _lookup(model: EmbeddingModel, items, category) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64)
    _lookup_check(model, items)
    cats = np.asarray(category)[items]
    return model.id_embeddings[items].astype(np.float64) + model.category_embeddings[cats].astype(np.float64)


def base_embedding(model: EmbeddingModel, item_id: int, category) -> ItemVector:
    return ItemVector(_lookup(model, [item_id], category)[0], int(item_id))


@dataclass
class ForwardCache:
    centers: np.ndarray
    nbrs: np.ndarray
    mask: np.ndarray
    h: np.ndarray
    hn: np.ndarray
    alpha: np.ndarray
    m: np.ndarray


def forward(model: EmbeddingModel, centers, nbrs, mask, category):
    """Aggregate a batch of nodes.

    ``nbrs``/``mask`` have shape ``(M, k)``; masked slots are ignored and a
    fully masked row falls back to the self term.  Returns ``(z, cache)``.
    """
    centers = np.asarray(centers, dtype=np.int64)
    nbrs = np.asarray(nbrs, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    d = model.dim
    safe = np.where(mask, nbrs, centers[:, None]) if nbrs.size else nbrs
    if centers.size + safe.size > model.n_items:
        # large batches: sum the two tables once, then gather (same values)
        table = model.id_embeddings.astype(np.float64)
        table += model.category_embeddings.astype(np.float64)[np.asarray(category)[: model.n_items]]
        _lookup_check(model, centers)
        _lookup_check(model, safe)
        h, hn = table[centers], table[safe]
    else:
        h = _lookup(model, centers, category)
        hn = _lookup(model, safe.reshape(-1), category).reshape(nbrs.shape + (d,))
    if nbrs.shape[1]:
        logits = np.einsum("mkd,md->mk", hn, h) / math.sqrt(d)
        logits = np.where(mask, logits, -np.inf)
        top = logits.max(axis=1, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(mask, np.exp(logits - top), 0.0)
        s = e.sum(axis=1, keepdims=True)
        alpha = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
        m = np.einsum("mk,mkd->md", alpha, hn)
    else:
        alpha = np.zeros(nbrs.shape)
        m = np.zeros_like(h)
    z = h @ model.w_self.T.astype(np.float64) + m @ model.w_neigh.T.astype(np.float64)
    return z, ForwardCache(centers, nbrs, mask, h, hn, alpha, m)


@dataclass
class Gradients:
    """Dense gradients; ``id_rows`` lists the only id rows that can be nonzero."""

    id_embeddings: np.ndarray
    category_embeddings: np.ndarray
    w_self: np.ndarray
    w_neigh: np.ndarray
    id_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def items(self):
        return {
            "id_embeddings": self.id_embeddings,
            "category_embeddings": self.category_embeddings,
            "w_self": self.w_self,
            "w_neigh": self.w_neigh,
        }.items()


def zero_gradients(model: EmbeddingModel) -> Gradients:
    return Gradients(
        np.zeros(model.id_embeddings.shape),
        np.zeros(model.category_embeddings.shape),
        np.zeros(model.w_self.shape),
        np.zeros(model.w_neigh.shape),
    )


def backward(model: EmbeddingModel, cache: ForwardCache, gz: np.ndarray, category, grads: Gradients | None = None) -> Gradients:
    """Accumulate d(loss)/d(params) given d(loss)/dz into ``grads``."""
    if grads is None:
        grads = zero_gradients(model)
    d = model.dim
    ws = model.w_self.astype(np.float64)
    wn = model.w_neigh.astype(np.float64)
    grads.w_self += gz.T @ cache.h
    grads.w_neigh += gz.T @ cache.m
    gh = gz @ ws
    gm = gz @ wn
    alpha, hn = cache.alpha, cache.hn
    n, k = alpha.shape
    glogit = np.zeros_like(alpha)
    if k:
        galpha = np.einsum("mkd,md->mk", hn, gm)
        glogit = alpha * (galpha - (alpha * galpha).sum(axis=1, keepdims=True)) / math.sqrt(d)
        gh += np.einsum("mk,mkd->md", glogit, hn)

    # Each neighbor slot contributes alpha * gm + glogit * h to its item, so
    # the per-item sums are one sparse product and no (M, k, d) tensor is built.
    live = cache.mask.reshape(-1)
    nb = cache.nbrs.reshape(-1)[live]
    owner = np.repeat(np.arange(n), k)[live]
    rows = np.concatenate([cache.centers, nb, nb])
    cols = np.concatenate([np.arange(n), n + owner, 2 * n + owner])
    coef = np.concatenate([np.ones(n), alpha.reshape(-1)[live], glogit.reshape(-1)[live]])
    uniq, inv = dense_unique(rows, model.n_items)
    sel = sparse.csr_matrix((coef, (inv, cols)), shape=(len(uniq), 3 * n))
    sums = sel @ np.concatenate([gh, gm, cache.h])
    grads.id_embeddings[uniq] += sums
    grads.id_rows = np.union1d(grads.id_rows, uniq)
    scatter_add(grads.category_embeddings, np.asarray(category)[uniq], sums)
    return grads


def dense_unique(values: np.ndarray, size: int):
    """``np.unique(values, return_inverse=True)`` for ids in ``[0, size)``,
    by marking present ids instead of sorting."""
    present = np.zeros(size, dtype=bool)
    present[values] = True
    uniq = np.flatnonzero(present)
    rank = np.cumsum(present) - 1
    return uniq, rank[values]


def scatter_add(target: np.ndarray, rows: np.ndarray, vals: np.ndarray):
    """``target[rows] += vals`` with duplicates summed in a fixed order.

    Returns the distinct rows and their summed values.
    """
    uniq, inv = np.unique(rows, return_inverse=True)
    if len(rows) == 0:
        return uniq, vals[:0]
    n = len(rows)
    sel = sparse.csr_matrix((np.ones(n), inv, np.arange(n + 1)), shape=(n, len(uniq))).T.tocsr()
    sums = sel @ vals
    target[uniq] += sums
    return uniq, sums


def aggregate(model: EmbeddingModel, item_id: int, neighbors, category) -> ItemVector:
    """``W_self h + sum_j a_j W_neigh h_j`` with ``a = softmax(<h, h_j> / sqrt(d))``."""
    neighbors = list(neighbors)
    nbrs = np.array([neighbors], dtype=np.int64).reshape(1, len(neighbors))
    z, _ = forward(model, [item_id], nbrs, np.ones(nbrs.shape, dtype=bool), category)
    return ItemVector(z[0], int(item_id))


def attention_weights(model: EmbeddingModel, item_id: int, neighbors, category) -> np.ndarray:
    neighbors = list(neighbors)
    nbrs = np.array([neighbors], dtype=np.int64).reshape(1, len(neighbors))
    _, cache = forward(model, [item_id], nbrs, np.ones(nbrs.shape, dtype=bool), category)
    return cache.alpha[0]


class ScoreDiagnostics:
    """Counts cosine evaluations that hit a zero-norm vector."""

    zero_norm = 0


def cosine(a: np.ndarray, b: np.ndarray):
    """Row-wise cosine and its gradients; zero-norm rows score 0 with zero gradient.

    Returns ``(s, ds/da, ds/db)`` for broadcast-compatible ``(..., d)`` inputs.
    """
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    ok = (na > 0) & (nb > 0)
    ScoreDiagnostics.zero_norm += int(np.size(ok) - np.count_nonzero(ok))
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    ua, ub = a / na_s, b / nb_s
    s = np.where(ok[..., 0], np.sum(ua * ub, axis=-1), 0.0)
    ga = np.where(ok, (ub - s[..., None] * ua) / na_s, 0.0)
    gb = np.where(ok, (ua - s[..., None] * ub) / nb_s, 0.0)
    return s, ga, gb


def score(z_v, z_u) -> float:
    """Normalized inner product of two item vectors; 0 if either has zero norm."""
    a = z_v.values if isinstance(z_v, ItemVector) else np.asarray(z_v, dtype=np.float64)
    b = z_u.values if isinstance(z_u, ItemVector) else np.asarray(z_u, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        ScoreDiagnostics.zero_norm += 1
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _fmt(values) -> str:
    return " ".join(f"{float(v):.9g}" for v in values)


def checkpoint(model: EmbeddingModel, path) -> None:
    """Write the text checkpoint: header, item rows, category rows, two matrices."""
    lines = [f"{model.dim} {model.n_items} {model.n_categories} {model.tau!r}"]
    lines += [f"{i}\t{_fmt(row)}" for i, row in enumerate(model.id_embeddings)]
    lines += [f"{c}\t{_fmt(row)}" for c, row in enumerate(model.category_embeddings)]
    lines += [_fmt(row) for row in model.w_self]
    lines += [_fmt(row) for row in model.w_neigh]
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def restore(path, dtype=np.float32) -> EmbeddingModel:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise InputError(f"cannot open checkpoint: {exc.strerror}", path=path) from exc
    if lines and lines[-1] == "":
        lines.pop()

    def fail(msg, lineno):
        raise InputError(msg, path=path, line=lineno)

    if not lines:
        fail("empty checkpoint", 1)
    head = lines[0].split()
    try:
        d, n_items, n_cat = (int(x) for x in head[:3])
        tau = float(head[3])
        if len(head) != 4:
            raise ValueError
    except (ValueError, IndexError):
        fail("header must be 'd n_items n_categories tau'", 1)
    expected = 1 + n_items + n_cat + 2 * d
    if len(lines) != expected:
        fail(f"expected {expected} lines, found {len(lines)} (truncated or padded)", min(len(lines), expected) + 1)

    def parse_rows(start, count, keyed):
        out = np.empty((count, d), dtype=np.float64)
        for r in range(count):
            lineno = start + r + 1
            line = lines[start + r]
            if keyed:
                key, _, rest = line.partition("\t")
                if key != str(r):
                    fail(f"expected row id {r}, found {key!r}", lineno)
            else:
                rest = line
            parts = rest.split()
            if len(parts) != d:
                fail(f"expected {d} values, found {len(parts)}", lineno)
            try:
                out[r] = [float(p) for p in parts]
            except ValueError:
                fail("non-numeric value", lineno)
        return out.astype(dtype)

    ids = parse_rows(1, n_items, True)
    cats = parse_rows(1 + n_items, n_cat, True)
    ws = parse_rows(1 + n_items + n_cat, d, False)
    wn = parse_rows(1 + n_items + n_cat + d, d, False)
    return EmbeddingModel(ids, cats, ws, wn, tau)
