"""Page-level training instances and the SGD loop over original and augmented views."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import model as M
from .datagen import Catalog, relevance_mask
from .errors import ConfigError, NumericalError
from .graph import GraphView, NeighborGraph, augment_edge_perturb, augment_node_drop, build_objective_edges
from .loss import DEFAULT_WEIGHTS, OBJECTIVES, ObjectiveLabels, objective_terms

log = logging.getLogger(__name__)


@dataclass
class TrainingInstance:
    trigger: int
    query_id: int
    impressions: np.ndarray  # (N,) item ids
    clicked: np.ndarray  # (N,) bool
    purchased: np.ndarray  # (N,) bool
    under_impressions: np.ndarray  # (K,)
    random_negatives: np.ndarray  # (L,)
    labels: ObjectiveLabels

    @property
    def candidates(self) -> np.ndarray:
        return np.concatenate([self.impressions, self.under_impressions, self.random_negatives])


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.0
    batch_size: int = 64
    epochs: int = 2
    tau: float = 0.15
    w_relevance: float = DEFAULT_WEIGHTS["relevance"]
    w_exposure: float = DEFAULT_WEIGHTS["exposure"]
    w_click: float = DEFAULT_WEIGHTS["click"]
    w_purchase: float = DEFAULT_WEIGHTS["purchase"]
    fanout: int = 10
    p_drop: float = 0.1
    p_edge: float = 0.1
    under_impressions: int = 5
    random_negatives: int = 5
    dim: int = 32
    init_scale: float = 0.5
    seed: int = 0
    contrastive: bool = True
    exclude_positives: bool = True

    def __post_init__(self):
        if not (self.lr >= 0 and self.batch_size >= 1 and self.epochs >= 0 and self.tau > 0):
            raise ConfigError("lr must be >= 0, batch_size >= 1, epochs >= 0, tau > 0")
        if not (0 <= self.p_drop < 1 and 0 <= self.p_edge < 1 and 0 <= self.momentum < 1):
            raise ConfigError("p_drop, p_edge and momentum must lie in [0, 1)")
        if self.fanout < 1:
            raise ConfigError("fanout must be >= 1")
        if self.under_impressions < 0 or self.random_negatives < 0:
            raise ConfigError("under_impressions and random_negatives must be >= 0")
        if self.under_impressions + self.random_negatives < 1:
            raise ConfigError("need at least one under-impression or random negative")
        if min(self.weights) < 0:
            raise ConfigError("objective weights must be >= 0")

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.w_relevance, self.w_exposure, self.w_click, self.w_purchase])

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown train keys {sorted(unknown)}; valid: {sorted(known)}")
        converted = {}
        for key, raw in values.items():
            default = getattr(cls, key)
            converted[key] = _coerce(raw, type(default), key)
        return cls(**converted)


def _coerce(raw, kind, key):
    if not isinstance(raw, str):
        return kind(raw)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def build_instances(records, catalog: Catalog, K: int, L: int, rng: np.random.Generator, objective_edges=None):
    """One instance per (trigger, page) link.

    Under-impressions come from the query category's unexposed items; random
    negatives are uniform over the corpus minus the instance's other items.
    Relevance is 1 only if both the trigger and the candidate pass the oracle
    for the page's query.
    """
    if K < 0 or L < 0 or K + L < 1:
        raise ConfigError("need K, L >= 0 and K + L >= 1")
    edges = objective_edges if objective_edges is not None else build_objective_edges(records)
    n_items = catalog.n_items
    marked = np.zeros(n_items, dtype=bool)
    out = []
    for trigger, rec in edges:
        exposed = [(i, c, p) for i, c, p in rec.exposed if i != trigger]
        imp = np.array([e[0] for e in exposed], dtype=np.int64)
        clicked = np.array([e[1] for e in exposed], dtype=bool)
        purchased = np.array([e[2] for e in exposed], dtype=bool)

        pool = catalog.items_in_category(rec.category_id)
        seen = np.concatenate([[trigger], [e[0] for e in rec.exposed]]).astype(np.int64)
        marked[seen] = True
        pool = pool[~marked[pool]]
        marked[seen] = False
        k = min(K, len(pool))
        if k < K:
            log.info("category %d has %d unexposed items; K shrunk to %d", rec.category_id, len(pool), k)
        under = np.sort(rng.choice(pool, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)

        taken = set(seen.tolist()) | set(under.tolist())
        n_free = n_items - len(taken)
        want = min(L, n_free)
        negs: list[int] = []
        while len(negs) < want:
            for x in rng.integers(0, n_items, size=2 * (want - len(negs)) + 4).tolist():
                if x not in taken:
                    taken.add(x)
                    negs.append(x)
                    if len(negs) == want:
                        break
        neg = np.array(negs, dtype=np.int64)

        cands = np.concatenate([imp, under, neg])
        n_imp = len(imp)
        trigger_relevant = bool(relevance_mask([trigger], rec.query_id, catalog)[0])
        rel = relevance_mask(cands, rec.query_id, catalog) & trigger_relevant
        expo = np.zeros(len(cands))
        expo[:n_imp] = 1
        clk = np.zeros(len(cands))
        clk[:n_imp] = clicked
        buy = np.zeros(len(cands))
        buy[:n_imp] = purchased
        labels = ObjectiveLabels(np.stack([rel.astype(float), expo, clk, buy]))
        out.append(TrainingInstance(int(trigger), rec.query_id, imp, clicked, purchased, under, neg, labels))
    return out


@dataclass
class Batch:
    triggers: np.ndarray  # (B,)
    candidates: np.ndarray  # (B, n)
    valid: np.ndarray  # (B, n)
    labels: np.ndarray  # (B, 4, n)

    @classmethod
    def from_instances(cls, instances) -> "Batch":
        per = [inst.candidates for inst in instances]
        n = max(len(c) for c in per)
        B = len(instances)
        cands = np.zeros((B, n), dtype=np.int64)
        valid = np.zeros((B, n), dtype=bool)
        labels = np.zeros((B, len(OBJECTIVES), n))
        for b, (inst, c) in enumerate(zip(instances, per)):
            cands[b, : len(c)] = c
            valid[b, : len(c)] = True
            labels[b, :, : len(c)] = inst.labels.values
        return cls(np.array([i.trigger for i in instances], dtype=np.int64), cands, valid, labels)

    @property
    def nodes(self) -> np.ndarray:
        """Trigger ids followed by candidate ids, the order used for sampling."""
        return np.concatenate([self.triggers, self.candidates.reshape(-1)])


def sample_batch(view: GraphView, batch: Batch, k: int, rng):
    return view.sample(batch.nodes, k, rng)


@dataclass
class StepResult:
    losses: np.ndarray  # per objective, summed over the batch
    total: float
    grads: M.Gradients
    skipped: int  # (instance, objective) pairs with positives but no negatives


def batch_gradients(model, batch: Batch, category, config: TrainConfig, orig_sample, aug_sample=None) -> StepResult:
    """Loss and parameter gradients of a batch, summed over its instances.

    ``orig_sample``/``aug_sample`` are ``(ids, mask)`` neighbor draws for
    ``batch.nodes`` on the original and augmented view.
    """
    B, n = batch.candidates.shape
    nodes = batch.nodes
    contrastive = config.contrastive and aug_sample is not None
    if contrastive:
        all_nodes = np.concatenate([nodes, nodes])
        nbrs = np.concatenate([orig_sample[0], aug_sample[0]])
        mask = np.concatenate([orig_sample[1], aug_sample[1]])
    else:
        all_nodes, (nbrs, mask) = nodes, orig_sample
    z, cache = M.forward(model, all_nodes, nbrs, mask, category)
    d = model.dim
    per_view = len(nodes)
    zt = z[:B]
    zc = z[B:per_view].reshape(B, n, d)
    s_orig, g_t_orig, g_c_orig = M.cosine(zt[:, None, :], zc)
    if contrastive:
        zt_aug = z[per_view : per_view + B]
        zc_aug = z[per_view + B :].reshape(B, n, d)
        s_align, g_t_align, g_ta = M.cosine(zt, zt_aug)
        s_aug, g_t_aug, g_c_aug = M.cosine(zt[:, None, :], zc_aug)
        scores = np.concatenate([s_align[:, None], s_orig, s_aug], axis=1)
        valid = np.concatenate([np.ones((B, 1), bool), batch.valid, batch.valid], axis=1)
        ones = np.ones((B, len(OBJECTIVES), 1))
        labels = np.concatenate([ones, batch.labels, batch.labels], axis=2)
        exclusive = config.exclude_positives
    else:
        scores, valid, labels, exclusive = s_orig, batch.valid, batch.labels, False

    w = config.weights
    losses = np.zeros(len(OBJECTIVES))
    gscore = np.zeros_like(scores)
    skipped = 0
    for o in range(len(OBJECTIVES)):
        lab = labels[:, o, :]
        if exclusive:
            has_pos = (lab * valid).sum(axis=1) > 0
            has_neg = (valid & (lab == 0)).any(axis=1)
            skipped += int(np.sum(has_pos & ~has_neg))
        loss, g, _ = objective_terms(scores, lab, valid, config.tau, exclusive)
        losses[o] = loss.sum()
        gscore += w[o] * g
    total = float(w @ losses)

    gz = np.zeros_like(z)
    if contrastive:
        ga, go, gu = gscore[:, 0], gscore[:, 1 : n + 1], gscore[:, n + 1 :]
        gz[:B] = ga[:, None] * g_t_align + np.einsum("bn,bnd->bd", go, g_t_orig) + np.einsum("bn,bnd->bd", gu, g_t_aug)
        gz[B:per_view] = (go[:, :, None] * g_c_orig).reshape(-1, d)
        gz[per_view : per_view + B] = ga[:, None] * g_ta
        gz[per_view + B :] = (gu[:, :, None] * g_c_aug).reshape(-1, d)
    else:
        gz[:B] = np.einsum("bn,bnd->bd", gscore, g_t_orig)
        gz[B:] = (gscore[:, :, None] * g_c_orig).reshape(-1, d)
    grads = M.backward(model, cache, gz, category)
    return StepResult(losses, total, grads, skipped)


@dataclass
class TrainResult:
    model: M.EmbeddingModel
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def _check_finite(step, result: StepResult, model, id_rows=None):
    """Raise on a non-finite loss, gradient or parameter.  With ``id_rows``
    only those id-embedding rows are inspected; the others are unchanged
    since the last check."""
    grads = dict(result.grads.items())
    params = model.parameters()
    if id_rows is not None:
        grads["id_embeddings"] = grads["id_embeddings"][id_rows]
        params = {**params, "id_embeddings": params["id_embeddings"][id_rows]}
    arrays = list(grads.values()) + list(params.values())
    bad = not np.isfinite(result.total) or not all(np.isfinite(a).all() for a in arrays)
    if bad:
        state = {
            "step": step,
            "losses": dict(zip(OBJECTIVES, result.losses.tolist())),
            "total": result.total,
            "param_norms": {k: float(np.linalg.norm(v)) for k, v in model.parameters().items()},
            "grad_norms": {k: float(np.linalg.norm(v)) for k, v in result.grads.items()},
        }
        raise NumericalError(f"non-finite loss or gradient at step {step}", state)


def train(model, graph: NeighborGraph, instances, config: TrainConfig, category, on_epoch=None, steps: int | None = None) -> TrainResult:
    """Plain SGD (optional momentum) over shuffled mini-batches.

    Each batch draws one augmented view (node drop, then edge perturbation)
    shared by the augmented trigger and augmented candidates.  ``steps``
    overrides the epoch budget with a fixed number of batches.
    """
    if model.dim != config.dim:
        raise ConfigError(f"model dimension {model.dim} != config dim {config.dim}")
    if not instances:
        raise ConfigError("no training instances")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    base = graph.view()
    result = TrainResult(model)
    velocity = {k: np.zeros(v.shape) for k, v in model.parameters().items()}
    params = model.parameters()
    if not model.is_finite():
        norms = {k: float(np.linalg.norm(v)) for k, v in params.items()}
        raise NumericalError("non-finite parameters before training", {"step": 0, "param_norms": norms})
    n = len(instances)
    n_batches = -(-n // config.batch_size)
    total_steps = steps if steps is not None else config.epochs * n_batches
    step = 0
    epoch = 0
    while step < total_steps:
        start = time.perf_counter()
        order = rng.permutation(n)
        sums = np.zeros(len(OBJECTIVES))
        total = 0.0
        skipped = 0
        seen = 0
        for lo in range(0, n, config.batch_size):
            if step >= total_steps:
                break
            batch = Batch.from_instances([instances[i] for i in order[lo : lo + config.batch_size]])
            orig = sample_batch(base, batch, config.fanout, rng)
            aug = None
            if config.contrastive:
                view = augment_edge_perturb(augment_node_drop(graph, config.p_drop, rng), config.p_edge, rng)
                aug = sample_batch(view, batch, config.fanout, rng)
            res = batch_gradients(model, batch, category, config, orig, aug)
            # without momentum only the batch's id rows change
            rows = None if config.momentum else res.grads.id_rows
            _check_finite(step, res, model, rows)
            for key, g in res.grads.items():
                if config.momentum:
                    velocity[key] = config.momentum * velocity[key] + g
                    g = velocity[key]
                if key == "id_embeddings" and rows is not None:
                    params[key][rows] -= (config.lr * g[rows]).astype(params[key].dtype)
                else:
                    params[key] -= (config.lr * g).astype(params[key].dtype)
            _check_finite(step, res, model, rows)
            sums += res.losses
            total += res.total
            skipped += res.skipped
            seen += len(batch.triggers)
            result.step_losses.append(res.total)
            step += 1
        entry = {
            "epoch": epoch,
            **{f"loss_{o}": float(v / max(seen, 1)) for o, v in zip(OBJECTIVES, sums)},
            "loss_total": float(total / max(seen, 1)),
            "skipped_no_negative": skipped,
            "wall_time": time.perf_counter() - start,
        }
        result.history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        epoch += 1
    return result


def fit(records, graph, catalog: Catalog, config: TrainConfig, on_epoch=None) -> TrainResult:
    """Instances, fresh model, training: the whole stage in one call."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 4]))
    instances = build_instances(records, catalog, config.under_impressions, config.random_negatives, rng)
    model = M.init_model(catalog.n_items, catalog.n_categories, config.dim, config.tau, config.init_scale, config.seed)
    return train(model, graph, instances, config, catalog.item_category, on_epoch=on_epoch)


def with_overrides(config: TrainConfig, **kwargs) -> TrainConfig:
    return replace(config, **kwargs)
