import json

import numpy as np
import pytest
from test_train import hand_catalog

from gclmo.config import load_config
from gclmo.datagen import SearchRecord
from gclmo.errors import ContractViolation, InputError
from gclmo.evaluation import (
    VARIANTS,
    EvalRecord,
    ExposureStats,
    ablate,
    eval_records,
    evaluate,
    exposure_stats,
    p_good,
    p_longtail,
    popularity_retriever,
    read_exposure_stats,
    recall_at_k,
    write_exposure_stats,
)
from gclmo.retrieval import InvertedIndex

TINY = {
    "datagen.items": 300,
    "datagen.categories": 3,
    "datagen.queries": 30,
    "datagen.users": 40,
    "datagen.days": 4,
    "datagen.page_size": 8,
    "datagen.dim": 8,
    "train.dim": 8,
    "train.epochs": 1,
    "train.fanout": 4,
    "train.under_impressions": 3,
    "train.random_negatives": 3,
    "index.topk": 20,
    "eval.longtail_window": 4,
}


class TestMetrics:
    def test_recall(self):
        assert recall_at_k([1, 2, 3], [1, 2]) == 1.0
        assert recall_at_k([4], [1, 2]) == 0.0
        assert recall_at_k([1, 5], [1, 2]) == 0.5
        with pytest.raises(ContractViolation):
            recall_at_k([1], [])

    def test_p_good(self):
        rel = lambda i, q: i < 3  # noqa: E731
        assert p_good(range(10), 0, rel) == 0.3
        assert p_good([0, 1], 0, rel) == 1.0
        assert p_good([5, 6], 0, rel) == 0.0
        with pytest.raises(ContractViolation):
            p_good([], 0, rel)

    def test_p_longtail(self):
        stats = ExposureStats(np.array([0.0, 2.0, 5.0]), 7, 3.0)
        assert p_longtail([0, 1], stats) == 1.0
        assert p_longtail([0, 1, 2, 99], stats) == 0.75  # unknown items count as unexposed
        assert p_longtail([0, 1, 2], ExposureStats(np.array([0.0, 2.0, 5.0]), 7, 0.0)) == 0.0

    def test_eval_record_dedup(self):
        assert EvalRecord([1], [3, 3, 4], 0, False).targets == [3, 4]
        with pytest.raises(ContractViolation):
            EvalRecord([1], [], 0, False)


class TestExposureStats:
    def test_window_and_percentile(self):
        recs = [
            SearchRecord(0, 0, 0, [], [(0, False, False), (1, False, False)], 0),
            SearchRecord(0, 0, 0, [], [(0, False, False)], 2),
            SearchRecord(0, 0, 0, [], [(0, False, False), (2, False, False)], 3),
        ]
        s = exposure_stats(recs, 4, window_days=2, percentile=50.0)
        np.testing.assert_array_equal(s.avg_daily, [1.0, 0.0, 0.5, 0.0])
        assert s.threshold == 0.25
        assert s.production_window == 30 and s.production_threshold == 100.0
        assert exposure_stats(recs, 4, window_days=2, threshold=0.7).threshold == 0.7

    def test_file_round_trip(self, tmp_path):
        s = ExposureStats(np.array([0.5, 1.25]), 3, 1.0)
        path = tmp_path / "stats.json"
        write_exposure_stats(s, path)
        back = read_exposure_stats(path)
        np.testing.assert_array_equal(back.avg_daily, s.avg_daily)
        assert (back.window_days, back.threshold) == (3, 1.0)
        path.write_text(json.dumps({"window_days": 3}))
        with pytest.raises(InputError):
            read_exposure_stats(path)
        with pytest.raises(InputError):
            read_exposure_stats(tmp_path / "missing.json")


def fixture_index():
    return InvertedIndex(
        {
            0: [(1, 0.9), (3, 0.7), (2, 0.1)],
            1: [(3, 0.8), (0, 0.6), (5, 0.2)],
            2: [(5, 0.9), (3, 0.5), (1, 0.4)],
            3: [(1, 0.95), (0, 0.2)],
            6: [(7, 0.3)],
        },
        topk=3,
        category_restricted=True,
    )


class TestEvaluate:
    def test_five_record_fixture(self):
        """Hand computation with K = 2.

        Relevant to query 0: items 0, 1, 3; to query 1: 1, 2, 3, 5; to query 2: 6.
        Long-tail (average below 1.0): items 2, 4, 5, 7.

        rec  retrieved  recall  recall_p  p_good  p_l
        1    [1, 3]     1/2     -         1       0
        2    [5, 3]     1/2     1         1       1/2
        3    [7]        1       1         0       1
        4    [1, 0]     0       -         1/2     0
        5    []         0       -         -       -
        """
        records = [
            EvalRecord([0], [1, 2], 0, False),
            EvalRecord([1, 2], [5, 4], 1, True, [5]),
            EvalRecord([6], [7], 2, True, [7]),
            EvalRecord([3], [2], 1, False),
            EvalRecord([4], [0], 0, False),
        ]
        stats = ExposureStats(np.array([5.0, 4.0, 0.5, 3.0, 0.0, 0.2, 1.0, 0.0]), 14, 1.0)
        rep = evaluate(fixture_index(), records, 2, hand_catalog(), stats)
        assert rep.recall_at_k == pytest.approx(0.4, abs=1e-15)
        assert rep.recall_p_at_k == 1.0
        assert rep.p_good == pytest.approx(0.625, abs=1e-15)
        assert rep.p_l == pytest.approx(0.375, abs=1e-15)
        assert (rep.k, rep.n_records, rep.n_purchase_records) == (2, 5, 2)

    def test_oracle_index_full_recall(self, small_catalog, small_logs):
        records = eval_records(small_logs)
        stats = exposure_stats(small_logs, small_catalog.n_items)
        k = max(len(r.targets) for r in records)
        by_trigger = {}
        for r in records:
            by_trigger.setdefault(tuple(r.triggers), []).extend(r.targets)
        oracle = lambda triggers, k: list(dict.fromkeys(by_trigger[tuple(triggers)]))[:k]  # noqa: E731
        distinct = [r for r in records if len(set(by_trigger[tuple(r.triggers)])) <= k]
        rep = evaluate(oracle, distinct, k, small_catalog, stats)
        assert rep.recall_at_k == 1.0

    def test_random_index_expectation(self, small_catalog, small_logs):
        """Uniform K-subsets of an n-item corpus hit each target with probability K/n."""
        records = eval_records(small_logs)
        stats = exposure_stats(small_logs, small_catalog.n_items)
        n, k = small_catalog.n_items, 30
        rng = np.random.default_rng(11)
        rand = lambda triggers, k: rng.choice(n, size=k, replace=False).tolist()  # noqa: E731
        reps = [evaluate(rand, records, k, small_catalog, stats).recall_at_k for _ in range(20)]
        per_record = np.array(reps)
        expected = k / n
        # each run averages len(records) Bernoulli fractions; 4-sigma band on the mean
        sigma = np.sqrt(expected * (1 - expected) / (len(records) * len(per_record)))
        assert abs(per_record.mean() - expected) < 4 * sigma + 1e-3

    def test_temporal_split_enforced(self, small_catalog, small_logs):
        stats = exposure_stats(small_logs, small_catalog.n_items)
        with pytest.raises(ContractViolation):
            evaluate(fixture_index(), small_logs, 5, small_catalog, stats, train_max_day=2)

    def test_no_records(self, small_catalog):
        stats = ExposureStats(np.zeros(small_catalog.n_items), 1, 0.0)
        with pytest.raises(ContractViolation):
            evaluate(fixture_index(), [], 5, small_catalog, stats)
        with pytest.raises(ContractViolation):
            evaluate(fixture_index(), [EvalRecord([0], [1], 0, False)], 0, small_catalog, stats)

    def test_pure(self, small_catalog, small_logs):
        stats = exposure_stats(small_logs, small_catalog.n_items)
        run = popularity_retriever(small_logs, small_catalog)
        a = evaluate(run, small_logs, 10, small_catalog, stats)
        b = evaluate(run, small_logs, 10, small_catalog, stats)
        assert a.to_json() == b.to_json()
        for m in (a.recall_at_k, a.recall_p_at_k, a.p_good, a.p_l):
            assert 0.0 <= m <= 1.0


class TestPopularityBaseline:
    def test_ranks_by_clicks_within_category(self):
        cat = hand_catalog()
        recs = [
            SearchRecord(0, 0, 0, [], [(3, True, False), (2, True, False), (5, False, False)], 0),
            SearchRecord(0, 0, 0, [], [(2, True, False), (7, True, False)], 0),
        ]
        run = popularity_retriever(recs, cat)
        assert run([0], 3) == [2, 3, 1]
        assert run([2], 2) == [3, 0]
        assert run([6], 5) == [7]
        assert run([], 5) == []


class TestAblate:
    def test_needs_three_seeds(self):
        with pytest.raises(ContractViolation):
            ablate(load_config(overrides=TINY), n_seeds=2)

    def test_base_only_and_duplicate(self):
        cfg = load_config(overrides=TINY)
        table = ablate(cfg, {"copy": {}}, n_seeds=3)
        assert table.variants == ["GCL-MO", "copy"] and table.seeds == [0, 1, 2]
        for m in ("recall_at_k", "p_good", "p_l"):
            np.testing.assert_array_equal(table.values("GCL-MO", m), table.values("copy", m))
        lines = table.to_tsv().splitlines()
        assert lines[0].split("\t")[:2] == ["variant", "seed"]
        assert len(lines) == 1 + 6 + 4

    def test_popularity_rows(self):
        table = ablate(load_config(overrides=TINY), {}, seeds=[0, 1, 2], popularity=True)
        assert table.variants == ["GCL-MO", "popularity"]
        assert len(table.values("popularity", "recall_at_k")) == 3

    def test_empty_variant_list(self):
        table = ablate(load_config(overrides=TINY), {}, seeds=[0, 1, 2])
        assert table.variants == ["GCL-MO"] and len(table.rows) == 3

    def test_variant_catalog(self):
        assert set(VARIANTS) == {
            "GCL-MO",
            "minus-relevance",
            "minus-exposure",
            "minus-click",
            "minus-purchase",
            "GL-MO",
            "AP-GCL-MO",
        }
