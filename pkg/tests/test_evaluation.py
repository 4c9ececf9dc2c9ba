import csv
import json

import numpy as np
import pytest

from oracles import full_sort_retrieval
from tripletsearch.dataset import Dataset, Domain, FeatureRecord, SynthConfig, generate_synthetic
from tripletsearch.embedding import EmbeddingModel, forward
from tripletsearch.errors import ConfigError, DegenerateInputError, UsageError
from tripletsearch.evaluation import (
    DEFAULT_K_LIST,
    EvalProtocol,
    EvalReport,
    RetrievalIndex,
    build_index,
    confusion_matrix,
    evaluate,
    recall_at_k,
    retrieve_topk,
    write_confusion_csv,
    write_recall_csv,
    write_report_json,
)

Q, C, N = Domain.QUERY, Domain.CATALOG, Domain.NONE


def make_ds(rows):
    """rows: (image_id, item, class, domain, features)."""
    return Dataset(FeatureRecord(i, it, c, d, np.array(f, dtype=float)) for i, it, c, d, f in rows)


def index_of(rows):
    rows = np.asarray(rows, dtype=float)
    return RetrievalIndex(rows, np.arange(len(rows)), np.linalg.norm(rows, axis=1))


class TestBuildIndex:
    def test_catalog_rows_only(self):
        ds = generate_synthetic(SynthConfig(n_classes=1, items_per_class=5, images_per_item=2, dim=3, two_domain=True))
        idx = build_index(EmbeddingModel.identity(3), ds, EvalProtocol.CROSS_DOMAIN)
        assert len(idx) == 5
        assert all(ds.domains[r] is C for r in idx.refs)
        np.testing.assert_array_equal(idx.embeddings, ds.features[idx.refs])

    def test_rebuild_is_bit_identical(self):
        ds = generate_synthetic(SynthConfig(n_classes=2, items_per_class=4, images_per_item=2, dim=3))
        model = EmbeddingModel.initialized("linear", 3, 3, seed=1)
        a = build_index(model, ds, "single-pool")
        b = build_index(model, ds, "single-pool")
        assert a.embeddings.tobytes() == b.embeddings.tobytes()

    def test_degenerate_embedding_named(self):
        ds = make_ds([("good", "x", "c", N, [1, 0]), ("zero", "x", "c", N, [0, 0])])
        with pytest.raises(DegenerateInputError, match="zero"):
            build_index(EmbeddingModel.identity(2), ds, "single-pool")

    def test_cross_domain_needs_domains(self):
        ds = make_ds([("a", "x", "c", N, [1, 0]), ("b", "x", "c", N, [0, 1])])
        with pytest.raises(ConfigError):
            build_index(EmbeddingModel.identity(2), ds, EvalProtocol.CROSS_DOMAIN)


class TestRetrieveTopk:
    def test_single_row(self):
        assert [r for r, _ in retrieve_topk(index_of([[1.0, 2.0]]), [0.0, 1.0], k=5)] == [0]

    def test_exact_match_ranks_first(self):
        rows = np.random.default_rng(0).normal(size=(10, 4))
        out = retrieve_topk(index_of(rows), rows[6], k=3)
        assert out[0][0] == 6 and out[0][1] == pytest.approx(1.0, abs=1e-15)

    def test_exclude(self):
        rows = np.random.default_rng(1).normal(size=(6, 3))
        out = retrieve_topk(index_of(rows), rows[2], k=6, exclude=2)
        assert 2 not in [r for r, _ in out] and len(out) == 5

    def test_tie_order(self):
        out = retrieve_topk(index_of([[0, 1], [1, 0], [2, 0], [1, 0]]), [1.0, 0.0], k=4)
        assert [r for r, _ in out] == [1, 2, 3, 0]

    def test_errors(self):
        idx = index_of([[1.0, 0.0]])
        with pytest.raises(UsageError):
            retrieve_topk(idx, [1.0, 0.0], k=0)
        with pytest.raises(DegenerateInputError):
            retrieve_topk(idx, [0.0, 0.0], k=1)
        with pytest.raises(UsageError):
            retrieve_topk(idx, [1.0, 0.0, 0.0], k=1)

    def test_matches_full_sort_oracle(self):
        g = np.random.default_rng(2)
        for trial in range(100):
            rows = g.normal(size=(50, 5))
            if trial % 2:
                # integer grid with duplicates forces exact ties
                rows = g.integers(-2, 3, size=(50, 5)).astype(float)
                rows[np.linalg.norm(rows, axis=1) == 0] = 1.0
            q = rows[g.integers(50)] if trial % 3 == 0 else g.normal(size=5)
            got = retrieve_topk(index_of(rows), q, k=10)
            want = full_sort_retrieval(rows, range(50), q, 10)
            assert [r for r, _ in got] == [r for r, _ in want]
            sims = [s for _, s in got]
            assert all(-1 <= s <= 1 for s in sims) and sims == sorted(sims, reverse=True)


class TestRecall:
    def test_rank_three(self):
        # catalog order by similarity to the query: w, z, x (same item), y
        ds = make_ds([
            ("q", "x", "c", Q, [1.0, 0.0]),
            ("x1", "x", "c", C, [0.8, 0.6]),
            ("w", "w", "c", C, [1.0, 0.01]),
            ("z", "z", "c", C, [1.0, 0.2]),
            ("y", "y", "c", C, [0.0, 1.0]),
        ])
        rep = recall_at_k(EmbeddingModel.identity(2), ds, "cross-domain", k_list=[1, 2, 3, 4])
        assert rep.recall_at_k == {1: 0.0, 2: 0.0, 3: 1.0, 4: 1.0}
        assert rep.n_queries == 1

    def test_full_catalog_gives_one(self):
        ds = generate_synthetic(SynthConfig(n_classes=3, items_per_class=5, images_per_item=2, dim=4, two_domain=True))
        model = EmbeddingModel.initialized("linear", 4, 4, seed=3)
        rep = recall_at_k(model, ds, "cross-domain", k_list=[1, 15])
        assert rep.recall_at_k[15] == 1.0

    def test_single_pool_excludes_self(self):
        ds = generate_synthetic(SynthConfig(n_classes=2, items_per_class=3, images_per_item=2, dim=3))
        rep = evaluate(EmbeddingModel.identity(3), ds, "single-pool", k_list=[1, len(ds) - 1])
        assert rep.recall_at_k[len(ds) - 1] == 1.0
        model = EmbeddingModel.identity(3)
        idx = build_index(model, ds, "single-pool")
        for i in range(len(ds)):
            assert i not in [r for r, _ in retrieve_topk(idx, forward(model, ds.features[i]), 5, exclude=i)]

    def test_recall_monotone_and_excluded_queries(self):
        g = np.random.default_rng(5)
        ds = generate_synthetic(SynthConfig(n_classes=4, items_per_class=6, images_per_item=3, dim=5, two_domain=True, seed=4))
        extra = list(ds.records) + [FeatureRecord("lonely", "nobody", "class0", Q, g.normal(size=5))]
        ds = Dataset(extra)
        rep = evaluate(EmbeddingModel.initialized("mlp1", 5, 4, hidden_dim=6, seed=2), ds)
        vals = [rep.recall_at_k[k] for k in sorted(rep.recall_at_k)]
        assert vals == sorted(vals)
        assert rep.excluded_queries == 1
        assert rep.protocol == "cross-domain"
        assert sorted(rep.recall_at_k) == list(DEFAULT_K_LIST)

    def test_no_eligible_queries(self):
        ds = make_ds([("q", "x", "c", Q, [1, 0]), ("k", "y", "c", C, [0, 1])])
        with pytest.raises(UsageError):
            evaluate(EmbeddingModel.identity(2), ds, "cross-domain")


class TestConfusion:
    def test_two_queries(self):
        ds = make_ds([
            ("q1", "x", "A", Q, [1.0, 0.0]),
            ("q2", "y", "A", Q, [0.0, 1.0]),
            ("x1", "x", "A", C, [1.0, 0.1]),
            ("y1", "y", "A", C, [0.5, 0.5]),
            ("b1", "z", "B", C, [0.05, 1.0]),
        ])
        rep = confusion_matrix(EmbeddingModel.identity(2), ds, "cross-domain")
        assert rep.classes == ["A", "B"]
        assert rep.confusion == [[1, 1], [0, 0]]
        assert rep.overall_first_retrieval_accuracy == 0.5
        assert rep.per_class_accuracy == {"A": 0.5, "B": None}

    def test_rows_sum_to_query_counts(self):
        ds = generate_synthetic(SynthConfig(n_classes=5, items_per_class=4, images_per_item=3, dim=4, seed=8))
        rep = evaluate(EmbeddingModel.initialized("linear", 4, 3, seed=0), ds, "single-pool")
        per_class = {c: ds.class_ids.count(c) for c in ds.classes}
        assert [sum(r) for r in rep.confusion] == [per_class[c] for c in rep.classes]
        assert sum(map(sum, rep.confusion)) == rep.n_queries
        trace = sum(rep.confusion[i][i] for i in range(len(rep.classes)))
        assert rep.overall_first_retrieval_accuracy == trace / rep.n_queries

    def test_well_separated_classes_never_confused(self):
        ds = generate_synthetic(SynthConfig(n_classes=4, items_per_class=5, images_per_item=2, dim=8, class_spread=1000.0, seed=1))
        rep = confusion_matrix(EmbeddingModel.identity(8), ds, "single-pool")
        off = np.array(rep.confusion) - np.diag(np.diag(rep.confusion))
        assert not off.any()

    def test_rank1_tie_flagged(self):
        ds = make_ds([
            ("q", "x", "A", Q, [1.0, 0.0]),
            ("x1", "x", "A", C, [2.0, 0.0]),
            ("d", "y", "A", C, [1.0, 0.0]),
        ])
        rep = evaluate(EmbeddingModel.identity(2), ds, "cross-domain", k_list=[1])
        assert rep.rank1_ties == 1
        assert rep.recall_at_k[1] == 1.0


class TestOutputs:
    @pytest.fixture
    def report(self):
        ds = generate_synthetic(SynthConfig(n_classes=3, items_per_class=10, images_per_item=2, dim=4, two_domain=True))
        return evaluate(EmbeddingModel.identity(4), ds)

    def test_recall_csv(self, report, tmp_path):
        write_recall_csv(report, tmp_path / "r.csv")
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows[0] == ["k", "recall"] and len(rows) == 8
        assert [int(r[0]) for r in rows[1:]] == list(DEFAULT_K_LIST)

    def test_confusion_csv(self, report, tmp_path):
        write_confusion_csv(report, tmp_path / "c.csv")
        rows = list(csv.DictReader(open(tmp_path / "c.csv")))
        assert len(rows) == 9
        assert sum(int(r["count"]) for r in rows) == report.n_queries

    def test_json_roundtrip(self, report, tmp_path):
        write_report_json(report, tmp_path / "r.json")
        doc = json.loads((tmp_path / "r.json").read_text())
        for key in ("recall_at_k", "confusion", "overall_first_retrieval_accuracy", "n_queries"):
            assert key in doc
        assert EvalReport.from_dict(doc).to_dict() == report.to_dict()
