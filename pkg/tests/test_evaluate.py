import json

import numpy as np
import pytest

from mtgcn.corpus import corpus_from_texts, make_folds
from mtgcn.evaluate import (
    LogisticClassifier,
    MetricsReport,
    UnknownQueryError,
    cross_validate,
    evaluate_embeddings,
    nearest_neighbors,
    score_task,
)
from mtgcn.graph import EmbeddingTable, GraphRecipe
from mtgcn.metrics import accuracy, confusion, f1_scores
from mtgcn.mtl import TrainConfig
from oracles import f1_from_confusion


class TestF1:
    def test_perfect(self):
        macro, weighted, _ = f1_scores([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert macro == weighted == 1.0

    def test_hand_case(self):
        macro, _, per = f1_scores([1, 1, 0, 0], [1, 0, 0, 0], 2)
        assert per["f1"][1] == pytest.approx(2 / 3, abs=1e-15)
        assert per["f1"][0] == pytest.approx(0.8, abs=1e-15)
        assert macro == pytest.approx(11 / 15, abs=1e-15)

    def test_random_against_oracle(self, rng):
        for _ in range(20):
            g, p = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
            macro, weighted, per = f1_scores(g, p, 4)
            m_ref, w_ref, f_ref, _ = f1_from_confusion(g.tolist(), p.tolist(), 4)
            assert abs(macro - m_ref) <= 1e-12 and abs(weighted - w_ref) <= 1e-12
            np.testing.assert_allclose(per["f1"], f_ref, rtol=0, atol=1e-12)

    def test_equal_supports(self, rng):
        g = np.repeat(np.arange(3), 30)
        p = rng.integers(0, 3, 90)
        macro, weighted, _ = f1_scores(g, p, 3)
        assert macro == pytest.approx(weighted, abs=1e-15)

    def test_class_permutation_invariance(self, rng):
        g, p = rng.integers(0, 4, 100), rng.integers(0, 4, 100)
        perm = rng.permutation(4)
        a = f1_scores(g, p, 4)
        b = f1_scores(perm[g], perm[p], 4)
        assert a[0] == pytest.approx(b[0], abs=1e-15)
        assert a[1] == pytest.approx(b[1], abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            f1_scores([], [], 2)


class TestConfusion:
    def test_all_correct_diagonal(self):
        np.testing.assert_array_equal(confusion([0, 1, 1], [0, 1, 1], 2), [[1, 0], [0, 2]])

    def test_hand_case(self):
        np.testing.assert_array_equal(confusion([0, 0, 1], [1, 0, 1], 2), [[1, 1], [0, 1]])

    def test_conservation_and_accuracy(self, rng):
        g, p = rng.integers(0, 4, 1000), rng.integers(0, 4, 1000)
        cm = confusion(g, p, 4)
        np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(g, minlength=4))
        assert np.trace(cm) / cm.sum() == pytest.approx(accuracy(g, p), abs=1e-15)

    def test_row_percentages(self):
        pct = confusion([0, 0, 1, 1], [0, 1, 1, 1], 2, normalize=True)
        np.testing.assert_allclose(pct, [[50, 50], [0, 100]])


def _toy(n=10):
    texts = [("red apple fruit" if i % 2 else "blue car road") + f" w{i}" for i in range(n)]
    lab = [i % 2 for i in range(n)]
    return corpus_from_texts(texts, {"sa": lab, "hs": lab, "sar": lab, "ei": [2 * (i % 2) for i in range(n)]})


class TestCrossValidate:
    def test_two_folds_of_five(self):
        c = _toy()
        cfg = TrainConfig(dim=8, max_epochs=5, patience=5)
        report, results = cross_validate(c, GraphRecipe("WS"), cfg, make_folds(c, 2, seed=0, val_fraction=0.2))
        assert len(report.folds) == 2 and len(results) == 2
        assert [f["sa"].n for f in report.folds] == [5, 5]
        for t in report.tasks:
            per = [f[t].macro_f1 for f in report.folds]
            assert report.mean(t) == pytest.approx(np.mean(per), abs=1e-15)
            assert report.total_confusion(t).sum() == 10

    def test_same_seed_same_report(self):
        c = _toy()
        cfg = TrainConfig(dim=8, max_epochs=5, patience=5)
        plan = make_folds(c, 2, seed=0, val_fraction=0.2)
        a = cross_validate(c, GraphRecipe("WS"), cfg, plan)[0].to_dict()
        b = cross_validate(c, GraphRecipe("WS"), cfg, plan)[0].to_dict()
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def test_report_files(self, tmp_path):
        rep = MetricsReport([{"sa": score_task("sa", [0, 1, 1], [0, 1, 0])}], {"k": 1})
        rep.write_json(tmp_path / "r.json")
        loaded = json.loads((tmp_path / "r.json").read_text())
        assert loaded["mean"]["sa"]["macro_f1"] == pytest.approx(rep.mean("sa"))
        paths = rep.write_confusion_csv(tmp_path)
        assert paths[0].read_text().splitlines()[0] == "gold,pred,count,row_percent"
        assert "mean" in rep.to_text()

    def test_hs_headline_is_weighted(self):
        m = score_task("hs", [0, 0, 0, 1], [0, 0, 1, 1])
        assert m.headline == m.weighted_f1 != m.macro_f1


class TestEmbeddingsClassifier:
    def test_separable_vectors(self, rng):
        c = _toy(40)
        y = c.labels("sa")
        vecs = np.c_[y * 2.0 - 1.0, rng.normal(scale=0.1, size=40)]
        report = evaluate_embeddings(c, vecs, make_folds(c, 2, seed=1), tasks=("sa",))
        assert report.mean("sa") == 1.0

    def test_logistic_fits_linear_boundary(self, rng):
        x = rng.normal(size=(60, 2))
        y = (x[:, 0] > 0).astype(int)
        assert (LogisticClassifier(l2=1e-6).fit(x, y, 2).predict(x) == y).mean() > 0.95


class TestNeighbors:
    def test_duplicate_ranked_first(self, rng):
        v = rng.normal(size=(5, 3))
        v[3] = v[1]
        got = nearest_neighbors(EmbeddingTable(v, tuple("abcde")), "b", 2)
        assert got[0][0] == "d" and got[0][1] == pytest.approx(1.0)

    def test_k_clamped(self, rng):
        got = nearest_neighbors(EmbeddingTable(rng.normal(size=(4, 2)), tuple("abcd")), "a", 10)
        assert sorted(k for k, _ in got) == ["b", "c", "d"]

    def test_exhaustive_scan(self, rng):
        keys = tuple(f"k{i}" for i in range(100))
        v = rng.normal(size=(100, 6))
        table = EmbeddingTable(v, keys)
        for q in (0, 17, 99):
            scan = []
            for i in range(100):
                if i != q:
                    s = v[i] @ v[q] / (np.linalg.norm(v[i]) * np.linalg.norm(v[q]))
                    scan.append((-s, i))
            scan.sort()
            got = nearest_neighbors(table, keys[q], 8)
            assert [k for k, _ in got] == [keys[i] for _, i in scan[:8]]
            np.testing.assert_allclose([s for _, s in got], [-s for s, _ in scan[:8]], atol=1e-12)

    def test_ties_by_index(self):
        v = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 2.0], [0.0, 3.0]])
        got = nearest_neighbors(EmbeddingTable(v, ("q", "x", "y", "z")), "x", 3)
        assert [k for k, _ in got] == ["y", "z", "q"]

    def test_unknown_query_suggests(self, rng):
        table = EmbeddingTable(rng.normal(size=(3, 2)), ("apple", "apply", "zebra"))
        with pytest.raises(UnknownQueryError, match="appl"):
            nearest_neighbors(table, "appel")


def test_micro_f1_is_accuracy(rng):
    g, p = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    m = score_task("ei", g, p)
    assert m.micro_f1 == pytest.approx(accuracy(g, p), abs=1e-15)
    assert m.to_dict()["micro_f1"] == m.micro_f1
