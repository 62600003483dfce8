"""End-to-end acceptance checks.

Each test records a ``criterion`` number and a one-line ``detail``; the
conftest hook prints a PASS/FAIL line per criterion after the run.
"""

import itertools
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from mtgcn import gcn, mtl
from mtgcn.cli import main
from mtgcn.corpus import N_CLASSES, build_vocabulary, corpus_from_texts, make_folds
from mtgcn.evaluate import cross_validate
from mtgcn.graph import (
    GraphRecipe,
    SparseMatrix,
    build_ws_graph,
    count_cooccurrence,
    normalize_adjacency,
    pmi_edges,
    read_graph,
    tfidf_edges,
    write_graph,
)
from mtgcn.metrics import confusion, f1_scores
from mtgcn.synthetic import two_cluster_corpus, write_jsonl
from mtgcn.walks import WalkConfig, generate_walks, transition_probs
from conftest import random_symmetric
from gradcheck import max_relative_error, random_instance
from oracles import f1_from_confusion, first_order_probs, pmi_dict, random_texts, tfidf_dict, window_counts

LAMBDAS = [0.0, 0.2, 0.5, 1.0]


@pytest.fixture(scope="module")
def two_cluster():
    c = two_cluster_corpus(seed=0)
    g, v = GraphRecipe("WS").build(c)
    return c, g, v


@pytest.fixture
def verdict(record_property, request):
    n = int(request.node.name.split("_")[1][1:])
    record_property("criterion", n)

    def done(ok, detail):
        record_property("detail", detail)
        assert ok, detail

    return done


def _triples(m):
    r, c, w = m.triples()
    return {(int(i), int(j)): x for i, j, x in zip(r, c, w)}


def test_c01_gradients_match_finite_differences(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for decoder, lam in itertools.product(("gcn", "inner"), (0.0, 0.2, 1.0)):
        for _ in range(4):
            n, k = int(rng.integers(6, 21)), int(rng.integers(2, 9))
            inst = random_instance(rng, n, k, decoder)
            worst = max(worst, max_relative_error(inst, decoder, lam))
            count += 1
    elapsed = time.perf_counter() - t0
    verdict(count >= 20 and worst < 1e-4 and elapsed < 30,
            f"{count} instances, max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 30s)")


def test_c02_graph_weights_match_oracles(verdict):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    bad = []
    worst = 0.0
    for i in range(50):
        m, vocab_size = int(rng.integers(1, 201)), int(rng.integers(1, 151))
        window = int(rng.integers(1, 6))
        c = corpus_from_texts(random_texts(rng, m, vocab_size))
        v = build_vocabulary(c)
        seqs = v.encode(c)
        table = count_cooccurrence(c, v, window)
        total, word, pair = window_counts(seqs, window)
        if (table.total_windows != total or table.pair_dict() != dict(pair)
                or table.word_window_counts.tolist() != [word[j] for j in range(len(v))]):
            bad.append(f"counts corpus {i}")
        for got, ref in ((_triples(pmi_edges(table)), pmi_dict(total, word, pair)),
                         (_triples(tfidf_edges(c, v)), tfidf_dict(seqs))):
            if set(got) != set(ref):
                bad.append(f"support corpus {i}")
                continue
            if ref:
                worst = max(worst, max(abs(got[key] - ref[key]) for key in ref))
    elapsed = time.perf_counter() - t0
    verdict(not bad and worst <= 1e-12 and elapsed < 60,
            f"50 corpora, count mismatches {len(bad)}, max weight err {worst:.1e} (<= 1e-12), {elapsed:.1f}s")


def test_c03_node_count_identity(verdict, tmp_path):
    rng = np.random.default_rng(3)
    corpora = [two_cluster_corpus(n_sentences=n, words_per_cluster=w, seed=s)
               for n, w, s in ((200, 50, 0), (60, 20, 1), (10, 4, 2), (2, 2, 3))]
    corpora += [corpus_from_texts(random_texts(rng, int(rng.integers(1, 80)), 40)) for _ in range(20)]
    bad = 0
    for i, c in enumerate(corpora):
        v = build_vocabulary(c)
        g = build_ws_graph(c, v)
        write_graph(g, tmp_path / "g.tg1")
        back = read_graph(tmp_path / "g.tg1", n_sentences=len(c))
        for graph in (g, back):
            if not (graph.n_nodes == len(v) + len(c) == graph.n_words + graph.n_sentences
                    and graph.n_sentences == len(c)):
                bad += 1
    verdict(bad == 0, f"{len(corpora)} WS builds (and their reloads), {bad} violations of nodes = words + sentences")


def _non_decreasing(x, tol):
    return all(b >= a - tol for a, b in zip(x, x[1:]))


def _non_increasing(x, tol):
    return all(b <= a + tol for a, b in zip(x, x[1:]))


def test_c04_lambda_sweep_trend(verdict, two_cluster):
    c, g, v = two_cluster
    t0 = time.perf_counter()
    plan = make_folds(c, 2, seed=0)
    cfg = mtl.TrainConfig(dim=32, lr=0.01, max_epochs=1000, patience=10, dropout=0.5, weight_decay=0.0)
    rows, _ = mtl.sweep_lambda(g, c, [plan.split(0), plan.split(1)], cfg, LAMBDAS, vocab=v)
    mse = np.array([[r["l_mse"] for r in rows if r["lambda"] == lam] for lam in LAMBDAS])
    cla = np.array([[r["l_cla"] for r in rows if r["lambda"] == lam] for lam in LAMBDAS])
    mse_mean, cla_mean = mse.mean(axis=1), cla.mean(axis=1)
    # 5% of the curve's largest magnitude
    ok_mse = _non_decreasing(mse_mean, 0.05 * np.abs(mse_mean).max())
    ok_cla = _non_increasing(cla_mean, 0.05 * np.abs(cla_mean).max())
    per_fold = [
        _non_decreasing(mse[:, f], 0.05 * np.abs(mse[:, f]).max())
        and _non_increasing(cla[:, f], 0.05 * np.abs(cla[:, f]).max())
        for f in range(2)
    ]
    strict = bool(np.all(np.diff(mse_mean) >= 0) and np.all(np.diff(cla_mean) <= 0))
    elapsed = time.perf_counter() - t0
    print("lambda", LAMBDAS)
    print("mse per fold", mse.T.tolist(), "mean", mse_mean.tolist())
    print("cla per fold", cla.T.tolist(), "mean", cla_mean.tolist())
    verdict(ok_mse and ok_cla and elapsed < 300,
            f"mean MSE {np.round(mse_mean * 1e4, 3).tolist()}e-4 up, mean CLA {np.round(cla_mean, 3).tolist()} down "
            f"(5% band); per-fold {per_fold}, strict {strict}, {elapsed:.0f}s")


def test_c05_end_to_end_separability(verdict, two_cluster):
    c, g, v = two_cluster
    t0 = time.perf_counter()
    cfg = mtl.TrainConfig(dim=32, lam=0.2, lr=0.01, max_epochs=300, weight_decay=0.0, readout="avg")
    report, _ = cross_validate(c, GraphRecipe("WS"), cfg, make_folds(c, 2, seed=0), graph=g, vocab=v)
    sa, ei = report.mean("sa"), report.mean("ei")
    elapsed = time.perf_counter() - t0
    verdict(sa >= 0.95 and ei >= 0.90 and elapsed < 300,
            f"2-fold F1 SA {sa:.3f} (>= 0.95), EI {ei:.3f} (>= 0.90), {elapsed:.0f}s")


def test_c06_lambda_zero_decoupling(verdict, two_cluster):
    c, g, v = two_cluster
    split = make_folds(c, 2, seed=0).split(0)
    cfg = mtl.TrainConfig(lam=0.0, dim=32, max_epochs=20, patience=20, lr=0.01)
    traces = []
    for tasks in (cfg.tasks, ()):
        seen = []
        mtl.train(g, c, split, mtl.TrainConfig(**{**cfg.to_dict(), "tasks": tasks}), vocab=v,
                  on_epoch=lambda e, p: seen.append((p.w0.tobytes(), p.w1.tobytes())))
        traces.append(seen)
    same = sum(a == b for a, b in zip(*traces))
    verdict(len(traces[0]) == len(traces[1]) == 20 and same == 20,
            f"{same}/20 epochs with bit-identical (W0, W1), multi-task at lambda 0 vs autoencoder only")


def test_c07_early_stopping_at_zero_learning_rate(verdict, two_cluster):
    c, g, v = two_cluster
    split = make_folds(c, 5, seed=0).split(0)
    res = mtl.train(g, c, split, mtl.TrainConfig(lr=0.0, dim=32), vocab=v)
    h = res.history
    verdict(h.stopped_epoch == 11 and h.best_epoch == 1 and len(h.records) == 11,
            f"stopped at epoch {h.stopped_epoch} (expected 11), best epoch {h.best_epoch}")


def _relabel(corpus, rng, rows):
    labels = {t: [None if y < 0 else int(y) for y in corpus.labels(t)] for t in N_CLASSES}
    for t, k in N_CLASSES.items():
        for r in rows:
            labels[t][r] = None if rng.random() < 0.3 else int(rng.integers(0, k))
    return corpus_from_texts([r.text for r in corpus], labels)


def _random_labeled(rng, m, vocab_size):
    labels = {t: [None if rng.random() < 0.2 else int(rng.integers(0, k)) for _ in range(m)]
              for t, k in N_CLASSES.items()}
    for t, k in N_CLASSES.items():
        labels[t][0] = int(rng.integers(0, k))
    return corpus_from_texts(random_texts(rng, m, vocab_size), labels)


def test_c08_masked_labels_do_not_affect_gradients(verdict):
    rng = np.random.default_rng(8)
    grad_ok = traj_ok = 0
    for _ in range(10):
        c = _random_labeled(rng, int(rng.integers(12, 40)), 25)
        g, v = GraphRecipe("WS").build(c)
        split = make_folds(c, 3, seed=int(rng.integers(1000))).split(0)
        hidden = np.concatenate([split.val, split.test])
        other = _relabel(c, rng, hidden)
        cfg = mtl.TrainConfig(dim=6, lr=0.01, max_epochs=3, patience=3, dropout=0.0)
        readout = mtl.sentence_readout(g, c, v)
        # one gradient evaluation at a shared random point
        params = gcn.init_params(g.n_nodes, 6, rng)
        for t, k in N_CLASSES.items():
            params.heads[t] = rng.normal(size=(6, k))
        a_hat = g.normalized.csr
        grads = []
        for corpus in (c, other):
            labels = mtl._masked_labels(corpus, cfg.tasks, split.train)
            grads.append(mtl.joint_objective(a_hat, a_hat, params, "gcn", readout, labels, 0.7).grads)
        grad_ok += all(grads[0][k].tobytes() == grads[1][k].tobytes() for k in grads[0])

        def trace(corpus):
            seen = []
            mtl.train(g, corpus, split, cfg, readout, vocab=v,
                      on_epoch=lambda e, p: seen.append(b"".join(a.tobytes() for a in p.arrays().values())))
            return seen

        traj_ok += trace(c) == trace(other)
    verdict(grad_ok == 10 and traj_ok == 10,
            f"{grad_ok}/10 gradients and {traj_ok}/10 training trajectories unchanged by masked label slots")


def _barbell():
    a = np.zeros((8, 8))
    for block in (range(4), range(4, 8)):
        for i, j in itertools.combinations(block, 2):
            a[i, j] = a[j, i] = 1.0
    a[3, 4] = a[4, 3] = 1.0
    return a


def _all_graphs(n):
    edges = list(itertools.combinations(range(n), 2))
    for bits in range(1 << len(edges)):
        a = np.zeros((n, n))
        for e, (i, j) in enumerate(edges):
            if bits >> e & 1:
                a[i, j] = a[j, i] = 1.0
        yield a


def test_c09_node2vec_degeneracy_and_bias(verdict):
    rng = np.random.default_rng(9)
    graphs = [a for n in range(2, 6) for a in _all_graphs(n)]
    for _ in range(200):
        n = int(rng.integers(6, 11))
        graphs.append(random_symmetric(rng, n, density=float(rng.uniform(0.2, 0.9)), self_loops=bool(rng.integers(2))))
    checked, mismatched = 0, 0
    for d in graphs:
        g = SparseMatrix.from_scipy(d, symmetric=True)
        for cur in range(d.shape[0]):
            if not d[cur].any():
                continue
            nb_ref, p_ref = first_order_probs(d, cur)
            for prev in [-1, *np.flatnonzero(d[cur])]:
                nb, p = transition_probs(g, int(prev), cur, 1.0, 1.0)
                checked += 1
                if not (np.array_equal(nb, nb_ref) and np.allclose(p, p_ref, rtol=1e-14, atol=0)):
                    mismatched += 1

    # barbell: two 4-cliques joined by the edge 3-4; q < 1 favours crossing outward
    d = _barbell()
    g = SparseMatrix.from_scipy(d, symmetric=True)
    w = generate_walks(g, WalkConfig(walks_per_node=250, walk_length=51, p=1.0, q=0.25, seed=0)).walks
    steps = w.shape[0] * (w.shape[1] - 1)
    a, b, c = w[:, :-2].ravel(), w[:, 1:-1].ravel(), w[:, 2:].ravel()
    counts = np.bincount((a * 8 + b) * 8 + c, minlength=512).reshape(8, 8, 8)
    bridge = []
    chi2, dof, cells, beyond, worst = 0.0, 0, 0, 0, 0.0
    for prev, cur in itertools.product(range(8), range(8)):
        n = counts[prev, cur].sum()
        if n == 0:
            continue
        nb, p = transition_probs(g, prev, cur, 1.0, 0.25)
        obs = counts[prev, cur, nb]
        z = np.abs(obs - n * p) / np.sqrt(n * p * (1 - p))
        chi2 += float(((obs - n * p) ** 2 / (n * p)).sum())
        dof += nb.size - 1
        cells += nb.size
        beyond += int((z > 3).sum())
        worst = max(worst, float(z.max()))
        if cur in (3, 4) and prev in (range(3) if cur == 3 else range(5, 8)):
            out = 4 if cur == 3 else 3
            k = int(np.flatnonzero(nb == out)[0])
            bridge.append((float(z[k]), obs[k] / n, float(p[k])))
    chi2_p = stats.chi2.sf(chi2, dof)
    bridge_ok = all(z <= 3 for z, _, _ in bridge) and len(bridge) == 6
    # the two-sided 3-sigma level
    fit_ok = chi2_p > 2 * stats.norm.sf(3)
    ok = mismatched == 0 and steps >= 100_000 and bridge_ok and fit_ok
    verdict(ok, f"p=q=1: {mismatched}/{checked} transition sets differ; barbell q=0.25 over {steps} steps: "
                f"bridge crossings max |z| {max(z for z, _, _ in bridge):.2f} (<= 3), "
                f"goodness of fit p {chi2_p:.2f}; {beyond}/{cells} single cells beyond 3 sigma (max {worst:.2f})")


def test_c10_metrics_match_oracle(verdict):
    rng = np.random.default_rng(10)
    worst = 0.0
    conf_ok = True
    for _ in range(100):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 300))
        gold, pred = rng.integers(0, k, n), rng.integers(0, k, n)
        macro, weighted, per = f1_scores(gold, pred, k)
        m_ref, w_ref, f_ref, cm_ref = f1_from_confusion(gold.tolist(), pred.tolist(), k)
        worst = max(worst, abs(macro - m_ref), abs(weighted - w_ref), float(np.abs(per["f1"] - f_ref).max()))
        conf_ok &= np.array_equal(confusion(gold, pred, k), cm_ref)
    equal_gap = 0.0
    for _ in range(20):
        k = int(rng.integers(2, 6))
        gold = np.repeat(np.arange(k), int(rng.integers(1, 40)))
        pred = rng.integers(0, k, gold.size)
        macro, weighted, _ = f1_scores(gold, pred, k)
        equal_gap = max(equal_gap, abs(macro - weighted))
    verdict(worst <= 1e-12 and conf_ok and equal_gap <= 1e-12,
            f"100 label sets, max F1 err {worst:.1e}, confusion equal {conf_ok}; "
            f"equal supports |macro - weighted| {equal_gap:.1e}")


def _pipeline(root: Path, corpus: Path):
    fast = ["--dim", "8", "--max-epochs", "6", "--patience", "6", "--seed", "3"]
    calls = [
        ["build-graph", "--corpus", str(corpus)],
        ["train", "--corpus", str(corpus), "--graph", str(root / "build-graph" / "graph.tg1"), *fast],
        ["evaluate", "--corpus", str(corpus), "--checkpoint", str(root / "train" / "checkpoint.ckpt")],
        ["evaluate", "--corpus", str(corpus), "--folds", "2", *fast],
        ["embed", "--corpus", str(corpus), "--checkpoint", str(root / "train" / "checkpoint.ckpt")],
        ["sweep-lambda", "--corpus", str(corpus), "--folds", "2", "--lambdas", "0,1", *fast],
        ["walks", "--corpus", str(corpus), "--walks-per-node", "2", "--walk-length", "8",
         "--walk-dim", "8", "--walk-epochs", "2", "--seed", "3"],
    ]
    for i, argv in enumerate(calls):
        name = argv[0] if i != 3 else "evaluate-cv"
        assert main([*argv, "--out", str(root / name)]) == 0


def _snapshot(root: Path) -> dict:
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c11_reruns_are_byte_identical(verdict, tmp_path):
    corpus = tmp_path / "c.jsonl"
    write_jsonl(two_cluster_corpus(n_sentences=40, words_per_cluster=16, seed=5), corpus)
    root = tmp_path / "run"
    _pipeline(root, corpus)
    first = _snapshot(root)
    shutil.rmtree(root)
    _pipeline(root, corpus)
    second = _snapshot(root)
    files = sorted(first)
    differ = [str(f) for f in files if first[f] != second.get(f)] + [str(f) for f in second if f not in first]
    kinds = {f.suffix for f in files}
    verdict(not differ and {".tg1", ".ckpt", ".json", ".csv"} <= kinds,
            f"{len(files)} output files across 7 commands, differing: {differ or 'none'}")


def test_c12_normalized_spectrum(verdict):
    rng = np.random.default_rng(12)
    lo, hi = np.inf, -np.inf
    for _ in range(20):
        n = int(rng.integers(2, 51))
        a = SparseMatrix.from_scipy(random_symmetric(rng, n, density=float(rng.uniform(0.05, 1.0))), symmetric=True)
        ev = np.linalg.eigvalsh(normalize_adjacency(a, "sym_renorm").toarray())
        lo, hi = min(lo, ev.min()), max(hi, ev.max())
    verdict(lo >= -1 and hi <= 1 + 1e-9, f"20 graphs, eigenvalues in [{lo:.6f}, {hi:.12f}]")
