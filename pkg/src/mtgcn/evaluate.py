"""Cross-validation, metric reports and embedding nearest-neighbor queries."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from mtgcn import mtl
from mtgcn.corpus import CLASS_NAMES, N_CLASSES, TASKS, FoldPlan, LabeledCorpus
from mtgcn.graph import EmbeddingTable, GraphRecipe
from mtgcn.metrics import confusion, f1_scores

__all__ = [
    "TaskMetrics",
    "MetricsReport",
    "score_task",
    "cross_validate",
    "evaluate_embeddings",
    "LogisticClassifier",
    "nearest_neighbors",
    "UnknownQueryError",
]

# The hate-speech task is heavily imbalanced, so its headline number is weighted F1.
HEADLINE = {"sa": "macro_f1", "ei": "macro_f1", "hs": "weighted_f1", "sar": "macro_f1"}


@dataclass
class TaskMetrics:
    task: str
    n: int
    macro_f1: float
    weighted_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    confusion: list[list[int]]

    @property
    def headline(self) -> float:
        return getattr(self, HEADLINE[self.task])

    @property
    def micro_f1(self) -> float:
        # single-label: micro F1 = accuracy
        cm = np.asarray(self.confusion)
        return float(np.trace(cm) / cm.sum())

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "micro_f1": self.micro_f1,
            "headline_f1": self.headline,
            "per_class": {
                name: {"precision": p, "recall": r, "f1": f, "support": s}
                for name, p, r, f, s in zip(CLASS_NAMES[self.task], self.precision,
                                            self.recall, self.f1, self.support)
            },
            "confusion": self.confusion,
        }


def score_task(task: str, gold, pred) -> TaskMetrics:
    k = N_CLASSES[task]
    macro, weighted, per = f1_scores(gold, pred, k)
    return TaskMetrics(
        task=task,
        n=int(len(gold)),
        macro_f1=macro,
        weighted_f1=weighted,
        precision=per["precision"].tolist(),
        recall=per["recall"].tolist(),
        f1=per["f1"].tolist(),
        support=per["support"].tolist(),
        confusion=confusion(gold, pred, k).tolist(),
    )


@dataclass
class MetricsReport:
    folds: list[dict[str, TaskMetrics]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def tasks(self) -> list[str]:
        return [t for t in TASKS if any(t in f for f in self.folds)]

    def mean(self, task: str, metric: str = "macro_f1") -> float:
        vals = [getattr(f[task], metric) if metric != "headline" else f[task].headline
                for f in self.folds if task in f]
        return float(np.mean(vals)) if vals else math.nan

    def total_confusion(self, task: str) -> np.ndarray:
        k = N_CLASSES[task]
        total = np.zeros((k, k), dtype=np.int64)
        for f in self.folds:
            if task in f:
                total += np.array(f[task].confusion, dtype=np.int64)
        return total

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "folds": [{t: m.to_dict() for t, m in f.items()} for f in self.folds],
            "mean": {
                t: {
                    "macro_f1": self.mean(t, "macro_f1"),
                    "weighted_f1": self.mean(t, "weighted_f1"),
                    "headline_f1": self.mean(t, "headline"),
                    "headline_metric": HEADLINE[t],
                    "confusion_total": self.total_confusion(t).tolist(),
                }
                for t in self.tasks
            },
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def to_text(self) -> str:
        head = f"{'task':<5} {'fold':>5} {'n':>6} {'macro_f1':>9} {'weighted_f1':>12}"
        lines = [head, "-" * len(head)]
        for t in self.tasks:
            for i, f in enumerate(self.folds):
                if t in f:
                    m = f[t]
                    lines.append(f"{t:<5} {i:>5} {m.n:>6} {m.macro_f1:>9.4f} {m.weighted_f1:>12.4f}")
            lines.append(f"{t:<5} {'mean':>5} {'':>6} {self.mean(t):>9.4f} "
                         f"{self.mean(t, 'weighted_f1'):>12.4f}")
        return "\n".join(lines) + "\n"

    def write_confusion_csv(self, directory) -> list[Path]:
        """One CSV per task: counts and row percentages of the summed matrix."""
        directory = Path(directory)
        paths = []
        for t in self.tasks:
            cm = self.total_confusion(t)
            support = cm.sum(axis=1, keepdims=True)
            pct = np.divide(100.0 * cm, support, out=np.zeros(cm.shape), where=support > 0)
            path = directory / f"confusion_{t}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["gold", "pred", "count", "row_percent"])
                names = CLASS_NAMES[t]
                for i in range(cm.shape[0]):
                    for j in range(cm.shape[1]):
                        w.writerow([names[i], names[j], int(cm[i, j]), f"{pct[i, j]:.6f}"])
            paths.append(path)
        return paths


def _fold_metrics(corpus, test_idx, predictions: dict) -> dict[str, TaskMetrics]:
    out = {}
    for t, pred in predictions.items():
        gold = corpus.labels(t)[test_idx]
        seen = gold >= 0
        if seen.any():
            out[t] = score_task(t, gold[seen], pred[test_idx][seen])
    return out


def cross_validate(corpus: LabeledCorpus, recipe: GraphRecipe, config: mtl.TrainConfig,
                   plan: FoldPlan, folds=None, graph=None, vocab=None):
    """Transductive k-fold evaluation of the multi-task GCN.

    The graph covers every sentence; each fold trains on its train labels,
    early-stops on its validation labels and is scored on its test labels.
    Returns ``(report, train_results)``.
    """
    if graph is None:
        graph, vocab = recipe.build(corpus)
    readout = mtl.sentence_readout(graph, corpus, vocab, config.readout)
    folds = range(plan.k) if folds is None else folds
    report = MetricsReport(meta={"k": plan.k, "seed": plan.seed, "graph": graph.kind,
                                 "lambda": config.lam, "tasks": list(config.tasks)})
    results = []
    for i in folds:
        split = plan.split(i)
        res = mtl.train(graph, corpus, split, config, readout)
        preds = mtl.predict(graph, res.params, readout)
        report.folds.append(_fold_metrics(corpus, split.test, preds))
        results.append(res)
    return report, results


# ---------------------------------------------------------------------------
# standalone classifier for exported / baseline embeddings
# ---------------------------------------------------------------------------


class LogisticClassifier:
    """Multinomial logistic regression with an L2 penalty, fitted by L-BFGS."""

    def __init__(self, l2: float = 1e-3, max_iter: int = 500):
        self.l2 = l2
        self.max_iter = max_iter
        self.coef_ = None

    def fit(self, x: np.ndarray, y: np.ndarray, n_classes: int) -> "LogisticClassifier":
        n, d = x.shape
        xb = np.hstack([x, np.ones((n, 1))])
        onehot = np.eye(n_classes)[y]

        def objective(flat):
            w = flat.reshape(d + 1, n_classes)
            logits = xb @ w
            loss = -np.sum(onehot * log_softmax(logits, axis=1)) / n
            grad = xb.T @ (softmax(logits, axis=1) - onehot) / n
            loss += 0.5 * self.l2 * np.sum(w[:-1] ** 2)
            grad[:-1] += self.l2 * w[:-1]
            return loss, grad.ravel()

        res = minimize(objective, np.zeros((d + 1) * n_classes), jac=True,
                       method="L-BFGS-B", options={"maxiter": self.max_iter})
        self.coef_ = res.x.reshape(d + 1, n_classes)
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (np.hstack([x, np.ones((x.shape[0], 1))]) @ self.coef_).argmax(axis=1)


def evaluate_embeddings(corpus: LabeledCorpus, sentence_vectors: np.ndarray,
                        plan: FoldPlan, tasks=TASKS, folds=None, l2: float = 1e-3) -> MetricsReport:
    """k-fold logistic-regression scores of fixed sentence vectors."""
    if sentence_vectors.shape[0] != len(corpus):
        raise ValueError("one vector per sentence required")
    report = MetricsReport(meta={"k": plan.k, "seed": plan.seed, "classifier": "logistic"})
    for i in range(plan.k) if folds is None else folds:
        split = plan.split(i)
        fit_idx = np.concatenate([split.train, split.val])
        preds = {}
        for t in tasks:
            y = corpus.labels(t)
            ok = fit_idx[y[fit_idx] >= 0]
            if ok.size == 0:
                continue
            clf = LogisticClassifier(l2).fit(sentence_vectors[ok], y[ok], N_CLASSES[t])
            preds[t] = clf.predict(sentence_vectors)
        report.folds.append(_fold_metrics(corpus, split.test, preds))
    return report


# ---------------------------------------------------------------------------
# nearest neighbors
# ---------------------------------------------------------------------------


class UnknownQueryError(KeyError):
    def __str__(self):
        return self.args[0]


def _edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def nearest_neighbors(table: EmbeddingTable, query: str, k: int = 8) -> list[tuple[str, float]]:
    """Top-``k`` keys by cosine similarity to ``query``, excluding itself."""
    if k < 1:
        raise ValueError("k must be >= 1")
    lookup = table.key_map
    if query not in lookup:
        close = sorted(table.keys, key=lambda key: (_edit_distance(query, key), key))[:5]
        raise UnknownQueryError(f"unknown query {query!r}; closest keys: {', '.join(close)}")
    q = lookup[query]
    vecs = table.vectors
    norms = np.linalg.norm(vecs, axis=1)
    sims = np.divide(vecs @ vecs[q], norms * norms[q],
                     out=np.zeros(len(vecs)), where=norms * norms[q] > 0)
    idx = np.arange(len(vecs))
    order = np.lexsort((idx, -sims))
    order = order[order != q][:k]
    return [(table.keys[i], float(sims[i])) for i in order]
