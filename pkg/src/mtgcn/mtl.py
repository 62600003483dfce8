"""Multi-task heads, the joint objective and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from mtgcn import gcn
from mtgcn.corpus import N_CLASSES, TASKS, LabeledCorpus, Split, Vocabulary
from mtgcn.graph import TextGraph
from mtgcn.metrics import f1_scores

log = logging.getLogger(__name__)

__all__ = [
    "TaskHead",
    "TrainConfig",
    "TrainHistory",
    "TrainResult",
    "head_forward",
    "multitask_loss",
    "joint_loss",
    "joint_objective",
    "sentence_readout",
    "embed_sentences_from_words",
    "train",
    "predict",
    "sweep_lambda",
]

HISTORY_COLUMNS = ("epoch", "l_mse", "l_cla", "l_total", "val_total") + tuple(
    f"f1_{t}" for t in TASKS
)


@dataclass
class TaskHead:
    task: str
    weight: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.weight.shape[1] < 2:
            raise ValueError("head weight must be K x C with C >= 2")


def head_forward(z_sentences: np.ndarray, head: TaskHead | np.ndarray):
    """Linear scores and per-class sigmoid probabilities."""
    w = head.weight if isinstance(head, TaskHead) else head
    if z_sentences.shape[1] != w.shape[0]:
        raise ValueError(f"shape mismatch: Z {z_sentences.shape} vs head {w.shape}")
    scores = z_sentences @ w
    return scores, expit(scores)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _multitask(scores: dict, labels: dict, task_weights: dict | None = None):
    """Masked sigmoid cross-entropy averaged over active tasks, with d/d scores."""
    active = [t for t in scores if (labels[t] >= 0).any()]
    if not active:
        raise ValueError("no task has any labeled sentence")
    total = 0.0
    grads = {}
    for t in scores:
        s = scores[t]
        y = labels[t]
        seen = y >= 0
        g = np.zeros_like(s)
        if seen.any():
            w = 1.0 if task_weights is None else task_weights.get(t, 1.0)
            onehot = np.zeros((int(seen.sum()), s.shape[1]))
            onehot[np.arange(onehot.shape[0]), y[seen]] = 1.0
            ss = s[seen]
            per_sentence = np.sum(_softplus(ss) - onehot * ss, axis=1)
            total += w * float(per_sentence.mean())
            g[seen] = w * (expit(ss) - onehot) / onehot.shape[0]
        grads[t] = g
    n = len(active)
    return total / n, {t: g / n for t, g in grads.items()}


def multitask_loss(scores: dict, labels: dict, task_weights: dict | None = None) -> float:
    """Per task, mean over labeled sentences of the summed per-class sigmoid
    cross-entropy; then the mean over tasks that have labels. ``-1`` = absent."""
    return _multitask(scores, labels, task_weights)[0]


def joint_loss(l_mse: float, l_cla: float, lam: float) -> float:
    return l_mse + lam * l_cla


# ---------------------------------------------------------------------------
# sentence readout
# ---------------------------------------------------------------------------


def _avg_matrix(encoded: list[np.ndarray], n_words: int, n_nodes: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    empty = 0
    for s, toks in enumerate(encoded):
        if toks.size == 0:
            empty += 1
            continue
        rows.append(np.full(toks.size, s))
        cols.append(toks)
        vals.append(np.full(toks.size, 1.0 / toks.size))
    if empty:
        log.warning("%d sentence(s) have no in-vocabulary token; using zero vectors", empty)
    if not rows:
        return sp.csr_matrix((len(encoded), n_nodes))
    m = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(encoded), n_nodes),
    )
    m.sum_duplicates()
    return m


def sentence_readout(graph: TextGraph, corpus: LabeledCorpus | None = None,
                     vocab: Vocabulary | None = None, mode: str = "auto") -> sp.csr_matrix:
    """Sparse M x N map from node embeddings to sentence representations.

    ``node`` picks each sentence's own node (S and WS graphs); ``avg`` averages
    the sentence's word-node rows (W and WS graphs). ``auto`` = node when the
    graph has sentence nodes, else avg.
    """
    if mode == "auto":
        mode = "node" if graph.n_sentences else "avg"
    if mode == "node":
        if not graph.n_sentences:
            raise ValueError(f"{graph.kind} graph has no sentence nodes")
        m = graph.n_sentences
        return sp.csr_matrix(
            (np.ones(m), (np.arange(m), graph.sentence_nodes)), shape=(m, graph.n_nodes)
        )
    if mode == "avg":
        if not graph.n_words or corpus is None or vocab is None:
            raise ValueError("avg readout needs word nodes, the corpus and its vocabulary")
        if len(vocab) != graph.n_words:
            raise ValueError("vocabulary does not match the graph's word nodes")
        return _avg_matrix(vocab.encode(corpus), graph.n_words, graph.n_nodes)
    raise ValueError(f"unknown readout {mode!r}")


def embed_sentences_from_words(z_words: np.ndarray, corpus: LabeledCorpus,
                               vocab: Vocabulary) -> np.ndarray:
    """Mean of each sentence's token embeddings (zero vector if none)."""
    if z_words.shape[0] != len(vocab):
        raise ValueError("word embeddings must cover the vocabulary")
    r = _avg_matrix(vocab.encode(corpus), len(vocab), len(vocab))
    return np.asarray(r @ z_words)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.2
    max_epochs: int = 100
    patience: int = 10
    dropout: float = 0.5
    dim: int = 200
    lr: float = 0.001
    weight_decay: float = 5e-4
    seed: int = 0
    decoder: str = "gcn"
    tasks: tuple[str, ...] = TASKS
    task_weights: dict | None = None
    mse_mode: str = "auto"
    dense_max_nodes: int = 20000
    readout: str = "auto"

    def __post_init__(self):
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and >= 0")
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown task(s): {sorted(unknown)}")
        if self.mse_mode not in ("auto", "dense", "sampled"):
            raise ValueError(f"unknown mse_mode {self.mse_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow([_fmt(r.get(c)) for c in HISTORY_COLUMNS])


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


@dataclass
class TrainResult:
    params: gcn.GcnParams
    history: TrainHistory
    config: TrainConfig
    adam: gcn.AdamState
    final_l_mse: float
    final_l_cla: float
    rng_state: dict = field(default_factory=dict)


def _masked_labels(corpus: LabeledCorpus, tasks, keep: np.ndarray) -> dict[str, np.ndarray]:
    out = {}
    for t in tasks:
        full = corpus.labels(t)
        y = np.full(full.size, -1, dtype=np.int64)
        y[keep] = full[keep]
        out[t] = y
    return out


def _scores(zs, heads):
    return {t: zs @ w for t, w in heads.items()}


def _task_f1(scores: dict, labels: dict) -> dict[str, float]:
    out = {}
    for t, s in scores.items():
        seen = labels[t] >= 0
        out[t] = (
            f1_scores(labels[t][seen], s[seen].argmax(axis=1), N_CLASSES[t])[0]
            if seen.any() else math.nan
        )
    return out


def _use_dense(config: TrainConfig, n: int) -> bool:
    if config.mse_mode == "auto":
        return n <= config.dense_max_nodes
    return config.mse_mode == "dense"


@dataclass
class Objective:
    l_mse: float
    l_cla: float  # NaN when no labels were supplied
    l_total: float  # l_mse + lam * l_cla when heads learn, else l_mse
    penalty: float
    grads: dict[str, np.ndarray]

    @property
    def value(self) -> float:
        """The differentiated quantity: ``l_total`` plus the weight penalty."""
        return self.l_total + self.penalty


def joint_objective(a_hat, target, params: gcn.GcnParams, decoder: str, readout, labels,
                    lam: float, weight_decay: float = 0.0, dropout_p: float = 0.0,
                    rng=None, cells=None, task_weights=None) -> Objective:
    """One forward/backward pass of ``mse + lam * cla + wd/2 * |W|^2``.

    Heads get gradients (and feed Z) only when ``lam > 0``; at ``lam == 0``
    the classification loss is still reported but is inert.
    """
    fwd = gcn.forward(a_hat, target, params, decoder, dropout_p, rng, cells)
    l_cla = math.nan
    dz_extra = None
    grads = {}
    learn = False
    if readout is not None and params.heads:
        zs = readout @ fwd.z
        l_cla, d_scores = _multitask(_scores(zs, params.heads), labels, task_weights)
        learn = lam > 0
        if learn:
            d_zs = np.zeros_like(zs)
            for t, g in d_scores.items():
                grads[f"head_{t}"] = lam * (zs.T @ g)
                d_zs += lam * (g @ params.heads[t].T)
            dz_extra = np.asarray(readout.T @ d_zs)
    g_w0, g_w1 = gcn.backward(a_hat, fwd, params, dz_extra, weight_decay=weight_decay)
    grads["w0"] = g_w0
    if g_w1 is not None:
        grads["w1"] = g_w1
    l_total = joint_loss(fwd.mse, l_cla, lam) if learn else fwd.mse
    return Objective(fwd.mse, l_cla, l_total, gcn.weight_penalty(params, weight_decay), grads)


def train(graph: TextGraph, corpus: LabeledCorpus, split: Split, config: TrainConfig,
          readout: sp.csr_matrix | None = None, vocab: Vocabulary | None = None,
          on_epoch=None) -> TrainResult:
    """Full-batch joint training with early stopping on the validation total.

    Reconstruction targets the normalized adjacency. An empty ``config.tasks``
    trains a plain graph autoencoder. ``on_epoch(epoch, params)`` is called
    after every update with the live parameters (do not mutate them).
    """
    a_hat = graph.normalized.csr
    target = graph.normalized
    n = graph.n_nodes
    if graph.n_sentences and graph.n_sentences != len(corpus):
        raise ValueError("graph sentence nodes do not match the corpus")
    tasks = tuple(config.tasks)
    if tasks and readout is None:
        readout = sentence_readout(graph, corpus, vocab, config.readout)

    init_ss, head_ss, drop_ss, cell_ss = np.random.SeedSequence(config.seed).spawn(4)
    params = gcn.init_params(n, config.dim, np.random.default_rng(init_ss), config.decoder)
    head_rng = np.random.default_rng(head_ss)
    for t in tasks:
        params.heads[t] = gcn.glorot(head_rng, config.dim, N_CLASSES[t])
    drop_rng = np.random.default_rng(drop_ss)
    cell_rng = np.random.default_rng(cell_ss)

    train_labels = _masked_labels(corpus, tasks, split.train)
    val_labels = _masked_labels(corpus, tasks, split.val)
    train_has = tasks and any((y >= 0).any() for y in train_labels.values())
    val_has = tasks and any((y >= 0).any() for y in val_labels.values())
    if tasks and config.lam > 0 and not train_has:
        raise ValueError("no training labels for the selected tasks")
    learn_heads = bool(train_has) and config.lam > 0

    dense = _use_dense(config, n)
    eval_cells = None if dense else gcn.sample_cells(target, cell_rng)

    adam = gcn.AdamState(lr=config.lr)
    arrays = params.arrays()
    history = TrainHistory()
    best_val = math.inf
    best_params = params.copy()
    since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        cells = None if dense else gcn.sample_cells(target, cell_rng)
        obj = joint_objective(a_hat, target, params, config.decoder,
                              readout if train_has else None, train_labels, config.lam,
                              config.weight_decay, config.dropout, drop_rng, cells,
                              config.task_weights)
        l_mse, l_cla, l_total = obj.l_mse, obj.l_cla, obj.l_total
        if not math.isfinite(l_total):
            raise gcn.DivergenceError(f"divergence detected at epoch {epoch}")
        grads = obj.grads
        try:
            gcn.adam_step(arrays, grads, adam)
        except gcn.DivergenceError as exc:
            raise gcn.DivergenceError(f"{exc} at epoch {epoch}") from None
        if on_epoch is not None:
            on_epoch(epoch, params)

        ev = gcn.forward(a_hat, target, params, config.decoder, 0.0, None, eval_cells)
        val_total = ev.mse
        f1 = {}
        if tasks:
            zs_eval = readout @ ev.z
            scores = _scores(zs_eval, params.heads)
            if val_has and learn_heads:
                val_total += config.lam * _multitask(scores, val_labels, config.task_weights)[0]
            f1 = _task_f1(scores, val_labels) if val_has else {}
        if not math.isfinite(val_total):
            raise gcn.DivergenceError(f"divergence detected at epoch {epoch}")

        rec = {"epoch": epoch, "l_mse": l_mse, "l_cla": l_cla, "l_total": l_total,
               "val_total": val_total}
        rec.update({f"f1_{t}": f1.get(t, math.nan) for t in TASKS})
        history.records.append(rec)

        if val_total < best_val:
            best_val = val_total
            history.best_epoch = epoch
            best_params = params.copy()
            since_best = 0
        else:
            since_best += 1
        history.stopped_epoch = epoch
        if since_best >= config.patience:
            log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
            break

    final_mse, final_cla = evaluate_losses(graph, best_params, config, train_labels,
                                           readout, eval_cells)
    rng_state = {"dropout": drop_rng.bit_generator.state,
                 "cells": cell_rng.bit_generator.state}
    return TrainResult(best_params, history, config, adam, final_mse, final_cla, rng_state)


def evaluate_losses(graph, params, config, labels, readout, cells=None):
    """Dropout-free reconstruction and classification loss of fixed parameters."""
    ev = gcn.forward(graph.normalized.csr, graph.normalized, params, config.decoder,
                     0.0, None, cells)
    l_cla = math.nan
    if params.heads and labels and any((y >= 0).any() for y in labels.values()):
        l_cla = _multitask(_scores(readout @ ev.z, params.heads), labels,
                           config.task_weights)[0]
    return ev.mse, l_cla


def node_embeddings(graph: TextGraph, params: gcn.GcnParams) -> np.ndarray:
    """Evaluation-mode Z (no dropout)."""
    return gcn.encode(graph.normalized.csr, params)[0]


def predict(graph: TextGraph, params: gcn.GcnParams, readout) -> dict[str, np.ndarray]:
    """Argmax class per sentence for each head."""
    zs = readout @ node_embeddings(graph, params)
    return {t: (zs @ w).argmax(axis=1) for t, w in params.heads.items()}


def sweep_lambda(graph, corpus, splits, config: TrainConfig, lambdas, readout=None,
                 vocab=None):
    """Train once per (lambda, split) with the same seed.

    Returns ``(rows, histories)``: one row per (lambda, fold) with the final
    dropout-free train losses and validation F1, and the matching histories.
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise ValueError("empty lambda list")
    if isinstance(splits, Split):
        splits = [splits]
    if config.tasks and readout is None:
        readout = sentence_readout(graph, corpus, vocab, config.readout)
    rows, histories = [], []
    for lam in lambdas:
        for fold, split in enumerate(splits):
            res = train(graph, corpus, split, replace(config, lam=float(lam)), readout)
            best = res.history.records[res.history.best_epoch - 1]
            row = {"lambda": float(lam), "fold": fold, "l_mse": res.final_l_mse,
                   "l_cla": res.final_l_cla}
            row.update({f"f1_{t}": best[f"f1_{t}"] for t in TASKS})
            rows.append(row)
            histories.append(res.history)
    return rows, histories
