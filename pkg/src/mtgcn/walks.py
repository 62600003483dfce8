"""DeepWalk / Node2Vec walk corpora and skip-gram negative-sampling embeddings.

Defaults for walk counts, lengths, windows and negatives are the usual
word2vec / node2vec values, not tuned ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mtgcn import _kernels
from mtgcn.graph import EmbeddingTable, SparseMatrix, TextGraph

__all__ = [
    "WalkConfig",
    "WalkCorpus",
    "transition_probs",
    "generate_walks",
    "sgns_train",
]


@dataclass(frozen=True)
class WalkConfig:
    walks_per_node: int = 10
    walk_length: int = 40
    p: float = 1.0
    q: float = 1.0
    sg_window: int = 5
    dim: int = 200
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    min_lr: float = 1e-4
    seed: int = 0
    chunk_walks: int = 2048

    def __post_init__(self):
        if self.p <= 0 or self.q <= 0:
            raise ValueError("p and q must be positive")
        if self.walk_length < 2:
            raise ValueError("walk_length must be >= 2")
        if self.walks_per_node < 1 or self.sg_window < 1 or self.dim < 1:
            raise ValueError("walks_per_node, sg_window and dim must be >= 1")


@dataclass(frozen=True)
class WalkCorpus:
    walks: np.ndarray  # (n_walks, walk_length) node ids
    n_nodes: int
    source: str = ""

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            for w in self.walks:
                fh.write(" ".join(map(str, w.tolist())) + "\n")


def _csr(graph) -> SparseMatrix:
    if isinstance(graph, TextGraph):
        return graph.adjacency
    if isinstance(graph, SparseMatrix):
        return graph
    return SparseMatrix.from_scipy(graph, symmetric=True)


def transition_probs(graph, prev: int, cur: int, p: float = 1.0, q: float = 1.0):
    """Exact next-step distribution out of ``cur`` (``prev=-1``: first step).

    Returns ``(neighbors, probabilities)`` using the same weighting the
    sampler uses.
    """
    a = _csr(graph).csr
    w = _kernels.step_weights(a.indptr, a.indices, a.data, prev, cur, float(p), float(q))
    return a.indices[a.indptr[cur]:a.indptr[cur + 1]].copy(), w / w.sum()


def _node_uniforms(seed: int, node: int, walks: int, steps: int) -> np.ndarray:
    return np.random.default_rng([seed, node]).random((walks, steps))


def generate_walks(graph, config: WalkConfig, use_numba=None) -> WalkCorpus:
    """``walks_per_node`` walks from every node, ordered round-major.

    Each start node draws its randomness from its own stream seeded by
    ``(seed, node)``, so results do not depend on chunking or ordering.
    """
    a = _csr(graph).csr
    n = a.shape[0]
    isolated = np.flatnonzero(np.diff(a.indptr) == 0)
    if isolated.size:
        raise ValueError(f"node {int(isolated[0])} has no edges")
    steps = config.walk_length - 1
    r = config.walks_per_node
    out = np.empty((r, n, config.walk_length), dtype=np.int64)
    chunk = max(1, config.chunk_walks // r)
    for lo in range(0, n, chunk):
        nodes = np.arange(lo, min(n, lo + chunk))
        u = np.stack([_node_uniforms(config.seed, int(v), r, steps) for v in nodes], axis=1)
        starts = np.broadcast_to(nodes, (r, nodes.size)).reshape(-1)
        walks = _kernels.node2vec_walks(a.indptr, a.indices, a.data, starts,
                                        u.reshape(-1, steps), config.walk_length,
                                        config.p, config.q, use_numba=use_numba)
        out[:, lo:lo + nodes.size] = walks.reshape(r, nodes.size, -1)
    source = graph.kind if isinstance(graph, TextGraph) else ""
    return WalkCorpus(out.reshape(r * n, config.walk_length), n, source)


def _draw_negatives(rng, cdf, shape, n):
    return np.searchsorted(cdf, rng.random(shape), side="right").clip(max=n - 1)


def sgns_train(corpus: WalkCorpus, config: WalkConfig, use_numba=None, keys=None,
               eval_walks: int = 512):
    """Skip-gram with negative sampling over walk windows.

    Learning rate decays linearly from ``lr`` to ``min_lr`` over all center
    positions of all epochs. Negatives come from the unigram^0.75 distribution.
    Returns ``(EmbeddingTable, per_epoch_loss)``. The per-epoch loss is the
    mean objective after the epoch on a fixed sample of ``eval_walks`` walks
    with fixed negatives; the running loss seen during updates is biased low
    while the learning rate is large.
    """
    walks = np.ascontiguousarray(corpus.walks, dtype=np.int64)
    if walks.size == 0:
        raise ValueError("empty walk corpus")
    n, dim = corpus.n_nodes, config.dim
    eval_ss = np.random.SeedSequence(config.seed).spawn(1)[0]
    rng = np.random.default_rng(config.seed)
    syn0 = (rng.random((n, dim)) - 0.5) / dim
    syn1 = np.zeros((n, dim))

    freq = np.bincount(walks.ravel(), minlength=n).astype(np.float64) ** 0.75
    cdf = np.cumsum(freq / freq.sum())
    cdf[-1] = 1.0

    n_walks, length = walks.shape
    slots = 2 * config.sg_window
    eval_rng = np.random.default_rng(eval_ss)
    sample = walks[np.sort(eval_rng.permutation(n_walks)[:eval_walks])]
    sample_neg = _draw_negatives(eval_rng, cdf, (sample.shape[0], length, slots,
                                                 config.negatives), n)

    total_work = float(max(1, config.epochs * walks.size))
    done = 0
    losses = []
    for _ in range(config.epochs):
        for lo in range(0, n_walks, config.chunk_walks):
            chunk = walks[lo:lo + config.chunk_walks]
            negatives = _draw_negatives(rng, cdf, (chunk.shape[0], length, slots,
                                                   config.negatives), n)
            _, _, done = _kernels.sgns_chunk(chunk, negatives, syn0, syn1,
                                             config.sg_window, config.lr, config.min_lr,
                                             done, total_work, use_numba=use_numba)
        loss, pairs = _kernels.sgns_loss(sample, sample_neg, syn0, syn1, config.sg_window,
                                         use_numba=use_numba)
        losses.append(loss / max(pairs, 1))
    if keys is None:
        keys = tuple(str(i) for i in range(n))
    return EmbeddingTable(syn0, tuple(keys)), losses
