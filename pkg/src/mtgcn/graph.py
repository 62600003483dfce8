"""Word (PMI), sentence (cosine) and word+sentence (PMI + TF-IDF) graphs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from mtgcn import _kernels
from mtgcn.corpus import LabeledCorpus, Vocabulary

log = logging.getLogger(__name__)

__all__ = [
    "GraphError",
    "SparseMatrix",
    "CooccurrenceTable",
    "TextGraph",
    "EmbeddingTable",
    "count_cooccurrence",
    "pmi_edges",
    "tfidf_edges",
    "build_word_graph",
    "build_sentence_graph",
    "build_ws_graph",
    "normalize_adjacency",
    "write_graph",
    "read_graph",
    "GraphRecipe",
]

KINDS = ("W", "S", "WS")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class SparseMatrix:
    """Canonical CSR matrix: sorted, duplicate-free, explicit zeros removed."""

    csr: sp.csr_matrix
    symmetric: bool = False

    @classmethod
    def from_coo(cls, rows, cols, vals, shape, symmetric=False) -> "SparseMatrix":
        m = sp.coo_matrix(
            (np.asarray(vals, dtype=np.float64), (np.asarray(rows), np.asarray(cols))),
            shape=shape,
        ).tocsr()
        return cls.from_scipy(m, symmetric)

    @classmethod
    def from_scipy(cls, m, symmetric=False) -> "SparseMatrix":
        m = sp.csr_matrix(m, dtype=np.float64, copy=True)
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        m.indptr = m.indptr.astype(np.int64)
        m.indices = m.indices.astype(np.int64)
        if not np.all(np.isfinite(m.data)):
            raise GraphError("non-finite edge weight")
        return cls(m, symmetric)

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.shape

    @property
    def nnz(self) -> int:
        return self.csr.nnz

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()

    def triples(self):
        coo = self.csr.tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data


@dataclass(frozen=True)
class CooccurrenceTable:
    window_size: int
    total_windows: int
    word_window_counts: np.ndarray
    pair_rows: np.ndarray
    pair_cols: np.ndarray
    pair_counts: np.ndarray

    def pair_dict(self) -> dict[tuple[int, int], int]:
        return {
            (int(i), int(j)): int(c)
            for i, j, c in zip(self.pair_rows, self.pair_cols, self.pair_counts)
        }


@dataclass(frozen=True)
class EmbeddingTable:
    vectors: np.ndarray
    keys: tuple[str, ...]

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[1] == 0:
            raise ValueError("embedding vectors must be a 2-D array with dim > 0")
        if len(self.keys) != self.vectors.shape[0]:
            raise ValueError("one key per row required")
        if len(set(self.keys)) != len(self.keys):
            raise ValueError("duplicate embedding keys")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def key_map(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.keys)}

    def write_word2vec(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{len(self.keys)} {self.dim}\n")
            for key, row in zip(self.keys, self.vectors):
                fh.write(key + " " + " ".join(f"{v:.17g}" for v in row) + "\n")

    @classmethod
    def read_word2vec(cls, path: str | Path) -> "EmbeddingTable":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise ValueError(f"{path}: expected '<count> <dim>' header")
            count, dim = int(header[0]), int(header[1])
            keys, rows = [], []
            for lineno, line in enumerate(fh, start=2):
                parts = line.rstrip("\n").split(" ")
                if len(parts) != dim + 1:
                    raise ValueError(f"{path}: line {lineno} has {len(parts) - 1} values, expected {dim}")
                keys.append(parts[0])
                rows.append([float(x) for x in parts[1:]])
        if len(keys) != count:
            raise ValueError(f"{path}: header says {count} rows, found {len(keys)}")
        return cls(np.array(rows, dtype=np.float64).reshape(count, dim), tuple(keys))


@dataclass(frozen=True)
class TextGraph:
    """Adjacency plus its propagation matrix.

    Word nodes come first (``[0, n_words)``), sentence nodes after them.
    """

    kind: str
    adjacency: SparseMatrix
    normalized: SparseMatrix
    n_words: int
    n_sentences: int

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def word_nodes(self) -> np.ndarray:
        return np.arange(self.n_words, dtype=np.int64)

    @property
    def sentence_nodes(self) -> np.ndarray:
        return self.n_words + np.arange(self.n_sentences, dtype=np.int64)


# ---------------------------------------------------------------------------
# edge weights
# ---------------------------------------------------------------------------


def count_cooccurrence(corpus: LabeledCorpus, vocab: Vocabulary, window_size: int = 3,
                       use_numba=None) -> CooccurrenceTable:
    """Sliding-window containment counts; windows never cross sentences."""
    if window_size < 1:
        raise GraphError("window_size must be >= 1")
    tokens, offsets = vocab.flat(corpus)
    total, words, rows, cols, counts = _kernels.window_cooccurrence(
        tokens, offsets, len(vocab), window_size, use_numba=use_numba
    )
    return CooccurrenceTable(window_size, total, words, rows, cols, counts)


def pmi_edges(table: CooccurrenceTable) -> SparseMatrix:
    """Positive-PMI word-word edges, both orientations."""
    if table.total_windows < 1:
        raise GraphError("no sliding windows")
    n = table.word_window_counts.size
    wi = table.word_window_counts[table.pair_rows].astype(np.float64)
    wj = table.word_window_counts[table.pair_cols].astype(np.float64)
    pmi = np.log(table.pair_counts * float(table.total_windows) / (wi * wj))
    keep = pmi > 0
    r, c, w = table.pair_rows[keep], table.pair_cols[keep], pmi[keep]
    return SparseMatrix.from_coo(
        np.concatenate([r, c]), np.concatenate([c, r]), np.concatenate([w, w]),
        (n, n), symmetric=True,
    )


def tfidf_edges(corpus: LabeledCorpus, vocab: Vocabulary) -> SparseMatrix:
    """Word x sentence matrix of raw term count times ln(M / df)."""
    tokens, offsets = vocab.flat(corpus)
    m = len(corpus)
    sent = np.repeat(np.arange(m), np.diff(offsets))
    tf = sp.csr_matrix(
        (np.ones(tokens.size), (tokens, sent)), shape=(len(vocab), m)
    )
    tf.sum_duplicates()
    df = np.diff(tf.indptr)  # rows are words; one stored entry per containing sentence
    idf = np.zeros(len(vocab))
    present = df > 0
    idf[present] = np.log(m / df[present])
    weighted = sp.diags(idf) @ tf
    return SparseMatrix.from_scipy(weighted, symmetric=False)


# ---------------------------------------------------------------------------
# graphs
# ---------------------------------------------------------------------------


def _with_unit_diagonal(m: sp.spmatrix) -> sp.csr_matrix:
    m = sp.csr_matrix(m, dtype=np.float64)
    m = m - sp.diags(m.diagonal()) + sp.identity(m.shape[0], format="csr")
    return sp.csr_matrix(m)


def _finish(kind, raw: sp.spmatrix, n_words, n_sentences, normalize) -> TextGraph:
    adjacency = SparseMatrix.from_scipy(_with_unit_diagonal(raw), symmetric=True)
    return TextGraph(
        kind=kind,
        adjacency=adjacency,
        normalized=normalize_adjacency(adjacency, normalize),
        n_words=n_words,
        n_sentences=n_sentences,
    )


def build_word_graph(corpus, vocab, window_size=3, normalize="sym_renorm",
                     use_numba=None) -> TextGraph:
    pmi = pmi_edges(count_cooccurrence(corpus, vocab, window_size, use_numba))
    return _finish("W", pmi.csr, len(vocab), 0, normalize)


def build_ws_graph(corpus, vocab, window_size=3, normalize="sym_renorm",
                   use_numba=None) -> TextGraph:
    """Block matrix [[PMI, TF-IDF], [TF-IDF^T, 0]] with a unit diagonal."""
    pmi = pmi_edges(count_cooccurrence(corpus, vocab, window_size, use_numba)).csr
    tfidf = tfidf_edges(corpus, vocab).csr
    m = len(corpus)
    raw = sp.bmat([[pmi, tfidf], [tfidf.T, sp.csr_matrix((m, m))]], format="csr")
    return _finish("WS", raw, len(vocab), m, normalize)


def sentence_vectors(corpus: LabeledCorpus, word_vectors: EmbeddingTable) -> np.ndarray:
    """Mean of token vectors per sentence; tokens without a vector count as zero."""
    lookup = word_vectors.key_map
    out = np.zeros((len(corpus), word_vectors.dim))
    for s, rec in enumerate(corpus):
        rows = [lookup.get(t, -1) for t in rec.tokens]
        hit = [r for r in rows if r >= 0]
        if hit:
            out[s] = word_vectors.vectors[hit].sum(axis=0) / len(rows)
    return out


def top_k_cosine(vectors: np.ndarray, k: int, block: int = 1024):
    """Each row's ``k`` most cosine-similar other rows with similarity > 0.

    Ties go to the lower index. Returns (rows, cols, sims).
    """
    norms = np.linalg.norm(vectors, axis=1)
    live = norms > 0
    unit = np.zeros_like(vectors)
    unit[live] = vectors[live] / norms[live, None]
    m = vectors.shape[0]
    rows, cols, sims = [], [], []
    for lo in range(0, m, block):
        hi = min(m, lo + block)
        sim = unit[lo:hi] @ unit.T
        sim[np.arange(hi - lo), np.arange(lo, hi)] = -np.inf
        order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
        picked = np.take_along_axis(sim, order, axis=1)
        r, c = np.nonzero(picked > 0)
        rows.append(r + lo)
        cols.append(order[r, c])
        sims.append(picked[r, c])
    if not rows:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(sims)


def build_sentence_graph(corpus: LabeledCorpus, word_vectors: EmbeddingTable,
                         k_neighbors: int = 10, normalize="sym_renorm") -> TextGraph:
    """Top-k cosine neighbors of averaged word vectors, symmetrized by union."""
    if k_neighbors < 1:
        raise GraphError("k_neighbors must be >= 1")
    vecs = sentence_vectors(corpus, word_vectors)
    n_zero = int((np.linalg.norm(vecs, axis=1) == 0).sum())
    if n_zero:
        log.warning("%d sentence(s) have a zero vector and keep only a self-loop", n_zero)
    m = len(corpus)
    r, c, w = top_k_cosine(vecs, k_neighbors)
    half = sp.csr_matrix((w, (r, c)), shape=(m, m))
    # union: an edge kept by either endpoint; weights are symmetric already
    raw = half.maximum(half.T)
    return _finish("S", raw, 0, m, normalize)


def normalize_adjacency(a: SparseMatrix, mode: str = "sym_renorm") -> SparseMatrix:
    """``D^-1/2 A D^-1/2`` (``sym_renorm``) or ``A`` itself (``raw``)."""
    if mode == "raw":
        return a
    if mode != "sym_renorm":
        raise GraphError(f"unknown normalization mode {mode!r}")
    deg = np.asarray(a.csr.sum(axis=1)).ravel()
    bad = np.flatnonzero(deg <= 0)
    if bad.size:
        raise GraphError(f"node {int(bad[0])} has zero degree")
    scale = 1.0 / np.sqrt(deg)
    coo = a.csr.tocoo()
    # one rounding for the scale product keeps (i, j) and (j, i) bit-equal
    vals = coo.data * (scale[coo.row] * scale[coo.col])
    return SparseMatrix.from_coo(coo.row, coo.col, vals, a.shape, symmetric=a.symmetric)


# ---------------------------------------------------------------------------
# tg1 file format
# ---------------------------------------------------------------------------


def write_graph(graph: TextGraph, path: str | Path) -> None:
    """Write the raw adjacency as a ``tg1`` text file."""
    a = graph.adjacency
    r, c, w = a.triples()
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"tg1 {graph.kind} {a.shape[0]} {a.shape[1]} {a.nnz} {int(a.symmetric)}\n")
        for i, j, v in zip(r.tolist(), c.tolist(), w.tolist()):
            fh.write(f"{i} {j} {v:.17g}\n")


def read_graph(path: str | Path, normalize: str = "sym_renorm",
               n_sentences: int | None = None) -> TextGraph:
    """Load a ``tg1`` file. WS graphs need ``n_sentences`` to split the node range."""
    path = Path(path)
    with open(path, encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 6 or header[0] != "tg1" or header[1] not in KINDS:
            raise GraphError(f"{path}: not a tg1 graph file")
        kind = header[1]
        n_rows, n_cols, nnz, symmetric = map(int, header[2:])
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2) if nnz else np.empty((0, 3))
    if data.shape[0] != nnz:
        raise GraphError(f"{path}: header says {nnz} entries, found {data.shape[0]}")
    adjacency = SparseMatrix.from_coo(
        data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, 2],
        (n_rows, n_cols), symmetric=bool(symmetric),
    )
    if kind == "W":
        n_words, n_sentences = n_rows, 0
    elif kind == "S":
        n_words, n_sentences = 0, n_rows
    else:
        if n_sentences is None or not 0 <= n_sentences <= n_rows:
            raise GraphError(f"{path}: WS graph needs the corpus sentence count")
        n_words = n_rows - n_sentences
    return TextGraph(kind, adjacency, normalize_adjacency(adjacency, normalize),
                     n_words, n_sentences)


@dataclass(frozen=True)
class GraphRecipe:
    """Everything needed to rebuild a graph from a corpus."""

    kind: str = "WS"
    window_size: int = 3
    min_count: int = 1
    k_neighbors: int = 10
    normalize: str = "sym_renorm"
    word_vectors: EmbeddingTable | None = None

    def build(self, corpus: LabeledCorpus):
        """Return ``(graph, vocabulary)``."""
        from mtgcn.corpus import build_vocabulary

        vocab = build_vocabulary(corpus, self.min_count)
        kind = self.kind.upper()
        if kind == "W":
            return build_word_graph(corpus, vocab, self.window_size, self.normalize), vocab
        if kind == "WS":
            return build_ws_graph(corpus, vocab, self.window_size, self.normalize), vocab
        if kind == "S":
            if self.word_vectors is None:
                raise GraphError("sentence graph needs word vectors")
            graph = build_sentence_graph(corpus, self.word_vectors, self.k_neighbors,
                                         self.normalize)
            return graph, vocab
        raise GraphError(f"unknown graph kind {self.kind!r}")
