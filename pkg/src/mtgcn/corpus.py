"""Labeled corpus ingestion, tokenization, vocabulary and CV folds."""

from __future__ import annotations

import csv
import json
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "TASKS",
    "N_CLASSES",
    "CLASS_NAMES",
    "CorpusError",
    "SentenceRecord",
    "LabeledCorpus",
    "Vocabulary",
    "FoldPlan",
    "load_corpus",
    "corpus_from_texts",
    "tokenize",
    "build_vocabulary",
    "make_folds",
]

TASKS = ("sa", "ei", "hs", "sar")
N_CLASSES = {"sa": 2, "ei": 4, "hs": 2, "sar": 2}
CLASS_NAMES = {
    "sa": ("Negative", "Positive"),
    "ei": ("Fear", "Angry", "Sad", "Happy"),
    "hs": ("No", "Yes"),
    "sar": ("No", "Yes"),
}


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class SentenceRecord:
    id: int
    text: str
    tokens: tuple[str, ...]
    labels: dict[str, int | None] = field(default_factory=dict)

    def label(self, task: str) -> int | None:
        return self.labels.get(task)


@dataclass(frozen=True)
class LabeledCorpus:
    records: tuple[SentenceRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i: int) -> SentenceRecord:
        return self.records[i]

    def labels(self, task: str) -> np.ndarray:
        """Class index per sentence, ``-1`` where the label is absent."""
        return np.array(
            [-1 if r.label(task) is None else r.label(task) for r in self.records],
            dtype=np.int64,
        )

    def label_counts(self) -> dict[str, int]:
        return {t: int((self.labels(t) >= 0).sum()) for t in TASKS}


def tokenize(text: str) -> list[str]:
    """Whitespace tokens of the NFC-normalized text. No case folding."""
    return unicodedata.normalize("NFC", text).split()


def _parse_label(task: str, raw, where: str) -> int | None:
    if raw is None:
        return None
    if isinstance(raw, bool):
        raise CorpusError(f"{where}: unknown {task} label {raw!r}")
    if isinstance(raw, str):
        s = raw.strip()
        if s == "" or s.lower() in ("null", "none"):
            return None
        names = [n.lower() for n in CLASS_NAMES[task]]
        if s.lower() in names:
            return names.index(s.lower())
        try:
            raw = int(s)
        except ValueError:
            raise CorpusError(f"{where}: unknown {task} label {s!r}") from None
    if isinstance(raw, float) and raw.is_integer():
        raw = int(raw)
    if not isinstance(raw, int) or not 0 <= raw < N_CLASSES[task]:
        raise CorpusError(f"{where}: unknown {task} label {raw!r}")
    return raw


def _make_record(idx: int, text, raw_labels: dict, where: str) -> SentenceRecord:
    if not isinstance(text, str):
        raise CorpusError(f"{where}: field 'text' must be a string")
    tokens = tokenize(text)
    if not tokens:
        raise CorpusError(f"{where}: text has no tokens")
    labels = {t: _parse_label(t, raw_labels.get(t), where) for t in TASKS}
    return SentenceRecord(idx, text, tuple(tokens), labels)


def _read_jsonl(lines: list[str]) -> list[SentenceRecord]:
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            raise CorpusError(f"line {lineno}: blank line")
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict) or "text" not in obj:
            raise CorpusError(f"line {lineno}: expected an object with a 'text' field")
        records.append(_make_record(len(records), obj["text"], obj, f"line {lineno}"))
    return records


def _read_tsv(lines: list[str]) -> list[SentenceRecord]:
    rows = list(csv.reader(lines, delimiter="\t", quoting=csv.QUOTE_NONE))
    start = 1 if rows and rows[0] and rows[0][0].strip().lower() == "text" else 0
    records = []
    for lineno, row in enumerate(rows[start:], start=start + 1):
        if not row or len(row) > 1 + len(TASKS):
            raise CorpusError(f"line {lineno}: expected 1-5 tab-separated columns")
        cells = dict(zip(TASKS, row[1:]))
        records.append(_make_record(len(records), row[0], cells, f"line {lineno}"))
    return records


def load_corpus(path: str | Path, format: str | None = None) -> LabeledCorpus:
    """Read a JSONL or TSV corpus; ``format`` defaults to the file extension."""
    path = Path(path)
    if format is None:
        format = "tsv" if path.suffix.lower() in (".tsv", ".tab") else "jsonl"
    if format not in ("jsonl", "tsv"):
        raise CorpusError(f"unknown corpus format {format!r}")
    lines = path.read_text(encoding="utf-8").splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise CorpusError("empty corpus")
    records = _read_jsonl(lines) if format == "jsonl" else _read_tsv(lines)
    if not records:
        raise CorpusError("empty corpus")
    return LabeledCorpus(tuple(records))


def corpus_from_texts(texts, labels: dict[str, list] | None = None) -> LabeledCorpus:
    """In-memory constructor; ``labels`` maps task -> per-sentence label or None."""
    labels = labels or {}
    records = []
    for i, text in enumerate(texts):
        raw = {t: labels[t][i] for t in labels}
        records.append(_make_record(i, text, raw, f"sentence {i}"))
    if not records:
        raise CorpusError("empty corpus")
    return LabeledCorpus(tuple(records))


@dataclass(frozen=True)
class Vocabulary:
    token_to_index: dict[str, int]
    index_to_token: tuple[str, ...]
    counts: np.ndarray
    min_count: int = 1

    def __len__(self) -> int:
        return len(self.index_to_token)

    def encode_tokens(self, tokens) -> np.ndarray:
        lookup = self.token_to_index
        return np.array([lookup[t] for t in tokens if t in lookup], dtype=np.int64)

    def encode(self, corpus: LabeledCorpus) -> list[np.ndarray]:
        """In-vocabulary token indices per sentence (dropped tokens removed)."""
        return [self.encode_tokens(r.tokens) for r in corpus]

    def flat(self, corpus: LabeledCorpus) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated token indices and sentence offsets (length M+1)."""
        seqs = self.encode(corpus)
        offsets = np.zeros(len(seqs) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([s.size for s in seqs])
        tokens = np.concatenate(seqs) if seqs else np.empty(0, np.int64)
        return tokens.astype(np.int64), offsets


def build_vocabulary(corpus: LabeledCorpus, min_count: int = 1) -> Vocabulary:
    """Index tokens by descending count, ties broken lexicographically."""
    counter = Counter(tok for r in corpus for tok in r.tokens)
    kept = sorted(
        ((tok, c) for tok, c in counter.items() if c >= min_count),
        key=lambda tc: (-tc[1], tc[0]),
    )
    if not kept:
        raise CorpusError(f"vocabulary is empty after min_count={min_count} filtering")
    index_to_token = tuple(t for t, _ in kept)
    return Vocabulary(
        token_to_index={t: i for i, t in enumerate(index_to_token)},
        index_to_token=index_to_token,
        counts=np.array([c for _, c in kept], dtype=np.int64),
        min_count=min_count,
    )


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    val_fraction: float
    order: np.ndarray
    assignments: np.ndarray

    def split(self, fold: int) -> Split:
        """Test = fold ``fold``; validation = first share of the rest in shuffled order."""
        if not 0 <= fold < self.k:
            raise IndexError(f"fold {fold} outside [0, {self.k})")
        n = self.order.size
        in_test = self.assignments[self.order] == fold
        rest = self.order[~in_test]
        n_val = min(rest.size, math.floor(self.val_fraction * n + 0.5))
        return Split(
            train=np.sort(rest[n_val:]),
            val=np.sort(rest[:n_val]),
            test=np.sort(self.order[in_test]),
        )


def make_folds(corpus_or_size, k: int = 5, seed: int = 0, val_fraction: float = 0.10) -> FoldPlan:
    """Seeded shuffle dealt round-robin into ``k`` folds."""
    n = corpus_or_size if isinstance(corpus_or_size, int) else len(corpus_or_size)
    if k < 2:
        raise CorpusError("k must be at least 2")
    if k > n:
        raise CorpusError(f"k={k} exceeds corpus size {n}")
    if not 0.0 <= val_fraction < 1.0:
        raise CorpusError("val_fraction must lie in [0, 1)")
    order = np.random.default_rng(seed).permutation(n).astype(np.int64)
    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = np.arange(n) % k
    return FoldPlan(k, seed, val_fraction, order, assignments)
