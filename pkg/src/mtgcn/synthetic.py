"""Seeded synthetic corpora with label structure tied to word clusters."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from mtgcn.corpus import LabeledCorpus, corpus_from_texts


def two_cluster_corpus(n_sentences: int = 200, words_per_cluster: int = 50,
                       length=(8, 12), ei_fraction: float = 0.6, mix: float = 0.2,
                       seed: int = 0) -> LabeledCorpus:
    """Two disjoint vocabularies, each split into two sub-vocabularies.

    Sentence ``s`` belongs to cluster ``s % 2`` and sub-cluster ``(s // 2) % 2``.
    Tokens come from the sentence's sub-vocabulary, except a ``mix`` share drawn
    from the sibling sub-vocabulary of the same cluster. Labels: SA = cluster,
    EI = 2*cluster + sub-cluster (on ``ei_fraction`` of sentences), HS = cluster,
    SAR = 1 - cluster.
    """
    rng = np.random.default_rng(seed)
    half = words_per_cluster // 2
    texts, sa, ei, hs, sar = [], [], [], [], []
    ei_on = rng.permutation(n_sentences) < round(ei_fraction * n_sentences)
    for s in range(n_sentences):
        cluster, sub = s % 2, (s // 2) % 2
        n_tok = int(rng.integers(length[0], length[1] + 1))
        own = rng.random(n_tok) >= mix
        picked_sub = np.where(own, sub, 1 - sub)
        ids = cluster * words_per_cluster + picked_sub * half + rng.integers(0, half, n_tok)
        texts.append(" ".join(f"w{int(i)}" for i in ids))
        sa.append(cluster)
        ei.append(2 * cluster + sub if ei_on[s] else None)
        hs.append(cluster)
        sar.append(1 - cluster)
    return corpus_from_texts(texts, {"sa": sa, "ei": ei, "hs": hs, "sar": sar})


def write_jsonl(corpus: LabeledCorpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in corpus:
            obj = {"text": r.text, **{t: v for t, v in r.labels.items() if v is not None}}
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
