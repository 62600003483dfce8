"""Command-line entry point.

Settings resolve as: built-in defaults < ``--config FILE`` (``key = value``
lines) < command-line flags. Each run writes into ``--out DIR`` together with
the fully resolved ``config.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from mtgcn import gcn, mtl
from mtgcn._accel import backend
from mtgcn.corpus import TASKS, CorpusError, build_vocabulary, load_corpus, make_folds
from mtgcn.evaluate import (
    MetricsReport,
    UnknownQueryError,
    _fold_metrics,
    cross_validate,
    evaluate_embeddings,
    nearest_neighbors,
)
from mtgcn.graph import EmbeddingTable, GraphError, GraphRecipe, read_graph, write_graph
from mtgcn.walks import WalkConfig, generate_walks, sgns_train

log = logging.getLogger("mtgcn")


class UserError(Exception):
    """Bad input or configuration; exit code 2."""


@dataclass
class RunConfig:
    corpus: str = ""
    corpus_format: str = ""          # "" = from file extension
    min_count: int = 1
    graph: str = ""                  # tg1 file to load instead of building
    graph_kind: str = "ws"           # w / s / ws
    window_size: int = 3
    k_neighbors: int = 10            # sentence-graph top-k
    normalize: str = "sym"           # sym / raw
    word_vectors: str = ""           # word2vec text file for the S graph
    lam: float = 0.2
    max_epochs: int = 100
    patience: int = 10
    dropout: float = 0.5
    dim: int = 200
    lr: float = 0.001
    weight_decay: float = 5e-4
    decoder: str = "gcn"
    tasks: str = "sa,ei,hs,sar"
    mse_mode: str = "auto"
    readout: str = "auto"            # node / avg
    folds: int = 5
    val_fraction: float = 0.10
    fold: int = 0
    seed: int = 0
    lambdas: str = "0,0.2,0.5,1.0"
    sweep_folds: str = "0"
    walks_per_node: int = 10
    walk_length: int = 40
    p: float = 1.0
    q: float = 1.0
    sg_window: int = 5
    walk_dim: int = 200
    negatives: int = 5
    walk_epochs: int = 5
    k: int = 8                       # neighbours to print
    checkpoint: str = ""
    target: str = "words"            # words / sentences-gae / sentences-avg
    embeddings: str = ""             # evaluate fixed embeddings instead

    def task_tuple(self) -> tuple[str, ...]:
        tasks = tuple(t.strip().lower() for t in self.tasks.split(",") if t.strip())
        bad = [t for t in tasks if t not in TASKS]
        if bad:
            raise UserError(f"unknown task(s): {', '.join(bad)}")
        return tasks

    def recipe(self, word_vectors=None) -> GraphRecipe:
        return GraphRecipe(
            kind=self.graph_kind.upper(),
            window_size=self.window_size,
            min_count=self.min_count,
            k_neighbors=self.k_neighbors,
            normalize=_normalize_mode(self.normalize),
            word_vectors=word_vectors,
        )

    def train_config(self) -> mtl.TrainConfig:
        return mtl.TrainConfig(
            lam=self.lam, max_epochs=self.max_epochs, patience=self.patience,
            dropout=self.dropout, dim=self.dim, lr=self.lr,
            weight_decay=self.weight_decay, seed=self.seed, decoder=self.decoder,
            tasks=self.task_tuple(), mse_mode=self.mse_mode, readout=self.readout,
        )

    def walk_config(self) -> WalkConfig:
        return WalkConfig(
            walks_per_node=self.walks_per_node, walk_length=self.walk_length,
            p=self.p, q=self.q, sg_window=self.sg_window, dim=self.walk_dim,
            negatives=self.negatives, epochs=self.walk_epochs, seed=self.seed,
        )


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CASTS = {"int": int, "float": float, "str": str}
_CHOICES = {
    "graph_kind": ("w", "s", "ws"),
    "normalize": ("sym", "raw", "sym_renorm"),
    "decoder": ("gcn", "inner"),
    "mse_mode": ("auto", "dense", "sampled"),
    "readout": ("auto", "node", "avg"),
    "target": ("words", "sentences-gae", "sentences-avg"),
}


def _normalize_mode(value: str) -> str:
    return "sym_renorm" if value in ("sym", "sym_renorm") else value


def _coerce(key: str, value):
    cast = _CASTS[FIELD_TYPES[key]]
    try:
        out = cast(value)
    except (TypeError, ValueError):
        raise UserError(f"config key {key!r}: cannot read {value!r} as {FIELD_TYPES[key]}") from None
    if key in _CHOICES:
        out = out.lower()
        if out not in _CHOICES[key]:
            raise UserError(f"config key {key!r}: expected one of {', '.join(_CHOICES[key])}")
    return out


def read_config_file(path: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UserError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "lambda":
            key = "lam"
        if key not in FIELD_TYPES:
            raise UserError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value.strip("\"'"))
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for key in FIELD_TYPES:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = _coerce(key, v)
    return RunConfig(**values)


def _prepare_out(cfg: RunConfig, out: str, command: str) -> tuple[Path, logging.Handler]:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    resolved = {"command": command, **asdict(cfg)}
    (path / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    handler = logging.FileHandler(path / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    return path, handler


# ---------------------------------------------------------------------------
# shared loaders
# ---------------------------------------------------------------------------


def _corpus(cfg: RunConfig):
    if not cfg.corpus:
        raise UserError("no corpus given (--corpus)")
    if not Path(cfg.corpus).is_file():
        raise UserError(f"corpus file not found: {cfg.corpus}")
    return load_corpus(cfg.corpus, cfg.corpus_format or None)


def _word_vectors(cfg: RunConfig):
    if cfg.graph_kind != "s":
        return None
    if not cfg.word_vectors:
        raise UserError("sentence graphs need --word-vectors")
    if not Path(cfg.word_vectors).is_file():
        raise UserError(f"word-vector file not found: {cfg.word_vectors}")
    return EmbeddingTable.read_word2vec(cfg.word_vectors)


def _graph(cfg: RunConfig, corpus):
    """Load ``cfg.graph`` or build one; returns (graph, vocab)."""
    vocab = build_vocabulary(corpus, cfg.min_count)
    if not cfg.graph:
        return cfg.recipe(_word_vectors(cfg)).build(corpus)
    if not Path(cfg.graph).is_file():
        raise UserError(f"graph file not found: {cfg.graph}")
    graph = read_graph(cfg.graph, _normalize_mode(cfg.normalize), n_sentences=len(corpus))
    if graph.n_words and graph.n_words != len(vocab):
        raise UserError(
            f"graph has {graph.n_words} word nodes but the corpus vocabulary has "
            f"{len(vocab)} (check --min-count)"
        )
    if graph.n_sentences and graph.n_sentences != len(corpus):
        raise UserError("graph sentence nodes do not match the corpus")
    return graph, vocab


def _load_model(cfg: RunConfig):
    if not cfg.checkpoint:
        raise UserError("no checkpoint given (--checkpoint)")
    if not Path(cfg.checkpoint).is_file():
        raise UserError(f"checkpoint not found: {cfg.checkpoint}")
    meta, arrays = gcn.read_checkpoint(cfg.checkpoint)
    params = gcn.GcnParams.from_arrays({k: v for k, v in arrays.items()
                                        if not k.startswith(("adam_m_", "adam_v_"))})
    return meta, params


def _node_keys(graph, vocab, corpus) -> tuple[str, ...]:
    words = vocab.index_to_token if graph.n_words else ()
    sents = tuple(f"s{r.id}" for r in corpus) if graph.n_sentences else ()
    return tuple(words) + sents


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_build_graph(cfg: RunConfig, out: Path) -> int:
    corpus = _corpus(cfg)
    graph, vocab = cfg.recipe(_word_vectors(cfg)).build(corpus)
    write_graph(graph, out / "graph.tg1")
    a = graph.adjacency.csr
    w = graph.n_words
    stats = {
        "kind": graph.kind,
        "nodes": graph.n_nodes,
        "words": w,
        "sentences": graph.n_sentences,
        "nnz": int(a.nnz),
        "word_word_edges": int(a[:w, :w].nnz - w) if w else 0,
        "word_sentence_edges": int(a[:w, w:].nnz) if w and graph.n_sentences else 0,
        "window_size": cfg.window_size,
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_train(cfg: RunConfig, out: Path) -> int:
    corpus = _corpus(cfg)
    graph, vocab = _graph(cfg, corpus)
    tc = cfg.train_config()
    plan = make_folds(corpus, cfg.folds, cfg.seed, cfg.val_fraction)
    res = mtl.train(graph, corpus, plan.split(cfg.fold), tc, vocab=vocab)
    res.history.write_csv(out / "history.csv")
    arrays = dict(res.params.arrays())
    arrays.update({f"adam_m_{k}": v for k, v in res.adam.m.items()})
    arrays.update({f"adam_v_{k}": v for k, v in res.adam.v.items()})
    meta = {
        "train_config": tc.to_dict(),
        "graph_kind": graph.kind,
        "n_nodes": graph.n_nodes,
        "n_words": graph.n_words,
        "n_sentences": graph.n_sentences,
        "fold": cfg.fold,
        "folds": cfg.folds,
        "val_fraction": cfg.val_fraction,
        "seed": cfg.seed,
        "best_epoch": res.history.best_epoch,
        "stopped_epoch": res.history.stopped_epoch,
        "adam": {"t": res.adam.t, "lr": res.adam.lr, "beta1": res.adam.beta1,
                 "beta2": res.adam.beta2, "eps": res.adam.eps},
        "rng": {"seed": cfg.seed, "streams": ["init", "heads", "dropout", "cells"],
                "state": res.rng_state},
    }
    gcn.write_checkpoint(out / "checkpoint.ckpt", meta, arrays)
    print(f"best epoch {res.history.best_epoch}, stopped at {res.history.stopped_epoch}; "
          f"l_mse={res.final_l_mse:.6f} l_cla={res.final_l_cla:.6f}")
    return 0


def _write_report(report: MetricsReport, out: Path) -> None:
    report.write_json(out / "report.json")
    text = report.to_text()
    (out / "report.txt").write_text(text)
    report.write_confusion_csv(out)
    print(text, end="")


def cmd_evaluate(cfg: RunConfig, out: Path) -> int:
    corpus = _corpus(cfg)
    if cfg.embeddings:
        if not Path(cfg.embeddings).is_file():
            raise UserError(f"embedding file not found: {cfg.embeddings}")
        table = EmbeddingTable.read_word2vec(cfg.embeddings)
        vectors = _sentence_vectors_from_table(table, corpus, cfg)
        plan = make_folds(corpus, cfg.folds, cfg.seed, cfg.val_fraction)
        _write_report(evaluate_embeddings(corpus, vectors, plan, cfg.task_tuple()), out)
        return 0
    if cfg.checkpoint:
        meta, params = _load_model(cfg)
        graph, vocab = _graph(cfg, corpus)
        if graph.n_nodes != params.n_nodes:
            raise UserError("checkpoint does not match the graph")
        tc = mtl.TrainConfig(**{**meta["train_config"],
                                "tasks": tuple(meta["train_config"]["tasks"])})
        readout = mtl.sentence_readout(graph, corpus, vocab, tc.readout)
        plan = make_folds(corpus, meta["folds"], meta["seed"], meta["val_fraction"])
        split = plan.split(meta["fold"])
        preds = mtl.predict(graph, params, readout)
        report = MetricsReport(meta={"k": plan.k, "seed": plan.seed, "graph": graph.kind,
                                     "fold": meta["fold"], "checkpoint": True})
        report.folds.append(_fold_metrics(corpus, split.test, preds))
        _write_report(report, out)
        return 0
    graph, vocab = _graph(cfg, corpus)
    plan = make_folds(corpus, cfg.folds, cfg.seed, cfg.val_fraction)
    report, _ = cross_validate(corpus, cfg.recipe(), cfg.train_config(), plan,
                               graph=graph, vocab=vocab)
    _write_report(report, out)
    return 0


def _sentence_vectors_from_table(table, corpus, cfg):
    lookup = table.key_map
    if all(f"s{r.id}" in lookup for r in corpus):
        return table.vectors[[lookup[f"s{r.id}"] for r in corpus]]
    out = np.zeros((len(corpus), table.dim))
    for i, r in enumerate(corpus):
        rows = [lookup[t] for t in r.tokens if t in lookup]
        if rows:
            out[i] = table.vectors[rows].mean(axis=0)
    return out


def cmd_embed(cfg: RunConfig, out: Path) -> int:
    corpus = _corpus(cfg)
    meta, params = _load_model(cfg)
    graph, vocab = _graph(cfg, corpus)
    if graph.n_nodes != params.n_nodes:
        raise UserError("checkpoint does not match the graph")
    z = mtl.node_embeddings(graph, params)
    if cfg.target == "words":
        if not graph.n_words:
            raise UserError(f"{graph.kind} graph has no word nodes")
        table = EmbeddingTable(z[graph.word_nodes], vocab.index_to_token)
    elif cfg.target == "sentences-gae":
        if not graph.n_sentences:
            raise UserError(f"{graph.kind} graph has no sentence nodes")
        table = EmbeddingTable(z[graph.sentence_nodes], tuple(f"s{r.id}" for r in corpus))
    else:
        if not graph.n_words:
            raise UserError(f"{graph.kind} graph has no word nodes")
        vecs = mtl.embed_sentences_from_words(z[graph.word_nodes], corpus, vocab)
        table = EmbeddingTable(vecs, tuple(f"s{r.id}" for r in corpus))
    path = out / f"embeddings_{cfg.target}.w2v"
    table.write_word2vec(path)
    print(f"wrote {len(table.keys)} x {table.dim} vectors to {path}")
    return 0


def cmd_neighbors(cfg: RunConfig, args) -> int:
    if not Path(args.embedding_file).is_file():
        raise UserError(f"embedding file not found: {args.embedding_file}")
    table = EmbeddingTable.read_word2vec(args.embedding_file)
    for token, sim in nearest_neighbors(table, args.query, cfg.k):
        print(f"{token}\t{sim:.6f}")
    return 0


def cmd_sweep_lambda(cfg: RunConfig, out: Path) -> int:
    corpus = _corpus(cfg)
    graph, vocab = _graph(cfg, corpus)
    try:
        lambdas = [float(x) for x in cfg.lambdas.split(",") if x.strip()]
        folds = [int(x) for x in cfg.sweep_folds.split(",") if x.strip()]
    except ValueError:
        raise UserError("--lambdas and --sweep-folds take comma-separated numbers") from None
    plan = make_folds(corpus, cfg.folds, cfg.seed, cfg.val_fraction)
    splits = [plan.split(f) for f in folds]
    rows, histories = mtl.sweep_lambda(graph, corpus, splits, cfg.train_config(), lambdas,
                                       vocab=vocab)
    for r in rows:
        r["fold"] = folds[r["fold"]]
    cols = ["lambda", "fold", "l_mse", "l_cla"] + [f"f1_{t}" for t in TASKS]
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for lam in lambdas:
            group = [r for r in rows if r["lambda"] == lam]
            for r in group:
                w.writerow([mtl._fmt(r[c]) for c in cols])
            mean = {c: float(np.nanmean([r[c] for r in group])) if any(
                r[c] == r[c] for r in group) else float("nan") for c in cols[2:]}
            w.writerow([mtl._fmt(lam), "mean"] + [mtl._fmt(mean[c]) for c in cols[2:]])
    with open(out / "curves.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "fold", "epoch", "l_mse", "l_cla", "l_total", "val_total"])
        for r, h in zip(rows, histories):
            for rec in h.records:
                w.writerow([mtl._fmt(r["lambda"]), r["fold"], rec["epoch"]] +
                           [mtl._fmt(rec[c]) for c in ("l_mse", "l_cla", "l_total", "val_total")])
    print((out / "sweep.csv").read_text(), end="")
    return 0


def cmd_walks(cfg: RunConfig, out: Path) -> int:
    corpus = _corpus(cfg)
    graph, vocab = _graph(cfg, corpus)
    wc = cfg.walk_config()
    walks = generate_walks(graph, wc)
    walks.write(out / "walks.txt")
    table, losses = sgns_train(walks, wc, keys=_node_keys(graph, vocab, corpus))
    table.write_word2vec(out / "embeddings.w2v")
    with open(out / "sgns_loss.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss\n")
        for i, l in enumerate(losses, start=1):
            fh.write(f"{i},{l:.17g}\n")
    print(f"{walks.walks.shape[0]} walks; final SGNS loss {losses[-1] if losses else float('nan'):.6f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", default=None, help="run directory (default runs/<command>)")
    g = p.add_argument_group("settings (override the config file)")
    for key in FIELD_TYPES:
        flag = "--lambda" if key == "lam" else "--" + key.replace("_", "-")
        kw = {"dest": key, "default": None, "metavar": key.upper()}
        if key in _CHOICES:
            kw["choices"] = _CHOICES[key]
            kw.pop("metavar")
        g.add_argument(flag, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtgcn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("build-graph", "build a W / S / WS graph and write it as tg1"),
        ("train", "train the multi-task GCN on one fold"),
        ("evaluate", "score a checkpoint, run k-fold CV, or score fixed embeddings"),
        ("embed", "export word or sentence embeddings from a checkpoint"),
        ("sweep-lambda", "train once per lambda and tabulate final losses"),
        ("walks", "DeepWalk / Node2Vec walks plus SGNS embeddings"),
    ]:
        _add_config_flags(sub.add_parser(name, help=help_))
    nb = sub.add_parser("neighbors", help="top-k cosine neighbors in an embedding file")
    nb.add_argument("embedding_file")
    nb.add_argument("query")
    _add_config_flags(nb)
    return parser


COMMANDS = {
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "embed": cmd_embed,
    "sweep-lambda": cmd_sweep_lambda,
    "walks": cmd_walks,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.setLevel(logging.INFO)
    log.propagate = False
    log.addHandler(console)
    handler = None
    try:
        cfg = resolve_config(args)
        if args.command == "neighbors":
            return cmd_neighbors(cfg, args)
        out, handler = _prepare_out(cfg, args.out or f"runs/{args.command}", args.command)
        log.info("backend: %s", backend())
        return COMMANDS[args.command](cfg, out)
    except (UserError, CorpusError, GraphError, UnknownQueryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except gcn.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    finally:
        for h in (console, handler):
            if h is not None:
                log.removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
