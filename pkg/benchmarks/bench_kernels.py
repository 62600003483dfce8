"""Time the compiled kernels against their interpreted fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--scale 1.0]

Each row runs the same call with ``use_numba=True`` and ``use_numba=False``
and checks that both give the same result. Compilation happens in a warm-up
call that is not timed.
"""

import argparse
import time

import numpy as np

from mtgcn import _kernels
from mtgcn.corpus import build_vocabulary
from mtgcn.graph import GraphRecipe, count_cooccurrence
from mtgcn.synthetic import two_cluster_corpus
from mtgcn.walks import WalkConfig, generate_walks, sgns_train


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(scale):
    corpus = two_cluster_corpus(n_sentences=int(2000 * scale), words_per_cluster=400, seed=0)
    vocab = build_vocabulary(corpus)
    graph, _ = GraphRecipe("WS").build(corpus)
    walk_cfg = WalkConfig(walks_per_node=2, walk_length=40, p=0.5, q=2.0, seed=0)
    walks = generate_walks(graph, walk_cfg)
    sgns_cfg = WalkConfig(dim=64, epochs=1, seed=0)
    small_walks = type(walks)(walks.walks[: max(50, int(400 * scale))], walks.n_nodes)

    rng = np.random.default_rng(0)
    n, k = graph.n_nodes, 64
    left, right_t = rng.normal(size=(n, k)), rng.normal(size=(n, k))
    cells = int(200_000 * scale)
    rows, cols = rng.integers(0, n, cells), rng.integers(0, n, cells)
    dvals = rng.normal(size=cells)

    def cooc(flag):
        t = count_cooccurrence(corpus, vocab, 3, use_numba=flag)
        return t.pair_counts

    yield f"co-occurrence ({len(corpus)} sentences, window 3)", cooc
    yield (f"node2vec walks ({walks.walks.shape[0]} x {walk_cfg.walk_length})",
           lambda flag: generate_walks(graph, walk_cfg, use_numba=flag).walks)
    yield (f"SGNS epoch ({small_walks.walks.shape[0]} walks, dim {sgns_cfg.dim})",
           lambda flag: sgns_train(small_walks, sgns_cfg, use_numba=flag)[0].vectors)
    yield (f"gather dot ({cells} cells, K={k})",
           lambda flag: _kernels.gather_dot(left, right_t, rows, cols, use_numba=flag))
    yield (f"scatter outer ({cells} cells, K={k})",
           lambda flag: _kernels.scatter_outer(left, right_t, rows, cols, dvals, use_numba=flag)[0])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--scale", type=float, default=1.0, help="multiplies problem sizes")
    args = ap.parse_args()

    print(f"{'kernel':<48}{'numba s':>10}{'numpy s':>10}{'speedup':>9}  same")
    for name, fn in cases(args.scale):
        fn(True)  # compile
        t_jit, a = best_of(lambda: fn(True), args.repeat)
        t_py, b = best_of(lambda: fn(False), 1 if "SGNS" in name else args.repeat)
        same = np.allclose(a, b, rtol=1e-9, atol=1e-12)
        print(f"{name:<48}{t_jit:>10.4f}{t_py:>10.4f}{t_py / t_jit:>8.1f}x  {same}")


if __name__ == "__main__":
    main()
