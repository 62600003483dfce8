"""Hot inner loops.

Every public function here takes ``use_numba`` (default: the process-wide
flag from :mod:`mtgcn._accel`). The numba path and the fallback path return
identical integer results; floating results agree to rounding except where
noted.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from mtgcn._accel import USE_NUMBA, njit


def _pick(use_numba):
    return USE_NUMBA if use_numba is None else use_numba


# ---------------------------------------------------------------------------
# sliding-window co-occurrence
# ---------------------------------------------------------------------------


@njit
def _window_pairs_jit(tokens, offsets, n_vocab, window):
    n_sent = offsets.size - 1
    n_win = 0
    n_pairs = 0
    for s in range(n_sent):
        n = offsets[s + 1] - offsets[s]
        if n == 0:
            continue
        width = min(window, n)
        nw = n - width + 1
        n_win += nw
        n_pairs += nw * (width * (width - 1) // 2)

    word_counts = np.zeros(n_vocab, np.int64)
    keys = np.empty(n_pairs, np.int64)
    buf = np.empty(window, np.int64)
    k = 0
    for s in range(n_sent):
        off = offsets[s]
        n = offsets[s + 1] - off
        if n == 0:
            continue
        width = min(window, n)
        for start in range(n - width + 1):
            # sorted distinct tokens of this window
            m = 0
            for a in range(width):
                t = tokens[off + start + a]
                dup = False
                for b in range(m):
                    if buf[b] == t:
                        dup = True
                        break
                if dup:
                    continue
                j = m
                while j > 0 and buf[j - 1] > t:
                    buf[j] = buf[j - 1]
                    j -= 1
                buf[j] = t
                m += 1
            for a in range(m):
                word_counts[buf[a]] += 1
                for b in range(a + 1, m):
                    keys[k] = buf[a] * n_vocab + buf[b]
                    k += 1
    return n_win, word_counts, keys[:k]


def _window_pairs_np(tokens, offsets, n_vocab, window):
    lengths = np.diff(offsets)
    widths = np.minimum(window, lengths)
    n_windows = np.where(lengths > 0, lengths - widths + 1, 0)
    total = int(n_windows.sum())
    win_sent = np.repeat(np.arange(lengths.size), n_windows)
    first_win = np.concatenate(([0], np.cumsum(n_windows)[:-1]))
    win_start = offsets[win_sent] + (np.arange(total) - first_win[win_sent])
    win_width = widths[win_sent]
    win_id = np.arange(total, dtype=np.int64)

    hits = []
    for a in range(window):
        live = win_width > a
        hits.append(win_id[live] * n_vocab + tokens[win_start[live] + a])
    hits = np.unique(np.concatenate(hits)) if hits else np.empty(0, np.int64)
    word_counts = np.bincount(hits % n_vocab, minlength=n_vocab).astype(np.int64)

    vv = np.int64(n_vocab) * n_vocab
    triples = []
    for a in range(window):
        for b in range(a + 1, window):
            live = win_width > b
            ti = tokens[win_start[live] + a]
            tj = tokens[win_start[live] + b]
            keep = ti != tj
            lo = np.minimum(ti, tj)[keep]
            hi = np.maximum(ti, tj)[keep]
            triples.append(win_id[live][keep] * vv + lo * n_vocab + hi)
    if triples:
        keys = np.unique(np.concatenate(triples)) % vv
    else:
        keys = np.empty(0, np.int64)
    return total, word_counts, keys


def window_cooccurrence(tokens, offsets, n_vocab, window, use_numba=None):
    """Count windows, per-word window containment and per-pair containment.

    Returns ``(total_windows, word_counts, pair_rows, pair_cols, pair_counts)``
    with pairs sorted by (row, col) and ``row < col``.
    """
    tokens = np.ascontiguousarray(tokens, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    fn = _window_pairs_jit if _pick(use_numba) else _window_pairs_np
    total, word_counts, keys = fn(tokens, offsets, int(n_vocab), int(window))
    uniq, counts = np.unique(keys, return_counts=True)
    return (
        int(total),
        word_counts,
        uniq // n_vocab,
        uniq % n_vocab,
        counts.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# sampled decoder cells
# ---------------------------------------------------------------------------


@njit
def _gather_dot_jit(left, right_t, rows, cols):
    out = np.empty(rows.size)
    k = left.shape[1]
    for e in range(rows.size):
        i = rows[e]
        j = cols[e]
        acc = 0.0
        for c in range(k):
            acc += left[i, c] * right_t[j, c]
        out[e] = acc
    return out


@njit
def _scatter_jit(left, right_t, rows, cols, dvals):
    d_left = np.zeros_like(left)
    d_right_t = np.zeros_like(right_t)
    k = left.shape[1]
    for e in range(rows.size):
        i = rows[e]
        j = cols[e]
        g = dvals[e]
        for c in range(k):
            d_left[i, c] += g * right_t[j, c]
            d_right_t[j, c] += g * left[i, c]
    return d_left, d_right_t


def gather_dot(left, right_t, rows, cols, use_numba=None):
    """``out[e] = left[rows[e]] . right_t[cols[e]]``."""
    if _pick(use_numba):
        return _gather_dot_jit(
            np.ascontiguousarray(left), np.ascontiguousarray(right_t), rows, cols
        )
    return np.einsum("ij,ij->i", left[rows], right_t[cols])


def scatter_outer(left, right_t, rows, cols, dvals, use_numba=None):
    """Adjoint of :func:`gather_dot`: gradients w.r.t. ``left`` and ``right_t``."""
    if _pick(use_numba):
        return _scatter_jit(
            np.ascontiguousarray(left), np.ascontiguousarray(right_t), rows, cols, dvals
        )
    g = sp.csr_matrix((dvals, (rows, cols)), shape=(left.shape[0], right_t.shape[0]))
    return np.asarray(g @ right_t), np.asarray(g.T @ left)


# ---------------------------------------------------------------------------
# second-order random walks
# ---------------------------------------------------------------------------


@njit
def _has_edge(indices, lo, hi, x):
    # indices[lo:hi] is sorted
    while lo < hi:
        mid = (lo + hi) // 2
        v = indices[mid]
        if v == x:
            return True
        if v < x:
            lo = mid + 1
        else:
            hi = mid
    return False


@njit
def step_weights(indptr, indices, weights, prev, cur, p, q):
    """Unnormalized next-node weights out of ``cur`` given the previous node.

    ``prev < 0`` means first step (plain edge weights).
    """
    lo = indptr[cur]
    hi = indptr[cur + 1]
    out = np.empty(hi - lo)
    if prev < 0:
        for e in range(lo, hi):
            out[e - lo] = weights[e]
        return out
    plo = indptr[prev]
    phi = indptr[prev + 1]
    for e in range(lo, hi):
        x = indices[e]
        w = weights[e]
        if x == prev:
            w = w / p
        elif not _has_edge(indices, plo, phi, x):
            w = w / q
        out[e - lo] = w
    return out


@njit
def _walks_jit(indptr, indices, weights, starts, uniforms, walk_length, p, q):
    n_walks = starts.size
    out = np.empty((n_walks, walk_length), np.int64)
    for w in range(n_walks):
        cur = starts[w]
        out[w, 0] = cur
        prev = -1
        for step in range(1, walk_length):
            wts = step_weights(indptr, indices, weights, prev, cur, p, q)
            cum = np.empty(wts.size)
            total = 0.0
            for k in range(wts.size):
                total += wts[k]
                cum[k] = total
            pick = np.searchsorted(cum, uniforms[w, step - 1] * total, side="right")
            if pick >= wts.size:
                pick = wts.size - 1
            prev = cur
            cur = indices[indptr[cur] + pick]
            out[w, step] = cur
    return out


def node2vec_walks(indptr, indices, weights, starts, uniforms, walk_length, p, q,
                   use_numba=None):
    """Walk from each ``starts[w]`` consuming ``uniforms[w]`` (one per step)."""
    args = (
        np.ascontiguousarray(indptr, dtype=np.int64),
        np.ascontiguousarray(indices, dtype=np.int64),
        np.ascontiguousarray(weights, dtype=np.float64),
        np.ascontiguousarray(starts, dtype=np.int64),
        np.ascontiguousarray(uniforms, dtype=np.float64),
        int(walk_length),
        float(p),
        float(q),
    )
    if _pick(use_numba):
        return _walks_jit(*args)
    return _walks_jit.py_func(*args)


# ---------------------------------------------------------------------------
# skip-gram with negative sampling
# ---------------------------------------------------------------------------


@njit
def _softplus(x):
    if x > 0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@njit
def _sgns_jit(walks, negatives, syn0, syn1, window, lr0, lr_min, done, total_work):
    n_walks, length = walks.shape
    n_neg = negatives.shape[3]
    loss = 0.0
    n_pairs = 0
    for b in range(n_walks):
        for i in range(length):
            lr = lr0 - (lr0 - lr_min) * done / total_work
            if lr < lr_min:
                lr = lr_min
            done += 1
            center = walks[b, i]
            slot = 0
            for j in range(max(0, i - window), min(length, i + window + 1)):
                if j == i:
                    continue
                ctx = walks[b, j]
                v = syn0[center].copy()
                grad = np.zeros_like(v)
                f = np.dot(v, syn1[ctx])
                loss += _softplus(-f)
                g = lr * (1.0 - 1.0 / (1.0 + np.exp(-f)))
                grad += g * syn1[ctx]
                syn1[ctx] += g * v
                for n in range(n_neg):
                    neg = negatives[b, i, slot, n]
                    if neg == ctx:
                        continue
                    f = np.dot(v, syn1[neg])
                    loss += _softplus(f)
                    g = -lr / (1.0 + np.exp(-f))
                    grad += g * syn1[neg]
                    syn1[neg] += g * v
                syn0[center] += grad
                slot += 1
                n_pairs += 1
    return loss, n_pairs, done


@njit
def _sgns_loss_jit(walks, negatives, syn0, syn1, window):
    n_walks, length = walks.shape
    n_neg = negatives.shape[3]
    loss = 0.0
    n_pairs = 0
    for b in range(n_walks):
        for i in range(length):
            center = walks[b, i]
            slot = 0
            for j in range(max(0, i - window), min(length, i + window + 1)):
                if j == i:
                    continue
                ctx = walks[b, j]
                loss += _softplus(-np.dot(syn0[center], syn1[ctx]))
                for n in range(n_neg):
                    neg = negatives[b, i, slot, n]
                    if neg != ctx:
                        loss += _softplus(np.dot(syn0[center], syn1[neg]))
                slot += 1
                n_pairs += 1
    return loss, n_pairs


def sgns_loss(walks, negatives, syn0, syn1, window, use_numba=None):
    """Objective over fixed walks and negatives, without updating. Returns (loss_sum, n_pairs)."""
    fn = _sgns_loss_jit if _pick(use_numba) else _sgns_loss_jit.py_func
    loss, n_pairs = fn(np.ascontiguousarray(walks, dtype=np.int64),
                       np.ascontiguousarray(negatives, dtype=np.int64), syn0, syn1, int(window))
    return float(loss), int(n_pairs)


def sgns_chunk(walks, negatives, syn0, syn1, window, lr0, lr_min, done, total_work,
               use_numba=None):
    """Run SGD over one chunk of walks in place. Returns (loss_sum, n_pairs, done)."""
    fn = _sgns_jit if _pick(use_numba) else _sgns_jit.py_func
    loss, n_pairs, done = fn(
        np.ascontiguousarray(walks, dtype=np.int64),
        np.ascontiguousarray(negatives, dtype=np.int64),
        syn0,
        syn1,
        int(window),
        float(lr0),
        float(lr_min),
        int(done),
        float(total_work),
    )
    return float(loss), int(n_pairs), int(done)
