"""Two-layer GCN graph autoencoder with hand-written gradients and Adam.

Node features are the identity, so the encoder's first product is just
``A_hat @ W0`` and row ``v`` of ``W0`` is node ``v``'s free embedding.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from mtgcn import _kernels
from mtgcn.graph import SparseMatrix

__all__ = [
    "DivergenceError",
    "GcnParams",
    "AdamState",
    "GaeForward",
    "init_params",
    "encode",
    "decode_gcn",
    "decode_inner",
    "reconstruction_loss",
    "sample_cells",
    "forward",
    "backward",
    "weight_penalty",
    "adam_step",
    "write_checkpoint",
    "read_checkpoint",
]

DECODERS = ("gcn", "inner")


class DivergenceError(RuntimeError):
    pass


def _csr(a):
    return a.csr if isinstance(a, SparseMatrix) else sp.csr_matrix(a)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class GcnParams:
    w0: np.ndarray
    w1: np.ndarray | None = None
    heads: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.w0.shape[0]

    @property
    def dim(self) -> int:
        return self.w0.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"w0": self.w0}
        if self.w1 is not None:
            out["w1"] = self.w1
        out.update({f"head_{t}": w for t, w in self.heads.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "GcnParams":
        heads = {k[5:]: v for k, v in arrays.items() if k.startswith("head_")}
        return cls(arrays["w0"], arrays.get("w1"), heads)

    def copy(self) -> "GcnParams":
        return GcnParams.from_arrays({k: v.copy() for k, v in self.arrays().items()})


def init_params(n_nodes: int, dim: int, rng: np.random.Generator,
                decoder: str = "gcn") -> GcnParams:
    """Glorot-uniform encoder (and decoder) weights; no biases."""
    if decoder not in DECODERS:
        raise ValueError(f"unknown decoder {decoder!r}")
    w0 = glorot(rng, n_nodes, dim)
    w1 = glorot(rng, dim, n_nodes) if decoder == "gcn" else None
    return GcnParams(w0, w1)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def encode(a_hat, params: GcnParams, dropout_p: float = 0.0,
           rng: np.random.Generator | None = None):
    """``Z = dropout(relu(A_hat @ W0))``. Returns ``(z, pre_activation, mask)``.

    Dropout is inverted (survivors scaled by ``1/(1-p)``) and only applied when
    ``dropout_p > 0``; pass ``dropout_p=0`` for evaluation.
    """
    a = _csr(a_hat)
    if a.shape[0] != a.shape[1] or a.shape[1] != params.w0.shape[0]:
        raise ValueError(f"shape mismatch: A_hat {a.shape} vs W0 {params.w0.shape}")
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError("dropout_p must lie in [0, 1)")
    pre = np.asarray(a @ params.w0)
    z = np.maximum(pre, 0.0)
    mask = None
    if dropout_p > 0.0:
        if rng is None:
            raise ValueError("dropout needs an rng")
        mask = (rng.random(z.shape) >= dropout_p) / (1.0 - dropout_p)
        z = z * mask
    return z, pre, mask


def decode_gcn(a_hat, z: np.ndarray, w1: np.ndarray) -> np.ndarray:
    a = _csr(a_hat)
    if a.shape[1] != z.shape[0] or z.shape[1] != w1.shape[0] or w1.shape[1] != a.shape[0]:
        raise ValueError(f"shape mismatch: A_hat {a.shape}, Z {z.shape}, W1 {w1.shape}")
    return expit(np.asarray(a @ z) @ w1)


def decode_inner(z: np.ndarray) -> np.ndarray:
    return expit(z @ z.T)


def reconstruction_loss(a_prime: np.ndarray, target) -> float:
    """Mean squared error over all N^2 cells."""
    t = _csr(target)
    if a_prime.shape != t.shape:
        raise ValueError(f"shape mismatch: {a_prime.shape} vs {t.shape}")
    return float(np.mean((a_prime - t.toarray()) ** 2))


def sample_cells(target, rng: np.random.Generator):
    """Every stored target cell plus as many uniformly drawn empty cells."""
    t = _csr(target).tocoo()
    n = t.shape[0]
    pos = t.row.astype(np.int64) * n + t.col.astype(np.int64)
    want = pos.size
    found = np.empty(0, np.int64)
    while found.size < want:
        draw = rng.integers(0, n * n, size=2 * (want - found.size) + 16)
        draw = draw[~np.isin(draw, pos)]
        found = np.concatenate([found, draw])
    keys = np.concatenate([pos, found[:want]])
    return keys // n, keys % n, np.concatenate([t.data, np.zeros(want)])


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class GaeForward:
    decoder: str
    z: np.ndarray
    pre: np.ndarray
    mask: np.ndarray | None
    q: np.ndarray | None
    recon: np.ndarray
    residual_grad: np.ndarray
    cells: tuple | None
    mse: float


def forward(a_hat, target, params: GcnParams, decoder: str = "gcn",
            dropout_p: float = 0.0, rng=None, cells=None) -> GaeForward:
    """Encode, decode and score reconstruction.

    ``cells = (rows, cols, target_values)`` switches to the sampled MSE (mean
    over those cells only); ``None`` means all N^2 cells.
    """
    if decoder not in DECODERS:
        raise ValueError(f"unknown decoder {decoder!r}")
    a = _csr(a_hat)
    z, pre, mask = encode(a, params, dropout_p, rng)
    q = None
    if decoder == "gcn":
        if params.w1 is None:
            raise ValueError("gcn decoder needs W1")
        q = np.asarray(a @ z)
    if cells is None:
        logits = q @ params.w1 if decoder == "gcn" else z @ z.T
        recon = expit(logits)
        diff = recon - _csr(target).toarray()
    else:
        rows, cols, tvals = cells
        if decoder == "gcn":
            logits = _kernels.gather_dot(q, params.w1.T, rows, cols)
        else:
            logits = _kernels.gather_dot(z, z, rows, cols)
        recon = expit(logits)
        diff = recon - tvals
    mse = float(np.mean(diff**2))
    # d mse / d logits
    residual_grad = (2.0 / diff.size) * diff * recon * (1.0 - recon)
    return GaeForward(decoder, z, pre, mask, q, recon, residual_grad, cells, mse)


def weight_penalty(params: GcnParams, weight_decay: float) -> float:
    total = float(np.sum(params.w0**2))
    if params.w1 is not None:
        total += float(np.sum(params.w1**2))
    return 0.5 * weight_decay * total


def backward(a_hat, fwd: GaeForward | None, params: GcnParams, dz_extra=None,
             mse_weight: float = 1.0, weight_decay: float = 0.0):
    """Gradients of ``mse_weight * mse + penalty + <dz_extra, Z>`` w.r.t. W0, W1.

    ``dz_extra`` is the upstream gradient reaching Z from other loss terms
    (the classification heads). The dropout mask cached in ``fwd`` is reused.
    Returns ``(g_w0, g_w1)``; ``g_w1`` is None for the inner-product decoder.
    """
    if fwd is None:
        raise ValueError("backward needs the cached forward pass")
    a = _csr(a_hat)
    d_logits = mse_weight * fwd.residual_grad
    g_w1 = None
    if fwd.decoder == "gcn":
        if fwd.cells is None:
            g_w1 = fwd.q.T @ d_logits
            d_q = d_logits @ params.w1.T
        else:
            rows, cols, _ = fwd.cells
            d_q, g_w1t = _kernels.scatter_outer(fwd.q, params.w1.T, rows, cols, d_logits)
            g_w1 = g_w1t.T
        d_z = np.asarray(a.T @ d_q)
    else:
        if fwd.cells is None:
            d_z = (d_logits + d_logits.T) @ fwd.z
        else:
            rows, cols, _ = fwd.cells
            d_left, d_right = _kernels.scatter_outer(fwd.z, fwd.z, rows, cols, d_logits)
            d_z = d_left + d_right
    if dz_extra is not None:
        d_z = d_z + dz_extra
    if fwd.mask is not None:
        d_z = d_z * fwd.mask
    d_pre = d_z * (fwd.pre > 0)
    g_w0 = np.asarray(a.T @ d_pre)
    if weight_decay:
        g_w0 = g_w0 + weight_decay * params.w0
        if g_w1 is not None:
            g_w1 = g_w1 + weight_decay * params.w1
    return g_w0, g_w1


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """Bias-corrected Adam, in place. Parameters absent from ``grads`` are untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"divergence detected (non-finite gradient for {name})")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_FIXED_TIME = (1980, 1, 1, 0, 0, 0)


def write_checkpoint(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Zip of ``meta.json`` plus one ``.npy`` per array, with fixed timestamps
    so identical contents give identical bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_FIXED_TIME)
        zf.writestr(info, json.dumps({"format": "mtgcn-ckpt-1", **meta}, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_FIXED_TIME), buf.getvalue())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.pop("format", None) != "mtgcn-ckpt-1":
            raise ValueError(f"{path}: not an mtgcn checkpoint")
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(
                    io.BytesIO(zf.read(name)), allow_pickle=False
                )
    return meta, arrays
