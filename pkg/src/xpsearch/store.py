"""Learnable tables, Adagrad state, gradient clipping and checkpoints."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from .corpus import DOMAINS, KG_RELATIONS

ADAGRAD_EPS = 1e-10
LR_FLOOR = 1e-4
MAGIC = b"XPSCKPT\x00"
VERSION = 1
MODEL_KINDS = ("drem", "drem_hgn")

ENTITY_TABLES = ("word", "user", "item", "brand", "category")
ATTENTION_SCOPES = DOMAINS + ("user",)


class CheckpointError(Exception):
    pass


class SparseRows(NamedTuple):
    """Gradient rows for a subset of a table; ``index`` is unique."""

    index: np.ndarray
    values: np.ndarray


def attention_names(scope: str) -> tuple[str, str, str]:
    return f"att_{scope}_Wf", f"att_{scope}_b", f"att_{scope}_Wh"


class EmbeddingStore:
    """All learnable parameters of one model plus matching Adagrad accumulators."""

    def __init__(self, alpha: int, beta: int, model_kind: str, sizes: Mapping[str, int],
                 params: dict[str, np.ndarray], accum: dict[str, np.ndarray] | None = None):
        self.alpha = alpha
        self.beta = beta
        self.model_kind = model_kind
        self.sizes = dict(sizes)
        self.params = params
        self.accum = accum if accum is not None else {k: np.zeros_like(v) for k, v in params.items()}

    def __getitem__(self, name) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def table_order(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "EmbeddingStore":
        return EmbeddingStore(
            self.alpha, self.beta, self.model_kind, self.sizes,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.accum.items()},
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params.values())

    def equals(self, other: "EmbeddingStore") -> bool:
        if self.table_order() != other.table_order():
            return False
        return all(
            np.array_equal(self.params[k], other.params[k]) and np.array_equal(self.accum[k], other.accum[k])
            for k in self.params
        )


def init_store(sizes: Mapping[str, int], alpha: int, beta: int = 2, model_kind: str = "drem",
               seed: int = 0, dtype=np.float64) -> EmbeddingStore:
    """Sample a fresh store.

    Vectors and weight tensors are uniform in ``[-0.5/alpha, 0.5/alpha]``;
    biases start at zero.  The user table exists only for vanilla DREM, and
    the attention tensors only for the gated variant.
    """
    if alpha < 1 or beta < 1:
        raise ValueError("alpha and beta must be >= 1")
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {model_kind!r}")
    for t in ENTITY_TABLES:
        if t == "user" and model_kind != "drem":
            continue
        if sizes.get(t, 0) < 1:
            raise ValueError(f"registry {t!r} is empty")
    rng = np.random.default_rng(seed)
    bound = 0.5 / alpha

    def uni(*shape):
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    params: dict[str, np.ndarray] = {}
    for t in ENTITY_TABLES:
        if t == "user" and model_kind != "drem":
            continue
        params[t] = uni(sizes[t], alpha)
    params["relation"] = uni(len(KG_RELATIONS), alpha)
    params["proj_W"] = uni(alpha, alpha)
    params["proj_b"] = np.zeros(alpha, dtype=dtype)
    if model_kind == "drem_hgn":
        for scope in ATTENTION_SCOPES:
            wf, b, wh = attention_names(scope)
            params[wf] = uni(alpha, beta, alpha)
            params[b] = np.zeros((alpha, beta), dtype=dtype)
            params[wh] = uni(beta)
    return EmbeddingStore(alpha, beta, model_kind, {t: int(sizes[t]) for t in ENTITY_TABLES}, params)


# ---------------------------------------------------------------------------
# optimisation primitives


def _values(g):
    return g.values if isinstance(g, SparseRows) else g


def global_norm(grads) -> float:
    if isinstance(grads, Mapping):
        return float(np.sqrt(sum(float(np.sum(_values(g) ** 2)) for g in grads.values())))
    return float(np.sqrt(np.sum(np.asarray(_values(grads)) ** 2)))


def clip_gradients(grads, max_norm: float):
    """Rescale the whole batch gradient so its global L2 norm is at most ``max_norm``.

    Accepts a bare array, a ``SparseRows`` or a mapping of either.  Raises
    ``FloatingPointError`` on NaN, which the trainer treats as divergence.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if np.isnan(norm):
        raise FloatingPointError("NaN in gradients")
    if norm <= max_norm:
        return grads
    scale = max_norm / norm

    def sc(g):
        if isinstance(g, SparseRows):
            return SparseRows(g.index, g.values * scale)
        return np.asarray(g) * scale

    if isinstance(grads, Mapping):
        return {k: sc(g) for k, g in grads.items()}
    return sc(grads)


def adagrad_step(param: np.ndarray, grad: np.ndarray, accum: np.ndarray, learning_rate: float,
                 eps: float = ADAGRAD_EPS) -> np.ndarray:
    """In-place Adagrad update of ``param`` and ``accum``; returns ``param``."""
    if param.shape != grad.shape or accum.shape != grad.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, accum {accum.shape}")
    if learning_rate < 0:
        raise ValueError("learning_rate must be >= 0")
    accum += grad * grad
    param -= learning_rate * grad / (np.sqrt(accum) + eps)
    return param


def apply_gradients(store: EmbeddingStore, grads: Mapping[str, object], learning_rate: float):
    for name, g in grads.items():
        p, a = store.params[name], store.accum[name]
        if isinstance(g, SparseRows):
            rows_p, rows_a = p[g.index], a[g.index]
            adagrad_step(rows_p, g.values, rows_a, learning_rate)
            p[g.index] = rows_p
            a[g.index] = rows_a
        else:
            adagrad_step(p, g, a, learning_rate)


def decay_schedule(initial_lr: float, progress: float) -> float:
    """Linear decay to zero, floored at ``1e-4 * initial_lr``."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    return max(initial_lr * (1.0 - progress), LR_FLOOR * initial_lr)


# ---------------------------------------------------------------------------
# checkpoint format: header, then (name, shape, f64 LE params, f64 LE accum) per table


def save_checkpoint(store: EmbeddingStore, path) -> Path:
    path = Path(path)
    kind = store.model_kind.encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIB", VERSION, store.alpha, store.beta, len(kind)))
        fh.write(kind)
        fh.write(struct.pack("<I", len(ENTITY_TABLES)))
        for t in ENTITY_TABLES:
            name = t.encode()
            fh.write(struct.pack("<B", len(name)) + name + struct.pack("<Q", store.sizes[t]))
        fh.write(struct.pack("<I", len(store.params)))
        for name, arr in store.params.items():
            bname = name.encode()
            fh.write(struct.pack("<B", len(bname)) + bname)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(store.accum[name], dtype="<f8").tobytes())
    return path


def load_checkpoint(path, expected_sizes: Mapping[str, int] | None = None) -> EmbeddingStore:
    """Read a checkpoint; reject it when registry sizes differ from ``expected_sizes``."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, data, off)
        off += struct.calcsize(fmt)
        return vals

    def take_str(n):
        nonlocal off
        s = data[off:off + n].decode()
        off += n
        return s

    version, alpha, beta, klen = take("<IIIB")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    kind = take_str(klen)
    sizes = {}
    (n_reg,) = take("<I")
    for _ in range(n_reg):
        (ln,) = take("<B")
        name = take_str(ln)
        (sizes[name],) = take("<Q")
    if expected_sizes is not None:
        for t in ENTITY_TABLES:
            if sizes.get(t) != expected_sizes.get(t):
                raise CheckpointError(
                    f"{path}: registry size mismatch for {t}: checkpoint {sizes.get(t)}, corpus {expected_sizes.get(t)}"
                )
    params, accum = {}, {}
    (n_tab,) = take("<I")
    for _ in range(n_tab):
        (ln,) = take("<B")
        name = take_str(ln)
        (nd,) = take("<B")
        shape = take(f"<{nd}Q")
        count = int(np.prod(shape)) if nd else 1
        nbytes = 8 * count
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += nbytes
        accum[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return EmbeddingStore(alpha, beta, kind, sizes, params, accum)
