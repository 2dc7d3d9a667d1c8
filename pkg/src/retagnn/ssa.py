"""Causal scaled dot-product self-attention over session item embeddings."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk


@dataclass
class SsaParams:
    W_que: nk.Tensor
    W_key: nk.Tensor
    W_val: nk.Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d: int) -> "SsaParams":
        return cls(*(nk.Tensor(nk.glorot(rng, d, d), requires_grad=True) for _ in range(3)))

    def named(self, prefix: str) -> dict[str, nk.Tensor]:
        return {f"{prefix}.W_que": self.W_que, f"{prefix}.W_key": self.W_key,
                f"{prefix}.W_val": self.W_val}


def causal_mask(T: int) -> np.ndarray:
    """0 where column <= row, -inf above the diagonal."""
    mask = np.zeros((T, T))
    mask[np.triu_indices(T, k=1)] = -np.inf
    return mask


def ssa_forward(params: SsaParams, V_seq: nk.Tensor) -> tuple[nk.Tensor, nk.Tensor]:
    """Return ``(Z, beta)`` for a ``(T, d)`` or batched ``(B, T, d)`` sequence."""
    T, d = V_seq.shape[-2], V_seq.shape[-1]
    if T < 1:
        raise ValueError("sequence must have at least one position")
    q = nk.matmul(V_seq, params.W_que)
    k = nk.matmul(V_seq, params.W_key)
    v = nk.matmul(V_seq, params.W_val)
    e = nk.scale(nk.matmul(q, nk.transpose(k)), 1.0 / math.sqrt(d))
    beta = nk.softmax_with_mask(e, causal_mask(T))
    return nk.matmul(beta, v), beta


def export_attention(betas, path=None) -> np.ndarray:
    """Element-wise mean of attention matrices; optionally written as text."""
    betas = [np.asarray(b.value if isinstance(b, nk.Tensor) else b) for b in betas]
    stacked = np.concatenate([b.reshape(-1, *b.shape[-2:]) for b in betas], axis=0)
    if len({b.shape[-1] for b in betas}) != 1:
        raise ValueError("all sessions must share the same length")
    mean = stacked.mean(axis=0)
    if path is not None:
        write_matrix(path, mean)
    return mean


def write_matrix(path, matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.atleast_2d(matrix):
            fh.write(" ".join(f"{x:.8f}" for x in row) + "\n")


def read_matrix(path) -> np.ndarray:
    return np.loadtxt(path, ndmin=2)
