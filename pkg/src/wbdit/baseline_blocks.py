"""Standard transformer block used as the comparison baseline.

Same feature-major layout as :mod:`wbdit.whitebox_blocks`: ``Z`` is
``(..., d, n)``. Projections carry no biases so parameter counts compare
cleanly against the white-box block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, value_of

FFN_EXPANSION = 4


@dataclass
class BaselineBlockParams:
    Wq: np.ndarray  # (d, d)
    Wk: np.ndarray  # (d, d)
    Wv: np.ndarray  # (d, d)
    Wo: np.ndarray  # (d, d)
    W1: np.ndarray  # (d, 4d); hidden = relu(W1^T z)
    W2: np.ndarray  # (4d, d); out = W2^T hidden
    K: int = 4

    def __post_init__(self):
        d = value_of(self.Wq).shape[0]
        for name in ("Wq", "Wk", "Wv", "Wo"):
            if value_of(getattr(self, name)).shape != (d, d):
                raise ShapeError(f"{name} must be ({d}, {d})")
        h = FFN_EXPANSION * d
        if value_of(self.W1).shape != (d, h) or value_of(self.W2).shape != (h, d):
            raise ShapeError(f"W1 must be ({d}, {h}) and W2 ({h}, {d})")
        if self.K < 1 or d % self.K:
            raise ValueError(f"d={d} is not divisible by K={self.K}")

    @property
    def d(self) -> int:
        return value_of(self.Wq).shape[0]

    def parameter_count(self) -> int:
        return int(sum(value_of(getattr(self, n)).size for n in ("Wq", "Wk", "Wv", "Wo", "W1", "W2")))


def _split_heads(x, K: int):
    shape = value_of(x).shape
    d, n = shape[-2:]
    return nx.reshape(x, shape[:-2] + (K, d // K, n))


def attention(Z, params: BaselineBlockParams):
    """Multi-head scaled dot-product attention, column-softmax convention."""
    zv = value_of(Z)
    d, n = zv.shape[-2:]
    if d != params.d:
        raise ShapeError(f"Z has {d} features, params expect {params.d}")
    K = params.K
    q = _split_heads(nx.matmul(params.Wq, Z), K)
    k = _split_heads(nx.matmul(params.Wk, Z), K)
    v = _split_heads(nx.matmul(params.Wv, Z), K)
    # scores[i, j] = k_i . q_j, normalized over keys i for each query j
    scores = nx.mul(1.0 / np.sqrt(d // K), nx.matmul(nx.transpose(k), q))
    heads = nx.matmul(v, nx.softmax_columns(scores))
    merged = nx.reshape(heads, zv.shape)
    return nx.matmul(params.Wo, merged)


def feedforward(Z, params: BaselineBlockParams):
    hidden = nx.relu(nx.matmul(nx.transpose(params.W1), Z))
    return nx.matmul(nx.transpose(params.W2), hidden)


def baseline_layer(Z, params: BaselineBlockParams):
    """``Z + MHSA(Z)`` followed by ``+ FFN``, both residual."""
    h = nx.add(Z, attention(Z, params))
    return nx.add(h, feedforward(h, params))


def parameter_count(params) -> int:
    """Exact scalar parameter count of a block (either kind)."""
    return params.parameter_count()
