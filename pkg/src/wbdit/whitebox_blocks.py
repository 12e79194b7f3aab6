"""White-box transformer layer: coding rates, subspace self-attention, ISTA.

Token matrices are laid out feature-major, ``Z`` of shape ``(d, n)`` with
one column per token, optionally with leading batch axes ``(..., d, n)``.
Subspace bases are stored stacked as ``U`` of shape ``(K, d, p_sub)``.

All layer ops accept plain arrays or tape :class:`~wbdit.numerics.Var`
handles and are differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, value_of


@dataclass(frozen=True)
class CodingRateConfig:
    """Rate distortion ``eps``; the rate coefficients depend on the call's shapes."""

    eps_distortion: float = 0.5

    def __post_init__(self):
        if not self.eps_distortion > 0:
            raise ValueError("eps_distortion must be positive")

    def alpha_coef(self, d: int, n: int) -> float:
        return d / (n * self.eps_distortion**2)

    def beta_coef(self, p_sub: int, n: int) -> float:
        return p_sub / (n * self.eps_distortion**2)


@dataclass
class WhiteBoxBlockParams:
    U: np.ndarray  # (K, d, p_sub)
    D: np.ndarray  # (d, d)
    eta: float = 0.1
    lam: float = 0.1

    def __post_init__(self):
        u, dmat = value_of(self.U), value_of(self.D)
        if u.ndim != 3:
            raise ShapeError(f"U must be (K, d, p_sub), got {u.shape}")
        if dmat.shape != (u.shape[1], u.shape[1]):
            raise ShapeError(f"D must be ({u.shape[1]}, {u.shape[1]}), got {dmat.shape}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")

    @property
    def K(self) -> int:
        return value_of(self.U).shape[0]

    @property
    def d(self) -> int:
        return value_of(self.U).shape[1]

    @property
    def p_sub(self) -> int:
        return value_of(self.U).shape[2]

    def parameter_count(self) -> int:
        return int(value_of(self.U).size + value_of(self.D).size)


def orthonormal_bases(K: int, d: int, p_sub: int, rng: nx.Rng) -> np.ndarray:
    """``K`` independent ``d x p_sub`` bases from QR of Gaussian matrices."""
    if p_sub > d:
        raise ValueError("p_sub cannot exceed d for orthonormal columns")
    out = np.empty((K, d, p_sub))
    for k in range(K):
        q, r = np.linalg.qr(rng.normal((d, p_sub)))
        out[k] = q * np.sign(np.diag(r))
    return out


def coding_rate(Z, cfg: CodingRateConfig):
    """``R(Z) = 1/2 logdet(I_n + alpha Z^T Z)`` for a single ``d x n`` matrix."""
    d, n = value_of(Z).shape
    gram = nx.matmul(nx.transpose(Z), Z)
    return nx.mul(0.5, nx.logdet_psd(nx.add(np.eye(n), nx.mul(cfg.alpha_coef(d, n), gram))))


def conditional_coding_rate(Z, U, cfg: CodingRateConfig):
    """Sum over subspaces of the coding rate of ``U_k^T Z`` with the ``beta`` coefficient."""
    zv, uv = value_of(Z), value_of(U)
    if uv.ndim != 3 or uv.shape[1] != zv.shape[0]:
        raise ShapeError(f"bases {uv.shape} do not match Z {zv.shape}")
    K, _, p_sub = uv.shape
    n = zv.shape[1]
    beta = cfg.beta_coef(p_sub, n)
    total = 0.0
    for k in range(K):
        proj = nx.matmul(nx.transpose(U[k]), Z)
        gram = nx.matmul(nx.transpose(proj), proj)
        total = nx.add(total, nx.mul(0.5, nx.logdet_psd(nx.add(np.eye(n), nx.mul(beta, gram)))))
    return total


def ssa(Z, U_k):
    """Subspace self-attention for one basis: ``P softmax(P^T P)`` with ``P = U_k^T Z``.

    The softmax normalizes columns, so each output token is a convex
    combination of projected tokens. Accepts a stack of bases
    ``(K, d, p_sub)`` against ``Z`` of shape ``(..., 1, d, n)`` as well.
    """
    zv, uv = value_of(Z), value_of(U_k)
    if uv.shape[-2] != zv.shape[-2]:
        raise ShapeError(f"basis {uv.shape} does not match Z {zv.shape}")
    proj = nx.matmul(nx.transpose(U_k), Z)
    attn = nx.softmax_columns(nx.matmul(nx.transpose(proj), proj))
    return nx.matmul(proj, attn)


def _lift_batch(Z):
    """Insert a head axis before the last two: ``(..., d, n) -> (..., 1, d, n)``."""
    shape = value_of(Z).shape
    return nx.reshape(Z, shape[:-2] + (1,) + shape[-2:])


def mssa(Z, params: WhiteBoxBlockParams, cfg: CodingRateConfig):
    """``beta * sum_k U_k SSA(Z | U_k)``, shape ``(..., d, n)``."""
    zv = value_of(Z)
    if zv.shape[-2] != params.d:
        raise ShapeError(f"Z has {zv.shape[-2]} features, params expect {params.d}")
    n = zv.shape[-1]
    heads = ssa(_lift_batch(Z), params.U)  # (..., K, p_sub, n)
    lifted = nx.matmul(params.U, heads)  # (..., K, d, n)
    return nx.mul(cfg.beta_coef(params.p_sub, n), nx.sum(lifted, axis=-3))


def mssa_residual(Z, params: WhiteBoxBlockParams, cfg: CodingRateConfig):
    """Compression half-step ``Z + MSSA(Z)``."""
    return nx.add(Z, mssa(Z, params, cfg))


def ista_step(Z_half, params: WhiteBoxBlockParams):
    """``ReLU(Z - eta D^T (D Z - Z) - eta lam)``, one shrinkage step against ``D``."""
    zv = value_of(Z_half)
    if zv.shape[-2] != params.d:
        raise ShapeError(f"Z has {zv.shape[-2]} features, dictionary is {params.d}x{params.d}")
    residual = nx.sub(nx.matmul(params.D, Z_half), Z_half)
    grad = nx.matmul(nx.transpose(params.D), residual)
    return nx.relu(nx.sub(nx.sub(Z_half, nx.mul(params.eta, grad)), params.eta * params.lam))


def whitebox_layer(Z, params: WhiteBoxBlockParams, cfg: CodingRateConfig):
    return ista_step(mssa_residual(Z, params, cfg), params)


def sparse_rate_objective(Z, U, cfg: CodingRateConfig, lam: float) -> float:
    """Diagnostic ``R(Z) - R^c(Z | U) - lam * ||Z||_0``.

    ``||Z||_0`` counts entries with magnitude above 1e-12.
    """
    zv = np.asarray(value_of(Z), dtype=np.float64)
    nnz = int(np.count_nonzero(np.abs(zv) > 1e-12))
    r = float(value_of(coding_rate(zv, cfg)))
    rc = float(value_of(conditional_coding_rate(zv, value_of(U), cfg)))
    return r - rc - lam * nnz
