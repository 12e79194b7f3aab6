"""Distances between real and generated expression matrices.

KL and W1 are computed per gene on the marginals and averaged over genes.
MMD uses whole cell vectors with a Gaussian kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ExpressionMatrix


def _values(x) -> np.ndarray:
    v = x.values if isinstance(x, ExpressionMatrix) else np.asarray(x, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    return v


def _pair(real, gen):
    a, b = _values(real), _values(gen)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"gene count mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def _gene_kl(a: np.ndarray, b: np.ndarray, bins: int) -> float:
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        return 0.0
    ha, _ = np.histogram(a, bins=bins, range=(lo, hi))
    hb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    p = (ha + 1.0) / (len(a) + bins)
    q = (hb + 1.0) / (len(b) + bins)
    return float(np.sum(p * np.log(p / q)))


def kl_divergence(real, gen, bins: int = 50) -> float:
    """Mean over genes of KL(real || gen) between add-one-smoothed histograms."""
    a, b = _pair(real, gen)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sample")
    return float(np.mean([_gene_kl(a[:, j], b[:, j], bins) for j in range(a.shape[1])]))


def _gene_w1(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.sort(a), np.sort(b)
    if len(a) == len(b):
        return float(np.mean(np.abs(a - b)))
    # integral of |F_a - F_b| over the merged support
    allv = np.sort(np.concatenate([a, b]))
    widths = np.diff(allv)
    fa = np.searchsorted(a, allv[:-1], side="right") / len(a)
    fb = np.searchsorted(b, allv[:-1], side="right") / len(b)
    return float(np.sum(np.abs(fa - fb) * widths))


def wasserstein_distance(real, gen) -> float:
    """Mean over genes of the exact 1-D W1 between empirical marginals."""
    a, b = _pair(real, gen)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sample")
    return float(np.mean([_gene_w1(a[:, j], b[:, j]) for j in range(a.shape[1])]))


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d, 0.0)


def median_bandwidth(x, y) -> float:
    """Median pairwise Euclidean distance over the pooled sample."""
    pooled = np.concatenate([_values(x), _values(y)])
    d = np.sqrt(_sq_dists(pooled, pooled)[np.triu_indices(len(pooled), k=1)])
    med = float(np.median(d))
    return med if med > 0 else 1.0


def mmd_squared(real, gen, bandwidth: float | None = None, biased: bool = False) -> tuple[float, float]:
    """MMD^2 with kernel ``exp(-|x-y|^2 / (2 sigma^2))``.

    Returns ``(mmd2, sigma)``. The default is the unbiased U-statistic,
    which can dip below zero; ``biased=True`` gives the V-statistic.
    """
    x, y = _pair(real, gen)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError("MMD needs at least 2 samples on each side")
    sigma = median_bandwidth(x, y) if bandwidth is None else float(bandwidth)
    if not sigma > 0:
        raise ValueError("bandwidth must be positive")
    g = -0.5 / sigma**2
    kxx = np.exp(g * _sq_dists(x, x))
    kyy = np.exp(g * _sq_dists(y, y))
    kxy = np.exp(g * _sq_dists(x, y))
    if biased:
        val = kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
    else:
        val = (
            (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
            + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
            - 2.0 * kxy.mean()
        )
    return float(val), sigma


def mmd(real, gen, bandwidth: float | None = None) -> float:
    """``sqrt(max(0, MMD^2))`` from the unbiased estimator."""
    val, _ = mmd_squared(real, gen, bandwidth)
    return float(np.sqrt(max(val, 0.0)))


def project_2d(real, gen) -> tuple[np.ndarray, np.ndarray]:
    """Project both sets on the top two principal axes of the pooled data.

    Returns ``(points, labels)`` with labels ``"real"`` / ``"generated"``.
    Each axis is signed so its largest-magnitude loading is positive.
    """
    a, b = _pair(real, gen)
    pooled = np.concatenate([a, b])
    centered = pooled - pooled.mean(axis=0)
    cov = centered.T @ centered / max(len(pooled) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 1e-12 * max(1.0, float(np.abs(pooled).max())) ** 2:
        raise ValueError("data has rank 0; nothing to project")
    order = np.argsort(evals)[::-1][:2]
    axes = evecs[:, order]
    if axes.shape[1] < 2:
        axes = np.concatenate([axes, np.zeros((axes.shape[0], 1))], axis=1)
    signs = np.sign(axes[np.argmax(np.abs(axes), axis=0), range(axes.shape[1])])
    axes = axes * np.where(signs == 0, 1.0, signs)
    points = centered @ axes
    labels = np.array(["real"] * len(a) + ["generated"] * len(b))
    return points, labels


@dataclass
class MetricReport:
    kl: float
    wasserstein: float
    mmd: float
    mmd2_raw: float
    bins: int
    bandwidth: float
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        rows = {
            "kl": self.kl,
            "wasserstein": self.wasserstein,
            "mmd": self.mmd,
            "mmd2_raw": self.mmd2_raw,
            "bins": self.bins,
            "bandwidth": self.bandwidth,
            "seed": self.seed,
            **self.extra,
        }
        return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in rows.items())

    @staticmethod
    def parse(text: str) -> dict[str, str]:
        out = {}
        for line in text.splitlines():
            if line.strip() and not line.startswith("#"):
                key, _, val = line.partition("=")
                out[key.strip()] = val.strip()
        return out


def evaluate(real, gen, bins: int = 50, bandwidth: float | None = None, seed: int | None = None) -> MetricReport:
    mmd2, sigma = mmd_squared(real, gen, bandwidth)
    return MetricReport(
        kl=kl_divergence(real, gen, bins),
        wasserstein=wasserstein_distance(real, gen),
        mmd=float(np.sqrt(max(mmd2, 0.0))),
        mmd2_raw=mmd2,
        bins=bins,
        bandwidth=sigma,
        seed=seed,
    )
