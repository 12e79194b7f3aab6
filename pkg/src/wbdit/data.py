"""Expression matrices: CSV I/O, invertible preprocessing, synthetic data.

CSV layout is cells x genes with a header row of gene names. Lines that
start with ``#`` are comments (provenance) and are skipped on load.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

PREPROCESS_STEPS = ("log1p", "minmax")


class DataFormatError(ValueError):
    """Input file is malformed."""


@dataclass
class ExpressionMatrix:
    values: np.ndarray  # (cells, genes)
    gene_names: list[str] | None = None
    transform_record: list[dict] = field(default_factory=list)
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {self.values.shape}")
        if self.cells < 1 or self.genes < 1:
            raise ValueError("expression matrix needs at least one cell and one gene")
        if not np.isfinite(self.values).all():
            raise ValueError("expression values must be finite")
        if self.gene_names is not None and len(self.gene_names) != self.genes:
            raise ValueError("gene_names length does not match gene count")

    @property
    def cells(self) -> int:
        return self.values.shape[0]

    @property
    def genes(self) -> int:
        return self.values.shape[1]

    def names(self) -> list[str]:
        return list(self.gene_names) if self.gene_names else [f"g{j + 1}" for j in range(self.genes)]


# --------------------------------------------------------------------------
# CSV


def load_csv(path) -> ExpressionMatrix:
    """Parse a cells x genes CSV; any malformed row is an error, never repaired."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        lines = [(i + 1, line) for i, line in enumerate(fh) if not line.startswith("#")]
    lines = [(no, line) for no, line in lines if line.strip()]
    if not lines:
        raise DataFormatError(f"{path}: missing header row")
    header_no, header_line = lines[0]
    header = next(csv.reader([header_line]))
    if not header or any(not h.strip() for h in header):
        raise DataFormatError(f"{path}:{header_no}: empty gene name in header")
    rows = []
    for line_no, line in lines[1:]:
        fields_ = next(csv.reader([line]))
        if len(fields_) != len(header):
            raise DataFormatError(
                f"{path}:{line_no}: expected {len(header)} fields, found {len(fields_)}"
            )
        row = []
        for col, raw in enumerate(fields_):
            text = raw.strip()
            try:
                val = float(text)
            except ValueError:
                raise DataFormatError(f"{path}:{line_no}: non-numeric field {raw!r} in column {col + 1}") from None
            if not np.isfinite(val):
                raise DataFormatError(f"{path}:{line_no}: non-finite field {raw!r} in column {col + 1}")
            row.append(val)
        rows.append(row)
    if not rows:
        raise DataFormatError(f"{path}: no cells")
    return ExpressionMatrix(np.array(rows, dtype=np.float64), gene_names=[h.strip() for h in header])


def format_csv(m: ExpressionMatrix, comments: list[str] | None = None) -> str:
    buf = io.StringIO()
    for c in comments or []:
        for line in str(c).splitlines():
            buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(m.names())
    for row in m.values:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def save_csv(m: ExpressionMatrix, path, comments: list[str] | None = None) -> None:
    """Write at full precision (``repr`` round-trips float64 exactly)."""
    Path(path).write_text(format_csv(m, comments), encoding="utf-8")


# --------------------------------------------------------------------------
# preprocessing


def preprocess(m: ExpressionMatrix, steps) -> ExpressionMatrix:
    """Apply ``steps`` in order, extending the transform record.

    ``log1p`` needs values above -1. ``minmax`` scales each gene to
    ``[-1, 1]``; a constant gene maps to 0 and is listed under ``degenerate``.
    """
    values = m.values.copy()
    record = list(m.transform_record)
    for step in steps:
        if step == "log1p":
            if np.any(values <= -1.0):
                raise ValueError("log1p needs all values > -1")
            values = np.log1p(values)
            record.append({"step": "log1p"})
        elif step == "minmax":
            lo, hi = values.min(axis=0), values.max(axis=0)
            span = hi - lo
            degenerate = span == 0
            safe = np.where(degenerate, 1.0, span)
            values = np.where(degenerate, 0.0, 2.0 * (values - lo) / safe - 1.0)
            record.append(
                {
                    "step": "minmax",
                    "min": lo.tolist(),
                    "max": hi.tolist(),
                    "degenerate": np.flatnonzero(degenerate).tolist(),
                }
            )
        else:
            raise ValueError(f"unknown preprocessing step {step!r}; choose from {PREPROCESS_STEPS}")
    return ExpressionMatrix(values, m.gene_names, record, m.labels)


def apply_record(values, record: list[dict]) -> np.ndarray:
    """Re-apply a stored transform record (fixed scaling) to new raw values."""
    x = np.array(values, dtype=np.float64)
    for entry in record:
        if entry["step"] == "log1p":
            if np.any(x <= -1.0):
                raise ValueError("log1p needs all values > -1")
            x = np.log1p(x)
        elif entry["step"] == "minmax":
            lo, hi = np.asarray(entry["min"]), np.asarray(entry["max"])
            span = hi - lo
            x = np.where(span == 0, 0.0, 2.0 * (x - lo) / np.where(span == 0, 1.0, span) - 1.0)
        else:
            raise ValueError(f"unknown transform step {entry['step']!r}")
    return x


def invert_values(values, record: list[dict]) -> np.ndarray:
    """Undo a transform record on raw values (e.g. generated samples)."""
    x = np.array(values, dtype=np.float64)
    for entry in reversed(record):
        if entry["step"] == "log1p":
            x = np.expm1(x)
        elif entry["step"] == "minmax":
            lo, hi = np.asarray(entry["min"]), np.asarray(entry["max"])
            x = (x + 1.0) / 2.0 * (hi - lo) + lo
            # hi == lo there, so the line above already restored the constant
        else:
            raise ValueError(f"unknown transform step {entry['step']!r}")
    return x


def invert_preprocess(m: ExpressionMatrix) -> ExpressionMatrix:
    return ExpressionMatrix(invert_values(m.values, m.transform_record), m.gene_names, [], m.labels)


# --------------------------------------------------------------------------
# synthetic data

SYNTHETIC_KINDS = ("gaussian_mixture", "negbinomial_mixture")


@dataclass
class SyntheticSpec:
    """Mixture recipe.

    ``means`` is ``(components, genes)``. ``scales`` is the per-component
    standard deviation (Gaussian) or NB dispersion ``r`` (variance
    ``mu + mu^2 / r``), either scalar per component or per gene. Omitted
    means/scales are drawn from the seed.
    """

    kind: str = "gaussian_mixture"
    components: int = 2
    genes: int = 8
    cells: int = 500
    seed: int = 0
    weights: list[float] | None = None
    means: list[list[float]] | None = None
    scales: list | None = None

    def validate(self) -> None:
        if self.kind not in SYNTHETIC_KINDS:
            raise ValueError(f"kind must be one of {SYNTHETIC_KINDS}, got {self.kind!r}")
        if self.components < 1 or self.genes < 1:
            raise ValueError("components and genes must be >= 1")
        if self.cells < 1:
            raise ValueError("cells must be >= 1")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (self.components,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("weights must be non-negative, one per component, summing to 1")
        if self.means is not None and np.shape(self.means) != (self.components, self.genes):
            raise ValueError("means must be (components, genes)")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def _resolved(spec: SyntheticSpec, rng: Rng):
    K, G = spec.components, spec.genes
    weights = np.full(K, 1.0 / K) if spec.weights is None else np.asarray(spec.weights, dtype=np.float64)
    if spec.means is not None:
        means = np.asarray(spec.means, dtype=np.float64)
    elif spec.kind == "gaussian_mixture":
        means = 2.0 * rng.normal((K, G))
    else:
        means = np.exp(rng.uniform(0.0, 3.0, (K, G)))
    if spec.scales is not None:
        scales = np.broadcast_to(np.asarray(spec.scales, dtype=np.float64).reshape(K, -1), (K, G))
    elif spec.kind == "gaussian_mixture":
        scales = np.full((K, G), 0.5)
    else:
        scales = np.full((K, G), 2.0)
    return weights, means, scales


def generate_synthetic(spec: SyntheticSpec) -> ExpressionMatrix:
    """Seeded draw; component labels are kept in ``labels``."""
    spec.validate()
    rng = Rng(spec.seed)
    weights, means, scales = _resolved(spec, rng)
    labels = rng.multinomial_labels(spec.cells, weights)
    mu = means[labels]
    if spec.kind == "gaussian_mixture":
        if np.any(scales < 0):
            raise ValueError("Gaussian scales must be >= 0")
        values = mu + scales[labels] * rng.normal(mu.shape)
    else:
        r = scales[labels]
        if np.any(means <= 0) or np.any(scales <= 0):
            raise ValueError("negative-binomial means and dispersions must be positive")
        values = rng.poisson(rng.gamma(r, mu / r)).astype(np.float64)
    names = [f"gene{j + 1}" for j in range(spec.genes)]
    return ExpressionMatrix(values, names, [], labels)
