"""Noise predictor: patchify, embed, time-condition, N blocks, final layer.

Parameters live in a flat ``dict`` keyed ``"embed.W"``, ``"blocks.3.U"``,
etc. Values may be plain arrays (inference) or tape ``Var`` handles
(training); :func:`predict_noise` is written once for both.

Checkpoint file layout (little-endian)::

    8 bytes   magic  b"WBDTCKPT"
    4 bytes   uint32 format version (currently 1)
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header: config, step, epoch, metadata, and an
              ``arrays`` list of {name, shape, offset}
    payload   float64 arrays, C order, at the listed byte offsets
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .baseline_blocks import FFN_EXPANSION, BaselineBlockParams, baseline_layer
from .diffusion import NoiseSchedule, make_linear_schedule
from .numerics import Rng, ShapeError, value_of
from .whitebox_blocks import CodingRateConfig, WhiteBoxBlockParams, orthonormal_bases, whitebox_layer

BLOCK_KINDS = ("whitebox", "baseline")
POS_EMBEDDINGS = ("sincos", "none")
WHITEBOX_KEYS = ("U", "D")
BASELINE_KEYS = ("Wq", "Wk", "Wv", "Wo", "W1", "W2")


@dataclass
class ModelConfig:
    n_genes: int
    patch_size: int = 16
    hidden_dim: int = 128
    depth: int = 6
    heads: int = 4
    subspace_dim: int = 32
    block_kind: str = "whitebox"
    eta: float = 0.1
    lam: float = 0.1
    eps_distortion: float = 0.5
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    pos_embedding: str = "sincos"

    def __post_init__(self):
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.pos_embedding not in POS_EMBEDDINGS:
            raise ValueError(f"pos_embedding must be one of {POS_EMBEDDINGS}, got {self.pos_embedding!r}")
        for name in ("n_genes", "patch_size", "hidden_dim", "depth", "heads", "subspace_dim", "T"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.block_kind == "baseline" and self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads for the baseline block")
        if self.block_kind == "whitebox" and self.subspace_dim > self.hidden_dim:
            raise ValueError("subspace_dim cannot exceed hidden_dim")

    @property
    def padded_genes(self) -> int:
        p = self.patch_size
        return -(-self.n_genes // p) * p

    @property
    def n_tokens(self) -> int:
        return self.padded_genes // self.patch_size

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def coding_rate_config(self) -> CodingRateConfig:
        return CodingRateConfig(self.eps_distortion)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


# --------------------------------------------------------------------------
# shape helpers


def patchify(x, p: int) -> np.ndarray:
    """Split a gene vector into rows of ``p`` consecutive genes (zero-padded)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    pad = (-len(x)) % p
    if pad:
        x = np.concatenate([x, np.zeros(pad)])
    return x.reshape(-1, p)


def unpatchify(patches, n_genes: int) -> np.ndarray:
    return np.asarray(patches, dtype=np.float64).reshape(-1)[:n_genes]


def sinusoidal_embedding(t, d: int) -> np.ndarray:
    """``[sin(t f_k), cos(t f_k)]`` with frequencies geometric from 1 down to 1e-4."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = d // 2
    if half > 1:
        freqs = np.exp(-np.log(1e4) * np.arange(half) / (half - 1))
    else:
        freqs = np.ones(half)
    angles = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if d % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


# --------------------------------------------------------------------------
# parameters


def init_params(config: ModelConfig, rng: Rng) -> dict[str, np.ndarray]:
    d, p = config.hidden_dim, config.patch_size
    params = {
        "embed.W": rng.normal((p, d)) / np.sqrt(p),
        "embed.b": np.zeros(d),
        "time.W1": rng.normal((d, d)) / np.sqrt(d),
        "time.b1": np.zeros(d),
        "time.W2": rng.normal((d, d)) / np.sqrt(d),
        "time.b2": np.zeros(d),
    }
    for i in range(config.depth):
        if config.block_kind == "whitebox":
            params[f"blocks.{i}.U"] = orthonormal_bases(config.heads, d, config.subspace_dim, rng)
            # Kaiming normal, fan-in mode, ReLU gain
            params[f"blocks.{i}.D"] = rng.normal((d, d)) * np.sqrt(2.0 / d)
        else:
            h = FFN_EXPANSION * d
            for name in ("Wq", "Wk", "Wv", "Wo"):
                params[f"blocks.{i}.{name}"] = rng.normal((d, d)) / np.sqrt(d)
            params[f"blocks.{i}.W1"] = rng.normal((d, h)) * np.sqrt(2.0 / d)
            params[f"blocks.{i}.W2"] = rng.normal((h, d)) / np.sqrt(h)
    params["final.W"] = np.zeros((d, p))
    params["final.b"] = np.zeros(p)
    return params


def expected_shapes(config: ModelConfig) -> dict[str, tuple]:
    d, p, K = config.hidden_dim, config.patch_size, config.heads
    shapes = {
        "embed.W": (p, d),
        "embed.b": (d,),
        "time.W1": (d, d),
        "time.b1": (d,),
        "time.W2": (d, d),
        "time.b2": (d,),
    }
    for i in range(config.depth):
        if config.block_kind == "whitebox":
            shapes[f"blocks.{i}.U"] = (K, d, config.subspace_dim)
            shapes[f"blocks.{i}.D"] = (d, d)
        else:
            h = FFN_EXPANSION * d
            shapes.update({f"blocks.{i}.{n}": (d, d) for n in ("Wq", "Wk", "Wv", "Wo")})
            shapes[f"blocks.{i}.W1"] = (d, h)
            shapes[f"blocks.{i}.W2"] = (h, d)
    shapes["final.W"] = (d, p)
    shapes["final.b"] = (p,)
    return shapes


def check_params(params: dict, config: ModelConfig) -> None:
    expected = expected_shapes(config)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if value_of(params[name]).shape != shape:
            raise ShapeError(f"{name} has shape {value_of(params[name]).shape}, expected {shape}")


def block_params(params: dict, config: ModelConfig, i: int):
    if config.block_kind == "whitebox":
        return WhiteBoxBlockParams(
            U=params[f"blocks.{i}.U"], D=params[f"blocks.{i}.D"], eta=config.eta, lam=config.lam
        )
    return BaselineBlockParams(**{n: params[f"blocks.{i}.{n}"] for n in BASELINE_KEYS}, K=config.heads)


def parameter_count(params: dict) -> int:
    return int(sum(value_of(v).size for v in params.values()))


# --------------------------------------------------------------------------
# forward pass


def embed_tokens(patches, W, b=None):
    """``patches @ W + b``: map each ``p``-wide patch row to ``d`` features."""
    pv, wv = value_of(patches), value_of(W)
    if pv.shape[-1] != wv.shape[0]:
        raise ShapeError(f"patch width {pv.shape[-1]} does not match embedding {wv.shape}")
    out = nx.matmul(patches, W)
    return out if b is None else nx.add(out, b)


def embed_time(params: dict, t, d: int):
    """Sinusoidal features followed by a learned ``d -> d -> d`` ReLU map."""
    raw = sinusoidal_embedding(t, d)
    h = nx.relu(nx.add(nx.matmul(raw, params["time.W1"]), params["time.b1"]))
    return nx.add(nx.matmul(h, params["time.W2"]), params["time.b2"])


def predict_noise(params: dict, x_t, t, config: ModelConfig):
    """Predicted noise for ``x_t`` of shape ``(batch, n_genes)`` or ``(n_genes,)``.

    ``t`` is a scalar or one timestep per row. Returns the same shape as
    ``x_t`` (a ``Var`` when any parameter is one).
    """
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != config.n_genes:
        raise ShapeError(f"x_t must have {config.n_genes} genes per row, got shape {x.shape}")
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    p, d, nt = config.patch_size, config.hidden_dim, config.n_tokens

    pad = config.padded_genes - config.n_genes
    if pad:
        x = np.concatenate([x, np.zeros((B, pad))], axis=1)
    tokens = embed_tokens(x.reshape(B, nt, p), params["embed.W"], params["embed.b"])  # (B, nt, d)
    if config.pos_embedding == "sincos":
        # fixed, not learned: both block kinds are permutation-equivariant over tokens
        tokens = nx.add(tokens, sinusoidal_embedding(np.arange(nt), d))
    Z = nx.transpose(tokens)  # (B, d, nt)
    temb = nx.reshape(embed_time(params, t, d), (B, d, 1))
    cfg = config.coding_rate_config()
    for i in range(config.depth):
        Z = nx.add(Z, temb)
        bp = block_params(params, config, i)
        Z = whitebox_layer(Z, bp, cfg) if config.block_kind == "whitebox" else baseline_layer(Z, bp)
    out = nx.add(nx.matmul(nx.transpose(Z), params["final.W"]), params["final.b"])  # (B, nt, p)
    out = nx.reshape(out, (B, nt * p))
    if pad:
        out = nx.getitem(out, (slice(None), slice(0, config.n_genes)))
    if single:
        out = nx.reshape(out, (config.n_genes,))
    return out


class Model:
    """Frozen parameters bound to a config; callable as a noise predictor."""

    def __init__(self, config: ModelConfig, params: dict):
        check_params(params, config)
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Model":
        return cls(config, init_params(config, Rng.derive(seed, 0x1A17)))

    def __call__(self, x_t, t) -> np.ndarray:
        return predict_noise(self.params, x_t, t, self.config)

    def parameter_count(self) -> int:
        return parameter_count(self.params)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"WBDTCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is unreadable or inconsistent with its config."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    adam_m: dict[str, np.ndarray] | None = None
    adam_v: dict[str, np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)

    def model(self) -> Model:
        return Model(self.config, self.params)


def _array_groups(ckpt: Checkpoint):
    yield "param", ckpt.params
    if ckpt.adam_m is not None:
        yield "adam_m", ckpt.adam_m
    if ckpt.adam_v is not None:
        yield "adam_v", ckpt.adam_v


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    check_params(ckpt.params, ckpt.config)
    entries, chunks, offset = [], [], 0
    for group, arrays in _array_groups(ckpt):
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"name": f"{group}/{name}", "shape": list(np.shape(arr)), "offset": offset})
            chunks.append(data)
            offset += len(data)
    header = {
        "config": ckpt.config.to_dict(),
        "step": int(ckpt.step),
        "epoch": int(ckpt.epoch),
        "metadata": ckpt.metadata,
        "arrays": entries,
    }
    head = json.dumps(header).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path) -> int:
    """Write ``ckpt`` to ``path``; returns the byte count."""
    blob = checkpoint_bytes(ckpt)
    Path(path).write_bytes(blob)
    return len(blob)


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    try:
        version, head_len = struct.unpack_from("<IQ", blob, pos)
    except struct.error:
        raise CheckpointError("truncated checkpoint header") from None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    try:
        header = json.loads(blob[pos : pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = memoryview(blob)[pos + head_len :]
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["arrays"]:
        group, name = entry["name"].split("/", 1)
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + 8 * count > len(payload):
            raise CheckpointError(f"array {entry['name']} runs past end of file")
        arr = np.frombuffer(payload[start : start + 8 * count], dtype="<f8").reshape(shape)
        groups[group][name] = arr.astype(np.float64)
    config = ModelConfig.from_dict(header["config"])
    ckpt = Checkpoint(
        config=config,
        params=groups["param"],
        step=header["step"],
        epoch=header["epoch"],
        adam_m=groups["adam_m"] or None,
        adam_v=groups["adam_v"] or None,
        metadata=header.get("metadata", {}),
    )
    try:
        check_params(ckpt.params, config)
    except ShapeError as exc:
        raise CheckpointError(str(exc)) from None
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
