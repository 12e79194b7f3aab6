"""``wbdit`` command line: gen-data, train, sample, eval, bench.

Settings resolve as defaults < ``--config`` file < command-line flags. The
config file is flat UTF-8 ``key = value`` with ``#`` comments; every key of
:class:`RunConfig` is also a ``--key-name`` flag. The resolved config is
echoed to ``<out>/config.txt``.

Errors exit nonzero after printing one line ``error: <category>: <message>``
to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import statistics
import sys
import time
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import __version__
from .data import (
    DataFormatError,
    ExpressionMatrix,
    SyntheticSpec,
    apply_record,
    generate_synthetic,
    invert_values,
    load_csv,
    preprocess,
    save_csv,
)
from .diffusion import ddim_sample, ddpm_sample
from .metrics import evaluate, project_2d
from .model import (
    Checkpoint,
    CheckpointError,
    Model,
    ModelConfig,
    block_params,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import NonFiniteError, Rng
from .training import TrainConfig, TrainingDivergedError, train

log = logging.getLogger("wbdit")

THREADS_ENV = "WBDIT_THREADS"

# fixed output names under --out
CONFIG_ECHO = "config.txt"
DATA_CSV = "data.csv"
TRAIN_LOG = "train_log.csv"
FINAL_CKPT = "checkpoint.wbdt"
CKPT_DIR = "checkpoints"
SAMPLES_CSV = "samples.csv"
REPORT = "report.txt"
SCATTER = "scatter.csv"
BENCH_REPORT = "bench_report.txt"

EXIT_CODES = {"config": 2, "io": 3, "data": 4, "checkpoint": 5, "diverged": 6, "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    threads: int = 0
    # synthetic data
    kind: str = "negbinomial_mixture"
    components: int = 2
    genes: int = 8
    cells: int = 500
    scale: float | None = None
    # model
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
    # training
    data: str = ""
    preprocess: str = "log1p,minmax"
    epochs: int = 400
    batch_size: int = 64
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    clip_norm: float | None = None
    checkpoint_every: int = 0
    resume: str = ""
    # sampling
    checkpoint: str = ""
    count: int = 500
    sampler: str = "ddpm"
    steps: int = 100
    ddim_eta: float = 0.0
    # evaluation
    real: str = ""
    gen: str = ""
    bins: int = 50
    bandwidth: float | None = None
    # benchmark
    bench_epochs: int = 3
    bench_sample_count: int = 100

    def model_config(self, n_genes: int) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(ModelConfig)} - {"n_genes"}
        return ModelConfig(n_genes=n_genes, **{k: getattr(self, k) for k in names})

    def train_config(self, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs if epochs is None else epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            eps_opt=self.eps_opt,
            clip_norm=self.clip_norm,
            checkpoint_every=self.checkpoint_every,
            seed=self.seed,
        )

    def preprocess_steps(self) -> list[str]:
        text = self.preprocess.strip()
        return [] if text in ("", "none") else [s.strip() for s in text.split(",")]

    def to_text(self) -> str:
        lines = [f"# wbdit {__version__} resolved config"]
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"


_OPTIONAL_FLOATS = {"scale", "clip_norm", "bandwidth"}
_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, text: str):
    default = _FIELDS[key].default
    text = text.strip()
    try:
        if key in _OPTIONAL_FLOATS:
            return None if text.lower() in ("none", "median", "") else float(text)
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise CliError("config", f"bad value for {key}: {text!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep:
            raise CliError("config", f"{source}:{no}: expected key = value")
        if key not in _FIELDS:
            raise CliError("config", f"{source}:{no}: unknown key {key!r}")
        values[key] = _coerce(key, val)
    return values


def resolve_config(config_path: str | None, overrides: dict) -> RunConfig:
    values = {}
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError("io", f"cannot read config {config_path}: {exc.strerror}") from None
        values.update(parse_config_text(text, config_path))
    values.update(overrides)
    return RunConfig(**values)


# --------------------------------------------------------------------------
# helpers


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(cfg.to_text(), encoding="utf-8")
    return out


def _load(path: str, what: str) -> ExpressionMatrix:
    if not path:
        raise CliError("config", f"no {what} file given")
    if not Path(path).is_file():
        raise CliError("io", f"{what} file not found: {path}")
    try:
        return load_csv(path)
    except DataFormatError as exc:
        raise CliError("data", str(exc)) from None


def _load_ckpt(path: str) -> Checkpoint:
    if not path:
        raise CliError("config", "no checkpoint given")
    if not Path(path).is_file():
        raise CliError("io", f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError("checkpoint", str(exc)) from None


def _limit_threads(n: int):
    """Context manager pinning BLAS threads (``n <= 0`` leaves them alone)."""
    return threadpool_limits(limits=n) if n > 0 else nullcontext()


def _effective_threads() -> int:
    info = threadpool_info()
    return max((i.get("num_threads", 1) for i in info), default=1)


def synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    scales = None if cfg.scale is None else [cfg.scale] * cfg.components
    return SyntheticSpec(
        kind=cfg.kind, components=cfg.components, genes=cfg.genes, cells=cfg.cells,
        seed=cfg.seed, scales=scales,
    )


def sample_cells(model: Model, count: int, sampler: str, steps: int, eta: float, seed: int) -> np.ndarray:
    schedule = model.config.schedule()
    rng = Rng.derive(seed, 0x5A)
    shape = (count, model.config.n_genes)
    if sampler == "ddpm":
        return ddpm_sample(schedule, model, shape, rng)
    if sampler == "ddim":
        return ddim_sample(schedule, model, shape, steps, eta, rng)
    raise CliError("config", f"sampler must be ddpm or ddim, got {sampler!r}")


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig) -> Path:
    spec = synthetic_spec(cfg)
    try:
        m = generate_synthetic(spec)
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    out = _out_dir(cfg)
    path = out / DATA_CSV
    save_csv(m, path, comments=[f"wbdit gen-data spec={spec.to_json()}"])
    return path


def cmd_train(cfg: RunConfig) -> Path:
    raw = _load(cfg.data, "data")
    if cfg.resume:
        start = _load_ckpt(cfg.resume)
        if raw.genes != start.config.n_genes:
            raise CliError("checkpoint", f"data has {raw.genes} genes, checkpoint expects {start.config.n_genes}")
        # stored scaling, so resumed training sees identical inputs
        try:
            values = apply_record(raw.values, start.metadata.get("transform_record", []))
        except ValueError as exc:
            raise CliError("data", str(exc)) from None
    else:
        try:
            prepared = preprocess(raw, cfg.preprocess_steps())
            mcfg = cfg.model_config(raw.genes)
        except ValueError as exc:
            raise CliError("config", str(exc)) from None
        values = prepared.values
        start = Checkpoint(
            config=mcfg,
            params=init_params(mcfg, Rng.derive(cfg.seed, 0x1A17)),
            metadata={
                "gene_names": raw.names(),
                "transform_record": prepared.transform_record,
                "data": str(cfg.data),
            },
        )
    out = _out_dir(cfg)
    ckpt_dir = out / CKPT_DIR
    log_path = out / TRAIN_LOG
    if not cfg.resume or not log_path.exists():
        log_path.write_text("epoch,wall_seconds,loss\n", encoding="utf-8")
    tcfg = cfg.train_config()

    def on_epoch(rec, ckpt):
        with log_path.open("a", encoding="utf-8") as fh:
            fh.write(f"{rec.epoch},{rec.wall_seconds!r},{rec.loss!r}\n")
        if tcfg.checkpoint_every and rec.epoch % tcfg.checkpoint_every == 0:
            ckpt_dir.mkdir(exist_ok=True)
            save_checkpoint(ckpt, ckpt_dir / f"epoch_{rec.epoch:06d}.wbdt")

    try:
        with _limit_threads(_threads(cfg)):
            result = train(start, values, tcfg, on_epoch=on_epoch)
    except TrainingDivergedError as exc:
        raise CliError("diverged", str(exc)) from None
    path = out / FINAL_CKPT
    save_checkpoint(result.checkpoint, path)
    return path


def cmd_sample(cfg: RunConfig) -> Path:
    ckpt = _load_ckpt(cfg.checkpoint)
    if cfg.count < 1:
        raise CliError("config", "count must be >= 1")
    with _limit_threads(_threads(cfg)):
        try:
            x = sample_cells(ckpt.model(), cfg.count, cfg.sampler, cfg.steps, cfg.ddim_eta, cfg.seed)
        except ValueError as exc:
            raise CliError("config", str(exc)) from None
        except NonFiniteError as exc:
            raise CliError("diverged", f"sampling produced non-finite values: {exc}") from None
    values = invert_values(x, ckpt.metadata.get("transform_record", []))
    names = ckpt.metadata.get("gene_names")
    m = ExpressionMatrix(values, names)
    out = _out_dir(cfg)
    path = out / SAMPLES_CSV
    prov = {
        "checkpoint": str(cfg.checkpoint),
        "checkpoint_step": ckpt.step,
        "sampler": cfg.sampler,
        "steps": cfg.steps if cfg.sampler == "ddim" else ckpt.config.T,
        "eta": cfg.ddim_eta if cfg.sampler == "ddim" else 1.0,
        "seed": cfg.seed,
        "count": cfg.count,
    }
    save_csv(m, path, comments=[f"wbdit sample {json.dumps(prov, sort_keys=True)}"])
    return path


def cmd_eval(cfg: RunConfig) -> Path:
    real = _load(cfg.real, "real")
    gen = _load(cfg.gen, "generated")
    if real.genes != gen.genes:
        raise CliError("data", f"gene count mismatch: real {real.genes}, generated {gen.genes}")
    try:
        report = evaluate(real, gen, bins=cfg.bins, bandwidth=cfg.bandwidth, seed=cfg.seed)
        points, labels = project_2d(real, gen)
    except ValueError as exc:
        raise CliError("data", str(exc)) from None
    report.extra.update({"real_cells": real.cells, "gen_cells": gen.cells, "genes": real.genes})
    out = _out_dir(cfg)
    (out / REPORT).write_text(report.to_text(), encoding="utf-8")
    with (out / SCATTER).open("w", encoding="utf-8") as fh:
        fh.write("x,y,label\n")
        for (x, y), lab in zip(points, labels):
            fh.write(f"{x!r},{y!r},{lab}\n")
    return out / REPORT


def closed_form_block_params(kind: str, d: int, K: int, p_sub: int) -> int:
    if kind == "whitebox":
        return K * d * p_sub + d * d
    return 12 * d * d


def cmd_bench(cfg: RunConfig) -> Path:
    if cfg.data:
        raw = _load(cfg.data, "data")
    else:
        raw = generate_synthetic(synthetic_spec(cfg))
    try:
        values = preprocess(raw, cfg.preprocess_steps()).values
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    if cfg.bench_epochs < 2:
        raise CliError("config", "bench_epochs must be >= 2 (the first epoch is warm-up)")
    out = _out_dir(cfg)
    threads = _threads(cfg)
    rows: dict[str, dict] = {}
    with _limit_threads(threads):
        pinned = _effective_threads()
        for kind in ("whitebox", "baseline"):
            mcfg = dataclasses.replace(cfg.model_config(raw.genes), block_kind=kind)
            try:
                start = Checkpoint(mcfg, init_params(mcfg, Rng.derive(cfg.seed, 0x1A17)))
            except ValueError as exc:
                raise CliError("config", str(exc)) from None
            try:
                result = train(start, values, cfg.train_config(cfg.bench_epochs))
            except TrainingDivergedError as exc:
                raise CliError("diverged", f"{kind}: {exc}") from None
            times = [r.wall_seconds for r in result.log[1:]]
            ckpt_bytes = save_checkpoint(result.checkpoint, out / f"bench_{kind}.wbdt")
            model = result.checkpoint.model()
            timings, status = {}, {}
            for sampler in ("ddpm", "ddim"):
                t0 = time.perf_counter()
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        sample_cells(model, cfg.bench_sample_count, sampler, cfg.steps, 0.0, cfg.seed)
                    timings[sampler], status[sampler] = time.perf_counter() - t0, "ok"
                except NonFiniteError:
                    # an unstable checkpoint should not hide the training numbers
                    timings[sampler], status[sampler] = float("nan"), "non-finite"
            block = block_params(model.params, mcfg, 0)
            rows[kind] = {
                "epoch_seconds_mean": statistics.fmean(times),
                "epoch_seconds_sd": statistics.stdev(times) if len(times) > 1 else 0.0,
                "final_loss": result.log[-1].loss,
                "params_total": model.parameter_count(),
                "params_per_block": block.parameter_count(),
                "params_per_block_closed_form": closed_form_block_params(
                    kind, mcfg.hidden_dim, mcfg.heads, mcfg.subspace_dim
                ),
                "checkpoint_bytes": ckpt_bytes,
                "ddpm_seconds": timings["ddpm"],
                "ddim_seconds": timings["ddim"],
                "ddpm_status": status["ddpm"],
                "ddim_status": status["ddim"],
            }
    wb, bl = rows["whitebox"], rows["baseline"]
    lines = [
        f"# wbdit bench: genes={raw.genes} cells={raw.cells} patch_size={cfg.patch_size} "
        f"hidden_dim={cfg.hidden_dim} depth={cfg.depth} heads={cfg.heads} subspace_dim={cfg.subspace_dim}",
        f"threads={pinned}",
        f"epochs={cfg.bench_epochs} (first excluded as warm-up)",
        f"ddim_steps={cfg.steps}",
        f"sample_count={cfg.bench_sample_count}",
    ]
    for kind, row in rows.items():
        for key, val in row.items():
            lines.append(f"{kind}.{key}={val!r}" if isinstance(val, float) else f"{kind}.{key}={val}")
    lines += [
        f"ratio.epoch_seconds={wb['epoch_seconds_mean'] / bl['epoch_seconds_mean']!r}",
        f"ratio.params_per_block={wb['params_per_block'] / bl['params_per_block']!r}",
        f"ratio.params_per_block_closed_form="
        f"{wb['params_per_block_closed_form'] / bl['params_per_block_closed_form']!r}",
        f"ratio.checkpoint_bytes={wb['checkpoint_bytes'] / bl['checkpoint_bytes']!r}",
    ]
    path = out / BENCH_REPORT
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _threads(cfg: RunConfig) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise CliError("config", f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return cfg.threads


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wbdit", description="White-box diffusion transformer toolkit")
    parser.add_argument("--version", action="version", version=f"wbdit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("-v", "--verbose", action="store_true")
        for key in _FIELDS:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="VALUE")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {}
    try:
        for key in _FIELDS:
            val = getattr(args, key)
            if val is not None:
                overrides[key] = _coerce(key, val)
        cfg = resolve_config(args.config, overrides)
        path = COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.category]
    except NonFiniteError as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return EXIT_CODES["diverged"]
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    except (ValueError, TypeError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
