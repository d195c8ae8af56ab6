"""Joint training of embeddings, encoder, and diffusion head, plus
checkpoint serialization and the parameter-count report.

Checkpoints are a single self-describing file: a magic tag, a canonical JSON
header (registry, dimensions, schedule constants, config echo, RNG state,
tensor manifest), then raw little-endian float32 blobs in manifest order.
Canonical JSON plus fixed blob order makes load/save round trips
byte-identical, which the reproducibility tests assert literally.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import diffusion as dfn
from . import model as mdl
from .data import (FeatureRegistry, RawTable, fit_standardization, load_csv,
                   sample_training_batch, split_rows)
from .errors import ConfigError, DataError, NumericError, TrainingDiverged
from .optim import AdamW, CosineRestarts, adamw_step

CHECKPOINT_MAGIC = b"TBDNSCK1"

PRESETS: dict[str, dict] = {
    # Reference-scale settings: 192-wide embeddings, 24 heads, 64-token
    # context, ten 1024-epoch annealing cycles.
    "paper": {
        "d_model": 192, "n_heads": 24, "n_layers": 2, "context_length": 64,
        "epochs": 10240, "cycle_length": 1024, "batch_size": 512,
    },
    # Desk-scale settings sized for the 9-feature housing table.
    "housing": {
        "d_model": 16, "n_heads": 2, "n_layers": 2, "context_length": 10,
        "epochs": 1280, "cycle_length": 128, "batch_size": 512,
    },
}


@dataclass
class TrainConfig:
    preset: str | None = None
    dataset: str | None = None
    checkpoint: str | None = None
    log: str | None = None
    seed: int = 0
    epochs: int = 256
    cycle_length: int = 128
    batch_size: int = 256
    context_length: int = 10
    d_model: int = 16
    n_heads: int = 2
    n_layers: int = 2
    n_steps: int = 120
    beta_start: float = 1e-5
    beta_end: float = 0.1
    eta_max: float = 1e-3
    eta_min: float = 1e-10
    holdout_fraction: float = 0.1

    def __post_init__(self):
        for name in ("epochs", "cycle_length", "batch_size", "n_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.context_length < 2:
            raise ConfigError("context_length must be at least 2")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def make_config(preset: str | None = None, **overrides) -> TrainConfig:
    """Preset values first, explicit overrides on top."""
    values: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}, have {sorted(PRESETS)}")
        values.update(PRESETS[preset])
        values["preset"] = preset
    values.update(overrides)
    return TrainConfig(**values)


def parse_config_file(path) -> dict:
    """Flat key = value lines; '#' starts a comment; keys mirror TrainConfig."""
    out: dict = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, value = (s.strip() for s in line.split("=", 1))
                if key not in _FIELD_TYPES:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                out[key] = _coerce(key, value, f"{path}:{lineno}")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return out


def _coerce(key: str, value: str, where: str):
    tp = _FIELD_TYPES[key]
    try:
        if tp.startswith("int"):
            return int(value)
        if tp.startswith("float"):
            return float(value)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} for {key}") from None
    return value


@dataclass
class Checkpoint:
    registry: FeatureRegistry
    dims: mdl.ModelDims
    schedule: dfn.NoiseSchedule
    config: dict
    rng_state: dict
    epoch: int
    params: dict[str, ad.Tensor]
    history: list[tuple[int, float, float]] = field(default_factory=list, repr=False)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    manifest = [[name, list(t.shape)] for name, t in ckpt.params.items()]
    header = {
        "format": 1,
        "registry": ckpt.registry.to_dict(),
        "dims": ckpt.dims.to_dict(),
        "schedule": ckpt.schedule.to_dict(),
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "epoch": ckpt.epoch,
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, _ in manifest:
            data = np.ascontiguousarray(ckpt.params[name].data, dtype="<f4")
            fh.write(data.tobytes())


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise DataError(f"{path}: not a checkpoint file")
            (blob_len,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(blob_len).decode())
            params: dict[str, ad.Tensor] = {}
            for name, shape in header["manifest"]:
                n = int(np.prod(shape)) if shape else 1
                raw = fh.read(4 * n)
                if len(raw) != 4 * n:
                    raise DataError(f"{path}: truncated blob for {name}")
                arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
                params[name] = ad.parameter(arr)
            trailing = fh.read(1)
            if trailing:
                raise DataError(f"{path}: trailing bytes after manifest blobs")
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    sched = header["schedule"]
    return Checkpoint(
        registry=FeatureRegistry.from_dict(header["registry"]),
        dims=mdl.ModelDims.from_dict(header["dims"]),
        schedule=dfn.build_schedule(sched["steps"], sched["beta_start"], sched["beta_end"]),
        config=header["config"],
        rng_state=header["rng_state"],
        epoch=int(header["epoch"]),
        params=params,
    )


def _usable_rows(values: np.ndarray) -> np.ndarray:
    return np.flatnonzero((~np.isnan(values)).any(axis=1))


def train(config: TrainConfig, table: RawTable | None = None) -> Checkpoint:
    """Full training run; returns the final checkpoint (also written to
    config.checkpoint when set).

    Every epoch shuffles the training rows, draws fresh (subset, target)
    examples per row, and takes one AdamW step per batch at the cosine
    warm-restart rate for that epoch.  A non-finite loss aborts the run,
    writing the last finished epoch's parameters next to the checkpoint path.
    """
    if table is None:
        if config.dataset is None:
            raise ConfigError("no dataset given")
        table = load_csv(config.dataset)

    rng = np.random.default_rng(config.seed)
    train_idx, _ = split_rows(table.n_rows, config.holdout_fraction, config.seed)
    train_values = table.values[train_idx]
    registry = fit_standardization(RawTable(table.names, train_values))
    train_values = train_values[_usable_rows(train_values)]
    std_values = registry.standardize_matrix(train_values)
    observed = ~np.isnan(train_values)

    dims = mdl.ModelDims(registry.size, config.d_model, config.n_heads,
                         config.n_layers, config.n_steps)
    schedule = dfn.build_schedule(config.n_steps, config.beta_start, config.beta_end)
    params = mdl.init_params(dims, rng)
    opt = AdamW(mdl.parameter_list(params))
    lr_schedule = CosineRestarts(config.eta_max, config.eta_min, config.cycle_length)

    def snapshot_params() -> dict:
        return {k: t.data.copy() for k, t in params.items()}

    def checkpoint_at(epoch: int, param_data: dict | None = None) -> Checkpoint:
        ck_params = params
        if param_data is not None:
            ck_params = {k: ad.parameter(v) for k, v in param_data.items()}
        return Checkpoint(registry, dims, schedule, config.to_dict(),
                          rng.bit_generator.state, epoch, ck_params)

    log_fh = open(config.log, "w") if config.log else None
    history: list[tuple[int, float, float]] = []
    last_good = snapshot_params()
    n_rows = std_values.shape[0]
    try:
        for epoch in range(config.epochs):
            lr = lr_schedule.lr_at(epoch)
            order = rng.permutation(n_rows)
            losses = []
            try:
                for start in range(0, n_rows, config.batch_size):
                    rows = order[start:start + config.batch_size]
                    batch = sample_training_batch(std_values[rows], observed[rows],
                                                  registry.padding_id, rng,
                                                  config.context_length)
                    cond = mdl.encode_batch(batch["token_ids"], batch["magnitudes"],
                                            batch["mask"], params, dims)
                    loss = dfn.diffusion_loss(batch["target_values"], cond, rng,
                                              schedule, params, dims)
                    ad.backward(loss)
                    adamw_step(opt, lr)
                    losses.append(loss.item())
            except NumericError as exc:
                path = None
                if config.checkpoint:
                    path = str(config.checkpoint) + ".lastgood"
                    save_checkpoint(checkpoint_at(epoch, last_good), path)
                raise TrainingDiverged(
                    f"epoch {epoch}: {exc}", last_good_path=path) from exc
            mean_loss = float(np.mean(losses))
            history.append((epoch, lr, mean_loss))
            if log_fh:
                log_fh.write(f"{epoch}\t{lr!r}\t{mean_loss!r}\n")
                log_fh.flush()
            last_good = snapshot_params()
    finally:
        if log_fh:
            log_fh.close()

    ckpt = checkpoint_at(config.epochs)
    ckpt.history = history
    if config.checkpoint:
        save_checkpoint(ckpt, config.checkpoint)
    return ckpt


def parameter_report(ckpt: Checkpoint) -> dict:
    """Parameter counts by stage.

    'encoder' covers the whole conditioning tower (embedding tables included);
    'diffusion_head' covers the denoiser MLP plus its timestep table.
    """
    groups = mdl.parameter_groups(ckpt.params)
    embed = groups.get("embed", 0)
    enc = groups.get("enc", 0)
    head = groups.get("head", 0) + groups.get("time", 0)
    total = embed + enc + head
    return {
        "embedding": embed,
        "encoder": embed + enc,
        "diffusion_head": head,
        "total": total,
        "head_fraction": head / total,
    }


def format_parameter_report(report: dict) -> str:
    lines = []
    for key, value in report.items():
        shown = f"{value:.4f}" if isinstance(value, float) else str(value)
        lines.append(f"{key}\t{shown}")
    return "\n".join(lines) + "\n"
