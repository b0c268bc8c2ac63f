"""Run configuration and the end-to-end steps behind the command line."""
from __future__ import annotations

import json
import platform
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .dataio import load_grid_stack, load_target_series, write_predictions, predictions_filename
from .metrics import compute_metrics
from .preprocess import (
    DEFAULT_T,
    SETS,
    TEST_START,
    TRAIN_END,
    NormStats,
    build_windows,
    clip_to_bbox,
    split_with_gaps,
)
from .seqmods import MODEL_KINDS, ModelConfig, load_checkpoint, save_checkpoint
from .training import SENSOR_HYPERPARAMS, SYNTH_HYPERPARAMS, Ensemble, History, TrainConfig, ensemble_predict, train_ensemble

DEFAULT_LR, DEFAULT_L2 = 0.001, 0.0025
MANIFEST = "manifest.json"
NORM_STATS = "norm_stats.json"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    weather_dir: str
    target_path: str
    out_dir: str = "runs"
    model: str = "tdc-lstm"
    sensor: str | None = None
    T: int = DEFAULT_T
    bbox: list | None = None
    square_side: int | None = None
    train_end: str = str(TRAIN_END)
    test_start: str = str(TEST_START)
    lr: float | None = None
    l2: float | None = None
    momentum: float = 0.9
    epochs: int = 80
    batch_size: int = 8
    clipnorm: float = 1.0
    dropout: float = 0.15
    ensemble_size: int = 10
    seeds: list | None = None
    slope: float = 0.3
    dtype: str = "float32"
    n_jobs: int = 1

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.bbox is not None and len(self.bbox) != 4:
            raise ConfigError("bbox must be [lon_min, lat_min, lon_max, lat_max]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        for name in ("train_end", "test_start"):
            try:
                np.datetime64(getattr(self, name), "D")
            except ValueError as exc:
                raise ConfigError(f"{name}: not an ISO date: {getattr(self, name)!r}") from exc
        if self.sensor is None:
            self.sensor = Path(self.target_path).stem
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def hyperparams(self) -> tuple[float, float]:
        """Learning rate and L2; unset values fall back to the per-sensor table, then defaults."""
        key = (self.sensor, self.model)
        lr, l2 = SENSOR_HYPERPARAMS.get(key) or SYNTH_HYPERPARAMS.get(key, (DEFAULT_LR, DEFAULT_L2))
        return (self.lr if self.lr is not None else lr, self.l2 if self.l2 is not None else l2)

    def train_config(self) -> TrainConfig:
        lr, l2 = self.hyperparams()
        return TrainConfig(lr=lr, l2=l2, momentum=self.momentum, epochs=self.epochs, batch_size=self.batch_size,
                           clipnorm=self.clipnorm, dropout=self.dropout, ensemble_size=self.ensemble_size,
                           seeds=self.seeds)

    def checkpoint_dir(self) -> Path:
        return Path(self.out_dir) / f"{self.sensor}_{self.model}"

    def to_dict(self):
        return asdict(self)


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON run config; relative paths resolve against its directory.

    Unknown keys are rejected. ``overrides`` (already parsed flag values,
    ``None`` meaning unset) take precedence over the file.
    """
    raw, base = {}, Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        base = path.parent
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    missing = [k for k in ("weather_dir", "target_path") if k not in raw]
    if missing:
        raise ConfigError(f"missing required config keys: {missing}")
    for key in ("weather_dir", "target_path", "out_dir"):
        if key in raw and not Path(raw[key]).is_absolute():
            raw[key] = str(base / raw[key])
    try:
        return RunConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def prepare_dataset(cfg: RunConfig, stats: NormStats | None = None):
    """Load, clip, split and window the data described by ``cfg``."""
    for p in (cfg.weather_dir, cfg.target_path):
        if not Path(p).exists():
            raise FileNotFoundError(f"input not found: {p}")
    weather = load_grid_stack(cfg.weather_dir)
    target = load_target_series(cfg.target_path, cfg.sensor)
    if cfg.bbox is not None:
        weather = clip_to_bbox(weather, cfg.bbox)
    split = split_with_gaps(target, cfg.train_end, cfg.test_start, cfg.T, weather_start=weather.timestamps[0])
    data = build_windows(weather, target, split, cfg.T, stats=stats, side=cfg.square_side)
    return data


def model_config_for(cfg: RunConfig, data) -> ModelConfig:
    return ModelConfig(kind=cfg.model, T=cfg.T, in_channels=data.weather.shape[-1],
                       frame_size=data.weather.shape[1], dropout=cfg.dropout, slope=cfg.slope)


def run_training(cfg: RunConfig, log=print) -> tuple[Ensemble, Path]:
    data = prepare_dataset(cfg)
    tcfg = cfg.train_config()
    mcfg = model_config_for(cfg, data)
    default_arch = data.T == DEFAULT_T and data.weather.shape[-1] == 3
    t0 = time.time()

    ens = train_ensemble(data, cfg.model, tcfg, mcfg, n_jobs=cfg.n_jobs, check_count=default_arch,
                         dtype=getattr(torch, cfg.dtype))
    wall = time.time() - t0

    out = cfg.checkpoint_dir()
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (seed, model) in enumerate(zip(ens.seeds, ens.members)):
        p = out / f"member_{i:02d}_seed{seed}.npz"
        save_checkpoint(model, p, extra={"seed": seed, "sensor": cfg.sensor})
        paths.append(p.name)
    (out / NORM_STATS).write_text(json.dumps(data.stats.to_dict(), indent=2) + "\n", encoding="utf-8")
    write_loss_curves(ens.histories, ens.seeds, out / "loss_curves.csv")
    manifest = {
        "package_version": __version__,
        "run_config": cfg.to_dict(),
        "train_config": tcfg.to_dict(),
        "model_config": mcfg.to_dict(),
        "seeds": ens.seeds,
        "checkpoints": paths,
        "n_parameters": [int(sum(p.numel() for p in m.parameters())) for m in ens.members],
        "split_counts": {s: int(len(data.indices(s))) for s in SETS},
        "losses": [{"seed": s, "train_mse": h.train_mse, "val_mse": h.val_mse, "seconds": h.seconds}
                   for s, h in zip(ens.seeds, ens.histories)],
        "wall_clock_seconds": wall,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "platform": platform.platform(),
        "torch": torch.__version__,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    log(f"trained {len(ens)} {cfg.model} members in {wall:.1f}s -> {out}")
    return ens, out


def write_loss_curves(histories, seeds, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("seed,epoch,train_mse,val_mse\n")
        for seed, h in zip(seeds, histories):
            for e, (a, b) in enumerate(zip(h.train_mse, h.val_mse)):
                fh.write(f"{seed},{e},{a:.15g},{b:.15g}\n")


def load_ensemble(checkpoint_dir) -> tuple[Ensemble, NormStats, dict]:
    d = Path(checkpoint_dir)
    manifest_path = d / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {d}; run 'train' first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    members = [load_checkpoint(d / name)[0] for name in manifest["checkpoints"]]
    if not members:
        raise ValueError(f"no checkpoints listed in {manifest_path}")
    stats = NormStats.from_dict(json.loads((d / NORM_STATS).read_text(encoding="utf-8")))
    histories = [History(l["train_mse"], l["val_mse"], l["seconds"]) for l in manifest["losses"]]
    ens = Ensemble(manifest["run_config"]["model"], members, manifest["seeds"], histories,
                   members[0].config, TrainConfig(**manifest["train_config"]))
    return ens, stats, manifest


def predict_split(cfg: RunConfig, checkpoint_dir, split="test"):
    ens, stats, _ = load_ensemble(checkpoint_dir)
    data = prepare_dataset(cfg, stats=stats)
    dates, mean, std = ensemble_predict(ens, data, split)
    observed = data.y[data.indices(split)]
    return dates, mean, std, observed, data, ens


def evaluate_split(cfg: RunConfig, checkpoint_dir, split="test"):
    dates, mean, std, observed, data, _ = predict_split(cfg, checkpoint_dir, split)
    return compute_metrics(mean, observed, data.stats, cfg.sensor, cfg.model, split)


def write_split_predictions(cfg: RunConfig, checkpoint_dir, split, out_dir) -> tuple[Path, tuple]:
    dates, mean, std, observed, data, ens = predict_split(cfg, checkpoint_dir, split)
    path = Path(out_dir) / predictions_filename(cfg.sensor, cfg.model)
    write_predictions(dates, mean, std, path)
    return path, (dates, mean, std, observed, ens)
