"""Seeded, resumable training and deterministic evaluation on synthetic scenes.

Every random draw is keyed by ``(seed, stream, ...)`` rather than pulled from a
shared generator, so a run resumed from ``last.ckpt`` replays exactly the
batches and sparse samples an uninterrupted run would have seen.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .checkpoint import (Checkpoint, check_compatible, load_checkpoint, load_into,
                         save_checkpoint)
from .config import ModelConfig, resolve
from .data import SceneSpec, gen_scene, lidar_scan, sample_random_sparse, subsample_lidar_lines
from .io import append_metrics_csv, write_pgm16
from .metrics import MetricsRecord, baseline_fill, compute_metrics, loss_l1_l2
from .model import DepthCompletionNet, RgbdSample
from .optim import AdamW, clip_grad_norm, lr_schedule
from .tensor import ConfigError, NonFiniteError

# RNG stream ids
_INIT, _TRAIN_SCENE, _VAL_SCENE, _ORDER, _TRAIN_SPARSE, _VAL_SPARSE = range(6)

CURVE_FIELDS = ("epoch", "step", "lr", "train_loss", "rmse_mm", "mae_mm", "irmse_ikm",
                "imae_ikm", "rel", "valid_count", "d0_rmse_mm")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: Any = "nano"
    epochs: int = 20
    steps_per_epoch: int = 100
    batch_size: int = 4
    lr: float = 1e-3
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    weight_decay: float = 0.01
    milestones: list = field(default_factory=lambda: [10, 13, 16, 18])
    lr_factor: float = 0.5
    grad_clip: float = 1.0
    seed: int = 0
    image_size: list = field(default_factory=lambda: [64, 64])
    n_primitives: int = 4
    depth_range: list = field(default_factory=lambda: [1.0, 10.0])
    n_train: int = 200
    n_val: int = 32
    sparsity: int = 200
    val_batch: int = 8
    dtype: str = "float32"
    output_dir: str = "runs/nano"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("milestones must be strictly increasing")
        if not 0.0 < self.lr_factor < 1.0:
            raise ConfigError("lr_factor must lie in (0, 1)")
        for key in ("epochs", "steps_per_epoch", "batch_size", "n_train", "n_val", "val_batch"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if len(self.image_size) != 2 or any(s % 32 for s in self.image_size):
            raise ConfigError("image_size must be two multiples of 32")
        if self.sparsity < 0:
            raise ConfigError("sparsity must be >= 0")
        resolve(self.model)

    @property
    def model_config(self) -> ModelConfig:
        return resolve(self.model)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if isinstance(self.model, ModelConfig):
            d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as f:
            try:
                return cls.from_dict(json.load(f))
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from None

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# -- data ---------------------------------------------------------------------
def make_scenes(cfg: TrainConfig, split: str, count: int | None = None) -> list[RgbdSample]:
    stream = _TRAIN_SCENE if split == "train" else _VAL_SCENE
    n = count if count is not None else (cfg.n_train if split == "train" else cfg.n_val)
    H, W = cfg.image_size
    return [gen_scene(SceneSpec(seed=[cfg.seed, stream, i], height=H, width=W,
                                n_primitives=cfg.n_primitives, depth_range=tuple(cfg.depth_range)))
            for i in range(n)]


def sparsify(gt: np.ndarray, rng: np.random.Generator, sparsity: int | None = None,
             lines: int | None = None) -> np.ndarray:
    """Sparse input for one HxW ground-truth map (random pixels or scan lines)."""
    if lines is not None:
        return subsample_lidar_lines(lidar_scan(gt), lines).depth
    return sample_random_sparse(gt, sparsity, rng=rng)


def _batch(scenes: list[RgbdSample], sparse: list[np.ndarray]) -> RgbdSample:
    return RgbdSample(image=np.concatenate([s.image for s in scenes]),
                      sparse=np.stack(sparse)[:, None],
                      gt=np.concatenate([s.gt for s in scenes]))


def train_batch(cfg: TrainConfig, scenes: list[RgbdSample], epoch: int, step: int) -> RgbdSample:
    """Batch for global ``step``: an epoch-wise permutation plus fresh sparse draws."""
    order = np.random.default_rng([cfg.seed, _ORDER, epoch]).permutation(len(scenes))
    local = step - epoch * cfg.steps_per_epoch
    idx = [order[(local * cfg.batch_size + k) % len(scenes)] for k in range(cfg.batch_size)]
    chosen = [scenes[i] for i in idx]
    sparse = [sparsify(s.gt[0, 0], np.random.default_rng([cfg.seed, _TRAIN_SPARSE, step, k]), cfg.sparsity)
              for k, s in enumerate(chosen)]
    return _batch(chosen, sparse)


def val_inputs(seed: int, scenes: list[RgbdSample], sparsity: int | None,
               lines: int | None = None) -> list[np.ndarray]:
    return [sparsify(s.gt[0, 0], np.random.default_rng([seed, _VAL_SPARSE, i]), sparsity, lines)
            for i, s in enumerate(scenes)]


# -- evaluation ---------------------------------------------------------------
@dataclass
class EvalResult:
    refined: MetricsRecord
    d0: MetricsRecord
    baseline: MetricsRecord | None
    pred_refined: np.ndarray = field(repr=False)
    pred_d0: np.ndarray = field(repr=False)


def run_validation(model: DepthCompletionNet, scenes: list[RgbdSample], sparse: list[np.ndarray],
                   batch: int = 8, spn_iterations: int | None = None) -> EvalResult:
    """Eval-mode forward over the set; metrics pool every valid pixel."""
    was_training = model.training
    model.eval()
    d0s, dks = [], []
    try:
        with T.no_grad():
            for s in range(0, len(scenes), batch):
                b = _batch(scenes[s:s + batch], sparse[s:s + batch])
                out = model(b.image, b.sparse, spn_iterations)
                # the depth head is linear; clamp only when evaluating
                d0s.append(np.maximum(out.d0.data, 0.0))
                dks.append(np.maximum(out.refined.data, 0.0))
    finally:
        model.train(was_training)
    gt = np.concatenate([s.gt for s in scenes])
    d0, dk = np.concatenate(d0s), np.concatenate(dks)
    sp = np.stack(sparse)[:, None]
    base = None
    if all((m > 0).any() for m in sparse):
        base = compute_metrics(baseline_fill(sp), gt)
    return EvalResult(compute_metrics(dk, gt), compute_metrics(d0, gt), base, dk, d0)


# -- training -----------------------------------------------------------------
@dataclass
class TrainResult:
    curve: list
    step_losses: list
    best_rmse: float
    best_epoch: int
    output_dir: str
    model: DepthCompletionNet = field(repr=False)


def _read_curve(path) -> list[dict]:
    if not os.path.exists(path):
        return []
    with open(path, newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def _write_curve(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CURVE_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (int(r[k]) if k in ("epoch", "step", "valid_count") else repr(float(r[k])))
                        for k in CURVE_FIELDS})


def build_model(cfg: TrainConfig) -> DepthCompletionNet:
    with T.default_dtype(cfg.dtype):
        return DepthCompletionNet(cfg.model_config, rng=np.random.default_rng([cfg.seed, _INIT]))


def train(cfg: TrainConfig, resume: bool = False, log=None) -> TrainResult:
    """Run the schedule, logging ``curve.csv`` and writing ``best.ckpt``/``last.ckpt``.

    With ``resume`` the run continues after the epoch stored in ``last.ckpt``.
    A non-finite loss aborts; checkpoints from earlier epochs stay on disk.
    """
    os.makedirs(cfg.output_dir, exist_ok=True)
    curve_path = os.path.join(cfg.output_dir, "curve.csv")
    last_path = os.path.join(cfg.output_dir, "last.ckpt")
    best_path = os.path.join(cfg.output_dir, "best.ckpt")
    model = build_model(cfg)
    opt = AdamW(model.named_parameters(), cfg.lr, tuple(cfg.betas), weight_decay=cfg.weight_decay)
    train_scenes = make_scenes(cfg, "train")
    val_scenes = make_scenes(cfg, "val")
    val_sparse = val_inputs(cfg.seed, val_scenes, cfg.sparsity)

    start_epoch, best_rmse, best_epoch, curve = 0, float("inf"), -1, []
    if resume and os.path.exists(last_path):
        ckpt = load_checkpoint(last_path)
        if ckpt.train_config != _comparable(cfg):
            raise ConfigError(f"{last_path} was written by a different training config")
        load_into(model, ckpt, opt)
        start_epoch = int(ckpt.meta["epoch"]) + 1
        best_rmse, best_epoch = float(ckpt.meta["best_rmse"]), int(ckpt.meta["best_epoch"])
        curve = [r for r in _read_curve(curve_path) if r["epoch"] < start_epoch]

    step_losses: list[float] = []
    with T.default_dtype(cfg.dtype):
        for epoch in range(start_epoch, cfg.epochs):
            opt.lr = lr_schedule(epoch, cfg.lr, cfg.milestones, cfg.lr_factor)
            model.train()
            epoch_losses = []
            for local in range(cfg.steps_per_epoch):
                step = epoch * cfg.steps_per_epoch + local
                b = train_batch(cfg, train_scenes, epoch, step)
                try:
                    out = model(b.image, b.sparse)
                    loss = loss_l1_l2(out.refined, b.gt)
                    if not np.isfinite(loss.item()):
                        raise NonFiniteError(f"loss is {loss.item()}")
                    model.zero_grad()
                    loss.backward()
                    clip_grad_norm(model.parameters(), cfg.grad_clip)
                    opt.step()
                except NonFiniteError as e:
                    raise TrainingError(f"non-finite value at step {step} ({e}); "
                                        f"last good checkpoint kept in {cfg.output_dir}") from e
                epoch_losses.append(loss.item())
            step_losses.extend(epoch_losses)
            res = run_validation(model, val_scenes, val_sparse, cfg.val_batch)
            rec = res.refined
            row = {"epoch": epoch, "step": (epoch + 1) * cfg.steps_per_epoch, "lr": opt.lr,
                   "train_loss": float(np.mean(epoch_losses)), **rec.to_dict(),
                   "d0_rmse_mm": res.d0.rmse_mm}
            row.pop("inverse_skipped")
            curve.append(row)
            _write_curve(curve_path, curve)
            if log:
                log(f"epoch {epoch:3d}  lr {opt.lr:.2e}  loss {row['train_loss']:.4f}  "
                    f"rmse {rec.rmse_mm:.1f} mm  d0 {res.d0.rmse_mm:.1f} mm")
            if rec.rmse_mm < best_rmse:
                best_rmse, best_epoch = rec.rmse_mm, epoch
                save_checkpoint(best_path, model, None, _comparable(cfg), _meta(cfg, epoch, rec))
            meta = _meta(cfg, epoch, rec, best_rmse=best_rmse, best_epoch=best_epoch)
            save_checkpoint(last_path, model, opt, _comparable(cfg), meta)
    return TrainResult(curve, step_losses, best_rmse, best_epoch, cfg.output_dir, model)


def _comparable(cfg: TrainConfig) -> dict:
    d = cfg.to_dict()
    d.pop("output_dir")
    return json.loads(json.dumps(d))


def _meta(cfg: TrainConfig, epoch: int, rec: MetricsRecord, **extra) -> dict:
    return {"epoch": epoch, "dtype": cfg.dtype, "val_rmse_mm": rec.rmse_mm, **extra}


def overfit_batch(model: DepthCompletionNet, batch: RgbdSample, steps: int = 50, lr: float = 1e-3,
                  grad_clip: float = 1.0) -> list[float]:
    """Fit one fixed batch; returns the loss before each step."""
    opt = AdamW(model.named_parameters(), lr)
    losses = []
    model.train()
    for _ in range(steps):
        out = model(batch.image, batch.sparse)
        loss = loss_l1_l2(out.refined, batch.gt)
        losses.append(loss.item())
        model.zero_grad()
        loss.backward()
        clip_grad_norm(model.parameters(), grad_clip)
        opt.step()
    return losses


# -- evaluation from a checkpoint ----------------------------------------------
@dataclass
class EvalSpec:
    sparsity: int | None = None      # default: the training sparsity
    lines: int | None = None         # scan lines instead of random pixels
    spn_iters: int | None = None
    n_val: int | None = None
    dump_dir: str | None = None
    csv_path: str | None = None


def model_from_checkpoint(ckpt: Checkpoint) -> DepthCompletionNet:
    dtype = ckpt.meta.get("dtype", "float64")
    with T.default_dtype(dtype):
        model = DepthCompletionNet(ckpt.model_config)
    load_into(model, ckpt)
    return model


def evaluate(ckpt: Checkpoint | str, spec: EvalSpec = EvalSpec(),
             model: DepthCompletionNet | None = None) -> EvalResult:
    """Rebuild the training run's validation set and score the checkpoint on it."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if ckpt.train_config is None:
        raise ConfigError("checkpoint carries no training config to rebuild the validation set")
    tc = TrainConfig.from_dict({**ckpt.train_config, "output_dir": ""})
    if resolve(tc.model) != ckpt.model_config:
        raise ConfigError("model config in checkpoint header disagrees with its training config")
    if spec.n_val is not None:
        tc = tc.replace(n_val=spec.n_val)
    if model is None:
        model = model_from_checkpoint(ckpt)
    else:
        check_compatible(model, ckpt)
    scenes = make_scenes(tc, "val")
    sparsity = tc.sparsity if spec.sparsity is None else spec.sparsity
    sparse = val_inputs(tc.seed, scenes, sparsity, spec.lines)
    with T.default_dtype(tc.dtype):
        res = run_validation(model, scenes, sparse, tc.val_batch, spec.spn_iters)
    if spec.csv_path:
        append_metrics_csv(spec.csv_path, res.refined)
    if spec.dump_dir:
        os.makedirs(spec.dump_dir, exist_ok=True)
        gt = np.concatenate([s.gt for s in scenes])
        for i in range(len(scenes)):
            write_pgm16(os.path.join(spec.dump_dir, f"{i:04d}_d0.pgm"), res.pred_d0[i, 0])
            write_pgm16(os.path.join(spec.dump_dir, f"{i:04d}_dk.pgm"), res.pred_refined[i, 0])
            err = np.where(gt[i, 0] > 0, np.abs(res.pred_refined[i, 0] - gt[i, 0]), 0.0)
            write_pgm16(os.path.join(spec.dump_dir, f"{i:04d}_err.pgm"), err)
    return res
