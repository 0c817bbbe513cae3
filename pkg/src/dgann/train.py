"""Training loop: Huber loss, Adam, step learning-rate decay, best-epoch
checkpointing on validation MAE, and multi-seed model selection.

Validation MAE is always computed in the target's original units (the
transform is inverted before scoring), and the checkpoint retained per
seed is the one with the lowest validation MAE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .model import ModelConfig, ModelParams, forward_graphs, make_dropout, predict
from .molgraph import Molecule
from .preprocess import (
    Batch,
    DatasetSplit,
    TargetTransform,
    counts_matrix,
    make_batches,
)


@dataclass
class TrainConfig:
    target: str = "mu"
    epochs: int = 600
    lr0: float = 1e-5
    decay_every: int = 150
    decay: float = 0.5
    batch: int = 64
    huber_delta: float = 1.0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    augment: bool = True
    patience: int | None = None       # best-epoch checkpointing regardless; off by default
    dropout: float = 0.0              # off by default
    warmup_steps: int = 0             # off by default
    max_steps: int | None = None
    train_mae_stop: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or self.decay_every < 1:
            raise ValueError("epochs, batch and decay_every must be positive")
        if self.lr0 <= 0 or self.huber_delta <= 0:
            raise ValueError("lr0 and huber_delta must be positive")
        if not (0.0 < self.decay <= 1.0):
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if not self.seeds:
            raise ValueError("need at least one seed")


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    if not (0 <= epoch < cfg.epochs):
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr0 * cfg.decay ** (epoch // cfg.decay_every)


def huber_loss(pred: T.Tensor, target, delta: float) -> T.Tensor:
    """Mean Huber penalty of the residuals (quadratic core, linear tails)."""
    target_t = target if isinstance(target, T.Tensor) else T.Tensor(np.asarray(target, dtype=np.float64))
    return T.reduce_mean(T.huber(T.subtract(pred, target_t), delta))


def mae(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(np.asarray(a) - np.asarray(b)).mean())


class Adam:
    """Bias-corrected moment updates, applied parameter-by-parameter in the
    fixed creation order so training runs are reproducible."""

    def __init__(self, params: ModelParams, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.values) for name, t in params.tensors.items()}
        self.v = {name: np.zeros_like(t.values) for name, t in params.tensors.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for name, tensor in self.params.tensors.items():
            grad = tensor.grad
            if grad is None:
                raise ValueError(f"parameter {name} has no gradient")
            if grad.shape != tensor.values.shape:
                raise ValueError(f"{name}: grad shape {grad.shape} != param shape {tensor.values.shape}")
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            tensor.values = tensor.values - lr * update


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    val_mae: float


@dataclass
class Metrics:
    rows: list[EpochRow] = field(default_factory=list)
    test_mae: float | None = None

    def to_csv(self) -> str:
        lines = ["epoch,lr,train_loss,val_mae"]
        for row in self.rows:
            lines.append(f"{row.epoch},{row.lr:.12g},{row.train_loss:.12g},{row.val_mae:.12g}")
        return "\n".join(lines) + "\n"

    def best_val(self) -> float:
        return min(row.val_mae for row in self.rows)


@dataclass
class PreparedData:
    """Molecules plus one raw target column, a split, and the transform
    fitted on the training split."""

    molecules: list[Molecule]
    y_raw: np.ndarray
    split: DatasetSplit
    transform: TargetTransform
    target: str


def prepare_data(
    molecules: list[Molecule],
    y_raw: np.ndarray,
    target: str,
    split: DatasetSplit,
    use_lsm: bool | None = None,
    standardize: bool = True,
) -> PreparedData:
    y_raw = np.asarray(y_raw, dtype=np.float64)
    train_mols = [molecules[i] for i in split.train]
    transform = TargetTransform.fit(
        target, counts_matrix(train_mols), y_raw[split.train],
        use_lsm=use_lsm, standardize=standardize,
    )
    return PreparedData(molecules, y_raw, split, transform, target)


def predict_original_units(
    molecules: list[Molecule],
    params: ModelParams,
    transform: TargetTransform,
    batch: int = 64,
) -> np.ndarray:
    """Inference in original target units, chunked to keep graphs small."""
    out = np.empty(len(molecules))
    for start in range(0, len(molecules), batch):
        chunk = molecules[start:start + batch]
        preds = predict(chunk, params)
        out[start:start + len(chunk)] = transform.inverse(preds, counts_matrix(chunk))
    return out


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: Metrics
    seed_metrics: dict[int, Metrics]


def train_single_seed(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    data: PreparedData,
    seed: int,
) -> tuple[Checkpoint, Metrics]:
    params = ModelParams.initialize(model_cfg, seed)
    adam = Adam(params)
    metrics = Metrics()
    val_mols = [data.molecules[i] for i in data.split.val]
    train_mols = [data.molecules[i] for i in data.split.train]
    best_val = math.inf
    best_values = params.copy_values()
    best_epoch = -1
    global_step = 0
    epochs_since_best = 0
    stop = False

    for epoch in range(cfg.epochs):
        lr_epoch = lr_at_epoch(epoch, cfg)
        batch_rng = np.random.default_rng((seed, 1, epoch))
        drop_rng = np.random.default_rng((seed, 2, epoch))
        losses = []
        for batch_no, batch in enumerate(
            make_batches(
                data.molecules, data.y_raw, data.transform, data.split.train,
                batch_size=cfg.batch, augment=cfg.augment, rng=batch_rng,
            )
        ):
            dropout = make_dropout(cfg.dropout, drop_rng)
            with T.Tape() as tape:
                preds, _ = forward_graphs(
                    batch.graphs, params, padded_len=batch.padded_len, dropout=dropout
                )
                loss = huber_loss(T.reshape(preds, (len(batch),)), batch.y, cfg.huber_delta)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise RuntimeError(f"non-finite loss at epoch {epoch}, batch {batch_no}")
            tape.backward(loss, params=params.parameters())
            lr_step = lr_epoch
            if cfg.warmup_steps > 0:
                lr_step *= min(1.0, (global_step + 1) / cfg.warmup_steps)
            adam.step(lr_step)
            losses.append(loss_value)
            global_step += 1
            if cfg.max_steps is not None and global_step >= cfg.max_steps:
                stop = True
                break

        val_pred = predict_original_units(val_mols, params, data.transform, cfg.batch)
        val_mae = mae(val_pred, data.y_raw[data.split.val])
        metrics.rows.append(EpochRow(epoch, lr_epoch, float(np.mean(losses)), val_mae))
        if val_mae < best_val:
            best_val = val_mae
            best_values = params.copy_values()
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        if cfg.patience is not None and epochs_since_best > cfg.patience:
            break
        if cfg.train_mae_stop is not None:
            train_pred = predict_original_units(train_mols, params, data.transform, cfg.batch)
            if mae(train_pred, data.y_raw[data.split.train]) < cfg.train_mae_stop:
                break
        if stop:
            break

    checkpoint = Checkpoint(
        model_config=model_cfg,
        target=data.target,
        seed=seed,
        best_epoch=best_epoch,
        best_val_mae=best_val,
        transform=data.transform,
        values=best_values,
    )
    return checkpoint, metrics


def train(model_cfg: ModelConfig, cfg: TrainConfig, data: PreparedData) -> TrainResult:
    """Train one model per seed and return the seed with the lowest
    validation MAE."""
    best: tuple[Checkpoint, Metrics] | None = None
    seed_metrics: dict[int, Metrics] = {}
    for seed in cfg.seeds:
        checkpoint, metrics = train_single_seed(model_cfg, cfg, data, seed)
        seed_metrics[seed] = metrics
        if best is None or checkpoint.best_val_mae < best[0].best_val_mae:
            best = (checkpoint, metrics)
    assert best is not None
    return TrainResult(checkpoint=best[0], metrics=best[1], seed_metrics=seed_metrics)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class SizeBucket:
    n_atoms: int
    count: int
    mae: float


@dataclass
class EvalResult:
    mae: float
    predictions: np.ndarray
    per_size: list[SizeBucket]

    def per_size_csv(self) -> str:
        lines = ["n_atoms,count,mae"]
        for bucket in self.per_size:
            lines.append(f"{bucket.n_atoms},{bucket.count},{bucket.mae:.12g}")
        return "\n".join(lines) + "\n"


def evaluate(
    checkpoint: Checkpoint,
    molecules: list[Molecule],
    y_raw: np.ndarray,
    target: str | None = None,
    batch: int = 64,
) -> EvalResult:
    """MAE in original units plus a per-molecule-size breakdown."""
    if target is not None and target != checkpoint.target:
        raise ValueError(f"checkpoint was trained for {checkpoint.target!r}, not {target!r}")
    if not molecules:
        raise ValueError("cannot evaluate on an empty molecule list")
    y_raw = np.asarray(y_raw, dtype=np.float64)
    params = checkpoint.build_params()
    preds = predict_original_units(molecules, params, checkpoint.transform, batch)
    errors = np.abs(preds - y_raw)
    sizes = np.array([m.n_atoms for m in molecules])
    buckets = [
        SizeBucket(int(n), int((sizes == n).sum()), float(errors[sizes == n].mean()))
        for n in np.unique(sizes)
    ]
    return EvalResult(mae=float(errors.mean()), predictions=preds, per_size=buckets)
