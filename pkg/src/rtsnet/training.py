"""Supervised end-to-end training of the gain networks.

Minimizes the sequence loss

    L(Theta) = sum_i (1/T_i) sum_t ||x_hat_t(y_i; Theta) - x_t_i||^2
             + gamma * ||Theta||^2

over mini-batches with Adam, backpropagating through the unrolled two-pass
smoother.  Validation MSE (in dB) selects the returned parameters.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import neural
from .hybrid import RtsNetModel, rtsnet_smooth, smooth_dataset
from .neural import AdamState, Node, ParamStore, clip_gradients, leaf, scale, ssum, sumsq, tape_backward
from .ssmodel import TrajectoryDataset, lin_to_db

Array = np.ndarray

MSE_FLOOR_DB = -300.0


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite; the model keeps its best parameters."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; all exposed, none baked in."""

    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    clip_norm: Optional[float] = None
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("learning rate, batch size, and epochs must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")


@dataclass
class SplitDataset:
    """Train/validation(/test) views of a trajectory dataset."""

    train: TrajectoryDataset
    validation: TrajectoryDataset
    test: Optional[TrajectoryDataset] = None


def split_dataset(
    data: TrajectoryDataset, val_fraction: float = 0.1, seed: int = 0
) -> SplitDataset:
    """Random train/validation split (at least one trajectory per side)."""
    n_val = min(max(int(round(val_fraction * data.N)), 1), data.N - 1)
    perm = np.random.default_rng(seed).permutation(data.N)
    return SplitDataset(
        train=data.subset(perm[n_val:]),
        validation=data.subset(perm[:n_val]),
    )


def loss(
    model: RtsNetModel,
    batch: tuple[Array, Array],
    gamma: float,
    params: Optional[dict[str, Node]] = None,
) -> Node:
    """Recorded loss node for one batch (X: (B, T+1, m), Y: (B, T, n))."""
    X, Y = batch
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    if params is None:
        params = model.params.leaves()
    T = Y.shape[1]
    out = rtsnet_smooth(model, X[:, 0], Y, params=params)
    total: Optional[Node] = None
    for t in range(T):
        diff = out.smoothed[t] - leaf(X[:, t + 1])
        sq = sumsq(diff)
        total = sq if total is None else total + sq
    total = scale(total, 1.0 / T)
    if gamma > 0:
        reg: Optional[Node] = None
        for node in params.values():
            term = sumsq(node)
            reg = term if reg is None else reg + term
        total = total + scale(reg, gamma)
    return total


@dataclass
class EvalResult:
    mse: float
    mse_db: float
    per_trajectory_db: Array


def evaluate(model: RtsNetModel, data: TrajectoryDataset) -> EvalResult:
    """Per-entry test MSE in dB (mean over trajectories, time steps, components)."""
    est = smooth_dataset(model, data.states[:, 0], data.observations)
    err2 = (est - data.states[:, 1:]) ** 2
    per_traj = err2.mean(axis=(1, 2))
    mse = float(err2.mean())
    floor = 10.0 ** (MSE_FLOOR_DB / 10.0)
    per_traj_db = 10.0 * np.log10(np.maximum(per_traj, floor))
    return EvalResult(
        mse=mse,
        mse_db=MSE_FLOOR_DB if mse <= floor else lin_to_db(mse),
        per_trajectory_db=per_traj_db,
    )


@dataclass
class TrainResult:
    """Per-epoch history plus the validation-selected outcome."""

    history: list[dict]
    best_epoch: int
    best_val_db: float
    initial_val_db: float

    def epochs_run(self) -> int:
        return len(self.history)

    def mean_epoch_seconds(self) -> float:
        return float(np.mean([row["wall_time_s"] for row in self.history])) if self.history else 0.0


def _batches(n: int, batch_size: int, perm: Array):
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def train(
    model: RtsNetModel,
    dataset: Union[TrajectoryDataset, SplitDataset],
    config: TrainConfig,
    checkpoint_path: Optional[Union[str, Path]] = None,
    checkpoint_every: int = 1,
    resume: bool = False,
) -> TrainResult:
    """Mini-batch Adam over the training split with validation-based selection.

    Deterministic given config.seed.  When checkpoint_path is set, training
    state is persisted every checkpoint_every epochs and can be resumed
    mid-run to reproduce the uninterrupted result exactly.  A non-finite loss
    aborts with the best parameters restored (and checkpoint preserved).
    """
    if isinstance(dataset, TrajectoryDataset):
        dataset = split_dataset(dataset, config.val_fraction, config.seed)
    trainset, valset = dataset.train, dataset.validation

    rng = np.random.default_rng(config.seed)
    opt = AdamState.for_store(model.params)
    history: list[dict] = []
    initial_val_db = evaluate(model, valset).mse_db
    best_val_db = initial_val_db
    best_epoch = 0
    best_params = model.params.copy_values()
    start_epoch = 0

    if resume:
        if checkpoint_path is None:
            raise ValueError("resume requires checkpoint_path")
        opt, extra, arrays = neural.load_checkpoint(
            checkpoint_path, model.params, arch=model.arch_descriptor
        )
        if opt is None or extra is None or "epoch" not in extra:
            raise neural.CheckpointError("checkpoint lacks training state, cannot resume")
        start_epoch = int(extra["epoch"])
        best_epoch = int(extra["best_epoch"])
        best_val_db = float(extra["best_val_db"])
        initial_val_db = float(extra["initial_val_db"])
        history = list(extra["history"])
        rng.bit_generator.state = extra["rng_state"]
        best_params = {k[len("best/"):]: v for k, v in arrays.items() if k.startswith("best/")}

    def save_state(epoch: int) -> None:
        if checkpoint_path is None:
            return
        neural.save_checkpoint(
            checkpoint_path,
            model.params,
            arch=model.arch_descriptor,
            opt_state=opt,
            extra={
                "epoch": epoch,
                "best_epoch": best_epoch,
                "best_val_db": best_val_db,
                "initial_val_db": initial_val_db,
                "history": history,
                "rng_state": rng.bit_generator.state,
            },
            extra_arrays={f"best/{k}": v for k, v in best_params.items()},
        )

    X = trainset.states
    Y = trainset.observations
    for epoch in range(start_epoch + 1, config.epochs + 1):
        tic = time.perf_counter()
        perm = rng.permutation(trainset.N)
        epoch_loss = 0.0
        for idx in _batches(trainset.N, config.batch_size, perm):
            params = model.params.leaves()
            node = loss(model, (X[idx], Y[idx]), config.weight_decay, params=params)
            value = float(node.value)
            if not np.isfinite(value):
                model.params.load_values(best_params)
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch}; "
                    f"best parameters (epoch {best_epoch}) restored"
                )
            grads = tape_backward(node, params)
            if config.clip_norm is not None:
                clip_gradients(grads, config.clip_norm)
            neural.adam_step(dict(model.params.items()), grads, opt, lr=config.learning_rate)
            epoch_loss += value
        val_db = evaluate(model, valset).mse_db
        history.append({
            "epoch": epoch,
            "train_loss": epoch_loss,
            "val_mse_db": val_db,
            "wall_time_s": time.perf_counter() - tic,
            "param_norm": float(np.sqrt(sum(float((v**2).sum())
                                            for _, v in model.params.items()))),
        })
        if val_db < best_val_db:
            best_val_db = val_db
            best_epoch = epoch
            best_params = model.params.copy_values()
        if checkpoint_path is not None and epoch % checkpoint_every == 0:
            save_state(epoch)

    model.params.load_values(best_params)
    if checkpoint_path is not None:
        save_state(config.epochs)
    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_val_db=best_val_db,
        initial_val_db=initial_val_db,
    )


def save_checkpoint(model: RtsNetModel, opt_state: Optional[AdamState], path) -> None:
    """Persist model parameters (and optimizer state) with architecture validation data."""
    neural.save_checkpoint(path, model.params, arch=model.arch_descriptor, opt_state=opt_state)


def load_checkpoint(path, model: RtsNetModel) -> Optional[AdamState]:
    """Restore parameters into an architecture-compatible model; returns optimizer state."""
    opt, _, _ = neural.load_checkpoint(path, model.params, arch=model.arch_descriptor)
    return opt


def write_metrics(path, history: list[dict]) -> None:
    """Per-epoch metrics as delimited text: epoch, train loss, val MSE dB, wall time."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_mse_db", "wall_time_s"])
        for row in history:
            w.writerow([row["epoch"], f"{row['train_loss']:.8g}",
                        f"{row['val_mse_db']:.6f}", f"{row['wall_time_s']:.4f}"])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {
            "epoch": int(r["epoch"]),
            "train_loss": float(r["train_loss"]),
            "val_mse_db": float(r["val_mse_db"]),
            "wall_time_s": float(r["wall_time_s"]),
        }
        for r in rows
    ]
