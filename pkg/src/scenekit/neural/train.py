import io
import csv
import math
import typing
import logging
import dataclasses
import numpy as np
from scenekit.sugar import bites, derive_seed
from scenekit.static.model import OptimizerKind, RegularizerKind, TrainSnapshot
from scenekit.neural.optim import OPTIMIZERS, make_optimizer, penalty, penalty_grads
from scenekit.neural.net import (
    Mode,
    NetParams,
    NetSpec,
    backward,
    commit_running_stats,
    cross_entropy,
    forward,
    predict_proba,
)

Dataset = typing.Tuple[np.ndarray, np.ndarray]


class TrainingDiverged(Exception):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"Training diverged at epoch {epoch} (loss {loss})")
        self.epoch = epoch
        self.loss = loss


@dataclasses.dataclass(frozen=True, kw_only=True)
class TrainConfig:
    optimizer: OptimizerKind = OptimizerKind.adam
    lr: typing.Optional[float] = None  # None: the optimizer's default rate
    batch_size: int = 64
    epochs: int = 50
    patience: int = 10  # 0 disables early stopping
    seed: int = 0
    regularizer: RegularizerKind = RegularizerKind.none
    coefficient: float = 0.0

    def __post_init__(self):
        if isinstance(self.optimizer, str):
            object.__setattr__(self, "optimizer", OptimizerKind[self.optimizer])
        if isinstance(self.regularizer, str):
            object.__setattr__(self, "regularizer", RegularizerKind[self.regularizer])

        if self.lr is not None and self.lr < 0:
            raise ValueError(f"Learning rate must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"Batch size must be at least 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"Epoch count must be at least 1, got {self.epochs}")
        if self.patience < 0:
            raise ValueError(f"Patience cannot be negative, got {self.patience}")
        if self.coefficient < 0:
            raise ValueError(f"Regularizer coefficient cannot be negative, got {self.coefficient}")

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return OPTIMIZERS[self.optimizer]().lr

    def to_snapshot(self) -> TrainSnapshot:
        return TrainSnapshot(
            Optimizer=self.optimizer,
            LearningRate=self.learning_rate,
            BatchSize=self.batch_size,
            Epochs=self.epochs,
            Patience=self.patience,
            Seed=self.seed,
            Regularizer=self.regularizer,
            Coefficient=self.coefficient,
        )

    @classmethod
    def from_snapshot(cls, snapshot: TrainSnapshot) -> "TrainConfig":
        return cls(
            optimizer=snapshot.Optimizer,
            lr=snapshot.LearningRate,
            batch_size=snapshot.BatchSize,
            epochs=snapshot.Epochs,
            patience=snapshot.Patience,
            seed=snapshot.Seed,
            regularizer=snapshot.Regularizer,
            coefficient=snapshot.Coefficient,
        )


@dataclasses.dataclass
class History:
    epochs: typing.List[int] = dataclasses.field(default_factory=list)
    losses: typing.List[float] = dataclasses.field(default_factory=list)
    val_accuracies: typing.List[float] = dataclasses.field(default_factory=list)
    best_epoch: typing.Optional[int] = None

    def record(self, epoch: int, loss: float, val_acc: float) -> None:
        self.epochs.append(epoch)
        self.losses.append(loss)
        self.val_accuracies.append(val_acc)

    def to_csv(self, delimiter: str = ",") -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, delimiter=delimiter, lineterminator="\n")
        writer.writerow(["epoch", "loss", "val_acc"])
        for row in zip(self.epochs, self.losses, self.val_accuracies):
            writer.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}"])
        return buffer.getvalue()


def copy_params(params: NetParams) -> NetParams:
    return [{name: array.copy() for name, array in tensors.items()} for tensors in params]


def accuracy(spec: NetSpec, params: NetParams, dataset: Dataset) -> float:
    examples, labels = dataset
    if len(examples) == 0:
        return math.nan
    probs = predict_proba(spec, params, examples)
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def _as_dataset(dataset: Dataset, dtype) -> Dataset:
    examples, labels = dataset
    return np.asarray(examples, dtype=dtype), np.asarray(labels, dtype=np.int64)


def train(
    spec: NetSpec,
    params: NetParams,
    dataset: Dataset,
    cfg: TrainConfig,
    validation: typing.Optional[Dataset] = None,
) -> typing.Tuple[NetParams, History]:
    """
    Minibatch training with cross-entropy loss. Without a validation set the last epoch's
    parameters are returned; with one, the parameters of the best validation epoch.
    """
    dtype = np.float32
    for tensors in params:
        if tensors:
            dtype = next(iter(tensors.values())).dtype
            break

    examples, labels = _as_dataset(dataset, dtype)
    if len(examples) == 0:
        raise ValueError("Cannot train on an empty dataset")
    if len(examples) != len(labels):
        raise ValueError(f"{len(examples)} examples but {len(labels)} labels")
    if validation is not None:
        validation = _as_dataset(validation, dtype)

    params = copy_params(params)
    optimizer = make_optimizer(cfg.optimizer, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = History()

    best_params, best_accuracy, stale = copy_params(params), -math.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        total_loss = 0.0
        order = rng.permutation(len(examples))

        for batch_index, chunk in enumerate(bites(order, cfg.batch_size)):
            rows = np.asarray(chunk)
            probs, cache = forward(
                spec, params, examples[rows], Mode.train, derive_seed(cfg.seed, epoch, batch_index)
            )
            loss, grad = cross_entropy(probs, labels[rows])
            loss += penalty(spec.layers, params, cfg.regularizer, cfg.coefficient)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, loss)

            grads = backward(spec, params, cache, grad)
            for layer_grads, extra in zip(
                grads, penalty_grads(spec.layers, params, cfg.regularizer, cfg.coefficient)
            ):
                for name, value in extra.items():
                    layer_grads[name] = layer_grads[name] + value

            commit_running_stats(spec, params, cache)
            optimizer.step(params, grads)
            total_loss += loss * len(rows)

        epoch_loss = total_loss / len(examples)
        val_acc = math.nan if validation is None else accuracy(spec, params, validation)
        history.record(epoch, epoch_loss, val_acc)
        logging.debug(f"Epoch {epoch}: loss {epoch_loss:.5f}, validation accuracy {val_acc:.4f}")

        if validation is None:
            best_params, history.best_epoch = params, epoch
            continue

        if val_acc > best_accuracy:
            best_params, best_accuracy, stale = copy_params(params), val_acc, 0
            history.best_epoch = epoch
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                logging.info(f"Stopping at epoch {epoch}, best was epoch {history.best_epoch}")
                break

    return copy_params(best_params), history
