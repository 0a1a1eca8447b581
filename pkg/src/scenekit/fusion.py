"""
Late fusion of per-clip class probabilities.

Models are ranked by cross-validation accuracy and gated by a threshold. The survivors are
averaged, optionally over several seeded bags of the gated set, and the bag outputs are averaged
uniformly.
"""

import io
import csv
import math
import enum
import typing
import logging
import pathlib
import dataclasses
import numpy as np
from scenekit.sugar import atomic_write, derive_seed

ROW_TOLERANCE: typing.Final = 1e-6


class FusionError(Exception):
    ...


class WeightMode(enum.Enum):
    uniform = "uniform"
    accuracy_proportional = "accuracy_proportional"


@dataclasses.dataclass(frozen=True)
class ModelOutput:
    model_id: str
    cv_accuracy: float
    labels: typing.Tuple[str, ...]
    clip_ids: typing.Tuple[str, ...]
    probs: np.ndarray  # clips x classes, rows in clip_ids order

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "clip_ids", tuple(self.clip_ids))
        object.__setattr__(self, "cv_accuracy", float(self.cv_accuracy))

        if not 0.0 <= self.cv_accuracy <= 1.0:
            raise FusionError(f"{self.model_id}: accuracy {self.cv_accuracy} outside [0, 1]")
        if probs.shape != (len(self.clip_ids), len(self.labels)):
            raise FusionError(
                f"{self.model_id}: probabilities are {probs.shape}, "
                f"expected {len(self.clip_ids)} clips x {len(self.labels)} classes"
            )
        if not self.model_id or any(char.isspace() for char in self.model_id):
            raise FusionError(f"Model id {self.model_id!r} must be non-empty without whitespace")
        if len(set(self.clip_ids)) != len(self.clip_ids):
            raise FusionError(f"{self.model_id}: duplicate clip ids")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1) > ROW_TOLERANCE):
            raise FusionError(f"{self.model_id}: rows must be probability distributions")

        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def probs_for(self, clip_id: str) -> np.ndarray:
        return self.probs[self.clip_ids.index(clip_id)]

    def as_dict(self) -> typing.Dict[str, np.ndarray]:
        return dict(zip(self.clip_ids, self.probs))

    def predictions(self) -> typing.Dict[str, str]:
        """Arg-max label per clip; ties go to the lowest class index."""
        winners = np.argmax(self.probs, axis=1)
        return {clip: self.labels[index] for clip, index in zip(self.clip_ids, winners)}

    def aligned(self, clip_ids: typing.Sequence[str]) -> np.ndarray:
        """Probability rows reordered to clip_ids, which must be the same clip set."""
        if set(clip_ids) != set(self.clip_ids) or len(clip_ids) != len(self.clip_ids):
            missing = sorted(set(clip_ids) ^ set(self.clip_ids))[:5]
            raise FusionError(f"{self.model_id}: clip sets differ (e.g. {missing})")
        position = {clip: index for index, clip in enumerate(self.clip_ids)}
        return self.probs[[position[clip] for clip in clip_ids]]


@dataclasses.dataclass(frozen=True, kw_only=True)
class FusionSpec:
    threshold: float = 0.0
    weight_mode: WeightMode = WeightMode.uniform
    bag_count: int = 1
    bag_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "weight_mode", WeightMode(self.weight_mode))
        if not 0.0 <= self.threshold <= 1.0:
            raise FusionError(f"Threshold {self.threshold} outside [0, 1]")
        if not 0.0 < self.bag_fraction <= 1.0:
            raise FusionError(f"Bag fraction {self.bag_fraction} outside (0, 1]")
        if self.bag_count < 1:
            raise FusionError(f"Bag count must be at least 1, got {self.bag_count}")


def rank_models(outputs: typing.Sequence[ModelOutput]) -> typing.List[ModelOutput]:
    """Best cross-validation accuracy first; equal accuracies keep their input order."""
    return sorted(outputs, key=lambda output: -output.cv_accuracy)


def gate_models(
    outputs: typing.Sequence[ModelOutput], threshold: float
) -> typing.List[ModelOutput]:
    kept = [output for output in rank_models(outputs) if output.cv_accuracy >= threshold]
    if not kept:
        best = max((output.cv_accuracy for output in outputs), default=math.nan)
        raise FusionError(f"No model reaches accuracy {threshold} (best is {best})")

    for output in outputs:
        if output.cv_accuracy < threshold:
            logging.info(f"Gated out {output.model_id} (accuracy {output.cv_accuracy:.4f})")
    return kept


def model_weights(outputs: typing.Sequence[ModelOutput], mode: WeightMode) -> np.ndarray:
    if WeightMode(mode) == WeightMode.uniform:
        return np.ones(len(outputs))
    return np.array([output.cv_accuracy for output in outputs])


def weighted_average(
    outputs: typing.Sequence[ModelOutput],
    weights: typing.Sequence[float],
    model_id: str = "fused",
) -> ModelOutput:
    """Convex combination of the outputs, aligned to the first output's clip order."""
    if not outputs:
        raise FusionError("Nothing to average")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(outputs),):
        raise FusionError(f"{len(weights)} weights for {len(outputs)} models")
    if np.any(weights < 0) or not weights.sum() > 0:
        raise FusionError(f"Weights must be non-negative with a positive sum, got {weights}")

    first = outputs[0]
    for output in outputs[1:]:
        if output.labels != first.labels:
            raise FusionError(f"{output.model_id}: class list differs from {first.model_id}")

    weights = weights / weights.sum()
    fused = sum(weight * output.aligned(first.clip_ids) for weight, output in zip(weights, outputs))
    accuracy = float(np.clip(weights @ [output.cv_accuracy for output in outputs], 0.0, 1.0))

    return ModelOutput(
        model_id=model_id,
        cv_accuracy=accuracy,
        labels=first.labels,
        clip_ids=first.clip_ids,
        probs=fused,
    )


def fuse(outputs: typing.Sequence[ModelOutput], spec: FusionSpec) -> ModelOutput:
    gated = gate_models(outputs, spec.threshold)
    weights = model_weights(gated, spec.weight_mode)
    bag_size = math.ceil(spec.bag_fraction * len(gated))

    rounds = []
    for round_index in range(spec.bag_count):
        rng = np.random.default_rng(derive_seed(spec.seed, round_index))
        members = np.sort(rng.choice(len(gated), size=bag_size, replace=False))
        logging.debug(f"Bag {round_index}: {[gated[index].model_id for index in members]}")
        rounds.append(weighted_average([gated[index] for index in members], weights[members]))

    if len(rounds) == 1:
        return rounds[0]
    return weighted_average(rounds, np.ones(len(rounds)))


def format_predictions(output: ModelOutput, delimiter: str = ",") -> str:
    buffer = io.StringIO()
    buffer.write(f"# model_id={output.model_id} cv_accuracy={output.cv_accuracy!r}\n")
    writer = csv.writer(buffer, delimiter=delimiter, lineterminator="\n")
    writer.writerow(["clip_id", *output.labels])
    for clip, row in zip(output.clip_ids, output.probs):
        writer.writerow([clip, *(repr(float(value)) for value in row)])
    return buffer.getvalue()


def _parse_comment(line: str) -> typing.Dict[str, str]:
    fields = {}
    for token in line.lstrip("#").split():
        key, _, value = token.partition("=")
        fields[key] = value
    return fields


def parse_predictions(text: str, delimiter: str = ",") -> ModelOutput:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise FusionError("Prediction file must start with a '# model_id=... cv_accuracy=...' line")

    header = _parse_comment(lines[0])
    try:
        model_id, cv_accuracy = header["model_id"], float(header["cv_accuracy"])
    except (KeyError, ValueError) as error:
        raise FusionError(f"Line 1: unreadable model header {lines[0]!r}") from error

    rows = list(csv.reader(lines[1:], delimiter=delimiter))
    if not rows or rows[0][:1] != ["clip_id"]:
        raise FusionError("Line 2: expected a 'clip_id,<labels>' header")
    labels = rows[0][1:]

    clip_ids, probs = [], []
    for number, row in enumerate(rows[1:], start=3):
        if len(row) != len(labels) + 1:
            raise FusionError(f"Line {number}: {len(row)} columns, expected {len(labels) + 1}")
        try:
            probs.append([float(value) for value in row[1:]])
        except ValueError as error:
            raise FusionError(f"Line {number}: {error}") from error
        clip_ids.append(row[0])

    return ModelOutput(
        model_id=model_id,
        cv_accuracy=cv_accuracy,
        labels=labels,
        clip_ids=clip_ids,
        probs=np.array(probs).reshape(len(clip_ids), len(labels)),
    )


def write_predictions(path: typing.Union[str, pathlib.Path], output: ModelOutput) -> None:
    atomic_write(path, format_predictions(output))


def read_predictions(path: typing.Union[str, pathlib.Path]) -> ModelOutput:
    return parse_predictions(pathlib.Path(path).read_text(encoding="utf8"))
