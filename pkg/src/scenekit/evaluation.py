"""
Manifests, stratified folds, clip-level aggregation and accuracy reports.

Model training is injected through the `Trainer` protocol, so cross-validation here knows
nothing about feature kinds or model families.
"""

import io
import csv
import enum
import math
import typing
import logging
import pathlib
import dataclasses
import numpy as np
import scipy.special
from concurrent.futures import ThreadPoolExecutor
from scenekit.sugar import derive_seed

Frames = np.ndarray
Fitted = typing.TypeVar("Fitted")
ConfusedPair = typing.Tuple[str, str, int]


class ManifestError(Exception):
    def __init__(self, message: str, line: typing.Optional[int] = None):
        super().__init__(message if line is None else f"Line {line}: {message}")
        self.line = line


class FoldError(Exception):
    ...


class EvaluationError(Exception):
    def __init__(self, message: str, missing: typing.Sequence[str] = ()):
        super().__init__(message)
        self.missing = list(missing)


@dataclasses.dataclass(frozen=True)
class Manifest:
    entries: typing.Tuple[typing.Tuple[str, str], ...]
    labels: typing.Tuple[str, ...] = ()

    def __post_init__(self):
        entries = tuple((str(path), str(label)) for path, label in self.entries)
        labels = tuple(self.labels) or tuple(sorted({label for _, label in entries}))
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "labels", labels)

        seen = set()
        for path, label in entries:
            if path in seen:
                raise ManifestError(f"Duplicate clip {path}")
            if label not in labels:
                raise ManifestError(f"Clip {path} has label '{label}' outside the class list")
            seen.add(path)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def paths(self) -> typing.List[str]:
        return [path for path, _ in self.entries]

    @property
    def label_of(self) -> typing.Dict[str, str]:
        return dict(self.entries)

    def subset(self, paths: typing.Iterable[str]) -> "Manifest":
        """Entries for paths, in manifest order, keeping the full class list."""
        wanted = set(paths)
        return Manifest(
            entries=tuple(entry for entry in self.entries if entry[0] in wanted),
            labels=self.labels,
        )

    def resolve(self, path: str, root: typing.Optional[pathlib.Path]) -> pathlib.Path:
        clip = pathlib.Path(path)
        if clip.is_absolute() or root is None:
            return clip
        return pathlib.Path(root) / clip


def parse_manifest(text: str) -> Manifest:
    """Tab-separated `relative/path.wav<TAB>label` lines; extra columns are ignored."""
    entries = []
    seen = {}
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        columns = line.rstrip("\r\n").split("\t")
        if len(columns) < 2 or not columns[0].strip() or not columns[1].strip():
            raise ManifestError(f"expected 'path<TAB>label', got {line!r}", number)

        path, label = columns[0].strip(), columns[1].strip()
        if path in seen:
            raise ManifestError(f"clip {path} already listed on line {seen[path]}", number)
        seen[path] = number
        entries.append((path, label))

    if not entries:
        raise ManifestError("Manifest is empty")
    return Manifest(entries=tuple(entries))


def load_manifest(path: typing.Union[str, pathlib.Path]) -> Manifest:
    path = pathlib.Path(path)
    try:
        text = path.read_text(encoding="utf8")
    except OSError as error:
        raise ManifestError(f"Cannot read manifest {path}: {error}") from error
    manifest = parse_manifest(text)
    logging.info(f"Loaded {len(manifest)} clips in {len(manifest.labels)} classes from {path}")
    return manifest


def format_manifest(manifest: Manifest) -> str:
    return "".join(f"{path}\t{label}\n" for path, label in manifest.entries)


@dataclasses.dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: typing.Mapping[str, int]

    def __post_init__(self):
        if self.k < 2:
            raise FoldError(f"Need at least two folds, got {self.k}")
        bad = {fold for fold in self.assignment.values() if not 0 <= fold < self.k}
        if bad:
            raise FoldError(f"Fold indices {sorted(bad)} outside 0..{self.k - 1}")

    def test_paths(self, manifest: Manifest, fold: int) -> typing.List[str]:
        return [path for path in manifest.paths if self.assignment[path] == fold]

    def train_paths(self, manifest: Manifest, fold: int) -> typing.List[str]:
        return [path for path in manifest.paths if self.assignment[path] != fold]

    def check(self, manifest: Manifest) -> None:
        """The plan must partition exactly the manifest's clips."""
        missing = [path for path in manifest.paths if path not in self.assignment]
        extra = sorted(set(self.assignment) - set(manifest.paths))
        if missing or extra:
            raise FoldError(
                f"Fold plan does not match the manifest: {len(missing)} unassigned clips, "
                f"{len(extra)} unknown clips"
            )
        empty = [fold for fold in range(self.k) if fold not in set(self.assignment.values())]
        if empty:
            raise FoldError(f"Folds {empty} hold no clips")


def make_folds(manifest: Manifest, k: int = 4, seed: int = 0) -> FoldPlan:
    """
    Stratified folds: every class is shuffled and dealt round-robin, each class starting where
    the previous one stopped, so per-class and per-fold counts differ by at most one.
    """
    if k < 2:
        raise FoldError(f"Need at least two folds, got {k}")

    by_label: typing.Dict[str, typing.List[str]] = {label: [] for label in manifest.labels}
    for path, label in manifest.entries:
        by_label[label].append(path)

    short = [f"{label} ({len(paths)})" for label, paths in by_label.items() if len(paths) < k]
    if short:
        raise FoldError(f"Classes with fewer than {k} clips: {', '.join(short)}")

    assignment = {}
    dealt = 0
    for label, paths in by_label.items():
        rng = np.random.default_rng(derive_seed(seed, label))
        for position, index in enumerate(rng.permutation(len(paths))):
            assignment[paths[index]] = (dealt + position) % k
        dealt += len(paths)

    return FoldPlan(k=k, assignment=assignment)


def load_fold_plan(
    manifest: Manifest, source: typing.Union[str, pathlib.Path], k: typing.Optional[int] = None
) -> FoldPlan:
    """
    Official folds, either a `path<TAB>fold` listing with 1-based fold numbers, or a directory
    of `fold<N>_evaluate.txt` files whose first column lists fold N's held-out clips.
    """
    source = pathlib.Path(source)
    assignment = {}

    if source.is_dir():
        listings = sorted(source.glob("fold*_evaluate.txt"))
        if not listings:
            raise FoldError(f"No fold*_evaluate.txt files in {source}")
        for listing in listings:
            fold = int(listing.name[len("fold") : -len("_evaluate.txt")]) - 1
            for line in listing.read_text(encoding="utf8").splitlines():
                if line.strip():
                    assignment[line.split("\t")[0].strip()] = fold
    else:
        for number, line in enumerate(source.read_text(encoding="utf8").splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            columns = line.split("\t")
            try:
                assignment[columns[0].strip()] = int(columns[1]) - 1
            except (IndexError, ValueError):
                raise FoldError(f"{source}, line {number}: expected 'path<TAB>fold'") from None

    plan = FoldPlan(k=k or max(assignment.values()) + 1, assignment=assignment)
    plan.check(manifest)
    return plan


def format_fold_plan(manifest: Manifest, plan: FoldPlan) -> str:
    return "".join(f"{path}\t{plan.assignment[path] + 1}\n" for path in manifest.paths)


class Aggregation(enum.Enum):
    sum_log = "sum_log"
    mean_prob = "mean_prob"


@dataclasses.dataclass(frozen=True)
class ClipScore:
    values: np.ndarray
    mode: Aggregation

    def probabilities(self) -> np.ndarray:
        """Summed log-scores become a distribution through softmax; mean probabilities are one."""
        if self.mode == Aggregation.sum_log:
            return scipy.special.softmax(self.values)
        return self.values


def aggregate_clip(
    segment_scores: np.ndarray, mode: typing.Union[Aggregation, str] = Aggregation.mean_prob
) -> ClipScore:
    """
    Combine per-segment class scores into one clip score: summed log-likelihoods for
    generative models, averaged probabilities for networks (the sum up to a 1/S factor).
    """
    mode = Aggregation(mode)
    segment_scores = np.atleast_2d(np.asarray(segment_scores, dtype=np.float64))
    if segment_scores.shape[0] == 0:
        raise EvaluationError("Cannot aggregate an empty set of segments")

    if mode == Aggregation.sum_log:
        return ClipScore(values=segment_scores.sum(axis=0), mode=mode)
    return ClipScore(values=segment_scores.mean(axis=0), mode=mode)


@dataclasses.dataclass(frozen=True)
class EvalReport:
    labels: typing.Tuple[str, ...]
    confusion: np.ndarray  # rows: true class, columns: predicted class

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            return math.nan
        return float(np.trace(self.confusion) / self.total)

    @property
    def per_class(self) -> typing.Dict[str, float]:
        counts = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            rates = np.diag(self.confusion) / counts
        return {label: float(rate) for label, rate in zip(self.labels, rates)}

    def format_table(self) -> str:
        width = max(len(label) for label in self.labels)
        lines = [f"{'class':<{width}}  accuracy  clips"]
        counts = self.confusion.sum(axis=1)
        for (label, rate), count in zip(self.per_class.items(), counts):
            lines.append(f"{label:<{width}}  {100 * rate:7.1f}%  {count:5d}")
        lines.append(f"{'overall':<{width}}  {100 * self.accuracy:7.1f}%  {self.total:5d}")
        return "\n".join(lines) + "\n"


def evaluate(
    predictions: typing.Mapping[str, np.ndarray],
    truth: Manifest,
) -> EvalReport:
    """Arg-max of each clip's class vector against the manifest label; ties pick the lower index."""
    missing = [path for path in truth.paths if path not in predictions]
    if missing:
        raise EvaluationError(
            f"{len(missing)} clips have no prediction: {', '.join(missing[:10])}", missing
        )

    index = {label: position for position, label in enumerate(truth.labels)}
    confusion = np.zeros((len(truth.labels), len(truth.labels)), dtype=np.int64)
    for path, label in truth.entries:
        scores = np.asarray(predictions[path])
        if scores.shape != (len(truth.labels),):
            raise EvaluationError(f"{path}: {scores.shape} scores for {len(truth.labels)} classes")
        confusion[index[label], int(np.argmax(scores))] += 1

    return EvalReport(labels=truth.labels, confusion=confusion)


class Trainer(typing.Protocol[Fitted]):
    def fit(
        self,
        frames: typing.Sequence[Frames],
        labels: typing.Sequence[str],
        classes: typing.Sequence[str],
        seed: int,
    ) -> Fitted:
        ...

    def score(self, fitted: Fitted, frames: Frames) -> np.ndarray:
        """Class probabilities for one clip, in `classes` order."""
        ...


@dataclasses.dataclass(frozen=True)
class FoldResult:
    fold: int
    report: EvalReport
    model: typing.Any
    predictions: typing.Dict[str, np.ndarray]


@dataclasses.dataclass(frozen=True)
class CvReport:
    folds: typing.Tuple[FoldResult, ...]

    @property
    def accuracies(self) -> typing.List[float]:
        return [result.report.accuracy for result in self.folds]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def min(self) -> float:
        return float(np.min(self.accuracies))

    @property
    def max(self) -> float:
        return float(np.max(self.accuracies))

    @property
    def predictions(self) -> typing.Dict[str, np.ndarray]:
        """Out-of-fold prediction for every clip."""
        merged = {}
        for result in self.folds:
            merged.update(result.predictions)
        return merged

    def summary(self) -> str:
        folds = ", ".join(f"{100 * accuracy:.1f}%" for accuracy in self.accuracies)
        return (
            f"CV accuracy {100 * self.mean:.1f}% "
            f"(min {100 * self.min:.1f}%, max {100 * self.max:.1f}%; folds {folds})"
        )


def _fit_and_score(
    trainer: Trainer,
    train: Manifest,
    test: Manifest,
    features: typing.Mapping[str, Frames],
    seed: int,
) -> typing.Tuple[typing.Any, typing.Dict[str, np.ndarray], EvalReport]:
    fitted = trainer.fit(
        [features[path] for path in train.paths],
        [label for _, label in train.entries],
        train.labels,
        seed,
    )
    predictions = {path: np.asarray(trainer.score(fitted, features[path])) for path in test.paths}
    return fitted, predictions, evaluate(predictions, test)


def cv_run(
    manifest: Manifest,
    plan: FoldPlan,
    trainer: Trainer,
    features: typing.Mapping[str, Frames],
    seed: int = 0,
    jobs: int = 1,
) -> CvReport:
    """Fit on the training folds only and score the held-out fold, once per fold."""
    plan.check(manifest)

    def run_fold(fold: int) -> FoldResult:
        train = manifest.subset(plan.train_paths(manifest, fold))
        test = manifest.subset(plan.test_paths(manifest, fold))
        logging.info(f"Fold {fold + 1}/{plan.k}: {len(train)} training, {len(test)} test clips")

        fitted, predictions, report = _fit_and_score(
            trainer, train, test, features, derive_seed(seed, "fold", fold)
        )
        logging.info(f"Fold {fold + 1}/{plan.k}: accuracy {100 * report.accuracy:.1f}%")
        return FoldResult(fold=fold, report=report, model=fitted, predictions=predictions)

    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
        results = tuple(pool.map(run_fold, range(plan.k)))
    return CvReport(folds=results)


def holdout_run(
    train: Manifest,
    test: Manifest,
    trainer: Trainer,
    features: typing.Mapping[str, Frames],
    seed: int = 0,
) -> FoldResult:
    """Fit on the whole development manifest, score a separate evaluation manifest."""
    unknown = sorted(set(test.labels) - set(train.labels))
    if unknown:
        raise EvaluationError(f"Evaluation classes missing from training: {', '.join(unknown)}")

    test = Manifest(entries=test.entries, labels=train.labels)
    fitted, predictions, report = _fit_and_score(trainer, train, test, features, seed)
    logging.info(f"Hold-out accuracy {100 * report.accuracy:.1f}% on {len(test)} clips")
    return FoldResult(fold=-1, report=report, model=fitted, predictions=predictions)


def confused_pairs(report: EvalReport, top: int = 5) -> typing.List[ConfusedPair]:
    """Class pairs by number of mix-ups in either direction, most confused first."""
    symmetric = report.confusion + report.confusion.T
    pairs = []
    for first in range(len(report.labels)):
        for second in range(first + 1, len(report.labels)):
            if symmetric[first, second] > 0:
                pairs.append(
                    (report.labels[first], report.labels[second], int(symmetric[first, second]))
                )
    pairs.sort(key=lambda pair: -pair[2])
    return pairs[:top]


def class_accuracy_table(
    reports: typing.Mapping[str, EvalReport], delimiter: typing.Optional[str] = None
) -> str:
    """
    Class-wise accuracy in percent, one column per model and an Average row over classes.
    Without a delimiter the table is aligned for reading.
    """
    if not reports:
        raise EvaluationError("No reports to tabulate")
    labels = next(iter(reports.values())).labels
    for name, report in reports.items():
        if report.labels != labels:
            raise EvaluationError(f"Report {name} covers a different class list")

    header = ["class", *reports]
    rows = [[label, *(report.per_class[label] for report in reports.values())] for label in labels]
    rows.append(["Average", *(np.nanmean(list(r.per_class.values())) for r in reports.values())])
    cells = [header] + [[row[0], *(f"{100 * value:.1f}" for value in row[1:])] for row in rows]

    if delimiter is not None:
        buffer = io.StringIO()
        csv.writer(buffer, delimiter=delimiter, lineterminator="\n").writerows(cells)
        return buffer.getvalue()

    widths = [max(len(row[column]) for row in cells) for column in range(len(header))]
    lines = [
        "  ".join(
            cell.ljust(width) if column == 0 else cell.rjust(width)
            for column, (cell, width) in enumerate(zip(row, widths))
        )
        for row in cells
    ]
    return "\n".join(lines) + "\n"
