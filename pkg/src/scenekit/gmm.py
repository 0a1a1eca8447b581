"""
Diagonal-covariance Gaussian mixtures.

One mixture per class gives the baseline classifier; a single mixture over every class doubles
as the universal background model of the i-vector front end.
"""

import math
import typing
import logging
import pathlib
import construct
import dataclasses
import numpy as np
import scipy.special
import scipy.cluster.vq
from concurrent.futures import ThreadPoolExecutor
from scenekit.sugar import atomic_write, derive_seed
from scenekit.static.model import (
    ClassifierFile,
    GmmBody,
    GmmFile,
    LabeledGmm,
)

VARIANCE_FLOOR_RATIO: typing.Final = 1e-3
KMEANS_ITERATIONS: typing.Final = 10
RELATIVE_TOLERANCE: typing.Final = 1e-5
EMPTY_COMPONENT: typing.Final = 1e-10

LOG_2PI: typing.Final = math.log(2 * math.pi)


class GmmError(Exception):
    ...


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclasses.dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray  # K
    means: np.ndarray  # K x D
    variances: np.ndarray  # K x D

    def __post_init__(self):
        for name in ("weights", "means", "variances"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

        if self.means.ndim != 2 or self.variances.shape != self.means.shape:
            raise GmmError(f"Means {self.means.shape} and variances {self.variances.shape} differ")
        if self.weights.shape != (self.means.shape[0],):
            raise GmmError(f"Expected {self.means.shape[0]} weights, got {self.weights.shape}")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise GmmError(f"Weights must be non-negative and sum to 1, got {self.weights.sum()}")
        if not np.all(self.variances > 0):
            raise GmmError("Variances must be strictly positive")

    @property
    def components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def supervector(self) -> np.ndarray:
        return self.means.ravel()

    def to_record(self) -> GmmBody:
        return GmmBody(Weights=self.weights, Means=self.means, Variances=self.variances)

    @classmethod
    def from_record(cls, record: GmmBody) -> "GmmModel":
        return cls(weights=record.Weights, means=record.Means, variances=record.Variances)


@dataclasses.dataclass(frozen=True)
class GmmClassifier:
    labels: typing.Tuple[str, ...]
    models: typing.Tuple[GmmModel, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "models", tuple(self.models))
        if len(self.labels) != len(self.models) or not self.labels:
            raise GmmError(f"{len(self.labels)} labels for {len(self.models)} class models")
        if len({model.dim for model in self.models}) != 1:
            raise GmmError("Class models disagree on feature dimension")

    @property
    def class_models(self) -> typing.Dict[str, GmmModel]:
        return dict(zip(self.labels, self.models))

    @property
    def dim(self) -> int:
        return self.models[0].dim


def _as_frames(frames, dim: typing.Optional[int] = None) -> np.ndarray:
    frames = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    if frames.ndim == 1:
        frames = frames[np.newaxis, :]
    if frames.ndim != 2:
        raise GmmError(f"Expected an N x D frame matrix, got shape {frames.shape}")
    if dim is not None and frames.shape[1] != dim:
        raise GmmError(f"Model is {dim}-dim, frames are {frames.shape[1]}-dim")
    return frames


def component_log_densities(model: GmmModel, frames: np.ndarray) -> np.ndarray:
    """N x K matrix of log w_k + log N(x_n; mu_k, Sigma_k)."""
    frames = _as_frames(frames, model.dim)
    precision = 1.0 / model.variances
    quadratic = (
        np.square(frames) @ precision.T
        - 2.0 * frames @ (model.means * precision).T
        + np.sum(np.square(model.means) * precision, axis=1)
    )
    constant = model.dim * LOG_2PI + np.sum(np.log(model.variances), axis=1)
    with np.errstate(divide="ignore"):
        log_weights = np.log(model.weights)
    return log_weights - 0.5 * (constant + quadratic)


def frame_log_likelihoods(model: GmmModel, frames: np.ndarray) -> np.ndarray:
    return scipy.special.logsumexp(component_log_densities(model, frames), axis=1)


def log_likelihood(model: GmmModel, frame: np.ndarray):
    """Log-density of one frame, or of every row of a frame matrix."""
    values = frame_log_likelihoods(model, frame)
    return float(values[0]) if np.ndim(frame) == 1 else values


def posteriors(model: GmmModel, frames: np.ndarray) -> typing.Tuple[np.ndarray, np.ndarray]:
    """Responsibilities (N x K) and per-frame log-likelihoods."""
    log_densities = component_log_densities(model, frames)
    per_frame = scipy.special.logsumexp(log_densities, axis=1)
    return np.exp(log_densities - per_frame[:, np.newaxis]), per_frame


def kmeans_plus_plus(frames: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2 seeding with one uniform draw per center, inverted through the cumulative weights."""
    count = frames.shape[0]
    centers = [frames[min(int(rng.random() * count), count - 1)]]

    distances = np.sum(np.square(frames - centers[0]), axis=1)
    for _ in range(1, k):
        cumulative = np.cumsum(distances)
        if cumulative[-1] <= 0:
            index = min(int(rng.random() * count), count - 1)
        else:
            index = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
            index = min(index, count - 1)
        centers.append(frames[index])
        distances = np.minimum(distances, np.sum(np.square(frames - frames[index]), axis=1))

    return np.array(centers)


def kmeans(
    frames: np.ndarray, k: int, rng: np.random.Generator, iters: int = KMEANS_ITERATIONS
) -> typing.Tuple[np.ndarray, np.ndarray]:
    centers = kmeans_plus_plus(frames, k, rng)
    codes = np.zeros(frames.shape[0], dtype=int)

    for _ in range(iters):
        codes, _ = scipy.cluster.vq.vq(frames, centers, check_finite=False)
        for cluster in range(k):
            members = frames[codes == cluster]
            if len(members):
                centers[cluster] = members.mean(axis=0)
            else:
                logging.warning(f"k-means cluster {cluster} is empty, keeping its center")

    return centers, codes


def _initial_model(frames: np.ndarray, k: int, floor: np.ndarray, rng) -> GmmModel:
    centers, codes = kmeans(frames, k, rng)
    counts = np.bincount(codes, minlength=k).astype(np.float64)

    variances = np.empty_like(centers)
    global_variance = frames.var(axis=0)
    for cluster in range(k):
        members = frames[codes == cluster]
        variances[cluster] = members.var(axis=0) if len(members) > 1 else global_variance

    counts = np.maximum(counts, 1.0)
    return GmmModel(
        weights=counts / counts.sum(), means=centers, variances=np.maximum(variances, floor)
    )


def _maximize(
    frames: np.ndarray, gamma: np.ndarray, previous: GmmModel, floor: np.ndarray
) -> GmmModel:
    counts = gamma.sum(axis=0)
    weights = counts / counts.sum()
    means = np.array(previous.means)
    variances = np.array(previous.variances)

    for component in np.flatnonzero(counts > EMPTY_COMPONENT):
        responsibility = gamma[:, component]
        means[component] = responsibility @ frames / counts[component]
        centered = frames - means[component]
        variances[component] = responsibility @ np.square(centered) / counts[component]

    collapsed = np.count_nonzero(counts <= EMPTY_COMPONENT)
    if collapsed:
        logging.warning(f"{collapsed} mixture component(s) received no frames")

    return GmmModel(weights=weights, means=means, variances=np.maximum(variances, floor))


def fit_gmm(
    frames: np.ndarray,
    k: int,
    iters: int = 100,
    seed: int = 0,
    trace: typing.Optional[typing.List[float]] = None,
) -> GmmModel:
    """
    EM from a seeded k-means++ / Lloyd initialization.

    Stops after `iters` iterations or once the total log-likelihood changes by less than
    1e-5 relative to the previous iteration. When given, `trace` receives the total
    log-likelihood of every visited model, which never decreases.
    """
    frames = _as_frames(frames)
    if k < 1:
        raise GmmError(f"Need at least one component, got {k}")
    if iters < 1:
        raise GmmError(f"Need at least one EM iteration, got {iters}")
    if frames.shape[0] < k:
        raise GmmError(f"{frames.shape[0]} frames cannot support {k} components")
    if not np.all(np.isfinite(frames)):
        raise GmmError("Training frames contain non-finite values")

    floor = np.maximum(VARIANCE_FLOOR_RATIO * frames.var(axis=0), np.finfo(np.float64).tiny)
    model = _initial_model(frames, k, floor, np.random.default_rng(seed))

    previous = -np.inf
    for iteration in range(iters):
        gamma, per_frame = posteriors(model, frames)
        total = float(per_frame.sum())
        if trace is not None:
            trace.append(total)
        logging.debug(f"EM iteration {iteration}: log-likelihood {total:.6f}")

        if abs(total - previous) < RELATIVE_TOLERANCE * abs(total):
            break
        previous = total
        model = _maximize(frames, gamma, model, floor)

    return model


def class_seed(seed: int, frames: np.ndarray) -> int:
    """Seed derived from the bag contents, so identical bags train identical models."""
    return derive_seed(seed, np.ascontiguousarray(frames, dtype=np.float64).tobytes())


def train_classifier(
    bags: typing.Mapping[str, np.ndarray],
    k: int,
    iters: int = 100,
    seed: int = 0,
    labels: typing.Optional[typing.Sequence[str]] = None,
    jobs: int = 1,
) -> GmmClassifier:
    labels = tuple(sorted(bags) if labels is None else labels)
    if not labels:
        raise GmmError("No classes to train")

    missing = [label for label in labels if label not in bags or len(bags[label]) == 0]
    if missing:
        raise GmmError(f"No training frames for class(es) {', '.join(missing)}")

    for label in labels:
        if len(bags[label]) < k:
            raise GmmError(f"Class '{label}' has {len(bags[label])} frames, fewer than {k}")

    def fit_one(label: str) -> GmmModel:
        bag = _as_frames(bags[label])
        logging.info(f"Training {k}-component GMM for '{label}' on {len(bag)} frames")
        return fit_gmm(bag, k, iters, class_seed(seed, bag))

    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
        models = list(pool.map(fit_one, labels))

    return GmmClassifier(labels=labels, models=models)


def classify_clip(clf: GmmClassifier, seq) -> np.ndarray:
    """Per-class sum of frame log-likelihoods over the clip."""
    frames = _as_frames(seq, clf.dim)
    if frames.shape[0] == 0:
        raise GmmError("Cannot classify an empty sequence")
    return np.array([frame_log_likelihoods(model, frames).sum() for model in clf.models])


def predict_label(clf: GmmClassifier, seq) -> str:
    return clf.labels[int(np.argmax(classify_clip(clf, seq)))]


def classifier_to_record(clf: GmmClassifier) -> dict:
    return dict(
        Classes=[
            LabeledGmm(Label=label, Model=model.to_record())
            for label, model in zip(clf.labels, clf.models)
        ]
    )


def classifier_from_record(record) -> GmmClassifier:
    return GmmClassifier(
        labels=[entry.Label for entry in record.Classes],
        models=[GmmModel.from_record(entry.Model) for entry in record.Classes],
    )


def encode_gmm(model: GmmModel) -> bytes:
    return GmmFile.build(dict(Model=model.to_record()))


def decode_gmm(data: bytes) -> GmmModel:
    try:
        return GmmModel.from_record(GmmFile.parse(data).Model)
    except construct.ConstructError as error:
        raise GmmError(f"Not a readable GMM file: {error}") from error


def encode_classifier(clf: GmmClassifier) -> bytes:
    return ClassifierFile.build(dict(Classifier=classifier_to_record(clf)))


def decode_classifier(data: bytes) -> GmmClassifier:
    try:
        return classifier_from_record(ClassifierFile.parse(data).Classifier)
    except construct.ConstructError as error:
        raise GmmError(f"Not a readable GMM classifier file: {error}") from error


def save_classifier(path: typing.Union[str, pathlib.Path], clf: GmmClassifier) -> None:
    atomic_write(path, encode_classifier(clf))


def load_classifier(path: typing.Union[str, pathlib.Path]) -> GmmClassifier:
    return decode_classifier(pathlib.Path(path).read_bytes())

