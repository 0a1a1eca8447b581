"""
Total-variability i-vector front end.

A clip's mean supervector is modeled as M = m + T y with a standard normal prior on y. The UBM
supplies m (its concatenated means), the diagonal covariances and the frame posteriors; T is
learned by EM over utterance statistics; the posterior mean of y is the i-vector. LDA then
projects i-vectors onto the directions that best separate the classes.
"""

import typing
import logging
import pathlib
import construct
import functools
import dataclasses
import numpy as np
import scipy.linalg
from concurrent.futures import ThreadPoolExecutor
from scenekit.sugar import atomic_write, derive_seed
from scenekit.gmm import GmmModel, fit_gmm, posteriors
from scenekit.static.model import IVectorBody, IVectorFile, IVectorScoring

T_INIT_SCALE: typing.Final = 0.1
LDA_SHRINKAGE: typing.Final = 1e-6
EMPTY_COMPONENT: typing.Final = 1e-10
DEFAULT_SCORE_SCALE: typing.Final = 10.0


class IVectorError(Exception):
    ...


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclasses.dataclass(frozen=True)
class BwStats:
    n: np.ndarray  # K soft counts
    f: np.ndarray  # K x D first-order stats centered on the UBM means

    def __post_init__(self):
        object.__setattr__(self, "n", _frozen(self.n))
        object.__setattr__(self, "f", _frozen(self.f))
        if self.f.shape[:1] != self.n.shape or self.f.ndim != 2:
            raise IVectorError(f"Stats disagree: n {self.n.shape}, f {self.f.shape}")

    @property
    def frame_count(self) -> float:
        return float(self.n.sum())


@dataclasses.dataclass(frozen=True)
class Lda:
    projection: np.ndarray  # R x L
    class_means: np.ndarray  # C x L, projected
    labels: typing.Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "projection", _frozen(self.projection))
        object.__setattr__(self, "class_means", _frozen(self.class_means))
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    def project(self, w: np.ndarray) -> np.ndarray:
        return np.asarray(w, dtype=np.float64) @ self.projection


@dataclasses.dataclass(frozen=True)
class IVectorModel:
    ubm: GmmModel
    t_matrix: np.ndarray  # (K*D) x R
    lda: typing.Optional[Lda] = None
    scoring: IVectorScoring = IVectorScoring.cosine
    length_norm: bool = False
    score_scale: float = DEFAULT_SCORE_SCALE

    def __post_init__(self):
        object.__setattr__(self, "t_matrix", _frozen(self.t_matrix))
        super_dim = self.ubm.components * self.ubm.dim
        if self.t_matrix.ndim != 2 or self.t_matrix.shape[0] != super_dim:
            raise IVectorError(
                f"T matrix {self.t_matrix.shape} does not fit a {super_dim}-dim supervector"
            )
        if self.t_matrix.shape[1] > super_dim:
            raise IVectorError(
                f"Rank {self.t_matrix.shape[1]} exceeds the supervector size {super_dim}"
            )

    @property
    def m(self) -> np.ndarray:
        return self.ubm.supervector

    @property
    def rank(self) -> int:
        return self.t_matrix.shape[1]

    @functools.cached_property
    def component_gram(self) -> np.ndarray:
        return _component_gram(self.ubm, self.t_matrix)


def _component_gram(ubm: GmmModel, t_matrix: np.ndarray) -> np.ndarray:
    """Per-component T_k' Sigma_k^-1 T_k, shape K x R x R."""
    blocks = t_matrix.reshape(ubm.components, ubm.dim, -1)
    return np.einsum("kdr,kd,kds->krs", blocks, 1.0 / ubm.variances, blocks)


def _frames_of(seq) -> np.ndarray:
    frames = np.asarray(getattr(seq, "frames", seq), dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise IVectorError(f"Expected a non-empty T x D frame matrix, got shape {frames.shape}")
    return frames


def bw_stats(ubm: GmmModel, seq) -> BwStats:
    frames = _frames_of(seq)
    if frames.shape[1] != ubm.dim:
        raise IVectorError(f"UBM is {ubm.dim}-dim, frames are {frames.shape[1]}-dim")

    gamma, _ = posteriors(ubm, frames)
    n = gamma.sum(axis=0)
    return BwStats(n=n, f=gamma.T @ frames - n[:, np.newaxis] * ubm.means)


def _check_stats(ubm: GmmModel, stats: BwStats) -> None:
    if stats.f.shape != (ubm.components, ubm.dim):
        raise IVectorError(
            f"Stats of shape {stats.f.shape} do not match a {ubm.components}x{ubm.dim} UBM"
        )


def _posterior(
    ubm: GmmModel, t_matrix: np.ndarray, gram: np.ndarray, stats: BwStats
) -> typing.Tuple[np.ndarray, tuple, np.ndarray]:
    """Posterior mean of y, the Cholesky factor of its precision L, and the projection b."""
    _check_stats(ubm, stats)
    rank = t_matrix.shape[1]
    precision = np.eye(rank) + np.tensordot(stats.n, gram, axes=1)
    b = t_matrix.T @ (stats.f / ubm.variances).ravel()

    try:
        factor = scipy.linalg.cho_factor(precision)
    except np.linalg.LinAlgError as error:
        raise IVectorError(f"Posterior precision is not positive definite: {error}") from error

    return scipy.linalg.cho_solve(factor, b), factor, b


def extract_ivector(model: IVectorModel, stats: BwStats) -> np.ndarray:
    w, _, _ = _posterior(model.ubm, model.t_matrix, model.component_gram, stats)
    return w


def _expectations(
    ubm: GmmModel, t_matrix: np.ndarray, gram: np.ndarray, stats: BwStats
) -> typing.Tuple[np.ndarray, np.ndarray, float]:
    mean, factor, b = _posterior(ubm, t_matrix, gram, stats)
    covariance = scipy.linalg.cho_solve(factor, np.eye(t_matrix.shape[1]))
    log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
    return mean, covariance + np.outer(mean, mean), 0.5 * float(b @ mean) - 0.5 * log_det


def train_t_matrix(
    stats_list: typing.Sequence[BwStats],
    ubm: GmmModel,
    r: int,
    iters: int = 10,
    seed: int = 0,
    objective: typing.Optional[typing.List[float]] = None,
    jobs: int = 1,
    init: typing.Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    EM estimate of the total-variability matrix.

    When given, `objective` receives sum_u (b_u' L_u^-1 b_u - log|L_u|) / 2 for the matrix
    entering every iteration, the T-dependent part of the data log-likelihood.
    """
    super_dim = ubm.components * ubm.dim
    if not 1 <= r <= super_dim:
        raise IVectorError(f"Rank {r} must lie in [1, {super_dim}]")
    if len(stats_list) < 2:
        raise IVectorError(f"Need at least two utterances, got {len(stats_list)}")
    for stats in stats_list:
        _check_stats(ubm, stats)

    if init is None:
        t_matrix = T_INIT_SCALE * np.random.default_rng(seed).standard_normal((super_dim, r))
    else:
        t_matrix = np.array(init, dtype=np.float64)

    counts = np.sum([stats.n for stats in stats_list], axis=0)
    first_order = [stats.f.ravel() for stats in stats_list]

    for iteration in range(iters):
        gram = _component_gram(ubm, t_matrix)

        def expect(stats: BwStats):
            return _expectations(ubm, t_matrix, gram, stats)

        with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
            expectations = list(pool.map(expect, stats_list))

        second = np.zeros((ubm.components, r, r))
        cross = np.zeros((super_dim, r))
        total = 0.0
        for stats, f, (mean, moment, value) in zip(stats_list, first_order, expectations):
            second += stats.n[:, np.newaxis, np.newaxis] * moment
            cross += np.outer(f, mean)
            total += value

        if objective is not None:
            objective.append(total)
        logging.debug(f"T-matrix iteration {iteration}: objective {total:.6f}")

        blocks = t_matrix.reshape(ubm.components, ubm.dim, r)
        cross_blocks = cross.reshape(ubm.components, ubm.dim, r)
        for component in np.flatnonzero(counts > EMPTY_COMPONENT):
            blocks[component] = scipy.linalg.solve(
                second[component], cross_blocks[component].T, assume_a="pos"
            ).T
        t_matrix = blocks.reshape(super_dim, r)

    return t_matrix


def length_normalize(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    norm = np.linalg.norm(w, axis=-1, keepdims=True)
    return np.where(norm > 0, w / np.where(norm > 0, norm, 1.0), 0.0)


def _leading_sign(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so each one's largest-magnitude entry is positive."""
    rows = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[rows, np.arange(vectors.shape[1])])
    return vectors * np.where(signs == 0, 1.0, signs)


def fit_lda(ivectors: np.ndarray, labels: typing.Sequence[str]) -> Lda:
    ivectors = np.asarray(ivectors, dtype=np.float64)
    if ivectors.ndim != 2 or ivectors.shape[0] != len(labels):
        raise IVectorError(f"{len(labels)} labels for i-vector matrix of shape {ivectors.shape}")

    classes = tuple(sorted(set(labels)))
    if len(classes) < 2:
        raise IVectorError(f"LDA needs at least two classes, got {len(classes)}")

    labels = np.asarray(labels)
    rank = ivectors.shape[1]
    overall = ivectors.mean(axis=0)

    class_means = np.empty((len(classes), rank))
    within = np.zeros((rank, rank))
    between = np.zeros((rank, rank))
    for index, label in enumerate(classes):
        members = ivectors[labels == label]
        class_means[index] = members.mean(axis=0)
        centered = members - class_means[index]
        within += centered.T @ centered
        offset = class_means[index] - overall
        between += len(members) * np.outer(offset, offset)

    shrinkage = LDA_SHRINKAGE * np.trace(within) / rank
    if shrinkage <= 0:
        shrinkage = LDA_SHRINKAGE

    values, vectors = scipy.linalg.eigh(between, within + shrinkage * np.eye(rank))
    keep = np.argsort(values, kind="stable")[::-1][: min(len(classes) - 1, rank)]
    projection = _leading_sign(vectors[:, keep])

    return Lda(projection=projection, class_means=class_means @ projection, labels=classes)


def score_projected(
    lda: Lda, z: np.ndarray, scoring: IVectorScoring = IVectorScoring.cosine
) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if scoring == IVectorScoring.euclidean:
        return -np.linalg.norm(lda.class_means - z, axis=1)

    norms = np.linalg.norm(lda.class_means, axis=1) * np.linalg.norm(z)
    return np.where(norms > 0, lda.class_means @ z / np.where(norms > 0, norms, 1.0), 0.0)


def score_ivector(model: IVectorModel, w: np.ndarray) -> np.ndarray:
    if model.lda is None:
        raise IVectorError("Model has no trained LDA stage")
    if model.length_norm:
        w = length_normalize(w)
    return score_projected(model.lda, model.lda.project(w), model.scoring)


def ivector_classify(model: IVectorModel, seq) -> np.ndarray:
    if model.lda is None:
        raise IVectorError("Model has no trained LDA stage")
    return score_ivector(model, extract_ivector(model, bw_stats(model.ubm, seq)))


def train_ivector_system(
    sequences: typing.Sequence[np.ndarray],
    labels: typing.Sequence[str],
    components: int = 256,
    rank: int = 400,
    ubm_iters: int = 20,
    t_iters: int = 10,
    seed: int = 0,
    scoring: IVectorScoring = IVectorScoring.cosine,
    length_norm: bool = False,
    score_scale: float = DEFAULT_SCORE_SCALE,
    jobs: int = 1,
) -> IVectorModel:
    """UBM, statistics, T matrix, i-vectors and LDA in one pass over labeled clips."""
    sequences = [_frames_of(seq) for seq in sequences]
    if len(sequences) != len(labels):
        raise IVectorError(f"{len(labels)} labels for {len(sequences)} clips")

    logging.info(f"Training {components}-component UBM on {len(sequences)} clips")
    ubm = fit_gmm(np.vstack(sequences), components, ubm_iters, derive_seed(seed, "ubm"))

    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
        stats_list = list(pool.map(functools.partial(bw_stats, ubm), sequences))

    logging.info(f"Training rank-{rank} total-variability matrix")
    t_matrix = train_t_matrix(
        stats_list, ubm, rank, t_iters, derive_seed(seed, "t-matrix"), jobs=jobs
    )

    model = IVectorModel(
        ubm=ubm,
        t_matrix=t_matrix,
        scoring=scoring,
        length_norm=length_norm,
        score_scale=score_scale,
    )
    ivectors = np.array([extract_ivector(model, stats) for stats in stats_list])
    if length_norm:
        ivectors = length_normalize(ivectors)

    return dataclasses.replace(model, lda=fit_lda(ivectors, labels))


def ivector_to_record(model: IVectorModel) -> IVectorBody:
    if model.lda is None:
        raise IVectorError("Only models with a trained LDA stage can be stored")
    return IVectorBody(
        Ubm=model.ubm.to_record(),
        Supervector=model.m,
        TMatrix=model.t_matrix,
        Lda=model.lda.projection,
        Labels=list(model.lda.labels),
        ClassMeans=model.lda.class_means,
        Scoring=model.scoring,
        LengthNorm=model.length_norm,
        ScoreScale=model.score_scale,
    )


def ivector_from_record(record: IVectorBody) -> IVectorModel:
    ubm = GmmModel.from_record(record.Ubm)
    if not np.array_equal(record.Supervector, ubm.supervector):
        raise IVectorError("Stored supervector does not match the stored UBM means")
    return IVectorModel(
        ubm=ubm,
        t_matrix=record.TMatrix,
        lda=Lda(projection=record.Lda, class_means=record.ClassMeans, labels=record.Labels),
        scoring=record.Scoring,
        length_norm=record.LengthNorm,
        score_scale=record.ScoreScale,
    )


def encode_ivector(model: IVectorModel) -> bytes:
    return IVectorFile.build(dict(Model=ivector_to_record(model)))


def decode_ivector(data: bytes) -> IVectorModel:
    try:
        return ivector_from_record(IVectorFile.parse(data).Model)
    except construct.ConstructError as error:
        raise IVectorError(f"Not a readable i-vector model file: {error}") from error


def save_ivector(path: typing.Union[str, pathlib.Path], model: IVectorModel) -> None:
    atomic_write(path, encode_ivector(model))


def load_ivector(path: typing.Union[str, pathlib.Path]) -> IVectorModel:
    return decode_ivector(pathlib.Path(path).read_bytes())
