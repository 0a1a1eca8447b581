import numpy as np
import pytest
import scipy.linalg
from scenekit.gmm import GmmModel
from scenekit.static.model import IVectorScoring
from scenekit.ivector import (
    BwStats,
    IVectorError,
    IVectorModel,
    bw_stats,
    decode_ivector,
    encode_ivector,
    extract_ivector,
    fit_lda,
    ivector_classify,
    length_normalize,
    load_ivector,
    save_ivector,
    score_projected,
    train_ivector_system,
    train_t_matrix,
)

COMPONENTS, DIM, RANK = 8, 6, 4


def true_system(rng):
    means = rng.normal(0, 4, size=(COMPONENTS, DIM))
    ubm = GmmModel(
        weights=np.full(COMPONENTS, 1 / COMPONENTS), means=means, variances=np.ones_like(means)
    )
    return ubm, rng.normal(0, 0.5, size=(COMPONENTS * DIM, RANK))


def utterance(rng, ubm, t_matrix, y, frames=500):
    shifted = ubm.means + (t_matrix @ y).reshape(COMPONENTS, DIM)
    components = rng.integers(0, COMPONENTS, frames)
    return shifted[components] + rng.standard_normal((frames, DIM))


@pytest.fixture(scope="module")
def generative_run():
    rng = np.random.default_rng(11)
    ubm, t_true = true_system(rng)
    factors = rng.standard_normal((200, RANK))
    stats = [bw_stats(ubm, utterance(rng, ubm, t_true, y)) for y in factors]

    objective = []
    t_est = train_t_matrix(stats, ubm, RANK, iters=30, seed=0, objective=objective)
    return ubm, t_true, t_est, factors, stats, objective


class TestTotalVariability:
    def test_objective_never_decreases(self, generative_run):
        objective = np.array(generative_run[-1])
        assert np.all(np.diff(objective) >= -1e-8 * np.abs(objective[1:]))

    def test_subspace_is_recovered(self, generative_run):
        _, t_true, t_est, *_ = generative_run
        angles = np.degrees(scipy.linalg.subspace_angles(t_est, t_true))
        assert angles.max() < 15.0

    def test_ivectors_track_the_true_factors(self, generative_run):
        ubm, _, t_est, factors, stats, _ = generative_run
        model = IVectorModel(ubm=ubm, t_matrix=t_est)
        ivectors = np.array([extract_ivector(model, item) for item in stats])

        # the estimate is only defined up to an invertible map of the factor space
        half = len(factors) // 2
        mapping, *_ = np.linalg.lstsq(ivectors[:half], factors[:half], rcond=None)
        aligned = ivectors[half:] @ mapping
        truth = factors[half:]
        cosine = np.sum(aligned * truth, axis=1) / (
            np.linalg.norm(aligned, axis=1) * np.linalg.norm(truth, axis=1)
        )
        assert cosine.mean() > 0.9

    def test_rank_bounds(self, generative_run):
        ubm, *_, stats, _ = generative_run
        with pytest.raises(IVectorError):
            train_t_matrix(stats[:5], ubm, COMPONENTS * DIM + 1)

    def test_stats_shape_is_checked(self, generative_run):
        ubm, _, t_est, *_ = generative_run
        model = IVectorModel(ubm=ubm, t_matrix=t_est)
        with pytest.raises(IVectorError):
            extract_ivector(model, BwStats(n=np.ones(3), f=np.zeros((3, DIM))))

    def test_zero_matrix_gives_zero_ivector(self, rng):
        ubm, _ = true_system(rng)
        model = IVectorModel(ubm=ubm, t_matrix=np.zeros((COMPONENTS * DIM, RANK)))
        w = extract_ivector(model, bw_stats(ubm, rng.normal(size=(50, DIM))))
        np.testing.assert_array_equal(w, np.zeros(RANK))

    def test_empty_stats_give_zero_ivector(self, rng):
        ubm, t_matrix = true_system(rng)
        model = IVectorModel(ubm=ubm, t_matrix=t_matrix)
        empty = BwStats(n=np.zeros(COMPONENTS), f=np.zeros((COMPONENTS, DIM)))
        np.testing.assert_array_equal(extract_ivector(model, empty), np.zeros(RANK))

    def test_components_without_counts_keep_their_rows(self, rng):
        ubm, t_matrix = true_system(rng)
        empty = BwStats(n=np.zeros(COMPONENTS), f=np.zeros((COMPONENTS, DIM)))
        objective = []
        updated = train_t_matrix(
            [empty, empty], ubm, RANK, iters=1, init=t_matrix, objective=objective
        )
        np.testing.assert_array_equal(updated, t_matrix)
        assert objective == [0.0]


class TestStats:
    def test_counts_sum_to_frames(self, rng):
        ubm, _ = true_system(rng)
        stats = bw_stats(ubm, rng.normal(size=(120, DIM)))
        assert stats.frame_count == pytest.approx(120.0)

    def test_dimension_mismatch(self, rng):
        ubm, _ = true_system(rng)
        with pytest.raises(IVectorError):
            bw_stats(ubm, np.zeros((10, DIM + 1)))

    def test_single_component(self, rng):
        ubm = GmmModel(weights=[1.0], means=[[1.0, -2.0]], variances=[[1.0, 1.0]])
        frames = rng.normal(size=(40, 2))
        stats = bw_stats(ubm, frames)
        np.testing.assert_allclose(stats.n, [40.0])
        np.testing.assert_allclose(stats.f[0], frames.sum(axis=0) - 40 * np.array([1.0, -2.0]))

    def test_well_separated_components(self, rng):
        ubm = GmmModel(weights=[0.5, 0.5], means=[[-10.0], [10.0]], variances=[[1.0], [1.0]])
        low, high = rng.normal(-10.0, 1.0, size=(30, 1)), rng.normal(10.0, 1.0, size=(20, 1))
        stats = bw_stats(ubm, np.vstack([low, high]))
        np.testing.assert_allclose(stats.n, [30.0, 20.0], atol=1e-9)
        expected = [low.sum() + 300.0, high.sum() - 200.0]
        np.testing.assert_allclose(stats.f[:, 0], expected, atol=1e-6)


class TestLdaAndScoring:
    def test_length_normalize(self, rng):
        vectors = length_normalize(rng.normal(size=(5, 3)))
        np.testing.assert_allclose(np.linalg.norm(vectors, axis=1), 1.0)
        np.testing.assert_array_equal(length_normalize(np.zeros(3)), 0.0)

    def test_lda_keeps_classes_minus_one_directions(self, rng):
        centres = 2.0 * np.eye(5)[:3]
        ivectors = np.vstack([rng.normal(centre, 0.3, size=(20, 5)) for centre in centres])
        labels = ["a"] * 20 + ["b"] * 20 + ["c"] * 20
        lda = fit_lda(ivectors, labels)
        assert lda.projection.shape == (5, 2)
        assert lda.labels == ("a", "b", "c")

        for index, centre in enumerate(centres):
            z = lda.project(centre)
            for scoring in IVectorScoring:
                assert np.argmax(score_projected(lda, z, scoring)) == index

    def test_lda_needs_two_classes(self, rng):
        with pytest.raises(IVectorError):
            fit_lda(rng.normal(size=(4, 3)), ["a"] * 4)

    def test_lda_on_a_line(self, rng):
        ivectors = np.concatenate([rng.normal(-2.0, 0.5, 50), rng.normal(2.0, 0.5, 50)])
        lda = fit_lda(ivectors[:, None], ["a"] * 50 + ["b"] * 50)
        assert lda.projection.shape == (1, 1)
        assert lda.class_means[0, 0] < lda.class_means[1, 0]
        for index, point in enumerate([-2.0, 2.0]):
            z = lda.project([point])
            assert np.argmax(score_projected(lda, z, IVectorScoring.euclidean)) == index

    def test_lda_finds_the_discriminative_plane(self, rng):
        centres = np.zeros((3, 10))
        centres[1, 0], centres[2, 1] = 4.0, 4.0
        ivectors = np.vstack([rng.normal(centre, 0.5, size=(1000, 10)) for centre in centres])
        lda = fit_lda(ivectors, ["a"] * 1000 + ["b"] * 1000 + ["c"] * 1000)
        angles = np.degrees(scipy.linalg.subspace_angles(lda.projection, np.eye(10)[:, :2]))
        assert angles.max() < 10.0

    def test_cosine_score_at_a_class_mean(self, rng):
        centres = 2.0 * np.eye(4)[:3]
        ivectors = np.vstack([rng.normal(centre, 0.3, size=(20, 4)) for centre in centres])
        lda = fit_lda(ivectors, ["a"] * 20 + ["b"] * 20 + ["c"] * 20)
        for index, mean in enumerate(lda.class_means):
            assert score_projected(lda, mean)[index] == pytest.approx(1.0)

        w = rng.normal(size=4)
        np.testing.assert_allclose(
            score_projected(lda, lda.project(5.0 * w)), score_projected(lda, lda.project(w))
        )


SCENE_CENTRES = dict(bus=3.0 * np.eye(4)[0], park=3.0 * np.eye(4)[1], tram=3.0 * np.eye(4)[2])


def scene_clips(rng, centres, clips=6, frames=150, dim=4):
    sequences, labels = [], []
    for label, centre in centres.items():
        for _ in range(clips):
            sequences.append(rng.normal(centre, 1.0, size=(frames, dim)))
            labels.append(label)
    return sequences, labels


class TestSystem:
    @pytest.fixture(scope="class")
    def system(self):
        rng = np.random.default_rng(2)
        sequences, labels = scene_clips(rng, SCENE_CENTRES)
        model = train_ivector_system(
            sequences, labels, components=4, rank=6, ubm_iters=10, t_iters=5, seed=0
        )
        return model, rng

    def test_classifies_new_clips(self, system):
        model, rng = system
        for index, centre in enumerate(SCENE_CENTRES.values()):
            scores = ivector_classify(model, rng.normal(centre, 1.0, size=(150, 4)))
            assert np.argmax(scores) == index

    def test_round_trip(self, system, tmp_path):
        model, _ = system
        save_ivector(tmp_path / "model.ski", model)
        loaded = load_ivector(tmp_path / "model.ski")
        assert encode_ivector(loaded) == encode_ivector(model)
        assert loaded.lda.labels == ("bus", "park", "tram")

    def test_wrong_magic(self, system):
        model, _ = system
        with pytest.raises(IVectorError):
            decode_ivector(b"SKG1" + encode_ivector(model)[4:])

    def test_length_normalized_variant(self):
        rng = np.random.default_rng(4)
        sequences, labels = scene_clips(rng, dict(a=-3.0, b=3.0), clips=5)
        model = train_ivector_system(
            sequences, labels, components=2, rank=3, ubm_iters=5, t_iters=3, length_norm=True
        )
        assert model.length_norm
        assert np.argmax(ivector_classify(model, rng.normal(3.0, 1.0, size=(150, 4)))) == 1
