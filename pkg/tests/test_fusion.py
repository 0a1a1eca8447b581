import numpy as np
import pytest
from scenekit.fusion import (
    FusionError,
    FusionSpec,
    ModelOutput,
    WeightMode,
    format_predictions,
    fuse,
    gate_models,
    parse_predictions,
    rank_models,
    read_predictions,
    weighted_average,
    write_predictions,
)

LABELS = ("bus", "park", "tram")
CLIPS = tuple(f"clip{index}" for index in range(9))
TRUTH = {clip: LABELS[index % 3] for index, clip in enumerate(CLIPS)}


def blind_spot_model(blind: int, accuracy: float = 6 / 9) -> ModelOutput:
    """Confidently wrong on its own third of the clips, mildly right elsewhere."""
    probs = np.full((len(CLIPS), 3), 0.2)
    for index in range(len(CLIPS)):
        true = index % 3
        winner = (true + 1) % 3 if index // 3 == blind else true
        probs[index, winner] = 0.6
    return ModelOutput(
        model_id=f"model{blind}",
        cv_accuracy=accuracy,
        labels=LABELS,
        clip_ids=CLIPS,
        probs=probs,
    )


def accuracy(output: ModelOutput) -> float:
    predicted = output.predictions()
    return float(np.mean([predicted[clip] == TRUTH[clip] for clip in CLIPS]))


class TestModelOutput:
    def test_rows_must_be_distributions(self):
        with pytest.raises(FusionError):
            ModelOutput("m", 0.5, LABELS, CLIPS[:1], [[0.5, 0.2, 0.2]])
        with pytest.raises(FusionError):
            ModelOutput("m", 0.5, LABELS, CLIPS[:1], [[1.2, -0.1, -0.1]])

    def test_shape_and_identity_checks(self):
        with pytest.raises(FusionError):
            ModelOutput("m", 0.5, LABELS, CLIPS[:2], [[1.0, 0.0, 0.0]])
        with pytest.raises(FusionError):
            ModelOutput("two words", 0.5, LABELS, CLIPS[:1], [[1.0, 0.0, 0.0]])
        with pytest.raises(FusionError):
            ModelOutput("m", 1.5, LABELS, CLIPS[:1], [[1.0, 0.0, 0.0]])
        with pytest.raises(FusionError):
            ModelOutput("m", 0.5, LABELS, ("a", "a"), [[1.0, 0.0, 0.0]] * 2)

    def test_probabilities_are_frozen(self):
        output = blind_spot_model(0)
        with pytest.raises(ValueError):
            output.probs[0, 0] = 1.0

    def test_argmax_ties_go_to_first_class(self):
        output = ModelOutput("m", 0.5, LABELS, ("a",), [[0.4, 0.4, 0.2]])
        assert output.predictions() == {"a": "bus"}

    def test_alignment(self):
        output = blind_spot_model(0)
        reordered = tuple(reversed(CLIPS))
        np.testing.assert_array_equal(output.aligned(reordered), output.probs[::-1])
        with pytest.raises(FusionError):
            output.aligned(CLIPS[:-1])


class TestGating:
    def test_ranking_is_stable(self):
        outputs = [blind_spot_model(0, 0.6), blind_spot_model(1, 0.8), blind_spot_model(2, 0.6)]
        assert [output.model_id for output in rank_models(outputs)] == [
            "model1",
            "model0",
            "model2",
        ]

    def test_threshold_is_inclusive(self):
        outputs = [blind_spot_model(0, 0.6), blind_spot_model(1, 0.8)]
        assert [output.model_id for output in gate_models(outputs, 0.8)] == ["model1"]

    def test_nothing_survives(self):
        with pytest.raises(FusionError):
            gate_models([blind_spot_model(0, 0.6)], 0.9)

    def test_spec_bounds(self):
        with pytest.raises(FusionError):
            FusionSpec(threshold=1.5)
        with pytest.raises(FusionError):
            FusionSpec(bag_fraction=0.0)
        with pytest.raises(FusionError):
            FusionSpec(bag_count=0)


class TestFuse:
    def test_complementary_models_beat_each_member(self):
        members = [blind_spot_model(blind) for blind in range(3)]
        fused = fuse(members, FusionSpec())

        assert all(accuracy(member) == pytest.approx(6 / 9) for member in members)
        assert accuracy(fused) == 1.0
        np.testing.assert_allclose(fused.probs.sum(axis=1), 1.0)

    def test_fusing_a_model_with_itself_changes_nothing(self):
        original = blind_spot_model(1)
        copy = ModelOutput("copy", original.cv_accuracy, LABELS, CLIPS, original.probs)
        fused = fuse([original, copy], FusionSpec())
        np.testing.assert_allclose(fused.probs, original.probs)
        assert fused.predictions() == original.predictions()

    def test_accuracy_proportional_weights(self):
        weak, strong = blind_spot_model(0, 0.25), blind_spot_model(1, 0.75)
        fused = fuse([weak, strong], FusionSpec(weight_mode="accuracy_proportional"))
        np.testing.assert_allclose(fused.probs, 0.25 * weak.probs + 0.75 * strong.probs)
        assert fused.cv_accuracy == pytest.approx(0.25 * 0.25 + 0.75 * 0.75)

    def test_members_align_on_clip_ids(self):
        first = blind_spot_model(0)
        order = list(reversed(range(len(CLIPS))))
        shuffled = ModelOutput(
            "shuffled", 0.5, LABELS, [CLIPS[index] for index in order], first.probs[order]
        )
        fused = weighted_average([first, shuffled], [1.0, 1.0])
        np.testing.assert_allclose(fused.probs, first.probs)

    def test_label_lists_must_agree(self):
        other = ModelOutput("other", 0.5, ("a", "b", "c"), CLIPS, blind_spot_model(0).probs)
        with pytest.raises(FusionError):
            weighted_average([blind_spot_model(0), other], [1.0, 1.0])

    def test_weights_are_validated(self):
        members = [blind_spot_model(0), blind_spot_model(1)]
        with pytest.raises(FusionError):
            weighted_average(members, [1.0])
        with pytest.raises(FusionError):
            weighted_average(members, [0.0, 0.0])

    def test_bagging_is_seeded(self):
        members = [blind_spot_model(blind, 0.5 + 0.1 * blind) for blind in range(3)]
        spec = FusionSpec(bag_count=4, bag_fraction=0.5, seed=11)
        first, second = fuse(members, spec), fuse(members, spec)
        np.testing.assert_array_equal(first.probs, second.probs)
        np.testing.assert_allclose(first.probs.sum(axis=1), 1.0)

    def test_full_bags_equal_plain_average(self):
        members = [blind_spot_model(blind) for blind in range(3)]
        bagged = fuse(members, FusionSpec(bag_count=5, bag_fraction=1.0, seed=2))
        np.testing.assert_allclose(bagged.probs, fuse(members, FusionSpec()).probs)

    def test_member_order_does_not_matter(self):
        rng = np.random.default_rng(7)
        members = [
            ModelOutput(f"m{index}", 0.7, LABELS, CLIPS, rng.dirichlet(np.ones(3), len(CLIPS)))
            for index in range(4)
        ]
        spec = FusionSpec(bag_count=3, bag_fraction=1.0, seed=1)
        reference = fuse(members, spec)
        for order in ([3, 2, 1, 0], [1, 3, 0, 2]):
            shuffled = fuse([members[index] for index in order], spec)
            np.testing.assert_allclose(shuffled.probs, reference.probs, atol=1e-12)
            assert shuffled.predictions() == reference.predictions()

    def test_weight_scale_does_not_matter(self):
        members = [blind_spot_model(blind) for blind in range(3)]
        weights = np.array([0.2, 0.5, 0.3])
        base = weighted_average(members, weights)
        for scale in (0.01, 3.0, 250.0):
            scaled = weighted_average(members, scale * weights)
            np.testing.assert_allclose(scaled.probs, base.probs, atol=1e-12)
            assert scaled.predictions() == base.predictions()


class TestPredictionFiles:
    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        probs = rng.dirichlet(np.ones(3), size=len(CLIPS))
        output = ModelOutput("gmm-mfcc61", 0.8123456789, LABELS, CLIPS, probs)

        write_predictions(tmp_path / "gmm.csv", output)
        loaded = read_predictions(tmp_path / "gmm.csv")

        assert loaded.model_id == "gmm-mfcc61"
        assert loaded.cv_accuracy == output.cv_accuracy
        assert loaded.labels == LABELS
        assert loaded.clip_ids == CLIPS
        np.testing.assert_array_equal(loaded.probs, output.probs)

    def test_layout(self):
        text = format_predictions(ModelOutput("m", 0.5, LABELS, ("a",), [[0.5, 0.25, 0.25]]))
        assert text.splitlines() == [
            "# model_id=m cv_accuracy=0.5",
            "clip_id,bus,park,tram",
            "a,0.5,0.25,0.25",
        ]

    def test_missing_model_header(self):
        with pytest.raises(FusionError):
            parse_predictions("clip_id,bus\na,1.0\n")

    def test_ragged_row(self):
        with pytest.raises(FusionError, match="Line 3"):
            parse_predictions("# model_id=m cv_accuracy=0.5\nclip_id,bus,park\na,1.0\n")

    def test_non_numeric_cell(self):
        with pytest.raises(FusionError):
            parse_predictions("# model_id=m cv_accuracy=0.5\nclip_id,bus,park\na,one,0\n")

    def test_spec_accepts_weight_mode_names(self):
        assert FusionSpec(weight_mode="uniform").weight_mode == WeightMode.uniform
