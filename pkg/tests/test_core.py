import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phaseflow.core import (
    DataValidationError,
    ExperimentConfig,
    FeatureSequence,
    PhaseTaxonomy,
    UsageError,
    softmax,
    substream,
    validate_prob_vector,
    validate_sequence,
)


def make_seq(features, labels=None, video_id="v0", fps=1.0):
    return FeatureSequence(video_id=video_id, fps=fps,
                           features=np.asarray(features, dtype=np.float32),
                           labels=None if labels is None else np.asarray(labels))


class TestTaxonomy:
    def test_presets(self):
        assert PhaseTaxonomy.mgh100().n_phases == 13
        assert PhaseTaxonomy.cholec80().n_phases == 7
        assert PhaseTaxonomy.mgh100().names[5] == "Clip Cystic Artery"

    def test_needs_two_phases(self):
        with pytest.raises(DataValidationError):
            PhaseTaxonomy(("only",))

    def test_unique_names(self):
        with pytest.raises(DataValidationError):
            PhaseTaxonomy(("a", "a"))

    def test_phases_are_contiguous_ids(self):
        tax = PhaseTaxonomy(("a", "b", "c"))
        assert tax.phases == ((0, "a"), (1, "b"), (2, "c"))

    def test_dict_round_trip(self):
        tax = PhaseTaxonomy.mgh100()
        assert PhaseTaxonomy.from_dict(tax.to_dict()) == tax

    def test_from_dict_rejects_gaps(self):
        with pytest.raises(DataValidationError):
            PhaseTaxonomy.from_dict({"0": "a", "2": "b"})


class TestValidateSequence:
    def test_accepts_valid(self):
        tax = PhaseTaxonomy(("a", "b"))
        seq = validate_sequence(make_seq([[0, 1], [2, 3], [4, 5]], [0, 0, 1]), tax)
        assert seq.n_frames == 3 and seq.embed_dim == 2

    def test_label_out_of_range_names_frame(self):
        tax = PhaseTaxonomy.cholec80()
        seq = make_seq(np.zeros((4, 3)), [0, 1, 7, 2])
        with pytest.raises(DataValidationError, match="label out of range at frame 2"):
            validate_sequence(seq, tax)

    def test_nan_feature_names_frame(self):
        tax = PhaseTaxonomy(("a", "b"))
        feats = np.zeros((5, 2), dtype=np.float32)
        feats[3, 1] = np.nan
        with pytest.raises(DataValidationError, match="frame 3"):
            validate_sequence(make_seq(feats, [0, 0, 0, 0, 1]), tax)

    def test_label_length_mismatch(self):
        tax = PhaseTaxonomy(("a", "b"))
        with pytest.raises(DataValidationError, match="labels shape"):
            validate_sequence(make_seq(np.zeros((3, 2)), [0, 1]), tax)

    def test_validated_arrays_are_frozen(self):
        tax = PhaseTaxonomy(("a", "b"))
        seq = validate_sequence(make_seq(np.zeros((2, 2)), [0, 1]), tax)
        with pytest.raises(ValueError):
            seq.features[0, 0] = 1.0


class TestProbVector:
    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=16))
    def test_softmax_always_simplex(self, logits):
        p = softmax(np.asarray(logits, dtype=np.float64))
        validate_prob_vector(p)

    def test_softmax_float32_simplex(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = softmax(rng.standard_normal(9).astype(np.float32) * 20)
            validate_prob_vector(p)

    def test_rejects_bad_sum(self):
        with pytest.raises(DataValidationError):
            validate_prob_vector(np.array([0.5, 0.6]))

    def test_rejects_negative(self):
        with pytest.raises(DataValidationError):
            validate_prob_vector(np.array([-0.1, 1.1]))


class TestConfig:
    def test_defaults_match_protocol(self):
        cfg = ExperimentConfig()
        assert cfg.hidden_dim == 64
        assert cfg.seq_len_bptt == 8
        assert cfg.batch_size == 32
        assert cfg.learning_rate == 0.0025
        assert cfg.epochs == 20
        assert cfg.embed_dim == 128
        assert cfg.proximal_weight == 0.1

    def test_empty_feature_set_is_baseline(self):
        cfg = ExperimentConfig(enabled_ssm_features=())
        assert cfg.enabled_ssm_features == ()

    def test_rejects_unknown_feature(self):
        with pytest.raises(UsageError):
            ExperimentConfig(enabled_ssm_features=("wavelet",))

    def test_rejects_nonpositive(self):
        with pytest.raises(UsageError):
            ExperimentConfig(hidden_dim=0)
        with pytest.raises(UsageError):
            ExperimentConfig(learning_rate=-1.0)

    def test_epochs_zero_allowed(self):
        assert ExperimentConfig(epochs=0).epochs == 0

    def test_dict_round_trip(self):
        cfg = ExperimentConfig(hidden_dim=8, enabled_ssm_features=("csl",),
                               acausal=True, csl_levels=(0.5,))
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg

    def test_from_dict_rejects_unknown_key(self):
        with pytest.raises(UsageError):
            ExperimentConfig.from_dict({"hidden": 3})


class TestSubstream:
    def test_deterministic_and_name_separated(self):
        a1 = substream(7, "init").standard_normal(4)
        a2 = substream(7, "init").standard_normal(4)
        b = substream(7, "batching").standard_normal(4)
        assert np.array_equal(a1, a2)
        assert not np.array_equal(a1, b)

    def test_extra_keys_separate(self):
        a = substream(7, "generator", 0).standard_normal(4)
        b = substream(7, "generator", 1).standard_normal(4)
        assert not np.array_equal(a, b)
