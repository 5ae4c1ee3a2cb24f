from itertools import product

import numpy as np
import pytest

from phaseflow.core import DataValidationError, UsageError, softmax
from phaseflow.ssm import (
    CslAccumulator,
    GaborAccumulator,
    GaborBank,
    HmmFilterState,
    SsmExtractor,
    TransitionMatrix,
    acausal_feature_stream,
    estimate_transition_matrix,
    feature_stream,
    gabor_batch_response,
    gabor_kernel,
    hmm_forward_marginals,
    ssm_dim,
)

# ---------------------------------------------------------------------------
# oracles


def csl_recount(ms, n_phases, levels):
    """Brute-force prefix recount of the CSL counters."""
    counts = np.zeros((n_phases, len(levels) + 1), dtype=np.int64)
    for m in ms:
        for n in range(n_phases):
            for li, level in enumerate(levels):
                if m[n] >= level:
                    counts[n, li] += 1
        counts[int(np.argmax(m)), -1] += 1
    return counts


def hmm_path_sum(a, ms):
    """Exhaustive enumeration over all state paths (x_0 uniform, then A) of
    prior * emission weights; returns the normalized final-state marginal."""
    n = a.shape[0]
    T = len(ms)
    paths = np.array(list(product(range(n), repeat=T + 1)))
    w = np.full(len(paths), 1.0 / n)
    for s in range(1, T + 1):
        w = w * a[paths[:, s - 1], paths[:, s]] * np.asarray(ms[s - 1])[paths[:, s]]
    total = np.zeros(n)
    np.add.at(total, paths[:, T], w)
    return total / total.sum()


def random_prob_streams(rng, n_streams, t_max, n_max):
    for _ in range(n_streams):
        t = int(rng.integers(1, t_max + 1))
        n = int(rng.integers(2, n_max + 1))
        yield softmax(rng.standard_normal((t, n)) * 2.0)


# ---------------------------------------------------------------------------


class TestCsl:
    def test_empty_history_feature_is_zero(self):
        acc = CslAccumulator(3)
        assert np.array_equal(acc.feature(), np.zeros(12))

    def test_hand_enumerated_stream(self):
        acc = CslAccumulator(2, levels=(0.5,))
        for m in ([0.9, 0.1], [0.8, 0.2], [0.3, 0.7]):
            acc.update(np.array(m))
        # thresholds: phase0 crossed twice, phase1 once; argmax 0,0,1
        assert acc.counts[0, 0] == 2
        assert acc.counts[1, 0] == 1
        assert acc.counts[0, 1] == 2
        assert acc.counts[1, 1] == 1
        f = acc.feature()
        assert f[0] == pytest.approx(np.log(3))
        assert f[1] == pytest.approx(np.log(3))
        assert f[2] == pytest.approx(np.log(2))
        assert f[3] == pytest.approx(np.log(2))

    def test_uniform_stream_never_crosses_half(self):
        acc = CslAccumulator(4, levels=(0.5,))
        for _ in range(10):
            acc.update(np.full(4, 0.25))
        assert np.array_equal(acc.counts[:, 0], np.zeros(4))
        # argmax ties break to the lowest phase id
        assert acc.counts[0, 1] == 10
        assert np.array_equal(acc.counts[1:, 1], np.zeros(3))

    def test_matches_brute_force_recount_everywhere(self):
        rng = np.random.default_rng(0)
        for ms in random_prob_streams(rng, 100, 30, 5):
            n = ms.shape[1]
            levels = (0.25, 0.5, 0.75)
            acc = CslAccumulator(n, levels)
            prev = acc.feature()
            for t in range(ms.shape[0]):
                acc.update(ms[t])
                expected = np.log1p(csl_recount(ms[:t + 1], n, levels)).reshape(-1)
                got = acc.feature()
                assert np.array_equal(got, expected)
                assert (got >= prev).all(), "csl features must be nondecreasing"
                prev = got


class TestGaborBank:
    def test_kernel_l1_norm_is_one(self):
        for causal in (True, False):
            bank = GaborBank.build(10, 10.0, 30.0, causal=causal)
            for k in range(bank.num_scales):
                re, im = bank.kernel(k)
                assert np.hypot(re, im).sum() == pytest.approx(1.0, abs=1e-9)

    def test_ten_scales_linear_between_10_and_30(self):
        bank = GaborBank.build()
        assert bank.num_scales == 10
        assert bank.scales[0] == 10.0
        assert bank.scales[-1] == 30.0
        np.testing.assert_allclose(np.diff(bank.scales), 20.0 / 9, rtol=1e-12)

    def test_causal_kernel_has_no_future_weight(self):
        re, im = gabor_kernel(10.0, causal=True)
        # support is [-30, 0]: 31 taps ending at lag 0
        assert re.shape[0] == 31
        sym_re, _ = gabor_kernel(10.0, causal=False)
        assert sym_re.shape[0] == 61

    def test_delta_response_traces_kernel_magnitude(self):
        bank = GaborBank.build(2, 4.0, 6.0)
        acc = GaborAccumulator(3, bank)
        delta = np.zeros(3)
        delta[1] = 1.0
        acc.update(delta)
        for j in range(10):
            feat = acc.feature().reshape(3, 2)
            for k in range(2):
                re, im = bank.kernel(k)
                L = re.shape[0]
                expected = np.hypot(re[L - 1 - j], im[L - 1 - j]) if j < L else 0.0
                assert feat[1, k] == pytest.approx(expected, abs=1e-12)
                assert feat[0, k] == 0.0 and feat[2, k] == 0.0
            acc.update(np.zeros(3))

    def test_constant_stream_matches_direct_summation(self):
        bank = GaborBank.build(3, 5.0, 9.0)
        acc = GaborAccumulator(2, bank)
        c = 0.37
        for _ in range(bank.width + 5):   # fill the ring past every support
            acc.update(np.array([c, c]))
        feat = acc.feature().reshape(2, 3)
        for k in range(3):
            re, im = bank.kernel(k)
            expected = c * np.hypot(re.sum(), im.sum())
            assert feat[0, k] == pytest.approx(expected, rel=1e-9)

    def test_streaming_equals_batch_convolution(self):
        rng = np.random.default_rng(1)
        ms = softmax(rng.standard_normal((200, 4)) * 1.5)
        bank = GaborBank.build(10, 10.0, 30.0)
        acc = GaborAccumulator(4, bank)
        batch = gabor_batch_response(bank, ms)
        for t in range(200):
            acc.update(ms[t])
            np.testing.assert_allclose(acc.feature(), batch[t], atol=1e-6)


class TestTransitionMatrix:
    def test_hand_counted_estimate(self):
        tm = estimate_transition_matrix([[0, 0, 1, 1]], 2, smoothing=1e-9)
        np.testing.assert_allclose(tm.a, [[0.5, 0.5], [0.0, 1.0]], atol=1e-8)
        assert tm.n_sequences == 1

    def test_rows_stochastic_and_positive(self):
        rng = np.random.default_rng(2)
        seqs = [rng.integers(0, 5, 50) for _ in range(10)]
        tm = estimate_transition_matrix(seqs, 5, smoothing=1e-3)
        np.testing.assert_allclose(tm.a.sum(axis=1), np.ones(5), atol=1e-9)
        assert (tm.a > 0).all()

    def test_uniform_labels_approach_uniform_rows(self):
        rng = np.random.default_rng(3)
        seqs = [rng.integers(0, 3, 20000) for _ in range(5)]
        tm = estimate_transition_matrix(seqs, 3)
        np.testing.assert_allclose(tm.a, np.full((3, 3), 1 / 3), atol=0.05)

    def test_empty_input_rejected(self):
        with pytest.raises(DataValidationError):
            estimate_transition_matrix([], 3)

    def test_nonpositive_smoothing_rejected(self):
        with pytest.raises(UsageError):
            estimate_transition_matrix([[0, 1]], 2, smoothing=0.0)

    def test_csv_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        seqs = [rng.integers(0, 4, 100)]
        tm = estimate_transition_matrix(seqs, 4)
        path = tmp_path / "transition.csv"
        tm.save_csv(path)
        loaded = TransitionMatrix.load_csv(path)
        np.testing.assert_array_equal(loaded.a, tm.a)
        header = path.read_text().splitlines()[0]
        assert header == "phase_0,phase_1,phase_2,phase_3"


class TestHmmFilter:
    def test_identity_transition_absorbs_one_hot(self):
        tm = TransitionMatrix(np.eye(3) * (1 - 1e-12) + 1e-12 / 3)
        f = HmmFilterState(tm)
        onehot = np.array([0.0, 1.0, 0.0])
        for _ in range(5):
            f.update(onehot)
            assert f.belief[1] == pytest.approx(1.0, abs=1e-9)

    def test_hand_evaluated_recursion_step(self):
        tm = TransitionMatrix(np.array([[0.9, 0.1], [0.2, 0.8]]))
        f = HmmFilterState(tm)
        f.update(np.array([0.7, 0.3]))
        expected = np.array([0.55 * 0.7, 0.45 * 0.3])
        np.testing.assert_allclose(f.belief, expected / expected.sum(), atol=1e-12)

    def test_matches_exhaustive_path_sum(self):
        rng = np.random.default_rng(5)
        for trial in range(60):
            n = int(rng.integers(2, 5))
            t = int(rng.integers(1, 7))
            a = rng.random((n, n)) + 0.05
            tm = TransitionMatrix(a)
            ms = softmax(rng.standard_normal((t, n)) * 1.5)
            marg = hmm_forward_marginals(tm, ms)
            np.testing.assert_allclose(marg[-1], hmm_path_sum(tm.a, ms), atol=1e-9)

    def test_identity_reduces_to_cumulative_product(self):
        rng = np.random.default_rng(6)
        tm = TransitionMatrix(np.eye(4) + 1e-15)
        for _ in range(10):
            ms = softmax(rng.standard_normal((10, 4)))
            marg = hmm_forward_marginals(tm, ms)
            running = np.ones(4) / 4
            for t in range(10):
                running = running * ms[t]
                np.testing.assert_allclose(marg[t], running / running.sum(), atol=1e-9)

    def test_underflow_resets_uniform_and_counts(self):
        tm = TransitionMatrix(np.array([[0.9, 0.1], [0.2, 0.8]]))
        f = HmmFilterState(tm)
        f.update(np.array([0.5, 0.5]))
        f.update(np.zeros(2))
        assert f.underflow_count == 1
        np.testing.assert_array_equal(f.belief, [0.5, 0.5])

    def test_feature_zero_before_first_update(self):
        f = HmmFilterState(TransitionMatrix.uniform(3))
        assert np.array_equal(f.feature(), np.zeros(3))
        f.update(np.array([0.2, 0.3, 0.5]))
        assert f.feature().sum() == pytest.approx(1.0)


class TestConcatDims:
    def test_csl_only_two_phases_one_level(self):
        ex = SsmExtractor(2, enabled=("csl",), csl_levels=(0.5,))
        assert ex.dim == 4
        assert ssm_dim(2, ("csl",), n_levels=1) == 4

    def test_all_features_seven_phases(self):
        ex = SsmExtractor(7)
        assert ex.dim == 7 * 4 + 7 * 10 + 7 == 105

    def test_empty_set_dim_zero(self):
        ex = SsmExtractor(5, enabled=())
        assert ex.dim == 0
        assert ex.feature().shape == (0,)

    def test_order_is_csl_gabor_hmm(self):
        ex = SsmExtractor(2, enabled=("hmm", "csl"), csl_levels=(0.5,))
        ex.update(np.array([0.9, 0.1]))
        feat = ex.feature()
        # csl block first (dim 4), hmm belief last (dim 2)
        assert feat.shape == (6,)
        assert feat[:4].max() == pytest.approx(np.log(2))
        assert feat[4:].sum() == pytest.approx(1.0)


class TestStreamHelpers:
    def test_stream_row_zero_is_zero(self):
        rng = np.random.default_rng(7)
        ms = softmax(rng.standard_normal((12, 3)))
        ex = SsmExtractor(3, enabled=("csl", "hmm"))
        rows = feature_stream(ex, ms)
        assert np.array_equal(rows[0], np.zeros(ex.dim))

    def test_streaming_equals_batch_prefix_recompute(self):
        rng = np.random.default_rng(8)
        ms = softmax(rng.standard_normal((40, 3)))
        ex = SsmExtractor(3)
        rows = feature_stream(ex, ms)
        for t in range(40):
            fresh = SsmExtractor(3)
            for k in range(t):
                fresh.update(ms[k])
            np.testing.assert_allclose(rows[t], fresh.feature(), atol=1e-6)

    def test_acausal_last_row_zero(self):
        rng = np.random.default_rng(9)
        ms = softmax(rng.standard_normal((15, 3)))
        ex = SsmExtractor(3, enabled=("csl",))
        rows = acausal_feature_stream(ex, ms)
        assert np.array_equal(rows[-1], np.zeros(ex.dim))

    def test_palindrome_mirrors_causal(self):
        rng = np.random.default_rng(10)
        half = softmax(rng.standard_normal((6, 3)))
        ms = np.concatenate([half, half[::-1]])          # palindrome, T=12
        ex = SsmExtractor(3, enabled=("csl",))
        causal = feature_stream(ex, ms)
        acausal = acausal_feature_stream(SsmExtractor(3, enabled=("csl",)), ms)
        T = ms.shape[0]
        for t in range(T):
            np.testing.assert_allclose(acausal[t], causal[T - 1 - t], atol=1e-12)

    def test_acausal_equals_direct_future_recompute(self):
        rng = np.random.default_rng(11)
        ms = softmax(rng.standard_normal((25, 3)))
        rows = acausal_feature_stream(SsmExtractor(3), ms)
        T = ms.shape[0]
        for t in range(T):
            fresh = SsmExtractor(3)
            for k in range(T - 1, t, -1):
                fresh.update(ms[k])
            np.testing.assert_allclose(rows[t], fresh.feature(), atol=1e-12)

    def test_acausal_requires_complete_stream(self):
        with pytest.raises(UsageError):
            acausal_feature_stream(SsmExtractor(3), np.zeros(3))
