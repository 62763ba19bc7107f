import numpy as np
import pytest

from fedplanes.aggregation import (
    AggregationError,
    DefenseSpec,
    ScoreWindow,
    aggregate_fedavg,
    aggregate_krum,
    aggregate_median,
    aggregate_rfa,
    aggregate_trimmed_mean,
    fbs_scores,
)
from fedplanes.nn import LayerSpec, ParamVector, mlp_param_shapes


def pv(values):
    vec = ParamVector.build([("m/w", (len(values),))])
    vec.data[...] = values
    return vec


def random_pvs(rng, k, dim):
    return [pv(rng.normal(size=dim)) for _ in range(k)]


class TestFedavg:
    def test_midpoint(self):
        out = aggregate_fedavg([pv([0.0, 0.0]), pv([2.0, 2.0])], [0.5, 0.5])
        np.testing.assert_allclose(out.data, [1.0, 1.0])

    def test_single(self):
        out = aggregate_fedavg([pv([3.0, -1.0])], [7.0])
        np.testing.assert_allclose(out.data, [3.0, -1.0])

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        vecs = random_pvs(rng, 5, 7)
        w = rng.uniform(0.1, 1.0, 5)
        a = aggregate_fedavg(vecs, w)
        perm = [3, 1, 4, 0, 2]
        b = aggregate_fedavg([vecs[i] for i in perm], w[perm])
        np.testing.assert_allclose(a.data, b.data)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_fedavg([], [])


class TestMedian:
    def test_odd(self):
        out = aggregate_median([pv([1.0]), pv([2.0]), pv([9.0])])
        assert out.data[0] == 2.0

    def test_even_mean_of_middle(self):
        out = aggregate_median([pv([1.0]), pv([3.0])])
        assert out.data[0] == 2.0

    def test_poisoned_coordinate_bounded(self):
        rng = np.random.default_rng(1)
        honest = [pv(rng.normal(size=4)) for _ in range(4)]
        poison = pv(np.full(4, 1e9))
        out = aggregate_median(honest + [poison])
        stack = np.stack([h.data for h in honest])
        assert np.all(out.data <= stack.max(axis=0))
        assert np.all(out.data >= stack.min(axis=0))

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            k = int(rng.integers(1, 8))
            vecs = random_pvs(rng, k, 5)
            out = aggregate_median(vecs)
            stack = np.stack([v.data for v in vecs])
            for c in range(5):
                col = np.sort(stack[:, c])
                want = col[k // 2] if k % 2 == 1 else 0.5 * (col[k // 2 - 1] + col[k // 2])
                assert out.data[c] == pytest.approx(want)


class TestTrimmedMean:
    def test_example(self):
        vecs = [pv([v]) for v in (1.0, 2.0, 3.0, 4.0, 100.0)]
        out = aggregate_trimmed_mean(vecs, 1)
        assert out.data[0] == pytest.approx(3.0)

    def test_zero_trim_is_mean(self):
        rng = np.random.default_rng(3)
        vecs = random_pvs(rng, 4, 3)
        out = aggregate_trimmed_mean(vecs, 0)
        np.testing.assert_allclose(out.data, np.stack([v.data for v in vecs]).mean(axis=0))

    def test_matches_sort_slice_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            vecs = random_pvs(rng, 7, 4)
            out = aggregate_trimmed_mean(vecs, 2)
            stack = np.stack([v.data for v in vecs])
            for c in range(4):
                want = np.sort(stack[:, c])[2:5].mean()
                assert out.data[c] == pytest.approx(want)

    def test_over_trim_rejected(self):
        with pytest.raises(ValueError):
            aggregate_trimmed_mean(random_pvs(np.random.default_rng(0), 4, 2), 2)


def krum_oracle(stack, m):
    k = stack.shape[0]
    nn = k - m - 2
    scores = []
    for i in range(k):
        d = [np.sum((stack[i] - stack[j]) ** 2) for j in range(k) if j != i]
        scores.append(np.sum(np.sort(d)[:nn]))
    return int(np.argmin(scores)), scores


class TestKrum:
    def test_outlier_never_chosen(self):
        rng = np.random.default_rng(5)
        clustered = [pv(rng.normal(0, 0.1, size=6)) for _ in range(4)]
        outlier = pv(rng.normal(50, 0.1, size=6))
        out = aggregate_krum(clustered + [outlier], 1)
        assert any(np.array_equal(out.data, c.data) for c in clustered)

    def test_all_identical_picks_index0(self):
        vecs = [pv([1.0, 2.0]) for _ in range(4)]
        out = aggregate_krum(vecs, 1)
        np.testing.assert_array_equal(out.data, vecs[0].data)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            vecs = random_pvs(rng, 6, 5)
            out = aggregate_krum(vecs, 1)
            stack = np.stack([v.data for v in vecs])
            winner, _ = krum_oracle(stack, 1)
            np.testing.assert_array_equal(out.data, stack[winner])

    def test_output_is_an_input(self):
        rng = np.random.default_rng(7)
        vecs = random_pvs(rng, 5, 4)
        out = aggregate_krum(vecs, 1)
        assert any(np.array_equal(out.data, v.data) for v in vecs)

    def test_precondition(self):
        with pytest.raises(ValueError):
            aggregate_krum(random_pvs(np.random.default_rng(0), 4, 2), 2)


class TestRfa:
    def test_collinear(self):
        out = aggregate_rfa([pv([-1.0]), pv([0.0]), pv([1.0])], [1.0, 1.0, 1.0], tol=1e-9)
        assert abs(out.data[0]) < 1e-6

    def test_single(self):
        out = aggregate_rfa([pv([4.0, 2.0])], [3.0])
        np.testing.assert_array_equal(out.data, [4.0, 2.0])

    def test_objective_beats_weighted_mean(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            vecs = random_pvs(rng, 6, 4)
            w = rng.uniform(0.5, 2.0, 6)
            out = aggregate_rfa(vecs, w, tol=1e-9, max_iter=300)
            stack = np.stack([v.data for v in vecs])

            def obj(y):
                return np.sum(w * np.linalg.norm(stack - y, axis=1))

            mean = np.average(stack, axis=0, weights=w)
            assert obj(out.data) <= obj(mean) + 1e-9


class TestRangeInvariants:
    def test_median_and_trim_within_input_range(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            vecs = random_pvs(rng, 5, 6)
            stack = np.stack([v.data for v in vecs])
            med = aggregate_median(vecs).data
            trim = aggregate_trimmed_mean(vecs, 1).data
            for out in (med, trim):
                assert np.all(out >= stack.min(axis=0) - 1e-12)
                assert np.all(out <= stack.max(axis=0) + 1e-12)


class TestScoreWindow:
    def test_warmup_mean(self):
        w = ScoreWindow(5)
        w.push(0.5)
        w.push(0.3)
        w.push(0.1)
        assert w.mean() == pytest.approx(0.3)

    def test_capacity_evicts_oldest(self):
        w = ScoreWindow(2)
        for s in (0.9, 0.5, 0.1):
            w.push(s)
        assert w.history == [0.5, 0.1]

    def test_range_validation(self):
        w = ScoreWindow(2)
        with pytest.raises(ValueError):
            w.push(1.5)


class TestFbsScores:
    def test_tiny_entry_excludes_client(self):
        windows = [ScoreWindow(3), ScoreWindow(3)]
        fbs_scores([0.5, 0.5], windows)
        out = fbs_scores([0.5, 1e-9], windows)
        assert out[1] == 0.0
        assert out[0] == pytest.approx(1.0)

    def test_exclusion_persists_within_window(self):
        windows = [ScoreWindow(3), ScoreWindow(3)]
        fbs_scores([0.5, 1e-9], windows)
        out = fbs_scores([0.5, 0.9], windows)  # bad entry still in window
        assert out[1] == 0.0

    def test_equal_survivors_split_evenly(self):
        windows = [ScoreWindow(4), ScoreWindow(4)]
        out = fbs_scores([0.4, 0.4], windows)
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_sums_to_one(self):
        rng = np.random.default_rng(10)
        windows = [ScoreWindow(5) for _ in range(4)]
        for _ in range(8):
            raw = rng.uniform(0.1, 1.0, 4)
            raw /= raw.sum()
            out = fbs_scores(raw, windows)
            assert out.sum() == pytest.approx(1.0)

    def test_all_excluded_raises(self):
        windows = [ScoreWindow(2), ScoreWindow(2)]
        with pytest.raises(AggregationError):
            fbs_scores([0.0, 0.0], windows)


class TestDefenseSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            DefenseSpec(kind="bogus")
        with pytest.raises(ValueError):
            DefenseSpec(kind="fbs", mode="nope")
        with pytest.raises(ValueError):
            DefenseSpec(window=0)

    def test_needs_planes(self):
        assert DefenseSpec(kind="fbs").needs_planes
        assert not DefenseSpec(kind="median").needs_planes
