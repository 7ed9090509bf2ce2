import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cloze_debias._validation import DomainError, ModeError, SamplingError
from cloze_debias.data import SequenceDataset
from cloze_debias.evaluation import (
    CandidateSet, EvalReport, efd_at_k, evaluate_scores, loo_split, ndcg_at_k, rank_target,
    recall_at_k, replace_with_most_relevant, sample_negatives_popularity, sample_negatives_uniform,
    write_reports,
)


def _brute_metrics(ranks, k):
    """Independent reference: build a ranked list with the hit at position ``rank``."""
    recall, ndcg = [], []
    for r in ranks:
        gains = [1.0 if pos == r else 0.0 for pos in range(1, k + 1)]
        dcg = sum(g / math.log2(pos + 1) for pos, g in enumerate(gains, start=1))
        recall.append(sum(gains))
        ndcg.append(dcg / 1.0)
    return recall, ndcg


class TestSplit:
    def test_example(self):
        ds = SequenceDataset(np.array([[0, 1, 2, 3], [0, 0, 0, 1]]), item_count=3)
        split = loo_split(ds)
        np.testing.assert_array_equal(split.eval_rows, [0])
        np.testing.assert_array_equal(split.train.tokens, [[0, 0, 0, 1], [0, 0, 0, 1]])
        assert split.valid_items[0] == 2
        assert split.test_items[0] == 3
        assert split.n_excluded == 1
        np.testing.assert_array_equal(split.test_context(), [[0, 0, 1, 2]])
        assert split.histories() == [{1, 2, 3}]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_invariants(self, seed):
        rng = np.random.default_rng(seed)
        tokens = rng.integers(1, 9, size=(12, 6))
        for row, n in zip(tokens, rng.integers(0, 7, size=12)):
            row[:6 - n] = 0
        ds = SequenceDataset(tokens, item_count=8)
        split = loo_split(ds)
        assert split.n_eval + split.n_excluded == ds.n_sequences
        assert np.all(split.valid_items > 0) and np.all(split.test_items > 0)
        lengths = ds.lengths()
        np.testing.assert_array_equal(split.train.lengths()[split.eval_rows], lengths[split.eval_rows] - 2)
        for e, r in enumerate(split.eval_rows):
            real = tokens[r][tokens[r] > 0]
            np.testing.assert_array_equal(split.train.history(r), real[:-2])
            assert (split.valid_items[e], split.test_items[e]) == (real[-2], real[-1])


class TestReplacement:
    def _split(self):
        ds = SequenceDataset(np.array([[1, 2, 1]]), item_count=2, timesteps=np.array([[0, 1, 2]]))
        return loo_split(ds)

    def test_argmax_and_ties(self):
        gamma = np.zeros((1, 2, 3))
        gamma[0, :, 1] = [0.1, 0.9]
        gamma[0, :, 2] = [0.5, 0.5]
        out = replace_with_most_relevant(self._split(), gamma)
        assert out.valid_items[0] == 2
        assert out.test_items[0] == 1
        assert out.replaced
        np.testing.assert_array_equal(out.train.tokens, self._split().train.tokens)
        np.testing.assert_array_equal(out.test_context(), self._split().test_context())

    def test_peaked_at_target_is_unchanged(self):
        gamma = np.full((1, 2, 3), 0.1)
        gamma[0, 1, 1] = gamma[0, 0, 2] = 0.9
        out = replace_with_most_relevant(self._split(), gamma)
        assert (out.valid_items[0], out.test_items[0]) == (2, 1)

    def test_needs_gamma(self):
        with pytest.raises(ModeError):
            replace_with_most_relevant(self._split(), None)


class TestNegativeSampling:
    def test_forced_uniform(self):
        cand = sample_negatives_uniform(5, set(), item_count=101, n=100, seed=0)
        assert sorted(cand.negatives.tolist()) == [i for i in range(1, 102) if i != 5]

    def test_uniform_exclusions(self):
        rng = np.random.default_rng(0)
        for trial in range(1000):
            hist = set(rng.choice(np.arange(1, 41), size=5, replace=False).tolist())
            target = int(rng.integers(1, 41))
            cand = sample_negatives_uniform(target, hist, 40, 20, trial)
            assert target not in cand.negatives
            assert not hist & set(cand.negatives.tolist())
            assert len(set(cand.negatives.tolist())) == 20

    def test_uniform_deterministic(self):
        a = sample_negatives_uniform(1, {2}, 50, 10, 7)
        b = sample_negatives_uniform(1, {2}, 50, 10, 7)
        np.testing.assert_array_equal(a.negatives, b.negatives)

    def test_uniform_too_few(self):
        with pytest.raises(SamplingError):
            sample_negatives_uniform(1, {2, 3}, 5, 3, 0)

    def test_popularity_pick_rate(self):
        # items 2 and 3 are eligible with popularity 0.9 and 0.1
        pop = np.array([0.5, 0.9, 0.1])
        picks = [sample_negatives_popularity(1, set(), pop, 1, s).negatives[0] for s in range(1000)]
        assert abs(np.mean(np.array(picks) == 2) - 0.9) <= 0.03

    def test_popularity_uniform_matches_uniform_sampler(self):
        pop = np.full(11, 0.2)
        a = [sample_negatives_popularity(1, set(), pop, 1, s).negatives[0] for s in range(1000)]
        b = [sample_negatives_uniform(1, set(), 11, 1, s).negatives[0] for s in range(1000)]
        ca = np.bincount(a, minlength=12)[2:]
        cb = np.bincount(b, minlength=12)[2:]
        assert stats.chisquare(ca).pvalue > 1e-3
        assert stats.chi2_contingency(np.vstack([ca, cb])).pvalue > 1e-3

    def test_popularity_all_eligible(self):
        cand = sample_negatives_popularity(1, {2}, np.array([0.1, 0.2, 0.3, 0.4]), 2, 0)
        assert sorted(cand.negatives.tolist()) == [3, 4]

    def test_popularity_zero_weight_excluded(self):
        with pytest.raises(SamplingError):
            sample_negatives_popularity(1, set(), np.array([0.1, 0.2, 0.0]), 2, 0)


class TestRanking:
    def test_examples(self):
        scores = np.array([5.0, 1.0, 2.0, 3.0])
        assert rank_target(scores, CandidateSet(1, np.array([2, 3, 4]), "uniform")) == 1
        assert rank_target(scores, CandidateSet(2, np.array([1, 3, 4]), "uniform")) == 4
        tied = np.array([3.0, 3.0, 1.0])
        assert rank_target(tied, CandidateSet(1, np.array([2, 3]), "uniform")) == 2

    def test_full_candidate_set(self):
        scores = np.arange(101, dtype=float)
        assert rank_target(scores, CandidateSet(1, np.arange(2, 102), "uniform")) == 101
        assert rank_target(scores, CandidateSet(101, np.arange(1, 101), "uniform")) == 1

    def test_metric_examples(self):
        assert (ndcg_at_k(1, 10), recall_at_k(1, 10)) == (1.0, 1)
        assert ndcg_at_k(2, 10) == pytest.approx(0.63093, abs=1e-5)
        assert (ndcg_at_k(11, 10), recall_at_k(11, 10)) == (0.0, 0)
        with pytest.raises(ValueError):
            ndcg_at_k(0, 10)

    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        ranks = rng.integers(1, 102, size=1000)
        for k in (1, 5, 10, 20):
            recall, ndcg = _brute_metrics(ranks, k)
            assert [recall_at_k(r, k) for r in ranks] == recall
            assert [ndcg_at_k(r, k) for r in ranks] == ndcg

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 50))
    def test_ranges_and_monotone(self, rank, k):
        assert 0.0 <= ndcg_at_k(rank, k) <= 1.0
        assert ndcg_at_k(rank + 1, k) <= ndcg_at_k(rank, k)


class TestEFD:
    def test_hand_cases(self):
        pop = np.array([0.5, 0.25])
        assert efd_at_k([[1]], pop, 1) == 1.0
        assert efd_at_k([[2]], pop, 1) == 2.0
        assert efd_at_k([[1, 2]], pop, 2) == 1.5

    def test_against_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n_items, K = 15, int(rng.integers(1, 6))
            pop = rng.uniform(0.01, 1.0, n_items)
            top = np.array([rng.choice(np.arange(1, n_items + 1), size=K, replace=False) for _ in range(3)])
            ref = -sum(sum(math.log2(pop[i - 1]) for i in row) / K for row in top) / 3
            assert efd_at_k(top, pop, K) == pytest.approx(ref, rel=1e-12)

    def test_zero_popularity(self):
        with pytest.raises(DomainError):
            efd_at_k([[1]], np.array([0.0, 1.0]), 1)

    def test_swap_to_more_popular_decreases(self):
        pop = np.array([0.1, 0.2, 0.4, 0.05])
        assert efd_at_k([[1, 3]], pop) < efd_at_k([[1, 4]], pop)

    def test_short_lists_skip_padding(self):
        pop = np.array([0.5, 0.25])
        assert efd_at_k([[1, 0]], pop, 2) == 0.5


class TestEvaluateScores:
    def test_random_scores_recall(self):
        rng = np.random.default_rng(0)
        n, n_items = 1000, 101
        scores = rng.standard_normal((n, n_items))
        targets = rng.integers(1, n_items + 1, size=n)
        out = evaluate_scores(scores, targets, [set()] * n, n_items, ks=(10,), n_negatives=100, seed=1)
        assert abs(out["R@10"] - 10 / 101) <= 3 * math.sqrt((10 / 101) * (91 / 101) / n)

    def test_perfect_scorer(self):
        n_items = 30
        targets = np.array([3, 7, 11])
        scores = np.zeros((3, n_items))
        scores[np.arange(3), targets - 1] = 1.0
        out = evaluate_scores(scores, targets, [set()] * 3, n_items, ks=(1, 5), n_negatives=20, seed=0)
        assert out["N@1"] == out["R@5"] == 1.0

    def test_popularity_sampler_needs_table(self):
        with pytest.raises(ModeError):
            evaluate_scores(np.zeros((1, 5)), [1], [set()], 5, n_negatives=2, sampler="popularity")

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        scores = rng.standard_normal((20, 30))
        targets = rng.integers(1, 31, size=20)
        a = evaluate_scores(scores, targets, [set()] * 20, 30, n_negatives=10, seed=5)
        b = evaluate_scores(scores, targets, [set()] * 20, 30, n_negatives=10, seed=5)
        np.testing.assert_array_equal(a["ranks"], b["ranks"])


class TestReports:
    def test_aggregate_and_write(self, tmp_path):
        rep = EvalReport.aggregate("itps", [{"N@10": 0.2, "ranks": [1]}, {"N@10": 0.4, "ranks": [2]}])
        assert rep.mean("N@10") == pytest.approx(0.3)
        assert rep.metrics["N@10"][1] == pytest.approx(np.std([0.2, 0.4], ddof=1))
        write_reports([rep], tmp_path / "r.csv", tmp_path / "r.json")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "model,metric,mean,std,replicates"
        assert lines[1].startswith("itps,N@10,")
        assert '"replicates": 2' in (tmp_path / "r.json").read_text()
