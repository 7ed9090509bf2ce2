import shutil

import numpy as np
import pytest
from scipy import stats

from cloze_debias._validation import TrainingError
from cloze_debias.data import SequenceDataset
from cloze_debias.loop import (
    LoopConfig, append_items, load_latest_checkpoint, LoopState, recommend_topk, run_feedback_loop,
    simulate_user_choice, write_history,
)
from cloze_debias.trainer import TrainConfig, train

TCFG = TrainConfig(epochs=3, batch_size=8, lr=1e-2, hidden_units=8)


def _dataset(seed=0, S=12, T=6, n_items=25):
    rng = np.random.default_rng(seed)
    tokens = np.zeros((S, T), dtype=np.int64)
    for row, n in zip(tokens, rng.integers(3, T + 1, size=S)):
        row[T - n:] = rng.choice(np.arange(1, n_items + 1), size=n, replace=False)
    return SequenceDataset(tokens, n_items)


def _cfg(**kw):
    base = dict(iterations=2, K=5, seed=3, n_negatives=10)
    base.update(kw)
    return LoopConfig(**base)


class TestChoice:
    def test_single_item(self):
        assert simulate_user_choice([7], 0) == 7

    def test_empty_list(self):
        assert simulate_user_choice([0, 0], 0) == 0

    def test_fixed_seed(self):
        assert simulate_user_choice([3, 5, 9], 4) == simulate_user_choice([3, 5, 9], 4)

    def test_uniform(self):
        row = [2, 4, 6, 8, 10]
        picks = [simulate_user_choice(row, s) for s in range(10_000)]
        counts = np.array([picks.count(i) for i in row])
        assert np.all(np.abs(counts - 2000) <= 3 * np.sqrt(10_000 * 0.2 * 0.8))
        assert stats.chisquare(counts).pvalue > 1e-3


class TestAppend:
    def test_shift_and_skip(self):
        ds = SequenceDataset(np.array([[0, 1, 2], [3, 1, 2], [0, 0, 1]]), 4)
        out = append_items(ds, np.array([4, 4, 0]))
        np.testing.assert_array_equal(out.tokens, [[1, 2, 4], [1, 2, 4], [0, 0, 1]])


class TestRecommend:
    def test_excludes_history(self):
        ds = _dataset()
        params, _ = train(TCFG, ds)
        top, short = recommend_topk(params, ds, K=5)
        for r in range(ds.n_sequences):
            assert not set(top[r].tolist()) & set(ds.history(r).tolist())
        assert not short.any()
        again, _ = recommend_topk(params, ds, K=5)
        np.testing.assert_array_equal(top, again)


class TestLoop:
    def test_zero_iterations(self):
        ds = _dataset()
        state = run_feedback_loop(ds, TCFG, "cloze", _cfg(iterations=0))
        assert state.history == []
        np.testing.assert_array_equal(state.dataset.tokens, ds.tokens)

    @pytest.mark.parametrize("kind", ["cloze", "itps"])
    def test_growth_and_exclusion(self, kind):
        ds = _dataset(1)
        state = run_feedback_loop(ds, TCFG, kind, _cfg())
        assert [r["iteration"] for r in state.history] == [1, 2]
        assert all(np.isfinite(r["efd10"]) and r["efd10"] > 0 for r in state.history)
        assert all(0 <= r["ndcg10"] <= 1 for r in state.history)
        np.testing.assert_array_equal(state.dataset.lengths(), ds.lengths() + 2)
        for r in range(ds.n_sequences):
            hist = state.dataset.history(r)
            np.testing.assert_array_equal(hist[:-2], ds.history(r))
            assert len(set(hist.tolist())) == len(hist)

    def test_deterministic_and_resumable(self, tmp_path):
        ds = _dataset(2)
        a = run_feedback_loop(ds, TCFG, "ips", _cfg(iterations=3))
        b = run_feedback_loop(ds, TCFG, "ips", _cfg(iterations=3))
        assert a.history == b.history
        np.testing.assert_array_equal(a.dataset.tokens, b.dataset.tokens)
        run_feedback_loop(ds, TCFG, "ips", _cfg(iterations=3), checkpoint_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["iter_001", "iter_002", "iter_003"]
        # simulate a run interrupted after two iterations
        shutil.rmtree(tmp_path / "iter_003")
        c = run_feedback_loop(ds, TCFG, "ips", _cfg(iterations=3), checkpoint_dir=tmp_path, resume=True)
        assert c.history == a.history
        np.testing.assert_array_equal(c.dataset.tokens, a.dataset.tokens)

    def test_load_without_checkpoints(self, tmp_path):
        init = LoopState.initial(_dataset())
        assert load_latest_checkpoint(tmp_path / "missing", init) is init

    def test_short_lists_are_reported(self):
        # 4 items: rows 0 and 1 run out of candidates in the second iteration
        ds = SequenceDataset(np.array([[1, 2, 3], [2, 3, 4], [0, 1, 4]]), 4)
        state = run_feedback_loop(ds, TCFG, "cloze", _cfg(iterations=2, K=2, track_metrics=False))
        np.testing.assert_array_equal(state.dataset.lengths(), [4, 4, 4])
        assert state.skipped == [(1, []), (2, [0, 1])]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_keeps_partial_state(self):
        ds = _dataset(3)
        bad = TrainConfig(optimizer="sgd", lr=1e300, epochs=2, batch_size=8, hidden_units=8)
        with pytest.raises(TrainingError) as exc:
            run_feedback_loop(ds, bad, "cloze", _cfg())
        assert exc.value.state.iteration == 0

    def test_rejects_oracle(self):
        with pytest.raises(ValueError):
            run_feedback_loop(_dataset(), TCFG, "oracle", _cfg())

    def test_history_csv(self, tmp_path):
        write_history([{"model": "cloze", "iteration": 1, "efd10": 5.0, "ndcg10": 0.1, "recall10": 0.2}],
                      tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines == ["model,iteration,efd10,ndcg10,recall10", "cloze,1,5.0,0.1,0.2"]
