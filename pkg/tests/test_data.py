import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cloze_debias.data import (
    InteractionRecord, SequenceDataset, append_inference_mask, apply_cloze_mask,
    build_rating_tuples, build_sequences, dataset_summary, ingest_tsv,
)
from cloze_debias._validation import ParseError


def _records(seqs):
    """``{seq_id: [item, ...]}`` in chronological order to records."""
    out = []
    for sid, items in seqs.items():
        for ts, item in enumerate(items):
            out.append(InteractionRecord(sid, item, 4.0, 100 + ts))
    return out


class TestIngest:
    def test_single_line(self, tmp_path):
        p = tmp_path / "log.tsv"
        p.write_text("1\t50\t5\t874965758\n")
        assert ingest_tsv(p) == [InteractionRecord(1, "50", 5.0, 874965758)]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.tsv"
        p.write_text("")
        assert ingest_tsv(p) == []

    def test_bad_line_names_line_number(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("1\t2\t3\t4\n1\t2\t3\n")
        with pytest.raises(ParseError, match="line 2") as exc:
            ingest_tsv(p)
        assert exc.value.lineno == 2

    def test_non_numeric_rating(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("1\t2\tfive\t4\n")
        with pytest.raises(ParseError, match="line 1"):
            ingest_tsv(p)


class TestBuildSequences:
    def test_keeps_most_recent(self):
        ds, vocab = build_sequences(_records({1: ["A", "B", "C"]}), T=2)
        ids = vocab.raw_to_dense
        np.testing.assert_array_equal(ds.tokens, [[ids["B"], ids["C"]]])

    def test_left_padding(self):
        ds, vocab = build_sequences(_records({1: ["A"]}), T=3)
        np.testing.assert_array_equal(ds.tokens, [[0, 0, vocab.raw_to_dense["A"]]])

    def test_truncated_items_stay_in_vocabulary(self):
        _, vocab = build_sequences(_records({1: ["A", "B", "C"]}), T=1)
        assert vocab.item_count == 3
        assert vocab.mask_token == 4

    def test_timestamp_ties_keep_input_order(self):
        recs = [InteractionRecord(1, "X", 1.0, 5), InteractionRecord(1, "Y", 1.0, 5)]
        ds, vocab = build_sequences(recs, T=2)
        np.testing.assert_array_equal(ds.tokens[0], [vocab.raw_to_dense["X"], vocab.raw_to_dense["Y"]])

    def test_sorted_by_timestamp(self):
        recs = [InteractionRecord(7, "late", 1.0, 9), InteractionRecord(7, "early", 1.0, 1)]
        ds, vocab = build_sequences(recs, T=2)
        inv = vocab.dense_to_raw()
        assert [inv[t] for t in ds.tokens[0]] == ["early", "late"]

    def test_rows_ordered_by_sequence_id(self):
        ds, _ = build_sequences(_records({9: ["A"], 2: ["B"]}), T=1)
        np.testing.assert_array_equal(ds.sequence_ids, [2, 9])

    def test_errors(self):
        with pytest.raises(ValueError):
            build_sequences(_records({1: ["A"]}), T=0)
        with pytest.raises(ValueError):
            build_sequences([], T=3)

    def test_rating_tuples_align_with_tokens(self):
        recs = [InteractionRecord(1, "A", 2.0, 1), InteractionRecord(1, "B", 5.0, 2)]
        ds, vocab, tuples, ratings = build_rating_tuples(recs, T=3)
        np.testing.assert_array_equal(tuples[:, 0], [0, 0])
        np.testing.assert_array_equal(tuples[:, 2], [1, 2])
        np.testing.assert_array_equal(tuples[:, 1] + 1, ds.tokens[0, 1:])
        np.testing.assert_array_equal(ratings, [2.0, 5.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 9), min_size=1, max_size=12), min_size=1, max_size=6),
           st.integers(1, 8))
    def test_padding_prefix_invariant(self, seqs, T):
        ds, _ = build_sequences(_records({k: [str(i) for i in v] for k, v in enumerate(seqs)}), T)
        assert ds.tokens.shape == (len(seqs), T)
        for row, items in zip(ds.tokens, seqs):
            n_real = min(len(items), T)
            assert np.all(row[:T - n_real] == 0)
            assert np.all(row[T - n_real:] > 0)


class TestClozeMask:
    def test_rho_one_masks_every_real_item(self):
        ds = SequenceDataset(np.array([[0, 1, 2]]), item_count=2)
        mb = apply_cloze_mask(ds, 1.0, seed=0)
        np.testing.assert_array_equal(mb.mask_indicator, [[False, True, True]])
        np.testing.assert_array_equal(mb.masked_tokens, [[0, 3, 3]])
        np.testing.assert_array_equal(mb.labels, [[0, 1, 2]])

    def test_forced_minimum_of_one_mask(self):
        ds = SequenceDataset(np.array([[1, 2, 3, 4, 5]]), item_count=5)
        for seed in range(20):
            mb = apply_cloze_mask(ds, 1e-9, seed)
            assert mb.mask_indicator.sum() == 1

    def test_empty_row_gets_no_mask(self):
        ds = SequenceDataset(np.array([[0, 0, 0], [0, 1, 2]]), item_count=2)
        mb = apply_cloze_mask(ds, 1e-9, seed=3)
        assert not mb.mask_indicator[0].any()

    def test_masked_fraction(self):
        rng = np.random.default_rng(0)
        ds = SequenceDataset(rng.integers(1, 30, size=(1000, 100)), item_count=30)
        mb = apply_cloze_mask(ds, 0.15, seed=1)
        assert abs(mb.mask_indicator.mean() - 0.15) <= 0.01

    @pytest.mark.parametrize("rho", [0.0, -0.1, 1.5])
    def test_bad_rho(self, rho):
        ds = SequenceDataset(np.array([[1]]), item_count=1)
        with pytest.raises(ValueError):
            apply_cloze_mask(ds, rho, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.05, 1.0))
    def test_invariants_and_determinism(self, seed, rho):
        rng = np.random.default_rng(seed)
        tokens = rng.integers(1, 8, size=(5, 7))
        tokens[rng.random(tokens.shape) < 0.3] = 0
        ds = SequenceDataset(tokens, item_count=7)
        a = apply_cloze_mask(ds, rho, seed)
        b = apply_cloze_mask(ds, rho, seed)
        np.testing.assert_array_equal(a.masked_tokens, b.masked_tokens)
        np.testing.assert_array_equal(a.mask_indicator, b.mask_indicator)
        assert not (a.mask_indicator & (tokens == 0)).any()
        np.testing.assert_array_equal(a.labels[a.mask_indicator], tokens[a.mask_indicator])
        assert np.all(a.masked_tokens[a.mask_indicator] == 8)


class TestInferenceMask:
    @pytest.mark.parametrize("row, expected", [
        ([0, 1, 2], [1, 2, 9]),
        ([1, 2, 3], [2, 3, 9]),
        ([0, 0, 1], [0, 1, 9]),
    ])
    def test_examples(self, row, expected):
        out, pos = append_inference_mask(row, item_count=8)
        np.testing.assert_array_equal(out, expected)
        assert pos == 2

    def test_batch(self):
        out, pos = append_inference_mask(np.array([[0, 1], [2, 3]]), item_count=3)
        np.testing.assert_array_equal(out, [[1, 4], [3, 4]])
        assert pos == 1


class TestSequenceDataset:
    def test_rejects_out_of_range_tokens(self):
        with pytest.raises(ValueError):
            SequenceDataset(np.array([[0, 3]]), item_count=2)

    def test_pad_to_and_subset(self):
        ds = SequenceDataset(np.array([[0, 1], [2, 1]]), item_count=2, sequence_ids=np.array([5, 6]))
        wide = ds.pad_to(4)
        np.testing.assert_array_equal(wide.tokens, [[0, 0, 0, 1], [0, 0, 2, 1]])
        np.testing.assert_array_equal(wide.timesteps, [[-1, -1, -1, 1], [-1, -1, 0, 1]])
        with pytest.raises(ValueError):
            wide.pad_to(3)
        sub = wide.subset([1])
        np.testing.assert_array_equal(sub.sequence_ids, [6])

    def test_csv_roundtrip(self, tmp_path):
        ds = SequenceDataset(np.array([[0, 1, 2], [3, 1, 2]]), item_count=3, sequence_ids=np.array([4, 8]))
        ds.to_csv(tmp_path / "ds.csv")
        assert (tmp_path / "ds.csv").read_text().splitlines()[0] == "sequence,position,token"
        back = SequenceDataset.from_csv(tmp_path / "ds.csv", T=3, item_count=3)
        np.testing.assert_array_equal(back.tokens, ds.tokens)
        np.testing.assert_array_equal(back.sequence_ids, ds.sequence_ids)

    def test_summary(self):
        ds = SequenceDataset(np.array([[0, 1, 2], [1, 2, 3]]), item_count=4)
        s = dataset_summary(ds)
        assert s["sequences"] == 2
        assert s["items"] == 3
        assert s["interactions"] == 5
        assert s["sparsity"] == pytest.approx(1 - 5 / 6)
