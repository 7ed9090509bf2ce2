"""Interaction logs, fixed-length sequence matrices and Cloze masking.

Token conventions used throughout the package:

* ``0`` is the padding item,
* real items are dense ids ``1..item_count``,
* ``item_count + 1`` is the mask token.

Item-indexed arrays (logits, relevance, propensity) use the 0-based axis
``token - 1``.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from ._validation import ParseError, as_generator, check_probability_open, check_tokens

PAD = 0


@dataclass(frozen=True)
class InteractionRecord:
    sequence_id: int
    item_id: str
    rating: float
    timestamp: int


@dataclass
class Vocabulary:
    """Raw item key to dense id map. Dense ids run from 1 to ``item_count``."""

    raw_to_dense: dict = field(default_factory=dict)

    @property
    def item_count(self):
        return len(self.raw_to_dense)

    @property
    def mask_token(self):
        return self.item_count + 1

    def add(self, raw):
        if raw not in self.raw_to_dense:
            self.raw_to_dense[raw] = len(self.raw_to_dense) + 1
        return self.raw_to_dense[raw]

    def dense_to_raw(self):
        return {v: k for k, v in self.raw_to_dense.items()}


@dataclass(frozen=True)
class SequenceDataset:
    """Left-padded ``|S| x T`` token matrix.

    ``timesteps`` holds, for each real token, the timestep index used to look
    up temporal quantities (propensity, relevance); -1 at padding. For logs it
    is the in-matrix column; for semi-synthetic data it is the world timestep.
    ``sequence_ids`` maps rows back to the source sequence (world row or raw
    user id).
    """

    tokens: np.ndarray
    item_count: int
    timesteps: np.ndarray = None
    sequence_ids: np.ndarray = None

    def __post_init__(self):
        tokens = check_tokens(self.tokens, self.item_count)
        object.__setattr__(self, "tokens", tokens)
        if self.timesteps is None:
            ts = np.where(tokens > 0, np.arange(tokens.shape[1])[None, :], -1)
            object.__setattr__(self, "timesteps", ts)
        else:
            ts = np.asarray(self.timesteps, dtype=np.int64)
            if ts.shape != tokens.shape:
                raise ValueError("timesteps must match the token matrix shape")
            object.__setattr__(self, "timesteps", ts)
        if self.sequence_ids is None:
            object.__setattr__(self, "sequence_ids", np.arange(tokens.shape[0]))
        else:
            object.__setattr__(self, "sequence_ids", np.asarray(self.sequence_ids, dtype=np.int64))

    @property
    def n_sequences(self):
        return self.tokens.shape[0]

    @property
    def T(self):
        return self.tokens.shape[1]

    @property
    def mask_token(self):
        return self.item_count + 1

    def lengths(self):
        return (self.tokens > 0).sum(axis=1)

    def history(self, row):
        r = self.tokens[row]
        return r[r > 0]

    def with_positional_timesteps(self):
        """Copy whose timesteps are the in-matrix columns."""
        return SequenceDataset(self.tokens, self.item_count, None, self.sequence_ids)

    def pad_to(self, T):
        """Left-pad every row to width ``T`` (``T >= self.T``)."""
        extra = T - self.T
        if extra < 0:
            raise ValueError("pad_to cannot shrink rows")
        tokens = np.pad(self.tokens, ((0, 0), (extra, 0)))
        ts = np.pad(self.timesteps, ((0, 0), (extra, 0)), constant_values=-1)
        return SequenceDataset(tokens, self.item_count, ts, self.sequence_ids)

    def subset(self, rows):
        rows = np.asarray(rows)
        return SequenceDataset(
            self.tokens[rows], self.item_count, self.timesteps[rows], self.sequence_ids[rows]
        )

    def to_csv(self, path):
        """Dump real tokens as ``sequence,position,token`` rows."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sequence", "position", "token"])
            for s, t in zip(*np.nonzero(self.tokens)):
                w.writerow([int(self.sequence_ids[s]), int(t), int(self.tokens[s, t])])

    @classmethod
    def from_csv(cls, path, T, item_count):
        rows = {}
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.setdefault(int(rec["sequence"]), []).append(
                    (int(rec["position"]), int(rec["token"]))
                )
        seq_ids = np.array(sorted(rows), dtype=np.int64)
        tokens = np.zeros((len(seq_ids), T), dtype=np.int64)
        for r, sid in enumerate(seq_ids):
            for pos, tok in rows[sid]:
                tokens[r, pos] = tok
        return cls(tokens, item_count, sequence_ids=seq_ids)


@dataclass(frozen=True)
class MaskedBatch:
    masked_tokens: np.ndarray
    mask_indicator: np.ndarray
    labels: np.ndarray
    item_count: int

    @property
    def shape(self):
        return self.masked_tokens.shape


def ingest_tsv(path):
    """Read a MovieLens-100K style ``user\\titem\\trating\\ttimestamp`` file."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(lineno, f"expected 4 tab-separated fields, got {len(parts)}")
            user, item, rating, ts = parts
            try:
                records.append(InteractionRecord(int(user), item, float(rating), int(ts)))
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
    return records


def build_sequences(records, T):
    """Group records into chronologically sorted, left-padded rows of length ``T``.

    Rows are ordered by ascending sequence id. Ties in timestamp keep input order.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not records:
        raise ValueError("records must be nonempty")
    dataset, vocab, _ = _build(records, T)
    return dataset, vocab


def build_rating_tuples(records, T):
    """Like :func:`build_sequences`, also returning ``(s, i, t, rating)`` tuples.

    Tuples use 0-based row, item axis (``token - 1``) and column indices of
    the retained interactions, as consumed by the tensor-factorization models.
    """
    dataset, vocab, ratings = _build(records, T)
    s, t = np.nonzero(dataset.tokens)
    tuples = np.column_stack([s, dataset.tokens[s, t] - 1, t]).astype(np.int64)
    return dataset, vocab, tuples, ratings[s, t]


def _build(records, T):
    vocab = Vocabulary()
    by_seq = {}
    for order, rec in enumerate(records):
        by_seq.setdefault(rec.sequence_id, []).append((rec.timestamp, order, rec.item_id, rec.rating))
    seq_ids = sorted(by_seq)
    tokens = np.zeros((len(seq_ids), T), dtype=np.int64)
    ratings = np.zeros((len(seq_ids), T))
    for row, sid in enumerate(seq_ids):
        events = sorted(by_seq[sid], key=lambda e: (e[0], e[1]))
        # the vocabulary also covers items that only occur in the truncated prefix
        dense = [vocab.add(e[2]) for e in events]
        kept = dense[-T:]
        tokens[row, T - len(kept):] = kept
        ratings[row, T - len(kept):] = [e[3] for e in events[-T:]]
    dataset = SequenceDataset(tokens, vocab.item_count, sequence_ids=np.array(seq_ids))
    return dataset, vocab, ratings


def apply_cloze_mask(dataset, rho, seed):
    """Mask each real position independently with probability ``rho``.

    Rows with at least one real item always receive at least one mask.
    """
    rho = check_probability_open(rho, "rho")
    rng = as_generator(seed)
    tokens = dataset.tokens
    real = tokens > 0
    mask = (rng.random(tokens.shape) < rho) & real
    starved = np.flatnonzero(real.any(axis=1) & ~mask.any(axis=1))
    for row in starved:
        cols = np.flatnonzero(real[row])
        mask[row, cols[rng.integers(len(cols))]] = True
    masked = np.where(mask, dataset.mask_token, tokens)
    labels = np.where(mask, tokens, 0)
    return MaskedBatch(masked, mask, labels, dataset.item_count)


def append_inference_mask(row, item_count):
    """Shift ``row`` left by one and put the mask token in the last slot.

    Returns ``(new_row, position)`` where ``position`` is the 0-based index of
    the mask (always ``T - 1``).
    """
    row = np.asarray(row, dtype=np.int64)
    out = np.empty_like(row)
    out[..., :-1] = row[..., 1:]
    out[..., -1] = item_count + 1
    return out, row.shape[-1] - 1


def dataset_summary(dataset):
    """Sequence count, item count, interactions, average length and sparsity."""
    lengths = dataset.lengths()
    interactions = int(lengths.sum())
    used_items = np.unique(dataset.tokens[dataset.tokens > 0])
    n_items = len(used_items)
    denom = dataset.n_sequences * max(n_items, 1)
    return {
        "sequences": int(dataset.n_sequences),
        "items": int(n_items),
        "interactions": interactions,
        "avg_length": interactions / max(dataset.n_sequences, 1),
        "sparsity": 1.0 - interactions / denom,
    }
