"""Leave-one-out splits, negative sampling, ranking metrics and reports."""

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import DomainError, ModeError, SamplingError, as_generator
from .data import SequenceDataset

MIN_EVAL_LENGTH = 3


@dataclass(frozen=True)
class EvalSplit:
    """Leave-one-out split.

    ``train`` keeps every input row; rows listed in ``eval_rows`` lose their
    last two real items (re-padded on the left). ``valid_*`` / ``test_*``
    arrays are aligned with ``eval_rows``.
    """

    train: SequenceDataset
    eval_rows: np.ndarray
    valid_items: np.ndarray
    test_items: np.ndarray
    valid_timesteps: np.ndarray
    test_timesteps: np.ndarray
    n_excluded: int
    replaced: bool = False
    # interacted validation items; the test context keeps them even after replacement
    original_valid_items: np.ndarray = None
    original_test_items: np.ndarray = None

    @property
    def n_eval(self):
        return len(self.eval_rows)

    def sequence_ids(self):
        return self.train.sequence_ids[self.eval_rows]

    def valid_context(self):
        """Training prefix of each eval row (the input used to predict the validation item)."""
        return self.train.tokens[self.eval_rows]

    def test_context(self):
        """Training prefix plus the validation item, shifted left by one."""
        ctx = self.valid_context().copy()
        ctx[:, :-1] = ctx[:, 1:]
        ctx[:, -1] = self.valid_items if self.original_valid_items is None else self.original_valid_items
        return ctx

    def histories(self):
        """Full interacted item set of each eval row (train prefix, validation and test)."""
        ctx = self.valid_context()
        out = []
        for e in range(self.n_eval):
            row = ctx[e]
            v = self.valid_items[e] if self.original_valid_items is None else self.original_valid_items[e]
            out.append(set(row[row > 0].tolist()) | {int(v), int(self._interacted_test[e])})
        return out

    @property
    def _interacted_test(self):
        return self.test_items if self.original_test_items is None else self.original_test_items


def loo_split(dataset):
    """Hold out the last real item for test and the second-to-last for validation."""
    tokens = dataset.tokens.copy()
    ts = dataset.timesteps.copy()
    lengths = dataset.lengths()
    eval_rows = np.flatnonzero(lengths >= MIN_EVAL_LENGTH)
    valid = tokens[eval_rows, -2].copy()
    test = tokens[eval_rows, -1].copy()
    valid_ts = ts[eval_rows, -2].copy()
    test_ts = ts[eval_rows, -1].copy()
    tokens[eval_rows, 2:] = dataset.tokens[eval_rows, :-2]
    tokens[eval_rows, :2] = 0
    ts[eval_rows, 2:] = dataset.timesteps[eval_rows, :-2]
    ts[eval_rows, :2] = -1
    train = SequenceDataset(tokens, dataset.item_count, ts, dataset.sequence_ids)
    return EvalSplit(
        train, eval_rows, valid, test, valid_ts, test_ts,
        int(dataset.n_sequences - len(eval_rows)),
    )


def replace_with_most_relevant(split, gamma):
    """Swap each validation/test target for the most relevant item at its timestep.

    ``gamma`` is the world relevance tensor ``(S, I, T)`` indexed by the
    split's sequence ids and timesteps. Ties go to the lowest item index.
    """
    if gamma is None:
        raise ModeError("relevance replacement needs the world relevance tensor")
    gamma = np.asarray(gamma)
    seq = split.sequence_ids()
    valid = np.argmax(gamma[seq, :, split.valid_timesteps], axis=1) + 1
    test = np.argmax(gamma[seq, :, split.test_timesteps], axis=1) + 1
    return replace(split, valid_items=valid, test_items=test, replaced=True,
                   original_valid_items=split.valid_items,
                   original_test_items=split.test_items)


@dataclass(frozen=True)
class CandidateSet:
    target: int
    negatives: np.ndarray
    mode: str

    @property
    def items(self):
        return np.concatenate([[self.target], self.negatives])


def _eligible(target, history, item_count):
    ok = np.ones(item_count + 1, dtype=bool)
    ok[0] = False
    ok[np.asarray(list(history), dtype=np.int64)] = False
    ok[target] = False
    return np.flatnonzero(ok)


def sample_negatives_uniform(target, history, item_count, n=100, seed=None):
    """``n`` distinct items, uniformly without replacement, outside history and target."""
    eligible = _eligible(target, history, item_count)
    if len(eligible) < n:
        raise SamplingError(f"only {len(eligible)} eligible negatives, {n} requested")
    rng = as_generator(seed)
    return CandidateSet(int(target), rng.choice(eligible, size=n, replace=False), "uniform")


def sample_negatives_popularity(target, history, popularity, n=100, seed=None):
    """``n`` distinct items drawn proportionally to popularity without replacement.

    Equivalent to sequential draws renormalized after each pick; implemented
    with Gumbel top-k keys. ``popularity`` is item-indexed (``token - 1``).
    """
    popularity = np.asarray(popularity, dtype=np.float64)
    if np.any(popularity < 0):
        raise ValueError("popularity must be nonnegative")
    eligible = _eligible(target, history, len(popularity))
    weights = popularity[eligible - 1]
    eligible = eligible[weights > 0]
    weights = weights[weights > 0]
    if len(eligible) < n:
        raise SamplingError(f"only {len(eligible)} eligible items with positive popularity, {n} requested")
    rng = as_generator(seed)
    keys = np.log(weights) + rng.gumbel(size=len(weights))
    top = np.argsort(-keys, kind="stable")[:n]
    return CandidateSet(int(target), eligible[top], "popularity")


def rank_target(scores, candidates):
    """1-based rank of the target among the candidates; ties count against the target."""
    scores = np.asarray(scores)
    t = scores[candidates.target - 1]
    return 1 + int(np.sum(scores[np.asarray(candidates.negatives) - 1] >= t))


def recall_at_k(rank, k):
    if rank < 1:
        raise ValueError("rank must be >= 1")
    return 1 if rank <= k else 0


def ndcg_at_k(rank, k):
    if rank < 1:
        raise ValueError("rank must be >= 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def efd_at_k(topk, popularity, K=None):
    """Expected free discovery: mean of ``-log2 popularity`` over top-K lists.

    ``topk`` is a ``(|S|, K)`` token matrix; 0 entries (short lists) are
    skipped. ``popularity`` is item-indexed, shape ``(I,)`` or ``(|S|, I)``.
    """
    topk = np.asarray(topk, dtype=np.int64)
    if topk.ndim == 1:
        topk = topk[None, :]
    K = topk.shape[1] if K is None else K
    topk = topk[:, :K]
    pop = np.asarray(popularity, dtype=np.float64)
    if pop.ndim == 1:
        pop = np.broadcast_to(pop, (topk.shape[0], pop.shape[0]))
    rows, cols = np.nonzero(topk)
    vals = pop[rows, topk[rows, cols] - 1]
    if np.any(vals <= 0):
        raise DomainError("zero popularity among recommended items; smooth first")
    per_row = np.zeros(topk.shape[0])
    np.add.at(per_row, rows, -np.log2(vals))
    return float(np.mean(per_row / K))


def evaluate_scores(scores, targets, histories, item_count, ks=(5, 10), n_negatives=100,
                    sampler="uniform", popularity=None, seed=0):
    """Rank each target against freshly sampled negatives.

    ``scores`` is ``(n_eval, I)``; ``histories`` is a list of item collections
    excluded from the negatives. Each eval entry draws from its own RNG
    substream of ``seed``. Returns a dict ``metric -> value`` plus ``ranks``.
    """
    children = np.random.SeedSequence(seed).spawn(len(targets))
    ranks = np.empty(len(targets), dtype=np.int64)
    for e, target in enumerate(targets):
        rng = np.random.default_rng(children[e])
        if sampler == "uniform":
            cand = sample_negatives_uniform(target, histories[e], item_count, n_negatives, rng)
        elif sampler == "popularity":
            if popularity is None:
                raise ModeError("popularity sampler needs a popularity table")
            cand = sample_negatives_popularity(target, histories[e], popularity, n_negatives, rng)
        else:
            raise ValueError(f"unknown sampler {sampler!r}")
        ranks[e] = rank_target(scores[e], cand)
    out = {}
    for k in ks:
        out[f"R@{k}"] = float(np.mean([recall_at_k(r, k) for r in ranks])) if len(ranks) else 0.0
        out[f"N@{k}"] = float(np.mean([ndcg_at_k(r, k) for r in ranks])) if len(ranks) else 0.0
    out["ranks"] = ranks
    return out


@dataclass
class EvalReport:
    """Per-metric mean and standard deviation over replicates."""

    model: str
    metrics: dict  # name -> (mean, std)
    replicates: int
    fingerprint: str = ""
    per_replicate: list = field(default_factory=list)

    @classmethod
    def aggregate(cls, model, replicate_metrics, fingerprint=""):
        names = [k for k in replicate_metrics[0] if k != "ranks"]
        metrics = {}
        for name in names:
            vals = np.array([m[name] for m in replicate_metrics], dtype=np.float64)
            metrics[name] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
        clean = [{k: float(v) for k, v in m.items() if k != "ranks"} for m in replicate_metrics]
        return cls(model, metrics, len(replicate_metrics), fingerprint, clean)

    def mean(self, name):
        return self.metrics[name][0]

    def csv_rows(self):
        return [[self.model, name, repr(m), repr(s), self.replicates]
                for name, (m, s) in sorted(self.metrics.items())]

    def to_dict(self):
        return {
            "model": self.model,
            "replicates": self.replicates,
            "fingerprint": self.fingerprint,
            "metrics": {k: {"mean": m, "std": s} for k, (m, s) in sorted(self.metrics.items())},
            "per_replicate": self.per_replicate,
        }


def write_reports(reports, csv_path=None, json_path=None):
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "metric", "mean", "std", "replicates"])
            for r in reports:
                w.writerows(r.csv_rows())
    if json_path:
        with open(json_path, "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)


def fingerprint(*parts):
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p).tobytes())
        else:
            h.update(json.dumps(p, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]
