"""Exposure propensity estimation and reductions.

The popularity estimator does not depend on the sequence, so tables store
item-indexed values and broadcast across sequences: ``theta[s, i, t]`` is
``temporal[i, t]`` for every ``s`` and ``theta[s, i]`` is ``static[i]``.
"""

import csv
from dataclasses import dataclass, replace

import numpy as np

DEFAULT_EPS = 1e-3


@dataclass(frozen=True)
class PropensityTable:
    temporal: np.ndarray  # (item_count, T)
    static: np.ndarray  # (item_count,)
    eps: float = None

    @property
    def item_count(self):
        return self.temporal.shape[0]

    @property
    def T(self):
        return self.temporal.shape[1]

    def temporal_for(self, sequences, items, timesteps):
        """Broadcast lookup of ``theta[s, i, t]``; ``sequences`` is ignored."""
        del sequences
        return self.temporal[np.asarray(items), np.asarray(timesteps)]

    def static_for(self, sequences, items):
        del sequences
        return self.static[np.asarray(items)]

    def to_csv(self, temporal_path, static_path):
        with open(temporal_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["item", "timestep", "theta"])
            for i in range(self.item_count):
                for t in range(self.T):
                    w.writerow([i + 1, t, repr(float(self.temporal[i, t]))])
        with open(static_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["item", "theta_static"])
            for i in range(self.item_count):
                w.writerow([i + 1, repr(float(self.static[i]))])

    @classmethod
    def from_csv(cls, temporal_path, static_path, eps=None):
        with open(temporal_path, newline="") as fh:
            rows = [(int(r["item"]), int(r["timestep"]), float(r["theta"])) for r in csv.DictReader(fh)]
        n_items = max(r[0] for r in rows)
        T = max(r[1] for r in rows) + 1
        temporal = np.zeros((n_items, T))
        for i, t, v in rows:
            temporal[i - 1, t] = v
        with open(static_path, newline="") as fh:
            srows = [(int(r["item"]), float(r["theta_static"])) for r in csv.DictReader(fh)]
        static = np.zeros(n_items)
        for i, v in srows:
            static[i - 1] = v
        return cls(temporal, static, eps)


def estimate_temporal_popularity(dataset, T=None):
    """Temporal popularity: interactions with item i at timestep t over all interactions.

    Padding is excluded from both counts. Timesteps come from
    ``dataset.timesteps``. The static entry is the sum over timesteps.
    """
    T = dataset.T if T is None else T
    real = dataset.tokens > 0
    total = int(real.sum())
    if total == 0:
        raise ValueError("dataset has no interactions")
    counts = np.zeros((dataset.item_count, T))
    np.add.at(counts, (dataset.tokens[real] - 1, dataset.timesteps[real]), 1.0)
    temporal = counts / total
    return PropensityTable(temporal, temporal.sum(axis=1))


def static_from_temporal_sum(table):
    return replace(table, static=table.temporal.sum(axis=1))


def static_from_temporal_avg(theta):
    """Mean over the trailing timestep axis of a ``(S, I, T)`` tensor."""
    return np.asarray(theta, dtype=np.float64).mean(axis=-1)


def smooth_and_clip(table, eps=DEFAULT_EPS):
    """Floor every entry at ``eps``."""
    if not 0.0 < eps <= 0.1:
        raise ValueError(f"eps must lie in (0, 0.1], got {eps!r}")
    return PropensityTable(
        np.maximum(table.temporal, eps), np.maximum(table.static, eps), eps
    )
