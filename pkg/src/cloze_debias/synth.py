"""Semi-synthetic worlds: relevance and exposure tensors plus interaction sampling.

Two CP-style tensor factorizations ``r[s, i, t] = sum_k P[s, k] Q[i, k] W[t, k]``
are fit on a seed log: one on ratings (MSE) giving relevance
``gamma = sigmoid(r)``, one on exposure labels (BCE, rated cells positive,
sampled unrated cells negative) giving ``o_hat = sigmoid(r)``. Exposure
propensity is ``theta = o_hat ** p``.

Interactions are drawn as ``Y = C * O * R`` with ``O ~ Ber(theta)``,
``R ~ Ber(gamma)`` and ``C`` the one-hot choice of a rational user (the
exposed item of highest relevance).
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, RegressorMixin, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import SamplingError, TrainingError, as_generator
from .data import InteractionRecord, SequenceDataset, build_rating_tuples


@dataclass
class TFParams:
    P: np.ndarray
    Q: np.ndarray
    W: np.ndarray

    @property
    def d(self):
        return self.P.shape[1]

    def predict(self, X):
        X = np.asarray(X)
        return np.einsum("nk,nk,nk->n", self.P[X[:, 0]], self.Q[X[:, 1]], self.W[X[:, 2]])

    def tensor(self):
        return np.einsum("sk,ik,tk->sit", self.P, self.Q, self.W)


def tf_loss_and_grad(params, X, y, loss="mse"):
    """Mean loss of a tensor factorization on ``(s, i, t)`` tuples and its gradient.

    ``loss="mse"`` fits raw scores to targets; ``loss="bce"`` treats scores as
    logits of binary labels. Returns ``(value, TFParams_of_gradients)``.
    """
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.float64)
    s, i, t = X[:, 0], X[:, 1], X[:, 2]
    P, Q, W = params.P[s], params.Q[i], params.W[t]
    score = np.einsum("nk,nk,nk->n", P, Q, W)
    n = len(y)
    if loss == "mse":
        resid = score - y
        value = float(np.mean(resid * resid))
        e = 2.0 * resid / n
    elif loss == "bce":
        # softplus(x) - y x, stable for large |x|
        value = float(np.mean(np.logaddexp(0.0, score) - y * score))
        e = (expit(score) - y) / n
    else:
        raise ValueError(f"unknown loss {loss!r}")
    dP = np.zeros_like(params.P)
    dQ = np.zeros_like(params.Q)
    dW = np.zeros_like(params.W)
    np.add.at(dP, s, e[:, None] * Q * W)
    np.add.at(dQ, i, e[:, None] * P * W)
    np.add.at(dW, t, e[:, None] * P * Q)
    return value, TFParams(dP, dQ, dW)


class _TensorFactorization(BaseEstimator):
    _loss = None

    def __init__(self, n_components=8, epochs=500, lr=0.05, momentum=0.9, random_state=0):
        self.n_components = n_components
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.random_state = random_state

    def fit(self, X, y, shape=None):
        """Full-batch gradient descent on ``(s, i, t)`` index tuples.

        ``shape`` is ``(n_sequences, n_items, T)``; inferred from ``X`` if omitted.
        """
        X = np.asarray(X, dtype=np.int64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != 3:
            raise ValueError("X must be an (n, 3) array of (sequence, item, timestep)")
        if len(X) == 0:
            raise ValueError("X must be nonempty")
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if shape is None:
            shape = tuple(int(v) for v in X.max(axis=0) + 1)
        rng = np.random.default_rng(self.random_state)
        d = self.n_components
        std = 0.1 / math.sqrt(d)
        params = TFParams(*(std * rng.standard_normal((n, d)) for n in shape))
        vel = TFParams(*(np.zeros_like(a) for a in (params.P, params.Q, params.W)))
        history = []
        for epoch in range(self.epochs):
            value, g = tf_loss_and_grad(params, X, y, self._loss)
            if not np.isfinite(value):
                raise TrainingError(
                    f"tensor factorization diverged at epoch {epoch} (lr={self.lr}); try a smaller lr"
                )
            history.append(value)
            for name in ("P", "Q", "W"):
                v = self.momentum * getattr(vel, name) - self.lr * getattr(g, name)
                setattr(vel, name, v)
                setattr(params, name, getattr(params, name) + v)
        final, _ = tf_loss_and_grad(params, X, y, self._loss)
        if not np.isfinite(final) or not all(np.all(np.isfinite(a)) for a in (params.P, params.Q, params.W)):
            raise TrainingError(f"tensor factorization diverged (lr={self.lr}); try a smaller lr")
        self.params_ = params
        self.loss_curve_ = history
        self.train_loss_ = final
        self.shape_ = tuple(shape)
        return self

    def decision_tensor(self):
        check_is_fitted(self, "params_")
        return self.params_.tensor()


class TensorFactorizationRegressor(RegressorMixin, _TensorFactorization):
    """Rating model fit with mean squared error."""

    _loss = "mse"

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.params_.predict(X)


class TensorFactorizationClassifier(ClassifierMixin, _TensorFactorization):
    """Exposure model fit with binary cross-entropy on sigmoid scores."""

    _loss = "bce"

    def fit(self, X, y, shape=None):
        self.classes_ = np.array([0, 1])
        return super().fit(X, y, shape)

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        p = expit(self.params_.predict(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(int)

    def proba_tensor(self):
        return expit(self.decision_tensor())


def train_relevance_tf(tuples, ratings, d=8, epochs=500, lr=0.05, seed=0, shape=None,
                       momentum=0.9):
    model = TensorFactorizationRegressor(
        n_components=d, epochs=epochs, lr=lr, momentum=momentum, random_state=seed
    )
    return model.fit(tuples, ratings, shape)


def relevance_from_tf(params):
    return expit(params.tensor())


def sample_negative_cells(positives, shape, n, seed):
    """Draw ``n`` distinct cells uniformly from those not in ``positives``."""
    shape = tuple(int(v) for v in shape)
    total = int(np.prod(shape))
    pos_flat = np.unique(np.ravel_multi_index(np.asarray(positives).T, shape))
    available = total - len(pos_flat)
    if n > available:
        raise SamplingError(f"need {n} negative cells but only {available} are non-interacted")
    rng = as_generator(seed)
    taken = np.zeros(0, dtype=np.int64)
    while len(taken) < n:
        draw = rng.integers(0, total, size=2 * (n - len(taken)) + 16)
        draw = draw[~np.isin(draw, pos_flat)]
        _, first = np.unique(draw, return_index=True)
        draw = draw[np.sort(first)]
        draw = draw[~np.isin(draw, taken)]
        taken = np.concatenate([taken, draw[: n - len(taken)]])
    return np.column_stack(np.unravel_index(taken, shape)).astype(np.int64)


def train_exposure_tf(positives, neg_ratio=3, d=8, epochs=500, lr=0.05, seed=0, shape=None,
                      momentum=0.9):
    """Fit the exposure model on rated cells (label 1) plus ``neg_ratio`` negatives each."""
    positives = np.unique(np.asarray(positives, dtype=np.int64), axis=0)
    if len(positives) == 0:
        raise ValueError("positives must be nonempty")
    if shape is None:
        shape = tuple(int(v) for v in positives.max(axis=0) + 1)
    rng = as_generator(seed)
    negatives = sample_negative_cells(positives, shape, neg_ratio * len(positives), rng)
    X = np.vstack([positives, negatives])
    y = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    model = TensorFactorizationClassifier(
        n_components=d, epochs=epochs, lr=lr, momentum=momentum,
        random_state=int(rng.integers(2**31)),
    )
    model.fit(X, y, shape)
    model.negatives_ = negatives
    return model


def apply_bias_power(o_hat, p):
    if p < 1:
        raise ValueError(f"bias power p must be >= 1, got {p!r}")
    return np.asarray(o_hat, dtype=np.float64) ** p


@dataclass
class SyntheticWorld:
    gamma: np.ndarray  # (S, I, T)
    o_hat: np.ndarray  # (S, I, T)
    p: float = 1.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = apply_bias_power(self.o_hat, self.p)

    @property
    def dims(self):
        return self.gamma.shape

    @property
    def item_count(self):
        return self.gamma.shape[1]

    @property
    def T(self):
        return self.gamma.shape[2]

    def with_bias_power(self, p):
        prov = dict(self.provenance, p=p)
        return SyntheticWorld(self.gamma, self.o_hat, p, prov)

    def rational_choice(self):
        """Full-exposure rational choice: argmax relevance per (s, t), as tokens."""
        return np.argmax(self.gamma, axis=1) + 1


@dataclass
class WorldDraw:
    O: np.ndarray  # bool (S, I, T)
    R: np.ndarray  # bool (S, I, T)
    choice: np.ndarray  # (S, T) chosen token, 0 if nothing was exposed
    Y: np.ndarray  # (S, T) interacted token, 0 if none


def draw_exposure_relevance(theta, gamma, n, rng):
    """``n`` independent ``(O, R)`` Bernoulli draws, shape ``(n, S, I, T)``."""
    rng = as_generator(rng)
    O = rng.random((n,) + theta.shape) < theta
    R = rng.random((n,) + gamma.shape) < gamma
    return O, R


def _rational_choice_given_exposure(gamma_s, O_s):
    """Per timestep: token of the exposed item with highest relevance (lowest index on ties)."""
    masked = np.where(O_s, gamma_s, -np.inf)
    best = np.argmax(masked, axis=0)
    any_exposed = O_s.any(axis=0)
    return np.where(any_exposed, best + 1, 0)


def sample_world_draw(world, seed, choice=None, stochastic_choice=False):
    """Draw exposure, relevance, choice and interactions for every cell.

    Each sequence uses its own RNG substream (child ``s`` of the master seed).
    ``choice`` may fix ``C`` as an ``(S, T)`` token matrix; otherwise the
    rational user picks the most relevant exposed item. With
    ``stochastic_choice`` the pick is drawn from relevance renormalized over
    exposed items instead.
    """
    S, n_items, T = world.dims
    children = np.random.SeedSequence(seed).spawn(S)
    O = np.zeros((S, n_items, T), dtype=bool)
    R = np.zeros((S, n_items, T), dtype=bool)
    C = np.zeros((S, T), dtype=np.int64)
    for s in range(S):
        rng = np.random.default_rng(children[s])
        O[s] = rng.random((n_items, T)) < world.theta[s]
        R[s] = rng.random((n_items, T)) < world.gamma[s]
        if choice is not None:
            C[s] = choice[s]
        elif stochastic_choice:
            w = np.where(O[s], world.gamma[s], 0.0)
            tot = w.sum(axis=0)
            u = rng.random(T)
            cdf = np.cumsum(w, axis=0)
            for t in range(T):
                if tot[t] > 0:
                    C[s, t] = int(np.searchsorted(cdf[:, t], u[t] * tot[t], side="right")) + 1
                    C[s, t] = min(C[s, t], n_items)
        else:
            C[s] = _rational_choice_given_exposure(world.gamma[s], O[s])
    Y = np.zeros((S, T), dtype=np.int64)
    s_idx, t_idx = np.nonzero(C)
    c = C[s_idx, t_idx] - 1
    hit = O[s_idx, c, t_idx] & R[s_idx, c, t_idx]
    Y[s_idx[hit], t_idx[hit]] = C[s_idx[hit], t_idx[hit]]
    return WorldDraw(O, R, C, Y)


def build_synthetic_dataset(draw, T=None):
    """Keep interacted cells, ordered by timestep, left-padded; empty sequences dropped."""
    Y = draw.Y
    S, world_T = Y.shape
    T = world_T if T is None else T
    n_items = draw.O.shape[1]
    keep = [s for s in range(S) if (Y[s] > 0).any()]
    tokens = np.zeros((len(keep), T), dtype=np.int64)
    timesteps = np.full((len(keep), T), -1, dtype=np.int64)
    for row, s in enumerate(keep):
        ts = np.flatnonzero(Y[s])[-T:]
        tokens[row, T - len(ts):] = Y[s, ts]
        timesteps[row, T - len(ts):] = ts
    return SequenceDataset(tokens, n_items, timesteps, np.array(keep, dtype=np.int64))


def make_seed_log(n_sequences=100, n_items=50, T=20, d=4, zipf=1.0, quality=0.0, drift_width=0.15,
                  seed=0):
    """A MovieLens-like rating log with item popularity skew and temporal drift.

    Each sequence consumes ``T`` distinct items. Items have a preferred phase
    in the sequence (a Gaussian bump of squared width ``drift_width``), so
    which items get consumed varies with time. Ratings are
    integers in 1..5 driven by a planted low-rank preference plus
    ``quality`` times the standardized log popularity (popular items tend to
    be rated higher, as in real rating logs).
    """
    rng = np.random.default_rng(seed)
    users = rng.standard_normal((n_sequences, d))
    items = rng.standard_normal((n_items, d))
    popularity = 1.0 / np.arange(1, n_items + 1) ** zipf
    popularity = popularity[rng.permutation(n_items)]
    phase = rng.random(n_items)
    log_pop = np.log(popularity)
    merit = quality * (log_pop - log_pop.mean()) / log_pop.std()
    records = []
    for s in range(n_sequences):
        affinity = users[s] @ items.T / math.sqrt(d)
        used = np.zeros(n_items, dtype=bool)
        for t in range(min(T, n_items)):
            drift = -((t / max(T - 1, 1) - phase) ** 2) / drift_width
            logits = np.log(popularity) + affinity + drift
            logits[used] = -np.inf
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            i = int(rng.choice(n_items, p=probs))
            used[i] = True
            rating = int(np.clip(np.rint(3.0 + merit[i] + 1.5 * affinity[i] + 0.5 * rng.standard_normal()), 1, 5))
            records.append(InteractionRecord(s + 1, str(i + 1), float(rating), t))
    return records


@dataclass
class WorldConfig:
    T: int = 20
    d_relevance: int = 4
    d_exposure: int = 4
    epochs_relevance: int = 800
    epochs_exposure: int = 800
    lr_relevance: float = 2.0
    lr_exposure: float = 8.0
    momentum: float = 0.9
    neg_ratio: int = 3
    p: float = 1.0
    seed: int = 0


def generate_world(records, config):
    """Run the full pipeline on a rating log: sequences, both TF models, bias power."""
    ss = np.random.SeedSequence(config.seed)
    rel_seed, exp_seed = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
    dataset, vocab, tuples, ratings = build_rating_tuples(records, config.T)
    shape = (dataset.n_sequences, dataset.item_count, config.T)
    rel = train_relevance_tf(
        tuples, ratings, config.d_relevance, config.epochs_relevance, config.lr_relevance, rel_seed,
        shape, config.momentum,
    )
    expo = train_exposure_tf(
        tuples, config.neg_ratio, config.d_exposure, config.epochs_exposure, config.lr_exposure, exp_seed,
        shape, config.momentum,
    )
    provenance = {
        "dims": list(shape),
        "p": config.p,
        "seed": config.seed,
        "relevance_seed": rel_seed,
        "exposure_seed": exp_seed,
        "relevance_train_mse": rel.train_loss_,
        "exposure_train_bce": expo.train_loss_,
    }
    world = SyntheticWorld(relevance_from_tf(rel.params_), expo.proba_tensor(), config.p, provenance)
    return world, dataset


def _write_tensor_csv(path, arr):
    S, n_items, T = arr.shape
    s, i, t = np.meshgrid(np.arange(S), np.arange(n_items), np.arange(T), indexing="ij")
    with open(path, "w") as fh:
        fh.write("sequence,item,timestep,value\n")
        for row in zip(s.ravel(), i.ravel() + 1, t.ravel(), arr.ravel()):
            fh.write(f"{row[0]},{row[1]},{row[2]},{float(row[3])!r}\n")


def _read_tensor_csv(path, shape):
    arr = np.zeros(shape)
    with open(path) as fh:
        next(fh)
        for line in fh:
            s, i, t, v = line.rstrip("\n").split(",")
            arr[int(s), int(i) - 1, int(t)] = float(v)
    return arr


def save_world(world, directory):
    """Write ``gamma.csv``, ``theta.csv``, ``o_hat.csv`` and the ``meta`` manifest."""
    os.makedirs(directory, exist_ok=True)
    _write_tensor_csv(os.path.join(directory, "gamma.csv"), world.gamma)
    _write_tensor_csv(os.path.join(directory, "theta.csv"), world.theta)
    _write_tensor_csv(os.path.join(directory, "o_hat.csv"), world.o_hat)
    meta = {"dims": list(world.dims), "p": world.p, "provenance": world.provenance}
    with open(os.path.join(directory, "meta"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_world(directory):
    with open(os.path.join(directory, "meta")) as fh:
        meta = json.load(fh)
    shape = tuple(meta["dims"])
    gamma = _read_tensor_csv(os.path.join(directory, "gamma.csv"), shape)
    o_hat = _read_tensor_csv(os.path.join(directory, "o_hat.csv"), shape)
    return SyntheticWorld(gamma, o_hat, meta["p"], meta["provenance"])
