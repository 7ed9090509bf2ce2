"""Encoder training under the four Cloze-task losses, plus model evaluation.

``model_kind`` selects the per-term weight:

* ``cloze``  - 1 at every masked interacted position,
* ``ips``    - inverse static propensity of the target,
* ``itps``   - inverse temporal propensity of the target,
* ``oracle`` - targets become the full-exposure choice (most relevant item at
  that timestep) weighted by its relevance. Needs a world.

Masking and batch order depend only on the seed, never on the kind, so runs
that share a seed see the same masks in the same order.
"""

import csv
import json
import os
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import (
    ModeError, TrainingError, check_positive_int, check_probability_open, derive_seed,
)
from .data import SequenceDataset, append_inference_mask, apply_cloze_mask
from .encoder import Adam, EncoderConfig, forward, backward, init_params, load_params, save_params, sgd_step
from .evaluation import (
    EvalReport, efd_at_k, evaluate_scores, fingerprint, replace_with_most_relevant,
)
from .losses import loss_grad_wrt_logits, weighted_cloze_loss
from .propensity import (
    DEFAULT_EPS, estimate_temporal_popularity, smooth_and_clip, static_from_temporal_avg,
)

MODEL_KINDS = ("cloze", "ips", "itps", "oracle")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters. Encoder shape fields are forwarded to :class:`EncoderConfig`."""

    model_kind: str = "cloze"
    rho: float = 0.2
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    normalize: str = "masked_count"
    propensity_source: str = "estimated"
    eps: float = DEFAULT_EPS
    hidden_units: int = 16
    blocks: int = 1
    heads: int = 1
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        check_probability_open(self.rho, "rho")
        check_positive_int(self.epochs, "epochs", minimum=0)
        check_positive_int(self.batch_size, "batch_size")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.normalize not in ("masked_count", "full"):
            raise ValueError(f"normalize must be 'masked_count' or 'full', got {self.normalize!r}")
        if self.propensity_source not in ("estimated", "oracle"):
            raise ValueError("propensity_source must be 'estimated' or 'oracle'")
        if not 0.0 < self.eps <= 0.1:
            raise ValueError("eps must lie in (0, 0.1]")

    def encoder_config(self, item_count, T):
        return EncoderConfig(
            item_count=item_count, T=T, hidden_units=self.hidden_units, blocks=self.blocks,
            heads=self.heads, dropout_rate=self.dropout_rate, seed=derive_seed(self.seed, "init"),
        )


def term_weights(config, dataset, world=None):
    """Per-position targets and weights ``(|S|, T)`` for the configured loss.

    Weights depend only on the token and its timestep, so they are computed
    once and selected by each epoch's mask.
    """
    kind = config.model_kind
    tokens = dataset.tokens
    real = tokens > 0
    s, t = np.nonzero(real)
    items = tokens[s, t] - 1
    weights = np.zeros(tokens.shape)
    targets = tokens.copy()
    needs_world = kind == "oracle" or (kind in ("ips", "itps") and config.propensity_source == "oracle")
    if needs_world and world is None:
        raise ModeError(f"model_kind={kind!r} with these settings needs a synthetic world")
    if needs_world:
        seq = dataset.sequence_ids[s]
        wt = dataset.timesteps[s, t]
    if kind == "cloze":
        weights[s, t] = 1.0
    elif kind == "oracle":
        choice = world.rational_choice()[seq, wt]
        targets[s, t] = choice
        weights[s, t] = world.gamma[seq, choice - 1, wt]
    elif config.propensity_source == "oracle":
        if kind == "itps":
            theta = world.theta[seq, items, wt]
        else:
            theta = static_from_temporal_avg(world.theta)[seq, items]
        weights[s, t] = 1.0 / np.maximum(theta, config.eps)
    else:
        table = smooth_and_clip(estimate_temporal_popularity(dataset.with_positional_timesteps()), config.eps)
        if kind == "itps":
            weights[s, t] = 1.0 / table.temporal[items, t]
        else:
            weights[s, t] = 1.0 / table.static[items]
    return targets, weights


def train(config, dataset, world=None, trace=None):
    """Fit an encoder; returns ``(params, loss_curve)``.

    Each epoch draws fresh masks and a fresh batch order from seeds derived
    from ``config.seed`` and the epoch index. ``loss_curve[e]`` is the mean
    batch loss of epoch ``e``. If ``trace`` is a list, ``(epoch, batch rows,
    mask)`` triples are appended to it.
    """
    targets, weights = term_weights(config, dataset, world)
    enc_cfg = config.encoder_config(dataset.item_count, dataset.T)
    params = init_params(enc_cfg)
    opt = Adam(lr=config.lr) if config.optimizer == "adam" else None
    n_items = dataset.item_count
    curve = []
    for epoch in range(config.epochs):
        masked = apply_cloze_mask(dataset, config.rho, derive_seed(config.seed, f"mask/{epoch}"))
        order = np.random.default_rng(derive_seed(config.seed, f"order/{epoch}")).permutation(dataset.n_sequences)
        drop_rng = np.random.default_rng(derive_seed(config.seed, f"dropout/{epoch}"))
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            rows = order[start:start + config.batch_size]
            mask = masked.mask_indicator[rows]
            tgt, w = targets[rows], weights[rows]
            if trace is not None:
                trace.append((epoch, rows.copy(), mask.copy()))
            if config.normalize == "masked_count":
                norm = max(int(mask.sum()), 1)
            else:
                norm = float(len(rows)) * n_items * dataset.T
            logits, cache = forward(params, masked.masked_tokens[rows],
                                    drop_rng if config.dropout_rate > 0 else None)
            loss = weighted_cloze_loss(logits, mask, tgt, w, norm)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b} (lr={config.lr}); try a smaller lr"
                )
            grads = backward(cache, loss_grad_wrt_logits(logits, mask, w, tgt, norm))
            params = opt.step(params, grads) if opt else sgd_step(params, grads, config.lr)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    return params, np.array(curve)


def score_next(params, contexts):
    """Logits for the item following each context row, shape ``(n, item_count)``."""
    contexts = np.asarray(contexts, dtype=np.int64)
    masked, pos = append_inference_mask(contexts, params.config.item_count)
    logits, _ = forward(params, masked)
    return logits[:, pos, :]


def topk_excluding(scores, histories, K):
    """Top-``K`` tokens per row by score, skipping history items.

    Ties go to the lower item index. Rows with fewer than ``K`` eligible items
    are zero-padded on the right.
    """
    scores = np.array(scores, dtype=np.float64)
    n, n_items = scores.shape
    out = np.zeros((n, K), dtype=np.int64)
    for r in range(n):
        hist = np.asarray(sorted(histories[r]), dtype=np.int64)
        s = scores[r].copy()
        if len(hist):
            s[hist - 1] = -np.inf
        eligible = np.flatnonzero(np.isfinite(s))
        ranked = eligible[np.lexsort((eligible, -s[eligible]))][:K]
        out[r, :len(ranked)] = ranked + 1
    return out


def evaluate_model(params, split, mode="unbiased", sampler="uniform", ks=(5, 10), seed=0,
                   world=None, n_negatives=100, efd_k=10, eps=DEFAULT_EPS):
    """Rank held-out test targets against sampled negatives.

    ``mode='unbiased'`` swaps targets for the most relevant item (needs
    ``world``); ``'standard'`` keeps the interacted items. Popularity for the
    popularity sampler and for EFD is the smoothed static popularity of the
    training split. Returns a single-replicate :class:`EvalReport`.
    """
    if mode == "unbiased":
        if world is None:
            raise ModeError("unbiased evaluation needs the world relevance tensor")
        split = replace_with_most_relevant(split, world.gamma)
    elif mode != "standard":
        raise ValueError(f"mode must be 'unbiased' or 'standard', got {mode!r}")
    table = smooth_and_clip(estimate_temporal_popularity(split.train.with_positional_timesteps()), eps)
    scores = score_next(params, split.test_context())
    histories = split.histories()
    out = evaluate_scores(scores, split.test_items, histories, split.train.item_count, ks,
                          n_negatives, sampler, table.static, seed)
    out.pop("ranks")
    top = topk_excluding(scores, histories, efd_k)
    out[f"EFD@{efd_k}"] = efd_at_k(top, table.static, efd_k)
    fp = fingerprint(mode, sampler, list(ks), seed, n_negatives, split.test_items)
    return EvalReport.aggregate("model", [out], fp)


def write_loss_curve(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for e, v in enumerate(curve):
            w.writerow([e, repr(float(v))])


def save_run(directory, config, params, curve, dataset):
    """Checkpoint, loss curve and a manifest with config, seeds and data fingerprint."""
    os.makedirs(directory, exist_ok=True)
    save_params(params, os.path.join(directory, "checkpoint"))
    write_loss_curve(curve, os.path.join(directory, "loss_curve.csv"))
    manifest = {
        "config": asdict(config),
        "seeds": {name: derive_seed(config.seed, name) for name in ("init", "mask/0", "order/0")},
        "dataset_fingerprint": fingerprint(dataset.tokens, dataset.timesteps, dataset.sequence_ids),
        "n_parameters": params.n_parameters(),
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


class ClozeRecommender(BaseEstimator):
    """Scikit-learn style wrapper around :func:`train` and the scoring helpers.

    Hyperparameters mirror :class:`TrainConfig`. ``fit`` takes a
    :class:`SequenceDataset` and, for world-backed kinds, a world.
    """

    def __init__(self, model_kind="cloze", rho=0.2, epochs=100, batch_size=32, lr=1e-3,
                 optimizer="adam", seed=0, normalize="masked_count", propensity_source="estimated",
                 eps=DEFAULT_EPS, hidden_units=16, blocks=1, heads=1, dropout_rate=0.0):
        self.model_kind = model_kind
        self.rho = rho
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.seed = seed
        self.normalize = normalize
        self.propensity_source = propensity_source
        self.eps = eps
        self.hidden_units = hidden_units
        self.blocks = blocks
        self.heads = heads
        self.dropout_rate = dropout_rate

    def train_config(self):
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})

    def fit(self, dataset, world=None):
        if not isinstance(dataset, SequenceDataset):
            raise TypeError("fit expects a SequenceDataset")
        self.params_, self.loss_curve_ = train(self.train_config(), dataset, world)
        self.item_count_ = dataset.item_count
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise AttributeError("this ClozeRecommender is not fitted yet; call fit first")

    def predict_scores(self, contexts):
        """Next-item logits for each context row."""
        self._check_fitted()
        return score_next(self.params_, contexts)

    def predict(self, contexts):
        """Highest-scoring next item token for each context row."""
        return np.argmax(self.predict_scores(contexts), axis=1) + 1

    def recommend(self, dataset, K=10):
        """Top-``K`` unseen items for every row of ``dataset``."""
        scores = self.predict_scores(dataset.tokens)
        return topk_excluding(scores, [set(dataset.history(r).tolist()) for r in range(dataset.n_sequences)], K)

    def evaluate(self, split, **kwargs):
        self._check_fitted()
        report = evaluate_model(self.params_, split, **kwargs)
        return replace(report, model=self.model_kind)

    @classmethod
    def from_checkpoint(cls, directory, **kwargs):
        est = cls(**kwargs)
        est.params_ = load_params(directory)
        est.item_count_ = est.params_.config.item_count
        return est
