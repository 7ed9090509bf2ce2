"""Feedback-loop simulation: retrain, recommend, let users pick, grow the data.

Rows are left-padded to ``T + iterations`` up front so every appended item
fits without dropping history; a row that is already full drops its oldest
item instead.
"""

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import TrainingError, check_positive_int, derive_seed
from .data import SequenceDataset
from .evaluation import efd_at_k, loo_split
from .propensity import DEFAULT_EPS, estimate_temporal_popularity, smooth_and_clip
from .trainer import TrainConfig, evaluate_model, score_next, topk_excluding, train


@dataclass(frozen=True)
class LoopConfig:
    iterations: int = 10
    K: int = 10
    seed: int = 0
    track_metrics: bool = True
    n_negatives: int = 100
    eps: float = DEFAULT_EPS
    pad_growth: bool = True

    def __post_init__(self):
        check_positive_int(self.iterations, "iterations", minimum=0)
        check_positive_int(self.K, "K")


@dataclass
class LoopState:
    """Iteration counter, current data, metric history and per-row item sets."""

    iteration: int
    dataset: SequenceDataset
    history: list = field(default_factory=list)
    histories: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @classmethod
    def initial(cls, dataset):
        hist = [set(dataset.history(r).tolist()) for r in range(dataset.n_sequences)]
        return cls(0, dataset, [], hist, [])


def recommend_topk(params, dataset, K=10, histories=None):
    """Top-``K`` unseen items per row; returns ``(topk, short)``.

    ``histories`` defaults to the items in each row. ``short[r]`` flags rows
    that had fewer than ``K`` eligible items (their list is zero-padded).
    """
    scores = score_next(params, dataset.tokens)
    if histories is None:
        histories = [set(dataset.history(r).tolist()) for r in range(dataset.n_sequences)]
    top = topk_excluding(scores, histories, K)
    return top, (top == 0).any(axis=1)


def simulate_user_choice(topk_row, seed):
    """Uniform pick from the nonzero entries of ``topk_row``; 0 if the list is empty."""
    items = np.asarray(topk_row)
    items = items[items > 0]
    if len(items) == 0:
        return 0
    return int(items[np.random.default_rng(seed).integers(len(items))])


def append_items(dataset, chosen):
    """Shift every row with a nonzero choice left by one and put the choice last."""
    tokens = dataset.tokens.copy()
    rows = np.flatnonzero(chosen > 0)
    tokens[rows, :-1] = tokens[rows, 1:]
    tokens[rows, -1] = chosen[rows]
    return SequenceDataset(tokens, dataset.item_count, None, dataset.sequence_ids)


def _train_config(train_config, model_kind, iteration, seed):
    return replace(train_config, model_kind=model_kind,
                   seed=derive_seed(seed, f"train/{iteration}"))


def loop_step(state, train_config, model_kind, config):
    """One retrain, recommend, choose, append cycle. Returns the next state."""
    it = state.iteration
    ds = state.dataset
    tcfg = _train_config(train_config, model_kind, it, config.seed)
    params, _ = train(tcfg, ds)
    top, _ = recommend_topk(params, ds, config.K, state.histories)
    popularity = smooth_and_clip(estimate_temporal_popularity(ds), config.eps).static
    row = {"model": model_kind, "iteration": it + 1, "efd10": efd_at_k(top, popularity, config.K)}
    if config.track_metrics:
        split = loo_split(ds)
        mparams, _ = train(replace(tcfg, seed=derive_seed(tcfg.seed, "metrics")), split.train)
        report = evaluate_model(mparams, split, "standard", "popularity", ks=(10,),
                                seed=derive_seed(config.seed, f"eval/{it}"),
                                n_negatives=config.n_negatives, efd_k=config.K, eps=config.eps)
        row["ndcg10"] = report.mean("N@10")
        row["recall10"] = report.mean("R@10")
    else:
        row["ndcg10"] = float("nan")
        row["recall10"] = float("nan")
    children = np.random.SeedSequence(derive_seed(config.seed, f"choice/{it}")).spawn(ds.n_sequences)
    chosen = np.array([simulate_user_choice(top[r], children[r]) for r in range(ds.n_sequences)],
                      dtype=np.int64)
    histories = [h | {int(c)} if c else h for h, c in zip(state.histories, chosen)]
    skipped = state.skipped + [(it + 1, np.flatnonzero(chosen == 0).tolist())]
    return LoopState(it + 1, append_items(ds, chosen), state.history + [row], histories, skipped)


def run_feedback_loop(dataset, train_config=None, model_kind="cloze", config=None,
                      checkpoint_dir=None, resume=False):
    """Run ``config.iterations`` loop steps; returns the final :class:`LoopState`.

    With ``checkpoint_dir`` each finished iteration is written to
    ``iter_XXX/``; ``resume=True`` restarts from the latest one. A training
    failure raises :class:`TrainingError` whose ``state`` attribute holds the
    completed iterations.
    """
    config = LoopConfig() if config is None else config
    train_config = TrainConfig() if train_config is None else train_config
    if model_kind not in ("cloze", "ips", "itps"):
        raise ValueError("feedback loops support model_kind in {'cloze', 'ips', 'itps'}")
    ds = dataset.with_positional_timesteps()
    if config.pad_growth:
        ds = ds.pad_to(dataset.T + config.iterations)
    state = LoopState.initial(ds)
    if resume and checkpoint_dir:
        state = load_latest_checkpoint(checkpoint_dir, state)
    while state.iteration < config.iterations:
        try:
            state = loop_step(state, train_config, model_kind, config)
        except TrainingError as exc:
            exc.state = state
            raise
        if checkpoint_dir:
            save_checkpoint(checkpoint_dir, state)
    return state


def save_checkpoint(directory, state):
    path = os.path.join(directory, f"iter_{state.iteration:03d}")
    os.makedirs(path, exist_ok=True)
    state.dataset.to_csv(os.path.join(path, "dataset.csv"))
    meta = {
        "iteration": state.iteration,
        "T": state.dataset.T,
        "item_count": state.dataset.item_count,
        "n_sequences": state.dataset.n_sequences,
        "sequence_ids": state.dataset.sequence_ids.tolist(),
        "history": state.history,
        "histories": [sorted(h) for h in state.histories],
        "skipped": state.skipped,
    }
    with open(os.path.join(path, "state.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_latest_checkpoint(directory, initial):
    """Latest saved state under ``directory``, or ``initial`` if there is none."""
    if not os.path.isdir(directory):
        return initial
    done = sorted(d for d in os.listdir(directory) if d.startswith("iter_"))
    if not done:
        return initial
    path = os.path.join(directory, done[-1])
    with open(os.path.join(path, "state.json")) as fh:
        meta = json.load(fh)
    loaded = SequenceDataset.from_csv(os.path.join(path, "dataset.csv"), meta["T"], meta["item_count"])
    # rows that lost every item would vanish from the csv; rebuild by sequence id
    tokens = np.zeros((meta["n_sequences"], meta["T"]), dtype=np.int64)
    pos = {int(s): r for r, s in enumerate(loaded.sequence_ids)}
    for r, sid in enumerate(meta["sequence_ids"]):
        if sid in pos:
            tokens[r] = loaded.tokens[pos[sid]]
    ds = SequenceDataset(tokens, meta["item_count"], None, np.array(meta["sequence_ids"]))
    skipped = [(int(i), list(rows)) for i, rows in meta["skipped"]]
    return LoopState(meta["iteration"], ds, meta["history"], [set(h) for h in meta["histories"]], skipped)


def write_history(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "iteration", "efd10", "ndcg10", "recall10"])
        for r in rows:
            w.writerow([r["model"], r["iteration"], repr(r["efd10"]), repr(r["ndcg10"]), repr(r["recall10"])])
