"""Replicated model comparisons on semi-synthetic worlds.

A replicate trains every requested model kind on the same interaction draw
with the same training seed and evaluates it with the same negative-sampling
seed, so differences between kinds are paired. Different replicates use
different draws, so the spread covers sampling noise as well as training noise.
"""

from dataclasses import replace

from ._validation import derive_seed
from .data import SequenceDataset, ingest_tsv
from .evaluation import EvalReport, loo_split
from .synth import build_synthetic_dataset, generate_world, make_seed_log, sample_world_draw
from .trainer import evaluate_model, train


def seed_records(data_cfg):
    """Rating records from the configured source (a TSV log or the built-in generator)."""
    if data_cfg["source"] == "tsv":
        return ingest_tsv(data_cfg["path"])
    return make_seed_log(
        n_sequences=data_cfg["n_sequences"], n_items=data_cfg["n_items"], T=data_cfg["T"],
        d=data_cfg["d"], zipf=data_cfg["zipf"], quality=data_cfg["quality"],
        drift_width=data_cfg["drift_width"], seed=data_cfg["seed"],
    )


def build_world(records, world_config):
    world, _ = generate_world(records, world_config)
    return world


def draw_dataset(world, draw_seed):
    """Sample interactions from ``world`` and keep the interacted cells."""
    return build_synthetic_dataset(sample_world_draw(world, draw_seed))


def replicate_draws(world, draw_seed, replicates):
    """One dataset per replicate, drawn with seeds derived from ``draw_seed``."""
    return [draw_dataset(world, derive_seed(draw_seed, f"replicate/{r}")) for r in range(replicates)]


def compare_models(world, datasets, train_config, models, replicates=5, mode="unbiased",
                   sampler="uniform", ks=(5, 10), n_negatives=25, eval_seed=0):
    """Train and evaluate each model kind on ``replicates`` seeds.

    ``datasets`` is one dataset shared by all replicates or a sequence with
    one dataset per replicate. Returns ``{kind: EvalReport}`` aggregated over
    replicates.
    """
    if isinstance(datasets, SequenceDataset):
        datasets = [datasets] * replicates
    if len(datasets) != replicates:
        raise ValueError(f"got {len(datasets)} datasets for {replicates} replicates")
    per_kind = {k: [] for k in models}
    for r in range(replicates):
        split = loo_split(datasets[r])
        seed = derive_seed(train_config.seed, f"replicate/{r}")
        ev_seed = derive_seed(eval_seed, f"replicate/{r}")
        for kind in models:
            cfg = replace(train_config, model_kind=kind, seed=seed)
            params, _ = train(cfg, split.train, world)
            report = evaluate_model(params, split, mode, sampler, ks, ev_seed, world, n_negatives)
            per_kind[kind].append(report.per_replicate[0])
    return {k: EvalReport.aggregate(k, v) for k, v in per_kind.items()}


def bias_sweep(world, ps, draw_seed, train_config, models, **kwargs):
    """:func:`compare_models` at each bias power with fresh draws per replicate.

    The same draw seeds are reused for every ``p``.
    """
    replicates = kwargs.pop("replicates", 5)
    out = {}
    for p in ps:
        wp = world.with_bias_power(p)
        out[p] = compare_models(wp, replicate_draws(wp, draw_seed, replicates), train_config, models,
                                replicates=replicates, **kwargs)
    return out
