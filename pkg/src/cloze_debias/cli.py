"""Command-line entry point: ``cloze-debias {synth,train,eval,loop,verify,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

import argparse
import json
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from .config import ConfigError
from .data import dataset_summary
from .evaluation import EvalReport, loo_split, write_reports
from .experiments import bias_sweep, build_world, draw_dataset, seed_records
from .gradcheck import run_all
from .loop import run_feedback_loop, write_history
from .synth import SyntheticWorld, load_world, save_world
from .trainer import ClozeRecommender, save_run, train
from .verify import check_propositions, two_step_world, write_report

EXIT_CONFIG = 2
EXIT_RUNTIME = 3
GRADCHECK_LIMITS = {"encoder": 1e-4, "tf_mse": 1e-6, "tf_bce": 1e-6, "losses": 1e-6}


def _parse_ps(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--p expects comma-separated numbers, got {text!r}") from None


def _p_label(p):
    return f"{p:g}"


def _world(cfg, p=None, world_dir=None):
    if world_dir:
        world = load_world(world_dir)
        return world if p is None else world.with_bias_power(p)
    ps = cfgmod._ps(cfg["synth"]["p"])
    p = ps[0] if p is None else p
    return build_world(seed_records(cfg["data"]), cfgmod.world_config(cfg, p))


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth(cfg, args, out):
    records = seed_records(cfg["data"])
    base = build_world(records, cfgmod.world_config(cfg, 1.0))
    summaries = {}
    for p in cfgmod._ps(cfg["synth"]["p"]):
        world = base.with_bias_power(float(p))
        wdir = os.path.join(out, f"world_p{_p_label(p)}")
        save_world(world, wdir)
        ds = draw_dataset(world, cfg["synth"]["draw_seed"])
        ds.to_csv(os.path.join(wdir, "dataset.csv"))
        summary = dataset_summary(ds)
        summary["dropped_sequences"] = int(world.dims[0] - ds.n_sequences)
        summaries[_p_label(p)] = summary
        _write_json(summary, os.path.join(wdir, "summary.json"))
        print(f"p={_p_label(p)}: {summary['sequences']} sequences, {summary['items']} items, "
              f"{summary['interactions']} interactions, sparsity {summary['sparsity']:.4f} -> {wdir}")
    return 0


def cmd_train(cfg, args, out):
    world = _world(cfg, world_dir=args.world)
    ds = draw_dataset(world, cfg["synth"]["draw_seed"])
    split = loo_split(ds)
    kind = cfg["train"]["model_kind"]
    tcfg = cfgmod.train_config(cfg)
    params, curve = train(tcfg, split.train, world)
    rdir = os.path.join(out, f"train_{kind}")
    save_run(rdir, tcfg, params, curve, split.train)
    print(f"{kind}: loss {curve[0]:.6f} -> {curve[-1]:.6f} over {len(curve)} epochs -> {rdir}")
    return 0


def cmd_eval(cfg, args, out):
    ev = cfg["eval"]
    tag = f"{ev['mode']}_{ev['sampler']}"
    if args.checkpoint:
        world = _world(cfg, world_dir=args.world)
        split = loo_split(draw_dataset(world, cfg["synth"]["draw_seed"]))
        est = ClozeRecommender.from_checkpoint(args.checkpoint, model_kind=cfg["train"]["model_kind"])
        reports = [est.evaluate(split, mode=ev["mode"], sampler=ev["sampler"], ks=tuple(ev["ks"]),
                                seed=ev["seed"], world=world, n_negatives=ev["n_negatives"])]
    else:
        tcfg = cfgmod.train_config(cfg)
        kwargs = dict(replicates=ev["replicates"], mode=ev["mode"], sampler=ev["sampler"],
                      ks=tuple(ev["ks"]), n_negatives=ev["n_negatives"], eval_seed=ev["seed"])
        ps = cfgmod._ps(cfg["synth"]["p"])
        base = _world(cfg, 1.0, args.world)
        sweep = bias_sweep(base, ps, cfg["synth"]["draw_seed"], tcfg, ev["models"], **kwargs)
        reports = []
        with open(os.path.join(out, f"sweep_{tag}.csv"), "w") as fh:
            fh.write("p,model,metric,mean,std,replicates\n")
            for p, by_kind in sweep.items():
                for kind, rep in by_kind.items():
                    for row in rep.csv_rows():
                        fh.write(",".join([_p_label(p)] + [str(v) for v in row]) + "\n")
                    reports.append(EvalReport(f"{kind}@p{_p_label(p)}", rep.metrics, rep.replicates,
                                              rep.fingerprint, rep.per_replicate))
    write_reports(reports, os.path.join(out, f"eval_{tag}.csv"), os.path.join(out, f"eval_{tag}.json"))
    for r in reports:
        print(r.model, " ".join(f"{k}={m:.4f}" for k, (m, _) in sorted(r.metrics.items())))
    return 0


def cmd_loop(cfg, args, out):
    world = _world(cfg, world_dir=args.world)
    ds = draw_dataset(world, cfg["synth"]["draw_seed"])
    lcfg = cfgmod.loop_config(cfg)
    tcfg = cfgmod.train_config(cfg, propensity_source="estimated")
    rows = []
    for kind in cfg["loop"]["models"]:
        state = run_feedback_loop(ds, tcfg, kind, lcfg, checkpoint_dir=os.path.join(out, f"loop_{kind}"),
                                  resume=args.resume)
        rows.extend(state.history)
        efd = [r["efd10"] for r in state.history]
        trend = "up" if efd and efd[-1] > efd[0] else "down" if efd and efd[-1] < efd[0] else "flat"
        print(f"{kind}: EFD@10 " + " ".join(f"{v:.4f}" for v in efd) + f" (trend {trend})")
    write_history(rows, os.path.join(out, "loop_history.csv"))
    return 0


def cmd_verify(cfg, args, out):
    v = cfg["verify"]
    rng = np.random.default_rng(v["seed"])
    S, n_items, T = v["dims"]
    world = SyntheticWorld(rng.uniform(0.05, 1.0, (S, n_items, T)), rng.uniform(0.1, 1.0, (S, n_items, T)))
    logits = rng.standard_normal((S, T, n_items))
    records = check_propositions(world, logits, v["n_draws"], v["seed"])
    two = two_step_world()
    two_records = check_propositions(two, rng.standard_normal((1, 2, 2)), v["n_draws"], v["seed"],
                                     choice=np.ones((1, 2), dtype=np.int64))
    for r in two_records:
        r["proposition"] = "two_step/" + r["proposition"]
    write_report(records + two_records, os.path.join(out, "verification.json"))
    ok = True
    for r in records + two_records:
        print(f"{r['proposition']}: {'pass' if r['pass'] else 'FAIL'}")
        ok &= r["pass"]
    return 0 if ok else EXIT_RUNTIME


def cmd_gradcheck(cfg, args, out):
    errors = run_all(seed=cfg["seed"])
    _write_json(errors, os.path.join(out, "gradcheck.json"))
    ok = True
    for name, err in errors.items():
        passed = err <= GRADCHECK_LIMITS[name]
        ok &= passed
        print(f"{name}: max relative error {err:.3e} (limit {GRADCHECK_LIMITS[name]:.0e}) "
              f"{'pass' if passed else 'FAIL'}")
    return 0 if ok else EXIT_RUNTIME


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "loop": cmd_loop,
    "verify": cmd_verify,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    common.add_argument("--out", help="output directory (default: $CLOZE_DEBIAS_OUT or ./runs)")
    parser = argparse.ArgumentParser(prog="cloze-debias", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="generate semi-synthetic worlds")
    p.add_argument("--p", help="comma-separated bias powers, e.g. 1,2,3,4")
    for name in ("train", "eval", "loop"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--world", help="load a saved world directory instead of generating one")
        p.add_argument("--p", help="bias power(s) overriding synth.p")
    sub.choices["train"].add_argument("--model", choices=("cloze", "ips", "itps", "oracle"))
    sub.choices["eval"].add_argument("--model", choices=("cloze", "ips", "itps", "oracle"))
    sub.choices["eval"].add_argument("--mode", choices=("unbiased", "standard"))
    sub.choices["eval"].add_argument("--sampler", choices=("uniform", "popularity"))
    sub.choices["eval"].add_argument("--checkpoint", help="evaluate a saved checkpoint directory")
    sub.choices["loop"].add_argument("--resume", action="store_true", help="continue from saved iterations")
    sub.add_parser("verify", parents=[common], help="check the loss bias claims numerically")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        raw = {}
        if args.config:
            with open(args.config) as fh:
                try:
                    raw = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        # command-line overrides become part of the resolved config
        if getattr(args, "p", None):
            raw = dict(raw, synth=dict(raw.get("synth", {}), p=_parse_ps(args.p)))
        if getattr(args, "model", None):
            raw = dict(raw, train=dict(raw.get("train", {}), model_kind=args.model))
        for key in ("mode", "sampler"):
            if getattr(args, key, None):
                raw = dict(raw, eval=dict(raw.get("eval", {}), **{key: getattr(args, key)}))
        cfg = cfgmod.resolve(raw, args.seed)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or os.environ.get("CLOZE_DEBIAS_OUT") or "runs"
    try:
        os.makedirs(out, exist_ok=True)
        cfgmod.dump(cfg, os.path.join(out, "config.json"))
        with threadpool_limits(args.threads):
            return COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to one exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
