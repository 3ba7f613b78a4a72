"""Command-line entry point: ``dlolab <command> [options]``.

Every command writes its artifacts plus ``run_manifest.json`` under ``--out``.
Failures print one JSON line ``{"error": <kind>, "message": ...}`` to stderr
and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from . import dataset as ds
from . import rollout as ro
from .config import load_config
from .errors import ConfigError, DloLabError
from .rssm import load_checkpoint, read_checkpoint_header, train
from .simulator import generate_dataset

log = logging.getLogger("dlolab")

RUN_MANIFEST = "run_manifest.json"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _finish(args, cfg, out: Path, outputs: dict, extra=None) -> dict:
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "version": __version__,
        "config": cfg.to_dict(),
        "outputs": outputs,
    }
    if extra:
        manifest.update(extra)
    _write_json(out / RUN_MANIFEST, manifest)
    print(json.dumps({"status": "ok", "command": args.command, **outputs}, sort_keys=True))
    return manifest


def _config(args):
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or ())


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    cfg = _config(args)
    data = cfg.data
    if args.n is not None:
        data = replace(data, n_trajectories=args.n)
    if args.seed is not None:
        data = replace(data, base_seed=args.seed)
    cfg = replace(cfg, data=data)
    out = ro.ensure_dir(args.out)
    trajs = generate_dataset(cfg.sim, data.n_trajectories, data.base_seed, args.workers)
    manifest = ds.DatasetManifest(
        L=cfg.sim.L, link_length=cfg.sim.link_length, T=cfg.sim.horizon, n_trajectories=data.n_trajectories,
        base_seed=data.base_seed, sim_config=cfg.sim.to_dict(),
    )
    manifest = ds.split(manifest, data.split, data.split_seed)
    ds.save_dataset(trajs, manifest, out)
    _finish(args, cfg, out, {"dataset": str(out), "n_transitions": manifest.n_transitions})


def cmd_train(args):
    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    data = ds.SequenceDataset.load(args.data)
    out = ro.ensure_dir(args.out)
    result = train(data, cfg.model, cfg.seed, out)
    from .plotting import plot_training

    plot_training(result.history, out / "train_loss.png")
    first, last = result.history[0]["L_total"], result.history[-1]["L_total"]
    _finish(
        args, cfg, out,
        {"checkpoint": result.checkpoint, "log": str(out / "train_log.csv"), "figure": str(out / "train_loss.png")},
        {
            "data": str(args.data),
            "best_epoch": result.best_epoch,
            "best_val_L_total": result.best_val,
            "epochs_run": result.epochs_run,
            "stopped_early": result.stopped_early,
            "first_L_total": first,
            "final_L_total": last,
        },
    )


def _predictor(args, L):
    if args.baseline == "persistence":
        return ro.PersistencePredictor()
    if args.baseline == "oracle":
        return ro.OraclePredictor()
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required unless --baseline is given")
    return ro.ModelPredictor(load_checkpoint(args.checkpoint, expect_L=L))


def _protocol(args, cfg):
    e = cfg.eval
    return replace(
        e,
        warmup=e.warmup if args.warmup is None else args.warmup,
        horizon=e.horizon if args.horizon is None else args.horizon,
        rollouts=e.rollouts if args.rollouts is None else args.rollouts,
        seed=e.seed if args.seed is None else args.seed,
    )


def _predictors(args, data):
    main = _predictor(args, data.L)
    preds = [main]
    if args.with_baseline and main.name != "persistence":
        preds.append(ro.PersistencePredictor())
    return preds


def cmd_eval_rmse(args):
    cfg = _config(args)
    e = _protocol(args, cfg)
    cfg = replace(cfg, eval=e)
    data = ds.SequenceDataset.load(args.data)
    out = ro.ensure_dir(args.out)
    outputs, curves, summary = {}, {}, {}
    for k, pred in enumerate(_predictors(args, data)):
        rep = ro.evaluate(pred, data, e.rollouts, e.warmup, e.horizon, e.seed)
        name = "rmse.csv" if k == 0 else f"rmse_{pred.name}.csv"
        ro.write_rmse_csv(rep, out / name)
        outputs[pred.name] = str(out / name)
        curves[pred.name] = (rep.steps, rep.rmse_mean_mm, rep.rmse_std_mm)
        summary[pred.name] = {"max_link_error_mm": rep.max_link_error, "final_rmse_mm": float(rep.rmse_mean_mm[-1])}
    from .plotting import plot_rmse

    plot_rmse(curves, out / "rmse.png")
    outputs["figure"] = str(out / "rmse.png")
    _finish(args, cfg, out, outputs, {"data": str(args.data), "checkpoint": args.checkpoint, "summary": summary})


def cmd_eval_topology(args):
    cfg = _config(args)
    e = _protocol(args, cfg)
    if args.eps is not None:
        e = replace(e, topology_eps=args.eps)
    if args.min_crossings is not None:
        e = replace(e, min_crossings=args.min_crossings)
    cfg = replace(cfg, eval=e)
    data = ds.SequenceDataset.load(args.data)
    out = ro.ensure_dir(args.out)
    outputs, curves, kept = {}, {}, {}
    for k, pred in enumerate(_predictors(args, data)):
        win, positions = ro.run_rollouts(pred, data, e.rollouts, e.warmup, e.horizon, e.seed)
        agg, n = ro.topology_curve(win, positions, e.topology_eps, e.min_crossings)
        name = "topology.csv" if k == 0 else f"topology_{pred.name}.csv"
        ro.write_topology_csv(agg, out / name)
        outputs[pred.name] = str(out / name)
        curves[pred.name] = agg
        kept[pred.name] = n
    from .plotting import plot_topology

    plot_topology(curves, out / "topology.png")
    outputs["figure"] = str(out / "topology.png")
    _finish(args, cfg, out, outputs, {"data": str(args.data), "checkpoint": args.checkpoint, "rollouts_scored": kept})


def cmd_bench(args):
    cfg = _config(args)
    b = cfg.bench
    b = replace(b, steps=b.steps if args.steps is None else args.steps,
                repeats=b.repeats if args.repeats is None else args.repeats)
    cfg = replace(cfg, bench=b)
    model = load_checkpoint(args.checkpoint)
    out = ro.ensure_dir(args.out)
    stats = [ro.bench_latency(model, b.steps, b.repeats)]
    sim_cfg = replace(cfg.sim, L=model.L, link_length=model.link_length)
    if not args.no_simulator:
        stats.append(ro.bench_simulator(sim_cfg, b.sim_steps, b.sim_repeats))
    ro.write_latency_csv(stats, out / "latency.csv")
    from .plotting import plot_latency

    plot_latency(stats, out / "latency.png")
    extra = {"checkpoint": args.checkpoint, "stats": [asdict(s) for s in stats]}
    if len(stats) == 2:
        extra["latent_over_simulator"] = stats[0].mean_ms / stats[1].mean_ms
    _finish(args, cfg, out, {"latency": str(out / "latency.csv"), "figure": str(out / "latency.png")}, extra)


def cmd_inspect(args):
    if (args.data is None) == (args.checkpoint is None):
        raise ConfigError("inspect needs exactly one of --data or --checkpoint")
    if args.data is not None:
        m = ds.load_manifest(args.data)
        info = {
            "kind": "dataset",
            "manifest": asdict(m),
            "n_transitions": m.n_transitions,
            "n_states": m.n_states,
            "state_dim": 3 + 4 * (m.L - 1),
            "split_sizes": {k: len(v) for k, v in m.split.items()},
        }
    else:
        model = load_checkpoint(args.checkpoint)
        header = read_checkpoint_header(args.checkpoint)
        info = {
            "kind": "checkpoint",
            "L": model.L,
            "link_length": model.link_length,
            "hyperparams": header["hyperparams"],
            "n_params": model.n_params,
        }
    print(json.dumps(info, indent=2, sort_keys=True))


# ------------------------------------------------------------------ parser


def _add_config(p):
    p.add_argument("--config", help="JSON experiment config or a previous run manifest")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. model.lr=3e-4")


def _add_eval(p):
    _add_config(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--warmup", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--rollouts", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", choices=["persistence", "oracle"], help="evaluate a reference predictor instead")
    p.add_argument("--with-baseline", action="store_true", help="also evaluate the persistence baseline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlolab", description="Rope world-model experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate and save a trajectory dataset")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of trajectories")
    p.add_argument("--seed", type=int, help="base seed; trajectory k uses seed + k")
    p.add_argument("--workers", type=int, help="worker processes (default $DLOLAB_WORKERS or 1)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the world model")
    _add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-rmse", help="open-loop RMSE curves")
    _add_eval(p)
    p.set_defaults(func=cmd_eval_rmse)

    p = sub.add_parser("eval-topology", help="Gauss-code match curves")
    _add_eval(p)
    p.add_argument("--eps", type=float)
    p.add_argument("--min-crossings", type=int)
    p.set_defaults(func=cmd_eval_topology)

    p = sub.add_parser("bench", help="latent step latency vs simulator step")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--no-simulator", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print dataset or checkpoint metadata as JSON")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (DloLabError, OSError, ValueError) as exc:
        kind = type(exc).__name__
        print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
