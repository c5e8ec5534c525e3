"""Command-line entry point.

Subcommands: train, eval, record-dataset, train-percep, gait-trace,
export-metrics, serve. Exit codes: 0 success, 2 configuration error,
3 runtime fault.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ImportError:
    import tomli as tomllib

from . import evaluate, nets, perception, trainer
from .config import ConfigError, RunConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

BUILTIN_SCENARIOS = {
    "flat05": evaluate.EvalScenario("flat05", "flat", 0.0, vx=0.5),
    **{s.name: s for s in evaluate.FIG6_GRID},
}


def _load_config(path):
    return RunConfig.load(path) if path else RunConfig.default()


def _load_scenario(spec: str, defaults) -> evaluate.EvalScenario:
    """Builtin scenario name or TOML path; `defaults` (the [eval] config
    section) fills in whatever the scenario itself does not pin down."""
    if spec in BUILTIN_SCENARIOS:
        doc = dataclasses.asdict(BUILTIN_SCENARIOS[spec])
        doc.update({k: defaults[k] for k in ("trials", "distance",
                                             "max_time")})
    else:
        with open(spec, "rb") as fh:
            doc = tomllib.load(fh)
        allowed = {"name", "kind", "param", "vx", "trials", "distance",
                   "max_time"}
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        if "kind" not in doc:
            raise ConfigError("scenario needs a terrain kind")
        doc.setdefault("name", os.path.splitext(os.path.basename(spec))[0])
        for key in ("trials", "distance", "max_time"):
            doc.setdefault(key, defaults[key])
    try:
        return evaluate.EvalScenario(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _load_policy_ckpt(path, run_config_hash=None):
    """Load a policy checkpoint; refuse on a config-hash mismatch with the
    run snapshot stored next to it."""
    snap_path = os.path.join(os.path.dirname(path) or ".", "run_config.json")
    if run_config_hash is not None and os.path.exists(snap_path):
        with open(snap_path) as fh:
            stored = json.load(fh).get("hash")
        if stored != run_config_hash:
            raise ConfigError(
                f"checkpoint was trained with config hash {stored}, "
                f"got {run_config_hash}")
    return trainer.load_policy(path)


def _load_recon(path):
    if path is None:
        return None
    rng = np.random.default_rng(0)
    net = perception.ReconNet(rng)
    nets.load_checkpoint(path, net.params(), net.arch_description())
    return net


def _parse_commands(spec: str):
    """'0:0.3,10:0.8' -> [(0.0, 0.3), (10.0, 0.8)]"""
    steps = []
    for part in spec.split(","):
        t, _, v = part.partition(":")
        steps.append((float(t), float(v)))
    return sorted(steps)


def cmd_train(args):
    rc = _load_config(args.config)
    mode = args.mode or rc["run"]["mode"]
    seed = args.seed if args.seed is not None else rc["run"]["seed"]
    out = args.out or rc["run"]["out_dir"]
    if mode not in trainer.MODES:
        raise ConfigError(f"unknown mode {mode!r} "
                          f"(expected one of {trainer.MODES})")
    os.makedirs(out, exist_ok=True)
    rc.snapshot(os.path.join(out, "run_config.json"))
    trainer.train(rc.ppo(), mode, seed, out, noise=rc.noise(),
                  reward_cfg=rc.reward_config(),
                  log=args.log_every)
    if os.path.exists(os.path.join(out, "ABORTED")):
        print("training aborted on non-finite loss; "
              "last good checkpoint retained", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_eval(args):
    rc = _load_config(args.config)
    scenario = _load_scenario(args.scenario, rc["eval"])
    if args.trials:
        try:
            scenario = dataclasses.replace(scenario, trials=args.trials)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    nets_ = _load_policy_ckpt(args.ckpt,
                              rc.hash if args.config else None)
    recon = _load_recon(args.percep)
    report = evaluate.success_ratio(nets_, recon, scenario, args.seed,
                                    noise=rc.noise())
    out = report.to_dict()
    out["config_hash"] = rc.hash
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_record_dataset(args):
    rc = _load_config(args.config)
    sect = rc["perception"]
    data = perception.record_dataset(
        n_episodes=args.episodes or sect["dataset_episodes"],
        frames_per_episode=sect["frames_per_episode"],
        seed=args.seed if args.seed is not None else sect["dataset_seed"],
        noise=rc.noise())
    perception.save_dataset(args.out, data["raw"], data["mask"],
                            data["gt"], data["edge"],
                            data["frames_per_episode"])
    print(json.dumps({"frames": int(data["raw"].shape[0]),
                      "config_hash": rc.hash, "path": args.out}))
    return EXIT_OK


def cmd_train_percep(args):
    rc = _load_config(args.config)
    sect = rc["perception"]
    ablation = args.ablation or sect["ablation"]
    if ablation not in perception.ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r} "
                          f"(expected one of {perception.ABLATIONS})")
    data = perception.load_dataset(args.dataset)
    net = perception.ReconNet(np.random.default_rng(args.seed))
    report = perception.train_recon(
        net, data, epochs=args.epochs or sect["epochs"], seed=args.seed,
        ablation=ablation, lr=sect["lr"], batch_size=sect["batch_size"])
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    nets.save_checkpoint(args.out, net.params(), net.arch_description())
    report["config_hash"] = rc.hash
    with open(args.out + ".report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    print(json.dumps({k: report[k] for k in ("mae_cm", "bce", "dice")}))
    return EXIT_OK


def cmd_gait_trace(args):
    rc = _load_config(args.config)
    nets_ = _load_policy_ckpt(args.ckpt,
                              rc.hash if args.config else None)
    recon = _load_recon(args.percep)
    rows = evaluate.gait_trace(
        nets_, recon, _parse_commands(args.commands), args.duration,
        args.seed, noise=rc.noise(), no_gait=args.no_gait)
    evaluate.write_trace_csv(rows, args.out)
    print(json.dumps({"rows": len(rows), "path": args.out,
                      "config_hash": rc.hash}))
    return EXIT_OK


def cmd_export_metrics(args):
    path = os.path.join(args.run, "metrics.jsonl")
    records = [json.loads(line) for line in open(path)]
    if not records:
        raise ConfigError(f"no metrics in {path}")
    fields = ["iter", "lambda", "mean_reward", "terrain_level_mean",
              "loss_pi", "loss_v", "loss_rec", "loss_mirror", "kl"]
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(records)
    print(json.dumps({"rows": len(records), "path": args.out}))
    return EXIT_OK


def cmd_serve(args):
    from . import serve as serve_mod
    rc = _load_config(args.config)
    nets_ = _load_policy_ckpt(args.ckpt,
                              rc.hash if args.config else None)
    recon = _load_recon(args.percep)
    serve_mod.run(nets_, recon, port=args.port or rc["serve"]["port"],
                  run_hash=rc.hash, seed=args.seed,
                  kind=rc["serve"]["terrain"], level=rc["serve"]["level"])
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="stridelab",
        description="planar biped locomotion: training, evaluation, serving")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="run a training mode")
    t.add_argument("--mode", choices=trainer.MODES)
    t.add_argument("--seed", type=int)
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--log-every", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="success-ratio evaluation")
    e.add_argument("--scenario", required=True,
                   help="builtin name or scenario TOML path")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--percep")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--trials", type=int)
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("record-dataset", help="scripted perception dataset")
    r.add_argument("--out", required=True)
    r.add_argument("--episodes", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--config")
    r.set_defaults(func=cmd_record_dataset)

    tp = sub.add_parser("train-percep", help="train the reconstruction net")
    tp.add_argument("--dataset", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--ablation")
    tp.add_argument("--epochs", type=int)
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--config")
    tp.set_defaults(func=cmd_train_percep)

    g = sub.add_parser("gait-trace", help="export a 50 Hz gait trace CSV")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--percep")
    g.add_argument("--out", required=True)
    g.add_argument("--commands", default="0:0.3,10:0.8",
                   help="schedule 't:vx,t:vx,...'")
    g.add_argument("--duration", type=float, default=20.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-gait", action="store_true")
    g.add_argument("--config")
    g.set_defaults(func=cmd_gait_trace)

    m = sub.add_parser("export-metrics", help="metrics JSONL -> CSV")
    m.add_argument("--run", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_export_metrics)

    s = sub.add_parser("serve", help="WebSocket teleop bridge")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--percep")
    s.add_argument("--port", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:      # argparse already printed the reason
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:                     # noqa: BLE001
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
