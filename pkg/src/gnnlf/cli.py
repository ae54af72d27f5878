"""Command-line interface: ``gnnlf {train,eval,predict,verify}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_run_config
from .data import Dataset, ExtXYZError, format_frame, load_extxyz, split_dataset
from .geometry import MoleculeConf
from .model import GNNLF, UnknownSpeciesError
from .training import NonFiniteLossError, evaluate_mae, predict_parallel, time_inference, train
from .verify import SUITES, default_model, run_suites

log = logging.getLogger("gnnlf")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3

# command-line flag -> "section.key"
OVERRIDES = {
    "seed": "train.seed",
    "workers": "run.workers",
    "cutoff": "model.cutoff",
    "layers": "model.layers",
    "hidden": "model.hidden",
    "use_d2": "model.use_d2",
    "share_filters": "model.share_filters",
    "schnet_mode": "model.schnet_mode",
    "global_frame": "model.global_frame_mode",
    "target": "model.target",
    "max_epochs": "train.max_epochs",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "patience": "train.patience",
    "force_weight": "train.force_weight",
    "n_train": "run.n_train",
    "n_val": "run.n_val",
    "split_seed": "run.split_seed",
    "long_run": "run.long_run",
    "data": "paths.data",
    "checkpoint": "paths.checkpoint",
    "output_dir": "paths.output_dir",
    "input": "paths.input",
    "output": "paths.output",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [model], [train], [run] and [paths] sections")
    common.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="processes for evaluation; 1 is bitwise reproducible")
    common.add_argument("--cutoff", type=float, help="neighbor cutoff in Å, within [4, 12]")
    common.add_argument("--layers", type=int)
    common.add_argument("--hidden", type=int)
    common.add_argument("--use-d2", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--share-filters", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--schnet-mode", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--global-frame", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--checkpoint")
    common.add_argument("--output-dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gnnlf", description="Local-frame GNN potentials.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="fit a model to an extended-XYZ dataset")
    p.add_argument("--data")
    p.add_argument("--target", choices=["energy", "dipole", "r2"])
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--force-weight", type=float)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--long-run", action="store_true", default=None,
                   help="full protocol: 950/50 split, 6000 epochs, patience 500")

    p = sub.add_parser("eval", parents=[common], help="MAE and inference time on a dataset")
    p.add_argument("--data")
    p.add_argument("--output", help="metrics JSON file (default: <output-dir>/metrics.json)")

    p = sub.add_parser("predict", parents=[common], help="write predicted energies and forces")
    p.add_argument("--input")
    p.add_argument("--output")

    p = sub.add_parser("verify", parents=[common], help="run the symmetry and oracle suites")
    p.add_argument("--suite", action="append", choices=list(SUITES),
                   help="run only this suite (repeatable); default all")
    p.add_argument("--output", help="JSON report file")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for flag, dotted in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[dotted] = value
    cfg = load_run_config(args.config, overrides)
    if cfg.run["long_run"]:
        for key, value in {"max_epochs": 6000, "patience": 500, "lr": 1e-3, "batch_size": 16}.items():
            if cfg.sources[f"train.{key}"] == "default":
                setattr(cfg.train, key, value)
        for key, value in {"n_train": 950, "n_val": 50}.items():
            if cfg.sources[f"run.{key}"] == "default":
                cfg.run[key] = value
    return cfg


def _require_file(cfg: RunConfig, key: str) -> str:
    path = cfg.paths[key]
    if not path:
        raise ConfigError(f"paths.{key}: required but not set")
    if not os.path.isfile(path):
        raise ConfigError(f"paths.{key}: file {path!r} does not exist")
    return path


def _output_dir(cfg: RunConfig) -> str:
    out = cfg.paths["output_dir"] or "."
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"paths.output_dir: cannot create {out!r}: {exc}") from None
    return out


def _load_model(cfg: RunConfig) -> GNNLF:
    return GNNLF.load(_require_file(cfg, "checkpoint"))


def _check_species(model: GNNLF, ds: Dataset) -> None:
    unseen = sorted(set(ds.species()) - set(model.config.species))
    if unseen:
        raise UnknownSpeciesError(f"species {unseen} were not seen in training (model knows {list(model.config.species)})")


# ----------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    data = _require_file(cfg, "data")
    out = _output_dir(cfg)
    ds = load_extxyz(data, target=cfg.model.target)
    if ds.target is None:
        raise ConfigError(f"paths.data: {data!r} has no {cfg.model.target} targets")
    if cfg.sources["model.species"] == "default":
        cfg.model.species = tuple(ds.species())
    model_cfg = cfg.model
    n_train, n_val = cfg.run["n_train"], cfg.run["n_val"]
    if n_train == 0 and n_val == 0:
        n_val = max(1, len(ds) // 10)
        n_train = len(ds) - n_val
    train_ds, val_ds, test_ds = split_dataset(ds, (n_train, n_val), seed=cfg.run["split_seed"])
    model = GNNLF(model_cfg, seed=cfg.train.seed)
    _check_species(model, ds)
    log.info("training on %d, validating on %d conformations", len(train_ds), len(val_ds))

    history_path = os.path.join(out, "history.jsonl")
    ckpt_path = cfg.paths["checkpoint"] or os.path.join(out, "model.npz")
    with open(history_path, "w", encoding="utf-8") as fh:
        def write_row(row):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()

        try:
            result = train(model, train_ds, val_ds, cfg.train, callback=write_row)
        except NonFiniteLossError as exc:
            exc.model.save(ckpt_path)
            log.error("%s; last good checkpoint written to %s", exc, ckpt_path)
            return EXIT_RUNTIME
    result.model.save(ckpt_path)
    best = result.history[result.best_epoch - 1] if result.best_epoch else result.history[0]
    summary = {
        "best_epoch": result.best_epoch,
        "best_val_score": result.best_score,
        "val_energy_mae": best.get("val_energy_mae"),
        "val_force_mae": best.get("val_force_mae"),
        "epochs_run": len(result.history),
        "stopped_early": result.stopped_early,
        "n_train": len(train_ds),
        "n_val": len(val_ds),
        "n_test": len(test_ds),
        **result.meta,
    }
    if cfg.run["long_run"] and len(test_ds):
        summary["test"] = evaluate_mae(result.model, test_ds, workers=cfg.run["workers"])
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    with open(os.path.join(out, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_ini())
    for key in ("best_epoch", "val_energy_mae", "val_force_mae", "epochs_run"):
        if summary[key] is not None:
            print(f"{key}: {summary[key]}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, output: str | None) -> int:
    model = _load_model(cfg)
    ds = load_extxyz(_require_file(cfg, "data"), target=model.config.target)
    if ds.target is None:
        raise ConfigError(f"paths.data: dataset has no {model.config.target} targets")
    _check_species(model, ds)
    metrics = evaluate_mae(model, ds, workers=cfg.run["workers"])
    sample = ds.confs[: min(len(ds), 32)]
    metrics["time_per_molecule_ms"] = time_inference(model, sample)
    for key, value in metrics.items():
        print(f"{key}: {value}")
    path = output or os.path.join(_output_dir(cfg), "metrics.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    return EXIT_OK


def cmd_predict(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    src = _require_file(cfg, "input")
    dst = cfg.paths["output"]
    if not dst:
        raise ConfigError("paths.output: required but not set")
    ds = load_extxyz(src, target="energy")
    if len(ds) == 0:
        raise ExtXYZError(f"{src}: no frames to predict")
    _check_species(model, ds)
    energy_task = model.config.target == "energy"
    values, forces = predict_parallel(model, ds.confs, forces=energy_task, workers=cfg.run["workers"])
    frames = []
    for k, conf in enumerate(ds.confs):
        if energy_task:
            out = MoleculeConf(conf.z, conf.r, float(values[k]), forces[k])
            frames.append(format_frame(out))
        else:
            out = MoleculeConf(conf.z, conf.r)
            frames.append(format_frame(out, {model.config.target: float(values[k])}))
    with open(dst, "w", encoding="ascii") as fh:
        fh.writelines(frames)
    print(f"wrote {len(frames)} frames to {dst}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, suites, output: str | None) -> int:
    if cfg.paths["checkpoint"]:
        model = _load_model(cfg)
    elif any(src != "default" for key, src in cfg.sources.items() if key.startswith("model.")):
        model = GNNLF(cfg.model, seed=cfg.train.seed)
    else:
        model = default_model(cfg.train.seed)
    report = run_suites(model, suites)
    for name, res in report["suites"].items():
        print(f"{'PASS' if res['passed'] else 'FAIL'} {name} ({res['seconds']:.2f} s)")
    text = json.dumps(report, indent=2, sort_keys=True, default=float)
    if output:
        with open(output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text)
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.dump_config:
            sys.stdout.write(cfg.to_ini())
            return EXIT_OK
        start = time.perf_counter()
        if args.command == "train":
            code = cmd_train(cfg)
        elif args.command == "eval":
            code = cmd_eval(cfg, args.output)
        elif args.command == "predict":
            code = cmd_predict(cfg)
        else:
            code = cmd_verify(cfg, args.suite, args.output)
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - start)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ExtXYZError, CheckpointError, UnknownSpeciesError, ValueError, OSError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
