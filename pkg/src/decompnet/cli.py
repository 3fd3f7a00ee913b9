"""``decompnet`` command-line interface.

Exit status: 0 on success, 1 on runtime or numerical failure, 2 on usage or
configuration errors.
"""
import argparse
import contextlib
import fcntl
import json
import os
import sys

import numpy as np

from . import analysis, checkpoint
from .config import build_model, load_config
from .data import load_dataset, parse_source
from .errors import (
    ConfigError,
    DecompNetError,
    InvalidBudgetError,
    InvalidRankError,
    ParseError,
)
from .ranks import CRITERIA, Budget, assign, count_params_macs
from .reports import write_csv
from .training import PROBE_Z, evaluate, streams, train

USAGE_ERRORS = (ConfigError, InvalidBudgetError, InvalidRankError)
LOCK_NAME = ".decompnet.lock"

EVAL_COLUMNS = ["budget", "criterion", "d", "ranks", "params", "macs", "loss", "accuracy"]
PROP1_COLUMNS = ["layer", "rank", "mean_sq_error", "max_residual", "violations"]
PROP2_COLUMNS = ["sample", "kl", "bound", "slack"]
LIPSCHITZ_COLUMNS = ["layer", "omega", "omega_hat", "Omega", "Omega_hat", "samples"]


class UsageError(Exception):
    pass


@contextlib.contextmanager
def locked_dir(path):
    """Create ``path`` and hold an exclusive lock on it for the block."""
    os.makedirs(path, exist_ok=True)
    fh = open(os.path.join(path, LOCK_NAME), "w")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            raise DecompNetError(f"output directory {path} is in use by another process") from None
        yield path
    finally:
        fh.close()


def _thread_limit():
    raw = os.environ.get("DECOMPNET_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"DECOMPNET_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _emit(text):
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# --- train ---------------------------------------------------------------


def cmd_train(args):
    overrides = {"seed": args.seed, "out": args.out, "train.criterion": args.criterion}
    cfg = load_config(args.config, overrides)
    ds = load_dataset(cfg.dataset)
    stats = (ds.mean, ds.std)
    val = None if cfg.validation is None else load_dataset(cfg.validation, stats)
    meta = {
        "dataset": ds.source,
        "validation": None if val is None else val.source,
        "mean": np.asarray(ds.mean).tolist(),
        "std": np.asarray(ds.std).tolist(),
        "n_classes": ds.n_classes,
        # the output path is left out so reruns elsewhere give identical bytes
        "config": {k: v for k, v in cfg.to_dict().items() if k != "out"},
    }
    init_rng, _, _ = streams(cfg.seed)
    model = build_model(cfg.model, ds.input_shape, ds.n_classes, init_rng, meta)
    with locked_dir(cfg.out) as out:
        every = cfg.train.checkpoint_every

        def on_epoch(epoch, m):
            if every and epoch % every == 0 and epoch < cfg.train.epochs:
                os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
                checkpoint.save_model(m, os.path.join(out, "checkpoints", f"epoch_{epoch:05d}.dcnt"))

        model, log = train(model, ds, cfg.train, val, on_epoch)
        if model.has_batchnorm:
            from .network import recalibrate_bn

            recalibrate_bn(model, None, ds.x)
        checkpoint.save_model(model, os.path.join(out, "model.dcnt"))
        log.to_csv(os.path.join(out, "train_log.csv"))
    last = log.rows[-1]
    _emit(f"trained {cfg.train.epochs} epochs; final full loss {last['loss_full']:.6f}; wrote {out}/model.dcnt")
    return 0


# --- shared helpers for model commands ----------------------------------


def _load(path):
    if not os.path.exists(path):
        raise UsageError(f"model file not found: {path}")
    return checkpoint.load_model(path)


def _stats(model):
    meta = model.meta
    if "mean" not in meta:
        return None
    return np.asarray(meta["mean"]), np.asarray(meta["std"])


def _eval_data(model, args):
    """Dataset named by --dataset, else the recorded validation or training set."""
    if args.dataset:
        src = parse_source(args.dataset)
    else:
        src = model.meta.get("validation") or model.meta.get("dataset")
        if src is None:
            raise UsageError("checkpoint records no dataset; pass --dataset")
    return load_dataset(src, _stats(model))


def _calibration(model):
    if not model.has_batchnorm:
        return None
    src = model.meta.get("dataset")
    return None if src is None else load_dataset(src, _stats(model))


def _budget(text, default="z=1"):
    return Budget.parse(text if text else default)


def _out_csv(args, name, columns, rows):
    if args.out:
        with locked_dir(args.out) as out:
            write_csv(os.path.join(out, name), columns, rows)


# --- compress / eval / sweep --------------------------------------------


def cmd_compress(args):
    model = _load(args.model)
    ra = assign(model, args.criterion, _budget(args.budget))
    params, macs = count_params_macs(model, ra.ranks)
    full_p, full_m = count_params_macs(model, None)
    report = ra.to_dict()
    report.update(params=params, macs=macs, full_params=full_p, full_macs=full_m)
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.out:
        with locked_dir(args.out) as out:
            with open(os.path.join(out, "assignment.json"), "w") as fh:
                fh.write(text + "\n")
    _emit(text)
    return 0


def cmd_eval(args):
    model = _load(args.model)
    ds = _eval_data(model, args)
    ra = assign(model, args.criterion, _budget(args.budget))
    loss, acc = evaluate(model, ra.ranks, ds, _calibration(model))
    params, macs = count_params_macs(model, ra.ranks)
    row = {"budget": str(ra.budget), "criterion": ra.criterion, "d": ra.d, "ranks": list(ra.ranks),
           "params": params, "macs": macs, "loss": loss, "accuracy": acc}
    _out_csv(args, "eval.csv", EVAL_COLUMNS, [row])
    _emit(f"ranks {list(ra.ranks)}  params {params}  macs {macs}  loss {loss:.6f}  accuracy {acc:.4f}")
    return 0


def cmd_sweep(args):
    model = _load(args.model)
    ds = _eval_data(model, args)
    budgets = [Budget.parse(b) for b in (args.budget or [f"z={z:g}" for z in PROBE_Z])]
    rows = analysis.tradeoff_sweep(model, budgets, ds, args.criterion, _calibration(model))
    _out_csv(args, "tradeoff.csv", analysis.TRADEOFF_COLUMNS, rows)
    for row in rows:
        _emit(f"{row['budget']:>14}  {row['status']:<4}  ranks {row['ranks']}  accuracy {row['accuracy']}")
    return 0


# --- analyze -------------------------------------------------------------


def cmd_analyze(args):
    model = _load(args.model)
    ds = _eval_data(model, args)
    x = ds.x[: args.samples] if args.samples else ds.x
    if args.check == "prop1":
        rep = analysis.check_prop1(model, x)
        rows = [
            {"layer": c.layer, "rank": r, "mean_sq_error": e, "max_residual": c.max_residual,
             "violations": c.violations}
            for c in rep.curves for r, e in c.points
        ]
        _out_csv(args, "prop1.csv", PROP1_COLUMNS, rows)
        _emit(f"layers checked {len(rep.curves)}  skipped {rep.skipped}  "
              f"max residual {rep.max_residual:.3e}  violations {rep.violations}")
        return 0
    ra = assign(model, args.criterion, _budget(args.budget, "z=0.1"))
    if args.check == "prop2":
        rep = analysis.check_prop2(model, ra.ranks, x)
        rows = [{"sample": i, "kl": float(k), "bound": float(b), "slack": float(b - k)}
                for i, (k, b) in enumerate(zip(rep.kl, rep.bound))]
        _out_csv(args, "prop2.csv", PROP2_COLUMNS, rows)
        _emit(f"ranks {list(ra.ranks)}  samples {len(rows)}  violations {rep.violations}  "
              f"min slack {float(rep.slack.min()):.3e}")
        return 0
    rep = analysis.lipschitz_report(model, ra.ranks, x)
    _out_csv(args, "lipschitz.csv", LIPSCHITZ_COLUMNS, rep.rows())
    for row in rep.rows():
        _emit("  ".join(f"{k} {v}" for k, v in row.items()))
    return 0


# --- inspect -------------------------------------------------------------


def cmd_inspect(args):
    model = _load(args.model)
    params, macs = count_params_macs(model, None)
    info = {
        "input_shape": list(model.input_shape),
        "layers": [spec.to_dict() for spec in model.layers],
        "full_ranks": list(model.full_ranks),
        "params": params,
        "macs": macs,
        "bn_ranks": None if model.bn_ranks is None else list(model.bn_ranks),
        "dataset": model.meta.get("dataset"),
        "seed": model.meta.get("config", {}).get("seed"),
    }
    if args.spectra:
        info["spectra"] = [f.s.tolist() for f in model.layer_factors()]
    _emit(json.dumps(info, sort_keys=True, indent=2))
    return 0


# --- entry point ---------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="decompnet", description="Train and compress rank-adjustable networks.")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--criterion", choices=CRITERIA, help="rank criterion used while training")
    t.add_argument("--out", help="output directory (overrides the config)")
    t.set_defaults(func=cmd_train)

    def model_cmd(name, func, help_text, budget_many=False):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("model")
        s.add_argument("--criterion", choices=CRITERIA, default="sv")
        if budget_many:
            s.add_argument("--budget", action="append", help="repeatable; z=, params= or macs=")
        else:
            s.add_argument("--budget", help="z=, params= or macs=")
        s.add_argument("--out")
        s.set_defaults(func=func)
        return s

    model_cmd("compress", cmd_compress, "pick ranks for a budget")
    e = model_cmd("eval", cmd_eval, "evaluate at a budget")
    e.add_argument("--dataset", help="dataset source, e.g. two_moons:n=500,seed=2")
    s = model_cmd("sweep", cmd_sweep, "accuracy over a list of budgets", budget_many=True)
    s.add_argument("--dataset")
    a = model_cmd("analyze", cmd_analyze, "numerical checks of the error bounds")
    a.add_argument("check", choices=("prop1", "prop2", "lipschitz"))
    a.add_argument("--dataset")
    a.add_argument("--samples", type=int, default=256, help="probe samples (0 = all)")
    i = sub.add_parser("inspect", help="print a checkpoint summary")
    i.add_argument("model")
    i.add_argument("--spectra", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"decompnet: error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, DecompNetError, OSError) as exc:
        print(f"decompnet: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
