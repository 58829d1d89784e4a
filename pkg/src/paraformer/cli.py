"""``paraformer`` command line.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ConfigError
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import PRESETS, Config
from .data import DataFormatError, load_dataset, make_splits
from .duat import UnquantifiedDepthError, bias_uat_layers, degrees_of_freedom, run_verification
from .models import ModelSpec, build, param_count
from .runtime import PoolConfig, bench_latency
from .train import TrainConfig, evaluate, train, write_history

log = logging.getLogger("paraformer")

USAGE_ERRORS = (ConfigError, FileNotFoundError, DataFormatError, CheckpointFormatError, UnquantifiedDepthError)


class Exit(Exception):
    def __init__(self, code: int, message: str = ""):
        super().__init__(message)
        self.code = code


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Subcommand copies must not overwrite a value given before the subcommand.
    none = argparse.SUPPRESS if suppress else None
    off = argparse.SUPPRESS if suppress else False
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=none)
    g.add_argument("--out", default=none, help="run directory for every artifact")
    g.add_argument("--config", default=none, help="key = value config file")
    g.add_argument("--print-config", action="store_true", default=off, help="print the effective config and exit")
    g.add_argument("--precision", choices=("f32", "f64"), default=none)
    g.add_argument("-v", "--verbose", action="store_true", default=off)
    return g


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", dest="model.name", default=None, help="para-former-<m>-<n> or vit-<d>")
    p.add_argument("--dim", dest="model.dim", type=int, default=None)
    p.add_argument("--heads", dest="model.heads", type=int, default=None)
    p.add_argument("--ffn-dim", dest="model.ffn_dim", type=int, default=None)
    p.add_argument("--patch", dest="model.patch", type=int, default=None)
    p.add_argument("--variant", dest="model.variant", choices=("strict", "practical"), default=None)
    p.add_argument("--aggregation", dest="model.aggregation", choices=("sum", "mean"), default=None)


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", dest="data.path", default=None)
    p.add_argument("--data-format", dest="data.format", choices=("cifar10", "folder"), default=None)
    p.add_argument("--preset", default=None, choices=sorted(PRESETS))
    p.add_argument("--train-n", dest="train.train_n", type=int, default=None)
    p.add_argument("--val-n", dest="train.val_n", type=int, default=None)
    p.add_argument("--test-n", dest="train.test_n", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paraformer", parents=[_global_flags(False)],
                                     description="Para-Former verification, training and benchmarking.")
    sub = parser.add_subparsers(dest="command", required=True)
    g = _global_flags(True)

    p = sub.add_parser("verify", parents=[g], help="check lifted and expanded forms against direct forwards")
    p.add_argument("--dims", default="3x4", help="SxD token matrix size")
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--ffn-dim", type=int, default=None, help="defaults to 2*D")
    p.add_argument("--depths", default="1,2,3")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=None, help="override every per-construct tolerance")
    p.add_argument("--report", default=None)

    p = sub.add_parser("dof", parents=[g], help="degrees of freedom and bias layer counts")
    p.add_argument("name", help="para-former-<m>-<L> (L = total blocks) or vit-<d>")

    p = sub.add_parser("train", parents=[g], help="train a model and keep the best-validation checkpoint")
    _model_flags(p)
    _data_flags(p)
    p.add_argument("--epochs", dest="train.epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="train.batch_size", type=int, default=None)
    p.add_argument("--lr", dest="train.lr", type=float, default=None)
    p.add_argument("--optimizer", dest="train.optimizer", choices=("adam", "sgd"), default=None)
    p.add_argument("--weight-decay", dest="train.weight_decay", type=float, default=None)

    p = sub.add_parser("eval", parents=[g], help="overall and per-class accuracy of a checkpoint")
    _data_flags(p)
    p.add_argument("--checkpoint", required=False, default=None)
    p.add_argument("--split", choices=("test", "val"), default="test")

    p = sub.add_parser("bench", parents=[g], help="median inference latency per model")
    _model_flags(p)
    p.add_argument("--models", default="vit-1,vit-8,para-former-1-8")
    p.add_argument("--workers", dest="bench.workers", type=int, default=None)
    p.add_argument("--reps", dest="bench.reps", type=int, default=None)
    p.add_argument("--warmup", dest="bench.warmup", type=int, default=None)
    p.add_argument("--pinning", dest="bench.pinning", choices=("none", "round-robin"), default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> Config:
    flags = {k: v for k, v in vars(args).items() if "." in k}
    for key in ("seed", "out", "precision"):
        flags[key] = getattr(args, key, None)
    return Config.resolve(getattr(args, "preset", None), args.config, flags)


def model_spec(cfg: Config, name: str | None = None, image=(3, 32, 32), classes: int = 10) -> ModelSpec:
    m = cfg.section("model")
    return ModelSpec.from_name(name or m["name"], dim=m["dim"], heads=m["heads"], ffn_dim=m["ffn_dim"],
                               patch=m["patch"], variant=m["variant"], activation=m["activation"],
                               aggregation=m["aggregation"], precision=cfg["precision"], seed=cfg["seed"],
                               image=image, classes=classes)


def write_manifest(out: Path, command: str, cfg: Config | None, artifacts: list[str], extra=None) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": cfg["seed"] if cfg else None,
        "config": cfg.values if cfg else None,
        "config_sources": cfg.sources if cfg else None,
        "versions": {"paraformer": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "artifacts": artifacts,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def _out_dir(cfg: Config) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_verify(args, cfg: Config) -> int:
    try:
        s, d = (int(v) for v in args.dims.lower().split("x"))
        depths = [int(v) for v in args.depths.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--dims must look like 3x4 and --depths like 1,2,3; got {args.dims!r}, {args.depths!r}")
    if not depths or min(depths) < 1:
        raise ConfigError("--depths needs positive integers")
    report = run_verification(s, d, args.heads, args.ffn_dim, depths, args.seeds, args.tolerance, cfg["seed"])
    text = report.to_text()
    print(text, end="")
    out = _out_dir(cfg)
    path = Path(args.report) if args.report else out / "verify.txt"
    path.write_text(text)
    write_manifest(out, "verify", cfg, [str(path)])
    if not report.passed:
        print("failed: " + ", ".join(r.construct for r in report.failures()), file=sys.stderr)
        return 1
    return 0


def dof_table(name: str) -> dict:
    """Bookkeeping for a tabulated model label; the second number counts total blocks."""
    spec = ModelSpec.from_name(name)
    if spec.topology == "serial":
        depth, layers = spec.depth, spec.depth
    else:
        depth, layers = spec.depth, spec.branches
    dof = degrees_of_freedom(depth, layers)
    branches = layers // depth
    per_branch, total = bias_uat_layers(depth, branches)
    return {"name": name, "depth": depth, "layers": layers, "branches": branches, "dof": dof,
            "bias_layers_per_branch": per_branch, "bias_layers_total": total}


def cmd_dof(args, cfg: Config) -> int:
    t = dof_table(args.name)
    per = "+".join(str(v) for v in t["bias_layers_per_branch"]) or "0"
    print(f"model              {t['name']}")
    print(f"branches x depth   {t['branches']} x {t['depth']}")
    print(f"degrees of freedom {t['dof']}")
    print(f"bias layers        ({per})*{t['branches']} = {t['bias_layers_total']}")
    return 0


def _load_data(cfg: Config):
    path = cfg["data.path"]
    if not path:
        raise ConfigError("no data path; pass --data or set data.path")
    return load_dataset(path, cfg["data.format"])


def _splits(cfg: Config, ds):
    t = cfg.section("train")
    return make_splits(ds, t["train_n"], t["val_n"], "test", cfg["seed"], t["test_n"] or None)


def cmd_train(args, cfg: Config) -> int:
    ds = _load_data(cfg)
    splits = _splits(cfg, ds)
    spec = model_spec(cfg, image=ds.images.shape[1:], classes=ds.num_classes)
    model = build(spec)
    t = cfg.section("train")
    tc = TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], optimizer=t["optimizer"],
                     beta1=t["beta1"], beta2=t["beta2"], eps=t["eps"], momentum=t["momentum"],
                     weight_decay=t["weight_decay"], seed=cfg["seed"])
    out = _out_dir(cfg)
    print(f"{spec.name}: {param_count(model)['total']} parameters, "
          f"{len(splits.train)} train / {len(splits.val)} val")
    result = train(model, ds, splits, tc,
                   on_epoch=lambda r: print(f"epoch {r.epoch:>3}  loss {r.train_loss:.4f}  val {r.val_acc:.2f}%"))
    write_history(result.history, out / "history.csv")
    save_checkpoint(model, out / "final.pfck")
    best = result.best_model()
    save_checkpoint(best, out / "best.pfck")
    write_manifest(out, "train", cfg, ["history.csv", "final.pfck", "best.pfck"],
                   {"best_epoch": result.best_epoch, "best_val_acc": result.best_val_acc})
    print(f"best val {result.best_val_acc:.2f}% at epoch {result.best_epoch}; wrote {out}")
    return 0


def cmd_eval(args, cfg: Config) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    model = load_checkpoint(args.checkpoint)
    ds = _load_data(cfg)
    splits = _splits(cfg, ds) if args.split == "val" else None
    if args.split == "val":
        indices = splits.val
    else:
        indices = ds.pools.get("test", np.zeros(0, dtype=np.int64))
        if cfg["train.test_n"]:
            indices = indices[:cfg["train.test_n"]]
    if len(indices) == 0:
        raise ConfigError(f"dataset has no {args.split} images")
    res = evaluate(model, ds, indices)
    print(f"{model.spec.name} on {args.split} ({ds.provenance})")
    print(res.to_text(ds.class_names), end="")
    out = _out_dir(cfg)
    (out / "eval.json").write_text(json.dumps({"accuracy": res.accuracy, "per_class": res.per_class,
                                               "correct": res.correct, "total": res.total}, indent=2))
    write_manifest(out, "eval", cfg, ["eval.json"], {"checkpoint": args.checkpoint})
    return 0


def cmd_bench(args, cfg: Config) -> int:
    b = cfg.section("bench")
    if b["reps"] < 10:
        raise ConfigError(f"bench needs --reps >= 10, got {b['reps']}")
    specs = [model_spec(cfg, name.strip()) for name in args.models.split(",") if name.strip()]
    pool = PoolConfig(workers=b["workers"], pinning=b["pinning"], warmup=b["warmup"], reps=b["reps"])
    report = bench_latency(specs, pool, seed=cfg["seed"])
    out = _out_dir(cfg)
    report.write(out / "bench.json", out / "bench.csv")
    print(report.summary(), end="")
    write_manifest(out, "bench", cfg, ["bench.json", "bench.csv"])
    return 0


COMMANDS = {"verify": cmd_verify, "dof": cmd_dof, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(cfg.to_text(), end="")
            return 0
        return COMMANDS[args.command](args, cfg)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
