"""Command-line entry point: ``policyhash {generate,pretrain,train,encode,evaluate}``.

Every command reads an optional JSON config (``--config``), applies flag
overrides, writes the fully resolved config to ``<out>/config.<command>.json``
and only then starts work. Set ``POLICYHASH_LOG=INFO`` (or ``DEBUG``) for
progress logging.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

from . import dataset as ds_mod
from .encoder import EncoderParams, load_checkpoint, save_checkpoint
from .retrieval import CodeDatabase, evaluate
from .trainer import TrainConfig, TrainingError, encode, encode_database, fit, make_rngs, pretrain

log = logging.getLogger("policyhash")

DEFAULTS: dict = {
    "data": {
        "classes": 4,
        "per_class": 250,
        "dim": 32,
        "spread": 0.1,
        "separation": ds_mod.DEFAULT_SEPARATION,
        "seed": 0,
        "format": "binary",
    },
    "split": {"queries_per_class": 50, "train_per_class": 200, "seed": 0},
    "train": TrainConfig().to_dict(),
    "eval": {"ks": [1, 5, 10, 50, 100], "radius": 2, "top": None},
    "dataset_path": None,
    "out": "run",
}

SPLITS = ("query", "train", "database")


class CliError(RuntimeError):
    pass


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if key not in out:
            raise CliError(f"unknown config key {where}{key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        cfg = _merge(cfg, user)
    if args.seed is not None:
        cfg["data"]["seed"] = cfg["split"]["seed"] = cfg["train"]["seed"] = args.seed
    overrides = {
        "code_bits": args.bits,
        "epochs": args.epochs,
        "beta": args.beta,
        "margin": args.margin,
        "sync_period": args.sync_period,
        "pretrain_epochs": args.pretrain_epochs,
        "learning_rate": args.lr,
        "policy_weight": args.policy_weight,
    }
    for key, value in overrides.items():
        if value is not None:
            cfg["train"][key] = value
    if args.out is not None:
        cfg["out"] = args.out
    if args.data is not None:
        cfg["dataset_path"] = args.data
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**cfg["train"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid train config: {exc}") from None


def dataset_path(cfg: dict) -> Path:
    if cfg["dataset_path"]:
        return Path(cfg["dataset_path"])
    ext = "csv" if cfg["data"]["format"] == "csv" else "bin"
    return Path(cfg["out"]) / f"dataset.{ext}"


def load_split(cfg: dict) -> tuple[ds_mod.LabeledDataset, ds_mod.Split]:
    path = dataset_path(cfg)
    data = ds_mod.load(path)
    ds_mod.validate(data)
    sp = ds_mod.split(data, ds_mod.SplitSpec(**cfg["split"]))
    ds_mod.validate_split(data, sp)
    return data, sp


def _subset(data: ds_mod.LabeledDataset, sp: ds_mod.Split, which: str) -> ds_mod.LabeledDataset:
    return data.subset(getattr(sp, which))


def cmd_generate(cfg: dict, args) -> int:
    d = cfg["data"]
    data = ds_mod.generate_synthetic(d["classes"], d["per_class"], d["dim"], d["spread"], d["seed"], d["separation"])
    path = dataset_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    ds_mod.save(data, path, "csv" if d["format"] == "csv" else "binary")
    print(path)
    return 0


def cmd_pretrain(cfg: dict, args) -> int:
    tcfg = train_config(cfg)
    data, sp = load_split(cfg)
    train = _subset(data, sp, "train")
    init_rng, pre_rng, _ = make_rngs(tcfg.seed)
    params = EncoderParams.init(tcfg.layer_spec(train.dim), init_rng)
    params, hist = pretrain(params, train, tcfg, pre_rng)
    out = Path(cfg["out"])
    save_checkpoint(out / "pretrained.ckpt", params, 0)
    _write_jsonl(out / "pretrain_history.jsonl", hist)
    print(out / "pretrained.ckpt")
    return 0


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def cmd_train(cfg: dict, args) -> int:
    tcfg = train_config(cfg)
    data, sp = load_split(cfg)
    train = _subset(data, sp, "train")
    out = Path(cfg["out"])
    result = fit(train, tcfg, history_path=out / "history.jsonl", checkpoint_dir=out / "checkpoints")
    _write_jsonl(out / "pretrain_history.jsonl", result.pretrain_history)
    save_checkpoint(out / "final.ckpt", result.params, len(result.history))
    print(out / "final.ckpt")
    return 0


def _checkpoint_path(cfg: dict, args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg["out"]) / "final.ckpt"


def _load_params(cfg: dict, args, input_dim: int):
    path = _checkpoint_path(cfg, args)
    if not path.exists():
        raise CliError(f"{path}: no such checkpoint")
    params, _ = load_checkpoint(path)
    want = cfg["train"]["code_bits"]
    if params.spec.code_bits != want:
        raise CliError(f"checkpoint has {params.spec.code_bits}-bit codes but config asks for {want}")
    if params.spec.input_dim != input_dim:
        raise CliError(f"checkpoint expects {params.spec.input_dim}-d features, dataset has {input_dim}")
    return params


def cmd_encode(cfg: dict, args) -> int:
    data, sp = load_split(cfg)
    params = _load_params(cfg, args, data.dim)
    subset = _subset(data, sp, args.split)
    path = Path(cfg["out"]) / f"codes_{args.split}.bin"
    encode_database(params, subset).save(path)
    print(path)
    return 0


def cmd_evaluate(cfg: dict, args) -> int:
    if args.query_codes and args.db_codes:
        queries = CodeDatabase.load(args.query_codes)
        db = CodeDatabase.load(args.db_codes)
    else:
        data, sp = load_split(cfg)
        params = _load_params(cfg, args, data.dim)
        qset = _subset(data, sp, args.queries)
        queries = CodeDatabase(encode(params, qset.features), qset.labels)
        db = encode_database(params, _subset(data, sp, args.database))
    ev = cfg["eval"]
    metrics = evaluate(queries.codes, queries.labels, db, ks=ev["ks"], radius=ev["radius"], top=ev["top"])
    out = Path(cfg["out"])
    (out / "metrics.json").write_text(metrics.to_json())
    (out / "metrics.csv").write_text(metrics.to_csv())
    if metrics.excluded_queries:
        log.warning("%d queries without relevant items were excluded", len(metrics.excluded_queries))
    print(json.dumps({"map": metrics.map, "p_at_h2": metrics.precision_at_hamming2, "excluded": len(metrics.excluded_queries)}))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "encode": cmd_encode,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset file (default <out>/dataset.bin)")
    common.add_argument("--seed", type=int, help="overrides data, split and training seeds")
    common.add_argument("--bits", type=int, help="code length K")
    common.add_argument("--epochs", type=int, help="joint training epochs")
    common.add_argument("--pretrain-epochs", type=int)
    common.add_argument("--beta", type=float, help="reward threshold")
    common.add_argument("--margin", type=float, help="triplet margin")
    common.add_argument("--sync-period", type=int, help="epochs between database refreshes")
    common.add_argument("--lr", type=float, help="initial learning rate")
    common.add_argument("--policy-weight", type=float, help="weight of the policy loss (0 = triplet only)")
    common.add_argument("--checkpoint", help="checkpoint to encode/evaluate (default <out>/final.ckpt)")

    parser = argparse.ArgumentParser(prog="policyhash", description="Train and evaluate binary hashing encoders.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "pretrain", "train"):
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("encode", parents=[common])
    p.add_argument("--split", choices=SPLITS, default="database")
    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--queries", choices=SPLITS, default="query")
    p.add_argument("--database", choices=SPLITS, default="database")
    p.add_argument("--query-codes", help="precomputed query code file")
    p.add_argument("--db-codes", help="precomputed database code file")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("POLICYHASH_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    out = None
    try:
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / f"config.{args.command}.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        (out / f"FAILED.{args.command}").unlink(missing_ok=True)
        return COMMANDS[args.command](cfg, args)
    except (CliError, ds_mod.DatasetError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if out is not None and out.is_dir():
            # marks any partial outputs of this command as unusable
            (out / f"FAILED.{args.command}").write_text(f"{exc}\n")
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
