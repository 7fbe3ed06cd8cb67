"""Command-line entry point: ``gfp <command> ...``.

Exit codes: 0 success, 2 invalid config/data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import default_config_document, load_config
from .errors import FormatError, NumericError, ValidationError
from .evalsuite import FeatureBank, ProbeConfig, extract_features, flops_account, knn_retrieve, linear_probe
from .model import GFPModel, ModelConfig, ntu_config
from .skeldata import generate_synthetic, read_dataset, write_dataset
from .trainer import Checkpoint, condition_params, initial_checkpoint, make_plans, model_grad_check, pretrain

log = logging.getLogger("gfp")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
REPORT_SCHEMA = 1


def _emit(report: dict, path: Path | None) -> None:
    report = {"report_schema": REPORT_SCHEMA, "version": __version__, **report}
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _dataset(path: str):
    if not Path(path).exists():
        raise ValidationError(f"dataset {path} does not exist")
    return read_dataset(path)[1]


def _checkpoint(path: str) -> Checkpoint:
    if not Path(path).exists():
        raise ValidationError(f"checkpoint {path} does not exist")
    return Checkpoint.load(path)


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if "data" not in cfg.raw:
        raise ValidationError("config is missing required key 'data'")
    spec = cfg.data if args.seed is None else dataclasses.replace(cfg.data, seed=args.seed)
    seqs = generate_synthetic(spec)
    if args.prefix:
        seqs = [s.__class__(s.data, s.label, f"{args.prefix}{s.sample_id}") for s in seqs]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = write_dataset(seqs, out)
    _emit({"command": "gen-data", "config_hash": cfg.digest, "seed": spec.seed, "dataset": str(out),
           "summary": manifest.summary()}, None)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    model_cfg, train_cfg = cfg.model, cfg.train
    if args.objective:
        model_cfg = dataclasses.replace(model_cfg, objective=args.objective)
    if args.mask_strategy:
        train_cfg = dataclasses.replace(train_cfg, mask_strategy=args.mask_strategy)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    model_cfg.validate()
    seqs = _dataset(args.data)
    for s in seqs:
        if (s.joints, s.channels) != (model_cfg.joints, model_cfg.channels):
            raise ValidationError(
                f"dataset has V={s.joints}, C={s.channels}; model config expects "
                f"V={model_cfg.joints}, C={model_cfg.channels}"
            )
    resume = _checkpoint(args.resume) if args.resume else None
    out = Path(args.out)
    result = pretrain(seqs, model_cfg, train_cfg, out, resume=resume, checkpoint_every=cfg.checkpoint_every)
    last = result.history[-1] if result.history else {}
    _emit({
        "command": "pretrain",
        "config_hash": result.checkpoint.config_hash,
        "objective": model_cfg.objective,
        "epochs": result.checkpoint.epoch,
        "final": last,
        "collapse_alarm": result.collapse_alarm,
        "checkpoint": str(out / "checkpoint.skt"),
        "metrics": str(out / "metrics.jsonl"),
    }, out / "report.json")
    return EXIT_OK


def cmd_init(args) -> int:
    cfg = load_config(args.config)
    train_cfg = cfg.train if args.seed is None else dataclasses.replace(cfg.train, seed=args.seed)
    ck = initial_checkpoint(cfg.model, train_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ck.save(out)
    _emit({"command": "init", "config_hash": ck.config_hash, "checkpoint": str(out),
           "parameters": ck.params.size}, None)
    return EXIT_OK


def _features(args, ck: Checkpoint, seqs, name: str) -> FeatureBank:
    model = GFPModel(ck.model_config)
    bank = extract_features(seqs, model, ck.params, pool=args.feature_pool)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        bank.save(Path(args.out) / f"{name}_features.skt")
    return bank


def cmd_probe(args) -> int:
    ck = _checkpoint(args.checkpoint)
    digest = ck.params.digest()
    train = _features(args, ck, _dataset(args.train), "train")
    test = _features(args, ck, _dataset(args.test), "test")
    res = linear_probe(train, test, ProbeConfig(lr=args.lr, max_iter=args.max_iter))
    if ck.params.digest() != digest:
        raise NumericError("encoder parameters changed during probing")
    report = {"command": "probe", "config_hash": ck.config_hash, "feature_pool": args.feature_pool,
              "top1": res.accuracy, "train_top1": res.train_accuracy, "iterations": res.iterations,
              "n_train": len(train), "n_test": len(test)}
    out = Path(args.out) if args.out else None
    _emit(report, out / "probe.json" if out else None)
    if out:
        _write_csv(out / "probe.csv", [{k: report[k] for k in ("config_hash", "top1", "train_top1", "n_train", "n_test")}])
    return EXIT_OK


def cmd_retrieve(args) -> int:
    ck = _checkpoint(args.checkpoint)
    queries = _features(args, ck, _dataset(args.query), "query")
    gallery = _features(args, ck, _dataset(args.gallery), "gallery")
    acc = knn_retrieve(queries, gallery)
    report = {"command": "retrieve", "config_hash": ck.config_hash, "feature_pool": args.feature_pool,
              "top1": acc, "n_query": len(queries), "n_gallery": len(gallery)}
    out = Path(args.out) if args.out else None
    _emit(report, out / "retrieve.json" if out else None)
    if out:
        _write_csv(out / "retrieve.csv", [{k: report[k] for k in ("config_hash", "top1", "n_query", "n_gallery")}])
    return EXIT_OK


def cmd_flops(args) -> int:
    if args.preset == "ntu":
        model_cfg, ratio, bodies, digest = ntu_config(), 0.9, 2, "preset:ntu"
    else:
        if not args.config:
            raise ValidationError("flops needs --config or --preset ntu")
        cfg = load_config(args.config)
        model_cfg, ratio, bodies, digest = cfg.model, cfg.eval.flops_mask_ratio, cfg.eval.flops_bodies, cfg.digest
    rep = flops_account(model_cfg, ratio, bodies)
    baseline = flops_account(dataclasses.replace(model_cfg, objective="eq1"), ratio, bodies)
    report = {"command": "flops", "config_hash": digest, "mask_ratio": ratio, "bodies": bodies,
              "objective": model_cfg.objective, **rep.as_dict(),
              "reconstruction_decoder_gflops": baseline.decoder_flops / 1e9,
              "targets": model_cfg.hierarchy.num_targets(model_cfg.Te, model_cfg.joints)
              if model_cfg.objective == "gfp" else model_cfg.num_tokens}
    _emit(report, Path(args.out) if args.out else None)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = load_config(args.config)
    model = GFPModel(cfg.model, cfg.train.weights)
    rng = np.random.Generator(np.random.Philox(cfg.train.seed))
    params = model.init_params(rng)
    condition_params(params, args.weight_scale)
    c = cfg.model
    X = rng.normal(size=(args.batch, c.frames, c.joints, c.channels))
    plans = make_plans(X, cfg.train, c.patch_len, rng)
    res = model_grad_check(model, params, X, plans, args.epsilon, args.samples, rng)
    passed = res.max_rel_error < args.tolerance
    _emit({"command": "grad-check", "config_hash": cfg.digest, "tolerance": args.tolerance,
           "passed": passed, **res.as_dict()}, Path(args.out) if args.out else None)
    if not passed:
        log.error("gradient mismatch at %s (rel error %.3g)", res.worst_path, res.max_rel_error)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_default_config(args) -> int:
    print(json.dumps(default_config_document(), indent=2))
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gfp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic SKL1 dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--prefix", default="", help="prepended to every sample id")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", help="self-supervised pretraining")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--objective", choices=["gfp", "eq1"])
    s.add_argument("--mask-strategy", choices=["motion", "uniform"])
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("init", help="write an untrained (epoch 0) checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_init)

    for name, a, b, fn in (("probe", "--train", "--test", cmd_probe),
                           ("retrieve", "--query", "--gallery", cmd_retrieve)):
        s = sub.add_parser(name)
        s.add_argument("--checkpoint", required=True)
        s.add_argument(a, required=True)
        s.add_argument(b, required=True)
        s.add_argument("--out")
        s.add_argument("--feature-pool", choices=["mean", "max"], default="mean")
        if name == "probe":
            s.add_argument("--lr", type=float, default=ProbeConfig.lr)
            s.add_argument("--max-iter", type=int, default=ProbeConfig.max_iter)
        s.set_defaults(func=fn)

    s = sub.add_parser("flops", help="analytic per-sequence FLOPs")
    s.add_argument("--config")
    s.add_argument("--preset", choices=["ntu"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("grad-check", help="finite-difference gradient check")
    s.add_argument("--config", required=True)
    s.add_argument("--samples", type=int, default=200)
    s.add_argument("--epsilon", type=float, default=1e-5)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--batch", type=int, default=3)
    s.add_argument("--weight-scale", type=float, default=10.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("default-config", help="print the desk-scale config document")
    s.set_defaults(func=cmd_default_config)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericError as exc:
        where = f" (parameter {exc.path})" if exc.path else ""
        print(f"numeric failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
