"""Command-line entry point: ``python cli.py <subcommand> [options]``."""
import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

from config import Config, ConfigError, ExperimentConfig, load_experiment_config, setup_logging
from dataset import generate_synthetic, save_csv
from evaluation import auroc, calibrate_threshold
from main import (
    DetectorBundle,
    fit_bank,
    generator_spec,
    load_dataset,
    load_detector,
    load_taxonomy,
    prepare_scenario,
    run_experiment,
    save_detector,
    train_detector,
)
from ood_scores import METHODS, read_score_dump, score_dataset, write_score_dump
from report import render_report

logger = logging.getLogger(__name__)


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this subcommand")
    return load_experiment_config(args.config, seed_override=args.seed)


def _emit(payload: Dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    tree = load_taxonomy(cfg)
    dataset = generate_synthetic(tree, generator_spec(cfg.generator, seed=args.seed))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    save_csv(dataset, args.out)
    _emit({"path": args.out, "samples": dataset.size, "classes": tree.num_classes,
           "feature_dim": dataset.feature_dim})
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.variant == "hier" and args.beta is None:
        raise ConfigError("--beta is required for the hier variant")
    tree = load_taxonomy(cfg)
    data = prepare_scenario(load_dataset(cfg, tree), args.scenario, cfg.split, cfg.master_seed)
    model, history = train_detector(data, args.variant, args.beta, args.replicate, args.lr,
                                    cfg.training, cfg.master_seed)
    bundle = DetectorBundle(
        model=model,
        tree=data.known_tree,
        variant=args.variant,
        beta=args.beta if args.variant == "hier" else None,
        bank=fit_bank(model, data.train, cfg.dmd_label_mode),
        metadata={"scenario": args.scenario, "replicate": args.replicate, "learning_rate": args.lr,
                  "master_seed": cfg.master_seed},
    )
    save_detector(bundle, args.out)
    best = min(history, key=lambda h: h["val_loss"])
    _emit({"path": args.out, "best_epoch": best["epoch"], "val_loss": best["val_loss"]})
    return 0


def cmd_score(args) -> int:
    cfg = _load_config(args)
    bundle = load_detector(args.model)
    scenario = bundle.metadata.get("scenario")
    if not scenario:
        raise ValueError(f"{args.model} does not name its scenario")
    tree = load_taxonomy(cfg)
    data = prepare_scenario(load_dataset(cfg, tree), scenario, cfg.split, cfg.master_seed)
    methods = args.method or list(cfg.detectors)
    records = []
    for method in methods:
        kwargs = dict(soft=bundle.soft, bank=bundle.bank, temperature=cfg.temperature, epsilon=cfg.epsilon,
                      leaf_names=bundle.tree.leaf_names)
        records += score_dataset(bundle.model, data.val, method, bundle.variant, split="val", **kwargs)
        records += score_dataset(bundle.model, data.test, method, bundle.variant, split="test", **kwargs)
        records += score_dataset(bundle.model, data.novel, method, bundle.variant, is_novel=True,
                                 split="test", **kwargs)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_score_dump(records, args.out)
    _emit({"path": args.out, "records": len(records), "methods": methods})
    return 0


def _by_method(records) -> Dict[str, list]:
    grouped: Dict[str, list] = {}
    for r in records:
        grouped.setdefault(r.method, []).append(r)
    return grouped


def cmd_calibrate(args) -> int:
    records = read_score_dump(args.scores)
    thresholds = {}
    for method, rows in sorted(_by_method(records).items()):
        val = [r.score for r in rows if r.split == "val"]
        if not val:
            raise ValueError(f"{args.scores} has no validation scores for {method}")
        result = calibrate_threshold(val, args.alpha)
        thresholds[method] = {"threshold": result.threshold, "iterations": result.iterations,
                              "removed": result.removed}
    if args.model:
        bundle = load_detector(args.model)
        bundle.thresholds.update({m: t["threshold"] for m, t in thresholds.items()})
        save_detector(bundle, args.model)
    _emit({"alpha": args.alpha, "thresholds": thresholds})
    return 0


def cmd_evaluate(args) -> int:
    records = read_score_dump(args.scores)
    summary = {}
    for method, rows in sorted(_by_method(records).items()):
        known = [r.score for r in rows if r.split == "test" and not r.is_novel]
        novel = [r.score for r in rows if r.split == "test" and r.is_novel]
        entry = {"auroc": auroc(known, novel), "known": len(known), "novel": len(novel)}
        val = [r.score for r in rows if r.split == "val"]
        if val:
            c = calibrate_threshold(val, args.alpha).threshold
            entry.update({
                "threshold": c,
                "false_alarm_rate": sum(s > c for s in known) / len(known),
                "detection_rate": sum(s > c for s in novel) / len(novel),
            })
        summary[method] = entry
    _emit(summary)
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    if args.workers:
        cfg.workers = args.workers
    results = run_experiment(cfg, output_dir=args.out, sweep=True)
    _emit({"output_dir": args.out or cfg.output_dir, "rows": len(results)})
    return 0


def cmd_report(args) -> int:
    betas: Sequence[float] = Config.report_betas()
    if args.report_betas:
        betas = args.report_betas
    elif args.config:
        betas = _load_config(args).report_betas
    written = render_report(args.results, args.out, betas)
    _emit({"files": written})
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("app:app", host=args.host or Config.HOST, port=args.port or Config.PORT,
                log_level=Config.LOG_LEVEL.lower())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (JSON)")
    common.add_argument("--seed", type=int, default=None, help="master seed override")
    common.add_argument("--log-level", default=None, help="logging level (default: LOG_LEVEL or info)")

    parser = argparse.ArgumentParser(prog="nfd", description="Hierarchy-aware novel fault detection experiments")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train one detector checkpoint")
    p.add_argument("--scenario", required=True, help="leaf left out as the novel class")
    p.add_argument("--variant", choices=("flat", "hier"), default="hier")
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--replicate", type=int, default=0, help="seed index within the grid")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("score", parents=[common], help="score val/test/novel samples with a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--method", action="append", choices=METHODS)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("calibrate", parents=[common], help="threshold from the validation scores of a dump")
    p.add_argument("--scores", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--model", help="store the thresholds in this checkpoint")
    p.set_defaults(handler=cmd_calibrate)

    p = sub.add_parser("evaluate", parents=[common], help="AUROC and alarm rates of a score dump")
    p.add_argument("--scores", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="run every scenario, hier cells once per sweep beta")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="render CSV summaries and SVG pages")
    p.add_argument("--results", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--report-betas", type=float, nargs="+", default=None)
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("serve", parents=[common], help="start the monitoring HTTP service")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except Exception as e:
        logger.debug("command failed", exc_info=True)
        message = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
