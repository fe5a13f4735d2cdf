"""Command-line front end: training, evaluation, diagnostics, and data curation.

Exit codes: 0 success, 1 usage or configuration problem, 2 dataset
validation failure, 3 numerical failure (non-finite loss or a failed
gradient check).
"""

import argparse
import json
import os
import sys

from .config import ConfigError, TrainConfig
from .data import (
    DatasetError,
    build_answer_vocabulary,
    load_corrections,
    load_dataset,
    repair,
    save_dataset,
    validate,
)
from .fixtures import make_fixture
from .train import (
    NumericalError,
    _format_table,
    ablation_run,
    evaluate_checkpoint,
    explain_data,
    explain_sample,
    format_ablation_table,
    format_gamma_table,
    gamma_sweep,
    run_gradient_check,
    train,
)
from .weights import load_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this front end reserves 2 for
    dataset validation failures, so usage problems exit with 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(parser, with_gamma=True):
    parser.add_argument("--config", metavar="PATH",
                        help="JSON file mirroring the training configuration")
    parser.add_argument("--seed", type=int, help="override the run seed")
    if with_gamma:
        parser.add_argument("--gamma", type=float,
                            help="weight of the attention-agreement loss term")
    parser.add_argument("--epochs", type=int, help="override the epoch count")
    parser.add_argument("--desk-scale", action="store_true",
                        help="shrink every dimension to the desk-sized preset")
    parser.add_argument("--mask-padding", action=argparse.BooleanOptionalAction,
                        default=None,
                        help="restrict attention to real tokens (pad positions "
                             "get zero weight)")


def _resolve_config(args):
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if getattr(args, "desk_scale", False):
        config = config.desk_scale()
    for name in ("seed", "gamma", "epochs"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, name, value)
    if getattr(args, "mask_padding", None) is not None:
        config.mask_padding = args.mask_padding
    if getattr(args, "dataset", None):
        config.dataset = args.dataset
    config.validate()
    return config


def _require_dataset(args, config):
    dataset = getattr(args, "dataset", None) or config.dataset
    if not dataset:
        raise ConfigError("no dataset given; pass --dataset or set it in --config")
    return dataset


def _emit_json(payload):
    print(json.dumps(payload, sort_keys=True))


def _cmd_train(args):
    config = _resolve_config(args)
    dataset = _require_dataset(args, config)
    log = print if args.format == "text" else None
    outcome = train(config, dataset_path=dataset, out_dir=args.out, log=log)
    if args.format == "json":
        for record in outcome.metrics:
            print(record.to_json_line())
    else:
        best = outcome.metrics[outcome.best_epoch]
        print(f"trained {len(outcome.metrics)} epochs; best epoch "
              f"{outcome.best_epoch} (train accuracy {best.overall_accuracy:.2f}%)")
        if args.out:
            print(f"checkpoints: {outcome.best_path}, {outcome.last_path}")
        for sample_id, reason in outcome.excluded:
            print(f"excluded {sample_id}: {reason}", file=sys.stderr)
    return EXIT_OK


def _cmd_evaluate(args):
    result = evaluate_checkpoint(args.weights, args.dataset)
    if args.format == "json":
        _emit_json(result.to_dict())
    else:
        print(f"open    {result.open_accuracy:6.2f}%  "
              f"({result.correct_open}/{result.n_open})")
        print(f"closed  {result.closed_accuracy:6.2f}%  "
              f"({result.correct_closed}/{result.n_closed})")
        print(f"overall {result.overall_accuracy:6.2f}%")
    return EXIT_OK


def _cmd_ablate(args):
    config = _resolve_config(args)
    dataset = _require_dataset(args, config)
    rows = ablation_run(config, dataset_path=dataset, out_dir=args.out)
    if args.format == "json":
        _emit_json({label: result.to_dict() for label, result in rows.items()})
    else:
        print(format_ablation_table(rows), end="")
    return EXIT_OK


def _cmd_sweep_gamma(args):
    config = _resolve_config(args)
    dataset = _require_dataset(args, config)
    values = None
    if args.values:
        try:
            values = tuple(float(v) for v in args.values.split(","))
        except ValueError:
            raise ConfigError(f"--values must be comma-separated numbers, "
                              f"got {args.values!r}")
    results = gamma_sweep(config, dataset_path=dataset, values=values,
                          out_dir=args.out)
    if args.format == "json":
        _emit_json({f"{value:.1f}": result.to_dict()
                    for value, result in results.items()})
    else:
        print(format_gamma_table(results), end="")
    return EXIT_OK


def _cmd_grad_check(args):
    config = _resolve_config(args)
    if not args.config and not args.desk_scale:
        config = config.desk_scale()  # full-scale dims would take hours
    coords = None if args.full else args.coords
    report = run_gradient_check(config, tolerance=args.tolerance,
                                coords_per_param=coords)
    if args.format == "json":
        _emit_json({
            "max_rel_error": report["max_rel_error"],
            "tolerance": report["tolerance"],
            "passed": report["passed"],
            "parameters": [
                {"name": name, "worst_rel_error": worst, "coords_checked": n}
                for name, worst, n in report["entries"]
            ],
        })
    else:
        rows = [(name, f"{worst:.3e}", str(n))
                for name, worst, n in report["entries"]]
        print(_format_table(("parameter", "worst_rel_error", "coords"), rows),
              end="")
        verdict = "PASS" if report["passed"] else "FAIL"
        print(f"max relative error {report['max_rel_error']:.3e} "
              f"(tolerance {report['tolerance']:.0e}): {verdict}")
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


def _cmd_explain(args):
    model = load_model(args.weights)
    samples = load_dataset(args.dataset)
    sample = next((s for s in samples if s.sample_id == args.sample), None)
    if sample is None:
        raise ConfigError(f"no sample with id {args.sample!r} in {args.dataset}")
    root = os.path.dirname(os.path.abspath(args.dataset))
    if args.format == "json":
        _emit_json(explain_data(model, sample, root))
    else:
        print(explain_sample(model, sample, root), end="")
    return EXIT_OK


def _cmd_validate_data(args):
    samples = load_dataset(args.dataset)
    vocab = build_answer_vocabulary(samples)
    root = os.path.dirname(os.path.abspath(args.dataset))
    report = validate(samples, vocab, image_root=root)
    if args.format == "json":
        _emit_json(report.to_dict())
    else:
        print(report.to_text(), end="")
    return EXIT_OK if report.clean else EXIT_DATA


def _cmd_repair_data(args):
    samples = load_dataset(args.dataset)
    corrections = load_corrections(args.corrections)
    repaired, audit = repair(samples, corrections)
    save_dataset(repaired, args.out)
    applied = sum(1 for entry in audit if entry.applied)
    if args.format == "json":
        _emit_json({
            "out": args.out,
            "applied": applied,
            "rejected": len(audit) - applied,
            "audit": [entry.to_dict() for entry in audit],
        })
    else:
        for entry in audit:
            status = "applied " if entry.applied else "rejected"
            print(f"{status} {entry.sample_id}.{entry.field}: "
                  f"{entry.old!r} -> {entry.new!r} ({entry.reason})")
        print(f"{applied} applied, {len(audit) - applied} rejected; "
              f"wrote {args.out}")
    return EXIT_OK


def _cmd_make_fixture(args):
    result = make_fixture(args.out, seed=args.seed if args.seed is not None else 0,
                          anomalies=args.anomalies)
    if args.format == "json":
        _emit_json(result)
    else:
        print(f"wrote {result['dataset']} "
              f"({result['n_train']} train / {result['n_test']} test samples)")
        if args.anomalies:
            planted = ", ".join(f"{kind}={count}"
                                for kind, count in sorted(result["planted"].items()))
            print(f"planted findings: {planted}")
            print(f"corrections: {result['corrections']}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="mvqa",
                     description="Train and inspect a multi-view attention "
                                 "model for medical visual question answering.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(handler=handler)
        p.add_argument("--format", choices=("text", "json"), default="text",
                       help="output format (default: text)")
        return p

    p = add("train", _cmd_train, "train a model and write checkpoints")
    _add_config_flags(p)
    p.add_argument("--dataset", metavar="PATH", help="corpus JSON file")
    p.add_argument("--out", metavar="DIR",
                   help="directory for config, metrics, and checkpoints")

    p = add("evaluate", _cmd_evaluate, "score a checkpoint on the test split")
    p.add_argument("--weights", metavar="PATH", required=True)
    p.add_argument("--dataset", metavar="PATH", required=True)

    p = add("ablate", _cmd_ablate,
            "train all four on/off combinations of the attention view "
            "and the agreement loss")
    _add_config_flags(p)
    p.add_argument("--dataset", metavar="PATH", help="corpus JSON file")
    p.add_argument("--out", metavar="DIR", help="directory for per-row runs")

    p = add("sweep-gamma", _cmd_sweep_gamma,
            "train once per agreement-loss weight on the 0.0..2.0 grid")
    _add_config_flags(p, with_gamma=False)
    p.add_argument("--dataset", metavar="PATH", help="corpus JSON file")
    p.add_argument("--out", metavar="DIR", help="directory for per-value runs")
    p.add_argument("--values", metavar="LIST",
                   help="comma-separated weights to sweep instead of the grid")

    p = add("grad-check", _cmd_grad_check,
            "compare analytic gradients against finite differences")
    _add_config_flags(p)
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="maximum accepted relative error (default: 1e-4)")
    p.add_argument("--coords", type=int, default=4,
                   help="coordinates sampled per parameter (default: 4)")
    p.add_argument("--full", action="store_true",
                   help="check every coordinate of every parameter")

    p = add("explain", _cmd_explain,
            "dump both per-word attention views for one sample")
    p.add_argument("--weights", metavar="PATH", required=True)
    p.add_argument("--dataset", metavar="PATH", required=True)
    p.add_argument("--sample", metavar="ID", required=True,
                   help="sample id to explain")

    p = add("validate-data", _cmd_validate_data,
            "report quality findings for a corpus")
    p.add_argument("--dataset", metavar="PATH", required=True)

    p = add("repair-data", _cmd_repair_data,
            "apply a corrections file and write the repaired corpus")
    p.add_argument("--dataset", metavar="PATH", required=True)
    p.add_argument("--corrections", metavar="PATH", required=True)
    p.add_argument("--out", metavar="PATH", required=True,
                   help="where to write the repaired corpus JSON")

    p = add("make-fixture", _cmd_make_fixture,
            "generate a small synthetic corpus")
    p.add_argument("--out", metavar="DIR", required=True)
    p.add_argument("--seed", type=int, help="generator seed (default: 0)")
    p.add_argument("--anomalies", action="store_true",
                   help="plant labeled quality findings plus a matching "
                        "corrections file")

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
