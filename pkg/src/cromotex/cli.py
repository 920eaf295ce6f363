"""Command-line entry point.

stdout carries only JSON or a result table; progress and errors go to stderr.
Exit codes: 0 success, 1 usage error, 2 runtime or validation error.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, TrainConfig
from .data import DatasetFormatError, generate_dataset, write_dataset

log = logging.getLogger("cromotex")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="JSON config file")
    p.add_argument("--seed", type=int, help="experiment seed (overrides config.seed)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bitwise reproducibility")
    p.add_argument("--out-dir", help="directory for checkpoints and reports")
    p.add_argument("--no-timestamps", action="store_true", help="omit wall-clock fields from reports")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cromotex", description="Cross-modal ECG training with hard-negative weighting.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic CMTX dataset")
    _common(p)
    p.add_argument("--out", required=True, help="output .cmtx path")

    p = sub.add_parser("pretrain", help="train the teacher and run ECG self-supervised pre-training")
    _common(p)

    p = sub.add_parser("align", help="cross-modal alignment stage")
    _common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--encoder", help="pre-trained encoder checkpoint (fresh encoder when omitted)")

    p = sub.add_parser("finetune", help="fine-tune the encoder with a classifier and score the test split")
    _common(p)
    p.add_argument("--encoder", help="aligned or pre-trained checkpoint (fresh encoder when omitted)")

    p = sub.add_parser("eval", help="score a fine-tuned checkpoint on the test split")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="compare variants over the config's seed list")
    _common(p)
    p.add_argument("--variants", nargs="+", help="subset of variants (default: all five)")
    p.add_argument("--seeds", nargs="+", type=int, help="override config.seeds")
    p.add_argument("--format", choices=("json", "table"), default="json")

    p = sub.add_parser("check-grads", help="finite-difference gradient suite")
    _common(p, config_required=False)
    p.add_argument("--n-seeds", type=int, default=20)
    p.add_argument("--format", choices=("json", "table"), default="table")

    p = sub.add_parser("run-all", help="teacher, pre-training, alignment and fine-tuning in one go")
    _common(p)
    return parser


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out_dir or cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _ablation_table(report) -> str:
    lines = [f"{'variant':<28} {'AUROC':>17} {'F1':>17}"]
    for row in report["rows"]:
        au = f"{100 * row['auroc_mean']:.2f} ± {100 * row['auroc_std']:.2f}"
        f1 = f"{100 * row['f1_mean']:.2f} ± {100 * row['f1_std']:.2f}"
        lines.append(f"{row['label']:<28} {au:>17} {f1:>17}")
    return "\n".join(lines)


def _load_params(path, expect: str):
    from .checkpoint import load_checkpoint
    params, _, _ = load_checkpoint(path)
    if not any(k.startswith(expect + ".") for k in params):
        raise UsageError(f"{path} holds no {expect} tensors")
    return params


def _run(args) -> int:
    from . import pipeline as P

    cfg = _load_config(args)
    # wall-clock fields are the only non-reproducible report content
    timestamps = not (args.no_timestamps or args.deterministic)
    cmd = args.command

    if cmd == "gen-data":
        gen = cfg.generator if args.seed is None else dataclasses.replace(cfg.generator, seed=args.seed)
        ds = generate_dataset(gen)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_dataset(args.out, ds)
        _emit({"path": str(args.out), "records": len(ds), "positives": int(ds.labels.sum()),
               "ecg_present": int(ds.ecg_present.sum()), "feature_dim": int(ds.modality_b.shape[1])})
        return EXIT_OK

    if cmd == "check-grads":
        from .gradcheck import format_table, run_suite
        rows = run_suite(args.n_seeds, first_seed=args.seed or 0)
        if args.format == "table":
            sys.stdout.write(format_table(rows) + "\n")
        else:
            _emit([r.to_dict() for r in rows])
        return EXIT_OK if all(r.passed for r in rows) else EXIT_RUNTIME

    if cmd == "ablate":
        variants = args.variants or list(P.VARIANTS)
        unknown = sorted(set(variants) - set(P.VARIANTS))
        if unknown:
            raise UsageError(f"unknown variant(s): {', '.join(unknown)}")
        report = P.run_ablations(cfg, variants, args.seeds, timestamps=timestamps)
        if args.out_dir:
            out = _out_dir(args, cfg)
            P.write_resolved_config(out, cfg)
            (out / "ablation_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        if args.format == "table":
            sys.stdout.write(_ablation_table(report) + "\n")
        else:
            _emit(report)
        return EXIT_OK

    if cmd == "eval":
        _emit(P.evaluate_checkpoint(cfg, args.checkpoint))
        return EXIT_OK

    out = _out_dir(args, cfg)
    if cmd == "run-all":
        result = P.run_all(cfg, out, timestamps=timestamps)
        _emit(result["summary"])
        return EXIT_OK

    P.write_resolved_config(out, cfg)
    dataset = P.load_dataset(cfg)
    splits = P.make_splits(cfg, dataset, cfg.seed)
    if cmd == "pretrain":
        teacher, t_report = P.train_teacher(cfg, splits, cfg.seed)
        P.write_stage(out, "teacher", teacher, t_report, cfg, timestamps)
        encoder, s_report = P.pretrain_ssl(cfg, splits, cfg.seed)
        P.write_stage(out, "pretrain", encoder, s_report, cfg, timestamps)
        _emit({"teacher": t_report.to_dict(timestamps), "pretrain": s_report.to_dict(timestamps)})
        return EXIT_OK
    if cmd == "align":
        teacher = _load_params(args.teacher, "teacher")
        encoder = _load_params(args.encoder, "encoder").subset("encoder") if args.encoder else P.fresh_encoder(cfg, cfg.seed)
        aligned, report = P.align_crossmodal(cfg, splits, encoder, teacher, cfg.seed)
        P.write_stage(out, "align", aligned, report, cfg, timestamps)
        _emit(report.to_dict(timestamps))
        return EXIT_OK
    if cmd == "finetune":
        encoder = _load_params(args.encoder, "encoder") if args.encoder else P.fresh_encoder(cfg, cfg.seed)
        final, report = P.finetune(cfg, splits, encoder, cfg.seed)
        P.write_stage(out, "finetune", final, report, cfg, timestamps)
        _emit(report.to_dict(timestamps))
        return EXIT_OK
    raise UsageError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(1)
    try:
        with limiter:
            return _run(args)
    except UsageError as exc:
        print(f"cromotex: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DatasetFormatError, OSError, ValueError, RuntimeError, FloatingPointError, KeyError) as exc:
        print(f"cromotex: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
