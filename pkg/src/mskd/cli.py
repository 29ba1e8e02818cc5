"""Command-line entry point: ``mskd <subcommand> ...``.

Failures print one line ``MSKD-ERR:<code>: <message>`` to stderr and exit
with 2 (config), 3 (data), 4 (training) or 5 (corrupt checkpoint).
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import pipeline
from .baselines import hard_pseudo_label_distill, merged_predictor
from .config import load_config
from .data import MANIFEST_NAME, clip_normalize_intensity, load_dataset, read_tensor
from .errors import ConfigError, DataError, MSKDError
from .losses import softmax_channels
from .metrics import MetricsReport, evaluate_model, student_predictor, uncertainty_image, \
    uncertainty_map
from .model import load_checkpoint
from .plotting import plot_uncertainty
from .training import distill_student, train_teacher

log = logging.getLogger("mskd")


class UsageError(MSKDError):
    code = "usage"
    exit_status = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dataset_dir(path, sub):
    """Accept a dataset directory or a ``gen-data`` root holding ``sub``."""
    path = Path(path)
    if (path / MANIFEST_NAME).is_file():
        return path
    if (path / sub / MANIFEST_NAME).is_file():
        return path / sub
    raise DataError(f"{path} is neither a dataset nor contains {sub}/")


def _load_teachers(paths):
    """Teacher models ordered by the organ index recorded in each checkpoint."""
    loaded = []
    for i, p in enumerate(paths, start=1):
        if not Path(p).is_file():
            raise DataError(f"teacher checkpoint {p} does not exist")
        model, _, meta = load_checkpoint(p, expected_out_channels=2)
        model.requires_grad_(False)
        loaded.append((int(meta.get("organ", i)), str(p), model))
    loaded.sort(key=lambda t: t[0])
    organs = [o for o, _, _ in loaded]
    if organs != list(range(1, len(loaded) + 1)):
        raise ConfigError(f"teachers must cover organs 1..{len(loaded)}, got {organs}")
    return [m for _, _, m in loaded], [p for _, p, _ in loaded]


def _binary_datasets(root, count):
    return [load_dataset(_dataset_dir(root, f"organ_{k}")) for k in range(1, count + 1)]


def _run_config(args):
    config = load_config(args.config)
    overrides = {}
    for flag, key in (("lambda1", "lambda1"), ("lambda2", "lambda2"),
                      ("feature_level", "feature_level")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "no_feature_loss", False):
        overrides["lambda2"] = 0.0
    if getattr(args, "mixed_supervision", False):
        overrides["mixed_supervision"] = True
    if overrides:
        config = config.replace("train", **overrides)
    return config


def cmd_gen_data(args):
    config = load_config(args.config)
    pipeline.generate_data(config.data, args.out, disjoint=args.disjoint)
    log.info("wrote dataset to %s", args.out)


def cmd_train_teacher(args):
    config = _run_config(args)
    dataset = load_dataset(_dataset_dir(args.data, f"organ_{args.organ}"))
    if dataset.organ != args.organ:
        raise DataError(f"dataset annotates organ {dataset.organ}, not {args.organ}")
    model_config = config.model.with_outputs(2)
    result = train_teacher(dataset, model_config, config.train)
    pipeline.save_run(args.out, result, config, {
        "role": "teacher", "organ": args.organ, "method": f"teacher-{args.organ}",
        "data": str(args.data),
    })


def _distill_common(args, hard):
    config = _run_config(args)
    teachers, paths = _load_teachers(args.teachers)
    datasets = _binary_datasets(args.data, len(teachers))
    model_config = teachers[0].config.with_outputs(len(teachers) + 1)
    if hard:
        result = hard_pseudo_label_distill(teachers, datasets, model_config, config.train)
        method = pipeline.METHOD_PSEUDO
    else:
        result = distill_student(teachers, datasets, model_config, config.train)
        method = pipeline.method_label(config.train)
    pipeline.save_run(args.out, result, config, {
        "role": "student", "method": method, "num_organs": len(teachers),
        "teachers": ",".join(paths), "data": str(args.data),
    })


def cmd_distill(args):
    _distill_common(args, hard=False)


def cmd_distill_hard(args):
    _distill_common(args, hard=True)


def cmd_eval(args):
    test = load_dataset(_dataset_dir(args.data, "test"))
    if args.merge_teachers:
        teachers, _ = _load_teachers(args.merge_teachers)
        if len(teachers) != test.num_organs:
            raise ConfigError(f"{len(teachers)} teachers for {test.num_organs} organs")
        report = evaluate_model(merged_predictor(teachers), test,
                                args.method or pipeline.METHOD_INDIVIDUAL)
    else:
        if not Path(args.model).is_file():
            raise DataError(f"checkpoint {args.model} does not exist")
        model, _, meta = load_checkpoint(args.model)
        report = evaluate_model(student_predictor(model), test,
                                args.method or meta.get("method", Path(args.model).stem),
                                num_outputs=model.config.out_channels)
    pipeline.write_report(report, args.out)
    print(report.to_text(), end="")


def _report_csv(path):
    path = Path(path)
    if path.is_dir():
        path = path / "report.csv"
    if not path.is_file():
        raise DataError(f"no report at {path}")
    return MetricsReport.from_csv(path.read_text(encoding="utf-8"))


def cmd_report(args):
    merged = MetricsReport()
    for run in args.runs:
        merged.extend(_report_csv(run))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(merged.to_text(), encoding="utf-8")
    out.with_suffix(".csv").write_text(merged.to_csv(), encoding="utf-8")
    pipeline.plot_report(merged, out.with_suffix(".png"))
    print(merged.to_text(), end="")


def cmd_uncertainty(args):
    if not Path(args.image).is_file():
        raise DataError(f"image {args.image} does not exist")
    model, _, _ = load_checkpoint(args.teacher, expected_out_channels=2)
    raw = read_tensor(args.image).astype(np.float32)
    if raw.ndim != 2:
        raise DataError(f"expected a 2-d image tensor, got shape {raw.shape}")
    x = torch.from_numpy(clip_normalize_intensity(raw))[None, None]
    with torch.no_grad():
        probs = softmax_channels(model(x)[0])[0].numpy()
    umap = uncertainty_map(probs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    uncertainty_image(umap).save(out, format="PNG")
    plot_uncertainty(clip_normalize_intensity(raw), umap,
                     out.with_name(out.stem + "_figure.png"))


def cmd_benchmark(args):
    config = _run_config(args)
    result = pipeline.run_benchmark(config, seeds=args.seeds, with_pseudo=args.pseudo,
                                    disjoint=args.disjoint)
    out = Path(args.out)
    for seed, rep in zip(args.seeds, result.per_seed):
        pipeline.write_report(rep, out, stem=f"seed_{seed}")
    pipeline.write_report(result.report, out, stem="median")
    print(result.report.to_text(), end="")


def build_parser():
    parser = _Parser(prog="mskd", description="Multi-teacher single-student distillation "
                                              "for multi-organ segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic multi-organ and binary datasets")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--disjoint", action="store_true",
                   help="give each binary dataset its own image subset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train one binary teacher")
    p.add_argument("--organ", type=int, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_teacher)

    for name, func, help_ in (("distill", cmd_distill, "region-based distillation"),
                              ("distill-hard", cmd_distill_hard, "hard pseudo-label baseline")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--teachers", nargs="+", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--config")
        p.add_argument("--out", required=True)
        if name == "distill":
            p.add_argument("--no-feature-loss", action="store_true",
                           help="logits-wise supervision only (LW)")
            p.add_argument("--lambda1", type=float)
            p.add_argument("--lambda2", type=float)
            p.add_argument("--feature-level", type=int)
            p.add_argument("--mixed-supervision", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate on the multi-organ test set")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--model")
    group.add_argument("--merge-teachers", nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", help="row label (defaults to the checkpoint's method)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge evaluation reports into one table")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("uncertainty", help="teacher uncertainty map as 8-bit PNG")
    p.add_argument("--teacher", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("benchmark", help="full synthetic benchmark over several seeds")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--pseudo", action="store_true", help="include the pseudo-label student")
    p.add_argument("--disjoint", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except MSKDError as exc:
        print(f"MSKD-ERR:{exc.code}: {exc}", file=sys.stderr)
        return exc.exit_status
    except (FileNotFoundError, NotADirectoryError, PermissionError) as exc:
        print(f"MSKD-ERR:data: {exc}", file=sys.stderr)
        return DataError.exit_status
    return 0


if __name__ == "__main__":
    sys.exit(main())
