"""Command line entry point: ``mdss <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import importlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import tifffile
import torch

from . import checkpoint, dataio, fusion, metrics, pipeline, st_net, synth
from .config import ConfigError, RunConfig, desk_config

logger = logging.getLogger("mdss")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

# flag -> RunConfig field
OVERRIDES = {
    "dataset_root": str, "output_dir": str, "image_size": int, "k_points": int,
    "d_start": float, "d_end": float, "blur_sigma": float, "fpr_max": float, "seed": int,
    "st_steps": int, "sdf_steps": int, "st_lr": float, "st_batch": int, "sdf_batch": int,
    "queries_per_patch": int, "teacher_mode": str,
}


def _add_run_flags(p):
    p.add_argument("--config", help="JSON file with RunConfig keys")
    p.add_argument("--desk", action="store_true", help="start from the reduced CPU configuration")
    p.add_argument("--category", action="append", help="category name (repeatable)")
    for name, typ in OVERRIDES.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)


def build_config(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in OVERRIDES}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "category", None):
        cats = [c for item in args.category for c in item.split(",") if c]
        overrides["categories"] = tuple(cats)
    if args.config:
        return RunConfig.from_file(args.config, **overrides)
    base = desk_config() if args.desk else RunConfig()
    data = base.to_dict()
    data.update(overrides)
    return RunConfig.from_dict(data)


def cmd_gen_synth(args):
    synth.make_benchmark(args.out, seed=args.seed, n_train=args.n_train, n_val=args.n_val,
                         n_test_normal=args.n_test_normal, n_test_anom=args.n_test_anom,
                         category=args.category_name, size=args.size)
    print(f"wrote synthetic category {args.category_name!r} to {args.out}")


def _load_extractor(spec, channels):
    if spec == "random":
        return st_net.make_pdn(channels, seed=12345).eval()
    module_name, _, attr = spec.partition(":")
    if not attr:
        raise ConfigError(f"extractor must be 'random' or 'module:callable', got {spec!r}")
    factory = getattr(importlib.import_module(module_name), attr)
    net = factory()
    return net.eval() if hasattr(net, "eval") else net


def cmd_distill_teacher(args):
    cfg = build_config(args)
    samples = [s for cat in cfg.categories for s in pipeline.load_split(cfg, cat, "train")]
    if not samples:
        raise dataio.DataError("no training samples to distill on")
    extractor = _load_extractor(args.extractor, cfg.st_channels)
    history = []
    teacher = st_net.distill_teacher(
        extractor, samples, st_net.DistillConfig(lr=cfg.distill_lr, batch_size=cfg.st_batch,
                                                 steps=cfg.distill_steps, seed=cfg.seed),
        channels=cfg.st_channels, history=history)
    st_net.fit_feature_normalization(teacher, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save_module(out / "teacher", teacher)
    (out / "teacher.txt").write_text(f"channels {','.join(map(str, teacher.channels))}\n")
    print(f"distillation loss {history[0]:.5f} -> {history[-1]:.5f}; teacher written to {out}")


def load_teacher(path):
    path = Path(path)
    fields = dict(ln.split(" ", 1) for ln in (path / "teacher.txt").read_text().splitlines() if ln)
    channels = tuple(int(v) for v in fields["channels"].split(","))
    return checkpoint.load_module(path / "teacher", st_net.make_pdn(channels)).eval()


def cmd_train(args):
    cfg = build_config(args)
    teacher = None
    if cfg.teacher_mode != "random":
        teacher = load_teacher(cfg.teacher_mode)
    bundle = pipeline.train(cfg, teacher=teacher)
    out = pipeline.save_bundle(bundle, args.out or cfg.output_dir)
    print(f"bundle written to {out}")


def cmd_calibrate(args):
    bundle = pipeline.load_bundle(args.bundle)
    cfg = bundle.config
    if args.dataset_root:
        cfg.dataset_root = args.dataset_root
    for cat in args.category or list(bundle.models):
        model = bundle.models[cat]
        val = pipeline.load_split(cfg, cat, "validation")
        if not val:
            raise dataio.DataError(f"{cat}: calibration needs a non-empty validation split")
        model.stats = pipeline.calibrate_model(cfg, bundle.teacher, model, val)
        print(f"{cat}: " + " ".join(f"{k}={v:.6g}" for k, v in model.stats.as_dict().items()))
    pipeline.save_bundle(bundle, args.bundle)


def _result_path(out, sample_id, suffix):
    p = Path(out) / (sample_id.replace("/", "__") + suffix)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def cmd_infer(args):
    bundle = pipeline.load_bundle(args.bundle)
    cfg = bundle.config
    if args.dataset_root:
        cfg.dataset_root = args.dataset_root
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for cat in args.category or list(bundle.models):
        samples = pipeline.load_split(cfg, cat, args.split)
        for r in pipeline.infer(bundle, cat, samples):
            tifffile.imwrite(_result_path(out, r.sample_id, ".fused.tiff"), r.fused.astype(np.float32))
            if args.debug_maps:
                tifffile.imwrite(_result_path(out, r.sample_id, ".rgb.tiff"), r.rgb_map.astype(np.float32))
                tifffile.imwrite(_result_path(out, r.sample_id, ".sdl.tiff"), r.sdl_map.astype(np.float32))
            rows.append({"sample": r.sample_id, "score": r.score, "label": r.label})
            print(f"{r.sample_id}\t{r.score:.8g}")
    (out / "scores.json").write_text(json.dumps(rows, indent=1) + "\n")


def override_results(override_dir, cfg, category):
    """Results whose fused maps come from ``<dir>/<category>/<defect>/<stem>.tiff``."""
    results = []
    for s in pipeline.load_split(cfg, category, "test"):
        path = Path(override_dir) / category / s.defect / f"{s.stem}.tiff"
        if not path.exists():
            raise dataio.DataError(f"--score-override: missing map {path}")
        m = np.asarray(tifffile.imread(path), dtype=np.float64)
        if m.shape != s.fg.shape:
            raise dataio.DataError(f"{path}: map shape {m.shape} != sample shape {s.fg.shape}")
        results.append(pipeline.SampleResult(s.sample_id, float(m.max()), m, m, m, s.label, s.gt))
    return results


def cmd_eval(args):
    if args.bundle:
        bundle = pipeline.load_bundle(args.bundle)
        cfg = bundle.config
    elif args.score_override:
        bundle, cfg = None, build_config(args)
    else:
        raise ConfigError("eval needs --bundle or --score-override")
    if args.dataset_root:
        cfg.dataset_root = args.dataset_root
    if args.fpr_max is not None:
        cfg.fpr_max = args.fpr_max
    cats = [c for item in (args.category or []) for c in item.split(",") if c]
    cats = cats or (list(bundle.models) if bundle else list(cfg.categories) or dataio.list_categories(cfg.dataset_root))
    by_cat = None
    if args.score_override:
        by_cat = {c: override_results(args.score_override, cfg, c) for c in cats}
    report = pipeline.evaluate(bundle, cats, by_cat) if bundle else _eval_overrides(cfg, by_cat)
    print(report.format_table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.to_json(args.out)


def _eval_overrides(cfg, by_cat):
    report = metrics.EvalReport()
    for cat, results in by_cat.items():
        try:
            i_auroc, aupro_value, _, _ = pipeline.evaluate_results(results, cfg.fpr_max)
        except metrics.MetricError as exc:
            report.errors[cat] = str(exc)
            continue
        report.add(cat, i_auroc, aupro_value)
    return report


def make_parser():
    parser = argparse.ArgumentParser(prog="mdss", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic benchmark category")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--category-name", default="synthetic")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--n-train", type=int, default=50)
    p.add_argument("--n-val", type=int, default=10)
    p.add_argument("--n-test-normal", type=int, default=20)
    p.add_argument("--n-test-anom", type=int, default=20)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("distill-teacher", help="distill a PDN teacher from a frozen extractor")
    _add_run_flags(p)
    p.add_argument("--extractor", default="random", help="'random' or 'module:factory'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill_teacher)

    p = sub.add_parser("train", help="train student, SDF model and calibration per category")
    _add_run_flags(p)
    p.add_argument("--out", help="bundle directory (default: output_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="recompute alignment statistics on the validation split")
    p.add_argument("--bundle", required=True)
    p.add_argument("--dataset-root")
    p.add_argument("--category", action="append")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("infer", help="score samples and write fused maps")
    p.add_argument("--bundle", required=True)
    p.add_argument("--dataset-root")
    p.add_argument("--category", action="append")
    p.add_argument("--split", default="test", choices=dataio.SPLITS)
    p.add_argument("--out", required=True)
    p.add_argument("--debug-maps", action="store_true", help="also write raw branch maps")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="I-AUROC / AUPRO report on the test split")
    _add_run_flags(p)
    p.add_argument("--bundle")
    p.add_argument("--score-override", help="directory of precomputed fused maps")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (dataio.DataError, pipeline.BundleError, checkpoint.CheckpointError,
            metrics.MetricError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, fusion.DegenerateCalibration) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
