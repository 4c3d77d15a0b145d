"""End-to-end training, persistence, inference and evaluation.

A :class:`ModelBundle` holds everything inference needs: one teacher shared
by all categories and per category a student, an SDF model and the
alignment statistics. No training features are stored, so the bundle size
does not depend on the number of training samples.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, dataio, fusion, metrics, sdl, st_net
from .config import RunConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class BundleError(Exception):
    pass


@dataclass
class CategoryModel:
    student: st_net.PDN
    sdf: sdl.SdfModel
    stats: fusion.AlignmentStats = None


@dataclass
class ModelBundle:
    teacher: st_net.PDN
    config: RunConfig
    models: dict = field(default_factory=dict)  # category -> CategoryModel
    version: int = FORMAT_VERSION


@dataclass
class SampleResult:
    sample_id: str
    score: float
    fused: np.ndarray
    rgb_map: np.ndarray
    sdl_map: np.ndarray
    label: str = "normal"
    gt: np.ndarray = None


def set_determinism(cfg: RunConfig):
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)


def load_split(cfg: RunConfig, category, split):
    return dataio.load_dataset(cfg.dataset_root, category, split, size=cfg.image_size,
                               plane_kwargs=cfg.plane_kwargs(), dilation=cfg.dilation)


def make_random_teacher(cfg: RunConfig, samples):
    teacher = st_net.make_pdn(cfg.st_channels, seed=cfg.seed)
    return st_net.fit_feature_normalization(teacher, samples)


def train_category(cfg: RunConfig, teacher, train_samples, val_samples, category="") -> CategoryModel:
    if any(s.is_anomalous for s in train_samples):
        raise dataio.DataError(f"{category}: training split contains anomalous samples")
    if not val_samples:
        raise dataio.DataError(f"{category}: calibration needs a non-empty validation split")
    logger.info("%s: training student on %d images", category, len(train_samples))
    st_state = st_net.train_student(teacher, train_samples, cfg.st_config())
    logger.info("%s: training SDF model", category)
    sdf_state = sdl.train_sdf(train_samples, cfg.sdf_config())
    model = CategoryModel(student=st_state.student, sdf=sdf_state.model)
    model.stats = calibrate_model(cfg, teacher, model, val_samples)
    return model


def branch_maps(cfg: RunConfig, teacher, model: CategoryModel, samples):
    """(rgb_map, sdl_map) per sample."""
    rgb = st_net.rgb_score_maps(teacher, model.student, samples)
    out = []
    for s, (rgb_map, _) in zip(samples, rgb):
        try:
            ps = sdl.build_patches(s.cloud, k=cfg.k_points, seed=cfg.seed, mask=s.fg,
                                   center_factor=cfg.center_factor)
        except sdl.TooFewPoints as exc:
            raise sdl.TooFewPoints(f"{s.sample_id}: {exc}") from exc
        scores = sdl.score_points(model.sdf, ps, aggregate=cfg.aggregate)
        sdl_map, _ = sdl.sdl_score_map(scores, s.fg.shape, sigma=cfg.blur_sigma)
        out.append((rgb_map, sdl_map))
    return out


def calibrate_model(cfg, teacher, model: CategoryModel, val_samples) -> fusion.AlignmentStats:
    maps = branch_maps(cfg, teacher, model, val_samples)
    return fusion.calibrate([m[0] for m in maps], [m[1] for m in maps], [s.fg for s in val_samples])


def train(cfg: RunConfig, teacher=None) -> ModelBundle:
    cfg.validate()
    set_determinism(cfg)
    if not cfg.categories:
        raise dataio.DataError("no categories configured")
    data = {}
    for cat in cfg.categories:
        data[cat] = (load_split(cfg, cat, "train"), load_split(cfg, cat, "validation"))
    if teacher is None:
        pooled = [s for cat in cfg.categories for s in data[cat][0]]
        teacher = make_random_teacher(cfg, pooled)
    bundle = ModelBundle(teacher=teacher, config=cfg)
    for cat in cfg.categories:
        bundle.models[cat] = train_category(cfg, teacher, *data[cat], category=cat)
    return bundle


def fuse(cfg: RunConfig, stats, rgb_map, sdl_map, fg):
    aligned = fusion.align_rgb(rgb_map, stats, fg)
    fused = fusion.fuse_pixel(aligned, sdl_map)
    if cfg.aligned_image_score:
        score = fusion.image_score(aligned, sdl_map)
    else:
        score = fusion.image_score(rgb_map, sdl_map)
    return fused, score


def infer(bundle: ModelBundle, category, samples):
    if bundle.version != FORMAT_VERSION:
        raise BundleError(f"unsupported bundle version {bundle.version}")
    if category not in bundle.models:
        raise BundleError(f"bundle has no model for category {category!r}")
    cfg, model = bundle.config, bundle.models[category]
    results = []
    for s, (rgb_map, sdl_map) in zip(samples, branch_maps(cfg, bundle.teacher, model, samples)):
        fused, score = fuse(cfg, model.stats, rgb_map, sdl_map, s.fg)
        results.append(SampleResult(s.sample_id, score, fused, rgb_map, sdl_map, s.label, s.gt))
    return results


def evaluate_results(results, fpr_max=0.3):
    """(i_auroc, aupro, roc_curve, pro_curve) of one category's results."""
    labels = [r.label == "anomalous" for r in results]
    roc = metrics.roc_curve([r.score for r in results], labels)
    pro = metrics.pro_curve([r.fused for r in results], [r.gt for r in results], fpr_max)
    return roc.auc, pro.aupro, roc, pro


def evaluate(bundle: ModelBundle, categories=None, results_by_category=None) -> metrics.EvalReport:
    report = metrics.EvalReport()
    cfg = bundle.config if bundle is not None else RunConfig()
    categories = categories or (list(results_by_category) if results_by_category else list(bundle.models))
    for cat in categories:
        if results_by_category and cat in results_by_category:
            results = results_by_category[cat]
        else:
            results = infer(bundle, cat, load_split(cfg, cat, "test"))
        try:
            i_auroc, aupro_value, _, _ = evaluate_results(results, cfg.fpr_max)
        except metrics.MetricError as exc:
            report.errors[cat] = str(exc)
            continue
        report.add(cat, i_auroc, aupro_value)
    return report


# persistence

def _stats_lines(cat, stats):
    return [f"stats.{cat}.{k} {v!r}" for k, v in stats.as_dict().items()]


def payload_size(path) -> int:
    """Bytes of weights and statistics in a saved bundle (config snapshot excluded).

    Each alignment statistic counts as one float64; its decimal text length
    varies with the value and says nothing about stored state.
    """
    path = Path(path)
    size = sum(p.stat().st_size for p in path.glob("*.bin"))
    stats = [ln for ln in (path / "bundle.txt").read_text().splitlines() if ln.startswith("stats.")]
    return size + 8 * len(stats)


def save_bundle(bundle: ModelBundle, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    checkpoint.save_module(path / "teacher", bundle.teacher)
    lines = [f"format_version {bundle.version}",
             f"teacher.channels {','.join(map(str, bundle.teacher.channels))}",
             f"categories {','.join(bundle.models)}"]
    for cat, model in bundle.models.items():
        checkpoint.save_module(path / f"student_{cat}", model.student)
        checkpoint.save_module(path / f"sdf_{cat}", model.sdf)
        sdf_cfg = model.sdf.config
        lines.append(f"sdf.{cat}.encoder {','.join(map(str, sdf_cfg['encoder_widths']))}")
        lines.append(f"sdf.{cat}.hidden {','.join(map(str, sdf_cfg['hidden']))}")
        lines.append(f"sdf.{cat}.beta {sdf_cfg['beta']!r}")
        if model.stats is not None:
            lines += _stats_lines(cat, model.stats)
    (path / "bundle.txt").write_text("\n".join(lines) + "\n")
    (path / "config.json").write_text(bundle.config.to_json() + "\n")
    return path


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v)


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    try:
        entries = dict(ln.split(" ", 1) for ln in (path / "bundle.txt").read_text().splitlines() if ln)
        cfg = RunConfig.from_dict(json.loads((path / "config.json").read_text()))
    except (OSError, ValueError) as exc:
        raise BundleError(f"cannot read bundle at {path}: {exc}") from exc
    version = int(entries.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise BundleError(f"bundle format {version} is not supported (expected {FORMAT_VERSION})")
    teacher = checkpoint.load_module(path / "teacher", st_net.make_pdn(_ints(entries["teacher.channels"])))
    teacher.eval()
    bundle = ModelBundle(teacher=teacher, config=cfg, version=version)
    for cat in entries.get("categories", "").split(","):
        if not cat:
            continue
        student = checkpoint.load_module(path / f"student_{cat}", st_net.make_pdn(teacher.channels))
        sdf_model = sdl.make_sdf_model(_ints(entries[f"sdf.{cat}.encoder"]), _ints(entries[f"sdf.{cat}.hidden"]),
                                       float(entries[f"sdf.{cat}.beta"]))
        checkpoint.load_module(path / f"sdf_{cat}", sdf_model)
        stats = None
        if f"stats.{cat}.mu_rgb" in entries:
            stats = fusion.AlignmentStats(**{k: float(entries[f"stats.{cat}.{k}"])
                                             for k in ("mu_rgb", "sigma_rgb", "mu_3d", "sigma_3d")})
        bundle.models[cat] = CategoryModel(student.eval(), sdf_model.eval(), stats)
    return bundle
