"""Procedural RGB + organized point cloud scenes with color and geometric defects.

A scene is an elliptical object resting on a flat background plane. Its top
is a smooth heightfield and its texture a smooth color field, both with
additive Gaussian noise. Color blotches change only the RGB image; bumps
and dents change only the heightfield, so each defect kind is visible to
exactly one branch.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import NORMAL_DEFECT, OrganizedCloud, Sample, write_sample

DEFECT_KINDS = ("color_blotch", "dent", "bump")


@dataclass(frozen=True)
class SceneSpec:
    size: int = 128
    seed: int = 0
    surface: str = "heightfield"  # or "plane"
    height: float = 0.3
    waviness: float = 0.04  # amplitude of the low-frequency height terms
    center: tuple = (0.0, 0.0)  # silhouette centre, normalized image coordinates
    radii: tuple = (0.6, 0.6)
    color: tuple = (0.62, 0.45, 0.30)
    background_color: tuple = (0.18, 0.18, 0.2)
    texture: float = 0.05  # amplitude of the low-frequency color field
    rgb_noise: float = 0.02
    surface_noise: float = 0.004
    background_noise: float = 0.0005


@dataclass(frozen=True)
class DefectSpec:
    kind: str
    center: tuple  # (row, col) pixel
    radius: float  # pixels
    magnitude: float  # color shift for blotches, height for dents / bumps
    direction: tuple = (1.0, -1.0, -1.0)  # per-channel sign of a color shift

    def footprint(self, size):
        rr, cc = np.mgrid[:size, :size]
        return (rr - self.center[0]) ** 2 + (cc - self.center[1]) ** 2 <= self.radius ** 2


def random_scene(seed, size=128, **overrides) -> SceneSpec:
    """Scene with mildly jittered silhouette and color, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    kw = dict(
        size=size, seed=int(seed),
        center=tuple(float(v) for v in rng.uniform(-0.05, 0.05, 2)),
        radii=tuple(float(v) for v in rng.uniform(0.55, 0.65, 2)),
        color=tuple(float(v) for v in np.array([0.62, 0.45, 0.30]) + rng.uniform(-0.02, 0.02, 3)),
    )
    kw.update(overrides)
    return SceneSpec(**kw)


def grid_coords(size):
    lin = np.linspace(-1.0, 1.0, size)
    y, x = np.meshgrid(lin, lin, indexing="ij")
    return x, y


def silhouette(spec: SceneSpec) -> np.ndarray:
    x, y = grid_coords(spec.size)
    return ((x - spec.center[1]) / spec.radii[1]) ** 2 + ((y - spec.center[0]) / spec.radii[0]) ** 2 <= 1.0


def _smooth_field(rng, x, y, amplitude, n_terms=3):
    out = np.zeros_like(x)
    for _ in range(n_terms):
        fx, fy = rng.uniform(0.5, 1.5, 2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(np.pi * (fx * x + fy * y) + phase)
    return amplitude * out / n_terms


def generate(spec: SceneSpec, defects=(), *, category="synthetic", split="test", stem="000") -> Sample:
    """Render one sample; non-empty ``defects`` make it anomalous (test split only)."""
    defects = tuple(defects)
    if defects and split != "test":
        raise ValueError(f"defects are only allowed in the test split, not {split!r}")
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    x, y = grid_coords(n)
    obj = silhouette(spec)

    height = np.full((n, n), spec.height)
    if spec.surface == "heightfield":
        height = height + _smooth_field(rng, x, y, spec.waviness)
    elif spec.surface != "plane":
        raise ValueError(f"unknown surface {spec.surface!r}")
    tex = _smooth_field(rng, x, y, spec.texture)
    rgb = np.where(obj[..., None], np.asarray(spec.color) + tex[..., None],
                   np.asarray(spec.background_color))
    rgb = rgb + rng.normal(0.0, spec.rgb_noise, rgb.shape)
    z_noise = rng.normal(0.0, 1.0, (n, n))
    z = np.where(obj, height + spec.surface_noise * z_noise, spec.background_noise * z_noise)

    gt = np.zeros((n, n), dtype=bool)
    for dfx in defects:
        if dfx.kind not in DEFECT_KINDS:
            raise ValueError(f"unknown defect kind {dfx.kind!r}")
        fp = dfx.footprint(n)
        if not fp.any() or (fp & ~obj).any():
            raise ValueError(f"defect at {dfx.center} r={dfx.radius} leaves the object silhouette")
        gt |= fp
        if dfx.kind == "color_blotch":
            rgb[fp] += dfx.magnitude * np.asarray(dfx.direction, dtype=np.float64)
        else:
            rr, cc = np.mgrid[:n, :n]
            d2 = ((rr - dfx.center[0]) ** 2 + (cc - dfx.center[1]) ** 2) / dfx.radius ** 2
            sign = 1.0 if dfx.kind == "bump" else -1.0
            z = z + np.where(fp, sign * dfx.magnitude * (1.0 - d2), 0.0)

    # 8-bit RGB so that writing and re-reading is lossless
    rgb = np.clip(np.rint(np.clip(rgb, 0.0, 1.0) * 255.0), 0, 255).astype(np.float32) / 255.0
    xyz = np.stack([x, y, z], axis=-1).astype(np.float32)
    cloud = OrganizedCloud(xyz, np.ones((n, n), dtype=bool))
    label = "anomalous" if defects else "normal"
    defect_name = defects[0].kind if defects else NORMAL_DEFECT
    return Sample(rgb=rgb, cloud=cloud, fg=cloud.valid.copy(),
                  gt=gt if split == "test" else None, label=label, category=category,
                  split=split, defect=defect_name, stem=stem)


def random_defect(rng, spec: SceneSpec, kind, magnitude, radius_range=(6.0, 10.0)) -> DefectSpec:
    """Defect of ``kind`` placed uniformly inside the object, away from its rim."""
    obj = silhouette(spec)
    radius = float(rng.uniform(*radius_range))
    direction = (1.0, -1.0, -1.0)
    if kind == "color_blotch":
        direction = tuple(float(v) for v in rng.choice([-1.0, 1.0], 3))
    for _ in range(1000):
        center = tuple(int(v) for v in rng.integers(0, spec.size, 2))
        dfx = DefectSpec(kind, center, radius, float(magnitude), direction)
        fp = dfx.footprint(spec.size)
        if fp.any() and not (fp & ~obj).any():
            return dfx
    raise RuntimeError("could not place a defect inside the silhouette")


def _child_seed(seed, *path):
    return int(np.random.SeedSequence([int(seed), *path]).generate_state(1)[0])


def make_benchmark(root, seed=0, n_train=50, n_val=10, n_test_normal=20, n_test_anom=20,
                   category="synthetic", size=128, snr_range=(2.0, 8.0), **scene_overrides) -> Path:
    """Write a complete dataset for one category and a ``manifest.json`` next to it.

    Anomalous test samples alternate between color blotches and geometric
    defects (bumps and dents in turn); magnitudes are spread evenly over
    ``snr_range`` times the noise level of the affected modality.
    """
    root = Path(root)
    records = []
    plan = [("train", i, None) for i in range(n_train)]
    plan += [("validation", i, None) for i in range(n_val)]
    plan += [("test", i, None) for i in range(n_test_normal)]
    n_color = (n_test_anom + 1) // 2
    n_geom = n_test_anom - n_color
    color_snr = np.linspace(*snr_range, n_color) if n_color > 1 else np.full(n_color, snr_range[1])
    geom_snr = np.linspace(*snr_range, n_geom) if n_geom > 1 else np.full(n_geom, snr_range[1])
    for j in range(n_test_anom):
        if j % 2 == 0:
            plan.append(("test", n_test_normal + j, ("color_blotch", float(color_snr[j // 2]))))
        else:
            kind = "bump" if (j // 2) % 2 == 0 else "dent"
            plan.append(("test", n_test_normal + j, (kind, float(geom_snr[j // 2]))))
    split_code = {"train": 0, "validation": 1, "test": 2}
    for split, i, defect in plan:
        sample_seed = _child_seed(seed, split_code[split], i)
        spec = random_scene(sample_seed, size=size, **scene_overrides)
        defects = []
        if defect is not None:
            kind, snr = defect
            noise = spec.rgb_noise if kind == "color_blotch" else spec.surface_noise
            rng = np.random.default_rng(_child_seed(seed, 3, i))
            defects.append(random_defect(rng, spec, kind, snr * noise))
        stem = f"{i:03d}"
        sample = generate(spec, defects, category=category, split=split, stem=stem)
        write_sample(root, sample)
        records.append({
            "split": split, "defect": sample.defect, "stem": stem, "seed": sample_seed,
            "scene": asdict(spec),
            "defects": [dict(asdict(d), snr=d.magnitude / (spec.rgb_noise if d.kind == "color_blotch"
                                                          else spec.surface_noise)) for d in defects],
        })
    manifest = {"seed": int(seed), "category": category, "size": size,
                "counts": {"train": n_train, "validation": n_val,
                           "test_normal": n_test_normal, "test_anomalous": n_test_anom},
                "samples": records}
    (root / category).mkdir(parents=True, exist_ok=True)
    with open(root / category / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return root
