"""Run configuration: defaults, JSON config files and range validation."""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset_root: str = ""
    categories: tuple = ()
    output_dir: str = "runs/default"
    image_size: int = 256
    # preprocessing
    plane_threshold_factor: float = 0.005
    ransac_iterations: int = 1000
    min_plane_fraction: float = 0.1
    dilation: int = 8
    # student-teacher branch
    teacher_mode: str = "random"  # "random" or a path to a saved teacher
    st_channels: tuple = (128, 256, 256, 384)
    st_lr: float = 1e-3
    st_batch: int = 4
    st_steps: int = 5000
    d_start: float = 0.99
    d_end: float = 0.999
    d_foreground_only: bool = False
    distill_steps: int = 10000
    distill_lr: float = 1e-3
    # signed distance branch
    k_points: int = 500
    sdf_batch: int = 32
    sdf_steps: int = 3000
    sdf_lr_max: float = 1e-3
    sdf_lr_min: float = 1e-5
    query_sigma: float = 0.05
    queries_per_patch: int = 500
    center_factor: float = 1.5
    sdf_encoder: tuple = (64, 128, 256)
    sdf_hidden: tuple = (512, 512)
    sdf_beta: float = 100.0
    aggregate: str = "mean"
    # fusion and evaluation
    blur_sigma: float = 4.0
    aligned_image_score: bool = False
    fpr_max: float = 0.3
    seed: int = 0
    deterministic: bool = True

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.image_size >= 40, f"image_size must be >= 40, got {self.image_size}")
        need(0 < self.d_start < 1 and 0 < self.d_end < 1, "d_start and d_end must lie in (0, 1)")
        need(self.st_lr > 0 and self.sdf_lr_max > 0 and self.sdf_lr_min >= 0, "learning rates must be positive")
        need(self.sdf_lr_min <= self.sdf_lr_max, "sdf_lr_min must not exceed sdf_lr_max")
        need(self.st_batch >= 1 and self.sdf_batch >= 1, "batch sizes must be positive")
        need(self.st_steps >= 1 and self.sdf_steps >= 1, "step counts must be positive")
        need(self.k_points >= 2, f"k_points must be >= 2, got {self.k_points}")
        need(self.queries_per_patch >= 1, "queries_per_patch must be positive")
        need(self.center_factor > 0, "center_factor must be positive")
        need(self.blur_sigma > 0, f"blur_sigma must be positive, got {self.blur_sigma}")
        need(0 < self.fpr_max <= 1, f"fpr_max must lie in (0, 1], got {self.fpr_max}")
        need(self.dilation >= 1, "dilation must be positive")
        need(self.aggregate in ("mean", "max"), f"aggregate must be 'mean' or 'max', got {self.aggregate!r}")
        need(len(self.st_channels) == 4, "st_channels needs four entries")
        need(0 < self.min_plane_fraction <= 1, "min_plane_fraction must lie in (0, 1]")
        return self

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in data.items():
            default = known[k].default
            if isinstance(default, tuple):
                v = tuple(v) if isinstance(v, (list, tuple)) else tuple(str(v).split(","))
                if k != "categories":
                    v = tuple(int(x) for x in v)
            kw[k] = v
        return cls(**kw).validate()

    @classmethod
    def from_file(cls, path, **overrides):
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def st_config(self):
        from .st_net import StConfig

        return StConfig(lr=self.st_lr, batch_size=self.st_batch, steps=self.st_steps,
                        d_start=self.d_start, d_end=self.d_end,
                        foreground_only=self.d_foreground_only, seed=self.seed)

    def sdf_config(self):
        from .sdl import SdfConfig

        return SdfConfig(k=self.k_points, batch_size=self.sdf_batch, steps=self.sdf_steps,
                         lr_max=self.sdf_lr_max, lr_min=self.sdf_lr_min,
                         query_sigma=self.query_sigma, queries_per_patch=self.queries_per_patch,
                         center_factor=self.center_factor, encoder_widths=tuple(self.sdf_encoder),
                         hidden=tuple(self.sdf_hidden), beta=self.sdf_beta, seed=self.seed)

    def plane_kwargs(self):
        return {"threshold_factor": self.plane_threshold_factor, "iterations": self.ransac_iterations,
                "seed": self.seed, "min_inlier_fraction": self.min_plane_fraction}


def desk_config(**overrides) -> RunConfig:
    """Reduced widths and step counts for CPU-only runs on small synthetic sets."""
    kw = dict(image_size=128, st_channels=(64, 128, 128, 128), st_steps=1000,
              sdf_steps=1000, sdf_hidden=(128, 128), queries_per_patch=128)
    kw.update(overrides)
    return RunConfig(**kw).validate()
