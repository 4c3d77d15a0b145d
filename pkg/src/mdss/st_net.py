"""Patch description network (PDN) teacher/student and the dynamic hard-element loss."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .gridops import CosineSchedule, bilinear_resize, quantile_index

logger = logging.getLogger(__name__)

DEFAULT_CHANNELS = (128, 256, 256, 384)
# zero cells added around the feature grid before upsampling to image size
PAD_CELLS = 4

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class PDN(nn.Module):
    """Four unpadded convolutions with two 2x2 average pools; 33x33 receptive field.

    Outputs are standardized per channel with the ``feat_mean`` /
    ``feat_std`` buffers (identity until :func:`fit_feature_normalization`).
    """

    def __init__(self, channels=DEFAULT_CHANNELS):
        super().__init__()
        c1, c2, c3, c_out = channels
        self.channels = tuple(channels)
        self.conv1 = nn.Conv2d(3, c1, kernel_size=4)
        self.conv2 = nn.Conv2d(c1, c2, kernel_size=4)
        self.conv3 = nn.Conv2d(c2, c3, kernel_size=3)
        self.conv4 = nn.Conv2d(c3, c_out, kernel_size=4)
        self.pool = nn.AvgPool2d(kernel_size=2, stride=2)
        self.register_buffer("input_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.register_buffer("feat_mean", torch.zeros(1, c_out, 1, 1))
        self.register_buffer("feat_std", torch.ones(1, c_out, 1, 1))

    @property
    def out_channels(self):
        return self.channels[-1]

    def raw_features(self, x):
        x = (x - self.input_mean) / self.input_std
        x = self.pool(F.relu(self.conv1(x)))
        x = self.pool(F.relu(self.conv2(x)))
        x = F.relu(self.conv3(x))
        return self.conv4(x)

    def forward(self, x):
        return (self.raw_features(x) - self.feat_mean) / self.feat_std


def feature_grid_size(n: int) -> int:
    """Spatial size of the PDN output for an ``n``-pixel input side."""
    n = (n - 3) // 2
    n = (n - 3) // 2
    return n - 2 - 3


def make_pdn(channels=DEFAULT_CHANNELS, seed=0, dtype=torch.float32) -> PDN:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = PDN(channels)
    finally:
        torch.random.set_rng_state(gen_state)
    return net.to(dtype)


def images_to_tensor(images, dtype=torch.float32):
    """Stack (H, W, 3) arrays (or Samples) into an (N, 3, H, W) tensor."""
    arrs = [getattr(im, "rgb", im) for im in images]
    x = np.stack([np.asarray(a, dtype=np.float64) for a in arrs]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


def check_finite(net: nn.Module):
    for name, p in net.state_dict().items():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"non-finite values in parameter {name}")


def pdn_forward(net: PDN, images) -> torch.Tensor:
    """Features of a batch of images; accepts a tensor or a sequence of arrays."""
    check_finite(net)
    x = images if torch.is_tensor(images) else images_to_tensor(images, net.conv1.weight.dtype)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    with torch.no_grad():
        return net(x)


@torch.no_grad()
def fit_feature_normalization(net: PDN, images, batch_size=8):
    """Set ``feat_mean`` / ``feat_std`` to the channel statistics of raw outputs."""
    x = images if torch.is_tensor(images) else images_to_tensor(images, net.conv1.weight.dtype)
    total, total_sq, count = 0.0, 0.0, 0
    for i in range(0, len(x), batch_size):
        f = net.raw_features(x[i:i + batch_size]).double()
        total = total + f.sum(dim=(0, 2, 3))
        total_sq = total_sq + (f ** 2).sum(dim=(0, 2, 3))
        count += f.shape[0] * f.shape[2] * f.shape[3]
    mean = total / count
    std = torch.sqrt(torch.clamp(total_sq / count - mean ** 2, min=0.0)) + 1e-6
    net.feat_mean.copy_(mean.view(1, -1, 1, 1))
    net.feat_std.copy_(std.view(1, -1, 1, 1))
    return net


def downsample_mask(fg, out_h, out_w=None, pad_cells=0) -> np.ndarray:
    """Majority vote of each feature cell's pixel footprint.

    The image is split into ``out + 2 * pad_cells`` bins per axis, bin ``i``
    covering pixels ``floor(i*H/n) .. floor((i+1)*H/n) - 1``; the outer
    ``pad_cells`` bins are dropped. A cell is foreground iff more than half
    of its footprint is.
    """
    out_w = out_h if out_w is None else out_w
    fg = np.asarray(fg, dtype=np.float64)
    h, w = fg.shape
    nh, nw = out_h + 2 * pad_cells, out_w + 2 * pad_cells
    rows = (np.arange(nh + 1) * h) // nh
    cols = (np.arange(nw + 1) * w) // nw
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = fg.cumsum(0).cumsum(1)
    area_sum = (integral[rows[1:]][:, cols[1:]] - integral[rows[:-1]][:, cols[1:]]
                - integral[rows[1:]][:, cols[:-1]] + integral[rows[:-1]][:, cols[:-1]])
    area = np.outer(np.diff(rows), np.diff(cols))
    inner = (slice(pad_cells, pad_cells + out_h), slice(pad_cells, pad_cells + out_w))
    return (area_sum * 2 > area)[inner]


def grid_to_image(small, h, w, pad_cells=PAD_CELLS) -> np.ndarray:
    """Zero-pad a feature-grid map by ``pad_cells`` and resize it bilinearly to (h, w).

    With 4 cells of padding the 33-pixel receptive fields at stride 4 line up
    with the pixels they describe.
    """
    if pad_cells:
        small = np.pad(small, pad_cells)
    return bilinear_resize(small, h, w)


def discrepancy(teacher_out, student_out):
    """Channel-summed squared difference, shape (N, H', W')."""
    return ((teacher_out - student_out) ** 2).sum(dim=1)


def dynamic_loss(D, M, d, foreground_only=False):
    """Mean of the masked discrepancies strictly above their ``d``-quantile.

    The quantile is the lower-index order statistic of all entries of
    ``D * M`` (or only the foreground entries with ``foreground_only``). When
    nothing exceeds it the maximum entry is returned instead.
    """
    if not 0 < d < 1:
        raise ValueError(f"d must lie in (0, 1), got {d}")
    M = torch.as_tensor(M, device=D.device)
    DM = D * M.to(D.dtype)
    flat = DM[M.bool()] if foreground_only else DM.reshape(-1)
    if flat.numel() == 0:
        if DM.numel() == 0:
            raise ValueError("dynamic loss of an empty grid")
        return DM.sum() * 0.0
    k = quantile_index(flat.numel(), d)
    threshold = torch.kthvalue(flat.detach(), k + 1).values
    hard = flat[flat > threshold]
    if hard.numel() == 0:
        return flat.max()
    return hard.mean()


@dataclass
class StConfig:
    lr: float = 1e-3
    batch_size: int = 4
    steps: int = 5000
    d_start: float = 0.99
    d_end: float = 0.999
    foreground_only: bool = False
    seed: int = 0
    init_from_teacher: bool = False


@dataclass
class StTrainState:
    student: PDN
    optimizer: torch.optim.Optimizer
    schedule: CosineSchedule
    step: int = 0
    loss_history: list = field(default_factory=list)


def _require_normal(samples, what):
    bad = [s.sample_id for s in samples if getattr(s, "is_anomalous", False)]
    if bad:
        raise ValueError(f"{what} must use normal samples only; got anomalous {bad[:3]}")


def _batches(n, batch_size, steps, generator):
    order = []
    for _ in range(steps):
        if len(order) < batch_size:
            order.extend(torch.randperm(n, generator=generator).tolist())
        yield order[:batch_size]
        del order[:batch_size]


def train_student(teacher: PDN, samples, cfg: StConfig = None, student: PDN = None,
                  pad_cells=PAD_CELLS) -> StTrainState:
    """Fit a student to the frozen teacher on normal images with the dynamic loss."""
    cfg = cfg or StConfig()
    _require_normal(samples, "student training")
    if len(samples) == 0:
        raise ValueError("student training needs at least one sample")
    dtype = teacher.conv1.weight.dtype
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    if student is None:
        if cfg.init_from_teacher:
            student = make_pdn(teacher.channels, dtype=dtype)
            student.load_state_dict(teacher.state_dict())
        else:
            student = make_pdn(teacher.channels, seed=cfg.seed + 1, dtype=dtype)
    student.train()
    x = images_to_tensor(samples, dtype)
    g = feature_grid_size(x.shape[-1])
    masks = torch.from_numpy(np.stack([downsample_mask(s.fg, g, g, pad_cells) for s in samples]))
    # teacher targets are cached unless that would cost more than ~1 GB
    cache = None
    if len(samples) * teacher.out_channels * g * g * x.element_size() < 2 ** 30:
        with torch.no_grad():
            cache = torch.cat([teacher(x[i:i + 8]) for i in range(0, len(x), 8)])
    opt = torch.optim.Adam(student.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    schedule = CosineSchedule(cfg.d_start, cfg.d_end, max(cfg.steps - 1, 1))
    state = StTrainState(student=student, optimizer=opt, schedule=schedule)
    gen = torch.Generator().manual_seed(cfg.seed)
    for idx in _batches(len(samples), min(cfg.batch_size, len(samples)), cfg.steps, gen):
        d = schedule.value(min(state.step, schedule.total_steps))
        if cache is not None:
            t_out = cache[idx]
        else:
            with torch.no_grad():
                t_out = teacher(x[idx])
        loss = dynamic_loss(discrepancy(t_out, student(x[idx])), masks[idx], d,
                            foreground_only=cfg.foreground_only)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        state.loss_history.append(float(loss.detach()))
        state.step += 1
        if state.step % 500 == 0:
            logger.info("student step %d/%d loss %.5f", state.step, cfg.steps, float(loss.detach()))
    student.eval()
    return state


@torch.no_grad()
def rgb_score_maps(teacher: PDN, student: PDN, samples, batch_size=8, pad_cells=PAD_CELLS):
    """Per-sample (map, image_score): channel-mean squared difference upsampled to the image."""
    results = []
    dtype = teacher.conv1.weight.dtype
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x = images_to_tensor(chunk, dtype)
        diff = ((teacher(x) - student(x)) ** 2).mean(dim=1).double().numpy()
        for s, small in zip(chunk, diff):
            h, w = s.rgb.shape[:2]
            m = np.where(s.fg, grid_to_image(small, h, w, pad_cells), 0.0)
            results.append((m, float(m.max())))
    return results


def rgb_score_map(teacher: PDN, student: PDN, sample, pad_cells=PAD_CELLS):
    return rgb_score_maps(teacher, student, [sample], pad_cells=pad_cells)[0]


@dataclass
class DistillConfig:
    lr: float = 1e-3
    batch_size: int = 4
    steps: int = 500
    seed: int = 0


def distill_teacher(extractor, samples, cfg: DistillConfig = None, channels=None,
                    history=None) -> PDN:
    """Train a PDN to regress the features of a frozen ``extractor`` (MSE).

    ``extractor`` maps an (N, 3, H, W) batch to (N, C, h, w) features; they
    are bilinearly resampled to the PDN grid when ``h, w`` differ. Losses are
    appended to ``history`` when given.
    """
    cfg = cfg or DistillConfig()
    _require_normal(samples, "teacher distillation")
    x = images_to_tensor(samples)
    with torch.no_grad():
        probe = extractor(x[:1])
    c = probe.shape[1]
    channels = tuple(channels) if channels else DEFAULT_CHANNELS[:3] + (c,)
    if channels[-1] != c:
        raise ValueError(f"extractor yields {c} channels, teacher expects {channels[-1]}")
    teacher = make_pdn(channels, seed=cfg.seed)
    g = feature_grid_size(x.shape[-1])

    def target(batch):
        with torch.no_grad():
            f = extractor(batch).to(x.dtype)
        if f.shape[-2:] != (g, g):
            f = F.interpolate(f, size=(g, g), mode="bilinear", align_corners=False)
        return f

    opt = torch.optim.Adam(teacher.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    for step, idx in enumerate(_batches(len(samples), min(cfg.batch_size, len(samples)), cfg.steps, gen)):
        loss = F.mse_loss(teacher(x[idx]), target(x[idx]))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if history is not None:
            history.append(float(loss.detach()))
        if (step + 1) % 500 == 0:
            logger.info("distill step %d/%d loss %.5f", step + 1, cfg.steps, float(loss.detach()))
    teacher.eval()
    return teacher
