"""Signed-distance learning on local point-cloud patches.

Patches are K-nearest-neighbour sets around farthest-point-sampled centres.
Each patch is normalized to the unit ball; a PointNet-style encoder turns
the patch into a feature and an implicit MLP predicts the signed distance
of query coordinates to the patch surface. Training uses the pull
objective: a query moved by ``-f(q) * grad f(q) / |grad f(q)|`` should land
on its nearest patch point.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn
from torch.nn import functional as F

from .dataio import DataError
from .gridops import CosineSchedule, gaussian_blur

logger = logging.getLogger(__name__)


class TooFewPoints(DataError):
    pass


def farthest_point_sample(points, m, seed=0, start=None) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index.

    The first index is ``start`` if given, otherwise drawn from ``seed``.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if m > n:
        raise ValueError(f"cannot sample {m} of {n} points")
    if m <= 0:
        return np.zeros(0, dtype=np.int64)
    first = int(np.random.default_rng(seed).integers(n)) if start is None else int(start)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = first
    min_d = ((pts - pts[first]) ** 2).sum(axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(min_d))
        chosen[i] = nxt
        np.minimum(min_d, ((pts - pts[nxt]) ** 2).sum(axis=1), out=min_d)
    return chosen


@dataclass(frozen=True)
class Patch:
    points: np.ndarray  # (K, 3)
    pixel_index: np.ndarray  # (K, 2) row, col
    centroid: np.ndarray  # (3,)
    scale: float

    @property
    def normalized(self) -> np.ndarray:
        return (self.points - self.centroid) / self.scale


@dataclass
class PatchSet:
    """Overlapping K-point patches over the valid points of one organized cloud.

    ``members[p]`` indexes into ``pixels`` (the (N, 2) pixel coordinates of
    the cloud's valid points, row-major order).
    """

    members: np.ndarray  # (P, K) int
    points: np.ndarray  # (N, 3) float64
    pixels: np.ndarray  # (N, 2) int
    centroids: np.ndarray  # (P, 3)
    scales: np.ndarray  # (P,)

    def __len__(self):
        return len(self.members)

    @property
    def k(self):
        return self.members.shape[1]

    @property
    def patches(self):
        return [self.patch(i) for i in range(len(self))]

    def patch(self, i) -> Patch:
        idx = self.members[i]
        return Patch(self.points[idx], self.pixels[idx], self.centroids[i], float(self.scales[i]))

    def normalized(self) -> np.ndarray:
        """(P, K, 3) patch points in unit-ball coordinates."""
        return (self.points[self.members] - self.centroids[:, None]) / self.scales[:, None, None]

    def coverage(self) -> np.ndarray:
        count = np.zeros(len(self.points), dtype=np.int64)
        np.add.at(count, self.members.ravel(), 1)
        return count


def build_patches(cloud, k=500, seed=0, mask=None, center_factor=1.5) -> PatchSet:
    """Cover every valid (and ``mask``-selected) point with K-nearest-neighbour patches.

    ``ceil(center_factor * N / K)`` FPS centres are drawn first; further
    centres are added, farthest uncovered point first, until every point
    belongs to a patch. Patches with identical membership are kept once.
    """
    valid = cloud.valid if mask is None else cloud.valid & np.asarray(mask, dtype=bool)
    pixels = np.argwhere(valid)
    pts = cloud.xyz[valid].astype(np.float64)
    n = len(pts)
    if n < k:
        raise TooFewPoints(f"need at least {k} valid points for a patch, got {n}")
    m = min(n, math.ceil(center_factor * n / k))
    centers = list(farthest_point_sample(pts, m, seed=seed))
    tree = cKDTree(pts)
    _, members = tree.query(pts[centers], k=k)
    members = np.atleast_2d(members)
    covered = np.zeros(n, dtype=bool)
    covered[members.ravel()] = True
    extra = []
    if not covered.all():
        min_d = np.full(n, np.inf)
        for c in centers:
            np.minimum(min_d, ((pts - pts[c]) ** 2).sum(axis=1), out=min_d)
        while not covered.all():
            c = int(np.argmax(np.where(covered, -1.0, min_d)))
            _, nb = tree.query(pts[c], k=k)
            extra.append(nb)
            covered[nb] = True
            np.minimum(min_d, ((pts - pts[c]) ** 2).sum(axis=1), out=min_d)
    if extra:
        members = np.concatenate([members, np.stack(extra)])
    members = np.sort(members, axis=1)
    _, first = np.unique(members, axis=0, return_index=True)
    members = members[np.sort(first)]
    patch_pts = pts[members]
    centroids = patch_pts.mean(axis=1)
    scales = np.linalg.norm(patch_pts - centroids[:, None], axis=2).max(axis=1)
    scales = np.maximum(scales, 1e-12)
    return PatchSet(members=members, points=pts, pixels=pixels, centroids=centroids, scales=scales)


class PointEncoder(nn.Module):
    """Shared per-point MLP followed by max-pooling over the patch."""

    def __init__(self, widths=(64, 128, 256)):
        super().__init__()
        dims = (3,) + tuple(widths)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    @property
    def out_dim(self):
        return self.layers[-1].out_features

    def forward(self, pts):  # (B, K, 3) -> (B, F)
        x = pts
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x.max(dim=1).values


class ImplicitFunction(nn.Module):
    """MLP over (query, patch feature) with softplus activations."""

    def __init__(self, feat_dim=256, hidden=(512, 512), beta=100.0):
        super().__init__()
        dims = (3 + feat_dim,) + tuple(hidden) + (1,)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.beta = beta

    def forward(self, q, feat):  # (B, Q, 3), (B, F) -> (B, Q)
        x = torch.cat([q, feat[:, None, :].expand(-1, q.shape[1], -1)], dim=-1)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.softplus(x, beta=self.beta)
        return x.squeeze(-1)


class SdfModel(nn.Module):
    def __init__(self, encoder_widths=(64, 128, 256), hidden=(512, 512), beta=100.0):
        super().__init__()
        self.encoder = PointEncoder(encoder_widths)
        self.implicit = ImplicitFunction(self.encoder.out_dim, hidden, beta)
        self.config = {"encoder_widths": tuple(encoder_widths), "hidden": tuple(hidden), "beta": beta}

    def forward(self, patch_pts, queries):
        return self.implicit(queries, self.encoder(patch_pts))


def make_sdf_model(encoder_widths=(64, 128, 256), hidden=(512, 512), beta=100.0, seed=0,
                   dtype=torch.float32) -> SdfModel:
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = SdfModel(encoder_widths, hidden, beta)
    finally:
        torch.random.set_rng_state(state)
    return model.to(dtype)


def pull_loss(model: SdfModel, patch_pts, queries, min_grad=1e-8, create_graph=True):
    """Pull objective for a batch of normalized patches.

    Returns ``(loss, n_skipped)``; queries whose gradient norm falls below
    ``min_grad`` are left out of the mean.
    """
    if not queries.requires_grad:
        queries = queries.detach().requires_grad_(True)
    f = model(patch_pts, queries)
    (grad,) = torch.autograd.grad(f.sum(), queries, create_graph=create_graph)
    norm = grad.norm(dim=-1)
    ok = norm >= min_grad
    pulled = queries - (f / torch.where(ok, norm, torch.ones_like(norm)))[..., None] * grad
    with torch.no_grad():
        nn_idx = torch.cdist(queries, patch_pts).argmin(dim=-1)
    target = torch.gather(patch_pts, 1, nn_idx[..., None].expand(-1, -1, 3))
    err = ((pulled - target) ** 2).sum(dim=-1)
    n_ok = int(ok.sum())
    if n_ok == 0:
        return err.sum() * 0.0, int(err.numel())
    return err[ok].sum() / n_ok, int(err.numel()) - n_ok


@dataclass
class SdfConfig:
    k: int = 500
    batch_size: int = 32
    steps: int = 3000
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    query_sigma: float = 0.05
    queries_per_patch: int = 500
    center_factor: float = 1.5
    encoder_widths: tuple = (64, 128, 256)
    hidden: tuple = (512, 512)
    beta: float = 100.0
    seed: int = 0


@dataclass
class SdfTrainState:
    model: SdfModel
    loss_history: list = field(default_factory=list)
    skipped_queries: int = 0


def collect_patches(samples, k=500, seed=0, center_factor=1.5) -> np.ndarray:
    """Normalized (P, K, 3) patches pooled over the samples' foreground clouds."""
    out = []
    for i, s in enumerate(samples):
        try:
            ps = build_patches(s.cloud, k=k, seed=seed + i, mask=s.fg, center_factor=center_factor)
        except TooFewPoints as exc:
            raise TooFewPoints(f"{s.sample_id}: {exc}") from exc
        out.append(ps.normalized())
    return np.concatenate(out)


def train_sdf(samples, cfg: SdfConfig = None, patches=None) -> SdfTrainState:
    """Train encoder + implicit function on normal clouds of one category."""
    cfg = cfg or SdfConfig()
    bad = [s.sample_id for s in samples if getattr(s, "is_anomalous", False)]
    if bad:
        raise ValueError(f"SDF training must use normal samples only; got anomalous {bad[:3]}")
    if patches is None:
        patches = collect_patches(samples, cfg.k, cfg.seed, cfg.center_factor)
    data = torch.from_numpy(np.asarray(patches, dtype=np.float32))
    model = make_sdf_model(cfg.encoder_widths, cfg.hidden, cfg.beta, seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_max)
    lr_sched = CosineSchedule(cfg.lr_max, cfg.lr_min, max(cfg.steps - 1, 1))
    gen = torch.Generator().manual_seed(cfg.seed)
    state = SdfTrainState(model=model)
    n_patches, k = data.shape[:2]
    nq = min(cfg.queries_per_patch, k)
    model.train()
    for step in range(cfg.steps):
        for group in opt.param_groups:
            group["lr"] = lr_sched.value(step if step <= lr_sched.total_steps else lr_sched.total_steps)
        idx = torch.randint(n_patches, (min(cfg.batch_size, n_patches),), generator=gen)
        batch = data[idx]
        if nq < k:
            sel = torch.argsort(torch.rand(len(idx), k, generator=gen), dim=1)[:, :nq]
            base = torch.gather(batch, 1, sel[..., None].expand(-1, -1, 3))
        else:
            base = batch
        queries = base + cfg.query_sigma * torch.randn(base.shape, generator=gen)
        loss, skipped = pull_loss(model, batch, queries)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        state.loss_history.append(float(loss.detach()))
        state.skipped_queries += skipped
        if skipped:
            logger.debug("step %d: skipped %d queries with vanishing gradient", step, skipped)
        if (step + 1) % 500 == 0:
            logger.info("sdf step %d/%d loss %.6f", step + 1, cfg.steps, float(loss.detach()))
    model.eval()
    return state


@dataclass
class PointScores:
    pixel_index: np.ndarray  # (N, 2)
    signed: np.ndarray  # (N,) aggregated signed distance
    scores: np.ndarray  # (N,) aggregated absolute distance

    def __len__(self):
        return len(self.scores)


@torch.no_grad()
def score_points(model: SdfModel, patchset: PatchSet, aggregate="mean", batch_size=64) -> PointScores:
    """Signed distance of every patch point, de-normalized and merged over overlaps."""
    if aggregate not in ("mean", "max"):
        raise ValueError(f"unknown aggregate {aggregate!r}")
    n = len(patchset.points)
    dtype = next(model.parameters()).dtype
    norm = torch.from_numpy(patchset.normalized()).to(dtype)
    sd = []
    for i in range(0, len(norm), batch_size):
        b = norm[i:i + batch_size]
        sd.append(model(b, b).double().numpy())
    sd = np.concatenate(sd) * patchset.scales[:, None] if sd else np.zeros((0, patchset.k))
    idx = patchset.members.ravel()
    counts = np.bincount(idx, minlength=n).astype(np.float64)
    covered = counts > 0
    signed = np.bincount(idx, weights=sd.ravel(), minlength=n)
    signed[covered] /= counts[covered]
    if aggregate == "mean":
        absd = np.bincount(idx, weights=np.abs(sd).ravel(), minlength=n)
        absd[covered] /= counts[covered]
    else:
        absd = np.zeros(n)
        np.maximum.at(absd, idx, np.abs(sd).ravel())
    return PointScores(pixel_index=patchset.pixels, signed=signed, scores=absd)


def sdl_score_map(scores: PointScores, shape, sigma=4.0):
    """Scatter point scores onto the pixel grid, blur, and take the maximum.

    ``sigma=0`` skips the blur.
    """
    m = np.zeros(shape, dtype=np.float64)
    if len(scores):
        m[scores.pixel_index[:, 0], scores.pixel_index[:, 1]] = scores.scores
    if sigma > 0:
        m = gaussian_blur(m, sigma)
    return m, float(m.max())
