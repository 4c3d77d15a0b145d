"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import time

import numpy as np
import pytest
import torch

from conftest import TINY
from mdss import dataio, fusion, metrics, pipeline, sdl, st_net, synth
from mdss.config import RunConfig, desk_config
from oracles import (brute_force_aupro, central_differences, greedy_fps, mann_whitney_auc,
                     relative_errors, sort_threshold_mean)


def test_criterion_1_dynamic_loss_oracle(accept):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(8, 65))
        D = rng.exponential(size=(n, n))
        if rng.uniform() < 0.3:
            D = np.round(D, 1)  # ties
        M = rng.uniform(size=(n, n)) < rng.uniform(0.2, 1.0)
        d = float(rng.uniform(0.9, 0.999))
        got = float(dynamic_loss_np(D, M, d))
        worst = max(worst, abs(got - sort_threshold_mean(D, M, d)))
    const = float(st_net.dynamic_loss(torch.full((16, 16), 0.7, dtype=torch.float64), torch.ones(16, 16), 0.99))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-7 and const == 0.7 and elapsed < 10
    accept(1, "dynamic loss oracle", ok, f"max|err|={worst:.2e} const={const} time={elapsed:.1f}s")


def dynamic_loss_np(D, M, d):
    return st_net.dynamic_loss(torch.from_numpy(D), torch.from_numpy(M), d)


def _sample_indices(params, n, rng):
    sizes = np.array([p.numel() for p in params])
    per = np.maximum(1, np.round(n * sizes / sizes.sum()).astype(int))
    out = []
    for p, k in zip(params, per):
        for i in rng.choice(p.numel(), min(k, p.numel()), replace=False):
            out.append((p, int(i)))
    return out


def _grad_check(loss_fn, params, n, rng):
    idx = _sample_indices(params, n, rng)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = np.array([p.grad.view(-1)[i].item() for p, i in idx])
    numeric = central_differences(loss_fn, params, idx, h=1e-6)
    return relative_errors(analytic, numeric), len(idx)


def test_criterion_2_gradient_checks(accept):
    torch.use_deterministic_algorithms(False)
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    # student through the four conv layers under the dynamic loss
    teacher = st_net.make_pdn((8, 16, 16, 16), seed=0).double()
    student = st_net.make_pdn((8, 16, 16, 16), seed=1).double()
    x = torch.rand(2, 3, 64, 64, dtype=torch.float64)
    with torch.no_grad():
        target = teacher(x)
    mask = torch.from_numpy(np.stack([st_net.downsample_mask(np.ones((64, 64), bool), 8)] * 2))

    def st_loss():
        return st_net.dynamic_loss(st_net.discrepancy(target, student(x)), mask, 0.9)

    st_params = [p for p in student.parameters()]
    st_err, n_st = _grad_check(st_loss, st_params, 240, rng)

    # pull loss through encoder and implicit function
    model = sdl.make_sdf_model(seed=3, dtype=torch.float64)
    pts = torch.randn(2, 64, 3, dtype=torch.float64)
    pts = pts / pts.norm(dim=-1).max()
    queries = pts[:, :32] + 0.05 * torch.randn(2, 32, 3, dtype=torch.float64)

    def sdf_loss():
        with torch.enable_grad():
            return sdl.pull_loss(model, pts, queries.clone())[0]

    sdf_params = [p for p in model.parameters()]
    sdf_err, n_sdf = _grad_check(sdf_loss, sdf_params, 240, rng)
    elapsed = time.perf_counter() - t0
    ok = (n_st >= 200 and n_sdf >= 200 and st_err.max() < 1e-3 and sdf_err.max() < 1e-3
          and elapsed < 120)
    accept(2, "gradient checks", ok,
           f"student n={n_st} max rel={st_err.max():.1e}; sdf n={n_sdf} max rel={sdf_err.max():.1e}; "
           f"time={elapsed:.1f}s")


def test_criterion_3_fps_and_coverage(accept):
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    fps_ok = 0
    for _ in range(100):
        n = int(rng.integers(2, 65))
        pts = rng.integers(0, 5, (n, 3)).astype(float) if rng.uniform() < 0.5 else rng.normal(size=(n, 3))
        m = int(rng.integers(1, n + 1))
        start = int(rng.integers(n))
        fps_ok += sdl.farthest_point_sample(pts, m, start=start).tolist() == greedy_fps(pts, m, start)
    cov_ok = 0
    for i in range(100):
        n = int(rng.integers(50, 800))
        k = int(rng.integers(10, 50))
        valid = np.zeros(40 * 40, bool)
        valid[rng.choice(valid.size, n, replace=False)] = True
        valid = valid.reshape(40, 40)
        xyz = np.where(valid[..., None], rng.normal(size=(40, 40, 3)), 0.0)
        ps = sdl.build_patches(dataio.OrganizedCloud(xyz, valid), k=k, seed=i)
        cov_ok += bool(ps.coverage().min() >= 1 and ps.members.shape[1] == k)
    elapsed = time.perf_counter() - t0
    ok = fps_ok == 100 and cov_ok == 100 and elapsed < 30
    accept(3, "FPS exactness and patch coverage", ok,
           f"fps {fps_ok}/100, coverage {cov_ok}/100, time={elapsed:.1f}s")


def test_criterion_4_metric_oracles(accept):
    rng = np.random.default_rng(404)
    t0 = time.perf_counter()
    auc_err, auc_mono = 0.0, 0.0
    for _ in range(100):
        n = int(rng.integers(2, 51))
        y = rng.uniform(size=n) < 0.5
        y[0], y[-1] = True, False
        s = np.round(rng.normal(size=n), 1)
        a = metrics.auroc(s, y)
        auc_err = max(auc_err, abs(a - mann_whitney_auc(s, y)))
        auc_mono = max(auc_mono, abs(a - metrics.auroc(np.exp(2 * s) + 1, y)))
    pro_err, pro_mono, n_pro = 0.0, 0.0, 0
    while n_pro < 100:
        gts = [rng.uniform(size=(8, 8)) < 0.2 for _ in range(int(rng.integers(1, 4)))]
        if not any(g.any() for g in gts):
            continue
        maps = [np.round(rng.uniform(size=(8, 8)), 2) for _ in gts]
        v = metrics.aupro(maps, gts, 0.3)[0]
        pro_err = max(pro_err, abs(v - brute_force_aupro(maps, gts, 0.3)))
        pro_mono = max(pro_mono, abs(v - metrics.aupro([m ** 3 * 7 - 2 for m in maps], gts, 0.3)[0]))
        n_pro += 1
    elapsed = time.perf_counter() - t0
    ok = auc_err <= 1e-12 and pro_err <= 1e-9 and auc_mono <= 1e-12 and pro_mono <= 1e-9 and elapsed < 60
    accept(4, "metric oracles", ok,
           f"auroc err={auc_err:.1e} mono={auc_mono:.1e}; aupro err={pro_err:.1e} "
           f"mono={pro_mono:.1e}; time={elapsed:.1f}s")


def test_criterion_5_alignment_contract(accept):
    rng = np.random.default_rng(505)
    worst = 0.0
    order_ok = True
    for _ in range(50):
        rgb = [rng.gamma(2.0, rng.uniform(0.1, 5), (16, 16)) for _ in range(4)]
        sdf_maps = [rng.gamma(3.0, rng.uniform(1e-3, 1e-2), (16, 16)) for _ in range(4)]
        st = fusion.calibrate(rgb, sdf_maps)
        aligned = np.concatenate([fusion.align_rgb(m, st).ravel() for m in rgb])
        worst = max(worst, abs(aligned.mean() - st.mu_3d) / st.sigma_3d,
                    abs(aligned.std() - st.sigma_3d) / st.sigma_3d)
        for k in (-3.0, 3.0):
            end = float(fusion.align_rgb(np.array(st.mu_rgb + k * st.sigma_rgb), st))
            worst = max(worst, abs(end - (st.mu_3d + k * st.sigma_3d)) / st.sigma_3d)
        raw = np.concatenate([m.ravel() for m in rgb])
        order_ok &= bool(np.array_equal(np.argsort(raw, kind="stable"), np.argsort(aligned, kind="stable")))
    ok = worst <= 1e-6 and order_ok
    accept(5, "alignment contract", ok, f"max rel dev={worst:.1e} ordering={'kept' if order_ok else 'broken'}")


def _branch_separation(results, samples, branch):
    """AUROC of one branch's raw image score, color defects (positive) vs geometric ones."""
    pairs = [(float(np.max(getattr(r, branch))), s.defect == "color_blotch")
             for r, s in zip(results, samples) if s.is_anomalous]
    return metrics.auroc([p[0] for p in pairs], [p[1] for p in pairs])


@pytest.mark.slow
def test_criterion_6_end_to_end_synthetic(accept, tmp_path):
    t0 = time.perf_counter()
    synth.make_benchmark(tmp_path, seed=0, n_train=50, n_val=10, n_test_normal=20, n_test_anom=20, size=128)
    cfg = desk_config(dataset_root=str(tmp_path), categories=("synthetic",))
    bundle = pipeline.train(cfg)
    test = pipeline.load_split(cfg, "synthetic", "test")
    results = pipeline.infer(bundle, "synthetic", test)
    i_auroc, aupro, _, _ = pipeline.evaluate_results(results, cfg.fpr_max)
    rgb_sep = _branch_separation(results, test, "rgb_map")
    sdf_sep = _branch_separation(results, test, "sdl_map")
    elapsed = time.perf_counter() - t0
    ok = i_auroc >= 0.90 and aupro >= 0.80 and rgb_sep > 0.5 and sdf_sep < 0.5 and elapsed < 900
    accept(6, "end-to-end synthetic benchmark", ok,
           f"I-AUROC={i_auroc:.3f} AUPRO={aupro:.3f} rgb color>geom auc={rgb_sep:.3f} "
           f"sdf color>geom auc={sdf_sep:.3f} time={elapsed:.0f}s")


def _tiny_run(root, n_train, out):
    synth.make_benchmark(root, seed=1, n_train=n_train, n_val=3, n_test_normal=4, n_test_anom=4, size=64)
    cfg = RunConfig(dataset_root=str(root), categories=("synthetic",), **TINY).validate()
    bundle = pipeline.train(cfg)
    pipeline.save_bundle(bundle, out)
    return bundle, cfg


@pytest.mark.slow
def test_criterion_7_memorylessness(accept, tmp_path):
    _tiny_run(tmp_path / "d10", 10, tmp_path / "b10")
    _tiny_run(tmp_path / "d200", 200, tmp_path / "b200")
    s10, s200 = pipeline.payload_size(tmp_path / "b10"), pipeline.payload_size(tmp_path / "b200")
    bins10 = {p.name: p.stat().st_size for p in (tmp_path / "b10").glob("*.bin")}
    bins200 = {p.name: p.stat().st_size for p in (tmp_path / "b200").glob("*.bin")}
    ok = s10 == s200 and bins10 == bins200
    accept(7, "memorylessness", ok, f"payload 10 samples={s10} B, 200 samples={s200} B")


def test_criterion_8_determinism(accept, tmp_path):
    runs = []
    for tag in ("a", "b"):
        bundle, cfg = _tiny_run(tmp_path / "data", 8, tmp_path / tag)
        results = pipeline.infer(bundle, "synthetic", pipeline.load_split(cfg, "synthetic", "test"))
        i_auroc, aupro, _, _ = pipeline.evaluate_results(results, cfg.fpr_max)
        runs.append((i_auroc, aupro, [r.score for r in results]))
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    identical = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    metric_gap = max(abs(runs[0][0] - runs[1][0]), abs(runs[0][1] - runs[1][1]),
                     max(abs(x - y) for x, y in zip(runs[0][2], runs[1][2])))
    ok = identical and metric_gap <= 1e-6
    accept(8, "determinism", ok,
           f"{len(files)} bundle files {'bit-identical' if identical else 'DIFFER'}, metric gap={metric_gap:.1e}")
