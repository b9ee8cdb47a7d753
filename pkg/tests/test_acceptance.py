"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The desk pipeline (criteria 7-9) runs once per session through the CLI and
takes about eight minutes on one core.
"""
import csv
import math
import time

import numpy as np
import pytest

from acceptance_log import record
from gradcheck import away_from_zero, check_grad, crosses_kink, projected
from idsr import alp, sift
from idsr import autodiff as ad
from idsr import networks as nw
from idsr import training as tr
from idsr.cli import main
from idsr.scalespace import GAUSSIAN_SCALES, build_dog, build_scale_stack, forward_diff_gradients, gaussian_blur

RNG = np.random.default_rng(2024)
DESK_FLAGS = ["--epochs", "30", "--blocks", "2", "--channels", "16", "--patch", "64", "--lr", "1e-3",
              "--seed", "0", "--quiet"]


def direct_correlate(img, k):
    r = k.shape[0] // 2
    p = np.pad(img, r, mode="edge")
    out = np.empty_like(img)
    for u in range(img.shape[0]):
        for v in range(img.shape[1]):
            out[u, v] = (p[u:u + 2 * r + 1, v:v + 2 * r + 1] * k).sum()
    return out


# ---------------------------------------------------------------- 1


def test_criterion_1_alp_basis():
    t = time.perf_counter()
    basis = alp.fit_basis(tolerance=1.0)
    elapsed = time.perf_counter() - t
    mid = (basis.xi[1] + basis.xi[2]) / 2
    target = alp.log_kernel(mid, basis.half_width)
    mid_err = np.linalg.norm(basis.reconstruct(mid) - target) / np.linalg.norm(target)
    node_err = float(np.abs(basis.gamma(basis.xi[1]) - [0, 1, 0, 0]).max())
    ok = record("1", basis.fit_residual <= 0.05 and mid_err <= 0.05 and node_err <= 2e-2 and elapsed < 5,
                f"residual {basis.fit_residual:.4f}, midpoint {mid_err:.4f}, node one-hot err {node_err:.4f}, "
                f"{elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_ssr_vs_convolution():
    basis = alp.fit_basis()
    img = RNG.random((32, 32))
    eta = alp.eta_maps(img, basis)
    errs = []
    for xi, k in zip(basis.xi, basis.kernels):
        direct = direct_correlate(img, k)
        errs.append(np.linalg.norm(eta.ssr(xi) - direct) / np.linalg.norm(direct))
    const = np.abs(alp.eta_maps(np.full((32, 32), 0.42), basis).stacked()).max()
    ok = record("2", max(errs) <= basis.fit_residual + 0.02 and const < 1e-9,
                f"max rel err {max(errs):.4f} (bound {basis.fit_residual + 0.02:.4f}), constant |eta| {const:.1e}")
    assert ok


# ---------------------------------------------------------------- 3

BLOB_SIGMAS = (1.9, 2.7, 3.8)


def blob_scene(seed, size=128, count=9):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    img = np.full((size, size), 0.5)
    planted = []
    for _ in range(1000):
        if len(planted) == count:
            break
        s = BLOB_SIGMAS[len(planted) % 3]
        y, x = rng.uniform(16, size - 16, 2)
        if all(math.hypot(y - py, x - px) >= 5 * (s + ps) for py, px, ps in planted):
            planted.append((y, x, s))
    for y, x, s in planted:
        img += rng.choice([-1, 1]) * rng.uniform(0.3, 0.45) * np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2 * s * s))
    return img, planted


def within_step(found, true):
    """One step of the sqrt(2) scale lattice."""
    return abs(math.log2(found / true)) <= 0.5


def test_criterion_3_detectors_find_blobs():
    basis = alp.fit_basis()
    t = time.perf_counter()
    missed_sift = missed_alp = total = 0
    for seed in range(20):
        img, planted = blob_scene(seed)
        kps = sift.detect(build_dog(build_scale_stack(img)))
        aks = alp.alp_detect(img, basis)
        for y, x, s in planted:
            total += 1
            missed_sift += not any(math.hypot(k.x - x, k.y - y) <= 1 and within_step(k.scale, s) for k in kps)
            missed_alp += not any(math.hypot(k.v - x, k.u - y) <= 1 and within_step(k.xi_star, s) for k in aks)
    flat = np.full((64, 64), 0.3)
    n_flat = len(sift.detect(build_dog(build_scale_stack(flat)))) + len(alp.alp_detect(flat, basis))
    elapsed = time.perf_counter() - t
    ok = record("3", missed_sift == 0 and missed_alp == 0 and n_flat == 0 and elapsed < 30,
                f"{total} blobs: SIFT missed {missed_sift}, ALP missed {missed_alp}; "
                f"constant-image keypoints {n_flat}; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 4


def _primitive_checks():
    x = RNG.standard_normal((1, 2, 5, 5))
    w = RNG.standard_normal((3, 2, 3, 3))
    b = RNG.standard_normal(3)
    k = RNG.standard_normal((3, 3))
    k1 = RNG.standard_normal(5)
    rgb = RNG.standard_normal((1, 3, 4, 4))
    y = RNG.standard_normal((1, 2, 5, 5))
    return {
        "conv2d replicate": (projected(lambda a, c, d: ad.conv2d(a, c, d)), [x, w, b]),
        "conv2d zero": (projected(lambda a, c: ad.conv2d(a, c, padding="zero")), [x, w]),
        "filter2d": (projected(lambda a: ad.filter2d(a, k)), [x]),
        "sep_filter2d": (projected(lambda a: ad.sep_filter2d(a, k1, k1[::-1].copy())), [x]),
        "forward_diff h": (projected(lambda a: ad.forward_diff(a, "h")), [x]),
        "forward_diff v": (projected(lambda a: ad.forward_diff(a, "v")), [x]),
        "luminance": (projected(ad.luminance), [rgb]),
        "add/sub/mul": (projected(lambda a, c: ad.mul(ad.add(a, c), ad.sub(a, c))), [x, y]),
        "relu": (projected(ad.relu), [away_from_zero(x)]),
        "sigmoid": (projected(ad.sigmoid), [x]),
        "channel pool": (projected(lambda a: ad.concat_channels(list(ad.channel_pool_stats(a)))), [x]),
        "global pool": (projected(lambda a: ad.concat_channels(list(ad.global_pool_stats(a)))), [x]),
        "broadcast_mul_channel": (projected(ad.broadcast_mul_channel), [x, RNG.standard_normal((1, 1, 5, 5))]),
        "pad2d": (projected(lambda a: ad.pad2d(a, 2, 1)), [x]),
    }


def _module_checks(basis, seed=0):
    c = 8
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, c, 6, 6))
    out = {}

    def mod(init, fwd, *args, names):
        params = {}
        init(params, *args, np.random.default_rng(seed + 1), np.float64)

        def build(ts):
            p = dict(params)
            p.update(zip(names, ts[1:]))
            return projected(lambda t: fwd(t, p))([ts[0]])
        return build, [x] + [params[n].data for n in names]

    out["CAM"] = mod(nw.init_cam, nw.cam_forward, "cam", c, names=["cam.fc1.w", "cam.fc2.b"])
    out["SAM"] = mod(nw.init_sam, nw.sam_forward, "sam", names=["sam.conv.w"])
    out["GAM"] = mod(nw.init_gam, nw.gam_forward, "gam", c, names=["gam.w1.w", "gam.w5.w", "gam.w7.w"])
    out["CSARB"] = mod(nw.init_block, nw.csarb_forward, "block", c, "csarb", names=["block.conv1.w"])
    out["CGARB"] = mod(nw.init_block, nw.cgarb_forward, "block", c, "cgarb", names=["block.conv2.w"])
    clean = rng.random((1, 1, 8, 8))
    noisy = clean + away_from_zero(0.2 * rng.standard_normal(clean.shape))
    out["ALP loss"] = (lambda ts: tr.alp_loss_diff(ad.Tensor(clean), ts[0], basis), [noisy])
    out["gradient loss"] = (lambda ts: tr.grad_loss_diff(ad.Tensor(clean), ts[0]), [noisy])
    out["l1 loss"] = (lambda ts: ad.l1_loss(ts[0], ad.Tensor(clean)), [noisy])
    out["mse loss"] = (lambda ts: ad.mse_loss(ts[0], ad.Tensor(clean)), [noisy])
    return out


def test_criterion_4_finite_differences():
    prim = {name: check_grad(build, arrays, h=1e-3) for name, (build, arrays) in _primitive_checks().items()}
    basis = alp.fit_basis()
    mods, seeds = {}, {}
    for name in _module_checks(basis):
        # first input draw whose stencil stays on one side of every ReLU/max kink
        seeds[name] = next(s for s in range(50)
                           if not crosses_kink(*_module_checks(basis, s)[name], h=1e-3))
        mods[name] = check_grad(*_module_checks(basis, seeds[name])[name], h=1e-3)
    worst_p = max(prim, key=prim.get)
    worst_m = max(mods, key=mods.get)
    ok = record("4", prim[worst_p] < 1e-4 and mods[worst_m] < 1e-3,
                f"worst primitive {worst_p} {prim[worst_p]:.1e} (<1e-4), "
                f"worst module/loss {worst_m} {mods[worst_m]:.1e} (<1e-3), "
                f"input seeds {sorted(set(seeds.values()))}")
    assert ok


# ---------------------------------------------------------------- 5


def grad_loss_oracle(clean, derained):
    total = 0.0
    for s in GAUSSIAN_SCALES:
        gc = forward_diff_gradients(gaussian_blur(clean, s))
        gd = forward_diff_gradients(gaussian_blur(derained, s))
        total += np.abs(gc.gx - gd.gx).mean() + np.abs(gc.gy - gd.gy).mean()
    return total


def test_criterion_5_loss_identities_and_oracles():
    basis = alp.fit_basis()
    y = RNG.random((2, 1, 24, 24))
    c = 0.37
    ident = []
    for fn in (lambda a, b: tr.alp_loss_diff(a, b, basis), tr.grad_loss_diff):
        ident.append(fn(ad.Tensor(y), ad.Tensor(y)).item())
        ident.append(fn(ad.Tensor(y), ad.Tensor(y + c)).item())
    a, b = RNG.random((2, 16, 16)), RNG.random((2, 16, 16))
    alp_err = abs(tr.alp_loss_diff(ad.Tensor(a[:, None]), ad.Tensor(b[:, None]), basis).item()
                  - np.mean([alp.alp_loss(a[i], b[i], basis) for i in range(2)]))
    grad_err = abs(tr.grad_loss_diff(ad.Tensor(a[:, None]), ad.Tensor(b[:, None])).item()
                   - np.mean([grad_loss_oracle(a[i], b[i]) for i in range(2)]))
    worst_ident = max(abs(v) for v in ident)
    ok = record("5", worst_ident <= 1e-9 and alp_err < 1e-6 and grad_err < 1e-6,
                f"max |L(y,y)|,|L(y,y+c)| {worst_ident:.1e}; oracle diffs ALP {alp_err:.1e}, grad {grad_err:.1e}")
    assert ok


# ---------------------------------------------------------------- 6


def test_criterion_6_lr_trace():
    cfg = tr.TrainConfig()
    trace = [tr.learning_rate(e, cfg) for e in range(1, cfg.epochs + 1)]
    expected = [1e-4 * 0.5 ** sum(e >= d for d in (81, 101, 121, 141)) for e in range(1, 161)]
    drops = [e for e in range(2, 161) if trace[e - 1] != trace[e - 2]]
    ok = record("6", trace == expected and drops == [81, 101, 121, 141],
                f"changes at epochs {drops}, final lr {trace[-1]:.3e}")
    assert ok


# ---------------------------------------------------------------- 7-9: desk pipeline


def run_cli(*argv):
    code = main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"idsr {' '.join(map(str, argv))} exited with {code}")


def desk_pipeline(root):
    """synth -> train both -> derain -> eval; returns wall time of the whole run."""
    t = time.perf_counter()
    run_cli("synth", "--out", root / "train", "--count", 64, "--size", 128, "--seed", 0)
    run_cli("synth", "--out", root / "test", "--count", 16, "--size", 128, "--seed", 1)
    run_cli("alp", "fit-basis", "--out", root / "basis.json")
    run_cli("train", "--net", "dprnet", "--data", root / "train", "--out", root / "dprnet.ckpt",
            "--basis", root / "basis.json", *DESK_FLAGS)
    run_cli("train", "--net", "ggirnet", "--data", root / "train", "--out", root / "ggirnet.ckpt", *DESK_FLAGS)
    run_cli("derain", "--input", root / "test" / "rainy", "--out", root / "derained",
            "--ckpt-dpr", root / "dprnet.ckpt", "--ckpt-ggir", root / "ggirnet.ckpt")
    run_cli("eval", "--derained", root / "derained" / "dprnet", "--desc", root / "derained" / "ggirnet",
            "--clean", root / "test" / "clean", "--rainy", root / "test" / "rainy", "--out", root / "report")
    return time.perf_counter() - t


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    return root, desk_pipeline(root)


def _means(report_json):
    import json
    doc = json.loads(report_json.read_text())
    return doc["means"], doc["rainy_baseline"]["means"]


def test_criterion_7_end_to_end(desk_run):
    root, elapsed = desk_run
    m, base = _means(root / "report" / "report.json")
    gain = m["psnr_db"] - base["psnr_db"]
    ok = record("7", m["recovered"] > base["recovered"] and gain >= 1.0 and elapsed < 15 * 60,
                f"recovered {m['recovered']:.2f} vs rainy {base['recovered']:.2f}; "
                f"PSNR {m['psnr_db']:.2f} vs {base['psnr_db']:.2f} dB (+{gain:.2f}); {elapsed / 60:.1f} min")
    assert ok


def _table(path):
    with open(path) as fh:
        header, values = list(csv.reader(fh))
    return dict(zip(header[1:], map(float, values[1:])))


@pytest.fixture(scope="session")
def ablations(desk_run):
    root, _ = desk_run
    common = ["--data", root / "train", "--test", root / "test", "--basis", root / "basis.json"]
    run_cli("ablate", "alp-vs-l2", *common, "--ckpt-dpr", root / "dprnet.ckpt", "--out", root / "alp_vs_l2.csv")
    run_cli("ablate", "gam", *common, "--ckpt-ggir", root / "ggirnet.ckpt", "--out", root / "gam.csv")
    run_cli("ablate", "one-task", *common, "--ckpt-dpr", root / "dprnet.ckpt", "--ckpt-ggir", root / "ggirnet.ckpt",
            "--out", root / "one_task.csv")
    return {k: _table(root / f"{k}.csv") for k in ("alp_vs_l2", "gam", "one_task")}


def test_criterion_8a_alp_vs_l2(ablations):
    t = ablations["alp_vs_l2"]
    ok = record("8a", t["ALP"] < t["L2"], f"DoG-stack MSE ALP {t['ALP']:.4f} vs L2 {t['L2']:.4f}")
    assert ok


def test_criterion_8b_gam(ablations):
    t = ablations["gam"]
    ok = record("8b", t["w/ GAM"] <= t["w/o GAM"],
                f"Gaussian-stack MSE with GAM {t['w/ GAM']:.4f} vs without {t['w/o GAM']:.4f}")
    assert ok


def test_criterion_8c_two_network(ablations):
    t = ablations["one_task"]
    ok = record("8c", t["two-network"] <= t["one-task"],
                f"Gaussian-stack MSE two-network {t['two-network']:.4f} vs one-task {t['one-task']:.4f}")
    assert ok


def test_criterion_9_rerun_is_byte_identical(desk_run, tmp_path_factory):
    root, _ = desk_run
    again = tmp_path_factory.mktemp("desk_again")
    desk_pipeline(again)
    files = ["dprnet.csv", "ggirnet.csv", "report/report.csv"]
    same = {f: (root / f).read_bytes() == (again / f).read_bytes() for f in files}
    ok = record("9", all(same.values()), ", ".join(f"{f} {'identical' if s else 'DIFFERS'}" for f, s in same.items()))
    assert ok
