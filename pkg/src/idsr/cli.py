"""Command-line entry point: ``idsr <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import ablation
from .alp import AlpBasis, alp_detect, alp_loss, fit_basis
from .evaluate import run_eval
from .imagecore import (PairDataset, RainConfig, SUPPORTED_SUFFIXES, as_gray, load_image, save_image,
                        synth_pairs, write_pairs)
from .networks import NetConfig, derain_image, parameter_count
from .scalespace import build_dog, build_scale_stack
from .sift import (SiftParams, detect, extract, features_to_json, match, recovered_keypoints, render_matches,
                   verify_ransac)
from .training import TrainConfig, load_checkpoint, save_checkpoint, train, write_loss_log


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _basis(path) -> AlpBasis:
    return AlpBasis.load(path) if path else fit_basis()


def _write_json(doc, path) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _image_files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in SUPPORTED_SUFFIXES)
    return [path]


# ---------------------------------------------------------------- commands


def cmd_synth(a) -> None:
    rain = RainConfig(streak_count=a.streaks, intensity=tuple(a.intensity), length_px=tuple(a.length),
                      angle_deg=(a.angle, a.angle_jitter), blur_sigma=a.blur)
    root = write_pairs(synth_pairs(a.count, a.size, a.seed, rain), a.out)
    print(f"wrote {a.count} pairs to {root}")


def _net_cfg(a) -> NetConfig:
    return NetConfig(blocks=a.blocks, channels=a.channels, use_gam=not a.no_gam)


def cmd_train(a) -> None:
    net_cfg = _net_cfg(a)
    cfg = TrainConfig(epochs=a.epochs, lr0=a.lr, batch=a.batch, patch=a.patch, seed=a.seed,
                      lambda_alp=a.lambda_alp, lambda_pixel_dpr=a.lambda_pixel_dpr,
                      lambda_pixel_ggir=a.lambda_pixel_ggir, pixel_loss=a.pixel_loss)
    ds = PairDataset.from_dir(a.data, patch_size=a.patch, seed=a.seed)
    basis = _basis(a.basis) if a.net == "dprnet" and cfg.lambda_alp > 0 else None
    resume = load_checkpoint(a.resume) if a.resume else None
    if resume is not None:
        net_cfg = resume.net_cfg
    print(f"{a.net}: {parameter_count(a.net, net_cfg)} parameters, {len(ds)} pairs", file=sys.stderr)
    ckpt = train(a.net, ds, cfg, net_cfg, basis, resume=resume,
                 progress=None if a.quiet else lambda r: print(
                     f"epoch {r['epoch']} lr {r['lr']:.3g} loss {r['loss']:.6f}", file=sys.stderr))
    save_checkpoint(ckpt, a.out)
    write_loss_log(ckpt.history, a.log or Path(a.out).with_suffix(".csv"))


def cmd_derain(a) -> None:
    if not a.ckpt_dpr and not a.ckpt_ggir:
        raise UsageError("derain needs --ckpt-dpr and/or --ckpt-ggir")
    files = _image_files(Path(a.input))
    if not files:
        raise ValueError(f"no images found in {a.input}")
    out = Path(a.out)
    for tag, path in (("dprnet", a.ckpt_dpr), ("ggirnet", a.ckpt_ggir)):
        if not path:
            continue
        ck = load_checkpoint(path)
        for f in files:
            derained, _ = derain_image(ck.net, load_image(f), ck.params, ck.net_cfg)
            save_image(np.clip(derained, 0.0, 1.0), out / tag / (f.stem + ".png"))
    print(f"derained {len(files)} images into {out}")


def _sift_params(a) -> SiftParams:
    return SiftParams(contrast_threshold=a.contrast, edge_ratio=a.edge_ratio, ratio=a.ratio)


def cmd_sift(a) -> None:
    params = _sift_params(a)
    if a.sift_cmd == "detect":
        kps = detect(build_dog(build_scale_stack(as_gray(load_image(a.image)))), params.contrast_threshold,
                     params.edge_ratio)
        text = features_to_json(kps, np.zeros((len(kps), 0)))
    elif a.sift_cmd == "describe":
        desc_img = load_image(a.desc_image) if a.desc_image else None
        kps, descs = extract(load_image(a.image), desc_img, params)
        text = features_to_json(kps, descs)
    else:
        img_a, img_b = load_image(a.image_a), load_image(a.image_b)
        ka, da = extract(img_a, None, params)
        kb, db = extract(img_b, None, params)
        ms = match(da, db, params.ratio)
        if a.model != "none":
            ms = verify_ransac(ms, ka, kb, a.model, a.tol, a.iters, a.seed)
        if a.overlay:
            render_matches(img_a, img_b, ka, kb, ms, a.overlay)
        doc = {"keypoints_a": len(ka), "keypoints_b": len(kb), "matches": len(ms),
               "inliers": int(ms.inlier_mask.sum()),
               "pairs": [{"a": i, "b": j, "distance": d, "inlier": bool(ok)}
                         for (i, j, d), ok in zip(ms.matches, ms.inlier_mask)]}
        text = json.dumps(doc, indent=2)
    if a.out:
        Path(a.out).parent.mkdir(parents=True, exist_ok=True)
        Path(a.out).write_text(text + "\n")
    else:
        print(text)


def cmd_alp(a) -> None:
    if a.alp_cmd == "fit-basis":
        basis = fit_basis(method=a.method)
        basis.save(a.out)
        print(f"fit residual {basis.fit_residual:.4f}; wrote {a.out}")
    elif a.alp_cmd == "detect":
        kps = alp_detect(as_gray(load_image(a.image)), _basis(a.basis), a.threshold)
        _write_json({"keypoints": [asdict(k) for k in kps]}, a.out)
    else:
        value = alp_loss(as_gray(load_image(a.clean)), as_gray(load_image(a.derained)), _basis(a.basis),
                         a.include_eta0)
        _write_json({"alp_loss": value}, a.out)


def cmd_eval(a) -> None:
    report = run_eval(a.derained, a.clean, a.rainy, _sift_params(a), a.desc)
    csv_path, json_path = report.write(a.out)
    m = report.means
    line = f"psnr {m['psnr_db']:.3f} dB  ssim {m['ssim']:.4f}  recovered {m['recovered']:.2f}"
    if report.baseline:
        b = report.baseline_means
        line += f"  | rainy: psnr {b['psnr_db']:.3f} dB  recovered {b['recovered']:.2f}"
    print(line)
    print(f"wrote {csv_path} and {json_path}")


def _load_test(d) -> list[tuple]:
    names = sorted(p.name for p in (Path(d) / "clean").iterdir() if p.suffix.lower() in SUPPORTED_SUFFIXES)
    return [(n, load_image(Path(d) / "rainy" / n), load_image(Path(d) / "clean" / n)) for n in names]


def cmd_ablate(a) -> None:
    cfg = replace(ablation.DESK_TRAIN, epochs=a.epochs, seed=a.seed, patch=a.patch, lr0=a.lr)
    net_cfg = NetConfig(blocks=a.blocks, channels=a.channels)
    ds = PairDataset.from_dir(a.data, patch_size=a.patch, seed=a.seed)
    test = _load_test(a.test or a.data)
    dpr = load_checkpoint(a.ckpt_dpr) if a.ckpt_dpr else None
    ggir = load_checkpoint(a.ckpt_ggir) if a.ckpt_ggir else None
    if a.ablate_cmd == "alp-vs-l2":
        table, _ = ablation.alp_vs_l2(ds, test, cfg, net_cfg, _basis(a.basis), dpr)
    elif a.ablate_cmd == "gam":
        table, _ = ablation.gam(ds, test, cfg, net_cfg, ggir)
    else:
        table, _ = ablation.one_task(ds, test, cfg, net_cfg, _basis(a.basis), dpr, ggir)
    if a.out:
        table.write(a.out)
    print(table.render(), end="")


def cmd_report(a) -> None:
    params = _sift_params(a)
    pairs = []
    da, ca = Path(a.derained), Path(a.clean)
    if da.is_dir():
        names = sorted(p.name for p in _image_files(ca))
        pairs = [(da / n, ca / n) for n in names]
    else:
        pairs = [(da, ca)]
    out = Path(a.out)
    for d, c in pairs:
        derained, clean = load_image(d), load_image(c)
        rec = recovered_keypoints(derained, clean, params)
        kd, _ = extract(derained, None, params)
        kc, _ = extract(clean, None, params)
        render_matches(derained, clean, kd, kc, rec.matches, out / (Path(d).stem + "_matches.png"))
        print(f"{Path(d).name}: recovered {rec.count}")


# ---------------------------------------------------------------- parser


def _add_sift_flags(p) -> None:
    d = SiftParams()
    p.add_argument("--contrast", type=float, default=d.contrast_threshold, help="DoG contrast threshold")
    p.add_argument("--edge-ratio", type=float, default=d.edge_ratio)
    p.add_argument("--ratio", type=float, default=d.ratio, help="ratio-test threshold")


def _add_net_flags(p, blocks: int, channels: int) -> None:
    p.add_argument("--blocks", type=int, default=blocks)
    p.add_argument("--channels", type=int, default=channels)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="idsr", description="Deraining for SIFT keypoint recovery.")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic rainy/clean dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    r = RainConfig()
    s.add_argument("--streaks", type=int, default=r.streak_count)
    s.add_argument("--intensity", type=float, nargs=2, default=list(r.intensity), metavar=("LO", "HI"))
    s.add_argument("--length", type=float, nargs=2, default=list(r.length_px), metavar=("LO", "HI"))
    s.add_argument("--angle", type=float, default=r.angle_deg[0])
    s.add_argument("--angle-jitter", type=float, default=r.angle_deg[1])
    s.add_argument("--blur", type=float, default=r.blur_sigma)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train DPRNet or GGIRNet")
    t.add_argument("--net", choices=("dprnet", "ggirnet"), required=True)
    t.add_argument("--data", required=True, help="directory with rainy/ and clean/")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="per-epoch CSV (default: checkpoint path with .csv)")
    tc = TrainConfig()
    t.add_argument("--epochs", type=int, default=tc.epochs)
    t.add_argument("--lr", type=float, default=tc.lr0)
    t.add_argument("--batch", type=int, default=tc.batch)
    t.add_argument("--patch", type=int, default=tc.patch)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lambda-alp", type=float, default=tc.lambda_alp)
    t.add_argument("--lambda-pixel-dpr", type=float, default=tc.lambda_pixel_dpr)
    t.add_argument("--lambda-pixel-ggir", type=float, default=tc.lambda_pixel_ggir)
    t.add_argument("--pixel-loss", choices=("l1", "l2"), default=tc.pixel_loss)
    t.add_argument("--basis", help="ALP basis JSON (fitted on the fly if omitted)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--no-gam", action="store_true", help="GGIRNet without gradient attention")
    t.add_argument("--quiet", action="store_true")
    _add_net_flags(t, NetConfig().blocks, NetConfig().channels)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("derain", help="apply trained networks to images")
    d.add_argument("--input", required=True, help="image file or directory")
    d.add_argument("--out", required=True)
    d.add_argument("--ckpt-dpr")
    d.add_argument("--ckpt-ggir")
    d.set_defaults(func=cmd_derain)

    sp = sub.add_parser("sift", help="SIFT detection, description and matching")
    ssub = sp.add_subparsers(dest="sift_cmd", required=True, parser_class=_Parser)
    for name in ("detect", "describe"):
        q = ssub.add_parser(name)
        q.add_argument("--image", required=True)
        if name == "describe":
            q.add_argument("--desc-image", help="image whose Gaussian stack supplies descriptors")
        q.add_argument("--out")
        _add_sift_flags(q)
    q = ssub.add_parser("match")
    q.add_argument("--image-a", required=True)
    q.add_argument("--image-b", required=True)
    q.add_argument("--model", choices=("none", "translation", "similarity"), default="similarity")
    q.add_argument("--tol", type=float, default=3.0, help="RANSAC inlier tolerance in pixels")
    q.add_argument("--iters", type=int, default=500)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--overlay", help="write a side-by-side match PNG")
    q.add_argument("--out")
    _add_sift_flags(q)
    sp.set_defaults(func=cmd_sift)

    ap = sub.add_parser("alp", help="ALP basis fitting, detection and loss")
    asub = ap.add_subparsers(dest="alp_cmd", required=True, parser_class=_Parser)
    q = asub.add_parser("fit-basis")
    q.add_argument("--out", required=True)
    q.add_argument("--method", choices=("minimax", "kernel", "gamma"), default="minimax")
    q = asub.add_parser("detect")
    q.add_argument("--image", required=True)
    q.add_argument("--basis")
    q.add_argument("--threshold", type=float, default=0.02)
    q.add_argument("--out")
    q = asub.add_parser("loss")
    q.add_argument("--clean", required=True)
    q.add_argument("--derained", required=True)
    q.add_argument("--basis")
    q.add_argument("--include-eta0", action="store_true")
    q.add_argument("--out")
    ap.set_defaults(func=cmd_alp)

    e = sub.add_parser("eval", help="PSNR/SSIM/recovered-keypoint report")
    e.add_argument("--derained", required=True)
    e.add_argument("--clean", required=True)
    e.add_argument("--rainy", help="also score the rainy inputs as a baseline")
    e.add_argument("--desc", help="second restoration used for SIFT description (two-image mode)")
    e.add_argument("--out", required=True, help="output directory for report.csv / report.json")
    _add_sift_flags(e)
    e.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="desk-scale ablation tables")
    ab.add_argument("ablate_cmd", choices=("one-task", "alp-vs-l2", "gam"))
    ab.add_argument("--data", required=True, help="training set directory")
    ab.add_argument("--test", help="held-out directory (defaults to --data)")
    ab.add_argument("--epochs", type=int, default=ablation.DESK_TRAIN.epochs)
    ab.add_argument("--patch", type=int, default=ablation.DESK_TRAIN.patch)
    ab.add_argument("--lr", type=float, default=ablation.DESK_TRAIN.lr0)
    ab.add_argument("--seed", type=int, default=0)
    ab.add_argument("--basis")
    ab.add_argument("--ckpt-dpr", help="reuse a trained DPRNet (one-task, alp-vs-l2)")
    ab.add_argument("--ckpt-ggir", help="reuse a trained GAM-enabled GGIRNet (one-task, gam)")
    ab.add_argument("--out", help="CSV path for the table")
    _add_net_flags(ab, ablation.DESK_NET.blocks, ablation.DESK_NET.channels)
    ab.set_defaults(func=cmd_ablate)

    rp = sub.add_parser("report", help="render match-overlay PNGs")
    rp.add_argument("--derained", required=True, help="image or directory")
    rp.add_argument("--clean", required=True, help="image or directory")
    rp.add_argument("--out", required=True)
    _add_sift_flags(rp)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    try:
        args.func(args)
    except UsageError as exc:
        print(f"idsr: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"idsr: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
