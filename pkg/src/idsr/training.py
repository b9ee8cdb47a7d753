"""Loss graphs, training loops, learning-rate schedule and checkpoints."""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .alp import AlpBasis, fit_basis
from .autodiff import Tensor
from .imagecore import PairDataset, sample_patches
from .networks import NetConfig, Params, expected_shapes, forward, init_network
from .scalespace import GAUSSIAN_SCALES, gaussian_kernel_1d

CKPT_MAGIC = b"IDSRCKPT"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 160
    lr0: float = 1e-4
    decay_start: int = 80
    decay_every: int = 20
    decay_factor: float = 0.5
    batch: int = 16
    patch: int = 128
    seed: int = 0
    lambda_alp: float = 1.0
    lambda_pixel_dpr: float = 1.0
    lambda_pixel_ggir: float = 0.0
    pixel_loss: str = "l1"
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if min(self.lambda_alp, self.lambda_pixel_dpr, self.lambda_pixel_ggir) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch < 1 or self.patch < 1:
            raise ValueError("batch and patch must be positive")
        if self.pixel_loss not in ("l1", "l2"):
            raise ValueError("pixel_loss must be 'l1' or 'l2'")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Rate for 1-based ``epoch``: lr0 through ``decay_start``, then halved every ``decay_every``."""
    if epoch <= cfg.decay_start:
        return cfg.lr0
    drops = (epoch - cfg.decay_start - 1) // cfg.decay_every + 1
    return cfg.lr0 * cfg.decay_factor**drops


# ---------------------------------------------------------------- losses


def alp_loss_diff(clean: Tensor, derained: Tensor, basis: AlpBasis, include_eta0: bool = False) -> Tensor:
    """Differentiable ALP loss on N x 1 x H x W luminance batches.

    Each eta_j map is one fixed convolution (the basis kernels folded with the
    cubic coefficients), so the loss is linear filtering followed by an l1 mean.
    """
    if clean.shape != derained.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {derained.shape}")
    if clean.shape[1] != 1:
        raise ValueError("alp_loss_diff expects single-channel (luminance) batches")
    kernels = basis.eta_kernels()  # eta3, eta2, eta1, eta0
    diff = ad.sub(derained, clean)
    picks = (0, 1, 2, 3) if include_eta0 else (0, 1, 2)
    terms = [ad.l1_loss(ad.filter2d(diff, kernels[j]), _zeros_like(diff)) for j in picks]
    return _sum(terms)


def grad_loss_diff(clean: Tensor, derained: Tensor, scales=GAUSSIAN_SCALES) -> Tensor:
    """Sum over Gaussian scales and both directions of mean |grad G*clean - grad G*derained|."""
    if clean.shape != derained.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {derained.shape}")
    diff = ad.sub(derained, clean)
    terms = []
    for s in scales:
        k = gaussian_kernel_1d(s)
        blurred = ad.sep_filter2d(diff, k, k)
        for axis in ("h", "v"):
            terms.append(ad.l1_loss(ad.forward_diff(blurred, axis), _zeros_like(diff)))
    return _sum(terms)


def _zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def _sum(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def pixel_loss(clean: Tensor, derained: Tensor, kind: str = "l1") -> Tensor:
    return ad.l1_loss(derained, clean) if kind == "l1" else ad.mse_loss(derained, clean)


def objective(net: str, clean: Tensor, derained: Tensor, cfg: TrainConfig,
              basis: AlpBasis | None) -> tuple[Tensor, dict[str, float]]:
    """Weighted training loss and its named terms (as floats, for logging)."""
    y_l, c_l = ad.luminance(derained), ad.luminance(clean)
    terms: dict[str, Tensor] = {}
    if net == "dprnet":
        if cfg.lambda_pixel_dpr > 0:
            terms["pixel"] = ad.scale(pixel_loss(clean, derained, cfg.pixel_loss), cfg.lambda_pixel_dpr)
        if cfg.lambda_alp > 0:
            if basis is None:
                raise ValueError("DPRNet training with lambda_alp > 0 needs an ALP basis")
            terms["alp"] = ad.scale(alp_loss_diff(c_l, y_l, basis), cfg.lambda_alp)
    elif net == "ggirnet":
        terms["grad"] = grad_loss_diff(c_l, y_l)
        if cfg.lambda_pixel_ggir > 0:
            terms["pixel"] = ad.scale(pixel_loss(clean, derained, cfg.pixel_loss), cfg.lambda_pixel_ggir)
    else:
        raise ValueError(f"unknown network {net!r}")
    if not terms:
        raise ValueError("all loss weights are zero")
    return _sum(list(terms.values())), {k: t.item() for k, t in terms.items()}


# ---------------------------------------------------------------- training


@dataclass
class Checkpoint:
    net: str
    net_cfg: NetConfig
    train_cfg: TrainConfig
    params: Params
    epoch: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0
    rng_state: dict | None = None
    basis_digest: str = ""
    history: list[dict] = field(default_factory=list)


def to_batch(patches: list[np.ndarray], dtype=np.float32) -> Tensor:
    arr = np.stack([p if p.ndim == 3 else p[..., None] for p in patches]).astype(dtype)
    return ad.tensor(arr.transpose(0, 3, 1, 2), dtype=dtype)


def _ensure_rgb_channels(ds: PairDataset, net_cfg: NetConfig) -> None:
    r, _ = ds.get(0)
    c = 1 if r.ndim == 2 else r.shape[2]
    if c != net_cfg.input_channels:
        raise ValueError(f"dataset images have {c} channels, network expects {net_cfg.input_channels}")


def train(net: str, ds: PairDataset, cfg: TrainConfig, net_cfg: NetConfig = NetConfig(),
          basis: AlpBasis | None = None, resume: Checkpoint | None = None,
          log_path=None, progress=None) -> Checkpoint:
    """Train one network; an epoch is ceil(pairs / batch) steps on fresh random patches.

    Passing ``resume`` continues from its epoch with the stored optimizer and
    sampler state, reproducing the uninterrupted trajectory.
    """
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    _ensure_rgb_channels(ds, net_cfg)
    if net == "dprnet" and cfg.lambda_alp > 0 and basis is None:
        basis = fit_basis()
    digest = basis.digest() if basis is not None else ""

    if resume is None:
        ckpt = Checkpoint(net, net_cfg, cfg, init_network(net, net_cfg, cfg.seed), basis_digest=digest)
        rng = np.random.default_rng(cfg.seed)
    else:
        ckpt = resume
        if ckpt.net != net:
            raise ValueError(f"checkpoint holds {ckpt.net}, not {net}")
        if resume.basis_digest and basis is not None and resume.basis_digest != digest:
            raise ValueError("ALP basis differs from the one used for the checkpoint")
        ckpt.train_cfg = cfg
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state

    opt = ad.Adam(ckpt.params, lr=cfg.lr0)
    if ckpt.adam_m:
        opt.m = {k: v.copy() for k, v in ckpt.adam_m.items()}
        opt.v = {k: v.copy() for k, v in ckpt.adam_v.items()}
        opt.step_count = ckpt.adam_step
    plist = list(ckpt.params.values())
    steps = math.ceil(len(ds) / cfg.batch)

    for epoch in range(ckpt.epoch + 1, cfg.epochs + 1):
        opt.lr = learning_rate(epoch, cfg)
        totals: dict[str, float] = {}
        loss_sum = 0.0
        for it in range(steps):
            pairs = sample_patches(ds, cfg.batch, rng, cfg.patch)
            x = to_batch([p[0] for p in pairs])
            y = to_batch([p[1] for p in pairs])
            opt.zero_grad()
            _, derained = forward(net, x, ckpt.params, net_cfg)
            loss, terms = objective(net, y, derained, cfg, basis)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, step {it + 1}; terms={terms}; "
                    f"batch rainy range [{x.data.min():.4g}, {x.data.max():.4g}], "
                    f"derained range [{np.nanmin(derained.data):.4g}, {np.nanmax(derained.data):.4g}]")
            loss.backward()
            ad.clip_grad_norm(plist, cfg.clip_norm)
            opt.step()
            loss_sum += value
            for k, v in terms.items():
                totals[k] = totals.get(k, 0.0) + v
        row = {"epoch": epoch, "lr": opt.lr, "loss": loss_sum / steps}
        row.update({k: v / steps for k, v in sorted(totals.items())})
        ckpt.history.append(row)
        ckpt.epoch = epoch
        if progress is not None:
            progress(row)

    ckpt.adam_m, ckpt.adam_v, ckpt.adam_step = opt.m, opt.v, opt.step_count
    ckpt.rng_state = rng.bit_generator.state
    if log_path is not None:
        write_loss_log(ckpt.history, log_path)
    return ckpt


def train_dprnet(ds: PairDataset, cfg: TrainConfig, net_cfg: NetConfig = NetConfig(), basis=None, **kw) -> Checkpoint:
    return train("dprnet", ds, cfg, net_cfg, basis, **kw)


def train_ggirnet(ds: PairDataset, cfg: TrainConfig, net_cfg: NetConfig = NetConfig(), **kw) -> Checkpoint:
    return train("ggirnet", ds, cfg, net_cfg, None, **kw)


def write_loss_log(history: list[dict], path) -> None:
    """CSV with columns epoch, lr, loss, then the loss terms in name order."""
    extra = sorted({k for row in history for k in row} - {"epoch", "lr", "loss"})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss", *extra])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["lr"])), repr(float(row["loss"])),
                        *(repr(float(row.get(k, 0.0))) for k in extra)])


# ---------------------------------------------------------------- checkpoints


def _blob_entries(ckpt: Checkpoint):
    for kind, store in (("param", {k: p.data for k, p in ckpt.params.items()}),
                        ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name in store:
            yield kind, name, np.ascontiguousarray(store[name], dtype="<f4")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Magic, u32 version, u64 metadata length, JSON metadata, float32 blobs."""
    entries, blobs, offset = [], [], 0
    for kind, name, arr in _blob_entries(ckpt):
        raw = arr.tobytes()
        entries.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    meta = {
        "net": ckpt.net,
        "net_cfg": ckpt.net_cfg.to_dict(),
        "train_cfg": ckpt.train_cfg.to_dict(),
        "epoch": ckpt.epoch,
        "adam_step": ckpt.adam_step,
        "rng_state": ckpt.rng_state,
        "basis_digest": ckpt.basis_digest,
        "history": ckpt.history,
        "entries": entries,
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(meta_raw)))
        fh.write(meta_raw)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    head = len(CKPT_MAGIC) + 12
    if len(data) < head or data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack("<IQ", data[len(CKPT_MAGIC):head])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < head + meta_len:
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(data[head:head + meta_len])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt metadata ({exc})") from None
    base = head + meta_len
    net_cfg = NetConfig(**meta["net_cfg"])
    want = expected_shapes(meta["net"], net_cfg)
    params: Params = {}
    adam = {"adam_m": {}, "adam_v": {}}
    for e in meta["entries"]:
        shape = tuple(e["shape"])
        if e["name"] not in want or want[e["name"]] != shape:
            raise CheckpointError(f"{path}: shape mismatch for {e['name']}: {shape} vs {want.get(e['name'])}")
        if e["nbytes"] != 4 * int(np.prod(shape)):
            raise CheckpointError(f"{path}: size mismatch for {e['name']}")
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise CheckpointError(f"{path}: truncated blob {e['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=int(np.prod(shape)), offset=start).reshape(shape)
        arr = arr.astype(np.float32)
        if e["kind"] == "param":
            params[e["name"]] = ad.tensor(arr, True, np.float32, e["name"])
        else:
            adam[e["kind"]][e["name"]] = arr
    missing = set(want) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    params = {k: params[k] for k in want}
    return Checkpoint(meta["net"], net_cfg, TrainConfig(**meta["train_cfg"]), params, meta["epoch"],
                      adam["adam_m"], adam["adam_v"], meta["adam_step"], meta["rng_state"],
                      meta["basis_digest"], meta["history"])
