"""Desk-scale ablations: ALP vs L2 for DPRNet, GAM on/off, one vs two networks."""
from __future__ import annotations

import csv
import io
from dataclasses import replace
from pathlib import Path

import numpy as np

from .alp import AlpBasis
from .imagecore import PairDataset
from .metrics import dog_stack_mse, gaussian_stack_mse
from .networks import NetConfig, derain_image
from .training import Checkpoint, TrainConfig, train

# Desk-scale defaults: small enough that 30 epochs on 64 pairs take minutes on one core.
# 30 epochs of 4 steps leave no room for lr 1e-4, hence the larger step size.
DESK_NET = NetConfig(blocks=2, channels=16)
DESK_TRAIN = TrainConfig(epochs=30, patch=64, lr0=1e-3)


def apply(ckpt: Checkpoint, images: list[np.ndarray]) -> list[np.ndarray]:
    """Derained images clipped to [0, 1]."""
    return [np.clip(derain_image(ckpt.net, img, ckpt.params, ckpt.net_cfg)[0], 0.0, 1.0).astype(np.float64)
            for img in images]


def mean_metric(metric, outputs: list[np.ndarray], cleans: list[np.ndarray]) -> float:
    return float(np.mean([metric(o, c) for o, c in zip(outputs, cleans)]))


class Table:
    """One-row comparison table: column name -> mean metric."""

    def __init__(self, title: str, metric: str, columns: dict[str, float]):
        self.title = title
        self.metric = metric
        self.columns = columns

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", *self.columns])
        w.writerow([self.metric, *(f"{v:.6f}" for v in self.columns.values())])
        return buf.getvalue()

    def render(self) -> str:
        names = list(self.columns)
        widths = [max(len(n), 12) for n in names]
        head = " | ".join(n.rjust(w) for n, w in zip(names, widths))
        vals = " | ".join(f"{v:.4f}".rjust(w) for v, w in zip(self.columns.values(), widths))
        return f"{self.title} ({self.metric})\n{head}\n{vals}\n"

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())


def alp_vs_l2(ds: PairDataset, test: list[tuple], cfg: TrainConfig = DESK_TRAIN, net_cfg: NetConfig = DESK_NET,
              basis: AlpBasis | None = None, alp_ckpt: Checkpoint | None = None) -> tuple[Table, dict]:
    """DoG-stack MSE of DPRNet trained with pixel L2 alone vs with its ALP objective."""
    l2_cfg = replace(cfg, lambda_alp=0.0, lambda_pixel_dpr=1.0, pixel_loss="l2")
    l2 = train("dprnet", ds, l2_cfg, net_cfg)
    alp = alp_ckpt if alp_ckpt is not None else train("dprnet", ds, cfg, net_cfg, basis)
    rainy = [t[1] for t in test]
    clean = [t[2] for t in test]
    cols = {"L2": mean_metric(dog_stack_mse, apply(l2, rainy), clean),
            "ALP": mean_metric(dog_stack_mse, apply(alp, rainy), clean)}
    return Table("DPRNet loss ablation", "dog_mse", cols), {"L2": l2, "ALP": alp}


def gam(ds: PairDataset, test: list[tuple], cfg: TrainConfig = DESK_TRAIN, net_cfg: NetConfig = DESK_NET,
        gam_ckpt: Checkpoint | None = None) -> tuple[Table, dict]:
    """Gaussian-stack MSE of GGIRNet with and without the gradient attention module."""
    without = train("ggirnet", ds, cfg, replace(net_cfg, use_gam=False))
    with_gam = gam_ckpt if gam_ckpt is not None else train("ggirnet", ds, cfg, replace(net_cfg, use_gam=True))
    rainy = [t[1] for t in test]
    clean = [t[2] for t in test]
    cols = {"w/o GAM": mean_metric(gaussian_stack_mse, apply(without, rainy), clean),
            "w/ GAM": mean_metric(gaussian_stack_mse, apply(with_gam, rainy), clean)}
    return Table("GGIRNet attention ablation", "gaussian_mse", cols), {"w/o GAM": without, "w/ GAM": with_gam}


def one_task(ds: PairDataset, test: list[tuple], cfg: TrainConfig = DESK_TRAIN, net_cfg: NetConfig = DESK_NET,
             basis: AlpBasis | None = None, dpr_ckpt: Checkpoint | None = None,
             ggir_ckpt: Checkpoint | None = None) -> tuple[Table, dict]:
    """Gaussian images from DPRNet alone vs from GGIRNet in the two-network scheme."""
    dpr = dpr_ckpt if dpr_ckpt is not None else train("dprnet", ds, cfg, net_cfg, basis)
    ggir = ggir_ckpt if ggir_ckpt is not None else train("ggirnet", ds, cfg, net_cfg)
    rainy = [t[1] for t in test]
    clean = [t[2] for t in test]
    cols = {"one-task": mean_metric(gaussian_stack_mse, apply(dpr, rainy), clean),
            "two-network": mean_metric(gaussian_stack_mse, apply(ggir, rainy), clean)}
    return Table("Task decomposition ablation", "gaussian_mse", cols), {"dprnet": dpr, "ggirnet": ggir}
