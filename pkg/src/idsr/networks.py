"""Attention modules, residual blocks and the two rain-estimation networks.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by layer path
(``"blocks.0.cam.fc1.w"``). Forward functions are pure given the map.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scalespace import SOBEL_X, SOBEL_Y

CAM_REDUCTION = 4
SAM_KERNEL = 7
GAM_KERNEL = 5
GAM_MASK_KERNEL = 5
# The output conv starts near zero so both networks begin close to the
# identity (derained ~= rainy) instead of emitting a large random residual.
TAIL_INIT_SCALE = 0.1

Params = dict[str, Tensor]


@dataclass(frozen=True)
class NetConfig:
    blocks: int = 4
    channels: int = 32
    input_channels: int = 3
    use_gam: bool = True

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.channels < 8:
            raise ValueError("channels must be >= 8")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- init


def _conv_params(params: Params, prefix: str, c_out: int, c_in: int, k: int, rng, dtype) -> None:
    params[f"{prefix}.w"] = ad.tensor(ad.kaiming_uniform((c_out, c_in, k, k), rng, dtype), True, dtype, f"{prefix}.w")
    params[f"{prefix}.b"] = ad.tensor(np.zeros(c_out), True, dtype, f"{prefix}.b")


def init_cam(params: Params, prefix: str, channels: int, rng, dtype=np.float32) -> None:
    hidden = max(1, channels // CAM_REDUCTION)
    _conv_params(params, f"{prefix}.fc1", hidden, channels, 1, rng, dtype)
    _conv_params(params, f"{prefix}.fc2", channels, hidden, 1, rng, dtype)


def init_sam(params: Params, prefix: str, rng, dtype=np.float32) -> None:
    _conv_params(params, f"{prefix}.conv", 1, 2, SAM_KERNEL, rng, dtype)


def init_gam(params: Params, prefix: str, channels: int, rng, dtype=np.float32) -> None:
    """W1..W7 / b1..b7: W1, W4 are 1x1 C->1; W2, W3, W5, W6 5x5 1->1; W7 5x5 2->1."""
    for q in (1, 4):
        _conv_params(params, f"{prefix}.w{q}", 1, channels, 1, rng, dtype)
    for q in (2, 3, 5, 6):
        _conv_params(params, f"{prefix}.w{q}", 1, 1, GAM_KERNEL, rng, dtype)
    _conv_params(params, f"{prefix}.w7", 1, 2, GAM_MASK_KERNEL, rng, dtype)


def init_block(params: Params, prefix: str, channels: int, kind: str, rng, dtype=np.float32) -> None:
    _conv_params(params, f"{prefix}.conv1", channels, channels, 3, rng, dtype)
    _conv_params(params, f"{prefix}.conv2", channels, channels, 3, rng, dtype)
    init_cam(params, f"{prefix}.cam", channels, rng, dtype)
    if kind == "csarb":
        init_sam(params, f"{prefix}.sam", rng, dtype)
    elif kind == "cgarb":
        init_gam(params, f"{prefix}.gam", channels, rng, dtype)
    elif kind != "cgarb-nogam":
        raise ValueError(f"unknown block kind {kind!r}")


def block_kind(net: str, cfg: NetConfig) -> str:
    if net == "dprnet":
        return "csarb"
    if net == "ggirnet":
        return "cgarb" if cfg.use_gam else "cgarb-nogam"
    raise ValueError(f"unknown network {net!r}")


def init_network(net: str, cfg: NetConfig, seed: int = 0, dtype=np.float32) -> Params:
    """Kaiming-uniform weights (output conv scaled down), zero biases, fixed order."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    kind = block_kind(net, cfg)
    _conv_params(params, "head", cfg.channels, cfg.input_channels, 3, rng, dtype)
    for i in range(cfg.blocks):
        init_block(params, f"blocks.{i}", cfg.channels, kind, rng, dtype)
    _conv_params(params, "tail", cfg.input_channels, cfg.channels, 3, rng, dtype)
    params["tail.w"].data *= np.float32(TAIL_INIT_SCALE)
    return params


def expected_shapes(net: str, cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_network(net, cfg).items()}


def parameter_count(net: str, cfg: NetConfig) -> int:
    return int(sum(np.prod(s) for s in expected_shapes(net, cfg).values()))


# ---------------------------------------------------------------- modules


def _conv(x: Tensor, params: Params, prefix: str, padding: str = "replicate") -> Tensor:
    return ad.conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"], padding=padding)


def cam_weights(F: Tensor, params: Params, prefix: str = "cam") -> Tensor:
    """Per-channel gate sigma(MLP(avg) + MLP(max)), shape N x C x 1 x 1."""
    c = params[f"{prefix}.fc1.w"].shape[1]
    if F.shape[1] != c:
        raise ValueError(f"CAM expects {c} channels, got {F.shape[1]}")
    avg, mx = ad.global_pool_stats(F)

    def mlp(v):
        return _conv(ad.relu(_conv(v, params, f"{prefix}.fc1", "zero")), params, f"{prefix}.fc2", "zero")

    return ad.sigmoid(ad.add(mlp(avg), mlp(mx)))


def cam_forward(F: Tensor, params: Params, prefix: str = "cam") -> Tensor:
    return ad.mul(F, cam_weights(F, params, prefix))


def sam_map(F: Tensor, params: Params, prefix: str = "sam") -> Tensor:
    avg, mx = ad.channel_pool_stats(F)
    return ad.sigmoid(_conv(ad.concat_channels([avg, mx]), params, f"{prefix}.conv"))


def sam_forward(F: Tensor, params: Params, prefix: str = "sam") -> Tensor:
    return ad.broadcast_mul_channel(F, sam_map(F, params, prefix))


def gam_mask(F: Tensor, params: Params, prefix: str = "gam") -> Tensor:
    """M_G in (0, 1), shape N x 1 x H x W, from depthwise Sobel features."""
    c = params[f"{prefix}.w1.w"].shape[1]
    if F.shape[1] != c:
        raise ValueError(f"GAM expects {c} channels, got {F.shape[1]}")

    def branch(g, q0):
        t = _conv(g, params, f"{prefix}.w{q0}")
        t = ad.relu(_conv(t, params, f"{prefix}.w{q0 + 1}"))
        return ad.relu(_conv(t, params, f"{prefix}.w{q0 + 2}"))

    gx = branch(ad.filter2d(F, SOBEL_X), 1)
    gy = branch(ad.filter2d(F, SOBEL_Y), 4)
    return ad.sigmoid(_conv(ad.concat_channels([gx, gy]), params, f"{prefix}.w7"))


def gam_forward(F: Tensor, params: Params, prefix: str = "gam") -> Tensor:
    return ad.broadcast_mul_channel(F, gam_mask(F, params, prefix))


def _trunk(x: Tensor, params: Params, prefix: str) -> Tensor:
    t = ad.relu(_conv(x, params, f"{prefix}.conv1"))
    return ad.relu(_conv(t, params, f"{prefix}.conv2"))


def csarb_forward(x: Tensor, params: Params, prefix: str = "block") -> Tensor:
    t = cam_forward(_trunk(x, params, prefix), params, f"{prefix}.cam")
    return ad.add(sam_forward(t, params, f"{prefix}.sam"), x)


def cgarb_forward(x: Tensor, params: Params, prefix: str = "block", use_gam: bool = True) -> Tensor:
    t = cam_forward(_trunk(x, params, prefix), params, f"{prefix}.cam")
    if use_gam:
        t = gam_forward(t, params, f"{prefix}.gam")
    return ad.add(t, x)


def _network_forward(x: Tensor, params: Params, cfg: NetConfig, block) -> tuple[Tensor, Tensor]:
    if x.data.ndim != 4 or x.shape[1] != cfg.input_channels:
        raise ValueError(f"expected N x {cfg.input_channels} x H x W input, got {x.shape}")
    shallow = _conv(x, params, "head")
    f = shallow
    for i in range(cfg.blocks):
        f = block(f, f"blocks.{i}")
    rain = _conv(ad.add(f, shallow), params, "tail")
    return rain, ad.sub(x, rain)


def dprnet_forward(x: Tensor, params: Params, cfg: NetConfig) -> tuple[Tensor, Tensor]:
    """Returns (rain estimate, derained = x - rain)."""
    return _network_forward(x, params, cfg, lambda f, p: csarb_forward(f, params, p))


def ggirnet_forward(x: Tensor, params: Params, cfg: NetConfig) -> tuple[Tensor, Tensor]:
    return _network_forward(x, params, cfg, lambda f, p: cgarb_forward(f, params, p, cfg.use_gam))


def forward(net: str, x: Tensor, params: Params, cfg: NetConfig) -> tuple[Tensor, Tensor]:
    if net == "dprnet":
        return dprnet_forward(x, params, cfg)
    if net == "ggirnet":
        return ggirnet_forward(x, params, cfg)
    raise ValueError(f"unknown network {net!r}")


def derain_image(net: str, img: np.ndarray, params: Params, cfg: NetConfig) -> tuple[np.ndarray, np.ndarray]:
    """Run one H x W x C image through a network; returns (derained, rain) unclipped."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    x = ad.tensor(arr.transpose(2, 0, 1)[None])
    with ad.no_grad():
        rain, derained = forward(net, x, params, cfg)
    return derained.data[0].transpose(1, 2, 0), rain.data[0].transpose(1, 2, 0)
