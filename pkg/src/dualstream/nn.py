"""CNN encoder and the two-layer MLP heads (projector / predictor).

Encoder: 3x3 stem, then residual stages with a stride-2 transition at the
entry of each stage. The default desk configuration maps a 3x32x32 image to
a 128x4x4 feature map; that map feeds both the pooled C-stream path and the
token-based T-stream path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .rng import SeededRng
from .tensor import Tensor, batch_norm, conv2d, matmul, relu, add
from . import tree as tr


@dataclass(frozen=True)
class EncoderConfig:
    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (32, 64, 128)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2)
    input_resolution: int = 32

    def __post_init__(self):
        if any(c <= 0 for c in (self.stem_channels, *self.stage_channels)):
            raise ConfigError("all channel counts must be positive")
        if len(self.stage_channels) != len(self.blocks_per_stage):
            raise ConfigError("stage_channels and blocks_per_stage lengths differ")
        if self.feature_resolution < 2:
            raise ConfigError(
                "final feature map must be at least 2x2 so the attention "
                "stream sees >= 4 tokens"
            )

    @property
    def feature_resolution(self) -> int:
        return self.input_resolution // (2 ** len(self.stage_channels))

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]


@dataclass(frozen=True)
class MlpHeadConfig:
    in_dim: int = 128
    hidden_dim: int = 256
    out_dim: int = 64

    def __post_init__(self):
        if min(self.in_dim, self.hidden_dim, self.out_dim) <= 0:
            raise ConfigError("all head dims must be positive")


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _bn_params(channels: int) -> dict:
    return {
        "gamma": Tensor(np.ones(channels, dtype=np.float32), requires_grad=True),
        "beta": Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True),
        "mean": Tensor(np.zeros(channels, dtype=np.float32)),
        "var": Tensor(np.ones(channels, dtype=np.float32)),
    }


def _conv_params(rng, c_in: int, c_out: int, k: int) -> Tensor:
    return he_uniform(rng, (c_out, c_in, k, k), fan_in=c_in * k * k)


def init_encoder_params(cfg: EncoderConfig, rng: SeededRng) -> dict:
    np_rng = rng.numpy_rng()
    params: dict = {
        "stem": {"w": _conv_params(np_rng, 3, cfg.stem_channels, 3),
                 "bn": _bn_params(cfg.stem_channels)},
    }
    c_in = cfg.stem_channels
    for s, c_out in enumerate(cfg.stage_channels):
        stage = []
        for b in range(cfg.blocks_per_stage[s]):
            stride = 2 if b == 0 else 1
            # downsampling uses 2x2 stride-2 kernels: the conv contract
            # requires integral output sizes, which 3x3 stride-2 on even
            # inputs cannot satisfy
            block = {
                "conv1": _conv_params(np_rng, c_in, c_out, 2 if stride == 2 else 3),
                "bn1": _bn_params(c_out),
                "conv2": _conv_params(np_rng, c_out, c_out, 3),
                "bn2": _bn_params(c_out),
            }
            if stride != 1 or c_in != c_out:
                block["down"] = {
                    "w": _conv_params(np_rng, c_in, c_out, 2 if stride == 2 else 1),
                    "bn": _bn_params(c_out),
                }
            stage.append(block)
            c_in = c_out
        params[f"stage{s + 1}"] = stage
    return params


def _bn(x, p, training, track):
    return batch_norm(x, p["gamma"], p["beta"], p["mean"], p["var"],
                      training=training, track_stats=track)


def _res_block(x, p, stride, training, track):
    pad1 = 1 if stride == 1 else 0
    y = relu(_bn(conv2d(x, p["conv1"], stride=stride, pad=pad1), p["bn1"], training, track))
    y = _bn(conv2d(y, p["conv2"], stride=1, pad=1), p["bn2"], training, track)
    if "down" in p:
        shortcut = _bn(conv2d(x, p["down"]["w"], stride=stride, pad=0),
                       p["down"]["bn"], training, track)
    else:
        shortcut = x
    return relu(add(y, shortcut))


def encoder_forward(params: dict, image: Tensor, cfg: EncoderConfig,
                    training: bool = False, track_stats: bool = True) -> Tensor:
    """Image batch (B,3,H,W) -> last-stage pre-pooling map (B,C,h,w)."""
    if image.ndim != 4 or image.shape[2] != cfg.input_resolution \
            or image.shape[3] != cfg.input_resolution:
        raise ConfigError(
            f"encoder expects (B,3,{cfg.input_resolution},{cfg.input_resolution}) "
            f"input, got {tuple(image.shape)}"
        )
    x = relu(_bn(conv2d(image, params["stem"]["w"], stride=1, pad=1),
                 params["stem"]["bn"], training, track_stats))
    for s in range(len(cfg.stage_channels)):
        for b, block in enumerate(params[f"stage{s + 1}"]):
            x = _res_block(x, block, 2 if b == 0 else 1, training, track_stats)
    return x


def init_head_params(cfg: MlpHeadConfig, rng: SeededRng) -> dict:
    np_rng = rng.numpy_rng()
    return {
        "w1": he_uniform(np_rng, (cfg.in_dim, cfg.hidden_dim), fan_in=cfg.in_dim),
        "b1": Tensor(np.zeros(cfg.hidden_dim, dtype=np.float32), requires_grad=True),
        "bn": _bn_params(cfg.hidden_dim),
        "w2": he_uniform(np_rng, (cfg.hidden_dim, cfg.out_dim), fan_in=cfg.hidden_dim),
        "b2": Tensor(np.zeros(cfg.out_dim, dtype=np.float32), requires_grad=True),
    }


def head_forward(params: dict, feat: Tensor, training: bool = False,
                 track_stats: bool = True) -> Tensor:
    """FC -> BN -> ReLU -> FC on a (B, in_dim) feature batch."""
    if feat.ndim != 2 or feat.shape[1] != params["w1"].shape[0]:
        raise ConfigError(
            f"head expects (B,{params['w1'].shape[0]}) input, got {tuple(feat.shape)}"
        )
    h = add(matmul(feat, params["w1"]), params["b1"])
    h = relu(_bn(h, params["bn"], training, track_stats))
    return add(matmul(h, params["w2"]), params["b2"])


def project_and_predict(heads: dict, feat: Tensor, training: bool = False,
                        track_stats: bool = True) -> Tensor:
    """Apply the projector, then the predictor when one is present.

    Momentum branches pass ``{"projector": ..., "predictor": None}``.
    """
    out = head_forward(heads["projector"], feat, training, track_stats)
    if heads.get("predictor") is not None:
        out = head_forward(heads["predictor"], out, training, track_stats)
    return out


def param_count(params) -> int:
    return sum(t.size for _, t in tr.flatten(params))
