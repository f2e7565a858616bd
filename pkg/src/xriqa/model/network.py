"""Two-column multi-level quality predictor at desk scale.

Each column is a small stride-2 convolutional pyramid. After every stage the
activation block is global-average-pooled; the pooled vectors of all stages
are concatenated into the column's multi-level feature vector (early stages
carry scale-dependent statistics, late stages more abstract ones). Each
column owns a dense bottleneck; the bottleneck outputs are concatenated and
regressed to a single score by a cascaded MLP head. Columns never share
weights. The low column is geometry-fixed (tier S); the high column accepts
any supported tier geometry thanks to the pooling.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from ..data import SCALE_MIN, SCALE_MAX, TIER_NAMES
from ..imaging import Raster, lanczos_resample
from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_STAGE_CHANNELS = (8, 16, 32, 64, 128)

COLUMN_LOW = "low"
COLUMN_HIGH = "high"


@dataclass
class ModelConfig:
    two_column: bool = True
    in_channels: int = 3
    stage_channels: tuple = DEFAULT_STAGE_CHANNELS
    kernel: int = 3
    stride: int = 2
    d_bottleneck: int = 64
    head_dims: tuple = (64, 16)
    tier_base: tuple = (512, 384)  # (w, h) of tier S; M and L double per step
    single_input: str = COLUMN_LOW  # 1C variant: which view the column gets
    norm_momentum: float = 0.99
    norm_eps: float = 1e-3

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.head_dims = tuple(self.head_dims)
        self.tier_base = tuple(self.tier_base)
        if len(self.stage_channels) < 2:
            raise ValueError("a column needs at least 2 stages")
        if self.single_input not in (COLUMN_LOW, COLUMN_HIGH):
            raise ValueError(f"unknown single_input {self.single_input!r}")
        w, h = self.tier_base
        for _ in self.stage_channels:
            w, h = -(-w // self.stride), -(-h // self.stride)
            if w < 1 or h < 1:
                raise ValueError("tier_base too small for the stage count")

    @property
    def feature_dim(self) -> int:
        return sum(self.stage_channels)

    @property
    def columns(self) -> tuple:
        return (COLUMN_LOW, COLUMN_HIGH) if self.two_column else (COLUMN_LOW,)

    @property
    def head_in(self) -> int:
        return self.d_bottleneck * len(self.columns)

    def tier_geometries(self) -> dict[str, tuple]:
        w, h = self.tier_base
        return {name: (w * 2 ** i, h * 2 ** i) for i, name in enumerate(TIER_NAMES)}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    stats: dict[str, np.ndarray] = field(default_factory=dict)  # norm running stats

    def tensor_names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def set_trainable(self, predicate) -> None:
        for name, t in self.tensors.items():
            t.requires_grad = bool(predicate(name))

    def trainable_names(self) -> list[str]:
        return [n for n, t in self.tensors.items() if t.requires_grad]

    def snapshot(self) -> dict:
        return {
            "tensors": {n: t.data.copy() for n, t in self.tensors.items()},
            "stats": {n: a.copy() for n, a in self.stats.items()},
        }

    def restore(self, snap: dict) -> None:
        for n, a in snap["tensors"].items():
            self.tensors[n].data = a.copy()
        for n, a in snap["stats"].items():
            self.stats[n] = a.copy()


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Deterministic fan-in-scaled uniform init; norm running stats (0, 1)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    params = ModelParams(config=config)
    k = config.kernel
    for col in config.columns:
        c_in = config.in_channels
        for si, c_out in enumerate(config.stage_channels):
            pre = f"{col}.stage{si}"
            params.tensors[f"{pre}.w"] = Tensor(_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
            params.tensors[f"{pre}.b"] = Tensor(np.zeros(c_out))
            params.tensors[f"{pre}.gamma"] = Tensor(np.ones(c_out))
            params.tensors[f"{pre}.beta"] = Tensor(np.zeros(c_out))
            params.stats[f"{pre}.mean"] = np.zeros(c_out)
            params.stats[f"{pre}.var"] = np.ones(c_out)
            c_in = c_out
        params.tensors[f"{col}.bottleneck.w"] = Tensor(
            _uniform(rng, (config.feature_dim, config.d_bottleneck), config.feature_dim))
        params.tensors[f"{col}.bottleneck.b"] = Tensor(np.zeros(config.d_bottleneck))
    dims = (config.head_in,) + config.head_dims + (1,)
    for li in range(len(dims) - 1):
        params.tensors[f"head.{li}.w"] = Tensor(_uniform(rng, (dims[li], dims[li + 1]), dims[li]))
        params.tensors[f"head.{li}.b"] = Tensor(np.zeros(dims[li + 1]))
    return params


def column_tensor_names(config: ModelConfig, column: str) -> list[str]:
    names = []
    for si in range(len(config.stage_channels)):
        names += [f"{column}.stage{si}.{p}" for p in ("w", "b", "gamma", "beta")]
    names += [f"{column}.bottleneck.w", f"{column}.bottleneck.b"]
    return names


def is_norm_param(name: str) -> bool:
    return name.endswith(".gamma") or name.endswith(".beta")


def is_column_stage_param(name: str) -> bool:
    return ".stage" in name


def _column_features(params: ModelParams, column: str, x: Tensor) -> Tensor:
    """Run the stages and concatenate the per-stage GAP vectors: (N, sum C)."""
    cfg = params.config
    pooled = []
    for si in range(len(cfg.stage_channels)):
        pre = f"{column}.stage{si}"
        x = ad.conv2d(x, params.tensors[f"{pre}.w"], params.tensors[f"{pre}.b"],
                      stride=cfg.stride, pad=cfg.kernel // 2)
        x = ad.channel_norm(x, params.tensors[f"{pre}.gamma"], params.tensors[f"{pre}.beta"],
                            params.stats[f"{pre}.mean"], params.stats[f"{pre}.var"],
                            eps=cfg.norm_eps)
        x = ad.swish(x)
        pooled.append(ad.gap(x))
    return ad.concat(pooled, axis=1)


def _bottleneck(params: ModelParams, column: str, feats: Tensor) -> Tensor:
    z = ad.dense(feats, params.tensors[f"{column}.bottleneck.w"],
                 params.tensors[f"{column}.bottleneck.b"])
    return ad.swish(z)


def _head(params: ModelParams, z: Tensor) -> Tensor:
    n_layers = len(params.config.head_dims) + 1
    for li in range(n_layers):
        z = ad.dense(z, params.tensors[f"head.{li}.w"], params.tensors[f"head.{li}.b"])
        if li < n_layers - 1:
            z = ad.swish(z)
    return z


def _as_batch(raster: Raster) -> np.ndarray:
    return raster.samples.transpose(2, 0, 1)[None, :, :, :]


def _check_channels(params: ModelParams, x: np.ndarray) -> None:
    if x.shape[1] != params.config.in_channels:
        raise ValueError(
            f"expected {params.config.in_channels} channel(s), got {x.shape[1]}")


def forward_batch(params: ModelParams, low: np.ndarray,
                  high: np.ndarray | None) -> Tensor:
    """Batched prediction: low (N,C,h,w) at tier-S geometry, high (N,C,H,W)
    at a single tier geometry. Returns an (N,) tensor, unclamped."""
    cfg = params.config
    _check_channels(params, low)
    zs = []
    x_low = Tensor(low)
    feats_low = _column_features(params, COLUMN_LOW, x_low)
    zs.append(_bottleneck(params, COLUMN_LOW, feats_low))
    if cfg.two_column:
        if high is None:
            raise ValueError("two-column model needs the high-resolution view")
        _check_channels(params, high)
        feats_high = _column_features(params, COLUMN_HIGH, Tensor(high))
        zs.append(_bottleneck(params, COLUMN_HIGH, feats_high))
    z = ad.concat(zs, axis=1) if len(zs) > 1 else zs[0]
    return _flatten_scalar(_head(params, z))


def _flatten_scalar(out: Tensor) -> Tensor:
    squeezed = Tensor(out.data[:, 0], parents=(out,))

    def backward(g):
        if out.requires_grad or out._parents:
            out._accumulate(g[:, None])
    squeezed._backward = backward
    squeezed.requires_grad = out.requires_grad or bool(out._parents)
    return squeezed


def _expected_low_geometry(cfg: ModelConfig) -> tuple:
    return cfg.tier_base


def mlsp_features(params: ModelParams, column: str, img: Raster) -> np.ndarray:
    """Multi-level pooled feature vector of one column for one image."""
    cfg = params.config
    if column not in cfg.columns:
        raise ValueError(f"model has no column {column!r}")
    geoms = cfg.tier_geometries()
    if column == COLUMN_LOW and img.geometry != _expected_low_geometry(cfg):
        raise ValueError(
            f"low column expects {_expected_low_geometry(cfg)}, got {img.geometry}")
    if column == COLUMN_HIGH and img.geometry not in geoms.values():
        raise ValueError(f"unsupported geometry {img.geometry} for the high column")
    x = _as_batch(img)
    _check_channels(params, x)
    return _column_features(params, column, Tensor(x)).data[0]


def forward(params: ModelParams, img_low: Raster, img_high: Raster | None) -> float:
    """Single-image forward pass; unclamped score."""
    cfg = params.config
    if img_low.geometry != _expected_low_geometry(cfg):
        raise ValueError(
            f"low input must be {_expected_low_geometry(cfg)}, got {img_low.geometry}")
    high = None
    if cfg.two_column:
        if img_high is None:
            raise ValueError("two-column model needs img_high")
        if img_high.geometry not in cfg.tier_geometries().values():
            raise ValueError(f"unsupported high geometry {img_high.geometry}")
        high = _as_batch(img_high)
    return float(forward_batch(params, _as_batch(img_low), high).data[0])


def predict(params: ModelParams, img: Raster) -> float:
    """Score an image presented at one of the supported tier geometries.

    The low column receives the tier-S resample, the high column the native
    raster; the output is clamped to the rating scale.
    """
    cfg = params.config
    geoms = cfg.tier_geometries()
    if img.geometry not in geoms.values():
        raise ValueError(
            f"geometry {img.geometry} matches no supported tier {sorted(geoms.values())}")
    base_w, base_h = cfg.tier_base
    low_raster = img if img.geometry == (base_w, base_h) else lanczos_resample(img, base_w, base_h)
    if not cfg.two_column:
        chosen = low_raster if cfg.single_input == COLUMN_LOW else img
        raw = float(forward_batch(params, _as_batch(chosen), None).data[0])
    else:
        raw = forward(params, low_raster, img)
    return float(np.clip(raw, SCALE_MIN, SCALE_MAX))
