"""Two-stage training of the quality predictor.

Stage 1 freezes the columns and trains only the bottlenecks and the head;
because the columns are frozen, their multi-level features (per horizontal
flip state) are computed once and cached, which makes the stage cheap.
Stage 2 fine-tunes everything except the normalization layers (running
statistics and their affine terms stay fixed). Both stages run NAdam with
per-group gradient clipping, early-stop on the validation MSE, and restore
the best-validation weights. Horizontal flipping is applied independently
per column; images are fed whole, never cropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .network import (COLUMN_HIGH, COLUMN_LOW, ModelParams, _bottleneck,
                      _column_features, _flatten_scalar, _head, is_column_stage_param,
                      is_norm_param)
from .optim import NadamConfig, NadamState, nadam_step


@dataclass
class TrainConfig:
    stage1_lr: float = 1e-3
    stage2_lr: float = 1e-4
    max_epochs: int = 40
    patience: int = 10
    clipnorm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    flip_augment: bool = True
    seed: int = 0
    batch_size: int = 32
    stage1_max_epochs: int | None = None  # desk-budget overrides; default max_epochs
    stage2_max_epochs: int | None = None
    init_output_bias: bool = True  # start the head's bias at the train-target mean
    calibrate_norm_stats: bool = True  # set running stats from data before stage 1
    calibration_samples: int = 128

    def __post_init__(self):
        if self.patience > self.max_epochs:
            raise ValueError("patience must be <= max_epochs")
        if self.clipnorm <= 0:
            raise ValueError("clipnorm must be > 0")


@dataclass
class TrainSample:
    """One training example: both views as (C, H, W) arrays plus the target."""
    low: np.ndarray
    high: np.ndarray
    target: float
    image_id: str = ""
    tier: str = ""


def _views(params: ModelParams, s: TrainSample) -> tuple[np.ndarray, np.ndarray | None]:
    cfg = params.config
    if cfg.two_column:
        return s.low, s.high
    return (s.low if cfg.single_input == COLUMN_LOW else s.high), None


def _flip(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1]


def _batch_forward(params: ModelParams, samples: list[TrainSample],
                   flips: tuple[np.ndarray, np.ndarray] | None) -> Tensor:
    lows, highs = [], []
    for i, s in enumerate(samples):
        low, high = _views(params, s)
        if flips is not None and flips[0][i]:
            low = _flip(low)
        lows.append(low)
        if high is not None:
            highs.append(_flip(high) if flips is not None and flips[1][i] else high)
    low_batch = np.ascontiguousarray(np.stack(lows))
    high_batch = np.ascontiguousarray(np.stack(highs)) if highs else None
    from .network import forward_batch
    return forward_batch(params, low_batch, high_batch)


def _group_by_geometry(params: ModelParams, idx: list[int],
                       samples: list[TrainSample]) -> dict[tuple, list[int]]:
    groups: dict[tuple, list[int]] = {}
    for i in idx:
        low, high = _views(params, samples[i])
        key = high.shape if high is not None else low.shape
        groups.setdefault(key, []).append(i)
    return groups


def loss_and_gradients(params: ModelParams, batch: list[TrainSample],
                       flips: tuple[np.ndarray, np.ndarray] | None = None
                       ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error over the batch and reverse-mode gradients for every
    parameter; frozen parameters receive zero gradients."""
    if not batch:
        raise ValueError("empty batch")
    params.zero_grads()
    n = len(batch)
    groups = _group_by_geometry(params, list(range(n)), batch)
    loss_terms = []
    for idx in groups.values():
        sub = [batch[i] for i in idx]
        sub_flips = None
        if flips is not None:
            sub_flips = (flips[0][idx], flips[1][idx])
        pred = _batch_forward(params, sub, sub_flips)
        target = np.array([s.target for s in sub], dtype=np.float64)
        loss_terms.append(ad.squared_error_sum(pred, target))
    total = loss_terms[0]
    for term in loss_terms[1:]:
        total = ad.add(total, term)
    loss = ad.scale(total, 1.0 / n)
    loss.backward()
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for name, t in params.tensors.items()}
    return float(loss.data), grads


def _eval_mse(params: ModelParams, samples: list[TrainSample], batch_size: int) -> float:
    sse, n = 0.0, 0
    groups = _group_by_geometry(params, list(range(len(samples))), samples)
    for idx in groups.values():
        for start in range(0, len(idx), batch_size):
            chunk = [samples[i] for i in idx[start:start + batch_size]]
            pred = _batch_forward(params, chunk, None).data
            target = np.array([s.target for s in chunk])
            sse += float(((pred - target) ** 2).sum())
            n += len(chunk)
    return sse / n


def _cache_features(params: ModelParams, samples: list[TrainSample],
                    with_flips: bool, batch_size: int) -> dict[str, np.ndarray]:
    """Per-column multi-level features for every sample and flip state."""
    cfg = params.config
    cache: dict[str, np.ndarray] = {}
    views: dict[str, int] = {COLUMN_LOW: 0}
    if cfg.two_column:
        views[COLUMN_HIGH] = 1
    flip_states = (False, True) if with_flips else (False,)
    for col, view_i in views.items():
        for flipped in flip_states:
            feats = np.empty((len(samples), cfg.feature_dim))
            groups = _group_by_geometry(params, list(range(len(samples))), samples)
            for idx in groups.values():
                for start in range(0, len(idx), batch_size):
                    chunk = idx[start:start + batch_size]
                    arrs = []
                    for i in chunk:
                        v = _views(params, samples[i])[view_i]
                        arrs.append(_flip(v) if flipped else v)
                    x = Tensor(np.ascontiguousarray(np.stack(arrs)))
                    feats[chunk] = _column_features(params, col, x).data
            cache[f"{col}.{int(flipped)}"] = feats
    return cache


def _head_forward_cached(params: ModelParams, cache: dict[str, np.ndarray],
                         idx: np.ndarray, flips: tuple | None) -> Tensor:
    zs = []
    for vi, col in enumerate(params.config.columns):
        if flips is None:
            feats = cache[f"{col}.0"][idx]
        else:
            f = flips[vi].astype(bool)
            feats = np.where(f[:, None], cache[f"{col}.1"][idx], cache[f"{col}.0"][idx])
        zs.append(_bottleneck(params, col, Tensor(feats)))
    z = ad.concat(zs, axis=1) if len(zs) > 1 else zs[0]
    return _flatten_scalar(_head(params, z))


def calibrate_norm_stats(params: ModelParams, samples: list[TrainSample],
                         batch_size: int = 32, limit: int = 128) -> None:
    """Set each stage's running statistics from the pre-normalization
    activations observed on (a prefix of) the training inputs.

    Runs once, before any training; both stages keep the statistics frozen
    afterwards. Stages are calibrated in order because each stage's output
    feeds the next.
    """
    from . import autodiff as ad
    cfg = params.config
    subset = samples[:limit]
    for view_i, col in enumerate(cfg.columns):
        groups = _group_by_geometry(params, list(range(len(subset))), subset)
        per_geo_x = []
        for idx in groups.values():
            arrs = [_views(params, subset[i])[view_i if cfg.two_column else 0]
                    for i in idx]
            per_geo_x.append(np.ascontiguousarray(np.stack(arrs)))
        for si in range(len(cfg.stage_channels)):
            pre = f"{col}.stage{si}"
            outs = []
            pre_acts = []
            for x in per_geo_x:
                z = ad.conv2d(Tensor(x), params.tensors[f"{pre}.w"],
                              params.tensors[f"{pre}.b"], stride=cfg.stride,
                              pad=cfg.kernel // 2)
                pre_acts.append(z.data)
            flat = np.concatenate([a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)
                                   for a in pre_acts], axis=1)
            params.stats[f"{pre}.mean"] = flat.mean(axis=1)
            params.stats[f"{pre}.var"] = flat.var(axis=1) + 1e-12
            for a in pre_acts:
                z = ad.channel_norm(Tensor(a), params.tensors[f"{pre}.gamma"],
                                    params.tensors[f"{pre}.beta"],
                                    params.stats[f"{pre}.mean"],
                                    params.stats[f"{pre}.var"], eps=cfg.norm_eps)
                outs.append(ad.swish(z).data)
            per_geo_x = outs


def _run_stage(params: ModelParams, train: list[TrainSample], val: list[TrainSample],
               cfg: TrainConfig, stage: int) -> list[dict]:
    lr = cfg.stage1_lr if stage == 1 else cfg.stage2_lr
    max_epochs = (cfg.stage1_max_epochs if stage == 1 else cfg.stage2_max_epochs) or cfg.max_epochs
    opt_cfg = NadamConfig(lr=lr, beta1=cfg.beta1, beta2=cfg.beta2,
                          eps=cfg.eps, clipnorm=cfg.clipnorm)
    state = NadamState()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, stage]))

    if stage == 1:
        params.set_trainable(lambda n: not is_column_stage_param(n))
        cache = _cache_features(params, train, cfg.flip_augment, cfg.batch_size)
        val_cache = _cache_features(params, val, False, cfg.batch_size)
        val_targets = np.array([s.target for s in val])
    else:
        params.set_trainable(lambda n: not is_norm_param(n))
        cache = None
    trainable = {n: params.tensors[n] for n in params.trainable_names()}

    history: list[dict] = []
    # the stage must never end worse than it started: the entry weights are
    # the incumbent best, and patience counts from here
    if stage == 1:
        pred = _head_forward_cached(params, val_cache, np.arange(len(val)), None).data
        best_val = float(((pred - val_targets) ** 2).mean())
    else:
        best_val = _eval_mse(params, val, cfg.batch_size)
    best_epoch, best_snap = -1, params.snapshot()
    t = 0
    n_cols = len(params.config.columns)
    for epoch in range(max_epochs):
        order = rng.permutation(len(train))
        epoch_sse = 0.0
        if stage == 1:
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                flips = None
                if cfg.flip_augment:
                    flips = tuple(rng.integers(0, 2, size=len(idx)) for _ in range(n_cols))
                params.zero_grads()
                pred = _head_forward_cached(params, cache, idx, flips)
                target = np.array([train[i].target for i in idx])
                loss = ad.scale(ad.squared_error_sum(pred, target), 1.0 / len(idx))
                loss.backward()
                grads = {n: (tt.grad if tt.grad is not None else np.zeros_like(tt.data))
                         for n, tt in trainable.items()}
                t += 1
                nadam_step(trainable, grads, t, opt_cfg, state)
                epoch_sse += float(loss.data) * len(idx)
        else:
            groups = _group_by_geometry(params, list(order), train)
            batches = []
            for idx in groups.values():
                for start in range(0, len(idx), cfg.batch_size):
                    batches.append(idx[start:start + cfg.batch_size])
            for bi in rng.permutation(len(batches)):
                idx = batches[bi]
                samples = [train[i] for i in idx]
                flips = None
                if cfg.flip_augment:
                    flips = (rng.integers(0, 2, size=len(idx)),
                             rng.integers(0, 2, size=len(idx)))
                mse_val, grads = loss_and_gradients(params, samples, flips)
                t += 1
                nadam_step(trainable, {n: grads[n] for n in trainable}, t, opt_cfg, state)
                epoch_sse += mse_val * len(idx)

        if stage == 1:
            pred = _head_forward_cached(params, val_cache, np.arange(len(val)), None).data
            val_mse = float(((pred - val_targets) ** 2).mean())
        else:
            val_mse = _eval_mse(params, val, cfg.batch_size)
        history.append({"stage": stage, "epoch": epoch,
                        "train_mse": epoch_sse / len(train), "val_mse": val_mse})
        if val_mse < best_val:
            best_val, best_epoch, best_snap = val_mse, epoch, params.snapshot()
        elif epoch - best_epoch >= cfg.patience:
            break
    params.restore(best_snap)
    return history


def train_two_stage(params: ModelParams, train: list[TrainSample],
                    val: list[TrainSample], cfg: TrainConfig
                    ) -> tuple[ModelParams, list[dict]]:
    """Run both training stages; returns the params (best-val restored after
    each stage) and the epoch history."""
    if not train or not val:
        raise ValueError("train and validation sets must be non-empty")
    train_keys = {(s.image_id, s.tier) for s in train if s.image_id}
    train_objs = {id(s) for s in train}
    overlap = any((s.image_id and (s.image_id, s.tier) in train_keys) or id(s) in train_objs
                  for s in val)
    if overlap:
        raise ValueError("train and validation sets must be disjoint")
    if cfg.init_output_bias:
        last = len(params.config.head_dims)
        bias = params.tensors[f"head.{last}.b"]
        bias.data = bias.data + float(np.mean([s.target for s in train]))
    if cfg.calibrate_norm_stats:
        calibrate_norm_stats(params, train, cfg.batch_size, cfg.calibration_samples)
    history = _run_stage(params, train, val, cfg, stage=1)
    history += _run_stage(params, train, val, cfg, stage=2)
    params.set_trainable(lambda n: False)
    return params, history
