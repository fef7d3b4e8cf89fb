"""Pretext training loop, linear-probe evaluation, and saliency heatmaps.

The online branches (CNN encoder + projector + predictor, transformer +
projector + predictor) train by SGD; the four momentum groups (encoder,
both projectors, transformer) follow by exponential moving average only.
Two stop-gradients partition the updates: the transformer consumes a
detached copy of the encoder feature map, and the attention-supervision
loss sees a detached transformer output.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tree as tr
from .attention import AttentionConfig, init_transformer_params, transformer_forward
from .config import Config
from .data import AugmentConfig, ImageRecord, make_view_pair
from .errors import ConfigError, DataError
from .losses import LossBreakdown, StreamOutputs, combine_breakdowns, loss_total
from .nn import (
    EncoderConfig,
    MlpHeadConfig,
    encoder_forward,
    head_forward,
    init_encoder_params,
    init_head_params,
    project_and_predict,
)
from .rng import SeededRng
from .schedules import LrSchedule, TauSchedule, base_lr_for, ema_update, lr_at, tau_at
from .tensor import (
    Tensor,
    backward,
    log,
    matmul,
    mean_pool_2d,
    mul,
    relu,
    sgd_momentum_step,
    softmax_rows,
    tmean,
    tsum,
    add,
    sub,
)

METRICS_COLUMNS = ("step", "lr", "tau", "l_c", "l_t", "l_att", "l_total")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: MlpHeadConfig = field(default_factory=MlpHeadConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    @classmethod
    def from_run_config(cls, cfg: Config) -> "ModelConfig":
        enc = EncoderConfig()
        att = AttentionConfig(
            channels=enc.out_channels,
            n_blocks=cfg.n_blocks,
            pos_kind=cfg.pos_encoding,
            grid=(enc.feature_resolution, enc.feature_resolution),
        )
        return cls(encoder=enc, head=MlpHeadConfig(in_dim=enc.out_channels), attention=att)


@dataclass
class TrainState:
    step: int
    total_steps: int
    lr_sched: LrSchedule
    tau_sched: TauSchedule
    rng: SeededRng


def init_dual_stream(model: ModelConfig, seed: int) -> dict:
    """The full parameter set: six online groups, four momentum mirrors,
    and velocity buffers for every trainable online leaf."""
    rng = SeededRng(seed)
    c_head = model.head
    t_head = MlpHeadConfig(in_dim=model.encoder.out_channels,
                           hidden_dim=c_head.hidden_dim, out_dim=c_head.out_dim)
    online = {
        "encoder": init_encoder_params(model.encoder, rng.derive(1)),
        "projector1": init_head_params(c_head, rng.derive(2)),
        "predictor1": init_head_params(
            MlpHeadConfig(c_head.out_dim, c_head.hidden_dim, c_head.out_dim),
            rng.derive(3)),
        "transformer": init_transformer_params(model.attention, rng.derive(4)),
        "projector2": init_head_params(t_head, rng.derive(5)),
        "predictor2": init_head_params(
            MlpHeadConfig(c_head.out_dim, c_head.hidden_dim, c_head.out_dim),
            rng.derive(6)),
    }
    momentum = {
        "encoder": tr.copy_tree(online["encoder"], requires_grad=False),
        "projector1": tr.copy_tree(online["projector1"], requires_grad=False),
        "transformer": tr.copy_tree(online["transformer"], requires_grad=False),
        "projector2": tr.copy_tree(online["projector2"], requires_grad=False),
    }
    velocities = tr.zeros_like_tree(online)
    return {"online": online, "momentum": momentum, "velocities": velocities}


MOMENTUM_GROUPS = ("encoder", "projector1", "transformer", "projector2")


def forward_once(params: dict, model: ModelConfig, v1: Tensor, v2: Tensor,
                 training: bool = True) -> StreamOutputs:
    """One pass of both streams over a pair of view batches."""
    online, momentum = params["online"], params["momentum"]
    att = model.attention

    map1 = encoder_forward(online["encoder"], v1, model.encoder,
                           training=training, track_stats=training)
    f1 = project_and_predict(
        {"projector": online["projector1"], "predictor": online["predictor1"]},
        mean_pool_2d(map1), training=training, track_stats=training)

    # momentum branch: batch-stat normalization, but running stats follow the
    # online branch via EMA, never the momentum forward itself
    map2 = encoder_forward(momentum["encoder"], v2, model.encoder,
                           training=training, track_stats=False)
    f2 = project_and_predict(
        {"projector": momentum["projector1"], "predictor": None},
        mean_pool_2d(map2), training=training, track_stats=False)

    # the transformer sees a detached map so the t-stream loss never trains
    # the encoder
    t1 = transformer_forward(online["transformer"], att, map1.detach())
    f3 = project_and_predict(
        {"projector": online["projector2"], "predictor": online["predictor2"]},
        t1, training=training, track_stats=training)

    t2 = transformer_forward(momentum["transformer"], att, map2)
    f4 = project_and_predict(
        {"projector": momentum["projector2"], "predictor": None},
        t2, training=training, track_stats=False)

    return StreamOutputs(f1=f1, f2=f2, f3=f3, f4=f4)


def _first_nonfinite(outputs: StreamOutputs, breakdown: LossBreakdown) -> str | None:
    for name, val in (("f1", outputs.f1.data), ("f2", outputs.f2.data),
                      ("f3", outputs.f3.data), ("f4", outputs.f4.data)):
        if not np.all(np.isfinite(val)):
            return name
    for name, val in (("l_c", breakdown.l_c), ("l_t", breakdown.l_t),
                      ("l_att", breakdown.l_att), ("l_total", breakdown.l_total)):
        if not math.isfinite(val):
            return name
    return None


def train_step(state: TrainState, params: dict, model: ModelConfig,
               v1: Tensor, v2: Tensor, cfg: Config) -> LossBreakdown:
    """Forward, backward over the online groups, SGD step, EMA update."""
    if state.step >= state.total_steps:
        raise ConfigError(f"train_step past the schedule end ({state.step})")
    tr.zero_grads(params["online"])

    outputs = forward_once(params, model, v1, v2, training=True)
    breakdown = loss_total(outputs, lam=cfg.lambda_, normalize_att=cfg.normalize_att)
    if cfg.symmetrize:
        outputs_rev = forward_once(params, model, v2, v1, training=True)
        breakdown = combine_breakdowns(
            breakdown,
            loss_total(outputs_rev, lam=cfg.lambda_, normalize_att=cfg.normalize_att))

    bad = _first_nonfinite(outputs, breakdown)
    if bad is not None:
        raise FloatingPointError(
            f"non-finite value in {bad} at step {state.step}; aborting"
        )

    backward(breakdown.total_tensor)

    lr = lr_at(state.lr_sched, state.step)
    for name, t in tr.grad_leaves(params["online"]):
        if t.grad is None:
            continue
        sgd_momentum_step(t, t.grad, params["velocities"][name], lr,
                          momentum=0.9, weight_decay=cfg.weight_decay)

    tau = tau_at(state.tau_sched, state.step)
    for group in MOMENTUM_GROUPS:
        ema_update(params["online"][group], params["momentum"][group], tau)

    state.step += 1
    return breakdown


def _batches(n: int, batch_size: int, rng: SeededRng):
    perm = np.argsort([rng.next_u64() for _ in range(n)], kind="stable")
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _view_batch(records, idx, aug_cfg, seed_rng) -> tuple[Tensor, Tensor]:
    pairs = [make_view_pair(records[i], aug_cfg, seed_rng.derive(int(i)))
             for i in idx]
    v1 = Tensor(np.stack([p.view1 for p in pairs]))
    v2 = Tensor(np.stack([p.view2 for p in pairs]))
    return v1, v2


def pretrain(cfg: Config, records: list[ImageRecord] | None = None,
             metrics_path: str | None = None,
             progress: bool = False) -> tuple[dict, ModelConfig, list[dict]]:
    """Run the full pretext schedule; returns (params, model, metrics rows)."""
    from .data import load_dataset

    if records is None:
        records = load_dataset(cfg.dataset)
    model = ModelConfig.from_run_config(cfg)
    params = init_dual_stream(model, cfg.seed)

    steps_per_epoch = math.ceil(len(records) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup = min(cfg.warmup_epochs * steps_per_epoch, total_steps - 1)
    state = TrainState(
        step=0,
        total_steps=total_steps,
        lr_sched=LrSchedule(base_lr=base_lr_for(cfg.batch_size),
                            warmup_steps=warmup, total_steps=total_steps),
        tau_sched=TauSchedule(tau_base=cfg.tau_base, total_steps=total_steps),
        rng=SeededRng(cfg.seed),
    )
    aug_cfg = AugmentConfig(out_resolution=model.encoder.input_resolution)

    rows: list[dict] = []
    for epoch in range(cfg.epochs):
        epoch_rng = state.rng.derive(100, epoch)
        for idx in _batches(len(records), cfg.batch_size, epoch_rng.derive(0)):
            step = state.step
            lr = lr_at(state.lr_sched, step)
            tau = tau_at(state.tau_sched, step)
            v1, v2 = _view_batch(records, idx, aug_cfg, epoch_rng.derive(1))
            breakdown = train_step(state, params, model, v1, v2, cfg)
            rows.append({
                "step": step, "lr": lr, "tau": tau,
                "l_c": breakdown.l_c, "l_t": breakdown.l_t,
                "l_att": breakdown.l_att, "l_total": breakdown.l_total,
            })
            if progress:
                print(f"epoch {epoch + 1}/{cfg.epochs} step {state.step}"
                      f"/{total_steps} l_total={breakdown.l_total:.4f}", flush=True)

    if metrics_path:
        write_metrics(metrics_path, rows)
    return params, model, rows


def write_metrics(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# linear probe


def encode_features(encoder_params: dict, enc_cfg: EncoderConfig,
                    images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Frozen eval-mode encoder -> pooled (N, C) features."""
    feats = []
    for start in range(0, len(images), batch_size):
        x = Tensor(images[start : start + batch_size])
        fm = encoder_forward(encoder_params, x, enc_cfg, training=False)
        feats.append(mean_pool_2d(fm).data)
    return np.concatenate(feats, axis=0)


def train_linear_classifier(features: np.ndarray, labels: np.ndarray,
                            n_classes: int, epochs: int = 30, lr: float = 0.2,
                            batch_size: int = 128, seed: int = 0,
                            momentum: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """SGD softmax regression on fixed features; returns (W, b)."""
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(
            f"label outside [0, {n_classes}): {labels.min()}..{labels.max()}"
        )
    n, d = features.shape
    w = Tensor(np.zeros((d, n_classes), dtype=np.float32), requires_grad=True)
    b = Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True)
    vel_w = np.zeros_like(w.data)
    vel_b = np.zeros_like(b.data)
    rng = SeededRng(seed)
    onehot = np.eye(n_classes, dtype=np.float32)[labels]
    for _ in range(epochs):
        for idx in _batches(n, batch_size, rng.derive(7)):
            w.grad = b.grad = None
            logits = add(matmul(Tensor(features[idx]), w), b)
            probs = softmax_rows(logits)
            nll = mul(-1.0, tmean(tsum(mul(Tensor(onehot[idx]),
                                           log(add(probs, 1e-12))), axis=1)))
            backward(nll)
            sgd_momentum_step(w, w.grad, vel_w, lr, momentum)
            sgd_momentum_step(b, b.grad, vel_b, lr, momentum)
    return w.data, b.data


def probe_split(n: int, seed: int, holdout: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    rng = SeededRng(seed).derive(42)
    perm = np.argsort([rng.next_u64() for _ in range(n)], kind="stable")
    cut = max(1, int(round(n * holdout)))
    return perm[cut:], perm[:cut]


def linear_probe(encoder_params: dict, enc_cfg: EncoderConfig,
                 records: list[ImageRecord], epochs: int = 30, lr: float = 0.2,
                 seed: int = 0) -> float:
    """Frozen-backbone evaluation: top-1 accuracy on a held-out split."""
    images = np.stack([r.pixels for r in records])
    labels = np.array([r.label for r in records], dtype=np.int64)
    n_classes = int(labels.max()) + 1
    feats = encode_features(encoder_params, enc_cfg, images)
    train_idx, test_idx = probe_split(len(records), seed)
    # standardize with train-split statistics so the probe lr is
    # scale-independent
    mu = feats[train_idx].mean(axis=0)
    sd = feats[train_idx].std(axis=0) + 1e-6
    feats = (feats - mu) / sd
    w, b = train_linear_classifier(feats[train_idx], labels[train_idx],
                                   n_classes, epochs=epochs, lr=lr, seed=seed)
    pred = (feats[test_idx] @ w + b).argmax(axis=1)
    return float((pred == labels[test_idx]).mean())


# ---------------------------------------------------------------------------
# saliency heatmap


def attention_map(encoder_params: dict, enc_cfg: EncoderConfig,
                  image: np.ndarray) -> np.ndarray:
    """Gradient-weighted channel saliency over the final feature map,
    min-max normalized to [0,1] and bilinearly upsampled to image size."""
    from .data import bilinear_resize

    x = Tensor(image[None] if image.ndim == 3 else image)
    fm = encoder_forward(encoder_params, x, enc_cfg, training=False)
    pooled = mean_pool_2d(fm)
    target = tsum(mul(pooled, pooled))
    backward(target)
    if fm.grad is None:
        raise ConfigError("encoder has no trainable parameters; no saliency signal")

    weights = fm.grad.mean(axis=(2, 3), keepdims=True)  # (1,C,1,1)
    cam = np.maximum((weights * fm.data).sum(axis=1)[0], 0.0)
    lo, hi = float(cam.min()), float(cam.max())
    if hi - lo <= 1e-12:
        warnings.warn("saliency map has zero range; emitting all zeros")
        cam = np.zeros_like(cam)
    else:
        cam = (cam - lo) / (hi - lo)
    up = bilinear_resize(np.repeat(cam[None], 3, axis=0).astype(np.float32),
                         image.shape[-2], image.shape[-1])
    return up[0]
