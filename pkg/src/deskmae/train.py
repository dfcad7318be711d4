"""Optimizers, schedules and the training/evaluation protocols."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import re
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from deskmae import data as D
from deskmae import mae as M
from deskmae import rng as rngs
from deskmae import tensor as T
from deskmae import vit
from deskmae.tensor import Tensor
from deskmae.vit import Params, ViTConfig

log = logging.getLogger(__name__)

PROTOCOLS = ("pretrain", "finetune", "linprobe", "partial_ft", "supervised_scratch")


@dataclass(frozen=True)
class TrainRecipe:
    optimizer: str = "adamw"
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    momentum: float = 0.9
    eps: float = 1e-8
    batch_size: int = 4096
    warmup_epochs: int = 40
    total_epochs: int = 800
    layer_decay: float = 1.0
    frozen_blocks: Optional[int] = None
    mlp_only: bool = False
    label_smoothing: float = 0.0
    mixup_alpha: float = 0.0
    cutmix_alpha: float = 0.0
    drop_path_rate: float = 0.0
    ema_decay: float = 0.0
    augment: str = "crop_random_size"
    flip: bool = True
    partial_ft_epochs: tuple = (50, 100, 200)

    def __post_init__(self):
        if self.optimizer not in ("adamw", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.warmup_epochs > self.total_epochs:
            raise ValueError(f"warmup ({self.warmup_epochs}) exceeds total epochs ({self.total_epochs})")
        if not 0.0 < self.layer_decay <= 1.0:
            raise ValueError(f"layer decay must lie in (0, 1], got {self.layer_decay}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    @property
    def lr(self) -> float:
        return effective_lr(self.base_lr, self.batch_size)

    def replace(self, **kw) -> "TrainRecipe":
        return dataclasses.replace(self, **kw)


# Reference-scale presets, the published ImageNet recipes.
PRETRAIN = TrainRecipe()
FINETUNE = TrainRecipe(base_lr=1e-3, weight_decay=0.05, betas=(0.9, 0.999), layer_decay=0.75,
                       batch_size=1024, warmup_epochs=5, total_epochs=50, label_smoothing=0.1,
                       mixup_alpha=0.8, cutmix_alpha=1.0, drop_path_rate=0.1)
# LARS replaced by momentum SGD at batch 4096
LINPROBE = TrainRecipe(optimizer="sgd_momentum", base_lr=0.1, weight_decay=0.0, momentum=0.9,
                       batch_size=4096, warmup_epochs=10, total_epochs=90, flip=True)
SCRATCH = TrainRecipe(base_lr=1e-4, weight_decay=0.3, betas=(0.9, 0.95), batch_size=4096,
                      warmup_epochs=20, total_epochs=200, label_smoothing=0.1, mixup_alpha=0.8,
                      cutmix_alpha=1.0, drop_path_rate=0.2, ema_decay=0.9999)
REFERENCE_PRESETS = {"pretrain": PRETRAIN, "finetune": FINETUNE, "linprobe": LINPROBE,
                 "partial_ft": FINETUNE, "supervised_scratch": SCRATCH}

# Desk-scale presets: same optimizers and regularizers, small batches and
# short schedules, base rates retuned for a few hundred steps.
DESK_PRESETS = {
    "pretrain": PRETRAIN.replace(batch_size=16, base_lr=3e-2, warmup_epochs=10, total_epochs=200,
                                 augment="none_center_crop", flip=False),
    "finetune": FINETUNE.replace(batch_size=16, base_lr=3e-2, warmup_epochs=3, total_epochs=30),
    "linprobe": LINPROBE.replace(batch_size=16, base_lr=1.0, warmup_epochs=3, total_epochs=30),
    "partial_ft": FINETUNE.replace(batch_size=16, base_lr=3e-2, warmup_epochs=3, total_epochs=30,
                                   partial_ft_epochs=(10, 20, 30)),
    "supervised_scratch": SCRATCH.replace(batch_size=16, base_lr=3e-2, warmup_epochs=3, total_epochs=30,
                                          ema_decay=0.99),
}


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def effective_lr(base_lr: float, batch_size: int) -> float:
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    return base_lr * batch_size / 256


def lr_at(step: int, warmup_steps: int, total_steps: int, peak_lr: float) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at ``total_steps``."""
    if warmup_steps > total_steps:
        raise ValueError(f"warmup ({warmup_steps}) exceeds total steps ({total_steps})")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span == 0:
        return peak_lr
    progress = (step - warmup_steps) / span
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# parameter groups
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamGroup:
    names: tuple
    lr_mult: float
    weight_decay: bool


_NO_DECAY = re.compile(r"(\.b$|norm\d*\.g$|cls_token$|mask_token$)")
_BLOCK = re.compile(r"^encoder\.blocks\.(\d+)\.")


def decays(name: str) -> bool:
    """Biases, norm gains, class and mask tokens are exempt from weight decay."""
    return _NO_DECAY.search(name) is None


def layer_id(name: str, depth: int) -> int:
    """0 = embedding layer, 1..depth = encoder blocks, depth+1 = head and final norm."""
    m = _BLOCK.match(name)
    if m:
        return int(m.group(1)) + 1
    if name.startswith("encoder.patch_embed") or name.endswith("cls_token") or name.endswith("mask_token"):
        return 0
    return depth + 1


def layer_multiplier(name: str, depth: int, decay: float) -> float:
    return decay ** (depth + 1 - layer_id(name, depth))


def layerwise_groups(names: Iterable[str], depth: int, decay: float) -> list[ParamGroup]:
    """Bucket parameters by (lr multiplier, weight-decay flag)."""
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"layer decay must lie in (0, 1], got {decay}")
    buckets: dict[tuple, list[str]] = {}
    for n in names:
        key = (layer_multiplier(n, depth, decay), decays(n))
        buckets.setdefault(key, []).append(n)
    return [ParamGroup(tuple(v), k[0], k[1]) for k, v in sorted(buckets.items(), key=lambda kv: (kv[0][0], kv[0][1]))]


def freeze_prefix(params: Mapping[str, Tensor], depth: int, k: int, mlp_only: bool = False) -> set[str]:
    """Mark only the last ``k`` encoder blocks (plus head and final norm) trainable.

    ``k = 0`` leaves only the head trainable and ``k = depth`` trains
    everything. With ``mlp_only`` the trainable part of the encoder is just
    the last block's MLP sub-block. Returns the trainable names; the rest get
    ``requires_grad = False``.
    """
    if not 0 <= k <= depth:
        raise ValueError(f"cannot tune {k} blocks of a depth-{depth} encoder")
    trainable = set()
    for name in params:
        if name.startswith("head.") or (k == depth and not mlp_only):
            ok = True
        elif name.startswith("encoder.norm."):
            ok = k > 0 or mlp_only
        elif mlp_only:
            ok = name.startswith(f"encoder.blocks.{depth - 1}.mlp.") or name.startswith(f"encoder.blocks.{depth - 1}.norm2.")
        else:
            m = _BLOCK.match(name)
            ok = m is not None and int(m.group(1)) >= depth - k
        params[name].requires_grad = ok
        if ok:
            trainable.add(name)
    return trainable


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_step(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float, wd: float,
               beta1: float, beta2: float, eps: float = 1e-8) -> None:
    """In-place AdamW update with decoupled decay and bias-corrected moments."""
    state.t += 1
    if wd:
        theta *= 1.0 - lr * wd
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    theta -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(theta.dtype, copy=False)


def sgd_step(theta: np.ndarray, grad: np.ndarray, buf: np.ndarray, lr: float, momentum: float, wd: float = 0.0) -> None:
    if wd:
        grad = grad + wd * theta
    buf *= momentum
    buf += grad
    theta -= (lr * buf).astype(theta.dtype, copy=False)


class Optimizer:
    """Applies AdamW or momentum SGD to named parameters with per-group settings."""

    def __init__(self, params: Mapping[str, Tensor], recipe: TrainRecipe, groups: Sequence[ParamGroup]):
        self.params = params
        self.recipe = recipe
        self.groups = groups
        self.state: dict[str, object] = {}

    def step(self, lr: float) -> None:
        r = self.recipe
        for group in self.groups:
            glr = lr * group.lr_mult
            wd = r.weight_decay if group.weight_decay else 0.0
            for name in group.names:
                p = self.params[name]
                if not p.requires_grad or p.grad is None:
                    continue
                if r.optimizer == "adamw":
                    st = self.state.get(name)
                    if st is None:
                        st = self.state[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
                    adamw_step(p.data, p.grad, st, glr, wd, r.betas[0], r.betas[1], r.eps)
                else:
                    buf = self.state.get(name)
                    if buf is None:
                        buf = self.state[name] = np.zeros_like(p.data)
                    sgd_step(p.data, p.grad, buf, glr, r.momentum, wd)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def ema_update(ema: dict[str, np.ndarray], params: Mapping[str, Tensor], decay: float) -> dict[str, np.ndarray]:
    for name, p in params.items():
        if name not in ema:
            ema[name] = p.data.copy()
        else:
            ema[name] = decay * ema[name] + (1.0 - decay) * p.data
    return ema


# ---------------------------------------------------------------------------
# label mixing
# ---------------------------------------------------------------------------

def one_hot(labels: np.ndarray, n_classes: int, smoothing: float = 0.0) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out * (1.0 - smoothing) + smoothing / n_classes


@dataclass
class Mixed:
    images: np.ndarray
    targets: np.ndarray
    lam: float
    mode: str
    box: Optional[tuple] = None


def mixup_cutmix(images: np.ndarray, targets: np.ndarray, mixup_alpha: float, cutmix_alpha: float,
                 rng: np.random.Generator, lam: Optional[float] = None, mode: Optional[str] = None) -> Mixed:
    """Blend each sample with its mirror in the batch (index ``b-1-i``).

    One of mixup or cutmix is chosen per batch (even odds when both are
    enabled). For cutmix the label weight is recomputed from the clipped box.
    """
    if len(images) < 2:
        raise ValueError("mixing needs a batch of at least 2")
    if mode is None:
        if mixup_alpha > 0 and cutmix_alpha > 0:
            mode = "cutmix" if rng.random() < 0.5 else "mixup"
        elif cutmix_alpha > 0:
            mode = "cutmix"
        elif mixup_alpha > 0:
            mode = "mixup"
        else:
            return Mixed(images, targets, 1.0, "none")
    alpha = cutmix_alpha if mode == "cutmix" else mixup_alpha
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    partner = images[::-1]
    partner_t = targets[::-1]
    if mode == "mixup":
        return Mixed(lam * images + (1 - lam) * partner, lam * targets + (1 - lam) * partner_t, lam, "mixup")
    h, w = images.shape[1:3]
    cut = math.sqrt(1.0 - lam)
    ch, cw = int(h * cut), int(w * cut)
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    top, bottom = np.clip([cy - ch // 2, cy + ch // 2], 0, h)
    left, right = np.clip([cx - cw // 2, cx + cw // 2], 0, w)
    out = images.copy()
    out[:, top:bottom, left:right] = partner[:, top:bottom, left:right]
    lam = 1.0 - (bottom - top) * (right - left) / (h * w)
    return Mixed(out, lam * targets + (1 - lam) * partner_t, float(lam), "cutmix", (int(top), int(left), int(bottom), int(right)))


# ---------------------------------------------------------------------------
# linear probe head
# ---------------------------------------------------------------------------

@dataclass
class LinearProbe:
    """Affine-free batch norm followed by a linear classifier."""

    weight: Tensor
    bias: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-6
    momentum: float = 0.1

    @classmethod
    def create(cls, dim: int, n_classes: int, dtype=np.float64) -> "LinearProbe":
        return cls(Tensor(np.zeros((dim, n_classes), dtype), requires_grad=True),
                   Tensor(np.zeros(n_classes, dtype), requires_grad=True),
                   np.zeros(dim), np.ones(dim))

    def train_logits(self, feats: np.ndarray) -> Tensor:
        normed, mu, var = T.batch_norm_noaffine(Tensor(feats, dtype=self.weight.dtype), self.eps)
        n = len(feats)
        unbiased = var * n / max(n - 1, 1)
        self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
        self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        return T.linear(normed, self.weight, self.bias)

    def logits(self, feats: np.ndarray) -> np.ndarray:
        normed = (feats - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return normed @ self.weight.data + self.bias.data

    def fold(self) -> tuple[np.ndarray, np.ndarray]:
        """Absorb the normalization: logits = feats @ W' + b'."""
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        w = self.weight.data * inv[:, None]
        b = self.bias.data - (self.running_mean * inv) @ self.weight.data
        return w, b

    def params(self) -> dict[str, Tensor]:
        return {"head.w": self.weight, "head.b": self.bias}


def linear_probe_head(features: np.ndarray, labels: np.ndarray, recipe: TrainRecipe, n_classes: int,
                      seed: int = 0) -> LinearProbe:
    """Train a probe on fixed features with the recipe's SGD settings."""
    probe = LinearProbe.create(features.shape[1], n_classes)
    params = probe.params()
    opt = Optimizer(params, recipe, [ParamGroup(tuple(params), 1.0, False)])
    n = len(features)
    steps_per_epoch = math.ceil(n / recipe.batch_size)
    total = recipe.total_epochs * steps_per_epoch
    warm = recipe.warmup_epochs * steps_per_epoch
    step = 0
    for epoch in range(recipe.total_epochs):
        order = rngs.stream(seed, "probe", epoch).permutation(n)
        for s in range(0, n, recipe.batch_size):
            idx = order[s:s + recipe.batch_size]
            if len(idx) < 2:
                continue
            loss = T.cross_entropy(probe.train_logits(features[idx]), labels[idx])
            opt.zero_grad()
            T.backward(loss)
            opt.step(lr_at(step, warm, total, recipe.lr))
            step += 1
    return probe


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.rows.append((int(epoch), split, metric, float(value)))

    def last(self, split: str, metric: str) -> float:
        for e, s, m, v in reversed(self.rows):
            if s == split and m == metric:
                return v
        raise KeyError((split, metric))

    def series(self, split: str, metric: str) -> list[float]:
        return [v for e, s, m, v in self.rows if s == split and m == metric]

    def to_csv(self) -> str:
        lines = ["epoch,split,metric,value"]
        lines += [f"{e},{s},{m},{v:.6g}" for e, s, m, v in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read(cls, path) -> "MetricsLog":
        out = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                out.add(int(row["epoch"]), row["split"], row["metric"], float(row["value"]))
        return out


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    log: MetricsLog
    params: Params
    probe: Optional[LinearProbe] = None
    basis: Optional[M.PcaBasis] = None
    seconds: float = 0.0


def _spec(recipe: TrainRecipe, size: int) -> D.AugmentSpec:
    return D.AugmentSpec(mode=recipe.augment, flip=recipe.flip, out_size=size)


def fit_pca_basis(ds: D.PackedDataset, cfg: M.MaeConfig, stats: D.ChannelStats) -> M.PcaBasis:
    views = D.render(ds, range(len(ds)), None, stats, size=cfg.encoder.image_size)
    patches = vit.patchify(views, cfg.encoder.patch_size).reshape(-1, cfg.encoder.patch_dim)
    return M.pca_fit(patches.astype(np.float64), cfg.target_dim)


def pretrain(cfg: M.MaeConfig, recipe: TrainRecipe, ds: D.PackedDataset, seed: int = 0,
             stats: Optional[D.ChannelStats] = None, params: Optional[Params] = None,
             dtype=np.float32, spec: Optional[D.AugmentSpec] = None) -> RunResult:
    """Masked-autoencoder pre-training; logs mean masked MSE per epoch."""
    _check(cfg.encoder, ds)
    start = time.perf_counter()
    stats = stats or D.compute_stats(ds)
    params = params if params is not None else M.init_mae(cfg, rngs.stream(seed, "init"), dtype)
    basis = fit_pca_basis(ds, cfg, stats) if cfg.target_kind == "pca" else None
    groups = layerwise_groups(params, cfg.encoder.depth, 1.0)
    opt = Optimizer(params, recipe, groups)
    spec = spec or _spec(recipe, cfg.encoder.image_size)
    steps_per_epoch = math.ceil(len(ds) / recipe.batch_size)
    total = recipe.total_epochs * steps_per_epoch
    warm = recipe.warmup_epochs * steps_per_epoch
    out = MetricsLog()
    step = 0
    for epoch in range(recipe.total_epochs):
        losses, weights = [], []
        for batch in D.batches(ds, recipe.batch_size, seed, epoch, spec, stats):
            res = M.mae_step(batch.images, cfg, params, seed, epoch, batch.indices, basis)
            opt.zero_grad()
            T.backward(res.loss)
            opt.step(lr_at(step, warm, total, recipe.lr))
            step += 1
            losses.append(res.loss.item())
            weights.append(len(batch.indices))
        out.add(epoch + 1, "train", "masked_mse", float(np.average(losses, weights=weights)))
        log.debug("pretrain epoch %d masked_mse %.5f", epoch + 1, out.rows[-1][3])
    return RunResult(out, params, basis=basis, seconds=time.perf_counter() - start)


def _check(cfg: ViTConfig, ds: D.PackedDataset) -> None:
    if ds.channels != cfg.channels or min(ds.height, ds.width) < cfg.image_size:
        raise ValueError(f"dataset {ds.height}x{ds.width}x{ds.channels} does not fit a "
                         f"{cfg.image_size}px {cfg.channels}-channel encoder")


def encoder_features(params: Mapping[str, Tensor], cfg: ViTConfig, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Class-token output of the final encoder norm, computed without a graph."""
    frozen = {k: Tensor(v.data, dtype=v.dtype) for k, v in params.items() if k.startswith("encoder.")}
    outs = []
    for s in range(0, len(images), chunk):
        outs.append(vit.encode(images[s:s + chunk], frozen, cfg).data[:, 0])
    return np.concatenate(outs).astype(np.float64) if outs else np.zeros((0, cfg.width))


def classifier_params(cfg: ViTConfig, n_classes: int, seed: int, encoder: Optional[Mapping] = None,
                      dtype=np.float32) -> Params:
    params = vit.init_classifier(cfg, n_classes, rngs.stream(seed, "init-cls"), dtype)
    if encoder is not None:
        for k, v in encoder.items():
            if k.startswith("encoder.") and k in params:
                src = v.data if isinstance(v, Tensor) else v
                if src.shape != params[k].shape:
                    raise ValueError(f"checkpoint tensor {k} has shape {src.shape}, model expects {params[k].shape}")
                params[k] = Tensor(np.array(src, dtype=dtype), requires_grad=True)
    return params


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean()) if len(labels) else float("nan")


def linprobe(cfg: ViTConfig, recipe: TrainRecipe, ds: D.PackedDataset, eval_ds: Optional[D.PackedDataset] = None,
             encoder: Optional[Mapping] = None, seed: int = 0, stats: Optional[D.ChannelStats] = None,
             spec: Optional[D.AugmentSpec] = None) -> RunResult:
    """Frozen-encoder linear probing with an affine-free BN in front of the classifier."""
    _check(cfg, ds)
    start = time.perf_counter()
    stats = stats or D.compute_stats(ds)
    params = classifier_params(cfg, ds.n_classes, seed, encoder)
    probe = LinearProbe.create(cfg.width, ds.n_classes)
    head = probe.params()
    opt = Optimizer(head, recipe, [ParamGroup(tuple(head), 1.0, False)])
    spec = spec or _spec(recipe, cfg.image_size)
    steps_per_epoch = math.ceil(len(ds) / recipe.batch_size)
    total = recipe.total_epochs * steps_per_epoch
    warm = recipe.warmup_epochs * steps_per_epoch
    out = MetricsLog()
    step = 0
    for epoch in range(recipe.total_epochs):
        losses, correct = [], 0
        for batch in D.batches(ds, recipe.batch_size, seed, epoch, spec, stats):
            if len(batch.indices) < 2:
                continue
            feats = encoder_features(params, cfg, batch.images)
            logits = probe.train_logits(feats)
            loss = T.cross_entropy(logits, batch.labels)
            opt.zero_grad()
            T.backward(loss)
            opt.step(lr_at(step, warm, total, recipe.lr))
            step += 1
            losses.append(loss.item())
            correct += int((logits.data.argmax(1) == batch.labels).sum())
        out.add(epoch + 1, "train", "loss", float(np.mean(losses)) if losses else float("nan"))
        out.add(epoch + 1, "train", "acc", correct / len(ds))
    if eval_ds is not None:
        feats = encoder_features(params, cfg, D.render(eval_ds, range(len(eval_ds)), None, stats, size=cfg.image_size))
        out.add(recipe.total_epochs, "val", "acc", accuracy(probe.logits(feats), eval_ds.labels))
    for k, v in head.items():
        params[k] = v
    return RunResult(out, params, probe=probe, seconds=time.perf_counter() - start)


def finetune(cfg: ViTConfig, recipe: TrainRecipe, ds: D.PackedDataset, eval_ds: Optional[D.PackedDataset] = None,
             encoder: Optional[Mapping] = None, seed: int = 0, stats: Optional[D.ChannelStats] = None,
             dtype=np.float32, spec: Optional[D.AugmentSpec] = None) -> RunResult:
    """End-to-end, partial (``recipe.frozen_blocks``) or from-scratch classification training."""
    _check(cfg, ds)
    start = time.perf_counter()
    stats = stats or D.compute_stats(ds)
    params = classifier_params(cfg, ds.n_classes, seed, encoder, dtype)
    if recipe.frozen_blocks is not None or recipe.mlp_only:
        k = cfg.depth if recipe.frozen_blocks is None else recipe.frozen_blocks
        trainable = freeze_prefix(params, cfg.depth, k, recipe.mlp_only)
    else:
        trainable = set(params)
    groups = layerwise_groups([n for n in params if n in trainable], cfg.depth, recipe.layer_decay)
    opt = Optimizer(params, recipe, groups)
    spec = spec or _spec(recipe, cfg.image_size)
    steps_per_epoch = math.ceil(len(ds) / recipe.batch_size)
    total = recipe.total_epochs * steps_per_epoch
    warm = recipe.warmup_epochs * steps_per_epoch
    ema: dict[str, np.ndarray] = {}
    out = MetricsLog()
    step = 0
    for epoch in range(recipe.total_epochs):
        losses, correct = [], 0
        for batch in D.batches(ds, recipe.batch_size, seed, epoch, spec, stats):
            g = rngs.stream(seed, "mix", epoch, step)
            targets = one_hot(batch.labels, ds.n_classes, recipe.label_smoothing)
            images = batch.images
            if len(images) >= 2 and (recipe.mixup_alpha > 0 or recipe.cutmix_alpha > 0):
                mixed = mixup_cutmix(images, targets, recipe.mixup_alpha, recipe.cutmix_alpha, g)
                images, targets = mixed.images.astype(np.float32), mixed.targets
            logits = vit.vit_classify(images, params, cfg, recipe.drop_path_rate, g)
            loss = T.cross_entropy(logits, targets)
            opt.zero_grad()
            T.backward(loss)
            opt.step(lr_at(step, warm, total, recipe.lr))
            if recipe.ema_decay > 0:
                ema_update(ema, params, recipe.ema_decay)
            step += 1
            losses.append(loss.item())
            correct += int((logits.data.argmax(1) == batch.labels).sum())
        out.add(epoch + 1, "train", "loss", float(np.mean(losses)))
        out.add(epoch + 1, "train", "acc", correct / len(ds))
    for p in params.values():
        p.requires_grad = True
    if recipe.ema_decay > 0:
        params = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in ema.items()}
    if eval_ds is not None:
        views = D.render(eval_ds, range(len(eval_ds)), None, stats, size=cfg.image_size)
        logits = vit.vit_classify(views, {k: Tensor(v.data) for k, v in params.items()}, cfg).data
        out.add(recipe.total_epochs, "val", "acc", accuracy(logits, eval_ds.labels))
    return RunResult(out, params, seconds=time.perf_counter() - start)


def run_protocol(kind: str, cfg, recipe: TrainRecipe, ds: D.PackedDataset, eval_ds: Optional[D.PackedDataset] = None,
                 encoder: Optional[Mapping] = None, seed: int = 0, stats: Optional[D.ChannelStats] = None,
                 spec: Optional[D.AugmentSpec] = None) -> RunResult:
    """Dispatch one of the five protocols.

    ``cfg`` is a :class:`MaeConfig` for ``pretrain`` and a :class:`ViTConfig`
    (or a MaeConfig, whose encoder is used) otherwise.
    """
    if kind not in PROTOCOLS:
        raise ValueError(f"unknown protocol {kind!r}; expected one of {PROTOCOLS}")
    if kind == "pretrain":
        if not isinstance(cfg, M.MaeConfig):
            raise ValueError("pretraining needs a MaeConfig")
        return pretrain(cfg, recipe, ds, seed, stats, spec=spec)
    enc = cfg.encoder if isinstance(cfg, M.MaeConfig) else cfg
    if kind == "linprobe":
        return linprobe(enc, recipe, ds, eval_ds, encoder, seed, stats, spec)
    if kind == "supervised_scratch":
        return finetune(enc, recipe, ds, eval_ds, None, seed, stats, spec=spec)
    if kind == "partial_ft" and recipe.frozen_blocks is None and not recipe.mlp_only:
        raise ValueError("partial fine-tuning needs recipe.frozen_blocks or mlp_only")
    return finetune(enc, recipe, ds, eval_ds, encoder, seed, stats, spec=spec)
