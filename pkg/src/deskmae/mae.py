"""Masked autoencoder: mask plans, visible-only encoder, mask-token decoder, loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from deskmae import rng as rngs
from deskmae import tensor as T
from deskmae import vit
from deskmae.tensor import ShapeError, Tensor
from deskmae.vit import Params, ViTConfig

SAMPLERS = ("random", "block", "grid")
TARGETS = ("raw_pixels", "normalized_pixels", "pca")


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaeConfig:
    encoder: ViTConfig = field(default_factory=ViTConfig)
    decoder_depth: int = 8
    decoder_width: int = 512
    decoder_heads: int = 16
    mask_ratio: float = 0.75
    sampling: str = "random"
    target_kind: str = "raw_pixels"
    pca_k: int = 96
    norm_eps: float = 1e-6
    mask_tokens_in_encoder: bool = False

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.sampling not in SAMPLERS:
            raise ValueError(f"unknown sampling {self.sampling!r}; expected one of {SAMPLERS}")
        if self.target_kind not in TARGETS:
            raise ValueError(f"unknown target {self.target_kind!r}; expected one of {TARGETS}")
        if self.decoder_width % self.decoder_heads:
            raise ValueError(f"decoder width {self.decoder_width} not divisible by {self.decoder_heads} heads")
        if self.sampling == "grid":
            if self.mask_ratio != 0.75:
                raise ValueError("grid sampling keeps one of every four patches; mask ratio must be 0.75")
            if self.encoder.grid % 2:
                raise ValueError(f"grid sampling needs an even patch grid, got {self.encoder.grid}")
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be positive")

    @property
    def target_dim(self) -> int:
        if self.target_kind == "pca":
            return min(self.pca_k, self.encoder.patch_dim)
        return self.encoder.patch_dim

    @property
    def len_keep(self) -> int:
        return keep_count(self.encoder.n_patches, self.mask_ratio)


def tiny_desk(**overrides) -> MaeConfig:
    """Desk-scale MAE: Tiny-desk encoder with a two-block decoder of the same width."""
    base = dict(encoder=vit.PRESETS["tiny-desk"], decoder_depth=2, decoder_width=64, decoder_heads=4)
    base.update(overrides)
    return MaeConfig(**base)


# ---------------------------------------------------------------------------
# mask plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskPlan:
    """Which patches one image keeps.

    ``ids_shuffle[:len_keep]`` are the visible patches (ascending), the rest
    are removed; ``ids_restore`` is the inverse permutation and ``mask`` is 1
    for removed patches. ``blocks`` records the rectangles of the block
    sampler as ``(top, left, height, width)``.
    """

    n: int
    len_keep: int
    ids_shuffle: np.ndarray
    ids_restore: np.ndarray
    mask: np.ndarray
    blocks: tuple = ()

    @property
    def ids_keep(self) -> np.ndarray:
        return self.ids_shuffle[: self.len_keep]

    @property
    def ids_masked(self) -> np.ndarray:
        return self.ids_shuffle[self.len_keep:]


def keep_count(n: int, r: float) -> int:
    # the 1e-9 absorbs binary round-off in 1 - r (e.g. 100 * (1 - 0.9))
    return max(1, int(math.floor(n * (1.0 - r) + 1e-9)))


def plan_from_sets(n: int, visible: np.ndarray, masked: np.ndarray, blocks: tuple = ()) -> MaskPlan:
    """Build a plan with visible patches first (ascending), then removed ones in the given order."""
    ids_shuffle = np.concatenate([np.sort(visible), masked]).astype(np.int64)
    if ids_shuffle.shape != (n,) or not np.array_equal(np.sort(ids_shuffle), np.arange(n)):
        raise MaskError("visible and masked sets must partition 0..n-1")
    ids_restore = np.argsort(ids_shuffle, kind="stable")
    mask = np.ones(n, dtype=np.float64)
    mask[visible] = 0.0
    return MaskPlan(n, len(visible), ids_shuffle, ids_restore, mask, blocks)


def random_mask_plan(n: int, r: float, rng: np.random.Generator) -> MaskPlan:
    """Uniform sampling without replacement via argsort of i.i.d. noise."""
    if n < 1:
        raise MaskError(f"need at least one patch, got {n}")
    if not 0.0 <= r < 1.0:
        raise MaskError(f"mask ratio must lie in [0, 1), got {r}")
    order = np.argsort(rng.random(n), kind="stable")
    k = keep_count(n, r)
    return plan_from_sets(n, order[:k], order[k:])


def grid_mask_plan(grid_side: int) -> MaskPlan:
    """Keep the patch at every (even row, even column); removes exactly 75%."""
    if grid_side < 2 or grid_side % 2:
        raise MaskError(f"grid sampling needs an even grid side, got {grid_side}")
    rows, cols = np.divmod(np.arange(grid_side * grid_side), grid_side)
    keep = (rows % 2 == 0) & (cols % 2 == 0)
    idx = np.arange(grid_side * grid_side)
    return plan_from_sets(grid_side * grid_side, idx[keep], idx[~keep])


BLOCK_MIN_AREA = 16
BLOCK_ASPECT = 0.3


def block_mask_plan(grid_side: int, r: float, rng: np.random.Generator) -> MaskPlan:
    """Remove random axis-aligned rectangles until at least ``round(n*r)`` patches are gone.

    Each block covers at least 16 patches unless the remaining budget (or
    the grid) is too small for that, has aspect ratio in [0.3, 1/0.3], and may add at most
    ``remaining + grid_side`` new patches, so the final count stays within
    ``[round(n*r), round(n*r) + grid_side]``.
    """
    if not 0.0 < r < 1.0:
        raise MaskError(f"block sampling needs 0 < r < 1, got {r}")
    n = grid_side * grid_side
    target = int(round(n * r))
    grid = np.zeros((grid_side, grid_side), dtype=bool)
    log_lo, log_hi = math.log(BLOCK_ASPECT), math.log(1.0 / BLOCK_ASPECT)
    blocks = []
    count = 0
    failures = 0
    for _ in range(10 * n):
        if count >= target:
            break
        budget = min(target - count + grid_side, n - 1 - count)
        # relax the minimum area on geometry that cannot fit it
        min_area = max(1, min(BLOCK_MIN_AREA, budget) >> (failures // 50))
        area = rng.uniform(min_area, max(min_area, budget))
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        top = int(rng.integers(0, max(1, grid_side - h + 1)))
        left = int(rng.integers(0, max(1, grid_side - w + 1)))
        ok = (1 <= h <= grid_side and 1 <= w <= grid_side and h * w >= min_area
              and BLOCK_ASPECT <= h / w <= 1.0 / BLOCK_ASPECT)
        delta = h * w - int(grid[top:top + h, left:left + w].sum()) if ok else 0
        if 0 < delta <= budget:
            grid[top:top + h, left:left + w] = True
            blocks.append((top, left, h, w))
            count += delta
        else:
            failures += 1
    if count < target:
        raise MaskError(f"block sampler could not reach {target} masked patches on a {grid_side}x{grid_side} grid")
    flat = grid.reshape(-1)
    idx = np.arange(n)
    visible, masked = idx[~flat], idx[flat]
    if len(visible) == 0:
        raise MaskError("block sampler removed every patch")
    return plan_from_sets(n, rng.permutation(visible), rng.permutation(masked), tuple(blocks))


def harmonize(plans: Sequence[MaskPlan], rng: np.random.Generator) -> list[MaskPlan]:
    """Give every plan the batch-minimum ``len_keep`` by removing extra visible patches at random."""
    k = min(p.len_keep for p in plans)
    out = []
    for p in plans:
        if p.len_keep == k:
            out.append(p)
            continue
        vis = rng.permutation(p.ids_keep)
        out.append(plan_from_sets(p.n, vis[:k], np.concatenate([vis[k:], p.ids_masked]), p.blocks))
    return out


def sample_plans(cfg: MaeConfig, seed: int, epoch: int, indices: Sequence[int]) -> list[MaskPlan]:
    """One plan per image keyed by ``(seed, epoch, image index)``."""
    n, side = cfg.encoder.n_patches, cfg.encoder.grid
    plans = []
    for i in indices:
        g = rngs.stream(seed, "mask", epoch, int(i))
        if cfg.sampling == "grid":
            plans.append(grid_mask_plan(side))
        elif cfg.sampling == "block":
            plans.append(block_mask_plan(side, cfg.mask_ratio, g) if cfg.mask_ratio > 0 else random_mask_plan(n, 0.0, g))
        else:
            plans.append(random_mask_plan(n, cfg.mask_ratio, g))
    if cfg.sampling == "block":
        plans = harmonize(plans, rngs.stream(seed, "harmonize", epoch, int(indices[0]) if len(indices) else 0))
    return plans


def stack_plans(plans: Sequence[MaskPlan]) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    if not plans:
        raise MaskError("empty plan list")
    k = plans[0].len_keep
    if any(p.len_keep != k for p in plans):
        raise MaskError(f"plans disagree on len_keep: {sorted({p.len_keep for p in plans})}")
    shuffle = np.stack([p.ids_shuffle for p in plans])
    restore = np.stack([p.ids_restore for p in plans])
    mask = np.stack([p.mask for p in plans])
    return shuffle, restore, mask, k


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_mae(cfg: MaeConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    enc = cfg.encoder
    params = vit.init_encoder(enc, rng, dtype)
    if cfg.mask_tokens_in_encoder:
        params["encoder.mask_token"] = Tensor(rng.normal(0, 0.02, enc.width).astype(dtype), requires_grad=True)
    vit._linear(params, "decoder.embed", rng, enc.width, cfg.decoder_width, dtype)
    params["decoder.mask_token"] = Tensor(rng.normal(0, 0.02, cfg.decoder_width).astype(dtype), requires_grad=True)
    hidden = int(cfg.decoder_width * enc.mlp_ratio)
    vit.init_blocks(params, "decoder", cfg.decoder_depth, cfg.decoder_width, hidden, rng, dtype)
    vit._norm(params, "decoder.norm", cfg.decoder_width, dtype)
    vit._linear(params, "decoder.pred", rng, cfg.decoder_width, cfg.target_dim, dtype)
    return params


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def encode_visible(images: np.ndarray, plans: Sequence[MaskPlan], params: Mapping[str, Tensor],
                   cfg: MaeConfig) -> Tensor:
    """Encode only the visible patches: ``[batch, len_keep + 1, width]``."""
    enc = cfg.encoder
    if len(plans) != images.shape[0]:
        raise MaskError(f"{len(plans)} plans for {images.shape[0]} images")
    if any(p.n != enc.n_patches for p in plans):
        raise MaskError(f"plan patch count differs from the encoder's {enc.n_patches}")
    shuffle, _, _, k = stack_plans(plans)
    tokens = vit.embed_patches(images, params, enc)
    visible = T.gather_rows(tokens, shuffle[:, :k])
    x = vit.prepend_cls(visible, params, enc)
    return vit.finish_encoder(x, params, enc)


def encode_with_mask_tokens(images: np.ndarray, plans: Sequence[MaskPlan], params: Mapping[str, Tensor],
                            cfg: MaeConfig) -> Tensor:
    """Ablation encoder that sees all ``N`` positions, removed ones replaced by a learned token."""
    enc = cfg.encoder
    _, _, mask, _ = stack_plans(plans)
    w = params["encoder.patch_embed.w"]
    patches = Tensor(vit.patchify(images, enc.patch_size), dtype=w.dtype)
    tokens = T.linear(patches, w, params["encoder.patch_embed.b"])
    b, n, d = tokens.shape
    m = np.broadcast_to(mask[:, :, None], (b, n, d)).astype(w.dtype)
    keep = Tensor(1.0 - m, dtype=w.dtype)
    filler = T.mul(T.expand_rows(params["encoder.mask_token"], b, n), Tensor(m, dtype=w.dtype))
    mixed = T.add(T.mul(tokens, keep), filler)
    pos = Tensor(vit.sincos_pos_embed(n + 1, d)[1:], dtype=w.dtype)
    x = vit.prepend_cls(T.add(mixed, pos), params, enc)
    return vit.finish_encoder(x, params, enc)


def decode_full(latents: Tensor, plans: Sequence[MaskPlan], params: Mapping[str, Tensor],
                cfg: MaeConfig) -> Tensor:
    """Predict every patch: ``[batch, N, target_dim]`` with row ``i`` aligned to grid patch ``i``."""
    n = cfg.encoder.n_patches
    _, restore, _, k = stack_plans(plans)
    x = T.linear(latents, params["decoder.embed.w"], params["decoder.embed.b"])
    b, t, dd = x.shape
    cls = x[:, :1]
    if t == n + 1:
        # encoder already carried all N positions (mask-token ablation)
        full = x[:, 1:]
    elif t == k + 1:
        filler = T.expand_rows(params["decoder.mask_token"], b, n - k)
        full = T.gather_rows(T.concat([x[:, 1:], filler], axis=1), restore)
    else:
        raise ShapeError(f"latents carry {t} tokens; expected {k + 1} or {n + 1}")
    x = T.concat([cls, full], axis=1)
    x = T.add(x, Tensor(vit.sincos_pos_embed(n + 1, dd), dtype=x.dtype))
    x = vit.run_blocks(x, params, "decoder", cfg.decoder_depth, cfg.decoder_heads)
    x = T.layer_norm(x, params["decoder.norm.g"], params["decoder.norm.b"], vit.LN_EPS)
    pred = T.linear(x, params["decoder.pred.w"], params["decoder.pred.b"])
    return pred[:, 1:]


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def project(self, patches: np.ndarray) -> np.ndarray:
        return (patches - self.mean) @ self.components.T

    def reconstruct(self, coeffs: np.ndarray) -> np.ndarray:
        return coeffs @ self.components + self.mean


def pca_fit(patches: np.ndarray, k: int) -> PcaBasis:
    """Top-``k`` principal directions of mean-centred patch vectors."""
    patches = np.asarray(patches, dtype=np.float64)
    m, dim = patches.shape
    if k > dim:
        raise ValueError(f"k={k} exceeds patch dimension {dim}")
    if m <= k:
        raise ValueError(f"need more samples than components (m={m}, k={k})")
    mu = patches.mean(axis=0)
    xc = patches - mu
    cov = xc.T @ xc / m
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    comps = vecs[:, order].T
    # fix the sign so the largest-magnitude entry of each component is positive
    flip = np.sign(comps[np.arange(k), np.abs(comps).argmax(axis=1)])
    return PcaBasis(mu, comps * flip[:, None], np.clip(vals[order], 0.0, None))


def build_target(images: np.ndarray, kind: str, p: int, norm_eps: float = 1e-6,
                 basis: Optional[PcaBasis] = None) -> np.ndarray:
    """Per-patch regression target ``[batch, N, target_dim]``."""
    patches = vit.patchify(images, p)
    if kind == "raw_pixels":
        return patches
    if kind == "normalized_pixels":
        mu = patches.mean(axis=-1, keepdims=True)
        var = patches.var(axis=-1, keepdims=True)
        return (patches - mu) / np.sqrt(var + norm_eps)
    if kind == "pca":
        if basis is None:
            raise ValueError("pca target requires a fitted PcaBasis")
        return basis.project(patches.astype(np.float64)).astype(patches.dtype)
    raise ValueError(f"unknown target kind {kind!r}")


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over removed patches of the per-patch mean squared error."""
    mask = np.asarray(mask, dtype=pred.dtype)
    total = float(mask.sum())
    if total < 1:
        raise MaskError("no removed patches: the masked loss is undefined")
    if pred.shape != target.shape or mask.shape != pred.shape[:2]:
        raise ShapeError(f"pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    per_patch = T.mean(T.square(T.sub(pred, Tensor(target, dtype=pred.dtype))), axis=-1)
    return T.scale(T.sum_(T.mul(per_patch, Tensor(mask, dtype=pred.dtype))), 1.0 / total)


def full_mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Loss over every patch; kept only to contrast with :func:`masked_mse`."""
    return T.mean(T.square(T.sub(pred, Tensor(target, dtype=pred.dtype))))


@dataclass
class StepResult:
    loss: Tensor
    pred: Tensor
    plans: list
    target: np.ndarray


def mae_step(images: np.ndarray, cfg: MaeConfig, params: Mapping[str, Tensor], seed: int, epoch: int = 0,
             indices: Optional[Sequence[int]] = None, basis: Optional[PcaBasis] = None,
             plans: Optional[Sequence[MaskPlan]] = None) -> StepResult:
    """Plan, encode, decode and score one batch."""
    if indices is None:
        indices = range(images.shape[0])
    if plans is None:
        plans = sample_plans(cfg, seed, epoch, indices)
    if cfg.mask_tokens_in_encoder:
        latents = encode_with_mask_tokens(images, plans, params, cfg)
    else:
        latents = encode_visible(images, plans, params, cfg)
    pred = decode_full(latents, plans, params, cfg)
    target = build_target(images, cfg.target_kind, cfg.encoder.patch_size, cfg.norm_eps, basis)
    mask = np.stack([p.mask for p in plans])
    return StepResult(masked_mse(pred, target, mask), pred, list(plans), target)
