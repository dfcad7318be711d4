"""Analytic FLOPs model and measured step timing for the asymmetric design.

Per block and per token the model counts ``4d^2`` for the QKV and output
projections, ``2Td`` for attention scores and mixing and ``2md^2`` for the
MLP. Norms, softmax and biases are ignored.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from deskmae import mae as M
from deskmae import rng as rngs
from deskmae import tensor as T
from deskmae import vit
from deskmae.vit import ViTConfig


def block_flops_per_token(tokens: int, width: int, mlp_ratio: float) -> float:
    d = width
    return 4 * d * d + 2 * tokens * d + 2 * mlp_ratio * d * d


def stack_flops(tokens: int, width: int, depth: int, mlp_ratio: float) -> float:
    return depth * tokens * block_flops_per_token(tokens, width, mlp_ratio)


@dataclass(frozen=True)
class FlopsReport:
    encoder: float
    decoder: float
    ratio: float

    @property
    def total(self) -> float:
        return self.encoder + self.decoder


def _cost(enc: ViTConfig, dec_depth: int, dec_width: int, n: int, r: float, mask_tokens: bool) -> tuple[float, float]:
    enc_tokens = n + 1 if mask_tokens else M.keep_count(n, r) + 1
    return (stack_flops(enc_tokens, enc.width, enc.depth, enc.mlp_ratio),
            stack_flops(n + 1, dec_width, dec_depth, enc.mlp_ratio))


def flops_estimate(encoder: ViTConfig, decoder_depth: int, decoder_width: int, n_patches: int, r: float,
                   with_mask_tokens_in_encoder: bool = False) -> FlopsReport:
    """FLOPs of one forward pass and the with/without-mask-token cost ratio."""
    e, d = _cost(encoder, decoder_depth, decoder_width, n_patches, r, with_mask_tokens_in_encoder)
    with_ = sum(_cost(encoder, decoder_depth, decoder_width, n_patches, r, True))
    without = sum(_cost(encoder, decoder_depth, decoder_width, n_patches, r, False))
    return FlopsReport(e, d, with_ / without)


def decoder_token_fraction(encoder: ViTConfig, decoder_depth: int, decoder_width: int, n_patches: int) -> float:
    """Decoder FLOPs per token relative to the encoder's, both over the full sequence."""
    t = n_patches + 1
    dec = decoder_depth * block_flops_per_token(t, decoder_width, encoder.mlp_ratio)
    enc = encoder.depth * block_flops_per_token(t, encoder.width, encoder.mlp_ratio)
    return dec / enc


SWEEP_PRESETS = ("tiny-desk", "vit-b", "vit-l", "vit-h")


def sweep(ratios: Iterable[float] = (0.0, 0.5, 0.75, 0.9), decoder_depths: Iterable[int] = (1, 2, 4, 8),
          decoder_width: int = 512, presets: Iterable[str] = SWEEP_PRESETS) -> list[dict]:
    rows = []
    for preset in presets:
        enc = vit.PRESETS[preset]
        for depth in decoder_depths:
            for r in ratios:
                rep = flops_estimate(enc, depth, decoder_width, enc.n_patches, r)
                rows.append(dict(encoder=preset, n_patches=enc.n_patches, decoder_depth=depth,
                                 decoder_width=decoder_width, mask_ratio=r, len_keep=M.keep_count(enc.n_patches, r),
                                 gflops=rep.total / 1e9, speedup=rep.ratio))
    return rows


def time_step(cfg: M.MaeConfig, images: np.ndarray, params, seed: int = 0, epoch: int = 0) -> float:
    """Wall time of one forward/backward training step."""
    t0 = time.perf_counter()
    res = M.mae_step(images, cfg, params, seed, epoch=epoch)
    T.backward(res.loss)
    elapsed = time.perf_counter() - t0
    for p in params.values():
        p.grad = None
    return elapsed


@dataclass(frozen=True)
class Timing:
    without_mask_tokens: float
    with_mask_tokens: float

    @property
    def speedup(self) -> float:
        return self.with_mask_tokens / self.without_mask_tokens


def measure_speedup(cfg: Optional[M.MaeConfig] = None, batch: int = 32, repeats: int = 7, seed: int = 0) -> Timing:
    """Time a desk-scale step with the encoder on visible tokens only versus all tokens.

    The two variants are interleaved so that drift in machine load hits both
    alike; each side reports its median after one warm-up step.
    """
    cfg = cfg or M.tiny_desk()
    e = cfg.encoder
    images = rngs.stream(seed, "timing").standard_normal((batch, e.image_size, e.image_size, e.channels)).astype(np.float32)
    lean = dataclasses.replace(cfg, mask_tokens_in_encoder=False)
    full = dataclasses.replace(cfg, mask_tokens_in_encoder=True)
    params = M.init_mae(full, rngs.stream(seed, "init"), np.float32)
    lean_t, full_t = [], []
    for i in range(repeats + 1):
        lean_t.append(time_step(lean, images, params, seed, i))
        full_t.append(time_step(full, images, params, seed, i))
    return Timing(float(np.median(lean_t[1:])), float(np.median(full_t[1:])))
