"""Vanilla Vision Transformer pieces built on :mod:`deskmae.tensor`.

Parameters live in flat ``dict[str, Tensor]`` maps with dotted names
(``encoder.blocks.2.attn.qkv.w``). Forward functions are pure: they read
parameters by prefix and never mutate them.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from deskmae import tensor as T
from deskmae.tensor import ShapeError, Tensor

Params = dict[str, Tensor]

LN_EPS = 1e-6


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    depth: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_hidden(self) -> int:
        return int(self.width * self.mlp_ratio)


PRESETS = {
    "tiny-desk": ViTConfig(),
    "vit-b": ViTConfig(image_size=224, patch_size=16, depth=12, width=768, heads=12),
    "vit-l": ViTConfig(image_size=224, patch_size=16, depth=24, width=1024, heads=16),
    "vit-h": ViTConfig(image_size=224, patch_size=14, depth=32, width=1280, heads=16),
}


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """``[H, W, C]`` -> ``[N, p*p*C]`` (or batched with a leading axis).

    Patches are ordered row-major over the grid; each row is the raster
    flattening (row, column, channel) of its patch.
    """
    single = images.ndim == 3
    x = images[None] if single else images
    b, h, w, c = x.shape
    if h % p or w % p:
        raise ShapeError(f"image extents {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    out = x.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, p * p * c)
    return out[0] if single else out


def unpatchify(patches: np.ndarray, grid: tuple[int, int], p: int) -> np.ndarray:
    """Inverse of :func:`patchify` for a ``(rows, cols)`` patch grid."""
    single = patches.ndim == 2
    x = patches[None] if single else patches
    gh, gw = grid
    b, n, dim = x.shape
    if n != gh * gw:
        raise ShapeError(f"{n} patches do not fill a {gh}x{gw} grid")
    c = dim // (p * p)
    if c * p * p != dim:
        raise ShapeError(f"patch width {dim} is not p*p*C for p={p}")
    out = x.reshape(b, gh, gw, p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * p, gw * p, c)
    return out[0] if single else out


def sincos_pos_embed(n_positions: int, d: int) -> np.ndarray:
    """Fixed sine-cosine table: ``[sin(q*w_0..), cos(q*w_0..)]`` with ``w_i = 10000^(-2i/d)``."""
    if d % 2:
        raise ValueError(f"sine-cosine embedding needs an even width, got {d}")
    half = d // 2
    omega = 1.0 / 10000.0 ** (2.0 * np.arange(half) / d)
    angles = np.arange(n_positions, dtype=np.float64)[:, None] * omega[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _linear(params: Params, name: str, rng, fan_in: int, fan_out: int, dtype) -> None:
    params[f"{name}.w"] = Tensor(xavier_uniform(rng, fan_in, fan_out, dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)


def _norm(params: Params, name: str, d: int, dtype) -> None:
    params[f"{name}.g"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)


def init_blocks(params: Params, prefix: str, depth: int, width: int, mlp_hidden: int, rng, dtype) -> None:
    for i in range(depth):
        p = f"{prefix}.blocks.{i}"
        _norm(params, f"{p}.norm1", width, dtype)
        _linear(params, f"{p}.attn.qkv", rng, width, 3 * width, dtype)
        _linear(params, f"{p}.attn.proj", rng, width, width, dtype)
        _norm(params, f"{p}.norm2", width, dtype)
        _linear(params, f"{p}.mlp.fc1", rng, width, mlp_hidden, dtype)
        _linear(params, f"{p}.mlp.fc2", rng, mlp_hidden, width, dtype)


def init_encoder(cfg: ViTConfig, rng: np.random.Generator, dtype=np.float32, prefix: str = "encoder") -> Params:
    """Patch embedding, class token, blocks and final norm of a ViT encoder."""
    params: Params = {}
    _linear(params, f"{prefix}.patch_embed", rng, cfg.patch_dim, cfg.width, dtype)
    params[f"{prefix}.cls_token"] = Tensor(np.zeros(cfg.width, dtype=dtype), requires_grad=True)
    init_blocks(params, prefix, cfg.depth, cfg.width, cfg.mlp_hidden, rng, dtype)
    _norm(params, f"{prefix}.norm", cfg.width, dtype)
    return params


def init_classifier(cfg: ViTConfig, n_classes: int, rng: np.random.Generator, dtype=np.float32) -> Params:
    params = init_encoder(cfg, rng, dtype)
    _linear(params, "head", rng, cfg.width, n_classes, dtype)
    return params


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def attention(x: Tensor, params: Mapping[str, Tensor], prefix: str, heads: int,
              keep_weights: Optional[list] = None) -> Tensor:
    b, t, d = x.shape
    if d % heads:
        raise ShapeError(f"width {d} does not split into {heads} heads")
    dh = d // heads
    qkv = T.linear(x, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])
    qkv = T.transpose(T.reshape(qkv, (b, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    weights = T.softmax_rows(scores)
    if keep_weights is not None:
        keep_weights.append(weights.data)
    mixed = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, t, d))
    return T.linear(mixed, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])


def mlp(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    h = T.gelu(T.linear(x, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    return T.linear(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])


def transformer_block(x: Tensor, params: Mapping[str, Tensor], prefix: str, heads: int,
                      drop_path: float = 0.0, rng: Optional[np.random.Generator] = None,
                      keep_weights: Optional[list] = None) -> Tensor:
    """Pre-norm block: ``x + MHSA(LN(x))`` then ``+ MLP(LN(.))``."""
    def branch(y):
        if drop_path > 0.0 and rng is not None:
            return T.drop_mask(y, 1.0 - drop_path, rng)
        return y

    h = T.layer_norm(x, params[f"{prefix}.norm1.g"], params[f"{prefix}.norm1.b"], LN_EPS)
    x = T.add(x, branch(attention(h, params, f"{prefix}.attn", heads, keep_weights)))
    h = T.layer_norm(x, params[f"{prefix}.norm2.g"], params[f"{prefix}.norm2.b"], LN_EPS)
    return T.add(x, branch(mlp(h, params, f"{prefix}.mlp")))


def run_blocks(x: Tensor, params: Mapping[str, Tensor], prefix: str, depth: int, heads: int,
               drop_path: float = 0.0, rng: Optional[np.random.Generator] = None) -> Tensor:
    rates = np.linspace(0.0, drop_path, depth) if depth > 1 else [drop_path]
    for i in range(depth):
        x = transformer_block(x, params, f"{prefix}.blocks.{i}", heads, float(rates[i]), rng)
    return x


def embed_patches(images: np.ndarray, params: Mapping[str, Tensor], cfg: ViTConfig,
                  prefix: str = "encoder") -> Tensor:
    """Linear patch embedding plus the position table rows ``1..N``."""
    w = params[f"{prefix}.patch_embed.w"]
    patches = Tensor(patchify(images, cfg.patch_size), dtype=w.dtype)
    tokens = T.linear(patches, w, params[f"{prefix}.patch_embed.b"])
    pos = Tensor(sincos_pos_embed(cfg.n_patches + 1, cfg.width)[1:], dtype=w.dtype)
    return T.add(tokens, pos)


def prepend_cls(tokens: Tensor, params: Mapping[str, Tensor], cfg: ViTConfig, prefix: str = "encoder") -> Tensor:
    cls = params[f"{prefix}.cls_token"]
    cls_pos = Tensor(sincos_pos_embed(1, cfg.width)[0], dtype=cls.dtype)
    cls_row = T.expand_rows(T.add(cls, cls_pos), tokens.shape[0], 1)
    return T.concat([cls_row, tokens], axis=1)


def finish_encoder(x: Tensor, params: Mapping[str, Tensor], cfg: ViTConfig, prefix: str = "encoder",
                   drop_path: float = 0.0, rng: Optional[np.random.Generator] = None) -> Tensor:
    x = run_blocks(x, params, prefix, cfg.depth, cfg.heads, drop_path, rng)
    return T.layer_norm(x, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"], LN_EPS)


def encode(images: np.ndarray, params: Mapping[str, Tensor], cfg: ViTConfig, prefix: str = "encoder",
           drop_path: float = 0.0, rng: Optional[np.random.Generator] = None) -> Tensor:
    """All-token ViT encoding ``[batch, N + 1, width]`` (class token first)."""
    x = prepend_cls(embed_patches(images, params, cfg, prefix), params, cfg, prefix)
    return finish_encoder(x, params, cfg, prefix, drop_path, rng)


def vit_classify(images: np.ndarray, params: Mapping[str, Tensor], cfg: ViTConfig,
                 drop_path: float = 0.0, rng: Optional[np.random.Generator] = None) -> Tensor:
    feats = encode(images, params, cfg, drop_path=drop_path, rng=rng)[:, 0]
    return T.linear(feats, params["head.w"], params["head.b"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"MAECKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, "np.ndarray | Tensor"]) -> None:
    """Write named arrays as little-endian float32 behind a manifest header."""
    items = [(k, np.asarray(v.data if isinstance(v, Tensor) else v)) for k, v in arrays.items()]
    header = bytearray(CKPT_MAGIC)
    header += struct.pack("<I", len(items))
    for name, arr in items:
        raw = name.encode("utf-8")
        header += struct.pack("<I", len(raw)) + raw
        header += struct.pack("<I", arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        for _, arr in items:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    off = 8

    def u32():
        nonlocal off
        if off + 4 > len(buf):
            raise CheckpointError(f"{path}: truncated manifest at byte {off}")
        (v,) = struct.unpack_from("<I", buf, off)
        off += 4
        return v

    manifest = []
    for _ in range(u32()):
        n = u32()
        name = buf[off:off + n].decode("utf-8")
        off += n
        rank = u32()
        manifest.append((name, tuple(u32() for _ in range(rank))))
    out = {}
    for name, shape in manifest:
        count = math.prod(shape)
        end = off + 4 * count
        if end > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name!r} at byte {off}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off = end
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def params_from_arrays(arrays: Mapping[str, np.ndarray], dtype=np.float32) -> Params:
    return {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in arrays.items()}
