"""A compact pre-norm ViT encoder and attention-rollout extraction.

Token layout follows the usual ViT recipe minus the class token: the image is
cut into ``P x P`` patches, each patch is flattened channel-major and embedded
to ``D`` dims, and a learnable positional table is added.  Classification
mean-pools the ``M`` tokens, so the token sequence is always exactly the
``H/P x W/P`` grid.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, ValidationError
from .nn import LayerNorm, Linear, Module, Parameter, _init
from .tensor import Tensor


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("image_size", "patch_size", "in_channels", "embed_dim", "depth", "num_heads", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"model.image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"model.embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.mlp_ratio <= 0 or int(round(self.mlp_ratio * self.embed_dim)) < 1:
            raise ConfigError("model.mlp_ratio must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, dict] = {
    "tiny": dict(image_size=32, patch_size=4, in_channels=3, embed_dim=64, depth=4, num_heads=4, mlp_ratio=4.0,
                 num_classes=10),
    "vitb-like": dict(image_size=224, patch_size=16, in_channels=3, embed_dim=768, depth=12, num_heads=12,
                      mlp_ratio=4.0, num_classes=100),
}


def preset(name: str, **overrides) -> ViTConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return ViTConfig(**{**PRESETS[name], **overrides})


class Attention(Module):
    def __init__(self, dim: int, num_heads: int, rng=None, dtype=np.float32):
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.o = Linear(dim, dim, rng, dtype=dtype)
        self.num_heads = num_heads

    def forward(self, x: Tensor, record: bool = False):
        B, M, D = x.shape
        h = self.num_heads
        hd = D // h

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, M, h, hd).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
        attn = T.softmax(scores)
        ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, M, D)
        out = self.o(ctx)
        averaged = attn.data.mean(axis=1) if record else None
        return out, averaged


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng=None, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """One encoder layer.

    Adapter slots (all ``None`` on a plain backbone):

    * ``attn_adapter`` / ``mlp_adapter`` -- callables applied to the sub-block
      branch output before its residual add (Houlsby-style insertion).
    * ``adapter`` -- an object with ``combine(x_tilde, x_attn)`` that replaces
      the MLP residual sum (iCoN, AdaptFormer).
    """

    def __init__(self, cfg: ViTConfig, rng=None, dtype=np.float32):
        self.ln1 = LayerNorm(cfg.embed_dim, dtype=dtype)
        self.attn = Attention(cfg.embed_dim, cfg.num_heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(cfg.embed_dim, dtype=dtype)
        self.mlp = MLP(cfg.embed_dim, cfg.mlp_hidden, rng, dtype=dtype)
        self.attn_adapter = None
        self.mlp_adapter = None
        self.adapter = None

    def forward(self, x: Tensor, record: bool = False):
        x_attn, attn = attention_sub_block(x, self, record=record)
        return mlp_sub_block(x_attn, self), attn


def attention_sub_block(x_in: Tensor, block: Block, record: bool = False):
    """``x_attn = Attention(LN(x_in)) + x_in``; also returns the head-averaged map when ``record``."""
    branch, attn = block.attn(block.ln1(x_in), record=record)
    if block.attn_adapter is not None:
        branch = branch + block.attn_adapter(branch)
    return branch + x_in, attn


def mlp_sub_block(x_attn: Tensor, block: Block) -> Tensor:
    """``x_tilde = MLP(LN(x_attn))`` then the residual sum, possibly rewritten by an adapter."""
    x_tilde = block.mlp(block.ln2(x_attn))
    if block.mlp_adapter is not None:
        x_tilde = x_tilde + block.mlp_adapter(x_tilde)
    if block.adapter is None:
        return x_tilde + x_attn
    return block.adapter.combine(x_tilde, x_attn)


class ViT(Module):
    def __init__(self, cfg: ViTConfig, seed: int | None = 0, dtype=np.float32, init: bool = True):
        rng = np.random.default_rng(seed) if init else None
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.patch_embed = Linear(cfg.patch_dim, cfg.embed_dim, rng, dtype=dtype)
        self.pos_embed = Parameter(_init(rng, (cfg.num_patches, cfg.embed_dim), 0.02, dtype), "pos")
        self.blocks = [Block(cfg, rng, dtype=dtype) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.embed_dim, dtype=dtype)
        self.head = Linear(cfg.embed_dim, cfg.num_classes, rng, dtype=dtype)

    def forward(self, images, records: list | None = None) -> Tensor:
        return forward(images, self, records)


def patchify(images: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """``[B, C, H, W] -> [B, M, C*P*P]``, tokens in row-major grid order."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ConfigError(
            f"images of shape {images.shape} do not match model "
            f"[B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}]"
        )
    B = images.shape[0]
    g, P, C = cfg.grid, cfg.patch_size, cfg.in_channels
    x = images.reshape(B, C, g, P, g, P).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(B, g * g, C * P * P))


def patch_embed(images, model: ViT) -> Tensor:
    patches = Tensor(patchify(images.data if isinstance(images, Tensor) else images, model.cfg), dtype=model.dtype)
    return model.patch_embed(patches) + model.pos_embed


def forward(images, model: ViT, records: list | None = None) -> Tensor:
    """Logits ``[B, num_classes]``; appends per-block ``[B, M, M]`` attention maps to ``records`` if given."""
    x = patch_embed(images, model)
    for block in model.blocks:
        x, attn = block(x, record=records is not None)
        if records is not None:
            records.append(attn)
    pooled = model.norm(x).mean(axis=1)
    return model.head(pooled)


def attention_maps(images, model: ViT) -> list[np.ndarray]:
    records: list = []
    with T.no_tape():
        forward(images, model, records)
    return records


def attention_rollout(records, residual: float = 0.5, atol: float = 1e-4) -> np.ndarray:
    """Product of residual-mixed attention matrices, last layer leftmost.

    Each layer's map becomes ``(1 - residual) * A + residual * I`` with rows
    renormalised.  Accepts ``[M, M]`` or batched ``[B, M, M]`` records.
    """
    records = [np.asarray(r, dtype=np.float64) for r in records]
    if not records:
        raise ValidationError("attention_rollout needs at least one attention record")
    shape = records[0].shape
    for i, a in enumerate(records):
        if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
            raise ValidationError(f"record {i} has non-square shape {a.shape}")
        if a.shape != shape:
            raise ValidationError(f"record {i} has shape {a.shape}, expected {shape}")
        if np.any(a < 0) or not np.allclose(a.sum(axis=-1), 1.0, atol=atol, rtol=0):
            raise ValidationError(f"record {i} is not row-stochastic")
    eye = np.eye(shape[-1])
    rollout = np.broadcast_to(eye, shape).copy()
    for a in records:
        mixed = (1.0 - residual) * a + residual * eye
        mixed = mixed / mixed.sum(axis=-1, keepdims=True)
        rollout = mixed @ rollout
    return rollout


def received_attention(rollout: np.ndarray, grid: int) -> np.ndarray:
    """Column means of a rollout matrix (attention each token receives), laid out on the token grid."""
    received = rollout.mean(axis=-2)
    return received.reshape(received.shape[:-1] + (grid, grid))
