"""Vision Transformer backbone: patch + position embedding, pre-norm
transformer blocks, and an MLP classification head.

Two presets matter in practice: `VitConfig.b16()` (the full-size shape whose
checkpoints round-trip) and `VitConfig.tiny()` (the canonical seconds-scale
test configuration).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeMismatch
from .tensor import Tensor


@dataclass(frozen=True)
class VitConfig:
    image_size: int
    patch_size: int
    embed_dim: int
    depth: int
    heads: int
    mlp_ratio: int = 4
    num_classes: int = 6
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return self.embed_dim * self.mlp_ratio

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @classmethod
    def b16(cls, num_classes: int = 6) -> "VitConfig":
        return cls(image_size=224, patch_size=16, embed_dim=768, depth=12,
                   heads=12, mlp_ratio=4, num_classes=num_classes, channels=3)

    @classmethod
    def tiny(cls, num_classes: int = 6, channels: int = 1) -> "VitConfig":
        return cls(image_size=32, patch_size=8, embed_dim=64, depth=4,
                   heads=4, mlp_ratio=4, num_classes=num_classes, channels=channels)

    def to_meta(self) -> dict[str, str]:
        return {f"vit.{k}": str(v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "VitConfig":
        kwargs = {f.name: int(meta[f"vit.{f.name}"]) for f in dataclasses.fields(cls)}
        return cls(**kwargs)


def _weight(shape, rng: np.random.Generator | None) -> Tensor:
    """Truncated-normal init, or zeros when building a to-be-loaded skeleton."""
    if rng is None:
        return T.zeros(shape, requires_grad=True)
    return T.trunc_normal(shape, rng)


class BlockWeights:
    """All weights of one transformer block.

    Linear weights are stored (out_features, in_features), applied as
    x @ W^T + b.
    """

    def __init__(self, cfg: VitConfig, rng: np.random.Generator | None):
        d, h = cfg.embed_dim, cfg.mlp_hidden
        self.ln1_g = Tensor(np.ones(d), requires_grad=True)
        self.ln1_b = T.zeros((d,), requires_grad=True)
        self.wq = _weight((d, d), rng)
        self.bq = T.zeros((d,), requires_grad=True)
        self.wk = _weight((d, d), rng)
        self.bk = T.zeros((d,), requires_grad=True)
        self.wv = _weight((d, d), rng)
        self.bv = T.zeros((d,), requires_grad=True)
        self.wo = _weight((d, d), rng)
        self.bo = T.zeros((d,), requires_grad=True)
        self.ln2_g = Tensor(np.ones(d), requires_grad=True)
        self.ln2_b = T.zeros((d,), requires_grad=True)
        self.w1 = _weight((h, d), rng)
        self.b1 = T.zeros((h,), requires_grad=True)
        self.w2 = _weight((d, h), rng)
        self.b2 = T.zeros((d,), requires_grad=True)

    _FIELDS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
               "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")

    def named(self, prefix: str):
        for f in self._FIELDS:
            yield f"{prefix}.{f}", getattr(self, f)


class VitModel:
    """Backbone + head. Immutable during inference; training mutates only
    the weights an optimizer was given.

    Pass rng=None to build a zero-weight skeleton (cheap; used when loading
    a checkpoint that overwrites everything anyway).
    """

    def __init__(self, cfg: VitConfig, rng: np.random.Generator | None):
        self.config = cfg
        self.patch_w = _weight((cfg.embed_dim, cfg.patch_dim), rng)
        self.patch_b = T.zeros((cfg.embed_dim,), requires_grad=True)
        self.cls_token = T.zeros((1, cfg.embed_dim), requires_grad=True)
        self.pos_embed = _weight((cfg.seq_len, cfg.embed_dim), rng)
        self.blocks = [BlockWeights(cfg, rng) for _ in range(cfg.depth)]
        self.norm_g = Tensor(np.ones(cfg.embed_dim), requires_grad=True)
        self.norm_b = T.zeros((cfg.embed_dim,), requires_grad=True)
        self.head_w: Tensor | None = _weight((cfg.num_classes, cfg.embed_dim), rng)
        self.head_b: Tensor | None = T.zeros((cfg.num_classes,), requires_grad=True)

    def named_parameters(self):
        yield "patch.w", self.patch_w
        yield "patch.b", self.patch_b
        yield "cls", self.cls_token
        yield "pos", self.pos_embed
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"blocks.{i}")
        yield "norm.g", self.norm_g
        yield "norm.b", self.norm_b
        if self.head_w is not None:
            yield "head.w", self.head_w
            yield "head.b", self.head_b

    def backbone_parameters(self):
        """Everything that freezing covers: all but the head."""
        for name, p in self.named_parameters():
            if not name.startswith("head."):
                yield name, p

    def reset_head(self, num_classes: int, rng: np.random.Generator) -> None:
        """Fresh classification head for a new label set."""
        self.config = dataclasses.replace(self.config, num_classes=num_classes)
        self.head_w = T.trunc_normal((num_classes, self.config.embed_dim), rng)
        self.head_b = T.zeros((num_classes,), requires_grad=True)


# ---------------------------------------------------------------------------
# forward pipeline
# ---------------------------------------------------------------------------

def extract_patches(images: np.ndarray, cfg: VitConfig) -> np.ndarray:
    """(B,C,H,W) -> (B, N, C*p*p) flattened non-overlapping patches."""
    if images.ndim == 3:
        images = images[None]
    b, c, hgt, wid = images.shape
    p = cfg.patch_size
    if c != cfg.channels or hgt != cfg.image_size or wid != cfg.image_size:
        raise ShapeMismatch(
            f"image shape {images.shape[1:]} does not match configured "
            f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})")
    g = hgt // p
    x = images.reshape(b, c, g, p, g, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)        # (B, gy, gx, C, p, p)
    return x.reshape(b, g * g, c * p * p)


def patch_embed(images: np.ndarray, model: VitModel) -> Tensor:
    """Project patches to embed_dim, prepend class token, add positions."""
    cfg = model.config
    patches = Tensor(np.ascontiguousarray(extract_patches(images, cfg), dtype=np.float64))
    emb = T.linear(patches, model.patch_w, model.patch_b)          # (B,N,d)
    cls = T.tile_leading(model.cls_token, emb.shape[0])            # (B,1,d)
    seq = T.concat([cls, emb], axis=-2)                            # (B,S,d)
    return T.add(seq, model.pos_embed)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return T.moveaxis(T.reshape(x, (b, s, heads, d // heads)), -2, 1)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, dh = x.shape
    return T.reshape(T.moveaxis(x, 1, -2), (b, s, h * dh))


def mha_forward(x: Tensor, blk: BlockWeights, heads: int,
                q_extra=None, v_extra=None,
                attn_sink: list | None = None) -> Tensor:
    """Scaled dot-product multi-head attention with output projection.

    `q_extra` / `v_extra` are optional callables mapping the block input to
    an additive term on the respective projection (the LoRA hook).
    `attn_sink`, when given, receives each layer's (B, H, S, S) attention
    probabilities as a detached array.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    q = T.linear(x, blk.wq, blk.bq)
    if q_extra is not None:
        q = T.add(q, q_extra(x))
    k = T.linear(x, blk.wk, blk.bk)
    v = T.linear(x, blk.wv, blk.bv)
    if v_extra is not None:
        v = T.add(v, v_extra(x))

    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(qh.shape[-1]))
    attn = T.softmax(scores, axis=-1)
    if attn_sink is not None:
        attn_sink.append(attn.data.copy())
    out = T.linear(_merge_heads(T.matmul(attn, vh)), blk.wo, blk.bo)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def mlp_forward(x: Tensor, blk: BlockWeights) -> Tensor:
    return T.linear(T.gelu(T.linear(x, blk.w1, blk.b1)), blk.w2, blk.b2)


def block_forward(x: Tensor, blk: BlockWeights, heads: int,
                  attn_sink: list | None = None) -> Tensor:
    """Pre-norm residual block: x' = MHA(LN(x)) + x; out = MLP(LN(x')) + x'."""
    h = T.add(mha_forward(T.layer_norm(x, blk.ln1_g, blk.ln1_b), blk, heads,
                          attn_sink=attn_sink), x)
    return T.add(mlp_forward(T.layer_norm(h, blk.ln2_g, blk.ln2_b), blk), h)


def forward_features(images: np.ndarray, model: VitModel,
                     attn_sink: list | None = None) -> Tensor:
    x = patch_embed(images, model)
    for blk in model.blocks:
        x = block_forward(x, blk, model.config.heads, attn_sink=attn_sink)
    return x


def classify(images: np.ndarray, model: VitModel,
             attn_sink: list | None = None) -> Tensor:
    """Logits from the final-LN'd class token. Accepts (C,H,W) or (B,C,H,W)."""
    if model.head_w is None or model.head_b is None:
        raise ConfigurationError("model has no classification head")
    single = np.ndim(images) == 3
    x = forward_features(images, model, attn_sink=attn_sink)
    cls = T.reshape(T.narrow(x, -2, 0, 1), (x.shape[0], x.shape[-1]))
    logits = T.linear(T.layer_norm(cls, model.norm_g, model.norm_b),
                      model.head_w, model.head_b)
    return T.reshape(logits, (model.config.num_classes,)) if single else logits
