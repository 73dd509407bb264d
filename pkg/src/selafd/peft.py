"""Parameter-efficient fine-tuning of a frozen ViT backbone.

Three additions per transformer block, all zero at initialization so the
wrapped model starts as the exact pretrained function:

* low-rank updates (B @ A) on the query and value projections,
* a bottleneck adapter applied serially after attention (internal skip),
* a bottleneck adapter parallel to the MLP, scaled by a factor s.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vit
from .errors import ConfigurationError, ContractViolation
from .tensor import Tensor
from .vit import VitModel

MODES = ("selafd", "lora_only", "adapter_only", "linear", "full")


@dataclass(frozen=True)
class PeftConfig:
    rank: int = 8
    bottleneck_ratio: float = 0.5
    scale: float = 0.2
    lora_targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigurationError(f"LoRA rank must be >= 1, got {self.rank}")
        if not 0.0 < self.scale <= 1.0:
            raise ConfigurationError(f"parallel scale must be in (0, 1], got {self.scale}")
        if self.bottleneck_ratio <= 0.0:
            raise ConfigurationError(
                f"bottleneck ratio must be positive, got {self.bottleneck_ratio}")
        bad = set(self.lora_targets) - {"q", "v"}
        if bad:
            raise ConfigurationError(f"unknown LoRA targets {sorted(bad)}")

    def to_meta(self) -> dict[str, str]:
        return {
            "peft.rank": str(self.rank),
            "peft.bottleneck_ratio": repr(self.bottleneck_ratio),
            "peft.scale": repr(self.scale),
            "peft.lora_targets": ",".join(self.lora_targets),
        }

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "PeftConfig":
        return cls(rank=int(meta["peft.rank"]),
                   bottleneck_ratio=float(meta["peft.bottleneck_ratio"]),
                   scale=float(meta["peft.scale"]),
                   lora_targets=tuple(meta["peft.lora_targets"].split(",")))


class LoraLayer:
    """Rank-r update BA on one frozen projection; B starts at zero."""

    def __init__(self, d: int, rank: int, target: str,
                 rng: np.random.Generator | None):
        if rank < 1:
            raise ConfigurationError(f"LoRA rank must be >= 1, got {rank}")
        if rank >= d:
            raise ConfigurationError(f"LoRA rank {rank} must be < dimension {d}")
        a = np.zeros((rank, d)) if rng is None else rng.normal(0.0, 0.02, (rank, d))
        self.a = Tensor(a, requires_grad=True)
        self.b = T.zeros((d, rank), requires_grad=True)
        self.target = target
        self.merged = False

    def row_term(self, x: Tensor) -> Tensor:
        """Additive term for row-major activations: x A^T B^T == (BAx)^T."""
        return T.linear(T.linear(x, self.a), self.b)

    def reset(self, rng: np.random.Generator) -> None:
        """Back to the fresh state: new A, zero B, merge flag cleared."""
        self.a = Tensor(rng.normal(0.0, 0.02, self.a.shape), requires_grad=True)
        self.b = T.zeros(self.b.shape, requires_grad=True)
        self.merged = False

    def named(self, prefix: str):
        yield f"{prefix}.a", self.a
        yield f"{prefix}.b", self.b


def lora_forward(x: Tensor, w0: Tensor, lora: LoraLayer) -> Tensor:
    """h = W0 x + B (A x) for column-vector inputs (d,) or (d, k)."""
    if w0.requires_grad:
        raise ContractViolation("lora_forward requires a frozen base weight")
    single = x.ndim == 1
    col = T.reshape(x, (x.shape[0], 1)) if single else x
    h = T.add(T.matmul(w0, col), T.matmul(lora.b, T.matmul(lora.a, col)))
    return T.reshape(h, (h.shape[0],)) if single else h


def lora_merge(w0: Tensor, lora: LoraLayer) -> Tensor:
    """W0 + BA as a plain weight; rejected if this layer was already merged."""
    if lora.merged:
        raise ContractViolation(
            "LoRA layer already merged; reset it before merging again")
    lora.merged = True
    return Tensor(w0.data + lora.b.data @ lora.a.data)


class Adapter:
    """Bottleneck module: down-project, ReLU, up-project. The up side starts
    at zero so the adapter contributes nothing until trained."""

    def __init__(self, d: int, bottleneck_ratio: float, placement: str,
                 rng: np.random.Generator | None):
        if placement not in ("serial", "parallel"):
            raise ConfigurationError(f"unknown adapter placement {placement!r}")
        m = round(d * bottleneck_ratio)
        if m < 1:
            raise ConfigurationError(
                f"bottleneck width came out {m} for d={d}, ratio={bottleneck_ratio}")
        w = np.zeros((d, m)) if rng is None else rng.normal(0.0, 0.02, (d, m))
        self.w_down = Tensor(w, requires_grad=True)
        self.b_down = T.zeros((m,), requires_grad=True)
        self.w_up = T.zeros((m, d), requires_grad=True)
        self.b_up = T.zeros((d,), requires_grad=True)
        self.placement = placement

    def bottleneck(self, h: Tensor) -> Tensor:
        z = T.relu(T.add(T.matmul(h, self.w_down), self.b_down))
        return T.add(T.matmul(z, self.w_up), self.b_up)

    def named(self, prefix: str):
        yield f"{prefix}.w_down", self.w_down
        yield f"{prefix}.b_down", self.b_down
        yield f"{prefix}.w_up", self.w_up
        yield f"{prefix}.b_up", self.b_up


def serial_adapter_apply(h: Tensor, adapter: Adapter) -> Tensor:
    """h + up(ReLU(down(h))): the internal skip keeps zero-init == identity."""
    if adapter.placement != "serial":
        raise ConfigurationError(
            f"serial application of a {adapter.placement!r} adapter")
    return T.add(h, adapter.bottleneck(h))


def selafd_block_forward(x: Tensor, blk: vit.BlockWeights, heads: int,
                         lora_q: LoraLayer | None, lora_v: LoraLayer | None,
                         serial_ad: Adapter | None, parallel_ad: Adapter | None,
                         s: float, attn_sink: list | None = None) -> Tensor:
    """One adapted block.

    x' = SerialAdapter(MHA_lora(LN(x))) + x
    out = MLP(LN(x')) + s * ParallelAdapter(LN(x')) + x'

    The parallel adapter reads the same normalized input as the MLP. With
    every PEFT weight at zero this reproduces the plain block bit for bit.
    """
    h = vit.mha_forward(
        T.layer_norm(x, blk.ln1_g, blk.ln1_b), blk, heads,
        q_extra=lora_q.row_term if lora_q is not None else None,
        v_extra=lora_v.row_term if lora_v is not None else None,
        attn_sink=attn_sink)
    if serial_ad is not None:
        h = serial_adapter_apply(h, serial_ad)
    x2 = T.add(h, x)

    ln2 = T.layer_norm(x2, blk.ln2_g, blk.ln2_b)
    out = vit.mlp_forward(ln2, blk)
    if parallel_ad is not None:
        out = T.add(out, T.scale(parallel_ad.bottleneck(ln2), s))
    return T.add(out, x2)


class SelafdModel:
    """A backbone plus the per-block PEFT modules the selected mode uses.

    Build with `wrap`. In every mode except "full" the backbone (including
    the final layer norm) is frozen and only PEFT weights + head train.
    """

    def __init__(self, backbone: VitModel, mode: str, peft: PeftConfig | None):
        self.backbone = backbone
        self.mode = mode
        self.peft = peft
        depth = backbone.config.depth
        self.lora_q: list[LoraLayer | None] = [None] * depth
        self.lora_v: list[LoraLayer | None] = [None] * depth
        self.serial: list[Adapter | None] = [None] * depth
        self.parallel: list[Adapter | None] = [None] * depth

    @property
    def config(self) -> vit.VitConfig:
        return self.backbone.config

    @property
    def scale(self) -> float:
        return self.peft.scale if self.peft is not None else 0.0

    def named_parameters(self):
        yield from self.backbone.named_parameters()
        for i in range(self.config.depth):
            for mod, tag in ((self.lora_q[i], "lora_q"), (self.lora_v[i], "lora_v"),
                             (self.serial[i], "serial"), (self.parallel[i], "parallel")):
                if mod is not None:
                    yield from mod.named(f"peft/blocks.{i}.{tag}")

    def trainable_parameters(self):
        for name, p in self.named_parameters():
            if p.requires_grad:
                yield name, p

    def forward(self, images: np.ndarray, attn_sink: list | None = None) -> Tensor:
        m = self.backbone
        x = vit.patch_embed(images, m)
        for i, blk in enumerate(m.blocks):
            x = selafd_block_forward(
                x, blk, m.config.heads, self.lora_q[i], self.lora_v[i],
                self.serial[i], self.parallel[i], self.scale, attn_sink=attn_sink)
        return x

    def classify(self, images: np.ndarray, attn_sink: list | None = None) -> Tensor:
        m = self.backbone
        if m.head_w is None or m.head_b is None:
            raise ConfigurationError("model has no classification head")
        single = np.ndim(images) == 3
        x = self.forward(images, attn_sink=attn_sink)
        cls = T.reshape(T.narrow(x, -2, 0, 1), (x.shape[0], x.shape[-1]))
        logits = T.linear(T.layer_norm(cls, m.norm_g, m.norm_b), m.head_w, m.head_b)
        return T.reshape(logits, (m.config.num_classes,)) if single else logits


def freeze_backbone(model: VitModel) -> VitModel:
    """Freeze everything except the classification head."""
    for _, p in model.backbone_parameters():
        p.requires_grad = False
        p.grad = None
    return model


def unfreeze_all(model: VitModel) -> VitModel:
    for _, p in model.named_parameters():
        p.requires_grad = True
    return model


def wrap(backbone: VitModel, mode: str, peft: PeftConfig | None = None,
         rng: np.random.Generator | None = None) -> SelafdModel:
    """Attach the PEFT modules the mode calls for and set trainability.

    rng=None builds zero-weight PEFT skeletons (for checkpoint loading);
    note the LoRA A matrices are then zero too, unlike a fresh `reset`.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; valid modes: {', '.join(MODES)}")
    uses_peft = mode in ("selafd", "lora_only", "adapter_only")
    if uses_peft and peft is None:
        peft = PeftConfig()
    model = SelafdModel(backbone, mode, peft if uses_peft else None)

    if mode == "full":
        unfreeze_all(backbone)
        return model
    freeze_backbone(backbone)

    d = backbone.config.embed_dim
    if mode in ("selafd", "lora_only"):
        for i in range(backbone.config.depth):
            if "q" in peft.lora_targets:
                model.lora_q[i] = LoraLayer(d, peft.rank, "q", rng)
            if "v" in peft.lora_targets:
                model.lora_v[i] = LoraLayer(d, peft.rank, "v", rng)
    if mode in ("selafd", "adapter_only"):
        for i in range(backbone.config.depth):
            model.serial[i] = Adapter(d, peft.bottleneck_ratio, "serial", rng)
            model.parallel[i] = Adapter(d, peft.bottleneck_ratio, "parallel", rng)
    return model


def count_trainable(model) -> dict[str, float]:
    """Exact parameter accounting from shapes: trainable, total, fraction."""
    trainable = total = 0
    for _, p in model.named_parameters():
        n = p.data.size
        total += n
        if p.requires_grad:
            trainable += n
    return {"trainable": trainable, "total": total,
            "fraction": trainable / total if total else 0.0}


def lora_param_count(cfg: vit.VitConfig, peft: PeftConfig) -> int:
    """Closed form: depth * |targets| * 2 * r * d."""
    return cfg.depth * len(peft.lora_targets) * 2 * peft.rank * cfg.embed_dim
