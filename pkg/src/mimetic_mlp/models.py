"""Tiny isotropic ConvNeXt-style and ViT-style classifiers.

Both families share the same skeleton::

    images -> patchify -> linear patch embedding -> blocks -> mean-pool tokens
           -> final layernorm -> linear head

ConvNeXt block: ``x + MLP(LN(dwconv(x)))``.
ViT block: ``x + MHSA(LN(x))`` followed by ``x + MLP(LN(x))``.

Activations travel as ``[B, T, n]`` tokens; the ConvNeXt block reshapes to
``[B, n, h, w]`` around the depthwise convolution.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, ShapeError, Tensor
from .init_schemes import InitSpec, initialize_model
from .seeding import stream_rng

FAMILIES = ("convnext", "vit")
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    family: str = "convnext"
    embed_dim: int = 16
    depth: int = 3
    expansion: int = 2
    patch_size: int = 2
    filter_size: int = 3
    heads: int = 4
    num_classes: int = 10
    image_size: int = 16
    in_channels: int = 3
    init_spec: InitSpec = field(default_factory=InitSpec)
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.family not in FAMILIES:
            problems.append(f"family must be one of {FAMILIES}, got {self.family!r}")
        for name in ("embed_dim", "depth", "expansion", "patch_size", "num_classes", "image_size", "in_channels"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.patch_size >= 1 and self.image_size % self.patch_size:
            problems.append(f"patch_size {self.patch_size} must divide image_size {self.image_size}")
        if self.family == "convnext" and self.filter_size % 2 == 0:
            problems.append(f"filter_size must be odd, got {self.filter_size}")
        if self.family == "vit" and (self.heads < 1 or self.embed_dim % self.heads):
            problems.append(f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}")
        if problems:
            raise ConfigurationError("invalid model config: " + "; ".join(problems))

    @property
    def hidden_dim(self) -> int:
        return self.expansion * self.embed_dim

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("init_spec"), dict):
            d["init_spec"] = InitSpec.from_dict(d["init_spec"])
        return cls(**d)

    def structure_hash(self) -> str:
        """Hash of everything except the seed, so population members share it."""
        d = self.to_dict()
        d.pop("seed")
        d["init_spec"].pop("rng_seed", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalar parameters for ``cfg``."""
    n, p, C = cfg.embed_dim, cfg.hidden_dim, cfg.num_classes
    patch = cfg.in_channels * cfg.patch_size ** 2 * n + n
    mlp = 2 * n * p + p + n + (1 if cfg.init_spec.learnable_scalar_bias else 0)
    if cfg.family == "convnext":
        block = cfg.filter_size ** 2 * n + n + 2 * n + mlp
        extra = 0
    else:
        block = 2 * (2 * n) + 4 * (n * n + n) + mlp
        extra = cfg.num_tokens * n
    return patch + extra + cfg.depth * block + 2 * n + n * C + C


class Params(dict):
    """Ordered name -> Tensor registry."""

    def new(self, name: str, shape) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.zeros(shape), requires_grad=True, name=name)
        self[name] = t
        return t


class MlpBlock:
    """``y = W2 gelu(W1 x + b1) + b2`` applied per token, weights stored ``[out, in]``."""

    def __init__(self, params: Params, prefix: str, n: int, expansion: int, scalar_bias: bool):
        p = expansion * n
        self.W1 = params.new(f"{prefix}.W1", (p, n))
        self.b1 = params.new(f"{prefix}.b1", (p,))
        self.W2 = params.new(f"{prefix}.W2", (n, p))
        self.b2 = params.new(f"{prefix}.b2", (n,))
        self.scalar_bias = params.new(f"{prefix}.scalar_bias", ()) if scalar_bias else None
        self.expansion = expansion

    def __call__(self, x: Tensor) -> Tensor:
        W1 = self.W1
        if self.scalar_bias is not None:
            # (W1 + s 1 1^T) x = W1 x + s * sum(x) * 1_p
            W1 = ad.add(W1, self.scalar_bias)
        h = ad.gelu(ad.linear(x, W1, self.b1))
        return ad.linear(h, self.W2, self.b2)


class LayerNorm:
    def __init__(self, params: Params, prefix: str, d: int):
        self.gamma = params.new(f"{prefix}.gamma", (d,))
        self.beta = params.new(f"{prefix}.beta", (d,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gamma, self.beta, LN_EPS)


def multi_head_self_attention(x: Tensor, Wq: Tensor, Wk: Tensor, Wv: Tensor, Wo: Tensor, heads: int,
                              bq: Tensor | None = None, bk: Tensor | None = None,
                              bv: Tensor | None = None, bo: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention over ``[B, T, n]`` tokens with ``heads`` heads."""
    B, T, n = x.shape
    if n % heads:
        raise ShapeError(f"embed dim {n} not divisible by {heads} heads")
    d = n // heads

    def split(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, T, heads, d)), (0, 2, 1, 3))

    q = split(ad.linear(x, Wq, bq))
    k = split(ad.linear(x, Wk, bk))
    v = split(ad.linear(x, Wv, bv))
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d))
    att = ad.softmax(scores)
    out = ad.matmul(att, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, T, n))
    return ad.linear(out, Wo, bo)


class Attention:
    def __init__(self, params: Params, prefix: str, n: int, heads: int):
        self.Wq = params.new(f"{prefix}.Wq", (n, n))
        self.bq = params.new(f"{prefix}.bq", (n,))
        self.Wk = params.new(f"{prefix}.Wk", (n, n))
        self.bk = params.new(f"{prefix}.bk", (n,))
        self.Wv = params.new(f"{prefix}.Wv", (n, n))
        self.bv = params.new(f"{prefix}.bv", (n,))
        self.Wo = params.new(f"{prefix}.Wo", (n, n))
        self.bo = params.new(f"{prefix}.bo", (n,))
        self.heads = heads

    def __call__(self, x: Tensor) -> Tensor:
        return multi_head_self_attention(x, self.Wq, self.Wk, self.Wv, self.Wo, self.heads,
                                         self.bq, self.bk, self.bv, self.bo)


class ConvNeXtBlock:
    def __init__(self, params: Params, prefix: str, cfg: ModelConfig):
        n, f = cfg.embed_dim, cfg.filter_size
        self.K = params.new(f"{prefix}.dw.K", (n, f, f))
        self.Kb = params.new(f"{prefix}.dw.b", (n,))
        self.norm = LayerNorm(params, f"{prefix}.norm", n)
        self.mlp = MlpBlock(params, f"{prefix}.mlp", n, cfg.expansion, cfg.init_spec.learnable_scalar_bias)
        self.side = cfg.image_size // cfg.patch_size

    def __call__(self, x: Tensor) -> Tensor:
        B, T, n = x.shape
        s = self.side
        grid = ad.transpose(ad.reshape(x, (B, s, s, n)), (0, 3, 1, 2))
        y = ad.depthwise_conv2d(grid, self.K, self.Kb)
        y = ad.reshape(ad.transpose(y, (0, 2, 3, 1)), (B, T, n))
        return ad.add(x, self.mlp(self.norm(y)))


class ViTBlock:
    def __init__(self, params: Params, prefix: str, cfg: ModelConfig):
        n = cfg.embed_dim
        self.norm1 = LayerNorm(params, f"{prefix}.norm1", n)
        self.attn = Attention(params, f"{prefix}.attn", n, cfg.heads)
        self.norm2 = LayerNorm(params, f"{prefix}.norm2", n)
        self.mlp = MlpBlock(params, f"{prefix}.mlp", n, cfg.expansion, cfg.init_spec.learnable_scalar_bias)

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.add(x, self.attn(self.norm1(x)))
        return ad.add(x, self.mlp(self.norm2(x)))


class TinyModel:
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.config = cfg
        n = cfg.embed_dim
        self.params = Params()
        self.patch_W = self.params.new("patch.W", (n, cfg.in_channels * cfg.patch_size ** 2))
        self.patch_b = self.params.new("patch.b", (n,))
        self.pos = self.params.new("pos", (cfg.num_tokens, n)) if cfg.family == "vit" else None
        block_cls = ConvNeXtBlock if cfg.family == "convnext" else ViTBlock
        self.blocks = [block_cls(self.params, f"block.{i}", cfg) for i in range(cfg.depth)]
        self.norm = LayerNorm(self.params, "norm", n)
        self.head_W = self.params.new("head.W", (cfg.num_classes, n))
        self.head_b = self.params.new("head.b", (cfg.num_classes,))

    def mlp_blocks(self) -> list[MlpBlock]:
        return [b.mlp for b in self.blocks]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(name, p.numpy()) for name, p in self.params.items()]

    def load_state(self, state) -> None:
        for name, arr in state:
            self.params[name].assign(arr)

    def __call__(self, images: Tensor) -> Tensor:
        return forward(self, images)


def build_model(cfg: ModelConfig) -> TinyModel:
    """Allocate a model and initialize it from ``cfg.init_spec``.

    The init streams come from ``init_spec.rng_seed`` when set, else ``cfg.seed``.
    """
    model = TinyModel(cfg)
    seed = cfg.init_spec.rng_seed if cfg.init_spec.rng_seed is not None else cfg.seed
    initialize_model(model, cfg.init_spec, stream_rng(seed, "init"), stream_rng(seed, "init.mlp_mean"))
    return model


def forward(model: TinyModel, images) -> Tensor:
    cfg = model.config
    if not isinstance(images, Tensor):
        images = Tensor(images)
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(f"expected images [B, {expected[0]}, {expected[1]}, {expected[2]}], got {images.shape}")
    x = ad.linear(ad.patchify(images, cfg.patch_size), model.patch_W, model.patch_b)
    if model.pos is not None:
        x = ad.add(x, model.pos)
    for block in model.blocks:
        x = block(x)
    pooled = model.norm(ad.mean_pool_over_tokens(x))
    return ad.linear(pooled, model.head_W, model.head_b)


def mlp_weight_pairs(model: TinyModel) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """``(layer_index, W1 copy, W2 copy)`` for every block, in depth order."""
    return [(i, m.W1.numpy(), m.W2.numpy()) for i, m in enumerate(model.mlp_blocks())]


def with_init(cfg: ModelConfig, init_spec: InitSpec) -> ModelConfig:
    return replace(cfg, init_spec=init_spec)
