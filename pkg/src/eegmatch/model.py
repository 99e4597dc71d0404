"""SST-LegoViT: spatial-spectral-temporal encoder for 4-D EEG samples.

Pipeline per sample (T frames × F bands × H × W maps, DE and PSD feature
types): stacked-conv patch embedding and spatial multi-scale attention
blocks applied per (frame, band) map with weights shared across frames and
bands (separate parameter sets per feature type); a Legoformer fusion stage
with parallel per-feature-type transformer encoders over the band sequence
and a cross-attention decoder keyed on the DE branch; a temporal
transformer encoder over frames; and a projection head emitting unit-norm
embeddings for text matching.  A K-way classifier head over the same trunk
supports the ablation arm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from eegmatch import autodiff as ad
from eegmatch.autodiff import Tensor
from eegmatch.errors import ConfigError, ValidationError

__all__ = [
    "ModelConfig", "Module", "Linear", "LayerNorm", "MultiHeadAttention",
    "TransformerBlock", "PatchEmbed", "SpatialBlock", "BranchEncoder",
    "CrossDecoder", "LegoFusion", "TemporalEncoder", "EegEncoder",
    "EegClassifier", "batch_from_samples",
]

FUSION_QUERY_MODES = ("psd", "sum")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults sized for desk-scale runs."""

    in_h: int = 32
    in_w: int = 32
    n_bands: int = 6
    n_frames: int = 5
    embed_dim: int = 64
    heads: int = 4
    spatial_blocks: int = 1
    lego_layers: int = 1
    temporal_layers: int = 1
    patch_channels: Optional[Tuple[int, ...]] = None
    patch_strides: Tuple[int, ...] = (2, 2, 2, 1)
    multiscale_kernels: Tuple[int, ...] = (1, 3, 5)
    ffn_ratio: int = 2
    proj_dim: int = 64
    temperature: float = 0.07
    fusion_query: str = "psd"
    dropout: float = 0.0

    def resolved_patch_channels(self) -> Tuple[int, ...]:
        if self.patch_channels is None:
            return (16, 32, 64, self.embed_dim)
        return tuple(int(c) for c in self.patch_channels)

    def token_grid_side(self) -> Tuple[int, int]:
        stride_product = int(np.prod(self.patch_strides))
        return self.in_h // stride_product, self.in_w // stride_product

    def validate(self) -> "ModelConfig":
        channels = self.resolved_patch_channels()
        if self.embed_dim < 1 or self.heads < 1:
            raise ConfigError("embed_dim and heads must be positive")
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if len(channels) != 4 or len(self.patch_strides) != 4:
            raise ConfigError("patch embedding uses exactly four conv stages")
        if channels[-1] != self.embed_dim:
            raise ConfigError(
                f"last patch channel {channels[-1]} must equal embed_dim {self.embed_dim}")
        if any(c < 1 for c in channels) or any(s < 1 for s in self.patch_strides):
            raise ConfigError("patch channels and strides must be positive")
        stride_product = int(np.prod(self.patch_strides))
        if self.in_h % stride_product or self.in_w % stride_product:
            raise ConfigError(
                f"stride product {stride_product} must divide input size "
                f"{self.in_h}x{self.in_w}")
        if any(k < 1 or k % 2 == 0 for k in self.multiscale_kernels):
            raise ConfigError("multiscale kernels must be odd and positive")
        if self.proj_dim < 1:
            raise ConfigError("proj_dim must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.fusion_query not in FUSION_QUERY_MODES:
            raise ConfigError(
                f"fusion_query must be one of {FUSION_QUERY_MODES}, got {self.fusion_query!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if min(self.n_bands, self.n_frames, self.in_h, self.in_w) < 1:
            raise ConfigError("input dimensions must be positive")
        if self.ffn_ratio < 1:
            raise ConfigError("ffn_ratio must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_channels"] = list(self.resolved_patch_channels())
        d["patch_strides"] = list(self.patch_strides)
        d["multiscale_kernels"] = list(self.multiscale_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("patch_channels", "patch_strides", "multiscale_kernels"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs).validate()


# -- module plumbing -----------------------------------------------------------

class Module:
    """Minimal parameter container with deterministic naming."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._modules: Dict[str, "Module"] = {}

    def _p(self, name: str, tensor: Tensor) -> Tensor:
        self._params[name] = tensor
        return tensor

    def _m(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for name, tensor in self._params.items():
            out[prefix + name] = tensor
        for name, module in self._modules.items():
            out.update(module.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(arrays) != set(params):
            missing = sorted(set(params) - set(arrays))
            extra = sorted(set(arrays) - set(params))
            raise ValidationError(
                f"checkpoint/parameter name mismatch; missing={missing}, extra={extra}")
        for name, param in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != param.shape:
                raise ValidationError(
                    f"shape mismatch for '{name}': checkpoint {arr.shape} vs model {param.shape}")
            param.data = arr.copy()
            param.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.w = self._p("w", ad.glorot_uniform((d_in, d_out), rng))
        self.b = self._p("b", ad.zeros_param((d_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self._p("gamma", Tensor(np.ones(dim), requires_grad=True))
        self.beta = self._p("beta", ad.zeros_param((dim,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Self- or cross-attention; keeps the last attention weights for probes."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.q = self._m("q", Linear(dim, dim, rng))
        self.k = self._m("k", Linear(dim, dim, rng))
        self.v = self._m("v", Linear(dim, dim, rng))
        self.o = self._m("o", Linear(dim, dim, rng))
        self.last_attention: Optional[np.ndarray] = None

    def __call__(self, query_in: Tensor, kv_in: Tensor) -> Tensor:
        b, n, _ = query_in.shape
        m = kv_in.shape[1]
        h, dh = self.heads, self.head_dim

        def split(t: Tensor, length: int) -> Tensor:
            return ad.transpose(ad.reshape(t, (b, length, h, dh)), (0, 2, 1, 3))

        q = split(self.q(query_in), n)
        k = split(self.k(kv_in), m)
        v = split(self.v(kv_in), m)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                          1.0 / math.sqrt(dh))
        attn = ad.softmax(scores)
        self.last_attention = attn.data.copy()
        ctx = ad.matmul(attn, v)
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, self.dim))
        return self.o(merged)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = self._m("fc1", Linear(dim, hidden, rng))
        self.fc2 = self._m("fc2", Linear(hidden, dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Standard pre-norm block: MHSA + residual, MLP + residual."""

    def __init__(self, dim: int, heads: int, ffn_hidden: int,
                 rng: np.random.Generator, dropout: float = 0.0):
        super().__init__()
        self.p = dropout
        self.ln1 = self._m("ln1", LayerNorm(dim))
        self.attn = self._m("attn", MultiHeadAttention(dim, heads, rng))
        self.ln2 = self._m("ln2", LayerNorm(dim))
        self.mlp = self._m("mlp", Mlp(dim, ffn_hidden, rng))

    def __call__(self, x: Tensor, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        h = self.ln1(x)
        a = self.attn(h, h)
        if train and self.p > 0:
            a = ad.dropout(a, self.p, rng, train=True)
        x = ad.add(x, a)
        f = self.mlp(self.ln2(x))
        if train and self.p > 0:
            f = ad.dropout(f, self.p, rng, train=True)
        return ad.add(x, f)


class PatchEmbed(Module):
    """Four stacked conv2d+gelu stages plus a learnable position table."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        channels = cfg.resolved_patch_channels()
        self.strides = tuple(cfg.patch_strides)
        self.channels = channels
        c_in = 1
        for i, (c_out, _) in enumerate(zip(channels, self.strides)):
            self._p(f"conv{i}.w", ad.glorot_uniform((c_out, c_in, 3, 3), rng))
            self._p(f"conv{i}.b", ad.zeros_param((c_out,)))
            c_in = c_out
        side_h, side_w = cfg.token_grid_side()
        self.n_tokens = side_h * side_w
        self.pos = self._p("pos", ad.glorot_uniform((self.n_tokens, cfg.embed_dim), rng))

    def __call__(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        if x.shape[1] != 1:
            raise ValidationError(f"patch embedding expects 1-channel maps, got {x.shape}")
        for i, stride in enumerate(self.strides):
            w = self._params[f"conv{i}.w"]
            bias = self._params[f"conv{i}.b"]
            x = ad.conv2d(x, w, stride=stride, padding=1)
            x = ad.gelu(ad.add(x, ad.reshape(bias, (w.shape[0], 1, 1))))
        d = x.shape[1]
        tokens = ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (b, self.n_tokens, d))
        return ad.pos_embed_add(tokens, self.pos)


class SpatialBlock(Module):
    """Attention block whose FFN is a multi-scale conv module on the token grid."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.embed_dim
        self.p = cfg.dropout
        self.kernels = tuple(cfg.multiscale_kernels)
        self.ln1 = self._m("ln1", LayerNorm(d))
        self.attn = self._m("attn", MultiHeadAttention(d, cfg.heads, rng))
        self.ln2 = self._m("ln2", LayerNorm(d))
        for k in self.kernels:
            self._p(f"conv{k}x{k}.w", ad.glorot_uniform((d, d, k, k), rng))
        self.bias = self._p("conv.bias", ad.zeros_param((d,)))

    def __call__(self, x: Tensor, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        b, n, d = x.shape
        side = math.isqrt(n)
        if side * side != n:
            raise ValidationError(f"spatial block needs a square token grid, got N={n}")
        h = self.ln1(x)
        a = self.attn(h, h)
        if train and self.p > 0:
            a = ad.dropout(a, self.p, rng, train=True)
        x = ad.add(x, a)
        y = self.ln2(x)
        grid = ad.transpose(ad.reshape(y, (b, side, side, d)), (0, 3, 1, 2))
        branches = None
        for k in self.kernels:
            out = ad.conv2d(grid, self._params[f"conv{k}x{k}.w"],
                            stride=1, padding=k // 2)
            branches = out if branches is None else ad.add(branches, out)
        branches = ad.gelu(ad.add(branches, ad.reshape(self.bias, (d, 1, 1))))
        flat = ad.reshape(ad.transpose(branches, (0, 2, 3, 1)), (b, n, d))
        if train and self.p > 0:
            flat = ad.dropout(flat, self.p, rng, train=True)
        return ad.add(x, flat)


class BranchEncoder(Module):
    """Per-feature-type transformer encoder over the band sequence."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.embed_dim
        self.pos = self._p("pos", ad.glorot_uniform((cfg.n_bands, d), rng))
        self.blocks = [
            self._m(f"block{i}", TransformerBlock(d, cfg.heads, cfg.ffn_ratio * d,
                                                  rng, cfg.dropout))
            for i in range(cfg.lego_layers)
        ]

    def __call__(self, x: Tensor, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        x = ad.pos_embed_add(x, self.pos)
        for block in self.blocks:
            x = block(x, train, rng)
        return x


class CrossDecoder(Module):
    """Cross-attention then layer-norm, pointwise FFN, residuals (post-norm)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.embed_dim
        self.attn = self._m("attn", MultiHeadAttention(d, cfg.heads, rng))
        self.ln1 = self._m("ln1", LayerNorm(d))
        self.mlp = self._m("mlp", Mlp(d, cfg.ffn_ratio * d, rng))
        self.ln2 = self._m("ln2", LayerNorm(d))

    def __call__(self, query_in: Tensor, kv: Tensor) -> Tensor:
        x = self.ln1(ad.add(query_in, self.attn(query_in, kv)))
        return self.ln2(ad.add(x, self.mlp(x)))


class LegoFusion(Module):
    """Legoformer: parallel DE/PSD band encoders + cross-attention decoder.

    The decoder's key and value come from the DE branch (the primary
    feature); the query is the PSD branch output, or the sum of both
    branches under ``fusion_query="sum"``.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.fusion_query = cfg.fusion_query
        self.de_encoder = self._m("de_encoder", BranchEncoder(cfg, rng))
        self.psd_encoder = self._m("psd_encoder", BranchEncoder(cfg, rng))
        self.decoder = self._m("decoder", CrossDecoder(cfg, rng))

    def __call__(self, de_tokens: Tensor, psd_tokens: Tensor,
                 train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        if de_tokens.shape != psd_tokens.shape:
            raise ValidationError(
                f"band token shape mismatch: {de_tokens.shape} vs {psd_tokens.shape}")
        e_de = self.de_encoder(de_tokens, train, rng)
        e_psd = self.psd_encoder(psd_tokens, train, rng)
        query = e_psd if self.fusion_query == "psd" else ad.add(e_de, e_psd)
        fused = self.decoder(query, e_de)
        return ad.mean(fused, axis=1)


class TemporalEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.embed_dim
        self.pos = self._p("pos", ad.glorot_uniform((cfg.n_frames, d), rng))
        self.blocks = [
            self._m(f"block{i}", TransformerBlock(d, cfg.heads, cfg.ffn_ratio * d,
                                                  rng, cfg.dropout))
            for i in range(cfg.temporal_layers)
        ]

    def __call__(self, x: Tensor, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        x = ad.pos_embed_add(x, self.pos)
        for block in self.blocks:
            x = block(x, train, rng)
        return ad.mean(x, axis=1)


class _EncoderCore(Module):
    """Shared trunk: spatial encoders (per feature type), fusion, temporal."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.patch_de = self._m("patch_de", PatchEmbed(cfg, rng))
        self.patch_psd = self._m("patch_psd", PatchEmbed(cfg, rng))
        self.spatial_de = [
            self._m(f"spatial_de{i}", SpatialBlock(cfg, rng))
            for i in range(cfg.spatial_blocks)
        ]
        self.spatial_psd = [
            self._m(f"spatial_psd{i}", SpatialBlock(cfg, rng))
            for i in range(cfg.spatial_blocks)
        ]
        self.lego = self._m("lego", LegoFusion(cfg, rng))
        self.temporal = self._m("temporal", TemporalEncoder(cfg, rng))

    def _expect_input(self, x: Tensor, name: str) -> None:
        cfg = self.cfg
        if x.ndim != 5 or x.shape[1:] != (cfg.n_frames, cfg.n_bands, cfg.in_h, cfg.in_w):
            raise ValidationError(
                f"{name} input shape {x.shape} does not match config "
                f"(B, {cfg.n_frames}, {cfg.n_bands}, {cfg.in_h}, {cfg.in_w})")

    def spatial_encode(self, de: Tensor, psd: Tensor, train: bool = False,
                       rng: Optional[np.random.Generator] = None
                       ) -> Tuple[Tensor, Tensor]:
        """(B, T, F, H, W) maps -> (B, T, F, D) pooled tokens per feature type."""
        self._expect_input(de, "DE")
        self._expect_input(psd, "PSD")
        b, t, f, h, w = de.shape
        d = self.cfg.embed_dim

        def branch(x: Tensor, patch: PatchEmbed, blocks: List[SpatialBlock]) -> Tensor:
            maps = ad.reshape(x, (b * t * f, 1, h, w))
            tokens = patch(maps)
            for block in blocks:
                tokens = block(tokens, train, rng)
            pooled = ad.mean(tokens, axis=1)
            return ad.reshape(pooled, (b, t, f, d))

        return (branch(de, self.patch_de, self.spatial_de),
                branch(psd, self.patch_psd, self.spatial_psd))

    def __call__(self, de: Tensor, psd: Tensor, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        de_tokens, psd_tokens = self.spatial_encode(de, psd, train, rng)
        b, t, f, d = de_tokens.shape
        fused = self.lego(ad.reshape(de_tokens, (b * t, f, d)),
                          ad.reshape(psd_tokens, (b * t, f, d)), train, rng)
        seq = ad.reshape(fused, (b, t, d))
        return self.temporal(seq, train, rng)


class EegEncoder(Module):
    """Full matching-arm model: trunk + projection + learnable temperature."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg.validate()
        self.core = self._m("core", _EncoderCore(cfg, rng))
        self.proj = self._m("proj", Linear(cfg.embed_dim, cfg.proj_dim, rng))
        self.log_tau = self._p("log_tau", Tensor(
            np.array([math.log(1.0 / cfg.temperature)]), requires_grad=True))

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int) -> "EegEncoder":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
        return cls(cfg, rng)

    def spatial_encode(self, de: Tensor, psd: Tensor, **kw) -> Tuple[Tensor, Tensor]:
        return self.core.spatial_encode(de, psd, **kw)

    def forward(self, de: Tensor, psd: Tensor, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        feats = self.core(de, psd, train, rng)
        return ad.l2_normalize(self.proj(feats))

    __call__ = forward

    def tau(self) -> float:
        """Current temperature; log_tau stores ln(1/τ)."""
        return float(np.exp(-self.log_tau.data[0]))


class EegClassifier(Module):
    """Ablation arm: the same trunk with a K-way linear head, no text bank."""

    def __init__(self, cfg: ModelConfig, n_classes: int, rng: np.random.Generator):
        super().__init__()
        if n_classes < 2:
            raise ConfigError("classifier head needs at least two classes")
        self.cfg = cfg.validate()
        self.n_classes = n_classes
        self.core = self._m("core", _EncoderCore(cfg, rng))
        self.head = self._m("head", Linear(cfg.embed_dim, n_classes, rng))

    @classmethod
    def build(cls, cfg: ModelConfig, n_classes: int, seed: int) -> "EegClassifier":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
        return cls(cfg, n_classes, rng)

    def forward(self, de: Tensor, psd: Tensor, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.head(self.core(de, psd, train, rng))

    __call__ = forward


def batch_from_samples(samples: Sequence) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """Stack Sample4D objects into (B, T, F, H, W) DE/PSD arrays plus labels."""
    if not samples:
        raise ValidationError("empty sample batch")
    de = np.stack([s.de for s in samples]).astype(np.float64)
    psd = np.stack([s.psd for s in samples]).astype(np.float64)
    labels = [s.label for s in samples]
    return de, psd, labels
