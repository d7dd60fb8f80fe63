"""Encoders, the projection head and frozen feature extraction."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1
FEATURE_SOURCES = ("final_token", "concat_last_4")


class ModelError(ValueError):
    pass


class CheckpointError(ModelError):
    def __init__(self, message, mismatches=()):
        self.mismatches = list(mismatches)
        detail = "".join(f"\n  {m}" for m in self.mismatches)
        super().__init__(message + detail)


@dataclass
class EncoderConfig:
    backbone_kind: str = "vit"
    depth: int = 12
    n_heads: int = 6
    embed_dim: int = 384
    patch_size: int = 16
    input_size: int = 32
    in_chans: int = 1
    mlp_ratio: float = 4.0
    # inputs are standardised as (x - input_mean) / input_std before the backbone
    input_mean: float = 0.0
    input_std: float = 1.0

    def __post_init__(self):
        if self.input_std <= 0:
            raise ModelError("input_std must be positive")
        if self.backbone_kind not in ENCODERS:
            raise ModelError(f"unknown backbone_kind {self.backbone_kind!r}; known: {sorted(ENCODERS)}")
        if self.backbone_kind == "vit":
            if self.embed_dim % self.n_heads:
                raise ModelError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
            if self.input_size % self.patch_size:
                raise ModelError("input_size must be a multiple of patch_size")


@dataclass
class ProjectionHeadConfig:
    hidden_dim: int = 2048
    bottleneck_dim: int = 256
    output_dim: int = 65536
    n_layers: int = 3
    use_weight_norm_last: bool = True
    l2_normalize_bottleneck: bool = True

    def __post_init__(self):
        if self.output_dim < self.bottleneck_dim:
            raise ModelError("output_dim must be >= bottleneck_dim")
        if self.n_layers < 1:
            raise ModelError("n_layers must be >= 1")


@dataclass
class FeatureVector:
    values: np.ndarray  # [N, D]
    source: str

    @property
    def dim(self) -> int:
        return self.values.shape[-1]


# ---------------------------------------------------------------------------
# ViT


class Attention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (d // self.n_heads) ** -0.5
        x = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(x)


class Block(nn.Module):
    def __init__(self, dim, n_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class VisionTransformer(nn.Module):
    """Pre-norm ViT returning the class token.

    Positional embeddings are stored for the configured input size and
    bicubically interpolated for other grids (e.g. 16x16 local views).
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed_dim = cfg.embed_dim
        self.patch_size = cfg.patch_size
        self.patch_embed = nn.Conv2d(cfg.in_chans, cfg.embed_dim, cfg.patch_size, stride=cfg.patch_size)
        grid = cfg.input_size // cfg.patch_size
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + grid * grid, cfg.embed_dim))
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.embed_dim, eps=1e-6)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.apply(_init_weights)

    def interpolate_pos_encoding(self, gh, gw):
        n = self.pos_embed.shape[1] - 1
        grid = int(math.sqrt(n))
        if gh == grid and gw == grid:
            return self.pos_embed
        cls_pos, patch_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        patch_pos = patch_pos.reshape(1, grid, grid, -1).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(gh, gw), mode="bicubic", align_corners=False)
        return torch.cat([cls_pos, patch_pos.permute(0, 2, 3, 1).reshape(1, gh * gw, -1)], dim=1)

    def prepare_tokens(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.in_chans:
            raise ModelError(f"expected [N, {self.cfg.in_chans}, H, W] input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.patch_size or w % self.patch_size:
            raise ModelError(f"input {h}x{w} is not a multiple of patch size {self.patch_size}")
        t = self.patch_embed((x - self.cfg.input_mean) / self.cfg.input_std)
        gh, gw = t.shape[-2:]
        t = t.flatten(2).transpose(1, 2)
        t = torch.cat([self.cls_token.expand(len(t), -1, -1), t], dim=1)
        return t + self.interpolate_pos_encoding(gh, gw)

    def forward(self, x):
        x = self.prepare_tokens(x)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)[:, 0]

    def intermediate_cls(self, x, n=4):
        """Normed class tokens of the last ``n`` blocks, oldest first."""
        if n > len(self.blocks):
            raise ModelError(f"encoder has only {len(self.blocks)} blocks, asked for {n}")
        x = self.prepare_tokens(x)
        out = []
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if len(self.blocks) - i <= n:
                out.append(self.norm(x)[:, 0])
        return out


# ---------------------------------------------------------------------------
# CNN baselines


class ResNetEncoder(nn.Module):
    """torchvision ResNet-50 with a single-channel stem and no classifier."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        from torchvision.models import resnet50

        self.cfg = cfg
        net = resnet50(weights=None)
        net.conv1 = nn.Conv2d(cfg.in_chans, 64, kernel_size=7, stride=2, padding=3, bias=False)
        net.fc = nn.Identity()
        self.net = net
        self.embed_dim = 2048

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.in_chans:
            raise ModelError(f"expected [N, {self.cfg.in_chans}, H, W] input, got {tuple(x.shape)}")
        return self.net((x - self.cfg.input_mean) / self.cfg.input_std)


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.out_channels = cout
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip = (nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
                     if stride != 1 or cin != cout else nn.Identity())

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(y)) + self.skip(x))


class SmallResNet(nn.Module):
    """Four-stage residual CNN for desk-scale runs; width = embed_dim / 8.

    The embedding concatenates global average and global max pooling of the
    last stage (embed_dim / 2 channels each), so small bright details survive.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        w = max(cfg.embed_dim // 8, 4)
        if cfg.embed_dim % 2:
            raise ModelError("cnn-small needs an even embed_dim")
        widths = [w, 2 * w, 4 * w, cfg.embed_dim // 2]
        self.stem = nn.Sequential(nn.Conv2d(cfg.in_chans, w, 3, 1, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU())
        layers, cin = [], w
        for i, cout in enumerate(widths):
            layers.append(_ResBlock(cin, cout, 1 if i == 0 else 2))
            cin = cout
        self.layers = nn.Sequential(*layers)
        self.embed_dim = cfg.embed_dim

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.in_chans:
            raise ModelError(f"expected [N, {self.cfg.in_chans}, H, W] input, got {tuple(x.shape)}")
        x = (x - self.cfg.input_mean) / self.cfg.input_std
        h = self.layers(self.stem(x))
        return torch.cat([h.mean((2, 3)), h.amax((2, 3))], 1)

    @property
    def intermediate_dim(self) -> int:
        return 2 * sum(layer.out_channels for layer in self.layers)

    def intermediate_cls(self, x, n=4):
        """Average and max pooled outputs of the last ``n`` stages, oldest first."""
        if n > len(self.layers):
            raise ModelError(f"encoder has only {len(self.layers)} stages, asked for {n}")
        x = (x - self.cfg.input_mean) / self.cfg.input_std
        h = self.stem(x)
        out = []
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if len(self.layers) - i <= n:
                out.append(torch.cat([h.mean((2, 3)), h.amax((2, 3))], 1))
        return out


ENCODERS = {
    "vit": VisionTransformer,
    "cnn-baseline": ResNetEncoder,
    "cnn-small": SmallResNet,
}


def register_encoder(name, builder):
    """Make ``builder(EncoderConfig) -> nn.Module`` available as ``backbone_kind``.

    The module must expose ``embed_dim`` and map ``[N, C, H, W]`` to ``[N, embed_dim]``.
    """
    ENCODERS[name] = builder


# ---------------------------------------------------------------------------
# projection head


class ProjectionHead(nn.Module):
    """MLP -> bottleneck -> l2 normalisation -> weight-normalised output layer.

    The output layer stores direction vectors ``last_v``; with weight
    normalisation on, each output unit uses ``last_v[k] / ||last_v[k]||``
    (gain fixed at 1).
    """

    def __init__(self, in_dim: int, cfg: ProjectionHeadConfig):
        super().__init__()
        self.cfg = cfg
        self.in_dim = in_dim
        if cfg.n_layers == 1:
            self.mlp = nn.Linear(in_dim, cfg.bottleneck_dim)
        else:
            layers = [nn.Linear(in_dim, cfg.hidden_dim), nn.GELU()]
            for _ in range(cfg.n_layers - 2):
                layers += [nn.Linear(cfg.hidden_dim, cfg.hidden_dim), nn.GELU()]
            layers.append(nn.Linear(cfg.hidden_dim, cfg.bottleneck_dim))
            self.mlp = nn.Sequential(*layers)
        self.apply(_init_weights)
        v = torch.empty(cfg.output_dim, cfg.bottleneck_dim)
        nn.init.trunc_normal_(v, std=0.02)
        self.last_v = nn.Parameter(v)

    def last_weight(self):
        if self.cfg.use_weight_norm_last:
            return self.last_v / self.last_v.norm(dim=1, keepdim=True)
        return self.last_v

    def bottleneck(self, x):
        x = self.mlp(x)
        if self.cfg.l2_normalize_bottleneck:
            x = F.normalize(x, dim=-1, p=2)
        return x

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ModelError(f"head expects {self.in_dim}-dim features, got {x.shape[-1]}")
        return F.linear(self.bottleneck(x), self.last_weight())


class Branch(nn.Module):
    """Encoder + projection head; runs views grouped by resolution."""

    def __init__(self, encoder: nn.Module, head: ProjectionHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, views):
        if isinstance(views, torch.Tensor):
            return self.head(self.encoder(views))
        feats, start = [], 0
        while start < len(views):
            end = start
            while end < len(views) and views[end].shape[-2:] == views[start].shape[-2:]:
                end += 1
            feats.append(self.encoder(torch.cat(list(views[start:end]))))
            start = end
        return self.head(torch.cat(feats))


# ---------------------------------------------------------------------------
# operations


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    return ENCODERS[cfg.backbone_kind](cfg)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def encode(encoder: nn.Module, views: torch.Tensor) -> torch.Tensor:
    """Features ``[N, D]`` for a batch ``[N, C, H, W]``."""
    views = torch.as_tensor(views, dtype=torch.float32)
    if views.ndim == 3:
        views = views[:, None]
    return encoder(views)


def project(head: ProjectionHead, features: torch.Tensor) -> torch.Tensor:
    return head(torch.as_tensor(features, dtype=torch.float32))


def freeze(encoder: nn.Module) -> nn.Module:
    """Mark an encoder as frozen: no gradients, inference mode."""
    for p in encoder.parameters():
        p.requires_grad_(False)
    encoder.eval()
    encoder.frozen = True
    return encoder


def is_frozen(encoder: nn.Module) -> bool:
    return bool(getattr(encoder, "frozen", False)) and not any(p.requires_grad for p in encoder.parameters())


def feature_dim(encoder: nn.Module, source: str = "final_token") -> int:
    if source == "concat_last_4":
        return getattr(encoder, "intermediate_dim", 4 * encoder.embed_dim)
    return encoder.embed_dim


def features_tensor(encoder: nn.Module, x: torch.Tensor, source: str = "final_token") -> torch.Tensor:
    if source == "final_token":
        return encoder(x)
    if source == "concat_last_4":
        if not hasattr(encoder, "intermediate_cls"):
            raise ModelError(f"{type(encoder).__name__} does not expose intermediate blocks")
        return torch.cat(encoder.intermediate_cls(x, 4), dim=-1)
    raise ModelError(f"unknown feature source {source!r}; expected one of {FEATURE_SOURCES}")


def extract_feature(encoder: nn.Module, patches, source: str = "final_token",
                    batch_size: int = 256) -> FeatureVector:
    """Features of ``patches`` (``[N, H, W]`` or ``[N, 1, H, W]``) from a frozen encoder."""
    if not is_frozen(encoder):
        raise ModelError("extract_feature requires a frozen encoder; call freeze() first")
    x = torch.as_tensor(np.asarray(patches), dtype=torch.float32)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(features_tensor(encoder, x[i:i + batch_size], source))
    values = torch.cat(out).numpy() if out else np.zeros((0, feature_dim(encoder, source)), np.float32)
    return FeatureVector(values, source)


def init_parameters(enc_cfg: EncoderConfig, head_cfg: ProjectionHeadConfig | None = None,
                    checkpoint: str | Path | None = None, seed: int = 0):
    """Build (primary, auxiliary) branches, or a bare encoder when ``head_cfg`` is None.

    Without a checkpoint the weights are truncated-normal (std 0.02) from
    ``seed``; the auxiliary branch starts as an exact copy of the primary.
    A checkpoint may hold a full branch or only encoder tensors.
    """
    torch.manual_seed(seed)
    encoder = build_encoder(enc_cfg)
    if head_cfg is None:
        if checkpoint is not None:
            load_into(encoder, checkpoint, prefix="encoder.")
        return encoder
    primary = Branch(encoder, ProjectionHead(encoder.embed_dim, head_cfg))
    if checkpoint is not None:
        load_into(primary, checkpoint)
    auxiliary = copy.deepcopy(primary)
    return primary, auxiliary


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, module: nn.Module, config: dict, extras: dict | None = None, kind: str = "branch"):
    """Named-tensor container with the architecture config embedded."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "tensors": {k: v.detach().clone() for k, v in module.state_dict().items()},
        "extras": extras or {},
    }, path)
    return path


def read_checkpoint(path) -> dict:
    obj = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(obj, dict) or obj.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    return obj


def load_into(module: nn.Module, checkpoint, prefix: str = "") -> nn.Module:
    """Copy checkpoint tensors into ``module`` verbatim; names and shapes must match.

    ``prefix`` selects a sub-tree of the checkpoint (e.g. ``"encoder."``) and is
    stripped; a checkpoint saved from the sub-module itself also works.
    """
    obj = checkpoint if isinstance(checkpoint, dict) else read_checkpoint(checkpoint)
    tensors = obj["tensors"]
    if prefix and any(k.startswith(prefix) for k in tensors):
        tensors = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    own = module.state_dict()
    problems = []
    for name in sorted(set(own) | set(tensors)):
        if name not in tensors:
            problems.append(f"missing from checkpoint: {name} {tuple(own[name].shape)}")
        elif name not in own:
            problems.append(f"unexpected in checkpoint: {name} {tuple(tensors[name].shape)}")
        elif own[name].shape != tensors[name].shape:
            problems.append(f"shape mismatch: {name} model {tuple(own[name].shape)} "
                            f"vs checkpoint {tuple(tensors[name].shape)}")
    if problems:
        raise CheckpointError("incompatible checkpoint", problems)
    module.load_state_dict(tensors, strict=True)
    return module


def encoder_config_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)
