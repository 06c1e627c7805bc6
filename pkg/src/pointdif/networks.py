"""Trainable components: patch embedder, positional MLP, transformer encoder,
condition aggregation (CANet), time embedding and the gated point denoiser.

Shapes follow the batch-first convention used throughout the package:
clouds ``(B, n, 3)``, patches ``(B, s, k, 3)``, tokens ``(B, s, D)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

GUIDANCE_MODES = ("pcnet", "concat", "cross_attention")


@dataclass(frozen=True)
class ModelDims:
    D: int = 384
    heads: int = 6
    blocks: int = 12
    cond_dim: int = 768
    time_dim: int = 128
    pcnet_dims: tuple = (3, 128, 256, 512, 256, 128)
    embed_hidden: tuple = (128, 256)
    pos_hidden: int = 128
    canet_hidden: int = 512
    mlp_ratio: int = 4
    guidance: str = "pcnet"

    def __post_init__(self):
        if self.D % self.heads:
            raise ValueError(f"D={self.D} is not divisible by heads={self.heads}")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if self.guidance not in GUIDANCE_MODES:
            raise ValueError(f"unknown guidance mode {self.guidance!r}; expected one of {GUIDANCE_MODES}")
        object.__setattr__(self, "pcnet_dims", tuple(int(d) for d in self.pcnet_dims))
        object.__setattr__(self, "embed_hidden", tuple(int(d) for d in self.embed_hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pcnet_dims"] = list(self.pcnet_dims)
        d["embed_hidden"] = list(self.embed_hidden)
        return d


PAPER_DIMS = ModelDims()
DESK_DIMS = ModelDims(D=64, heads=4, blocks=4, cond_dim=128, time_dim=128,
                      pcnet_dims=(3, 32, 64, 128, 64, 32), embed_hidden=(32, 64),
                      pos_hidden=64, canet_hidden=128)


class PatchEmbed(nn.Module):
    """Mini-PointNet: shared per-point layers, max over the patch, then a projection to D."""

    def __init__(self, D: int, hidden=(128, 256)):
        super().__init__()
        h1, h2 = hidden
        self.fc1 = nn.Linear(3, h1)
        self.fc2 = nn.Linear(h1, h2)
        self.out = nn.Linear(h2, D)

    def forward(self, patches):
        if patches.shape[-1] != 3:
            raise ValueError(f"patches must end in a coordinate axis of 3, got {tuple(patches.shape)}")
        feat = self.fc2(F.relu(self.fc1(patches)))
        return self.out(feat.max(dim=-2).values)


class PosEmbed(nn.Module):
    def __init__(self, D: int, hidden: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(3, hidden)
        self.fc2 = nn.Linear(hidden, D)

    def forward(self, centers):
        return self.fc2(F.gelu(self.fc1(centers)))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(C // self.heads)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, N, C))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(),
                                 nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TransformerEncoder(nn.Module):
    """Concatenate token and position, project to D, then pre-norm transformer blocks."""

    def __init__(self, D: int, heads: int, blocks: int, mlp_ratio: int = 4):
        super().__init__()
        self.inp = nn.Linear(2 * D, D)
        self.blocks = nn.ModuleList(Block(D, heads, mlp_ratio) for _ in range(blocks))
        self.norm = nn.LayerNorm(D)

    def forward(self, tokens, pos):
        if tokens.shape[-2] == 0:
            raise ValueError("encoder needs at least one visible patch")
        x = self.inp(torch.cat([tokens, pos], dim=-1))
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class CANet(nn.Module):
    """Pool-concat-pool aggregation of per-patch features into one condition vector."""

    def __init__(self, D: int, hidden: int, cond_dim: int):
        super().__init__()
        self.a1 = nn.Linear(D, hidden)
        self.a2 = nn.Linear(hidden, hidden)
        self.a3 = nn.Linear(2 * hidden, hidden)
        self.a4 = nn.Linear(hidden, cond_dim)

    def forward(self, tokens):
        f = self.a2(F.relu(self.a1(tokens)))
        pooled = f.max(dim=-2, keepdim=True).values
        f = torch.cat([f, pooled.expand_as(f)], dim=-1)
        f = self.a4(F.relu(self.a3(f)))
        return f.max(dim=-2).values


class TimeEmbed(nn.Module):
    def __init__(self, dim: int = 128):
        super().__init__()
        half = dim // 2
        # geometric ladder of angular frequencies from 1 down to 1e-4
        freqs = torch.exp(torch.linspace(0.0, math.log(1e-4), half, dtype=torch.float64))
        self.register_buffer("freqs", freqs, persistent=False)
        self.proj = nn.Linear(dim, dim)

    def features(self, t):
        t = torch.as_tensor(t, dtype=torch.float64, device=self.freqs.device)
        arg = t[..., None] * self.freqs
        return torch.cat([arg.sin(), arg.cos()], dim=-1)

    def forward(self, t):
        return self.proj(self.features(t).to(self.proj.weight.dtype))


class PCNet(nn.Module):
    """Gated point layer: ``sigmoid(W_r y + b_r) * (W_h h + b_h) + W_b y``."""

    def __init__(self, d_in: int, d_out: int, d_y: int):
        super().__init__()
        self.lin_h = nn.Linear(d_in, d_out)
        self.lin_b = nn.Linear(d_y, d_out, bias=False)
        self.lin_r = nn.Linear(d_y, d_out)

    def forward(self, h, y):
        # y: (..., d_y) per cloud; broadcast over the point axis of h (..., n, d_in)
        y = y.unsqueeze(-2)
        gate = torch.sigmoid(self.lin_r(y))
        return gate * self.lin_h(h) + self.lin_b(y)


class ConcatLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int, d_y: int):
        super().__init__()
        self.lin = nn.Linear(d_in + d_y, d_out)

    def forward(self, h, y):
        y = y.unsqueeze(-2).expand(*h.shape[:-1], y.shape[-1])
        return self.lin(torch.cat([h, y], dim=-1))


class CrossAttentionLayer(nn.Module):
    """Per-point affine followed by attention from points to a few condition tokens."""

    n_ctx = 4

    def __init__(self, d_in: int, d_out: int, d_y: int):
        super().__init__()
        self.lin = nn.Linear(d_in, d_out)
        self.ctx = nn.Linear(d_y, self.n_ctx * d_out)
        self.q = nn.Linear(d_out, d_out)
        self.k = nn.Linear(d_out, d_out)
        self.v = nn.Linear(d_out, d_out)

    def forward(self, h, y):
        h = self.lin(h)
        ctx = self.ctx(y).reshape(*y.shape[:-1], self.n_ctx, h.shape[-1])
        attn = (self.q(h) @ self.k(ctx).transpose(-2, -1)) / math.sqrt(h.shape[-1])
        return h + attn.softmax(dim=-1) @ self.v(ctx)


_LAYERS = {"pcnet": PCNet, "concat": ConcatLayer, "cross_attention": CrossAttentionLayer}


class PointDenoiser(nn.Module):
    """Six guided layers mapping noisy points to predicted noise, one point at a time."""

    def __init__(self, dims, d_y: int, mode: str = "pcnet", out_scale: float = 1e-2):
        super().__init__()
        if mode not in _LAYERS:
            raise ValueError(f"unknown guidance mode {mode!r}; expected one of {GUIDANCE_MODES}")
        self.mode = mode
        widths = list(dims) + [3]
        self.layers = nn.ModuleList(
            _LAYERS[mode](a, b, d_y) for a, b in zip(widths[:-1], widths[1:]))
        # near-zero output at init keeps the initial loss near E[eps^2] = 1
        with torch.no_grad():
            for p in self.layers[-1].parameters():
                p.mul_(out_scale)

    def forward(self, x, y):
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h, y)
            if i < len(self.layers) - 1:
                h = F.leaky_relu(h, 0.1)
        return h


def guidance_variant(mode: str, dims: ModelDims) -> PointDenoiser:
    return PointDenoiser(dims.pcnet_dims, dims.cond_dim + dims.time_dim, mode)


class PointDif(nn.Module):
    """Full pre-training model: encoder side (embed, pos, transformer), CANet and denoiser."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        self.embed = PatchEmbed(dims.D, dims.embed_hidden)
        self.pos = PosEmbed(dims.D, dims.pos_hidden)
        self.encoder = TransformerEncoder(dims.D, dims.heads, dims.blocks, dims.mlp_ratio)
        self.mask_token = nn.Parameter(torch.zeros(dims.D))
        self.canet = CANet(dims.D, dims.canet_hidden, dims.cond_dim)
        self.time_embed = TimeEmbed(dims.time_dim)
        self.denoiser = guidance_variant(dims.guidance, dims)
        nn.init.normal_(self.mask_token, std=0.02)

    def encode(self, centers, patches, vis_idx):
        """Latents of the visible patches: ``(B, g, D)`` plus their positional embeddings."""
        tokens = self.embed(patches)
        pos = self.pos(centers)
        vis_tok = _take(tokens, vis_idx)
        vis_pos = _take(pos, vis_idx)
        return self.encoder(vis_tok, vis_pos), pos

    def condition(self, centers, patches, vis_idx, mask_idx):
        latents, pos = self.encode(centers, patches, vis_idx)
        return self.aggregate(latents, _take(pos, vis_idx), _take(pos, mask_idx))

    def aggregate(self, vis_latents, vis_pos, masked_pos):
        masked = self.mask_token.expand_as(masked_pos) + masked_pos
        return self.canet(torch.cat([vis_latents + vis_pos, masked], dim=-2))

    def guidance(self, c, t):
        return torch.cat([c, self.time_embed(t)], dim=-1)

    def denoise(self, x_t, c, t):
        return self.denoiser(x_t, self.guidance(c, t))


def _take(x, idx):
    """Gather rows ``idx`` (B, m) from ``x`` (B, s, D)."""
    idx = torch.as_tensor(idx, dtype=torch.long, device=x.device)
    return torch.gather(x, -2, idx.unsqueeze(-1).expand(*idx.shape, x.shape[-1]))


def param_groups(model: PointDif) -> dict:
    """Named parameter groups used for gradient-flow checks."""
    return {
        "denoiser": list(model.denoiser.parameters()) + list(model.time_embed.parameters()),
        "canet": list(model.canet.parameters()),
        "encoder": list(model.encoder.parameters()),
        "embed": list(model.embed.parameters()),
        "pos": list(model.pos.parameters()),
        "mask_token": [model.mask_token],
    }
