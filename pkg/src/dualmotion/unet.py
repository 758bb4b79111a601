"""Miniature 3D U-Net denoiser: per-frame convolutions, spatial transformers and temporal transformers.

Every linear sublayer inside a transformer has a stable dotted path such as
``down.1.0.spatial.self_attn.q`` and can carry one low-rank adapter.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import ArchiveError, read_archive, write_archive
from .lora import AdaptableLinear
from .text import CONTEXT_LENGTH, NULL_ID, VOCAB_SIZE, PromptSpec

LAYER_CLASSES = ("spatial_self_attn", "spatial_cross_attn", "spatial_ff",
                 "temporal_self_attn", "temporal_ff", "other")

_CLASS_PATTERNS = [
    (re.compile(r"(^|\.)spatial\.self_attn\.[qkvo]$"), "spatial_self_attn"),
    (re.compile(r"(^|\.)spatial\.cross_attn\.[qkvo]$"), "spatial_cross_attn"),
    (re.compile(r"(^|\.)spatial\.ff\.fc[12]$"), "spatial_ff"),
    (re.compile(r"(^|\.)temporal\.self_attn\.[qkvo]$"), "temporal_self_attn"),
    (re.compile(r"(^|\.)temporal\.ff\.fc[12]$"), "temporal_ff"),
]


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    # per level: whether blocks carry a spatial / temporal transformer
    spatial_attention: tuple[bool, ...] = (False, True, True)
    temporal_attention: tuple[bool, ...] = (True, True, True)
    num_res_blocks: int = 1
    attention_head_dim: int = 16
    num_frames: int = 8
    image_size: int = 32
    in_channels: int = 3
    text_embed_dim: int = 32
    vocab_size: int = VOCAB_SIZE
    context_length: int = CONTEXT_LENGTH
    ff_mult: int = 2
    mid_attention: bool = True
    # space-to-depth factor applied before the first convolution
    patch_size: int = 2
    temporal_position_bias: bool = True

    def __post_init__(self):
        levels = len(self.channel_multipliers)
        if levels < 1 or self.base_channels < 1 or any(m < 1 for m in self.channel_multipliers):
            raise ValueError("need at least one level and positive channel counts")
        if len(self.spatial_attention) != levels or len(self.temporal_attention) != levels:
            raise ValueError("attention flags need one entry per level")
        if self.num_res_blocks < 1 or self.num_frames < 1 or self.in_channels < 1:
            raise ValueError("num_res_blocks, num_frames and in_channels must be positive")
        if self.patch_size < 1 or self.image_size % (self.patch_size * 2 ** (levels - 1)):
            raise ValueError("image_size must be divisible by patch_size * 2^(levels-1)")
        if self.vocab_size <= NULL_ID:
            raise ValueError("vocab too small to hold the null token")
        for m in self.channel_multipliers:
            if (self.base_channels * m) % self.attention_head_dim:
                raise ValueError("channels must be divisible by attention_head_dim")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def micro_config(**overrides) -> UNetConfig:
    """Smallest useful config: 1 level, 1 block, 8x8, 2 frames."""
    base = dict(base_channels=8, channel_multipliers=(1,), spatial_attention=(True,),
                temporal_attention=(True,), attention_head_dim=4, num_frames=2, image_size=8,
                text_embed_dim=8, mid_attention=False)
    base.update(overrides)
    return UNetConfig(**base)


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int, dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(dtype)


class Attention(nn.Module):
    def __init__(self, dim: int, context_dim: int | None, head_dim: int):
        super().__init__()
        self.heads = max(dim // head_dim, 1)
        self.q = AdaptableLinear(dim, dim, bias=False)
        self.k = AdaptableLinear(context_dim or dim, dim, bias=False)
        self.v = AdaptableLinear(context_dim or dim, dim, bias=False)
        self.o = AdaptableLinear(dim, dim)

    def forward(self, x, context=None, bias=None):
        ctx = x if context is None else context
        n, lq, d = x.shape
        h = self.heads
        q = self.q(x).reshape(n, lq, h, d // h).transpose(1, 2)
        k = self.k(ctx).reshape(n, ctx.shape[1], h, d // h).transpose(1, 2)
        v = self.v(ctx).reshape(n, ctx.shape[1], h, d // h).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) * (d // h) ** -0.5
        if bias is not None:
            logits = logits + bias
        w = torch.softmax(logits, dim=-1)
        out = (w @ v).transpose(1, 2).reshape(n, lq, d)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int):
        super().__init__()
        self.fc1 = AdaptableLinear(dim, dim * mult)
        self.fc2 = AdaptableLinear(dim * mult, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SpatialTransformer(nn.Module):
    """Self-attention over the h*w positions of each frame, then cross-attention to the prompt."""

    def __init__(self, ch: int, context_dim: int, head_dim: int, ff_mult: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.proj_in = AdaptableLinear(ch, ch)
        self.norm1 = nn.LayerNorm(ch)
        self.self_attn = Attention(ch, None, head_dim)
        self.norm2 = nn.LayerNorm(ch)
        self.cross_attn = Attention(ch, context_dim, head_dim)
        self.norm3 = nn.LayerNorm(ch)
        self.ff = FeedForward(ch, ff_mult)
        self.proj_out = AdaptableLinear(ch, ch)

    def forward(self, x, context, frames: int):
        bf, c, hh, ww = x.shape
        h = self.norm(x).permute(0, 2, 3, 1).reshape(bf, hh * ww, c)
        h = self.proj_in(h)
        h = h + self.self_attn(self.norm1(h))
        ctx = context.repeat_interleave(frames, dim=0)
        h = h + self.cross_attn(self.norm2(h), ctx)
        h = h + self.ff(self.norm3(h))
        h = self.proj_out(h)
        return x + h.reshape(bf, hh, ww, c).permute(0, 3, 1, 2)


class TemporalTransformer(nn.Module):
    """Self-attention along the frame axis at every pixel location; output projection starts at zero."""

    def __init__(self, ch: int, head_dim: int, ff_mult: int, max_frames: int = 0):
        super().__init__()
        self.norm = nn.LayerNorm(ch)
        self.proj_in = AdaptableLinear(ch, ch)
        self.norm1 = nn.LayerNorm(ch)
        self.self_attn = Attention(ch, None, head_dim)
        # learned per-head bias on frame offsets, clamped to +-(max_frames - 1); 0 disables it
        self.max_frames = max_frames
        self.rel_bias = nn.Parameter(torch.zeros(self.self_attn.heads, 2 * max_frames - 1)) if max_frames else None
        self.norm2 = nn.LayerNorm(ch)
        self.ff = FeedForward(ch, ff_mult)
        self.proj_out = AdaptableLinear(ch, ch)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)

    def forward(self, x, frames: int):
        bf, c, hh, ww = x.shape
        b = bf // frames
        h = x.reshape(b, frames, c, hh, ww).permute(0, 3, 4, 1, 2).reshape(b * hh * ww, frames, c)
        h = self.proj_in(self.norm(h))
        pos = timestep_embedding(torch.arange(frames), c, h.dtype)
        h = h + pos[None]
        bias = None
        if self.rel_bias is not None:
            idx = torch.arange(frames)
            off = (idx[None, :] - idx[:, None]).clamp(1 - self.max_frames, self.max_frames - 1)
            bias = self.rel_bias[:, off + self.max_frames - 1].to(h.dtype)
        h = h + self.self_attn(self.norm1(h), bias=bias)
        h = h + self.ff(self.norm2(h))
        h = self.proj_out(h)
        h = h.reshape(b, hh, ww, frames, c).permute(0, 3, 4, 1, 2).reshape(bf, c, hh, ww)
        return x + h


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = AdaptableLinear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Block(nn.Module):
    def __init__(self, cin, cout, temb_dim, cfg: UNetConfig, spatial: bool, temporal: bool):
        super().__init__()
        self.res = ResBlock(cin, cout, temb_dim)
        self.spatial = (SpatialTransformer(cout, cfg.text_embed_dim, cfg.attention_head_dim, cfg.ff_mult)
                        if spatial else None)
        self.temporal = (TemporalTransformer(cout, cfg.attention_head_dim, cfg.ff_mult,
                                             cfg.num_frames if cfg.temporal_position_bias else 0)
                         if temporal else None)

    def forward(self, x, temb, context, frames):
        x = self.res(x, temb)
        if self.spatial is not None:
            x = self.spatial(x, context, frames)
        if self.temporal is not None:
            x = self.temporal(x, frames)
        return x


class TinyUNet3D(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = cfg = config
        C = cfg.base_channels
        chans = [C * m for m in cfg.channel_multipliers]
        temb_dim = 4 * C
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.text_embed_dim)
        self.position_embedding = nn.Parameter(torch.randn(cfg.context_length, cfg.text_embed_dim) * 0.02)
        self.time_mlp = nn.ModuleDict({"fc1": AdaptableLinear(C, temb_dim), "fc2": AdaptableLinear(temb_dim, temb_dim)})
        pix = cfg.in_channels * cfg.patch_size ** 2
        self.conv_in = nn.Conv2d(pix, C, 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        cin = C
        for lvl, ch in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(Block(cin, ch, temb_dim, cfg, cfg.spatial_attention[lvl], cfg.temporal_attention[lvl]))
                cin = ch
            self.down.append(blocks)
            last = lvl == len(chans) - 1
            self.downsample.append(nn.Identity() if last else nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid = Block(cin, cin, temb_dim, cfg, cfg.mid_attention, cfg.mid_attention)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for lvl in reversed(range(len(chans))):
            ch = chans[lvl]
            blocks = nn.ModuleList()
            for j in range(cfg.num_res_blocks):
                skip = ch if j == 0 else 0
                blocks.append(Block(cin + skip, ch, temb_dim, cfg, cfg.spatial_attention[lvl], cfg.temporal_attention[lvl]))
                cin = ch
            self.up.append(blocks)
            self.upsample.append(nn.Conv2d(ch, chans[lvl - 1], 3, padding=1) if lvl > 0 else nn.Identity())
            if lvl > 0:
                cin = chans[lvl - 1]
        self.norm_out = nn.GroupNorm(_groups(cin), cin)
        self.conv_out = nn.Conv2d(cin, pix, 3, padding=1)
        # eps = gate(t) * z_t + residual; with conv_out at zero the fresh model is the
        # trivial high-noise predictor, so the network only learns a bounded residual
        self.skip_gate = nn.Linear(temb_dim, 1)
        nn.init.zeros_(self.skip_gate.weight)
        nn.init.zeros_(self.skip_gate.bias)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        self._layers = self._index_layers()

    # -- layer registry -------------------------------------------------------------
    def _index_layers(self) -> dict[str, AdaptableLinear]:
        return {name: m for name, m in self.named_modules() if isinstance(m, AdaptableLinear)}

    def layer_classes(self) -> dict[str, str]:
        out = {}
        for path in self._layers:
            cls = "other"
            for pattern, name in _CLASS_PATTERNS:
                if pattern.search(path):
                    cls = name
                    break
            out[path] = cls
        return out

    def enumerate_layers(self) -> dict[str, list[str]]:
        """Injectable linear paths partitioned by layer class."""
        parts = {c: [] for c in LAYER_CLASSES}
        for path, cls in self.layer_classes().items():
            parts[cls].append(path)
        return parts

    def get_layer(self, path: str) -> AdaptableLinear:
        try:
            return self._layers[path]
        except KeyError:
            raise KeyError(f"no injectable layer at {path!r}") from None

    # -- text -----------------------------------------------------------------------
    def encode_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError("token id outside vocabulary")
        L = tokens.shape[-1]
        return self.token_embedding(tokens) + self.position_embedding[:L]

    def encode_prompt(self, prompt: PromptSpec) -> torch.Tensor:
        """(num_tokens, text_embed_dim) embeddings for cross-attention."""
        return self.encode_tokens(torch.tensor(prompt.tokens, dtype=torch.long))

    # -- denoiser -------------------------------------------------------------------
    def forward(self, z_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        """Predict the noise in ``z_t`` (b, f, h, w, c) at step ``t`` given prompt embeddings (b, L, D)."""
        if z_t.dim() != 5 or z_t.shape[-1] != self.config.in_channels:
            raise ValueError(f"expected (b, f, h, w, {self.config.in_channels}), got {tuple(z_t.shape)}")
        b, f, hh, ww, c = z_t.shape
        p = self.config.patch_size
        if hh % (p * 2 ** (len(self.config.channel_multipliers) - 1)) or ww != hh:
            raise ValueError(f"spatial size {hh}x{ww} incompatible with model depth")
        if cond.dim() == 2:
            cond = cond.unsqueeze(0).expand(b, -1, -1)
        if cond.shape[0] != b:
            raise ValueError("conditioning batch does not match input batch")
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(b)
        temb = timestep_embedding(t.repeat_interleave(f), self.config.base_channels, z_t.dtype)
        temb = self.time_mlp["fc2"](F.silu(self.time_mlp["fc1"](temb)))

        x = z_t.permute(0, 1, 4, 2, 3).reshape(b * f, c, hh, ww)
        if p > 1:
            x = F.pixel_unshuffle(x, p)
        x = self.conv_in(x)
        skips = []
        for blocks, down in zip(self.down, self.downsample):
            for blk in blocks:
                x = blk(x, temb, cond, f)
            skips.append(x)
            x = down(x)
        x = self.mid(x, temb, cond, f)
        for blocks, up in zip(self.up, self.upsample):
            x = torch.cat([x, skips.pop()], dim=1)
            for blk in blocks:
                x = blk(x, temb, cond, f)
            if not isinstance(up, nn.Identity):
                x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
        x = self.conv_out(F.silu(self.norm_out(x)))
        if p > 1:
            x = F.pixel_shuffle(x, p)
        gate = torch.sigmoid(self.skip_gate(F.silu(temb))).reshape(b, f, 1, 1, 1)
        return x.reshape(b, f, c, hh, ww).permute(0, 1, 3, 4, 2) + gate * z_t

    def denoise(self, z_t, t, cond):
        return self(z_t, t, cond)

    def parameter_vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])


def build_unet(config: UNetConfig, seed: int = 0, dtype=torch.float32) -> TinyUNet3D:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TinyUNet3D(config)
    return model.to(dtype)


def save_checkpoint(model: TinyUNet3D, path: str | Path, extra: dict | None = None) -> Path:
    header = {"kind": "checkpoint", "config": model.config.to_dict(), "meta": extra or {}}
    tensors = {k: v.detach().cpu().float().numpy() for k, v in model.state_dict().items()}
    return write_archive(path, header, tensors)


def load_checkpoint(path: str | Path) -> TinyUNet3D:
    header, tensors = read_archive(path)
    if header.get("kind") != "checkpoint":
        raise ArchiveError(f"{path}: not a model checkpoint")
    model = TinyUNet3D(UNetConfig.from_dict(header["config"]))
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    model.load_state_dict(state, strict=True)
    model.checkpoint_meta = header.get("meta", {})
    return model
