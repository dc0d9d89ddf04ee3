"""Toy pixel-space diffusion U-Net with addressable, hookable self-attention layers.

The network follows the usual down / mid / up layout. Every self-attention
layer carries a stable :class:`LayerId` and calls an optional per-pass hook
that may replace the (q, k, v) it is about to attend with; cross-attention
layers (conditioning tokens as K/V) are never hooked. Model parameters are
immutable after :func:`build_model`, so concurrent forward passes over shared
weights are safe; hooks are per-call values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
from torch import nn

from .numerics import Tensor, _softmax_stable, require_finite

SECTIONS = ("down", "mid", "up")


@dataclass(frozen=True)
class BlockAddress:
    """Position of a block: section name and forward-order index within it."""

    section: str
    block_index: int

    def __post_init__(self):
        if self.section not in SECTIONS:
            raise ValueError(f"unknown section {self.section!r}")
        if self.block_index < 0:
            raise ValueError("block_index must be nonnegative")


@dataclass(frozen=True)
class LayerId:
    """Identity of one self-attention layer in forward-pass order."""

    ordinal: int
    address: BlockAddress
    resolution: int


@dataclass(frozen=True)
class Condition:
    """Toy stand-in for a text prompt: a content category plus optional style."""

    content_id: Optional[int] = None
    style_id: Optional[int] = None
    is_null: bool = False

    def __post_init__(self):
        if self.is_null:
            if self.content_id is not None or self.style_id is not None:
                raise ValueError("null condition cannot carry content/style ids")
        elif self.content_id is None:
            raise ValueError("non-null condition requires a content_id")


NULL_CONDITION = Condition(is_null=True)

# Hook contract: called once per self-attention layer per forward pass with the
# layer's LayerId and its computed q/k/v ([n_tokens, channels] each, batch must
# be 1). Return None to leave the layer untouched, or a replacement (q, k, v)
# triple; q's row count must be preserved, k/v row counts may change together.
AttentionHook = Callable[[LayerId, Tensor, Tensor, Tensor], Optional[tuple]]


@dataclass(frozen=True)
class ModelSpec:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 2)
    blocks_per_stage: int = 1
    attention_resolutions: tuple = (16, 8)
    num_heads: int = 4
    cond_dim: int = 64
    num_content_classes: int = 6
    num_style_classes: int = 6
    num_train_timesteps: int = 1000
    norm_groups: int = 8
    param_seed: int = 0


def timestep_embedding(t, dim: int, num_train_timesteps: int, dtype=torch.float32) -> Tensor:
    """Sinusoidal embedding of integer timesteps -> [B, dim] (or [dim] for a scalar).

    Raises for timesteps outside [0, num_train_timesteps).
    """
    scalar = not torch.is_tensor(t) or t.ndim == 0
    t_arr = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if (t_arr < 0).any() or (t_arr >= num_train_timesteps).any():
        raise ValueError(
            f"timestep out of range [0, {num_train_timesteps}): {t_arr.tolist()}"
        )
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    args = t_arr.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros(emb.shape[0], 1, dtype=emb.dtype)], dim=-1)
    emb = emb.to(dtype)
    return emb[0] if scalar else emb


def _attend(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    # Batched multi-head attention on [B, n, d] tensors; the same math as
    # numerics.attention, kept batched for training throughput.
    b, n_q, d = q.shape
    n_k = k.shape[1]
    d_head = d // num_heads
    qh = q.view(b, n_q, num_heads, d_head).permute(0, 2, 1, 3)
    kh = k.view(b, n_k, num_heads, d_head).permute(0, 2, 1, 3)
    vh = v.view(b, n_k, num_heads, d_head).permute(0, 2, 1, 3)
    weights = _softmax_stable(qh @ kh.transpose(-2, -1) / math.sqrt(d_head))
    return (weights @ vh).permute(0, 2, 1, 3).reshape(b, n_q, d)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, temb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.temb_proj(torch.nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Hookable self-attention followed by cross-attention on condition tokens."""

    def __init__(self, channels, num_heads, cond_dim, groups):
        super().__init__()
        self.channels = channels
        self.num_heads = num_heads
        self.norm_self = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.proj_self = nn.Linear(channels, channels)
        self.norm_cross = nn.GroupNorm(groups, channels)
        self.to_q_cross = nn.Linear(channels, channels)
        self.to_k_cross = nn.Linear(cond_dim, channels)
        self.to_v_cross = nn.Linear(cond_dim, channels)
        self.proj_cross = nn.Linear(channels, channels)
        self.layer_id: Optional[LayerId] = None  # assigned by UNet after enumeration

    def _as_seq(self, x):
        b, c, h, w = x.shape
        return x.view(b, c, h * w).transpose(1, 2)

    def forward(self, x, cond_tokens, hook: Optional[AttentionHook] = None):
        b, c, h, w = x.shape
        seq = self._as_seq(self.norm_self(x))
        q, k, v = self.to_q(seq), self.to_k(seq), self.to_v(seq)
        if hook is not None:
            if b != 1:
                raise ValueError("attention hooks require batch size 1")
            replacement = hook(self.layer_id, q[0], k[0], v[0])
            if replacement is not None:
                q2, k2, v2 = replacement
                if q2.ndim != 2 or q2.shape != (h * w, c):
                    raise ValueError(
                        f"hook must preserve q shape ({h * w}, {c}), got {tuple(q2.shape)}"
                    )
                if k2.shape[1] != c or v2.shape[1] != c or k2.shape[0] != v2.shape[0]:
                    raise ValueError("hook returned mismatched k/v shapes")
                q, k, v = q2.unsqueeze(0), k2.unsqueeze(0), v2.unsqueeze(0)
        out = _attend(q, k, v, self.num_heads)
        x = x + self.proj_self(out).transpose(1, 2).view(b, c, h, w)

        seq = self._as_seq(self.norm_cross(x))
        qc = self.to_q_cross(seq)
        kc = self.to_k_cross(cond_tokens)
        vc = self.to_v_cross(cond_tokens)
        out = _attend(qc, kc, vc, self.num_heads)
        return x + self.proj_cross(out).transpose(1, 2).view(b, c, h, w)


class ResUnit(nn.Module):
    """One addressable block: a ResBlock optionally followed by attention."""

    def __init__(self, in_ch, out_ch, temb_dim, groups, attn: Optional[AttentionBlock]):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, temb_dim, groups)
        self.attn = attn

    def forward(self, x, temb, cond_tokens, hook):
        h = self.res(x, temb)
        if self.attn is not None:
            h = self.attn(h, cond_tokens, hook)
        return h


class Downsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class UNet(nn.Module):
    """Epsilon-prediction U-Net over [3, image_size, image_size] tensors."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        ch = [spec.base_channels * m for m in spec.channel_mult]
        resolutions = [spec.image_size // (2 ** i) for i in range(len(ch))]
        temb_dim = spec.base_channels * 4
        groups = spec.norm_groups
        attn_res = set(spec.attention_resolutions)

        self.time_mlp = nn.Sequential(
            nn.Linear(spec.base_channels, temb_dim),
            nn.SiLU(),
            nn.Linear(temb_dim, temb_dim),
        )
        self.content_emb = nn.Embedding(spec.num_content_classes, spec.cond_dim)
        self.style_emb = nn.Embedding(spec.num_style_classes, spec.cond_dim)
        self.pad_style = nn.Parameter(torch.zeros(spec.cond_dim))
        self.cond_flag = nn.Parameter(torch.zeros(spec.cond_dim))
        self.null_tokens = nn.Parameter(torch.zeros(3, spec.cond_dim))

        def make_attn(channels, res):
            if res not in attn_res:
                return None
            return AttentionBlock(channels, spec.num_heads, spec.cond_dim, groups)

        self.conv_in = nn.Conv2d(spec.in_channels, ch[0], 3, padding=1)
        self.down = nn.ModuleList()
        skip_channels = [ch[0]]
        cur = ch[0]
        for stage, out_ch in enumerate(ch):
            res = resolutions[stage]
            for _ in range(spec.blocks_per_stage):
                self.down.append(ResUnit(cur, out_ch, temb_dim, groups, make_attn(out_ch, res)))
                cur = out_ch
                skip_channels.append(cur)
            if stage != len(ch) - 1:
                self.down.append(Downsample(cur))
                skip_channels.append(cur)

        mid_res = resolutions[-1]
        self.mid = ResUnit(cur, cur, temb_dim, groups, make_attn(cur, mid_res))
        self.mid_res = ResBlock(cur, cur, temb_dim, groups)

        self.up = nn.ModuleList()
        for stage in reversed(range(len(ch))):
            out_ch = ch[stage]
            res = resolutions[stage]
            for _ in range(spec.blocks_per_stage + 1):
                in_ch = cur + skip_channels.pop()
                self.up.append(ResUnit(in_ch, out_ch, temb_dim, groups, make_attn(out_ch, res)))
                cur = out_ch
            if stage != 0:
                self.up.append(Upsample(cur))
        assert not skip_channels

        self.out_norm = nn.GroupNorm(groups, cur)
        self.out_conv = nn.Conv2d(cur, spec.in_channels, 3, padding=1)

        self._layer_ids = self._assign_layer_ids()

    def _assign_layer_ids(self):
        layer_ids = []

        def register(attn_block, section, block_index, resolution):
            lid = LayerId(len(layer_ids), BlockAddress(section, block_index), resolution)
            attn_block.layer_id = lid
            layer_ids.append(lid)

        res = self.spec.image_size
        block_index = 0
        for unit in self.down:
            if isinstance(unit, Downsample):
                res //= 2
                continue
            if unit.attn is not None:
                register(unit.attn, "down", block_index, res)
            block_index += 1
        if self.mid.attn is not None:
            register(self.mid.attn, "mid", 0, res)
        block_index = 0
        for unit in self.up:
            if isinstance(unit, Upsample):
                res *= 2
                continue
            if unit.attn is not None:
                register(unit.attn, "up", block_index, res)
            block_index += 1
        return tuple(layer_ids)

    @property
    def layer_ids(self):
        return self._layer_ids

    def cond_tokens(self, conds: Sequence[Condition]) -> Tensor:
        """Embed conditions into [B, 3, cond_dim] token stacks."""
        spec = self.spec
        rows = []
        for cond in conds:
            if cond.is_null:
                rows.append(self.null_tokens)
                continue
            if not 0 <= cond.content_id < spec.num_content_classes:
                raise ValueError(f"content_id {cond.content_id} out of range")
            content = self.content_emb.weight[cond.content_id]
            if cond.style_id is None:
                style = self.pad_style
            else:
                if not 0 <= cond.style_id < spec.num_style_classes:
                    raise ValueError(f"style_id {cond.style_id} out of range")
                style = self.style_emb.weight[cond.style_id]
            rows.append(torch.stack([content, style, self.cond_flag]))
        return torch.stack(rows)

    def forward(self, x, t, cond, hook: Optional[AttentionHook] = None):
        """Predict the noise in x_t. Accepts [3,H,W] or [B,3,H,W] inputs."""
        single = x.ndim == 3
        if single:
            x = x.unsqueeze(0)
        b = x.shape[0]
        conds = [cond] if isinstance(cond, Condition) else list(cond)
        if len(conds) != b:
            raise ValueError(f"got {len(conds)} conditions for batch of {b}")
        if hook is not None and b != 1:
            raise ValueError("attention hooks require batch size 1")
        require_finite("forward input", x)

        dtype = self.out_conv.weight.dtype
        t_tensor = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t_tensor.numel() == 1 and b > 1:
            t_tensor = t_tensor.expand(b)
        temb = self.time_mlp(
            timestep_embedding(t_tensor, self.spec.base_channels, self.spec.num_train_timesteps, dtype)
        )
        tokens = self.cond_tokens(conds)

        h = self.conv_in(x)
        skips = [h]
        for unit in self.down:
            if isinstance(unit, Downsample):
                h = unit(h)
            else:
                h = unit(h, temb, tokens, hook)
            skips.append(h)
        h = self.mid(h, temb, tokens, hook)
        h = self.mid_res(h, temb)
        for unit in self.up:
            if isinstance(unit, Upsample):
                h = unit(h)
            else:
                h = unit(torch.cat([h, skips.pop()], dim=1), temb, tokens, hook)
        assert not skips
        out = self.out_conv(torch.nn.functional.silu(self.out_norm(h)))
        require_finite("forward output", out)
        return out.squeeze(0) if single else out


def _validate_spec(spec: ModelSpec) -> None:
    if spec.image_size % (2 ** (len(spec.channel_mult) - 1)) != 0:
        raise ValueError("image_size must be divisible by the downsampling factor")
    for m in spec.channel_mult:
        if (spec.base_channels * m) % spec.norm_groups != 0:
            raise ValueError("channel widths must be divisible by norm_groups")
    resolutions = [spec.image_size // (2 ** i) for i in range(len(spec.channel_mult))]
    attn_res = set(spec.attention_resolutions)
    down_attn = any(r in attn_res for r in resolutions)
    mid_attn = resolutions[-1] in attn_res
    up_attn = sum(
        (spec.blocks_per_stage + 1) for r in resolutions if r in attn_res
    )
    if not down_attn or not mid_attn or up_attn < 2:
        raise ValueError(
            "spec must place self-attention in every section (>=1 down, >=1 mid, >=2 up)"
        )


def build_model(spec: ModelSpec) -> UNet:
    """Construct a UNet and deterministically initialize it from spec.param_seed."""
    _validate_spec(spec)
    model = UNet(spec)
    gen = torch.Generator().manual_seed(spec.param_seed)
    learned_tokens = ("pad_style", "cond_flag", "null_tokens")
    with torch.no_grad():
        for name, p in model.named_parameters():
            module_name = name.rsplit(".", 1)[0] if "." in name else ""
            if name.startswith("out_conv."):
                p.zero_()  # zero-output init keeps the step-0 training loss at E|eps|^2
            elif "norm" in module_name.rsplit(".", 1)[-1]:
                if name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            elif "content_emb" in name or "style_emb" in name or name in learned_tokens:
                p.copy_(torch.randn(p.shape, generator=gen) * 0.5)
            elif p.ndim >= 2:  # conv / linear weights: fan-in scaled normals
                fan_in = p.shape[1:].numel()
                p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(fan_in))
            else:  # biases
                p.zero_()
    return model


def enumerate_self_attention(model: UNet) -> list:
    """All self-attention LayerIds in forward-pass order (stable across calls)."""
    return list(model.layer_ids)
