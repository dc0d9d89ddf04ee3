"""Deterministic tensor kernels shared by the model, the swap engine and the analysis tools.

Everything operates on plain ``torch.Tensor`` values (contiguous, row-major)
and follows the input dtype, so converting a model with ``.double()`` switches
the whole pipeline to 64-bit for oracle and gradient-check runs. All kernels
are pure functions: no internal state, safe to call concurrently, and
bit-deterministic for a fixed build and thread count.

Non-finite values (NaN/Inf) are treated as errors, not data: the public
operations here raise if they appear in inputs or outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

Tensor = torch.Tensor


def require_finite(name: str, x: Tensor) -> None:
    """Raise ValueError if ``x`` contains NaN or Inf."""
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


def _softmax_stable(logits: Tensor) -> Tensor:
    # Max subtraction along the last dim; exact for constant rows.
    z = logits - logits.amax(dim=-1, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilized by per-row max subtraction."""
    if x.ndim != 2:
        raise ValueError(f"softmax_rows expects a 2-D tensor, got shape {tuple(x.shape)}")
    require_finite("softmax_rows input", x)
    out = _softmax_stable(x)
    require_finite("softmax_rows output", out)
    return out


@dataclass(frozen=True)
class AttentionTriple:
    """Query/key/value bundle: q [n_q, d], k [n_k, d], v [n_k, d_v]."""

    q: Tensor
    k: Tensor
    v: Tensor

    def __post_init__(self):
        if self.q.ndim != 2 or self.k.ndim != 2 or self.v.ndim != 2:
            raise ValueError("attention inputs must be 2-D")
        if self.q.shape[1] != self.k.shape[1]:
            raise ValueError(
                f"q and k feature dims differ: {self.q.shape[1]} vs {self.k.shape[1]}"
            )
        if self.k.shape[0] != self.v.shape[0]:
            raise ValueError(
                f"k and v row counts differ: {self.k.shape[0]} vs {self.v.shape[0]}"
            )


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    scale: float | None = None,
    num_heads: int = 1,
) -> Tensor:
    """Scaled dot-product attention ``softmax(q k^T * scale) v`` -> [n_q, d_v].

    With ``num_heads > 1`` the feature dimension is sliced into equal head
    chunks, attended independently, and re-concatenated; ``scale`` defaults to
    ``1/sqrt(d_head)``. Each output row is a convex combination of rows of v.
    """
    AttentionTriple(q, k, v)
    require_finite("attention q", q)
    require_finite("attention k", k)
    require_finite("attention v", v)
    n_q, d = q.shape
    n_k, d_v = v.shape
    if d % num_heads != 0 or d_v % num_heads != 0:
        raise ValueError(f"feature dims ({d}, {d_v}) not divisible by num_heads={num_heads}")
    d_head = d // num_heads
    if scale is None:
        scale = 1.0 / math.sqrt(d_head)
    if scale <= 0:
        raise ValueError("scale must be positive")
    qh = q.view(n_q, num_heads, d_head).permute(1, 0, 2)
    kh = k.view(n_k, num_heads, d_head).permute(1, 0, 2)
    vh = v.view(n_k, num_heads, d_v // num_heads).permute(1, 0, 2)
    weights = _softmax_stable(qh @ kh.transpose(-2, -1) * scale)
    out = (weights @ vh).permute(1, 0, 2).reshape(n_q, d_v)
    require_finite("attention output", out)
    return out


def attention_weights(q: Tensor, k: Tensor, scale: float | None = None, num_heads: int = 1) -> Tensor:
    """Per-head attention maps ``softmax(q k^T * scale)`` -> [num_heads, n_q, n_k]."""
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ValueError("attention_weights expects 2-D q, k with matching feature dims")
    require_finite("attention_weights q", q)
    require_finite("attention_weights k", k)
    d = q.shape[1]
    if d % num_heads != 0:
        raise ValueError(f"feature dim {d} not divisible by num_heads={num_heads}")
    d_head = d // num_heads
    if scale is None:
        scale = 1.0 / math.sqrt(d_head)
    qh = q.view(q.shape[0], num_heads, d_head).permute(1, 0, 2)
    kh = k.view(k.shape[0], num_heads, d_head).permute(1, 0, 2)
    return _softmax_stable(qh @ kh.transpose(-2, -1) * scale)


def adain(x: Tensor, y: Tensor, eps: float = 1e-5) -> Tensor:
    """Match x's per-column mean/std to y's (adaptive instance normalization).

    x [n, d], y [m, d]; uses the sample standard deviation, so both inputs
    need at least two rows.
    """
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("adain expects 2-D tensors")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"adain feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("adain needs at least 2 rows in each input (statistics undefined)")
    require_finite("adain x", x)
    require_finite("adain y", y)
    # clamped (not shifted) denominator so matching statistics give an exact
    # identity: std_y / max(std_x, eps) == 1.0 whenever the stds coincide
    scale = y.std(dim=0) / x.std(dim=0).clamp_min(eps)
    out = (x - x.mean(dim=0)) * scale + y.mean(dim=0)
    require_finite("adain output", out)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x [..., in], weight [out, in]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear shape mismatch: x {tuple(x.shape)} vs weight {tuple(weight.shape)}"
        )
    return F.linear(x, weight, bias)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int | str = "same",
) -> Tensor:
    """2-D convolution; defaults to stride-1 same-padding for odd kernels.

    x [B, C_in, H, W] (or unbatched [C_in, H, W]), weight [C_out, C_in, kH, kW].
    """
    unbatched = x.ndim == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d shape mismatch: x {tuple(x.shape)} vs weight {tuple(weight.shape)}"
        )
    if padding == "same":
        if weight.shape[2] % 2 == 0 or weight.shape[3] % 2 == 0:
            raise ValueError("same padding requires odd kernel sizes")
        padding = (weight.shape[2] // 2, weight.shape[3] // 2)
    out = F.conv2d(x, weight, bias, stride=stride, padding=padding)
    return out.squeeze(0) if unbatched else out


def group_norm(
    x: Tensor,
    num_groups: int,
    weight: Tensor | None = None,
    bias: Tensor | None = None,
    eps: float = 1e-5,
) -> Tensor:
    """Group normalization over channel groups of x [B, C, ...]."""
    if x.shape[1] % num_groups != 0:
        raise ValueError(f"channels {x.shape[1]} not divisible by num_groups={num_groups}")
    return F.group_norm(x, num_groups, weight, bias, eps)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    return x * torch.sigmoid(x)
