"""Hybrid-attention Transformer primitives.

Tensors follow the torch (B, C, H, W) convention. The spatial attention runs
two branches over shifted rectangular windows: a native-scale branch and a
pooled branch whose queries come from proportionally larger native windows
attending to average-pooled keys/values, so the two branches see the same
spatial regions at different frequencies.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


def pad_to_window_multiple(x: torch.Tensor, mh: int, mw: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflection-pad (B, C, H, W) so H, W are multiples of (mh, mw).

    Returns the padded tensor and the original (H, W) for cropping back.
    """
    h, w = x.shape[-2:]
    ph = (-h) % mh
    pw = (-w) % mw
    if ph or pw:
        x = F.pad(x, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2), mode="reflect")
    return x, (h, w)


def crop_to(x: torch.Tensor, size: tuple[int, int], mh: int, mw: int) -> torch.Tensor:
    """Undo pad_to_window_multiple's centered padding."""
    h, w = size
    ph = (-h) % mh
    pw = (-w) % mw
    return x[..., ph // 2 : ph // 2 + h, pw // 2 : pw // 2 + w]


def window_partition(x: torch.Tensor, wh: int, ww: int, shift: bool = False) -> torch.Tensor:
    """Split (B, H, W, C) into (B * nWindows, wh * ww, C) token groups.

    With shift=True the plane is cyclically rolled by (wh//2, ww//2) first;
    window_reverse with the same flag is the exact inverse.
    """
    b, h, w, c = x.shape
    if wh > h or ww > w:
        raise ValueError(f"window ({wh},{ww}) larger than plane ({h},{w})")
    if h % wh or w % ww:
        raise ValueError(f"plane ({h},{w}) not a multiple of window ({wh},{ww})")
    if shift:
        x = torch.roll(x, shifts=(-(wh // 2), -(ww // 2)), dims=(1, 2))
    x = x.view(b, h // wh, wh, w // ww, ww, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, wh * ww, c)


def window_reverse(tokens: torch.Tensor, wh: int, ww: int, h: int, w: int, shift: bool = False) -> torch.Tensor:
    """Inverse of window_partition back to (B, H, W, C)."""
    n_windows = (h // wh) * (w // ww)
    b = tokens.shape[0] // n_windows
    c = tokens.shape[-1]
    x = tokens.view(b, h // wh, w // ww, wh, ww, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
    if shift:
        x = torch.roll(x, shifts=(wh // 2, ww // 2), dims=(1, 2))
    return x


def _region_id_map(h: int, w: int, win_h: int, win_w: int, sh: int, sw: int) -> torch.Tensor:
    # Swin-style region labels: tokens in the same label were spatially
    # contiguous before the cyclic shift; pairs across labels get masked.
    ids = torch.zeros(h, w)
    h_cuts = (0, h - win_h, h - sh, h) if sh > 0 else (0, h)
    w_cuts = (0, w - win_w, w - sw, w) if sw > 0 else (0, w)
    label = 0
    for i in range(len(h_cuts) - 1):
        for j in range(len(w_cuts) - 1):
            ids[h_cuts[i] : h_cuts[i + 1], w_cuts[j] : w_cuts[j + 1]] = label
            label += 1
    return ids


def shift_attention_mask(h: int, w: int, win_h: int, win_w: int, sh: int, sw: int) -> torch.Tensor:
    """Boolean (nWindows, N, N) mask, True where a token pair crosses the
    wrap-around seam introduced by a cyclic shift of (sh, sw)."""
    ids = _region_id_map(h, w, win_h, win_w, sh, sw)
    idw = window_partition(ids[None, :, :, None], win_h, win_w).squeeze(-1)
    return idw[:, :, None] != idw[:, None, :]


def cross_scale_attention_mask(
    h: int, w: int, win_h: int, win_w: int, sh: int, sw: int, pool: int
) -> torch.Tensor:
    """Mask between native-scale queries in (win_h*pool, win_w*pool) windows
    and pooled-scale keys in (win_h, win_w) windows; requires pool | sh, sw."""
    q_ids = _region_id_map(h, w, win_h * pool, win_w * pool, sh, sw)
    k_ids = _region_id_map(h // pool, w // pool, win_h, win_w, sh // pool, sw // pool)
    q_win = window_partition(q_ids[None, :, :, None], win_h * pool, win_w * pool).squeeze(-1)
    k_win = window_partition(k_ids[None, :, :, None], win_h, win_w).squeeze(-1)
    return q_win[:, :, None] != k_win[:, None, :]


def avg_pool(x: torch.Tensor, k: int) -> torch.Tensor:
    """Non-overlapping k x k mean over (B, C, H, W)."""
    if k == 1:
        return x
    h, w = x.shape[-2:]
    if h % k or w % k:
        raise ValueError(f"plane ({h},{w}) not divisible by pool kernel {k}")
    return F.avg_pool2d(x, k)


def _multi_head_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    mask: torch.Tensor | None,
) -> tuple[torch.Tensor, torch.Tensor]:
    # q: (B', Nq, C), k/v: (B', Nk, C); returns output and probabilities.
    bw, nq, c = q.shape
    nk = k.shape[1]
    d = c // heads
    q = q.view(bw, nq, heads, d).transpose(1, 2)
    k = k.view(bw, nk, heads, d).transpose(1, 2)
    v = v.view(bw, nk, heads, d).transpose(1, 2)
    logits = (q @ k.transpose(-2, -1)) / (d**0.5)
    if mask is not None:
        n_windows = mask.shape[0]
        logits = logits.view(bw // n_windows, n_windows, heads, nq, nk)
        logits = logits.masked_fill(mask[None, :, None, :, :], float("-inf"))
        logits = logits.view(bw, heads, nq, nk)
    attn = torch.softmax(logits, dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(bw, nq, c)
    return out, attn


class ChannelLayerNorm(nn.Module):
    """Layer normalization over the channel axis of (B, C, H, W)."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, unbiased=False, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def _pick_heads(channels: int, head_dim: int) -> int:
    heads = max(1, channels // head_dim)
    while channels % heads:
        heads -= 1
    return heads


class SpatialSelfAttention(nn.Module):
    """Dual-scale windowed self-attention (S-SA).

    The high-frequency branch attends within (wh, ww) windows at native
    resolution. The low-frequency branch takes queries from (wh*pool,
    ww*pool) native windows and keys/values from (wh, ww) windows of the
    pool-averaged map. Branch outputs are projected and channel-concatenated;
    the channel budget is split evenly when both branches are active.
    """

    def __init__(
        self,
        dim: int,
        window: tuple[int, int] = (4, 16),
        pool: int = 2,
        head_dim: int = 16,
        shift: bool = False,
        hf: bool = True,
        lf: bool = True,
    ):
        super().__init__()
        if not (hf or lf):
            raise ValueError("at least one attention branch must be enabled")
        # Each branch works at half width; disabling one keeps the survivor
        # at half width and lets only its output projection span the full
        # channel budget, so an ablation removes real attention capacity.
        half = max(1, dim // 2)
        c1 = half if hf else 0
        c2 = (dim - half if hf else half) if lf else 0
        if hf and lf and c1 + c2 != dim:
            raise ValueError(f"branch channels {c1}+{c2} != {dim}")
        self.dim = dim
        self.window = tuple(window)
        self.pool = pool if lf else 1
        self.shift = shift
        self.c1, self.c2 = c1, c2
        self.heads_h = _pick_heads(c1, head_dim) if c1 else 0
        self.heads_l = _pick_heads(c2, head_dim) if c2 else 0
        if c1:
            self.q_h = nn.Linear(dim, c1, bias=False)
            self.k_h = nn.Linear(dim, c1, bias=False)
            self.v_h = nn.Linear(dim, c1, bias=False)
            self.proj_h = nn.Linear(c1, c1 if lf else dim, bias=False)
        if c2:
            self.q_l = nn.Linear(dim, c2, bias=False)
            self.k_l = nn.Linear(dim, c2, bias=False)
            self.v_l = nn.Linear(dim, c2, bias=False)
            self.proj_l = nn.Linear(c2, c2 if hf else dim, bias=False)

    def _geometry(self, h0: int, w0: int) -> tuple[int, int, int]:
        # Clamp windows so the largest (low-frequency query) window fits the
        # feature map; coarse U-levels then fall back to near-global windows.
        s = self.pool
        wh = max(1, min(self.window[0], h0 // s if h0 >= s else 1))
        ww = max(1, min(self.window[1], w0 // s if w0 >= s else 1))
        return wh, ww, s

    def forward(self, x, return_attn: bool = False):
        h0, w0 = x.shape[-2:]
        wh, ww, s = self._geometry(h0, w0)
        x, size0 = pad_to_window_multiple(x, wh * s, ww * s)
        h, w = x.shape[-2:]

        sh = sw = 0
        if self.shift:
            sh = (wh // 2) - (wh // 2) % s
            sw = (ww // 2) - (ww // 2) % s
            if wh >= h:
                sh = 0
            if ww >= w:
                sw = 0
        if sh or sw:
            x = torch.roll(x, shifts=(-sh, -sw), dims=(-2, -1))

        xl = x.permute(0, 2, 3, 1)
        outs = []
        attn_maps = {}

        if self.c1:
            mask = shift_attention_mask(h, w, wh, ww, sh, sw).to(x.device) if (sh or sw) else None
            q = window_partition(self.q_h(xl), wh, ww)
            k = window_partition(self.k_h(xl), wh, ww)
            v = window_partition(self.v_h(xl), wh, ww)
            e, attn = _multi_head_attention(q, k, v, self.heads_h, mask)
            e = window_reverse(e, wh, ww, h, w)
            outs.append(self.proj_h(e))
            attn_maps["high"] = attn

        if self.c2:
            xp = avg_pool(x, s).permute(0, 2, 3, 1)
            mask = (
                cross_scale_attention_mask(h, w, wh, ww, sh, sw, s).to(x.device)
                if (sh or sw)
                else None
            )
            q = window_partition(self.q_l(xl), wh * s, ww * s)
            k = window_partition(self.k_l(xp), wh, ww)
            v = window_partition(self.v_l(xp), wh, ww)
            e, attn = _multi_head_attention(q, k, v, self.heads_l, mask)
            e = window_reverse(e, wh * s, ww * s, h, w)
            outs.append(self.proj_l(e))
            attn_maps["low"] = attn

        out = torch.cat(outs, dim=-1).permute(0, 3, 1, 2)
        if sh or sw:
            out = torch.roll(out, shifts=(sh, sw), dims=(-2, -1))
        out = crop_to(out, size0, wh * s, ww * s)
        if return_attn:
            return out, attn_maps
        return out


class ChannelSelfAttention(nn.Module):
    """Per-channel multiplicative gate from globally pooled features (C-SA)."""

    def __init__(self, dim: int, beta: int = 16):
        super().__init__()
        if dim % beta:
            raise ValueError(f"channels {dim} not divisible by shrink factor {beta}")
        hidden = dim // beta
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        gate = x.mean(dim=(2, 3))
        gate = torch.sigmoid(self.fc2(F.relu(self.fc1(gate))))
        return x * gate[:, :, None, None]


class FeedForward(nn.Module):
    """1x1 expand -> GELU -> 3x3 depthwise -> 1x1 reduce."""

    def __init__(self, dim: int, expansion: int = 2):
        super().__init__()
        hidden = dim * expansion
        self.expand = nn.Conv2d(dim, hidden, 1)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.reduce = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        return self.reduce(self.dwconv(F.gelu(self.expand(x))))


class HatBlock(nn.Module):
    """Residual S-SA followed by a residual C-SA-gated FFN, pre-normalized."""

    def __init__(
        self,
        dim: int,
        window: tuple[int, int] = (4, 16),
        pool: int = 2,
        head_dim: int = 16,
        beta: int = 16,
        expansion: int = 2,
        shift: bool = False,
        hf: bool = True,
        lf: bool = True,
        use_csa: bool = True,
    ):
        super().__init__()
        self.norm1 = ChannelLayerNorm(dim)
        self.attn = SpatialSelfAttention(
            dim, window=window, pool=pool, head_dim=head_dim, shift=shift, hf=hf, lf=lf
        )
        self.norm2 = ChannelLayerNorm(dim)
        self.ffn = FeedForward(dim, expansion)
        self.csa = ChannelSelfAttention(dim, beta) if use_csa else None

    def forward(self, x):
        y = x + self.attn(self.norm1(x))
        z = self.ffn(self.norm2(y))
        if self.csa is not None:
            z = self.csa(z)
        return y + z


class Downsample(nn.Module):
    """2x2 stride-2 convolution halving the grid and doubling channels."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv2d(dim, 2 * dim, 2, stride=2)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"downsample needs even dims, got ({h},{w})")
        return self.conv(x)


class Upsample(nn.Module):
    """1x1 convolution doubling channels, then a 2x pixel shuffle.

    The channel block at index r*2+c lands at spatial offset (r, c), matching
    torch's pixel_shuffle layout.
    """

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ValueError(f"upsample needs even channel count, got {dim}")
        self.conv = nn.Conv2d(dim, 2 * dim, 1)

    def forward(self, x):
        return F.pixel_shuffle(self.conv(x), 2)
