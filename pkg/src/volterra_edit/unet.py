"""Desk-scale pixel-space U-Net used as the frozen base denoiser.

Encoder is organized as 6 stages (3 resolutions x 2 blocks); each stage
output is an exchange point where an adapter may splice in fused features
via the `exchange` callback. Text conditioning is added to the timestep
embedding.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def _groups(c):
    return 4 if c % 4 == 0 else 1


class ResBlock(nn.Module):
    """Conv block with scale-and-shift conditioning: a t-dependent gain is
    needed to express the noising arithmetic at desk-scale capacity."""

    def __init__(self, c_in, c_out, cond_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(cond_dim, 2 * c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, cond):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(cond)[:, :, None, None].chunk(2, dim=1)
        h = h * (1.0 + scale) + shift
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class EncoderStage(nn.Module):
    """Optional stride-2 downsample followed by one ResBlock."""

    def __init__(self, c_in, c_out, cond_dim, downsample):
        super().__init__()
        self.down = nn.Conv2d(c_in, c_in, 3, stride=2, padding=1) if downsample else None
        self.block = ResBlock(c_in, c_out, cond_dim)
        self.c_out = c_out

    def forward(self, x, cond):
        if self.down is not None:
            x = self.down(x)
        return self.block(x, cond)


class DecoderStage(nn.Module):
    """ResBlock over [h, skip] concat, optional 2x upsample afterwards."""

    def __init__(self, c_in, c_skip, c_out, cond_dim, upsample):
        super().__init__()
        self.block = ResBlock(c_in + c_skip, c_out, cond_dim)
        self.up = nn.Conv2d(c_out, c_out, 3, padding=1) if upsample else None

    def forward(self, x, skip, cond):
        x = self.block(torch.cat([x, skip], dim=1), cond)
        if self.up is not None:
            x = self.up(F.interpolate(x, scale_factor=2, mode="nearest"))
        return x


class CondEmbed(nn.Module):
    """Sinusoidal timestep embedding -> MLP, with text embedding added."""

    def __init__(self, cond_dim, text_dim):
        super().__init__()
        self.cond_dim = cond_dim
        self.lin1 = nn.Linear(cond_dim, cond_dim)
        self.lin2 = nn.Linear(cond_dim, cond_dim)
        self.text = nn.Linear(text_dim, cond_dim)

    def forward(self, t, text_emb=None):
        half = self.cond_dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
        ang = t.float()[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
        h = self.lin2(F.silu(self.lin1(emb)))
        if text_emb is not None:
            h = h + self.text(text_emb)
        return h


# (c_in_idx, c_out_idx, downsample) per encoder stage; indexes into `widths`
_STAGE_PLAN = [(0, 0, False), (0, 0, False), (0, 1, True),
               (1, 1, False), (1, 2, True), (2, 2, False)]


def stage_channels(widths):
    """[(c_in, c_out, downsample), ...] for the 6 encoder stages."""
    if len(widths) != 3:
        raise ValueError(f"expected 3 resolution widths, got {widths}")
    return [(widths[a], widths[b], d) for a, b, d in _STAGE_PLAN]


class ToyUNet(nn.Module):
    def __init__(self, in_ch=3, widths=(16, 24, 32), cond_dim=64, text_dim=64):
        super().__init__()
        self.in_ch = in_ch
        self.widths = tuple(widths)
        self.cond_dim = cond_dim
        self.text_dim = text_dim
        w0, w1, w2 = widths

        self.cond = CondEmbed(cond_dim, text_dim)
        self.stem = nn.Conv2d(in_ch, w0, 3, padding=1)
        self.enc = nn.ModuleList(
            EncoderStage(ci, co, cond_dim, down) for ci, co, down in stage_channels(widths))
        self.mid = ResBlock(w2, w2, cond_dim)
        # consumes skips in reverse stage order (s5 ... s0)
        self.dec = nn.ModuleList([
            DecoderStage(w2, w2, w2, cond_dim, upsample=False),
            DecoderStage(w2, w2, w1, cond_dim, upsample=True),
            DecoderStage(w1, w1, w1, cond_dim, upsample=False),
            DecoderStage(w1, w1, w0, cond_dim, upsample=True),
            DecoderStage(w0, w0, w0, cond_dim, upsample=False),
            DecoderStage(w0, w0, w0, cond_dim, upsample=False),
        ])
        self.out_norm = nn.GroupNorm(_groups(w0), w0)
        self.out_conv = nn.Conv2d(w0, in_ch, 3, padding=1)

    @property
    def num_exchange_points(self):
        return len(self.enc)

    def forward(self, z, t, text_emb=None, exchange=None):
        """Noise prediction. `exchange(i, features, cond)` may replace each
        encoder stage output; identity when None (base-only forward)."""
        cond = self.cond(t, text_emb)
        x = self.stem(z)
        skips = []
        for i, stage in enumerate(self.enc):
            x = stage(x, cond)
            if exchange is not None:
                x = exchange(i, x, cond)
            skips.append(x)
        x = self.mid(x, cond)
        for dstage in self.dec:
            x = dstage(x, skips.pop(), cond)
        return self.out_conv(F.silu(self.out_norm(x)))
