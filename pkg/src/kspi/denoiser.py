"""Per-stage U-shaped denoiser built from hybrid-attention blocks.

Three levels with channel counts C, 2C, 4C and one HATB per level on each
side. The stage output is a global residual over its input. Decoder features
of all three levels are exported as a cross-stage bundle; the next stage
fuses them into its encoder so later stages can reuse earlier features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .blocks import Downsample, HatBlock, Upsample, crop_to, pad_to_window_multiple


@dataclass
class DenoiserConfig:
    """Architecture knobs for one stage denoiser."""

    channels: int = 32
    window: tuple[int, int] = (4, 16)
    pool: int = 2
    head_dim: int = 16
    csa_beta: int = 16
    ffn_expansion: int = 2
    blocks_per_level: tuple[int, int, int] = (1, 1, 1)
    use_cssc: bool = True
    use_hf: bool = True
    use_lf: bool = True
    use_csa: bool = True

    def level_channels(self, level: int) -> int:
        return self.channels * 2**level

    def level_beta(self, level: int) -> int:
        return math.gcd(self.csa_beta, self.level_channels(level))


def _fuse(in_ch: int, out_ch: int) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 1)


class StageDenoiser(nn.Module):
    """U-shaped encoder-decoder over HATBs with a global residual.

    forward(z, cssc_in) -> (x, cssc_out) where cssc_* are per-level decoder
    feature lists [level0 (C, H, W), level1 (2C, H/2, W/2), level2 (4C, H/4,
    W/4)]. Stage 1 passes cssc_in=None and skips cross-stage fusion; shapes
    are stage-invariant, so a bundle can be fed to any stage with the same
    config and input grid.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels

        def blocks(level: int, shift: bool) -> nn.Sequential:
            dim = cfg.level_channels(level)
            return nn.Sequential(
                *[
                    HatBlock(
                        dim,
                        window=cfg.window,
                        pool=cfg.pool,
                        head_dim=cfg.head_dim,
                        beta=cfg.level_beta(level),
                        expansion=cfg.ffn_expansion,
                        shift=shift,
                        hf=cfg.use_hf,
                        lf=cfg.use_lf,
                        use_csa=cfg.use_csa,
                    )
                    for _ in range(cfg.blocks_per_level[level])
                ]
            )

        self.embed = nn.Conv2d(1, c, 3, padding=1)
        # Half-window shifted attention runs on the decoder side only.
        self.enc0 = blocks(0, shift=False)
        self.down0 = Downsample(c)
        self.enc1 = blocks(1, shift=False)
        self.down1 = Downsample(2 * c)
        self.bottleneck = blocks(2, shift=False)
        self.up1 = Upsample(4 * c)
        self.dec_fuse1 = _fuse(4 * c, 2 * c)
        self.dec1 = blocks(1, shift=True)
        self.up0 = Upsample(2 * c)
        self.dec_fuse0 = _fuse(2 * c, c)
        self.dec0 = blocks(0, shift=True)
        self.out_conv = nn.Conv2d(c, 1, 3, padding=1)
        if cfg.use_cssc:
            self.cssc_fuse = nn.ModuleList(
                [_fuse(2 * cfg.level_channels(lv), cfg.level_channels(lv)) for lv in range(3)]
            )

    def forward(
        self, z: torch.Tensor, cssc_in: list[torch.Tensor] | None = None
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if z.ndim != 4 or z.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) input, got {tuple(z.shape)}")
        zp, size0 = pad_to_window_multiple(z, 4, 4)

        def merge(level: int, feat: torch.Tensor) -> torch.Tensor:
            if cssc_in is None or not self.cfg.use_cssc:
                return feat
            prev = cssc_in[level]
            if prev.shape != feat.shape:
                raise ValueError(
                    f"cross-stage feature level {level} has shape {tuple(prev.shape)}, "
                    f"expected {tuple(feat.shape)}"
                )
            return self.cssc_fuse[level](torch.cat([feat, prev], dim=1))

        e0 = self.enc0(merge(0, self.embed(zp)))
        e1 = self.enc1(merge(1, self.down0(e0)))
        b = self.bottleneck(merge(2, self.down1(e1)))
        d1 = self.dec1(self.dec_fuse1(torch.cat([self.up1(b), e1], dim=1)))
        d0 = self.dec0(self.dec_fuse0(torch.cat([self.up0(d1), e0], dim=1)))
        x = zp + self.out_conv(d0)
        return crop_to(x, size0, 4, 4), [d0, d1, b]
